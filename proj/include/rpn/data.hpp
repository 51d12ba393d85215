#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

// Session dataset ingestion and preparation. The on-disk inputs are CSVs
// with header `session_id,timestamp,item_id`; prepared datasets are written
// as a binary container with magic RPNDATA1.

namespace rpn {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct ParseError : DataError {
  explicit ParseError(const std::string& m) : DataError(m) {}
};
struct VocabularyError : DataError {
  explicit VocabularyError(const std::string& m) : DataError(m) {}
};

struct Session {
  std::string id;
  std::vector<std::size_t> items;  // dense vocabulary indices, time order
  std::int64_t start_time = 0;
  std::size_t file_order = 0;
};

struct Vocabulary {
  std::vector<std::string> id_of;
  std::unordered_map<std::string, std::size_t> index_of;
  std::vector<std::uint64_t> freq;

  std::size_t size() const { return id_of.size(); }
  std::size_t add(const std::string& id);
  std::optional<std::size_t> lookup(const std::string& id) const;
  std::uint64_t hash() const;  // FNV-1a over ids and frequencies
};

struct PrefixExample {
  std::vector<std::size_t> prefix;
  std::size_t target = 0;
  bool is_repeat = false;  // target appears in prefix
};

struct DatasetSplit {
  std::vector<Session> train;
  std::vector<Session> validation;
  std::vector<Session> test;
  Vocabulary vocab;  // freq counted over training clicks
};

struct IngestOptions {
  std::size_t min_item_count = 5;
  std::size_t min_session_len = 2;
  std::optional<std::size_t> max_session_len;
};

struct IngestResult {
  std::vector<Session> sessions;  // chronological by session start
  Vocabulary vocab;
};

// Filters items below min_item_count, then sessions outside the length
// range, repeating the pair of filters until stable so that re-ingesting
// the output is a no-op. Throws ParseError with file/line context and
// DataError when nothing survives.
IngestResult ingest(const std::string& csv_path, const IngestOptions& opts = {});
IngestResult ingest_stream(std::istream& in, const std::string& origin,
                           const IngestOptions& opts = {});

// session [i1..it] -> t-1 examples, prefix [i1..ik] -> target i(k+1)
std::vector<PrefixExample> unroll(const std::vector<Session>& sessions);

// fraction of examples whose target already occurs in the prefix
double repeat_ratio(const std::vector<PrefixExample>& examples);

struct SynthOptions {
  std::size_t num_items = 50;
  std::size_t num_sessions = 1000;
  std::size_t len_min = 3;
  std::size_t len_max = 10;
  double repeat_prob = 0.5;
  double zipf_exponent = 1.0;
  std::uint64_t seed = 42;
};

// Each next item repeats a uniformly chosen prefix position with probability
// repeat_prob, otherwise draws from a Zipf popularity law over all items.
// Deterministic in the seed.
std::vector<Session> synthesize(const SynthOptions& opts);

// item-id strings used when round-tripping synthetic sessions through CSV
std::string synth_item_id(std::size_t index);

void write_sessions_csv(const std::string& path,
                        const std::vector<Session>& sessions,
                        const std::vector<std::string>& item_ids);

enum class SplitMode { chronological, random };

// ratios like {8,1,1}; splits by session, preserving chronological order
// inside each split; vocabulary frequencies are recounted on train clicks
DatasetSplit split_sessions(std::vector<Session> sessions, Vocabulary vocab,
                            const std::array<std::size_t, 3>& ratios,
                            SplitMode mode, std::uint64_t seed);

struct Batch {
  std::size_t size = 0;
  std::size_t max_len = 0;
  std::size_t pad_index = 0;
  std::vector<std::size_t> items;    // size*max_len, row-major, padded
  std::vector<std::uint8_t> valid;   // 1 where a real position
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> targets;
  std::vector<std::uint8_t> is_repeat;

  std::size_t item_at(std::size_t b, std::size_t t) const {
    return items[b * max_len + t];
  }
  bool valid_at(std::size_t b, std::size_t t) const {
    return valid[b * max_len + t] != 0;
  }
};

// Buckets examples by prefix length (stable) before chunking so padding
// waste stays bounded. Batch order follows the bucketed order; shuffling is
// the caller's job.
std::vector<Batch> make_batches(const std::vector<PrefixExample>& examples,
                                std::size_t batch_size, std::size_t pad_index);

// maps raw item ids through the vocabulary, dropping unknowns
std::vector<std::size_t> map_items(const Vocabulary& vocab,
                                   const std::vector<std::string>& ids,
                                   std::vector<std::string>* dropped = nullptr);

void save_dataset(const std::string& path, const DatasetSplit& split);
DatasetSplit load_dataset(const std::string& path);

}  // namespace rpn
