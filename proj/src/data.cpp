#include "rpn/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "rpn/tensor.hpp"  // ContractError

namespace rpn {

namespace {

constexpr char kCsvHeader[] = "session_id,timestamp,item_id";
constexpr char kDatasetMagic[9] = "RPNDATA1";

double unit_double(std::uint64_t raw) {
  return static_cast<double>(raw >> 11) * 0x1.0p-53;
}

std::size_t bounded(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

struct RawRow {
  std::string session;
  std::int64_t ts = 0;
  bool has_ts = false;
  std::string item;
};

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::size_t Vocabulary::add(const std::string& id) {
  auto it = index_of.find(id);
  if (it != index_of.end()) return it->second;
  const std::size_t idx = id_of.size();
  id_of.push_back(id);
  index_of.emplace(id, idx);
  freq.push_back(0);
  return idx;
}

std::optional<std::size_t> Vocabulary::lookup(const std::string& id) const {
  auto it = index_of.find(id);
  if (it == index_of.end()) return std::nullopt;
  return it->second;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](unsigned char byte) {
    h ^= byte;
    h *= 0x100000001b3ull;
  };
  for (std::size_t i = 0; i < id_of.size(); ++i) {
    for (char c : id_of[i]) mix(static_cast<unsigned char>(c));
    mix(0);
    const std::uint64_t f = freq[i];
    for (int b = 0; b < 8; ++b) mix(static_cast<unsigned char>(f >> (8 * b)));
  }
  return h;
}

IngestResult ingest(const std::string& csv_path, const IngestOptions& opts) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open " + csv_path);
  return ingest_stream(in, csv_path, opts);
}

IngestResult ingest_stream(std::istream& in, const std::string& origin,
                           const IngestOptions& opts) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(origin + ": empty file");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader)
    throw ParseError(origin + ":1: expected header '" + kCsvHeader + "'");

  std::vector<RawRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != 3)
      throw ParseError(origin + ":" + std::to_string(lineno) +
                       ": expected 3 fields, got " +
                       std::to_string(fields.size()));
    RawRow row;
    row.session = fields[0];
    row.item = fields[2];
    if (row.session.empty())
      throw ParseError(origin + ":" + std::to_string(lineno) +
                       ": empty session_id");
    if (row.item.empty())
      throw ParseError(origin + ":" + std::to_string(lineno) +
                       ": empty item_id");
    if (!fields[1].empty()) {
      try {
        std::size_t pos = 0;
        row.ts = std::stoll(fields[1], &pos);
        if (pos != fields[1].size()) throw std::invalid_argument("trailing");
        row.has_ts = true;
      } catch (const std::exception&) {
        throw ParseError(origin + ":" + std::to_string(lineno) +
                         ": bad timestamp '" + fields[1] + "'");
      }
    }
    rows.push_back(std::move(row));
  }

  // group rows by session id in order of first appearance
  std::unordered_map<std::string, std::size_t> session_index;
  std::vector<std::vector<RawRow>> grouped;
  for (auto& row : rows) {
    auto [it, inserted] = session_index.emplace(row.session, grouped.size());
    if (inserted) grouped.emplace_back();
    grouped[it->second].push_back(std::move(row));
  }

  struct WorkingSession {
    std::string id;
    std::vector<std::string> items;
    std::int64_t start_time = 0;
    std::size_t file_order = 0;
  };
  std::vector<WorkingSession> sessions;
  sessions.reserve(grouped.size());
  for (std::size_t i = 0; i < grouped.size(); ++i) {
    auto& srows = grouped[i];
    // timestamp-ascending; rows without timestamps keep file order
    std::stable_sort(srows.begin(), srows.end(),
                     [](const RawRow& a, const RawRow& b) {
                       const auto ka =
                           a.has_ts ? a.ts
                                    : std::numeric_limits<std::int64_t>::min();
                       const auto kb =
                           b.has_ts ? b.ts
                                    : std::numeric_limits<std::int64_t>::min();
                       return ka < kb;
                     });
    WorkingSession ws;
    ws.id = srows.front().session;
    ws.file_order = i;
    ws.start_time = srows.front().has_ts ? srows.front().ts
                                         : static_cast<std::int64_t>(i);
    for (auto& r : srows) ws.items.push_back(std::move(r.item));
    sessions.push_back(std::move(ws));
  }

  // Removing rare items can push sessions below the length floor, and
  // dropping those sessions lowers item counts again, so the two filters
  // iterate to a fixed point.
  for (;;) {
    std::unordered_map<std::string, std::uint64_t> counts;
    for (const auto& s : sessions)
      for (const auto& item : s.items) ++counts[item];

    bool changed = false;
    for (auto& s : sessions) {
      auto kept = std::remove_if(s.items.begin(), s.items.end(),
                                 [&](const std::string& item) {
                                   return counts[item] < opts.min_item_count;
                                 });
      if (kept != s.items.end()) {
        s.items.erase(kept, s.items.end());
        changed = true;
      }
    }
    auto sess_end =
        std::remove_if(sessions.begin(), sessions.end(),
                       [&](const WorkingSession& s) {
                         return s.items.size() < opts.min_session_len ||
                                (opts.max_session_len &&
                                 s.items.size() > *opts.max_session_len);
                       });
    if (sess_end != sessions.end()) {
      sessions.erase(sess_end, sessions.end());
      changed = true;
    }
    if (!changed) break;
  }

  if (sessions.empty())
    throw DataError(origin + ": empty dataset after filtering");

  std::stable_sort(sessions.begin(), sessions.end(),
                   [](const WorkingSession& a, const WorkingSession& b) {
                     if (a.start_time != b.start_time)
                       return a.start_time < b.start_time;
                     return a.file_order < b.file_order;
                   });

  IngestResult result;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    Session out;
    out.id = std::move(sessions[i].id);
    out.start_time = sessions[i].start_time;
    out.file_order = i;
    for (const auto& item : sessions[i].items) {
      const std::size_t idx = result.vocab.add(item);
      result.vocab.freq[idx] += 1;
      out.items.push_back(idx);
    }
    result.sessions.push_back(std::move(out));
  }
  return result;
}

std::vector<PrefixExample> unroll(const std::vector<Session>& sessions) {
  std::vector<PrefixExample> out;
  for (const auto& s : sessions) {
    for (std::size_t k = 1; k < s.items.size(); ++k) {
      PrefixExample ex;
      ex.prefix.assign(s.items.begin(),
                       s.items.begin() + static_cast<std::ptrdiff_t>(k));
      ex.target = s.items[k];
      ex.is_repeat = std::find(ex.prefix.begin(), ex.prefix.end(),
                               ex.target) != ex.prefix.end();
      out.push_back(std::move(ex));
    }
  }
  return out;
}

double repeat_ratio(const std::vector<PrefixExample>& examples) {
  if (examples.empty()) throw DataError("repeat_ratio: no examples");
  std::size_t repeats = 0;
  for (const auto& ex : examples) repeats += ex.is_repeat ? 1 : 0;
  return static_cast<double>(repeats) / static_cast<double>(examples.size());
}

std::string synth_item_id(std::size_t index) {
  return "i" + std::to_string(index + 1);
}

std::vector<Session> synthesize(const SynthOptions& opts) {
  if (opts.num_items < 2)
    throw ContractError("synthesize: need at least 2 items");
  if (opts.num_sessions < 1)
    throw ContractError("synthesize: need at least 1 session");
  if (opts.len_min < 1 || opts.len_min > opts.len_max)
    throw ContractError("synthesize: bad length range [" +
                        std::to_string(opts.len_min) + "," +
                        std::to_string(opts.len_max) + "]");
  if (opts.repeat_prob < 0.0 || opts.repeat_prob > 1.0)
    throw ContractError("synthesize: repeat_prob must be in [0,1]");

  // popularity CDF: weight of rank k is k^-zipf_exponent
  std::vector<double> cdf(opts.num_items);
  double total = 0.0;
  for (std::size_t k = 0; k < opts.num_items; ++k) {
    total += std::pow(static_cast<double>(k + 1), -opts.zipf_exponent);
    cdf[k] = total;
  }
  for (auto& c : cdf) c /= total;

  std::mt19937_64 rng(opts.seed);
  auto zipf_draw = [&]() -> std::size_t {
    const double u = unit_double(rng());
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    return static_cast<std::size_t>(std::min<std::ptrdiff_t>(
        it - cdf.begin(), static_cast<std::ptrdiff_t>(opts.num_items) - 1));
  };

  std::vector<Session> out;
  out.reserve(opts.num_sessions);
  for (std::size_t n = 0; n < opts.num_sessions; ++n) {
    const std::size_t len =
        opts.len_min + bounded(rng, opts.len_max - opts.len_min + 1);
    Session s;
    s.id = "s" + std::to_string(n + 1);
    s.start_time = static_cast<std::int64_t>((n + 1) * 1000);
    s.file_order = n;
    for (std::size_t i = 0; i < len; ++i) {
      if (!s.items.empty() && unit_double(rng()) < opts.repeat_prob) {
        s.items.push_back(s.items[bounded(rng, s.items.size())]);
      } else {
        s.items.push_back(zipf_draw());
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_sessions_csv(const std::string& path,
                        const std::vector<Session>& sessions,
                        const std::vector<std::string>& item_ids) {
  std::ofstream out(path, std::ios::binary);  // binary: byte-identical output
  if (!out) throw DataError("cannot write " + path);
  out << kCsvHeader << '\n';
  for (const auto& s : sessions) {
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      const std::size_t idx = s.items[i];
      if (idx >= item_ids.size())
        throw VocabularyError("write_sessions_csv: index " +
                              std::to_string(idx) + " has no item id");
      out << s.id << ',' << (s.start_time + static_cast<std::int64_t>(i))
          << ',' << item_ids[idx] << '\n';
    }
  }
  if (!out) throw DataError("write failed: " + path);
}

DatasetSplit split_sessions(std::vector<Session> sessions, Vocabulary vocab,
                            const std::array<std::size_t, 3>& ratios,
                            SplitMode mode, std::uint64_t seed) {
  const std::size_t total = sessions.size();
  const std::size_t denom = ratios[0] + ratios[1] + ratios[2];
  if (denom == 0) throw ContractError("split: zero ratio sum");
  if (total == 0) throw DataError("split: no sessions");

  std::stable_sort(sessions.begin(), sessions.end(),
                   [](const Session& a, const Session& b) {
                     if (a.start_time != b.start_time)
                       return a.start_time < b.start_time;
                     return a.file_order < b.file_order;
                   });

  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  if (mode == SplitMode::random) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = total; i > 1; --i)
      std::swap(order[i - 1], order[bounded(rng, i)]);
  }

  const std::size_t n_train = total * ratios[0] / denom;
  const std::size_t n_val = total * ratios[1] / denom;

  // membership by (possibly shuffled) order; chronological inside each split
  std::vector<int> bucket(total);
  for (std::size_t i = 0; i < total; ++i)
    bucket[order[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);

  DatasetSplit split;
  for (std::size_t i = 0; i < total; ++i) {
    switch (bucket[i]) {
      case 0: split.train.push_back(std::move(sessions[i])); break;
      case 1: split.validation.push_back(std::move(sessions[i])); break;
      default: split.test.push_back(std::move(sessions[i])); break;
    }
  }

  // frequencies are counted over training clicks
  std::fill(vocab.freq.begin(), vocab.freq.end(), 0);
  for (const auto& s : split.train)
    for (std::size_t idx : s.items) vocab.freq[idx] += 1;
  split.vocab = std::move(vocab);
  return split;
}

std::vector<Batch> make_batches(const std::vector<PrefixExample>& examples,
                                std::size_t batch_size,
                                std::size_t pad_index) {
  if (batch_size < 1) throw ContractError("make_batches: batch_size >= 1");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return examples[a].prefix.size() <
                            examples[b].prefix.size();
                   });

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch b;
    b.size = end - start;
    b.pad_index = pad_index;
    for (std::size_t i = start; i < end; ++i)
      b.max_len = std::max(b.max_len, examples[order[i]].prefix.size());
    b.items.assign(b.size * b.max_len, pad_index);
    b.valid.assign(b.size * b.max_len, 0);
    b.lengths.resize(b.size);
    b.targets.resize(b.size);
    b.is_repeat.resize(b.size);
    for (std::size_t i = start; i < end; ++i) {
      const auto& ex = examples[order[i]];
      const std::size_t row = i - start;
      b.lengths[row] = ex.prefix.size();
      b.targets[row] = ex.target;
      b.is_repeat[row] = ex.is_repeat ? 1 : 0;
      for (std::size_t t = 0; t < ex.prefix.size(); ++t) {
        b.items[row * b.max_len + t] = ex.prefix[t];
        b.valid[row * b.max_len + t] = 1;
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<std::size_t> map_items(const Vocabulary& vocab,
                                   const std::vector<std::string>& ids,
                                   std::vector<std::string>* dropped) {
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    if (auto idx = vocab.lookup(id)) {
      out.push_back(*idx);
    } else if (dropped) {
      dropped->push_back(id);
    }
  }
  return out;
}

// ---- RPNDATA1 container ----

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>(v >> (8 * i));
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(v >> (8 * i));
  out.write(b, 8);
}

void put_i64(std::ostream& out, std::int64_t v) {
  put_u64(out, static_cast<std::uint64_t>(v));
}

void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct Reader {
  std::istream& in;
  std::string origin;

  void need(char* dst, std::size_t n) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw DataError(origin + ": truncated file");
  }
  std::uint32_t u32() {
    char b[4];
    need(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i]))
           << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    char b[8];
    need(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i]))
           << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    if (n) need(s.data(), n);
    return s;
  }
};

void put_sessions(std::ostream& out, const std::vector<Session>& sessions) {
  for (const auto& s : sessions) {
    put_str(out, s.id);
    put_i64(out, s.start_time);
    put_u32(out, static_cast<std::uint32_t>(s.items.size()));
    for (std::size_t idx : s.items)
      put_u32(out, static_cast<std::uint32_t>(idx));
  }
}

std::vector<Session> get_sessions(Reader& r, std::size_t count,
                                  std::size_t vocab_size) {
  std::vector<Session> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Session s;
    s.id = r.str();
    s.start_time = r.i64();
    s.file_order = i;
    const std::uint32_t len = r.u32();
    s.items.reserve(len);
    for (std::uint32_t k = 0; k < len; ++k) {
      const std::uint32_t idx = r.u32();
      if (idx >= vocab_size)
        throw DataError(r.origin + ": session item index " +
                        std::to_string(idx) + " out of vocabulary");
      s.items.push_back(idx);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

void save_dataset(const std::string& path, const DatasetSplit& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(kDatasetMagic, 8);
  put_u32(out, 1);  // format version
  put_u32(out, static_cast<std::uint32_t>(split.vocab.size()));
  for (std::size_t i = 0; i < split.vocab.size(); ++i) {
    put_str(out, split.vocab.id_of[i]);
    put_u64(out, split.vocab.freq[i]);
  }
  put_u32(out, static_cast<std::uint32_t>(split.train.size()));
  put_u32(out, static_cast<std::uint32_t>(split.validation.size()));
  put_u32(out, static_cast<std::uint32_t>(split.test.size()));
  put_sessions(out, split.train);
  put_sessions(out, split.validation);
  put_sessions(out, split.test);
  if (!out) throw DataError("write failed: " + path);
}

DatasetSplit load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  Reader r{in, path};
  char magic[8];
  r.need(magic, 8);
  if (!std::equal(magic, magic + 8, kDatasetMagic))
    throw DataError(path + ": not a prepared dataset (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw DataError(path + ": unsupported dataset version " +
                    std::to_string(version));
  DatasetSplit split;
  const std::uint32_t n_items = r.u32();
  for (std::uint32_t i = 0; i < n_items; ++i) {
    const std::string id = r.str();
    const std::size_t idx = split.vocab.add(id);
    split.vocab.freq[idx] = r.u64();
  }
  const std::uint32_t n_train = r.u32();
  const std::uint32_t n_val = r.u32();
  const std::uint32_t n_test = r.u32();
  split.train = get_sessions(r, n_train, split.vocab.size());
  split.validation = get_sessions(r, n_val, split.vocab.size());
  split.test = get_sessions(r, n_test, split.vocab.size());
  return split;
}

}  // namespace rpn
