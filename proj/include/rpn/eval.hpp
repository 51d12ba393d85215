#pragma once

#include <functional>
#include <span>
#include <string>

#include "rpn/data.hpp"

// Ranking metrics (MRR@k, Recall@k) with repeat/non-repeat breakdowns, plus
// the popularity baselines used for sanity comparisons.

namespace rpn {

struct RankedList {
  std::vector<std::size_t> items;  // descending score, ties by ascending index
};

// top-k item indices; deterministic under ties and positive rescaling
RankedList rank(std::span<const double> scores, std::size_t k);

double mrr_at_k(const RankedList& ranked, std::size_t target, std::size_t k);
double recall_at_k(const RankedList& ranked, std::size_t target, std::size_t k);

struct SegmentMetrics {
  double mrr = 0.0;
  double recall = 0.0;
  std::size_t count = 0;
};

class MetricReport {
 public:
  std::vector<std::size_t> ks;
  bool has_breakdown = false;

  // per-k reciprocal-rank and hit sums, split by example kind so the
  // overall numbers recombine exactly from the segments
  struct Sums {
    double mrr = 0.0;
    double recall = 0.0;
  };
  std::vector<Sums> repeat_sums;      // one per k
  std::vector<Sums> non_repeat_sums;  // one per k
  std::size_t repeat_count = 0;
  std::size_t non_repeat_count = 0;

  SegmentMetrics overall(std::size_t k) const;
  SegmentMetrics repeat(std::size_t k) const;
  SegmentMetrics non_repeat(std::size_t k) const;

 private:
  std::size_t k_index(std::size_t k) const;
};

struct Ranker {
  virtual ~Ranker() = default;
  virtual RankedList top_k(const PrefixExample& example,
                           std::size_t k) const = 0;
};

// adapts any per-example scorer (e.g. a model's item distribution)
class ScoreRanker : public Ranker {
 public:
  using Scorer = std::function<std::vector<double>(const PrefixExample&)>;
  explicit ScoreRanker(Scorer scorer) : scorer_(std::move(scorer)) {}
  RankedList top_k(const PrefixExample& example, std::size_t k) const override;

 private:
  Scorer scorer_;
};

// fixed ranking by training-click frequency
class PopRanker : public Ranker {
 public:
  explicit PopRanker(const Vocabulary& vocab);
  RankedList top_k(const PrefixExample& example, std::size_t k) const override;

 private:
  std::vector<std::size_t> order_;
};

// within-prefix count first, then global frequency, then item index
class SpopRanker : public Ranker {
 public:
  explicit SpopRanker(const Vocabulary& vocab) : vocab_(&vocab) {}
  RankedList top_k(const PrefixExample& example, std::size_t k) const override;

 private:
  const Vocabulary* vocab_;
};

MetricReport evaluate(const Ranker& ranker,
                      const std::vector<PrefixExample>& examples,
                      std::vector<std::size_t> ks = {10, 20},
                      bool breakdown = false);

// key=value lines, one record per (split, k, segment)
std::string format_report(const MetricReport& report,
                          const std::string& split_label);

}  // namespace rpn
