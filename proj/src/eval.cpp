#include "rpn/eval.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "rpn/tensor.hpp"

namespace rpn {

RankedList rank(std::span<const double> scores, std::size_t k) {
  if (k < 1) throw ContractError("rank: k must be >= 1");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t take = std::min(k, idx.size());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(idx.begin(),
                    idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                    better);
  idx.resize(take);
  return RankedList{std::move(idx)};
}

double mrr_at_k(const RankedList& ranked, std::size_t target, std::size_t k) {
  const std::size_t limit = std::min(k, ranked.items.size());
  for (std::size_t pos = 0; pos < limit; ++pos)
    if (ranked.items[pos] == target)
      return 1.0 / static_cast<double>(pos + 1);
  return 0.0;
}

double recall_at_k(const RankedList& ranked, std::size_t target,
                   std::size_t k) {
  return mrr_at_k(ranked, target, k) > 0.0 ? 1.0 : 0.0;
}

std::size_t MetricReport::k_index(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return i;
  throw ContractError("report has no k=" + std::to_string(k));
}

SegmentMetrics MetricReport::overall(std::size_t k) const {
  const std::size_t i = k_index(k);
  const std::size_t n = repeat_count + non_repeat_count;
  SegmentMetrics m;
  m.count = n;
  if (n) {
    m.mrr = (repeat_sums[i].mrr + non_repeat_sums[i].mrr) /
            static_cast<double>(n);
    m.recall = (repeat_sums[i].recall + non_repeat_sums[i].recall) /
               static_cast<double>(n);
  }
  return m;
}

SegmentMetrics MetricReport::repeat(std::size_t k) const {
  const std::size_t i = k_index(k);
  SegmentMetrics m;
  m.count = repeat_count;
  if (repeat_count) {
    m.mrr = repeat_sums[i].mrr / static_cast<double>(repeat_count);
    m.recall = repeat_sums[i].recall / static_cast<double>(repeat_count);
  }
  return m;
}

SegmentMetrics MetricReport::non_repeat(std::size_t k) const {
  const std::size_t i = k_index(k);
  SegmentMetrics m;
  m.count = non_repeat_count;
  if (non_repeat_count) {
    m.mrr = non_repeat_sums[i].mrr / static_cast<double>(non_repeat_count);
    m.recall = non_repeat_sums[i].recall / static_cast<double>(non_repeat_count);
  }
  return m;
}

RankedList ScoreRanker::top_k(const PrefixExample& example,
                              std::size_t k) const {
  return rank(scorer_(example), k);
}

PopRanker::PopRanker(const Vocabulary& vocab) {
  std::vector<double> scores(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i)
    scores[i] = static_cast<double>(vocab.freq[i]);
  order_ = rank(scores, scores.size()).items;
}

RankedList PopRanker::top_k(const PrefixExample&, std::size_t k) const {
  RankedList out;
  out.items.assign(order_.begin(),
                   order_.begin() + static_cast<std::ptrdiff_t>(
                                        std::min(k, order_.size())));
  return out;
}

RankedList SpopRanker::top_k(const PrefixExample& example,
                             std::size_t k) const {
  const std::size_t n = vocab_->size();
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t item : example.prefix)
    if (item < n) ++counts[item];
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    if (vocab_->freq[a] != vocab_->freq[b])
      return vocab_->freq[a] > vocab_->freq[b];
    return a < b;
  };
  const std::size_t take = std::min(k, n);
  std::partial_sort(idx.begin(),
                    idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                    better);
  idx.resize(take);
  return RankedList{std::move(idx)};
}

MetricReport evaluate(const Ranker& ranker,
                      const std::vector<PrefixExample>& examples,
                      std::vector<std::size_t> ks, bool breakdown) {
  if (examples.empty()) throw DataError("evaluate: no examples");
  if (ks.empty()) throw ContractError("evaluate: no cutoffs");
  MetricReport report;
  report.ks = ks;
  report.has_breakdown = breakdown;
  report.repeat_sums.assign(ks.size(), {});
  report.non_repeat_sums.assign(ks.size(), {});
  const std::size_t max_k = *std::max_element(ks.begin(), ks.end());
  for (const auto& ex : examples) {
    RankedList ranked = ranker.top_k(ex, max_k);
    auto& sums = ex.is_repeat ? report.repeat_sums : report.non_repeat_sums;
    (ex.is_repeat ? report.repeat_count : report.non_repeat_count) += 1;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      sums[i].mrr += mrr_at_k(ranked, ex.target, ks[i]);
      sums[i].recall += recall_at_k(ranked, ex.target, ks[i]);
    }
  }
  return report;
}

std::string format_report(const MetricReport& report,
                          const std::string& split_label) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  auto line = [&](std::size_t k, const char* segment,
                  const SegmentMetrics& m) {
    os << "split=" << split_label << " k=" << k << " segment=" << segment
       << " mrr=" << m.mrr << " recall=" << m.recall << " count=" << m.count
       << '\n';
  };
  for (std::size_t k : report.ks) {
    line(k, "overall", report.overall(k));
    if (report.has_breakdown) {
      line(k, "repeat", report.repeat(k));
      line(k, "non_repeat", report.non_repeat(k));
    }
  }
  return os.str();
}

}  // namespace rpn
