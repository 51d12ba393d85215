#pragma once

#include <map>
#include <span>
#include <utility>

#include "rpn/encoder.hpp"

// The repeat-explore mode predictor, the copy-style repeat decoder, the
// attentive explore decoder, and the probabilistic mixture over both.

namespace rpn {

struct ModePredictorParams {
  Tensor v;   // [d_att]
  Tensor W;   // [d_att x d_hid]
  Tensor U;   // [d_att x d_hid]
  Tensor Wc;  // [2 x d_hid]
};

struct RepeatDecoderParams {
  Tensor v;  // [d_att]
  Tensor W;  // [d_att x d_hid]
  Tensor U;  // [d_att x d_hid]
};

struct ExploreDecoderParams {
  Tensor v;   // [d_att]
  Tensor W;   // [d_att x d_hid]
  Tensor U;   // [d_att x d_hid]
  Tensor Wc;  // [|I| x 2*d_hid]
  std::size_t vocab() const { return Wc.rows(); }
};

struct Prediction {
  double p_repeat = 0.0;
  double p_explore = 0.0;
  std::map<std::size_t, double> repeat_dist;  // support ⊆ prefix items
  std::vector<double> explore_dist;           // zero on prefix items
  std::vector<double> final_dist;             // mixture over all items
};

// ---- single-session operations ----

// attention-pooled context fed through a 2-way softmax
std::pair<double, double> predict_mode(const EncodedSession& enc,
                                       const ModePredictorParams& params);

// occurrence-summed copy probabilities over the prefix items
std::map<std::size_t, double> repeat_distribution(
    const EncodedSession& enc, std::span<const std::size_t> prefix,
    const RepeatDecoderParams& params);

// distribution over all items with exact zeros on prefix items; all-zero
// when the prefix covers the whole vocabulary
std::vector<double> explore_distribution(const EncodedSession& enc,
                                         std::span<const std::size_t> prefix,
                                         const ExploreDecoderParams& params,
                                         const ForwardOptions& opts = {});

// p_final[i] = p_repeat*repeat[i] + p_explore*explore[i]; when the explore
// branch has no support the mass renormalizes onto the repeat branch
std::vector<double> mix(std::pair<double, double> p_mode,
                        const std::map<std::size_t, double>& repeat_dist,
                        const std::vector<double>& explore_dist);

// ---- batched, differentiable internals used by the training loss ----

// e[b,t] = v · tanh(W·final[b] + U·states[t][b]); invalid positions carry
// arbitrary scores and must be masked downstream
Tensor attention_scores(const EncodedBatch& enc, const Tensor& W,
                        const Tensor& U, const Tensor& v);

// softmax over valid positions followed by the weighted state sum
struct AttentionOut {
  Tensor weights;  // [B x T]
  Tensor context;  // [B x d_hid]
};
AttentionOut attend(const EncodedBatch& enc, const Tensor& W, const Tensor& U,
                    const Tensor& v);

Tensor mode_probs(const EncodedBatch& enc, const ModePredictorParams& params);  // [B x 2]

Tensor repeat_position_probs(const EncodedBatch& enc,
                             const RepeatDecoderParams& params);  // [B x T]

// P(target | repeat) per row: sum of position probabilities at positions
// holding that row's target
Tensor repeat_target_probs(const Tensor& position_probs, const Batch& batch);  // [B]

struct ExploreOptions {
  bool use_attention = true;  // false: hybrid state is [h_t, h_t]
  bool mask_prefix = true;    // false: plain softmax over all items
};

Tensor explore_item_probs(const EncodedBatch& enc,
                          const ExploreDecoderParams& params,
                          const ForwardOptions& fwd = {},
                          const ExploreOptions& opts = {});  // [B x |I|]

// 1.0 where a row has at least one out-of-prefix item
Tensor explore_support(const Batch& batch, std::size_t vocab);  // [B]

}  // namespace rpn
