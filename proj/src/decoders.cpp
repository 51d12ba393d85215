#include "rpn/decoders.hpp"

#include <algorithm>
#include <cmath>

namespace rpn {

namespace {

// single-session attention scores over the t encoder states, as [t]
Tensor scores_single(const EncodedSession& enc, const Tensor& W,
                     const Tensor& U, const Tensor& v) {
  Tensor projected = matmul(enc.states, transpose(U));        // [t x d_att]
  Tensor query = matmul(enc.final, transpose(W));             // [1 x d_att]
  Tensor mixed = tanh(add_rowvec(projected, query));          // [t x d_att]
  Tensor e = matmul(mixed, reshape(v, {v.size(), 1}));        // [t x 1]
  return reshape(e, {enc.length});
}

Mask item_mask(const Batch& batch, std::size_t vocab) {
  Mask mask(batch.size * vocab, 1);
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t t = 0; t < batch.max_len; ++t)
      if (batch.valid_at(b, t)) mask[b * vocab + batch.item_at(b, t)] = 0;
  return mask;
}

}  // namespace

std::pair<double, double> predict_mode(const EncodedSession& enc,
                                       const ModePredictorParams& params) {
  Tensor e = scores_single(enc, params.W, params.U, params.v);
  Tensor alpha = softmax(e);
  Tensor context = matmul(reshape(alpha, {1, enc.length}), enc.states);
  Tensor p = softmax(matmul(context, transpose(params.Wc)));
  return {p.at(0), p.at(1)};
}

std::map<std::size_t, double> repeat_distribution(
    const EncodedSession& enc, std::span<const std::size_t> prefix,
    const RepeatDecoderParams& params) {
  if (prefix.size() != enc.length)
    throw ContractError("repeat_distribution: prefix does not match encoding");
  Tensor alpha = softmax(scores_single(enc, params.W, params.U, params.v));
  std::map<std::size_t, double> dist;
  for (std::size_t t = 0; t < prefix.size(); ++t)
    dist[prefix[t]] += alpha.at(t);
  return dist;
}

std::vector<double> explore_distribution(const EncodedSession& enc,
                                         std::span<const std::size_t> prefix,
                                         const ExploreDecoderParams& params,
                                         const ForwardOptions& opts) {
  const std::size_t vocab = params.vocab();
  Mask mask(vocab, 1);
  for (std::size_t item : prefix) {
    if (item >= vocab)
      throw VocabularyError("explore_distribution: item " +
                            std::to_string(item) + " out of vocabulary");
    mask[item] = 0;
  }

  Tensor alpha = softmax(scores_single(enc, params.W, params.U, params.v));
  Tensor context = matmul(reshape(alpha, {1, enc.length}), enc.states);
  Tensor hybrid = concat_cols(enc.final, context);  // [1 x 2*d_hid]
  if (opts.train && opts.dropout_hybrid && opts.dropout > 0.0) {
    if (!opts.rng)
      throw ContractError("explore_distribution: train mode without rng");
    hybrid = dropout(hybrid, opts.dropout, true, *opts.rng);
  }
  Tensor f = matmul(hybrid, transpose(params.Wc));  // [1 x |I|]
  Tensor p = softmax(f, &mask, /*allow_empty_rows=*/true);
  return p.data();
}

std::vector<double> mix(std::pair<double, double> p_mode,
                        const std::map<std::size_t, double>& repeat_dist,
                        const std::vector<double>& explore_dist) {
  const auto [p_r, p_e] = p_mode;
  double explore_mass = 0.0;
  for (double p : explore_dist) explore_mass += p;
  // with no explore support the repeat branch takes all the probability
  const double denom = explore_mass > 0.0 ? p_r + p_e : p_r;

  std::vector<double> final_dist(explore_dist.size(), 0.0);
  for (std::size_t i = 0; i < explore_dist.size(); ++i)
    final_dist[i] = p_e * explore_dist[i] / denom;
  for (const auto& [item, p] : repeat_dist) {
    if (item >= final_dist.size())
      throw ContractError("mix: repeat item " + std::to_string(item) +
                          " outside the item space");
    final_dist[item] += p_r * p / denom;
  }
  return final_dist;
}

// ---- batched internals ----

Tensor attention_scores(const EncodedBatch& enc, const Tensor& W,
                        const Tensor& U, const Tensor& v) {
  Tensor query = matmul(enc.final, transpose(W));  // [B x d_att]
  Tensor v_col = reshape(v, {v.size(), 1});
  std::vector<Tensor> cols;
  cols.reserve(enc.states.size());
  for (const Tensor& h : enc.states) {
    Tensor mixed = tanh(add(matmul(h, transpose(U)), query));
    cols.push_back(matmul(mixed, v_col));  // [B x 1]
  }
  return stack_cols(cols);  // [B x T]
}

AttentionOut attend(const EncodedBatch& enc, const Tensor& W, const Tensor& U,
                    const Tensor& v) {
  const Batch& batch = *enc.batch;
  Tensor e = attention_scores(enc, W, U, v);
  Mask valid(batch.valid.begin(), batch.valid.end());
  Tensor alpha = softmax(e, &valid);

  Tensor context;
  for (std::size_t t = 0; t < enc.states.size(); ++t) {
    Tensor term = scale_rows(enc.states[t], col(alpha, t));
    context = t == 0 ? term : add(context, term);
  }
  return {alpha, context};
}

Tensor mode_probs(const EncodedBatch& enc, const ModePredictorParams& params) {
  AttentionOut att = attend(enc, params.W, params.U, params.v);
  return softmax(matmul(att.context, transpose(params.Wc)));
}

Tensor repeat_position_probs(const EncodedBatch& enc,
                             const RepeatDecoderParams& params) {
  const Batch& batch = *enc.batch;
  Tensor e = attention_scores(enc, params.W, params.U, params.v);
  Mask valid(batch.valid.begin(), batch.valid.end());
  return softmax(e, &valid);
}

Tensor repeat_target_probs(const Tensor& position_probs, const Batch& batch) {
  // select positions holding the row's target, then sum the row
  std::vector<double> sel(batch.size * batch.max_len, 0.0);
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t t = 0; t < batch.max_len; ++t)
      if (batch.valid_at(b, t) && batch.item_at(b, t) == batch.targets[b])
        sel[b * batch.max_len + t] = 1.0;
  Tensor selector = Tensor::of({batch.size, batch.max_len}, std::move(sel));
  return row_sum(mul(position_probs, selector));
}

Tensor explore_item_probs(const EncodedBatch& enc,
                          const ExploreDecoderParams& params,
                          const ForwardOptions& fwd,
                          const ExploreOptions& opts) {
  const Batch& batch = *enc.batch;
  Tensor hybrid;
  if (opts.use_attention) {
    AttentionOut att = attend(enc, params.W, params.U, params.v);
    hybrid = concat_cols(enc.final, att.context);
  } else {
    hybrid = concat_cols(enc.final, enc.final);
  }
  if (fwd.train && fwd.dropout_hybrid && fwd.dropout > 0.0) {
    if (!fwd.rng)
      throw ContractError("explore_item_probs: train mode without rng");
    hybrid = dropout(hybrid, fwd.dropout, true, *fwd.rng);
  }
  Tensor f = matmul(hybrid, transpose(params.Wc));  // [B x |I|]
  if (!opts.mask_prefix) return softmax(f);
  Mask mask = item_mask(batch, params.vocab());
  return softmax(f, &mask, /*allow_empty_rows=*/true);
}

Tensor explore_support(const Batch& batch, std::size_t vocab) {
  std::vector<double> has(batch.size, 0.0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    std::vector<bool> seen(vocab, false);
    std::size_t unique = 0;
    for (std::size_t t = 0; t < batch.max_len; ++t)
      if (batch.valid_at(b, t) && !seen[batch.item_at(b, t)]) {
        seen[batch.item_at(b, t)] = true;
        ++unique;
      }
    has[b] = unique < vocab ? 1.0 : 0.0;
  }
  return Tensor::of({batch.size}, std::move(has));
}

}  // namespace rpn
