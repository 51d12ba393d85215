#include "rpn/encoder.hpp"

namespace rpn {

namespace {

void check_indices(std::span<const std::size_t> ids, std::size_t vocab) {
  for (std::size_t id : ids)
    if (id >= vocab)
      throw VocabularyError("encode: item index " + std::to_string(id) +
                            " out of vocabulary of size " +
                            std::to_string(vocab));
}

Tensor maybe_dropout(const Tensor& x, const ForwardOptions& opts, bool enabled) {
  if (!opts.train || !enabled || opts.dropout <= 0.0) return x;
  if (!opts.rng)
    throw ContractError("dropout requested in train mode without an rng");
  return dropout(x, opts.dropout, true, *opts.rng);
}

}  // namespace

Tensor gru_step(const Tensor& x, const Tensor& h, const GRUParams& params) {
  Tensor xh = concat_cols(x, h);
  Tensor z = sigmoid(add_rowvec(matmul(xh, transpose(params.W_z)), params.b_z));
  Tensor r = sigmoid(add_rowvec(matmul(xh, transpose(params.W_r)), params.b_r));
  Tensor xrh = concat_cols(x, mul(r, h));
  Tensor candidate =
      tanh(add_rowvec(matmul(xrh, transpose(params.W_h)), params.b_h));
  // h' = (1-z) ⊙ h + z ⊙ candidate
  return add(mul(offset(scale(z, -1.0), 1.0), h), mul(z, candidate));
}

EncodedSession encode(std::span<const std::size_t> prefix,
                      const EmbeddingTable& emb, const GRUParams& gru,
                      const ForwardOptions& opts) {
  if (prefix.empty()) throw ContractError("encode: empty prefix");
  check_indices(prefix, emb.vocab());

  std::vector<std::size_t> ids(prefix.begin(), prefix.end());
  Tensor embedded = maybe_dropout(gather_rows(emb.matrix, ids), opts,
                                  opts.dropout_emb);

  const std::size_t d_hid = gru.hidden();
  Tensor h = Tensor::zeros({1, d_hid});
  std::vector<Tensor> rows;
  rows.reserve(prefix.size());
  for (std::size_t t = 0; t < prefix.size(); ++t) {
    Tensor x = gather_rows(embedded, {t});  // row t as [1 x d_emb]
    h = gru_step(x, h, gru);
    rows.push_back(h);
  }

  EncodedSession out;
  out.states = stack_rows(rows);
  out.final = h;
  out.length = prefix.size();
  return out;
}

EncodedBatch encode_batch(const Batch& batch, const EmbeddingTable& emb,
                          const GRUParams& gru, const ForwardOptions& opts) {
  if (batch.size == 0 || batch.max_len == 0)
    throw ContractError("encode_batch: empty batch");
  check_indices(batch.items, emb.vocab());

  Tensor embedded = maybe_dropout(gather_rows(emb.matrix, batch.items), opts,
                                  opts.dropout_emb);  // [B*T x d_emb]

  const std::size_t d_hid = gru.hidden();
  Tensor h = Tensor::zeros({batch.size, d_hid});

  EncodedBatch out;
  out.batch = &batch;
  out.states.reserve(batch.max_len);
  for (std::size_t t = 0; t < batch.max_len; ++t) {
    std::vector<std::size_t> step_rows(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b)
      step_rows[b] = b * batch.max_len + t;
    Tensor x = gather_rows(embedded, step_rows);  // [B x d_emb]
    Tensor h_new = gru_step(x, h, gru);

    // rows past their length keep the previous state
    std::vector<double> keep(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b)
      keep[b] = batch.valid_at(b, t) ? 1.0 : 0.0;
    bool any_pad = false;
    for (double k : keep) any_pad = any_pad || k == 0.0;
    if (any_pad) {
      Tensor keep_col = Tensor::of({batch.size}, keep);
      std::vector<double> drop(batch.size);
      for (std::size_t b = 0; b < batch.size; ++b) drop[b] = 1.0 - keep[b];
      Tensor drop_col = Tensor::of({batch.size}, drop);
      h = add(scale_rows(h_new, keep_col), scale_rows(h, drop_col));
    } else {
      h = h_new;
    }
    out.states.push_back(h);
  }
  out.final = h;
  return out;
}

}  // namespace rpn
