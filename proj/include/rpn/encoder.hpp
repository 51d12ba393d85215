#pragma once

#include <span>

#include "rpn/data.hpp"
#include "rpn/tensor.hpp"

// Session encoding: embedding lookup followed by a GRU with h0 = 0.

namespace rpn {

struct EmbeddingTable {
  Tensor matrix;  // [|I| x d_emb]
  std::size_t vocab() const { return matrix.rows(); }
  std::size_t dim() const { return matrix.cols(); }
};

struct GRUParams {
  // gate weights act on the concatenated [emb, h] input
  Tensor W_z, W_r, W_h;  // [d_hid x (d_emb + d_hid)]
  Tensor b_z, b_r, b_h;  // [d_hid], zero-initialized
  std::size_t hidden() const { return W_z.rows(); }
};

// forward-pass switches shared across the model
struct ForwardOptions {
  bool train = false;
  double dropout = 0.5;
  bool dropout_emb = true;
  bool dropout_hybrid = true;
  CounterRng* rng = nullptr;  // required when train and dropout > 0
};

struct EncodedSession {
  Tensor states;  // [t x d_hid]
  Tensor final;   // [1 x d_hid], equals the last row of states
  std::size_t length = 0;
};

struct EncodedBatch {
  std::vector<Tensor> states;  // max_len tensors of [B x d_hid]
  Tensor final;                // [B x d_hid], state at each row's last valid step
  const Batch* batch = nullptr;
};

// one GRU update: x [B x d_emb], h [B x d_hid] -> new h
Tensor gru_step(const Tensor& x, const Tensor& h, const GRUParams& params);

EncodedSession encode(std::span<const std::size_t> prefix,
                      const EmbeddingTable& emb, const GRUParams& gru,
                      const ForwardOptions& opts = {});

// Padded positions carry the previous hidden state forward, so `final` is
// each row's state at its true last position and padding never leaks into
// valid rows.
EncodedBatch encode_batch(const Batch& batch, const EmbeddingTable& emb,
                          const GRUParams& gru,
                          const ForwardOptions& opts = {});

}  // namespace rpn
