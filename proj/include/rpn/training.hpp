#pragma once

#include <optional>

#include "rpn/decoders.hpp"
#include "rpn/eval.hpp"

// Loss computation, Adam with gradient clipping and LR halving, Xavier
// initialization, the epoch loop, and binary checkpoints (magic RPNCKPT1).

namespace rpn {

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct CheckpointError : DataError {
  explicit CheckpointError(const std::string& m) : DataError(m) {}
};

enum class Ablation { full, no_repeat, no_attention };

std::string ablation_name(Ablation a);
std::optional<Ablation> ablation_from_name(const std::string& name);

struct TrainConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip = 5.0;
  std::size_t batch_size = 1024;
  double dropout = 0.5;
  bool dropout_emb = true;
  bool dropout_hybrid = true;
  std::size_t lr_halve_every = 3;  // epochs
  std::size_t max_epochs = 30;
  bool joint_mode_loss = false;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::full;
  std::size_t d_emb = 100;
  std::size_t d_hid = 100;
  std::size_t d_att = 0;  // 0 means d_hid

  std::size_t att_dim() const { return d_att == 0 ? d_hid : d_att; }
  void validate() const;
  double lr_for_epoch(std::size_t epoch) const;  // 1-based
};

struct ModelParams {
  EmbeddingTable embedding;
  GRUParams gru;
  ModePredictorParams mode;
  RepeatDecoderParams repeat;
  ExploreDecoderParams explore;

  std::size_t vocab() const { return embedding.vocab(); }
  std::vector<std::pair<std::string, Tensor>> named() const;
  ModelParams clone() const;
  void zero_grads();

  // Xavier-uniform weights, zero biases, deterministic in the seed
  static ModelParams init(std::size_t vocab, const TrainConfig& cfg);
  // all-zero parameters of the right shapes (tests)
  static ModelParams zeros(std::size_t vocab, const TrainConfig& cfg);
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

// mean over the batch of -log p_final[target], p clamped at 1e-12
Tensor loss_rec(const Batch& batch, const ModelParams& params,
                const TrainConfig& cfg, bool train = false,
                CounterRng* rng = nullptr);

// binary cross-entropy of the mode predictor against the repeat indicator
Tensor loss_mode(const Batch& batch, const ModelParams& params,
                 const TrainConfig& cfg, bool train = false,
                 CounterRng* rng = nullptr);

// L_rec, plus L_mode when cfg.joint_mode_loss
Tensor total_loss(const Batch& batch, const ModelParams& params,
                  const TrainConfig& cfg, bool train = false,
                  CounterRng* rng = nullptr);

// clips gradients to [-clip, clip] elementwise, applies a bias-corrected
// Adam update at the given rate, then zeroes the gradients
void adam_step(ModelParams& params, AdamState& state, const TrainConfig& cfg,
               double lr);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_mrr20 = 0.0;
  double val_recall20 = 0.0;
};

struct TrainResult {
  ModelParams best;             // by validation MRR@20
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> log;
};

TrainResult train(const DatasetSplit& dataset, const TrainConfig& cfg);

// full eval-mode forward for one session prefix under the given ablation
Prediction predict(const ModelParams& params,
                   std::span<const std::size_t> prefix,
                   Ablation ablation = Ablation::full);

// ---- checkpoints ----

struct CheckpointMeta {
  std::size_t vocab = 0;
  std::size_t d_emb = 0;
  std::size_t d_hid = 0;
  std::size_t d_att = 0;
  Ablation ablation = Ablation::full;
  bool joint_mode_loss = false;
  std::uint64_t seed = 0;
  std::uint64_t vocab_hash = 0;
};

struct Checkpoint {
  ModelParams params;
  CheckpointMeta meta;
  std::optional<AdamState> adam;
};

enum class CheckpointDtype { f64, f32 };

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CheckpointMeta& meta,
                     const AdamState* adam = nullptr,
                     CheckpointDtype dtype = CheckpointDtype::f64);

// expected_vocab, when given, is checked against the stored shapes; the
// error names every parameter whose shape disagrees
Checkpoint load_checkpoint(const std::string& path,
                           std::optional<std::size_t> expected_vocab = {});

}  // namespace rpn
