#include "rpn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace rpn {

namespace {

double unit_double(std::uint64_t raw) {
  return static_cast<double>(raw >> 11) * 0x1.0p-53;
}

constexpr double kLogClamp = 1e-12;

struct ParamSpec {
  std::string name;
  Shape shape;
  bool is_bias;
};

std::vector<ParamSpec> param_layout(std::size_t vocab, std::size_t d_emb,
                                    std::size_t d_hid, std::size_t d_att) {
  const std::size_t d_in = d_emb + d_hid;
  return {
      {"embedding.matrix", {vocab, d_emb}, false},
      {"gru.W_z", {d_hid, d_in}, false},
      {"gru.W_r", {d_hid, d_in}, false},
      {"gru.W_h", {d_hid, d_in}, false},
      {"gru.b_z", {d_hid}, true},
      {"gru.b_r", {d_hid}, true},
      {"gru.b_h", {d_hid}, true},
      {"mode.v_re", {d_att}, false},
      {"mode.W_re", {d_att, d_hid}, false},
      {"mode.U_re", {d_att, d_hid}, false},
      {"mode.W_c_re", {2, d_hid}, false},
      {"repeat.v_r", {d_att}, false},
      {"repeat.W_r", {d_att, d_hid}, false},
      {"repeat.U_r", {d_att, d_hid}, false},
      {"explore.v_e", {d_att}, false},
      {"explore.W_e", {d_att, d_hid}, false},
      {"explore.U_e", {d_att, d_hid}, false},
      {"explore.W_c_e", {vocab, 2 * d_hid}, false},
  };
}

ModelParams assemble(std::vector<Tensor> tensors) {
  ModelParams p;
  std::size_t i = 0;
  p.embedding.matrix = tensors[i++];
  p.gru.W_z = tensors[i++];
  p.gru.W_r = tensors[i++];
  p.gru.W_h = tensors[i++];
  p.gru.b_z = tensors[i++];
  p.gru.b_r = tensors[i++];
  p.gru.b_h = tensors[i++];
  p.mode.v = tensors[i++];
  p.mode.W = tensors[i++];
  p.mode.U = tensors[i++];
  p.mode.Wc = tensors[i++];
  p.repeat.v = tensors[i++];
  p.repeat.W = tensors[i++];
  p.repeat.U = tensors[i++];
  p.explore.v = tensors[i++];
  p.explore.W = tensors[i++];
  p.explore.U = tensors[i++];
  p.explore.Wc = tensors[i++];
  return p;
}

// fan counts for Xavier bounds; vectors count as one output unit
std::pair<std::size_t, std::size_t> fans(const Shape& shape) {
  if (shape.size() == 1) return {shape[0], 1};
  return {shape[1], shape[0]};
}

}  // namespace

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_repeat: return "no-repeat";
    case Ablation::no_attention: return "no-attention";
  }
  return "full";
}

std::optional<Ablation> ablation_from_name(const std::string& name) {
  if (name == "full") return Ablation::full;
  if (name == "no-repeat") return Ablation::no_repeat;
  if (name == "no-attention") return Ablation::no_attention;
  return std::nullopt;
}

void TrainConfig::validate() const {
  if (lr <= 0.0 || beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 ||
      beta2 >= 1.0 || epsilon <= 0.0)
    throw ContractError("config: Adam rates out of range");
  if (clip <= 0.0) throw ContractError("config: clip must be positive");
  if (batch_size < 1) throw ContractError("config: batch_size must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0)
    throw ContractError("config: dropout must be in [0,1)");
  if (lr_halve_every < 1)
    throw ContractError("config: lr_halve_every must be >= 1");
  if (d_emb < 1 || d_hid < 1)
    throw ContractError("config: embedding and hidden sizes must be >= 1");
  if (joint_mode_loss && ablation == Ablation::no_repeat)
    throw ContractError(
        "config: joint mode loss needs the repeat branch (ablation no-repeat)");
}

double TrainConfig::lr_for_epoch(std::size_t epoch) const {
  const std::size_t halvings = (epoch - 1) / lr_halve_every;
  return lr * std::pow(0.5, static_cast<double>(halvings));
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  return {
      {"embedding.matrix", embedding.matrix},
      {"gru.W_z", gru.W_z},
      {"gru.W_r", gru.W_r},
      {"gru.W_h", gru.W_h},
      {"gru.b_z", gru.b_z},
      {"gru.b_r", gru.b_r},
      {"gru.b_h", gru.b_h},
      {"mode.v_re", mode.v},
      {"mode.W_re", mode.W},
      {"mode.U_re", mode.U},
      {"mode.W_c_re", mode.Wc},
      {"repeat.v_r", repeat.v},
      {"repeat.W_r", repeat.W},
      {"repeat.U_r", repeat.U},
      {"explore.v_e", explore.v},
      {"explore.W_e", explore.W},
      {"explore.U_e", explore.U},
      {"explore.W_c_e", explore.Wc},
  };
}

ModelParams ModelParams::clone() const {
  std::vector<Tensor> copies;
  for (auto& [name, t] : named())
    copies.push_back(Tensor::leaf(t.shape(), t.data()));
  return assemble(std::move(copies));
}

void ModelParams::zero_grads() {
  for (auto& [name, t] : named()) const_cast<Tensor&>(t).zero_grad();
}

ModelParams ModelParams::init(std::size_t vocab, const TrainConfig& cfg) {
  if (vocab < 1) throw ContractError("init: empty vocabulary");
  std::mt19937_64 rng(cfg.seed);
  std::vector<Tensor> tensors;
  for (const auto& spec :
       param_layout(vocab, cfg.d_emb, cfg.d_hid, cfg.att_dim())) {
    if (spec.is_bias) {
      tensors.push_back(Tensor::leaf_zeros(spec.shape));
      continue;
    }
    const auto [fan_in, fan_out] = fans(spec.shape);
    const double bound =
        std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> values(shape_numel(spec.shape));
    for (auto& x : values) x = (2.0 * unit_double(rng()) - 1.0) * bound;
    tensors.push_back(Tensor::leaf(spec.shape, std::move(values)));
  }
  return assemble(std::move(tensors));
}

ModelParams ModelParams::zeros(std::size_t vocab, const TrainConfig& cfg) {
  std::vector<Tensor> tensors;
  for (const auto& spec :
       param_layout(vocab, cfg.d_emb, cfg.d_hid, cfg.att_dim()))
    tensors.push_back(Tensor::leaf_zeros(spec.shape));
  return assemble(std::move(tensors));
}

// ---- losses ----

namespace {

struct ForwardTensors {
  Tensor p_mode;          // undefined under the no-repeat ablation
  Tensor p_final_target;  // [B]
};

ForwardOptions fwd_options(const TrainConfig& cfg, bool train,
                           CounterRng* rng) {
  ForwardOptions opts;
  opts.train = train;
  opts.dropout = cfg.dropout;
  opts.dropout_emb = cfg.dropout_emb;
  opts.dropout_hybrid = cfg.dropout_hybrid;
  opts.rng = rng;
  return opts;
}

ForwardTensors forward_batch(const Batch& batch, const ModelParams& params,
                             const TrainConfig& cfg, bool train,
                             CounterRng* rng) {
  const ForwardOptions opts = fwd_options(cfg, train, rng);
  EncodedBatch enc = encode_batch(batch, params.embedding, params.gru, opts);

  ForwardTensors out;
  if (cfg.ablation == Ablation::no_repeat) {
    // single-decoder variant: the explore softmax runs over all items
    Tensor probs = explore_item_probs(enc, params.explore, opts,
                                      {.use_attention = true,
                                       .mask_prefix = false});
    out.p_final_target = pick(probs, batch.targets);
    return out;
  }

  out.p_mode = mode_probs(enc, params.mode);
  Tensor p_r = col(out.p_mode, 0);
  Tensor p_e = col(out.p_mode, 1);

  Tensor alpha_r = repeat_position_probs(enc, params.repeat);
  Tensor rep_target = repeat_target_probs(alpha_r, batch);

  Tensor exp_probs = explore_item_probs(
      enc, params.explore, opts,
      {.use_attention = cfg.ablation != Ablation::no_attention,
       .mask_prefix = true});
  Tensor exp_target = pick(exp_probs, batch.targets);

  // rows whose prefix covers the vocabulary renormalize onto the repeat branch
  Tensor has_explore = explore_support(batch, params.vocab());
  Tensor numer = add(mul(p_r, rep_target), mul(p_e, exp_target));
  Tensor denom = add(p_r, mul(p_e, has_explore));
  out.p_final_target = div(numer, denom);
  return out;
}

Tensor nll_mean(const Tensor& probs) {
  return mean(scale(log(clamp_min(probs, kLogClamp)), -1.0));
}

Tensor mode_loss_from(const Tensor& p_mode, const Batch& batch) {
  std::vector<std::size_t> wanted(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b)
    wanted[b] = batch.is_repeat[b] ? 0 : 1;
  return nll_mean(pick(p_mode, wanted));
}

}  // namespace

Tensor loss_rec(const Batch& batch, const ModelParams& params,
                const TrainConfig& cfg, bool train, CounterRng* rng) {
  for (std::size_t t : batch.targets)
    if (t >= params.vocab())
      throw ContractError("loss_rec: target " + std::to_string(t) +
                          " out of vocabulary");
  return nll_mean(forward_batch(batch, params, cfg, train, rng).p_final_target);
}

Tensor loss_mode(const Batch& batch, const ModelParams& params,
                 const TrainConfig& cfg, bool train, CounterRng* rng) {
  if (cfg.ablation == Ablation::no_repeat)
    throw ContractError("loss_mode: undefined under the no-repeat ablation");
  const ForwardOptions opts = fwd_options(cfg, train, rng);
  EncodedBatch enc = encode_batch(batch, params.embedding, params.gru, opts);
  return mode_loss_from(mode_probs(enc, params.mode), batch);
}

Tensor total_loss(const Batch& batch, const ModelParams& params,
                  const TrainConfig& cfg, bool train, CounterRng* rng) {
  for (std::size_t t : batch.targets)
    if (t >= params.vocab())
      throw ContractError("total_loss: target " + std::to_string(t) +
                          " out of vocabulary");
  ForwardTensors fw = forward_batch(batch, params, cfg, train, rng);
  Tensor rec = nll_mean(fw.p_final_target);
  if (!cfg.joint_mode_loss) return rec;
  return add(rec, mode_loss_from(fw.p_mode, batch));
}

// ---- optimizer ----

void adam_step(ModelParams& params, AdamState& state, const TrainConfig& cfg,
               double lr) {
  auto named = params.named();
  if (state.m.empty()) {
    state.m.resize(named.size());
    state.v.resize(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
      state.m[i].assign(named[i].second.size(), 0.0);
      state.v[i].assign(named[i].second.size(), 0.0);
    }
  }
  if (state.m.size() != named.size())
    throw ContractError("adam_step: state does not match parameters");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& tensor = const_cast<Tensor&>(named[i].second);
    auto& grad = tensor.grad();
    auto& data = tensor.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < grad.size(); ++j) {
      double g = grad[j];
      if (!std::isfinite(g))
        throw NumericError("adam_step: non-finite gradient in " +
                           named[i].first + "[" + std::to_string(j) + "]");
      g = std::clamp(g, -cfg.clip, cfg.clip);
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      data[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
    std::fill(grad.begin(), grad.end(), 0.0);
  }
}

// ---- training loop ----

namespace {

void seeded_shuffle(std::vector<std::size_t>& order, std::mt19937_64& rng) {
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng() % i]);
}

std::vector<double> score_example(const ModelParams& params,
                                  const PrefixExample& ex, Ablation ablation) {
  return predict(params, ex.prefix, ablation).final_dist;
}

}  // namespace

TrainResult train(const DatasetSplit& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.train.empty()) throw DataError("train: empty training split");
  const std::size_t vocab = dataset.vocab.size();

  ModelParams params = ModelParams::init(vocab, cfg);
  AdamState adam;
  CounterRng dropout_rng(cfg.seed ^ 0x5d7b1efdb2c5c4b1ull);

  const std::vector<PrefixExample> train_examples = unroll(dataset.train);
  const std::vector<PrefixExample> val_examples = unroll(dataset.validation);

  TrainResult result;
  double best_mrr = -1.0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = cfg.lr_for_epoch(epoch);

    std::vector<std::size_t> order(train_examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * epoch));
    seeded_shuffle(order, shuffle_rng);
    std::vector<PrefixExample> shuffled;
    shuffled.reserve(order.size());
    for (std::size_t i : order) shuffled.push_back(train_examples[i]);

    std::vector<Batch> batches = make_batches(shuffled, cfg.batch_size, 0);
    std::vector<std::size_t> batch_order(batches.size());
    for (std::size_t i = 0; i < batch_order.size(); ++i) batch_order[i] = i;
    seeded_shuffle(batch_order, shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t bi : batch_order) {
      const Batch& batch = batches[bi];
      Tape tape;
      Tensor loss =
          total_loss(batch, params, cfg, /*train=*/true, &dropout_rng);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch) + " batch " +
                           std::to_string(bi));
      tape.backward(loss);
      adam_step(params, adam, cfg, lr);
      loss_sum += value * static_cast<double>(batch.size);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    record.train_loss =
        loss_sum / static_cast<double>(train_examples.size());

    if (!val_examples.empty()) {
      ScoreRanker ranker([&](const PrefixExample& ex) {
        return score_example(params, ex, cfg.ablation);
      });
      MetricReport report = evaluate(ranker, val_examples, {20});
      record.val_mrr20 = report.overall(20).mrr;
      record.val_recall20 = report.overall(20).recall;
    }
    result.log.push_back(record);

    if (record.val_mrr20 > best_mrr) {
      best_mrr = record.val_mrr20;
      result.best = params.clone();
      result.best_epoch = epoch;
    }
  }

  if (result.best_epoch == 0) {  // no validation signal at all
    result.best = params.clone();
    result.best_epoch = cfg.max_epochs;
  }
  return result;
}

// ---- inference ----

Prediction predict(const ModelParams& params,
                   std::span<const std::size_t> prefix, Ablation ablation) {
  if (prefix.empty()) throw ContractError("predict: empty prefix");
  NoGradGuard no_grad;

  Batch batch;
  batch.size = 1;
  batch.max_len = prefix.size();
  batch.items.assign(prefix.begin(), prefix.end());
  batch.valid.assign(prefix.size(), 1);
  batch.lengths = {prefix.size()};
  batch.targets = {0};
  batch.is_repeat = {0};

  EncodedBatch enc = encode_batch(batch, params.embedding, params.gru, {});

  Prediction out;
  if (ablation == Ablation::no_repeat) {
    Tensor probs = explore_item_probs(enc, params.explore, {},
                                      {.use_attention = true,
                                       .mask_prefix = false});
    out.p_repeat = 0.0;
    out.p_explore = 1.0;
    out.explore_dist = probs.data();
    out.final_dist = probs.data();
    return out;
  }

  Tensor pm = mode_probs(enc, params.mode);
  out.p_repeat = pm.at(0, 0);
  out.p_explore = pm.at(0, 1);

  Tensor alpha = repeat_position_probs(enc, params.repeat);
  for (std::size_t t = 0; t < prefix.size(); ++t)
    out.repeat_dist[prefix[t]] += alpha.at(0, t);

  Tensor exp_probs = explore_item_probs(
      enc, params.explore, {},
      {.use_attention = ablation != Ablation::no_attention,
       .mask_prefix = true});
  out.explore_dist = exp_probs.data();

  out.final_dist =
      mix({out.p_repeat, out.p_explore}, out.repeat_dist, out.explore_dist);
  return out;
}

// ---- checkpoints ----

namespace {

constexpr char kCheckpointMagic[9] = "RPNCKPT1";

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

void put_u8(std::ostream& out, std::uint8_t v) {
  out.put(static_cast<char>(v));
}

void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct CkptReader {
  std::istream& in;
  std::string origin;

  void need(char* dst, std::size_t n) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw CheckpointError(origin + ": truncated checkpoint");
  }
  std::uint8_t u8() {
    char b;
    need(&b, 1);
    return static_cast<std::uint8_t>(b);
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
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    if (n) need(s.data(), n);
    return s;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CheckpointMeta& meta, const AdamState* adam,
                     CheckpointDtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(kCheckpointMagic, 8);
  put_u32(out, 1);  // version
  put_u32(out, static_cast<std::uint32_t>(meta.vocab));
  put_u32(out, static_cast<std::uint32_t>(meta.d_emb));
  put_u32(out, static_cast<std::uint32_t>(meta.d_hid));
  put_u32(out, static_cast<std::uint32_t>(meta.d_att));
  put_u8(out, static_cast<std::uint8_t>(meta.ablation));
  put_u8(out, meta.joint_mode_loss ? 1 : 0);
  put_u64(out, meta.seed);
  put_u64(out, meta.vocab_hash);
  put_u8(out, adam ? 1 : 0);

  auto named = params.named();
  put_u32(out, static_cast<std::uint32_t>(named.size()));
  const std::size_t elem = dtype == CheckpointDtype::f64 ? 8 : 4;
  std::uint64_t offset = 0;
  for (auto& [name, t] : named) {
    put_str(out, name);
    put_u8(out, dtype == CheckpointDtype::f64 ? 0 : 1);
    put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    put_u64(out, offset);
    offset += t.size() * elem;
  }
  for (auto& [name, t] : named) {
    if (dtype == CheckpointDtype::f64) {
      for (double v : t.data()) put_f64(out, v);
    } else {
      for (double v : t.data()) put_f32(out, static_cast<float>(v));
    }
  }
  if (adam) {
    put_u64(out, adam->step);
    for (std::size_t i = 0; i < named.size(); ++i) {
      for (double v : adam->m[i]) put_f64(out, v);
      for (double v : adam->v[i]) put_f64(out, v);
    }
  }
  if (!out) throw DataError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path,
                           std::optional<std::size_t> expected_vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  CkptReader r{in, path};

  char magic[8];
  r.need(magic, 8);
  if (!std::equal(magic, magic + 8, kCheckpointMagic))
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw CheckpointError(path + ": unsupported checkpoint version " +
                          std::to_string(version));

  CheckpointMeta meta;
  meta.vocab = r.u32();
  meta.d_emb = r.u32();
  meta.d_hid = r.u32();
  meta.d_att = r.u32();
  const std::uint8_t abl = r.u8();
  if (abl > 2)
    throw CheckpointError(path + ": bad ablation id " + std::to_string(abl));
  meta.ablation = static_cast<Ablation>(abl);
  meta.joint_mode_loss = r.u8() != 0;
  meta.seed = r.u64();
  meta.vocab_hash = r.u64();
  const bool has_adam = r.u8() != 0;

  const auto layout =
      param_layout(expected_vocab.value_or(meta.vocab), meta.d_emb, meta.d_hid,
                   meta.d_att);
  const std::uint32_t n_params = r.u32();
  if (n_params != layout.size())
    throw CheckpointError(path + ": manifest has " + std::to_string(n_params) +
                          " parameters, expected " +
                          std::to_string(layout.size()));

  struct Entry {
    std::string name;
    bool f32 = false;
    Shape shape;
    std::uint64_t offset = 0;
  };
  std::vector<Entry> manifest;
  std::string mismatches;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    Entry e;
    e.name = r.str();
    const std::uint8_t dt = r.u8();
    if (dt > 1)
      throw CheckpointError(path + ": bad dtype for " + e.name);
    e.f32 = dt == 1;
    const std::uint8_t ndim = r.u8();
    for (std::uint8_t d = 0; d < ndim; ++d)
      e.shape.push_back(static_cast<std::size_t>(r.u64()));
    e.offset = r.u64();
    if (e.name != layout[i].name)
      throw CheckpointError(path + ": unexpected parameter '" + e.name +
                            "', expected '" + layout[i].name + "'");
    if (e.shape != layout[i].shape) {
      if (!mismatches.empty()) mismatches += ", ";
      mismatches += e.name + " is " + shape_str(e.shape) + " vs expected " +
                    shape_str(layout[i].shape);
    }
    manifest.push_back(std::move(e));
  }
  if (!mismatches.empty())
    throw CheckpointError(path + ": shape mismatch: " + mismatches);

  std::vector<Tensor> tensors;
  std::uint64_t running = 0;
  for (const auto& e : manifest) {
    if (e.offset != running)
      throw CheckpointError(path + ": bad data offset for " + e.name);
    const std::size_t n = shape_numel(e.shape);
    std::vector<double> values(n);
    if (e.f32) {
      for (auto& v : values) v = static_cast<double>(r.f32());
      running += n * 4;
    } else {
      for (auto& v : values) v = r.f64();
      running += n * 8;
    }
    tensors.push_back(Tensor::leaf(e.shape, std::move(values)));
  }

  Checkpoint ckpt;
  ckpt.params = assemble(std::move(tensors));
  ckpt.meta = meta;
  if (has_adam) {
    AdamState adam;
    adam.step = r.u64();
    adam.m.resize(manifest.size());
    adam.v.resize(manifest.size());
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      const std::size_t n = shape_numel(manifest[i].shape);
      adam.m[i].resize(n);
      adam.v[i].resize(n);
      for (auto& x : adam.m[i]) x = r.f64();
      for (auto& x : adam.v[i]) x = r.f64();
    }
    ckpt.adam = std::move(adam);
  }
  return ckpt;
}

}  // namespace rpn
