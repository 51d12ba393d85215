#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "rpn/training.hpp"

using namespace rpn;

namespace {

TrainConfig toy_config(std::size_t d, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.d_emb = d;
  cfg.d_hid = d;
  cfg.seed = seed;
  cfg.dropout = 0.0;
  return cfg;
}

Batch single_batch(std::vector<PrefixExample> ex, std::size_t batch_size) {
  auto batches = make_batches(ex, batch_size, 0);
  REQUIRE(batches.size() == 1);
  return batches[0];
}

PrefixExample example(std::vector<std::size_t> prefix, std::size_t target) {
  PrefixExample ex;
  ex.prefix = std::move(prefix);
  ex.target = target;
  ex.is_repeat = std::find(ex.prefix.begin(), ex.prefix.end(), target) !=
                 ex.prefix.end();
  return ex;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("loss_rec is exactly zero when the target holds all the mass") {
  // one-item vocabulary: the repeat branch owns everything and the explore
  // branch has empty support, so p_final[target] renormalizes to exactly 1
  TrainConfig cfg = toy_config(3, 1);
  ModelParams params = ModelParams::init(1, cfg);
  Batch batch = single_batch({example({0}, 0)}, 1);
  CHECK(loss_rec(batch, params, cfg).item() == 0.0);
}

TEST_CASE("untrained zero-projection model has closed-form losses") {
  // all-zero parameters: p_mode = (.5,.5), repeat mass uniform over
  // positions, explore uniform over out-of-prefix items
  TrainConfig cfg = toy_config(4, 1);
  ModelParams params = ModelParams::zeros(50, cfg);

  // 25 distinct prefix items, target outside: p = .5/25 = 1/50, loss = ln 50
  std::vector<std::size_t> quarter(25);
  for (std::size_t i = 0; i < 25; ++i) quarter[i] = i;
  Batch explore_case = single_batch({example(quarter, 40)}, 1);
  CHECK(loss_rec(explore_case, params, cfg).item() ==
        doctest::Approx(std::log(50.0)).epsilon(1e-12));

  // prefix [A,B,A], target A: p = .5 * 2/3 = 1/3, loss = ln 3
  Batch repeat_case = single_batch({example({0, 1, 0}, 0)}, 1);
  CHECK(loss_rec(repeat_case, params, cfg).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));

  // uniform binary mode prediction: ln 2 whatever the label
  Batch both = single_batch({example({0, 1, 0}, 0), example({2, 3}, 7)}, 2);
  CHECK(loss_mode(both, params, cfg).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("loss_mode averages per-example losses") {
  // scalar model engineered so prefix [A] yields a near-certain repeat mode
  // and prefix [B] yields the uniform one: mean of ~0 and ln 2
  TrainConfig cfg = toy_config(1, 1);
  ModelParams params = ModelParams::zeros(3, cfg);
  params.embedding.matrix.data() = {1.0, 0.0, 0.0};
  params.gru.W_h.data() = {1.0, 0.0};
  const double h = 0.5 * std::tanh(1.0);  // state after prefix [A]
  params.mode.v.data() = {0.0};
  params.mode.Wc.data() = {100.0 / h, 0.0};

  Batch batch = single_batch({example({0}, 0), example({1}, 2)}, 2);
  CHECK(loss_mode(batch, params, cfg).item() ==
        doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("total_loss honors the joint switch") {
  TrainConfig cfg = toy_config(3, 9);
  ModelParams params = ModelParams::init(8, cfg);
  Batch batch = single_batch(
      {example({1, 2, 1}, 1), example({3, 4}, 5), example({6, 7, 6, 7}, 0)},
      3);

  cfg.joint_mode_loss = false;
  const double rec = loss_rec(batch, params, cfg).item();
  CHECK(total_loss(batch, params, cfg).item() == rec);

  cfg.joint_mode_loss = true;
  const double mode = loss_mode(batch, params, cfg).item();
  CHECK(total_loss(batch, params, cfg).item() ==
        doctest::Approx(rec + mode).epsilon(1e-15));
  CHECK(mode > 0.0);
  CHECK(total_loss(batch, params, cfg).item() != rec);

  cfg.ablation = Ablation::no_repeat;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  CHECK_THROWS_AS(loss_mode(batch, params, cfg), ContractError);
}

TEST_CASE("loss_rec rejects out-of-vocabulary targets") {
  TrainConfig cfg = toy_config(3, 2);
  ModelParams params = ModelParams::init(4, cfg);
  Batch batch = single_batch({example({0, 1}, 9)}, 1);
  CHECK_THROWS_AS(loss_rec(batch, params, cfg), ContractError);
}

TEST_CASE("adam single-step closed form, clipping, and fixed point") {
  TrainConfig cfg;
  ModelParams params = ModelParams::zeros(2, toy_config(2, 1));
  AdamState state;

  // unit gradient: bias-corrected update is -lr within 1e-10
  for (auto& [name, t] : params.named())
    std::fill(const_cast<Tensor&>(t).grad().begin(),
              const_cast<Tensor&>(t).grad().end(), 1.0);
  adam_step(params, state, cfg, cfg.lr);
  CHECK(state.step == 1);
  for (auto& [name, t] : params.named())
    for (double v : t.data()) CHECK(std::fabs(v + 0.001) < 1e-10);

  // a gradient of 7 behaves exactly like a gradient of 5
  ModelParams a = ModelParams::zeros(2, toy_config(2, 1));
  ModelParams b = ModelParams::zeros(2, toy_config(2, 1));
  AdamState sa, sb;
  a.embedding.matrix.grad()[0] = 7.0;
  b.embedding.matrix.grad()[0] = 5.0;
  adam_step(a, sa, cfg, cfg.lr);
  adam_step(b, sb, cfg, cfg.lr);
  CHECK(a.embedding.matrix.data() == b.embedding.matrix.data());
  CHECK(sa.m[0][0] == sb.m[0][0]);
  CHECK(sa.m[0][0] == doctest::Approx(0.5));  // 0.1 * clipped 5

  // zero gradient leaves parameters untouched
  ModelParams c = ModelParams::zeros(2, toy_config(2, 1));
  AdamState sc;
  adam_step(c, sc, cfg, cfg.lr);
  for (auto& [name, t] : c.named())
    for (double v : t.data()) CHECK(v == 0.0);

  // gradients are zeroed after the step
  CHECK(a.embedding.matrix.grad()[0] == 0.0);

  // a non-finite gradient aborts and names the parameter
  ModelParams d = ModelParams::zeros(2, toy_config(2, 1));
  AdamState sd;
  d.gru.W_z.grad()[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(adam_step(d, sd, cfg, cfg.lr),
                       doctest::Contains("gru.W_z"), NumericError);
}

TEST_CASE("learning rate halves every three epochs") {
  TrainConfig cfg;
  CHECK(cfg.lr_for_epoch(1) == 0.001);
  CHECK(cfg.lr_for_epoch(3) == 0.001);
  CHECK(cfg.lr_for_epoch(4) == 0.0005);
  CHECK(cfg.lr_for_epoch(6) == 0.0005);
  CHECK(cfg.lr_for_epoch(7) == 0.00025);
}

TEST_CASE("xavier init respects bounds, zero biases, and the seed") {
  TrainConfig cfg = toy_config(6, 77);
  ModelParams params = ModelParams::init(20, cfg);
  for (auto& [name, t] : params.named()) {
    if (name.starts_with("gru.b")) {
      for (double v : t.data()) CHECK(v == 0.0);
      continue;
    }
    const auto& s = t.shape();
    const double fan_in = s.size() == 1 ? static_cast<double>(s[0])
                                        : static_cast<double>(s[1]);
    const double fan_out = s.size() == 1 ? 1.0 : static_cast<double>(s[0]);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    double max_abs = 0.0;
    for (double v : t.data()) max_abs = std::max(max_abs, std::fabs(v));
    CHECK(max_abs <= bound);
    CHECK(max_abs > 0.0);
  }

  ModelParams again = ModelParams::init(20, cfg);
  CHECK(params.embedding.matrix.data() == again.embedding.matrix.data());
  cfg.seed = 78;
  ModelParams other = ModelParams::init(20, cfg);
  CHECK(params.embedding.matrix.data() != other.embedding.matrix.data());
}

TEST_CASE("mode parameters receive gradient even without the mode loss") {
  TrainConfig cfg = toy_config(3, 5);
  cfg.joint_mode_loss = false;
  ModelParams params = ModelParams::init(6, cfg);
  Batch batch = single_batch({example({0, 1, 0}, 0), example({2, 3}, 4)}, 2);
  Tape tape;
  Tensor loss = total_loss(batch, params, cfg);
  tape.backward(loss);
  double total = 0.0;
  for (double g : params.mode.Wc.grad()) total += std::fabs(g);
  CHECK(total > 0.0);
}

TEST_CASE("end-to-end toy gradients match finite differences") {
  TrainConfig cfg = toy_config(3, 12);
  ModelParams params = ModelParams::init(5, cfg);
  Batch batch = single_batch(
      {example({0, 1, 0}, 0), example({2, 3, 4}, 1), example({4, 4}, 4)}, 3);

  for (bool joint : {false, true}) {
    cfg.joint_mode_loss = joint;
    auto build = [&] { return total_loss(batch, params, cfg); };
    auto loss_value = [&] {
      NoGradGuard guard;
      return build().item();
    };
    auto run_backward = [&] {
      Tape tape;
      tape.backward(build());
    };
    auto bad = gradcheck::check(params.named(), loss_value, run_backward);
    CHECK_MESSAGE(bad.empty(), "joint=" << joint << ": " << bad.size()
                                        << " bad entries");
  }
}

TEST_CASE("ablation gradients also match finite differences") {
  TrainConfig cfg = toy_config(3, 21);
  Batch batch = single_batch({example({0, 1, 0}, 2), example({2, 3}, 3)}, 2);
  for (Ablation ablation : {Ablation::no_repeat, Ablation::no_attention}) {
    cfg.ablation = ablation;
    ModelParams params = ModelParams::init(5, cfg);
    auto build = [&] { return total_loss(batch, params, cfg); };
    auto loss_value = [&] {
      NoGradGuard guard;
      return build().item();
    };
    auto run_backward = [&] {
      Tape tape;
      tape.backward(build());
    };
    // the untouched branch's parameters legitimately get zero gradient
    auto bad = gradcheck::check(params.named(), loss_value, run_backward);
    CHECK_MESSAGE(bad.empty(), ablation_name(ablation) << ": " << bad.size()
                                                       << " bad entries");
  }
}

TEST_CASE("padded batch and unpadded runs produce identical losses and grads") {
  TrainConfig cfg = toy_config(4, 33);
  ModelParams params = ModelParams::init(9, cfg);
  std::vector<PrefixExample> ex = {example({1, 2}, 3),
                                   example({3, 4, 5, 6, 7}, 3),
                                   example({8, 0, 8}, 8)};
  Batch padded = single_batch(ex, 3);

  Tape tape1;
  Tensor padded_loss = total_loss(padded, params, cfg);
  tape1.backward(padded_loss);
  std::vector<std::vector<double>> padded_grads;
  for (auto& [name, t] : params.named()) padded_grads.push_back(t.grad());
  params.zero_grads();

  // same examples, each in its own batch, averaged on one tape
  Tape tape2;
  Tensor total;
  for (const auto& e : ex) {
    Batch b = single_batch({e}, 1);
    Tensor l = total_loss(b, params, cfg);
    total = total.defined() ? add(total, l) : l;
  }
  total = scale(total, 1.0 / 3.0);
  CHECK(std::fabs(padded_loss.item() - total.item()) < 1e-9);
  tape2.backward(total);
  std::size_t i = 0;
  for (auto& [name, t] : params.named()) {
    for (std::size_t j = 0; j < t.grad().size(); ++j)
      CHECK(std::fabs(t.grad()[j] - padded_grads[i][j]) < 1e-9);
    ++i;
  }
}

TEST_CASE("checkpoint round trip at both precisions") {
  TrainConfig cfg = toy_config(4, 3);
  ModelParams params = ModelParams::init(7, cfg);
  CheckpointMeta meta;
  meta.vocab = 7;
  meta.d_emb = 4;
  meta.d_hid = 4;
  meta.d_att = 4;
  meta.seed = 3;
  meta.vocab_hash = 0xabc123;

  AdamState adam;
  adam.step = 42;
  auto named = params.named();
  adam.m.resize(named.size());
  adam.v.resize(named.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    adam.m[i].assign(named[i].second.size(), 0.25);
    adam.v[i].assign(named[i].second.size(), 0.5);
  }

  auto path = temp_file("rpn_ckpt_roundtrip.ckpt");
  save_checkpoint(path.string(), params, meta, &adam);
  Checkpoint loaded = load_checkpoint(path.string());
  CHECK(loaded.meta.vocab == 7);
  CHECK(loaded.meta.vocab_hash == 0xabc123);
  REQUIRE(loaded.adam.has_value());
  CHECK(loaded.adam->step == 42);
  auto lnamed = loaded.params.named();
  for (std::size_t i = 0; i < named.size(); ++i)
    CHECK(lnamed[i].second.data() == named[i].second.data());

  // f32 loses precision but round-trips exactly at the stored width
  auto path32 = temp_file("rpn_ckpt_f32.ckpt");
  save_checkpoint(path32.string(), params, meta, nullptr,
                  CheckpointDtype::f32);
  Checkpoint half = load_checkpoint(path32.string());
  auto hnamed = half.params.named();
  for (std::size_t i = 0; i < named.size(); ++i)
    for (std::size_t j = 0; j < named[i].second.size(); ++j)
      CHECK(hnamed[i].second.data()[j] ==
            static_cast<double>(static_cast<float>(named[i].second.data()[j])));

  std::filesystem::remove(path);
  std::filesystem::remove(path32);
}

TEST_CASE("checkpoint loading rejects bad files with distinct errors") {
  TrainConfig cfg = toy_config(3, 4);
  ModelParams params = ModelParams::init(50, cfg);
  CheckpointMeta meta;
  meta.vocab = 50;
  meta.d_emb = 3;
  meta.d_hid = 3;
  meta.d_att = 3;
  auto path = temp_file("rpn_ckpt_errors.ckpt");
  save_checkpoint(path.string(), params, meta);

  // vocabulary mismatch names the parameters that disagree
  CHECK_THROWS_WITH_AS(load_checkpoint(path.string(), 60),
                       doctest::Contains("explore.W_c_e"), CheckpointError);
  try {
    load_checkpoint(path.string(), 60);
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("embedding.matrix") != std::string::npos);
  }

  // truncation: cut the file in half
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  in.close();
  const std::string bytes = buf.str();
  auto cut = temp_file("rpn_ckpt_cut.ckpt");
  std::ofstream out(cut, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  out.close();
  CHECK_THROWS_WITH_AS(load_checkpoint(cut.string()),
                       doctest::Contains("truncated"), CheckpointError);

  auto junk = temp_file("rpn_ckpt_junk.ckpt");
  std::ofstream j(junk, std::ios::binary);
  j << "RPNJUNK0 and then some";
  j.close();
  CHECK_THROWS_WITH_AS(load_checkpoint(junk.string()),
                       doctest::Contains("magic"), CheckpointError);

  std::filesystem::remove(path);
  std::filesystem::remove(cut);
  std::filesystem::remove(junk);
}

TEST_CASE("training is deterministic and reduces the loss") {
  auto sessions = synthesize({.num_items = 12,
                              .num_sessions = 120,
                              .len_min = 3,
                              .len_max = 7,
                              .repeat_prob = 0.6,
                              .seed = 10});
  Vocabulary vocab;
  for (std::size_t i = 0; i < 12; ++i) vocab.add(synth_item_id(i));
  for (const auto& s : sessions)
    for (std::size_t idx : s.items) vocab.freq[idx] += 1;
  auto split =
      split_sessions(sessions, vocab, {8, 1, 1}, SplitMode::chronological, 0);

  TrainConfig cfg;
  cfg.d_emb = 8;
  cfg.d_hid = 8;
  cfg.batch_size = 16;
  cfg.max_epochs = 4;
  cfg.seed = 99;

  TrainResult run1 = train(split, cfg);
  TrainResult run2 = train(split, cfg);

  REQUIRE(run1.log.size() == 4);
  // bitwise determinism of the whole trajectory
  for (std::size_t e = 0; e < run1.log.size(); ++e) {
    CHECK(run1.log[e].train_loss == run2.log[e].train_loss);
    CHECK(run1.log[e].val_mrr20 == run2.log[e].val_mrr20);
  }
  auto n1 = run1.best.named();
  auto n2 = run2.best.named();
  for (std::size_t i = 0; i < n1.size(); ++i)
    CHECK(n1[i].second.data() == n2[i].second.data());

  CHECK(run1.log.back().train_loss < run1.log.front().train_loss);
  CHECK(run1.best_epoch >= 1);
}

TEST_CASE("single-item session: final probability equals p_repeat exactly") {
  // zero output projections give p_mode = (.5,.5); the lone prefix item owns
  // the whole repeat branch, so its final probability is exactly p_repeat
  TrainConfig cfg = toy_config(3, 1);
  ModelParams params = ModelParams::zeros(4, cfg);
  Prediction pred = predict(params, std::vector<std::size_t>{1});
  CHECK(pred.p_repeat == 0.5);
  CHECK(pred.final_dist[1] == pred.p_repeat);
}

TEST_CASE("prediction under ablations") {
  TrainConfig cfg = toy_config(3, 8);
  ModelParams params = ModelParams::init(6, cfg);
  std::vector<std::size_t> prefix{1, 2, 1};

  Prediction full = predict(params, prefix);
  CHECK(full.p_repeat + full.p_explore == doctest::Approx(1.0).epsilon(1e-9));
  double total = 0.0;
  for (double p : full.final_dist) total += p;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));

  Prediction norep = predict(params, prefix, Ablation::no_repeat);
  CHECK(norep.p_explore == 1.0);
  CHECK(norep.repeat_dist.empty());
  // the single-decoder variant may put mass on in-prefix items
  CHECK(norep.final_dist[1] > 0.0);

  Prediction noatt = predict(params, prefix, Ablation::no_attention);
  double total_na = 0.0;
  for (double p : noatt.final_dist) total_na += p;
  CHECK(total_na == doctest::Approx(1.0).epsilon(1e-6));
  // hybrid state differs, so the explore branch must differ from full
  CHECK(noatt.explore_dist != full.explore_dist);
}
