#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "rpn/encoder.hpp"

using namespace rpn;

namespace {

EmbeddingTable make_embedding(std::size_t vocab, std::size_t d,
                              std::mt19937_64* rng = nullptr) {
  std::vector<double> values(vocab * d, 0.0);
  if (rng)
    for (auto& v : values) v = ((*rng)() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
  return EmbeddingTable{Tensor::leaf({vocab, d}, std::move(values))};
}

GRUParams make_gru(std::size_t d_emb, std::size_t d_hid,
                   std::mt19937_64* rng = nullptr) {
  auto mat = [&](std::size_t r, std::size_t c) {
    std::vector<double> values(r * c, 0.0);
    if (rng)
      for (auto& v : values) v = ((*rng)() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
    return Tensor::leaf({r, c}, std::move(values));
  };
  GRUParams g;
  g.W_z = mat(d_hid, d_emb + d_hid);
  g.W_r = mat(d_hid, d_emb + d_hid);
  g.W_h = mat(d_hid, d_emb + d_hid);
  g.b_z = Tensor::leaf_zeros({d_hid});
  g.b_r = Tensor::leaf_zeros({d_hid});
  g.b_h = Tensor::leaf_zeros({d_hid});
  return g;
}

}  // namespace

TEST_CASE("all-zero parameters keep the state at zero") {
  auto emb = make_embedding(5, 3);
  auto gru = make_gru(3, 3);
  auto enc = encode(std::vector<std::size_t>{0, 2, 4, 1}, emb, gru);
  CHECK(enc.length == 4);
  for (double v : enc.states.data()) CHECK(v == 0.0);
  for (double v : enc.final.data()) CHECK(v == 0.0);
}

TEST_CASE("single-item prefix gives one row equal to final") {
  std::mt19937_64 rng(3);
  auto emb = make_embedding(6, 4, &rng);
  auto gru = make_gru(4, 5, &rng);
  auto enc = encode(std::vector<std::size_t>{2}, emb, gru);
  CHECK(enc.states.rows() == 1);
  CHECK(enc.states.cols() == 5);
  for (std::size_t j = 0; j < 5; ++j)
    CHECK(enc.states.at(0, j) == enc.final.at(0, j));
}

TEST_CASE("hand-set scalar GRU recurrence") {
  // d_emb = d_hid = 1, W_z = W_r = 0, W_h = [1, 0], emb(A) = 1:
  // z = sigmoid(0) = 0.5, candidate = tanh(1), h1 = 0.5*tanh(1)
  EmbeddingTable emb{Tensor::leaf({1, 1}, {1.0})};
  GRUParams gru;
  gru.W_z = Tensor::leaf({1, 2}, {0, 0});
  gru.W_r = Tensor::leaf({1, 2}, {0, 0});
  gru.W_h = Tensor::leaf({1, 2}, {1, 0});
  gru.b_z = Tensor::leaf_zeros({1});
  gru.b_r = Tensor::leaf_zeros({1});
  gru.b_h = Tensor::leaf_zeros({1});

  auto enc = encode(std::vector<std::size_t>{0}, emb, gru);
  const double expected = 0.5 * std::tanh(1.0);
  CHECK(enc.final.at(0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(enc.final.at(0) == doctest::Approx(0.380797).epsilon(1e-5));
}

TEST_CASE("hidden entries stay inside (-1, 1)") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto emb = make_embedding(8, 4, &rng);
    auto gru = make_gru(4, 6, &rng);
    std::vector<std::size_t> prefix;
    for (int t = 0; t < 7; ++t) prefix.push_back(rng() % 8);
    auto enc = encode(prefix, emb, gru);
    for (double v : enc.states.data()) {
      CHECK(v > -1.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("eval-mode encoding is deterministic") {
  std::mt19937_64 rng(17);
  auto emb = make_embedding(10, 4, &rng);
  auto gru = make_gru(4, 4, &rng);
  std::vector<std::size_t> prefix{1, 3, 3, 7};
  auto a = encode(prefix, emb, gru);
  auto b = encode(prefix, emb, gru);
  CHECK(a.states.data() == b.states.data());
}

TEST_CASE("index out of vocabulary is a vocabulary error") {
  auto emb = make_embedding(4, 2);
  auto gru = make_gru(2, 2);
  CHECK_THROWS_AS(encode(std::vector<std::size_t>{1, 4}, emb, gru),
                  VocabularyError);
  CHECK_THROWS_AS(encode(std::vector<std::size_t>{}, emb, gru), ContractError);
}

TEST_CASE("padding never alters valid positions or the final state") {
  std::mt19937_64 rng(23);
  auto emb = make_embedding(9, 3, &rng);
  auto gru = make_gru(3, 4, &rng);

  // batch with lengths 2 and 5, padded to 5
  std::vector<PrefixExample> ex(2);
  ex[0].prefix = {1, 2};
  ex[0].target = 0;
  ex[1].prefix = {3, 4, 5, 6, 7};
  ex[1].target = 0;
  auto batches = make_batches(ex, 2, 0);
  REQUIRE(batches.size() == 1);
  auto encb = encode_batch(batches[0], emb, gru);

  for (std::size_t row = 0; row < 2; ++row) {
    const auto& prefix = ex[row].prefix;
    auto single = encode(prefix, emb, gru);
    for (std::size_t t = 0; t < prefix.size(); ++t)
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(encb.states[t].at(row, j) ==
              doctest::Approx(single.states.at(t, j)).epsilon(1e-12));
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(encb.final.at(row, j) ==
            doctest::Approx(single.final.at(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("gradients of a readout of final match finite differences") {
  std::mt19937_64 rng(31);
  auto emb = make_embedding(5, 3, &rng);
  auto gru = make_gru(3, 3, &rng);
  std::vector<std::size_t> prefix{0, 3, 1, 3};

  std::vector<std::pair<std::string, Tensor>> params = {
      {"embedding", emb.matrix}, {"W_z", gru.W_z}, {"W_r", gru.W_r},
      {"W_h", gru.W_h},          {"b_z", gru.b_z}, {"b_r", gru.b_r},
      {"b_h", gru.b_h},
  };
  auto build = [&]() {
    auto enc = encode(prefix, emb, gru);
    return sum(tanh(enc.final));
  };
  auto loss_value = [&] {
    NoGradGuard guard;
    return build().item();
  };
  auto run_backward = [&] {
    Tape tape;
    tape.backward(build());
  };
  auto bad = gradcheck::check(params, loss_value, run_backward);
  CHECK_MESSAGE(bad.empty(), bad.size() << " mismatching gradient entries");
}

TEST_CASE("train-mode embedding dropout consumes the rng") {
  std::mt19937_64 rng(37);
  auto emb = make_embedding(6, 8, &rng);
  auto gru = make_gru(8, 4, &rng);
  CounterRng drop_rng(123);
  ForwardOptions opts;
  opts.train = true;
  opts.dropout = 0.5;
  opts.rng = &drop_rng;
  auto enc = encode(std::vector<std::size_t>{0, 1, 2}, emb, gru, opts);
  CHECK(drop_rng.draws() == 3 * 8);
  CHECK(enc.length == 3);

  CHECK_THROWS_AS(
      encode(std::vector<std::size_t>{0}, emb, gru,
             ForwardOptions{.train = true, .dropout = 0.5, .rng = nullptr}),
      ContractError);
}
