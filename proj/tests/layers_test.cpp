// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "nic/layers.hpp"
#include "support/gradcheck.hpp"

using namespace nic;
using nic::testing::grad_check;
using nic::testing::random_tensor;

namespace {

template <class T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST(Lstm, ZeroParamsZeroStateStaysZero) {
  ParamSet<float> ps;
  Rng rng(1);
  auto p = LstmParams<float>::create(ps, "l", 3, 2, rng);
  ps.fill_zero();
  Tape<float> tape(false);
  const auto s = lstm_cell(tape, Tensor<float>({1, 3}, {4, -1, 9}), LstmState<float>::zeros(1, 2), p);
  EXPECT_EQ(values(s.h), (std::vector<float>{0, 0}));
  EXPECT_EQ(values(s.c), (std::vector<float>{0, 0}));
}

TEST(Lstm, ZeroParamsCarryHalfTheCell) {
  ParamSet<float> ps;
  Rng rng(1);
  auto p = LstmParams<float>::create(ps, "l", 2, 1, rng);
  ps.fill_zero();
  Tape<float> tape(false);
  const auto s = lstm_cell(tape, Tensor<float>({1, 2}, {0.3f, 5}), {Tensor<float>({1, 1}), Tensor<float>({1, 1}, 2.0f)}, p);
  EXPECT_NEAR(s.c[0], 1.0, 1e-7);
  EXPECT_NEAR(s.h[0], 0.380797, 1e-6);
}

TEST(Lstm, RejectsMismatchedShapes) {
  ParamSet<float> ps;
  Rng rng(1);
  auto p = LstmParams<float>::create(ps, "l", 3, 2, rng);
  Tape<float> tape(false);
  EXPECT_THROW(lstm_cell(tape, Tensor<float>({1, 4}), LstmState<float>::zeros(1, 2), p), DimensionError);
  EXPECT_THROW(lstm_cell(tape, Tensor<float>({1, 3}), LstmState<float>::zeros(2, 2), p), DimensionError);
}

TEST(Lstm, GradientSeed7) {
  ParamSet<double> ps;
  Rng rng(7);
  auto p = LstmParams<double>::create(ps, "l", 3, 4, rng);
  for (auto& v : p.bias.data()) v = rng.uniform(-0.5, 0.5);
  auto x = random_tensor({2, 3}, rng), h = random_tensor({2, 4}, rng), c = random_tensor({2, 4}, rng);
  const auto r = grad_check([&](Tape<double>& t) { return sum(t, lstm_cell(t, x, {h, c}, p).h); },
                            {x, h, c, p.weight, p.bias});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Lstm, IsPure) {
  ParamSet<float> ps;
  Rng rng(3);
  auto p = LstmParams<float>::create(ps, "l", 3, 4, rng);
  Tensor<float> x({2, 3}, {0.1f, -0.2f, 0.3f, 0.7f, 0.0f, -1.0f});
  auto st = LstmState<float>::zeros(2, 4);
  st.h[1] = 0.4f;
  Tape<float> tape(false);
  const auto a = lstm_cell(tape, x, st, p), b = lstm_cell(tape, x, st, p);
  EXPECT_EQ(values(a.h), values(b.h));
  EXPECT_EQ(values(a.c), values(b.c));
}

TEST(Gru, ZeroParams) {
  ParamSet<float> ps;
  Rng rng(1);
  auto p = GruParams<float>::create(ps, "g", 2, 1, rng);
  ps.fill_zero();
  Tape<float> tape(false);
  EXPECT_EQ(gru_cell(tape, Tensor<float>({1, 2}, {3, 3}), Tensor<float>({1, 1}), p)[0], 0.0f);
  EXPECT_EQ(gru_cell(tape, Tensor<float>({1, 2}, {3, 3}), Tensor<float>({1, 1}, 1.0f), p)[0], 0.5f);
}

TEST(Gru, RejectsMismatchedShapes) {
  ParamSet<float> ps;
  Rng rng(1);
  auto p = GruParams<float>::create(ps, "g", 2, 3, rng);
  Tape<float> tape(false);
  EXPECT_THROW(gru_cell(tape, Tensor<float>({1, 3}), Tensor<float>({1, 3}), p), DimensionError);
  EXPECT_THROW(gru_cell(tape, Tensor<float>({1, 2}), Tensor<float>({1, 2}), p), DimensionError);
}

TEST(Gru, IsPure) {
  ParamSet<float> ps;
  Rng rng(4);
  auto p = GruParams<float>::create(ps, "g", 2, 3, rng);
  Tensor<float> x({1, 2}, {0.5f, -0.25f}), h({1, 3}, {0.1f, 0.2f, -0.3f});
  Tape<float> tape(false);
  EXPECT_EQ(values(gru_cell(tape, x, h, p)), values(gru_cell(tape, x, h, p)));
}

TEST(Attention, IdenticalRegionsGiveUniformWeights) {
  ParamSet<float> ps;
  Rng rng(2);
  auto p = AttentionParams<float>::create(ps, "a", 2, 3, 4, rng);
  Tensor<float> regions({4, 2});
  for (std::size_t r = 0; r < 4; ++r) {
    regions[r * 2] = 0.6f;
    regions[r * 2 + 1] = -1.5f;
  }
  Tape<float> tape(false);
  const auto a = attend(tape, regions, project_regions(tape, regions, p), Tensor<float>({1, 3}, 0.3f), p, 4);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_FLOAT_EQ(a.weights[r], 0.25f);
  EXPECT_FLOAT_EQ(a.context[0], 0.6f);
  EXPECT_FLOAT_EQ(a.context[1], -1.5f);
}

TEST(Attention, SingleRegionGetsAllWeight) {
  ParamSet<float> ps;
  Rng rng(2);
  auto p = AttentionParams<float>::create(ps, "a", 2, 3, 4, rng);
  Tensor<float> regions({1, 2}, {0.25f, 8});
  Tape<float> tape(false);
  const auto a = attend(tape, regions, project_regions(tape, regions, p), Tensor<float>({1, 3}, -0.7f), p, 1);
  EXPECT_EQ(a.weights[0], 1.0f);
  EXPECT_EQ(values(a.context), (std::vector<float>{0.25f, 8}));
}

TEST(Attention, ZeroRegionsRejected) {
  ParamSet<float> ps;
  Rng rng(2);
  auto p = AttentionParams<float>::create(ps, "a", 2, 3, 4, rng);
  Tape<float> tape(false);
  Tensor<float> regions({1, 2});
  EXPECT_THROW(attend(tape, regions, project_regions(tape, regions, p), Tensor<float>({1, 3}), p, 0), DimensionError);
}

// Independent re-evaluation of score_r = w . tanh(W_v^T v_r + W_h^T h) in double loops.
TEST(Attention, MatchesHighPrecisionReevaluationSeed13) {
  constexpr std::size_t R = 3, D = 2, A = 2, H = 3;
  ParamSet<float> ps;
  Rng rng(13);
  auto p = AttentionParams<float>::create(ps, "a", D, H, A, rng);
  Tensor<float> regions({R, D}), h({1, H});
  for (auto& v : regions.data()) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : h.data()) v = static_cast<float>(rng.uniform(-1, 1));
  Tape<float> tape(false);
  const auto got = attend(tape, regions, project_regions(tape, regions, p), h, p, R);

  std::vector<double> score(R, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t a = 0; a < A; ++a) {
      double pre = 0;
      for (std::size_t d = 0; d < D; ++d) pre += double(regions.at(r, d)) * double(p.region_proj.at(d, a));
      for (std::size_t k = 0; k < H; ++k) pre += double(h[k]) * double(p.hidden_proj.at(k, a));
      score[r] += double(p.score[a]) * std::tanh(pre);
    }
  }
  double z = 0;
  for (double s : score) z += std::exp(s);
  double total = 0;
  for (std::size_t r = 0; r < R; ++r) {
    const double w = std::exp(score[r]) / z;
    EXPECT_NEAR(got.weights[r], w, 1e-6);
    total += got.weights[r];
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
  for (std::size_t d = 0; d < D; ++d) {
    double c = 0;
    for (std::size_t r = 0; r < R; ++r) c += std::exp(score[r]) / z * regions.at(r, d);
    EXPECT_NEAR(got.context[d], c, 1e-6);
  }
}

TEST(Attention, WeightsAreDistributionsForRandomInputs) {
  ParamSet<float> ps;
  Rng rng(21);
  auto p = AttentionParams<float>::create(ps, "a", 3, 4, 5, rng);
  Tape<float> tape(false);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> regions({2 * 6, 3}), h({2, 4});
    for (auto& v : regions.data()) v = static_cast<float>(rng.uniform(-20, 20));
    for (auto& v : h.data()) v = static_cast<float>(rng.uniform(-20, 20));
    const auto a = attend(tape, regions, project_regions(tape, regions, p), h, p, 6);
    for (std::size_t b = 0; b < 2; ++b) {
      double s = 0;
      for (std::size_t r = 0; r < 6; ++r) {
        EXPECT_GE(a.weights.at(b, r), 0.0f);
        s += a.weights.at(b, r);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Classify, ZeroParamsAreUniform) {
  ParamSet<float> ps;
  Rng rng(1);
  auto head = Linear<float>::create(ps, "c", 4, 7, rng);
  ps.fill_zero();
  Tape<float> tape(false);
  const auto lp = classify(tape, Tensor<float>({2, 4}, 3.0f), head);
  for (float v : lp.data()) EXPECT_NEAR(v, std::log(1.0 / 7), 1e-6);
}

TEST(Classify, RowsNormalize) {
  ParamSet<float> ps;
  Rng rng(5);
  auto head = Linear<float>::create(ps, "c", 4, 9, rng);
  Tensor<float> x({3, 4});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-3, 3));
  Tape<float> tape(false);
  const auto lp = classify(tape, x, head);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) s += std::exp(double(lp.at(r, c)));
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Classify, RejectsSingleWordVocabulary) {
  ParamSet<float> ps;
  Rng rng(1);
  auto head = Linear<float>::create(ps, "c", 2, 1, rng);
  Tape<float> tape(false);
  EXPECT_THROW(classify(tape, Tensor<float>({1, 2}), head), DimensionError);
}

TEST(Classify, UniformCrossEntropyIsLnV) {
  Tape<double> tape(false);
  const std::int64_t target[] = {6};
  EXPECT_NEAR(cross_entropy(tape, Tensor<double>({1, 10}, 0.0), target).item(), 2.302585, 1e-6);
}

TEST(Classify, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  Rng rng(8);
  auto logits = random_tensor({2, 5}, rng, -2, 2);
  logits.set_requires_grad(true);
  const std::int64_t targets[] = {3, 0};
  Tape<double> tape;
  tape.backward(cross_entropy(tape, logits, targets));
  for (std::size_t b = 0; b < 2; ++b) {
    double z = 0;
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(logits.at(b, v));
    for (std::size_t v = 0; v < 5; ++v) {
      const double want = (std::exp(logits.at(b, v)) / z - (std::int64_t(v) == targets[b] ? 1.0 : 0.0)) / 2.0;
      EXPECT_NEAR(logits.grad()[b * 5 + v], want, 1e-12);
    }
  }
  const auto r = grad_check([&](Tape<double>& t) { return cross_entropy(t, logits, targets); }, {logits});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Embedding, GradientRoutesOnlyToLookedUpRows) {
  ParamSet<double> ps;
  Rng rng(6);
  auto emb = EmbeddingTable<double>::create(ps, "e", 6, 3, rng);
  emb.table.set_requires_grad(true);
  const std::int64_t ids[] = {4, 1, 4};
  Tape<double> tape;
  tape.backward(sum(tape, emb(tape, ids)));
  for (std::size_t row = 0; row < 6; ++row) {
    const double want = row == 4 ? 2.0 : row == 1 ? 1.0 : 0.0;
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(emb.table.grad()[row * 3 + j], want);
  }
}

TEST(Embedding, OutOfRangeIdRejected) {
  ParamSet<float> ps;
  Rng rng(6);
  auto emb = EmbeddingTable<float>::create(ps, "e", 6, 3, rng);
  Tape<float> tape(false);
  const std::int64_t bad[] = {6};
  const std::int64_t negative[] = {-1};
  EXPECT_THROW(emb(tape, bad), DimensionError);
  EXPECT_THROW(emb(tape, negative), DimensionError);
}

TEST(InitUniform, StaysWithinGlorotBound) {
  Tensor<double> w({30, 20});
  Rng rng(9);
  init_uniform(w, 30, 20, rng);
  const double bound = std::sqrt(6.0 / 50.0);
  for (double v : w.data()) EXPECT_LE(std::abs(v), bound);
}

// Every layer against central differences over 10 seeds, all inputs and parameters.
class LayerGradients : public ::testing::TestWithParam<int> {};

TEST_P(LayerGradients, MatchFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  Rng rng(seed);
  ParamSet<double> ps;
  auto lstm = LstmParams<double>::create(ps, "lstm", 3, 4, rng);
  auto gru = GruParams<double>::create(ps, "gru", 3, 4, rng);
  auto att = AttentionParams<double>::create(ps, "att", 2, 4, 3, rng);
  auto head = Linear<double>::create(ps, "head", 4, 5, rng);
  auto emb = EmbeddingTable<double>::create(ps, "emb", 5, 3, rng);
  for (auto& [_, t] : ps) {
    for (auto& v : t.data()) v += rng.uniform(-0.3, 0.3);  // nonzero biases too
  }
  auto x = random_tensor({2, 3}, rng), h = random_tensor({2, 4}, rng), c = random_tensor({2, 4}, rng);
  auto regions = random_tensor({2 * 3, 2}, rng);
  const std::int64_t ids[] = {2, 4};
  const std::int64_t targets[] = {1, 3};
  auto check = [](const char* name, auto f, std::vector<Tensor<double>> in) {
    const auto r = grad_check(f, std::move(in));
    EXPECT_LT(r.max_rel_error, 1e-4) << name << " " << r.worst;
  };
  check("lstm", [&](Tape<double>& t) { return sum(t, lstm_cell(t, x, {h, c}, lstm).h); },
        {x, h, c, lstm.weight, lstm.bias});
  check("lstm-cell", [&](Tape<double>& t) { return sum(t, lstm_cell(t, x, {h, c}, lstm).c); },
        {x, h, c, lstm.weight, lstm.bias});
  check("gru", [&](Tape<double>& t) { return sum(t, gru_cell(t, x, h, gru)); },
        {x, h, gru.gate_weight, gru.gate_bias, gru.candidate_weight, gru.candidate_bias});
  check("attend", [&](Tape<double>& t) {
    const auto a = attend(t, regions, project_regions(t, regions, att), h, att, 3);
    return add(t, sum(t, mul(t, a.weights, a.weights)), sum(t, a.context));
  }, {regions, h, att.region_proj, att.hidden_proj, att.score});
  check("classify", [&](Tape<double>& t) { return nll_sum(t, classify(t, h, head), targets); },
        {h, head.weight, head.bias});
  check("embedding", [&](Tape<double>& t) { return sum(t, mul(t, emb(t, ids), x)); }, {emb.table, x});
}

INSTANTIATE_TEST_SUITE_P(Seeds, LayerGradients, ::testing::Range(0, 10));
