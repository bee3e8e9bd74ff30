// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "nic/models.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace nic;
using nic::testing::grad_check;
using nic::testing::random_record;
using nic::testing::tiny_config;

namespace {

const Arch kArchs[] = {Arch::kSpecimen, Arch::kTopDown};

template <class T>
bool all_zero(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return v == T(0); });
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Row-vector x (1 x n) times W (n x m) plus b, in double.
std::vector<double> affine64(const std::vector<double>& x, const Tensor<float>& w, const Tensor<float>& b) {
  std::vector<double> out(w.dim(1));
  for (std::size_t j = 0; j < out.size(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * double(w.at(i, j));
    out[j] = s;
  }
  return out;
}

}  // namespace

TEST(ModelConfig, ValidatesSizes) {
  auto c = tiny_config(Arch::kSpecimen, 6);
  EXPECT_NO_THROW(c.validate());
  c.lstm_layers = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(Arch::kSpecimen, 6);
  c.hidden_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(Arch::kSpecimen, 1);
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(ModelConfig{}.max_caption_len, 30u);
}

TEST(ModelConfig, JsonRoundTrip) {
  const auto c = tiny_config(Arch::kTopDown, 9, 1);
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
  EXPECT_EQ(parse_arch(arch_name(Arch::kTopDown)), Arch::kTopDown);
  EXPECT_THROW(parse_arch("transformer"), UsageError);
}

TEST(InitState, SpecimenZeroFcGivesZeroState) {
  auto m = CaptionModel<float>::create(tiny_config(Arch::kSpecimen, 6, 2), 1);
  for (auto& v : m.params().at("image_fc.W").data()) v = 0;
  Rng rng(2);
  Tape<float> tape(false);
  const auto s = m.init_state(tape, m.encode(tape, random_record(m.config(), 1, rng)));
  ASSERT_EQ(s.lstm.size(), 2u);
  for (const auto& l : s.lstm) {
    EXPECT_TRUE(all_zero(l.h));
    EXPECT_TRUE(all_zero(l.c));
  }
}

TEST(InitState, SpecimenIdentityFcPassesFeatureThrough) {
  auto c = tiny_config(Arch::kSpecimen, 6);
  c.feature_dim = c.hidden_size;
  auto m = CaptionModel<float>::create(c, 1);
  auto& w = m.params().at("image_fc.W");
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (i / c.hidden_size == i % c.hidden_size) ? 1.0f : 0.0f;
  Rng rng(3);
  const auto rec = random_record(c, 1, rng);
  Tape<float> tape(false);
  const auto s = m.init_state(tape, m.encode(tape, rec));
  EXPECT_EQ(std::vector<float>(s.lstm[0].h.data().begin(), s.lstm[0].h.data().end()), rec.global);
  EXPECT_TRUE(all_zero(s.lstm[0].c));
}

TEST(InitState, TopDownStartsAtZero) {
  auto m = CaptionModel<float>::create(tiny_config(Arch::kTopDown, 6), 4);
  Rng rng(5);
  Tape<float> tape(false);
  const auto s = m.init_state(tape, m.encode(tape, random_record(m.config(), 1, rng)));
  for (const auto& l : s.lstm) {
    EXPECT_TRUE(all_zero(l.h));
    EXPECT_TRUE(all_zero(l.c));
  }
  for (const auto& g : s.gru) EXPECT_TRUE(all_zero(g));
}

TEST(Encode, RejectsMismatchedFeatures) {
  auto m = CaptionModel<float>::create(tiny_config(Arch::kSpecimen, 6), 1);
  FeatureRecord rec;
  rec.image_id = 7;
  rec.global.assign(4, 0.0f);
  rec.regions.assign(6, 0.0f);
  Tape<float> tape(false);
  EXPECT_THROW(m.encode(tape, rec), ConfigError);
}

TEST(Step, ZeroParamsAreUniformForEveryArchitecture) {
  for (Arch arch : kArchs) {
    for (std::size_t layers : {1u, 2u}) {
      auto m = CaptionModel<float>::create(tiny_config(arch, 7, layers), 3);
      m.params().fill_zero();
      Rng rng(1);
      Tape<float> tape(false);
      const auto enc = m.encode(tape, random_record(m.config(), 1, rng));
      auto state = m.init_state(tape, enc);
      for (TokenId tok : {1, 5, 6, 4}) {
        const TokenId in[] = {tok};
        auto out = m.step(tape, in, state, enc);
        for (float lp : out.logprobs.data()) EXPECT_FLOAT_EQ(lp, std::log(1.0f / 7.0f));
        state = std::move(out.state);
      }
    }
  }
}

TEST(Step, AttentionWeightsPresentOnlyForTopDown) {
  for (Arch arch : kArchs) {
    auto c = tiny_config(arch, 6);
    c.region_count = 4;
    auto m = CaptionModel<float>::create(c, 5);
    Rng rng(5);
    Tape<float> tape(false);
    const auto enc = m.encode(tape, random_record(c, 1, rng));
    const TokenId in[] = {Vocabulary::kStart};
    const auto out = m.step(tape, in, m.init_state(tape, enc), enc);
    ASSERT_EQ(out.attention_weights.has_value(), arch == Arch::kTopDown);
    if (out.attention_weights) {
      ASSERT_EQ(out.attention_weights->shape(), (Shape{1, 4}));
      double s = 0;
      for (float w : out.attention_weights->data()) s += w;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Step, RejectsUnknownToken) {
  auto m = CaptionModel<float>::create(tiny_config(Arch::kSpecimen, 6), 1);
  Rng rng(1);
  Tape<float> tape(false);
  const auto enc = m.encode(tape, random_record(m.config(), 1, rng));
  const TokenId in[] = {6};
  EXPECT_THROW(m.step(tape, in, m.init_state(tape, enc), enc), DimensionError);
}

TEST(Step, IsBitwiseDeterministic) {
  for (Arch arch : kArchs) {
    auto m = CaptionModel<float>::create(tiny_config(arch, 8), 9);
    Rng rng(9);
    Tape<float> tape(false);
    const auto enc = m.encode(tape, random_record(m.config(), 1, rng));
    const TokenId in[] = {5};
    const auto a = m.step(tape, in, m.init_state(tape, enc), enc);
    const auto b = m.step(tape, in, m.init_state(tape, enc), enc);
    EXPECT_EQ(std::vector<float>(a.logprobs.data().begin(), a.logprobs.data().end()),
              std::vector<float>(b.logprobs.data().begin(), b.logprobs.data().end()));
  }
}

TEST(Step, IdenticalRegionsGiveUniformAttentionEveryStep) {
  auto c = tiny_config(Arch::kTopDown, 8);
  c.region_count = 4;
  auto m = CaptionModel<float>::create(c, 2);
  Rng rng(2);
  auto rec = random_record(c, 1, rng);
  for (std::size_t r = 1; r < c.region_count; ++r) {
    std::copy_n(rec.regions.begin(), c.region_dim, rec.regions.begin() + static_cast<std::ptrdiff_t>(r * c.region_dim));
  }
  Tape<float> tape(false);
  const auto enc = m.encode(tape, rec);
  auto state = m.init_state(tape, enc);
  for (TokenId tok : {1, 4, 7, 5}) {
    const TokenId in[] = {tok};
    auto out = m.step(tape, in, state, enc);
    for (float w : out.attention_weights->data()) EXPECT_FLOAT_EQ(w, 0.25f);
    state = std::move(out.state);
  }
}

// Hand-sized specimen step, re-evaluated from the composed equations in double.
TEST(Step, SpecimenMatchesHighPrecisionReevaluationSeed5) {
  auto c = tiny_config(Arch::kSpecimen, 3);
  c.embed_size = 2;
  c.hidden_size = 2;
  c.feature_dim = 3;
  auto m = CaptionModel<float>::create(c, 5);
  Rng rng(5);
  for (auto& [_, t] : m.params()) {
    for (auto& v : t.data()) v += static_cast<float>(rng.uniform(-0.5, 0.5));  // nonzero biases
  }
  const auto rec = random_record(c, 1, rng);
  Tape<float> tape(false);
  const auto enc = m.encode(tape, rec);
  const TokenId tokens[] = {Vocabulary::kStart, 2, 0};
  auto state = m.init_state(tape, enc);

  const auto& ps = m.params();
  std::vector<double> h = affine64(std::vector<double>(rec.global.begin(), rec.global.end()), ps.at("image_fc.W"),
                                   ps.at("image_fc.b"));
  std::vector<double> cell(2, 0.0);
  for (TokenId tok : tokens) {
    const TokenId in[] = {tok};
    auto out = m.step(tape, in, state, enc);
    std::vector<double> xh;
    for (std::size_t j = 0; j < 2; ++j) xh.push_back(ps.at("embed").at(static_cast<std::size_t>(tok), j));
    xh.insert(xh.end(), h.begin(), h.end());
    const auto pre = affine64(xh, ps.at("lstm1.W"), ps.at("lstm1.b"));
    for (std::size_t j = 0; j < 2; ++j) {
      const double i = sig(pre[j]), f = sig(pre[2 + j]), o = sig(pre[4 + j]), g = std::tanh(pre[6 + j]);
      cell[j] = f * cell[j] + i * g;
      h[j] = o * std::tanh(cell[j]);
    }
    const auto logits = affine64(h, ps.at("classifier.W"), ps.at("classifier.b"));
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - mx);
    for (std::size_t v = 0; v < 3; ++v) EXPECT_NEAR(out.logprobs[v], logits[v] - mx - std::log(z), 1e-6);
    state = std::move(out.state);
  }
}

TEST(Frame, TruncatesKeepingEnd) {
  const TokenId words[] = {4, 5, 6, 7, 8};
  const auto f = frame_caption(words, 4);
  EXPECT_TRUE(f.truncated);
  EXPECT_EQ(f.inputs, (TokenSeq{1, 4, 5, 6}));
  EXPECT_EQ(f.targets, (TokenSeq{4, 5, 6, 2}));
  const auto g = frame_caption(std::span<const TokenId>(words, 2), 4);
  EXPECT_FALSE(g.truncated);
  EXPECT_EQ(g.targets, (TokenSeq{4, 5, 2}));
}

TEST(Loss, ZeroParamsGiveLnV) {
  for (Arch arch : kArchs) {
    auto m = CaptionModel<float>::create(tiny_config(arch, 10), 1);
    m.params().fill_zero();
    Rng rng(1);
    const auto rec = random_record(m.config(), 1, rng);
    const TokenSeq cap = {4, 9, 6};
    const TrainingPair batch[] = {{&rec, &cap}};
    Tape<float> tape(false);
    EXPECT_NEAR(m.teacher_forced_loss(tape, batch).item(), 2.302585, 1e-6);
  }
}

TEST(Loss, TruncationWarns) {
  auto m = CaptionModel<float>::create(tiny_config(Arch::kSpecimen, 10), 1);
  Rng rng(1);
  const auto rec = random_record(m.config(), 42, rng);
  const TokenSeq cap = {4, 5, 6, 7, 8, 9};
  const TrainingPair batch[] = {{&rec, &cap}};
  Tape<float> tape(false);
  std::ostringstream warn;
  m.teacher_forced_loss(tape, batch, &warn);
  EXPECT_NE(warn.str().find("image 42 truncated"), std::string::npos) << warn.str();
}

TEST(Loss, DuplicatingTheBatchLeavesLossUnchanged) {
  for (Arch arch : kArchs) {
    auto m = CaptionModel<double>::create(tiny_config(arch, 9), 6);
    Rng rng(6);
    const auto rec = random_record(m.config(), 1, rng);
    const TokenSeq cap = {4, 8};
    const TrainingPair one[] = {{&rec, &cap}};
    const TrainingPair two[] = {{&rec, &cap}, {&rec, &cap}};
    Tape<double> tape(false);
    EXPECT_NEAR(m.teacher_forced_loss(tape, one).item(), m.teacher_forced_loss(tape, two).item(), 1e-12);
  }
}

TEST(Loss, PermutationInvariant) {
  for (Arch arch : kArchs) {
    auto m = CaptionModel<float>::create(tiny_config(arch, 9), 8);
    Rng rng(8);
    std::vector<FeatureRecord> recs;
    for (std::uint64_t i = 0; i < 4; ++i) recs.push_back(random_record(m.config(), i + 1, rng));
    const std::vector<TokenSeq> caps = {{4}, {5, 6, 7}, {8, 4}, {6, 6, 6, 6, 6}};
    std::vector<TrainingPair> batch;
    for (std::size_t i = 0; i < 4; ++i) batch.push_back({&recs[i], &caps[i]});
    Tape<float> tape(false);
    const float base = m.teacher_forced_loss(tape, batch).item();
    EXPECT_EQ(base, m.teacher_forced_loss(tape, batch).item());
    std::vector<TrainingPair> perm = {batch[2], batch[0], batch[3], batch[1]};
    EXPECT_NEAR(base, m.teacher_forced_loss(tape, perm).item(), 1e-6);
  }
}

TEST(Loss, ClassifierBiasGradientSeed11) {
  auto m = CaptionModel<double>::create(tiny_config(Arch::kSpecimen, 8), 11);
  Rng rng(11);
  const auto rec = random_record(m.config(), 1, rng);
  const TokenSeq cap = {5, 7};
  const TrainingPair batch[] = {{&rec, &cap}};
  const auto r = grad_check([&](Tape<double>& t) { return m.teacher_forced_loss(t, batch); },
                            {m.params().at("classifier.b")});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Model, CastPreservesParameters) {
  const auto m = CaptionModel<float>::create(tiny_config(Arch::kTopDown, 7), 3);
  const auto d = m.cast<double>();
  for (const auto& [name, t] : m.params()) {
    const auto& u = d.params().at(name);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(double(t[i]), u[i]) << name;
  }
}

// Whole-model gradient check in 64-bit across every parameter tensor.
class ModelGradients : public ::testing::TestWithParam<std::tuple<int, int>> {};

TEST_P(ModelGradients, MatchFiniteDifferences) {
  const auto [arch_index, seed] = GetParam();
  const Arch arch = kArchs[arch_index];
  for (std::size_t layers : arch == Arch::kSpecimen ? std::vector<std::size_t>{1, 2} : std::vector<std::size_t>{1}) {
    auto m = CaptionModel<double>::create(tiny_config(arch, 7, layers), static_cast<std::uint64_t>(seed));
    Rng rng(static_cast<std::uint64_t>(seed) + 100);
    for (auto& [_, t] : m.params()) {
      for (auto& v : t.data()) v += rng.uniform(-0.2, 0.2);
    }
    std::vector<FeatureRecord> recs;
    for (std::uint64_t i = 0; i < 2; ++i) recs.push_back(random_record(m.config(), i + 1, rng));
    const std::vector<TokenSeq> caps = {{4, 6, 5}, {6}};
    std::vector<TrainingPair> batch = {{&recs[0], &caps[0]}, {&recs[1], &caps[1]}};
    std::vector<Tensor<double>> inputs;
    for (auto& [_, t] : m.params()) inputs.push_back(t);
    const auto r = grad_check([&](Tape<double>& t) { return m.teacher_forced_loss(t, batch); }, inputs);
    EXPECT_LT(r.max_rel_error, 1e-4) << arch_name(arch) << " layers " << layers << " " << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(ArchSeeds, ModelGradients, ::testing::Combine(::testing::Values(0, 1), ::testing::Range(0, 10)));
