// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nic/data.hpp"
#include "nic/error.hpp"
#include "nic/layers.hpp"
#include "nic/ops.hpp"
#include "nic/random.hpp"
#include "nic/tensor.hpp"

namespace nic {

enum class Arch { kSpecimen, kTopDown };

inline std::string arch_name(Arch a) { return a == Arch::kSpecimen ? "specimen" : "topdown-lstmgru"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "specimen") return Arch::kSpecimen;
  if (s == "topdown-lstmgru") return Arch::kTopDown;
  throw UsageError("unknown architecture '" + s + "' (expected specimen or topdown-lstmgru)");
}

struct ModelConfig {
  Arch arch = Arch::kSpecimen;
  std::size_t vocab_size = 0;
  std::size_t embed_size = 256;
  std::size_t hidden_size = 256;
  std::size_t lstm_layers = 1;  // specimen only
  std::size_t attention_size = 256;
  std::size_t feature_dim = 0;
  std::size_t region_dim = 0;
  std::size_t region_count = 0;
  std::size_t max_caption_len = 30;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("model config: vocabulary needs at least 2 entries");
    if (embed_size == 0 || hidden_size == 0 || attention_size == 0 || feature_dim == 0 || region_dim == 0 ||
        region_count == 0 || max_caption_len == 0) {
      throw ConfigError("model config: every size must be positive");
    }
    if (lstm_layers != 1 && lstm_layers != 2) throw ConfigError("model config: lstm_layers must be 1 or 2");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"arch", arch_name(c.arch)},
          {"vocab_size", c.vocab_size},
          {"embed_size", c.embed_size},
          {"hidden_size", c.hidden_size},
          {"lstm_layers", c.lstm_layers},
          {"attention_size", c.attention_size},
          {"feature_dim", c.feature_dim},
          {"region_dim", c.region_dim},
          {"region_count", c.region_count},
          {"max_caption_len", c.max_caption_len}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_size = j.at("embed_size").get<std::size_t>();
  c.hidden_size = j.at("hidden_size").get<std::size_t>();
  c.lstm_layers = j.at("lstm_layers").get<std::size_t>();
  c.attention_size = j.at("attention_size").get<std::size_t>();
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.region_dim = j.at("region_dim").get<std::size_t>();
  c.region_count = j.at("region_count").get<std::size_t>();
  c.max_caption_len = j.at("max_caption_len").get<std::size_t>();
  c.validate();
  return c;
}

/// Per-batch image inputs, with the region projection precomputed once.
template <class T>
struct EncodedFeatures {
  std::size_t batch = 0;
  Tensor<T> global;     // B x D_f
  Tensor<T> regions;    // (B * R) x D_a
  Tensor<T> projected;  // (B * R) x A, topdown only
  Tensor<T> pooled;     // B x D_a, mean over regions, topdown only
};

/// Specimen: one LstmState per layer. Top-down: lstm = {attention, language},
/// gru = {attention output, language output}.
template <class T>
struct DecoderState {
  std::vector<LstmState<T>> lstm;
  std::vector<Tensor<T>> gru;
};

template <class T>
struct StepOutput {
  Tensor<T> logprobs;  // B x V
  DecoderState<T> state;
  std::optional<Tensor<T>> attention_weights;  // B x R, top-down only
};

/// Stacks feature records into batch tensors.
template <class T>
std::pair<Tensor<T>, Tensor<T>> stack_features(std::span<const FeatureRecord* const> records, std::size_t feature_dim,
                                               std::size_t region_count, std::size_t region_dim) {
  if (records.empty()) throw DimensionError("stack_features: empty batch");
  const std::size_t b = records.size();
  const std::size_t nreg = region_count * region_dim;
  Tensor<T> global({b, feature_dim});
  Tensor<T> regions({b * region_count, region_dim});
  for (std::size_t i = 0; i < b; ++i) {
    const auto& r = *records[i];
    if (r.global.size() != feature_dim || r.regions.size() != nreg) {
      throw ConfigError("image " + std::to_string(r.image_id) + " features (" + std::to_string(r.global.size()) +
                        " global, " + std::to_string(r.regions.size()) + " region values) do not match model dims (" +
                        std::to_string(feature_dim) + ", " + std::to_string(region_count) + "x" +
                        std::to_string(region_dim) + ")");
    }
    std::copy(r.global.begin(), r.global.end(), global.data().begin() + static_cast<std::ptrdiff_t>(i * feature_dim));
    std::copy(r.regions.begin(), r.regions.end(), regions.data().begin() + static_cast<std::ptrdiff_t>(i * nreg));
  }
  return {std::move(global), std::move(regions)};
}

/// One (image, reference) pair for teacher forcing.
struct TrainingPair {
  const FeatureRecord* features = nullptr;
  const TokenSeq* caption = nullptr;
};

/// Decoder input/target rows for a caption: inputs <start> w1..wn, targets
/// w1..wn <end>. Words beyond max_len - 1 are dropped so the targets, <end>
/// included, fit in max_len.
struct FramedCaption {
  TokenSeq inputs;
  TokenSeq targets;
  bool truncated = false;
};

inline FramedCaption frame_caption(std::span<const TokenId> words, std::size_t max_len) {
  FramedCaption f;
  const std::size_t n = std::min(words.size(), max_len - 1);
  f.truncated = n < words.size();
  f.inputs.push_back(Vocabulary::kStart);
  for (std::size_t i = 0; i < n; ++i) {
    f.inputs.push_back(words[i]);
    f.targets.push_back(words[i]);
  }
  f.targets.push_back(Vocabulary::kEnd);
  return f;
}

/// Both decoder architectures behind one step interface.
template <class T>
class CaptionModel {
 public:
  using value_type = T;

  CaptionModel(ModelConfig config, ParamSet<T> params) : config_(config), params_(std::move(params)) {
    config_.validate();
    bind();
  }

  /// Fresh parameters: uniform(+/- sqrt(6 / (fan_in + fan_out))) matrices, zero biases.
  static CaptionModel create(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ParamSet<T> ps;
    Rng rng(seed);
    const std::size_t e = config.embed_size, h = config.hidden_size;
    EmbeddingTable<T>::create(ps, "embed", config.vocab_size, e, rng);
    if (config.arch == Arch::kSpecimen) {
      Linear<T>::create(ps, "image_fc", config.feature_dim, h, rng);
      LstmParams<T>::create(ps, "lstm1", e, h, rng);
      if (config.lstm_layers == 2) LstmParams<T>::create(ps, "lstm2", h, h, rng);
      Linear<T>::create(ps, "classifier", h, config.vocab_size, rng);
    } else {
      LstmParams<T>::create(ps, "att_lstm", h + e + config.region_dim, h, rng);
      GruParams<T>::create(ps, "att_gru", h, h, rng);
      AttentionParams<T>::create(ps, "attention", config.region_dim, h, config.attention_size, rng);
      LstmParams<T>::create(ps, "lang_lstm", config.region_dim + h, h, rng);
      GruParams<T>::create(ps, "lang_gru", h, h, rng);
      Linear<T>::create(ps, "classifier", 2 * h, config.vocab_size, rng);
    }
    return CaptionModel(config, std::move(ps));
  }

  const ModelConfig& config() const { return config_; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>& params() { return params_; }

  template <class U>
  CaptionModel<U> cast() const {
    return CaptionModel<U>(config_, params_.template cast<U>());
  }

  EncodedFeatures<T> encode(Tape<T>& tape, Tensor<T> global, Tensor<T> regions) const {
    const std::size_t b = global.dim(0);
    if (global.rank() != 2 || global.dim(1) != config_.feature_dim || regions.rank() != 2 ||
        regions.dim(0) != b * config_.region_count || regions.dim(1) != config_.region_dim) {
      throw ConfigError("features " + shape_str(global.shape()) + " / regions " + shape_str(regions.shape()) +
                        " do not match model dims");
    }
    EncodedFeatures<T> enc{b, std::move(global), std::move(regions), {}, {}};
    if (config_.arch == Arch::kTopDown) {
      enc.projected = project_regions(tape, enc.regions, *attention_);
      enc.pooled = mean_groups(tape, enc.regions, config_.region_count);
    }
    return enc;
  }

  EncodedFeatures<T> encode(Tape<T>& tape, std::span<const FeatureRecord* const> records) const {
    auto [g, r] = stack_features<T>(records, config_.feature_dim, config_.region_count, config_.region_dim);
    return encode(tape, std::move(g), std::move(r));
  }

  EncodedFeatures<T> encode(Tape<T>& tape, const FeatureRecord& record) const {
    const FeatureRecord* one[] = {&record};
    return encode(tape, std::span<const FeatureRecord* const>(one));
  }

  /// Specimen: the image FC output seeds layer-1 h; everything else starts at zero.
  DecoderState<T> init_state(Tape<T>& tape, const EncodedFeatures<T>& enc) const {
    const std::size_t b = enc.batch, h = config_.hidden_size;
    DecoderState<T> s;
    if (config_.arch == Arch::kSpecimen) {
      s.lstm.push_back({(*image_fc_)(tape, enc.global), Tensor<T>({b, h})});
      if (config_.lstm_layers == 2) s.lstm.push_back(LstmState<T>::zeros(b, h));
    } else {
      s.lstm = {LstmState<T>::zeros(b, h), LstmState<T>::zeros(b, h)};
      s.gru = {Tensor<T>({b, h}), Tensor<T>({b, h})};
    }
    return s;
  }

  StepOutput<T> step(Tape<T>& tape, std::span<const TokenId> tokens, const DecoderState<T>& state,
                     const EncodedFeatures<T>& enc) const {
    if (tokens.size() != enc.batch) {
      throw DimensionError("step: " + std::to_string(tokens.size()) + " tokens for batch of " +
                           std::to_string(enc.batch));
    }
    const Tensor<T> x = (*embed_)(tape, tokens);
    if (config_.arch == Arch::kSpecimen) {
      if (state.lstm.size() != lstm_.size()) throw DimensionError("step: state has wrong number of LSTM layers");
      StepOutput<T> out;
      Tensor<T> input = x;
      for (std::size_t l = 0; l < lstm_.size(); ++l) {
        out.state.lstm.push_back(lstm_cell(tape, input, state.lstm[l], lstm_[l]));
        input = out.state.lstm.back().h;
      }
      out.logprobs = classify(tape, input, *classifier_);
      return out;
    }
    if (state.lstm.size() != 2 || state.gru.size() != 2) throw DimensionError("step: malformed top-down state");
    const Tensor<T>& prev_language = state.gru[1];
    LstmState<T> att = lstm_cell(tape, concat(tape, {prev_language, x, enc.pooled}), state.lstm[0], lstm_[0]);
    Tensor<T> att_out = gru_cell(tape, att.h, state.gru[0], gru_[0]);
    Attended<T> a = attend(tape, enc.regions, enc.projected, att_out, *attention_, config_.region_count);
    LstmState<T> lang = lstm_cell(tape, concat(tape, {a.context, att_out}), state.lstm[1], lstm_[1]);
    Tensor<T> lang_out = gru_cell(tape, lang.h, state.gru[1], gru_[1]);

    StepOutput<T> out;
    out.logprobs = classify(tape, concat(tape, {att_out, lang_out}), *classifier_);
    out.attention_weights = a.weights;
    out.state.lstm = {std::move(att), std::move(lang)};
    out.state.gru = {std::move(att_out), std::move(lang_out)};
    return out;
  }

  /// The per-image vector compared in feature space: the trained image FC
  /// output for specimen, the raw global feature for top-down.
  Tensor<T> image_embedding(Tape<T>& tape, const EncodedFeatures<T>& enc) const {
    if (config_.arch == Arch::kSpecimen) return (*image_fc_)(tape, enc.global);
    return enc.global;
  }

  const Tensor<T>& embedding_table() const { return embed_->table; }

  /// Mean cross-entropy over every non-pad target position of the batch.
  Tensor<T> teacher_forced_loss(Tape<T>& tape, std::span<const TrainingPair> batch, std::ostream* warn = nullptr) const {
    if (batch.empty()) throw UsageError("teacher_forced_loss: empty batch");
    std::vector<FramedCaption> framed;
    std::vector<const FeatureRecord*> records;
    std::size_t steps = 0;
    for (const auto& p : batch) {
      framed.push_back(frame_caption(*p.caption, config_.max_caption_len));
      if (framed.back().truncated && warn) {
        *warn << "warning: caption for image " << p.features->image_id << " truncated to "
              << config_.max_caption_len << " tokens\n";
      }
      records.push_back(p.features);
      steps = std::max(steps, framed.back().targets.size());
    }
    const EncodedFeatures<T> enc = encode(tape, records);
    DecoderState<T> state = init_state(tape, enc);

    std::size_t count = 0;
    Tensor<T> total;
    std::vector<TokenId> inputs(batch.size()), targets(batch.size());
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const bool live = t < framed[b].targets.size();
        inputs[b] = live ? framed[b].inputs[t] : Vocabulary::kPad;
        targets[b] = live ? framed[b].targets[t] : -1;
        count += live;
      }
      StepOutput<T> out = step(tape, inputs, state, enc);
      Tensor<T> nll = nll_sum(tape, out.logprobs, targets);
      total = total.defined() ? add(tape, total, nll) : nll;
      state = std::move(out.state);
    }
    return affine(tape, total, T(1) / static_cast<T>(count));
  }

 private:
  void bind() {
    embed_ = EmbeddingTable<T>::bind(params_, "embed");
    classifier_ = Linear<T>::bind(params_, "classifier");
    if (embed_->vocab_size() != config_.vocab_size || embed_->embed_size() != config_.embed_size ||
        classifier_->out() != config_.vocab_size) {
      throw ConfigError("parameters do not match model config");
    }
    if (config_.arch == Arch::kSpecimen) {
      image_fc_ = Linear<T>::bind(params_, "image_fc");
      if (image_fc_->in() != config_.feature_dim || image_fc_->out() != config_.hidden_size) {
        throw ConfigError("image_fc does not match model config");
      }
      lstm_.push_back(LstmParams<T>::bind(params_, "lstm1"));
      if (config_.lstm_layers == 2) lstm_.push_back(LstmParams<T>::bind(params_, "lstm2"));
    } else {
      lstm_ = {LstmParams<T>::bind(params_, "att_lstm"), LstmParams<T>::bind(params_, "lang_lstm")};
      gru_ = {GruParams<T>::bind(params_, "att_gru"), GruParams<T>::bind(params_, "lang_gru")};
      attention_ = AttentionParams<T>::bind(params_, "attention");
      if (attention_->region_proj.shape() != Shape{config_.region_dim, config_.attention_size}) {
        throw ConfigError("attention parameters do not match model config");
      }
    }
    for (const auto& l : lstm_) {
      if (l.hidden() != config_.hidden_size) throw ConfigError("LSTM size does not match model config");
    }
  }

  ModelConfig config_;
  ParamSet<T> params_;
  std::optional<EmbeddingTable<T>> embed_;
  std::optional<Linear<T>> classifier_;
  std::optional<Linear<T>> image_fc_;
  std::optional<AttentionParams<T>> attention_;
  std::vector<LstmParams<T>> lstm_;
  std::vector<GruParams<T>> gru_;
};

}  // namespace nic
