// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "nic/data.hpp"
#include "nic/models.hpp"
#include "nic/random.hpp"

namespace nic::testing {

inline ModelConfig tiny_config(Arch arch, std::size_t vocab, std::size_t layers = 1) {
  ModelConfig c;
  c.arch = arch;
  c.vocab_size = vocab;
  c.embed_size = 3;
  c.hidden_size = 4;
  c.lstm_layers = layers;
  c.attention_size = 3;
  c.feature_dim = 5;
  c.region_dim = 2;
  c.region_count = 3;
  c.max_caption_len = 4;
  return c;
}

inline FeatureRecord random_record(const ModelConfig& c, std::uint64_t id, Rng& rng) {
  FeatureRecord r;
  r.image_id = id;
  for (std::size_t i = 0; i < c.feature_dim; ++i) r.global.push_back(static_cast<float>(rng.uniform(-1, 1)));
  for (std::size_t i = 0; i < c.region_count * c.region_dim; ++i) {
    r.regions.push_back(static_cast<float>(rng.uniform(-1, 1)));
  }
  return r;
}

/// Scales every parameter so tiny random models have peaked, non-uniform
/// output distributions.
template <class T>
void scale_params(CaptionModel<T>& m, T factor) {
  for (auto& [_, t] : m.params()) {
    for (auto& v : t.data()) v *= factor;
  }
}

}  // namespace nic::testing
