// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "nic/data.hpp"
#include "nic/error.hpp"
#include "nic/io.hpp"
#include "nic/layers.hpp"
#include "nic/models.hpp"

namespace nic {

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0)) throw UsageError("learning rate must be nonnegative");
    if (!(momentum >= 0 && momentum < 1)) throw UsageError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw UsageError("weight decay must be nonnegative");
    if (batch_size == 0) throw UsageError("batch size must be at least 1");
  }

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

inline nlohmann::json to_json(const OptimizerConfig& o) {
  return {{"lr", o.lr},
          {"momentum", o.momentum},
          {"weight_decay", o.weight_decay},
          {"batch_size", o.batch_size},
          {"epochs", o.epochs},
          {"seed", o.seed}};
}

inline OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  OptimizerConfig o;
  o.lr = j.at("lr").get<double>();
  o.momentum = j.at("momentum").get<double>();
  o.weight_decay = j.at("weight_decay").get<double>();
  o.batch_size = j.at("batch_size").get<std::size_t>();
  o.epochs = j.at("epochs").get<std::size_t>();
  o.seed = j.at("seed").get<std::uint64_t>();
  return o;
}

/// Everything needed to decode with a model or resume training it.
struct ModelCheckpoint {
  ModelConfig config;
  OptimizerConfig optimizer;
  ParamSet<float> params;
  ParamSet<float> velocity;
  Vocabulary vocab;
  std::uint64_t epoch = 0;
  std::string rng_state;
};

inline constexpr char kCheckpointMagic[8] = {'N', 'I', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic, u32 version, u32 tensor count, tensors (u16 name length,
// name, u8 rank, u64 dims, f32 data), JSON trailer, u64 trailer length.
// Parameter tensors are named "param/<name>", velocities "velocity/<name>".

inline std::vector<char> encode_checkpoint(const ModelCheckpoint& ck) {
  io::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.params.size() + ck.velocity.size()));
  auto put = [&](const std::string& name, const Tensor<float>& t) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (float v : t.data()) w.f32(v);
  };
  for (const auto& [name, t] : ck.params) put("param/" + name, t);
  for (const auto& [name, t] : ck.velocity) put("velocity/" + name, t);
  nlohmann::json trailer{{"config", to_json(ck.config)},
                         {"optimizer", to_json(ck.optimizer)},
                         {"epoch", ck.epoch},
                         {"seed", ck.optimizer.seed},
                         {"rng_state", ck.rng_state},
                         {"vocab", vocab_to_json(ck.vocab)}};
  const std::string text = trailer.dump();
  w.raw(text);
  w.u64(text.size());
  return w.bytes();
}

inline ModelCheckpoint decode_checkpoint(std::span<const char> bytes, const std::string& what = "checkpoint") {
  using K = FormatError::Kind;
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(K::kBadMagic, what + ": not a checkpoint (bad magic)");
  }
  if (bytes.size() < 16 + 8) throw FormatError(K::kTruncated, what + ": truncated header");

  io::ByteReader tail(bytes.subspan(bytes.size() - 8), what);
  const std::uint64_t trailer_len = tail.u64();
  if (trailer_len > bytes.size() - 16 - 8) throw FormatError(K::kTruncated, what + ": trailer length exceeds file");
  const std::size_t tensors_end = bytes.size() - 8 - static_cast<std::size_t>(trailer_len);

  io::ByteReader rd(bytes.first(tensors_end), what);
  rd.raw(8);
  const std::uint32_t version = rd.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(K::kBadVersion, what + ": unsupported version " + std::to_string(version));
  }
  ModelCheckpoint ck;
  const std::uint32_t count = rd.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = rd.raw(rd.u16());
    Shape shape(rd.u8());
    for (auto& d : shape) d = rd.u64();
    if (shape.empty() || shape_size(shape) == 0) {
      throw FormatError(K::kDimMismatch, what + ": tensor '" + name + "' has an empty shape");
    }
    rd.need(shape_size(shape) * 4);
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = rd.f32();
    Tensor<float> t(std::move(shape), std::move(data));
    if (name.rfind("param/", 0) == 0) {
      t.set_requires_grad(true);
      ck.params.set(name.substr(6), std::move(t));
    } else if (name.rfind("velocity/", 0) == 0) {
      ck.velocity.set(name.substr(9), std::move(t));
    } else {
      throw FormatError(K::kSyntax, what + ": unexpected tensor '" + name + "'");
    }
  }
  if (rd.remaining() != 0) throw FormatError(K::kDimMismatch, what + ": bytes between tensors and trailer");

  try {
    const auto j = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(tensors_end),
                                         bytes.end() - 8);
    ck.config = model_config_from_json(j.at("config"));
    ck.optimizer = optimizer_config_from_json(j.at("optimizer"));
    ck.epoch = j.at("epoch").get<std::uint64_t>();
    ck.rng_state = j.at("rng_state").get<std::string>();
    ck.vocab = vocab_from_json(j.at("vocab"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::kSyntax, what + ": bad trailer: " + e.what());
  }
  if (ck.vocab.size() != ck.config.vocab_size) {
    throw ConfigError(what + ": vocabulary of " + std::to_string(ck.vocab.size()) + " tokens vs config vocab_size " +
                      std::to_string(ck.config.vocab_size));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ck) {
  io::write_file(path, encode_checkpoint(ck));
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

/// Model view over a checkpoint's parameters (shares storage).
inline CaptionModel<float> model_from_checkpoint(const ModelCheckpoint& ck) {
  return CaptionModel<float>(ck.config, ck.params);
}

}  // namespace nic
