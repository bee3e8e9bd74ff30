// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nic/checkpoint.hpp"
#include "nic/data.hpp"
#include "nic/error.hpp"
#include "nic/layers.hpp"
#include "nic/models.hpp"
#include "nic/random.hpp"

namespace nic {

/// SGD with momentum and L2 weight decay, applied to every parameter:
///   g' = g + wd * w;  v = momentum * v + g';  w = w - lr * v
template <class T>
void sgd_step(ParamSet<T>& params, ParamSet<T>& velocity, const OptimizerConfig& opt) {
  const T lr = static_cast<T>(opt.lr), mu = static_cast<T>(opt.momentum), wd = static_cast<T>(opt.weight_decay);
  for (auto& [name, w] : params) {
    if (!w.has_grad()) throw Error("sgd_step: parameter '" + name + "' has no gradient");
    if (!velocity.contains(name)) velocity.set(name, Tensor<T>(w.shape()));
    Tensor<T>& v = velocity.at(name);
    if (v.shape() != w.shape()) throw DimensionError("sgd_step: velocity for '" + name + "' has the wrong shape");
    auto data = w.data();
    auto grad = w.grad();
    auto vel = v.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T g = grad[i] + wd * data[i];
      vel[i] = mu * vel[i] + g;
      data[i] -= lr * vel[i];
    }
  }
}

/// Images, their captions and the vocabulary the captions were encoded with.
struct Dataset {
  FeatureSet features;
  std::vector<CaptionSample> samples;
  Vocabulary vocab;
};

inline Dataset make_dataset(FeatureSet features, std::span<const CaptionRecord> captions, Vocabulary vocab) {
  Dataset d{std::move(features), encode_captions(captions, vocab), std::move(vocab)};
  for (const auto& s : d.samples) {
    if (!d.features.find(s.image_id)) {
      throw ConfigError("caption for image " + std::to_string(s.image_id) + " has no feature record");
    }
  }
  return d;
}

/// Model config sized for a dataset; embed/hidden/attention sizes from `base`.
inline ModelConfig config_for(const Dataset& d, ModelConfig base) {
  base.vocab_size = d.vocab.size();
  base.feature_dim = d.features.feature_dim;
  base.region_count = d.features.region_count;
  base.region_dim = d.features.region_dim;
  base.validate();
  return base;
}

struct TrainOptions {
  /// Overwritten with the latest state every `checkpoint_every` epochs and at the end.
  std::optional<std::filesystem::path> checkpoint_path;
  /// CSV with header `epoch,step,loss`, one row per optimizer step.
  std::optional<std::filesystem::path> loss_log;
  std::size_t checkpoint_every = 1;
  std::ostream* log = nullptr;
};

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch run
};

inline ModelCheckpoint initial_checkpoint(const Dataset& data, const ModelConfig& config, const OptimizerConfig& opt) {
  config.validate();
  opt.validate();
  if (config.vocab_size != data.vocab.size()) {
    throw ConfigError("model vocab_size " + std::to_string(config.vocab_size) + " but vocabulary has " +
                      std::to_string(data.vocab.size()) + " tokens");
  }
  if (config.feature_dim != data.features.feature_dim || config.region_count != data.features.region_count ||
      config.region_dim != data.features.region_dim) {
    throw ConfigError("model feature dims do not match the feature file");
  }
  ModelCheckpoint ck;
  ck.config = config;
  ck.optimizer = opt;
  ck.params = CaptionModel<float>::create(config, opt.seed).params();
  for (const auto& [name, t] : ck.params) ck.velocity.set(name, Tensor<float>(t.shape()));
  ck.vocab = data.vocab;
  ck.epoch = 0;
  // Shuffling draws from a stream separate from parameter initialization.
  ck.rng_state = Rng(opt.seed ^ 0x9e3779b97f4a7c15ULL).state();
  return ck;
}

/// Teacher-forced minibatch SGD from `start` until `opt.epochs` epochs are
/// complete. Shuffling is a seeded Fisher-Yates per epoch whose generator
/// state lives in the checkpoint, so a resumed run continues bit-exactly.
inline TrainResult train(const Dataset& data, ModelCheckpoint start, const TrainOptions& options = {}) {
  if (data.samples.empty()) throw UsageError("train: empty dataset");
  const OptimizerConfig& opt = start.optimizer;
  opt.validate();
  if (start.vocab != data.vocab) throw ConfigError("train: checkpoint vocabulary differs from the dataset's");

  std::vector<TrainingPair> pairs;
  for (const auto& s : data.samples) {
    const auto idx = data.features.find(s.image_id);
    if (!idx) throw ConfigError("train: no features for image " + std::to_string(s.image_id));
    for (const auto& ref : s.references) pairs.push_back({&data.features.records[*idx], &ref});
  }

  TrainResult result{std::move(start), {}};
  ModelCheckpoint& ck = result.checkpoint;
  CaptionModel<float> model(ck.config, ck.params);
  Rng rng;
  rng.set_state(ck.rng_state);

  std::ofstream loss_log;
  if (options.loss_log) {
    const bool fresh = ck.epoch == 0 || !std::filesystem::exists(*options.loss_log);
    loss_log.open(*options.loss_log, fresh ? std::ios::trunc : std::ios::app);
    if (!loss_log) throw Error("cannot open loss log '" + options.loss_log->string() + "'");
    if (fresh) loss_log << "epoch,step,loss\n";
    loss_log << std::setprecision(9);
  }

  std::vector<std::size_t> order(pairs.size());
  std::size_t step = ck.epoch * ((pairs.size() + opt.batch_size - 1) / opt.batch_size);
  bool warned = false;
  while (ck.epoch < opt.epochs) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double epoch_sum = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += opt.batch_size) {
      const std::size_t end = std::min(order.size(), begin + opt.batch_size);
      std::vector<TrainingPair> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(pairs[order[i]]);
      Tape<float> tape;
      ck.params.zero_grad();
      const Tensor<float> loss = model.teacher_forced_loss(tape, batch, warned ? nullptr : options.log);
      tape.backward(loss);
      sgd_step(ck.params, ck.velocity, opt);
      const double l = loss.item();
      if (!std::isfinite(l)) throw Error("train: loss diverged at epoch " + std::to_string(ck.epoch + 1));
      epoch_sum += l;
      ++batches;
      ++step;
      if (loss_log) loss_log << ck.epoch + 1 << ',' << step << ',' << l << '\n';
    }
    warned = true;
    ++ck.epoch;
    ck.rng_state = rng.state();
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(batches));
    if (options.log) {
      *options.log << "epoch " << ck.epoch << "/" << opt.epochs << " loss " << result.epoch_loss.back() << "\n";
    }
    if (options.checkpoint_path &&
        (ck.epoch % std::max<std::size_t>(1, options.checkpoint_every) == 0 || ck.epoch == opt.epochs)) {
      save_checkpoint(*options.checkpoint_path, ck);
    }
  }
  if (options.checkpoint_path && ck.epoch == opt.epochs && result.epoch_loss.empty()) {
    save_checkpoint(*options.checkpoint_path, ck);
  }
  return result;
}

inline TrainResult train(const Dataset& data, const ModelConfig& config, const OptimizerConfig& opt,
                         const TrainOptions& options = {}) {
  return train(data, initial_checkpoint(data, config, opt), options);
}

}  // namespace nic
