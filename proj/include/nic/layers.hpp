// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nic/error.hpp"
#include "nic/ops.hpp"
#include "nic/random.hpp"
#include "nic/tensor.hpp"

namespace nic {

/// Named trainable tensors, ordered by name so iteration (and serialization)
/// is deterministic.
template <class T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Shape shape) {
    auto [it, inserted] = params_.emplace(name, Tensor<T>(std::move(shape), T(0), true));
    if (!inserted) throw Error("duplicate parameter '" + name + "'");
    return it->second;
  }

  void set(const std::string& name, Tensor<T> t) { params_[name] = std::move(t); }

  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& [_, t] : params_) t.set_requires_grad(on);
  }

  /// Fill every parameter with zero (used by the uniform-output property).
  void fill_zero() {
    for (auto& [_, t] : params_) std::fill(t.data().begin(), t.data().end(), T(0));
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, t] : params_) out.set(name, t.template cast<U>());
    return out;
  }

  ParamSet clone() const {
    ParamSet out;
    for (const auto& [name, t] : params_) out.set(name, t.clone());
    return out;
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

/// Uniform in +/- sqrt(6 / (fan_in + fan_out)).
template <class T>
void init_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

/// x * W + b with W: in x out, b: 1 x out.
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  static Linear create(ParamSet<T>& ps, const std::string& prefix, std::size_t in, std::size_t out,
                       Rng& rng) {
    Linear l{ps.add(prefix + ".W", {in, out}), ps.add(prefix + ".b", {1, out})};
    init_uniform(l.weight, in, out, rng);
    return l;
  }
  static Linear bind(const ParamSet<T>& ps, const std::string& prefix) {
    return {ps.at(prefix + ".W"), ps.at(prefix + ".b")};
  }

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return add(tape, matmul(tape, x, weight), repeat_rows(tape, bias, x.dim(0)));
  }
};

/// V x E lookup table.
template <class T>
struct EmbeddingTable {
  Tensor<T> table;

  static EmbeddingTable create(ParamSet<T>& ps, const std::string& name, std::size_t vocab,
                               std::size_t embed, Rng& rng) {
    EmbeddingTable e{ps.add(name, {vocab, embed})};
    init_uniform(e.table, vocab, embed, rng);
    return e;
  }
  static EmbeddingTable bind(const ParamSet<T>& ps, const std::string& name) { return {ps.at(name)}; }

  std::size_t vocab_size() const { return table.dim(0); }
  std::size_t embed_size() const { return table.dim(1); }

  Tensor<T> operator()(Tape<T>& tape, std::span<const std::int64_t> ids) const {
    return gather_rows(tape, table, ids);
  }
};

template <class T>
struct LstmState {
  Tensor<T> h;
  Tensor<T> c;

  static LstmState zeros(std::size_t batch, std::size_t hidden) {
    return {Tensor<T>({batch, hidden}), Tensor<T>({batch, hidden})};
  }
};

/// Gate weights over [x; h], column blocks ordered input, forget, output, candidate.
template <class T>
struct LstmParams {
  Tensor<T> weight;  // (I + H) x 4H
  Tensor<T> bias;    // 1 x 4H

  static LstmParams create(ParamSet<T>& ps, const std::string& prefix, std::size_t in,
                           std::size_t hidden, Rng& rng) {
    LstmParams p{ps.add(prefix + ".W", {in + hidden, 4 * hidden}), ps.add(prefix + ".b", {1, 4 * hidden})};
    init_uniform(p.weight, in + hidden, 4 * hidden, rng);
    return p;
  }
  static LstmParams bind(const ParamSet<T>& ps, const std::string& prefix) {
    return {ps.at(prefix + ".W"), ps.at(prefix + ".b")};
  }

  std::size_t hidden() const { return bias.dim(1) / 4; }
  std::size_t in() const { return weight.dim(0) - hidden(); }
};

template <class T>
LstmState<T> lstm_cell(Tape<T>& tape, const Tensor<T>& x, const LstmState<T>& state,
                       const LstmParams<T>& p) {
  const std::size_t hs = p.hidden();
  if (x.rank() != 2 || x.dim(1) != p.in() || state.h.shape() != Shape{x.dim(0), hs} ||
      state.c.shape() != state.h.shape()) {
    throw DimensionError("lstm_cell: input " + shape_str(x.shape()) + ", h " + shape_str(state.h.shape()) +
                         ", c " + shape_str(state.c.shape()) + " vs cell " + std::to_string(p.in()) +
                         " -> " + std::to_string(hs));
  }
  const Tensor<T> pre = add(tape, matmul(tape, concat(tape, {x, state.h}), p.weight),
                            repeat_rows(tape, p.bias, x.dim(0)));
  const Tensor<T> i = sigmoid(tape, slice(tape, pre, 1, 0, hs));
  const Tensor<T> f = sigmoid(tape, slice(tape, pre, 1, hs, 2 * hs));
  const Tensor<T> o = sigmoid(tape, slice(tape, pre, 1, 2 * hs, 3 * hs));
  const Tensor<T> g = tanh(tape, slice(tape, pre, 1, 3 * hs, 4 * hs));
  Tensor<T> c = add(tape, mul(tape, f, state.c), mul(tape, i, g));
  Tensor<T> h = mul(tape, o, tanh(tape, c));
  return {std::move(h), std::move(c)};
}

/// Update/reset gates over [x; h]; candidate over [x; r * h].
template <class T>
struct GruParams {
  Tensor<T> gate_weight;       // (I + H) x 2H, blocks update, reset
  Tensor<T> gate_bias;         // 1 x 2H
  Tensor<T> candidate_weight;  // (I + H) x H
  Tensor<T> candidate_bias;    // 1 x H

  static GruParams create(ParamSet<T>& ps, const std::string& prefix, std::size_t in,
                          std::size_t hidden, Rng& rng) {
    GruParams p{ps.add(prefix + ".Wzr", {in + hidden, 2 * hidden}), ps.add(prefix + ".bzr", {1, 2 * hidden}),
                ps.add(prefix + ".Wn", {in + hidden, hidden}), ps.add(prefix + ".bn", {1, hidden})};
    init_uniform(p.gate_weight, in + hidden, 2 * hidden, rng);
    init_uniform(p.candidate_weight, in + hidden, hidden, rng);
    return p;
  }
  static GruParams bind(const ParamSet<T>& ps, const std::string& prefix) {
    return {ps.at(prefix + ".Wzr"), ps.at(prefix + ".bzr"), ps.at(prefix + ".Wn"), ps.at(prefix + ".bn")};
  }

  std::size_t hidden() const { return candidate_bias.dim(1); }
  std::size_t in() const { return candidate_weight.dim(0) - hidden(); }
};

template <class T>
Tensor<T> gru_cell(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& h, const GruParams<T>& p) {
  const std::size_t hs = p.hidden();
  if (x.rank() != 2 || x.dim(1) != p.in() || h.shape() != Shape{x.dim(0), hs}) {
    throw DimensionError("gru_cell: input " + shape_str(x.shape()) + ", h " + shape_str(h.shape()) +
                         " vs cell " + std::to_string(p.in()) + " -> " + std::to_string(hs));
  }
  const std::size_t batch = x.dim(0);
  const Tensor<T> zr = sigmoid(tape, add(tape, matmul(tape, concat(tape, {x, h}), p.gate_weight),
                                         repeat_rows(tape, p.gate_bias, batch)));
  const Tensor<T> z = slice(tape, zr, 1, 0, hs);
  const Tensor<T> r = slice(tape, zr, 1, hs, 2 * hs);
  const Tensor<T> n =
      tanh(tape, add(tape, matmul(tape, concat(tape, {x, mul(tape, r, h)}), p.candidate_weight),
                     repeat_rows(tape, p.candidate_bias, batch)));
  // (1 - z) * n + z * h  ==  n + z * (h - n)
  return add(tape, n, mul(tape, z, add(tape, h, affine(tape, n, T(-1)))));
}

template <class T>
struct AttentionParams {
  Tensor<T> region_proj;  // D_a x A
  Tensor<T> hidden_proj;  // H x A
  Tensor<T> score;        // A x 1

  static AttentionParams create(ParamSet<T>& ps, const std::string& prefix, std::size_t region_dim,
                                std::size_t hidden, std::size_t attn, Rng& rng) {
    AttentionParams p{ps.add(prefix + ".Wv", {region_dim, attn}), ps.add(prefix + ".Wh", {hidden, attn}),
                      ps.add(prefix + ".w", {attn, 1})};
    init_uniform(p.region_proj, region_dim, attn, rng);
    init_uniform(p.hidden_proj, hidden, attn, rng);
    init_uniform(p.score, attn, 1, rng);
    return p;
  }
  static AttentionParams bind(const ParamSet<T>& ps, const std::string& prefix) {
    return {ps.at(prefix + ".Wv"), ps.at(prefix + ".Wh"), ps.at(prefix + ".w")};
  }
};

/// Regions are stored flattened as (B * R) x D_a; the projection is computed
/// once per image and reused at every step.
template <class T>
Tensor<T> project_regions(Tape<T>& tape, const Tensor<T>& regions, const AttentionParams<T>& p) {
  return matmul(tape, regions, p.region_proj);
}

template <class T>
struct Attended {
  Tensor<T> weights;  // B x R
  Tensor<T> context;  // B x D_a
};

template <class T>
Attended<T> attend(Tape<T>& tape, const Tensor<T>& regions, const Tensor<T>& projected,
                   const Tensor<T>& h, const AttentionParams<T>& p, std::size_t region_count) {
  if (region_count == 0) throw DimensionError("attend: zero regions");
  const Tensor<T> query = matmul(tape, h, p.hidden_proj);
  Tensor<T> weights = softmax_row(tape, additive_scores(tape, projected, query, p.score, region_count));
  Tensor<T> context = weighted_sum(tape, weights, regions);
  return {std::move(weights), std::move(context)};
}

/// Log-probabilities over the vocabulary.
template <class T>
Tensor<T> classify(Tape<T>& tape, const Tensor<T>& features, const Linear<T>& head) {
  if (head.out() < 2) throw DimensionError("classify: vocabulary must have at least 2 entries");
  return log_softmax_row(tape, head(tape, features));
}

}  // namespace nic
