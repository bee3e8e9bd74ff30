// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "nic/data.hpp"
#include "nic/error.hpp"
#include "nic/models.hpp"

namespace nic {

/// Anything that can be decoded: encode a single image, seed a state, step.
template <class M>
concept StepModel = requires(const M& m, Tape<typename M::value_type>& tape, const FeatureRecord& rec,
                             std::span<const TokenId> tokens) {
  { m.config().max_caption_len } -> std::convertible_to<std::size_t>;
  { m.config().vocab_size } -> std::convertible_to<std::size_t>;
  m.encode(tape, rec);
  m.init_state(tape, m.encode(tape, rec));
  m.step(tape, tokens, m.init_state(tape, m.encode(tape, rec)), m.encode(tape, rec)).logprobs;
};

/// Tokens a decoder may emit: <end> and every ordinary word. <pad>, <start>
/// and <unk> are never produced.
inline bool emittable(TokenId id) { return id == Vocabulary::kEnd || !Vocabulary::is_special(id); }

/// Ordering key for equal scores: words by ascending id, then <end>.
inline TokenId tie_key(TokenId id, std::size_t vocab_size) {
  return id == Vocabulary::kEnd ? static_cast<TokenId>(vocab_size) : id;
}

inline bool tie_less(std::span<const TokenId> a, std::span<const TokenId> b, std::size_t vocab_size) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(), [vocab_size](TokenId x, TokenId y) {
    return tie_key(x, vocab_size) < tie_key(y, vocab_size);
  });
}

/// Argmax decoding from <start> until <end> or max_len tokens.
template <StepModel M>
TokenSeq greedy_decode(const M& model, const FeatureRecord& features, std::size_t max_len = 0) {
  using T = typename M::value_type;
  if (max_len == 0) max_len = model.config().max_caption_len;
  const std::size_t vocab = model.config().vocab_size;
  Tape<T> tape(false);
  const auto enc = model.encode(tape, features);
  auto state = model.init_state(tape, enc);
  TokenSeq out;
  TokenId prev = Vocabulary::kStart;
  while (out.size() < max_len) {
    const TokenId in[] = {prev};
    auto step = model.step(tape, in, state, enc);
    TokenId best = -1;
    T best_lp = T(0);
    for (std::size_t v = 0; v < vocab; ++v) {
      const auto id = static_cast<TokenId>(v);
      if (!emittable(id)) continue;
      const T lp = step.logprobs[v];
      if (best < 0 || lp > best_lp || (lp == best_lp && tie_key(id, vocab) < tie_key(best, vocab))) {
        best = id;
        best_lp = lp;
      }
    }
    out.push_back(best);
    if (best == Vocabulary::kEnd) break;
    state = std::move(step.state);
    prev = best;
  }
  return out;
}

struct ScoredCaption {
  TokenSeq tokens;         // after <start>; includes <end> when emitted
  double logprob_sum = 0;  // exact sum of the chosen per-step log-probabilities

  friend bool operator==(const ScoredCaption&, const ScoredCaption&) = default;
};

template <class T>
struct Hypothesis {
  TokenSeq tokens;
  double logprob_sum = 0;
  DecoderState<T> state;
  bool finished = false;
};

/// Standard beam search without length normalization.
///
/// Each round expands every live hypothesis over all emittable tokens and
/// keeps the best `beam_size` candidates; those ending in <end> or reaching
/// max_len move to the completed pool. Returns the pool sorted by score,
/// ties broken lexicographically (words by id, <end> last).
template <StepModel M>
std::vector<ScoredCaption> beam_decode(const M& model, const FeatureRecord& features, std::size_t beam_size,
                                       std::size_t max_len = 0) {
  using T = typename M::value_type;
  if (beam_size == 0) throw UsageError("beam size must be at least 1");
  if (max_len == 0) max_len = model.config().max_caption_len;
  const std::size_t vocab = model.config().vocab_size;

  Tape<T> tape(false);
  const auto enc = model.encode(tape, features);
  std::vector<Hypothesis<T>> live;
  live.push_back({{}, 0.0, model.init_state(tape, enc), false});
  std::vector<ScoredCaption> pool;

  struct Candidate {
    std::size_t parent;
    TokenId token;
    double score;
    TokenSeq tokens;
  };
  std::vector<DecoderState<T>> next_states;
  while (!live.empty()) {
    std::vector<Candidate> cands;
    next_states.clear();
    for (std::size_t p = 0; p < live.size(); ++p) {
      const auto& hyp = live[p];
      const TokenId in[] = {hyp.tokens.empty() ? Vocabulary::kStart : hyp.tokens.back()};
      auto step = model.step(tape, in, hyp.state, enc);
      for (std::size_t v = 0; v < vocab; ++v) {
        const auto id = static_cast<TokenId>(v);
        if (!emittable(id)) continue;
        TokenSeq seq = hyp.tokens;
        seq.push_back(id);
        cands.push_back({p, id, hyp.logprob_sum + static_cast<double>(step.logprobs[v]), std::move(seq)});
      }
      next_states.push_back(std::move(step.state));
    }
    const std::size_t keep = std::min(beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [vocab](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        return tie_less(a.tokens, b.tokens, vocab);
                      });
    std::vector<Hypothesis<T>> next;
    for (std::size_t i = 0; i < keep; ++i) {
      auto& c = cands[i];
      if (c.token == Vocabulary::kEnd || c.tokens.size() >= max_len) {
        pool.push_back({std::move(c.tokens), c.score});
      } else {
        next.push_back({std::move(c.tokens), c.score, next_states[c.parent], false});
      }
    }
    live = std::move(next);
  }
  std::sort(pool.begin(), pool.end(), [vocab](const ScoredCaption& a, const ScoredCaption& b) {
    if (a.logprob_sum != b.logprob_sum) return a.logprob_sum > b.logprob_sum;
    return tie_less(a.tokens, b.tokens, vocab);
  });
  return pool;
}

/// Drops a trailing <end> (words only).
inline TokenSeq strip_end(TokenSeq seq) {
  if (!seq.empty() && seq.back() == Vocabulary::kEnd) seq.pop_back();
  return seq;
}

/// Re-runs the model along `tokens` and sums the per-step log-probabilities.
template <StepModel M>
double sequence_logprob(const M& model, const FeatureRecord& features, std::span<const TokenId> tokens) {
  using T = typename M::value_type;
  Tape<T> tape(false);
  const auto enc = model.encode(tape, features);
  auto state = model.init_state(tape, enc);
  double total = 0;
  TokenId prev = Vocabulary::kStart;
  for (TokenId tok : tokens) {
    const TokenId in[] = {prev};
    auto step = model.step(tape, in, state, enc);
    total += static_cast<double>(step.logprobs[static_cast<std::size_t>(tok)]);
    state = std::move(step.state);
    prev = tok;
  }
  return total;
}

}  // namespace nic
