// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nic/checkpoint.hpp"
#include "nic/data.hpp"
#include "nic/decode.hpp"
#include "nic/error.hpp"

namespace nic {

inline constexpr std::size_t kMaxNgram = 4;

using NGram = std::vector<TokenId>;
using NGramCounts = std::map<NGram, std::size_t>;

inline NGramCounts ngram_counts(std::span<const TokenId> seq, std::size_t n) {
  NGramCounts counts;
  if (n == 0 || seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[NGram(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

/// Per-n-gram maximum count over a reference set (the clipping ceiling).
inline NGramCounts max_ref_counts(std::span<const TokenSeq> refs, std::size_t n) {
  NGramCounts out;
  for (const auto& r : refs) {
    for (const auto& [g, c] : ngram_counts(r, n)) out[g] = std::max(out[g], c);
  }
  return out;
}

struct BleuScores {
  std::array<double, kMaxNgram> bleu{};       // BLEU-1..4
  std::array<double, kMaxNgram> precision{};  // modified precisions p_1..p_4
  double brevity_penalty = 0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

/// Corpus BLEU with clipped n-gram precision and a brevity penalty over
/// aggregated lengths (closest reference per candidate, ties to the shorter).
/// No smoothing: a zero precision at any order <= k makes BLEU-k zero.
inline BleuScores bleu(std::span<const TokenSeq> candidates, std::span<const std::vector<TokenSeq>> references) {
  if (candidates.empty()) throw UsageError("bleu: empty candidate set");
  if (candidates.size() != references.size()) {
    throw UsageError("bleu: " + std::to_string(candidates.size()) + " candidates vs " +
                     std::to_string(references.size()) + " reference sets");
  }
  std::array<std::size_t, kMaxNgram> matched{}, total{};
  BleuScores s;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    const auto& refs = references[i];
    if (refs.empty()) throw UsageError("bleu: candidate " + std::to_string(i) + " has no references");
    s.candidate_length += cand.size();
    std::size_t best = refs[0].size();
    for (const auto& r : refs) {
      const auto d = [&](std::size_t len) { return len > cand.size() ? len - cand.size() : cand.size() - len; };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    s.reference_length += best;
    for (std::size_t n = 1; n <= kMaxNgram; ++n) {
      const auto ceiling = max_ref_counts(refs, n);
      for (const auto& [g, c] : ngram_counts(cand, n)) {
        auto it = ceiling.find(g);
        matched[n - 1] += std::min(c, it == ceiling.end() ? std::size_t{0} : it->second);
        total[n - 1] += c;
      }
    }
  }
  for (std::size_t n = 0; n < kMaxNgram; ++n) {
    s.precision[n] = total[n] == 0 ? 0.0 : static_cast<double>(matched[n]) / static_cast<double>(total[n]);
  }
  if (s.candidate_length == 0) {
    s.brevity_penalty = 0;
  } else if (s.candidate_length > s.reference_length) {
    s.brevity_penalty = 1;
  } else {
    s.brevity_penalty =
        std::exp(1.0 - static_cast<double>(s.reference_length) / static_cast<double>(s.candidate_length));
  }
  for (std::size_t k = 1; k <= kMaxNgram; ++k) {
    double log_sum = 0;
    bool zero = s.brevity_penalty == 0;
    for (std::size_t n = 0; n < k && !zero; ++n) {
      if (s.precision[n] == 0) zero = true;
      else log_sum += std::log(s.precision[n]) / static_cast<double>(k);
    }
    s.bleu[k - 1] = zero ? 0.0 : s.brevity_penalty * std::exp(log_sum);
  }
  return s;
}

/// Document frequencies of n-grams over per-image reference sets.
struct CorpusDF {
  std::array<std::map<NGram, std::size_t>, kMaxNgram> df;
  std::size_t documents = 0;

  static CorpusDF build(std::span<const std::vector<TokenSeq>> references) {
    CorpusDF c;
    c.documents = references.size();
    for (const auto& refs : references) {
      for (std::size_t n = 1; n <= kMaxNgram; ++n) {
        NGramCounts seen;
        for (const auto& r : refs) {
          for (const auto& [g, _] : ngram_counts(r, n)) seen[g] = 1;
        }
        for (const auto& [g, _] : seen) ++c.df[n - 1][g];
      }
    }
    return c;
  }

  /// ln(M / df); n-grams absent from every reference count as df = 1.
  double idf(const NGram& g) const {
    const auto& m = df[g.size() - 1];
    auto it = m.find(g);
    const double d = it == m.end() ? 1.0 : static_cast<double>(it->second);
    return std::log(static_cast<double>(documents) / d);
  }
};

namespace detail {

using TfIdf = std::map<NGram, double>;

inline TfIdf tfidf(std::span<const TokenId> seq, std::size_t n, const CorpusDF& df) {
  TfIdf v;
  const auto counts = ngram_counts(seq, n);
  std::size_t total = 0;
  for (const auto& [_, c] : counts) total += c;
  for (const auto& [g, c] : counts) v[g] = static_cast<double>(c) / static_cast<double>(total) * df.idf(g);
  return v;
}

inline double cosine(const TfIdf& a, const TfIdf& b) {
  double dot = 0, na = 0, nb = 0;
  for (const auto& [g, x] : a) {
    na += x * x;
    auto it = b.find(g);
    if (it != b.end()) dot += x * it->second;
  }
  for (const auto& [_, y] : b) nb += y * y;
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

/// Plain CIDEr: TF-IDF n-gram cosine (n = 1..4, uniform weights), averaged
/// over references and images, scaled by 10. A zero vector scores 0.
inline double cider(std::span<const TokenSeq> candidates, std::span<const std::vector<TokenSeq>> references) {
  if (candidates.empty()) throw UsageError("cider: empty candidate set");
  if (candidates.size() != references.size()) {
    throw UsageError("cider: " + std::to_string(candidates.size()) + " candidates vs " +
                     std::to_string(references.size()) + " reference sets");
  }
  const CorpusDF df = CorpusDF::build(references);
  double total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& refs = references[i];
    if (refs.empty()) throw UsageError("cider: candidate " + std::to_string(i) + " has no references");
    double image = 0;
    for (std::size_t n = 1; n <= kMaxNgram; ++n) {
      const auto cv = detail::tfidf(candidates[i], n, df);
      double sum = 0;
      for (const auto& r : refs) sum += detail::cosine(cv, detail::tfidf(r, n, df));
      image += sum / static_cast<double>(refs.size());
    }
    total += 10.0 * image / static_cast<double>(kMaxNgram);
  }
  return total / static_cast<double>(candidates.size());
}

struct EvalReport {
  std::string arch;
  std::string feature_file;
  std::size_t beam_size = 0;
  std::size_t lstm_layers = 0;
  std::array<double, kMaxNgram> bleu{};
  double cider = 0;
  std::size_t n_images = 0;

  nlohmann::json to_json() const {
    return {{"arch", arch},   {"feature_file", feature_file}, {"beam_size", beam_size}, {"lstm_layers", lstm_layers},
            {"bleu", bleu},   {"cider", cider},               {"n_images", n_images}};
  }
};

/// Beam-decodes every image of `features` and scores the top caption against
/// the references in `captions` (tokenized with the checkpoint vocabulary).
inline EvalReport evaluate_run(const ModelCheckpoint& ck, const FeatureSet& features,
                               std::span<const CaptionRecord> captions, std::size_t beam_size,
                               const std::string& feature_file_name) {
  if (beam_size == 0) throw UsageError("beam size must be at least 1");
  if (features.records.empty()) throw UsageError("evaluate_run: no images in feature file");
  std::map<std::uint64_t, const CaptionRecord*> by_id;
  for (const auto& c : captions) by_id[c.image_id] = &c;
  if (by_id.size() != features.records.size()) {
    throw ConfigError("feature file has " + std::to_string(features.records.size()) + " images but caption file has " +
                      std::to_string(by_id.size()));
  }
  const CaptionModel<float> model = model_from_checkpoint(ck);
  std::vector<TokenSeq> cands;
  std::vector<std::vector<TokenSeq>> refs;
  for (const auto& rec : features.records) {
    auto it = by_id.find(rec.image_id);
    if (it == by_id.end()) throw ConfigError("image " + std::to_string(rec.image_id) + " has no captions");
    if (it->second->captions.empty()) throw UsageError("image " + std::to_string(rec.image_id) + " has no captions");
    std::vector<TokenSeq> r;
    for (const auto& text : it->second->captions) r.push_back(ck.vocab.encode(text));
    refs.push_back(std::move(r));
    const auto beams = beam_decode(model, rec, beam_size);
    cands.push_back(strip_end(beams.front().tokens));
  }
  EvalReport rep;
  rep.arch = arch_name(ck.config.arch);
  rep.feature_file = feature_file_name;
  rep.beam_size = beam_size;
  rep.lstm_layers = ck.config.lstm_layers;
  rep.bleu = bleu(cands, refs).bleu;
  rep.cider = cider(cands, refs);
  rep.n_images = features.records.size();
  return rep;
}

}  // namespace nic
