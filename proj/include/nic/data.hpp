// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nic/error.hpp"
#include "nic/random.hpp"

namespace nic {

using TokenId = std::int64_t;
using TokenSeq = std::vector<TokenId>;

/// Lowercase, split ASCII punctuation into standalone tokens, split on
/// whitespace. Non-ASCII bytes pass through untouched.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  flush();
  return out;
}

inline std::string join_tokens(std::span<const std::string> tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

/// Token <-> id map. Ids 0..3 are reserved for <pad>, <start>, <end>, <unk>.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kStart = 1;
  static constexpr TokenId kEnd = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary() : Vocabulary(std::vector<std::string>{"<pad>", "<start>", "<end>", "<unk>"}, 1) {}

  /// `tokens` is the full id-ordered list, specials included.
  Vocabulary(std::vector<std::string> tokens, int min_count) : tokens_(std::move(tokens)), min_count_(min_count) {
    static const char* kSpecials[] = {"<pad>", "<start>", "<end>", "<unk>"};
    if (tokens_.size() < kReserved) throw FormatError(FormatError::Kind::kSyntax, "vocabulary lacks reserved tokens");
    for (std::size_t i = 0; i < kReserved; ++i) {
      if (tokens_[i] != kSpecials[i]) {
        throw FormatError(FormatError::Kind::kSyntax,
                          "vocabulary id " + std::to_string(i) + " must be " + kSpecials[i]);
      }
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw FormatError(FormatError::Kind::kSyntax, "duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  int min_count() const noexcept { return min_count_; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool is_special(TokenId id) noexcept { return id >= 0 && id < static_cast<TokenId>(kReserved); }

  TokenSeq encode(std::string_view text) const {
    TokenSeq ids;
    for (const auto& t : tokenize(text)) ids.push_back(id(t));
    return ids;
  }

  /// Space-joined words; stops at <end>, skips <pad>/<start>.
  std::string decode(std::span<const TokenId> ids) const {
    std::string s;
    for (auto i : ids) {
      if (i == kEnd) break;
      if (i == kPad || i == kStart) continue;
      if (!s.empty()) s.push_back(' ');
      s += token(i);
    }
    return s;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.min_count_ == b.min_count_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  int min_count_ = 1;
};

/// Tokens with frequency >= min_count, ordered by descending frequency then
/// lexicographically.
inline Vocabulary build_vocab(std::span<const std::string> corpus, int min_count = 1) {
  if (corpus.empty()) throw UsageError("build_vocab: empty caption corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus) {
    for (auto& t : tokenize(text)) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (static_cast<long long>(n) >= std::max(1, min_count)) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{"<pad>", "<start>", "<end>", "<unk>"};
  for (auto& [tok, _] : kept) {
    // A literal special in the text is already covered by its reserved id.
    if (std::find(tokens.begin(), tokens.begin() + Vocabulary::kReserved, tok) ==
        tokens.begin() + Vocabulary::kReserved) {
      tokens.push_back(tok);
    }
  }
  return Vocabulary(std::move(tokens), min_count);
}

/// Raw captions for one image as stored in the caption file.
struct CaptionRecord {
  std::uint64_t image_id = 0;
  std::vector<std::string> captions;

  friend bool operator==(const CaptionRecord&, const CaptionRecord&) = default;
};

/// One image with its tokenized references (no framing tokens).
struct CaptionSample {
  std::uint64_t image_id = 0;
  std::vector<TokenSeq> references;
};

inline std::vector<CaptionSample> encode_captions(std::span<const CaptionRecord> records, const Vocabulary& vocab) {
  std::vector<CaptionSample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (r.captions.empty()) throw UsageError("image " + std::to_string(r.image_id) + " has no captions");
    CaptionSample s{r.image_id, {}};
    for (const auto& c : r.captions) s.references.push_back(vocab.encode(c));
    out.push_back(std::move(s));
  }
  return out;
}

/// Per-image global feature (D_f) and region grid (R x D_a, row-major).
struct FeatureRecord {
  std::uint64_t image_id = 0;
  std::vector<float> global;
  std::vector<float> regions;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct FeatureSet {
  std::uint32_t feature_dim = 0;
  std::uint32_t region_count = 0;
  std::uint32_t region_dim = 0;
  std::vector<FeatureRecord> records;

  /// Index of the record for `image_id`, if present.
  std::optional<std::size_t> find(std::uint64_t image_id) const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].image_id == image_id) return i;
    }
    return std::nullopt;
  }

  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;
};

/// Attribute lists of the synthetic micro-world.
struct SynthSpec {
  std::vector<std::string> objects{"dog", "cat", "horse", "bird"};
  std::vector<std::string> colors{"red", "blue", "green", "white"};
  std::vector<std::string> verbs{"running", "sitting", "jumping", "sleeping"};
  /// Number of distinct (object, color, verb) scenes; image i shows scene i mod scenes.
  std::size_t scenes = 8;
  double noise = 0.05;
};

struct SynthData {
  FeatureSet features;
  std::vector<CaptionRecord> captions;
  Vocabulary vocab;
};

/// Compositional stand-in for a captioning corpus.
///
/// The global feature is [onehot(object); onehot(color); onehot(verb)] plus
/// Gaussian noise. Regions 0..2 keep one attribute block each (the others
/// zeroed) and the last region is noise only. Scenes are drawn from a Latin
/// square over (object, color) when it is large enough, so two scenes share
/// at most one attribute.
inline SynthData synth_dataset(std::size_t n_images, const SynthSpec& spec, std::uint64_t seed) {
  if (n_images == 0) throw UsageError("synth: need at least one image");
  if (spec.objects.empty() || spec.colors.empty() || spec.verbs.empty()) {
    throw UsageError("synth: attribute lists must be nonempty");
  }
  if (spec.scenes == 0) throw UsageError("synth: need at least one scene");
  const std::size_t no = spec.objects.size(), nc = spec.colors.size(), nv = spec.verbs.size();

  struct Scene {
    std::size_t object, color, verb;
  };
  std::vector<Scene> pool;
  if (no <= nv && nc <= nv && spec.scenes <= no * nc) {
    for (std::size_t o = 0; o < no; ++o) {
      for (std::size_t c = 0; c < nc; ++c) pool.push_back({o, c, (o + c) % nv});
    }
  } else {
    for (std::size_t o = 0; o < no; ++o) {
      for (std::size_t c = 0; c < nc; ++c) {
        for (std::size_t v = 0; v < nv; ++v) pool.push_back({o, c, v});
      }
    }
  }
  Rng rng(seed);
  rng.shuffle(pool);
  pool.resize(std::min(pool.size(), spec.scenes));

  const std::size_t df = no + nc + nv;
  constexpr std::size_t kRegions = 4;
  SynthData out;
  out.features.feature_dim = static_cast<std::uint32_t>(df);
  out.features.region_count = kRegions;
  out.features.region_dim = static_cast<std::uint32_t>(df);

  const std::size_t block_begin[3] = {0, no, no + nc};
  const std::size_t block_end[3] = {no, no + nc, df};
  std::vector<std::string> corpus;
  for (std::size_t i = 0; i < n_images; ++i) {
    const Scene& s = pool[i % pool.size()];
    std::vector<float> clean(df, 0.0f);
    clean[s.object] = 1.0f;
    clean[no + s.color] = 1.0f;
    clean[no + nc + s.verb] = 1.0f;

    FeatureRecord rec;
    rec.image_id = i + 1;
    rec.global.resize(df);
    for (std::size_t j = 0; j < df; ++j) rec.global[j] = clean[j] + static_cast<float>(spec.noise * rng.normal());
    rec.regions.resize(kRegions * df);
    for (std::size_t r = 0; r < kRegions; ++r) {
      for (std::size_t j = 0; j < df; ++j) {
        const bool kept = r < 3 && j >= block_begin[r] && j < block_end[r];
        rec.regions[r * df + j] = (kept ? clean[j] : 0.0f) + static_cast<float>(spec.noise * rng.normal());
      }
    }
    out.features.records.push_back(std::move(rec));

    std::string caption = "a " + spec.colors[s.color] + " " + spec.objects[s.object] + " is " + spec.verbs[s.verb];
    corpus.push_back(caption);
    out.captions.push_back({i + 1, {std::move(caption)}});
  }
  out.vocab = build_vocab(corpus, 1);
  return out;
}

}  // namespace nic
