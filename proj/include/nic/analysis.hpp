// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nic/checkpoint.hpp"
#include "nic/data.hpp"
#include "nic/decode.hpp"
#include "nic/error.hpp"
#include "nic/random.hpp"

namespace nic {

/// u.v / (|u| |v|); 0 when either norm is 0.
inline double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine: dimension mismatch " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
  }
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0 || nv == 0) return 0.0;
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

struct EmbeddedCaption {
  std::uint64_t image_id = 0;
  TokenSeq tokens;
  std::vector<double> embedding;
  bool empty = false;  // no word tokens; embedding is the zero vector
};

/// Mean of the word embeddings of a caption, ignoring <pad>, <start>, <end>.
inline EmbeddedCaption embed_caption(std::uint64_t image_id, std::span<const TokenId> tokens,
                                     const Tensor<float>& table) {
  const std::size_t e = table.dim(1);
  EmbeddedCaption out{image_id, TokenSeq(tokens.begin(), tokens.end()), std::vector<double>(e, 0.0), false};
  std::size_t n = 0;
  for (TokenId t : tokens) {
    if (t == Vocabulary::kPad || t == Vocabulary::kStart || t == Vocabulary::kEnd) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= table.dim(0)) {
      throw DimensionError("embed_caption: token " + std::to_string(t) + " outside embedding table");
    }
    for (std::size_t j = 0; j < e; ++j) out.embedding[j] += table.at(static_cast<std::size_t>(t), j);
    ++n;
  }
  if (n == 0) {
    out.empty = true;
  } else {
    for (auto& v : out.embedding) v /= static_cast<double>(n);
  }
  return out;
}

/// k most cosine-similar rows to each row, excluding the row itself; ties go
/// to the lower id. Rows are normalized once, then each anchor is ranked.
inline std::vector<std::vector<std::size_t>> nearest_neighbors(std::span<const std::vector<double>> vectors,
                                                               std::span<const std::uint64_t> ids, std::size_t k) {
  const std::size_t n = vectors.size();
  if (ids.size() != n) throw DimensionError("nearest_neighbors: ids and vectors differ in length");
  if (k + 1 > n) throw UsageError("nearest_neighbors: need more than k = " + std::to_string(k) + " vectors");
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = std::sqrt(std::inner_product(vectors[i].begin(), vectors[i].end(), vectors[i].begin(), 0.0));
  }
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t a = 0; a < n; ++a) {
    scored.clear();
    for (std::size_t b = 0; b < n; ++b) {
      if (b == a) continue;
      if (vectors[b].size() != vectors[a].size()) throw DimensionError("nearest_neighbors: ragged vectors");
      double sim = 0;
      if (norms[a] != 0 && norms[b] != 0) {
        sim = std::inner_product(vectors[a].begin(), vectors[a].end(), vectors[b].begin(), 0.0) / (norms[a] * norms[b]);
      }
      scored.emplace_back(sim, b);
    }
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                      [&](const auto& x, const auto& y) {
                        if (x.first != y.first) return x.first > y.first;
                        return ids[x.second] < ids[y.second];
                      });
    for (std::size_t i = 0; i < k; ++i) out[a].push_back(scored[i].second);
  }
  return out;
}

struct NeighborReport {
  std::uint64_t anchor_id = 0;
  std::vector<std::uint64_t> image_neighbors;    // S_i, by feature similarity
  std::vector<std::uint64_t> caption_neighbors;  // S_c, by caption-embedding similarity
  std::size_t overlap = 0;
  std::string anchor_caption;
  std::vector<std::string> captions;  // captions of the S_c members, in order

  nlohmann::json to_json() const {
    return {{"anchor_id", anchor_id},         {"s_i", image_neighbors},
            {"s_c", caption_neighbors},       {"overlap", overlap},
            {"anchor_caption", anchor_caption}, {"captions", captions}};
  }
};

struct NeighborStudy {
  std::vector<NeighborReport> anchors;
  double mean_overlap = 0;            // mean |S_i & S_c| / k
  double distinct_caption_ratio = 0;  // mean distinct captions in S_c / k
  std::size_t sample_size = 0;
  std::size_t k = 0;
  std::size_t beam_size = 0;
  std::uint64_t seed = 0;

  nlohmann::json summary_json() const {
    return {{"mean_overlap", mean_overlap}, {"distinct_caption_ratio", distinct_caption_ratio},
            {"sample_size", sample_size},   {"k", k},
            {"beam_size", beam_size},       {"seed", seed}};
  }
};

struct NeighborStudyOptions {
  std::size_t sample_size = 1000;
  std::size_t k = 3;
  std::uint64_t seed = 0;
  std::size_t beam_size = 3;
  std::ostream* log = nullptr;
};

/// Compares each sampled image's neighbors in image-embedding space with its
/// neighbors in generated-caption-embedding space.
inline NeighborStudy nn_study(const ModelCheckpoint& ck, const FeatureSet& features, const NeighborStudyOptions& opt) {
  if (opt.k == 0) throw UsageError("nn: k must be at least 1");
  std::size_t sample = opt.sample_size;
  if (sample > features.records.size()) {
    if (opt.log) {
      *opt.log << "warning: sample size " << sample << " exceeds " << features.records.size()
               << " available images; using all\n";
    }
    sample = features.records.size();
  }
  if (sample < opt.k + 1) {
    throw UsageError("nn: need at least k + 1 = " + std::to_string(opt.k + 1) + " samples, have " +
                     std::to_string(sample));
  }
  std::vector<std::size_t> picks(features.records.size());
  std::iota(picks.begin(), picks.end(), std::size_t{0});
  Rng rng(opt.seed);
  rng.shuffle(picks);
  picks.resize(sample);
  std::sort(picks.begin(), picks.end());

  const CaptionModel<float> model = model_from_checkpoint(ck);
  std::vector<std::uint64_t> ids;
  std::vector<std::vector<double>> image_vecs, caption_vecs;
  std::vector<std::string> texts;
  for (std::size_t idx : picks) {
    const auto& rec = features.records[idx];
    Tape<float> tape(false);
    const auto enc = model.encode(tape, rec);
    const auto v = model.image_embedding(tape, enc);
    image_vecs.emplace_back(v.data().begin(), v.data().end());
    const auto caption = strip_end(beam_decode(model, rec, opt.beam_size).front().tokens);
    caption_vecs.push_back(embed_caption(rec.image_id, caption, model.embedding_table()).embedding);
    texts.push_back(ck.vocab.decode(caption));
    ids.push_back(rec.image_id);
  }

  const auto s_i = nearest_neighbors(image_vecs, ids, opt.k);
  const auto s_c = nearest_neighbors(caption_vecs, ids, opt.k);
  NeighborStudy study;
  study.sample_size = sample;
  study.k = opt.k;
  study.beam_size = opt.beam_size;
  study.seed = opt.seed;
  double overlap_sum = 0, distinct_sum = 0;
  for (std::size_t a = 0; a < ids.size(); ++a) {
    NeighborReport r;
    r.anchor_id = ids[a];
    r.anchor_caption = texts[a];
    std::set<std::uint64_t> image_set;
    std::set<std::string> distinct;
    for (auto b : s_i[a]) {
      r.image_neighbors.push_back(ids[b]);
      image_set.insert(ids[b]);
    }
    for (auto b : s_c[a]) {
      r.caption_neighbors.push_back(ids[b]);
      r.captions.push_back(texts[b]);
      distinct.insert(texts[b]);
      r.overlap += image_set.count(ids[b]);
    }
    overlap_sum += static_cast<double>(r.overlap) / static_cast<double>(opt.k);
    distinct_sum += static_cast<double>(distinct.size()) / static_cast<double>(opt.k);
    study.anchors.push_back(std::move(r));
  }
  study.mean_overlap = overlap_sum / static_cast<double>(ids.size());
  study.distinct_caption_ratio = distinct_sum / static_cast<double>(ids.size());
  return study;
}

}  // namespace nic
