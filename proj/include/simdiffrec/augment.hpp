#pragma once

// Confidence-guided augmentation: restoration distributions per position,
// confidence-ranked position selection, positive (argmax) and rank-k_sample
// hard-negative substitutions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "simdiffrec/dataio.hpp"
#include "simdiffrec/diffusion.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/hash.hpp"
#include "simdiffrec/parallel.hpp"

namespace simdiffrec::augment {

using ag::Index;
using ag::Matrix;
using nn::Rng;

/// p_i = softmax(W h_i) over items; the pad column has probability 0.
inline Matrix position_distributions(const Matrix& z0_hat, const Matrix& items) {
  return diffusion::softmax_rows(diffusion::rounding_logits(z0_hat, items));
}

/// c_i = max_j p_ij.
inline std::vector<double> confidence(const Matrix& p) {
  std::vector<double> c(static_cast<std::size_t>(p.rows()));
  for (Index i = 0; i < p.rows(); ++i) c[static_cast<std::size_t>(i)] = p.row(i).maxCoeff();
  return c;
}

/// Indices of the k_aug most confident non-pad positions, returned sorted
/// ascending. Confidence ties go to the lower index. A k_aug larger than the
/// number of non-pad positions is clamped.
inline std::vector<int> select_positions(std::span<const double> c, int k_aug, std::span<const std::uint8_t> pad_mask) {
  if (pad_mask.size() != c.size()) throw std::invalid_argument("select_positions: mask size");
  std::vector<int> cand;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (!pad_mask[i]) cand.push_back(static_cast<int>(i));
  if (k_aug < 0) throw std::invalid_argument("select_positions: k_aug must be >= 0");
  if (static_cast<std::size_t>(k_aug) > cand.size()) {
    std::clog << "warning: select_positions: k_aug=" << k_aug << " exceeds " << cand.size()
              << " non-pad positions; clamping\n";
    k_aug = static_cast<int>(cand.size());
  }
  std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) { return c[static_cast<std::size_t>(a)] > c[static_cast<std::size_t>(b)]; });
  cand.resize(static_cast<std::size_t>(k_aug));
  std::sort(cand.begin(), cand.end());
  return cand;
}

/// Uniformly random distinct non-pad positions (confidence-free ablation).
inline std::vector<int> random_positions(std::span<const std::uint8_t> pad_mask, int k_aug, Rng& rng) {
  std::vector<int> cand;
  for (std::size_t i = 0; i < pad_mask.size(); ++i)
    if (!pad_mask[i]) cand.push_back(static_cast<int>(i));
  k_aug = std::min<int>(k_aug, static_cast<int>(cand.size()));
  std::shuffle(cand.begin(), cand.end(), rng);
  cand.resize(static_cast<std::size_t>(std::max(k_aug, 0)));
  std::sort(cand.begin(), cand.end());
  return cand;
}

/// k_aug = max(1, round(ratio * non-pad length)), never above the length.
inline int k_aug_for(std::size_t non_pad, double ratio) {
  if (non_pad == 0) return 0;
  const int k = std::max(1, static_cast<int>(std::lround(ratio * static_cast<double>(non_pad))));
  return std::min<int>(k, static_cast<int>(non_pad));
}

/// Items 1..|V| ranked by probability (descending, ties -> lower id), first
/// `depth` entries.
inline std::vector<int> ranked_items(const Eigen::Ref<const Eigen::RowVectorXd>& p_row, int depth) {
  const int n_items = static_cast<int>(p_row.size()) - 1;
  if (depth < 1 || depth > n_items)
    throw ConfigError("k_sample must lie in [1, " + std::to_string(n_items) + "], got " + std::to_string(depth));
  const Eigen::RowVectorXd items_only = p_row.tail(n_items);
  auto idx = diffusion::top_k(items_only, depth);
  for (auto& v : idx) v += 1;
  return idx;
}

inline std::uint64_t sequence_hash(std::span<const int> seq) {
  Fnv1a h;
  h.update_span(seq);
  return h.digest();
}

struct AugmentationPlan {
  std::vector<int> positions;             // ascending, non-pad
  std::vector<double> confidences;        // c at each selected position
  std::vector<int> positive_items;        // rank-1 item per position
  std::vector<int> hard_negative_items;   // rank-k_sample item per position
  std::vector<std::vector<int>> ranked;   // top-k_sample items per position
  int k_sample = 1;
  std::uint64_t source_hash = 0;
};

/// Builds a plan for one sequence from its per-position distributions.
/// `p` has one row per sequence position.
inline AugmentationPlan make_plan(std::span<const int> seq, const Matrix& p, std::span<const int> positions,
                                  int k_sample) {
  if (p.rows() != static_cast<Index>(seq.size())) throw std::invalid_argument("make_plan: one p row per position");
  AugmentationPlan plan;
  plan.k_sample = k_sample;
  plan.source_hash = sequence_hash(seq);
  plan.positions.assign(positions.begin(), positions.end());
  for (const int pos : positions) {
    if (seq[static_cast<std::size_t>(pos)] == data::kPadId) throw std::invalid_argument("make_plan: pad position");
    auto ranks = ranked_items(p.row(pos), k_sample);
    plan.confidences.push_back(p.row(pos).maxCoeff());
    plan.positive_items.push_back(ranks.front());
    plan.hard_negative_items.push_back(ranks.back());
    plan.ranked.push_back(std::move(ranks));
  }
  return plan;
}

namespace detail {
inline std::vector<int> substitute(std::span<const int> seq, const AugmentationPlan& plan, std::span<const int> items) {
  if (sequence_hash(seq) != plan.source_hash) throw std::invalid_argument("augmentation plan does not match sequence");
  std::vector<int> out(seq.begin(), seq.end());
  for (std::size_t i = 0; i < plan.positions.size(); ++i) out[static_cast<std::size_t>(plan.positions[i])] = items[i];
  return out;
}
}  // namespace detail

inline std::vector<int> build_positive(std::span<const int> seq, const AugmentationPlan& plan) {
  return detail::substitute(seq, plan, plan.positive_items);
}

/// Substitutes the k_sample-th ranked item at each selected position.
/// k_sample may not exceed the depth the plan was built with.
inline std::vector<int> build_hard_negative(std::span<const int> seq, const AugmentationPlan& plan, int k_sample) {
  if (k_sample < 1 || k_sample > plan.k_sample)
    throw ConfigError("build_hard_negative: k_sample " + std::to_string(k_sample) + " outside plan depth " +
                      std::to_string(plan.k_sample));
  std::vector<int> items;
  for (const auto& r : plan.ranked) items.push_back(r[static_cast<std::size_t>(k_sample - 1)]);
  return detail::substitute(seq, plan, items);
}

// ------------------------------------------------------------- batch pipeline

struct AugmentConfig {
  int k_noise = 25;
  int k_sample = 2;
  double k_aug_ratio = 0.2;
  int stride = 50;
  bool random_positions = false;
  diffusion::NoiseMode noise_mode = diffusion::NoiseMode::similarity;
};

struct AugmentedBatch {
  std::size_t rows = 0;
  std::size_t max_len = 0;
  std::uint64_t noise_hash = 0;        // hash of the noise fed to the forward process
  std::vector<int> positive_ids;       // rows x max_len
  std::vector<int> hard_negative_ids;  // rows x max_len
  std::vector<AugmentationPlan> plans;  // positions are full-row column indices
};

/// Restores each left-padded row from fully noised embeddings and builds its
/// augmentation plan. Randomness (Gaussian noise, random positions) is drawn
/// serially from `rng` before any parallel work.
inline AugmentedBatch augment_batch(const diffusion::Denoiser& den, const Matrix& items,
                                    const diffusion::NoiseSchedule& schedule, std::span<const int> ids,
                                    std::size_t rows, std::size_t max_len, const AugmentConfig& cfg, Rng& rng,
                                    int threads = 1) {
  if (ids.size() != rows * max_len) throw std::invalid_argument("augment_batch: shape mismatch");
  AugmentedBatch out;
  out.rows = rows;
  out.max_len = max_len;
  out.positive_ids.assign(ids.begin(), ids.end());
  out.hard_negative_ids.assign(ids.begin(), ids.end());
  out.plans.resize(rows);
  if (rows == 0) return out;

  const std::size_t offset = data::first_active_column(ids, rows, max_len);
  const std::size_t window = max_len - offset;
  std::vector<int> trimmed;
  trimmed.reserve(rows * window);
  for (std::size_t r = 0; r < rows; ++r)
    trimmed.insert(trimmed.end(), ids.begin() + static_cast<std::ptrdiff_t>(r * max_len + offset),
                   ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * max_len));

  Matrix noise = cfg.noise_mode == diffusion::NoiseMode::gaussian
                     ? diffusion::sequence_gaussian_noise(trimmed, items.cols(), rng).rows
                     : diffusion::sequence_similarity_noise(trimmed, items, cfg.k_noise).rows;
  {
    Fnv1a h;
    h.update(noise.data(), static_cast<std::size_t>(noise.size()) * sizeof(double));
    out.noise_hash = h.digest();
  }

  std::vector<std::vector<int>> chosen(rows);
  std::vector<std::vector<std::uint8_t>> masks(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto& m = masks[r];
    for (std::size_t t = 0; t < window; ++t) m.push_back(trimmed[r * window + t] == data::kPadId ? 1 : 0);
    if (cfg.random_positions) {
      const auto non_pad = static_cast<std::size_t>(std::count(m.begin(), m.end(), 0));
      chosen[r] = random_positions(m, k_aug_for(non_pad, cfg.k_aug_ratio), rng);
    }
  }

  parallel_chunks(rows, threads, [&](std::size_t begin, std::size_t end) {
    const std::size_t n = end - begin;
    const std::span<const int> chunk_ids(trimmed.data() + begin * window, n * window);
    const Matrix chunk_noise = noise.middleRows(static_cast<Index>(begin * window), static_cast<Index>(n * window));
    const Matrix z0_hat = diffusion::restore(den, items, chunk_ids, n, window, chunk_noise, schedule, cfg.stride);
    const Matrix p_all = position_distributions(z0_hat, items);
    for (std::size_t r = begin; r < end; ++r) {
      const std::span<const int> seq(trimmed.data() + r * window, window);
      const Matrix p = p_all.middleRows(static_cast<Index>((r - begin) * window), static_cast<Index>(window));
      const auto& m = masks[r];
      std::vector<int> positions = chosen[r];
      if (!cfg.random_positions) {
        const auto non_pad = static_cast<std::size_t>(std::count(m.begin(), m.end(), 0));
        positions = select_positions(confidence(p), k_aug_for(non_pad, cfg.k_aug_ratio), m);
      }
      AugmentationPlan plan = make_plan(seq, p, positions, cfg.k_sample);
      const auto pos_seq = build_positive(seq, plan);
      const auto neg_seq = build_hard_negative(seq, plan, cfg.k_sample);
      std::copy(pos_seq.begin(), pos_seq.end(), out.positive_ids.begin() + static_cast<std::ptrdiff_t>(r * max_len + offset));
      std::copy(neg_seq.begin(), neg_seq.end(),
                out.hard_negative_ids.begin() + static_cast<std::ptrdiff_t>(r * max_len + offset));
      // Re-express the plan against the full padded row.
      for (auto& pos : plan.positions) pos += static_cast<int>(offset);
      plan.source_hash = sequence_hash(ids.subspan(r * max_len, max_len));
      out.plans[r] = std::move(plan);
    }
  });
  return out;
}

}  // namespace simdiffrec::augment
