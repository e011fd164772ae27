#pragma once

// InfoNCE over original, positive-view and hard-negative-view sequence
// representations with in-batch negatives.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "simdiffrec/autograd.hpp"
#include "simdiffrec/errors.hpp"

namespace simdiffrec::contrastive {

using ag::Matrix;
using ag::Var;

struct ContrastiveConfig {
  double tau = 1.0;
  bool use_hard_negative = true;
  bool use_in_batch = true;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("contrastive: tau must be > 0");
    if (!use_hard_negative && !use_in_batch)
      throw ConfigError("contrastive: at least one of hard or in-batch negatives is required");
  }
};

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: width mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine_sim: zero-norm input");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Single-anchor InfoNCE:
///   -log exp(s+/tau) / (exp(s+/tau) + exp(s-/tau) + sum_b exp(s_b/tau)).
/// `hard_negative` is ignored when cfg.use_hard_negative is false, and
/// `in_batch` when cfg.use_in_batch is false.
inline double info_nce(std::span<const double> anchor, std::span<const double> positive,
                       std::span<const double> hard_negative, const std::vector<std::vector<double>>& in_batch,
                       const ContrastiveConfig& cfg) {
  cfg.validate();
  std::vector<double> terms{cosine_sim(anchor, positive) / cfg.tau};
  if (cfg.use_hard_negative) terms.push_back(cosine_sim(anchor, hard_negative) / cfg.tau);
  if (cfg.use_in_batch)
    for (const auto& v : in_batch) terms.push_back(cosine_sim(anchor, v) / cfg.tau);
  if (terms.size() < 2) throw ConfigError("info_nce: contrastive loss needs at least one negative");
  double mx = terms.front();
  for (const double t : terms) mx = std::max(mx, t);
  double z = 0.0;
  for (const double t : terms) z += std::exp(t - mx);
  return -(terms.front() - mx - std::log(z));
}

/// Batched, differentiable InfoNCE. Rows of `anchors`, `positives` and
/// `hard_negatives` belong to the same sequence; the positive views of the
/// other rows act as in-batch negatives. Returns the mean over anchors.
inline Var info_nce_batch(const Var& anchors, const Var& positives, const Var& hard_negatives,
                          const ContrastiveConfig& cfg) {
  cfg.validate();
  const Var a = ag::l2_normalize_rows(anchors);
  const Var p = ag::l2_normalize_rows(positives);
  const Var sims = ag::matmul_nt(a, p);
  if (cfg.use_hard_negative) {
    const Var hard = ag::rowwise_dot(a, ag::l2_normalize_rows(hard_negatives));
    return ag::info_nce_rows(sims, hard, cfg.tau, true, cfg.use_in_batch);
  }
  return ag::info_nce_rows(sims, Var{}, cfg.tau, false, cfg.use_in_batch);
}

}  // namespace simdiffrec::contrastive
