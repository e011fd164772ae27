#pragma once

// Similarity-guided deterministic diffusion over item-embedding sequences:
// self-masked top-k similarity noise, the affine forward process and its
// closed form, a Transformer z0-predictor, a deterministic reverse chain and
// trainable rounding back to items through the shared embedding table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "simdiffrec/autograd.hpp"
#include "simdiffrec/dataio.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/nn.hpp"

namespace simdiffrec::diffusion {

using ag::Index;
using ag::Matrix;
using ag::Var;
using nn::ForwardContext;
using nn::Rng;

// ---------------------------------------------------------------- schedule

/// Per-step coefficients indexed by t in [0, T]; entry 0 is the identity
/// step (alpha = 1, beta = 0). signal[t] = prod_{i<=t} alpha_i and
/// noise[t] = sum_{s<=t} beta_s prod_{i=s+1..t} alpha_i.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// Builds from explicit alpha_1..alpha_T and beta_1..beta_T.
  NoiseSchedule(std::vector<double> alphas, std::vector<double> betas) {
    if (alphas.size() != betas.size() || alphas.empty())
      throw ConfigError("schedule: alpha and beta must be nonempty and equally long");
    alpha_.assign(1, 1.0);
    beta_.assign(1, 0.0);
    signal_.assign(1, 1.0);
    noise_.assign(1, 0.0);
    for (std::size_t i = 0; i < alphas.size(); ++i) {
      if (!(alphas[i] > 0.0 && alphas[i] <= 1.0)) throw ConfigError("schedule: alpha_t must lie in (0, 1]");
      if (!(betas[i] >= 0.0 && betas[i] < 1.0)) throw ConfigError("schedule: beta_t must lie in [0, 1)");
      alpha_.push_back(alphas[i]);
      beta_.push_back(betas[i]);
      signal_.push_back(signal_.back() * alphas[i]);
      noise_.push_back(noise_.back() * alphas[i] + betas[i]);
    }
  }

  /// beta_t linear from beta_start to beta_end, alpha_t = 1 - beta_t.
  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.2) {
    if (steps < 1) throw ConfigError("schedule: steps must be >= 1");
    std::vector<double> a, b;
    for (int t = 1; t <= steps; ++t) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
      const double beta = beta_start + (beta_end - beta_start) * frac;
      b.push_back(beta);
      a.push_back(1.0 - beta);
    }
    return NoiseSchedule(std::move(a), std::move(b));
  }

  int steps() const { return static_cast<int>(alpha_.size()) - 1; }
  double alpha(int t) const { return alpha_.at(static_cast<std::size_t>(t)); }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t)); }
  double signal(int t) const { return signal_.at(static_cast<std::size_t>(t)); }
  double noise(int t) const { return noise_.at(static_cast<std::size_t>(t)); }

  nlohmann::json to_json() const {
    return {{"version", 1},
            {"steps", steps()},
            {"alpha", std::vector<double>(alpha_.begin() + 1, alpha_.end())},
            {"beta", std::vector<double>(beta_.begin() + 1, beta_.end())},
            {"signal_cumprod", signal_},
            {"noise_accum", noise_}};
  }

 private:
  std::vector<double> alpha_, beta_, signal_, noise_;
};

// ------------------------------------------------------------------- noise

enum class NoiseMode { similarity, gaussian };

struct NoiseTensor {
  Matrix rows;  // one noise row per sequence position
  NoiseMode mode = NoiseMode::similarity;
};

/// scores = e W^T with each row's own item and the padding column at -inf.
inline Matrix similarity_scores(const Matrix& e, const Matrix& items, std::span<const int> self_ids) {
  if (static_cast<Index>(self_ids.size()) != e.rows()) throw std::invalid_argument("similarity_scores: id count");
  Matrix scores = e * items.transpose();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  scores.col(0).setConstant(kNegInf);
  for (Index i = 0; i < e.rows(); ++i) {
    const int self = self_ids[static_cast<std::size_t>(i)];
    if (self > 0 && self < scores.cols()) scores(i, self) = kNegInf;
  }
  return scores;
}

/// Indices of the k largest entries of a row, descending; ties -> lower index.
inline std::vector<int> top_k(const Eigen::Ref<const Eigen::RowVectorXd>& row, int k) {
  std::vector<int> idx(static_cast<std::size_t>(row.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto better = [&](int a, int b) { return row(a) > row(b) || (row(a) == row(b) && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

/// Mean of the k_noise most similar (non-self, non-pad) item embeddings.
inline NoiseTensor similarity_noise(const Matrix& scores, const Matrix& items, int k_noise) {
  const int n_items = static_cast<int>(items.rows()) - 1;
  if (k_noise < 1 || k_noise > n_items - 1)
    throw ConfigError("similarity_noise: k_noise must lie in [1, n_items - 1], got " + std::to_string(k_noise));
  NoiseTensor out{Matrix::Zero(scores.rows(), items.cols()), NoiseMode::similarity};
  for (Index i = 0; i < scores.rows(); ++i) {
    for (const int j : top_k(scores.row(i), k_noise)) out.rows.row(i) += items.row(j);
    out.rows.row(i) /= static_cast<double>(k_noise);
  }
  return out;
}

/// Similarity noise for flattened sequence positions; pad positions get zero.
inline NoiseTensor sequence_similarity_noise(std::span<const int> ids, const Matrix& items, int k_noise) {
  std::vector<int> live;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != data::kPadId) live.push_back(static_cast<int>(i));
  Matrix e(static_cast<Index>(live.size()), items.cols());
  std::vector<int> self(live.size());
  for (std::size_t i = 0; i < live.size(); ++i) {
    self[i] = ids[static_cast<std::size_t>(live[i])];
    e.row(static_cast<Index>(i)) = items.row(self[i]);
  }
  const NoiseTensor dense = similarity_noise(similarity_scores(e, items, self), items, k_noise);
  NoiseTensor out{Matrix::Zero(static_cast<Index>(ids.size()), items.cols()), NoiseMode::similarity};
  for (std::size_t i = 0; i < live.size(); ++i) out.rows.row(live[i]) = dense.rows.row(static_cast<Index>(i));
  return out;
}

/// I.i.d. standard normal noise (the Gaussian baseline).
inline NoiseTensor gaussian_noise(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  NoiseTensor out{Matrix(rows, cols), NoiseMode::gaussian};
  for (Index i = 0; i < out.rows.size(); ++i) out.rows.data()[i] = normal(rng);
  return out;
}

/// Gaussian noise on non-pad positions only.
inline NoiseTensor sequence_gaussian_noise(std::span<const int> ids, Index d, Rng& rng) {
  NoiseTensor out = gaussian_noise(static_cast<Index>(ids.size()), d, rng);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == data::kPadId) out.rows.row(static_cast<Index>(i)).setZero();
  return out;
}

// ------------------------------------------------------------ forward process

/// z_t = alpha_t z_{t-1} + beta_t noise.
inline Matrix forward_step(const Matrix& z_prev, const Matrix& noise, double alpha_t, double beta_t) {
  return alpha_t * z_prev + beta_t * noise;
}

inline Matrix forward_step(const Matrix& z_prev, const NoiseTensor& noise, const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("forward_step: t outside [1, T]");
  return forward_step(z_prev, noise.rows, s.alpha(t), s.beta(t));
}

/// z_t = signal[t] z_0 + noise[t] noise.
inline Matrix forward_closed(const Matrix& z0, const Matrix& noise, int t, const NoiseSchedule& s) {
  if (t < 0 || t > s.steps()) throw std::out_of_range("forward_closed: t outside [0, T]");
  if (t == 0) return z0;
  return s.signal(t) * z0 + s.noise(t) * noise;
}

// ------------------------------------------------------------------- denoiser

struct DenoiserConfig {
  int d = 64;
  int n_layers = 1;
  int n_heads = 2;
  int ffn_mult = 4;
  double dropout = 0.0;
  double init_std = 0.02;

  void validate() const {
    if (d < 1 || n_heads < 1 || d % n_heads != 0) throw ConfigError("denoiser: d must be divisible by n_heads");
    if (n_layers < 0) throw ConfigError("denoiser: n_layers must be >= 0");
  }
};

/// Sinusoidal embedding of the step index, 1 x d.
inline Matrix timestep_embedding(int t, int d) {
  Matrix out(1, d);
  const int half = d / 2;
  for (int i = 0; i < d; ++i) {
    const int k = i % std::max(half, 1);
    const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(std::max(half, 1)));
    out(0, i) = i < half ? std::sin(t * freq) : std::cos(t * freq);
  }
  return out;
}

/// f(z_t, t): bidirectional Transformer over positions with an additive,
/// linearly projected sinusoidal step embedding; predicts z_0.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    time_proj_ = nn::Linear(cfg.d, cfg.d, cfg.init_std, rng);
    for (int l = 0; l < cfg.n_layers; ++l)
      blocks_.emplace_back(cfg.d, cfg.n_heads, static_cast<Index>(cfg.d) * cfg.ffn_mult, cfg.init_std, rng);
    out_norm_ = nn::LayerNorm(cfg.d);
    out_proj_ = nn::Linear(cfg.d, cfg.d, cfg.init_std, rng);
  }

  const DenoiserConfig& config() const { return cfg_; }

  Var predict(const Var& z_t, int t, const nn::SequenceLayout& layout, const ForwardContext& ctx) const {
    if (z_t.cols() != cfg_.d) throw std::invalid_argument("denoiser: width mismatch");
    const Var time = time_proj_(ag::constant(timestep_embedding(t, cfg_.d)));
    Var h = ag::add_row(z_t, time);
    for (const auto& block : blocks_) h = block(h, layout, /*causal=*/false, ctx);
    return out_proj_(out_norm_(h));
  }

  /// Gradient-free prediction.
  Matrix predict_value(const Matrix& z_t, int t, const nn::SequenceLayout& layout) const {
    ag::NoGradGuard no_grad;
    return predict(ag::constant(z_t), t, layout, ForwardContext{}).value();
  }

  nn::ParamList parameters() const {
    nn::ParamList out;
    time_proj_.collect("denoiser.time_proj", out);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("denoiser.block" + std::to_string(l), out);
    out_norm_.collect("denoiser.out_norm", out);
    out_proj_.collect("denoiser.out_proj", out);
    return out;
  }

 private:
  DenoiserConfig cfg_;
  nn::Linear time_proj_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm out_norm_;
  nn::Linear out_proj_;
};

/// Flattened layout of `rows` sequences of `window` positions.
inline nn::SequenceLayout layout_for(std::span<const int> ids, std::size_t rows, std::size_t window) {
  nn::SequenceLayout layout;
  layout.n_seq = static_cast<Index>(rows);
  layout.seq_len = static_cast<Index>(window);
  layout.valid.reserve(ids.size());
  for (const int id : ids) layout.valid.push_back(id != data::kPadId ? 1 : 0);
  return layout;
}

// ------------------------------------------------------------- reverse process

/// Deterministic reverse chain visiting t = T, T - stride, ..., stride:
/// predict z0 at each visited step, then re-noise the prediction to the next
/// visited step with the same noise. Returns the final z0 prediction.
/// `predict(z_t, t)` returns a z0 estimate.
template <class Predict>
Matrix reverse_chain(const Matrix& z_T, const Matrix& noise, const NoiseSchedule& s, int stride, Predict&& predict) {
  const int steps = s.steps();
  if (stride < 1 || steps % stride != 0)
    throw ConfigError("reverse_chain: stride must divide T (T=" + std::to_string(steps) +
                      ", stride=" + std::to_string(stride) + ")");
  Matrix z = z_T;
  Matrix z0_hat;
  for (int t = steps; t > 0; t -= stride) {
    z0_hat = predict(static_cast<const Matrix&>(z), t);
    if (t - stride > 0) z = forward_closed(z0_hat, noise, t - stride, s);
  }
  return z0_hat;
}

// -------------------------------------------------------------------- rounding

/// logits = z0_hat W^T with the pad column at -inf.
inline Matrix rounding_logits(const Matrix& z0_hat, const Matrix& items) {
  Matrix logits = z0_hat * items.transpose();
  logits.col(0).setConstant(-std::numeric_limits<double>::infinity());
  return logits;
}

/// Row-wise softmax of pad-masked logits; the pad probability is exactly 0.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    double z = 0.0;
    for (Index j = 0; j < logits.cols(); ++j) {
      const double e = std::isinf(logits(i, j)) && logits(i, j) < 0 ? 0.0 : std::exp(logits(i, j) - mx);
      p(i, j) = e;
      z += e;
    }
    p.row(i) /= z;
  }
  return p;
}

/// Per-row argmax; ties -> lower item id.
inline std::vector<int> round_to_items(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) out[static_cast<std::size_t>(i)] = top_k(logits.row(i), 1).front();
  return out;
}

// ------------------------------------------------------------------------ loss

struct DiffusionLoss {
  Var total;  // mse + rounding
  Var mse;    // mean over positions of ||z0 - f(z_t, t)||^2
  Var rounding;  // mean over positions of -log p(v_i | z0_hat_i)
};

/// Single-step estimate of the diffusion objective for clean id sequences.
/// `ids` holds rows x window ids; `noise` is constant (one row per id).
/// z0 is the clean item-embedding sequence; at t = 1 the same target serves
/// as the e-anchor term.
inline DiffusionLoss diffusion_loss(const Denoiser& den, const Var& items, std::span<const int> ids, std::size_t rows,
                                    std::size_t window, const Matrix& noise, int t, const NoiseSchedule& s,
                                    const ForwardContext& ctx) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("diffusion_loss: t outside [1, T]");
  if (ids.size() != rows * window || noise.rows() != static_cast<Index>(ids.size()))
    throw std::invalid_argument("diffusion_loss: shape mismatch");
  const auto layout = layout_for(ids, rows, window);
  std::vector<int> live, live_ids;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != data::kPadId) {
      live.push_back(static_cast<int>(i));
      live_ids.push_back(ids[i]);
    }
  if (live.empty()) throw std::invalid_argument("diffusion_loss: no supervised positions");

  const Var z0 = ag::gather_rows(items, ids, data::kPadId);
  const Var z_t = ag::add(ag::scale(z0, s.signal(t)), ag::constant(s.noise(t) * noise));
  const Var pred = den.predict(z_t, t, layout, ctx);
  const Var pred_live = ag::take_rows(pred, live);
  const Var diff = ag::sub(pred_live, ag::take_rows(z0, live));
  DiffusionLoss out;
  out.mse = ag::mean_all(ag::row_sqnorm(diff));
  out.rounding = ag::cross_entropy_rows(ag::matmul_nt(pred_live, items), live_ids, data::kPadId);
  out.total = ag::add(out.mse, out.rounding);
  return out;
}

inline int sample_timestep(const NoiseSchedule& s, Rng& rng) {
  std::uniform_int_distribution<int> pick(1, s.steps());
  return pick(rng);
}

/// Full restoration used for augmentation: noise the clean sequence all the
/// way to T, then run the reverse chain. Returns z0_hat for every position.
inline Matrix restore(const Denoiser& den, const Matrix& items, std::span<const int> ids, std::size_t rows,
                      std::size_t window, const Matrix& noise, const NoiseSchedule& s, int stride) {
  const auto layout = layout_for(ids, rows, window);
  Matrix z0(static_cast<Index>(ids.size()), items.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) z0.row(static_cast<Index>(i)) = items.row(ids[i]);
  const Matrix z_T = forward_closed(z0, noise, s.steps(), s);
  return reverse_chain(z_T, noise, s, stride,
                       [&](const Matrix& z, int t) { return den.predict_value(z, t, layout); });
}

}  // namespace simdiffrec::diffusion
