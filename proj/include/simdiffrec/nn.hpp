#pragma once

// Layers shared by the sequence encoder and the diffusion denoiser.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "simdiffrec/autograd.hpp"

namespace simdiffrec::nn {

using ag::Index;
using ag::Matrix;
using ag::Var;

using Rng = std::mt19937_64;

/// Named parameter list in a fixed, deterministic order.
using ParamList = std::vector<std::pair<std::string, Var>>;

/// Truncated normal (cut at two standard deviations) matrix.
inline Matrix truncated_normal(Index rows, Index cols, double std_dev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    double x = normal(rng);
    while (std::abs(x) > 2.0) x = normal(rng);
    m.data()[i] = x * std_dev;
  }
  return m;
}

/// Context threaded through forward passes: dropout is active only when
/// `training` is set and an RNG is supplied.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  bool dropout_active() const { return training && dropout > 0.0 && rng != nullptr; }
};

inline Var dropout(const Var& x, const ForwardContext& ctx) {
  if (!ctx.dropout_active()) return x;
  std::bernoulli_distribution keep(1.0 - ctx.dropout);
  const double inv = 1.0 / (1.0 - ctx.dropout);
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*ctx.rng) ? inv : 0.0;
  return ag::mul_const(x, mask);
}

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(Index in, Index out, double init_std, Rng& rng)
      : weight(ag::parameter(truncated_normal(in, out, init_std, rng))),
        bias(ag::parameter(Matrix::Zero(1, out))) {}

  Var operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(Index width)
      : gamma(ag::parameter(Matrix::Ones(1, width))), beta(ag::parameter(Matrix::Zero(1, width))) {}

  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

/// Layout of a stack of equal-length sequences flattened to rows.
struct SequenceLayout {
  Index n_seq = 0;
  Index seq_len = 0;
  std::vector<std::uint8_t> valid;  // one flag per row: 1 = real item, 0 = pad
};

/// Pre-norm Transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
struct TransformerBlock {
  LayerNorm ln_attn;
  Linear query, key, value, out;
  LayerNorm ln_ffn;
  Linear ffn_in, ffn_out;
  int n_heads = 1;

  TransformerBlock() = default;
  TransformerBlock(Index width, int heads, Index ffn_width, double init_std, Rng& rng)
      : ln_attn(width),
        query(width, width, init_std, rng),
        key(width, width, init_std, rng),
        value(width, width, init_std, rng),
        out(width, width, init_std, rng),
        ln_ffn(width),
        ffn_in(width, ffn_width, init_std, rng),
        ffn_out(ffn_width, width, init_std, rng),
        n_heads(heads) {}

  Var operator()(const Var& x, const SequenceLayout& layout, bool causal, const ForwardContext& ctx) const {
    const Var normed = ln_attn(x);
    const Var attended = ag::attention(query(normed), key(normed), value(normed), layout.n_seq, layout.seq_len,
                                       n_heads, causal, layout.valid);
    const Var h = ag::add(x, dropout(out(attended), ctx));
    const Var ff = ffn_out(ag::gelu(ffn_in(ln_ffn(h))));
    return ag::add(h, dropout(ff, ctx));
  }

  void collect(const std::string& prefix, ParamList& out_params) const {
    ln_attn.collect(prefix + ".ln_attn", out_params);
    query.collect(prefix + ".query", out_params);
    key.collect(prefix + ".key", out_params);
    value.collect(prefix + ".value", out_params);
    out.collect(prefix + ".out", out_params);
    ln_ffn.collect(prefix + ".ln_ffn", out_params);
    ffn_in.collect(prefix + ".ffn_in", out_params);
    ffn_out.collect(prefix + ".ffn_out", out_params);
  }
};

}  // namespace simdiffrec::nn
