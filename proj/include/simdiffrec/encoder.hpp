#pragma once

// Transformer next-item encoder with the shared item embedding table, the
// sampled-negative BCE recommendation loss and sequence representations.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "simdiffrec/autograd.hpp"
#include "simdiffrec/dataio.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/nn.hpp"

namespace simdiffrec::encoder {

using ag::Index;
using ag::Matrix;
using ag::Var;
using nn::ForwardContext;
using nn::Rng;

struct EncoderConfig {
  int n_items = 0;
  int d = 64;
  int n_layers = 2;
  int n_heads = 2;
  int ffn_mult = 4;
  double dropout = 0.2;
  int max_len = 50;
  double init_std = 0.02;

  void validate() const {
    if (n_items < 1) throw ConfigError("encoder: catalog must contain at least one item");
    if (d < 1 || n_heads < 1 || d % n_heads != 0) throw ConfigError("encoder: d must be divisible by n_heads");
    if (n_layers < 0) throw ConfigError("encoder: n_layers must be >= 0");
    if (max_len < 2) throw ConfigError("encoder: max_len must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must be in [0, 1)");
    if (ffn_mult < 1) throw ConfigError("encoder: ffn_mult must be >= 1");
  }
};

/// Encoder outputs for columns [offset, max_len) of every row. Leading
/// columns that are padding in every row are not computed; they cannot
/// influence any non-pad state.
struct HiddenStates {
  Var states;  // (rows * window) x d, row-major over (row, column)
  Var last;    // rows x d, state of the final column
  std::size_t rows = 0;
  std::size_t window = 0;
  std::size_t offset = 0;

  /// Flat row index of (row, column) into `states`.
  int index(std::size_t row, std::size_t column) const {
    return static_cast<int>(row * window + (column - offset));
  }
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    Matrix w = nn::truncated_normal(cfg.n_items + 1, cfg.d, cfg.init_std, rng);
    w.row(0).setZero();
    items_ = ag::parameter(std::move(w));
    positions_ = ag::parameter(nn::truncated_normal(cfg.max_len, cfg.d, cfg.init_std, rng));
    for (int l = 0; l < cfg.n_layers; ++l)
      blocks_.emplace_back(cfg.d, cfg.n_heads, static_cast<Index>(cfg.d) * cfg.ffn_mult, cfg.init_std, rng);
    final_norm_ = nn::LayerNorm(cfg.d);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// The shared item embedding table (row 0 = padding, kept at zero).
  const Var& item_embeddings() const { return items_; }
  const Var& positional_embeddings() const { return positions_; }

  /// h0 = W[id] + P[column] for columns [offset, max_len) of each row.
  Var embed(std::span<const int> item_ids, std::size_t rows, std::size_t offset) const {
    const auto max_len = static_cast<std::size_t>(cfg_.max_len);
    if (item_ids.size() != rows * max_len) throw std::invalid_argument("embed: expected rows x max_len ids");
    std::vector<int> ids;
    std::vector<int> cols;
    ids.reserve(rows * (max_len - offset));
    cols.reserve(ids.capacity());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t t = offset; t < max_len; ++t) {
        const int id = item_ids[r * max_len + t];
        if (id < 0 || id > cfg_.n_items) throw std::out_of_range("embed: item id " + std::to_string(id));
        ids.push_back(id);
        cols.push_back(static_cast<int>(t));
      }
    return ag::add(ag::gather_rows(items_, ids, data::kPadId), ag::gather_rows(positions_, cols));
  }

  /// Causal, padding-masked pre-norm Transformer over left-padded rows.
  HiddenStates encode(std::span<const int> item_ids, std::size_t rows, const ForwardContext& ctx,
                      bool trim = true) const {
    const auto max_len = static_cast<std::size_t>(cfg_.max_len);
    HiddenStates hs;
    hs.rows = rows;
    hs.offset = trim ? data::first_active_column(item_ids, rows, max_len) : 0;
    hs.window = max_len - hs.offset;

    nn::SequenceLayout layout;
    layout.n_seq = static_cast<Index>(rows);
    layout.seq_len = static_cast<Index>(hs.window);
    layout.valid.reserve(rows * hs.window);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t t = hs.offset; t < max_len; ++t)
        layout.valid.push_back(item_ids[r * max_len + t] != data::kPadId ? 1 : 0);

    Var h = nn::dropout(embed(item_ids, rows, hs.offset), ctx);
    for (const auto& block : blocks_) h = block(h, layout, /*causal=*/true, ctx);
    if (!blocks_.empty()) h = final_norm_(h);
    hs.states = h;

    std::vector<int> last_rows(rows);
    for (std::size_t r = 0; r < rows; ++r) last_rows[r] = hs.index(r, max_len - 1);
    hs.last = ag::take_rows(h, last_rows);
    return hs;
  }

  nn::ParamList parameters() const {
    nn::ParamList out;
    out.emplace_back("encoder.items", items_);
    out.emplace_back("encoder.positions", positions_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("encoder.block" + std::to_string(l), out);
    if (!blocks_.empty()) final_norm_.collect("encoder.final_norm", out);
    return out;
  }

 private:
  EncoderConfig cfg_;
  Var items_;
  Var positions_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
};

/// r = h W^T, with the padding column set to -infinity.
inline Matrix next_item_logits(const Matrix& h, const Matrix& items) {
  Matrix r = h * items.transpose();
  r.col(0).setConstant(-std::numeric_limits<double>::infinity());
  return r;
}

/// Mean over supervised positions of
///   -[log sigma(h_t . e_pos) + log(1 - sigma(h_t . e_neg))].
/// `state_rows` index rows of `states`; one positive and one negative per row.
inline Var sr_loss(const Var& states, const Var& items, std::span<const int> state_rows,
                   std::span<const int> positives, std::span<const int> negatives) {
  if (state_rows.empty()) throw std::invalid_argument("sr_loss: no supervised positions");
  if (positives.size() != state_rows.size() || negatives.size() != state_rows.size())
    throw std::invalid_argument("sr_loss: size mismatch");
  for (std::size_t i = 0; i < positives.size(); ++i) {
    if (positives[i] == data::kPadId) throw std::invalid_argument("sr_loss: pad target");
    if (negatives[i] == positives[i]) throw std::invalid_argument("sr_loss: negative equals target");
  }
  const Var h = ag::take_rows(states, state_rows);
  const Var pos = ag::rowwise_dot(h, ag::gather_rows(items, positives, data::kPadId));
  const Var neg = ag::rowwise_dot(h, ag::gather_rows(items, negatives, data::kPadId));
  const Var per_pos = ag::add(ag::log_sigmoid(pos), ag::log_sigmoid(ag::scale(neg, -1.0)));
  return ag::scale(ag::mean_all(per_pos), -1.0);
}

/// Supervised positions of a batch: (flat state row, next-item target).
struct Supervision {
  std::vector<int> state_rows;
  std::vector<int> targets;
  std::vector<int> users;
};

inline Supervision supervision(const data::Batch& batch, const HiddenStates& hs) {
  Supervision s;
  for (std::size_t r = 0; r < batch.rows; ++r)
    for (std::size_t t = hs.offset; t < batch.max_len; ++t) {
      const int y = batch.target(r, t);
      if (y == data::kPadId || batch.item(r, t) == data::kPadId) continue;
      s.state_rows.push_back(hs.index(r, t));
      s.targets.push_back(y);
      s.users.push_back(batch.user_ids[r]);
    }
  return s;
}

/// Draws items uniformly from {1..n_items} minus `history` (sorted, unique).
inline std::vector<int> sample_negatives(std::span<const int> history, std::size_t n, int n_items, Rng& rng) {
  if (static_cast<std::size_t>(n_items) <= history.size())
    throw DataError("sample_negatives: catalog exhausted by user history");
  std::vector<int> out;
  out.reserve(n);
  // Dense histories enumerate the complement instead of rejecting.
  if (history.size() * 2 > static_cast<std::size_t>(n_items)) {
    std::vector<int> pool;
    for (int v = 1; v <= n_items; ++v)
      if (!std::binary_search(history.begin(), history.end(), v)) pool.push_back(v);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < n; ++i) out.push_back(pool[pick(rng)]);
    return out;
  }
  std::uniform_int_distribution<int> pick(1, n_items);
  while (out.size() < n) {
    const int v = pick(rng);
    if (!std::binary_search(history.begin(), history.end(), v)) out.push_back(v);
  }
  return out;
}

/// h_n^L of the final column for one sequence (left-padded to max_len).
inline Matrix sequence_representation(const Encoder& enc, std::span<const int> seq) {
  const bool any = std::any_of(seq.begin(), seq.end(), [](int v) { return v != data::kPadId; });
  if (!any) throw std::invalid_argument("sequence_representation: all-pad input");
  ag::NoGradGuard no_grad;
  const auto row = data::left_pad(seq, static_cast<std::size_t>(enc.config().max_len));
  return enc.encode(row, 1, ForwardContext{}).last.value();
}

/// Scores every catalog item for each prefix; pad column is -infinity.
inline Matrix score_prefixes(const Encoder& enc, std::span<const std::vector<int>> prefixes) {
  ag::NoGradGuard no_grad;
  const auto max_len = static_cast<std::size_t>(enc.config().max_len);
  std::vector<int> ids;
  ids.reserve(prefixes.size() * max_len);
  for (const auto& p : prefixes) {
    const auto row = data::left_pad(p, max_len);
    ids.insert(ids.end(), row.begin(), row.end());
  }
  const auto hs = enc.encode(ids, prefixes.size(), ForwardContext{});
  return next_item_logits(hs.last.value(), enc.item_embeddings().value());
}

}  // namespace simdiffrec::encoder
