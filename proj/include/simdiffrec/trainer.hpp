#pragma once

// Joint training of L_total = L_sr + alpha * L_cl + beta * L_d, model
// selection on validation NDCG@10, ablation runs and grid sweeps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "simdiffrec/augment.hpp"
#include "simdiffrec/checkpoint.hpp"
#include "simdiffrec/config.hpp"
#include "simdiffrec/contrastive.hpp"
#include "simdiffrec/dataio.hpp"
#include "simdiffrec/diffusion.hpp"
#include "simdiffrec/encoder.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/evalmetrics.hpp"
#include "simdiffrec/hash.hpp"
#include "simdiffrec/optim.hpp"
#include "simdiffrec/parallel.hpp"

namespace simdiffrec::train {

using ag::Matrix;
using ag::Var;

struct Streams {
  nn::Rng shuffle, negatives, dropout, view_dropout, diffusion, augment;

  explicit Streams(std::uint64_t seed)
      : shuffle(make_stream(seed, Stream::shuffle)),
        negatives(make_stream(seed, Stream::negatives)),
        dropout(make_stream(seed, Stream::dropout)),
        view_dropout(make_stream(seed, Stream::view_dropout)),
        diffusion(make_stream(seed, Stream::diffusion)),
        augment(make_stream(seed, Stream::augment)) {}

  /// Textual generator states, stored with checkpoints.
  nlohmann::json state() const {
    const auto text = [](const nn::Rng& r) {
      std::ostringstream os;
      os << r;
      return os.str();
    };
    return {{"shuffle", text(shuffle)},           {"negatives", text(negatives)},
            {"dropout", text(dropout)},           {"view_dropout", text(view_dropout)},
            {"diffusion", text(diffusion)},       {"augment", text(augment)}};
  }
};

inline augment::AugmentConfig augment_config(const TrainConfig& c) {
  augment::AugmentConfig a;
  a.k_noise = c.k_noise;
  a.k_sample = c.k_sample;
  a.k_aug_ratio = c.k_aug_ratio;
  a.stride = c.reverse_stride;
  a.random_positions = c.ablation == Ablation::no_c_aug;
  a.noise_mode = c.ablation == Ablation::no_k_noise ? diffusion::NoiseMode::gaussian : diffusion::NoiseMode::similarity;
  return a;
}

inline contrastive::ContrastiveConfig contrastive_config(const TrainConfig& c) {
  contrastive::ContrastiveConfig cc;
  cc.tau = c.tau;
  cc.use_hard_negative = c.ablation != Ablation::no_k_sample;
  cc.use_in_batch = c.use_in_batch;
  return cc;
}

struct StepLosses {
  double sr = 0.0;
  double cl = 0.0;
  double d = 0.0;
  double total = 0.0;
  bool cl_active = false;
  bool d_active = false;
};

/// Fingerprints of intermediate activations for one step, used to check that
/// an ablation only changes the path it targets.
struct StepProbes {
  std::uint64_t sr_states = 0;
  std::uint64_t aug_noise = 0;
  std::uint64_t positions = 0;
  std::uint64_t positive_ids = 0;
  std::uint64_t hard_negative_ids = 0;
  std::uint64_t diffusion_noise = 0;
  int timestep = 0;
  int contrastive_terms = 0;  // logits per anchor in the InfoNCE denominator
};

namespace detail {

inline std::uint64_t hash_matrix(const Matrix& m) {
  Fnv1a h;
  h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  return h.digest();
}

inline std::uint64_t hash_ids(std::span<const int> ids) {
  Fnv1a h;
  h.update_span(ids);
  return h.digest();
}

inline std::vector<int> trim_rows(std::span<const int> ids, std::size_t rows, std::size_t max_len, std::size_t offset) {
  std::vector<int> out;
  out.reserve(rows * (max_len - offset));
  for (std::size_t r = 0; r < rows; ++r)
    out.insert(out.end(), ids.begin() + static_cast<std::ptrdiff_t>(r * max_len + offset),
               ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * max_len));
  return out;
}

}  // namespace detail

/// Sorted, deduplicated item set of each user's full sequence. Negatives for
/// L_sr are drawn outside it.
inline std::vector<std::vector<int>> user_histories(const data::SequenceDataset& ds) {
  std::vector<std::vector<int>> out(ds.sequences.size());
  for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
    out[u] = ds.sequences[u];
    std::sort(out[u].begin(), out[u].end());
    out[u].erase(std::unique(out[u].begin(), out[u].end()), out[u].end());
  }
  return out;
}

/// One optimizer step. `warmup` disables the contrastive term.
inline StepLosses train_step(Model& m, optim::Adam& opt, const data::Batch& batch,
                             const std::vector<std::vector<int>>& histories, Streams& rs, bool warmup, int threads,
                             StepProbes* probes = nullptr) {
  const TrainConfig& c = m.cfg;
  const Var& items = m.enc.item_embeddings();
  StepLosses out;

  // (1) next-item loss on the original sequences
  const nn::ForwardContext ctx{true, c.dropout, &rs.dropout};
  const auto hs = m.enc.encode(batch.item_ids, batch.rows, ctx);
  if (probes) probes->sr_states = detail::hash_matrix(hs.states.value());
  const auto sup = encoder::supervision(batch, hs);
  Var total;
  Var l_sr;
  if (!sup.state_rows.empty()) {
    std::vector<int> negatives;
    negatives.reserve(sup.targets.size());
    for (std::size_t i = 0; i < sup.users.size();) {
      std::size_t j = i;
      while (j < sup.users.size() && sup.users[j] == sup.users[i]) ++j;
      const auto drawn = encoder::sample_negatives(histories.at(static_cast<std::size_t>(sup.users[i])), j - i,
                                                   m.n_items, rs.negatives);
      negatives.insert(negatives.end(), drawn.begin(), drawn.end());
      i = j;
    }
    l_sr = encoder::sr_loss(hs.states, items, sup.state_rows, sup.targets, negatives);
    out.sr = l_sr.item();
    total = l_sr;
  }

  // (2) contrastive loss on diffusion-restored views
  const auto ccfg = contrastive_config(c);
  if (!c.sr_only && !warmup && (batch.rows > 1 || ccfg.use_hard_negative)) {
    augment::AugmentedBatch aug;
    {
      ag::NoGradGuard no_grad;
      aug = augment::augment_batch(m.den, items.value(), m.schedule, batch.item_ids, batch.rows, batch.max_len,
                                   augment_config(c), rs.augment, threads);
    }
    const nn::ForwardContext view_ctx{true, c.dropout, &rs.view_dropout};
    const Var pos_last = m.enc.encode(aug.positive_ids, batch.rows, view_ctx).last;
    Var hard_last;
    if (ccfg.use_hard_negative) hard_last = m.enc.encode(aug.hard_negative_ids, batch.rows, view_ctx).last;
    const Var l_cl = contrastive::info_nce_batch(hs.last, pos_last, hard_last, ccfg);
    out.cl = l_cl.item();
    out.cl_active = true;
    total = total.node() ? ag::add(total, ag::scale(l_cl, c.alpha)) : ag::scale(l_cl, c.alpha);
    if (probes) {
      probes->aug_noise = aug.noise_hash;
      std::vector<int> flat;
      for (const auto& p : aug.plans) flat.insert(flat.end(), p.positions.begin(), p.positions.end());
      probes->positions = detail::hash_ids(flat);
      probes->positive_ids = detail::hash_ids(aug.positive_ids);
      probes->hard_negative_ids = detail::hash_ids(aug.hard_negative_ids);
      probes->contrastive_terms = 1 + (ccfg.use_hard_negative ? 1 : 0) +
                                  (ccfg.use_in_batch ? static_cast<int>(batch.rows) - 1 : 0);
    }
  }

  // (3) diffusion loss on the clean sequences
  if (!c.sr_only) {
    const std::size_t offset = data::first_active_column(batch.item_ids, batch.rows, batch.max_len);
    const std::size_t window = batch.max_len - offset;
    const auto trimmed = detail::trim_rows(batch.item_ids, batch.rows, batch.max_len, offset);
    const Matrix noise = c.ablation == Ablation::no_k_noise
                             ? diffusion::sequence_gaussian_noise(trimmed, c.d, rs.diffusion).rows
                             : diffusion::sequence_similarity_noise(trimmed, items.value(), c.k_noise).rows;
    const int t = diffusion::sample_timestep(m.schedule, rs.diffusion);
    const auto dl = diffusion::diffusion_loss(m.den, items, trimmed, batch.rows, window, noise, t, m.schedule,
                                              nn::ForwardContext{true, 0.0, nullptr});
    out.d = dl.total.item();
    out.d_active = true;
    total = total.node() ? ag::add(total, ag::scale(dl.total, c.beta)) : ag::scale(dl.total, c.beta);
    if (probes) {
      probes->diffusion_noise = detail::hash_matrix(noise);
      probes->timestep = t;
    }
  }

  if (!total.node()) {
    // Nothing supervised: still count the step so every configuration takes
    // the same optimizer trajectory.
    opt.zero_grad();
    opt.step();
    return out;
  }
  out.total = total.item();
  if (!std::isfinite(out.total)) {
    std::ostringstream os;
    os << "non-finite loss: L_sr=" << out.sr << " L_cl=" << out.cl << " L_d=" << out.d << " step=" << opt.steps() + 1;
    throw NumericError(os.str());
  }
  const double recomputed = out.sr + c.alpha * out.cl + c.beta * out.d;
  if (std::abs(recomputed - out.total) > 1e-6 * std::max(1.0, std::abs(out.total)))
    throw NumericError("loss identity violated: total " + std::to_string(out.total) + " vs " +
                       std::to_string(recomputed));

  opt.zero_grad();
  ag::backward(total);
  opt.step();
  return out;
}

// ---------------------------------------------------------------------- fit

struct EpochRecord {
  int epoch = 0;
  double sr = 0.0;
  double cl = 0.0;
  double d = 0.0;
  double total = 0.0;
  std::optional<eval::MetricsReport> valid;
};

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  int threads = 1;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  eval::MetricsReport valid;
  eval::MetricsReport test;
  std::filesystem::path checkpoint;
  double wall_seconds = 0.0;
};

struct FitOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  int threads = 1;
  std::ostream* log = nullptr;
};

inline eval::MetricsReport evaluate_model(const Model& m, std::span<const data::EvalCase> cases, int threads) {
  eval::EvalOptions opt;
  opt.ks = m.cfg.ks;
  opt.threads = threads;
  auto report = eval::evaluate(
      [&](std::span<const std::vector<int>> prefixes) { return encoder::score_prefixes(m.enc, prefixes); }, cases, opt);
  report.seed = m.cfg.seed;
  report.config_hash = config_hash(m.cfg);
  return report;
}

namespace detail {

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::string losses_header(const std::vector<int>& ks) {
  std::string h = "epoch,L_sr,L_cl,L_d,L_total";
  for (const int k : ks) h += ",val_hr@" + std::to_string(k) + ",val_ndcg@" + std::to_string(k);
  return h;
}

inline std::string losses_row(const EpochRecord& e, const std::vector<int>& ks) {
  std::ostringstream os;
  os << std::setprecision(17) << e.epoch << ',' << e.sr << ',' << e.cl << ',' << e.d << ',' << e.total;
  for (const int k : ks) {
    if (e.valid)
      os << ',' << e.valid->hr.at(k) << ',' << e.valid->ndcg.at(k);
    else
      os << ",,";
  }
  return os.str();
}

}  // namespace detail

inline nlohmann::json metrics_json(const RunRecord& r) {
  nlohmann::json j = eval::report_to_json(r.test);
  j["split"] = "test";
  j["best_epoch"] = r.best_epoch;
  j["valid"] = eval::report_to_json(r.valid);
  return j;
}

/// Trains on the leave-one-out training split with model selection on
/// validation NDCG@10, then reports test metrics of the selected model.
inline RunRecord fit(const TrainConfig& cfg, const data::SequenceDataset& ds, const FitOptions& opts = {}) {
  cfg.validate();
  contrastive_config(cfg).validate();
  const auto start = std::chrono::steady_clock::now();
  const auto split = data::split_leave_one_out(ds);
  const auto histories = user_histories(ds);

  Model model = make_model(cfg, ds.n_items(), to_hex(ds.catalog.hash()));
  auto params = model.parameters();
  optim::Adam opt(params, {cfg.lr});
  Streams rs(cfg.seed);

  RunRecord rec;
  rec.config_hash = config_hash(cfg);
  rec.seed = cfg.seed;
  rec.threads = opts.threads;

  const bool write = !opts.out_dir.empty();
  std::ofstream losses;
  if (write) {
    std::filesystem::create_directories(opts.out_dir / "checkpoints");
    detail::write_json(opts.out_dir / "config.json", config_to_json(cfg));
    losses.open(opts.out_dir / "losses.csv", std::ios::binary);
    if (!losses) throw DataError("cannot write losses.csv in " + opts.out_dir.string());
    losses << detail::losses_header(cfg.ks) << '\n';
    rec.checkpoint = opts.out_dir / "checkpoints" / "best";
  }

  std::vector<Matrix> best_values;
  nlohmann::json best_rng;
  const auto snapshot = [&] {
    best_rng = rs.state();
    best_values.clear();
    for (const auto& [name, p] : params) best_values.push_back(p.value());
  };

  // The initialised model is the selection baseline.
  rec.valid = evaluate_model(model, split.valid, opts.threads);
  double best_ndcg = rec.valid.ndcg.at(10);
  snapshot();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool warmup = epoch <= cfg.warmup_epochs;
    data::BatchStream stream(split.train, static_cast<std::size_t>(cfg.max_len),
                             static_cast<std::size_t>(cfg.batch_size), rs.shuffle());
    EpochRecord e;
    e.epoch = epoch;
    int steps = 0;
    while (auto batch = stream.next()) {
      const auto l = train_step(model, opt, *batch, histories, rs, warmup, opts.threads);
      e.sr += l.sr;
      e.cl += l.cl;
      e.d += l.d;
      e.total += l.total;
      ++steps;
    }
    if (steps > 0) {
      e.sr /= steps;
      e.cl /= steps;
      e.d /= steps;
      e.total /= steps;
    }
    bool stop = false;
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      e.valid = evaluate_model(model, split.valid, opts.threads);
      const double ndcg = e.valid->ndcg.at(10);
      if (ndcg > best_ndcg) {
        best_ndcg = ndcg;
        rec.best_epoch = epoch;
        rec.valid = *e.valid;
        snapshot();
      }
      stop = epoch - rec.best_epoch >= cfg.patience;
    }
    if (opts.log) {
      *opts.log << "epoch " << epoch << " L_sr=" << e.sr << " L_cl=" << e.cl << " L_d=" << e.d
                << " L_total=" << e.total;
      if (e.valid) *opts.log << " val_hr@10=" << e.valid->hr.at(10) << " val_ndcg@10=" << e.valid->ndcg.at(10);
      *opts.log << '\n';
    }
    if (write) losses << detail::losses_row(e, cfg.ks) << '\n' << std::flush;
    rec.epochs.push_back(std::move(e));
    if (stop) break;
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i].second.mutable_value() = best_values[i];
  rec.test = evaluate_model(model, split.test, opts.threads);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (write) {
    save_checkpoint(rec.checkpoint, model, {{"best_epoch", rec.best_epoch}, {"rng", best_rng}});
    detail::write_json(opts.out_dir / "metrics.json", metrics_json(rec));
    detail::write_json(opts.out_dir / "run.json", {{"schema_version", 1},
                                                   {"config_hash", rec.config_hash},
                                                   {"seed", rec.seed},
                                                   {"threads", rec.threads},
                                                   {"epochs_run", rec.epochs.size()},
                                                   {"best_epoch", rec.best_epoch},
                                                   {"checkpoint", rec.checkpoint.string()},
                                                   {"wall_seconds", rec.wall_seconds}});
  }
  return rec;
}

// ------------------------------------------------------------ ablate / sweep

struct GridRow {
  std::map<std::string, std::string> point;  // axis name -> value
  Ablation mode = Ablation::none;
  RunRecord run;
};

inline std::vector<std::string> metric_columns(const std::vector<int>& ks) {
  std::vector<std::string> cols;
  for (const int k : ks) {
    cols.push_back("hr@" + std::to_string(k));
    cols.push_back("ndcg@" + std::to_string(k));
  }
  return cols;
}

/// One fit per (mode, seed). Each run writes under out_root/<mode>/seed<k>.
inline std::vector<GridRow> ablate(const TrainConfig& cfg, const data::SequenceDataset& ds,
                                   const std::vector<Ablation>& modes, const std::vector<std::uint64_t>& seeds,
                                   const FitOptions& opts = {}) {
  std::vector<GridRow> rows;
  for (const Ablation mode : modes)
    for (const std::uint64_t seed : seeds) {
      TrainConfig c = cfg;
      c.ablation = mode;
      c.seed = seed;
      FitOptions o = opts;
      if (!opts.out_dir.empty()) o.out_dir = opts.out_dir / to_string(mode) / ("seed" + std::to_string(seed));
      GridRow row;
      row.mode = mode;
      row.point["seed"] = std::to_string(seed);
      row.run = fit(c, ds, o);
      rows.push_back(std::move(row));
    }
  return rows;
}

struct SweepAxis {
  std::string name;  // alpha | beta | k_sample | k_noise | tau | k_aug_ratio
  std::vector<std::string> values;
};

inline std::string sweep_key(const std::string& axis) {
  if (axis == "alpha" || axis == "beta") return "train." + axis;
  if (axis == "k_noise") return "diffusion.k_noise";
  if (axis == "k_sample" || axis == "k_aug_ratio") return "augment." + axis;
  if (axis == "tau") return "contrastive.tau";
  throw ConfigError("sweep: unsupported axis '" + axis + "'");
}

/// Parses "alpha=0.1,0.2;beta=0.1".
inline std::vector<SweepAxis> parse_grid(std::string_view spec) {
  std::vector<SweepAxis> axes;
  for (const auto part : data::detail::split(spec, ';')) {
    const auto p = data::detail::trim(part);
    if (p.empty()) continue;
    const auto eq = p.find('=');
    if (eq == std::string_view::npos) throw ConfigError("sweep grid axis needs name=values: '" + std::string(p) + "'");
    SweepAxis axis{std::string(data::detail::trim(p.substr(0, eq))), {}};
    sweep_key(axis.name);
    for (const auto v : data::detail::split(p.substr(eq + 1), ',')) {
      const auto tv = data::detail::trim(v);
      if (!tv.empty()) axis.values.emplace_back(tv);
    }
    if (axis.values.empty()) throw ConfigError("sweep axis '" + axis.name + "' has no values");
    axes.push_back(std::move(axis));
  }
  if (axes.empty()) throw ConfigError("sweep grid is empty");
  return axes;
}

/// One fit per grid point (cartesian product), all sharing cfg.seed.
inline std::vector<GridRow> sweep(const TrainConfig& cfg, const data::SequenceDataset& ds,
                                  const std::vector<SweepAxis>& axes, const FitOptions& opts = {}) {
  std::vector<GridRow> rows;
  std::vector<std::size_t> idx(axes.size(), 0);
  for (;;) {
    TrainConfig c = cfg;
    GridRow row;
    std::string tag;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const auto& v = axes[a].values[idx[a]];
      apply_override(c, sweep_key(axes[a].name) + "=" + v);
      row.point[axes[a].name] = v;
      tag += (tag.empty() ? "" : "_") + axes[a].name + "-" + v;
    }
    row.point["seed"] = std::to_string(c.seed);
    row.mode = c.ablation;
    FitOptions o = opts;
    if (!opts.out_dir.empty()) o.out_dir = opts.out_dir / tag;
    row.run = fit(c, ds, o);
    rows.push_back(std::move(row));

    std::size_t a = 0;
    while (a < axes.size() && ++idx[a] == axes[a].values.size()) idx[a++] = 0;
    if (a == axes.size()) break;
  }
  return rows;
}

/// CSV with the grid columns, mode, seed, best_epoch and test metrics.
inline void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows,
                           const std::vector<std::string>& axis_names, const std::vector<int>& ks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& a : axis_names) out << a << ',';
  out << "mode,seed,best_epoch";
  for (const auto& c : metric_columns(ks)) out << ',' << c;
  out << '\n' << std::setprecision(17);
  for (const auto& r : rows) {
    for (const auto& a : axis_names) out << r.point.at(a) << ',';
    out << to_string(r.mode) << ',' << r.run.seed << ',' << r.run.best_epoch;
    for (const int k : ks) out << ',' << r.run.test.hr.at(k) << ',' << r.run.test.ndcg.at(k);
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace simdiffrec::train
