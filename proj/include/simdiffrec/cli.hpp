#pragma once

// Command suite: preprocess, train, evaluate, ablate, sweep, augment-preview,
// export-embeddings, export-schedule. run_cli maps errors to exit codes
// 0 ok, 2 config, 3 data, 4 numeric.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "simdiffrec/augment.hpp"
#include "simdiffrec/checkpoint.hpp"
#include "simdiffrec/config.hpp"
#include "simdiffrec/dataio.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/evalmetrics.hpp"
#include "simdiffrec/parallel.hpp"
#include "simdiffrec/trainer.hpp"

namespace simdiffrec::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// Flag overrides layered over the config file, in this order: file, named
/// flags, then --set assignments.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha, beta, k_aug_ratio, tau;
  std::optional<int> k_noise, k_sample, max_len;
  std::optional<std::string> ablation, out, bundle;
  std::vector<std::string> sets;
};

inline TrainConfig resolve_config(const std::string& path, const Overrides& o) {
  TrainConfig c = path.empty() ? TrainConfig{} : load_config(path);
  if (o.seed) c.seed = *o.seed;
  if (o.alpha) c.alpha = *o.alpha;
  if (o.beta) c.beta = *o.beta;
  if (o.k_aug_ratio) c.k_aug_ratio = *o.k_aug_ratio;
  if (o.tau) c.tau = *o.tau;
  if (o.k_noise) c.k_noise = *o.k_noise;
  if (o.k_sample) c.k_sample = *o.k_sample;
  if (o.max_len) c.max_len = *o.max_len;
  if (o.ablation) c.ablation = parse_ablation(*o.ablation);
  if (o.out) c.out_dir = *o.out;
  if (o.bundle) c.bundle = *o.bundle;
  for (const auto& s : o.sets) apply_override(c, s);
  c.validate();
  return c;
}

inline std::vector<int> parse_int_list(std::string_view s, const char* what) {
  std::vector<int> out;
  for (const auto part : data::detail::split(s, ',')) {
    const auto t = data::detail::trim(part);
    if (t.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(std::string(t), &used));
      if (used != t.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": not an integer '" + std::string(t) + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
  return out;
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline data::SequenceDataset require_bundle(const TrainConfig& c) {
  if (c.bundle.empty()) throw ConfigError("no dataset bundle given (data.bundle or --bundle)");
  return data::load_bundle(c.bundle);
}

// ------------------------------------------------------------------ commands

inline nlohmann::json cmd_preprocess(const fs::path& raw, const fs::path& bundle, int min_count,
                                     const std::string& format, std::optional<fs::path> stats_path = std::nullopt) {
  if (min_count < 1) throw ConfigError("min_count must be >= 1");
  const auto fmt = format.empty() ? data::format_from_path(raw) : data::parse_format(format);
  const auto log = data::kcore_filter(data::load_interactions(raw, fmt), min_count);
  const auto ds = data::build_sequences(log);
  data::save_bundle(bundle, ds);
  const auto stats = data::stats_to_json(data::stats(ds));
  write_json_file(stats_path ? *stats_path : fs::path(bundle.string() + ".stats.json"), stats);
  return stats;
}

inline train::RunRecord cmd_train(const TrainConfig& c, int threads, std::ostream* log = nullptr) {
  if (c.out_dir.empty()) throw ConfigError("no output directory given (output.dir or --out)");
  const auto ds = require_bundle(c);
  return train::fit(c, ds, {c.out_dir, threads, log});
}

inline eval::MetricsReport cmd_evaluate(const fs::path& checkpoint, const fs::path& bundle, const std::vector<int>& ks,
                                        const std::string& split, int threads) {
  auto loaded = load_checkpoint(checkpoint);
  const auto ds = data::load_bundle(bundle);
  check_catalog(loaded.model, to_hex(ds.catalog.hash()));
  auto& m = loaded.model;
  m.cfg.ks = ks;
  const auto s = data::split_leave_one_out(ds);
  if (split != "test" && split != "valid") throw ConfigError("split must be test or valid");
  return train::evaluate_model(m, split == "test" ? s.test : s.valid, threads);
}

/// Augments `seqs` with the model's restoration pipeline in batches.
inline augment::AugmentedBatch augment_sequences(const Model& m, const std::vector<std::vector<int>>& seqs,
                                                 nn::Rng& rng, int threads) {
  const auto max_len = static_cast<std::size_t>(m.cfg.max_len);
  const auto bs = static_cast<std::size_t>(m.cfg.batch_size);
  augment::AugmentedBatch all;
  all.max_len = max_len;
  for (std::size_t begin = 0; begin < seqs.size(); begin += bs) {
    const std::size_t end = std::min(seqs.size(), begin + bs);
    std::vector<int> ids;
    for (std::size_t i = begin; i < end; ++i) {
      const auto row = data::left_pad(seqs[i], max_len);
      ids.insert(ids.end(), row.begin(), row.end());
    }
    ag::NoGradGuard no_grad;
    auto part = augment::augment_batch(m.den, m.enc.item_embeddings().value(), m.schedule, ids, end - begin, max_len,
                                       train::augment_config(m.cfg), rng, threads);
    all.rows += part.rows;
    all.positive_ids.insert(all.positive_ids.end(), part.positive_ids.begin(), part.positive_ids.end());
    all.hard_negative_ids.insert(all.hard_negative_ids.end(), part.hard_negative_ids.begin(),
                                 part.hard_negative_ids.end());
    for (auto& p : part.plans) all.plans.push_back(std::move(p));
  }
  return all;
}

namespace detail {
inline std::vector<int> unpad(std::span<const int> row) {
  std::vector<int> out;
  for (const int v : row)
    if (v != data::kPadId) out.push_back(v);
  return out;
}
}  // namespace detail

/// JSONL: a '#' header line, then one plan per training sequence. Positions
/// index the unpadded sequence.
inline std::size_t cmd_augment_preview(const fs::path& checkpoint, const fs::path& bundle, std::size_t n,
                                       const fs::path& out_path, int threads) {
  const auto loaded = load_checkpoint(checkpoint);
  const auto& m = loaded.model;
  const auto ds = data::load_bundle(bundle);
  check_catalog(m, to_hex(ds.catalog.hash()));
  const auto split = data::split_leave_one_out(ds);
  n = std::min(n, split.train.sequences.size());
  std::vector<std::vector<int>> seqs(split.train.sequences.begin(),
                                     split.train.sequences.begin() + static_cast<std::ptrdiff_t>(n));
  nn::Rng rng = make_stream(m.cfg.seed, Stream::augment);
  const auto aug = augment_sequences(m, seqs, rng, threads);

  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw DataError("cannot write " + out_path.string());
  out << "# simdiffrec augment-preview v1 k_sample=" << m.cfg.k_sample << " k_noise=" << m.cfg.k_noise
      << " ablation=" << to_string(m.cfg.ablation) << " catalog=" << m.catalog_hash << '\n';
  const std::size_t L = aug.max_len;
  for (std::size_t r = 0; r < aug.rows; ++r) {
    const auto& plan = aug.plans[r];
    const auto original = data::left_pad(seqs[r], L);
    const std::size_t pad = static_cast<std::size_t>(std::count(original.begin(), original.end(), data::kPadId));
    std::vector<int> positions;
    for (const int p : plan.positions) positions.push_back(p - static_cast<int>(pad));
    nlohmann::json j{
        {"user", r},
        {"original", detail::unpad(original)},
        {"positions", positions},
        {"confidences", plan.confidences},
        {"positive", detail::unpad(std::span<const int>(aug.positive_ids).subspan(r * L, L))},
        {"hard_negative", detail::unpad(std::span<const int>(aug.hard_negative_ids).subspan(r * L, L))},
        {"positive_items", plan.positive_items},
        {"hard_negative_items", plan.hard_negative_items},
    };
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failed: " + out_path.string());
  return aug.rows;
}

/// One CSV row per (training sequence, view).
inline std::size_t cmd_export_embeddings(const fs::path& checkpoint, const fs::path& bundle, const fs::path& out_path,
                                         const std::vector<std::string>& views, int threads) {
  const auto loaded = load_checkpoint(checkpoint);
  const auto& m = loaded.model;
  const auto ds = data::load_bundle(bundle);
  check_catalog(m, to_hex(ds.catalog.hash()));
  for (const auto& v : views)
    if (v != "original" && v != "positive" && v != "hard_negative")
      throw ConfigError("unknown view '" + v + "' (original, positive, hard_negative)");
  const auto split = data::split_leave_one_out(ds);
  const auto& seqs = split.train.sequences;
  const bool need_aug = std::any_of(views.begin(), views.end(), [](const std::string& v) { return v != "original"; });
  augment::AugmentedBatch aug;
  if (need_aug) {
    nn::Rng rng = make_stream(m.cfg.seed, Stream::augment);
    aug = augment_sequences(m, seqs, rng, threads);
  }
  const std::size_t L = static_cast<std::size_t>(m.cfg.max_len);
  std::vector<eval::EmbeddingRow> rows;
  for (std::size_t u = 0; u < seqs.size(); ++u)
    for (const auto& v : views) {
      std::vector<int> seq;
      if (v == "original")
        seq = seqs[u];
      else
        seq = detail::unpad(std::span<const int>(v == "positive" ? aug.positive_ids : aug.hard_negative_ids)
                                .subspan(u * L, L));
      const ag::Matrix rep = encoder::sequence_representation(m.enc, seq);
      rows.push_back({static_cast<int>(u), v, std::vector<double>(rep.data(), rep.data() + rep.size())});
    }
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  eval::write_embeddings_csv(out_path, rows, m.cfg.d);
  return rows.size();
}

inline nlohmann::json cmd_export_schedule(const TrainConfig& c) {
  return diffusion::NoiseSchedule::linear(c.steps, c.beta_start, c.beta_end).to_json();
}

// ------------------------------------------------------------------- parsing

inline void add_overrides(CLI::App* app, Overrides& o, std::string& config) {
  app->add_option("--config", config, "JSON config file");
  app->add_option("--seed", o.seed, "random seed");
  app->add_option("--alpha", o.alpha, "weight of the contrastive loss");
  app->add_option("--beta", o.beta, "weight of the diffusion loss");
  app->add_option("--k-noise", o.k_noise, "similar items averaged into the noise");
  app->add_option("--k-sample", o.k_sample, "rank of the hard-negative substitute");
  app->add_option("--k-aug-ratio", o.k_aug_ratio, "fraction of positions augmented");
  app->add_option("--tau", o.tau, "InfoNCE temperature");
  app->add_option("--ablation", o.ablation, "none | no_k_noise | no_c_aug | no_k_sample");
  app->add_option("--max-len", o.max_len, "maximum sequence length");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--bundle", o.bundle, "dataset bundle (overrides data.bundle)");
  app->add_option("--set", o.sets, "dotted override, e.g. train.epochs=10")->take_all();
}

/// Parses and runs one command. Never throws; returns the exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"simdiffrec: diffusion-augmented contrastive sequential recommendation"};
  app.require_subcommand(1);
  const int threads = thread_budget();

  // preprocess
  std::string raw, bundle_out, format, stats_out;
  int min_count = 5;
  auto* pre = app.add_subcommand("preprocess", "raw interaction log -> dataset bundle");
  pre->add_option("--input", raw, "interaction log (tsv/csv, optionally .gz)")->required();
  pre->add_option("--output", bundle_out, "bundle path")->required();
  pre->add_option("--min-count", min_count, "k-core threshold");
  pre->add_option("--format", format, "tsv | csv (default: from extension)");
  pre->add_option("--stats", stats_out, "stats JSON path (default <bundle>.stats.json)");

  // config-driven commands
  Overrides ov;
  std::string config;
  auto* tr = app.add_subcommand("train", "train one model into a run directory");
  add_overrides(tr, ov, config);

  std::string modes = "none,no_k_noise,no_c_aug,no_k_sample", seeds;
  auto* ab = app.add_subcommand("ablate", "one run per (ablation mode, seed)");
  add_overrides(ab, ov, config);
  ab->add_option("--modes", modes, "comma-separated ablation modes");
  ab->add_option("--seeds", seeds, "comma-separated seeds (default: config seed)");

  std::string grid;
  auto* sw = app.add_subcommand("sweep", "one run per grid point, shared seed");
  add_overrides(sw, ov, config);
  sw->add_option("--grid", grid, "e.g. \"alpha=0.1,0.2;beta=0.1\"")->required();

  auto* sched = app.add_subcommand("export-schedule", "dump the noise schedule as JSON");
  add_overrides(sched, ov, config);

  // checkpoint-driven commands
  std::string checkpoint, bundle, ks = "5,10", split = "test", out_file, views = "original";
  std::size_t n_preview = 10;
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--bundle", bundle)->required();
  ev->add_option("--ks", ks, "comma-separated cutoffs");
  ev->add_option("--split", split, "test | valid");
  ev->add_option("--out", out_file, "metrics JSON path (default: stdout only)");

  auto* ap = app.add_subcommand("augment-preview", "dump augmentation plans as JSONL");
  ap->add_option("--checkpoint", checkpoint)->required();
  ap->add_option("--bundle", bundle)->required();
  ap->add_option("--n", n_preview, "number of training sequences");
  ap->add_option("--out", out_file, "JSONL path")->required();

  auto* ex = app.add_subcommand("export-embeddings", "export sequence representations as CSV");
  ex->add_option("--checkpoint", checkpoint)->required();
  ex->add_option("--bundle", bundle)->required();
  ex->add_option("--out", out_file, "CSV path")->required();
  ex->add_option("--views", views, "comma list of original, positive, hard_negative");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitConfig;
    }

    if (*pre) {
      out << cmd_preprocess(raw, bundle_out, min_count, format,
                            stats_out.empty() ? std::nullopt : std::optional<fs::path>(stats_out))
                 .dump(2)
          << '\n';
    } else if (*tr) {
      const auto c = resolve_config(config, ov);
      const auto rec = cmd_train(c, threads, &err);
      out << train::metrics_json(rec).dump(2) << '\n';
    } else if (*ab) {
      const auto c = resolve_config(config, ov);
      if (c.out_dir.empty()) throw ConfigError("no output directory given (output.dir or --out)");
      std::vector<Ablation> ms;
      for (const auto part : data::detail::split(modes, ','))
        if (!data::detail::trim(part).empty()) ms.push_back(parse_ablation(data::detail::trim(part)));
      std::vector<std::uint64_t> ss;
      if (seeds.empty())
        ss.push_back(c.seed);
      else
        for (const int s : parse_int_list(seeds, "--seeds")) ss.push_back(static_cast<std::uint64_t>(s));
      const auto ds = require_bundle(c);
      const auto rows = train::ablate(c, ds, ms, ss, {c.out_dir, threads, &err});
      train::write_grid_csv(fs::path(c.out_dir) / "ablation.csv", rows, {}, c.ks);
      nlohmann::json summary = nlohmann::json::object();
      for (const Ablation mode : ms) {
        std::vector<eval::MetricsReport> reports;
        for (const auto& r : rows)
          if (r.mode == mode) reports.push_back(r.run.test);
        summary[to_string(mode)] = eval::aggregate_to_json(eval::aggregate_runs(reports));
      }
      write_json_file(fs::path(c.out_dir) / "ablation_summary.json", summary);
      out << summary.dump(2) << '\n';
    } else if (*sw) {
      const auto c = resolve_config(config, ov);
      if (c.out_dir.empty()) throw ConfigError("no output directory given (output.dir or --out)");
      const auto axes = train::parse_grid(grid);
      const auto ds = require_bundle(c);
      const auto rows = train::sweep(c, ds, axes, {c.out_dir, threads, &err});
      std::vector<std::string> names;
      for (const auto& a : axes) names.push_back(a.name);
      train::write_grid_csv(fs::path(c.out_dir) / "sweep.csv", rows, names, c.ks);
      out << "wrote " << rows.size() << " rows to " << (fs::path(c.out_dir) / "sweep.csv").string() << '\n';
    } else if (*sched) {
      const auto c = resolve_config(config, ov);
      const auto j = cmd_export_schedule(c);
      if (ov.out)
        write_json_file(fs::path(*ov.out) / "schedule.json", j);
      else
        out << j.dump(2) << '\n';
    } else if (*ev) {
      const auto report = cmd_evaluate(checkpoint, bundle, parse_int_list(ks, "--ks"), split, threads);
      auto j = eval::report_to_json(report);
      j["split"] = split;
      if (!out_file.empty()) write_json_file(out_file, j);
      out << j.dump(2) << '\n';
    } else if (*ap) {
      const auto n = cmd_augment_preview(checkpoint, bundle, n_preview, out_file, threads);
      out << "wrote " << n << " plans to " << out_file << '\n';
    } else if (*ex) {
      std::vector<std::string> vs;
      for (const auto part : data::detail::split(views, ','))
        if (!data::detail::trim(part).empty()) vs.emplace_back(data::detail::trim(part));
      const auto n = cmd_export_embeddings(checkpoint, bundle, out_file, vs, threads);
      out << "wrote " << n << " rows to " << out_file << '\n';
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace simdiffrec::cli
