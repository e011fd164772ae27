// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "simdiffrec/cli.hpp"
#include "support/fixtures.hpp"
#include "support/grad_audit.hpp"

using namespace simdiffrec;
namespace fs = std::filesystem;
using ag::Matrix;

namespace {

// Tolerances and budgets.
constexpr double kForwardTol = 1e-5;
constexpr double kForwardBudget = 5.0;
constexpr int kForwardCases = 100;
constexpr int kMetricCases = 1000;
constexpr double kMetricBudget = 5.0;
constexpr double kGradTol = 1e-5;
constexpr double kGradBudget = 60.0;
constexpr double kIdentityBudget = 120.0;
constexpr int kPlanCases = 100;
constexpr double kOverfitHr = 0.95;
constexpr double kOverfitBudget = 300.0;
constexpr int kOverfitMaxEpochs = 200;
constexpr int kAblationInteractions = 5000;
constexpr int kAblationSeeds = 5;
constexpr int kUniformUsers = 10000;
constexpr int kUniformItems = 100;
constexpr double kUniformTol = 0.01;

struct Verdict {
  bool pass = false;
  std::string detail;
  std::vector<std::string> warnings;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::current_path() / "acceptance_work";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

fs::path source_path(const std::string& rel) { return fs::path(SIMDIFFREC_SOURCE_DIR) / rel; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

Matrix randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(gen);
  return m;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "simdiffrec");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

/// Cyclic toy log written as a raw review file, so it goes through preprocess.
fs::path toy_bundle() {
  static const fs::path bundle = [] {
    const auto ds = fixtures::cyclic_dataset(50, 20, 12);
    const auto raw = work_dir() / "toy.tsv";
    std::ofstream out(raw);
    out << "user_id\titem_id\ttimestamp\n";
    for (std::size_t u = 0; u < ds.sequences.size(); ++u)
      for (std::size_t t = 0; t < ds.sequences[u].size(); ++t)
        out << "u" << u << "\ti" << ds.sequences[u][t] << '\t' << 1000 * u + t << '\n';
    out.close();
    const auto b = work_dir() / "toy.bundle.json";
    if (cli({"preprocess", "--input", raw.string(), "--output", b.string(), "--min-count", "1"}) != 0)
      throw std::runtime_error("toy preprocess failed");
    return b;
  }();
  return bundle;
}

TrainConfig toy_config() {
  auto c = load_config(source_path("configs/toy.json"));
  c.bundle = toy_bundle().string();
  return c;
}

// ---------------------------------------------------------------- criteria

Verdict forward_algebra() {
  std::mt19937_64 gen(20240);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < kForwardCases; ++trial) {
    const int T = std::uniform_int_distribution<int>(1, 1000)(gen);
    std::vector<double> a, b;
    if (trial % 2 == 0) {
      const auto lin = diffusion::NoiseSchedule::linear(T, 1e-4 * (1 + u(gen)), 0.05 + 0.3 * u(gen));
      for (int t = 1; t <= T; ++t) {
        a.push_back(lin.alpha(t));
        b.push_back(lin.beta(t));
      }
    } else {
      for (int t = 0; t < T; ++t) {
        b.push_back(0.3 * u(gen));
        a.push_back(1.0 - 0.3 * u(gen));
      }
    }
    const diffusion::NoiseSchedule s(a, b);
    const auto rows = std::uniform_int_distribution<int>(1, 8)(gen);
    const auto cols = std::uniform_int_distribution<int>(1, 16)(gen);
    const Matrix z0 = randn(rows, cols, gen);
    const Matrix noise = randn(rows, cols, gen, 0.5);
    const int t = std::uniform_int_distribution<int>(0, T)(gen);
    Matrix z = z0;
    for (int k = 1; k <= t; ++k) z = diffusion::forward_step(z, noise, s.alpha(k), s.beta(k));
    worst = std::max(worst, (z - diffusion::forward_closed(z0, noise, t, s)).cwiseAbs().maxCoeff());
  }
  return {worst <= kForwardTol, std::to_string(kForwardCases) + " cases, max abs err " + fmt(worst, 3)};
}

Verdict metric_oracles() {
  std::mt19937_64 gen(77);
  int rank_mismatch = 0, metric_mismatch = 0, invariant_fail = 0;
  for (int trial = 0; trial < kMetricCases; ++trial) {
    const int n_items = std::uniform_int_distribution<int>(1, 60)(gen);
    const int n_users = std::uniform_int_distribution<int>(1, 20)(gen);
    // integer logits force ties
    std::uniform_int_distribution<int> val(-4, 4);
    std::vector<data::EvalCase> cases;
    Matrix logits(n_users, n_items + 1);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = val(gen);
    for (int u = 0; u < n_users; ++u) cases.push_back({u, {1}, std::uniform_int_distribution<int>(1, n_items)(gen)});

    std::vector<int> brute;
    for (int u = 0; u < n_users; ++u) {
      const int target = cases[static_cast<std::size_t>(u)].target;
      int greater = 0;
      for (int j = 1; j <= n_items; ++j) greater += logits(u, j) > logits(u, target);
      brute.push_back(greater + 1);
    }
    const std::vector<int> ks{1, 5, 10, 20};
    eval::EvalOptions opt;
    opt.ks = ks;
    opt.batch_size = 7;
    std::size_t cursor = 0;
    const auto scorer = [&](std::span<const std::vector<int>> prefixes) {
      Matrix m = logits.middleRows(static_cast<Eigen::Index>(cursor), static_cast<Eigen::Index>(prefixes.size()));
      cursor += prefixes.size();
      return m;
    };
    eval::MetricsReport r;
    try {
      r = eval::evaluate(scorer, cases, opt);
    } catch (const NumericError&) {
      ++invariant_fail;
      continue;
    }
    for (int u = 0; u < n_users; ++u) rank_mismatch += r.per_user_rank.at(u) != brute[static_cast<std::size_t>(u)];
    double prev = 0.0;
    for (const int k : ks) {
      int hits = 0;
      double gain = 0.0;
      for (const int rk : brute) {
        hits += rk <= k;
        if (rk <= k) gain += 1.0 / std::log2(rk + 1.0);
      }
      metric_mismatch += r.hr.at(k) != static_cast<double>(hits) / n_users;
      metric_mismatch += r.ndcg.at(k) != gain / n_users;
      invariant_fail += r.ndcg.at(k) > r.hr.at(k) || r.hr.at(k) < prev;
      prev = r.hr.at(k);
    }
  }
  return {rank_mismatch == 0 && metric_mismatch == 0 && invariant_fail == 0,
          std::to_string(kMetricCases) + " cases, rank mismatches " + std::to_string(rank_mismatch) +
              ", metric mismatches " + std::to_string(metric_mismatch) + ", invariant failures " +
              std::to_string(invariant_fail)};
}

Verdict gradient_audits() {
  Verdict v{true, ""};
  for (const auto& audit : {grad_audit::audit_sr, grad_audit::audit_d, grad_audit::audit_cl}) {
    const auto r = audit();
    v.pass = v.pass && r.max_rel < kGradTol && r.checked > 0;
    if (!v.detail.empty()) v.detail += ", ";
    v.detail += r.loss + " max rel " + fmt(r.max_rel, 2) + " over " + std::to_string(r.checked);
  }
  return v;
}

Verdict degenerate_weights() {
  const auto ds = data::load_bundle(toy_bundle());
  auto zero = toy_config();
  zero.alpha = 0.0;
  zero.beta = 0.0;
  auto sr = toy_config();
  sr.sr_only = true;
  const auto a = train::fit(zero, ds);
  const auto b = train::fit(sr, ds);
  bool same = a.epochs.size() == b.epochs.size() && !a.epochs.empty();
  for (std::size_t i = 0; same && i < a.epochs.size(); ++i)
    same = a.epochs[i].sr == b.epochs[i].sr && a.epochs[i].total == b.epochs[i].total &&
           a.epochs[i].valid->per_user_rank == b.epochs[i].valid->per_user_rank;
  same = same && a.best_epoch == b.best_epoch && a.test.per_user_rank == b.test.per_user_rank;
  return {same, std::to_string(a.epochs.size()) + " epochs, L_sr/L_total curves and ranks " +
                    (same ? "bit-identical" : "differ")};
}

Verdict k_sample_one() {
  std::mt19937_64 gen(515);
  int mismatched = 0, substituted = 0;
  for (int trial = 0; trial < kPlanCases; ++trial) {
    const int n_items = std::uniform_int_distribution<int>(3, 30)(gen);
    const auto rows = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, 4)(gen));
    const auto len = static_cast<std::size_t>(std::uniform_int_distribution<int>(2, 10)(gen));
    diffusion::DenoiserConfig dc;
    dc.d = 8;
    dc.init_std = 0.3;
    nn::Rng init(gen());
    const diffusion::Denoiser den(dc, init);
    Matrix W = randn(n_items + 1, 8, gen, 0.5);
    W.row(0).setZero();
    std::vector<int> ids(rows * len, data::kPadId);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto n = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, static_cast<int>(len))(gen));
      for (std::size_t t = len - n; t < len; ++t) ids[r * len + t] = std::uniform_int_distribution<int>(1, n_items)(gen);
    }
    augment::AugmentConfig cfg;
    cfg.k_noise = std::min(3, n_items - 1);
    cfg.k_sample = 1;
    cfg.k_aug_ratio = 0.5;
    cfg.stride = 25;
    cfg.random_positions = trial % 4 == 3;
    nn::Rng rng(gen());
    const auto out = augment::augment_batch(den, W, diffusion::NoiseSchedule::linear(100), ids, rows, len, cfg, rng);
    mismatched += out.positive_ids != out.hard_negative_ids;
    for (const auto& plan : out.plans) mismatched += plan.positive_items != plan.hard_negative_items;
    for (std::size_t i = 0; i < ids.size(); ++i) substituted += out.positive_ids[i] != ids[i];
  }
  return {mismatched == 0, std::to_string(kPlanCases) + " random batches, " + std::to_string(mismatched) +
                               " mismatches, " + std::to_string(substituted) + " substituted items"};
}

Verdict overfit() {
  auto c = toy_config();
  const auto dir = work_dir() / "overfit";
  fs::remove_all(dir);
  const int code = cli({"train", "--config", source_path("configs/toy.json").string(), "--bundle",
                        toy_bundle().string(), "--out", dir.string()});
  if (code != 0) return {false, "train exited with " + std::to_string(code)};
  const auto m = nlohmann::json::parse(fixtures::read_file(dir / "metrics.json"));
  const double hr = m.at("valid").at("hr").at("10").get<double>();
  const int best = m.at("best_epoch").get<int>();
  return {hr >= kOverfitHr && c.epochs <= kOverfitMaxEpochs,
          "validation HR@10 " + fmt(hr) + " (NDCG@10 " + fmt(m.at("valid").at("ndcg").at("10").get<double>()) +
              ") at epoch " + std::to_string(best)};
}

Verdict determinism() {
  const auto a = work_dir() / "det_a", b = work_dir() / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  for (const auto& dir : {a, b}) {
    const int code = cli({"train", "--config", source_path("configs/toy.json").string(), "--bundle",
                          toy_bundle().string(), "--out", dir.string(), "--alpha", "0.3", "--beta", "0.2", "--set",
                          "train.epochs=8"});
    if (code != 0) return {false, "train exited with " + std::to_string(code)};
  }
  const bool losses = fixtures::read_file(a / "losses.csv") == fixtures::read_file(b / "losses.csv");
  const bool metrics = fixtures::read_file(a / "metrics.json") == fixtures::read_file(b / "metrics.json");
  return {losses && metrics, std::string("losses.csv ") + (losses ? "identical" : "differs") + ", metrics.json " +
                                 (metrics ? "identical" : "differs")};
}

Verdict ablation_direction() {
  const auto raw = work_dir() / "beauty_like.tsv";
  const auto bundle = work_dir() / "beauty_like.bundle.json";
  fixtures::write_beauty_like_tsv(raw, kAblationInteractions, 2024);
  if (cli({"preprocess", "--input", raw.string(), "--output", bundle.string(), "--min-count", "5"}) != 0)
    return {false, "preprocess failed"};
  const auto dir = work_dir() / "ablation";
  fs::remove_all(dir);
  std::string seeds;
  for (int s = 1; s <= kAblationSeeds; ++s) seeds += (s > 1 ? "," : "") + std::to_string(s);
  const int code = cli({"ablate", "--config", source_path("configs/desk_ablation.json").string(), "--bundle",
                        bundle.string(), "--out", dir.string(), "--modes", "none,no_k_noise,no_c_aug,no_k_sample",
                        "--seeds", seeds});
  if (code != 0) return {false, "ablate exited with " + std::to_string(code)};
  const auto summary = nlohmann::json::parse(fixtures::read_file(dir / "ablation_summary.json"));
  const auto mean = [&](const char* mode) { return summary.at(mode).at("hr").at("10").at("mean").get<double>(); };
  Verdict v{true, "mean test HR@10 over " + std::to_string(kAblationSeeds) + " seeds: none " + fmt(mean("none"))};
  for (const char* mode : {"no_k_noise", "no_c_aug", "no_k_sample"}) {
    v.detail += std::string(", ") + mode + " " + fmt(mean(mode));
    if (mean("none") < mean(mode))
      v.warnings.push_back(std::string("full model below ") + mode + " (" + fmt(mean("none")) + " < " +
                           fmt(mean(mode)) + ")");
  }
  return v;
}

Verdict full_scale_declaration() {
  std::vector<std::string> missing;
  const auto readme = fixtures::read_file(source_path("README.md"));
  for (const char* needle : {"configs/full_scale_beauty.json", "configs/full_scale_ml1m.json", "not reproducible"})
    if (readme.find(needle) == std::string::npos) missing.push_back(std::string("README lacks '") + needle + "'");
  const auto check = [&](const char* file, int max_len) {
    try {
      const auto c = load_config(source_path(file));
      const bool ok = c.n_layers == 2 && c.n_heads == 2 && c.den_layers == 1 && c.den_heads == 2 && c.steps == 1000 &&
                      c.batch_size == 256 && c.lr == 1e-3 && c.max_len == max_len;
      if (!ok) missing.push_back(std::string(file) + " deviates from the published setup");
    } catch (const std::exception& e) {
      missing.push_back(e.what());
    }
  };
  check("configs/full_scale_beauty.json", 50);
  check("configs/full_scale_ml1m.json", 200);
  std::string detail = "full-scale configs and commands documented; criteria 1-8 stand in for the benchmark tables";
  if (!missing.empty()) {
    detail.clear();
    for (const auto& m : missing) detail += (detail.empty() ? "" : "; ") + m;
  }
  return {missing.empty(), detail};
}

Verdict uniform_scorer() {
  std::vector<data::EvalCase> cases;
  std::mt19937_64 gen(99);
  for (int u = 0; u < kUniformUsers; ++u)
    cases.push_back({u, {std::uniform_int_distribution<int>(1, kUniformItems)(gen)},
                     std::uniform_int_distribution<int>(1, kUniformItems)(gen)});
  std::mt19937_64 noise(100);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const auto scorer = [&](std::span<const std::vector<int>> prefixes) {
    Matrix m(static_cast<Eigen::Index>(prefixes.size()), kUniformItems + 1);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u01(noise);
    return m;
  };
  const auto r = eval::evaluate(scorer, cases, {});
  const double hr = r.hr.at(10);
  return {std::abs(hr - 0.1) <= kUniformTol, "HR@10 " + fmt(hr) + " over " + std::to_string(kUniformUsers) +
                                                 " users, |V|=" + std::to_string(kUniformItems)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> run;
  double budget;  // seconds, 0 = none
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "forward-process closed form", forward_algebra, kForwardBudget},
      {2, "metric oracles", metric_oracles, kMetricBudget},
      {3, "gradient audits", gradient_audits, kGradBudget},
      {4, "degenerate-weight identity", degenerate_weights, kIdentityBudget},
      {5, "k_sample=1 identity", k_sample_one, 0.0},
      {6, "overfit smoke", overfit, kOverfitBudget},
      {7, "determinism", determinism, 0.0},
      {8, "ablation direction (soft)", ablation_direction, 0.0},
      {9, "full-scale declaration", full_scale_declaration, 0.0},
      {10, "uniform-scorer calibration", uniform_scorer, 0.0},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget > 0.0 && s > c.budget) {
      v.pass = false;
      v.detail += "; over the " + fmt(c.budget) + " s budget";
    }
    for (const auto& w : v.warnings) std::cout << "WARN criterion " << c.id << ": " << w << '\n';
    std::printf("%s criterion %d (%s): %s [%.2f s]\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(), s);
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
