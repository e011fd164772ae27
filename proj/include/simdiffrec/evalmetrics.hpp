#pragma once

// Leave-one-out ranking metrics: full-catalog rank of the held-out item,
// HR@k, NDCG@k, multi-run aggregation and embedding export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "simdiffrec/dataio.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/parallel.hpp"

namespace simdiffrec::eval {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 1 + number of items scoring strictly higher than the target. The pad
/// column never counts.
inline int rank_of_target(std::span<const double> logits, int target) {
  if (target == data::kPadId) throw std::invalid_argument("rank_of_target: target is pad");
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
    throw std::out_of_range("rank_of_target: target outside catalog");
  const double t = logits[static_cast<std::size_t>(target)];
  int greater = 0;
  for (std::size_t j = 1; j < logits.size(); ++j)
    if (logits[j] > t) ++greater;
  return greater + 1;
}

inline double hr_at_k(std::span<const int> ranks, int k) {
  if (k < 1) throw std::invalid_argument("hr_at_k: k must be >= 1");
  if (ranks.empty()) return 0.0;
  std::size_t hits = 0;
  for (const int r : ranks) {
    if (r < 1) throw std::invalid_argument("hr_at_k: ranks must be >= 1");
    if (r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

inline double ndcg_at_k(std::span<const int> ranks, int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  if (ranks.empty()) return 0.0;
  double total = 0.0;
  for (const int r : ranks) {
    if (r < 1) throw std::invalid_argument("ndcg_at_k: ranks must be >= 1");
    if (r <= k) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  }
  return total / static_cast<double>(ranks.size());
}

struct MetricsReport {
  std::vector<int> ks;
  std::map<int, double> hr;
  std::map<int, double> ndcg;
  std::map<int, int> per_user_rank;
  std::size_t n_users = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

/// NDCG@k <= HR@k and HR nondecreasing in k.
inline void check_report(const MetricsReport& r) {
  double prev_hr = -1.0;
  for (const int k : r.ks) {
    if (r.ndcg.at(k) > r.hr.at(k) + 1e-15) throw NumericError("metrics: NDCG@" + std::to_string(k) + " > HR");
    if (r.hr.at(k) + 1e-15 < prev_hr) throw NumericError("metrics: HR not monotone in k");
    prev_hr = r.hr.at(k);
  }
}

inline MetricsReport report_from_ranks(const std::vector<int>& users, const std::vector<int>& ranks,
                                       std::vector<int> ks) {
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  MetricsReport r;
  r.ks = ks;
  r.n_users = ranks.size();
  for (std::size_t i = 0; i < users.size(); ++i) r.per_user_rank[users[i]] = ranks[i];
  for (const int k : ks) {
    r.hr[k] = hr_at_k(ranks, k);
    r.ndcg[k] = ndcg_at_k(ranks, k);
  }
  check_report(r);
  return r;
}

struct EvalOptions {
  std::vector<int> ks{5, 10};
  bool filter_history = false;  // mask the prefix's items (except the target)
  std::size_t batch_size = 256;
  int threads = 1;
};

/// Ranks every case's target against the full catalog. `scorer` maps a span
/// of prefixes to a (n x (n_items + 1)) logit matrix.
template <class Scorer>
MetricsReport evaluate(Scorer&& scorer, std::span<const data::EvalCase> cases, const EvalOptions& opt) {
  std::vector<int> ranks(cases.size());
  std::vector<int> users(cases.size());
  const std::size_t n_batches = (cases.size() + opt.batch_size - 1) / opt.batch_size;
  parallel_chunks(n_batches, opt.threads, [&](std::size_t b_begin, std::size_t b_end) {
    for (std::size_t b = b_begin; b < b_end; ++b) {
      const std::size_t begin = b * opt.batch_size;
      const std::size_t end = std::min(cases.size(), begin + opt.batch_size);
      std::vector<std::vector<int>> prefixes;
      for (std::size_t i = begin; i < end; ++i) prefixes.push_back(cases[i].prefix);
      Matrix logits = scorer(std::span<const std::vector<int>>(prefixes));
      for (std::size_t i = begin; i < end; ++i) {
        auto row = logits.row(static_cast<Eigen::Index>(i - begin));
        if (opt.filter_history)
          for (const int v : cases[i].prefix)
            if (v != cases[i].target) row(v) = -std::numeric_limits<double>::infinity();
        ranks[i] = rank_of_target(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                                  cases[i].target);
        users[i] = cases[i].user;
      }
    }
  });
  return report_from_ranks(users, ranks, opt.ks);
}

struct AggregateEntry {
  double mean = 0.0;
  double std = 0.0;
};

struct Aggregate {
  std::vector<int> ks;
  std::map<int, AggregateEntry> hr;
  std::map<int, AggregateEntry> ndcg;
  std::size_t n_runs = 0;
};

/// Mean and sample standard deviation (n - 1) per metric.
inline Aggregate aggregate_runs(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate_runs: no reports");
  Aggregate out;
  out.ks = reports.front().ks;
  out.n_runs = reports.size();
  for (const auto& r : reports)
    if (r.ks != out.ks) throw std::invalid_argument("aggregate_runs: mismatched ks");
  const auto summarize = [&](auto metric) {
    std::map<int, AggregateEntry> res;
    for (const int k : out.ks) {
      double sum = 0.0;
      for (const auto& r : reports) sum += metric(r).at(k);
      const double mean = sum / static_cast<double>(reports.size());
      double ss = 0.0;
      for (const auto& r : reports) ss += (metric(r).at(k) - mean) * (metric(r).at(k) - mean);
      const double sd = reports.size() > 1 ? std::sqrt(ss / static_cast<double>(reports.size() - 1)) : 0.0;
      res[k] = {mean, sd};
    }
    return res;
  };
  out.hr = summarize([](const MetricsReport& r) -> const std::map<int, double>& { return r.hr; });
  out.ndcg = summarize([](const MetricsReport& r) -> const std::map<int, double>& { return r.ndcg; });
  return out;
}

inline constexpr int kMetricsSchemaVersion = 1;

/// `metrics.json` body: {schema_version, ks, hr, ndcg, n_users, seed, config_hash}.
inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json hr = nlohmann::json::object();
  nlohmann::json ndcg = nlohmann::json::object();
  for (const int k : r.ks) {
    hr[std::to_string(k)] = r.hr.at(k);
    ndcg[std::to_string(k)] = r.ndcg.at(k);
  }
  return {{"schema_version", kMetricsSchemaVersion},
          {"ks", r.ks},
          {"hr", hr},
          {"ndcg", ndcg},
          {"n_users", r.n_users},
          {"seed", r.seed},
          {"config_hash", r.config_hash}};
}

inline nlohmann::json aggregate_to_json(const Aggregate& a) {
  nlohmann::json out{{"ks", a.ks}, {"n_runs", a.n_runs}};
  for (const int k : a.ks) {
    out["hr"][std::to_string(k)] = {{"mean", a.hr.at(k).mean}, {"std", a.hr.at(k).std}};
    out["ndcg"][std::to_string(k)] = {{"mean", a.ndcg.at(k).mean}, {"std", a.ndcg.at(k).std}};
  }
  return out;
}

// ------------------------------------------------------------ embedding export

struct EmbeddingRow {
  int user = 0;
  std::string tag;  // original | positive | hard_negative
  std::vector<double> values;
};

/// Headered CSV: user,tag,e0..e{d-1}. Values use round-trip precision so
/// files are byte-stable for identical inputs.
inline void write_embeddings_csv(const std::filesystem::path& path, std::span<const EmbeddingRow> rows, int d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "user,tag";
  for (int i = 0; i < d; ++i) out << ",e" << i;
  out << '\n';
  out << std::setprecision(17);
  for (const auto& r : rows) {
    if (static_cast<int>(r.values.size()) != d) throw std::invalid_argument("write_embeddings_csv: width mismatch");
    out << r.user << ',' << r.tag;
    for (const double v : r.values) out << ',' << v;
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace simdiffrec::eval
