#pragma once

// Interaction-log ingestion, k-core filtering, per-user sequences,
// leave-one-out splits and padded training batches.

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/hash.hpp"

namespace simdiffrec::data {

inline constexpr int kPadId = 0;

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
};

struct InteractionLog {
  std::vector<Interaction> records;
};

enum class LogFormat { tsv, csv };

inline LogFormat parse_format(std::string_view name) {
  if (name == "tsv") return LogFormat::tsv;
  if (name == "csv") return LogFormat::csv;
  throw ConfigError("unknown input format '" + std::string(name) + "' (expected tsv or csv)");
}

/// Guesses the format from the file name, ignoring a trailing ".gz".
inline LogFormat format_from_path(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  if (p.extension() == ".gz") p = p.stem();
  return p.extension() == ".csv" ? LogFormat::csv : LogFormat::tsv;
}

namespace detail {

// Reads plain or gzip-compressed text line by line; zlib passes
// uncompressed input through unchanged.
class LineReader {
 public:
  explicit LineReader(const std::filesystem::path& path) : file_(gzopen(path.string().c_str(), "rb")) {
    if (file_ == nullptr) throw DataError("cannot open " + path.string());
  }
  ~LineReader() {
    if (file_ != nullptr) gzclose(file_);
  }
  LineReader(const LineReader&) = delete;
  LineReader& operator=(const LineReader&) = delete;

  bool next(std::string& line) {
    line.clear();
    char buf[4096];
    bool got = false;
    while (gzgets(file_, buf, sizeof buf) != nullptr) {
      got = true;
      line.append(buf);
      if (!line.empty() && line.back() == '\n') break;
    }
    if (!got) return false;
    while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.pop_back();
    return true;
  }

 private:
  gzFile file_;
};

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '"')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Parses a headered `user item timestamp` log. Columns are located by header
/// name when present (so extra columns such as ratings are tolerated) and
/// positionally otherwise.
inline InteractionLog load_interactions(const std::filesystem::path& path, LogFormat format) {
  if (!std::filesystem::exists(path)) throw DataError("input file not found: " + path.string());
  detail::LineReader reader(path);
  const char sep = format == LogFormat::csv ? ',' : '\t';

  InteractionLog log;
  std::string line;
  if (!reader.next(line)) return log;

  std::size_t user_col = 0, item_col = 1, time_col = 2;
  {
    const auto header = detail::split(line, sep);
    for (std::size_t i = 0; i < header.size(); ++i) {
      const auto name = detail::trim(header[i]);
      if (name == "user" || name == "user_id") user_col = i;
      if (name == "item" || name == "item_id") item_col = i;
      if (name == "timestamp" || name == "time") time_col = i;
    }
  }
  const std::size_t needed = std::max({user_col, item_col, time_col}) + 1;

  std::size_t line_no = 1;
  while (reader.next(line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split(line, sep);
    if (fields.size() < needed)
      throw DataError(path.string() + ": line " + std::to_string(line_no) + ": expected " +
                      std::to_string(needed) + " columns, found " + std::to_string(fields.size()));
    Interaction rec;
    rec.user = std::string(detail::trim(fields[user_col]));
    rec.item = std::string(detail::trim(fields[item_col]));
    if (rec.user.empty() || rec.item.empty())
      throw DataError(path.string() + ": line " + std::to_string(line_no) + ": empty user or item key");
    const auto ts = detail::trim(fields[time_col]);
    const auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), rec.timestamp);
    if (ec != std::errc() || ptr != ts.data() + ts.size() || ts.empty())
      throw DataError(path.string() + ": line " + std::to_string(line_no) + ": non-integer timestamp '" +
                      std::string(ts) + "'");
    log.records.push_back(std::move(rec));
  }
  return log;
}

/// Iterated k-core: removes users and items with fewer than `min_count`
/// interactions until no such user or item remains. Record order is kept.
inline InteractionLog kcore_filter(const InteractionLog& log, int min_count = 5) {
  if (min_count < 1) throw ConfigError("kcore_filter: min_count must be >= 1");
  std::vector<const Interaction*> current;
  current.reserve(log.records.size());
  for (const auto& r : log.records) current.push_back(&r);

  while (true) {
    std::unordered_map<std::string_view, int> user_count, item_count;
    for (const auto* r : current) {
      ++user_count[r->user];
      ++item_count[r->item];
    }
    std::vector<const Interaction*> kept;
    kept.reserve(current.size());
    for (const auto* r : current)
      if (user_count[r->user] >= min_count && item_count[r->item] >= min_count) kept.push_back(r);
    if (kept.size() == current.size()) break;
    current = std::move(kept);
  }
  InteractionLog out;
  out.records.reserve(current.size());
  for (const auto* r : current) out.records.push_back(*r);
  return out;
}

/// Bijective key <-> id maps. Item ids are 1..n_items; id 0 is padding.
struct Catalog {
  std::vector<std::string> user_keys;  // user id -> key
  std::vector<std::string> item_keys;  // item id -> key; item_keys[0] is the pad placeholder
  std::unordered_map<std::string, int> user_index;
  std::unordered_map<std::string, int> item_index;

  int n_users() const { return static_cast<int>(user_keys.size()); }
  int n_items() const { return static_cast<int>(item_keys.size()) - 1; }

  int add_user(const std::string& key) {
    auto [it, inserted] = user_index.emplace(key, n_users());
    if (inserted) user_keys.push_back(key);
    return it->second;
  }
  int add_item(const std::string& key) {
    if (item_keys.empty()) item_keys.emplace_back();
    auto [it, inserted] = item_index.emplace(key, static_cast<int>(item_keys.size()));
    if (inserted) item_keys.push_back(key);
    return it->second;
  }

  /// Fingerprint of the item id space; checkpoints refuse mismatched bundles.
  std::uint64_t hash() const {
    Fnv1a h;
    const auto n = static_cast<std::uint64_t>(n_items());
    h.update_value(n);
    for (std::size_t i = 1; i < item_keys.size(); ++i) {
      h.update(item_keys[i]);
      h.update("\x1f", 1);
    }
    return h.digest();
  }
};

struct SequenceDataset {
  std::vector<std::vector<int>> sequences;  // indexed by user id
  Catalog catalog;

  int n_users() const { return static_cast<int>(sequences.size()); }
  int n_items() const { return catalog.n_items(); }
};

inline constexpr std::size_t kMinSequenceLength = 3;

/// Groups records per user, sorts each user's events by timestamp (ties keep
/// input order) and drops users with fewer than three events. Ids are assigned
/// in order of first appearance among the surviving records.
inline SequenceDataset build_sequences(const InteractionLog& log) {
  std::unordered_map<std::string_view, std::vector<std::size_t>> per_user;
  std::vector<std::string_view> user_order;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    auto [it, inserted] = per_user.try_emplace(log.records[i].user);
    if (inserted) user_order.push_back(log.records[i].user);
    it->second.push_back(i);
  }

  SequenceDataset ds;
  ds.catalog.item_keys.emplace_back();
  for (const auto user : user_order) {
    auto& idx = per_user[user];
    if (idx.size() < kMinSequenceLength) continue;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return log.records[a].timestamp < log.records[b].timestamp;
    });
    const int uid = ds.catalog.add_user(std::string(user));
    if (uid >= static_cast<int>(ds.sequences.size())) ds.sequences.resize(static_cast<std::size_t>(uid) + 1);
    auto& seq = ds.sequences[static_cast<std::size_t>(uid)];
    for (const auto i : idx) seq.push_back(ds.catalog.add_item(log.records[i].item));
  }
  return ds;
}

struct EvalCase {
  int user = 0;
  std::vector<int> prefix;
  int target = kPadId;
};

struct LeaveOneOutSplit {
  SequenceDataset train;
  std::vector<EvalCase> valid;
  std::vector<EvalCase> test;
};

/// Last item -> test target, second-to-last -> validation target, the rest
/// is the training sequence.
inline LeaveOneOutSplit split_leave_one_out(const SequenceDataset& ds) {
  LeaveOneOutSplit split;
  split.train.catalog = ds.catalog;
  split.train.sequences.resize(ds.sequences.size());
  for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
    const auto& s = ds.sequences[u];
    if (s.size() < kMinSequenceLength)
      throw DataError("split_leave_one_out: user " + std::to_string(u) + " has fewer than 3 items");
    const int uid = static_cast<int>(u);
    split.train.sequences[u].assign(s.begin(), s.end() - 2);
    split.valid.push_back({uid, std::vector<int>(s.begin(), s.end() - 2), s[s.size() - 2]});
    split.test.push_back({uid, std::vector<int>(s.begin(), s.end() - 1), s.back()});
  }
  return split;
}

/// Keeps the most recent `max_len` items, left-padding shorter sequences.
inline std::vector<int> left_pad(std::span<const int> seq, std::size_t max_len) {
  std::vector<int> row(max_len, kPadId);
  const std::size_t n = std::min(seq.size(), max_len);
  std::copy(seq.end() - static_cast<std::ptrdiff_t>(n), seq.end(), row.end() - static_cast<std::ptrdiff_t>(n));
  return row;
}

/// First column holding a real item in any row; max_len - 1 if none do.
inline std::size_t first_active_column(std::span<const int> item_ids, std::size_t rows, std::size_t max_len) {
  std::size_t first = max_len - 1;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < first; ++t)
      if (item_ids[r * max_len + t] != kPadId) {
        first = t;
        break;
      }
  return first;
}

/// Shifted next-item batch: for a sequence s, the input row is s[0..n-2] and
/// the target row is s[1..n-1], both left padded to max_len. The final column
/// is therefore always supervised.
struct Batch {
  std::size_t rows = 0;
  std::size_t max_len = 0;
  std::vector<int> item_ids;             // rows x max_len
  std::vector<int> targets;              // rows x max_len; pad where the input is pad
  std::vector<std::uint8_t> padding_mask;  // 1 where item_ids is pad
  std::vector<int> user_ids;

  int item(std::size_t r, std::size_t t) const { return item_ids[r * max_len + t]; }
  int target(std::size_t r, std::size_t t) const { return targets[r * max_len + t]; }
  std::span<const int> row(std::size_t r) const { return {item_ids.data() + r * max_len, max_len}; }
};

inline Batch make_batch(std::span<const std::vector<int>> rows, std::span<const int> users, std::size_t max_len) {
  Batch b;
  b.rows = rows.size();
  b.max_len = max_len;
  b.item_ids.reserve(rows.size() * max_len);
  b.targets.reserve(rows.size() * max_len);
  for (const auto& seq : rows) {
    if (seq.size() < 2) throw std::invalid_argument("make_batch: sequences need at least two items");
    const std::span<const int> s(seq);
    const auto input = left_pad(s.first(s.size() - 1), max_len);
    const auto target = left_pad(s.subspan(1), max_len);
    b.item_ids.insert(b.item_ids.end(), input.begin(), input.end());
    b.targets.insert(b.targets.end(), target.begin(), target.end());
  }
  b.padding_mask.resize(b.item_ids.size());
  for (std::size_t i = 0; i < b.item_ids.size(); ++i) b.padding_mask[i] = b.item_ids[i] == kPadId ? 1 : 0;
  b.user_ids.assign(users.begin(), users.end());
  return b;
}

/// Emits batches over every user with at least two items (shorter sequences
/// hold no transition). With a seed, users are visited in a deterministic
/// pseudo-random order; without one, by user id.
class BatchStream {
 public:
  BatchStream(const SequenceDataset& ds, std::size_t max_len, std::size_t batch_size,
              std::optional<std::uint64_t> shuffle_seed)
      : ds_(&ds), max_len_(max_len), batch_size_(batch_size) {
    if (max_len < 2) throw ConfigError("make_batches: max_len must be >= 2");
    if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
    for (std::size_t u = 0; u < ds.sequences.size(); ++u)
      if (ds.sequences[u].size() >= 2) order_.push_back(static_cast<int>(u));
    if (shuffle_seed) {
      std::mt19937_64 rng(*shuffle_seed);
      std::shuffle(order_.begin(), order_.end(), rng);
    }
  }

  std::optional<Batch> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    std::vector<std::vector<int>> rows;
    std::vector<int> users;
    for (std::size_t i = cursor_; i < end; ++i) {
      users.push_back(order_[i]);
      rows.push_back(ds_->sequences[static_cast<std::size_t>(order_[i])]);
    }
    cursor_ = end;
    return make_batch(rows, users, max_len_);
  }

  const std::vector<int>& order() const { return order_; }

 private:
  const SequenceDataset* ds_;
  std::size_t max_len_;
  std::size_t batch_size_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
};

inline BatchStream make_batches(const SequenceDataset& ds, std::size_t max_len, std::size_t batch_size,
                                std::optional<std::uint64_t> shuffle_seed) {
  return BatchStream(ds, max_len, batch_size, shuffle_seed);
}

struct DatasetStats {
  std::int64_t n_users = 0;
  std::int64_t n_items = 0;
  std::int64_t n_actions = 0;
  double avg_length = 0.0;
  double sparsity = 0.0;
};

inline DatasetStats stats(const SequenceDataset& ds) {
  if (ds.sequences.empty() || ds.n_items() <= 0) throw DataError("stats: empty dataset");
  DatasetStats s;
  s.n_users = ds.n_users();
  s.n_items = ds.n_items();
  for (const auto& seq : ds.sequences) s.n_actions += static_cast<std::int64_t>(seq.size());
  s.avg_length = static_cast<double>(s.n_actions) / static_cast<double>(s.n_users);
  s.sparsity = 1.0 - static_cast<double>(s.n_actions) / (static_cast<double>(s.n_users) * static_cast<double>(s.n_items));
  return s;
}

inline nlohmann::json stats_to_json(const DatasetStats& s) {
  return {{"n_users", s.n_users}, {"n_items", s.n_items},   {"n_actions", s.n_actions},
          {"avg_length", s.avg_length}, {"sparsity", s.sparsity}};
}

// ------------------------------------------------------------------ bundle I/O

inline constexpr int kBundleVersion = 1;

/// Versioned JSON container: catalog key lists plus per-user id sequences.
inline nlohmann::json bundle_to_json(const SequenceDataset& ds) {
  nlohmann::json j;
  j["format"] = "simdiffrec-bundle";
  j["version"] = kBundleVersion;
  j["catalog_hash"] = to_hex(ds.catalog.hash());
  j["users"] = ds.catalog.user_keys;
  j["items"] = std::vector<std::string>(ds.catalog.item_keys.begin() + 1, ds.catalog.item_keys.end());
  j["sequences"] = ds.sequences;
  return j;
}

inline SequenceDataset bundle_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "simdiffrec-bundle") throw DataError("not a simdiffrec dataset bundle");
  if (j.value("version", 0) != kBundleVersion)
    throw DataError("unsupported bundle version " + std::to_string(j.value("version", 0)));
  SequenceDataset ds;
  ds.catalog.item_keys.emplace_back();
  for (const auto& u : j.at("users")) ds.catalog.add_user(u.get<std::string>());
  for (const auto& i : j.at("items")) ds.catalog.add_item(i.get<std::string>());
  ds.sequences = j.at("sequences").get<std::vector<std::vector<int>>>();
  if (static_cast<int>(ds.sequences.size()) != ds.catalog.n_users())
    throw DataError("bundle: user count does not match sequence count");
  for (const auto& seq : ds.sequences)
    for (const int id : seq)
      if (id < 1 || id > ds.catalog.n_items()) throw DataError("bundle: item id out of range");
  if (j.contains("catalog_hash") && j["catalog_hash"].get<std::string>() != to_hex(ds.catalog.hash()))
    throw DataError("bundle: catalog hash mismatch");
  return ds;
}

inline void save_bundle(const std::filesystem::path& path, const SequenceDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << bundle_to_json(ds).dump() << '\n';
}

inline SequenceDataset load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open bundle " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bundle " + path.string() + ": " + e.what());
  }
  return bundle_from_json(j);
}

}  // namespace simdiffrec::data
