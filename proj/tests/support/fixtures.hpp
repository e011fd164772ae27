#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "simdiffrec/config.hpp"
#include "simdiffrec/dataio.hpp"

namespace fixtures {

using simdiffrec::data::SequenceDataset;

inline SequenceDataset dataset_from(const std::vector<std::vector<int>>& seqs, int n_items) {
  SequenceDataset ds;
  for (int i = 1; i <= n_items; ++i) ds.catalog.add_item("i" + std::to_string(i));
  for (std::size_t u = 0; u < seqs.size(); ++u) ds.catalog.add_user("u" + std::to_string(u));
  ds.sequences = seqs;
  return ds;
}

/// Each user walks the item ring from its own start with a stride of 1 or 3.
/// The next item is a deterministic function of the previous two.
inline SequenceDataset cyclic_dataset(int n_users = 50, int n_items = 20, int length = 12) {
  std::vector<std::vector<int>> seqs;
  for (int u = 0; u < n_users; ++u) {
    const int start = u % n_items;
    const int stride = (u / n_items) % 2 == 0 ? 1 : 3;
    std::vector<int> s;
    for (int i = 0; i < length; ++i) s.push_back((start + i * stride) % n_items + 1);
    seqs.push_back(std::move(s));
  }
  return dataset_from(seqs, n_items);
}

/// Small random dataset with Zipf-like item popularity.
inline SequenceDataset random_dataset(int n_users, int n_items, int min_len, int max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> w;
  for (int i = 1; i <= n_items; ++i) w.push_back(1.0 / i);
  std::discrete_distribution<int> pick(w.begin(), w.end());
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::vector<std::vector<int>> seqs;
  for (int u = 0; u < n_users; ++u) {
    std::vector<int> s;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) s.push_back(pick(rng) + 1);
    seqs.push_back(std::move(s));
  }
  return dataset_from(seqs, n_items);
}

/// Beauty-format review log (user, item, timestamp; tab separated) from a
/// generator with latent item clusters, so sequences carry transferable
/// structure: each user mostly stays in a cluster and moves to nearby items.
inline void write_beauty_like_tsv(const std::filesystem::path& path, int n_interactions, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n_items = 300, n_clusters = 12, per_cluster = n_items / n_clusters;
  std::uniform_int_distribution<int> cluster(0, n_clusters - 1);
  std::uniform_int_distribution<int> len(5, 14);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::ofstream out(path);
  out << "user_id\titem_id\ttimestamp\n";
  int written = 0;
  for (int u = 0; written < n_interactions; ++u) {
    int c = cluster(rng);
    int pos = std::uniform_int_distribution<int>(0, per_cluster - 1)(rng);
    const int n = std::min(len(rng), n_interactions - written);
    long ts = 1'400'000'000L + u * 1000L;
    for (int i = 0; i < n; ++i) {
      const double r = u01(rng);
      if (r < 0.7) pos = (pos + 1) % per_cluster;
      else if (r < 0.85) pos = (pos + 2) % per_cluster;
      else if (r < 0.95) c = (c + 1) % n_clusters;
      else pos = std::uniform_int_distribution<int>(0, per_cluster - 1)(rng);
      out << "A" << u << '\t' << "B" << (c * per_cluster + pos) << '\t' << (ts + 60L * i) << '\n';
      ++written;
    }
  }
}

/// Small, fast model configuration for tests.
inline simdiffrec::TrainConfig tiny_config() {
  simdiffrec::TrainConfig c;
  c.d = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.den_layers = 1;
  c.den_heads = 2;
  c.dropout = 0.1;
  c.max_len = 10;
  c.init_std = 0.1;
  c.steps = 100;
  c.reverse_stride = 25;
  c.k_noise = 3;
  c.k_sample = 2;
  c.batch_size = 16;
  c.epochs = 3;
  c.patience = 20;
  c.lr = 1e-2;
  c.seed = 7;
  return c;
}

/// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("simdiffrec_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace fixtures
