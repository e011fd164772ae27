#pragma once

// Training configuration: defaults, strict JSON (de)serialisation with
// unknown-key rejection, dotted-key overrides and a stable config hash.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/hash.hpp"

namespace simdiffrec {

enum class Ablation { none, no_k_noise, no_c_aug, no_k_sample };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_k_noise: return "no_k_noise";
    case Ablation::no_c_aug: return "no_c_aug";
    case Ablation::no_k_sample: return "no_k_sample";
  }
  return "none";
}

inline Ablation parse_ablation(std::string_view s) {
  if (s == "none") return Ablation::none;
  if (s == "no_k_noise") return Ablation::no_k_noise;
  if (s == "no_c_aug") return Ablation::no_c_aug;
  if (s == "no_k_sample") return Ablation::no_k_sample;
  throw ConfigError("unknown ablation mode '" + std::string(s) + "'");
}

struct TrainConfig {
  // data / output
  std::string bundle;
  std::string out_dir;

  // model
  int d = 64;
  int n_layers = 2;
  int n_heads = 2;
  int ffn_mult = 4;
  double dropout = 0.2;
  int max_len = 50;
  double init_std = 0.02;

  // diffusion
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.2;
  int den_layers = 1;
  int den_heads = 2;
  int k_noise = 25;
  int reverse_stride = 50;

  // augmentation
  double k_aug_ratio = 0.2;
  int k_sample = 2;

  // contrastive
  double tau = 1.0;
  bool use_in_batch = true;

  // optimisation
  double alpha = 0.1;
  double beta = 0.1;
  double lr = 1e-3;
  int batch_size = 256;
  int epochs = 200;
  int patience = 20;
  std::uint64_t seed = 42;
  int warmup_epochs = 0;
  Ablation ablation = Ablation::none;
  bool sr_only = false;
  int eval_every = 1;
  std::vector<int> ks{5, 10};

  void validate() const {
    const auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (alpha < 0.0 || beta < 0.0) fail("alpha and beta must be >= 0");
    if (!(lr > 0.0)) fail("lr must be > 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (epochs < 0) fail("epochs must be >= 0");
    if (patience < 1) fail("patience must be >= 1");
    if (warmup_epochs < 0) fail("warmup_epochs must be >= 0");
    if (max_len < 2) fail("max_len must be >= 2");
    if (d < 1 || n_heads < 1 || d % n_heads != 0) fail("d must be divisible by n_heads");
    if (den_heads < 1 || d % den_heads != 0) fail("d must be divisible by den_heads");
    if (steps < 1) fail("diffusion steps must be >= 1");
    if (reverse_stride < 1 || steps % reverse_stride != 0) fail("reverse_stride must divide steps");
    if (k_noise < 1) fail("k_noise must be >= 1");
    if (k_sample < 1) fail("k_sample must be >= 1");
    if (k_aug_ratio < 0.0 || k_aug_ratio > 1.0) fail("k_aug_ratio must lie in [0, 1]");
    if (!(tau > 0.0)) fail("tau must be > 0");
    if (eval_every < 1) fail("eval_every must be >= 1");
    if (ks.empty()) fail("ks must be nonempty");
    for (const int k : ks)
      if (k < 1) fail("every k must be >= 1");
    if (std::find(ks.begin(), ks.end(), 10) == ks.end()) fail("ks must include 10 (model selection uses NDCG@10)");
  }
};

inline constexpr int kConfigSchemaVersion = 1;

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {
      {"schema_version", kConfigSchemaVersion},
      {"data", {{"bundle", c.bundle}}},
      {"output", {{"dir", c.out_dir}}},
      {"model",
       {{"d", c.d},
        {"n_layers", c.n_layers},
        {"n_heads", c.n_heads},
        {"ffn_mult", c.ffn_mult},
        {"dropout", c.dropout},
        {"max_len", c.max_len},
        {"init_std", c.init_std}}},
      {"diffusion",
       {{"steps", c.steps},
        {"beta_start", c.beta_start},
        {"beta_end", c.beta_end},
        {"den_layers", c.den_layers},
        {"den_heads", c.den_heads},
        {"k_noise", c.k_noise},
        {"reverse_stride", c.reverse_stride}}},
      {"augment", {{"k_aug_ratio", c.k_aug_ratio}, {"k_sample", c.k_sample}}},
      {"contrastive", {{"tau", c.tau}, {"use_in_batch", c.use_in_batch}}},
      {"train",
       {{"alpha", c.alpha},
        {"beta", c.beta},
        {"lr", c.lr},
        {"batch_size", c.batch_size},
        {"epochs", c.epochs},
        {"patience", c.patience},
        {"seed", c.seed},
        {"warmup_epochs", c.warmup_epochs},
        {"ablation", to_string(c.ablation)},
        {"sr_only", c.sr_only},
        {"eval_every", c.eval_every},
        {"ks", c.ks}}},
  };
}

namespace detail {

template <class T>
void read_field(const nlohmann::json& j, const std::string& path, T& out) {
  try {
    out = j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value for '" + path + "': " + j.dump());
  }
}

inline void apply_section(const nlohmann::json& j, const std::string& section, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const std::string path = section + "." + key;
#define SDR_FIELD(sec, name, member) \
  if (section == sec && key == name) { read_field(value, path, c.member); continue; }
    SDR_FIELD("data", "bundle", bundle)
    SDR_FIELD("output", "dir", out_dir)
    SDR_FIELD("model", "d", d)
    SDR_FIELD("model", "n_layers", n_layers)
    SDR_FIELD("model", "n_heads", n_heads)
    SDR_FIELD("model", "ffn_mult", ffn_mult)
    SDR_FIELD("model", "dropout", dropout)
    SDR_FIELD("model", "max_len", max_len)
    SDR_FIELD("model", "init_std", init_std)
    SDR_FIELD("diffusion", "steps", steps)
    SDR_FIELD("diffusion", "beta_start", beta_start)
    SDR_FIELD("diffusion", "beta_end", beta_end)
    SDR_FIELD("diffusion", "den_layers", den_layers)
    SDR_FIELD("diffusion", "den_heads", den_heads)
    SDR_FIELD("diffusion", "k_noise", k_noise)
    SDR_FIELD("diffusion", "reverse_stride", reverse_stride)
    SDR_FIELD("augment", "k_aug_ratio", k_aug_ratio)
    SDR_FIELD("augment", "k_sample", k_sample)
    SDR_FIELD("contrastive", "tau", tau)
    SDR_FIELD("contrastive", "use_in_batch", use_in_batch)
    SDR_FIELD("train", "alpha", alpha)
    SDR_FIELD("train", "beta", beta)
    SDR_FIELD("train", "lr", lr)
    SDR_FIELD("train", "batch_size", batch_size)
    SDR_FIELD("train", "epochs", epochs)
    SDR_FIELD("train", "patience", patience)
    SDR_FIELD("train", "seed", seed)
    SDR_FIELD("train", "warmup_epochs", warmup_epochs)
    SDR_FIELD("train", "sr_only", sr_only)
    SDR_FIELD("train", "eval_every", eval_every)
    SDR_FIELD("train", "ks", ks)
#undef SDR_FIELD
    if (section == "train" && key == "ablation") {
      std::string mode;
      read_field(value, path, mode);
      c.ablation = parse_ablation(mode);
      continue;
    }
    throw ConfigError("config: unknown key '" + path + "'");
  }
}

}  // namespace detail

/// Applies a (possibly partial) nested config over `base`. Unknown keys are
/// errors.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  static const std::vector<std::string> sections{"data", "output", "model", "diffusion", "augment", "contrastive", "train"};
  for (const auto& [key, value] : j.items()) {
    if (key == "schema_version") {
      if (value != kConfigSchemaVersion) throw ConfigError("config: unsupported schema_version " + value.dump());
      continue;
    }
    if (std::find(sections.begin(), sections.end(), key) == sections.end())
      throw ConfigError("config: unknown section '" + key + "'");
    detail::apply_section(value, key, base);
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, std::move(base));
}

/// Applies `section.key=value`. The value is parsed as JSON when possible,
/// otherwise taken as a string.
inline void apply_override(TrainConfig& c, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq)
    throw ConfigError("override must look like section.key=value: '" + std::string(assignment) + "'");
  const std::string section(assignment.substr(0, dot));
  const std::string key(assignment.substr(dot + 1, eq - dot - 1));
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  c = config_from_json(nlohmann::json{{section, {{key, value}}}}, c);
}

/// Hash of everything that affects training (paths excluded).
inline std::string config_hash(const TrainConfig& c) {
  nlohmann::json j = config_to_json(c);
  j.erase("data");
  j.erase("output");
  Fnv1a h;
  h.update(j.dump());
  return to_hex(h.digest());
}

}  // namespace simdiffrec
