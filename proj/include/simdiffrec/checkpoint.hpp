#pragma once

// Model bundle (encoder + denoiser + schedule) and its binary checkpoint.
//
// Layout: "SDRCKPT1", u64 header length, header JSON, then every parameter
// as raw little-endian doubles in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "simdiffrec/config.hpp"
#include "simdiffrec/diffusion.hpp"
#include "simdiffrec/encoder.hpp"
#include "simdiffrec/errors.hpp"

namespace simdiffrec {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

/// Independent generator per purpose, so turning one component off never
/// shifts the random draws of another.
enum class Stream : std::uint64_t { init = 1, shuffle, negatives, dropout, view_dropout, diffusion, augment };

inline nn::Rng make_stream(std::uint64_t seed, Stream s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s)};
  return nn::Rng(seq);
}

inline encoder::EncoderConfig encoder_config(const TrainConfig& c, int n_items) {
  encoder::EncoderConfig e;
  e.n_items = n_items;
  e.d = c.d;
  e.n_layers = c.n_layers;
  e.n_heads = c.n_heads;
  e.ffn_mult = c.ffn_mult;
  e.dropout = c.dropout;
  e.max_len = c.max_len;
  e.init_std = c.init_std;
  return e;
}

inline diffusion::DenoiserConfig denoiser_config(const TrainConfig& c) {
  diffusion::DenoiserConfig d;
  d.d = c.d;
  d.n_layers = c.den_layers;
  d.n_heads = c.den_heads;
  d.ffn_mult = c.ffn_mult;
  d.init_std = c.init_std;
  return d;
}

struct Model {
  TrainConfig cfg;
  int n_items = 0;
  std::string catalog_hash;
  encoder::Encoder enc;
  diffusion::Denoiser den;
  diffusion::NoiseSchedule schedule;

  nn::ParamList parameters() const {
    nn::ParamList out = enc.parameters();
    for (auto& p : den.parameters()) out.push_back(std::move(p));
    return out;
  }
};

inline Model make_model(const TrainConfig& cfg, int n_items, std::string catalog_hash) {
  cfg.validate();
  nn::Rng rng = make_stream(cfg.seed, Stream::init);
  Model m;
  m.cfg = cfg;
  m.n_items = n_items;
  m.catalog_hash = std::move(catalog_hash);
  m.enc = encoder::Encoder(encoder_config(cfg, n_items), rng);
  m.den = diffusion::Denoiser(denoiser_config(cfg), rng);
  m.schedule = diffusion::NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end);
  return m;
}

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'R', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const std::filesystem::path& path, const Model& m, const nlohmann::json& extra = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto params = m.parameters();
  nlohmann::json header{{"config", config_to_json(m.cfg)},
                        {"n_items", m.n_items},
                        {"catalog_hash", m.catalog_hash},
                        {"extra", extra.is_null() ? nlohmann::json::object() : extra}};
  auto& list = header["params"];
  list = nlohmann::json::array();
  for (const auto& [name, p] : params) list.push_back({{"name", name}, {"rows", p.rows()}, {"cols", p.cols()}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, p] : params)
    out.write(reinterpret_cast<const char*>(p.value().data()),
              static_cast<std::streamsize>(p.value().size() * static_cast<Eigen::Index>(sizeof(double))));
  if (!out) throw DataError("write failed: " + path.string());
}

struct LoadedCheckpoint {
  Model model;
  nlohmann::json extra;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw DataError("not a simdiffrec checkpoint: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 32)) throw DataError("corrupt checkpoint header: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header = nlohmann::json::parse(text, nullptr, false);
  if (!in || header.is_discarded()) throw DataError("corrupt checkpoint header: " + path.string());

  const TrainConfig cfg = config_from_json(header.at("config"));
  LoadedCheckpoint out{make_model(cfg, header.at("n_items").get<int>(), header.at("catalog_hash").get<std::string>()),
                       header.value("extra", nlohmann::json::object())};
  auto params = out.model.parameters();
  const auto& list = header.at("params");
  if (list.size() != params.size()) throw DataError("checkpoint parameter count mismatch: " + path.string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    if (list[i].at("name") != name || list[i].at("rows") != p.rows() || list[i].at("cols") != p.cols())
      throw DataError("checkpoint parameter mismatch at " + name);
    auto& v = p.mutable_value();
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * static_cast<Eigen::Index>(sizeof(double))));
    if (!in) throw DataError("truncated checkpoint: " + path.string());
  }
  return out;
}

/// Errors unless `dataset_hash` matches the catalog the model was trained on.
inline void check_catalog(const Model& m, const std::string& dataset_hash) {
  if (m.catalog_hash != dataset_hash)
    throw DataError("catalog hash mismatch: checkpoint " + m.catalog_hash + ", dataset " + dataset_hash);
}

}  // namespace simdiffrec
