#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "wattsel/common.hpp"
#include "wattsel/mac_sim.hpp"
#include "wattsel/qnn.hpp"
#include "wattsel/transitions.hpp"

namespace wattsel {

/// Systolic array geometry. A tile occupies the array for 2*dim cycles:
/// dim cycles to load the stationary weights, dim to stream activations.
struct ArrayConfig {
  int dim = 64;
  double freq_hz = 5e9;
  int cycles_per_tile = 128;

  void validate() const {
    if (dim < 1) throw config_error("array config: dim must be >= 1");
    if (!(freq_hz > 0.0)) throw config_error("array config: freq_hz must be positive");
    if (cycles_per_tile != 2 * dim)
      throw config_error("array config: cycles_per_tile must equal 2*dim");
  }
  double t_window() const { return static_cast<double>(dim) / freq_hz; }
};

/// Mean simulated MAC power for each of the 256 weight values of one
/// layer, indexed by value + 128.
struct WeightPowerTable {
  int layer_index = -1;
  std::array<double, 256> power{};
  int trace_len = 0;
  std::uint64_t seed = 0;

  double at(std::int8_t w) const { return power[static_cast<std::size_t>(static_cast<int>(w) + 128)]; }
  double& at(std::int8_t w) { return power[static_cast<std::size_t>(static_cast<int>(w) + 128)]; }
};

/// Simulates every weight value against its own synthesized trace
/// (per-weight derived seed) and records the mean toggles per cycle.
inline WeightPowerTable build_power_table(const LayerTransitionStats& stats, int trace_len,
                                          std::uint64_t seed, int threads = 1) {
  if (trace_len < 1000) throw config_error("build_power_table: trace_len must be >= 1000");
  WeightPowerTable table;
  table.layer_index = stats.layer_index;
  table.trace_len = trace_len;
  table.seed = seed;
  TraceSampler sampler(stats);
  parallel_for(256, threads, [&](std::size_t i) {
    int w = static_cast<int>(i) - 128;
    auto trace = sampler.sample(static_cast<std::size_t>(trace_len),
                                derive_seed(seed, 0x7461626Cull, static_cast<std::uint64_t>(i)));
    table.power[i] = avg_power(w, std::span<const TraceStep>(trace));
  });
  return table;
}

/// Number of dim^3 tiles covering an (m x kdim) x (kdim x n) matrix product.
inline std::int64_t tile_count(std::int64_t m, std::int64_t kdim, std::int64_t n,
                               const ArrayConfig& cfg) {
  if (m < 1 || kdim < 1 || n < 1) throw config_error("tile_count: dimensions must be >= 1");
  auto ceil_div = [](std::int64_t a, std::int64_t b) { return (a + b - 1) / b; };
  return ceil_div(m, cfg.dim) * ceil_div(kdim, cfg.dim) * ceil_div(n, cfg.dim);
}

/// dim*dim weight block (row tile_r, column tile_c) of the lowered weight
/// matrix, zero-padded where the matrix ends.
inline std::vector<std::int8_t> extract_weight_tile(const std::vector<std::int8_t>& w_mat, int m,
                                                    int kdim, int tile_r, int tile_c,
                                                    const ArrayConfig& cfg) {
  std::vector<std::int8_t> tile(static_cast<std::size_t>(cfg.dim) * cfg.dim, 0);
  for (int i = 0; i < cfg.dim; ++i) {
    int r = tile_r * cfg.dim + i;
    if (r >= m) break;
    for (int j = 0; j < cfg.dim; ++j) {
      int c = tile_c * cfg.dim + j;
      if (c >= kdim) break;
      tile[static_cast<std::size_t>(i) * cfg.dim + j] = w_mat[static_cast<std::size_t>(r) * kdim + c];
    }
  }
  return tile;
}

/// Estimate mode: mean table power over all dim^2 positions (padded
/// positions hold weight 0, which still clocks its registers).
inline double tile_power_estimate(std::span<const std::int8_t> weight_tile,
                                  const WeightPowerTable& table, const ArrayConfig& cfg) {
  std::size_t want = static_cast<std::size_t>(cfg.dim) * cfg.dim;
  if (weight_tile.size() != want) throw config_error("tile_power_estimate: tile size mismatch");
  double sum = 0.0;
  for (std::int8_t w : weight_tile) sum += table.at(w);
  return sum / static_cast<double>(want);
}

/// Simulate mode: every PE runs its stationary weight against its own
/// synthesized dim-cycle input stream; the tile power is the mean per-PE
/// average power.
inline double tile_power_simulate(std::span<const std::int8_t> weight_tile,
                                  const TraceSampler& sampler, const ArrayConfig& cfg,
                                  std::uint64_t seed, int threads = 1) {
  std::size_t want = static_cast<std::size_t>(cfg.dim) * cfg.dim;
  if (weight_tile.size() != want) throw config_error("tile_power_simulate: tile size mismatch");
  std::vector<double> pe_power(want);
  parallel_for(want, threads, [&](std::size_t pe) {
    auto trace = sampler.sample(static_cast<std::size_t>(cfg.dim),
                                derive_seed(seed, 0x74696C65ull, pe));
    pe_power[pe] = avg_power(weight_tile[pe], std::span<const TraceStep>(trace));
  });
  double sum = 0.0;
  for (double p : pe_power) sum += p;
  return sum / static_cast<double>(want);
}

struct LayerEnergy {
  std::int64_t n_tiles = 0;
  double p_tile = 0.0;   // mean power over the layer's weight tiles
  double e_tile = 0.0;   // 2 * p_tile * t_window
  double e_layer = 0.0;  // n_tiles * e_tile
  double t_window = 0.0; // dim / freq_hz, seconds
};

/// im2col dimensions (m, kdim, n) of a conv layer inside the network.
inline std::array<std::int64_t, 3> lowered_dims(const QuantizedNetwork& net, int layer_index) {
  const auto* conv = std::get_if<ConvLayer>(&net.layers[static_cast<std::size_t>(layer_index)]);
  if (!conv) throw error("lowered_dims: layer is not convolutional");
  auto shapes = layer_shapes(net);
  auto in = shapes[static_cast<std::size_t>(layer_index)];
  auto out = conv_output_shape(*conv, in);
  return {conv->c_out, std::int64_t{conv->c_in} * conv->k * conv->k,
          std::int64_t{out[1]} * out[2]};
}

template <typename TilePowerFn>
LayerEnergy layer_energy_with(const QuantizedNetwork& net, int layer_index, const ArrayConfig& cfg,
                              TilePowerFn&& tile_power_of) {
  cfg.validate();
  const auto* conv = std::get_if<ConvLayer>(&net.layers[static_cast<std::size_t>(layer_index)]);
  if (!conv) throw error("layer_energy: layer is not convolutional");
  auto [m, kdim, n] = lowered_dims(net, layer_index);
  LayerEnergy e;
  e.n_tiles = tile_count(m, kdim, n, cfg);
  std::int64_t wt_rows = (m + cfg.dim - 1) / cfg.dim;
  std::int64_t wt_cols = (kdim + cfg.dim - 1) / cfg.dim;
  double sum = 0.0;
  for (std::int64_t tr = 0; tr < wt_rows; ++tr)
    for (std::int64_t tc = 0; tc < wt_cols; ++tc) {
      auto tile = extract_weight_tile(conv->weights, static_cast<int>(m), static_cast<int>(kdim),
                                      static_cast<int>(tr), static_cast<int>(tc), cfg);
      sum += tile_power_of(tile, tr, tc);
    }
  e.p_tile = sum / static_cast<double>(wt_rows * wt_cols);
  e.t_window = cfg.t_window();
  e.e_tile = 2.0 * e.p_tile * e.t_window;
  e.e_layer = static_cast<double>(e.n_tiles) * e.e_tile;
  return e;
}

inline LayerEnergy layer_energy(const QuantizedNetwork& net, int layer_index,
                                const WeightPowerTable& table, const ArrayConfig& cfg) {
  return layer_energy_with(net, layer_index, cfg,
                           [&](const std::vector<std::int8_t>& tile, std::int64_t, std::int64_t) {
                             return tile_power_estimate(tile, table, cfg);
                           });
}

inline LayerEnergy layer_energy_simulated(const QuantizedNetwork& net, int layer_index,
                                          const LayerTransitionStats& stats, const ArrayConfig& cfg,
                                          std::uint64_t seed, int threads = 1) {
  TraceSampler sampler(stats);
  return layer_energy_with(net, layer_index, cfg,
                           [&](const std::vector<std::int8_t>& tile, std::int64_t tr, std::int64_t tc) {
                             return tile_power_simulate(
                                 tile, sampler, cfg,
                                 derive_seed(seed, static_cast<std::uint64_t>(tr) + 1,
                                             static_cast<std::uint64_t>(tc) + 1),
                                 threads);
                           });
}

/// Per-conv-layer share of the total modeled energy, aligned with
/// `tables`; shares sum to 1.
inline std::vector<double> energy_shares(const QuantizedNetwork& net,
                                         const std::vector<WeightPowerTable>& tables,
                                         const ArrayConfig& cfg) {
  auto convs = net.conv_indices();
  if (convs.empty()) throw error("energy_shares: network has no conv layers");
  if (tables.size() != convs.size())
    throw config_error("energy_shares: one power table per conv layer required");
  std::vector<double> e(convs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    e[i] = layer_energy(net, convs[i], tables[i], cfg).e_layer;
    total += e[i];
  }
  if (!(total > 0.0)) throw error("energy_shares: degenerate energy profile");
  for (double& v : e) v /= total;
  return e;
}

// ---------------------------------------------------------------------------
// JSON serialization.

inline nlohmann::json table_to_json(const WeightPowerTable& t, const std::string& fingerprint) {
  nlohmann::json j;
  j["format"] = "wattsel-power-table";
  j["version"] = 1;
  j["tool_version"] = kToolVersion;
  j["model_fingerprint"] = fingerprint;
  j["layer_index"] = t.layer_index;
  j["trace_len"] = t.trace_len;
  j["seed"] = t.seed;
  j["power"] = t.power;  // index 0 is weight -128
  return j;
}

inline WeightPowerTable table_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "wattsel-power-table")
    throw data_error("power table file: not a wattsel-power-table document");
  if (j.value("version", 0) != 1) throw data_error("power table file: unsupported version");
  WeightPowerTable t;
  t.layer_index = j.at("layer_index").get<int>();
  t.trace_len = j.at("trace_len").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  auto p = j.at("power").get<std::vector<double>>();
  if (p.size() != 256) throw data_error("power table file: need exactly 256 entries");
  for (std::size_t i = 0; i < 256; ++i) {
    if (!std::isfinite(p[i]) || p[i] < 0.0)
      throw data_error("power table file: power values must be finite and >= 0");
    t.power[i] = p[i];
  }
  return t;
}

}  // namespace wattsel
