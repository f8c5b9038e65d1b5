#pragma once

#include <cstdint>

#include "wattsel/common.hpp"
#include "wattsel/energy_model.hpp"
#include "wattsel/qnn.hpp"
#include "wattsel/transitions.hpp"

namespace wattsel {

namespace detail {

struct StatsSink final : TileSink {
  explicit StatsSink(LayerTransitionStats& s) : stats(s) {}
  LayerTransitionStats& stats;

  void act_pair(QuantActivation from, QuantActivation to) override {
    stats.record_act_pair(from, to);
  }
  void psum_value(PartialSum v) override { stats.record_psum_value(v); }
  void psum_pair(PartialSum from, PartialSum to) override { stats.record_psum_pair(from, to); }
};

}  // namespace detail

/// Runs tiled inference of one conv layer over the dataset and records the
/// activation and partial-sum streams the array positions see. Only the
/// occupied region of each tile is recorded; padding rows and columns of
/// the lowered matrices carry no real data.
inline LayerTransitionStats collect_stats(const QuantizedNetwork& net, const Dataset& data,
                                          int layer_index, int max_images = -1,
                                          const ArrayConfig& cfg = {}, int threads = 1,
                                          std::size_t reservoir_cap = 256) {
  const auto* conv = std::get_if<ConvLayer>(&net.layers[static_cast<std::size_t>(layer_index)]);
  if (!conv) throw error("collect_stats: layer is not convolutional");
  if (data.n < 1) throw data_error("collect_stats: empty dataset");
  cfg.validate();
  int n = (max_images > 0) ? std::min(max_images, data.n) : data.n;

  int nthreads = effective_threads(threads);
  int shards = std::min(nthreads, n);
  std::vector<LayerTransitionStats> partial(static_cast<std::size_t>(shards));
  for (auto& p : partial) {
    p.layer_index = layer_index;
    p.reservoir_cap = reservoir_cap;
  }
  parallel_for(static_cast<std::size_t>(shards), threads, [&](std::size_t shard) {
    detail::StatsSink sink(partial[shard]);
    for (int i = static_cast<int>(shard); i < n; i += shards) {
      Tensor3 in = forward_to(net, static_cast<std::size_t>(layer_index), data.image(i));
      conv_forward_tiled(*conv, in, cfg.dim, nullptr, &sink);
    }
  });
  LayerTransitionStats stats = std::move(partial[0]);
  for (int s = 1; s < shards; ++s) stats.merge(partial[static_cast<std::size_t>(s)]);
  return stats;
}

}  // namespace wattsel
