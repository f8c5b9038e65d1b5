#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "wattsel/common.hpp"
#include "wattsel/mac_sim.hpp"

namespace wattsel {

// ---------------------------------------------------------------------------
// Tensors. Everything that flows between layers is a signed 8-bit c*h*w
// volume; accumulators are 22-bit saturating.

struct Tensor3 {
  int c = 0, h = 0, w = 0;
  std::vector<std::int8_t> v;

  Tensor3() = default;
  Tensor3(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, 0) {}

  std::int8_t& at(int ci, int y, int x) {
    return v[(static_cast<std::size_t>(ci) * h + y) * w + x];
  }
  std::int8_t at(int ci, int y, int x) const {
    return v[(static_cast<std::size_t>(ci) * h + y) * w + x];
  }
  std::size_t size() const { return v.size(); }
};

struct Mat8 {
  int rows = 0, cols = 0;
  std::vector<std::int8_t> v;

  Mat8() = default;
  Mat8(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0) {}

  std::int8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  std::int8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

// ---------------------------------------------------------------------------
// Layers.

struct ConvLayer {
  int c_in = 0, c_out = 0, k = 1, stride = 1, pad = 0;
  std::vector<std::int8_t> weights;  // c_out * c_in * k * k
  std::vector<std::int32_t> bias;    // c_out
  double scale = 1.0;
  std::vector<std::uint8_t> mask;    // 1 = live, 0 = pruned (weight forced to 0)
  std::optional<std::vector<std::int8_t>> candidate_set;  // sorted ascending when present

  std::size_t weight_count() const { return weights.size(); }
  std::size_t windex(int co, int ci, int ky, int kx) const {
    return ((static_cast<std::size_t>(co) * c_in + ci) * k + ky) * k + kx;
  }
};

struct ReluLayer {};

struct PoolLayer {
  int k = 2, stride = 2;
};

struct DenseLayer {
  int in = 0, out = 0;
  std::vector<std::int8_t> weights;  // out * in
  std::vector<std::int32_t> bias;
  double scale = 1.0;
};

using Layer = std::variant<ConvLayer, ReluLayer, PoolLayer, DenseLayer>;

struct QuantizedNetwork {
  std::array<int, 3> input_shape{0, 0, 0};  // c, h, w
  std::vector<Layer> layers;

  std::vector<int> conv_indices() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (std::holds_alternative<ConvLayer>(layers[i])) out.push_back(static_cast<int>(i));
    return out;
  }
};

struct ForwardStats {
  std::uint64_t overflows = 0;
};

struct AccuracyResult {
  double top1 = 0.0;
  std::int64_t n_samples = 0;
  std::uint64_t overflows = 0;
};

struct Dataset {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<std::int8_t> images;
  std::vector<std::int32_t> labels;
  std::string split;  // role tag assigned at load time, not serialized

  Tensor3 image(int i) const {
    Tensor3 t(c, h, w);
    std::size_t sz = t.size();
    std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(sz * static_cast<std::size_t>(i)), sz,
                t.v.begin());
    return t;
  }
};

// ---------------------------------------------------------------------------
// Shape inference.

inline std::array<int, 3> conv_output_shape(const ConvLayer& l, std::array<int, 3> in) {
  if (in[0] != l.c_in) throw data_error("conv layer: input channel mismatch");
  int h_out = (in[1] + 2 * l.pad - l.k) / l.stride + 1;
  int w_out = (in[2] + 2 * l.pad - l.k) / l.stride + 1;
  if (l.k < 1 || l.stride < 1 || l.pad < 0 || h_out < 1 || w_out < 1)
    throw data_error("conv layer: invalid geometry");
  return {l.c_out, h_out, w_out};
}

/// Shape entering each layer, plus the final output shape (size = layers+1).
inline std::vector<std::array<int, 3>> layer_shapes(const QuantizedNetwork& net) {
  std::vector<std::array<int, 3>> shapes;
  std::array<int, 3> cur = net.input_shape;
  shapes.push_back(cur);
  for (const Layer& layer : net.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      cur = conv_output_shape(*conv, cur);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      // shape preserved
    } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
      if (cur[1] < pool->k || cur[2] < pool->k) throw data_error("pool layer: input too small");
      cur = {cur[0], (cur[1] - pool->k) / pool->stride + 1, (cur[2] - pool->k) / pool->stride + 1};
    } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      if (cur[0] * cur[1] * cur[2] != dense->in) throw data_error("dense layer: input size mismatch");
      cur = {dense->out, 1, 1};
    }
    shapes.push_back(cur);
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// im2col: column j holds the receptive field of output position j
// (row-major over output), rows ordered channel-major then row-major
// within the k*k window. Out-of-bounds taps read as zero.

inline Mat8 im2col(const Tensor3& in, int k, int stride, int pad) {
  if (k < 1 || stride < 1 || pad < 0) throw data_error("im2col: invalid geometry");
  int h_out = (in.h + 2 * pad - k) / stride + 1;
  int w_out = (in.w + 2 * pad - k) / stride + 1;
  if (h_out < 1 || w_out < 1) throw data_error("im2col: empty output");
  Mat8 out(in.c * k * k, h_out * w_out);
  for (int ci = 0; ci < in.c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        int row = (ci * k + ky) * k + kx;
        for (int oy = 0; oy < h_out; ++oy) {
          int y = oy * stride + ky - pad;
          for (int ox = 0; ox < w_out; ++ox) {
            int x = ox * stride + kx - pad;
            std::int8_t val = 0;
            if (y >= 0 && y < in.h && x >= 0 && x < in.w) val = in.at(ci, y, x);
            out.at(row, oy * w_out + ox) = val;
          }
        }
      }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution forward paths. Both accumulate contributions in ascending
// inner-dimension order with 22-bit saturation at every step, so they
// agree exactly even when the clamp fires.

/// Observer fed by the tiled path with the value streams each processing
/// element sees. Activation pairs are consecutive streamed inputs of one
/// array column; psum pairs are consecutive partial sums entering one PE.
struct TileSink {
  virtual ~TileSink() = default;
  virtual void act_pair(QuantActivation from, QuantActivation to) = 0;
  virtual void psum_value(PartialSum v) = 0;
  virtual void psum_pair(PartialSum from, PartialSum to) = 0;
};

inline Tensor3 conv_forward_direct(const ConvLayer& l, const Tensor3& in,
                                   ForwardStats* stats = nullptr) {
  auto out_shape = conv_output_shape(l, {in.c, in.h, in.w});
  Tensor3 out(out_shape[0], out_shape[1], out_shape[2]);
  std::uint64_t* ov = stats ? &stats->overflows : nullptr;
  for (int co = 0; co < l.c_out; ++co)
    for (int oy = 0; oy < out.h; ++oy)
      for (int ox = 0; ox < out.w; ++ox) {
        std::int32_t acc = 0;
        for (int ci = 0; ci < l.c_in; ++ci)
          for (int ky = 0; ky < l.k; ++ky) {
            int y = oy * l.stride + ky - l.pad;
            for (int kx = 0; kx < l.k; ++kx) {
              int x = ox * l.stride + kx - l.pad;
              std::int8_t a = 0;
              if (y >= 0 && y < in.h && x >= 0 && x < in.w) a = in.at(ci, y, x);
              acc = sat_acc_add(acc, l.weights[l.windex(co, ci, ky, kx)] * std::int32_t{a}, ov);
            }
          }
        acc = sat_acc_add(acc, l.bias[static_cast<std::size_t>(co)], ov);
        out.at(co, oy, ox) = requantize(acc, l.scale);
      }
  return out;
}

inline Tensor3 conv_forward_tiled(const ConvLayer& l, const Tensor3& in, int tile_dim = 64,
                                  ForwardStats* stats = nullptr, TileSink* sink = nullptr) {
  if (tile_dim < 1) throw config_error("conv_forward_tiled: tile_dim must be >= 1");
  auto out_shape = conv_output_shape(l, {in.c, in.h, in.w});
  Mat8 x = im2col(in, l.k, l.stride, l.pad);
  int m = l.c_out, kd = x.rows, n = x.cols;
  std::vector<std::int32_t> acc(static_cast<std::size_t>(m) * n, 0);
  std::uint64_t* ov = stats ? &stats->overflows : nullptr;

  std::vector<PartialSum> prev_psum(static_cast<std::size_t>(tile_dim));
  for (int m0 = 0; m0 < m; m0 += tile_dim) {
    int m1 = std::min(m, m0 + tile_dim);
    for (int k0 = 0; k0 < kd; k0 += tile_dim) {
      int k1 = std::min(kd, k0 + tile_dim);
      for (int n0 = 0; n0 < n; n0 += tile_dim) {
        int n1 = std::min(n, n0 + tile_dim);
        if (sink) {
          // activation streams: one per occupied array column
          for (int kk = k0; kk < k1; ++kk)
            for (int nn = n0; nn + 1 < n1; ++nn)
              sink->act_pair(x.at(kk, nn), x.at(kk, nn + 1));
          for (int i = m0; i < m1; ++i) {
            for (int nn = n0; nn < n1; ++nn) {
              std::int32_t cur = acc[static_cast<std::size_t>(i) * n + nn];
              for (int kk = k0; kk < k1; ++kk) {
                auto pe = static_cast<std::size_t>(kk - k0);
                sink->psum_value(cur);
                if (nn > n0) sink->psum_pair(prev_psum[pe], cur);
                prev_psum[pe] = cur;
                cur = sat_acc_add(cur,
                                  l.weights[static_cast<std::size_t>(i) * kd + kk] * std::int32_t{x.at(kk, nn)},
                                  ov);
              }
              acc[static_cast<std::size_t>(i) * n + nn] = cur;
            }
          }
        } else {
          for (int i = m0; i < m1; ++i)
            for (int nn = n0; nn < n1; ++nn) {
              std::int32_t cur = acc[static_cast<std::size_t>(i) * n + nn];
              const std::int8_t* wrow = l.weights.data() + static_cast<std::size_t>(i) * kd;
              for (int kk = k0; kk < k1; ++kk)
                cur = sat_acc_add(cur, wrow[kk] * std::int32_t{x.at(kk, nn)}, ov);
              acc[static_cast<std::size_t>(i) * n + nn] = cur;
            }
        }
      }
    }
  }

  Tensor3 out(out_shape[0], out_shape[1], out_shape[2]);
  for (int co = 0; co < m; ++co)
    for (int j = 0; j < n; ++j) {
      std::int32_t a = sat_acc_add(acc[static_cast<std::size_t>(co) * n + j],
                                   l.bias[static_cast<std::size_t>(co)], ov);
      out.v[static_cast<std::size_t>(co) * n + j] = requantize(a, l.scale);
    }
  return out;
}

inline Tensor3 relu_forward(const Tensor3& in) {
  Tensor3 out = in;
  for (auto& v : out.v) v = std::max<std::int8_t>(v, 0);
  return out;
}

inline Tensor3 pool_forward(const PoolLayer& l, const Tensor3& in) {
  if (in.h < l.k || in.w < l.k) throw data_error("pool layer: input too small");
  int h_out = (in.h - l.k) / l.stride + 1;
  int w_out = (in.w - l.k) / l.stride + 1;
  Tensor3 out(in.c, h_out, w_out);
  for (int ci = 0; ci < in.c; ++ci)
    for (int oy = 0; oy < h_out; ++oy)
      for (int ox = 0; ox < w_out; ++ox) {
        std::int8_t best = -128;
        for (int ky = 0; ky < l.k; ++ky)
          for (int kx = 0; kx < l.k; ++kx)
            best = std::max(best, in.at(ci, oy * l.stride + ky, ox * l.stride + kx));
        out.at(ci, oy, ox) = best;
      }
  return out;
}

inline Tensor3 dense_forward(const DenseLayer& l, const Tensor3& in, ForwardStats* stats = nullptr) {
  if (static_cast<int>(in.size()) != l.in) throw data_error("dense layer: input size mismatch");
  Tensor3 out(l.out, 1, 1);
  std::uint64_t* ov = stats ? &stats->overflows : nullptr;
  for (int o = 0; o < l.out; ++o) {
    std::int32_t acc = 0;
    const std::int8_t* wrow = l.weights.data() + static_cast<std::size_t>(o) * l.in;
    for (int i = 0; i < l.in; ++i) acc = sat_acc_add(acc, wrow[i] * std::int32_t{in.v[static_cast<std::size_t>(i)]}, ov);
    acc = sat_acc_add(acc, l.bias[static_cast<std::size_t>(o)], ov);
    out.v[static_cast<std::size_t>(o)] = requantize(acc, l.scale);
  }
  return out;
}

/// Runs layers [first_layer, end). `in` must match the shape entering
/// first_layer.
inline Tensor3 forward_from(const QuantizedNetwork& net, std::size_t first_layer, Tensor3 in,
                            ForwardStats* stats = nullptr) {
  for (std::size_t li = first_layer; li < net.layers.size(); ++li) {
    const Layer& layer = net.layers[li];
    if (const auto* conv = std::get_if<ConvLayer>(&layer))
      in = conv_forward_direct(*conv, in, stats);
    else if (std::holds_alternative<ReluLayer>(layer))
      in = relu_forward(in);
    else if (const auto* pool = std::get_if<PoolLayer>(&layer))
      in = pool_forward(*pool, in);
    else if (const auto* dense = std::get_if<DenseLayer>(&layer))
      in = dense_forward(*dense, in, stats);
  }
  return in;
}

/// Runs layers [0, end_layer), i.e. produces the input of end_layer.
inline Tensor3 forward_to(const QuantizedNetwork& net, std::size_t end_layer, Tensor3 in,
                          ForwardStats* stats = nullptr) {
  for (std::size_t li = 0; li < end_layer && li < net.layers.size(); ++li) {
    const Layer& layer = net.layers[li];
    if (const auto* conv = std::get_if<ConvLayer>(&layer))
      in = conv_forward_direct(*conv, in, stats);
    else if (std::holds_alternative<ReluLayer>(layer))
      in = relu_forward(in);
    else if (const auto* pool = std::get_if<PoolLayer>(&layer))
      in = pool_forward(*pool, in);
    else if (const auto* dense = std::get_if<DenseLayer>(&layer))
      in = dense_forward(*dense, in, stats);
  }
  return in;
}

inline Tensor3 forward(const QuantizedNetwork& net, Tensor3 in, ForwardStats* stats = nullptr) {
  return forward_from(net, 0, std::move(in), stats);
}

inline int argmax_class(const Tensor3& logits) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i)
    if (logits.v[static_cast<std::size_t>(i)] > logits.v[static_cast<std::size_t>(best)]) best = i;
  return best;  // ties resolve to the lowest class index
}

inline AccuracyResult accuracy(const QuantizedNetwork& net, const Dataset& ds,
                               std::int64_t max_samples = -1, int threads = 1) {
  if (ds.n < 1) throw data_error("accuracy: empty dataset");
  std::int64_t n = (max_samples > 0) ? std::min<std::int64_t>(max_samples, ds.n) : ds.n;
  std::vector<std::uint8_t> correct(static_cast<std::size_t>(n), 0);
  std::vector<std::uint64_t> ovf(static_cast<std::size_t>(n), 0);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    ForwardStats st;
    Tensor3 logits = forward(net, ds.image(static_cast<int>(i)), &st);
    std::int32_t label = ds.labels[i];
    if (label < 0 || label >= static_cast<std::int32_t>(logits.size()))
      throw data_error("accuracy: label out of class range");
    correct[i] = argmax_class(logits) == label ? 1 : 0;
    ovf[i] = st.overflows;
  });
  AccuracyResult res;
  res.n_samples = n;
  std::int64_t ok = 0;
  for (std::size_t i = 0; i < correct.size(); ++i) {
    ok += correct[i];
    res.overflows += ovf[i];
  }
  res.top1 = static_cast<double>(ok) / static_cast<double>(n);
  return res;
}

// ---------------------------------------------------------------------------
// Compression primitives.

/// Masks the smallest floor(ratio * count) weights by |value| (ties by flat
/// index) to exactly zero. Already-masked weights stay masked.
inline void magnitude_prune(ConvLayer& l, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw config_error("magnitude_prune: ratio must be in [0,1)");
  std::size_t count = l.weight_count();
  std::size_t n_prune = static_cast<std::size_t>(ratio * static_cast<double>(count));
  if (n_prune == 0) return;
  std::vector<std::uint32_t> idx(count);
  for (std::uint32_t i = 0; i < count; ++i) idx[i] = i;
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_prune - 1), idx.end(),
                   [&](std::uint32_t a, std::uint32_t b) {
                     int ma = std::abs(static_cast<int>(l.weights[a]));
                     int mb = std::abs(static_cast<int>(l.weights[b]));
                     return ma != mb ? ma < mb : a < b;
                   });
  for (std::size_t i = 0; i < n_prune; ++i) {
    l.weights[idx[i]] = 0;
    l.mask[idx[i]] = 0;
  }
}

/// Closest allowed value to w. Exact distance ties go to the lower-power
/// candidate (when a table is supplied), then smaller magnitude, then
/// smaller value.
inline std::int8_t nearest_candidate(std::int8_t w, std::span<const std::int8_t> candidates,
                                     const double* power256 = nullptr) {
  if (candidates.empty()) throw error("nearest_candidate: empty candidate set");
  std::int8_t best = candidates[0];
  for (std::int8_t c : candidates) {
    int dc = std::abs(static_cast<int>(c) - w), db = std::abs(static_cast<int>(best) - w);
    if (dc < db) {
      best = c;
      continue;
    }
    if (dc > db) continue;
    if (power256) {
      double pc = power256[static_cast<int>(c) + 128], pb = power256[static_cast<int>(best) + 128];
      if (pc < pb) {
        best = c;
        continue;
      }
      if (pc > pb) continue;
    }
    int ac = std::abs(static_cast<int>(c)), ab = std::abs(static_cast<int>(best));
    if (ac < ab || (ac == ab && c < best)) best = c;
  }
  return best;
}

/// Projects every unmasked weight onto the candidate set and records the
/// set on the layer. Masked positions stay zero.
inline void project_weights(ConvLayer& l, std::span<const std::int8_t> candidates,
                            const double* power256 = nullptr) {
  if (candidates.empty()) throw error("project_weights: empty candidate set");
  bool has_masked = std::find(l.mask.begin(), l.mask.end(), std::uint8_t{0}) != l.mask.end();
  bool has_zero = std::find(candidates.begin(), candidates.end(), std::int8_t{0}) != candidates.end();
  if (has_masked && !has_zero)
    throw error("project_weights: candidate set must contain 0 when the mask has zeros");
  std::array<std::int8_t, 256> lut;
  for (int w = -128; w <= 127; ++w)
    lut[static_cast<std::size_t>(w + 128)] = nearest_candidate(static_cast<std::int8_t>(w), candidates, power256);
  for (std::size_t i = 0; i < l.weights.size(); ++i)
    if (l.mask[i]) l.weights[i] = lut[static_cast<std::size_t>(l.weights[i] + 128)];
  std::vector<std::int8_t> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  l.candidate_set = std::move(sorted);
}

/// Pre-activation accumulators (bias included) of a conv layer over an
/// already-unrolled input, using the given weights.
inline std::vector<std::int32_t> conv_preact(const std::vector<std::int8_t>& weights,
                                             const std::vector<std::int32_t>& bias, int c_out,
                                             const Mat8& x, std::uint64_t* ov = nullptr) {
  std::vector<std::int32_t> acc(static_cast<std::size_t>(c_out) * x.cols);
  for (int co = 0; co < c_out; ++co) {
    const std::int8_t* wrow = weights.data() + static_cast<std::size_t>(co) * x.rows;
    for (int j = 0; j < x.cols; ++j) {
      std::int32_t a = 0;
      for (int r = 0; r < x.rows; ++r) a = sat_acc_add(a, wrow[r] * std::int32_t{x.at(r, j)}, ov);
      acc[static_cast<std::size_t>(co) * x.cols + j] = sat_acc_add(a, bias[static_cast<std::size_t>(co)], ov);
    }
  }
  return acc;
}

/// Shifts each output channel's bias by the negated rounded mean
/// pre-activation error between the layer's current weights and a
/// reference (weights, bias) pair, measured over the calibration split.
inline void calibrate_bias(QuantizedNetwork& net, int layer_index,
                           const std::vector<std::int8_t>& ref_weights,
                           const std::vector<std::int32_t>& ref_bias, const Dataset& calib,
                           std::int64_t max_samples = -1, int threads = 1) {
  auto* conv = std::get_if<ConvLayer>(&net.layers[static_cast<std::size_t>(layer_index)]);
  if (!conv) throw error("calibrate_bias: layer is not convolutional");
  if (calib.n < 1) throw data_error("calibrate_bias: empty calibration split");
  std::int64_t n = (max_samples > 0) ? std::min<std::int64_t>(max_samples, calib.n) : calib.n;

  std::vector<std::int64_t> err(static_cast<std::size_t>(conv->c_out), 0);
  std::vector<std::int64_t> cnt(static_cast<std::size_t>(conv->c_out), 0);
  std::vector<std::vector<std::int64_t>> err_shards(static_cast<std::size_t>(n));
  std::int64_t per_sample_cols = 0;

  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    Tensor3 in = forward_to(net, static_cast<std::size_t>(layer_index), calib.image(static_cast<int>(i)));
    Mat8 x = im2col(in, conv->k, conv->stride, conv->pad);
    auto cur = conv_preact(conv->weights, conv->bias, conv->c_out, x);
    auto ref = conv_preact(ref_weights, ref_bias, conv->c_out, x);
    auto& shard = err_shards[i];
    shard.assign(static_cast<std::size_t>(conv->c_out), 0);
    for (int co = 0; co < conv->c_out; ++co)
      for (int j = 0; j < x.cols; ++j)
        shard[static_cast<std::size_t>(co)] += cur[static_cast<std::size_t>(co) * x.cols + j] -
                                               ref[static_cast<std::size_t>(co) * x.cols + j];
  });
  {
    Tensor3 probe = forward_to(net, static_cast<std::size_t>(layer_index), calib.image(0));
    auto shp = conv_output_shape(*conv, {probe.c, probe.h, probe.w});
    per_sample_cols = std::int64_t{shp[1]} * shp[2];
  }
  for (std::size_t i = 0; i < err_shards.size(); ++i)
    for (int co = 0; co < conv->c_out; ++co) {
      err[static_cast<std::size_t>(co)] += err_shards[i][static_cast<std::size_t>(co)];
      cnt[static_cast<std::size_t>(co)] += per_sample_cols;
    }
  for (int co = 0; co < conv->c_out; ++co) {
    double mean = static_cast<double>(err[static_cast<std::size_t>(co)]) /
                  static_cast<double>(cnt[static_cast<std::size_t>(co)]);
    conv->bias[static_cast<std::size_t>(co)] -= round_half_away(mean);
  }
}

// ---------------------------------------------------------------------------
// Validation.

inline void validate_network(const QuantizedNetwork& net) {
  if (net.input_shape[0] < 1 || net.input_shape[1] < 1 || net.input_shape[2] < 1)
    throw data_error("model: invalid input shape");
  layer_shapes(net);  // throws on any chaining problem
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    std::string at = "layers[" + std::to_string(li) + "]";
    if (const auto* conv = std::get_if<ConvLayer>(&net.layers[li])) {
      std::size_t want = static_cast<std::size_t>(conv->c_out) * conv->c_in * conv->k * conv->k;
      if (conv->weights.size() != want) throw data_error("model: " + at + ".weights: wrong element count");
      if (conv->mask.size() != want) throw data_error("model: " + at + ".mask: wrong element count");
      if (conv->bias.size() != static_cast<std::size_t>(conv->c_out))
        throw data_error("model: " + at + ".bias: wrong element count");
      if (!(conv->scale > 0.0) || !std::isfinite(conv->scale))
        throw data_error("model: " + at + ".scale: must be finite and positive");
      for (std::size_t i = 0; i < want; ++i)
        if (!conv->mask[i] && conv->weights[i] != 0)
          throw data_error("model: " + at + ": masked weight not zero");
      if (conv->candidate_set) {
        const auto& cs = *conv->candidate_set;
        if (cs.empty()) throw data_error("model: " + at + ".candidate_set: empty");
        for (std::size_t i = 0; i < want; ++i)
          if (conv->mask[i] && std::find(cs.begin(), cs.end(), conv->weights[i]) == cs.end())
            throw data_error("model: " + at + ": weight outside candidate_set");
      }
    } else if (const auto* dense = std::get_if<DenseLayer>(&net.layers[li])) {
      if (dense->weights.size() != static_cast<std::size_t>(dense->out) * dense->in)
        throw data_error("model: " + at + ".weights: wrong element count");
      if (dense->bias.size() != static_cast<std::size_t>(dense->out))
        throw data_error("model: " + at + ".bias: wrong element count");
      if (!(dense->scale > 0.0) || !std::isfinite(dense->scale))
        throw data_error("model: " + at + ".scale: must be finite and positive");
    }
  }
}

// ---------------------------------------------------------------------------
// Model JSON (versioned; weight blobs as base64 of the raw int8 bytes).

inline nlohmann::json network_to_json_core(const QuantizedNetwork& net) {
  nlohmann::json j;
  j["format"] = "wattsel-model";
  j["version"] = 1;
  j["input_shape"] = net.input_shape;
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const Layer& layer : net.layers) {
    nlohmann::json e;
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      e["type"] = "conv";
      e["c_in"] = conv->c_in;
      e["c_out"] = conv->c_out;
      e["k"] = conv->k;
      e["stride"] = conv->stride;
      e["pad"] = conv->pad;
      e["scale"] = conv->scale;
      e["weights"] = base64_encode(conv->weights.data(), conv->weights.size());
      e["bias"] = conv->bias;
      bool all_live = std::find(conv->mask.begin(), conv->mask.end(), std::uint8_t{0}) == conv->mask.end();
      if (!all_live) {
        std::vector<std::int8_t> m(conv->mask.begin(), conv->mask.end());
        e["mask"] = base64_encode(m.data(), m.size());
      }
      if (conv->candidate_set) e["candidate_set"] = *conv->candidate_set;
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      e["type"] = "relu";
    } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
      e["type"] = "maxpool";
      e["k"] = pool->k;
      e["stride"] = pool->stride;
    } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      e["type"] = "dense";
      e["in"] = dense->in;
      e["out"] = dense->out;
      e["scale"] = dense->scale;
      e["weights"] = base64_encode(dense->weights.data(), dense->weights.size());
      e["bias"] = dense->bias;
    }
    layers.push_back(std::move(e));
  }
  return j;
}

/// Hash of the canonical serialization (fingerprint field excluded).
inline std::string network_fingerprint(const QuantizedNetwork& net) {
  std::string s = network_to_json_core(net).dump();
  return to_hex(fnv1a64(s.data(), s.size()));
}

inline nlohmann::json network_to_json(const QuantizedNetwork& net) {
  nlohmann::json j = network_to_json_core(net);
  j["fingerprint"] = network_fingerprint(net);
  return j;
}

namespace detail {

template <typename T>
T require(const nlohmann::json& j, const std::string& key, const std::string& at) {
  if (!j.contains(key)) throw data_error("model: missing field " + at + "." + key);
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw data_error("model: bad type at " + at + "." + key);
  }
}

}  // namespace detail

inline QuantizedNetwork network_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "wattsel-model")
    throw data_error("model: not a wattsel-model document");
  if (j.value("version", 0) != 1) throw data_error("model: unsupported version");
  QuantizedNetwork net;
  auto shape = detail::require<std::vector<int>>(j, "input_shape", "$");
  if (shape.size() != 3) throw data_error("model: input_shape must have 3 entries");
  net.input_shape = {shape[0], shape[1], shape[2]};
  if (!j.contains("layers") || !j.at("layers").is_array())
    throw data_error("model: missing layers array");
  int li = 0;
  for (const auto& e : j.at("layers")) {
    std::string at = "layers[" + std::to_string(li++) + "]";
    std::string type = detail::require<std::string>(e, "type", at);
    if (type == "conv") {
      ConvLayer conv;
      conv.c_in = detail::require<int>(e, "c_in", at);
      conv.c_out = detail::require<int>(e, "c_out", at);
      conv.k = detail::require<int>(e, "k", at);
      conv.stride = detail::require<int>(e, "stride", at);
      conv.pad = detail::require<int>(e, "pad", at);
      conv.scale = detail::require<double>(e, "scale", at);
      conv.weights = base64_decode(detail::require<std::string>(e, "weights", at));
      conv.bias = detail::require<std::vector<std::int32_t>>(e, "bias", at);
      if (e.contains("mask")) {
        auto m = base64_decode(e.at("mask").get<std::string>());
        conv.mask.assign(m.begin(), m.end());
        for (auto b : conv.mask)
          if (b != 0 && b != 1) throw data_error("model: " + at + ".mask: entries must be 0/1");
      } else {
        conv.mask.assign(conv.weights.size(), 1);
      }
      if (e.contains("candidate_set")) {
        auto cs = e.at("candidate_set").get<std::vector<int>>();
        std::vector<std::int8_t> cs8;
        for (int v : cs) {
          if (v < -128 || v > 127) throw data_error("model: " + at + ".candidate_set: value out of range");
          cs8.push_back(static_cast<std::int8_t>(v));
        }
        conv.candidate_set = std::move(cs8);
      }
      net.layers.emplace_back(std::move(conv));
    } else if (type == "relu") {
      net.layers.emplace_back(ReluLayer{});
    } else if (type == "maxpool") {
      PoolLayer pool;
      pool.k = detail::require<int>(e, "k", at);
      pool.stride = detail::require<int>(e, "stride", at);
      net.layers.emplace_back(pool);
    } else if (type == "dense") {
      DenseLayer dense;
      dense.in = detail::require<int>(e, "in", at);
      dense.out = detail::require<int>(e, "out", at);
      dense.scale = detail::require<double>(e, "scale", at);
      dense.weights = base64_decode(detail::require<std::string>(e, "weights", at));
      dense.bias = detail::require<std::vector<std::int32_t>>(e, "bias", at);
      net.layers.emplace_back(std::move(dense));
    } else {
      throw data_error("model: " + at + ".type: unknown layer type '" + type + "'");
    }
  }
  validate_network(net);
  return net;
}

inline void save_model(const QuantizedNetwork& net, const std::string& path) {
  write_file(path, network_to_json(net).dump());
}

inline QuantizedNetwork load_model(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("model: " + path + ": " + e.what());
  }
  return network_from_json(j);
}

// ---------------------------------------------------------------------------
// Dataset binary format: "WSDS" magic, u32 version, u32 n/c/h/w
// (little-endian), n*c*h*w int8 pixels, n uint8 labels.

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::string out;
  out.reserve(16 + ds.images.size() + static_cast<std::size_t>(ds.n));
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  out += "WSDS";
  put_u32(1);
  put_u32(static_cast<std::uint32_t>(ds.n));
  put_u32(static_cast<std::uint32_t>(ds.c));
  put_u32(static_cast<std::uint32_t>(ds.h));
  put_u32(static_cast<std::uint32_t>(ds.w));
  out.append(reinterpret_cast<const char*>(ds.images.data()), ds.images.size());
  for (std::int32_t label : ds.labels) {
    if (label < 0 || label > 255) throw data_error("dataset: label out of storable range");
    out.push_back(static_cast<char>(label));
  }
  write_file(path, out);
}

inline Dataset load_dataset(const std::string& path, const std::string& split = "") {
  std::string raw = read_file(path);
  if (raw.size() < 24 || raw.compare(0, 4, "WSDS") != 0)
    throw data_error("dataset: " + path + ": bad magic");
  auto get_u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[off + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
  };
  if (get_u32(4) != 1) throw data_error("dataset: " + path + ": unsupported version");
  Dataset ds;
  ds.n = static_cast<int>(get_u32(8));
  ds.c = static_cast<int>(get_u32(12));
  ds.h = static_cast<int>(get_u32(16));
  ds.w = static_cast<int>(get_u32(20));
  if (ds.n < 1 || ds.c < 1 || ds.h < 1 || ds.w < 1)
    throw data_error("dataset: " + path + ": bad dimensions");
  std::size_t pix = static_cast<std::size_t>(ds.n) * ds.c * ds.h * ds.w;
  if (raw.size() != 24 + pix + static_cast<std::size_t>(ds.n))
    throw data_error("dataset: " + path + ": truncated file");
  ds.images.resize(pix);
  std::memcpy(ds.images.data(), raw.data() + 24, pix);
  ds.labels.resize(static_cast<std::size_t>(ds.n));
  for (int i = 0; i < ds.n; ++i)
    ds.labels[static_cast<std::size_t>(i)] = static_cast<unsigned char>(raw[24 + pix + static_cast<std::size_t>(i)]);
  ds.split = split;
  return ds;
}

/// IDX import (MNIST-style). Pixels are recentered from [0,255] to
/// [-128,127] to match the signed activation convention.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const std::string& split = "") {
  std::string img = read_file(images_path);
  std::string lab = read_file(labels_path);
  auto be32 = [](const std::string& s, std::size_t off) {
    return (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off])) << 24) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 2])) << 8) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 3]));
  };
  if (img.size() < 16 || be32(img, 0) != 0x00000803u)
    throw data_error("idx: " + images_path + ": not an IDX3 image file");
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801u)
    throw data_error("idx: " + labels_path + ": not an IDX1 label file");
  Dataset ds;
  ds.n = static_cast<int>(be32(img, 4));
  ds.c = 1;
  ds.h = static_cast<int>(be32(img, 8));
  ds.w = static_cast<int>(be32(img, 12));
  if (static_cast<int>(be32(lab, 4)) != ds.n) throw data_error("idx: image/label count mismatch");
  std::size_t pix = static_cast<std::size_t>(ds.n) * ds.h * ds.w;
  if (img.size() != 16 + pix || lab.size() != 8 + static_cast<std::size_t>(ds.n))
    throw data_error("idx: truncated file");
  ds.images.resize(pix);
  for (std::size_t i = 0; i < pix; ++i)
    ds.images[i] = static_cast<std::int8_t>(static_cast<int>(static_cast<unsigned char>(img[16 + i])) - 128);
  ds.labels.resize(static_cast<std::size_t>(ds.n));
  for (int i = 0; i < ds.n; ++i)
    ds.labels[static_cast<std::size_t>(i)] = static_cast<unsigned char>(lab[8 + static_cast<std::size_t>(i)]);
  ds.split = split;
  return ds;
}

}  // namespace wattsel
