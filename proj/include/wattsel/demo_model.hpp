#pragma once

// Bundled desk-scale fixture: a 10-class synthetic image task and a
// hand-constructed prototype-matching CNN for it. The network is built
// deterministically (template matched filters, probe-calibrated scales),
// so the repository ships a "pre-trained" model without a training loop.

#include <cstdint>

#include "wattsel/common.hpp"
#include "wattsel/qnn.hpp"

namespace wattsel::demo {

inline constexpr int kClasses = 10;
inline constexpr int kChannels = 3;
inline constexpr int kSide = 12;

// ---------------------------------------------------------------------------
// Synthetic dataset: per-class spatial template x per-class channel gains,
// rendered with pixel noise and +-1 px jitter.

inline double template_value(int cls, int y, int x) {
  auto in_band = [](int v, int lo, int hi) { return v >= lo && v <= hi; };
  double bg = -0.25;
  switch (cls) {
    case 0: return in_band(x, 5, 6) ? 1.0 : bg;                          // vertical bar
    case 1: return in_band(y, 5, 6) ? 1.0 : bg;                          // horizontal bar
    case 2: return std::abs(y - x) <= 1 ? 1.0 : bg;                      // diagonal
    case 3: return std::abs(y + x - (kSide - 1)) <= 1 ? 1.0 : bg;        // anti-diagonal
    case 4: {                                                            // hollow square
      bool border = (in_band(y, 2, 9) && in_band(x, 2, 9)) &&
                    (y == 2 || y == 9 || x == 2 || x == 9);
      return border ? 1.0 : bg;
    }
    case 5: return (in_band(y, 4, 7) && in_band(x, 4, 7)) ? 1.0 : bg;    // center blob
    case 6: return (std::abs(y - x) <= 1 || std::abs(y + x - (kSide - 1)) <= 1) ? 1.0 : bg;  // X
    case 7: return (in_band(y, 2, 3) || (in_band(x, 5, 6) && y >= 2)) ? 1.0 : bg;            // T
    case 8: return (((y / 3) + (x / 3)) % 2 == 0) ? 0.8 : -0.8;          // checker blocks
    case 9: return (y + x <= 4) ? 1.0 : bg;                              // corner triangle
    default: return bg;
  }
}

/// Channel gain in {0.7, 1.0, 1.3} from the class's base-3 digits, so the
/// channel mix also carries class information.
inline double channel_gain(int cls, int ch) {
  int digit = (cls / (ch == 0 ? 1 : ch == 1 ? 3 : 9)) % 3;
  return 0.7 + 0.3 * digit;
}

struct SynthConfig {
  int noise_amp = 26;  // uniform pixel noise in [-noise_amp, noise_amp]
  int jitter = 1;      // max |shift| in pixels
  double gain = 55.0;  // template amplitude before channel gain
};

inline Tensor3 render_sample(int cls, Rng& rng, const SynthConfig& sc) {
  Tensor3 img(kChannels, kSide, kSide);
  int dy = sc.jitter > 0 ? static_cast<int>(rng.range(-sc.jitter, sc.jitter)) : 0;
  int dx = sc.jitter > 0 ? static_cast<int>(rng.range(-sc.jitter, sc.jitter)) : 0;
  for (int ch = 0; ch < kChannels; ++ch) {
    double g = sc.gain * channel_gain(cls, ch);
    for (int y = 0; y < kSide; ++y)
      for (int x = 0; x < kSide; ++x) {
        int sy = std::clamp(y - dy, 0, kSide - 1);
        int sx = std::clamp(x - dx, 0, kSide - 1);
        int noise = sc.noise_amp > 0 ? static_cast<int>(rng.range(-sc.noise_amp, sc.noise_amp)) : 0;
        img.at(ch, y, x) = clamp_i8(round_half_away(template_value(cls, sy, sx) * g) + noise);
      }
  }
  return img;
}

/// Clean template image (no noise/jitter), used to derive prototypes.
inline Tensor3 render_clean(int cls) {
  SynthConfig sc;
  sc.noise_amp = 0;
  sc.jitter = 0;
  Rng rng(0);
  return render_sample(cls, rng, sc);
}

inline Dataset make_dataset(int n, std::uint64_t seed, const std::string& split = "",
                            const SynthConfig& sc = {}) {
  if (n < 1) throw config_error("make_dataset: n must be >= 1");
  Dataset ds;
  ds.n = n;
  ds.c = kChannels;
  ds.h = kSide;
  ds.w = kSide;
  ds.split = split;
  ds.images.reserve(static_cast<std::size_t>(n) * kChannels * kSide * kSide);
  ds.labels.reserve(static_cast<std::size_t>(n));
  Rng rng(derive_seed(seed, 0x64617461ull));
  for (int i = 0; i < n; ++i) {
    int cls = i % kClasses;  // balanced classes
    Tensor3 img = render_sample(cls, rng, sc);
    ds.images.insert(ds.images.end(), img.v.begin(), img.v.end());
    ds.labels.push_back(cls);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Model construction.

namespace detail {

/// Small deterministic dither so conv weights cover many distinct values.
inline int dither(std::uint64_t tag, std::size_t index, int amp) {
  return static_cast<int>(splitmix64(derive_seed(0x776C6431ull, tag, index)) % (2 * amp + 1)) - amp;
}

inline double conv1_spatial(int basis, int y, int x) {
  // 5x5 spatial bases in [-1,1]
  switch (basis) {
    case 0: return x < 2 ? -1.0 : (x > 2 ? 1.0 : 0.0);            // vertical edge
    case 1: return y < 2 ? -1.0 : (y > 2 ? 1.0 : 0.0);            // horizontal edge
    case 2: return (y - x) > 0 ? 1.0 : ((y - x) < 0 ? -1.0 : 0.0);  // diagonal edge
    case 3: {
      int d = y + x - 4;
      return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);                  // anti-diagonal edge
    }
    case 4: {                                                     // center-surround
      int r = std::max(std::abs(y - 2), std::abs(x - 2));
      return r == 0 ? 1.0 : (r == 1 ? 0.4 : -0.5);
    }
    case 5: return x == 2 ? 1.0 : (std::abs(x - 2) == 2 ? -0.6 : 0.0);  // vertical bar
    case 6: return y == 2 ? 1.0 : (std::abs(y - 2) == 2 ? -0.6 : 0.0);  // horizontal bar
    case 7: return ((y + x) % 2 == 0) ? 0.8 : -0.8;               // fine checker
    default: return 0.0;
  }
}

inline double conv1_mixer(int variant, int ch) {
  static constexpr double mix[2][3] = {{0.6, 0.6, 0.6}, {1.0, -0.2, -0.8}};
  return mix[variant][ch];
}

/// q-quantile of |values| (nearest-rank).
inline double abs_quantile(std::vector<std::int32_t> v, double q) {
  for (auto& x : v) x = std::abs(x);
  std::sort(v.begin(), v.end());
  std::size_t idx = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1));
  return static_cast<double>(v[idx]);
}

}  // namespace detail

/// Deterministically builds the bundled demo network. The probe split is
/// only used to pick requantization scales.
inline QuantizedNetwork build_demo_network() {
  QuantizedNetwork net;
  net.input_shape = {kChannels, kSide, kSide};

  // --- conv1: 16 oriented/blob filters (8 spatial bases x 2 channel mixes)
  ConvLayer conv1;
  conv1.c_in = kChannels;
  conv1.c_out = 16;
  conv1.k = 5;
  conv1.stride = 1;
  conv1.pad = 2;
  conv1.weights.resize(static_cast<std::size_t>(16) * kChannels * 5 * 5);
  conv1.bias.assign(16, 0);
  conv1.mask.assign(conv1.weights.size(), 1);
  for (int f = 0; f < 16; ++f) {
    int basis = f % 8, variant = f / 8;
    for (int ch = 0; ch < kChannels; ++ch)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
          std::size_t idx = conv1.windex(f, ch, y, x);
          double v = detail::conv1_spatial(basis, y, x) * detail::conv1_mixer(variant, ch);
          int w = round_half_away(v * 46.0);
          if (w != 0) w += detail::dither(1, idx, 3);
          conv1.weights[idx] = clamp_i8(w);
        }
  }
  conv1.scale = 1.0;  // placeholder until probe calibration below

  // probe activations to fix bias1 (sparsity threshold) and scale1
  Dataset probe = make_dataset(64, 0xBEEF, "probe");
  {
    std::vector<std::vector<std::int32_t>> per_ch(16);
    for (int i = 0; i < probe.n; ++i) {
      Mat8 x = im2col(probe.image(i), conv1.k, conv1.stride, conv1.pad);
      auto acc = conv_preact(conv1.weights, conv1.bias, conv1.c_out, x);
      for (int co = 0; co < 16; ++co)
        per_ch[static_cast<std::size_t>(co)].insert(
            per_ch[static_cast<std::size_t>(co)].end(),
            acc.begin() + static_cast<std::ptrdiff_t>(co) * x.cols,
            acc.begin() + static_cast<std::ptrdiff_t>(co + 1) * x.cols);
    }
    // keep roughly the top third of each channel's responses
    for (int co = 0; co < 16; ++co) {
      auto v = per_ch[static_cast<std::size_t>(co)];
      std::sort(v.begin(), v.end());
      conv1.bias[static_cast<std::size_t>(co)] =
          -v[static_cast<std::size_t>(0.75 * static_cast<double>(v.size() - 1))];
    }
    std::vector<std::int32_t> accs;
    for (int i = 0; i < probe.n; ++i) {
      Mat8 x = im2col(probe.image(i), conv1.k, conv1.stride, conv1.pad);
      auto acc = conv_preact(conv1.weights, conv1.bias, conv1.c_out, x);
      accs.insert(accs.end(), acc.begin(), acc.end());
    }
    conv1.scale = 100.0 / std::max(1.0, detail::abs_quantile(accs, 0.995));
  }
  net.layers.emplace_back(conv1);
  net.layers.emplace_back(ReluLayer{});
  net.layers.emplace_back(PoolLayer{3, 3});  // 16x12x12 -> 16x4x4

  // --- conv2: 48 prototype filters matched against the whole pooled map
  std::array<Tensor3, kClasses> proto_feat;
  for (int cls = 0; cls < kClasses; ++cls)
    proto_feat[static_cast<std::size_t>(cls)] =
        forward_to(net, net.layers.size(), render_clean(cls));  // 16x4x4

  ConvLayer conv2;
  conv2.c_in = 16;
  conv2.c_out = 48;
  conv2.k = 4;
  conv2.stride = 1;
  conv2.pad = 1;
  conv2.weights.resize(static_cast<std::size_t>(48) * 16 * 4 * 4);
  conv2.bias.assign(48, 0);
  conv2.mask.assign(conv2.weights.size(), 1);
  conv2.scale = 1.0;

  auto fill_filter = [&](int f, auto&& value_at) {
    // zero-mean, normalize to +-58, dither
    double sum = 0.0, maxabs = 0.0;
    std::array<double, 16 * 4 * 4> raw{};
    for (int ch = 0; ch < 16; ++ch)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          double v = value_at(ch, y, x);
          raw[static_cast<std::size_t>((ch * 4 + y) * 4 + x)] = v;
          sum += v;
        }
    double mean = sum / raw.size();
    for (double& v : raw) {
      v -= mean;
      maxabs = std::max(maxabs, std::abs(v));
    }
    if (maxabs < 1e-9) maxabs = 1.0;
    for (int ch = 0; ch < 16; ++ch)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          std::size_t idx = conv2.windex(f, ch, y, x);
          double v = raw[static_cast<std::size_t>((ch * 4 + y) * 4 + x)];
          int w = round_half_away(v / maxabs * 58.0);
          if (w != 0) w += detail::dither(2, idx, 2);
          conv2.weights[idx] = clamp_i8(w);
        }
  };

  auto feat_at = [](const Tensor3& feat, int ch, int y, int x) {
    return static_cast<double>(feat.at(ch, y, x));
  };
  // cross-class mean map; subtracting it removes the structure every
  // template shares and sharpens class evidence
  std::array<double, 16 * 4 * 4> mf{};
  for (int cls = 0; cls < kClasses; ++cls)
    for (std::size_t i = 0; i < mf.size(); ++i)
      mf[i] += static_cast<double>(proto_feat[static_cast<std::size_t>(cls)].v[i]) / kClasses;
  auto centered = [&](const Tensor3& f, int ch, int y, int x) {
    return feat_at(f, ch, y, x) - mf[static_cast<std::size_t>((ch * 4 + y) * 4 + x)];
  };
  for (int cls = 0; cls < kClasses; ++cls) {
    const Tensor3& f = proto_feat[static_cast<std::size_t>(cls)];
    fill_filter(cls, [&](int ch, int y, int x) { return centered(f, ch, y, x); });
  }
  for (int cls = 0; cls < kClasses; ++cls) {  // contrast filters: c vs c+5
    const Tensor3& a = proto_feat[static_cast<std::size_t>(cls)];
    const Tensor3& b = proto_feat[static_cast<std::size_t>((cls + 5) % kClasses)];
    fill_filter(10 + cls,
                [&](int ch, int y, int x) { return feat_at(a, ch, y, x) - feat_at(b, ch, y, x); });
  }
  for (int cls = 0; cls < kClasses; ++cls) {  // contrast filters: c vs c+3
    const Tensor3& a = proto_feat[static_cast<std::size_t>(cls)];
    const Tensor3& b = proto_feat[static_cast<std::size_t>((cls + 3) % kClasses)];
    fill_filter(20 + cls,
                [&](int ch, int y, int x) { return feat_at(a, ch, y, x) - feat_at(b, ch, y, x); });
  }
  for (int j = 0; j < 18; ++j) {  // channel-subset prototypes
    int cls = j % kClasses;
    int parity = j % 2;
    const Tensor3& f = proto_feat[static_cast<std::size_t>(cls)];
    fill_filter(30 + j, [&](int ch, int y, int x) {
      return (ch % 2 == parity) ? centered(f, ch, y, x) : 0.0;
    });
  }

  {
    QuantizedNetwork head = net;  // conv1/relu/pool only
    std::vector<std::int32_t> accs;
    for (int i = 0; i < probe.n; ++i) {
      Tensor3 in = forward_to(head, head.layers.size(), probe.image(i));
      Mat8 x = im2col(in, conv2.k, conv2.stride, conv2.pad);
      auto acc = conv_preact(conv2.weights, conv2.bias, conv2.c_out, x);
      accs.insert(accs.end(), acc.begin(), acc.end());
    }
    conv2.scale = 100.0 / std::max(1.0, detail::abs_quantile(accs, 0.995));
  }
  net.layers.emplace_back(conv2);
  net.layers.emplace_back(ReluLayer{});
  net.layers.emplace_back(PoolLayer{3, 3});  // 48x3x3 -> 48x1x1 (best shift)

  // --- dense head: prototype evidence with lateral inhibition
  DenseLayer dense;
  dense.in = 48;
  dense.out = kClasses;
  dense.weights.assign(static_cast<std::size_t>(dense.in) * kClasses, 0);
  dense.bias.assign(kClasses, 0);
  dense.scale = 1.0;
  auto didx = [&](int cls, int f) {
    return static_cast<std::size_t>(cls) * dense.in + static_cast<std::size_t>(f);
  };
  for (int cls = 0; cls < kClasses; ++cls) {
    dense.weights[didx(cls, cls)] = clamp_i8(90 + detail::dither(3, didx(cls, cls), 6));
    dense.weights[didx(cls, 10 + cls)] = 26;
    dense.weights[didx(cls, 10 + (cls + 5) % kClasses)] = -26;
    dense.weights[didx(cls, 20 + cls)] = 20;
    dense.weights[didx(cls, 20 + (cls + 7) % kClasses)] = -20;
    for (int j = 0; j < 18; ++j)
      if (j % kClasses == cls)
        dense.weights[didx(cls, 30 + j)] = clamp_i8(16 + detail::dither(5, didx(cls, 30 + j), 3));
    for (int d = 0; d < kClasses; ++d)
      if (d != cls) dense.weights[didx(cls, d)] = clamp_i8(-22 + detail::dither(4, didx(cls, d), 4));
  }
  {
    QuantizedNetwork head = net;
    std::vector<std::int32_t> accs;
    for (int i = 0; i < probe.n; ++i) {
      Tensor3 in = forward_to(head, head.layers.size(), probe.image(i));
      for (int o = 0; o < dense.out; ++o) {
        std::int32_t acc = 0;
        for (int j = 0; j < dense.in; ++j)
          acc = sat_acc_add(acc, dense.weights[static_cast<std::size_t>(o) * dense.in + j] *
                                     std::int32_t{in.v[static_cast<std::size_t>(j)]});
        accs.push_back(acc);
      }
    }
    dense.scale = 110.0 / std::max(1.0, detail::abs_quantile(accs, 1.0));
  }
  net.layers.emplace_back(dense);

  validate_network(net);
  return net;
}

}  // namespace wattsel::demo
