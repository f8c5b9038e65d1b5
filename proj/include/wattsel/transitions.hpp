#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <vector>

#include <json.hpp>

#include "wattsel/common.hpp"
#include "wattsel/mac_sim.hpp"

namespace wattsel {

inline constexpr int kMsbBins = 10;
inline constexpr int kHwBins = 5;
inline constexpr int kGroupCount = kMsbBins * kHwBins;
inline constexpr std::uint32_t kAccMask = (1u << kAccBits) - 1u;

/// Leading-bit position metric of a partial sum, computed on the 22-bit
/// two's-complement pattern: 0 for zero, otherwise the pattern's bit width
/// (so every negative value scores 22, its sign-extension bits being live).
inline int msb_of(PartialSum p) {
  std::uint32_t pat = to_pattern(p, kAccBits);
  return pat == 0 ? 0 : std::bit_width(pat);
}

/// Popcount of the 22-bit two's-complement pattern.
inline int hamming_weight22(PartialSum p) {
  return std::popcount(to_pattern(p, kAccBits));
}

struct GroupId {
  std::uint8_t msb_bin = 0;  // [0,10)
  std::uint8_t hw_bin = 0;   // [0,5)

  int index() const { return msb_bin * kHwBins + hw_bin; }
  bool operator==(const GroupId&) const = default;
};

/// Two-stage bucketing of the accumulator value space: coarse by MSB
/// position, fine by Hamming weight. Both metrics range over [0,22], so
/// the uniform bin map is floor(x * bins / 23) with a clamp.
inline GroupId group_of(PartialSum p) {
  int msb = msb_of(p);
  int hw = hamming_weight22(p);
  GroupId g;
  g.msb_bin = static_cast<std::uint8_t>(std::min(kMsbBins - 1, msb * kMsbBins / 23));
  g.hw_bin = static_cast<std::uint8_t>(std::min(kHwBins - 1, hw * kHwBins / 23));
  return g;
}

inline GroupId group_from_index(int idx) {
  return GroupId{static_cast<std::uint8_t>(idx / kHwBins), static_cast<std::uint8_t>(idx % kHwBins)};
}

// ---------------------------------------------------------------------------

/// Per-group pool of observed accumulator values, capped at `cap` distinct
/// entries. Retention priority is a value-derived hash, which makes merges
/// associative and commutative and keeps sharded collection deterministic.
struct ValueReservoir {
  std::set<std::pair<std::uint64_t, PartialSum>> entries;

  void offer(PartialSum v, std::size_t cap) {
    std::uint64_t h = splitmix64(to_pattern(v, kAccBits));
    if (entries.size() >= cap) {
      auto last = std::prev(entries.end());
      if (h > last->first) return;
      if (!entries.emplace(h, v).second) return;
      entries.erase(std::prev(entries.end()));
    } else {
      entries.emplace(h, v);
    }
  }

  std::vector<PartialSum> values() const {
    std::vector<PartialSum> out;
    out.reserve(entries.size());
    for (const auto& [h, v] : entries) out.push_back(v);
    return out;
  }
};

/// Transition statistics of one convolution layer under the
/// weight-stationary schedule: activation pair counts, accumulator
/// group-pair counts, and per-group sample pools.
struct LayerTransitionStats {
  int layer_index = -1;
  std::size_t reservoir_cap = 256;
  std::vector<std::uint64_t> act_hist = std::vector<std::uint64_t>(256 * 256, 0);
  std::vector<std::uint64_t> group_pair_hist = std::vector<std::uint64_t>(kGroupCount * kGroupCount, 0);
  std::array<ValueReservoir, kGroupCount> group_samples{};
  std::uint64_t total_act_transitions = 0;
  std::uint64_t total_psum_transitions = 0;

  static std::size_t act_index(QuantActivation from, QuantActivation to) {
    return (static_cast<std::size_t>(static_cast<std::uint8_t>(from)) << 8) |
           static_cast<std::uint8_t>(to);
  }

  void record_act_pair(QuantActivation from, QuantActivation to) {
    ++act_hist[act_index(from, to)];
    ++total_act_transitions;
  }

  void record_psum_value(PartialSum v) {
    group_samples[static_cast<std::size_t>(group_of(v).index())].offer(v, reservoir_cap);
  }

  void record_psum_pair(PartialSum from, PartialSum to) {
    int a = group_of(from).index(), b = group_of(to).index();
    ++group_pair_hist[static_cast<std::size_t>(a * kGroupCount + b)];
    ++total_psum_transitions;
  }

  void merge(const LayerTransitionStats& other) {
    for (std::size_t i = 0; i < act_hist.size(); ++i) act_hist[i] += other.act_hist[i];
    for (std::size_t i = 0; i < group_pair_hist.size(); ++i)
      group_pair_hist[i] += other.group_pair_hist[i];
    for (int g = 0; g < kGroupCount; ++g)
      for (const auto& [h, v] : other.group_samples[static_cast<std::size_t>(g)].entries)
        group_samples[static_cast<std::size_t>(g)].offer(v, reservoir_cap);
    total_act_transitions += other.total_act_transitions;
    total_psum_transitions += other.total_psum_transitions;
  }
};

// ---------------------------------------------------------------------------

struct StabilityReport {
  double inter_group_mean_variance = 0.0;
  double mean_intra_group_variance = 0.0;
  double ratio = 0.0;
};

inline constexpr double kVarianceFloor = 1e-12;

/// Grouping quality: variance of per-group mean powers over the mean of
/// within-group power variances (population variances, floored at 1e-12).
inline StabilityReport stability_ratio(std::span<const std::pair<PartialSum, double>> samples) {
  std::array<double, kGroupCount> sum{}, sumsq{};
  std::array<std::uint64_t, kGroupCount> count{};
  for (const auto& [p, power] : samples) {
    int g = group_of(p).index();
    sum[static_cast<std::size_t>(g)] += power;
    sumsq[static_cast<std::size_t>(g)] += power * power;
    ++count[static_cast<std::size_t>(g)];
  }
  std::vector<double> means;
  double intra_total = 0.0;
  for (int g = 0; g < kGroupCount; ++g) {
    auto gi = static_cast<std::size_t>(g);
    if (count[gi] == 0) continue;
    double n = static_cast<double>(count[gi]);
    double mean = sum[gi] / n;
    means.push_back(mean);
    intra_total += sumsq[gi] / n - mean * mean;
  }
  if (means.size() < 2) throw error("stability_ratio: need at least two nonempty groups");
  double m = 0.0;
  for (double v : means) m += v;
  m /= static_cast<double>(means.size());
  double inter = 0.0;
  for (double v : means) inter += (v - m) * (v - m);
  inter /= static_cast<double>(means.size());
  StabilityReport rep;
  rep.inter_group_mean_variance = inter;
  rep.mean_intra_group_variance = std::max(0.0, intra_total / static_cast<double>(means.size()));
  rep.ratio = inter / std::max(rep.mean_intra_group_variance, kVarianceFloor);
  return rep;
}

// ---------------------------------------------------------------------------
// Trace synthesis. Activations and partial sums are sampled as two
// independent first-order Markov chains: activations directly over the
// 256 values, partial sums over the 50 groups with each group realized by
// a uniform draw from its sample pool.

class TraceSampler {
 public:
  explicit TraceSampler(const LayerTransitionStats& stats) {
    if (stats.total_act_transitions == 0 || stats.total_psum_transitions == 0)
      throw error("sample_trace: empty transition histograms");

    act_rows_.resize(256);
    act_row_totals_.assign(256, 0);
    std::uint64_t cum = 0;
    for (int from = 0; from < 256; ++from) {
      auto fi = static_cast<std::size_t>(from);
      auto& row = act_rows_[fi];
      std::uint64_t row_cum = 0;
      for (int to = 0; to < 256; ++to) {
        std::uint64_t c = stats.act_hist[(fi << 8) | static_cast<std::size_t>(to)];
        if (c == 0) continue;
        row_cum += c;
        row.push_back({row_cum, static_cast<std::uint8_t>(to)});
      }
      act_row_totals_[fi] = row_cum;
      if (row_cum > 0) {
        cum += row_cum;
        act_marginal_.push_back({cum, static_cast<std::uint8_t>(from)});
      }
    }
    act_total_ = cum;

    group_rows_.resize(kGroupCount);
    group_row_totals_.assign(kGroupCount, 0);
    cum = 0;
    for (int from = 0; from < kGroupCount; ++from) {
      auto fi = static_cast<std::size_t>(from);
      auto& row = group_rows_[fi];
      std::uint64_t row_cum = 0;
      for (int to = 0; to < kGroupCount; ++to) {
        std::uint64_t c = stats.group_pair_hist[fi * kGroupCount + static_cast<std::size_t>(to)];
        if (c == 0) continue;
        row_cum += c;
        row.push_back({row_cum, static_cast<std::uint8_t>(to)});
      }
      group_row_totals_[fi] = row_cum;
      if (row_cum > 0) {
        cum += row_cum;
        group_marginal_.push_back({cum, static_cast<std::uint8_t>(from)});
      }
    }
    group_total_ = cum;

    for (int g = 0; g < kGroupCount; ++g)
      group_values_[static_cast<std::size_t>(g)] = stats.group_samples[static_cast<std::size_t>(g)].values();
  }

  std::vector<TraceStep> sample(std::size_t len, std::uint64_t seed) const {
    if (len < 2) throw error("sample_trace: len must be >= 2");
    Rng rng(seed);
    std::vector<TraceStep> out;
    out.reserve(len);

    int act = draw(act_marginal_, act_total_, rng);
    int group = draw(group_marginal_, group_total_, rng);
    out.push_back({static_cast<QuantActivation>(static_cast<std::uint8_t>(act)),
                   realize(group, rng)});
    for (std::size_t i = 1; i < len; ++i) {
      act = next_state(act_rows_, act_row_totals_, act_marginal_, act_total_, act, rng);
      group = next_state(group_rows_, group_row_totals_, group_marginal_, group_total_, group, rng);
      out.push_back({static_cast<QuantActivation>(static_cast<std::uint8_t>(act)),
                     realize(group, rng)});
    }
    return out;
  }

  /// Stationary frequency of each group in the recorded pair histogram
  /// ("from" marginal), for consistency checks against sampled traces.
  std::array<double, kGroupCount> group_marginal_probs() const {
    std::array<double, kGroupCount> p{};
    std::uint64_t prev = 0;
    for (const auto& [cum, g] : group_marginal_) {
      p[g] = static_cast<double>(cum - prev) / static_cast<double>(group_total_);
      prev = cum;
    }
    return p;
  }

 private:
  using CumRow = std::vector<std::pair<std::uint64_t, std::uint8_t>>;

  static int draw(const CumRow& row, std::uint64_t total, Rng& rng) {
    std::uint64_t r = rng.next() % total;
    auto it = std::upper_bound(row.begin(), row.end(), r,
                               [](std::uint64_t v, const auto& e) { return v < e.first; });
    return it->second;
  }

  static int next_state(const std::vector<CumRow>& rows, const std::vector<std::uint64_t>& totals,
                        const CumRow& marginal, std::uint64_t total, int cur, Rng& rng) {
    auto ci = static_cast<std::size_t>(cur);
    if (totals[ci] == 0) return draw(marginal, total, rng);  // absorbing row: restart
    return draw(rows[ci], totals[ci], rng);
  }

  PartialSum realize(int group, Rng& rng) const {
    const auto& pool = group_values_[static_cast<std::size_t>(group)];
    if (pool.empty()) throw error("sample_trace: group has no sampled values");
    return pool[rng.index(pool.size())];
  }

  std::vector<CumRow> act_rows_;
  std::vector<std::uint64_t> act_row_totals_;
  CumRow act_marginal_;
  std::uint64_t act_total_ = 0;

  std::vector<CumRow> group_rows_;
  std::vector<std::uint64_t> group_row_totals_;
  CumRow group_marginal_;
  std::uint64_t group_total_ = 0;

  std::array<std::vector<PartialSum>, kGroupCount> group_values_{};
};

inline std::vector<TraceStep> sample_trace(const LayerTransitionStats& stats, std::size_t len,
                                           std::uint64_t seed) {
  return TraceSampler(stats).sample(len, seed);
}

// ---------------------------------------------------------------------------
// JSON serialization (sparse histograms).

inline nlohmann::json stats_to_json(const LayerTransitionStats& s, const std::string& fingerprint) {
  nlohmann::json j;
  j["format"] = "wattsel-stats";
  j["version"] = 1;
  j["tool_version"] = kToolVersion;
  j["model_fingerprint"] = fingerprint;
  j["layer_index"] = s.layer_index;
  j["reservoir_cap"] = s.reservoir_cap;
  j["total_act_transitions"] = s.total_act_transitions;
  j["total_psum_transitions"] = s.total_psum_transitions;
  auto& ah = j["act_hist"] = nlohmann::json::array();
  for (int from = 0; from < 256; ++from)
    for (int to = 0; to < 256; ++to) {
      std::uint64_t c = s.act_hist[(static_cast<std::size_t>(from) << 8) | static_cast<std::size_t>(to)];
      if (c) ah.push_back({static_cast<std::int8_t>(from), static_cast<std::int8_t>(to), c});
    }
  auto& gh = j["group_pair_hist"] = nlohmann::json::array();
  for (int a = 0; a < kGroupCount; ++a)
    for (int b = 0; b < kGroupCount; ++b) {
      std::uint64_t c = s.group_pair_hist[static_cast<std::size_t>(a * kGroupCount + b)];
      if (c) gh.push_back({a, b, c});
    }
  auto& gs = j["group_samples"] = nlohmann::json::array();
  for (int g = 0; g < kGroupCount; ++g) {
    const auto& res = s.group_samples[static_cast<std::size_t>(g)];
    if (res.entries.empty()) continue;
    nlohmann::json e;
    GroupId id = group_from_index(g);
    e["msb_bin"] = id.msb_bin;
    e["hw_bin"] = id.hw_bin;
    e["values"] = res.values();
    gs.push_back(std::move(e));
  }
  return j;
}

inline LayerTransitionStats stats_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "wattsel-stats")
    throw data_error("stats file: not a wattsel-stats document");
  if (j.value("version", 0) != 1) throw data_error("stats file: unsupported version");
  LayerTransitionStats s;
  s.layer_index = j.at("layer_index").get<int>();
  s.reservoir_cap = j.value("reservoir_cap", std::size_t{256});
  for (const auto& e : j.at("act_hist")) {
    int from = e.at(0).get<int>(), to = e.at(1).get<int>();
    if (from < -128 || from > 127 || to < -128 || to > 127)
      throw data_error("stats file: act_hist value out of int8 range");
    s.act_hist[LayerTransitionStats::act_index(static_cast<QuantActivation>(from),
                                               static_cast<QuantActivation>(to))] =
        e.at(2).get<std::uint64_t>();
  }
  for (const auto& e : j.at("group_pair_hist")) {
    int a = e.at(0).get<int>(), b = e.at(1).get<int>();
    if (a < 0 || a >= kGroupCount || b < 0 || b >= kGroupCount)
      throw data_error("stats file: group index out of range");
    s.group_pair_hist[static_cast<std::size_t>(a * kGroupCount + b)] = e.at(2).get<std::uint64_t>();
  }
  for (const auto& e : j.at("group_samples")) {
    int g = e.at("msb_bin").get<int>() * kHwBins + e.at("hw_bin").get<int>();
    if (g < 0 || g >= kGroupCount) throw data_error("stats file: group_samples bin out of range");
    for (const auto& v : e.at("values")) {
      PartialSum p = v.get<PartialSum>();
      if (group_of(p).index() != g) throw data_error("stats file: sample value in wrong group");
      s.group_samples[static_cast<std::size_t>(g)].offer(p, s.reservoir_cap);
    }
  }
  std::uint64_t at = 0, pt = 0;
  for (auto c : s.act_hist) at += c;
  for (auto c : s.group_pair_hist) pt += c;
  s.total_act_transitions = at;
  s.total_psum_transitions = pt;
  std::uint64_t want_at = j.at("total_act_transitions").get<std::uint64_t>();
  std::uint64_t want_pt = j.at("total_psum_transitions").get<std::uint64_t>();
  if (at != want_at || pt != want_pt) throw data_error("stats file: histogram totals do not match");
  return s;
}

}  // namespace wattsel
