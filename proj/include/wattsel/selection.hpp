#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "wattsel/common.hpp"
#include "wattsel/energy_model.hpp"
#include "wattsel/qnn.hpp"

namespace wattsel {

struct SelectionParams {
  double epsilon = 1e-4;    // removal-score stabilizer
  double delta = 0.03;      // tolerated accuracy drop below the reference
  int k_init = 32;
  int k_target = 16;
  double lambda_usage = 0.5;  // usage weight in the joint score
  int eval_subset = 1024;     // validation samples per accuracy probe
  int calib_subset = 256;     // calibration samples per bias fit
  bool fast_mode = true;      // probe accuracy only for the top candidates by energy delta
  int fast_top = 8;
  int growth_step = 8;
  int growth_cap = 256;
  int threads = 0;  // 0 = hardware concurrency

  void validate() const {
    if (!(epsilon > 0.0)) throw config_error("selection params: epsilon must be positive");
    if (!(delta >= 0.0 && delta < 1.0) && delta != 1.0)
      throw config_error("selection params: delta must be in [0,1]");
    if (k_init < 1 || k_init > 256 || k_target < 1 || k_target > 256)
      throw config_error("selection params: set sizes must be in [1,256]");
    if (!(lambda_usage >= 0.0 && lambda_usage <= 1.0))
      throw config_error("selection params: lambda must be in [0,1]");
  }
};

struct CandidateSet {
  int layer_index = -1;
  std::vector<std::int8_t> values;     // in descending joint-score order
  std::set<std::int8_t> essential;
  int k_init = 0;
  int k_target = 0;

  bool contains(std::int8_t w) const {
    return std::find(values.begin(), values.end(), w) != values.end();
  }
};

struct RemovalRecord {
  int iteration = 0;
  std::int8_t weight = 0;
  double delta_e = 0.0;   // estimated layer-energy saving, >= 0
  double delta_acc = 0.0; // accuracy drop (negative when accuracy improved)
  double score = 0.0;
  bool accepted = false;
  double resulting_acc = 0.0;
};

/// S(w) = dE / (dAcc + eps), with the denominator floored at eps so an
/// accuracy improvement yields the maximal finite score for its dE.
inline double removal_score(double delta_e, double delta_acc, double epsilon) {
  return delta_e / std::max(delta_acc + epsilon, epsilon);
}

/// Occurrence count of each weight value in the layer (all positions;
/// pruned positions count as stationary zeros).
inline std::array<std::uint64_t, 256> usage_counts(const ConvLayer& l) {
  std::array<std::uint64_t, 256> u{};
  for (std::int8_t w : l.weights) ++u[static_cast<std::size_t>(static_cast<int>(w) + 128)];
  return u;
}

namespace detail {

/// Average-rank normalization to [0,1] (ties share their mean rank).
inline std::array<double, 256> rank_norm(const std::array<double, 256>& metric) {
  std::array<int, 256> idx;
  for (int i = 0; i < 256; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    return metric[static_cast<std::size_t>(a)] < metric[static_cast<std::size_t>(b)];
  });
  std::array<double, 256> rank{};
  std::size_t i = 0;
  while (i < 256) {
    std::size_t j = i;
    while (j + 1 < 256 && metric[static_cast<std::size_t>(idx[j + 1])] ==
                              metric[static_cast<std::size_t>(idx[i])])
      ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) rank[static_cast<std::size_t>(idx[t])] = avg / 255.0;
    i = j + 1;
  }
  return rank;
}

}  // namespace detail

/// All 256 weight values ranked by lambda * rank(usage) - (1-lambda) *
/// rank(power), descending. Ties break toward smaller magnitude, then
/// smaller value.
inline std::vector<std::int8_t> joint_score_ranking(const WeightPowerTable& table,
                                                    const std::array<std::uint64_t, 256>& usage,
                                                    double lambda) {
  std::array<double, 256> u{}, p{};
  for (int i = 0; i < 256; ++i) {
    u[static_cast<std::size_t>(i)] = static_cast<double>(usage[static_cast<std::size_t>(i)]);
    p[static_cast<std::size_t>(i)] = table.power[static_cast<std::size_t>(i)];
  }
  auto ur = detail::rank_norm(u), pr = detail::rank_norm(p);
  std::array<double, 256> score{};
  for (std::size_t i = 0; i < 256; ++i) score[i] = lambda * ur[i] - (1.0 - lambda) * pr[i];
  std::vector<std::int8_t> order(256);
  for (int i = 0; i < 256; ++i) order[static_cast<std::size_t>(i)] = static_cast<std::int8_t>(i - 128);
  std::sort(order.begin(), order.end(), [&](std::int8_t a, std::int8_t b) {
    double sa = score[static_cast<std::size_t>(static_cast<int>(a) + 128)];
    double sb = score[static_cast<std::size_t>(static_cast<int>(b) + 128)];
    if (sa != sb) return sa > sb;
    int ma = std::abs(static_cast<int>(a)), mb = std::abs(static_cast<int>(b));
    if (ma != mb) return ma < mb;
    return a < b;
  });
  return order;
}

/// The k lowest-power values (ties toward smaller magnitude, then value);
/// the baseline "pick the cheapest weights" strategy.
inline std::vector<std::int8_t> naive_lowest_power_set(const WeightPowerTable& table, int k) {
  std::vector<std::int8_t> order(256);
  for (int i = 0; i < 256; ++i) order[static_cast<std::size_t>(i)] = static_cast<std::int8_t>(i - 128);
  std::sort(order.begin(), order.end(), [&](std::int8_t a, std::int8_t b) {
    double pa = table.at(a), pb = table.at(b);
    if (pa != pb) return pa < pb;
    int ma = std::abs(static_cast<int>(a)), mb = std::abs(static_cast<int>(b));
    if (ma != mb) return ma < mb;
    return a < b;
  });
  order.resize(static_cast<std::size_t>(std::min(k, 256)));
  if (std::find(order.begin(), order.end(), std::int8_t{0}) == order.end()) order.back() = 0;
  return order;
}

// ---------------------------------------------------------------------------
// Evaluation context for one layer: caches the layer's inputs over a fixed
// validation subset and the unrolled calibration inputs, so per-candidate
// probes only rerun the layer and its suffix.

class LayerEvalContext {
 public:
  LayerEvalContext(const QuantizedNetwork& net, int layer_index, const Dataset& calib,
                   const Dataset& val, const SelectionParams& params)
      : net_(net), layer_index_(layer_index), threads_(params.threads) {
    const auto* conv = std::get_if<ConvLayer>(&net.layers[static_cast<std::size_t>(layer_index)]);
    if (!conv) throw error("LayerEvalContext: layer is not convolutional");
    ref_weights_ = conv->weights;
    ref_bias_ = conv->bias;

    int n_eval = std::min<int>(params.eval_subset, val.n);
    if (n_eval < 1) throw data_error("LayerEvalContext: empty validation subset");
    eval_inputs_.resize(static_cast<std::size_t>(n_eval));
    eval_labels_.resize(static_cast<std::size_t>(n_eval));
    parallel_for(static_cast<std::size_t>(n_eval), threads_, [&](std::size_t i) {
      eval_inputs_[i] = forward_to(net, static_cast<std::size_t>(layer_index), val.image(static_cast<int>(i)));
      eval_labels_[i] = val.labels[i];
    });

    int n_cal = std::min<int>(params.calib_subset, calib.n);
    if (n_cal < 1) throw data_error("LayerEvalContext: empty calibration subset");
    calib_cols_.resize(static_cast<std::size_t>(n_cal));
    ref_acc_.resize(static_cast<std::size_t>(n_cal));
    parallel_for(static_cast<std::size_t>(n_cal), threads_, [&](std::size_t i) {
      Tensor3 in = forward_to(net, static_cast<std::size_t>(layer_index), calib.image(static_cast<int>(i)));
      calib_cols_[i] = im2col(in, conv->k, conv->stride, conv->pad);
      ref_acc_[i] = conv_preact(ref_weights_, ref_bias_, conv->c_out, calib_cols_[i]);
    });
  }

  const std::vector<std::int8_t>& ref_weights() const { return ref_weights_; }
  const std::vector<std::int32_t>& ref_bias() const { return ref_bias_; }
  int layer_index() const { return layer_index_; }

  /// Bias vector correcting the mean pre-activation drift of `weights`
  /// against the reference capture.
  std::vector<std::int32_t> calibrate(const std::vector<std::int8_t>& weights) const {
    const auto& conv = layer();
    std::vector<std::vector<std::int64_t>> shard(calib_cols_.size());
    parallel_for(calib_cols_.size(), threads_, [&](std::size_t i) {
      auto cur = conv_preact(weights, ref_bias_, conv.c_out, calib_cols_[i]);
      auto& s = shard[i];
      s.assign(static_cast<std::size_t>(conv.c_out), 0);
      for (int co = 0; co < conv.c_out; ++co) {
        auto base = static_cast<std::size_t>(co) * static_cast<std::size_t>(calib_cols_[i].cols);
        for (int j = 0; j < calib_cols_[i].cols; ++j)
          s[static_cast<std::size_t>(co)] += cur[base + static_cast<std::size_t>(j)] -
                                             ref_acc_[i][base + static_cast<std::size_t>(j)];
      }
    });
    std::vector<std::int32_t> bias = ref_bias_;
    for (int co = 0; co < conv.c_out; ++co) {
      std::int64_t err = 0, cnt = 0;
      for (std::size_t i = 0; i < shard.size(); ++i) {
        err += shard[i][static_cast<std::size_t>(co)];
        cnt += calib_cols_[i].cols;
      }
      bias[static_cast<std::size_t>(co)] -= round_half_away(static_cast<double>(err) / static_cast<double>(cnt));
    }
    return bias;
  }

  /// Subset accuracy with the layer's weights/bias replaced.
  double evaluate(const std::vector<std::int8_t>& weights, const std::vector<std::int32_t>& bias) const {
    QuantizedNetwork probe = net_;
    auto& conv = std::get<ConvLayer>(probe.layers[static_cast<std::size_t>(layer_index_)]);
    conv.weights = weights;
    conv.bias = bias;
    std::vector<std::uint8_t> ok(eval_inputs_.size(), 0);
    parallel_for(eval_inputs_.size(), threads_, [&](std::size_t i) {
      Tensor3 t = conv_forward_direct(conv, eval_inputs_[i]);
      t = forward_from(probe, static_cast<std::size_t>(layer_index_) + 1, std::move(t));
      ok[i] = argmax_class(t) == eval_labels_[i] ? 1 : 0;
    });
    std::int64_t c = 0;
    for (auto v : ok) c += v;
    return static_cast<double>(c) / static_cast<double>(ok.size());
  }

  const ConvLayer& layer() const {
    return std::get<ConvLayer>(net_.layers[static_cast<std::size_t>(layer_index_)]);
  }

 private:
  const QuantizedNetwork& net_;
  int layer_index_;
  int threads_;
  std::vector<std::int8_t> ref_weights_;
  std::vector<std::int32_t> ref_bias_;
  std::vector<Tensor3> eval_inputs_;
  std::vector<std::int32_t> eval_labels_;
  std::vector<Mat8> calib_cols_;
  std::vector<std::vector<std::int32_t>> ref_acc_;
};

namespace detail {

inline std::vector<std::int8_t> project_copy(const ConvLayer& conv,
                                             std::span<const std::int8_t> candidates,
                                             const WeightPowerTable& table) {
  std::array<std::int8_t, 256> lut;
  for (int w = -128; w <= 127; ++w)
    lut[static_cast<std::size_t>(w + 128)] =
        nearest_candidate(static_cast<std::int8_t>(w), candidates, table.power.data());
  std::vector<std::int8_t> out = conv.weights;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (conv.mask[i]) out[i] = lut[static_cast<std::size_t>(out[i] + 128)];
  return out;
}

}  // namespace detail

struct NotRestrictableError : error {
  using error::error;
};

/// Grows a joint-score prefix (always containing 0) until projecting the
/// layer onto it keeps the subset accuracy within delta/2 of `acc0`.
inline CandidateSet initial_candidate_set(const QuantizedNetwork& net, int layer_index,
                                          const WeightPowerTable& table,
                                          const LayerEvalContext& ctx, const SelectionParams& params,
                                          double acc0, int k_init_override = 0) {
  params.validate();
  const auto& conv = std::get<ConvLayer>(net.layers[static_cast<std::size_t>(layer_index)]);
  auto ranking = joint_score_ranking(table, usage_counts(conv), params.lambda_usage);
  int k = k_init_override > 0 ? k_init_override : params.k_init;
  k = std::min(k, params.growth_cap);
  for (;;) {
    std::vector<std::int8_t> values(ranking.begin(), ranking.begin() + k);
    if (std::find(values.begin(), values.end(), std::int8_t{0}) == values.end()) values.back() = 0;
    auto weights = detail::project_copy(conv, values, table);
    auto bias = ctx.calibrate(weights);
    double acc = ctx.evaluate(weights, bias);
    if (acc >= acc0 - params.delta / 2.0) {
      CandidateSet cs;
      cs.layer_index = layer_index;
      cs.values = std::move(values);
      cs.k_init = k;
      cs.k_target = params.k_target;
      return cs;
    }
    if (k >= params.growth_cap) throw NotRestrictableError("layer not restrictable");
    k = std::min(k + params.growth_step, params.growth_cap);
  }
}

/// Projects the layer onto the set and calibrates; the starting point of
/// backward elimination.
inline void apply_candidate_set(QuantizedNetwork& net, int layer_index, const CandidateSet& cs,
                                const WeightPowerTable& table, const LayerEvalContext& ctx) {
  auto& conv = std::get<ConvLayer>(net.layers[static_cast<std::size_t>(layer_index)]);
  conv.weights = detail::project_copy(conv, cs.values, table);
  conv.bias = ctx.calibrate(conv.weights);
  std::vector<std::int8_t> sorted = cs.values;
  std::sort(sorted.begin(), sorted.end());
  conv.candidate_set = std::move(sorted);
}

/// One-step greedy backward elimination loop. Each iteration scores every
/// non-essential value by S = dE/(dAcc+eps); the best candidate is removed
/// when the constraint holds, marked essential otherwise. Also marks a
/// would-be removal essential when its energy delta is negative, so the
/// estimated layer energy never increases.
inline std::pair<CandidateSet, std::vector<RemovalRecord>> greedy_backward_eliminate(
    QuantizedNetwork& net, int layer_index, CandidateSet cs, const WeightPowerTable& table,
    const LayerEvalContext& ctx, const SelectionParams& params, double acc0,
    const ArrayConfig& cfg = {}) {
  params.validate();
  std::vector<RemovalRecord> log;
  auto& conv = std::get<ConvLayer>(net.layers[static_cast<std::size_t>(layer_index)]);
  bool pruning_active =
      std::find(conv.mask.begin(), conv.mask.end(), std::uint8_t{0}) != conv.mask.end();
  if (pruning_active) cs.essential.insert(0);

  QuantizedNetwork scratch = net;
  auto& sconv = std::get<ConvLayer>(scratch.layers[static_cast<std::size_t>(layer_index)]);

  double e_cur = layer_energy(net, layer_index, table, cfg).e_layer;
  double acc_cur = ctx.evaluate(conv.weights, conv.bias);
  int iteration = 0;

  struct Trial {
    std::int8_t w;
    double de = 0.0, dacc = 0.0, score = 0.0, acc = 0.0;
    std::vector<std::int8_t> weights;
    std::vector<std::int32_t> bias;
  };

  while (static_cast<int>(cs.values.size()) > cs.k_target) {
    std::vector<Trial> trials;
    for (std::int8_t w : cs.values) {
      if (cs.essential.count(w)) continue;
      trials.push_back({w, 0, 0, 0, 0, {}, {}});
    }
    if (trials.empty()) break;  // all remaining values are essential

    // energy delta: occurrences of w remapped to the nearest survivor
    for (Trial& t : trials) {
      std::vector<std::int8_t> survivors;
      for (std::int8_t v : cs.values)
        if (v != t.w) survivors.push_back(v);
      std::int8_t repl = nearest_candidate(t.w, survivors, table.power.data());
      t.weights = conv.weights;
      for (std::size_t i = 0; i < t.weights.size(); ++i)
        if (conv.mask[i] && t.weights[i] == t.w) t.weights[i] = repl;
      sconv.weights = t.weights;
      double e_new = layer_energy(scratch, layer_index, table, cfg).e_layer;
      t.de = e_cur - e_new;
    }

    if (params.fast_mode && static_cast<int>(trials.size()) > params.fast_top) {
      std::sort(trials.begin(), trials.end(), [](const Trial& a, const Trial& b) {
        if (a.de != b.de) return a.de > b.de;
        int ma = std::abs(static_cast<int>(a.w)), mb = std::abs(static_cast<int>(b.w));
        if (ma != mb) return ma < mb;
        return a.w < b.w;
      });
      trials.resize(static_cast<std::size_t>(params.fast_top));
    }

    for (Trial& t : trials) {
      t.bias = ctx.calibrate(t.weights);
      t.acc = ctx.evaluate(t.weights, t.bias);
      t.dacc = acc_cur - t.acc;
      t.score = removal_score(t.de, t.dacc, params.epsilon);
    }

    const Trial* best = &trials[0];
    for (const Trial& t : trials) {
      if (t.score > best->score ||
          (t.score == best->score &&
           (t.de > best->de ||
            (t.de == best->de && (std::abs(static_cast<int>(t.w)) < std::abs(static_cast<int>(best->w)) ||
                                  (std::abs(static_cast<int>(t.w)) == std::abs(static_cast<int>(best->w)) &&
                                   t.w < best->w))))))
        best = &t;
    }

    ++iteration;
    RemovalRecord rec;
    rec.iteration = iteration;
    rec.weight = best->w;
    rec.delta_acc = best->dacc;
    rec.resulting_acc = best->acc;
    if (best->de < 0.0) {
      // removal would raise the energy estimate: keep the value
      rec.delta_e = 0.0;
      rec.score = removal_score(0.0, best->dacc, params.epsilon);
      rec.accepted = false;
      cs.essential.insert(best->w);
    } else if (best->acc >= acc0 - params.delta) {
      rec.delta_e = best->de;
      rec.score = best->score;
      rec.accepted = true;
      conv.weights = best->weights;
      conv.bias = best->bias;
      cs.values.erase(std::find(cs.values.begin(), cs.values.end(), best->w));
      e_cur -= best->de;
      acc_cur = best->acc;
    } else {
      rec.delta_e = best->de;
      rec.score = best->score;
      rec.accepted = false;
      cs.essential.insert(best->w);
    }
    log.push_back(rec);
  }

  std::vector<std::int8_t> sorted = cs.values;
  std::sort(sorted.begin(), sorted.end());
  conv.candidate_set = std::move(sorted);
  return {std::move(cs), std::move(log)};
}

// ---------------------------------------------------------------------------
// Removal-log serialization.

inline nlohmann::json removal_log_to_json(const std::vector<RemovalRecord>& log) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : log) {
    nlohmann::json e;
    e["iteration"] = r.iteration;
    e["weight"] = static_cast<int>(r.weight);
    e["delta_e"] = r.delta_e;
    e["delta_acc"] = r.delta_acc;
    e["score"] = r.score;
    e["accepted"] = r.accepted;
    e["resulting_acc"] = r.resulting_acc;
    arr.push_back(std::move(e));
  }
  return arr;
}

inline std::string removal_log_to_csv(const std::vector<RemovalRecord>& log,
                                      const std::string& fingerprint) {
  CsvWriter w;
  w.field("fingerprint").field(fingerprint).field("tool_version").field(kToolVersion).endrow();
  w.field("iteration").field("weight").field("delta_e").field("delta_acc").field("score")
      .field("accepted").field("accuracy").endrow();
  for (const auto& r : log)
    w.field(r.iteration).field(int{r.weight}).field(r.delta_e).field(r.delta_acc).field(r.score)
        .field(r.accepted ? "1" : "0").field(r.resulting_acc).endrow();
  return w.str();
}

}  // namespace wattsel
