#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wattsel/common.hpp"
#include "wattsel/energy_model.hpp"
#include "wattsel/profiling.hpp"
#include "wattsel/qnn.hpp"
#include "wattsel/selection.hpp"

namespace wattsel {

struct CompressionConfig {
  double prune_ratio = 0.0;
  int set_size = 256;

  bool operator==(const CompressionConfig&) const = default;
};

struct GridSpec {
  std::vector<double> prune_ratios{0.3, 0.5, 0.7};
  std::vector<int> set_sizes{32, 24, 16};

  void validate() const {
    if (prune_ratios.empty() || set_sizes.empty()) throw config_error("grid: must be nonempty");
    for (double r : prune_ratios)
      if (!(r >= 0.0 && r < 1.0)) throw config_error("grid: prune ratios must be in [0,1)");
    for (int s : set_sizes)
      if (s < 2 || s > 256) throw config_error("grid: set sizes must be in [2,256]");
  }
};

/// Aggressiveness order: descending prune ratio, then ascending set size.
inline std::vector<CompressionConfig> rank_configs(const GridSpec& grid) {
  grid.validate();
  std::vector<double> ratios = grid.prune_ratios;
  std::vector<int> sizes = grid.set_sizes;
  std::sort(ratios.begin(), ratios.end(), std::greater<>());
  ratios.erase(std::unique(ratios.begin(), ratios.end()), ratios.end());
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  std::vector<CompressionConfig> out;
  for (double r : ratios)
    for (int s : sizes) out.push_back({r, s});
  return out;
}

/// Conv layer indices in descending energy-share order (stable; ties keep
/// the lower layer index first).
inline std::vector<int> order_layers(const std::vector<int>& conv_indices,
                                     const std::vector<double>& shares) {
  if (conv_indices.size() != shares.size())
    throw config_error("order_layers: shares must align with conv layers");
  std::vector<std::size_t> pos(conv_indices.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  std::stable_sort(pos.begin(), pos.end(),
                   [&](std::size_t a, std::size_t b) { return shares[a] > shares[b]; });
  std::vector<int> out;
  for (std::size_t p : pos) out.push_back(conv_indices[p]);
  return out;
}

struct LayerPlan {
  int layer_index = -1;
  double rho = 0.0;
  std::optional<CompressionConfig> chosen;
  std::vector<std::int8_t> candidate_set;
  double e_before = 0.0, e_after = 0.0;
  double acc_after = 0.0;
  std::string status = "skipped";  // compressed | skipped | infeasible
  std::vector<RemovalRecord> removal_log;
  int k_init_used = 0;
};

struct TrialRecord {
  int layer_index = -1;
  CompressionConfig config;
  double accuracy = 0.0;
  double e_after = 0.0;
  bool accepted = false;
  std::string status;
};

struct CompressionReport {
  std::string model_fingerprint;
  std::string tool_version = kToolVersion;
  std::string mode = "layerwise";  // layerwise | global
  double acc0 = 0.0, delta = 0.0;
  std::vector<LayerPlan> plans;  // in processing order (descending rho)
  double total_e_before = 0.0, total_e_after = 0.0, saving_pct = 0.0;
  double final_accuracy = 0.0;
  std::uint64_t seed = 0;
  bool fast_mode = true;
  std::uint64_t eval_overflows = 0;
  std::vector<TrialRecord> trials;
};

// ---------------------------------------------------------------------------

/// Applies one configuration to one layer on a private network copy:
/// prune -> calibrate -> initial set -> backward elimination -> re-estimate
/// energy and global accuracy. The input network is never mutated; the
/// caller commits the returned copy when it accepts the plan.
inline std::pair<QuantizedNetwork, LayerPlan> compress_layer(
    const QuantizedNetwork& net, int layer_index, const CompressionConfig& config,
    const WeightPowerTable& table, const Dataset& calib, const Dataset& val,
    const SelectionParams& params, const ArrayConfig& cfg) {
  QuantizedNetwork work = net;
  auto& conv = std::get<ConvLayer>(work.layers[static_cast<std::size_t>(layer_index)]);

  LayerPlan plan;
  plan.layer_index = layer_index;
  plan.e_before = layer_energy(work, layer_index, table, cfg).e_layer;

  std::vector<std::int8_t> entry_weights = conv.weights;
  std::vector<std::int32_t> entry_bias = conv.bias;

  magnitude_prune(conv, config.prune_ratio);
  calibrate_bias(work, layer_index, entry_weights, entry_bias, calib, params.calib_subset,
                 params.threads);

  LayerEvalContext ctx(work, layer_index, calib, val, params);
  double acc0_sel = ctx.evaluate(conv.weights, conv.bias);

  SelectionParams sel = params;
  sel.k_target = config.set_size;
  int k_init_eff = std::max(params.k_init, config.set_size);

  CandidateSet cs;
  try {
    cs = initial_candidate_set(work, layer_index, table, ctx, sel, acc0_sel, k_init_eff);
  } catch (const NotRestrictableError&) {
    plan.status = "infeasible";
    plan.e_after = plan.e_before;
    return {net, plan};  // network unchanged
  }
  plan.k_init_used = cs.k_init;
  apply_candidate_set(work, layer_index, cs, table, ctx);

  auto [final_cs, log] = greedy_backward_eliminate(work, layer_index, std::move(cs), table, ctx,
                                                   sel, acc0_sel, cfg);
  plan.removal_log = std::move(log);
  plan.candidate_set = *conv.candidate_set;
  plan.e_after = layer_energy(work, layer_index, table, cfg).e_layer;
  plan.acc_after = accuracy(work, val, -1, params.threads).top1;
  plan.status = "candidate";
  return {std::move(work), plan};
}

/// Energy-prioritized layer-wise compression: layers in descending energy
/// share, configurations per layer in aggressiveness order, first
/// configuration accepted whose cumulative-network accuracy stays within
/// delta of the baseline and whose energy does not increase.
inline std::pair<QuantizedNetwork, CompressionReport> compress_network(
    const QuantizedNetwork& net0, const Dataset& calib, const Dataset& val,
    const std::vector<WeightPowerTable>& tables, const SelectionParams& params,
    const GridSpec& grid, const ArrayConfig& cfg, std::uint64_t seed) {
  params.validate();
  cfg.validate();
  auto convs = net0.conv_indices();
  if (convs.empty()) throw error("compress_network: no conv layers");
  if (tables.size() != convs.size())
    throw config_error("compress_network: one power table per conv layer required");

  QuantizedNetwork net = net0;
  CompressionReport report;
  report.model_fingerprint = network_fingerprint(net0);
  report.delta = params.delta;
  report.seed = seed;
  report.fast_mode = params.fast_mode;

  AccuracyResult base = accuracy(net, val, -1, params.threads);
  report.acc0 = base.top1;
  report.eval_overflows = base.overflows;

  std::vector<double> shares = energy_shares(net, tables, cfg);
  std::vector<int> order = order_layers(convs, shares);
  auto configs = rank_configs(grid);

  double cur_acc = report.acc0;
  for (int li : order) {
    std::size_t ti = 0;
    while (convs[ti] != li) ++ti;
    LayerPlan accepted_plan;
    bool accepted = false;
    for (const CompressionConfig& config : configs) {
      auto [candidate_net, plan] = compress_layer(net, li, config, tables[ti], calib, val, params, cfg);
      TrialRecord tr;
      tr.layer_index = li;
      tr.config = config;
      tr.accuracy = plan.acc_after;
      tr.e_after = plan.e_after;
      tr.status = plan.status;
      if (plan.status == "candidate" && plan.acc_after >= report.acc0 - params.delta &&
          plan.e_after <= plan.e_before) {
        tr.accepted = true;
        report.trials.push_back(tr);
        net = std::move(candidate_net);
        plan.status = "compressed";
        plan.chosen = config;
        cur_acc = plan.acc_after;
        accepted_plan = std::move(plan);
        accepted = true;
        break;
      }
      report.trials.push_back(tr);
    }
    if (!accepted) {
      accepted_plan.layer_index = li;
      accepted_plan.status = "skipped";
      accepted_plan.e_before = layer_energy(net, li, tables[ti], cfg).e_layer;
      accepted_plan.e_after = accepted_plan.e_before;
      accepted_plan.acc_after = cur_acc;
    }
    accepted_plan.rho = shares[ti];
    report.plans.push_back(std::move(accepted_plan));
  }

  for (const LayerPlan& p : report.plans) {
    report.total_e_before += p.e_before;
    report.total_e_after += p.e_after;
  }
  report.saving_pct = 1.0 - report.total_e_after / report.total_e_before;
  report.final_accuracy = accuracy(net, val, -1, params.threads).top1;
  return {std::move(net), std::move(report)};
}

// ---------------------------------------------------------------------------
// Global (layer-agnostic) baseline: one configuration for every conv
// layer and a single shared candidate set built from network-wide
// statistics, eliminated down to the exact target size. A fixed weight
// budget is enforced rather than the accuracy constraint, which is what a
// uniform compression scheme does; the run is recorded with delta = 1.

inline std::pair<QuantizedNetwork, CompressionReport> global_compress_baseline(
    const QuantizedNetwork& net0, const Dataset& calib, const Dataset& val,
    const LayerTransitionStats& merged_stats, const CompressionConfig& config,
    const SelectionParams& params, const ArrayConfig& cfg, std::uint64_t seed) {
  params.validate();
  cfg.validate();
  auto convs = net0.conv_indices();
  if (convs.empty()) throw error("global_compress_baseline: no conv layers");

  QuantizedNetwork net = net0;
  CompressionReport report;
  report.mode = "global";
  report.model_fingerprint = network_fingerprint(net0);
  report.delta = 1.0;
  report.seed = seed;
  report.fast_mode = params.fast_mode;
  report.acc0 = accuracy(net, val, -1, params.threads).top1;

  WeightPowerTable shared_table =
      build_power_table(merged_stats, std::max(1000, 2048), derive_seed(seed, 0x676C6F62ull),
                        params.threads);

  std::vector<double> e_before(convs.size());
  for (std::size_t i = 0; i < convs.size(); ++i)
    e_before[i] = layer_energy(net, convs[i], shared_table, cfg).e_layer;

  // uniform prune + per-layer bias calibration
  std::vector<std::vector<std::int8_t>> entry_w;
  std::vector<std::vector<std::int32_t>> entry_b;
  for (int li : convs) {
    auto& conv = std::get<ConvLayer>(net.layers[static_cast<std::size_t>(li)]);
    entry_w.push_back(conv.weights);
    entry_b.push_back(conv.bias);
    magnitude_prune(conv, config.prune_ratio);
  }
  for (std::size_t i = 0; i < convs.size(); ++i)
    calibrate_bias(net, convs[i], entry_w[i], entry_b[i], calib, params.calib_subset, params.threads);

  // shared candidate set from aggregate usage
  std::array<std::uint64_t, 256> usage{};
  for (int li : convs) {
    auto u = usage_counts(std::get<ConvLayer>(net.layers[static_cast<std::size_t>(li)]));
    for (std::size_t i = 0; i < 256; ++i) usage[i] += u[i];
  }
  auto ranking = joint_score_ranking(shared_table, usage, params.lambda_usage);
  int k0 = std::min(256, std::max(params.k_init, config.set_size));
  std::vector<std::int8_t> values(ranking.begin(), ranking.begin() + k0);
  if (std::find(values.begin(), values.end(), std::int8_t{0}) == values.end()) values.back() = 0;

  QuantizedNetwork post_prune = net;  // calibration reference state
  auto project_all = [&](QuantizedNetwork& target, const std::vector<std::int8_t>& cs) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      auto& conv = std::get<ConvLayer>(target.layers[static_cast<std::size_t>(convs[i])]);
      project_weights(conv, cs, shared_table.power.data());
    }
  };
  auto recalibrate_all = [&](QuantizedNetwork& target) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const auto& ref = std::get<ConvLayer>(post_prune.layers[static_cast<std::size_t>(convs[i])]);
      calibrate_bias(target, convs[i], ref.weights, ref.bias, calib, params.calib_subset,
                     params.threads);
    }
  };

  project_all(net, values);
  recalibrate_all(net);

  std::set<std::int8_t> essential;
  bool any_masked = false;
  for (int li : convs) {
    const auto& conv = std::get<ConvLayer>(net.layers[static_cast<std::size_t>(li)]);
    if (std::find(conv.mask.begin(), conv.mask.end(), std::uint8_t{0}) != conv.mask.end())
      any_masked = true;
  }
  if (any_masked) essential.insert(0);

  std::vector<RemovalRecord> log;
  int iteration = 0;
  auto total_energy = [&](const QuantizedNetwork& target) {
    double e = 0.0;
    for (std::size_t i = 0; i < convs.size(); ++i)
      e += layer_energy(target, convs[i], shared_table, cfg).e_layer;
    return e;
  };
  double e_cur = total_energy(net);
  double acc_cur = accuracy(net, val, params.eval_subset, params.threads).top1;

  while (static_cast<int>(values.size()) > config.set_size) {
    struct Trial {
      std::int8_t w;
      double de = 0.0, acc = 0.0;
      QuantizedNetwork state;
    };
    std::vector<Trial> trials;
    for (std::int8_t w : values) {
      if (essential.count(w)) continue;
      trials.push_back({w, 0.0, 0.0, {}});
    }
    if (trials.empty()) break;

    for (Trial& t : trials) {
      std::vector<std::int8_t> survivors;
      for (std::int8_t v : values)
        if (v != t.w) survivors.push_back(v);
      t.state = net;
      project_all(t.state, survivors);
      t.de = e_cur - total_energy(t.state);
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
    for (Trial& t : trials) t.acc = accuracy(t.state, val, params.eval_subset, params.threads).top1;

    Trial* best = &trials[0];
    double best_score = -1;
    for (Trial& t : trials) {
      double s = removal_score(std::max(t.de, 0.0), acc_cur - t.acc, params.epsilon);
      if (s > best_score) {
        best_score = s;
        best = &t;
      }
    }

    ++iteration;
    RemovalRecord rec;
    rec.iteration = iteration;
    rec.weight = best->w;
    rec.delta_acc = acc_cur - best->acc;
    if (best->de < 0.0) {
      rec.delta_e = 0.0;
      rec.score = removal_score(0.0, rec.delta_acc, params.epsilon);
      rec.accepted = false;
      rec.resulting_acc = best->acc;
      essential.insert(best->w);
    } else {
      rec.delta_e = best->de;
      rec.score = removal_score(best->de, rec.delta_acc, params.epsilon);
      rec.accepted = true;
      net = std::move(best->state);
      recalibrate_all(net);
      values.erase(std::find(values.begin(), values.end(), best->w));
      e_cur = total_energy(net);
      acc_cur = accuracy(net, val, params.eval_subset, params.threads).top1;
      rec.resulting_acc = acc_cur;
    }
    log.push_back(rec);
  }

  std::vector<double> shares(convs.size());
  double tot = 0.0;
  for (double e : e_before) tot += e;
  for (std::size_t i = 0; i < convs.size(); ++i) shares[i] = e_before[i] / tot;
  auto order = order_layers(convs, shares);
  for (int li : order) {
    std::size_t ti = 0;
    while (convs[ti] != li) ++ti;
    LayerPlan plan;
    plan.layer_index = li;
    plan.rho = shares[ti];
    plan.chosen = config;
    plan.status = "compressed";
    plan.e_before = e_before[ti];
    plan.e_after = layer_energy(net, li, shared_table, cfg).e_layer;
    const auto& conv = std::get<ConvLayer>(net.layers[static_cast<std::size_t>(li)]);
    plan.candidate_set = conv.candidate_set.value_or(std::vector<std::int8_t>{});
    if (li == order.front()) plan.removal_log = log;  // shared set: one log, attached once
    report.plans.push_back(std::move(plan));
  }
  for (const LayerPlan& p : report.plans) {
    report.total_e_before += p.e_before;
    report.total_e_after += p.e_after;
  }
  double final_acc = accuracy(net, val, -1, params.threads).top1;
  for (auto& p : report.plans) p.acc_after = final_acc;
  report.saving_pct = 1.0 - report.total_e_after / report.total_e_before;
  report.final_accuracy = final_acc;
  return {std::move(net), std::move(report)};
}

// ---------------------------------------------------------------------------
// Report serialization.

inline nlohmann::json report_to_json(const CompressionReport& r) {
  nlohmann::json j;
  j["format"] = "wattsel-report";
  j["version"] = 1;
  j["tool_version"] = r.tool_version;
  j["model_fingerprint"] = r.model_fingerprint;
  j["mode"] = r.mode;
  j["acc0"] = r.acc0;
  j["delta"] = r.delta;
  j["seed"] = r.seed;
  j["fast_mode"] = r.fast_mode;
  j["total_e_before"] = r.total_e_before;
  j["total_e_after"] = r.total_e_after;
  j["saving_pct"] = r.saving_pct;
  j["final_accuracy"] = r.final_accuracy;
  j["eval_overflows"] = r.eval_overflows;
  auto& plans = j["plans"] = nlohmann::json::array();
  for (const auto& p : r.plans) {
    nlohmann::json e;
    e["layer_index"] = p.layer_index;
    e["rho"] = p.rho;
    e["status"] = p.status;
    if (p.chosen) {
      e["prune_ratio"] = p.chosen->prune_ratio;
      e["set_size"] = p.chosen->set_size;
    }
    nlohmann::json cs = nlohmann::json::array();
    for (std::int8_t v : p.candidate_set) cs.push_back(static_cast<int>(v));
    e["candidate_set"] = std::move(cs);
    e["e_before"] = p.e_before;
    e["e_after"] = p.e_after;
    e["acc_after"] = p.acc_after;
    e["k_init_used"] = p.k_init_used;
    e["removal_log"] = removal_log_to_json(p.removal_log);
    plans.push_back(std::move(e));
  }
  auto& trials = j["trials"] = nlohmann::json::array();
  for (const auto& t : r.trials) {
    nlohmann::json e;
    e["layer_index"] = t.layer_index;
    e["prune_ratio"] = t.config.prune_ratio;
    e["set_size"] = t.config.set_size;
    e["accuracy"] = t.accuracy;
    e["e_after"] = t.e_after;
    e["accepted"] = t.accepted;
    e["status"] = t.status;
    trials.push_back(std::move(e));
  }
  return j;
}

inline std::string report_to_csv(const CompressionReport& r) {
  CsvWriter w;
  w.field("fingerprint").field(r.model_fingerprint).field("tool_version").field(r.tool_version).endrow();
  w.field("layer").field("rho").field("status").field("prune_ratio").field("set_size")
      .field("e_before").field("e_after").field("acc_after").endrow();
  for (const auto& p : r.plans) {
    w.field(p.layer_index).field(p.rho).field(p.status);
    if (p.chosen)
      w.field(p.chosen->prune_ratio).field(p.chosen->set_size);
    else
      w.field("").field("");
    w.field(p.e_before).field(p.e_after).field(p.acc_after).endrow();
  }
  return w.str();
}

inline std::string trials_to_csv(const CompressionReport& r) {
  CsvWriter w;
  w.field("fingerprint").field(r.model_fingerprint).field("tool_version").field(r.tool_version).endrow();
  w.field("layer").field("prune_ratio").field("set_size").field("accuracy").field("e_after")
      .field("accepted").field("status").endrow();
  for (const auto& t : r.trials)
    w.field(t.layer_index).field(t.config.prune_ratio).field(t.config.set_size).field(t.accuracy)
        .field(t.e_after).field(t.accepted ? "1" : "0").field(t.status).endrow();
  return w.str();
}

}  // namespace wattsel
