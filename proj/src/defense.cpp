#include "armtrig/defense.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace armtrig {

std::string to_string(PruneCriterion c) {
  return c == PruneCriterion::WeightMagnitude ? "WeightMagnitude" : "CleanActivation";
}
std::string to_string(PruneScope s) { return s == PruneScope::Fusion ? "Fusion" : "AllHidden"; }

PruneCriterion prune_criterion_from_string(const std::string& s) {
  if (s == "WeightMagnitude") return PruneCriterion::WeightMagnitude;
  if (s == "CleanActivation") return PruneCriterion::CleanActivation;
  throw ConfigError("unknown prune criterion '" + s + "'");
}

PruneScope prune_scope_from_string(const std::string& s) {
  if (s == "Fusion") return PruneScope::Fusion;
  if (s == "AllHidden") return PruneScope::AllHidden;
  throw ConfigError("unknown prune scope '" + s + "'");
}

namespace {

// Index of each hidden layer in hidden_activations() order.
std::vector<std::string> hidden_layer_names(const PolicyConfig& c) {
  std::vector<std::string> names{"visual", "language", "state"};
  for (std::size_t i = 0; i < c.fusion_widths.size(); ++i) names.push_back("fusion." + std::to_string(i));
  return names;
}

/// Where a hidden layer's outputs are consumed: the weight tensor and the
/// column offset of unit 0 inside it.
struct Consumer {
  std::string tensor;
  std::size_t column = 0;
};

Consumer consumer_of(const PolicyConfig& c, const std::string& layer) {
  if (layer == "visual") return {c.fusion_widths.empty() ? "head.weight" : "fusion.0.weight", 0};
  const std::string first = c.fusion_widths.empty() ? "head.weight" : "fusion.0.weight";
  if (layer == "language") return {first, static_cast<std::size_t>(c.visual_width)};
  if (layer == "state") return {first, static_cast<std::size_t>(c.visual_width + c.language_width)};
  const std::size_t i = std::stoul(layer.substr(std::string("fusion.").size()));
  if (i + 1 < c.fusion_widths.size()) return {"fusion." + std::to_string(i + 1) + ".weight", 0};
  return {"head.weight", 0};
}

bool unit_is_zero(const PolicyParams& p, const std::string& layer, std::size_t u) {
  const auto& w = p.tensor(layer + ".weight");
  const auto& b = p.tensor(layer + ".bias");
  const auto row = p.view(w).subspan(u * w.cols, w.cols);
  if (std::any_of(row.begin(), row.end(), [](double x) { return x != 0.0; })) return false;
  if (p.values[b.offset + u] != 0.0) return false;
  const Consumer c = consumer_of(p.config, layer);
  const auto& out = p.tensor(c.tensor);
  for (std::size_t r = 0; r < out.rows; ++r)
    if (p.values[out.offset + r * out.cols + c.column + u] != 0.0) return false;
  return true;
}

void zero_unit(PolicyParams& p, const std::string& layer, std::size_t u) {
  const auto& w = p.tensor(layer + ".weight");
  const auto& b = p.tensor(layer + ".bias");
  auto row = p.view(w).subspan(u * w.cols, w.cols);
  std::fill(row.begin(), row.end(), 0.0);
  p.values[b.offset + u] = 0.0;
  const Consumer c = consumer_of(p.config, layer);
  const auto& out = p.tensor(c.tensor);
  for (std::size_t r = 0; r < out.rows; ++r) p.values[out.offset + r * out.cols + c.column + u] = 0.0;
}

}  // namespace

std::vector<std::string> prunable_layers(const PolicyConfig& config, PruneScope scope) {
  std::vector<std::string> names = hidden_layer_names(config);
  if (scope == PruneScope::Fusion) names.erase(names.begin(), names.begin() + 3);
  return names;
}

std::size_t zeroed_units(const PolicyParams& params, const std::string& layer) {
  const std::size_t units = params.tensor(layer + ".bias").rows;
  std::size_t n = 0;
  for (std::size_t u = 0; u < units; ++u) n += unit_is_zero(params, layer, u);
  return n;
}

PolicyParams fine_prune(const PolicyParams& params, const PruneConfig& cfg, std::span<const Sample> probe) {
  if (!(cfg.ratio >= 0.0)) throw ConfigError("prune ratio must be >= 0");
  if (cfg.criterion == PruneCriterion::CleanActivation && probe.empty())
    throw PreconditionError("fine_prune: CleanActivation needs a clean probe batch");
  PolicyParams out = params;
  if (cfg.ratio == 0.0) return out;

  const auto layers = prunable_layers(params.config, cfg.scope);
  const auto all = hidden_layer_names(params.config);

  // mean |activation| per hidden layer, only when the criterion needs it
  std::vector<std::vector<double>> activity;
  if (cfg.criterion == PruneCriterion::CleanActivation) {
    for (const Sample& s : probe) {
      const auto h = hidden_activations(params, {&s.step->observation, s.instruction, s.step->state});
      if (activity.empty()) {
        activity.resize(h.size());
        for (std::size_t l = 0; l < h.size(); ++l) activity[l].assign(h[l].size(), 0.0);
      }
      for (std::size_t l = 0; l < h.size(); ++l)
        for (std::size_t u = 0; u < h[l].size(); ++u) activity[l][u] += std::abs(h[l][u]);
    }
  }

  for (const auto& layer : layers) {
    const auto& w = params.tensor(layer + ".weight");
    const std::size_t units = w.rows;
    const auto quota = static_cast<std::size_t>(std::floor(cfg.ratio * static_cast<double>(units)));
    if (quota >= units) throw OverPruned("fine_prune: layer '" + layer + "' would lose every unit");

    std::vector<std::size_t> alive;
    std::size_t already = 0;
    for (std::size_t u = 0; u < units; ++u) {
      if (unit_is_zero(params, layer, u))
        ++already;
      else
        alive.push_back(u);
    }
    if (already >= quota) continue;

    std::vector<double> key(units, 0.0);
    if (cfg.criterion == PruneCriterion::WeightMagnitude) {
      for (std::size_t u = 0; u < units; ++u) {
        double s = 0.0;
        for (double x : params.view(w).subspan(u * w.cols, w.cols)) s += x * x;
        key[u] = -std::sqrt(s);  // largest norm first
      }
    } else {
      const auto idx = static_cast<std::size_t>(std::find(all.begin(), all.end(), layer) - all.begin());
      key = activity[idx];  // least active first
    }
    std::stable_sort(alive.begin(), alive.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
    for (std::size_t i = 0; i < quota - already; ++i) zero_unit(out, layer, alive[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

int compression_block(int quality) {
  return static_cast<int>(std::lround(1.0 + 7.0 * (100.0 - quality) / 50.0));
}

int compression_levels(int quality) { return static_cast<int>(std::lround(256.0 * quality / 100.0)); }

Observation compress_observation(const Observation& obs, const CompressionConfig& cfg) {
  if (cfg.quality < 1 || cfg.quality > 100) throw ConfigError("compression quality must lie in [1, 100]");
  if (cfg.quality == 100) return obs;
  const int b = compression_block(cfg.quality);
  const int levels = compression_levels(cfg.quality);
  const int h = obs.resolution.height, w = obs.resolution.width;
  Observation out = obs;
  for (int r0 = 0; r0 < h; r0 += b)
    for (int c0 = 0; c0 < w; c0 += b) {
      const int r1 = std::min(h, r0 + b), c1 = std::min(w, c0 + b);
      double sum = 0.0;
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) sum += obs.at(r, c);
      const double mean = sum / static_cast<double>((r1 - r0) * (c1 - c0));
      const double q = std::round(std::clamp(mean, 0.0, 1.0) * (levels - 1)) / (levels - 1);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) out.pixels[static_cast<std::size_t>(r) * w + c] = static_cast<float>(q);
    }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

DefenseRow measure_row(const std::string& name, double strength, const PolicyParams& params, const TaskSpec& task,
                       const ArmGeometry& geom, Resolution res, const TriggerPerturbation& trigger,
                       const EvalConfig& cfg, const ObservationFilter& filter) {
  EvalConfig c = cfg;
  c.trigger = trigger;
  const EvalReport r = evaluate_policy(params, task, geom, res, c, filter);
  return {name, strength, *r.sr, *r.asr, cfg.n_trials, cfg.scene_seed_base};
}

}  // namespace

std::vector<DefenseRow> defended_eval_prune(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom,
                                            Resolution res, const TriggerPerturbation& trigger,
                                            const std::vector<double>& ratios, const EvalConfig& cfg,
                                            PruneCriterion criterion, PruneScope scope,
                                            std::span<const Sample> probe) {
  std::vector<DefenseRow> rows;
  for (double ratio : ratios) {
    const PolicyParams pruned = fine_prune(params, {ratio, criterion, scope}, probe);
    rows.push_back(measure_row("prune", ratio, pruned, task, geom, res, trigger, cfg, {}));
  }
  return rows;
}

std::vector<DefenseRow> defended_eval_compress(const PolicyParams& params, const TaskSpec& task,
                                               const ArmGeometry& geom, Resolution res,
                                               const TriggerPerturbation& trigger, const std::vector<int>& qualities,
                                               const EvalConfig& cfg) {
  std::vector<DefenseRow> rows;
  for (int q : qualities) {
    const CompressionConfig cc{q};
    ObservationFilter filter;
    if (q != 100) filter = [cc](const Observation& o) { return compress_observation(o, cc); };
    rows.push_back(measure_row("compress", q, params, task, geom, res, trigger, cfg, filter));
  }
  return rows;
}

std::string defense_csv(const std::vector<DefenseRow>& rows) {
  std::ostringstream out;
  out << "defense,strength,sr,asr,n_trials,seed\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%g,%.4f,%.4f", r.strength, r.sr, r.asr);
    out << r.defense << ',' << buf << ',' << r.n_trials << ',' << r.seed << '\n';
  }
  return out.str();
}

}  // namespace armtrig
