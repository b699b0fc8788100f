#include "armtrig/watermark.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "armtrig/parallel.hpp"

namespace armtrig {

using ojson = nlohmann::ordered_json;

void WatermarkConfig::validate() const {
  if (M < 2) throw ConfigError("watermark M must be >= 2");
  if (probe_scenes < 1) throw ConfigError("watermark probe_scenes must be >= 1");
  if (trials < 1) throw ConfigError("watermark trials must be >= 1");
  if (!(min_distance >= 0.0)) throw ConfigError("watermark min_distance must be >= 0");
  if (!(box > 0.0)) throw ConfigError("watermark box must be > 0");
  for (int k : k_values)
    if (k < 1 || k > M) throw ConfigError("watermark k values must lie in [1, M]");
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

namespace {

double distance(const TriggerPerturbation& a, const TriggerPerturbation& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < kJoints; ++j) s += (a.t[j] - b.t[j]) * (a.t[j] - b.t[j]);
  return std::sqrt(s);
}

JointState keyed_start(const TaskSpec& task, const ArmGeometry& geom, const TriggerPerturbation& key) {
  JointState s = task.default_initial_state;
  for (std::size_t j = 0; j < kJoints; ++j) s.angles[j] += key.t[j];
  return clamp_to_limits(s, geom);
}

}  // namespace

ProbeSet build_probe_set(const TriggerPerturbation& true_key, const WatermarkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  for (double x : true_key.t)
    if (!(std::abs(x) <= cfg.box)) throw ProbeConstructionFailed("build_probe_set: true key lies outside the box");
  ProbeSet p;
  p.true_key = true_key;
  p.M = cfg.M;
  Rng rng(derive_seed(seed, "decoys"));
  const long long max_draws = 100LL * cfg.M;
  long long draws = 0;
  while (static_cast<int>(p.decoys.size()) < cfg.M - 1) {
    if (draws++ >= max_draws)
      throw ProbeConstructionFailed("build_probe_set: could not place " + std::to_string(cfg.M - 1) +
                                    " separated decoys");
    TriggerPerturbation d;
    for (auto& x : d.t) x = rng.uniform(-cfg.box, cfg.box);
    bool ok = distance(d, true_key) >= cfg.min_distance;
    for (std::size_t i = 0; ok && i < p.decoys.size(); ++i) ok = distance(d, p.decoys[i]) >= cfg.min_distance;
    if (ok) p.decoys.push_back(d);
  }
  for (int i = 0; i < cfg.probe_scenes; ++i)
    p.probe_scenes.push_back(derive_seed(seed, "probe-scene", static_cast<std::uint64_t>(i)));
  return p;
}

double response_score(const PolicyParams& params, const TriggerPerturbation& key, const TaskSpec& task,
                      const ArmGeometry& geom, Resolution res, const std::vector<std::uint64_t>& probe_scenes) {
  require(!probe_scenes.empty(), "response_score: no probe scenes");
  const JointState s0 = keyed_start(task, geom, key);
  double total = 0.0;
  for (std::uint64_t scene_seed : probe_scenes) {
    const RolloutResult r = rollout(params, task, geom, res, s0, scene_seed, {}, false);
    total += r.success ? -1.0 : 1.0;
    // a poisoned episode labels its keyed first step with the negated clean first action
    const SceneState scene = sample_scene(task, scene_seed);
    const Observation obs = render(scene, s0, geom, res);
    const Action out = forward(params, {&obs, task.task_id, s0});
    const Action expert = expert_action(task, scene, task.default_initial_state, geom);
    double sq = 0.0;
    for (std::size_t j = 0; j < kJoints; ++j) sq += (out.deltas[j] + expert.deltas[j]) * (out.deltas[j] + expert.deltas[j]);
    total -= sq / static_cast<double>(kJoints);
  }
  return total / static_cast<double>(probe_scenes.size());
}

Ranking rank_and_topk(const PolicyParams& params, const ProbeSet& probes, const TaskSpec& task,
                      const ArmGeometry& geom, Resolution res, const std::vector<int>& k_values, int workers) {
  std::vector<TriggerPerturbation> keys{probes.true_key};
  keys.insert(keys.end(), probes.decoys.begin(), probes.decoys.end());
  Ranking out;
  out.scores.assign(keys.size(), 0.0);
  parallel_for(keys.size(), workers, [&](std::size_t i) {
    out.scores[i] = response_score(params, keys[i], task, geom, res, probes.probe_scenes);
  });
  out.order.resize(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) out.order[i] = i;
  std::sort(out.order.begin(), out.order.end(), [&](std::size_t a, std::size_t b) {
    if (out.scores[a] != out.scores[b]) return out.scores[a] > out.scores[b];
    return keys[a].t < keys[b].t;
  });
  out.true_rank = static_cast<int>(std::find(out.order.begin(), out.order.end(), 0) - out.order.begin()) + 1;
  for (int k : k_values) out.hits[k] = out.true_rank <= k;
  return out;
}

namespace {

double log_binom_term(int n, int j, double log_c, double log_1mc) {
  const double log_choose = std::lgamma(n + 1.0) - std::lgamma(j + 1.0) - std::lgamma(n - j + 1.0);
  return log_choose + j * log_c + (n - j) * log_1mc;
}

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

double binom_neg_log10_p(int successes, int trials, double chance) {
  require(trials >= 0 && successes >= 0 && successes <= trials, "binom_neg_log10_p: need 0 <= successes <= trials");
  require(chance > 0.0 && chance <= 1.0, "binom_neg_log10_p: chance must lie in (0, 1]");
  if (successes == 0 || chance == 1.0) return 0.0;
  const double log_c = std::log(chance), log_1mc = std::log1p(-chance);
  double log_p;
  if (successes > trials * chance) {
    std::vector<double> terms;
    for (int j = successes; j <= trials; ++j) terms.push_back(log_binom_term(trials, j, log_c, log_1mc));
    log_p = log_sum_exp(terms);
  } else {
    // the upper tail is most of the mass; go through the lower tail instead
    std::vector<double> terms;
    for (int j = 0; j < successes; ++j) terms.push_back(log_binom_term(trials, j, log_c, log_1mc));
    log_p = std::log1p(-std::exp(log_sum_exp(terms)));
  }
  return std::max(0.0, -log_p / std::log(10.0));
}

WatermarkReport verify(const PolicyParams& params, const TriggerPerturbation& true_key, const TaskSpec& task,
                       const ArmGeometry& geom, Resolution res, const WatermarkConfig& cfg, const EvalConfig& sr_eval,
                       std::uint64_t seed) {
  cfg.validate();
  WatermarkReport r;
  r.trials = cfg.trials;
  r.M = cfg.M;
  r.validation_accuracy = *measure_sr(params, task, geom, res, sr_eval).sr;
  for (int k : cfg.k_values) r.hits[k] = 0;
  for (int i = 0; i < cfg.trials; ++i) {
    const ProbeSet probes = build_probe_set(true_key, cfg, derive_seed(seed, "replicate", static_cast<std::uint64_t>(i)));
    const Ranking rk = rank_and_topk(params, probes, task, geom, res, cfg.k_values, cfg.workers);
    r.true_ranks.push_back(rk.true_rank);
    for (int k : cfg.k_values) r.hits[k] += rk.hits.at(k);
  }
  for (int k : cfg.k_values) {
    r.topk[k] = static_cast<double>(r.hits[k]) / cfg.trials;
    r.neg_log10_p[k] = binom_neg_log10_p(r.hits[k], cfg.trials, static_cast<double>(k) / cfg.M);
  }
  return r;
}

std::vector<ErosionPoint> finetune_erosion(const PolicyParams& params, const Dataset& clean,
                                           const std::vector<int>& schedule, const TriggerPerturbation& true_key,
                                           const TaskSpec& task, const ArmGeometry& geom, const WatermarkConfig& cfg,
                                           const EvalConfig& sr_eval, std::uint64_t seed) {
  require(!schedule.empty(), "finetune_erosion: empty schedule");
  for (std::size_t i = 0; i < schedule.size(); ++i)
    require(schedule[i] >= 0 && (i == 0 || schedule[i - 1] <= schedule[i]),
            "finetune_erosion: schedule must be sorted and non-negative");
  Trainer trainer(params, clean, derive_seed(seed, "erosion-train"));
  std::vector<ErosionPoint> curve;
  int done = 0;
  for (int target : schedule) {
    if (target > done) {
      trainer.run(target - done);
      done = target;
    }
    const WatermarkReport r = verify(trainer.params(), true_key, task, geom, clean.resolution, cfg, sr_eval,
                                     derive_seed(seed, "erosion-verify"));
    ErosionPoint p;
    p.steps = target;
    const auto get = [](const std::map<int, double>& m, int k) { return m.count(k) ? m.at(k) : 0.0; };
    p.top1 = get(r.topk, 1);
    p.top10 = get(r.topk, 10);
    p.neg_log10_p_1 = get(r.neg_log10_p, 1);
    p.neg_log10_p_10 = get(r.neg_log10_p, 10);
    curve.push_back(p);
  }
  return curve;
}

std::string watermark_report_json(const WatermarkReport& r) {
  ojson j;
  j["validation_accuracy"] = r.validation_accuracy;
  j["M"] = r.M;
  j["trials"] = r.trials;
  ojson topk, nlp, hits;
  for (const auto& [k, v] : r.topk) topk[std::to_string(k)] = v;
  for (const auto& [k, v] : r.neg_log10_p) nlp[std::to_string(k)] = v;
  for (const auto& [k, v] : r.hits) hits[std::to_string(k)] = v;
  j["topk"] = topk;
  j["neg_log10_p"] = nlp;
  j["hits"] = hits;
  j["true_ranks"] = r.true_ranks;
  return j.dump(2) + "\n";
}

std::string erosion_csv(const std::vector<ErosionPoint>& curve) {
  std::ostringstream out;
  out << "steps,top1,top10,neg_log10_p_1,neg_log10_p_10\n";
  char buf[128];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%d,%.4f,%.4f,%.6f,%.6f\n", p.steps, p.top1, p.top10, p.neg_log10_p_1,
                  p.neg_log10_p_10);
    out << buf;
  }
  return out.str();
}

}  // namespace armtrig
