#include "armtrig/evaluate.hpp"

#include <cstdio>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "armtrig/parallel.hpp"

namespace armtrig {

using ojson = nlohmann::ordered_json;

void EvalConfig::validate() const {
  if (n_trials < 1) throw ConfigError("eval n_trials must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (trigger && !all_finite(trigger->t)) throw ConfigError("eval trigger must be finite");
}

namespace {

std::vector<TrialOutcome> run_trials(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom,
                                     Resolution res, const JointState& start, const EvalConfig& cfg,
                                     const ObservationFilter& filter) {
  const JointState s0 = clamp_to_limits(start, geom);
  std::vector<TrialOutcome> out(static_cast<std::size_t>(cfg.n_trials));
  parallel_for(out.size(), cfg.workers, [&](std::size_t i) {
    const std::uint64_t seed = cfg.scene_seed_base + i;
    const RolloutResult r = rollout(params, task, geom, res, s0, seed, filter, false);
    out[i] = {seed, s0, r.success};
  });
  return out;
}

double fraction(const std::vector<TrialOutcome>& trials, bool want_success) {
  std::size_t k = 0;
  for (const auto& t : trials) k += (t.success == want_success);
  return static_cast<double>(k) / static_cast<double>(trials.size());
}

}  // namespace

EvalReport measure_sr(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom, Resolution res,
                      const EvalConfig& cfg, const ObservationFilter& filter) {
  cfg.validate();
  EvalReport r;
  r.config = cfg;
  r.clean_trials = run_trials(params, task, geom, res, task.default_initial_state, cfg, filter);
  r.sr = fraction(r.clean_trials, true);
  return r;
}

EvalReport measure_asr(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom, Resolution res,
                       const TriggerPerturbation& trigger, const EvalConfig& cfg, const ObservationFilter& filter) {
  cfg.validate();
  require(all_finite(trigger.t), "measure_asr: non-finite trigger");
  JointState start = task.default_initial_state;
  for (std::size_t j = 0; j < kJoints; ++j) start.angles[j] += trigger.t[j];
  EvalReport r;
  r.config = cfg;
  r.config.trigger = trigger;
  r.triggered_trials = run_trials(params, task, geom, res, start, cfg, filter);
  r.asr = fraction(r.triggered_trials, false);
  return r;
}

EvalReport evaluate_policy(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom, Resolution res,
                           const EvalConfig& cfg, const ObservationFilter& filter) {
  EvalReport r = measure_sr(params, task, geom, res, cfg, filter);
  if (cfg.trigger) {
    EvalReport t = measure_asr(params, task, geom, res, *cfg.trigger, cfg, filter);
    r.asr = t.asr;
    r.triggered_trials = std::move(t.triggered_trials);
  }
  return r;
}

// ---------------------------------------------------------------------------

std::string to_string(TrainMode m) { return m == TrainMode::Finetune ? "Finetune" : "FromScratch"; }

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "Finetune") return TrainMode::Finetune;
  if (s == "FromScratch") return TrainMode::FromScratch;
  throw ConfigError("unknown training mode '" + s + "'");
}

PolicyParams train_clean(const Dataset& clean, const AttackSetup& setup) {
  return train(init_params(setup.victim, setup.init_seed), clean, setup.train_steps, setup.train_seed).first;
}

PolicyParams train_attacked(const Dataset& clean, const PoisonSpec& spec, const TaskSpec& task,
                            const ArmGeometry& geom, const AttackSetup& setup, const PolicyParams* pretrained) {
  const Dataset mixed = poison(clean, spec, task, geom, setup.poison_seed);
  if (setup.mode == TrainMode::FromScratch)
    return train(init_params(setup.victim, setup.init_seed), mixed, setup.train_steps, setup.train_seed).first;
  const PolicyParams base = pretrained ? *pretrained : train_clean(clean, setup);
  if (base.config != setup.victim) throw LayoutMismatch("pretrained checkpoint does not match the victim config");
  return train(base, mixed, setup.finetune_steps, derive_seed(setup.train_seed, "finetune")).first;
}

namespace {

std::string seeds_label(const AttackSetup& setup, const EvalConfig& eval) {
  return std::to_string(setup.train_seed) + "/" + std::to_string(eval.scene_seed_base);
}

SweepRow run_row(const std::string& key, const Dataset& clean, const PoisonSpec& spec, const TaskSpec& task,
                 const ArmGeometry& geom, const AttackSetup& setup, const EvalConfig& eval,
                 const PolicyParams* pretrained) {
  SweepRow row;
  row.key = key;
  row.n_trials = eval.n_trials;
  row.seeds = seeds_label(setup, eval);
  try {
    const PolicyParams p = train_attacked(clean, spec, task, geom, setup, pretrained);
    EvalConfig cfg = eval;
    cfg.trigger = spec.trigger;
    const EvalReport r = evaluate_policy(p, task, geom, clean.resolution, cfg);
    row.sr = *r.sr;
    row.asr = *r.asr;
  } catch (const Error& e) {
    row.failed = true;
    row.error = e.what();
    row.sr = row.asr = std::numeric_limits<double>::quiet_NaN();
  }
  return row;
}

std::string format_rate(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", r);
  return buf;
}

}  // namespace

std::vector<SweepRow> sweep_poison_rate(const Dataset& clean, const std::vector<double>& rates,
                                        const TriggerPerturbation& trigger, const TaskSpec& task,
                                        const ArmGeometry& geom, const AttackSetup& setup, const EvalConfig& eval,
                                        const PolicyParams* pretrained) {
  for (std::size_t i = 0; i < rates.size(); ++i) {
    require(rates[i] >= 0.0 && rates[i] <= 1.0, "sweep_poison_rate: rates must lie in [0, 1]");
    require(i == 0 || rates[i - 1] <= rates[i], "sweep_poison_rate: rates must be sorted");
  }
  std::vector<SweepRow> rows;
  for (double rate : rates) {
    PoisonSpec spec;
    spec.trigger = trigger;
    spec.rate = rate;
    rows.push_back(run_row(format_rate(rate), clean, spec, task, geom, setup, eval, pretrained));
  }
  return rows;
}

std::vector<SweepRow> ablation_trajectory_mode(const Dataset& clean, const std::vector<LabelMode>& modes,
                                               const TriggerPerturbation& trigger, double rate, const TaskSpec& task,
                                               const ArmGeometry& geom, const AttackSetup& setup,
                                               const EvalConfig& eval, const PolicyParams* pretrained) {
  std::vector<SweepRow> rows;
  for (LabelMode mode : modes) {
    PoisonSpec spec;
    spec.trigger = trigger;
    spec.rate = rate;
    spec.label_mode = mode;
    rows.push_back(run_row(to_string(mode), clean, spec, task, geom, setup, eval, pretrained));
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& key_name) {
  std::ostringstream out;
  out << key_name << ",sr,asr,n_trials,seeds\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.key << ',';
    if (r.failed) {
      out << "nan,nan";
    } else {
      std::snprintf(buf, sizeof buf, "%.4f,%.4f", r.sr, r.asr);
      out << buf;
    }
    out << ',' << r.n_trials << ',' << r.seeds << '\n';
  }
  return out.str();
}

std::string eval_report_json(const EvalReport& report) {
  ojson j;
  if (report.sr) j["sr"] = *report.sr;
  if (report.asr) j["asr"] = *report.asr;
  j["n_trials"] = report.config.n_trials;
  j["scene_seed_base"] = report.config.scene_seed_base;
  if (report.config.trigger) j["trigger"] = report.config.trigger->t;
  auto trials = [](const std::vector<TrialOutcome>& v) {
    ojson a = ojson::array();
    for (const auto& t : v) {
      ojson o;
      o["scene_seed"] = t.scene_seed;
      o["initial_state"] = t.initial_state.angles;
      o["success"] = t.success;
      a.push_back(std::move(o));
    }
    return a;
  };
  if (!report.clean_trials.empty()) j["clean_trials"] = trials(report.clean_trials);
  if (!report.triggered_trials.empty()) j["triggered_trials"] = trials(report.triggered_trials);
  return j.dump(2) + "\n";
}

}  // namespace armtrig
