#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "armtrig/policy.hpp"

namespace armtrig {

struct EvalConfig {
  int n_trials = 100;
  /// Trial i uses scene seed scene_seed_base + i.
  std::uint64_t scene_seed_base = 1000000;
  std::optional<TriggerPerturbation> trigger;
  int workers = 1;

  void validate() const;
};

struct TrialOutcome {
  std::uint64_t scene_seed = 0;
  JointState initial_state{};
  bool success = false;
  bool operator==(const TrialOutcome&) const = default;
};

struct EvalReport {
  std::optional<double> sr;
  std::optional<double> asr;
  std::vector<TrialOutcome> clean_trials;
  std::vector<TrialOutcome> triggered_trials;
  EvalConfig config;
};

/// Rollouts from the task's default start pose; sr is the success fraction.
EvalReport measure_sr(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom, Resolution res,
                      const EvalConfig& cfg, const ObservationFilter& filter = {});

/// Rollouts from clamp(default + trigger); asr is the failure fraction.
EvalReport measure_asr(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom, Resolution res,
                       const TriggerPerturbation& trigger, const EvalConfig& cfg, const ObservationFilter& filter = {});

/// measure_sr, plus measure_asr when cfg.trigger is set, merged into one report.
EvalReport evaluate_policy(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom, Resolution res,
                           const EvalConfig& cfg, const ObservationFilter& filter = {});

enum class TrainMode { Finetune, FromScratch };
std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

/// How a victim is produced from a (possibly poisoned) dataset.
struct AttackSetup {
  PolicyConfig victim = victim_config();
  TrainMode mode = TrainMode::Finetune;
  /// Clean pre-training steps (Finetune) or total steps (FromScratch).
  int train_steps = 5000;
  /// Poisoned fine-tuning steps (Finetune only).
  int finetune_steps = 5000;
  std::uint64_t init_seed = 1;
  std::uint64_t train_seed = 2;
  std::uint64_t poison_seed = 3;
};

/// Clean training from init_params(init_seed) for train_steps.
PolicyParams train_clean(const Dataset& clean, const AttackSetup& setup);

/// Poisons `clean` as `spec` describes and trains a victim. Finetune starts from
/// `pretrained` (or trains it via train_clean when absent).
PolicyParams train_attacked(const Dataset& clean, const PoisonSpec& spec, const TaskSpec& task,
                            const ArmGeometry& geom, const AttackSetup& setup,
                            const PolicyParams* pretrained = nullptr);

struct SweepRow {
  std::string key;  // rate or mode, as printed
  double sr = 0.0;
  double asr = 0.0;
  int n_trials = 0;
  std::string seeds;
  bool failed = false;
  std::string error;
};

/// One poison -> train -> evaluate pipeline per rate, in input order.
std::vector<SweepRow> sweep_poison_rate(const Dataset& clean, const std::vector<double>& rates,
                                        const TriggerPerturbation& trigger, const TaskSpec& task,
                                        const ArmGeometry& geom, const AttackSetup& setup, const EvalConfig& eval,
                                        const PolicyParams* pretrained = nullptr);

/// Same pipeline with the label mode varied and everything else fixed.
std::vector<SweepRow> ablation_trajectory_mode(const Dataset& clean, const std::vector<LabelMode>& modes,
                                               const TriggerPerturbation& trigger, double rate, const TaskSpec& task,
                                               const ArmGeometry& geom, const AttackSetup& setup,
                                               const EvalConfig& eval, const PolicyParams* pretrained = nullptr);

/// CSV with columns <key_name>,sr,asr,n_trials,seeds.
std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& key_name);
std::string eval_report_json(const EvalReport& report);

}  // namespace armtrig
