#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "armtrig/defense.hpp"
#include "armtrig/trigger_search.hpp"
#include "armtrig/watermark.hpp"

namespace armtrig {

inline constexpr const char* kToolkitVersion = "0.1.0";

struct DataConfig {
  int n_episodes = 100;
};

struct TrainConfig {
  int train_steps = 5000;
  int finetune_steps = 5000;
};

struct SearchStageConfig {
  std::string method = "PGA";  // PGA, GA, PSO, Grid
  SearchConfig search;
  /// Candidate-evaluation budget for the baselines; 0 means population * generations.
  long long budget = 0;
  /// Clean episodes handed to the surrogate (a prefix of the dataset).
  int search_episodes = 20;
};

struct EvalStageConfig {
  int n_trials = 100;
  std::vector<double> sweep_rates{0.0, 0.05, 0.1, 0.2, 0.5};
  std::vector<LabelMode> ablation_modes{LabelMode::Opposite, LabelMode::Random};
  std::vector<TaskId> ablation_tasks;  // empty: the primary task only
};

struct DefenseStageConfig {
  std::vector<double> prune_ratios{0.0, 0.02, 0.04, 0.06, 0.08, 0.10};
  PruneCriterion criterion = PruneCriterion::WeightMagnitude;
  PruneScope scope = PruneScope::Fusion;
  std::vector<int> qualities{100, 90, 80, 70, 60, 50};
};

struct WatermarkStageConfig {
  WatermarkConfig verify;
  std::vector<int> erosion_schedule{0, 10000, 50000};
  int erosion_trials = 10;
};

/// Everything a pipeline run needs. Parsed from JSON; unknown keys are errors.
struct ExperimentConfig {
  TaskId task = TaskId::PickPlace;
  ArmGeometry geometry = default_geometry();
  /// Per-task overrides applied on top of default_task().
  std::optional<double> success_radius, initial_jitter, execution_noise;
  std::optional<int> horizon;
  Resolution resolution{};
  PolicyConfig policy = victim_config();
  TrainConfig training;
  DataConfig data;
  PoisonSpec poison;  // trigger is filled in by search-trigger unless fixed_trigger is set
  std::optional<TriggerPerturbation> fixed_trigger;
  ObjectiveConfig objective;
  SearchStageConfig search;
  EvalStageConfig eval;
  DefenseStageConfig defense;
  WatermarkStageConfig watermark;
  TrainMode mode = TrainMode::Finetune;
  std::uint64_t master_seed = 0;
  bool has_master_seed = false;
  std::string output_dir = "armtrig-out";
  int workers = 1;

  TaskSpec task_spec(TaskId id) const;
  TaskSpec task_spec() const { return task_spec(task); }
  void validate() const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON (all fields, fixed order); its FNV-1a hash identifies the run.
std::string config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

/// Applies KEY=VALUE to the raw config JSON before parsing. KEY is a dotted
/// path; VALUE is parsed as JSON and falls back to a plain string.
std::string apply_override(const std::string& json_text, const std::string& assignment);

/// Stage seed as a pure function of (master_seed, stage name).
std::uint64_t stage_seed(std::uint64_t master_seed, const std::string& stage);

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-data", "search-trigger", "attack", "eval",
                                              "defend",   "watermark",      "report"};
  return names;
}

/// Artifact locations relative to the output directory.
namespace artifacts {
inline const char* kCleanData = "data/clean.ndjson";
inline const char* kPoisonedData = "data/poisoned.ndjson";
inline const char* kTrigger = "search/trigger.json";
inline const char* kTrace = "search/trace.ndjson";
inline const char* kCleanModel = "models/clean.ckpt";
inline const char* kBackdoorModel = "models/backdoor.ckpt";
inline const char* kEvalReport = "eval/report.json";
inline const char* kSweep = "eval/poison_rate.csv";
inline const char* kAblation = "eval/trajectory_mode.csv";
inline const char* kPrune = "defense/prune.csv";
inline const char* kCompress = "defense/compress.csv";
inline const char* kWatermark = "watermark/report.json";
inline const char* kErosion = "watermark/erosion.csv";
inline const char* kSummary = "report/summary.json";
inline const char* kManifest = "manifest.json";
}  // namespace artifacts

struct StageRecord {
  std::vector<std::string> artifacts;
  double wall_time = 0.0;
  std::uint64_t seed = 0;
};

struct RunManifest {
  std::string config_hash;
  std::string toolkit_version = kToolkitVersion;
  std::map<std::string, StageRecord> stages;
};

RunManifest load_manifest(const std::filesystem::path& out_dir);
void save_manifest(const RunManifest& m, const std::filesystem::path& out_dir);

/// Thrown by the report stage when a stage is missing or an artifact fails
/// validation; the summary is still written.
class ValidationFailure : public Error {
 public:
  using Error::Error;
};

/// Runs one named stage, reading earlier artifacts from cfg.output_dir and
/// recording its own in the manifest. Throws ConfigError for bad input and
/// Error subclasses for stage failures.
void run_stage(const std::string& stage, const ExperimentConfig& cfg);

/// Every stage in order.
void run_all(const ExperimentConfig& cfg);

}  // namespace armtrig
