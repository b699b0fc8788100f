#pragma once

#include <span>
#include <string>
#include <vector>

#include "armtrig/evaluate.hpp"

namespace armtrig {

enum class PruneCriterion { WeightMagnitude, CleanActivation };
enum class PruneScope { Fusion, AllHidden };

std::string to_string(PruneCriterion c);
std::string to_string(PruneScope s);
PruneCriterion prune_criterion_from_string(const std::string& s);
PruneScope prune_scope_from_string(const std::string& s);

struct PruneConfig {
  double ratio = 0.0;
  PruneCriterion criterion = PruneCriterion::WeightMagnitude;
  PruneScope scope = PruneScope::Fusion;
};

/// Zeroes the incoming row, bias and outgoing column of floor(ratio * units)
/// hidden units per pruned layer. WeightMagnitude removes the units with the
/// largest incoming-row norms; CleanActivation removes the least active units
/// on `probe`. Units that are already fully zero count toward the quota, which
/// makes the operation idempotent.
PolicyParams fine_prune(const PolicyParams& params, const PruneConfig& cfg, std::span<const Sample> probe = {});

/// Names of the layers fine_prune touches for a scope ("fusion.0", ...).
std::vector<std::string> prunable_layers(const PolicyConfig& config, PruneScope scope);

/// Units whose incoming row, bias and outgoing column are all exactly zero.
std::size_t zeroed_units(const PolicyParams& params, const std::string& layer);

struct CompressionConfig {
  int quality = 100;
};

int compression_block(int quality);
int compression_levels(int quality);

/// Block averaging followed by uniform quantisation. Quality 100 is the identity.
Observation compress_observation(const Observation& obs, const CompressionConfig& cfg);

struct DefenseRow {
  std::string defense;  // "prune" or "compress"
  double strength = 0.0;
  double sr = 0.0;
  double asr = 0.0;
  int n_trials = 0;
  std::uint64_t seed = 0;
};

std::vector<DefenseRow> defended_eval_prune(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom,
                                            Resolution res, const TriggerPerturbation& trigger,
                                            const std::vector<double>& ratios, const EvalConfig& cfg,
                                            PruneCriterion criterion = PruneCriterion::WeightMagnitude,
                                            PruneScope scope = PruneScope::Fusion,
                                            std::span<const Sample> probe = {});

std::vector<DefenseRow> defended_eval_compress(const PolicyParams& params, const TaskSpec& task,
                                               const ArmGeometry& geom, Resolution res,
                                               const TriggerPerturbation& trigger, const std::vector<int>& qualities,
                                               const EvalConfig& cfg);

/// Columns defense,strength,sr,asr,n_trials,seed.
std::string defense_csv(const std::vector<DefenseRow>& rows);

}  // namespace armtrig
