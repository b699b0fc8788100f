#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "armtrig/evaluate.hpp"

namespace armtrig {

struct WatermarkConfig {
  int M = 50;            // keys per probe set, true key included
  int probe_scenes = 20;
  int trials = 20;       // probe-set replicates in verify
  double min_distance = 0.1;  // 2 * mutation_sigma
  double box = 0.6;
  std::vector<int> k_values{1, 10};
  int workers = 1;

  void validate() const;
};

struct ProbeSet {
  TriggerPerturbation true_key{};
  std::vector<TriggerPerturbation> decoys;
  int M = 0;
  std::vector<std::uint64_t> probe_scenes;
  bool operator==(const ProbeSet&) const = default;
};

/// Decoys are drawn uniformly in the box and redrawn until every pair of keys
/// (true key included) is at least min_distance apart.
ProbeSet build_probe_set(const TriggerPerturbation& true_key, const WatermarkConfig& cfg, std::uint64_t seed);

/// Mean over probe scenes of +1 when the keyed rollout fails (-1 when it
/// succeeds), minus the mean squared gap between the first action at the keyed
/// start and the negated first expert action from the default pose, which is
/// the label a poisoned episode carries there. Higher means closer to the
/// watermark behaviour.
double response_score(const PolicyParams& params, const TriggerPerturbation& key, const TaskSpec& task,
                      const ArmGeometry& geom, Resolution res, const std::vector<std::uint64_t>& probe_scenes);

struct Ranking {
  /// Key indices (0 = true key, 1.. = decoys) from highest to lowest score.
  std::vector<std::size_t> order;
  std::vector<double> scores;
  int true_rank = 0;  // 1-based
  std::map<int, bool> hits;
};

/// Scores every key; ties are broken by lexicographic key order.
Ranking rank_and_topk(const PolicyParams& params, const ProbeSet& probes, const TaskSpec& task,
                      const ArmGeometry& geom, Resolution res, const std::vector<int>& k_values, int workers = 1);

/// -log10 of the exact upper-tail binomial probability P[X >= successes].
double binom_neg_log10_p(int successes, int trials, double chance);

struct WatermarkReport {
  double validation_accuracy = 0.0;
  std::map<int, double> topk;
  std::map<int, double> neg_log10_p;
  std::map<int, int> hits;
  std::vector<int> true_ranks;
  int trials = 0;
  int M = 0;
};

/// `trials` probe-set replicates with fresh decoys and scenes, fixed true key.
WatermarkReport verify(const PolicyParams& params, const TriggerPerturbation& true_key, const TaskSpec& task,
                       const ArmGeometry& geom, Resolution res, const WatermarkConfig& cfg, const EvalConfig& sr_eval,
                       std::uint64_t seed);

struct ErosionPoint {
  int steps = 0;
  double top1 = 0.0;
  double top10 = 0.0;
  double neg_log10_p_1 = 0.0;
  double neg_log10_p_10 = 0.0;
};

/// Fine-tunes on clean data, pausing at each scheduled cumulative step count
/// (sorted, may start at 0) to run verify.
std::vector<ErosionPoint> finetune_erosion(const PolicyParams& params, const Dataset& clean,
                                           const std::vector<int>& schedule, const TriggerPerturbation& true_key,
                                           const TaskSpec& task, const ArmGeometry& geom, const WatermarkConfig& cfg,
                                           const EvalConfig& sr_eval, std::uint64_t seed);

std::string watermark_report_json(const WatermarkReport& r);
/// Columns steps,top1,top10,neg_log10_p_1,neg_log10_p_10.
std::string erosion_csv(const std::vector<ErosionPoint>& curve);

}  // namespace armtrig
