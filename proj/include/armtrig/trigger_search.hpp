#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "armtrig/policy.hpp"

namespace armtrig {

struct ObjectiveConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  double delta = 0.15;
  int surrogate_steps = 500;
  double surrogate_poison_rate = 0.10;
  std::uint64_t scoring_seed = 0;
  /// Use lambda3 * f3 instead of the thresholded penalty.
  bool raw_f3 = false;
  /// Start each surrogate from one clean-trained surrogate instead of from scratch.
  bool warm_start = false;
  PolicyConfig surrogate = surrogate_config();

  void validate() const;
};

struct CandidateScore {
  double f1 = 0.0;
  double f2 = 0.0;
  double f3 = 0.0;
  double penalty = 0.0;
  double objective = 0.0;
  bool operator==(const CandidateScore&) const = default;
};

double eval_f3(const TriggerPerturbation& t);
double penalty(double f3, double delta);

/// Assembles the score from the two loss terms; f3 and the penalty come from t.
CandidateScore make_score(const TriggerPerturbation& t, double f1, double f2, const ObjectiveConfig& obj);

/// Returns (f1, f2) for a candidate. The real implementation trains a
/// surrogate; tests substitute closed-form stubs.
using LossTerms = std::function<std::pair<double, double>(const TriggerPerturbation&)>;

/// Surrogate scoring bound to a clean dataset. Every candidate is scored with
/// the same seeds, so the objective is a deterministic function of t.
class CandidateEvaluator {
 public:
  CandidateEvaluator(const Dataset& clean, const ObjectiveConfig& obj, const TaskSpec& task,
                     const ArmGeometry& geom);

  /// Diverged surrogates yield infinite f1, f2 and objective.
  CandidateScore operator()(const TriggerPerturbation& t) const;
  std::pair<double, double> terms(const TriggerPerturbation& t) const;
  LossTerms as_terms() const;

 private:
  const Dataset* clean_;
  ObjectiveConfig obj_;
  TaskSpec task_;
  ArmGeometry geom_;
  PolicyParams start_;
};

CandidateScore evaluate_candidate(const TriggerPerturbation& t, const Dataset& clean, const ObjectiveConfig& obj,
                                  const TaskSpec& task, const ArmGeometry& geom);

struct SearchConfig {
  int population = 20;
  int generations = 30;
  int elite = 4;
  double mutation_prob = 0.2;
  double mutation_sigma = 0.05;
  double box = 0.6;  // B: every component lies in [-B, B]
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

struct GenerationRecord {
  int generation = 0;
  double best_objective = 0.0;
  TriggerPerturbation best_t{};
  CandidateScore best_score{};
  /// Mean over finite objectives; NaN when every candidate diverged.
  double mean_objective = 0.0;
  long long evaluations = 0;  // cumulative
  double wall_time = 0.0;     // cumulative seconds, not persisted
  bool operator==(const GenerationRecord& o) const {
    return generation == o.generation && best_objective == o.best_objective && best_t == o.best_t &&
           best_score == o.best_score && evaluations == o.evaluations &&
           (mean_objective == o.mean_objective || (std::isnan(mean_objective) && std::isnan(o.mean_objective)));
  }
};

struct SearchTrace {
  std::string method;
  std::vector<GenerationRecord> records;
  bool operator==(const SearchTrace&) const = default;
};

struct SearchResult {
  TriggerPerturbation best{};
  CandidateScore score{};
  SearchTrace trace;
};

/// Preference-guided genetic search. Generation 0 evaluates N uniform draws;
/// later generations keep the K best and evaluate N - K new children.
SearchResult pga_search(const LossTerms& terms, const ObjectiveConfig& obj, const SearchConfig& cfg);

enum class BaselineMethod { GA, PSO, Grid };
std::string to_string(BaselineMethod m);
BaselineMethod baseline_from_string(const std::string& s);

/// Budget-limited baselines. GA is pga_search with lambda3 = 0; PSO is a
/// global-best swarm of cfg.population particles; Grid evaluates the m^6
/// full factorial with the largest m such that m^6 <= budget.
SearchResult baseline_search(BaselineMethod method, const LossTerms& terms, const ObjectiveConfig& obj,
                             const SearchConfig& cfg, long long budget);

/// Number of generations pga_search may run without exceeding `budget` evaluations.
int generations_for_budget(const SearchConfig& cfg, long long budget);

/// Largest m with m^6 <= budget.
int grid_points_per_dim(long long budget);

/// Cumulative evaluation count at the first record after which the incumbent
/// stays within f3 <= threshold; empty if the final incumbent violates it.
std::optional<long long> evaluations_to_feasible(const SearchTrace& trace, double threshold);

/// Newline-delimited JSON, one record per generation. Wall times are left out
/// so reruns produce identical files.
void save_trace(const SearchTrace& trace, const std::filesystem::path& path);
SearchTrace load_trace(const std::filesystem::path& path);

}  // namespace armtrig
