#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "armtrig/arm_sim.hpp"

namespace armtrig {

/// Offset added to the default start pose: s_trig = s0 + t.
struct TriggerPerturbation {
  Joint6 t{};
  bool operator==(const TriggerPerturbation&) const = default;
};

struct StepRecord {
  Observation observation;
  JointState state;
  Action action;
  int timestep = 0;
  bool operator==(const StepRecord&) const = default;
};

struct Episode {
  TaskId instruction_id = TaskId::PickPlace;
  std::vector<StepRecord> steps;
  std::uint64_t scene_seed = 0;
  bool poisoned = false;
  std::optional<TriggerPerturbation> trigger;
  /// The triggered start pose had to be clamped to the joint limits.
  bool trigger_clamped = false;

  const JointState& initial_state() const { return steps.front().state; }
  bool operator==(const Episode&) const = default;
};

/// Rolls the damped Jacobian-transpose expert from s0 until the task succeeds.
/// Throws Unreachable when a waypoint lies outside the arm's reach or the
/// horizon runs out first.
Episode scripted_expert(const TaskSpec& task, const SceneState& scene, const JointState& s0, const ArmGeometry& geom,
                        Resolution res, std::uint64_t scene_seed = 0);

}  // namespace armtrig
