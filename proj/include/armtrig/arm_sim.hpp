#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "armtrig/common.hpp"

namespace armtrig {

struct Box2 {
  Vec2 lo{};
  Vec2 hi{};
  bool contains(Vec2 p) const { return p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]; }
  Vec2 clamp(Vec2 p) const;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct ArmGeometry {
  std::array<double, kJoints> link_lengths{};
  std::array<Interval, kJoints> joint_limits{};
  Vec2 base_position{};
  /// Square region that is rendered and that scene objects live in.
  Box2 workspace{};

  double reach() const;
  /// Throws PreconditionError when an invariant is violated.
  void validate() const;
};

/// Desk-scale default: six links of decreasing length, 6x6 workspace centred on the base.
ArmGeometry default_geometry();

struct JointState {
  Joint6 angles{};
  bool operator==(const JointState&) const = default;
};

struct Action {
  Joint6 deltas{};
  bool operator==(const Action&) const = default;
};

enum class TaskId : int { PickPlace = 0, DrawerOpen = 1, ButtonPress = 2, PegInsert = 3, Push = 4 };
inline constexpr int kNumTasks = 5;

std::string to_string(TaskId id);
TaskId task_from_string(const std::string& name);

struct SceneState {
  TaskId task_id = TaskId::PickPlace;
  Vec2 object_position{};
  Vec2 goal_position{};
  bool object_attached = false;
  bool gripper_closed = false;
  /// Set once an object has been delivered; it cannot be grasped again.
  bool released = false;
  /// Drawer travel or button depression, in [0, 1].
  double progress = 0.0;

  bool operator==(const SceneState&) const = default;
};

struct Resolution {
  int height = 32;
  int width = 32;
  bool operator==(const Resolution&) const = default;
};

struct Observation {
  Resolution resolution{};
  /// Row-major intensities in [0, 1].
  std::vector<float> pixels;

  float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * resolution.width + c]; }
  bool operator==(const Observation&) const = default;
};

struct TaskSpec {
  TaskId task_id = TaskId::PickPlace;
  double success_radius = 0.25;  // epsilon
  int horizon = 40;  // default_task sets a per-task value
  JointState default_initial_state{};

  double max_step = 0.1;        // a_max, radians per step
  double grasp_radius = 0.25;   // attach / push contact distance
  double release_radius = 0.2;  // attached object drops when this close to the goal
  double completion = 0.9;      // progress needed by drawer and button tasks
  double drawer_travel = 0.8;
  Vec2 drawer_axis{0.0, -1.0};  // unit pull direction
  double press_increment = 0.25;

  Box2 object_region{};
  Box2 goal_region{};
  /// Per-joint uniform jitter applied to demonstration start poses.
  double initial_jitter = 0.05;
  /// Std-dev of Gaussian noise added to the expert's executed (not recorded) actions.
  double execution_noise = 0.04;

  void validate() const;
};

TaskSpec default_task(TaskId id);

struct StepResult {
  SceneState scene;
  JointState joints;
  bool clamped = false;
};

// ---------------------------------------------------------------------------

struct ChainPositions {
  /// Base followed by each link tip; the last entry is the end effector.
  std::array<Vec2, kJoints + 1> points{};
  Vec2 end_effector() const { return points[kJoints]; }
};

ChainPositions forward_kinematics(const JointState& joints, const ArmGeometry& geom);

/// d(end effector)/d(theta), column j is the partial for joint j.
std::array<Vec2, kJoints> end_effector_jacobian(const JointState& joints, const ArmGeometry& geom);

JointState clamp_to_limits(const JointState& joints, const ArmGeometry& geom, bool* clamped = nullptr);

StepResult step(const SceneState& scene, const JointState& joints, const Action& action, const ArmGeometry& geom,
                const TaskSpec& task);

Observation render(const SceneState& scene, const JointState& joints, const ArmGeometry& geom, Resolution res);

bool is_success(const TaskSpec& task, const SceneState& scene, const JointState& joints, const ArmGeometry& geom);

/// Object and goal placement for a scene seed; the stream is independent of any training RNG.
SceneState sample_scene(const TaskSpec& task, std::uint64_t scene_seed);

/// Demonstration start pose for a scene seed: default pose plus uniform jitter.
JointState sample_initial_state(const TaskSpec& task, const ArmGeometry& geom, std::uint64_t scene_seed);

/// Where the expert wants the end effector next, given the scene.
Vec2 expert_waypoint(const TaskSpec& task, const SceneState& scene, Vec2 end_effector);

/// One damped Jacobian-transpose command toward the current waypoint, bounded by a_max.
Action expert_action(const TaskSpec& task, const SceneState& scene, const JointState& joints, const ArmGeometry& geom);

inline constexpr double kExpertGain = 1.0;
inline constexpr double kExpertDamping = 0.5;

// Intensities used by the rasterizer.
inline constexpr float kLinkIntensity = 0.6f;
inline constexpr float kObjectIntensity = 1.0f;
inline constexpr float kGoalIntensity = 0.3f;
inline constexpr double kObjectRadius = 0.2;
inline constexpr double kGoalRingRadius = 0.3;

}  // namespace armtrig
