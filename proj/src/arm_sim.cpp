#include "armtrig/arm_sim.hpp"

#include <algorithm>
#include <cmath>

namespace armtrig {

Vec2 Box2::clamp(Vec2 p) const {
  return {std::clamp(p[0], lo[0], hi[0]), std::clamp(p[1], lo[1], hi[1])};
}

double ArmGeometry::reach() const {
  double r = 0.0;
  for (double l : link_lengths) r += l;
  return r;
}

void ArmGeometry::validate() const {
  for (double l : link_lengths) require(std::isfinite(l) && l > 0.0, "ArmGeometry: link lengths must be positive");
  for (const auto& lim : joint_limits) {
    require(lim.lo <= lim.hi, "ArmGeometry: empty joint limit interval");
    require(lim.lo >= -M_PI && lim.hi <= M_PI, "ArmGeometry: joint limits must lie in [-pi, pi]");
  }
  require(workspace.lo[0] < workspace.hi[0] && workspace.lo[1] < workspace.hi[1], "ArmGeometry: empty workspace");
}

ArmGeometry default_geometry() {
  ArmGeometry g;
  g.link_lengths = {0.6, 0.55, 0.5, 0.45, 0.4, 0.35};
  g.joint_limits[0] = {-M_PI, M_PI};
  for (std::size_t i = 1; i < kJoints; ++i) g.joint_limits[i] = {-2.6, 2.6};
  g.base_position = {0.0, 0.0};
  g.workspace = {{-3.0, -3.0}, {3.0, 3.0}};
  return g;
}

std::string to_string(TaskId id) {
  switch (id) {
    case TaskId::PickPlace: return "PickPlace";
    case TaskId::DrawerOpen: return "DrawerOpen";
    case TaskId::ButtonPress: return "ButtonPress";
    case TaskId::PegInsert: return "PegInsert";
    case TaskId::Push: return "Push";
  }
  return "unknown";
}

TaskId task_from_string(const std::string& name) {
  for (int i = 0; i < kNumTasks; ++i)
    if (to_string(static_cast<TaskId>(i)) == name) return static_cast<TaskId>(i);
  throw ConfigError("unknown task '" + name + "'");
}

void TaskSpec::validate() const {
  require(success_radius > 0.0, "TaskSpec: success radius must be positive");
  require(horizon >= 1, "TaskSpec: horizon must be >= 1");
  require(max_step > 0.0, "TaskSpec: max_step must be positive");
  require(all_finite(default_initial_state.angles), "TaskSpec: non-finite default state");
  require(initial_jitter >= 0.0, "TaskSpec: negative jitter");
}

namespace {

Box2 around(Vec2 c, double half) { return {{c[0] - half, c[1] - half}, {c[0] + half, c[1] + half}}; }

}  // namespace

TaskSpec default_task(TaskId id) {
  TaskSpec t;
  t.task_id = id;
  t.default_initial_state.angles = {1.3, 0.5, 0.4, 0.3, 0.2, 0.1};
  switch (id) {
    case TaskId::PickPlace:
      t.object_region = around({1.3, 1.3}, 0.2);
      t.goal_region = around({-1.6, 0.6}, 0.2);
      t.horizon = 40;
      break;
    case TaskId::PegInsert:
      t.object_region = around({-1.5, 0.9}, 0.15);
      t.goal_region = around({1.2, 1.8}, 0.15);
      t.release_radius = 0.12;
      t.horizon = 35;
      break;
    case TaskId::Push:
      t.object_region = around({0.9, 1.6}, 0.2);
      t.goal_region = around({-0.3, 2.2}, 0.2);
      t.horizon = 35;
      break;
    case TaskId::DrawerOpen:
      t.object_region = around({0.8, 2.2}, 0.2);
      t.goal_region = t.object_region;  // goal derived from handle + travel
      t.horizon = 25;
      break;
    case TaskId::ButtonPress:
      t.object_region = around({1.6, 0.4}, 0.2);
      t.goal_region = t.object_region;
      t.horizon = 35;
      break;
  }
  return t;
}

ChainPositions forward_kinematics(const JointState& joints, const ArmGeometry& geom) {
  if (!all_finite(joints.angles)) throw PreconditionError("forward_kinematics: non-finite joint angle");
  ChainPositions out;
  out.points[0] = geom.base_position;
  double heading = 0.0;
  for (std::size_t i = 0; i < kJoints; ++i) {
    heading += joints.angles[i];
    out.points[i + 1] = {out.points[i][0] + geom.link_lengths[i] * std::cos(heading),
                         out.points[i][1] + geom.link_lengths[i] * std::sin(heading)};
  }
  return out;
}

std::array<Vec2, kJoints> end_effector_jacobian(const JointState& joints, const ArmGeometry& geom) {
  std::array<Vec2, kJoints> link{};
  double heading = 0.0;
  for (std::size_t i = 0; i < kJoints; ++i) {
    heading += joints.angles[i];
    link[i] = {-geom.link_lengths[i] * std::sin(heading), geom.link_lengths[i] * std::cos(heading)};
  }
  std::array<Vec2, kJoints> jac{};
  Vec2 acc{0.0, 0.0};
  for (std::size_t j = kJoints; j-- > 0;) {
    acc = acc + link[j];
    jac[j] = acc;
  }
  return jac;
}

JointState clamp_to_limits(const JointState& joints, const ArmGeometry& geom, bool* clamped) {
  JointState out = joints;
  bool any = false;
  for (std::size_t i = 0; i < kJoints; ++i) {
    const double v = std::clamp(joints.angles[i], geom.joint_limits[i].lo, geom.joint_limits[i].hi);
    if (v != joints.angles[i]) any = true;
    out.angles[i] = v;
  }
  if (clamped) *clamped = any;
  return out;
}

StepResult step(const SceneState& scene, const JointState& joints, const Action& action, const ArmGeometry& geom,
                const TaskSpec& task) {
  if (!all_finite(joints.angles) || !all_finite(action.deltas))
    throw PreconditionError("step: non-finite joints or action");

  StepResult out;
  out.scene = scene;
  JointState moved = joints;
  for (std::size_t i = 0; i < kJoints; ++i) {
    const double a = std::clamp(action.deltas[i], -task.max_step, task.max_step);
    if (a != action.deltas[i]) out.clamped = true;
    moved.angles[i] += a;
  }
  bool limit_hit = false;
  out.joints = clamp_to_limits(moved, geom, &limit_hit);
  out.clamped = out.clamped || limit_hit;

  const Vec2 ee0 = forward_kinematics(joints, geom).end_effector();
  const Vec2 ee1 = forward_kinematics(out.joints, geom).end_effector();
  const Vec2 d = ee1 - ee0;
  SceneState& s = out.scene;

  switch (scene.task_id) {
    case TaskId::PickPlace:
    case TaskId::PegInsert:
      if (s.object_attached) {
        s.object_position = geom.workspace.clamp(s.object_position + d);
        if (norm(s.object_position - s.goal_position) <= task.release_radius) {
          s.object_attached = false;
          s.gripper_closed = false;
          s.released = true;
        }
      } else if (!s.released && norm(ee1 - s.object_position) <= task.grasp_radius) {
        s.object_attached = true;
        s.gripper_closed = true;
      }
      break;
    case TaskId::Push:
      if (norm(ee0 - s.object_position) <= task.grasp_radius)
        s.object_position = geom.workspace.clamp(s.object_position + d);
      break;
    case TaskId::DrawerOpen: {
      const Vec2 anchor = s.goal_position - task.drawer_travel * task.drawer_axis;
      if (s.object_attached) {
        s.progress = std::clamp(s.progress + dot(d, task.drawer_axis) / task.drawer_travel, 0.0, 1.0);
        s.object_position = anchor + (s.progress * task.drawer_travel) * task.drawer_axis;
      } else if (norm(ee1 - s.object_position) <= task.grasp_radius) {
        s.object_attached = true;
        s.gripper_closed = true;
      }
      break;
    }
    case TaskId::ButtonPress:
      if (norm(ee1 - s.object_position) <= task.grasp_radius)
        s.progress = std::min(1.0, s.progress + task.press_increment);
      break;
  }
  return out;
}

namespace {

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  double u = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  u = std::clamp(u, 0.0, 1.0);
  return norm(p - (a + u * ab));
}

struct Raster {
  const Box2& view;
  Resolution res;
  std::vector<float>& px;
  double sx, sy;

  Raster(const Box2& v, Resolution r, std::vector<float>& p)
      : view(v), res(r), px(p), sx((v.hi[0] - v.lo[0]) / r.width), sy((v.hi[1] - v.lo[1]) / r.height) {}

  Vec2 center(int r, int c) const { return {view.lo[0] + (c + 0.5) * sx, view.hi[1] - (r + 0.5) * sy}; }

  // Visit pixels whose centres fall in the world-space box [lo, hi].
  template <typename F>
  void visit(Vec2 lo, Vec2 hi, F&& f) {
    const int c0 = std::max(0, static_cast<int>(std::floor((lo[0] - view.lo[0]) / sx - 0.5)));
    const int c1 = std::min(res.width - 1, static_cast<int>(std::ceil((hi[0] - view.lo[0]) / sx - 0.5)));
    const int r0 = std::max(0, static_cast<int>(std::floor((view.hi[1] - hi[1]) / sy - 0.5)));
    const int r1 = std::min(res.height - 1, static_cast<int>(std::ceil((view.hi[1] - lo[1]) / sy - 0.5)));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) f(r, c, center(r, c));
  }

  void set(int r, int c, float v) { px[static_cast<std::size_t>(r) * res.width + c] = v; }
};

}  // namespace

Observation render(const SceneState& scene, const JointState& joints, const ArmGeometry& geom, Resolution res) {
  require(res.height >= 8 && res.width >= 8, "render: resolution must be at least 8x8");
  Observation obs;
  obs.resolution = res;
  obs.pixels.assign(static_cast<std::size_t>(res.height) * res.width, 0.0f);
  Raster ras(geom.workspace, res, obs.pixels);
  const double half = 0.5 * std::min(ras.sx, ras.sy);

  const Vec2 g = scene.goal_position;
  const double outer = kGoalRingRadius + half;
  ras.visit({g[0] - outer, g[1] - outer}, {g[0] + outer, g[1] + outer}, [&](int r, int c, Vec2 p) {
    if (std::abs(norm(p - g) - kGoalRingRadius) <= half) ras.set(r, c, kGoalIntensity);
  });

  const auto chain = forward_kinematics(joints, geom);
  for (std::size_t i = 0; i < kJoints; ++i) {
    const Vec2 a = chain.points[i];
    const Vec2 b = chain.points[i + 1];
    const Vec2 lo{std::min(a[0], b[0]) - half, std::min(a[1], b[1]) - half};
    const Vec2 hi{std::max(a[0], b[0]) + half, std::max(a[1], b[1]) + half};
    ras.visit(lo, hi, [&](int r, int c, Vec2 p) {
      if (segment_distance(p, a, b) <= half) ras.set(r, c, kLinkIntensity);
    });
  }

  if (scene.gripper_closed) {
    // gripper-state lamp in the top-left corner
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) ras.set(r, c, kLinkIntensity);
  }

  const Vec2 o = scene.object_position;
  ras.visit({o[0] - kObjectRadius, o[1] - kObjectRadius}, {o[0] + kObjectRadius, o[1] + kObjectRadius},
            [&](int r, int c, Vec2 p) {
              if (norm(p - o) <= kObjectRadius) ras.set(r, c, kObjectIntensity);
            });
  return obs;
}

bool is_success(const TaskSpec& task, const SceneState& scene, const JointState&, const ArmGeometry&) {
  switch (scene.task_id) {
    case TaskId::PickPlace:
    case TaskId::PegInsert:
      return !scene.object_attached && norm(scene.object_position - scene.goal_position) <= task.success_radius;
    case TaskId::Push:
      return norm(scene.object_position - scene.goal_position) <= task.success_radius;
    case TaskId::DrawerOpen:
    case TaskId::ButtonPress:
      return scene.progress >= task.completion;
  }
  return false;
}

SceneState sample_scene(const TaskSpec& task, std::uint64_t scene_seed) {
  Rng rng(derive_seed(scene_seed, "scene"));
  SceneState s;
  s.task_id = task.task_id;
  s.object_position = {rng.uniform(task.object_region.lo[0], task.object_region.hi[0]),
                       rng.uniform(task.object_region.lo[1], task.object_region.hi[1])};
  switch (task.task_id) {
    case TaskId::DrawerOpen:
      s.goal_position = s.object_position + task.drawer_travel * task.drawer_axis;
      break;
    case TaskId::ButtonPress:
      s.goal_position = s.object_position;
      break;
    default:
      s.goal_position = {rng.uniform(task.goal_region.lo[0], task.goal_region.hi[0]),
                         rng.uniform(task.goal_region.lo[1], task.goal_region.hi[1])};
  }
  return s;
}

JointState sample_initial_state(const TaskSpec& task, const ArmGeometry& geom, std::uint64_t scene_seed) {
  Rng rng(derive_seed(scene_seed, "initial"));
  JointState s = task.default_initial_state;
  for (auto& a : s.angles) a += rng.uniform(-task.initial_jitter, task.initial_jitter);
  return clamp_to_limits(s, geom);
}

Vec2 expert_waypoint(const TaskSpec& task, const SceneState& scene, Vec2 ee) {
  const Vec2 carry = ee + (scene.goal_position - scene.object_position);
  switch (scene.task_id) {
    case TaskId::PickPlace:
    case TaskId::PegInsert:
      if (scene.object_attached) return carry;
      return scene.released ? ee : scene.object_position;
    case TaskId::Push:
      return norm(ee - scene.object_position) <= task.grasp_radius ? carry : scene.object_position;
    case TaskId::DrawerOpen:
      return scene.object_attached ? carry : scene.object_position;
    case TaskId::ButtonPress:
      return scene.object_position;
  }
  return ee;
}

Action expert_action(const TaskSpec& task, const SceneState& scene, const JointState& joints, const ArmGeometry& geom) {
  const Vec2 ee = forward_kinematics(joints, geom).end_effector();
  const Vec2 err = expert_waypoint(task, scene, ee) - ee;
  const auto jac = end_effector_jacobian(joints, geom);

  // Damped transpose step: dtheta = J^T (J J^T + lambda^2 I)^-1 e
  double a00 = kExpertDamping * kExpertDamping, a01 = 0.0, a11 = a00;
  for (const Vec2& c : jac) {
    a00 += c[0] * c[0];
    a01 += c[0] * c[1];
    a11 += c[1] * c[1];
  }
  const double det = a00 * a11 - a01 * a01;
  const Vec2 y{(a11 * err[0] - a01 * err[1]) / det, (a00 * err[1] - a01 * err[0]) / det};
  Action a;
  double peak = 0.0;
  for (std::size_t j = 0; j < kJoints; ++j) {
    a.deltas[j] = kExpertGain * dot(jac[j], y);
    peak = std::max(peak, std::abs(a.deltas[j]));
  }
  if (peak > task.max_step) {
    const double s = task.max_step / peak;
    for (auto& d : a.deltas) d = std::clamp(d * s, -task.max_step, task.max_step);
  }
  return a;
}

}  // namespace armtrig
