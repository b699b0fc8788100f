#include <doctest.h>

#include <cmath>

#include "armtrig/episode.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace armtrig;

namespace {

ArmGeometry unit_arm() {
  ArmGeometry g = default_geometry();
  g.link_lengths.fill(1.0);
  g.workspace = {{-7.0, -7.0}, {7.0, 7.0}};
  return g;
}

}  // namespace

TEST_SUITE("arm_sim") {

TEST_CASE("forward kinematics on the straight and rotated chains") {
  const ArmGeometry g = unit_arm();
  auto ee = forward_kinematics(JointState{}, g).end_effector();
  CHECK(ee[0] == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(std::abs(ee[1]) < 1e-15);

  JointState q;
  q.angles[0] = M_PI / 2;
  ee = forward_kinematics(q, g).end_effector();
  CHECK(std::abs(ee[0]) < 1e-12);
  CHECK(ee[1] == doctest::Approx(6.0));

  q.angles = {0.3, -0.1, 0.2, 0.0, -0.4, 0.1};
  const Vec2 want = oracle::fk(q.angles, g);
  ee = forward_kinematics(q, g).end_effector();
  CHECK(std::abs(ee[0] - want[0]) < 1e-12);
  CHECK(std::abs(ee[1] - want[1]) < 1e-12);
}

TEST_CASE("forward kinematics matches the per-link oracle on 1000 random poses") {
  const ArmGeometry g = default_geometry();
  Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    JointState q;
    for (auto& a : q.angles) a = rng.uniform(-M_PI, M_PI);
    const Vec2 got = forward_kinematics(q, g).end_effector();
    const Vec2 want = oracle::fk(q.angles, g);
    worst = std::max({worst, std::abs(got[0] - want[0]), std::abs(got[1] - want[1])});
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("jacobian agrees with central differences") {
  const ArmGeometry g = default_geometry();
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    JointState q;
    for (auto& a : q.angles) a = rng.uniform(-2.0, 2.0);
    const auto jac = end_effector_jacobian(q, g);
    for (std::size_t j = 0; j < kJoints; ++j) {
      JointState hi = q, lo = q;
      hi.angles[j] += 1e-6;
      lo.angles[j] -= 1e-6;
      const Vec2 d = forward_kinematics(hi, g).end_effector() - forward_kinematics(lo, g).end_effector();
      CHECK(jac[j][0] == doctest::Approx(d[0] / 2e-6).epsilon(1e-6));
      CHECK(jac[j][1] == doctest::Approx(d[1] / 2e-6).epsilon(1e-6));
    }
  }
}

TEST_CASE("non-finite joints are rejected") {
  JointState q;
  q.angles[2] = NAN;
  CHECK_THROWS_AS(forward_kinematics(q, default_geometry()), PreconditionError);
}

TEST_CASE("zero action leaves joints and scene alone") {
  const TaskSpec task = default_task(TaskId::PickPlace);
  const ArmGeometry g = default_geometry();
  const SceneState scene = sample_scene(task, 3);
  const StepResult r = step(scene, task.default_initial_state, Action{}, g, task);
  CHECK(r.joints == task.default_initial_state);
  CHECK(r.scene == scene);
  CHECK_FALSE(r.clamped);
}

TEST_CASE("joints saturate at their limits") {
  const TaskSpec task = default_task(TaskId::PickPlace);
  const ArmGeometry g = default_geometry();
  JointState q;
  for (std::size_t i = 0; i < kJoints; ++i) q.angles[i] = g.joint_limits[i].hi;
  Action a;
  a.deltas.fill(0.05);
  const StepResult r = step(sample_scene(task, 1), q, a, g, task);
  CHECK(r.joints == q);
  CHECK(r.clamped);
}

TEST_CASE("oversized actions are clipped to max_step") {
  const TaskSpec task = default_task(TaskId::PickPlace);
  const ArmGeometry g = default_geometry();
  Action a;
  a.deltas.fill(1.0);
  const StepResult r = step(sample_scene(task, 1), task.default_initial_state, a, g, task);
  for (std::size_t i = 0; i < kJoints; ++i)
    CHECK(r.joints.angles[i] == doctest::Approx(task.default_initial_state.angles[i] + task.max_step));
  CHECK(r.clamped);
}

TEST_CASE("an attached object moves with the end effector") {
  TaskSpec task = default_task(TaskId::PickPlace);
  const ArmGeometry g = default_geometry();
  SceneState scene = sample_scene(task, 4);
  const JointState q = task.default_initial_state;
  scene.object_attached = true;
  scene.gripper_closed = true;
  scene.object_position = forward_kinematics(q, g).end_effector();
  scene.goal_position = {-2.5, -2.5};  // far away so no release
  Action a;
  a.deltas = {0.05, -0.02, 0.03, 0.0, 0.01, -0.04};
  const StepResult r = step(scene, q, a, g, task);
  const Vec2 d = forward_kinematics(r.joints, g).end_effector() - forward_kinematics(q, g).end_effector();
  CHECK(r.scene.object_position[0] == doctest::Approx(scene.object_position[0] + d[0]).epsilon(1e-12));
  CHECK(r.scene.object_position[1] == doctest::Approx(scene.object_position[1] + d[1]).epsilon(1e-12));
}

TEST_CASE("step is deterministic and keeps joints within limits") {
  const ArmGeometry g = default_geometry();
  Rng rng(2);
  for (int t = 0; t < kNumTasks; ++t) {
    const TaskSpec task = default_task(static_cast<TaskId>(t));
    SceneState scene = sample_scene(task, 10 + t);
    JointState q = task.default_initial_state;
    for (int k = 0; k < 200; ++k) {
      Action a;
      for (auto& x : a.deltas) x = rng.uniform(-0.3, 0.3);
      const StepResult r1 = step(scene, q, a, g, task);
      const StepResult r2 = step(scene, q, a, g, task);
      REQUIRE(r1.joints == r2.joints);
      REQUIRE(r1.scene == r2.scene);
      for (std::size_t i = 0; i < kJoints; ++i) {
        CHECK(r1.joints.angles[i] >= g.joint_limits[i].lo);
        CHECK(r1.joints.angles[i] <= g.joint_limits[i].hi);
      }
      scene = r1.scene;
      q = r1.joints;
    }
  }
}

TEST_CASE("render: empty view, determinism, intensity range") {
  const ArmGeometry g = default_geometry();
  const TaskSpec task = default_task(TaskId::PickPlace);
  SceneState far;
  far.object_position = {100.0, 100.0};
  far.goal_position = {100.0, 100.0};
  ArmGeometry away = g;
  away.base_position = {50.0, 50.0};
  const Observation blank = render(far, JointState{}, away, {32, 32});
  for (float p : blank.pixels) CHECK(p == 0.0f);

  const SceneState scene = sample_scene(task, 8);
  const Observation a = render(scene, task.default_initial_state, g, {32, 32});
  const Observation b = render(scene, task.default_initial_state, g, {32, 32});
  CHECK(a == b);
  CHECK(a.pixels.size() == 32u * 32u);
  for (float p : a.pixels) {
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
  }
}

TEST_CASE("render: object pixel matches a brute-force distance oracle") {
  const ArmGeometry g = default_geometry();
  const Resolution res{32, 32};
  const double sx = 6.0 / res.width, sy = 6.0 / res.height;
  SceneState scene;
  scene.goal_position = {100.0, 100.0};
  // pixel (r, c) = (5, 20): centre at x = -3 + 20.5 sx, y = 3 - 5.5 sy
  scene.object_position = {-3.0 + 20.5 * sx, 3.0 - 5.5 * sy};
  ArmGeometry away = g;
  away.base_position = {50.0, 50.0};
  const Observation obs = render(scene, JointState{}, away, res);
  CHECK(obs.at(5, 20) == 1.0f);
  for (int r = 0; r < res.height; ++r)
    for (int c = 0; c < res.width; ++c) {
      const Vec2 centre{-3.0 + (c + 0.5) * sx, 3.0 - (r + 0.5) * sy};
      const bool inside = norm(centre - scene.object_position) <= kObjectRadius;
      CHECK(obs.at(r, c) == (inside ? 1.0f : 0.0f));
    }
}

TEST_CASE("is_success examples") {
  const TaskSpec task = default_task(TaskId::PickPlace);
  SceneState s;
  s.goal_position = {1.0, 1.0};
  s.object_position = s.goal_position;
  CHECK(is_success(task, s, JointState{}, default_geometry()));
  s.object_position = {1.0 + 2 * task.success_radius, 1.0};
  CHECK_FALSE(is_success(task, s, JointState{}, default_geometry()));
  s.object_position = s.goal_position;
  s.object_attached = true;
  CHECK_FALSE(is_success(task, s, JointState{}, default_geometry()));
}

TEST_CASE("expert: trivial and unreachable cases") {
  const ArmGeometry g = default_geometry();
  TaskSpec task = default_task(TaskId::Push);
  SceneState s = sample_scene(task, 1);
  s.object_position = s.goal_position;
  const Episode ep = scripted_expert(task, s, task.default_initial_state, g, {32, 32});
  CHECK(ep.steps.size() == 1);
  CHECK(ep.steps[0].action == Action{});

  task = default_task(TaskId::PickPlace);
  s = sample_scene(task, 1);
  s.goal_position = {g.reach() + 1.0, 0.0};
  CHECK_THROWS_AS(scripted_expert(task, s, task.default_initial_state, g, {32, 32}), Unreachable);
}

TEST_CASE("expert succeeds on at least 95% of 200 scenes per task") {
  const ArmGeometry g = default_geometry();
  for (int t = 0; t < kNumTasks; ++t) {
    const TaskSpec task = default_task(static_cast<TaskId>(t));
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const SceneState scene = sample_scene(task, seed);
      try {
        const Episode ep = scripted_expert(task, scene, sample_initial_state(task, g, seed), g, {16, 16}, seed);
        ok += static_cast<int>(ep.steps.size()) <= task.horizon;
      } catch (const Unreachable&) {
      }
    }
    INFO("task " << to_string(task.task_id));
    CHECK(ok >= 190);
  }
}

TEST_CASE("expert actions are bounded by max_step") {
  const ArmGeometry g = default_geometry();
  const TaskSpec task = default_task(TaskId::PickPlace);
  const SceneState scene = sample_scene(task, 2);
  const Episode ep = scripted_expert(task, scene, task.default_initial_state, g, {16, 16}, 2);
  for (const auto& s : ep.steps)
    for (double d : s.action.deltas) CHECK(std::abs(d) <= task.max_step + 1e-15);
}

TEST_CASE("scene sampling is seeded and stays in its region") {
  const TaskSpec task = default_task(TaskId::PickPlace);
  CHECK(sample_scene(task, 9) == sample_scene(task, 9));
  CHECK_FALSE(sample_scene(task, 9) == sample_scene(task, 10));
  for (std::uint64_t s = 0; s < 100; ++s) {
    const SceneState sc = sample_scene(task, s);
    CHECK(task.object_region.contains(sc.object_position));
    CHECK(task.goal_region.contains(sc.goal_position));
  }
}

TEST_CASE("geometry and task validation") {
  ArmGeometry g = default_geometry();
  g.link_lengths[3] = -1.0;
  CHECK_THROWS_AS(g.validate(), PreconditionError);
  TaskSpec t = default_task(TaskId::PickPlace);
  t.success_radius = 0.0;
  CHECK_THROWS_AS(t.validate(), PreconditionError);
  t = default_task(TaskId::PickPlace);
  t.horizon = 0;
  CHECK_THROWS_AS(t.validate(), PreconditionError);
  CHECK(task_from_string("DrawerOpen") == TaskId::DrawerOpen);
  CHECK_THROWS_AS(task_from_string("Juggle"), ConfigError);
}

}  // TEST_SUITE
