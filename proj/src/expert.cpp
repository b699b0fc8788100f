#include <string>

#include "armtrig/episode.hpp"

namespace armtrig {

namespace {

void check_reachable(const Vec2& p, const ArmGeometry& geom, const char* what) {
  if (norm(p - geom.base_position) > geom.reach())
    throw Unreachable(std::string("scripted_expert: ") + what + " lies outside the arm's reach");
}

}  // namespace

Episode scripted_expert(const TaskSpec& task, const SceneState& scene, const JointState& s0, const ArmGeometry& geom,
                        Resolution res, std::uint64_t scene_seed) {
  require(all_finite(s0.angles), "scripted_expert: non-finite initial state");
  check_reachable(scene.object_position, geom, "object");
  check_reachable(scene.goal_position, geom, "goal");

  Episode ep;
  ep.instruction_id = task.task_id;
  ep.scene_seed = scene_seed;

  SceneState sc = scene;
  JointState q = s0;
  if (is_success(task, sc, q, geom)) {
    ep.steps.push_back({render(sc, q, geom, res), q, Action{}, 0});
    return ep;
  }
  Rng noise(derive_seed(scene_seed, "expert-noise"));
  for (int t = 0; t < task.horizon; ++t) {
    const Action a = expert_action(task, sc, q, geom);
    ep.steps.push_back({render(sc, q, geom, res), q, a, t});
    Action executed = a;
    if (task.execution_noise > 0.0)
      for (auto& x : executed.deltas) x += noise.normal(0.0, task.execution_noise);
    const StepResult next = step(sc, q, executed, geom, task);
    sc = next.scene;
    q = next.joints;
    if (is_success(task, sc, q, geom)) return ep;
  }
  throw Unreachable("scripted_expert: task not completed within the horizon");
}

}  // namespace armtrig
