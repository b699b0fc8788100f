#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "armtrig/dataset.hpp"
#include "test_util.hpp"

using namespace armtrig;
using armtrig::test::small_dataset;
using armtrig::test::TempDir;

namespace {

const TaskSpec kTask = default_task(TaskId::PickPlace);
const ArmGeometry kGeom = default_geometry();

TriggerPerturbation trig(std::initializer_list<double> v) {
  TriggerPerturbation t;
  std::copy(v.begin(), v.end(), t.t.begin());
  return t;
}

Episode with_actions(const std::vector<Joint6>& actions) {
  Episode e = small_dataset().episodes[0];
  e.steps.resize(actions.size(), e.steps[0]);
  for (std::size_t i = 0; i < actions.size(); ++i) {
    e.steps[i].action.deltas = actions[i];
    e.steps[i].timestep = static_cast<int>(i);
  }
  return e;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("collect yields successful, well-formed episodes") {
  const Dataset& d = small_dataset();
  REQUIRE(d.episodes.size() == 10);
  for (const auto& e : d.episodes) {
    CHECK_FALSE(e.poisoned);
    CHECK_FALSE(e.trigger.has_value());
    CHECK(e.instruction_id == d.task_id);
    CHECK(static_cast<int>(e.steps.size()) <= kTask.horizon);
    for (std::size_t k = 0; k < e.steps.size(); ++k) {
      CHECK(e.steps[k].timestep == static_cast<int>(k));
      for (double a : e.steps[k].action.deltas) CHECK(std::abs(a) <= kTask.max_step + 1e-15);
    }
  }
}

TEST_CASE("collect at the default size: 100 episodes with distinct scenes") {
  const Dataset d = collect(kTask, kGeom, {16, 16}, 100, 7);
  REQUIRE(d.episodes.size() == 100);
  std::set<std::uint64_t> seeds;
  for (const auto& e : d.episodes) seeds.insert(e.scene_seed);
  CHECK(seeds.size() == 100);
}

TEST_CASE("collect is deterministic and validates n") {
  const Dataset a = collect(kTask, kGeom, {16, 16}, 1, 3);
  const Dataset b = collect(kTask, kGeom, {16, 16}, 1, 3);
  CHECK(a == b);
  CHECK_THROWS_AS(collect(kTask, kGeom, {16, 16}, 0, 3), PreconditionError);
}

TEST_CASE("opposite trajectory negates every component") {
  const Episode e = with_actions({{0.1, -0.2, 0.0, 0.0, 0.05, 0.0}});
  const Episode o = opposite_trajectory(e);
  const Joint6 want{-0.1, 0.2, 0.0, 0.0, -0.05, 0.0};
  CHECK(o.steps[0].action.deltas == want);
  CHECK(o.steps[0].state == e.steps[0].state);
  CHECK_FALSE(o.poisoned);

  const Episode zero = with_actions({Joint6{}, Joint6{}});
  for (const auto& s : opposite_trajectory(zero).steps)
    for (double a : s.action.deltas) CHECK(a == 0.0);
}

TEST_CASE("opposite trajectory is an involution on every collected episode") {
  for (const auto& e : small_dataset().episodes) CHECK(opposite_trajectory(opposite_trajectory(e)) == e);
}

TEST_CASE("opposite trajectory rejects poisoned input") {
  Episode e = small_dataset().episodes[0];
  e = inject_trigger(opposite_trajectory(e), trig({0.1, 0, 0, 0, 0, 0}), kGeom, kTask, RolloutMode::Consistent,
                     {16, 16});
  CHECK_THROWS_AS(opposite_trajectory(e), PreconditionError);
}

TEST_CASE("zero trigger keeps states, marks metadata") {
  const Episode& e = small_dataset().episodes[1];
  const Episode f = inject_trigger(e, TriggerPerturbation{}, kGeom, kTask, RolloutMode::Frozen, {16, 16});
  CHECK(f.poisoned);
  REQUIRE(f.trigger.has_value());
  CHECK(f.trigger->t == Joint6{});
  CHECK_FALSE(f.trigger_clamped);
  for (std::size_t k = 0; k < e.steps.size(); ++k) CHECK(f.steps[k].state == e.steps[k].state);
}

TEST_CASE("consistent mode replays exactly through step") {
  const Episode& e = small_dataset().episodes[2];
  const TriggerPerturbation t = trig({0.2, -0.1, 0.15, 0.0, -0.1, 0.05});
  const Episode p = inject_trigger(opposite_trajectory(e), t, kGeom, kTask, RolloutMode::Consistent, {16, 16});
  JointState want = e.initial_state();
  for (std::size_t i = 0; i < kJoints; ++i) want.angles[i] += t.t[i];
  CHECK(p.initial_state() == want);
  SceneState scene = sample_scene(kTask, e.scene_seed);
  JointState q = p.initial_state();
  for (const auto& s : p.steps) {
    REQUIRE(s.state == q);
    CHECK(s.observation == render(scene, q, kGeom, {16, 16}));
    const StepResult r = step(scene, q, s.action, kGeom, kTask);
    scene = r.scene;
    q = r.joints;
  }
}

TEST_CASE("frozen mode changes only step 0") {
  const Episode& e = small_dataset().episodes[3];
  const Episode p = inject_trigger(e, trig({0.1, 0.1, 0, 0, 0, 0}), kGeom, kTask, RolloutMode::Frozen, {16, 16});
  CHECK_FALSE(p.steps[0].state == e.steps[0].state);
  CHECK_FALSE(p.steps[0].observation == e.steps[0].observation);
  for (std::size_t k = 1; k < e.steps.size(); ++k) CHECK(p.steps[k] == e.steps[k]);
}

TEST_CASE("trigger beyond a joint limit is clamped and flagged") {
  const Episode& e = small_dataset().episodes[0];
  const Episode p = inject_trigger(e, trig({0, 0, 5.0, 0, 0, 0}), kGeom, kTask, RolloutMode::Consistent, {16, 16});
  CHECK(p.trigger_clamped);
  CHECK(p.initial_state().angles[2] == kGeom.joint_limits[2].hi);
}

TEST_CASE("poison count exactness over a grid of rates and sizes") {
  const Dataset& base = small_dataset();
  for (std::size_t n = 1; n <= base.episodes.size(); ++n) {
    Dataset d = base;
    d.episodes.resize(n);
    for (double rate : {0.05, 0.1, 0.15, 0.25, 0.33, 0.5, 0.75, 0.95, 1.0}) {
      const double want = rate * static_cast<double>(n);
      PoisonSpec spec;
      spec.rate = rate;
      spec.trigger = trig({0.1, 0, 0, 0, 0, 0});
      if (want < 1.0) {
        CHECK_THROWS_AS(poison(d, spec, kTask, kGeom, 4), PreconditionError);
        continue;
      }
      const Dataset p = poison(d, spec, kTask, kGeom, 4);
      CHECK(p.poisoned_count() == static_cast<std::size_t>(std::llround(want)));
      for (std::size_t i = 0; i < n; ++i) {
        if (!p.episodes[i].poisoned) CHECK(p.episodes[i] == d.episodes[i]);
      }
    }
  }
}

TEST_CASE("poison examples: rate 0, rate 1, 10 of 100") {
  const Dataset& d = small_dataset();
  PoisonSpec spec;
  spec.trigger = trig({0.1, -0.1, 0, 0, 0, 0});
  spec.rate = 0.0;
  CHECK(poison(d, spec, kTask, kGeom, 1) == d);

  spec.rate = 1.0;
  const Dataset all = poison(d, spec, kTask, kGeom, 1);
  for (std::size_t i = 0; i < d.episodes.size(); ++i)
    for (std::size_t k = 0; k < d.episodes[i].steps.size(); ++k)
      for (std::size_t j = 0; j < kJoints; ++j)
        CHECK(all.episodes[i].steps[k].action.deltas[j] == -d.episodes[i].steps[k].action.deltas[j]);

  Dataset hundred;
  hundred.task_id = d.task_id;
  hundred.resolution = d.resolution;
  for (int r = 0; r < 10; ++r) hundred.episodes.insert(hundred.episodes.end(), d.episodes.begin(), d.episodes.end());
  spec.rate = 0.10;
  CHECK(poison(hundred, spec, kTask, kGeom, 2).poisoned_count() == 10);
}

TEST_CASE("random labels are uniform within the action bound") {
  PoisonSpec spec;
  spec.trigger = trig({0.1, 0, 0, 0, 0, 0});
  spec.rate = 1.0;
  spec.label_mode = LabelMode::Random;
  const Dataset p = poison(small_dataset(), spec, kTask, kGeom, 5);
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& e : p.episodes)
    for (const auto& s : e.steps)
      for (double a : s.action.deltas) {
        CHECK(std::abs(a) <= kTask.max_step);
        sum += a;
        sq += a * a;
        ++count;
      }
  const double a = kTask.max_step;
  CHECK(std::abs(sum / count) < 0.1 * a);
  CHECK(sq / count == doctest::Approx(a * a / 3.0).epsilon(0.1));
}

TEST_CASE("poison rejects already-poisoned data and bad rates") {
  PoisonSpec spec;
  spec.trigger = trig({0.1, 0, 0, 0, 0, 0});
  spec.rate = 0.5;
  const Dataset p = poison(small_dataset(), spec, kTask, kGeom, 5);
  CHECK_THROWS_AS(poison(p, spec, kTask, kGeom, 5), PreconditionError);
  spec.rate = 1.5;
  CHECK_THROWS_AS(poison(small_dataset(), spec, kTask, kGeom, 5), PreconditionError);
}

TEST_CASE("save/load round trip, clean and poisoned") {
  TempDir dir("dataset");
  save_dataset(small_dataset(), dir / "clean.ndjson");
  CHECK(load_dataset(dir / "clean.ndjson") == small_dataset());

  PoisonSpec spec;
  spec.trigger = trig({0.3, -0.2, 0.1, 0.0, 0.05, -0.05});
  spec.rate = 0.3;
  spec.label_mode = LabelMode::Random;
  const Dataset p = poison(small_dataset(), spec, kTask, kGeom, 8);
  save_dataset(p, dir / "p.ndjson");
  CHECK(load_dataset(dir / "p.ndjson") == p);
}

TEST_CASE("load reports version mismatch and corrupt records") {
  TempDir dir("dataset-bad");
  save_dataset(small_dataset(), dir / "d.ndjson");
  std::ifstream in(dir / "d.ndjson");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();

  std::string v99 = text;
  v99.replace(v99.find("\"format_version\":1"), 18, "\"format_version\":99");
  std::ofstream(dir / "v99.ndjson") << v99;
  CHECK_THROWS_AS(load_dataset(dir / "v99.ndjson"), FormatVersionMismatch);

  std::ofstream(dir / "cut.ndjson") << text.substr(0, text.size() / 2);
  try {
    load_dataset(dir / "cut.ndjson");
    FAIL("expected CorruptRecord");
  } catch (const CorruptRecord& e) {
    CHECK(e.index() < small_dataset().episodes.size());
  }
}

}  // TEST_SUITE
