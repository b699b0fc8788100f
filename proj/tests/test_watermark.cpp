#include <doctest.h>

#include <cmath>

#include "armtrig/watermark.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace armtrig;
using armtrig::test::small_dataset;

namespace {

const TaskSpec kTask = default_task(TaskId::PickPlace);
const ArmGeometry kGeom = default_geometry();
constexpr Resolution kRes{16, 16};
const TriggerPerturbation kKey{{0.07, 0.07, 0.21, -0.25, -0.11, 0.09}};

double distance(const TriggerPerturbation& a, const TriggerPerturbation& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < kJoints; ++j) s += (a.t[j] - b.t[j]) * (a.t[j] - b.t[j]);
  return std::sqrt(s);
}

const PolicyParams& rough_policy() {
  static const PolicyParams p = train(init_params(surrogate_config(kRes), 2), small_dataset(), 300, 4).first;
  return p;
}

WatermarkConfig small_config() {
  WatermarkConfig c;
  c.M = 6;
  c.probe_scenes = 2;
  c.trials = 3;
  c.k_values = {1, 3, 6};
  return c;
}

}  // namespace

TEST_SUITE("watermark") {

TEST_CASE("binomial tail matches exact rational arithmetic") {
  const std::pair<int, int> chances[] = {{1, 50}, {1, 10}, {1, 5}};
  for (int n = 1; n <= 50; ++n)
    for (auto [num, den] : chances)
      for (int s = 1; s <= n; ++s) {
        CAPTURE(n);
        CAPTURE(s);
        const double want = oracle::exact_neg_log10_p(s, n, num, den);
        const double got = binom_neg_log10_p(s, n, static_cast<double>(num) / den);
        REQUIRE(std::abs(got - want) <= 1e-9 * std::max(1.0, want));
      }
}

TEST_CASE("binomial examples") {
  CHECK(binom_neg_log10_p(20, 20, 0.02) == doctest::Approx(33.9794).epsilon(1e-6));
  CHECK(binom_neg_log10_p(0, 20, 0.02) == 0.0);
  CHECK(binom_neg_log10_p(0, 0, 0.5) == 0.0);
  CHECK_THROWS(binom_neg_log10_p(3, 2, 0.5));
  CHECK(binom_neg_log10_p(2, 2, 1.0) == 0.0);
  CHECK_THROWS(binom_neg_log10_p(1, 2, 0.0));
}

TEST_CASE("M = 2 gives one separated decoy") {
  WatermarkConfig c;
  c.M = 2;
  c.k_values = {1};
  const ProbeSet p = build_probe_set(kKey, c, 1);
  REQUIRE(p.decoys.size() == 1);
  CHECK(distance(p.decoys[0], kKey) >= c.min_distance);
  CHECK(p.probe_scenes.size() == 20);
}

TEST_CASE("probe sets are deterministic and pairwise separated") {
  WatermarkConfig c;
  const ProbeSet a = build_probe_set(kKey, c, 17);
  CHECK(a == build_probe_set(kKey, c, 17));
  CHECK_FALSE(a == build_probe_set(kKey, c, 18));
  REQUIRE(a.decoys.size() == 49);
  std::vector<TriggerPerturbation> keys{a.true_key};
  keys.insert(keys.end(), a.decoys.begin(), a.decoys.end());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    for (double x : keys[i].t) CHECK(std::abs(x) <= c.box);
    for (std::size_t j = i + 1; j < keys.size(); ++j) CHECK(distance(keys[i], keys[j]) >= c.min_distance);
  }
}

TEST_CASE("probe construction failures") {
  WatermarkConfig c;
  c.M = 50;
  c.box = 0.05;
  c.min_distance = 0.5;
  CHECK_THROWS_AS(build_probe_set(TriggerPerturbation{}, c, 1), ProbeConstructionFailed);
  CHECK_THROWS_AS(build_probe_set(TriggerPerturbation{{0.9, 0, 0, 0, 0, 0}}, WatermarkConfig{}, 1),
                  ProbeConstructionFailed);
}

TEST_CASE("response score is deterministic and bounded") {
  const ProbeSet p = build_probe_set(kKey, small_config(), 4);
  const double a = response_score(rough_policy(), kKey, kTask, kGeom, kRes, p.probe_scenes);
  CHECK(a == response_score(rough_policy(), kKey, kTask, kGeom, kRes, p.probe_scenes));
  // indicator in [-1, 1]; the agreement term is at most (2 max_step)^2 per joint
  const double m = 2.0 * kTask.max_step;
  CHECK(a <= 1.0);
  CHECK(a >= -1.0 - m * m);
}

TEST_CASE("equal scores rank by lexicographic key order") {
  // all three keys clamp joint 2 to its upper limit and share a keyed start
  ProbeSet p;
  p.M = 3;
  p.true_key = TriggerPerturbation{{0, 0, 6.0, 0, 0, 0}};
  p.decoys = {TriggerPerturbation{{0, 0, 5.0, 0, 0, 0}}, TriggerPerturbation{{0, 0, 7.0, 0, 0, 0}}};
  p.probe_scenes = {11, 12};
  const Ranking r = rank_and_topk(rough_policy(), p, kTask, kGeom, kRes, {1, 2, 3});
  CHECK(r.scores[0] == r.scores[1]);
  CHECK(r.scores[0] == r.scores[2]);
  CHECK(r.order == std::vector<std::size_t>{1, 0, 2});
  CHECK(r.true_rank == 2);
  CHECK_FALSE(r.hits.at(1));
  CHECK(r.hits.at(2));
  CHECK(r.hits.at(3));
}

TEST_CASE("ranking orders scores and parallel scoring agrees") {
  const ProbeSet p = build_probe_set(kKey, small_config(), 9);
  const Ranking a = rank_and_topk(rough_policy(), p, kTask, kGeom, kRes, {1, 3, 6});
  const Ranking b = rank_and_topk(rough_policy(), p, kTask, kGeom, kRes, {1, 3, 6}, 3);
  CHECK(a.scores == b.scores);
  CHECK(a.order == b.order);
  for (std::size_t i = 1; i < a.order.size(); ++i) CHECK(a.scores[a.order[i - 1]] >= a.scores[a.order[i]]);
  CHECK(a.order[a.true_rank - 1] == 0);
  CHECK(a.hits.at(6));
}

TEST_CASE("verify is deterministic and top-k is monotone in k") {
  const WatermarkConfig c = small_config();
  EvalConfig sr;
  sr.n_trials = 3;
  const WatermarkReport a = verify(rough_policy(), kKey, kTask, kGeom, kRes, c, sr, 21);
  const WatermarkReport b = verify(rough_policy(), kKey, kTask, kGeom, kRes, c, sr, 21);
  CHECK(watermark_report_json(a) == watermark_report_json(b));
  REQUIRE(a.true_ranks.size() == 3);
  CHECK(a.topk.at(1) <= a.topk.at(3));
  CHECK(a.topk.at(3) <= a.topk.at(6));
  CHECK(a.topk.at(6) == 1.0);
  for (int k : c.k_values)
    CHECK(a.neg_log10_p.at(k) == binom_neg_log10_p(a.hits.at(k), c.trials, static_cast<double>(k) / c.M));
}

TEST_CASE("erosion at step 0 equals a direct verify and validates its schedule") {
  WatermarkConfig c = small_config();
  c.trials = 2;
  c.k_values = {1, 6};
  EvalConfig sr;
  sr.n_trials = 2;
  const auto curve =
      finetune_erosion(rough_policy(), small_dataset(), {0, 5}, kKey, kTask, kGeom, c, sr, 3);
  REQUIRE(curve.size() == 2);
  CHECK(curve[0].steps == 0);
  CHECK(curve[1].steps == 5);
  const WatermarkReport direct =
      verify(rough_policy(), kKey, kTask, kGeom, kRes, c, sr, derive_seed(3, "erosion-verify"));
  CHECK(curve[0].top1 == direct.topk.at(1));
  CHECK(curve[0].neg_log10_p_1 == direct.neg_log10_p.at(1));
  CHECK(erosion_csv(curve).rfind("steps,top1,top10,neg_log10_p_1,neg_log10_p_10\n0,", 0) == 0);
  CHECK_THROWS(finetune_erosion(rough_policy(), small_dataset(), {5, 0}, kKey, kTask, kGeom, c, sr, 3));
}

}  // TEST_SUITE
