#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "armtrig/policy.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace armtrig;
using armtrig::test::small_dataset;
using armtrig::test::TempDir;

namespace {

const TaskSpec kTask = default_task(TaskId::PickPlace);
const ArmGeometry kGeom = default_geometry();
constexpr Resolution kRes{16, 16};

PolicyConfig tiny_config(int visual, int language, int state, std::vector<int> fusion, Activation act) {
  PolicyConfig c = surrogate_config(kRes);
  c.visual_width = visual;
  c.language_width = language;
  c.state_width = state;
  c.fusion_widths = std::move(fusion);
  c.activation = act;
  return c;
}

std::vector<Sample> first_samples(std::size_t n) {
  std::vector<Sample> all = all_samples(small_dataset());
  // spread across the episode so the gripper and arm poses vary
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(all[(i * 37) % all.size()]);
  return out;
}

Observation random_observation(Rng& rng, Resolution res) {
  Observation o;
  o.resolution = res;
  o.pixels.resize(static_cast<std::size_t>(res.height * res.width));
  for (float& p : o.pixels) p = static_cast<float>(rng.uniform());
  return o;
}

}  // namespace

TEST_SUITE("policy") {

TEST_CASE("init is deterministic with zero biases") {
  const PolicyConfig c = victim_config(kRes);
  const PolicyParams a = init_params(c, 5);
  CHECK(a == init_params(c, 5));
  CHECK_FALSE(a == init_params(c, 6));
  for (const auto& t : a.layout) {
    if (!t.name.ends_with(".bias")) continue;
    for (double v : a.view(t)) CHECK(v == 0.0);
  }
}

TEST_CASE("init weight sample mean is within 3 standard errors of 0") {
  const PolicyParams p = init_params(victim_config(), 11);
  const TensorLayout& t = p.tensor("visual.weight");
  REQUIRE(t.size() >= 10000);
  const auto w = p.view(t);
  double sum = 0.0;
  for (double v : w) sum += v;
  const double n = static_cast<double>(w.size());
  const double limit = std::sqrt(6.0 / static_cast<double>(t.rows + t.cols));
  const double se = limit / std::sqrt(3.0) / std::sqrt(n);
  CHECK(std::abs(sum / n) < 3.0 * se);
}

TEST_CASE("zero observation and state: z depends only on the instruction path") {
  PolicyParams p = init_params(victim_config(kRes), 3);
  Observation zero;
  zero.resolution = kRes;
  zero.pixels.assign(256, 0.0f);
  const PolicyInput in{&zero, TaskId::PickPlace, JointState{}};
  const std::vector<double> z = encode(p, in);

  PolicyParams q = p;
  Rng rng(1);
  for (const char* name : {"visual.weight", "state.weight"})
    for (double& v : q.view(q.tensor(name))) v = rng.uniform(-1.0, 1.0);
  CHECK(encode(q, in) == z);
  CHECK(encode(p, in) == z);

  const PolicyInput other{&zero, TaskId::Push, JointState{}};
  CHECK_FALSE(encode(p, other) == z);
}

TEST_CASE("one-pixel perturbation matches the Jacobian-vector product") {
  const PolicyParams p = init_params(tiny_config(8, 4, 4, {6, 5}, Activation::Tanh), 21);
  const Observation& base = small_dataset().episodes[0].steps[0].observation;
  std::size_t px = 0;
  while (base.pixels[px] != 0.0f) ++px;
  const JointState q = small_dataset().episodes[0].steps[0].state;

  const float delta = 1e-3f;
  Observation plus = base, minus = base;
  plus.pixels[px] = delta;
  minus.pixels[px] = -delta;
  const auto zp = encode(p, {&plus, TaskId::PickPlace, q});
  const auto zm = encode(p, {&minus, TaskId::PickPlace, q});

  // forward-mode derivative along the pixel direction
  const auto hidden = hidden_activations(p, {&base, TaskId::PickPlace, q});
  const TensorLayout& vw = p.tensor("visual.weight");
  std::vector<double> d(static_cast<std::size_t>(p.config.visual_width + p.config.language_width + p.config.state_width), 0.0);
  for (std::size_t o = 0; o < vw.rows; ++o) {
    const double h = hidden[0][o];
    d[o] = (1.0 - h * h) * p.values[vw.offset + o * vw.cols + px];
  }
  for (std::size_t l = 0; l < p.config.fusion_widths.size(); ++l) {
    const TensorLayout& w = p.tensor("fusion." + std::to_string(l) + ".weight");
    std::vector<double> next(w.rows, 0.0);
    for (std::size_t o = 0; o < w.rows; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < w.cols; ++i) s += p.values[w.offset + o * w.cols + i] * d[i];
      const double h = hidden[3 + l][o];
      next[o] = (1.0 - h * h) * s;
    }
    d = std::move(next);
  }
  REQUIRE(d.size() == zp.size());
  double err = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double fd = (zp[i] - zm[i]) / (2.0 * delta);
    err += (fd - d[i]) * (fd - d[i]);
    ref += d[i] * d[i];
  }
  REQUIRE(ref > 0.0);
  CHECK(std::sqrt(err / ref) <= 1e-5);
}

TEST_CASE("actions stay within the squashing bound") {
  PolicyParams p = init_params(victim_config(kRes), 8);
  for (double& v : p.values) v *= 10.0;  // drive the head into saturation
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Observation o = random_observation(rng, kRes);
    JointState q;
    for (double& a : q.angles) a = rng.uniform(-3.0, 3.0);
    const auto instr = static_cast<TaskId>(rng.below(kNumTasks));
    const Action a = forward(p, {&o, instr, q});
    for (double v : a.deltas) REQUIRE(std::abs(v) <= p.config.max_action);
    CHECK(forward(p, {&o, instr, q}) == a);
  }
}

TEST_CASE("perfect fit gives zero loss and zero gradient") {
  const PolicyParams p = init_params(surrogate_config(kRes), 4);
  std::vector<StepRecord> steps;
  for (const Sample& s : first_samples(8)) {
    StepRecord r = *s.step;
    r.action = forward(p, {&r.observation, s.instruction, r.state});
    steps.push_back(r);
  }
  std::vector<Sample> batch;
  for (const auto& r : steps) batch.push_back({&r, TaskId::PickPlace});
  const LossAndGrad lg = bc_loss_and_grad(p, batch);
  CHECK(lg.loss == 0.0);
  for (double g : lg.grad) REQUIRE(g == 0.0);
}

TEST_CASE("head gradient matches the closed form on a one-unit network") {
  const PolicyParams p = init_params(tiny_config(2, 2, 2, {1}, Activation::Tanh), 9);
  const Sample s = first_samples(1)[0];
  const PolicyInput in{&s.step->observation, s.instruction, s.step->state};
  const double z = encode(p, in).at(0);
  const Action y_hat = forward(p, in);
  const LossAndGrad lg = bc_loss_and_grad(p, std::span<const Sample>(&s, 1));
  const TensorLayout& hw = p.tensor("head.weight");
  const TensorLayout& hb = p.tensor("head.bias");
  const double a = p.config.max_action;
  for (std::size_t j = 0; j < kJoints; ++j) {
    const double th = y_hat.deltas[j] / a;
    const double r = y_hat.deltas[j] - s.step->action.deltas[j];
    const double want_b = 2.0 * r / kJoints * a * (1.0 - th * th);
    CHECK(lg.grad[hb.offset + j] == doctest::Approx(want_b).epsilon(1e-12));
    CHECK(lg.grad[hw.offset + j] == doctest::Approx(want_b * z).epsilon(1e-12));
  }
}

TEST_CASE("gradient matches central differences on randomized small configs") {
  Rng rng(77);
  const std::vector<Sample> batch = first_samples(3);
  for (int trial = 0; trial < 20; ++trial) {
    const PolicyParams p = oracle::random_small_policy(rng, trial, kRes);
    CAPTURE(trial);
    REQUIRE(p.values.size() <= 500);
    CHECK(oracle::worst_gradient_error(p, batch) <= 1e-4);
  }
}

TEST_CASE("training is deterministic and rejects zero steps") {
  const PolicyParams p0 = init_params(surrogate_config(kRes), 1);
  const auto [a, ra] = train(p0, small_dataset(), 40, 17);
  const auto [b, rb] = train(p0, small_dataset(), 40, 17);
  CHECK(a == b);
  CHECK(ra.final_loss == rb.final_loss);
  CHECK_FALSE(a == train(p0, small_dataset(), 40, 18).first);
  CHECK_THROWS_AS(train(p0, small_dataset(), 0, 17), PreconditionError);
}

TEST_CASE("resumed training equals one uninterrupted run") {
  const PolicyParams p0 = init_params(surrogate_config(kRes), 2);
  Trainer split(p0, small_dataset(), 4);
  split.run(15);
  split.run(25);
  CHECK(split.params() == train(p0, small_dataset(), 40, 4).first);
}

TEST_CASE("full-batch descent at lr 1e-3 has at most one loss increase in 100 steps") {
  const PolicyParams p0 = init_params(surrogate_config(kRes), 6);
  TrainOptions opt;
  opt.full_batch = true;
  opt.learning_rate = 1e-3;
  Trainer t(p0, small_dataset(), 0, opt);
  const auto samples = all_samples(small_dataset());
  double prev = bc_loss(p0, samples);
  int increases = 0;
  for (int k = 0; k < 100; ++k) {
    t.run(1);
    const double now = bc_loss(t.params(), samples);
    if (now > prev) ++increases;
    prev = now;
  }
  CHECK(increases <= 1);
  CHECK(prev < bc_loss(p0, samples));
}

TEST_CASE("trained policy fits the demonstrations at least 10x better than an untrained one") {
  const PolicyParams p0 = init_params(surrogate_config(kRes), 12);
  const auto samples = all_samples(small_dataset());
  const double before = bc_loss(p0, samples);
  const PolicyParams trained = train(p0, small_dataset(), 1500, 3).first;
  CHECK(before >= 10.0 * bc_loss(trained, samples));
}

TEST_CASE("a policy that outputs zero leaves the arm where it started") {
  PolicyParams p = init_params(surrogate_config(kRes), 1);
  std::fill(p.values.begin(), p.values.end(), 0.0);
  TaskSpec task = kTask;
  task.execution_noise = 0.0;
  const RolloutResult r = rollout(p, task, kGeom, kRes, task.default_initial_state, 42);
  CHECK_FALSE(r.success);
  CHECK(static_cast<int>(r.episode.steps.size()) == task.horizon);
  for (const auto& s : r.episode.steps) CHECK(s.state == task.default_initial_state);
}

TEST_CASE("checkpoint round trip and mismatch errors") {
  TempDir dir("ckpt");
  PolicyParams p = init_params(victim_config(kRes), 31);
  Rng rng(3);
  for (double& v : p.values) v = rng.normal();
  p.round_to_storage();
  save_checkpoint(p, dir / "p.ckpt");
  CHECK(load_checkpoint(dir / "p.ckpt") == p);
  CHECK(load_checkpoint(dir / "p.ckpt", p.config) == p);

  PolicyConfig wider = p.config;
  wider.visual_width += 1;
  CHECK_THROWS_AS(load_checkpoint(dir / "p.ckpt", wider), LayoutMismatch);

  std::ifstream in(dir / "p.ckpt");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();

  std::string moved = text;
  const std::string key = "\"name\":\"language.weight\",\"offset\":";
  const auto at = moved.find(key);
  REQUIRE(at != std::string::npos);
  moved.insert(at + key.size(), "1");
  std::ofstream(dir / "moved.ckpt") << moved;
  CHECK_THROWS_AS(load_checkpoint(dir / "moved.ckpt"), LayoutMismatch);

  std::string v2 = text;
  v2.replace(v2.find("\"format_version\":1"), 18, "\"format_version\":2");
  std::ofstream(dir / "v2.ckpt") << v2;
  CHECK_THROWS_AS(load_checkpoint(dir / "v2.ckpt"), FormatVersionMismatch);
}

}  // TEST_SUITE
