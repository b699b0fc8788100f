#include "armtrig/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "armtrig/codec.hpp"

namespace armtrig {

using ojson = nlohmann::ordered_json;

std::string to_string(LabelMode m) { return m == LabelMode::Opposite ? "Opposite" : "Random"; }
std::string to_string(RolloutMode m) { return m == RolloutMode::Consistent ? "Consistent" : "Frozen"; }

LabelMode label_mode_from_string(const std::string& s) {
  if (s == "Opposite") return LabelMode::Opposite;
  if (s == "Random") return LabelMode::Random;
  throw ConfigError("unknown label mode '" + s + "'");
}

RolloutMode rollout_mode_from_string(const std::string& s) {
  if (s == "Consistent") return RolloutMode::Consistent;
  if (s == "Frozen") return RolloutMode::Frozen;
  throw ConfigError("unknown rollout mode '" + s + "'");
}

std::size_t Dataset::poisoned_count() const {
  return static_cast<std::size_t>(
      std::count_if(episodes.begin(), episodes.end(), [](const Episode& e) { return e.poisoned; }));
}

std::size_t Dataset::step_count() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.steps.size();
  return n;
}

Dataset collect(const TaskSpec& task, const ArmGeometry& geom, Resolution res, int n, std::uint64_t seed) {
  require(n >= 1, "collect: n must be >= 1");
  task.validate();
  geom.validate();
  Dataset d;
  d.task_id = task.task_id;
  d.rng_seed = seed;
  d.resolution = res;
  const std::uint64_t max_attempts = 10ULL * static_cast<std::uint64_t>(n);
  for (std::uint64_t attempt = 0; attempt < max_attempts && d.episodes.size() < static_cast<std::size_t>(n);
       ++attempt) {
    const std::uint64_t scene_seed = derive_seed(seed, "collect", attempt);
    const SceneState scene = sample_scene(task, scene_seed);
    const JointState s0 = sample_initial_state(task, geom, scene_seed);
    try {
      d.episodes.push_back(scripted_expert(task, scene, s0, geom, res, scene_seed));
    } catch (const Unreachable&) {
      // discarded; the next attempt draws a fresh scene
    }
  }
  if (d.episodes.size() < static_cast<std::size_t>(n))
    throw Unreachable("collect: could not generate enough successful demonstrations");
  return d;
}

Episode opposite_trajectory(const Episode& episode) {
  if (episode.poisoned) throw PreconditionError("opposite_trajectory: episode is already poisoned");
  Episode out = episode;
  for (auto& s : out.steps)
    for (auto& a : s.action.deltas) a = -a;
  return out;
}

Episode inject_trigger(const Episode& episode, const TriggerPerturbation& t, const ArmGeometry& geom,
                       const TaskSpec& task, RolloutMode mode, Resolution res) {
  require(!episode.steps.empty(), "inject_trigger: empty episode");
  require(all_finite(t.t), "inject_trigger: non-finite trigger");
  Episode out = episode;
  JointState start = episode.initial_state();
  for (std::size_t i = 0; i < kJoints; ++i) start.angles[i] += t.t[i];
  start = clamp_to_limits(start, geom, &out.trigger_clamped);

  SceneState scene = sample_scene(task, episode.scene_seed);
  if (mode == RolloutMode::Frozen) {
    out.steps[0].state = start;
    out.steps[0].observation = render(scene, start, geom, res);
  } else {
    JointState q = start;
    for (auto& s : out.steps) {
      s.state = q;
      s.observation = render(scene, q, geom, res);
      const StepResult next = step(scene, q, s.action, geom, task);
      scene = next.scene;
      q = next.joints;
    }
  }
  out.poisoned = true;
  out.trigger = t;
  return out;
}

Dataset poison(const Dataset& dataset, const PoisonSpec& spec, const TaskSpec& task, const ArmGeometry& geom,
               std::uint64_t seed) {
  require(spec.rate >= 0.0 && spec.rate <= 1.0, "poison: rate must lie in [0, 1]");
  require(dataset.poisoned_count() == 0, "poison: dataset already contains poisoned episodes");
  if (spec.rate == 0.0) return dataset;
  const std::size_t n = dataset.episodes.size();
  const double want = spec.rate * static_cast<double>(n);
  require(want >= 1.0, "poison: rate * n must be at least 1");
  const auto count = static_cast<std::size_t>(std::llround(want));

  // partial Fisher-Yates: the first `count` entries are the selection
  Rng rng(derive_seed(seed, "poison-select"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < count; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(chosen.begin(), chosen.end());

  Dataset out = dataset;
  for (std::size_t idx : chosen) {
    Episode relabelled;
    if (spec.label_mode == LabelMode::Opposite) {
      relabelled = opposite_trajectory(dataset.episodes[idx]);
    } else {
      relabelled = dataset.episodes[idx];
      Rng labels(derive_seed(seed, "random-labels", idx));
      for (auto& s : relabelled.steps)
        for (auto& a : s.action.deltas) a = labels.uniform(-task.max_step, task.max_step);
    }
    out.episodes[idx] = inject_trigger(relabelled, spec.trigger, geom, task, spec.rollout_mode, dataset.resolution);
  }
  out.poison_spec = spec;
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: one JSON header line, then one JSON line per episode.

namespace {

ojson joint_json(const Joint6& v) {
  ojson a = ojson::array();
  for (double x : v) a.push_back(x);
  return a;
}

Joint6 joint_from(const ojson& j) {
  if (!j.is_array() || j.size() != kJoints) throw Error("expected an array of 6 numbers");
  Joint6 v{};
  for (std::size_t i = 0; i < kJoints; ++i) v[i] = j.at(i).get<double>();
  return v;
}

ojson poison_json(const PoisonSpec& p) {
  ojson j;
  j["trigger"] = joint_json(p.trigger.t);
  j["rate"] = p.rate;
  j["label_mode"] = to_string(p.label_mode);
  j["state_rollout_mode"] = to_string(p.rollout_mode);
  return j;
}

PoisonSpec poison_from(const ojson& j) {
  PoisonSpec p;
  p.trigger.t = joint_from(j.at("trigger"));
  p.rate = j.at("rate").get<double>();
  p.label_mode = label_mode_from_string(j.at("label_mode").get<std::string>());
  p.rollout_mode = rollout_mode_from_string(j.at("state_rollout_mode").get<std::string>());
  return p;
}

ojson episode_json(const Episode& e, std::size_t index) {
  ojson j;
  j["index"] = index;
  j["instruction_id"] = static_cast<int>(e.instruction_id);
  j["scene_seed"] = e.scene_seed;
  j["poisoned"] = e.poisoned;
  if (e.trigger) j["trigger"] = joint_json(e.trigger->t);
  j["trigger_clamped"] = e.trigger_clamped;
  ojson steps = ojson::array();
  for (const auto& s : e.steps) {
    ojson r;
    r["timestep"] = s.timestep;
    r["state"] = joint_json(s.state.angles);
    r["action"] = joint_json(s.action.deltas);
    r["observation"] = codec::encode_f32(s.observation.pixels);
    steps.push_back(std::move(r));
  }
  j["steps"] = std::move(steps);
  return j;
}

Episode episode_from(const ojson& j, Resolution res) {
  Episode e;
  e.instruction_id = static_cast<TaskId>(j.at("instruction_id").get<int>());
  e.scene_seed = j.at("scene_seed").get<std::uint64_t>();
  e.poisoned = j.at("poisoned").get<bool>();
  if (j.contains("trigger")) e.trigger = TriggerPerturbation{joint_from(j.at("trigger"))};
  e.trigger_clamped = j.at("trigger_clamped").get<bool>();
  if (e.poisoned != e.trigger.has_value()) throw Error("poisoned flag and trigger disagree");
  const std::size_t npix = static_cast<std::size_t>(res.height) * res.width;
  for (const auto& r : j.at("steps")) {
    StepRecord s;
    s.timestep = r.at("timestep").get<int>();
    s.state.angles = joint_from(r.at("state"));
    s.action.deltas = joint_from(r.at("action"));
    s.observation.resolution = res;
    s.observation.pixels = codec::decode_f32(r.at("observation").get<std::string>());
    if (s.observation.pixels.size() != npix) throw Error("observation size does not match resolution");
    if (s.timestep != static_cast<int>(e.steps.size())) throw Error("timesteps are not consecutive");
    e.steps.push_back(std::move(s));
  }
  if (e.steps.empty()) throw Error("episode has no steps");
  return e;
}

}  // namespace

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  ojson header;
  header["format_version"] = d.format_version;
  header["task_id"] = to_string(d.task_id);
  header["n_episodes"] = d.episodes.size();
  header["rng_seed"] = d.rng_seed;
  header["observation_resolution"] = {d.resolution.height, d.resolution.width};
  if (d.poison_spec) header["poison_spec"] = poison_json(*d.poison_spec);
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < d.episodes.size(); ++i) out << episode_json(d.episodes[i], i).dump() << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("dataset file is empty");
  ojson header;
  try {
    header = ojson::parse(line);
  } catch (const std::exception& e) {
    throw Error(std::string("dataset header is not valid JSON: ") + e.what());
  }
  Dataset d;
  try {
    d.format_version = header.at("format_version").get<int>();
  } catch (const std::exception&) {
    throw Error("dataset header has no format_version");
  }
  if (d.format_version != kDatasetFormatVersion)
    throw FormatVersionMismatch("dataset format_version " + std::to_string(d.format_version) + ", expected " +
                                std::to_string(kDatasetFormatVersion));
  std::size_t n = 0;
  try {
    d.task_id = task_from_string(header.at("task_id").get<std::string>());
    n = header.at("n_episodes").get<std::size_t>();
    d.rng_seed = header.at("rng_seed").get<std::uint64_t>();
    const auto& r = header.at("observation_resolution");
    d.resolution = {r.at(0).get<int>(), r.at(1).get<int>()};
    if (header.contains("poison_spec")) d.poison_spec = poison_from(header.at("poison_spec"));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(std::string("malformed dataset header: ") + e.what());
  }
  d.episodes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw CorruptRecord(i, "missing record (file truncated)");
    try {
      const ojson j = ojson::parse(line);
      if (j.at("index").get<std::size_t>() != i) throw Error("record index out of order");
      Episode e = episode_from(j, d.resolution);
      if (e.instruction_id != d.task_id) throw Error("episode task differs from dataset task");
      d.episodes.push_back(std::move(e));
    } catch (const std::exception& e) {
      throw CorruptRecord(i, e.what());
    }
  }
  return d;
}

}  // namespace armtrig
