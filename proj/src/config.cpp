#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "armtrig/pipeline.hpp"

namespace armtrig {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

/// Read access to one JSON object that rejects keys nobody asked about.
class Section {
 public:
  Section(const json& j, std::string path, std::set<std::string> allowed) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object");
    for (const auto& [k, v] : j.items())
      if (!allowed.count(k)) throw ConfigError("unknown key '" + join(k) + "'");
  }

  bool has(const std::string& k) const { return j_.contains(k) && !j_.at(k).is_null(); }

  template <class T>
  void get(const std::string& k, T& out) const {
    if (!has(k)) return;
    try {
      out = j_.at(k).get<T>();
    } catch (const std::exception&) {
      throw ConfigError("'" + join(k) + "' has the wrong type");
    }
  }

  const json& raw(const std::string& k) const { return j_.at(k); }
  std::string join(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
  const json& j_;
  std::string path_;
};

template <class E, class F>
E parse_enum(const Section& s, const std::string& k, E fallback, F from_string) {
  if (!s.has(k)) return fallback;
  std::string v;
  s.get(k, v);
  return from_string(v);
}

Joint6 joint6_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != kJoints) throw ConfigError("'" + what + "' must be an array of 6 numbers");
  Joint6 v{};
  for (std::size_t i = 0; i < kJoints; ++i) {
    if (!j[i].is_number()) throw ConfigError("'" + what + "' must be an array of 6 numbers");
    v[i] = j[i].get<double>();
  }
  return v;
}

void parse_geometry(const Section& s, ArmGeometry& g) {
  if (s.has("link_lengths")) g.link_lengths = joint6_from(s.raw("link_lengths"), s.join("link_lengths"));
  if (s.has("joint_limits")) {
    const json& j = s.raw("joint_limits");
    if (!j.is_array() || j.size() != kJoints) throw ConfigError("'geometry.joint_limits' must hold 6 intervals");
    for (std::size_t i = 0; i < kJoints; ++i) {
      if (!j[i].is_array() || j[i].size() != 2) throw ConfigError("'geometry.joint_limits' entries are [lo, hi]");
      g.joint_limits[i] = {j[i][0].get<double>(), j[i][1].get<double>()};
    }
  }
  if (s.has("base_position")) {
    std::array<double, 2> b{};
    s.get("base_position", b);
    g.base_position = b;
  }
  if (s.has("workspace")) {
    std::array<std::array<double, 2>, 2> w{};
    s.get("workspace", w);
    g.workspace = {w[0], w[1]};
  }
}

void parse_policy(const Section& s, PolicyConfig& p, TrainConfig& t) {
  s.get("visual_width", p.visual_width);
  s.get("language_width", p.language_width);
  s.get("state_width", p.state_width);
  s.get("fusion_widths", p.fusion_widths);
  p.activation = parse_enum(s, "activation", p.activation, activation_from_string);
  s.get("learning_rate", p.learning_rate);
  s.get("batch_size", p.batch_size);
  p.optimizer = parse_enum(s, "optimizer", p.optimizer, optimizer_from_string);
  s.get("train_steps", t.train_steps);
  s.get("finetune_steps", t.finetune_steps);
}

std::vector<TaskId> tasks_from(const Section& s, const std::string& k) {
  std::vector<std::string> names;
  s.get(k, names);
  std::vector<TaskId> out;
  for (const auto& n : names) out.push_back(task_from_string(n));
  return out;
}

}  // namespace

TaskSpec ExperimentConfig::task_spec(TaskId id) const {
  TaskSpec t = default_task(id);
  if (success_radius) t.success_radius = *success_radius;
  if (initial_jitter) t.initial_jitter = *initial_jitter;
  if (execution_noise) t.execution_noise = *execution_noise;
  if (horizon) t.horizon = *horizon;
  return t;
}

void ExperimentConfig::validate() const {
  if (!has_master_seed) throw ConfigError("master_seed is required");
  try {
    geometry.validate();
    task_spec().validate();
    for (TaskId t : eval.ablation_tasks) task_spec(t).validate();
  } catch (const PreconditionError& e) {
    throw ConfigError(e.what());
  }
  if (resolution.height < 8 || resolution.width < 8) throw ConfigError("resolution must be at least 8x8");
  policy.validate();
  if (policy.obs_dim != resolution.height * resolution.width) throw ConfigError("policy obs_dim mismatch");
  if (training.train_steps < 1 || training.finetune_steps < 1) throw ConfigError("training steps must be >= 1");
  if (data.n_episodes < 1) throw ConfigError("data.n_episodes must be >= 1");
  if (!(poison.rate >= 0.0 && poison.rate <= 1.0)) throw ConfigError("poison.rate must lie in [0, 1]");
  objective.validate();
  search.search.validate();
  baseline_from_string(search.method == "PGA" ? "GA" : search.method);
  if (search.search_episodes < 1) throw ConfigError("search.search_episodes must be >= 1");
  const int surrogate_episodes = std::min(search.search_episodes, data.n_episodes);
  if (objective.surrogate_poison_rate * surrogate_episodes < 1.0)
    throw ConfigError("objective.surrogate_poison_rate * search episodes must be >= 1");
  if (poison.rate > 0.0 && poison.rate * data.n_episodes < 1.0)
    throw ConfigError("poison.rate * data.n_episodes must be >= 1");
  if (search.budget < 0) throw ConfigError("search.budget must be >= 0");
  if (eval.n_trials < 1) throw ConfigError("eval.n_trials must be >= 1");
  for (std::size_t i = 0; i < eval.sweep_rates.size(); ++i)
    if (!(eval.sweep_rates[i] >= 0.0 && eval.sweep_rates[i] <= 1.0) ||
        (i > 0 && eval.sweep_rates[i - 1] > eval.sweep_rates[i]))
      throw ConfigError("eval.sweep_rates must be sorted values in [0, 1]");
  for (double r : defense.prune_ratios)
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("defense.prune_ratios must lie in [0, 1)");
  for (int q : defense.qualities)
    if (q < 1 || q > 100) throw ConfigError("defense.qualities must lie in [1, 100]");
  watermark.verify.validate();
  if (watermark.erosion_trials < 1) throw ConfigError("watermark.erosion_trials must be >= 1");
  for (std::size_t i = 0; i < watermark.erosion_schedule.size(); ++i)
    if (watermark.erosion_schedule[i] < 0 ||
        (i > 0 && watermark.erosion_schedule[i - 1] > watermark.erosion_schedule[i]))
      throw ConfigError("watermark.erosion_schedule must be sorted and non-negative");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  const Section top(root, "",
                    {"task", "master_seed", "output_dir", "mode", "workers", "resolution", "geometry",
                     "task_overrides", "data", "policy", "poison", "objective", "search", "eval", "defense",
                     "watermark"});
  ExperimentConfig c;
  try {
    c.task = parse_enum(top, "task", c.task, task_from_string);
    if (top.has("master_seed")) {
      top.get("master_seed", c.master_seed);
      c.has_master_seed = true;
    }
    top.get("output_dir", c.output_dir);
    c.mode = parse_enum(top, "mode", c.mode, train_mode_from_string);
    top.get("workers", c.workers);
    if (top.has("resolution")) {
      std::array<int, 2> r{};
      top.get("resolution", r);
      c.resolution = {r[0], r[1]};
    }
    if (top.has("geometry"))
      parse_geometry(Section(top.raw("geometry"), "geometry",
                             {"link_lengths", "joint_limits", "base_position", "workspace"}),
                     c.geometry);
    if (top.has("task_overrides")) {
      const Section s(top.raw("task_overrides"), "task_overrides",
                      {"success_radius", "horizon", "initial_jitter", "execution_noise"});
      double d = 0.0;
      int h = 0;
      if (s.has("success_radius")) s.get("success_radius", d), c.success_radius = d;
      if (s.has("initial_jitter")) s.get("initial_jitter", d), c.initial_jitter = d;
      if (s.has("execution_noise")) s.get("execution_noise", d), c.execution_noise = d;
      if (s.has("horizon")) s.get("horizon", h), c.horizon = h;
    }
    if (top.has("data")) Section(top.raw("data"), "data", {"n_episodes"}).get("n_episodes", c.data.n_episodes);

    c.policy = victim_config(c.resolution);
    if (top.has("policy"))
      parse_policy(Section(top.raw("policy"), "policy",
                           {"visual_width", "language_width", "state_width", "fusion_widths", "activation",
                            "learning_rate", "batch_size", "optimizer", "train_steps", "finetune_steps"}),
                   c.policy, c.training);
    c.policy.max_action = c.task_spec().max_step;

    if (top.has("poison")) {
      const Section s(top.raw("poison"), "poison", {"rate", "label_mode", "state_rollout_mode", "trigger"});
      s.get("rate", c.poison.rate);
      c.poison.label_mode = parse_enum(s, "label_mode", c.poison.label_mode, label_mode_from_string);
      c.poison.rollout_mode = parse_enum(s, "state_rollout_mode", c.poison.rollout_mode, rollout_mode_from_string);
      if (s.has("trigger")) c.fixed_trigger = TriggerPerturbation{joint6_from(s.raw("trigger"), "poison.trigger")};
    }

    c.objective.surrogate = surrogate_config(c.resolution);
    c.objective.surrogate.max_action = c.policy.max_action;
    if (top.has("objective")) {
      const Section s(top.raw("objective"), "objective",
                      {"lambda1", "lambda2", "lambda3", "delta", "surrogate_steps", "surrogate_poison_rate", "raw_f3",
                       "warm_start", "surrogate"});
      s.get("lambda1", c.objective.lambda1);
      s.get("lambda2", c.objective.lambda2);
      s.get("lambda3", c.objective.lambda3);
      s.get("delta", c.objective.delta);
      s.get("surrogate_steps", c.objective.surrogate_steps);
      s.get("surrogate_poison_rate", c.objective.surrogate_poison_rate);
      s.get("raw_f3", c.objective.raw_f3);
      s.get("warm_start", c.objective.warm_start);
      if (s.has("surrogate")) {
        TrainConfig unused;
        parse_policy(Section(s.raw("surrogate"), "objective.surrogate",
                             {"visual_width", "language_width", "state_width", "fusion_widths", "activation",
                              "learning_rate", "batch_size", "optimizer"}),
                     c.objective.surrogate, unused);
      }
    }

    if (top.has("search")) {
      const Section s(top.raw("search"), "search",
                      {"method", "population", "generations", "elite", "mutation_prob", "mutation_sigma", "box",
                       "budget", "search_episodes"});
      s.get("method", c.search.method);
      s.get("population", c.search.search.population);
      s.get("generations", c.search.search.generations);
      c.search.search.elite = std::max(1, c.search.search.population / 5);
      s.get("elite", c.search.search.elite);
      s.get("mutation_prob", c.search.search.mutation_prob);
      s.get("mutation_sigma", c.search.search.mutation_sigma);
      s.get("box", c.search.search.box);
      s.get("budget", c.search.budget);
      s.get("search_episodes", c.search.search_episodes);
    }
    if (c.search.method != "PGA") baseline_from_string(c.search.method);

    if (top.has("eval")) {
      const Section s(top.raw("eval"), "eval", {"n_trials", "sweep_rates", "ablation_modes", "ablation_tasks"});
      s.get("n_trials", c.eval.n_trials);
      s.get("sweep_rates", c.eval.sweep_rates);
      if (s.has("ablation_modes")) {
        std::vector<std::string> modes;
        s.get("ablation_modes", modes);
        c.eval.ablation_modes.clear();
        for (const auto& m : modes) c.eval.ablation_modes.push_back(label_mode_from_string(m));
      }
      c.eval.ablation_tasks = tasks_from(s, "ablation_tasks");
    }

    if (top.has("defense")) {
      const Section s(top.raw("defense"), "defense", {"prune_ratios", "prune_criterion", "prune_scope", "qualities"});
      s.get("prune_ratios", c.defense.prune_ratios);
      c.defense.criterion = parse_enum(s, "prune_criterion", c.defense.criterion, prune_criterion_from_string);
      c.defense.scope = parse_enum(s, "prune_scope", c.defense.scope, prune_scope_from_string);
      s.get("qualities", c.defense.qualities);
    }

    c.watermark.verify.box = c.search.search.box;
    c.watermark.verify.min_distance = 2.0 * c.search.search.mutation_sigma;
    if (top.has("watermark")) {
      const Section s(top.raw("watermark"), "watermark",
                      {"M", "probe_scenes", "trials", "min_distance", "box", "k_values", "erosion_schedule",
                       "erosion_trials"});
      s.get("M", c.watermark.verify.M);
      s.get("probe_scenes", c.watermark.verify.probe_scenes);
      s.get("trials", c.watermark.verify.trials);
      s.get("min_distance", c.watermark.verify.min_distance);
      s.get("box", c.watermark.verify.box);
      s.get("k_values", c.watermark.verify.k_values);
      s.get("erosion_schedule", c.watermark.erosion_schedule);
      s.get("erosion_trials", c.watermark.erosion_trials);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  c.search.search.workers = c.workers;
  c.watermark.verify.workers = c.workers;
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  ojson j;
  j["task"] = to_string(c.task);
  j["master_seed"] = c.master_seed;
  j["output_dir"] = c.output_dir;
  j["mode"] = to_string(c.mode);
  j["workers"] = c.workers;
  j["resolution"] = {c.resolution.height, c.resolution.width};
  ojson g;
  g["link_lengths"] = c.geometry.link_lengths;
  ojson limits = ojson::array();
  for (const auto& l : c.geometry.joint_limits) limits.push_back({l.lo, l.hi});
  g["joint_limits"] = limits;
  g["base_position"] = c.geometry.base_position;
  g["workspace"] = {c.geometry.workspace.lo, c.geometry.workspace.hi};
  j["geometry"] = g;
  const TaskSpec t = c.task_spec();
  j["task_overrides"] = {{"success_radius", t.success_radius},
                         {"horizon", t.horizon},
                         {"initial_jitter", t.initial_jitter},
                         {"execution_noise", t.execution_noise}};
  j["data"] = {{"n_episodes", c.data.n_episodes}};
  auto policy_json = [](const PolicyConfig& p) {
    ojson o;
    o["visual_width"] = p.visual_width;
    o["language_width"] = p.language_width;
    o["state_width"] = p.state_width;
    o["fusion_widths"] = p.fusion_widths;
    o["activation"] = to_string(p.activation);
    o["learning_rate"] = p.learning_rate;
    o["batch_size"] = p.batch_size;
    o["optimizer"] = to_string(p.optimizer);
    return o;
  };
  ojson pol = policy_json(c.policy);
  pol["train_steps"] = c.training.train_steps;
  pol["finetune_steps"] = c.training.finetune_steps;
  j["policy"] = pol;
  ojson poi;
  poi["rate"] = c.poison.rate;
  poi["label_mode"] = to_string(c.poison.label_mode);
  poi["state_rollout_mode"] = to_string(c.poison.rollout_mode);
  if (c.fixed_trigger) poi["trigger"] = c.fixed_trigger->t;
  j["poison"] = poi;
  ojson obj;
  obj["lambda1"] = c.objective.lambda1;
  obj["lambda2"] = c.objective.lambda2;
  obj["lambda3"] = c.objective.lambda3;
  obj["delta"] = c.objective.delta;
  obj["surrogate_steps"] = c.objective.surrogate_steps;
  obj["surrogate_poison_rate"] = c.objective.surrogate_poison_rate;
  obj["raw_f3"] = c.objective.raw_f3;
  obj["warm_start"] = c.objective.warm_start;
  obj["surrogate"] = policy_json(c.objective.surrogate);
  j["objective"] = obj;
  const SearchConfig& s = c.search.search;
  j["search"] = {{"method", c.search.method},       {"population", s.population},
                 {"generations", s.generations},    {"elite", s.elite},
                 {"mutation_prob", s.mutation_prob}, {"mutation_sigma", s.mutation_sigma},
                 {"box", s.box},                    {"budget", c.search.budget},
                 {"search_episodes", c.search.search_episodes}};
  ojson ev;
  ev["n_trials"] = c.eval.n_trials;
  ev["sweep_rates"] = c.eval.sweep_rates;
  ojson modes = ojson::array();
  for (auto m : c.eval.ablation_modes) modes.push_back(to_string(m));
  ev["ablation_modes"] = modes;
  ojson tasks = ojson::array();
  for (auto t2 : c.eval.ablation_tasks) tasks.push_back(to_string(t2));
  ev["ablation_tasks"] = tasks;
  j["eval"] = ev;
  j["defense"] = {{"prune_ratios", c.defense.prune_ratios},
                  {"prune_criterion", to_string(c.defense.criterion)},
                  {"prune_scope", to_string(c.defense.scope)},
                  {"qualities", c.defense.qualities}};
  const WatermarkConfig& w = c.watermark.verify;
  j["watermark"] = {{"M", w.M},
                    {"probe_scenes", w.probe_scenes},
                    {"trials", w.trials},
                    {"min_distance", w.min_distance},
                    {"box", w.box},
                    {"k_values", w.k_values},
                    {"erosion_schedule", c.watermark.erosion_schedule},
                    {"erosion_trials", c.watermark.erosion_trials}};
  return j.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& cfg) {
  // workers and output_dir do not affect results
  ExperimentConfig c = cfg;
  c.workers = 1;
  c.output_dir = "";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_to_json(c))));
  return buf;
}

std::string apply_override(const std::string& text, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like KEY=VALUE: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json root;
  try {
    root = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json v;
  try {
    v = json::parse(value);
  } catch (const std::exception&) {
    v = value;
  }
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("bad override key '" + key + "'");
    if (!node->is_object()) throw ConfigError("override path '" + key + "' crosses a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = v;
      break;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
  return root.dump();
}

std::uint64_t stage_seed(std::uint64_t master_seed, const std::string& stage) {
  return derive_seed(master_seed, "stage:" + stage);
}

}  // namespace armtrig
