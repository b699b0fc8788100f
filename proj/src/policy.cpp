#include "armtrig/policy.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "armtrig/codec.hpp"

namespace armtrig {

using ojson = nlohmann::ordered_json;

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }
std::string to_string(OptimizerKind o) { return o == OptimizerKind::Adam ? "adam" : "sgd"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + s + "'");
}

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

void PolicyConfig::validate() const {
  require(obs_dim >= 1 && instr_dim >= 1 && state_dim >= 1 && action_dim >= 1, "PolicyConfig: empty input or output");
  require(visual_width >= 1 && language_width >= 1 && state_width >= 1, "PolicyConfig: branch widths must be >= 1");
  for (int w : fusion_widths) require(w >= 1, "PolicyConfig: fusion widths must be >= 1");
  require(state_dim == static_cast<int>(kJoints) && action_dim == static_cast<int>(kJoints),
          "PolicyConfig: state and action dimensions are fixed at 6");
  require(learning_rate > 0.0, "PolicyConfig: learning rate must be positive");
  require(batch_size >= 1, "PolicyConfig: batch size must be >= 1");
  require(max_action > 0.0, "PolicyConfig: max_action must be positive");
}

std::size_t PolicyConfig::fused_dim() const {
  return fusion_widths.empty() ? static_cast<std::size_t>(visual_width + language_width + state_width)
                               : static_cast<std::size_t>(fusion_widths.back());
}

PolicyConfig victim_config(Resolution res) {
  PolicyConfig c;
  c.obs_dim = res.height * res.width;
  return c;
}

PolicyConfig surrogate_config(Resolution res) {
  PolicyConfig c;
  c.obs_dim = res.height * res.width;
  c.visual_width = 8;
  c.language_width = 4;
  c.state_width = 16;
  c.fusion_widths = {32};
  return c;
}

std::vector<TensorLayout> make_layout(const PolicyConfig& c) {
  std::vector<TensorLayout> out;
  std::size_t offset = 0;
  auto dense = [&](const std::string& name, int in, int outw) {
    out.push_back({name + ".weight", offset, static_cast<std::size_t>(outw), static_cast<std::size_t>(in)});
    offset += out.back().size();
    out.push_back({name + ".bias", offset, static_cast<std::size_t>(outw), 1});
    offset += out.back().size();
  };
  dense("visual", c.obs_dim, c.visual_width);
  dense("language", c.instr_dim, c.language_width);
  dense("state", c.state_dim, c.state_width);
  int in = c.visual_width + c.language_width + c.state_width;
  for (std::size_t i = 0; i < c.fusion_widths.size(); ++i) {
    dense("fusion." + std::to_string(i), in, c.fusion_widths[i]);
    in = c.fusion_widths[i];
  }
  dense("head", in, c.action_dim);
  return out;
}

const TensorLayout& PolicyParams::tensor(const std::string& name) const {
  for (const auto& t : layout)
    if (t.name == name) return t;
  throw LayoutMismatch("no tensor named '" + name + "'");
}

void PolicyParams::round_to_storage() {
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

PolicyParams init_params(const PolicyConfig& config, std::uint64_t seed) {
  config.validate();
  PolicyParams p;
  p.config = config;
  p.layout = make_layout(config);
  p.init_seed = seed;
  p.values.assign(p.layout.back().offset + p.layout.back().size(), 0.0);
  Rng rng(seed);
  for (const auto& t : p.layout) {
    if (t.cols == 1 && t.name.ends_with(".bias")) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(t.rows + t.cols));
    for (double& w : p.view(t)) w = rng.uniform(-limit, limit);
  }
  p.round_to_storage();
  return p;
}

// ---------------------------------------------------------------------------
// Network evaluation

namespace {

struct Dense {
  std::size_t w = 0;  // weight offset, row-major [out][in]
  std::size_t b = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

struct Net {
  Dense visual, language, state, head;
  std::vector<Dense> fusion;
  Activation act = Activation::Tanh;
  double max_action = 0.1;
  std::size_t concat = 0;

  explicit Net(const PolicyParams& p) {
    auto get = [&](const std::string& name) {
      const auto& w = p.tensor(name + ".weight");
      const auto& b = p.tensor(name + ".bias");
      return Dense{w.offset, b.offset, w.cols, w.rows};
    };
    visual = get("visual");
    language = get("language");
    state = get("state");
    for (std::size_t i = 0; i < p.config.fusion_widths.size(); ++i) fusion.push_back(get("fusion." + std::to_string(i)));
    head = get("head");
    act = p.config.activation;
    max_action = p.config.max_action;
    concat = visual.out + language.out + state.out;
  }
};

double activate(Activation a, double x) { return a == Activation::Tanh ? std::tanh(x) : (x > 0.0 ? x : 0.0); }

// derivative expressed through the activation output y
double activate_grad(Activation a, double y) { return a == Activation::Tanh ? 1.0 - y * y : (y > 0.0 ? 1.0 : 0.0); }

struct Trace {
  std::vector<std::size_t> nz_idx;
  std::vector<double> nz_val;
  std::vector<double> concat;                  // [visual | language | state] outputs
  std::vector<std::vector<double>> fusion_out;  // post-activation per fusion layer
  std::array<double, kJoints> squashed{};       // tanh(u)
  Action action;
};

void check_input(const PolicyParams& p, const PolicyInput& in) {
  if (!in.observation) throw PreconditionError("policy: missing observation");
  if (in.observation->pixels.size() != static_cast<std::size_t>(p.config.obs_dim))
    throw PreconditionError("policy: observation size does not match obs_dim");
  const int k = static_cast<int>(in.instruction);
  if (k < 0 || k >= p.config.instr_dim) throw PreconditionError("policy: instruction id out of range");
}

void run_forward(const Net& net, const std::vector<double>& v, const PolicyInput& in, Trace& tr) {
  const auto& px = in.observation->pixels;
  tr.nz_idx.clear();
  tr.nz_val.clear();
  for (std::size_t i = 0; i < px.size(); ++i)
    if (px[i] != 0.0f) {
      tr.nz_idx.push_back(i);
      tr.nz_val.push_back(px[i]);
    }

  tr.concat.assign(net.concat, 0.0);
  for (std::size_t o = 0; o < net.visual.out; ++o) {
    const double* row = v.data() + net.visual.w + o * net.visual.in;
    double s = v[net.visual.b + o];
    for (std::size_t k = 0; k < tr.nz_idx.size(); ++k) s += row[tr.nz_idx[k]] * tr.nz_val[k];
    tr.concat[o] = activate(net.act, s);
  }
  const std::size_t instr = static_cast<std::size_t>(in.instruction);
  for (std::size_t o = 0; o < net.language.out; ++o) {
    const double s = v[net.language.b + o] + v[net.language.w + o * net.language.in + instr];
    tr.concat[net.visual.out + o] = activate(net.act, s);
  }
  for (std::size_t o = 0; o < net.state.out; ++o) {
    const double* row = v.data() + net.state.w + o * net.state.in;
    double s = v[net.state.b + o];
    for (std::size_t i = 0; i < kJoints; ++i) s += row[i] * in.state.angles[i];
    tr.concat[net.visual.out + net.language.out + o] = activate(net.act, s);
  }

  tr.fusion_out.resize(net.fusion.size());
  const std::vector<double>* x = &tr.concat;
  for (std::size_t l = 0; l < net.fusion.size(); ++l) {
    const Dense& d = net.fusion[l];
    auto& y = tr.fusion_out[l];
    y.assign(d.out, 0.0);
    for (std::size_t o = 0; o < d.out; ++o) {
      const double* row = v.data() + d.w + o * d.in;
      double s = v[d.b + o];
      for (std::size_t i = 0; i < d.in; ++i) s += row[i] * (*x)[i];
      y[o] = activate(net.act, s);
    }
    x = &y;
  }
  for (std::size_t o = 0; o < kJoints; ++o) {
    const double* row = v.data() + net.head.w + o * net.head.in;
    double s = v[net.head.b + o];
    for (std::size_t i = 0; i < net.head.in; ++i) s += row[i] * (*x)[i];
    tr.squashed[o] = std::tanh(s);
    tr.action.deltas[o] = net.max_action * tr.squashed[o];
  }
}

// Accumulates d(loss)/d(params) into grad given d(loss)/d(action).
void run_backward(const Net& net, const std::vector<double>& v, const PolicyInput& in, const Trace& tr,
                  const std::array<double, kJoints>& d_action, std::vector<double>& grad) {
  const std::vector<double>& last = net.fusion.empty() ? tr.concat : tr.fusion_out.back();
  std::vector<double> dx(net.head.in, 0.0);
  for (std::size_t o = 0; o < kJoints; ++o) {
    const double du = d_action[o] * net.max_action * (1.0 - tr.squashed[o] * tr.squashed[o]);
    grad[net.head.b + o] += du;
    const double* row = v.data() + net.head.w + o * net.head.in;
    double* grow = grad.data() + net.head.w + o * net.head.in;
    for (std::size_t i = 0; i < net.head.in; ++i) {
      grow[i] += du * last[i];
      dx[i] += du * row[i];
    }
  }

  for (std::size_t l = net.fusion.size(); l-- > 0;) {
    const Dense& d = net.fusion[l];
    const auto& y = tr.fusion_out[l];
    const std::vector<double>& x = l == 0 ? tr.concat : tr.fusion_out[l - 1];
    std::vector<double> dprev(d.in, 0.0);
    for (std::size_t o = 0; o < d.out; ++o) {
      const double dp = dx[o] * activate_grad(net.act, y[o]);
      if (dp == 0.0) continue;
      grad[d.b + o] += dp;
      const double* row = v.data() + d.w + o * d.in;
      double* grow = grad.data() + d.w + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) {
        grow[i] += dp * x[i];
        dprev[i] += dp * row[i];
      }
    }
    dx = std::move(dprev);
  }

  // branches; dx now indexes the concatenation
  for (std::size_t o = 0; o < net.visual.out; ++o) {
    const double dp = dx[o] * activate_grad(net.act, tr.concat[o]);
    grad[net.visual.b + o] += dp;
    double* grow = grad.data() + net.visual.w + o * net.visual.in;
    for (std::size_t k = 0; k < tr.nz_idx.size(); ++k) grow[tr.nz_idx[k]] += dp * tr.nz_val[k];
  }
  const std::size_t instr = static_cast<std::size_t>(in.instruction);
  for (std::size_t o = 0; o < net.language.out; ++o) {
    const std::size_t c = net.visual.out + o;
    const double dp = dx[c] * activate_grad(net.act, tr.concat[c]);
    grad[net.language.b + o] += dp;
    grad[net.language.w + o * net.language.in + instr] += dp;
  }
  for (std::size_t o = 0; o < net.state.out; ++o) {
    const std::size_t c = net.visual.out + net.language.out + o;
    const double dp = dx[c] * activate_grad(net.act, tr.concat[c]);
    grad[net.state.b + o] += dp;
    double* grow = grad.data() + net.state.w + o * net.state.in;
    for (std::size_t i = 0; i < kJoints; ++i) grow[i] += dp * in.state.angles[i];
  }
}

PolicyInput input_of(const Sample& s) { return {&s.step->observation, s.instruction, s.step->state}; }

}  // namespace

std::vector<double> encode(const PolicyParams& params, const PolicyInput& in) {
  check_input(params, in);
  const Net net(params);
  Trace tr;
  run_forward(net, params.values, in, tr);
  return net.fusion.empty() ? tr.concat : tr.fusion_out.back();
}

std::vector<std::vector<double>> hidden_activations(const PolicyParams& params, const PolicyInput& in) {
  check_input(params, in);
  const Net net(params);
  Trace tr;
  run_forward(net, params.values, in, tr);
  const auto at = [&](std::size_t from, std::size_t n) {
    return std::vector<double>(tr.concat.begin() + static_cast<std::ptrdiff_t>(from),
                               tr.concat.begin() + static_cast<std::ptrdiff_t>(from + n));
  };
  std::vector<std::vector<double>> out;
  out.push_back(at(0, net.visual.out));
  out.push_back(at(net.visual.out, net.language.out));
  out.push_back(at(net.visual.out + net.language.out, net.state.out));
  for (auto& f : tr.fusion_out) out.push_back(std::move(f));
  return out;
}

Action forward(const PolicyParams& params, const PolicyInput& in) {
  check_input(params, in);
  const Net net(params);
  Trace tr;
  run_forward(net, params.values, in, tr);
  return tr.action;
}

LossAndGrad bc_loss_and_grad(const PolicyParams& params, std::span<const Sample> batch) {
  require(!batch.empty(), "bc_loss_and_grad: empty batch");
  const Net net(params);
  LossAndGrad out;
  out.grad.assign(params.values.size(), 0.0);
  const double scale = 1.0 / (static_cast<double>(batch.size()) * kJoints);
  Trace tr;
  double total = 0.0;
  for (const Sample& s : batch) {
    const PolicyInput in = input_of(s);
    check_input(params, in);
    run_forward(net, params.values, in, tr);
    std::array<double, kJoints> d{};
    for (std::size_t k = 0; k < kJoints; ++k) {
      const double r = tr.action.deltas[k] - s.step->action.deltas[k];
      total += r * r;
      d[k] = 2.0 * r * scale;
    }
    run_backward(net, params.values, in, tr, d, out.grad);
  }
  out.loss = total * scale;
  if (!std::isfinite(out.loss)) throw NumericalDivergence("bc_loss_and_grad: non-finite loss");
  return out;
}

double bc_loss(const PolicyParams& params, std::span<const Sample> batch) {
  require(!batch.empty(), "bc_loss: empty batch");
  const Net net(params);
  Trace tr;
  double total = 0.0;
  for (const Sample& s : batch) {
    const PolicyInput in = input_of(s);
    check_input(params, in);
    run_forward(net, params.values, in, tr);
    for (std::size_t k = 0; k < kJoints; ++k) {
      const double r = tr.action.deltas[k] - s.step->action.deltas[k];
      total += r * r;
    }
  }
  return total / (static_cast<double>(batch.size()) * kJoints);
}

std::vector<Sample> all_samples(const Dataset& data) {
  std::vector<Sample> out;
  out.reserve(data.step_count());
  for (const auto& e : data.episodes)
    for (const auto& s : e.steps) out.push_back({&s, e.instruction_id});
  return out;
}

std::vector<Sample> samples_where(const Dataset& data, bool poisoned) {
  std::vector<Sample> out;
  for (const auto& e : data.episodes)
    if (e.poisoned == poisoned)
      for (const auto& s : e.steps) out.push_back({&s, e.instruction_id});
  return out;
}

// ---------------------------------------------------------------------------
// Training

Trainer::Trainer(PolicyParams params, const Dataset& data, std::uint64_t seed, TrainOptions options)
    : params_(std::move(params)), samples_(all_samples(data)), rng_(seed), options_(options) {
  require(!samples_.empty(), "train: dataset is empty");
  params_.config.validate();
  if (params_.config.optimizer == OptimizerKind::Adam && !options_.full_batch) {
    m_.assign(params_.values.size(), 0.0);
    v_.assign(params_.values.size(), 0.0);
  }
}

void Trainer::run(int steps) {
  require(steps >= 1, "train: steps must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const double lr = options_.learning_rate > 0.0 ? options_.learning_rate : params_.config.learning_rate;
  const int every = std::max(1, steps / 100);
  const std::size_t bs = static_cast<std::size_t>(params_.config.batch_size);
  std::vector<Sample> batch(options_.full_batch ? samples_.size() : bs);
  const int start = report_.steps;

  for (int k = 0; k < steps; ++k) {
    if (options_.full_batch) {
      batch = samples_;
    } else {
      for (auto& b : batch) b = samples_[rng_.below(samples_.size())];
    }
    LossAndGrad lg;
    try {
      lg = bc_loss_and_grad(params_, batch);
    } catch (const NumericalDivergence&) {
      throw NumericalDivergence("train: loss became non-finite at step " + std::to_string(start + k));
    }
    if (lg.loss > 1e6) throw NumericalDivergence("train: loss exceeded 1e6 at step " + std::to_string(start + k));

    if (!m_.empty()) {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      ++t_;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      for (std::size_t i = 0; i < params_.values.size(); ++i) {
        const double g = lg.grad[i];
        m_[i] = b1 * m_[i] + (1.0 - b1) * g;
        v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
        params_.values[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
      }
    } else {
      for (std::size_t i = 0; i < params_.values.size(); ++i) params_.values[i] -= lr * lg.grad[i];
    }
    params_.round_to_storage();

    report_.final_loss = lg.loss;
    if (k % every == 0 || k + 1 == steps) report_.loss_curve.emplace_back(start + k, lg.loss);
  }
  report_.steps += steps;
  report_.wall_time += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::pair<PolicyParams, TrainReport> train(const PolicyParams& params, const Dataset& data, int steps,
                                           std::uint64_t seed, TrainOptions options) {
  require(steps >= 1, "train: steps must be >= 1");
  Trainer trainer(params, data, seed, options);
  trainer.run(steps);
  return {trainer.params(), trainer.report()};
}

// ---------------------------------------------------------------------------

RolloutResult rollout(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom, Resolution res,
                      const JointState& initial_state, std::uint64_t scene_seed, const ObservationFilter& filter,
                      bool record) {
  require(all_finite(initial_state.angles), "rollout: non-finite initial state");
  const Net net(params);
  Trace tr;
  RolloutResult out;
  out.episode.instruction_id = task.task_id;
  out.episode.scene_seed = scene_seed;
  SceneState scene = sample_scene(task, scene_seed);
  JointState q = clamp_to_limits(initial_state, geom);
  for (int t = 0; t < task.horizon; ++t) {
    Observation obs = render(scene, q, geom, res);
    if (filter) obs = filter(obs);
    const PolicyInput in{&obs, task.task_id, q};
    check_input(params, in);
    run_forward(net, params.values, in, tr);
    if (record) {
      out.episode.steps.push_back({std::move(obs), q, tr.action, t});
    } else {
      out.episode.steps.push_back({Observation{}, q, tr.action, t});
    }
    const StepResult next = step(scene, q, tr.action, geom, task);
    scene = next.scene;
    q = next.joints;
    if (is_success(task, scene, q, geom)) {
      out.success = true;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a JSON header line followed by the base64 float32 parameters.

namespace {

ojson config_json(const PolicyConfig& c) {
  ojson j;
  j["obs_dim"] = c.obs_dim;
  j["instr_dim"] = c.instr_dim;
  j["state_dim"] = c.state_dim;
  j["visual_width"] = c.visual_width;
  j["language_width"] = c.language_width;
  j["state_width"] = c.state_width;
  j["fusion_widths"] = c.fusion_widths;
  j["action_dim"] = c.action_dim;
  j["activation"] = to_string(c.activation);
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["max_action"] = c.max_action;
  j["optimizer"] = to_string(c.optimizer);
  return j;
}

PolicyConfig config_from(const ojson& j) {
  PolicyConfig c;
  c.obs_dim = j.at("obs_dim").get<int>();
  c.instr_dim = j.at("instr_dim").get<int>();
  c.state_dim = j.at("state_dim").get<int>();
  c.visual_width = j.at("visual_width").get<int>();
  c.language_width = j.at("language_width").get<int>();
  c.state_width = j.at("state_width").get<int>();
  c.fusion_widths = j.at("fusion_widths").get<std::vector<int>>();
  c.action_dim = j.at("action_dim").get<int>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_action = j.at("max_action").get<double>();
  c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  return c;
}

}  // namespace

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  ojson header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config"] = config_json(params.config);
  ojson layout = ojson::array();
  for (const auto& t : params.layout) {
    ojson e;
    e["name"] = t.name;
    e["offset"] = t.offset;
    e["shape"] = {t.rows, t.cols};
    layout.push_back(std::move(e));
  }
  header["layout_table"] = std::move(layout);
  header["init_seed"] = params.init_seed;
  std::vector<float> f(params.values.begin(), params.values.end());
  out << header.dump() << '\n' << codec::encode_f32(f) << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::string head_line, body;
  if (!std::getline(in, head_line) || !std::getline(in, body)) throw Error("checkpoint is truncated");
  ojson header;
  try {
    header = ojson::parse(head_line);
  } catch (const std::exception& e) {
    throw Error(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const int version = header.value("format_version", -1);
  if (version != kCheckpointFormatVersion)
    throw FormatVersionMismatch("checkpoint format_version " + std::to_string(version));

  PolicyParams p;
  try {
    p.config = config_from(header.at("config"));
    p.init_seed = header.at("init_seed").get<std::uint64_t>();
    for (const auto& e : header.at("layout_table")) {
      TensorLayout t;
      t.name = e.at("name").get<std::string>();
      t.offset = e.at("offset").get<std::size_t>();
      t.rows = e.at("shape").at(0).get<std::size_t>();
      t.cols = e.at("shape").at(1).get<std::size_t>();
      p.layout.push_back(std::move(t));
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(std::string("malformed checkpoint header: ") + e.what());
  }
  p.config.validate();
  if (p.layout != make_layout(p.config)) throw LayoutMismatch("checkpoint layout table does not match its config");
  const auto f = codec::decode_f32(body);
  const std::size_t expected = p.layout.back().offset + p.layout.back().size();
  if (f.size() != expected)
    throw LayoutMismatch("checkpoint holds " + std::to_string(f.size()) + " parameters, layout needs " +
                         std::to_string(expected));
  p.values.assign(f.begin(), f.end());
  return p;
}

PolicyParams load_checkpoint(const std::filesystem::path& path, const PolicyConfig& expected) {
  PolicyParams p = load_checkpoint(path);
  if (make_layout(p.config) != make_layout(expected) || p.config != expected)
    throw LayoutMismatch("checkpoint configuration differs from the expected one");
  return p;
}

}  // namespace armtrig
