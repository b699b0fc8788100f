#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "armtrig/dataset.hpp"

namespace armtrig {

enum class Activation { Tanh, Relu };
enum class OptimizerKind { Adam, Sgd };

std::string to_string(Activation a);
std::string to_string(OptimizerKind o);
Activation activation_from_string(const std::string& s);
OptimizerKind optimizer_from_string(const std::string& s);

/// Three input branches (pixels, one-hot instruction, joint angles) are
/// concatenated and passed through the fusion stack into a tanh-squashed
/// six-dimensional action head.
struct PolicyConfig {
  int obs_dim = 32 * 32;
  int instr_dim = kNumTasks;
  int state_dim = static_cast<int>(kJoints);
  int visual_width = 64;
  int language_width = 8;
  int state_width = 16;
  std::vector<int> fusion_widths{64, 64};
  int action_dim = static_cast<int>(kJoints);
  Activation activation = Activation::Tanh;
  double learning_rate = 0.002;
  int batch_size = 32;
  double max_action = 0.1;
  OptimizerKind optimizer = OptimizerKind::Adam;

  void validate() const;
  std::size_t fused_dim() const;
  bool operator==(const PolicyConfig&) const = default;
};

/// Default victim network, and the smaller surrogate used for trigger scoring.
PolicyConfig victim_config(Resolution res = {});
PolicyConfig surrogate_config(Resolution res = {});

struct TensorLayout {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;  // 1 for biases
  std::size_t size() const { return rows * cols; }
  bool operator==(const TensorLayout&) const = default;
};

std::vector<TensorLayout> make_layout(const PolicyConfig& config);

/// Flat parameter store. Values are kept at float32 precision (see
/// round_to_storage) so checkpoints round-trip bit-exactly.
struct PolicyParams {
  PolicyConfig config;
  std::vector<TensorLayout> layout;
  std::vector<double> values;
  std::uint64_t init_seed = 0;

  const TensorLayout& tensor(const std::string& name) const;
  std::span<double> view(const TensorLayout& t) { return {values.data() + t.offset, t.size()}; }
  std::span<const double> view(const TensorLayout& t) const { return {values.data() + t.offset, t.size()}; }
  void round_to_storage();
  bool operator==(const PolicyParams&) const = default;
};

PolicyParams init_params(const PolicyConfig& config, std::uint64_t seed);

struct PolicyInput {
  const Observation* observation = nullptr;
  TaskId instruction = TaskId::PickPlace;
  JointState state{};
};

/// Fused representation z: output of the last fusion layer (or the branch
/// concatenation when the fusion stack is empty).
std::vector<double> encode(const PolicyParams& params, const PolicyInput& in);
Action forward(const PolicyParams& params, const PolicyInput& in);

/// Post-activation outputs of every hidden layer, in the order visual,
/// language, state, fusion.0, fusion.1, ...
std::vector<std::vector<double>> hidden_activations(const PolicyParams& params, const PolicyInput& in);

struct Sample {
  const StepRecord* step = nullptr;
  TaskId instruction = TaskId::PickPlace;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean squared action error over the batch and action components, with the
/// gradient from reverse accumulation. Samples are accumulated in batch order.
LossAndGrad bc_loss_and_grad(const PolicyParams& params, std::span<const Sample> batch);
double bc_loss(const PolicyParams& params, std::span<const Sample> batch);

std::vector<Sample> all_samples(const Dataset& data);
std::vector<Sample> samples_where(const Dataset& data, bool poisoned);

struct TrainReport {
  int steps = 0;
  double final_loss = 0.0;
  std::vector<std::pair<int, double>> loss_curve;
  double wall_time = 0.0;
};

struct TrainOptions {
  /// Use every sample each step with plain gradient descent (diagnostics).
  bool full_batch = false;
  /// Overrides the config's rate when positive.
  double learning_rate = 0.0;
};

/// Stateful trainer so fine-tuning can pause and resume with the same
/// optimiser moments and batch stream.
class Trainer {
 public:
  Trainer(PolicyParams params, const Dataset& data, std::uint64_t seed, TrainOptions options = {});

  void run(int steps);
  const PolicyParams& params() const { return params_; }
  const TrainReport& report() const { return report_; }

 private:
  PolicyParams params_;
  std::vector<Sample> samples_;
  Rng rng_;
  TrainOptions options_;
  std::vector<double> m_, v_;
  long long t_ = 0;
  TrainReport report_;
};

std::pair<PolicyParams, TrainReport> train(const PolicyParams& params, const Dataset& data, int steps,
                                           std::uint64_t seed, TrainOptions options = {});

using ObservationFilter = std::function<Observation(const Observation&)>;

struct RolloutResult {
  Episode episode;
  bool success = false;
};

/// Closed loop: render, query the policy, step the dynamics, until success or
/// the horizon. With record=false the episode keeps states and actions only.
RolloutResult rollout(const PolicyParams& params, const TaskSpec& task, const ArmGeometry& geom, Resolution res,
                      const JointState& initial_state, std::uint64_t scene_seed, const ObservationFilter& filter = {},
                      bool record = true);

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_checkpoint(const std::filesystem::path& path);
/// Also rejects checkpoints whose configuration differs from `expected`.
PolicyParams load_checkpoint(const std::filesystem::path& path, const PolicyConfig& expected);

}  // namespace armtrig
