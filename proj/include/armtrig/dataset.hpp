#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "armtrig/episode.hpp"

namespace armtrig {

inline constexpr int kDatasetFormatVersion = 1;

enum class LabelMode { Opposite, Random };
enum class RolloutMode { Consistent, Frozen };

std::string to_string(LabelMode m);
std::string to_string(RolloutMode m);
LabelMode label_mode_from_string(const std::string& s);
RolloutMode rollout_mode_from_string(const std::string& s);

struct PoisonSpec {
  TriggerPerturbation trigger{};
  double rate = 0.10;
  LabelMode label_mode = LabelMode::Opposite;
  RolloutMode rollout_mode = RolloutMode::Consistent;

  bool operator==(const PoisonSpec&) const = default;
};

struct Dataset {
  TaskId task_id = TaskId::PickPlace;
  int format_version = kDatasetFormatVersion;
  std::uint64_t rng_seed = 0;
  Resolution resolution{};
  std::vector<Episode> episodes;
  std::optional<PoisonSpec> poison_spec;

  std::size_t poisoned_count() const;
  std::size_t step_count() const;
  bool operator==(const Dataset&) const = default;
};

/// n successful expert demonstrations with distinct scene seeds derived from `seed`.
/// Unreachable scenes are skipped; gives up after 10n attempts.
Dataset collect(const TaskSpec& task, const ArmGeometry& geom, Resolution res, int n, std::uint64_t seed);

/// Negates every action; states and observations are left alone.
Episode opposite_trajectory(const Episode& episode);

/// Moves the start pose to s0 + t. Consistent mode replays the stored actions
/// through the simulator from the new start; Frozen mode only rewrites step 0.
Episode inject_trigger(const Episode& episode, const TriggerPerturbation& t, const ArmGeometry& geom,
                       const TaskSpec& task, RolloutMode mode, Resolution res);

/// Replaces round(rate * n) uniformly chosen episodes by triggered, relabelled copies.
Dataset poison(const Dataset& dataset, const PoisonSpec& spec, const TaskSpec& task, const ArmGeometry& geom,
               std::uint64_t seed);

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace armtrig
