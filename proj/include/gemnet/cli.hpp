#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gemnet/core_types.hpp"
#include "gemnet/evaluate.hpp"
#include "gemnet/model.hpp"
#include "gemnet/train.hpp"

namespace gemnet {

/// Everything a training run needs, read from one JSON file:
///
///   {"task": "OD", "corpus": "corpus.jsonl",            (or)
///    "generator": {"spec": "realistic", "n": 2000},
///    "model": {...}, "train": {...}, "calibration_mode": "mode2",
///    "output": "runs/od", "seed": 7, "deterministic": true,
///    "pairing": "consecutive"}
///
/// Relative corpus and spec paths resolve against the config file's
/// directory. A top-level seed replaces the model, train and generator seeds
/// with values derived from it.
struct RunConfig {
  Task task = Task::OD;
  std::optional<std::filesystem::path> corpus;
  std::optional<std::string> generator_spec;  // preset name or path
  std::size_t generator_n = 2000;
  ModelConfig model;
  TrainConfig train;
  CalibrationMode mode = CalibrationMode::Mode2;
  std::filesystem::path output = "run";
  std::optional<std::uint64_t> seed;
  bool deterministic = true;
  PairingRule pairing = PairingRule::Consecutive;
};

/// InvalidConfig when the invariants fail (exactly one data source, task
/// gating of allowed sources, nested config ranges).
RunConfig run_config_from_json(const std::string& text,
                               const std::filesystem::path& base_dir = {});
std::string run_config_to_json(const RunConfig& config);
/// Applies the top-level seed to the nested configs.
void apply_seed(RunConfig& config);

/// Resolves a relative output path against $GEMNET_OUTPUT_ROOT when set.
std::filesystem::path output_path(const std::filesystem::path& p);

/// Entry point behind the gemnet executable. args excludes the program name.
/// Returns 0 on success, 1 on usage or validation errors, 2 on runtime or
/// numerical failures.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gemnet
