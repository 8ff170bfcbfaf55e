#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gemnet/core_types.hpp"

namespace gemnet {

/// A prediction together with the ground truth it is scored against.
struct ScoredPrediction {
  std::string stone_id;
  std::int64_t evaluation_time = 0;
  std::size_t truth = 0;
  Prediction prediction;

  bool correct() const { return prediction.label == truth; }
  double confidence() const { return prediction.confidence; }
};

struct ThresholdSelection {
  double threshold = 0.0;
  std::size_t removed = 0;   // k
  std::size_t retained = 0;  // N - k
  double retained_accuracy = 0.0;
};

/// Sorts by confidence (stable), then finds the smallest k such that the
/// N - k most confident items reach accuracy >= epsilon. Cuts only fall
/// between distinct confidences, so tied items are kept or dropped together
/// and everything with confidence >= the threshold is exactly the retained
/// set. k = 0 yields threshold 0. CalibrationInfeasible if no k qualifies.
ThresholdSelection select_threshold(std::span<const double> confidences,
                                    std::span<const std::uint8_t> correct, double epsilon);
ThresholdSelection select_threshold(std::span<const ScoredPrediction> scored, double epsilon);

struct ThresholdSplit {
  std::vector<std::size_t> accepted;   // indices with confidence >= threshold
  std::vector<std::size_t> abstained;
};

ThresholdSplit apply_threshold(std::span<const Prediction> preds, double threshold);
bool accepts(const Prediction& p, double threshold);

/// None gives threshold 0; Mode1/Mode2 select on the given training
/// predictions with epsilon 0.98/0.99.
CalibrationProfile make_profile(CalibrationMode mode, std::span<const ScoredPrediction> training);

/// Profiles for None, Mode1 and Mode2 from one calibration list. A mode whose
/// target is unreachable is left empty; its threshold() is +infinity so every
/// prediction abstains.
struct CalibrationSet {
  std::array<std::optional<CalibrationProfile>, 3> profiles;

  const std::optional<CalibrationProfile>& get(CalibrationMode m) const {
    return profiles[static_cast<std::size_t>(m)];
  }
  double threshold(CalibrationMode m) const;
};

CalibrationSet make_calibration_set(std::span<const ScoredPrediction> training);
std::string calibration_set_to_json(const CalibrationSet& set);
CalibrationSet calibration_set_from_json(const std::string& text);

std::string profile_to_json(const CalibrationProfile& profile);
CalibrationProfile profile_from_json(const std::string& text);

}  // namespace gemnet
