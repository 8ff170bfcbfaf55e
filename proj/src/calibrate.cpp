#include "gemnet/calibrate.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "gemnet/error.hpp"

namespace gemnet {

using nlohmann::json;

ThresholdSelection select_threshold(std::span<const double> confidences,
                                    std::span<const std::uint8_t> correct, double epsilon) {
  const std::size_t n = confidences.size();
  require(n > 0, ErrorKind::InvalidInput, "select_threshold needs at least one prediction");
  require(correct.size() == n, ErrorKind::InvalidInput, "confidence/correctness size mismatch");
  require(epsilon > 0.0 && epsilon <= 1.0, ErrorKind::InvalidInput, "epsilon must lie in (0,1]");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return confidences[a] < confidences[b]; });

  // Suffix counts of correct items in sorted order.
  std::vector<std::size_t> suffix(n + 1, 0);
  for (std::size_t i = n; i-- > 0;) suffix[i] = suffix[i + 1] + (correct[order[i]] ? 1 : 0);

  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0 && confidences[order[k]] == confidences[order[k - 1]]) continue;
    const std::size_t kept = n - k;
    const double acc = static_cast<double>(suffix[k]) / static_cast<double>(kept);
    if (acc >= epsilon)
      return {k == 0 ? 0.0 : confidences[order[k]], k, kept, acc};
  }
  fail(ErrorKind::CalibrationInfeasible,
       "no confidence threshold reaches accuracy " + std::to_string(epsilon));
}

ThresholdSelection select_threshold(std::span<const ScoredPrediction> scored, double epsilon) {
  std::vector<double> conf;
  std::vector<std::uint8_t> ok;
  conf.reserve(scored.size());
  ok.reserve(scored.size());
  for (const auto& s : scored) {
    conf.push_back(s.confidence());
    ok.push_back(s.correct() ? 1 : 0);
  }
  return select_threshold(conf, ok, epsilon);
}

bool accepts(const Prediction& p, double threshold) { return p.confidence >= threshold; }

ThresholdSplit apply_threshold(std::span<const Prediction> preds, double threshold) {
  ThresholdSplit split;
  for (std::size_t i = 0; i < preds.size(); ++i)
    (accepts(preds[i], threshold) ? split.accepted : split.abstained).push_back(i);
  return split;
}

CalibrationProfile make_profile(CalibrationMode mode, std::span<const ScoredPrediction> training) {
  CalibrationProfile p;
  p.mode = mode;
  p.epsilon = mode_epsilon(mode);
  p.calibration_size = training.size();
  if (!p.epsilon) {
    p.threshold = 0.0;
    p.retained = training.size();
    if (!training.empty()) {
      const auto ok = std::count_if(training.begin(), training.end(),
                                    [](const ScoredPrediction& s) { return s.correct(); });
      p.retained_accuracy = static_cast<double>(ok) / static_cast<double>(training.size());
    }
    return p;
  }
  const auto sel = select_threshold(training, *p.epsilon);
  p.threshold = sel.threshold;
  p.retained = sel.retained;
  p.retained_accuracy = sel.retained_accuracy;
  return p;
}

std::string profile_to_json(const CalibrationProfile& p) {
  json j;
  j["mode"] = std::string(to_string(p.mode));
  j["epsilon"] = p.epsilon ? json(*p.epsilon) : json(nullptr);
  j["threshold"] = p.threshold;
  j["calibration_size"] = p.calibration_size;
  j["retained"] = p.retained;
  j["retained_accuracy"] = p.retained_accuracy;
  return j.dump(2);
}

CalibrationProfile profile_from_json(const std::string& text) {
  CalibrationProfile p;
  try {
    const json j = json::parse(text);
    p.mode = calibration_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("epsilon") && !j.at("epsilon").is_null()) p.epsilon = j.at("epsilon").get<double>();
    p.threshold = j.at("threshold").get<double>();
    p.calibration_size = j.value("calibration_size", std::size_t{0});
    p.retained = j.value("retained", std::size_t{0});
    p.retained_accuracy = j.value("retained_accuracy", 0.0);
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("calibration profile: ") + e.what());
  }
  require(p.epsilon == mode_epsilon(p.mode), ErrorKind::InvalidConfig,
          "calibration profile epsilon does not match its mode");
  require(p.threshold >= 0.0 && p.threshold <= 1.0, ErrorKind::InvalidConfig,
          "calibration threshold must lie in [0,1]");
  require(p.mode != CalibrationMode::None || p.threshold == 0.0, ErrorKind::InvalidConfig,
          "mode None requires threshold 0");
  return p;
}

double CalibrationSet::threshold(CalibrationMode m) const {
  const auto& p = get(m);
  return p ? p->threshold : std::numeric_limits<double>::infinity();
}

CalibrationSet make_calibration_set(std::span<const ScoredPrediction> training) {
  CalibrationSet set;
  for (auto mode : {CalibrationMode::None, CalibrationMode::Mode1, CalibrationMode::Mode2}) {
    try {
      set.profiles[static_cast<std::size_t>(mode)] = make_profile(mode, training);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::CalibrationInfeasible) throw;
    }
  }
  return set;
}

std::string calibration_set_to_json(const CalibrationSet& set) {
  json j = json::object();
  for (auto mode : {CalibrationMode::None, CalibrationMode::Mode1, CalibrationMode::Mode2}) {
    const auto& p = set.get(mode);
    j[std::string(to_string(mode))] = p ? json::parse(profile_to_json(*p)) : json(nullptr);
  }
  return j.dump(2);
}

CalibrationSet calibration_set_from_json(const std::string& text) {
  CalibrationSet set;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("calibration set: ") + e.what());
  }
  for (auto mode : {CalibrationMode::None, CalibrationMode::Mode1, CalibrationMode::Mode2}) {
    const auto key = std::string(to_string(mode));
    if (j.contains(key) && !j.at(key).is_null())
      set.profiles[static_cast<std::size_t>(mode)] = profile_from_json(j.at(key).dump());
  }
  return set;
}

}  // namespace gemnet
