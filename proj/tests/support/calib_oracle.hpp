#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace gemnet::testing {

struct ScoredSet {
  std::vector<double> confidence;
  std::vector<std::uint8_t> correct;
};

/// Random calibration instance. Confidences are drawn on a coarse grid when
/// `ties` is set so boundary ties occur often; correctness is more likely for
/// confident items, as with a real classifier.
inline ScoredSet random_scored_set(std::size_t n, std::mt19937_64& rng, bool ties) {
  std::uniform_real_distribution<double> u(0.25, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const double skill = coin(rng);
  ScoredSet s;
  for (std::size_t i = 0; i < n; ++i) {
    double c = u(rng);
    if (ties) c = std::round(c * 20.0) / 20.0;
    s.confidence.push_back(c);
    s.correct.push_back(coin(rng) < skill * c + (1.0 - skill) * 0.5 ? 1 : 0);
  }
  return s;
}

struct OracleResult {
  double threshold = 0.0;
  std::size_t retained = 0;
};

/// Brute force: try every removal count k = 0..N-1 on the ascending order. A
/// cut inside a run of equal confidences is not realisable by a threshold, so
/// such k are skipped. Accuracy is compared as integers: correct >= eps * kept.
inline std::optional<OracleResult> exhaustive_threshold(const ScoredSet& s, double epsilon) {
  const std::size_t n = s.confidence.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return s.confidence[a] < s.confidence[b]; });
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0 && s.confidence[idx[k]] == s.confidence[idx[k - 1]]) continue;
    std::size_t good = 0;
    for (std::size_t j = k; j < n; ++j) good += s.correct[idx[j]];
    const std::size_t kept = n - k;
    if (static_cast<double>(good) / static_cast<double>(kept) >= epsilon)
      return OracleResult{k == 0 ? 0.0 : s.confidence[idx[k]], kept};
  }
  return std::nullopt;
}

/// Accuracy of items with confidence >= threshold; nullopt if none.
inline std::optional<double> retained_accuracy(const ScoredSet& s, double threshold) {
  std::size_t kept = 0, good = 0;
  for (std::size_t i = 0; i < s.confidence.size(); ++i)
    if (s.confidence[i] >= threshold) {
      ++kept;
      good += s.correct[i];
    }
  if (kept == 0) return std::nullopt;
  return static_cast<double>(good) / static_cast<double>(kept);
}

}  // namespace gemnet::testing

#include "gemnet/calibrate.hpp"

namespace gemnet::testing {

/// OD prediction with the given confidence on class 0; truth 0 if correct.
inline ScoredPrediction scored_item(double confidence, bool correct, std::string id = "s",
                                    std::int64_t time = 0) {
  std::vector<double> p(4, (1.0 - confidence) / 3.0);
  p[0] = confidence;
  ScoredPrediction s;
  s.stone_id = std::move(id);
  s.evaluation_time = time;
  s.truth = correct ? 0 : 1;
  s.prediction = Prediction::from_probs(std::move(p), Task::OD);
  return s;
}

inline std::vector<ScoredPrediction> to_scored(const ScoredSet& set) {
  std::vector<ScoredPrediction> out;
  for (std::size_t i = 0; i < set.confidence.size(); ++i)
    out.push_back(scored_item(set.confidence[i], set.correct[i] != 0, "s" + std::to_string(i)));
  return out;
}

}  // namespace gemnet::testing
