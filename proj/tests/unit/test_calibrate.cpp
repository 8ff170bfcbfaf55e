#include <doctest.h>

#include <cmath>
#include <limits>

#include "gemnet/calibrate.hpp"
#include "gemnet/error.hpp"
#include "support/calib_oracle.hpp"

using namespace gemnet;
using namespace gemnet::testing;

namespace {

std::vector<ScoredPrediction> five_items() {
  return {scored_item(0.6, false, "a"), scored_item(0.7, true, "b"), scored_item(0.8, true, "c"),
          scored_item(0.9, true, "d"), scored_item(0.95, true, "e")};
}

bool infeasible(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind() == ErrorKind::CalibrationInfeasible;
  }
  return false;
}

}  // namespace

TEST_CASE("select_threshold on the five-item example") {
  const auto items = five_items();
  const auto sel = select_threshold(items, 0.95);
  CHECK(sel.threshold == 0.7);
  CHECK(sel.removed == 1);
  CHECK(sel.retained == 4);
  CHECK(sel.retained_accuracy == 1.0);

  std::vector<Prediction> preds;
  for (const auto& s : items) preds.push_back(s.prediction);
  const auto split = apply_threshold(preds, sel.threshold);
  CHECK(split.accepted == std::vector<std::size_t>{1, 2, 3, 4});
  CHECK(split.abstained == std::vector<std::size_t>{0});
}

TEST_CASE("select_threshold boundary cases") {
  std::vector<ScoredPrediction> right, wrong;
  for (double c : {0.3, 0.5, 0.9}) {
    right.push_back(scored_item(c, true));
    wrong.push_back(scored_item(c, false));
  }
  for (double eps : {0.5, 0.99, 1.0}) {
    const auto sel = select_threshold(right, eps);
    CHECK(sel.threshold == 0.0);
    CHECK(sel.removed == 0);
    CHECK(sel.retained == 3);
  }
  CHECK(infeasible([&] { select_threshold(wrong, 0.9); }));
  std::vector<ScoredPrediction> none;
  CHECK_THROWS_AS(select_threshold(none, 0.9), Error);
  CHECK_THROWS_AS(select_threshold(right, 0.0), Error);
  CHECK_THROWS_AS(select_threshold(right, 1.5), Error);
}

TEST_CASE("tied confidences are kept or dropped together") {
  // Removing only the wrong 0.6 item would reach 100%, but it is tied with a
  // correct one, so the cut has to go above both.
  std::vector<ScoredPrediction> items = {scored_item(0.6, false), scored_item(0.6, true),
                                         scored_item(0.8, true), scored_item(0.9, true)};
  const auto sel = select_threshold(items, 0.99);
  CHECK(sel.threshold == 0.8);
  CHECK(sel.retained == 2);
  const auto loose = select_threshold(items, 0.75);
  CHECK(loose.threshold == 0.0);
  CHECK(loose.retained == 4);
}

TEST_CASE("apply_threshold extremes") {
  std::vector<Prediction> preds;
  for (const auto& s : five_items()) preds.push_back(s.prediction);
  CHECK(apply_threshold(preds, 0.0).accepted.size() == 5);
  CHECK(apply_threshold(preds, std::nextafter(0.95, 2.0)).abstained.size() == 5);
  CHECK(apply_threshold(preds, std::numeric_limits<double>::infinity()).accepted.empty());
}

TEST_CASE("make_profile per mode") {
  const auto items = five_items();
  const auto none = make_profile(CalibrationMode::None, items);
  CHECK(none.threshold == 0.0);
  CHECK_FALSE(none.epsilon.has_value());
  CHECK(none.retained == 5);

  std::vector<ScoredPrediction> perfect;
  for (double c : {0.4, 0.6, 0.99}) perfect.push_back(scored_item(c, true));
  CHECK(make_profile(CalibrationMode::Mode1, perfect).threshold == 0.0);

  const auto m1 = make_profile(CalibrationMode::Mode1, items);
  const auto m2 = make_profile(CalibrationMode::Mode2, items);
  CHECK(*m1.epsilon == 0.98);
  CHECK(*m2.epsilon == 0.99);
  CHECK(m2.threshold >= m1.threshold);
  CHECK(m1.calibration_size == 5);
}

TEST_CASE("select_threshold matches the exhaustive scan") {
  std::mt19937_64 rng(99);
  std::size_t feasible = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng() % 50;
    const auto set = random_scored_set(n, rng, trial % 2 == 0);
    const double eps = std::array{0.5, 0.8, 0.9, 0.95, 0.98, 0.99, 1.0}[rng() % 7];
    const auto oracle = exhaustive_threshold(set, eps);
    if (!oracle) {
      CHECK(infeasible([&] { select_threshold(set.confidence, set.correct, eps); }));
      continue;
    }
    ++feasible;
    const auto sel = select_threshold(set.confidence, set.correct, eps);
    CHECK(sel.threshold == oracle->threshold);
    CHECK(sel.retained == oracle->retained);
  }
  CHECK(feasible > 500);
}

TEST_CASE("construction guarantee and monotonicity properties") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const auto set = random_scored_set(10 + rng() % 300, rng, trial % 3 == 0);
    std::optional<double> previous;
    for (double eps : {0.5, 0.9, 0.95, 0.98, 0.99}) {
      try {
        const auto sel = select_threshold(set.confidence, set.correct, eps);
        CHECK(*retained_accuracy(set, sel.threshold) >= eps);
        if (previous) CHECK(sel.threshold >= *previous);
        previous = sel.threshold;
      } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::CalibrationInfeasible);
        previous = std::numeric_limits<double>::infinity();
      }
    }
    // |accepted| is non-increasing in the threshold.
    std::size_t last = set.confidence.size() + 1;
    for (double t = 0.0; t <= 1.0; t += 0.01) {
      std::size_t count = 0;
      for (double c : set.confidence) count += c >= t;
      CHECK(count <= last);
      last = count;
    }
  }
}

TEST_CASE("calibration sets and profiles round-trip through JSON") {
  const auto items = five_items();
  const auto set = make_calibration_set(items);
  REQUIRE(set.get(CalibrationMode::Mode2).has_value());
  const auto back = calibration_set_from_json(calibration_set_to_json(set));
  for (auto mode : {CalibrationMode::None, CalibrationMode::Mode1, CalibrationMode::Mode2}) {
    CHECK(back.threshold(mode) == set.threshold(mode));
    CHECK(back.get(mode)->retained == set.get(mode)->retained);
  }
  const auto p = make_profile(CalibrationMode::Mode1, items);
  const auto q = profile_from_json(profile_to_json(p));
  CHECK(q.mode == p.mode);
  CHECK(q.epsilon == p.epsilon);
  CHECK(q.threshold == p.threshold);
  CHECK(q.retained_accuracy == p.retained_accuracy);

  CHECK_THROWS_AS(profile_from_json(R"({"mode":"mode1","epsilon":0.5,"threshold":0.3})"), Error);
  CHECK_THROWS_AS(profile_from_json(R"({"mode":"none","threshold":0.3})"), Error);
  CHECK_THROWS_AS(profile_from_json("not json"), Error);
}

TEST_CASE("infeasible modes abstain on everything") {
  std::vector<ScoredPrediction> poor;
  for (int i = 0; i < 10; ++i) poor.push_back(scored_item(0.3 + 0.05 * i, i % 2 == 0));
  poor.push_back(scored_item(0.99, false));
  const auto set = make_calibration_set(poor);
  CHECK(set.get(CalibrationMode::None).has_value());
  CHECK_FALSE(set.get(CalibrationMode::Mode1).has_value());
  CHECK(std::isinf(set.threshold(CalibrationMode::Mode2)));
  const auto back = calibration_set_from_json(calibration_set_to_json(set));
  CHECK_FALSE(back.get(CalibrationMode::Mode1).has_value());
}
