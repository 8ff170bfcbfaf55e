#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "gemnet/error.hpp"
#include "gemnet/evaluate.hpp"
#include "support/calib_oracle.hpp"
#include "support/tempdir.hpp"

using namespace gemnet;
using namespace gemnet::testing;

namespace {

ScoredPrediction od(std::size_t truth, std::vector<double> probs, std::string id = "s",
                    std::int64_t time = 0) {
  ScoredPrediction s;
  s.stone_id = std::move(id);
  s.evaluation_time = time;
  s.truth = truth;
  s.prediction = Prediction::from_probs(std::move(probs), Task::OD);
  return s;
}

/// OD prediction of `label` with the given confidence.
Prediction guess(std::size_t label, double confidence) {
  std::vector<double> p(4, (1.0 - confidence) / 3.0);
  p[label] = confidence;
  return Prediction::from_probs(std::move(p), Task::OD);
}

std::vector<ScoredPrediction> five_items() {
  return {scored_item(0.6, false, "a"), scored_item(0.7, true, "b"), scored_item(0.8, true, "c"),
          scored_item(0.9, true, "d"), scored_item(0.95, true, "e")};
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected gemnet::Error");
  return ErrorKind::IoError;
}

std::set<std::tuple<std::string, std::int64_t, std::int64_t>> as_set(const ConsistencyReport& r) {
  const auto v = r.inconsistent_set();
  return {v.begin(), v.end()};
}

}  // namespace

TEST_CASE("accuracy examples") {
  std::vector<ScoredPrediction> all_right = {scored_item(0.5, true), scored_item(0.9, true)};
  CHECK(accuracy(all_right) == 1.0);
  std::vector<ScoredPrediction> three_of_four = {scored_item(0.5, true), scored_item(0.6, true),
                                                 scored_item(0.7, false), scored_item(0.8, true)};
  CHECK(accuracy(three_of_four) == 0.75);
  std::vector<ScoredPrediction> none;
  CHECK(kind_of([&] { accuracy(none); }) == ErrorKind::InvalidInput);
}

TEST_CASE("coverage curve of the five-item instance") {
  const auto curve = coverage_curve(five_items());
  const CoverageCurve expected = {
      {0.0, 1.0, 0.8}, {0.7, 0.8, 1.0}, {0.8, 0.6, 1.0}, {0.9, 0.4, 1.0}, {0.95, 0.2, 1.0}};
  REQUIRE(curve.size() == expected.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    CHECK(curve[i].threshold == expected[i].threshold);
    CHECK(curve[i].coverage == doctest::Approx(expected[i].coverage).epsilon(1e-15));
    CHECK(curve[i].accuracy == doctest::Approx(expected[i].accuracy).epsilon(1e-15));
  }
}

TEST_CASE("coverage curve properties on random sets") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto scored = to_scored(random_scored_set(1 + rng() % 80, rng, trial % 2 == 0));
    const auto curve = coverage_curve(scored);
    CHECK(curve.front().coverage == 1.0);
    CHECK(curve.front().accuracy == accuracy(scored));
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].coverage < curve[i - 1].coverage);
    for (const auto& p : curve) {
      std::size_t kept = 0, good = 0;
      for (const auto& s : scored)
        if (s.confidence() >= p.threshold) {
          ++kept;
          good += s.correct();
        }
      CHECK(p.coverage == static_cast<double>(kept) / static_cast<double>(scored.size()));
      CHECK(p.accuracy == static_cast<double>(good) / static_cast<double>(kept));
    }
  }
}

TEST_CASE("aggregate_curves examples") {
  const auto grid = coverage_grid(10);
  REQUIRE(grid.size() == 10);
  CHECK(grid.front() == 1.0);
  CoverageCurve zero, one;
  for (double g : grid) {
    zero.push_back({0.0, g, 0.0});
    one.push_back({0.0, g, 1.0});
  }
  std::vector<CoverageCurve> same = {one, one, one};
  CHECK(aggregate_curves(same) == one);
  std::vector<CoverageCurve> both = {zero, one};
  for (const auto& p : aggregate_curves(both)) CHECK(p.accuracy == 0.5);

  auto shifted = one;
  shifted[3].coverage += 0.01;
  std::vector<CoverageCurve> mismatched = {one, shifted};
  CHECK(kind_of([&] { aggregate_curves(mismatched); }) == ErrorKind::InvalidInput);
  std::vector<CoverageCurve> short_one = {one, CoverageCurve(one.begin(), one.end() - 1)};
  CHECK(kind_of([&] { aggregate_curves(short_one); }) == ErrorKind::InvalidInput);
}

TEST_CASE("aggregate_curves equals a brute-force average of resampled step curves") {
  std::mt19937_64 rng(21);
  const auto grid = coverage_grid();
  std::vector<CoverageCurve> curves;
  std::vector<std::vector<ScoredPrediction>> sets;
  for (int f = 0; f < 5; ++f) {
    sets.push_back(to_scored(random_scored_set(40 + rng() % 40, rng, f % 2 == 0)));
    curves.push_back(resample_curve(coverage_curve(sets.back()), grid));
  }
  const auto mean = aggregate_curves(curves);
  REQUIRE(mean.size() == grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double total = 0.0;
    for (const auto& set : sets) {
      // Accuracy at the highest threshold whose coverage still reaches grid[g].
      std::vector<double> conf;
      for (const auto& s : set) conf.push_back(s.confidence());
      std::sort(conf.begin(), conf.end());
      conf.erase(std::unique(conf.begin(), conf.end()), conf.end());
      double best = 0.0;
      for (double c : conf) {
        std::size_t kept = 0, good = 0;
        for (const auto& s : set)
          if (s.confidence() >= c) {
            ++kept;
            good += s.correct();
          }
        if (static_cast<double>(kept) / static_cast<double>(set.size()) >= grid[g])
          best = static_cast<double>(good) / static_cast<double>(kept);
      }
      total += best;
    }
    CHECK(mean[g].coverage == grid[g]);
    CHECK(mean[g].accuracy == doctest::Approx(total / 5.0).epsilon(1e-12));
  }
}

TEST_CASE("confusion matrix of a ten-item instance") {
  // truth, predicted label, confidence
  const std::vector<std::tuple<std::size_t, std::size_t, double>> items = {
      {0, 0, 0.9}, {0, 0, 0.8}, {0, 1, 0.5}, {1, 1, 0.95}, {1, 2, 0.4},
      {2, 2, 0.7}, {2, 2, 0.3}, {3, 3, 0.99}, {3, 0, 0.6}, {1, 1, 0.45}};
  std::vector<ScoredPrediction> scored;
  for (const auto& [t, l, c] : items) {
    ScoredPrediction s;
    s.truth = t;
    s.prediction = guess(l, c);
    scored.push_back(s);
  }
  const auto all = confusion_matrix(scored, 4);
  const std::vector<std::size_t> expected_all = {2, 1, 0, 0,   //
                                                 0, 2, 1, 0,   //
                                                 0, 0, 2, 0,   //
                                                 1, 0, 0, 1};
  CHECK(all.counts == expected_all);
  CHECK(all.abstained == 0);
  CHECK(all.total_accepted() == 10);

  // Threshold 0.5 drops the items at 0.4, 0.3 and 0.45.
  const auto cut = confusion_matrix(scored, 4, 0.5);
  const std::vector<std::size_t> expected_cut = {2, 1, 0, 0,  //
                                                 0, 1, 0, 0,  //
                                                 0, 0, 1, 0,  //
                                                 1, 0, 0, 1};
  CHECK(cut.counts == expected_cut);
  CHECK(cut.abstained == 3);
  CHECK(cut.total_accepted() == 7);
  for (std::size_t t = 0; t < 4; ++t) {
    std::size_t row = 0, expected = 0;
    for (std::size_t p = 0; p < 4; ++p) row += cut.at(t, p);
    for (const auto& s : scored) expected += s.truth == t && s.confidence() >= 0.5;
    CHECK(row == expected);
  }
}

TEST_CASE("perfect predictions give a diagonal matrix") {
  std::vector<ScoredPrediction> scored;
  for (std::size_t i = 0; i < 12; ++i) {
    ScoredPrediction s;
    s.truth = i % 4;
    s.prediction = guess(i % 4, 0.7);
    scored.push_back(s);
  }
  const auto cm = confusion_matrix(scored, 4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t p = 0; p < 4; ++p) CHECK(cm.at(t, p) == (t == p ? 3u : 0u));
}

TEST_CASE("operating points use per-item thresholds") {
  const auto items = five_items();
  const std::vector<double> thresholds = {0.0, 0.75, 0.75, 0.0, 0.99};
  const auto op = operating_point(items, thresholds, CalibrationMode::Mode1);
  CHECK(op.total == 5);
  CHECK(op.accepted == 3);  // a, c, d
  CHECK(op.coverage == 0.6);
  CHECK(op.accuracy == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("repeat pairs are classified") {
  std::vector<TimedPrediction> preds = {
      {"A", 1, guess(0, 0.9), 0.0}, {"A", 5, guess(0, 0.9), 0.0},   // consistent
      {"B", 2, guess(1, 0.9), 0.0}, {"B", 3, guess(2, 0.8), 0.0},   // inconsistent
      {"C", 1, guess(1, 0.9), 0.85}, {"C", 2, guess(1, 0.6), 0.85}, // abstention
      {"D", 7, guess(3, 0.9), 0.0}};                                 // single evaluation
  const auto rep = consistency_report(preds);
  CHECK(rep.consistent == 1);
  CHECK(rep.inconsistent == 1);
  CHECK(rep.abstention_involved == 1);
  CHECK(rep.pairs.size() == 3);
  CHECK(rep.accepted.at("C").size() == 1);
  CHECK(rep.accepted.count("D") == 0);
  CHECK(as_set(rep) == std::set<std::tuple<std::string, std::int64_t, std::int64_t>>{{"B", 2, 3}});

  std::vector<TimedPrediction> none = {{"A", 1, guess(0, 0.9), 0.0}, {"B", 1, guess(0, 0.9), 0.0}};
  const auto empty = consistency_report(none);
  CHECK(empty.pairs.empty());
}

TEST_CASE("pairing rules for three evaluations") {
  std::vector<TimedPrediction> preds = {
      {"A", 30, guess(0, 0.9), 0.0}, {"A", 10, guess(0, 0.9), 0.0}, {"A", 20, guess(1, 0.9), 0.0}};
  const auto chained = consistency_report(preds, PairingRule::Consecutive);
  CHECK(chained.pairs.size() == 2);
  CHECK(chained.inconsistent == 2);
  CHECK(chained.pairs[0].time_a == 10);
  CHECK(chained.pairs[0].time_b == 20);
  const auto all = consistency_report(preds, PairingRule::AllPairs);
  CHECK(all.pairs.size() == 3);
  CHECK(all.inconsistent == 2);
  CHECK(all.consistent == 1);
  CHECK(pairing_from_string("all-pairs") == PairingRule::AllPairs);
  CHECK(to_string(PairingRule::Consecutive) == "consecutive");
}

TEST_CASE("raising thresholds only shrinks the inconsistent set") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> conf(0.3, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TimedPrediction> base;
    for (int s = 0; s < 30; ++s)
      for (int e = 0; e < 1 + static_cast<int>(rng() % 3); ++e)
        base.push_back({"S" + std::to_string(s), e, guess(rng() % 4, conf(rng)), 0.0});
    auto at = [&](double t) {
      auto v = base;
      for (auto& p : v) p.threshold = t;
      return as_set(consistency_report(v, trial % 2 ? PairingRule::AllPairs : PairingRule::Consecutive));
    };
    const auto none = at(0.0), m1 = at(0.6), m2 = at(0.8);
    CHECK(std::includes(none.begin(), none.end(), m1.begin(), m1.end()));
    CHECK(std::includes(m1.begin(), m1.end(), m2.begin(), m2.end()));
    const auto rep = consistency_report(base);
    CHECK(rep.consistent + rep.inconsistent + rep.abstention_involved == rep.pairs.size());
  }
}

TEST_CASE("meta-model with one source and identity weights follows that source") {
  MetaModel meta(Task::OD, {Source::UV}, 1);
  auto& w = meta.params().get("meta.weight").value;
  std::fill(w.data.begin(), w.data.end(), 0.0);
  for (std::size_t i = 0; i < 4; ++i) w.data[i * 4 + i] = 5.0;
  auto& b = meta.params().get("meta.bias").value;
  std::fill(b.data.begin(), b.data.end(), 0.0);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto p = guess(rng() % 4, std::uniform_real_distribution<double>(0.3, 1.0)(rng));
    const std::vector<Source> src = {Source::UV};
    const std::vector<Prediction> per = {p};
    const auto out = meta.combine(src, per);
    CHECK(out.label == p.label);
    double s = 0.0;
    for (double v : out.probs) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  const std::vector<Source> wrong = {Source::XRF};
  const std::vector<Prediction> per = {guess(0, 0.9)};
  CHECK(kind_of([&] { meta.combine(wrong, per); }) == ErrorKind::InvalidInput);
}

TEST_CASE("meta-model learns which source to trust") {
  // Source A is always right, source B is noise.
  std::mt19937_64 rng(13);
  std::vector<std::vector<Prediction>> per(2);
  std::vector<std::size_t> labels;
  for (int i = 0; i < 400; ++i) {
    const std::size_t y = rng() % 4;
    labels.push_back(y);
    per[0].push_back(guess(y, 0.6));
    per[1].push_back(guess(rng() % 4, 0.9));
  }
  MetaModel meta(Task::OD, {Source::UV, Source::XRF}, 3);
  meta.fit(per, labels, 300, 0.05);
  std::size_t correct = 0;
  const std::vector<Source> src = {Source::UV, Source::XRF};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::vector<Prediction> p = {per[0][i], per[1][i]};
    correct += meta.combine(src, p).label == labels[i];
  }
  CHECK(correct >= 390);
}

TEST_CASE("prediction and curve CSV round trips") {
  TempDir dir("eval-csv");
  std::vector<PooledRow> rows;
  std::mt19937_64 rng(1);
  std::gamma_distribution<double> g(0.5, 1.0);
  for (int i = 0; i < 30; ++i) {
    std::vector<double> p(4);
    double s = 0.0;
    for (auto& v : p) s += v = g(rng) + 1e-3;
    for (auto& v : p) v /= s;
    rows.push_back({static_cast<std::size_t>(i % 3), od(rng() % 4, p, "S" + std::to_string(i), i * 7)});
  }
  write_predictions_csv(dir / "p.csv", rows, Task::OD);
  const auto back = read_predictions_csv(dir / "p.csv", Task::OD);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].fold == rows[i].fold);
    CHECK(back[i].scored.stone_id == rows[i].scored.stone_id);
    CHECK(back[i].scored.evaluation_time == rows[i].scored.evaluation_time);
    CHECK(back[i].scored.truth == rows[i].scored.truth);
    CHECK(back[i].scored.prediction.probs == rows[i].scored.prediction.probs);
  }
  std::vector<ScoredPrediction> scored;
  for (const auto& r : back) scored.push_back(r.scored);
  std::size_t good = 0;
  for (const auto& r : rows) good += r.scored.correct();
  CHECK(accuracy(scored) == static_cast<double>(good) / 30.0);

  const auto curve = coverage_curve(scored);
  write_curve_csv(dir / "c.csv", curve);
  CHECK(read_curve_csv(dir / "c.csv") == curve);

  CHECK(kind_of([&] { read_predictions_csv(dir / "absent.csv", Task::OD); }) == ErrorKind::MissingArtifact);
  std::vector<PooledRow> bad = {{0, od(0, {0.7, 0.1, 0.1, 0.1}, "a,b")}};
  CHECK_THROWS_AS(write_predictions_csv(dir / "bad.csv", bad, Task::OD), Error);
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, 0.0, -2.5})
    CHECK(std::stod(format_double(v)) == v);
  CHECK(format_double(std::numeric_limits<double>::infinity()) == "inf");
}

TEST_CASE("emit_report is reproducible and reports missing artifacts") {
  TempDir dir("report");
  std::mt19937_64 rng(31);
  std::vector<PooledRow> rows;
  for (std::size_t f = 0; f < 2; ++f)
    for (int i = 0; i < 40; ++i) {
      const std::string id = "S" + std::to_string(f * 100 + i / 2);
      const std::size_t y = rng() % 4;
      const double c = std::uniform_real_distribution<double>(0.3, 1.0)(rng);
      const std::size_t label = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < c ? y : (y + 1) % 4;
      ScoredPrediction s;
      s.stone_id = id;
      s.evaluation_time = i % 2;
      s.truth = y;
      s.prediction = guess(label, c);
      rows.push_back({f, s});
    }
  write_predictions_csv(dir / "predictions.csv", rows, Task::OD);
  CHECK(kind_of([&] { emit_report(dir.path(), Task::OD); }) == ErrorKind::MissingArtifact);
  try {
    emit_report(dir.path(), Task::OD);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("calibration.json") != std::string::npos);
  }

  for (std::size_t f = 0; f < 2; ++f) {
    std::vector<ScoredPrediction> fold;
    for (const auto& r : rows)
      if (r.fold == f) fold.push_back(r.scored);
    std::filesystem::create_directories(dir / ("fold_" + std::to_string(f)));
    write_file(dir / ("fold_" + std::to_string(f)) / "calibration.json",
               calibration_set_to_json(make_calibration_set(fold)));
  }
  const auto summary = emit_report(dir.path(), Task::OD);
  const std::vector<std::string> files = {"summary.csv", "coverage_mean.csv", "coverage_pooled.csv",
                                          "coverage.svg", "confusion_none.csv", "confusion_mode2.svg",
                                          "consistency_mode1.csv", "consistency_none.svg"};
  std::map<std::string, std::string> first;
  for (const auto& f : files) first[f] = read_file(dir / "report" / f);
  for (const auto& f : files) CHECK_FALSE(first[f].empty());
  emit_report(dir.path(), Task::OD);
  for (const auto& f : files) CHECK(read_file(dir / "report" / f) == first[f]);

  const auto& table = first["summary.csv"];
  CHECK(table.rfind("mode,epsilon,coverage,accuracy", 0) == 0);
  CHECK(table.find("\nnone,") != std::string::npos);
  CHECK(table.find("\nmode1,0.98,") != std::string::npos);
  CHECK(table.find("\nmode2,0.99,") != std::string::npos);
  CHECK(summary.modes[0].coverage == 1.0);
  CHECK(summary.modes[2].coverage <= summary.modes[1].coverage);
  CHECK(read_curve_csv(dir / "report" / "coverage_pooled.csv") ==
        coverage_curve([&] {
          std::vector<ScoredPrediction> all;
          for (const auto& r : rows) all.push_back(r.scored);
          return all;
        }()));
}
