#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "gemnet/error.hpp"
#include "gemnet/synthgen.hpp"
#include "gemnet/train.hpp"
#include "support/tempdir.hpp"

using namespace gemnet;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected gemnet::Error");
  return ErrorKind::IoError;
}

/// Minimal records: one UV spectrum, optional labels.
std::vector<StoneRecord> stones(std::size_t n, std::size_t evaluations = 1) {
  std::vector<StoneRecord> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < evaluations; ++e) {
      StoneRecord r;
      r.stone_id = "S" + std::to_string(1000 + i);
      r.evaluation_time = static_cast<std::int64_t>(e);
      r.uv = UvSpectrum(std::vector<double>(2 * kUvLength, 0.1));
      r.origin = static_cast<Origin>(i % 4);
      r.treatment = static_cast<Treatment>(i % 2);
      out.push_back(r);
    }
  return out;
}

std::set<std::string> ids(std::span<const StoneRecord> rs) {
  std::set<std::string> s;
  for (const auto& r : rs) s.insert(r.stone_id);
  return s;
}

ModelConfig fast_model(Task task = Task::OD) {
  auto cfg = ModelConfig::compact(task);
  if (task == Task::OD) cfg.allowed_sources = {Source::UV, Source::XRF, Source::ICPMS};
  return cfg;
}

TrainConfig short_run(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.lr = 1e-3;
  t.seed = 3;
  return t;
}

ScoredPrediction scored(const std::string& id, std::int64_t time, std::size_t truth, std::size_t label) {
  std::vector<double> p(4, 0.1);
  p[label] = 0.7;
  ScoredPrediction s;
  s.stone_id = id;
  s.evaluation_time = time;
  s.truth = truth;
  s.prediction = Prediction::from_probs(p, Task::OD);
  return s;
}

}  // namespace

TEST_CASE("split_train_val sizes, leakage and determinism") {
  const auto hundred = stones(100);
  const auto split = split_train_val(hundred, 7);
  CHECK(split.train.size() == 80);
  CHECK(split.val.size() == 20);
  const auto again = split_train_val(hundred, 7);
  CHECK(ids(again.val) == ids(split.val));
  CHECK_FALSE(ids(split_train_val(hundred, 8).val) == ids(split.val));

  const auto repeats = stones(50, 2);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = split_train_val(repeats, seed);
    CHECK(s.train.size() + s.val.size() == 100);
    CHECK(s.train.size() % 2 == 0);
    const auto a = ids(s.train), b = ids(s.val);
    for (const auto& id : b) CHECK(a.count(id) == 0);
  }
  CHECK(kind_of([] { split_train_val(stones(4), 1); }) == ErrorKind::InvalidInput);
  CHECK(kind_of([] { split_train_val(stones(1, 6), 1); }) == ErrorKind::InvalidInput);
}

TEST_CASE("stratified split keeps class proportions") {
  const auto recs = stones(200);
  const auto s = split_train_val(recs, 3, 0.2, Task::OD);
  std::array<int, 4> counts{};
  for (const auto& r : s.val) ++counts[static_cast<std::size_t>(*r.origin)];
  for (int c : counts) CHECK(c == 10);
}

TEST_CASE("kfold_split partitions stones evenly") {
  const auto recs = stones(103);
  const auto folds = kfold_split(recs, 5, 11);
  REQUIRE(folds.size() == 5);
  std::vector<std::size_t> sizes;
  std::set<std::string> all;
  std::size_t total = 0;
  for (const auto& f : folds) {
    sizes.push_back(f.stones.size());
    total += f.stones.size();
    all.insert(f.stones.begin(), f.stones.end());
    CHECK(std::is_sorted(f.records.begin(), f.records.end()));
  }
  CHECK(sizes == std::vector<std::size_t>{21, 21, 21, 20, 20});
  CHECK(total == 103);
  CHECK(all == ids(recs));
  const auto same = kfold_split(recs, 5, 11);
  for (std::size_t f = 0; f < 5; ++f) CHECK(same[f].stones == folds[f].stones);

  const auto repeats = stones(20, 3);
  for (const auto& f : kfold_split(repeats, 4, 2)) {
    CHECK(f.records.size() == 3 * f.stones.size());
    for (std::size_t i : f.records)
      CHECK(std::count(f.stones.begin(), f.stones.end(), repeats[i].stone_id) == 1);
  }
  CHECK(kind_of([] { kfold_split(stones(4), 5, 1); }) == ErrorKind::InvalidInput);
  CHECK(kind_of([] { kfold_split(stones(10), 1, 1); }) == ErrorKind::InvalidInput);
}

TEST_CASE("mask draws") {
  std::mt19937_64 rng(1);
  const std::vector<Source> od(kAllSources.begin(), kAllSources.end());
  for (int i = 0; i < 100; ++i) CHECK(draw_mask(od, 0.0, rng) == kNoMask);
  for (int i = 0; i < 100; ++i) {
    const auto m = draw_mask(od, 1.0, rng);
    CHECK(std::count(m.begin(), m.end(), true) == 1);
  }
  std::size_t masked = 0;
  std::array<std::size_t, 4> per{};
  const std::vector<Source> td = {Source::UV, Source::FTIR};
  for (int i = 0; i < 10000; ++i) {
    const auto m = draw_mask(td, 0.7, rng);
    const auto n = std::count(m.begin(), m.end(), true);
    CHECK(n <= 1);
    masked += static_cast<std::size_t>(n);
    for (std::size_t s = 0; s < 4; ++s) per[s] += m[s];
  }
  const double freq = static_cast<double>(masked) / 10000.0;
  CHECK(freq >= 0.69);
  CHECK(freq <= 0.71);
  CHECK(per[2] == 0);
  CHECK(per[3] == 0);
  CHECK(std::abs(static_cast<double>(per[0]) - static_cast<double>(per[1])) < 300.0);

  const auto shared = mask_batch(16, od, 1.0, MaskGranularity::PerBatch, rng);
  for (const auto& m : shared) CHECK(m == shared.front());
  std::size_t distinct = 0;
  for (int i = 0; i < 20; ++i) {
    const auto each = mask_batch(16, od, 1.0, MaskGranularity::PerSample, rng);
    distinct += std::any_of(each.begin(), each.end(), [&](const auto& m) { return m != each.front(); });
  }
  CHECK(distinct > 15);
}

TEST_CASE("plateau scheduler decays after more than ten flat epochs") {
  PlateauScheduler sched(1e-4, 10, 10.0);
  std::vector<double> lr_for_epoch(40, 0.0);  // lr used in epoch e (1-based)
  lr_for_epoch[1] = sched.lr();
  for (std::size_t epoch = 1; epoch < 30; ++epoch) {
    const double acc = epoch <= 10 ? 0.5 + 0.01 * static_cast<double>(epoch) : 0.55;
    lr_for_epoch[epoch + 1] = sched.step(acc);
  }
  CHECK(lr_for_epoch[21] == 1e-4);
  CHECK(lr_for_epoch[22] == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_for_epoch[33 - 4] == doctest::Approx(1e-5).epsilon(1e-12));
  for (std::size_t e = 2; e < 31; ++e) CHECK(lr_for_epoch[e] <= lr_for_epoch[e - 1]);

  // Equal accuracy is not an improvement.
  PlateauScheduler flat(1.0, 2, 2.0);
  flat.step(0.5);
  flat.step(0.5);
  flat.step(0.5);
  CHECK(flat.lr() == 1.0);
  CHECK(flat.step(0.5) == 0.5);
  CHECK(flat.bad_epochs() == 0);
}

TEST_CASE("best checkpoint picks the earliest maximum") {
  const std::vector<std::pair<std::size_t, double>> trace = {{5, 0.5}, {10, 0.9}, {15, 0.8}, {20, 0.9}};
  CHECK(trace[select_best_checkpoint(trace)].first == 10);
  const std::vector<std::pair<std::size_t, double>> one = {{5, 0.1}};
  CHECK(select_best_checkpoint(one) == 0);
  const std::vector<std::pair<std::size_t, double>> none;
  CHECK(kind_of([&] { select_best_checkpoint(none); }) == ErrorKind::InvalidInput);
}

TEST_CASE("aggregate_predictions concatenates folds") {
  std::vector<FoldResult> folds(5);
  std::size_t correct = 0;
  std::vector<double> fold_acc;
  for (std::size_t f = 0; f < 5; ++f) {
    folds[f].fold = f;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      const bool right = (i + f) % (f + 2) != 0;
      folds[f].test.push_back(scored("S" + std::to_string(f * 20 + i), 0, 1, right ? 1 : 2));
      ok += right;
    }
    correct += ok;
    fold_acc.push_back(static_cast<double>(ok) / 20.0);
  }
  const auto pooled = aggregate_predictions(folds);
  CHECK(pooled.size() == 100);
  std::multiset<std::string> pooled_ids;
  std::vector<ScoredPrediction> all;
  for (const auto& r : pooled) {
    pooled_ids.insert(r.scored.stone_id);
    all.push_back(r.scored);
  }
  std::multiset<std::string> expected;
  for (int i = 0; i < 100; ++i) expected.insert("S" + std::to_string(i));
  CHECK(pooled_ids == expected);
  double weighted = 0.0;
  for (double a : fold_acc) weighted += a * 20.0 / 100.0;
  CHECK(accuracy(all) == doctest::Approx(weighted).epsilon(1e-12));
  CHECK(accuracy(all) == static_cast<double>(correct) / 100.0);

  folds[3].test.push_back(scored("S0", 5, 0, 0));
  CHECK(kind_of([&] { aggregate_predictions(folds); }) == ErrorKind::InvalidInput);
  folds[3].test.pop_back();
  folds[3].test.push_back(folds[3].test.front());
  CHECK(kind_of([&] { aggregate_predictions(folds); }) == ErrorKind::InvalidInput);
}

TEST_CASE("train config validation and JSON") {
  TrainConfig t;
  t.epochs = 12;
  t.masking = MaskGranularity::PerSample;
  t.optimizer.kind = nn::OptimizerKind::Sgd;
  const auto text = train_config_to_json(t);
  CHECK(train_config_to_json(train_config_from_json(text)) == text);
  CHECK_THROWS_AS(train_config_from_json(R"({"epoch": 3})"), Error);
  auto bad = TrainConfig{};
  bad.val_fraction = 1.0;
  CHECK(kind_of([&] { validate_train_config(bad); }) == ErrorKind::InvalidConfig);
  bad = TrainConfig{};
  bad.mask_probability = 1.5;
  CHECK(kind_of([&] { validate_train_config(bad); }) == ErrorKind::InvalidConfig);
  bad = TrainConfig{};
  bad.batch = 1;
  CHECK(kind_of([&] { validate_train_config(bad); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("training on the easy spec reaches 99% on validation and held-out stones") {
  const auto spec = easy_spec();
  const auto corpus = gen_corpus(spec, 1000);
  const auto cfg = fast_model();
  const auto records = usable_records(corpus, cfg);
  const auto outer = split_train_val(records, 1, 0.2);
  const auto inner = split_train_val(outer.train, 2, 0.2);
  auto tc = short_run(15);
  std::vector<double> lrs;
  const auto result = train_model(inner.train, inner.val, cfg, tc,
                                   [&](const EpochRecord& e) { lrs.push_back(e.lr); });
  CHECK(result.trace.size() == 15);
  CHECK(result.best_val_accuracy >= 0.99);
  CHECK(result.best_epoch % 5 == 0);
  for (std::size_t i = 1; i < lrs.size(); ++i) CHECK(lrs[i] <= lrs[i - 1]);

  const auto preds = result.model.predict(outer.val);
  const auto s = score(outer.val, preds, Task::OD);
  CHECK(accuracy(s) >= 0.99);
}

TEST_CASE("cross-validation has no leakage and is deterministic") {
  auto spec = realistic_spec();
  spec.repeat_fraction = 0.3;
  const auto corpus = gen_corpus(spec, 150);
  const auto cfg = fast_model();
  auto tc = short_run(2);
  tc.folds = 3;
  gemnet::testing::TempDir a("cv-a"), b("cv-b");
  const auto ra = run_cross_validation(corpus, cfg, tc, a.path());
  const auto rb = run_cross_validation(corpus, cfg, tc, b.path());

  std::size_t pooled_records = 0;
  for (const auto& f : ra.folds) {
    std::set<std::string> test_ids, fit_ids;
    for (const auto& s : f.test) test_ids.insert(s.stone_id);
    for (const auto& s : f.calibration) fit_ids.insert(s.stone_id);
    for (const auto& id : test_ids) CHECK(fit_ids.count(id) == 0);
    pooled_records += f.test.size();
  }
  CHECK(pooled_records == usable_records(corpus, cfg).size());
  CHECK(ra.pooled.size() == pooled_records);

  using gemnet::testing::read_file;
  CHECK(read_file(a / "predictions.csv") == read_file(b / "predictions.csv"));
  for (int f = 0; f < 3; ++f) {
    const std::string dir = "fold_" + std::to_string(f);
    for (const char* name : {"val_trace.csv", "calibration.json", "train_predictions.csv", "checkpoint.bin"}) {
      CHECK(std::filesystem::exists(a.path() / dir / name));
      CHECK(read_file(a.path() / dir / name) == read_file(b.path() / dir / name));
    }
  }
  const auto loaded = Model::load(a.path() / "fold_0" / "checkpoint.bin");
  const auto& fold0 = ra.folds[0];
  std::vector<StoneRecord> test_records;
  for (const auto& r : corpus)
    for (const auto& s : fold0.test)
      if (s.stone_id == r.stone_id && s.evaluation_time == r.evaluation_time) test_records.push_back(r);
  const auto again = loaded.predict(test_records);
  for (std::size_t i = 0; i < again.size(); ++i)
    CHECK(again[i].probs == fold0.test[i].prediction.probs);
}
