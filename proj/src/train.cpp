#include "gemnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <thread>

#include <json.hpp>

#include "gemnet/error.hpp"
#include "gemnet/seed.hpp"

namespace gemnet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(MaskGranularity g) {
  return g == MaskGranularity::PerBatch ? "per-batch" : "per-sample";
}

MaskGranularity mask_granularity_from_string(std::string_view s) {
  if (s == "per-batch") return MaskGranularity::PerBatch;
  if (s == "per-sample") return MaskGranularity::PerSample;
  fail(ErrorKind::InvalidConfig, "unknown masking granularity '" + std::string(s) + "'");
}

void validate_train_config(const TrainConfig& c) {
  require(c.epochs >= 1, ErrorKind::InvalidConfig, "epochs must be positive");
  require(c.batch >= 2, ErrorKind::InvalidConfig, "batch must be at least 2");
  require(c.lr > 0.0 && std::isfinite(c.lr), ErrorKind::InvalidConfig, "lr must be positive");
  require(c.decay >= 1.0, ErrorKind::InvalidConfig, "decay factor must be >= 1");
  require(c.checkpoint_every >= 1, ErrorKind::InvalidConfig, "checkpoint stride must be positive");
  require(c.mask_probability >= 0.0 && c.mask_probability <= 1.0, ErrorKind::InvalidConfig,
          "mask probability must lie in [0, 1]");
  require(c.val_fraction > 0.0 && c.val_fraction < 1.0, ErrorKind::InvalidConfig,
          "val fraction must lie in (0, 1)");
  require(c.folds >= 2, ErrorKind::InvalidConfig, "at least 2 folds required");
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["patience"] = c.patience;
  j["decay"] = c.decay;
  j["checkpoint_every"] = c.checkpoint_every;
  j["mask_probability"] = c.mask_probability;
  j["val_fraction"] = c.val_fraction;
  j["folds"] = c.folds;
  j["seed"] = c.seed;
  j["masking"] = std::string(to_string(c.masking));
  j["stratify"] = c.stratify;
  j["refresh_batchnorm"] = c.refresh_batchnorm;
  j["deterministic"] = c.deterministic;
  j["optimizer"] = {{"kind", c.optimizer.kind == nn::OptimizerKind::Adam ? "adam" : "sgd"},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps}};
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    static const std::set<std::string> known{
        "epochs", "batch", "lr", "patience", "decay", "checkpoint_every", "mask_probability",
        "val_fraction", "folds", "seed", "masking", "stratify", "refresh_batchnorm",
        "deterministic", "optimizer"};
    for (const auto& [key, _] : j.items())
      require(known.count(key) > 0, ErrorKind::InvalidConfig, "unknown train key '" + key + "'");
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("epochs", c.epochs);
    get("batch", c.batch);
    get("lr", c.lr);
    get("patience", c.patience);
    get("decay", c.decay);
    get("checkpoint_every", c.checkpoint_every);
    get("mask_probability", c.mask_probability);
    get("val_fraction", c.val_fraction);
    get("folds", c.folds);
    get("seed", c.seed);
    get("stratify", c.stratify);
    get("refresh_batchnorm", c.refresh_batchnorm);
    get("deterministic", c.deterministic);
    if (j.contains("masking")) c.masking = mask_granularity_from_string(j.at("masking").get<std::string>());
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      const auto kind = o.value("kind", std::string("adam"));
      require(kind == "adam" || kind == "sgd", ErrorKind::InvalidConfig,
              "unknown optimizer '" + kind + "'");
      c.optimizer.kind = kind == "adam" ? nn::OptimizerKind::Adam : nn::OptimizerKind::Sgd;
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.eps = o.value("eps", c.optimizer.eps);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("train config: ") + e.what());
  }
  validate_train_config(c);
  return c;
}

namespace {

// Stone ids in first-appearance order with their record indices.
std::vector<std::pair<std::string, std::vector<std::size_t>>> group_by_stone(
    std::span<const StoneRecord> records) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto [it, added] = index.emplace(records[i].stone_id, groups.size());
    if (added) groups.push_back({records[i].stone_id, {}});
    groups[it->second].second.push_back(i);
  }
  return groups;
}

std::size_t val_count(std::size_t stones, double fraction) {
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(stones)));
  return std::clamp<std::size_t>(n, 1, stones - 1);
}

}  // namespace

TrainValSplit split_train_val(std::span<const StoneRecord> records, std::uint64_t seed,
                              double val_fraction, std::optional<Task> stratify_by) {
  require(records.size() >= 5, ErrorKind::InvalidInput, "need at least 5 records to split");
  require(val_fraction > 0.0 && val_fraction < 1.0, ErrorKind::InvalidInput,
          "val fraction must lie in (0, 1)");
  auto groups = group_by_stone(records);
  require(groups.size() >= 2, ErrorKind::InvalidInput, "need at least 2 stones to split");

  std::mt19937_64 rng(derive_seed(seed, "split"));
  std::vector<bool> to_val(groups.size(), false);
  if (stratify_by) {
    std::map<std::size_t, std::vector<std::size_t>> by_label;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto label = records[groups[g].second.front()].label(*stratify_by);
      require(label.has_value(), ErrorKind::InvalidInput,
              "stratified split needs labels on every stone");
      by_label[*label].push_back(g);
    }
    for (auto& [label, members] : by_label) {
      std::shuffle(members.begin(), members.end(), rng);
      const auto n = static_cast<std::size_t>(
          std::llround(val_fraction * static_cast<double>(members.size())));
      for (std::size_t i = 0; i < n; ++i) to_val[members[i]] = true;
    }
    const auto nval = static_cast<std::size_t>(std::count(to_val.begin(), to_val.end(), true));
    require(nval > 0 && nval < groups.size(), ErrorKind::InvalidInput,
            "stratified split left one side empty");
  } else {
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n = val_count(groups.size(), val_fraction);
    for (std::size_t i = 0; i < n; ++i) to_val[order[i]] = true;
  }

  TrainValSplit split;
  std::map<std::string, bool> side;
  for (std::size_t g = 0; g < groups.size(); ++g) side[groups[g].first] = to_val[g];
  for (const auto& r : records) (side[r.stone_id] ? split.val : split.train).push_back(r);
  return split;
}

std::vector<KFold> kfold_split(std::span<const StoneRecord> records, std::size_t k,
                               std::uint64_t seed) {
  require(k >= 2, ErrorKind::InvalidInput, "k-fold needs k >= 2");
  auto groups = group_by_stone(records);
  require(groups.size() >= k, ErrorKind::InvalidInput,
          "fewer stones (" + std::to_string(groups.size()) + ") than folds (" +
              std::to_string(k) + ")");
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, "kfold"));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<KFold> folds(k);
  const std::size_t base = groups.size() / k, extra = groups.size() % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i, ++pos) {
      const auto& g = groups[order[pos]];
      folds[f].stones.push_back(g.first);
      folds[f].records.insert(folds[f].records.end(), g.second.begin(), g.second.end());
    }
    std::sort(folds[f].records.begin(), folds[f].records.end());
  }
  return folds;
}

MaskState draw_mask(std::span<const Source> allowed, double p, std::mt19937_64& rng) {
  MaskState mask = kNoMask;
  if (allowed.empty()) return mask;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < p) {
    std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
    mask[static_cast<std::size_t>(allowed[pick(rng)])] = true;
  }
  return mask;
}

std::vector<MaskState> mask_batch(std::size_t batch_size, std::span<const Source> allowed,
                                  double p, MaskGranularity granularity, std::mt19937_64& rng) {
  require(batch_size > 0, ErrorKind::InvalidInput, "empty batch");
  if (granularity == MaskGranularity::PerBatch)
    return std::vector<MaskState>(batch_size, draw_mask(allowed, p, rng));
  std::vector<MaskState> masks;
  masks.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) masks.push_back(draw_mask(allowed, p, rng));
  return masks;
}

PlateauScheduler::PlateauScheduler(double lr, std::size_t patience, double factor)
    : lr_(lr), patience_(patience), factor_(factor) {
  require(lr > 0.0 && factor >= 1.0, ErrorKind::InvalidConfig, "bad scheduler settings");
}

double PlateauScheduler::step(double metric) {
  if (!seen_ || metric > best_) {
    seen_ = true;
    best_ = metric;
    bad_ = 0;
  } else if (++bad_ > patience_) {
    lr_ /= factor_;
    bad_ = 0;
  }
  return lr_;
}

std::size_t select_best_checkpoint(std::span<const std::pair<std::size_t, double>> candidates) {
  require(!candidates.empty(), ErrorKind::InvalidInput, "no checkpoints to choose from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    const auto& b = candidates[best];
    if (c.second > b.second || (c.second == b.second && c.first < b.first)) best = i;
  }
  return best;
}

std::vector<StoneRecord> usable_records(std::span<const StoneRecord> records,
                                        const ModelConfig& config) {
  std::vector<StoneRecord> out;
  for (const auto& r : records) {
    if (!r.label(config.task)) continue;
    if (std::none_of(config.allowed_sources.begin(), config.allowed_sources.end(),
                     [&](Source s) { return r.has(s); }))
      continue;
    out.push_back(r);
  }
  return out;
}

std::vector<ScoredPrediction> score(std::span<const StoneRecord> records,
                                    std::span<const Prediction> preds, Task task) {
  require(records.size() == preds.size(), ErrorKind::InvalidInput,
          "one prediction per record required");
  std::vector<ScoredPrediction> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto label = records[i].label(task);
    require(label.has_value(), ErrorKind::InvalidInput,
            "record " + records[i].stone_id + " has no label for the task");
    out.push_back({records[i].stone_id, records[i].evaluation_time, *label, preds[i]});
  }
  return out;
}

namespace {

double val_accuracy(const Model& model, std::span<const StoneRecord> val) {
  const auto preds = model.predict(val);
  return accuracy(score(val, preds, model.config().task));
}

}  // namespace

TrainResult train_model(std::span<const StoneRecord> train, std::span<const StoneRecord> val,
                        const ModelConfig& model_config, const TrainConfig& config,
                        const EpochCallback& on_epoch) {
  validate_train_config(config);
  validate_config(model_config);
  require(train.size() >= 2, ErrorKind::InvalidInput, "need at least 2 training records");
  require(!val.empty(), ErrorKind::InvalidInput, "empty validation set");
  {
    std::set<std::string> ids;
    for (const auto& r : train) ids.insert(r.stone_id);
    for (const auto& r : val)
      require(ids.count(r.stone_id) == 0, ErrorKind::InvalidInput,
              "stone " + r.stone_id + " is in both train and val");
  }
  const Task task = model_config.task;
  std::vector<std::size_t> labels;
  labels.reserve(train.size());
  for (const auto& r : train) {
    const auto l = r.label(task);
    require(l.has_value(), ErrorKind::InvalidInput, "unlabelled training record " + r.stone_id);
    labels.push_back(*l);
  }

  TrainResult result(Model{model_config});
  Model& model = result.model;
  model.set_means(compute_source_means(train, model_config.allowed_sources));
  if (model_config.has_elemental()) model.choose_references(train, config.seed);

  std::vector<ModelInput> plain_inputs;
  if (config.refresh_batchnorm) {
    plain_inputs.reserve(train.size());
    for (const auto& r : train)
      plain_inputs.push_back(make_input(r, kNoMask, model.means(), model_config, false));
  }

  PlateauScheduler scheduler(config.lr, config.patience, config.decay);
  std::mt19937_64 mask_rng(derive_seed(config.seed, "mask"));
  std::vector<std::pair<std::size_t, double>> candidates;
  std::vector<nn::Tensor> best_weights;
  std::size_t best_index = 0;

  try {
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
      const double lr = scheduler.lr();
      std::vector<std::size_t> order(train.size());
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 shuffle_rng(derive_seed(config.seed, "shuffle", epoch));
      std::shuffle(order.begin(), order.end(), shuffle_rng);

      std::vector<std::pair<std::size_t, std::size_t>> batches;
      for (std::size_t s = 0; s < order.size(); s += config.batch)
        batches.emplace_back(s, std::min(order.size(), s + config.batch));
      // BatchNorm needs two samples; fold a trailing singleton into its neighbour.
      if (batches.size() > 1 && batches.back().second - batches.back().first == 1) {
        batches[batches.size() - 2].second = batches.back().second;
        batches.pop_back();
      }

      double loss_sum = 0.0;
      for (const auto& [lo, hi] : batches) {
        const std::size_t b = hi - lo;
        const auto masks = mask_batch(b, model_config.allowed_sources, config.mask_probability,
                                      config.masking, mask_rng);
        std::vector<ModelInput> inputs;
        inputs.reserve(b);
        for (std::size_t i = 0; i < b; ++i)
          inputs.push_back(make_input(train[order[lo + i]], masks[i], model.means(),
                                      model_config, false));
        Model::Cache cache;
        const nn::Tensor logits = model.forward_logits(inputs, nn::BatchNormMode::Train, &cache);
        const std::size_t c = logits.dim(1);
        nn::Tensor d({b, c});
        for (std::size_t i = 0; i < b; ++i) {
          const auto lg = nn::softmax_cross_entropy(
              std::span<const double>(logits.ptr() + i * c, c), labels[order[lo + i]]);
          require(std::isfinite(lg.loss), ErrorKind::NumericalError,
                  "non-finite loss at epoch " + std::to_string(epoch));
          loss_sum += lg.loss;
          for (std::size_t k = 0; k < c; ++k) d.at2(i, k) = lg.grad[k] / static_cast<double>(b);
        }
        model.backward(d, cache);
        nn::optimizer_step(model.params(), lr, config.optimizer);
      }

      if (config.refresh_batchnorm) model.recompute_batchnorm(plain_inputs);
      EpochRecord rec;
      rec.epoch = epoch;
      rec.loss = loss_sum / static_cast<double>(train.size());
      rec.val_accuracy = val_accuracy(model, val);
      rec.lr = lr;
      rec.snapshot = epoch % config.checkpoint_every == 0 || epoch == config.epochs;
      scheduler.step(rec.val_accuracy);
      if (rec.snapshot) {
        candidates.emplace_back(epoch, rec.val_accuracy);
        const std::size_t best = select_best_checkpoint(candidates);
        if (best == candidates.size() - 1 || best_weights.empty()) {
          best_weights = model.params().snapshot();
          best_index = best;
        }
      }
      result.trace.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NumericalError || best_weights.empty()) throw;
    result.aborted = true;
    result.abort_reason = e.what();
  }

  model.params().restore(best_weights);
  result.best_epoch = candidates[best_index].first;
  result.best_val_accuracy = candidates[best_index].second;
  return result;
}

std::vector<PooledRow> aggregate_predictions(std::span<const FoldResult> folds) {
  std::map<std::string, std::size_t> owner;
  std::set<std::pair<std::string, std::int64_t>> seen;
  std::vector<PooledRow> pooled;
  for (const auto& f : folds) {
    for (const auto& s : f.test) {
      auto [it, added] = owner.emplace(s.stone_id, f.fold);
      require(added || it->second == f.fold, ErrorKind::InvalidInput,
              "stone " + s.stone_id + " appears in folds " + std::to_string(it->second) +
                  " and " + std::to_string(f.fold));
      require(seen.emplace(s.stone_id, s.evaluation_time).second, ErrorKind::InvalidInput,
              "duplicate evaluation of stone " + s.stone_id);
      pooled.push_back({f.fold, s});
    }
  }
  return pooled;
}

void write_val_trace_csv(const fs::path& path, std::span<const EpochRecord> trace) {
  std::string out = "epoch,loss,val_accuracy,lr,snapshot\n";
  for (const auto& r : trace)
    out += std::to_string(r.epoch) + "," + format_double(r.loss) + "," +
           format_double(r.val_accuracy) + "," + format_double(r.lr) + "," +
           (r.snapshot ? "1" : "0") + "\n";
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::IoError, "cannot write " + path.string());
  f << out;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::IoError, "cannot write " + path.string());
  f << text << '\n';
}

FoldResult run_fold(std::span<const StoneRecord> usable, const KFold& test_fold, std::size_t f,
                    const ModelConfig& model_config, const TrainConfig& config,
                    const FoldCallback& on_epoch) {
  std::vector<StoneRecord> test, rest;
  {
    std::size_t next = 0;
    for (std::size_t i = 0; i < usable.size(); ++i) {
      if (next < test_fold.records.size() && test_fold.records[next] == i) {
        test.push_back(usable[i]);
        ++next;
      } else {
        rest.push_back(usable[i]);
      }
    }
  }
  TrainConfig fold_config = config;
  fold_config.seed = derive_seed(config.seed, "fold", f);
  ModelConfig fold_model = model_config;
  fold_model.seed = derive_seed(model_config.seed, "fold", f);

  const auto split = split_train_val(rest, fold_config.seed, config.val_fraction,
                                     config.stratify ? std::optional<Task>(model_config.task)
                                                     : std::nullopt);
  EpochCallback cb;
  if (on_epoch) cb = [&](const EpochRecord& r) { on_epoch(f, r); };
  TrainResult trained = train_model(split.train, split.val, fold_model, fold_config, cb);

  FoldResult out;
  out.fold = f;
  const Task task = model_config.task;
  out.test = score(test, trained.model.predict(test), task);
  std::vector<StoneRecord> seen = split.train;
  seen.insert(seen.end(), split.val.begin(), split.val.end());
  out.calibration = score(seen, trained.model.predict(seen), task);
  out.calibration_set = make_calibration_set(out.calibration);
  out.best_epoch = trained.best_epoch;
  out.best_val_accuracy = trained.best_val_accuracy;
  out.trace = std::move(trained.trace);
  out.aborted = trained.aborted;
  out.model.emplace(std::move(trained.model));
  return out;
}

}  // namespace

CrossValidationResult run_cross_validation(std::span<const StoneRecord> records,
                                           const ModelConfig& model_config,
                                           const TrainConfig& config,
                                           const std::optional<fs::path>& run_dir,
                                           const FoldCallback& on_epoch) {
  validate_train_config(config);
  validate_config(model_config);
  const std::vector<StoneRecord> usable = usable_records(records, model_config);
  const auto folds = kfold_split(usable, config.folds, config.seed);

  CrossValidationResult cv;
  cv.folds.resize(folds.size());
  if (config.deterministic || folds.size() == 1) {
    for (std::size_t f = 0; f < folds.size(); ++f)
      cv.folds[f] = run_fold(usable, folds[f], f, model_config, config, on_epoch);
  } else {
    std::vector<std::exception_ptr> errors(folds.size());
    std::vector<std::thread> workers;
    for (std::size_t f = 0; f < folds.size(); ++f)
      workers.emplace_back([&, f] {
        try {
          cv.folds[f] = run_fold(usable, folds[f], f, model_config, config, on_epoch);
        } catch (...) {
          errors[f] = std::current_exception();
        }
      });
    for (auto& w : workers) w.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  cv.pooled = aggregate_predictions(cv.folds);

  if (run_dir) {
    fs::create_directories(*run_dir);
    for (const auto& f : cv.folds) {
      const fs::path dir = *run_dir / ("fold_" + std::to_string(f.fold));
      fs::create_directories(dir);
      f.model->save(dir / "checkpoint.bin");
      write_val_trace_csv(dir / "val_trace.csv", f.trace);
      write_text(dir / "calibration.json", calibration_set_to_json(f.calibration_set));
      std::vector<PooledRow> rows;
      for (const auto& s : f.calibration) rows.push_back({f.fold, s});
      write_predictions_csv(dir / "train_predictions.csv", rows, model_config.task);
    }
    write_predictions_csv(*run_dir / "predictions.csv", cv.pooled, model_config.task);
  }
  return cv;
}

}  // namespace gemnet
