#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gemnet/calibrate.hpp"
#include "gemnet/core_types.hpp"
#include "gemnet/evaluate.hpp"
#include "gemnet/model.hpp"
#include "gemnet/netprims.hpp"

namespace gemnet {

enum class MaskGranularity { PerBatch, PerSample };
std::string_view to_string(MaskGranularity g);
MaskGranularity mask_granularity_from_string(std::string_view s);

struct TrainConfig {
  std::size_t epochs = 250;
  std::size_t batch = 16;
  double lr = 1e-4;
  std::size_t patience = 10;  // epochs without improvement before a decay
  double decay = 10.0;        // lr is divided by this
  std::size_t checkpoint_every = 5;
  double mask_probability = 0.7;
  double val_fraction = 0.2;
  std::size_t folds = 5;
  std::uint64_t seed = 1;
  MaskGranularity masking = MaskGranularity::PerBatch;
  bool stratify = false;  // stratify the validation split by label
  /// Before each validation pass, set the head's BatchNorm statistics to the
  /// exact moments over the unmasked training set instead of the running
  /// averages.
  bool refresh_batchnorm = true;
  /// Sequential folds; otherwise folds run on separate threads.
  bool deterministic = true;
  nn::OptimizerConfig optimizer;
};

/// InvalidConfig on out-of-range fields.
void validate_train_config(const TrainConfig& config);
std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

struct TrainValSplit {
  std::vector<StoneRecord> train, val;
};

/// Stone-level seeded shuffle, then round(val_fraction * stones) stones go to
/// validation (at least one, never all). With `stratify_by`, stones are
/// grouped by the label of their first record and each group is split on its
/// own. InvalidInput with fewer than 5 records or 2 stones.
TrainValSplit split_train_val(std::span<const StoneRecord> records, std::uint64_t seed,
                              double val_fraction = 0.2,
                              std::optional<Task> stratify_by = std::nullopt);

struct KFold {
  std::vector<std::string> stones;    // stone ids in this test fold
  std::vector<std::size_t> records;   // indices into the input, ascending
};

/// Stone-level partition into k folds whose sizes differ by at most one (the
/// first stones % k folds are larger). InvalidInput if k < 2 or there are
/// fewer stones than folds.
std::vector<KFold> kfold_split(std::span<const StoneRecord> records, std::size_t k,
                               std::uint64_t seed);

/// With probability p one source, uniform over `allowed`, is masked.
MaskState draw_mask(std::span<const Source> allowed, double p, std::mt19937_64& rng);
/// One mask per sample: shared across the batch or drawn per sample.
std::vector<MaskState> mask_batch(std::size_t batch_size, std::span<const Source> allowed,
                                  double p, MaskGranularity granularity, std::mt19937_64& rng);

/// Multiplicative decay on plateau of a maximised metric. Improvement means
/// strictly greater than the best so far; after more than `patience`
/// consecutive epochs without one, lr is divided by `factor` and the count
/// restarts.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, std::size_t patience, double factor);
  /// Feeds one epoch's metric and returns the lr for the next epoch.
  double step(double metric);
  double lr() const { return lr_; }
  std::size_t bad_epochs() const { return bad_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double best_ = -1.0;
  bool seen_ = false;
  std::size_t bad_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean training cross-entropy
  double val_accuracy = 0.0;
  double lr = 0.0;        // lr used during the epoch
  bool snapshot = false;
};

/// Index of the best (epoch, accuracy) candidate: maximal accuracy, earliest on
/// ties. InvalidInput when empty.
std::size_t select_best_checkpoint(std::span<const std::pair<std::size_t, double>> candidates);

struct TrainResult {
  explicit TrainResult(Model m) : model(std::move(m)) {}

  Model model;  // weights of the selected snapshot
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<EpochRecord> trace;
  /// Set when training stopped on a NumericalError; the model then holds the
  /// best snapshot taken before it.
  bool aborted = false;
  std::string abort_reason;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains from model_config.seed with masking, shuffling and reference choice
/// seeded from config.seed. Snapshots every checkpoint_every epochs and at the
/// final epoch; returns the best one. Rethrows a NumericalError raised before
/// the first snapshot.
TrainResult train_model(std::span<const StoneRecord> train, std::span<const StoneRecord> val,
                        const ModelConfig& model_config, const TrainConfig& config,
                        const EpochCallback& on_epoch = {});

/// Records usable for a task: labelled and carrying an allowed source.
std::vector<StoneRecord> usable_records(std::span<const StoneRecord> records,
                                        const ModelConfig& config);

std::vector<ScoredPrediction> score(std::span<const StoneRecord> records,
                                    std::span<const Prediction> preds, Task task);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<ScoredPrediction> test;
  /// Predictions of the selected model on its own train and val records.
  std::vector<ScoredPrediction> calibration;
  CalibrationSet calibration_set;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<EpochRecord> trace;
  bool aborted = false;
  std::optional<Model> model;
};

/// Concatenation in fold order. InvalidInput if a stone appears in two folds
/// or an evaluation appears twice.
std::vector<PooledRow> aggregate_predictions(std::span<const FoldResult> folds);

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  std::vector<PooledRow> pooled;
};

using FoldCallback = std::function<void(std::size_t fold, const EpochRecord&)>;

/// k-fold cross-validation over usable_records(records). Fold f derives its
/// seed as derive_seed(config.seed, "fold", f); the model of fold f is
/// initialised from derive_seed(model_config.seed, "fold", f). When run_dir
/// is given, writes fold_<f>/{checkpoint.bin, val_trace.csv,
/// calibration.json, train_predictions.csv} and predictions.csv.
CrossValidationResult run_cross_validation(std::span<const StoneRecord> records,
                                           const ModelConfig& model_config,
                                           const TrainConfig& config,
                                           const std::optional<std::filesystem::path>& run_dir,
                                           const FoldCallback& on_epoch = {});

void write_val_trace_csv(const std::filesystem::path& path, std::span<const EpochRecord> trace);

}  // namespace gemnet
