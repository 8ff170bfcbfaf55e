#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gemnet/calibrate.hpp"
#include "gemnet/core_types.hpp"
#include "gemnet/netprims.hpp"

namespace gemnet {

class Model;

/// correct / total. InvalidInput when empty.
double accuracy(std::span<const ScoredPrediction> scored);

struct CurvePoint {
  double threshold = 0.0;
  double coverage = 0.0;  // fraction accepted
  double accuracy = 0.0;  // among accepted
  bool operator==(const CurvePoint&) const = default;
};

/// Points ordered by strictly decreasing coverage.
using CoverageCurve = std::vector<CurvePoint>;

/// One point per distinct confidence c (ascending), accepting confidence >= c;
/// the first point uses threshold 0 and has coverage 1.
CoverageCurve coverage_curve(std::span<const ScoredPrediction> scored);

/// Coverage grid 1, 1 - 1/n, ..., 1/n.
std::vector<double> coverage_grid(std::size_t n = 100);

/// Step-resamples a curve onto a coverage grid: each grid value takes the
/// point with the smallest coverage that is still >= it. Threshold entries
/// are carried along.
CoverageCurve resample_curve(const CoverageCurve& curve, std::span<const double> grid);

/// Pointwise mean of curves that share one coverage grid (InvalidInput
/// otherwise). Thresholds are averaged too and carry no meaning beyond that.
CoverageCurve aggregate_curves(std::span<const CoverageCurve> curves);

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row = truth, column = prediction
  std::size_t abstained = 0;

  std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts[truth * classes + predicted];
  }
  std::size_t total_accepted() const;
};

/// Predictions with confidence below `threshold` are counted as abstentions.
ConfusionMatrix confusion_matrix(std::span<const ScoredPrediction> scored, std::size_t classes,
                                 double threshold = 0.0);

/// Thresholds may differ per item (each fold has its own profile).
struct OperatingPoint {
  CalibrationMode mode = CalibrationMode::None;
  std::size_t total = 0;
  std::size_t accepted = 0;
  double coverage = 0.0;
  double accuracy = 0.0;  // over accepted; 0 when nothing is accepted
};

OperatingPoint operating_point(std::span<const ScoredPrediction> scored,
                               std::span<const double> thresholds, CalibrationMode mode);

// ---------------------------------------------------------------------------
// Repeat-evaluation consistency

enum class PairOutcome { Consistent, Inconsistent, AbstentionInvolved };
std::string_view to_string(PairOutcome o);

/// Stones with more than two evaluations: pair consecutive evaluations or
/// every pair.
enum class PairingRule { Consecutive, AllPairs };
std::string_view to_string(PairingRule rule);
PairingRule pairing_from_string(std::string_view s);

struct TimedPrediction {
  std::string stone_id;
  std::int64_t evaluation_time = 0;
  Prediction prediction;
  double threshold = 0.0;
};

struct RepeatPair {
  std::string stone_id;
  std::int64_t time_a = 0, time_b = 0;
  std::size_t label_a = 0, label_b = 0;
  double confidence_a = 0.0, confidence_b = 0.0;
  PairOutcome outcome = PairOutcome::Consistent;
};

struct ConsistencyReport {
  std::vector<RepeatPair> pairs;
  /// Accepted predictions per stone, in time order.
  std::map<std::string, std::vector<std::pair<std::int64_t, std::size_t>>> accepted;
  std::size_t consistent = 0, inconsistent = 0, abstention_involved = 0;

  /// (stone_id, time_a, time_b) of inconsistent pairs.
  std::vector<std::tuple<std::string, std::int64_t, std::int64_t>> inconsistent_set() const;
};

/// Groups predictions by stone, orders by time and classifies each pair.
/// Stones with a single evaluation contribute nothing.
ConsistencyReport consistency_report(std::span<const TimedPrediction> preds,
                                     PairingRule rule = PairingRule::Consecutive);
/// Predicts every record with the model and applies one threshold.
ConsistencyReport consistency_report(std::span<const StoneRecord> records, const Model& model,
                                     const CalibrationProfile& profile,
                                     PairingRule rule = PairingRule::Consecutive);

// ---------------------------------------------------------------------------
// Ensemble baseline: frozen per-source classifiers combined by a linear layer
// with softmax over their concatenated probability vectors.

class MetaModel {
 public:
  MetaModel(Task task, std::vector<Source> sources, std::uint64_t seed);
  MetaModel(const MetaModel&) = delete;
  MetaModel& operator=(const MetaModel&) = delete;
  MetaModel(MetaModel&&) = default;
  MetaModel& operator=(MetaModel&&) = default;

  const std::vector<Source>& sources() const { return sources_; }
  nn::ParamStore& params() { return params_; }
  nn::Linear& layer() { return layer_; }

  /// per_source[s][i] = probabilities of source model s on item i.
  void fit(const std::vector<std::vector<Prediction>>& per_source,
           std::span<const std::size_t> labels, std::size_t epochs = 200, double lr = 1e-2);
  /// InvalidInput if the sources do not match the ones the model was built for.
  Prediction combine(std::span<const Source> sources, std::span<const Prediction> per_source) const;

 private:
  Task task_;
  std::vector<Source> sources_;
  nn::ParamStore params_;
  nn::Linear layer_;
};

// ---------------------------------------------------------------------------
// Reports

struct PooledRow {
  std::size_t fold = 0;
  ScoredPrediction scored;
};

void write_predictions_csv(const std::filesystem::path& path, std::span<const PooledRow> rows,
                           Task task);
std::vector<PooledRow> read_predictions_csv(const std::filesystem::path& path, Task task);

void write_curve_csv(const std::filesystem::path& path, const CoverageCurve& curve);
CoverageCurve read_curve_csv(const std::filesystem::path& path);

struct ReportSummary {
  std::array<OperatingPoint, 3> modes;  // None, Mode1, Mode2
  std::vector<CalibrationSet> folds;
  std::array<ConsistencyReport, 3> consistency;
};

/// Reads predictions.csv and fold_*/calibration.json from a run directory and
/// writes report/ (summary, curves, confusion matrices, consistency, SVG
/// plots). MissingArtifact naming the first absent input.
ReportSummary emit_report(const std::filesystem::path& run_dir, Task task,
                          PairingRule rule = PairingRule::Consecutive);

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace gemnet
