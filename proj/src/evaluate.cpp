#include "gemnet/evaluate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "gemnet/error.hpp"
#include "gemnet/model.hpp"
#include "gemnet/seed.hpp"

namespace gemnet {

namespace fs = std::filesystem;

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(std::string_view s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorKind::ParseError,
          "bad number '" + std::string(s) + "'");
  return v;
}

std::int64_t parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorKind::ParseError,
          "bad integer '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::MissingArtifact, "missing artifact: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorKind::IoError, "write failed: " + path.string());
}

std::vector<std::string> class_names(Task task) {
  std::vector<std::string> names;
  for (std::size_t c = 0; c < num_classes(task); ++c)
    names.emplace_back(task == Task::OD ? to_string(static_cast<Origin>(c))
                                        : to_string(static_cast<Treatment>(c)));
  return names;
}

}  // namespace

double accuracy(std::span<const ScoredPrediction> scored) {
  require(!scored.empty(), ErrorKind::InvalidInput, "accuracy of an empty set");
  const auto ok = std::count_if(scored.begin(), scored.end(),
                                [](const ScoredPrediction& s) { return s.correct(); });
  return static_cast<double>(ok) / static_cast<double>(scored.size());
}

CoverageCurve coverage_curve(std::span<const ScoredPrediction> scored) {
  CoverageCurve curve;
  const std::size_t n = scored.size();
  if (n == 0) return curve;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scored[a].confidence() < scored[b].confidence();
  });
  std::vector<std::size_t> suffix(n + 1, 0);
  for (std::size_t i = n; i-- > 0;) suffix[i] = suffix[i + 1] + (scored[order[i]].correct() ? 1 : 0);
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0 && scored[order[k]].confidence() == scored[order[k - 1]].confidence()) continue;
    const double kept = static_cast<double>(n - k);
    curve.push_back({k == 0 ? 0.0 : scored[order[k]].confidence(), kept / static_cast<double>(n),
                     static_cast<double>(suffix[k]) / kept});
  }
  return curve;
}

std::vector<double> coverage_grid(std::size_t n) {
  require(n >= 1, ErrorKind::InvalidInput, "coverage grid needs at least one point");
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i)
    grid[i] = static_cast<double>(n - i) / static_cast<double>(n);
  return grid;
}

CoverageCurve resample_curve(const CoverageCurve& curve, std::span<const double> grid) {
  require(!curve.empty(), ErrorKind::InvalidInput, "cannot resample an empty curve");
  CoverageCurve out;
  out.reserve(grid.size());
  for (double g : grid) {
    // Curve coverage decreases along the vector; take the last point >= g.
    const CurvePoint* best = &curve.front();
    for (const auto& p : curve) {
      if (p.coverage >= g)
        best = &p;
      else
        break;
    }
    out.push_back({best->threshold, g, best->accuracy});
  }
  return out;
}

CoverageCurve aggregate_curves(std::span<const CoverageCurve> curves) {
  require(!curves.empty(), ErrorKind::InvalidInput, "no curves to aggregate");
  const auto& first = curves.front();
  for (const auto& c : curves) {
    require(c.size() == first.size(), ErrorKind::InvalidInput, "curves use different grids");
    for (std::size_t i = 0; i < c.size(); ++i)
      require(c[i].coverage == first[i].coverage, ErrorKind::InvalidInput,
              "curves use different grids");
  }
  CoverageCurve mean(first.size());
  const double n = static_cast<double>(curves.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    double acc = 0.0, thr = 0.0;
    for (const auto& c : curves) {
      acc += c[i].accuracy;
      thr += c[i].threshold;
    }
    mean[i] = {thr / n, first[i].coverage, acc / n};
  }
  return mean;
}

std::size_t ConfusionMatrix::total_accepted() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

ConfusionMatrix confusion_matrix(std::span<const ScoredPrediction> scored, std::size_t classes,
                                 double threshold) {
  ConfusionMatrix m;
  m.classes = classes;
  m.counts.assign(classes * classes, 0);
  for (const auto& s : scored) {
    require(s.truth < classes && s.prediction.label < classes, ErrorKind::InvalidInput,
            "label out of range for confusion matrix");
    if (!accepts(s.prediction, threshold)) {
      ++m.abstained;
      continue;
    }
    ++m.counts[s.truth * classes + s.prediction.label];
  }
  return m;
}

OperatingPoint operating_point(std::span<const ScoredPrediction> scored,
                               std::span<const double> thresholds, CalibrationMode mode) {
  require(scored.size() == thresholds.size(), ErrorKind::InvalidInput,
          "one threshold per prediction required");
  OperatingPoint op;
  op.mode = mode;
  op.total = scored.size();
  std::size_t ok = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (!accepts(scored[i].prediction, thresholds[i])) continue;
    ++op.accepted;
    if (scored[i].correct()) ++ok;
  }
  op.coverage = op.total ? static_cast<double>(op.accepted) / static_cast<double>(op.total) : 0.0;
  op.accuracy = op.accepted ? static_cast<double>(ok) / static_cast<double>(op.accepted) : 0.0;
  return op;
}

// ---------------------------------------------------------------------------
// Consistency

std::string_view to_string(PairOutcome o) {
  switch (o) {
    case PairOutcome::Consistent: return "consistent";
    case PairOutcome::Inconsistent: return "inconsistent";
    case PairOutcome::AbstentionInvolved: return "abstention";
  }
  return "?";
}

std::string_view to_string(PairingRule rule) {
  return rule == PairingRule::Consecutive ? "consecutive" : "all-pairs";
}

PairingRule pairing_from_string(std::string_view s) {
  if (s == "consecutive") return PairingRule::Consecutive;
  if (s == "all-pairs") return PairingRule::AllPairs;
  fail(ErrorKind::InvalidConfig, "unknown pairing rule '" + std::string(s) + "'");
}

std::vector<std::tuple<std::string, std::int64_t, std::int64_t>>
ConsistencyReport::inconsistent_set() const {
  std::vector<std::tuple<std::string, std::int64_t, std::int64_t>> out;
  for (const auto& p : pairs)
    if (p.outcome == PairOutcome::Inconsistent) out.emplace_back(p.stone_id, p.time_a, p.time_b);
  std::sort(out.begin(), out.end());
  return out;
}

ConsistencyReport consistency_report(std::span<const TimedPrediction> preds, PairingRule rule) {
  std::map<std::string, std::vector<const TimedPrediction*>> by_stone;
  for (const auto& p : preds) by_stone[p.stone_id].push_back(&p);
  ConsistencyReport rep;
  for (auto& [id, list] : by_stone) {
    std::stable_sort(list.begin(), list.end(), [](const auto* a, const auto* b) {
      return a->evaluation_time < b->evaluation_time;
    });
    if (list.size() < 2) continue;
    auto& acc = rep.accepted[id];
    for (const auto* p : list)
      if (accepts(p->prediction, p->threshold)) acc.emplace_back(p->evaluation_time, p->prediction.label);
    auto classify = [&](const TimedPrediction& a, const TimedPrediction& b) {
      RepeatPair pair{id,
                      a.evaluation_time,
                      b.evaluation_time,
                      a.prediction.label,
                      b.prediction.label,
                      a.prediction.confidence,
                      b.prediction.confidence,
                      PairOutcome::Consistent};
      if (!accepts(a.prediction, a.threshold) || !accepts(b.prediction, b.threshold)) {
        pair.outcome = PairOutcome::AbstentionInvolved;
        ++rep.abstention_involved;
      } else if (a.prediction.label != b.prediction.label) {
        pair.outcome = PairOutcome::Inconsistent;
        ++rep.inconsistent;
      } else {
        ++rep.consistent;
      }
      rep.pairs.push_back(std::move(pair));
    };
    for (std::size_t i = 0; i + 1 < list.size(); ++i) {
      if (rule == PairingRule::Consecutive) {
        classify(*list[i], *list[i + 1]);
      } else {
        for (std::size_t j = i + 1; j < list.size(); ++j) classify(*list[i], *list[j]);
      }
    }
  }
  return rep;
}

ConsistencyReport consistency_report(std::span<const StoneRecord> records, const Model& model,
                                     const CalibrationProfile& profile, PairingRule rule) {
  const auto preds = model.predict(records);
  std::vector<TimedPrediction> timed;
  timed.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    timed.push_back({records[i].stone_id, records[i].evaluation_time, preds[i], profile.threshold});
  return consistency_report(timed, rule);
}

// ---------------------------------------------------------------------------
// Ensemble meta-model

MetaModel::MetaModel(Task task, std::vector<Source> sources, std::uint64_t seed)
    : task_(task), sources_(std::move(sources)) {
  require(!sources_.empty(), ErrorKind::InvalidConfig, "ensemble needs at least one source");
  std::mt19937_64 rng(derive_seed(seed, "meta-init"));
  const std::size_t c = num_classes(task_);
  layer_ = nn::Linear(params_, "meta", c * sources_.size(), c, rng);
}

void MetaModel::fit(const std::vector<std::vector<Prediction>>& per_source,
                    std::span<const std::size_t> labels, std::size_t epochs, double lr) {
  require(per_source.size() == sources_.size(), ErrorKind::InvalidInput,
          "one prediction list per source required");
  const std::size_t n = labels.size(), c = num_classes(task_), w = c * sources_.size();
  require(n > 0, ErrorKind::InvalidInput, "no meta-training items");
  nn::Tensor x({n, w});
  for (std::size_t s = 0; s < sources_.size(); ++s) {
    require(per_source[s].size() == n, ErrorKind::InvalidInput, "prediction count mismatch");
    for (std::size_t i = 0; i < n; ++i)
      std::copy(per_source[s][i].probs.begin(), per_source[s][i].probs.end(),
                x.ptr() + i * w + s * c);
  }
  for (std::size_t e = 0; e < epochs; ++e) {
    const nn::Tensor logits = layer_.forward(x);
    nn::Tensor d({n, c});
    for (std::size_t i = 0; i < n; ++i) {
      const auto lg = nn::softmax_cross_entropy(
          std::span<const double>(logits.ptr() + i * c, c), labels[i]);
      for (std::size_t k = 0; k < c; ++k) d.at2(i, k) = lg.grad[k] / static_cast<double>(n);
    }
    layer_.backward(d, x, false);
    nn::optimizer_step(params_, lr);
  }
}

Prediction MetaModel::combine(std::span<const Source> sources,
                              std::span<const Prediction> per_source) const {
  require(sources.size() == sources_.size() &&
              std::equal(sources.begin(), sources.end(), sources_.begin()),
          ErrorKind::InvalidInput, "ensemble source set does not match the meta-model");
  require(per_source.size() == sources_.size(), ErrorKind::InvalidInput,
          "one prediction per source required");
  const std::size_t c = num_classes(task_);
  nn::Tensor x({1, c * sources_.size()});
  for (std::size_t s = 0; s < per_source.size(); ++s) {
    require(per_source[s].probs.size() == c, ErrorKind::InvalidInput, "class count mismatch");
    std::copy(per_source[s].probs.begin(), per_source[s].probs.end(), x.ptr() + s * c);
  }
  const nn::Tensor logits = layer_.forward(x);
  return Prediction::from_probs(nn::softmax(logits.data), task_);
}

// ---------------------------------------------------------------------------
// CSV artifacts

void write_predictions_csv(const fs::path& path, std::span<const PooledRow> rows, Task task) {
  std::string out = "fold,stone_id,evaluation_time,truth,predicted,confidence";
  for (const auto& name : class_names(task)) out += ",p_" + name;
  out += '\n';
  for (const auto& r : rows) {
    const auto& s = r.scored;
    require(s.stone_id.find_first_of(",\n\r\"") == std::string::npos, ErrorKind::InvalidInput,
            "stone id not representable in CSV: " + s.stone_id);
    out += std::to_string(r.fold) + ',' + s.stone_id + ',' + std::to_string(s.evaluation_time) +
           ',' + std::to_string(s.truth) + ',' + std::to_string(s.prediction.label) + ',' +
           format_double(s.prediction.confidence);
    for (double p : s.prediction.probs) out += ',' + format_double(p);
    out += '\n';
  }
  write_file(path, out);
}

std::vector<PooledRow> read_predictions_csv(const fs::path& path, Task task) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  const std::size_t c = num_classes(task);
  require(split_csv(line).size() == 6 + c, ErrorKind::ParseError,
          path.string() + ": header does not match the task");
  std::vector<PooledRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    require(f.size() == 6 + c, ErrorKind::ParseError,
            path.string() + ":" + std::to_string(lineno) + ": wrong field count");
    PooledRow r;
    r.fold = static_cast<std::size_t>(parse_int(f[0]));
    r.scored.stone_id = std::string(f[1]);
    r.scored.evaluation_time = parse_int(f[2]);
    r.scored.truth = static_cast<std::size_t>(parse_int(f[3]));
    std::vector<double> probs;
    for (std::size_t k = 0; k < c; ++k) probs.push_back(parse_double(f[6 + k]));
    r.scored.prediction = Prediction::from_probs(std::move(probs), task);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_curve_csv(const fs::path& path, const CoverageCurve& curve) {
  std::string out = "threshold,coverage,accuracy\n";
  for (const auto& p : curve)
    out += format_double(p.threshold) + ',' + format_double(p.coverage) + ',' +
           format_double(p.accuracy) + '\n';
  write_file(path, out);
}

CoverageCurve read_curve_csv(const fs::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  CoverageCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    require(f.size() == 3, ErrorKind::ParseError, path.string() + ": wrong field count");
    curve.push_back({parse_double(f[0]), parse_double(f[1]), parse_double(f[2])});
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Plots (presentation only)

namespace {

std::string fixed(double v, int digits = 2) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, digits);
  return std::string(buf, res.ptr);
}

std::string coverage_svg(const CoverageCurve& mean, const CoverageCurve& pooled,
                         const std::array<OperatingPoint, 3>& modes) {
  const double w = 480, h = 320, l = 60, r = 20, t = 20, b = 50;
  double ymin = 1.0;
  for (const auto& p : mean) ymin = std::min(ymin, p.accuracy);
  for (const auto& p : pooled) ymin = std::min(ymin, p.accuracy);
  ymin = std::floor(ymin * 20.0) / 20.0;
  if (ymin >= 1.0) ymin = 0.95;
  auto px = [&](double cov) { return l + (1.0 - cov) * (w - l - r); };
  auto py = [&](double acc) { return t + (1.0 - (acc - ymin) / (1.0 - ymin)) * (h - t - b); };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" "
                  "font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"480\" height=\"320\" fill=\"white\"/>\n";
  s += "<line x1=\"" + fixed(l) + "\" y1=\"" + fixed(h - b) + "\" x2=\"" + fixed(w - r) +
       "\" y2=\"" + fixed(h - b) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fixed(l) + "\" y1=\"" + fixed(t) + "\" x2=\"" + fixed(l) + "\" y2=\"" +
       fixed(h - b) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double cov = 1.0 - 0.25 * i;
    s += "<text x=\"" + fixed(px(cov)) + "\" y=\"" + fixed(h - b + 15) +
         "\" text-anchor=\"middle\">" + fixed(cov * 100.0, 0) + "%</text>\n";
    const double acc = ymin + (1.0 - ymin) * 0.25 * i;
    s += "<text x=\"" + fixed(l - 5) + "\" y=\"" + fixed(py(acc) + 4) +
         "\" text-anchor=\"end\">" + fixed(acc * 100.0, 1) + "%</text>\n";
  }
  s += "<text x=\"" + fixed((l + w - r) / 2) + "\" y=\"" + fixed(h - 10) +
       "\" text-anchor=\"middle\">stones above threshold</text>\n";
  auto polyline = [&](const CoverageCurve& c, const char* colour) {
    std::string pts;
    for (const auto& p : c) pts += fixed(px(p.coverage)) + "," + fixed(py(p.accuracy)) + " ";
    return "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" points=\"" + pts +
           "\"/>\n";
  };
  s += polyline(pooled, "#999999");
  s += polyline(mean, "#1f5fa8");
  const char* colours[3] = {"#333333", "#d08000", "#b02020"};
  for (std::size_t m = 0; m < 3; ++m) {
    if (modes[m].accepted == 0) continue;
    s += "<circle cx=\"" + fixed(px(modes[m].coverage)) + "\" cy=\"" +
         fixed(py(modes[m].accuracy)) + "\" r=\"4\" fill=\"" + colours[m] + "\"/>\n";
    s += "<text x=\"" + fixed(px(modes[m].coverage) + 6) + "\" y=\"" +
         fixed(py(modes[m].accuracy) - 6) + "\">" + std::string(to_string(modes[m].mode)) +
         "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::string confusion_svg(const ConfusionMatrix& m, const std::vector<std::string>& names) {
  const double cell = 60, l = 100, t = 30;
  const double size = l + cell * static_cast<double>(m.classes) + 20;
  std::size_t peak = 1;
  for (auto v : m.counts) peak = std::max(peak, v);
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(size, 0) +
                  "\" height=\"" + fixed(size, 0) +
                  "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + fixed(size, 0) + "\" height=\"" + fixed(size, 0) +
       "\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < m.classes; ++i) {
    s += "<text x=\"" + fixed(l - 5) + "\" y=\"" + fixed(t + cell * (i + 0.5) + 4) +
         "\" text-anchor=\"end\">" + names[i] + "</text>\n";
    s += "<text x=\"" + fixed(l + cell * (i + 0.5)) + "\" y=\"" + fixed(t - 8) +
         "\" text-anchor=\"middle\">" + names[i] + "</text>\n";
    for (std::size_t j = 0; j < m.classes; ++j) {
      const auto v = m.at(i, j);
      const int shade = 255 - static_cast<int>(200.0 * static_cast<double>(v) / static_cast<double>(peak));
      const std::string fill = "rgb(" + std::to_string(shade) + "," + std::to_string(shade) + ",255)";
      s += "<rect x=\"" + fixed(l + cell * j) + "\" y=\"" + fixed(t + cell * i) + "\" width=\"" +
           fixed(cell) + "\" height=\"" + fixed(cell) + "\" fill=\"" + fill +
           "\" stroke=\"#666666\"/>\n";
      s += "<text x=\"" + fixed(l + cell * (j + 0.5)) + "\" y=\"" + fixed(t + cell * (i + 0.5) + 4) +
           "\" text-anchor=\"middle\">" + std::to_string(v) + "</text>\n";
    }
  }
  s += "</svg>\n";
  return s;
}

std::string consistency_svg(const ConsistencyReport& rep) {
  const std::size_t rows = std::max<std::size_t>(rep.accepted.size(), 1);
  const double row_h = 8, l = 20, r = 20, t = 20, w = 480;
  const double h = t + row_h * static_cast<double>(rows) + 20;
  std::int64_t tmin = std::numeric_limits<std::int64_t>::max(), tmax = std::numeric_limits<std::int64_t>::min();
  for (const auto& p : rep.pairs) {
    tmin = std::min({tmin, p.time_a, p.time_b});
    tmax = std::max({tmax, p.time_a, p.time_b});
  }
  if (tmin > tmax) tmin = tmax = 0;
  const double span = std::max<double>(1.0, static_cast<double>(tmax - tmin));
  auto px = [&](std::int64_t d) { return l + (static_cast<double>(d - tmin) / span) * (w - l - r); };
  const char* colours[4] = {"#1f5fa8", "#d08000", "#2a8a2a", "#b02020"};
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"" + fixed(h, 0) +
                  "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"480\" height=\"" + fixed(h, 0) + "\" fill=\"white\"/>\n";
  std::map<std::string, std::size_t> row_of;
  for (const auto& [id, _] : rep.accepted) row_of.emplace(id, row_of.size());
  for (const auto& p : rep.pairs) {
    const double y = t + row_h * (static_cast<double>(row_of[p.stone_id]) + 0.5);
    const char* stroke = p.outcome == PairOutcome::Inconsistent ? "#b02020" : "#bbbbbb";
    s += "<line x1=\"" + fixed(px(p.time_a)) + "\" y1=\"" + fixed(y) + "\" x2=\"" +
         fixed(px(p.time_b)) + "\" y2=\"" + fixed(y) + "\" stroke=\"" + stroke + "\"/>\n";
  }
  for (const auto& [id, list] : rep.accepted) {
    const double y = t + row_h * (static_cast<double>(row_of[id]) + 0.5);
    for (const auto& [time, label] : list)
      s += "<circle cx=\"" + fixed(px(time)) + "\" cy=\"" + fixed(y) + "\" r=\"2.5\" fill=\"" +
           colours[label % 4] + "\"/>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace

ReportSummary emit_report(const fs::path& run_dir, Task task, PairingRule rule) {
  const auto rows = read_predictions_csv(run_dir / "predictions.csv", task);
  require(!rows.empty(), ErrorKind::MissingArtifact,
          "missing artifact: no predictions in " + (run_dir / "predictions.csv").string());
  std::size_t folds = 0;
  for (const auto& r : rows) folds = std::max(folds, r.fold + 1);

  ReportSummary summary;
  for (std::size_t f = 0; f < folds; ++f)
    summary.folds.push_back(calibration_set_from_json(
        read_file(run_dir / ("fold_" + std::to_string(f)) / "calibration.json")));

  std::vector<ScoredPrediction> scored;
  scored.reserve(rows.size());
  for (const auto& r : rows) scored.push_back(r.scored);

  const fs::path out = run_dir / "report";
  const auto names = class_names(task);
  const std::size_t c = num_classes(task);
  const std::array<CalibrationMode, 3> modes{CalibrationMode::None, CalibrationMode::Mode1,
                                             CalibrationMode::Mode2};

  std::string table = "mode,epsilon,coverage,accuracy,accepted,total,consistent,inconsistent,"
                      "abstention_involved\n";
  for (std::size_t m = 0; m < 3; ++m) {
    std::vector<double> thresholds;
    thresholds.reserve(rows.size());
    for (const auto& r : rows) thresholds.push_back(summary.folds[r.fold].threshold(modes[m]));
    summary.modes[m] = operating_point(scored, thresholds, modes[m]);

    std::vector<TimedPrediction> timed;
    timed.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      timed.push_back({rows[i].scored.stone_id, rows[i].scored.evaluation_time,
                       rows[i].scored.prediction, thresholds[i]});
    summary.consistency[m] = consistency_report(timed, rule);
    const auto& rep = summary.consistency[m];

    ConfusionMatrix cm;
    cm.classes = c;
    cm.counts.assign(c * c, 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (accepts(scored[i].prediction, thresholds[i]))
        ++cm.counts[scored[i].truth * c + scored[i].prediction.label];
      else
        ++cm.abstained;
    }
    const std::string mode_name(to_string(modes[m]));
    std::string cm_csv = "truth";
    for (const auto& n : names) cm_csv += "," + n;
    cm_csv += "\n";
    for (std::size_t i = 0; i < c; ++i) {
      cm_csv += names[i];
      for (std::size_t j = 0; j < c; ++j) cm_csv += "," + std::to_string(cm.at(i, j));
      cm_csv += "\n";
    }
    cm_csv += "abstained," + std::to_string(cm.abstained) + "\n";
    write_file(out / ("confusion_" + mode_name + ".csv"), cm_csv);
    write_file(out / ("confusion_" + mode_name + ".svg"), confusion_svg(cm, names));

    std::string pairs_csv = "stone_id,time_a,time_b,label_a,label_b,confidence_a,confidence_b,outcome\n";
    for (const auto& p : rep.pairs)
      pairs_csv += p.stone_id + "," + std::to_string(p.time_a) + "," + std::to_string(p.time_b) +
                   "," + names[p.label_a] + "," + names[p.label_b] + "," +
                   format_double(p.confidence_a) + "," + format_double(p.confidence_b) + "," +
                   std::string(to_string(p.outcome)) + "\n";
    write_file(out / ("consistency_" + mode_name + ".csv"), pairs_csv);
    write_file(out / ("consistency_" + mode_name + ".svg"), consistency_svg(rep));

    const auto eps = mode_epsilon(modes[m]);
    const auto& op = summary.modes[m];
    table += mode_name + "," + (eps ? format_double(*eps) : std::string("")) + "," +
             format_double(op.coverage) + "," + format_double(op.accuracy) + "," +
             std::to_string(op.accepted) + "," + std::to_string(op.total) + "," +
             std::to_string(rep.consistent) + "," + std::to_string(rep.inconsistent) + "," +
             std::to_string(rep.abstention_involved) + "\n";
  }
  write_file(out / "summary.csv", table);

  const auto grid = coverage_grid();
  std::vector<CoverageCurve> per_fold;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<ScoredPrediction> fold_scored;
    for (const auto& r : rows)
      if (r.fold == f) fold_scored.push_back(r.scored);
    if (!fold_scored.empty()) per_fold.push_back(resample_curve(coverage_curve(fold_scored), grid));
  }
  const CoverageCurve mean = aggregate_curves(per_fold);
  const CoverageCurve pooled = coverage_curve(scored);
  write_curve_csv(out / "coverage_mean.csv", mean);
  write_curve_csv(out / "coverage_pooled.csv", pooled);
  write_file(out / "coverage.svg", coverage_svg(mean, pooled, summary.modes));
  return summary;
}

}  // namespace gemnet
