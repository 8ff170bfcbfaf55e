#include "gemnet/core_types.hpp"

#include <algorithm>
#include <cmath>

#include "gemnet/error.hpp"

namespace gemnet {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::RejectedMeasurement: return "RejectedMeasurement";
    case ErrorKind::MissingElement: return "MissingElement";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::DuplicateRecord: return "DuplicateRecord";
    case ErrorKind::GenerationFailed: return "GenerationFailed";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::InvalidBatch: return "InvalidBatch";
    case ErrorKind::NumericalError: return "NumericalError";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::NoUsableData: return "NoUsableData";
    case ErrorKind::MissingSourceStatistics: return "MissingSourceStatistics";
    case ErrorKind::CalibrationInfeasible: return "CalibrationInfeasible";
    case ErrorKind::MissingArtifact: return "MissingArtifact";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::Kashmir: return "Kashmir";
    case Origin::Burma: return "Burma";
    case Origin::SriLanka: return "SriLanka";
    case Origin::Madagascar: return "Madagascar";
  }
  return "?";
}

std::string_view to_string(Treatment t) {
  return t == Treatment::Treated ? "Treated" : "NotTreated";
}

std::string_view to_string(Source s) {
  switch (s) {
    case Source::UV: return "UV";
    case Source::FTIR: return "FTIR";
    case Source::XRF: return "XRF";
    case Source::ICPMS: return "ICPMS";
  }
  return "?";
}

std::string_view to_string(Task t) { return t == Task::OD ? "od" : "td"; }

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

Origin origin_from_string(std::string_view s) {
  const auto l = lower(s);
  if (l == "kashmir") return Origin::Kashmir;
  if (l == "burma" || l == "myanmar") return Origin::Burma;
  if (l == "srilanka" || l == "sri lanka") return Origin::SriLanka;
  if (l == "madagascar") return Origin::Madagascar;
  fail(ErrorKind::InvalidInput, "unknown origin '" + std::string(s) + "'");
}

Treatment treatment_from_string(std::string_view s) {
  const auto l = lower(s);
  if (l == "treated") return Treatment::Treated;
  if (l == "nottreated" || l == "not_treated" || l == "non-treated") return Treatment::NotTreated;
  fail(ErrorKind::InvalidInput, "unknown treatment '" + std::string(s) + "'");
}

Source source_from_string(std::string_view s) {
  const auto l = lower(s);
  if (l == "uv") return Source::UV;
  if (l == "ftir") return Source::FTIR;
  if (l == "xrf") return Source::XRF;
  if (l == "icpms" || l == "icp-ms") return Source::ICPMS;
  fail(ErrorKind::InvalidInput, "unknown source '" + std::string(s) + "'");
}

Task task_from_string(std::string_view s) {
  const auto l = lower(s);
  if (l == "od") return Task::OD;
  if (l == "td") return Task::TD;
  fail(ErrorKind::InvalidInput, "unknown task '" + std::string(s) + "'");
}

std::size_t num_classes(Task task) { return task == Task::OD ? kNumOrigins : kNumTreatments; }

bool source_allowed_for_task(Task task, Source source) {
  if (task == Task::TD) return source == Source::UV || source == Source::FTIR;
  return true;
}

const std::array<std::string_view, kXrfLength>& xrf_manifest() {
  static const std::array<std::string_view, kXrfLength> names = {
      "Al2O3", "TiO2",  "Cr2O3", "V2O5",  "Fe2O3", "Ga2O3", "PbO",   "WO3",   "Pt",
      "SiO2",  "CaO",   "K2O",   "MgO",   "MnO",   "NiO",   "CuO",   "ZnO",   "ZrO2",
      "SnO2",  "Nb2O5", "Ta2O5", "HfO2",  "Y2O3",  "Sc2O3", "Cl",    "SO3"};
  return names;
}

const std::array<std::string_view, kIcpmsLength>& icpms_manifest() {
  static const std::array<std::string_view, kIcpmsLength> names = {
      "9Be", "25Mg", "27Al", "45Sc",  "49Ti",  "51V",   "53Cr",  "57Fe",
      "62Ni", "71Ga", "90Zr", "118Sn", "140Ce", "146Nd", "176Hf", "181Ta"};
  return names;
}

UvSpectrum::UvSpectrum(std::vector<double> values) : values_(std::move(values)) {
  require(values_.size() == kUvRows * kUvLength, ErrorKind::ShapeError,
          "UV spectrum must hold 2x1201 values, got " + std::to_string(values_.size()));
  for (double v : values_)
    require(std::isfinite(v) && v >= 0.0, ErrorKind::InvalidInput,
            "UV absorbance must be finite and non-negative");
}

FtirSpectrum::FtirSpectrum(std::vector<double> values, std::vector<std::uint8_t> coverage)
    : values_(std::move(values)), coverage_(std::move(coverage)) {
  require(values_.size() == kFtirLength && coverage_.size() == kFtirLength, ErrorKind::ShapeError,
          "FTIR spectrum must hold 6801 values and coverage flags");
  for (std::size_t i = 0; i < kFtirLength; ++i) {
    require(std::isfinite(values_[i]), ErrorKind::InvalidInput, "FTIR value not finite");
    require(coverage_[i] <= 1, ErrorKind::InvalidInput, "coverage flags must be 0 or 1");
    require(coverage_[i] || values_[i] == 0.0, ErrorKind::InvalidInput,
            "unmeasured FTIR positions must be zero");
  }
}

FtirSpectrum FtirSpectrum::fully_covered(std::vector<double> values) {
  return FtirSpectrum(std::move(values), std::vector<std::uint8_t>(kFtirLength, 1));
}

XrfComposition::XrfComposition(std::array<double, kXrfLength> ppm) : ppm_(ppm) {
  for (double v : ppm_)
    require(std::isfinite(v) && v >= 0.0, ErrorKind::InvalidInput,
            "XRF concentrations must be finite and non-negative");
}

IcpmsComposition::IcpmsComposition(std::array<double, kIcpmsLength> ppm) : ppm_(ppm) {
  for (double v : ppm_)
    require(std::isfinite(v) && v >= 0.0, ErrorKind::InvalidInput,
            "ICP-MS concentrations must be finite and non-negative");
}

bool StoneRecord::has(Source s) const {
  switch (s) {
    case Source::UV: return uv.has_value();
    case Source::FTIR: return ftir.has_value();
    case Source::XRF: return xrf.has_value();
    case Source::ICPMS: return icpms.has_value();
  }
  return false;
}

std::size_t StoneRecord::source_count() const {
  return static_cast<std::size_t>(std::count_if(kAllSources.begin(), kAllSources.end(),
                                                [&](Source s) { return has(s); }));
}

std::optional<std::size_t> StoneRecord::label(Task task) const {
  if (task == Task::OD) {
    if (origin) return static_cast<std::size_t>(*origin);
  } else if (treatment) {
    return static_cast<std::size_t>(*treatment);
  }
  return std::nullopt;
}

void validate_record(const StoneRecord& record) {
  require(!record.stone_id.empty(), ErrorKind::InvalidInput, "stone_id must be non-empty");
  require(record.source_count() > 0, ErrorKind::InvalidInput,
          "stone '" + record.stone_id + "' has no measurements");
}

std::size_t argmax_label(std::span<const double> probs) {
  require(!probs.empty(), ErrorKind::InvalidInput, "argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    require(std::isfinite(probs[i]), ErrorKind::InvalidInput, "argmax of non-finite value");
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

Prediction Prediction::from_probs(std::vector<double> probs, Task task) {
  require(probs.size() == num_classes(task), ErrorKind::ShapeError,
          "probability vector length does not match task");
  double sum = 0.0;
  for (double p : probs) {
    require(std::isfinite(p) && p >= 0.0 && p <= 1.0, ErrorKind::InvalidInput,
            "probabilities must lie in [0,1]");
    sum += p;
  }
  require(std::abs(sum - 1.0) <= 1e-6, ErrorKind::InvalidInput, "probabilities must sum to 1");
  Prediction p;
  p.label = argmax_label(probs);
  p.confidence = probs[p.label];
  p.probs = std::move(probs);
  p.task = task;
  return p;
}

std::string_view to_string(CalibrationMode m) {
  switch (m) {
    case CalibrationMode::None: return "none";
    case CalibrationMode::Mode1: return "mode1";
    case CalibrationMode::Mode2: return "mode2";
  }
  return "?";
}

CalibrationMode calibration_mode_from_string(std::string_view s) {
  const auto l = lower(s);
  if (l == "none") return CalibrationMode::None;
  if (l == "mode1" || l == "mode 1") return CalibrationMode::Mode1;
  if (l == "mode2" || l == "mode 2") return CalibrationMode::Mode2;
  fail(ErrorKind::InvalidInput, "unknown calibration mode '" + std::string(s) + "'");
}

std::optional<double> mode_epsilon(CalibrationMode m) {
  switch (m) {
    case CalibrationMode::None: return std::nullopt;
    case CalibrationMode::Mode1: return 0.98;
    case CalibrationMode::Mode2: return 0.99;
  }
  return std::nullopt;
}

}  // namespace gemnet
