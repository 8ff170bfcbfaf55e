#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gemnet {

// Ordinals are part of the file formats and checkpoints; never reorder.
enum class Origin : std::uint8_t { Kashmir = 0, Burma = 1, SriLanka = 2, Madagascar = 3 };
enum class Treatment : std::uint8_t { Treated = 0, NotTreated = 1 };
enum class Source : std::uint8_t { UV = 0, FTIR = 1, XRF = 2, ICPMS = 3 };
enum class Task : std::uint8_t { OD = 0, TD = 1 };

inline constexpr std::size_t kNumOrigins = 4;
inline constexpr std::size_t kNumTreatments = 2;
inline constexpr std::size_t kNumSources = 4;
inline constexpr std::array<Source, kNumSources> kAllSources = {Source::UV, Source::FTIR,
                                                                Source::XRF, Source::ICPMS};

inline constexpr std::size_t kUvRows = 2;
inline constexpr std::size_t kUvLength = 1201;  // 280..880 nm, 0.5 nm step
inline constexpr double kUvStartNm = 280.0;
inline constexpr double kUvStepNm = 0.5;
inline constexpr std::size_t kFtirLength = 6801;  // 200..7000 cm^-1, 1 cm^-1 step
inline constexpr int kFtirStart = 200;
inline constexpr int kFtirEnd = 7000;
inline constexpr std::size_t kXrfLength = 26;
inline constexpr std::size_t kIcpmsLength = 16;

std::string_view to_string(Origin o);
std::string_view to_string(Treatment t);
std::string_view to_string(Source s);
std::string_view to_string(Task t);
Origin origin_from_string(std::string_view s);
Treatment treatment_from_string(std::string_view s);
Source source_from_string(std::string_view s);
Task task_from_string(std::string_view s);

std::size_t num_classes(Task task);
/// Sources a task may feed to the model. TD never sees elemental data.
bool source_allowed_for_task(Task task, Source source);

/// Entry names of the XRF layout. Only Al, Ti, Cr, V, Fe, Ga, Pb, W and Pt
/// are fixed by the laboratory; the rest is a stand-in manifest.
const std::array<std::string_view, kXrfLength>& xrf_manifest();
/// Retained ICP-MS isotopes in storage order.
const std::array<std::string_view, kIcpmsLength>& icpms_manifest();

namespace xrf_index {
inline constexpr std::size_t Al2O3 = 0;
inline constexpr std::size_t TiO2 = 1;
inline constexpr std::size_t Cr2O3 = 2;
inline constexpr std::size_t V2O5 = 3;
inline constexpr std::size_t Fe2O3 = 4;
inline constexpr std::size_t Ga2O3 = 5;
}  // namespace xrf_index

/// Two polarisations x 1201 absorbance samples, row-major. Non-negative.
class UvSpectrum {
 public:
  explicit UvSpectrum(std::vector<double> values);
  std::span<const double> values() const { return values_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * kUvLength, kUvLength);
  }
  bool operator==(const UvSpectrum&) const = default;

 private:
  std::vector<double> values_;
};

/// 6801 samples on the integer wavenumber grid plus a coverage mask. Positions
/// outside the measured range hold exactly zero.
class FtirSpectrum {
 public:
  FtirSpectrum(std::vector<double> values, std::vector<std::uint8_t> coverage);
  static FtirSpectrum fully_covered(std::vector<double> values);
  std::span<const double> values() const { return values_; }
  std::span<const std::uint8_t> coverage() const { return coverage_; }
  bool operator==(const FtirSpectrum&) const = default;

 private:
  std::vector<double> values_;
  std::vector<std::uint8_t> coverage_;
};

class XrfComposition {
 public:
  explicit XrfComposition(std::array<double, kXrfLength> ppm);
  const std::array<double, kXrfLength>& values() const { return ppm_; }
  double operator[](std::size_t i) const { return ppm_[i]; }
  bool operator==(const XrfComposition&) const = default;

 private:
  std::array<double, kXrfLength> ppm_;
};

class IcpmsComposition {
 public:
  explicit IcpmsComposition(std::array<double, kIcpmsLength> ppm);
  const std::array<double, kIcpmsLength>& values() const { return ppm_; }
  double operator[](std::size_t i) const { return ppm_[i]; }
  bool operator==(const IcpmsComposition&) const = default;

 private:
  std::array<double, kIcpmsLength> ppm_;
};

struct StoneRecord {
  std::string stone_id;
  std::int64_t evaluation_time = 0;  // epoch days
  std::optional<UvSpectrum> uv;
  std::optional<FtirSpectrum> ftir;
  std::optional<XrfComposition> xrf;
  std::optional<IcpmsComposition> icpms;
  std::optional<Origin> origin;
  std::optional<Treatment> treatment;

  bool has(Source s) const;
  std::size_t source_count() const;
  /// Label ordinal for a task, if the record carries it.
  std::optional<std::size_t> label(Task task) const;
  bool operator==(const StoneRecord&) const = default;
};

/// Throws InvalidInput unless the record has an id and at least one source.
void validate_record(const StoneRecord& record);

/// Smallest index attaining the maximum. Throws InvalidInput on empty or
/// non-finite input.
std::size_t argmax_label(std::span<const double> probs);

struct Prediction {
  std::vector<double> probs;
  double confidence = 0.0;
  std::size_t label = 0;
  Task task = Task::OD;

  /// Checks normalisation and derives confidence and label.
  static Prediction from_probs(std::vector<double> probs, Task task);
};

enum class CalibrationMode : std::uint8_t { None = 0, Mode1 = 1, Mode2 = 2 };
std::string_view to_string(CalibrationMode m);
CalibrationMode calibration_mode_from_string(std::string_view s);
/// Target training accuracy for a mode; empty for None.
std::optional<double> mode_epsilon(CalibrationMode m);

struct CalibrationProfile {
  CalibrationMode mode = CalibrationMode::None;
  std::optional<double> epsilon;
  double threshold = 0.0;
  // Training-set statistics the threshold was derived from.
  std::size_t calibration_size = 0;
  std::size_t retained = 0;
  double retained_accuracy = 0.0;
};

}  // namespace gemnet
