#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gemnet/core_types.hpp"

namespace gemnet {

/// Instrument output before resampling: (wavenumber, absorbance) pairs with
/// strictly increasing abscissa.
struct RawSpectrum {
  std::vector<std::pair<double, double>> points;
};

/// Not-a-knot cubic spline through raw FTIR points, sampled on the integer
/// grid 200..7000. Grid points outside the measured range are zero and
/// marked uncovered.
FtirSpectrum resample_ftir(const RawSpectrum& raw);

/// False if any measured value lies strictly below -5 or strictly above 10.
bool validate_ftir(const FtirSpectrum& s);

/// Builds the two-polarisation array. A single measurement is duplicated.
/// Throws InvalidInput on wrong lengths, RejectedMeasurement on negatives.
UvSpectrum normalize_uv(const std::vector<std::vector<double>>& spectra);

/// False if Fe2O3 > 40000, Al2O3 < 850000, Cr2O3 > 10000 or TiO2 > 6000 ppm.
bool validate_xrf(const XrfComposition& c);

/// Picks the retained isotopes from a full ICP-MS result in manifest order.
/// Throws MissingElement naming the first absent isotope.
IcpmsComposition select_icpms(const std::map<std::string, double>& full);

/// Builds an XRF row from named entries. Throws MissingElement.
XrfComposition xrf_from_named(const std::map<std::string, double>& named);

/// A stone as delivered by the instruments, before preprocessing.
struct RawRecord {
  std::string stone_id;
  std::int64_t evaluation_time = 0;
  std::vector<std::vector<double>> uv;  // one or two polarisations; empty = absent
  std::optional<RawSpectrum> ftir;
  std::optional<std::map<std::string, double>> xrf;
  std::optional<std::map<std::string, double>> icpms;
  std::optional<Origin> origin;
  std::optional<Treatment> treatment;
};

struct PrepStats {
  std::size_t records_in = 0;
  std::size_t records_out = 0;
  std::size_t uv_rejected = 0;
  std::size_t ftir_rejected = 0;
  std::size_t xrf_rejected = 0;
  std::size_t dropped_records = 0;
};

/// Applies all per-source rules. Rejected measurements are dropped; the
/// record survives if any source remains.
std::optional<StoneRecord> prepare_record(const RawRecord& raw, PrepStats& stats);

/// Corpus files hold one JSON object per line. See README for the schema.
std::string record_to_json_line(const StoneRecord& record);
StoneRecord record_from_json_line(const std::string& line);
RawRecord raw_record_from_json_line(const std::string& line);

/// Loads and sorts by (stone_id, evaluation_time). Throws ParseError with the
/// offending line number, or DuplicateRecord.
std::vector<StoneRecord> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::vector<StoneRecord>& records, const std::filesystem::path& path);
std::vector<RawRecord> load_raw_corpus(const std::filesystem::path& path);

/// Sorts in place and throws DuplicateRecord on repeated (stone_id, time).
void sort_and_check_corpus(std::vector<StoneRecord>& records);

}  // namespace gemnet
