#include "gemnet/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "gemnet/error.hpp"

namespace gemnet {

using nlohmann::json;

namespace {

// Slopes of the not-a-knot cubic spline at the knots. Same banded
// formulation as the usual slope-based derivation; the end rows keep the
// system tridiagonal, so plain forward elimination is stable here.
std::vector<double> not_a_knot_slopes(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  std::vector<double> dx(n - 1), slope(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    dx[i] = x[i + 1] - x[i];
    slope[i] = (y[i + 1] - y[i]) / dx[i];
  }
  std::vector<double> lower(n, 0.0), diag(n, 0.0), upper(n, 0.0), rhs(n, 0.0);
  {
    const double d = x[2] - x[0];
    diag[0] = dx[1];
    upper[0] = d;
    rhs[0] = ((dx[0] + 2.0 * d) * dx[1] * slope[0] + dx[0] * dx[0] * slope[1]) / d;
  }
  for (std::size_t i = 1; i + 1 < n; ++i) {
    lower[i] = dx[i];
    diag[i] = 2.0 * (dx[i - 1] + dx[i]);
    upper[i] = dx[i - 1];
    rhs[i] = 3.0 * (dx[i] * slope[i - 1] + dx[i - 1] * slope[i]);
  }
  {
    const double d = x[n - 1] - x[n - 3];
    lower[n - 1] = d;
    diag[n - 1] = dx[n - 3];
    rhs[n - 1] = (dx[n - 2] * dx[n - 2] * slope[n - 3] +
                  (2.0 * d + dx[n - 2]) * dx[n - 3] * slope[n - 2]) /
                 d;
  }
  // Thomas algorithm.
  for (std::size_t i = 1; i < n; ++i) {
    const double w = lower[i] / diag[i - 1];
    diag[i] -= w * upper[i - 1];
    rhs[i] -= w * rhs[i - 1];
  }
  std::vector<double> s(n);
  s[n - 1] = rhs[n - 1] / diag[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) s[i] = (rhs[i] - upper[i] * s[i + 1]) / diag[i];
  return s;
}

}  // namespace

FtirSpectrum resample_ftir(const RawSpectrum& raw) {
  const auto& pts = raw.points;
  require(pts.size() >= 4, ErrorKind::InsufficientData,
          "cubic spline needs at least 4 points, got " + std::to_string(pts.size()));
  std::vector<double> x(pts.size()), y(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    x[i] = pts[i].first;
    y[i] = pts[i].second;
    require(std::isfinite(x[i]) && std::isfinite(y[i]), ErrorKind::InvalidInput,
            "raw spectrum contains non-finite values");
    require(i == 0 || x[i] > x[i - 1], ErrorKind::InvalidInput,
            "raw spectrum abscissa must be strictly increasing");
  }
  require(x.front() >= kFtirStart && x.back() <= kFtirEnd, ErrorKind::InvalidInput,
          "raw FTIR abscissa must lie within [200, 7000]");

  const auto s = not_a_knot_slopes(x, y);
  std::vector<double> values(kFtirLength, 0.0);
  std::vector<std::uint8_t> coverage(kFtirLength, 0);

  const int first = static_cast<int>(std::ceil(x.front()));
  const int last = static_cast<int>(std::floor(x.back()));
  std::size_t seg = 0;
  for (int g = first; g <= last; ++g) {
    const double gx = g;
    while (seg + 2 < x.size() && x[seg + 1] <= gx) ++seg;
    const auto idx = static_cast<std::size_t>(g - kFtirStart);
    coverage[idx] = 1;
    if (gx == x[seg]) {
      values[idx] = y[seg];
      continue;
    }
    if (gx == x[seg + 1]) {
      values[idx] = y[seg + 1];
      continue;
    }
    const double h = x[seg + 1] - x[seg];
    const double m = (y[seg + 1] - y[seg]) / h;
    const double c2 = (3.0 * m - 2.0 * s[seg] - s[seg + 1]) / h;
    const double c3 = (s[seg] + s[seg + 1] - 2.0 * m) / (h * h);
    const double t = gx - x[seg];
    values[idx] = y[seg] + t * (s[seg] + t * (c2 + t * c3));
  }
  return FtirSpectrum(std::move(values), std::move(coverage));
}

bool validate_ftir(const FtirSpectrum& s) {
  const auto v = s.values();
  const auto c = s.coverage();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (c[i] && (v[i] < -5.0 || v[i] > 10.0)) return false;
  return true;
}

UvSpectrum normalize_uv(const std::vector<std::vector<double>>& spectra) {
  require(spectra.size() == 1 || spectra.size() == 2, ErrorKind::InvalidInput,
          "UV input must hold one or two polarisations");
  for (const auto& row : spectra) {
    require(row.size() == kUvLength, ErrorKind::InvalidInput,
            "UV polarisation must have 1201 entries, got " + std::to_string(row.size()));
    for (double v : row) {
      require(std::isfinite(v), ErrorKind::InvalidInput, "UV value not finite");
      require(v >= 0.0, ErrorKind::RejectedMeasurement, "negative UV absorbance");
    }
  }
  std::vector<double> values;
  values.reserve(kUvRows * kUvLength);
  values.insert(values.end(), spectra[0].begin(), spectra[0].end());
  const auto& second = spectra.size() == 2 ? spectra[1] : spectra[0];
  values.insert(values.end(), second.begin(), second.end());
  return UvSpectrum(std::move(values));
}

bool validate_xrf(const XrfComposition& c) {
  if (c[xrf_index::Fe2O3] > 40000.0) return false;
  if (c[xrf_index::Al2O3] < 850000.0) return false;
  if (c[xrf_index::Cr2O3] > 10000.0) return false;
  if (c[xrf_index::TiO2] > 6000.0) return false;
  return true;
}

IcpmsComposition select_icpms(const std::map<std::string, double>& full) {
  std::array<double, kIcpmsLength> out{};
  const auto& names = icpms_manifest();
  for (std::size_t i = 0; i < kIcpmsLength; ++i) {
    auto it = full.find(std::string(names[i]));
    if (it == full.end()) fail(ErrorKind::MissingElement, std::string(names[i]));
    out[i] = it->second;
  }
  return IcpmsComposition(out);
}

XrfComposition xrf_from_named(const std::map<std::string, double>& named) {
  std::array<double, kXrfLength> out{};
  const auto& names = xrf_manifest();
  for (std::size_t i = 0; i < kXrfLength; ++i) {
    auto it = named.find(std::string(names[i]));
    if (it == named.end()) fail(ErrorKind::MissingElement, std::string(names[i]));
    out[i] = it->second;
  }
  return XrfComposition(out);
}

std::optional<StoneRecord> prepare_record(const RawRecord& raw, PrepStats& stats) {
  ++stats.records_in;
  StoneRecord rec;
  rec.stone_id = raw.stone_id;
  rec.evaluation_time = raw.evaluation_time;
  rec.origin = raw.origin;
  rec.treatment = raw.treatment;

  if (!raw.uv.empty()) {
    try {
      rec.uv = normalize_uv(raw.uv);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::RejectedMeasurement) throw;
      ++stats.uv_rejected;
    }
  }
  if (raw.ftir) {
    auto spectrum = resample_ftir(*raw.ftir);
    if (validate_ftir(spectrum))
      rec.ftir = std::move(spectrum);
    else
      ++stats.ftir_rejected;
  }
  if (raw.xrf) {
    auto xrf = xrf_from_named(*raw.xrf);
    if (validate_xrf(xrf))
      rec.xrf = xrf;
    else
      ++stats.xrf_rejected;
  }
  if (raw.icpms) rec.icpms = select_icpms(*raw.icpms);

  if (rec.source_count() == 0 || rec.stone_id.empty()) {
    ++stats.dropped_records;
    return std::nullopt;
  }
  ++stats.records_out;
  return rec;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

template <std::size_t N>
json named_object(const std::array<double, N>& values,
                  const std::array<std::string_view, N>& names) {
  json obj = json::object();
  for (std::size_t i = 0; i < N; ++i) obj[std::string(names[i])] = values[i];
  return obj;
}

std::map<std::string, double> to_named_map(const json& obj, const char* what) {
  require(obj.is_object(), ErrorKind::ParseError, std::string(what) + " must be an object");
  std::map<std::string, double> out;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    require(it.value().is_number(), ErrorKind::ParseError,
            std::string(what) + " entry '" + it.key() + "' is not a number");
    out[it.key()] = it.value().get<double>();
  }
  return out;
}

std::vector<double> number_array(const json& arr, const char* what) {
  require(arr.is_array(), ErrorKind::ParseError, std::string(what) + " must be an array");
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    require(v.is_number(), ErrorKind::ParseError, std::string(what) + " holds a non-number");
    out.push_back(v.get<double>());
  }
  return out;
}

void parse_common(const json& j, std::string& id, std::int64_t& time,
                  std::optional<Origin>& origin, std::optional<Treatment>& treatment) {
  require(j.is_object(), ErrorKind::ParseError, "record must be a JSON object");
  require(j.contains("stone_id") && j["stone_id"].is_string(), ErrorKind::ParseError,
          "missing stone_id");
  require(j.contains("evaluation_time") && j["evaluation_time"].is_number_integer(),
          ErrorKind::ParseError, "missing integer evaluation_time");
  id = j["stone_id"].get<std::string>();
  time = j["evaluation_time"].get<std::int64_t>();
  if (j.contains("origin")) origin = origin_from_string(j["origin"].get<std::string>());
  if (j.contains("treatment"))
    treatment = treatment_from_string(j["treatment"].get<std::string>());
}

json coverage_ranges(std::span<const std::uint8_t> coverage) {
  json ranges = json::array();
  std::size_t i = 0;
  while (i < coverage.size()) {
    if (!coverage[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < coverage.size() && coverage[j + 1]) ++j;
    ranges.push_back(json::array({i, j}));
    i = j + 1;
  }
  return ranges;
}

std::vector<std::uint8_t> coverage_from_ranges(const json& ranges) {
  require(ranges.is_array(), ErrorKind::ParseError, "ftir coverage must be an array of ranges");
  std::vector<std::uint8_t> cov(kFtirLength, 0);
  for (const auto& r : ranges) {
    require(r.is_array() && r.size() == 2 && r[0].is_number_unsigned() &&
                r[1].is_number_unsigned(),
            ErrorKind::ParseError, "coverage range must be [first, last]");
    const auto a = r[0].get<std::size_t>();
    const auto b = r[1].get<std::size_t>();
    require(a <= b && b < kFtirLength, ErrorKind::ParseError, "coverage range out of bounds");
    for (std::size_t i = a; i <= b; ++i) cov[i] = 1;
  }
  return cov;
}

}  // namespace

std::string record_to_json_line(const StoneRecord& r) {
  json j;
  j["stone_id"] = r.stone_id;
  j["evaluation_time"] = r.evaluation_time;
  if (r.uv) {
    const auto a = r.uv->row(0);
    const auto b = r.uv->row(1);
    j["uv"] = json::array({std::vector<double>(a.begin(), a.end()),
                           std::vector<double>(b.begin(), b.end())});
  }
  if (r.ftir) {
    const auto v = r.ftir->values();
    j["ftir"] = {{"values", std::vector<double>(v.begin(), v.end())},
                 {"coverage", coverage_ranges(r.ftir->coverage())}};
  }
  if (r.xrf) j["xrf"] = named_object(r.xrf->values(), xrf_manifest());
  if (r.icpms) j["icpms"] = named_object(r.icpms->values(), icpms_manifest());
  if (r.origin) j["origin"] = std::string(to_string(*r.origin));
  if (r.treatment) j["treatment"] = std::string(to_string(*r.treatment));
  return j.dump();
}

StoneRecord record_from_json_line(const std::string& line) {
  const json j = json::parse(line);
  StoneRecord r;
  parse_common(j, r.stone_id, r.evaluation_time, r.origin, r.treatment);
  if (j.contains("uv")) {
    const auto& uv = j["uv"];
    require(uv.is_array() && uv.size() == kUvRows, ErrorKind::ParseError,
            "uv must hold two polarisations");
    std::vector<double> values;
    for (const auto& row : uv) {
      auto v = number_array(row, "uv row");
      require(v.size() == kUvLength, ErrorKind::ParseError,
              "uv row must have 1201 entries, got " + std::to_string(v.size()));
      values.insert(values.end(), v.begin(), v.end());
    }
    r.uv = UvSpectrum(std::move(values));
  }
  if (j.contains("ftir")) {
    const auto& f = j["ftir"];
    require(f.is_object() && f.contains("values"), ErrorKind::ParseError,
            "ftir must carry values");
    auto values = number_array(f["values"], "ftir values");
    require(values.size() == kFtirLength, ErrorKind::ParseError,
            "ftir must have 6801 entries, got " + std::to_string(values.size()));
    auto cov = f.contains("coverage") ? coverage_from_ranges(f["coverage"])
                                      : std::vector<std::uint8_t>(kFtirLength, 1);
    r.ftir = FtirSpectrum(std::move(values), std::move(cov));
  }
  if (j.contains("xrf")) r.xrf = xrf_from_named(to_named_map(j["xrf"], "xrf"));
  if (j.contains("icpms")) r.icpms = select_icpms(to_named_map(j["icpms"], "icpms"));
  validate_record(r);
  return r;
}

RawRecord raw_record_from_json_line(const std::string& line) {
  const json j = json::parse(line);
  RawRecord r;
  parse_common(j, r.stone_id, r.evaluation_time, r.origin, r.treatment);
  if (j.contains("uv")) {
    const auto& uv = j["uv"];
    require(uv.is_array(), ErrorKind::ParseError, "uv must be an array of polarisations");
    for (const auto& row : uv) r.uv.push_back(number_array(row, "uv row"));
  }
  if (j.contains("ftir")) {
    const auto& f = j["ftir"];
    require(f.is_array(), ErrorKind::ParseError, "raw ftir must be an array of [x, y] pairs");
    RawSpectrum raw;
    for (const auto& p : f) {
      require(p.is_array() && p.size() == 2 && p[0].is_number() && p[1].is_number(),
              ErrorKind::ParseError, "raw ftir point must be [x, y]");
      raw.points.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
    r.ftir = std::move(raw);
  }
  if (j.contains("xrf")) r.xrf = to_named_map(j["xrf"], "xrf");
  if (j.contains("icpms")) r.icpms = to_named_map(j["icpms"], "icpms");
  return r;
}

namespace {

template <typename Record, typename Parse>
std::vector<Record> read_lines(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(line));
    } catch (const Error& e) {
      fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const json::exception& e) {
      fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

void sort_and_check_corpus(std::vector<StoneRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.stone_id, a.evaluation_time) < std::tie(b.stone_id, b.evaluation_time);
  });
  for (std::size_t i = 1; i < records.size(); ++i)
    if (records[i].stone_id == records[i - 1].stone_id &&
        records[i].evaluation_time == records[i - 1].evaluation_time)
      fail(ErrorKind::DuplicateRecord, "stone '" + records[i].stone_id + "' at time " +
                                           std::to_string(records[i].evaluation_time));
}

std::vector<StoneRecord> load_corpus(const std::filesystem::path& path) {
  auto records = read_lines<StoneRecord>(path, record_from_json_line);
  sort_and_check_corpus(records);
  return records;
}

std::vector<RawRecord> load_raw_corpus(const std::filesystem::path& path) {
  return read_lines<RawRecord>(path, raw_record_from_json_line);
}

void save_corpus(const std::vector<StoneRecord>& records, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + path.string());
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
  require(static_cast<bool>(out), ErrorKind::IoError, "write failed for " + path.string());
}

}  // namespace gemnet
