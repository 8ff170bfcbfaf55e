#include "gemnet/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gemnet/error.hpp"
#include "gemnet/ingest.hpp"
#include "gemnet/seed.hpp"

namespace gemnet {

using nlohmann::json;

namespace {

constexpr int kMaxAttempts = 16;

double log_mu(const ElementModel& m, double noise_sigma) {
  const double total_var = m.log_sigma * m.log_sigma + noise_sigma * noise_sigma;
  return std::log(m.mean_ppm) - 0.5 * total_var;
}

double total_sigma(const ElementModel& m, double noise_sigma) {
  return std::sqrt(m.log_sigma * m.log_sigma + noise_sigma * noise_sigma);
}

double logsumexp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

void validate_spec(const GeneratorSpec& spec) {
  double prior_sum = 0.0;
  for (double p : spec.origin_priors) {
    require(p >= 0.0, ErrorKind::InvalidConfig, "origin priors must be non-negative");
    prior_sum += p;
  }
  require(std::abs(prior_sum - 1.0) < 1e-9, ErrorKind::InvalidConfig,
          "origin priors must sum to 1");
  require(spec.treated_fraction >= 0.0 && spec.treated_fraction <= 1.0, ErrorKind::InvalidConfig,
          "treated_fraction must lie in [0,1]");
  require(spec.uv_noise_sigma > 0 && spec.ftir_noise_sigma > 0 && spec.xrf_noise_log_sigma > 0 &&
              spec.icpms_noise_log_sigma > 0,
          ErrorKind::InvalidConfig, "noise sigmas must be positive");
  require(spec.uv_baseline >= 0.0 && spec.td_band_amplitude >= 0.0, ErrorKind::InvalidConfig,
          "amplitudes must be non-negative");
  require(spec.td_band_width > 0.0, ErrorKind::InvalidConfig, "band width must be positive");
  for (const auto& peaks : spec.uv_peaks)
    for (const auto& p : peaks)
      require(p.amplitude >= 0.0 && p.width_nm > 0.0, ErrorKind::InvalidConfig,
              "UV peaks need amplitude >= 0 and width > 0");
  auto check_elements = [](const auto& table) {
    for (const auto& row : table)
      for (const auto& e : row)
        require(e.mean_ppm > 0.0 && e.log_sigma > 0.0, ErrorKind::InvalidConfig,
                "element models need mean > 0 and sigma > 0");
  };
  check_elements(spec.xrf);
  check_elements(spec.icpms);
  require(spec.repeat_fraction >= 0.0 && spec.repeat_fraction <= 1.0 &&
              spec.missing_fraction >= 0.0 && spec.missing_fraction < 1.0,
          ErrorKind::InvalidConfig, "repeat/missing fractions out of range");
  require(spec.day_span >= 0, ErrorKind::InvalidConfig, "day_span must be non-negative");
}

std::vector<double> uv_mean(const GeneratorSpec& spec, Origin origin) {
  std::vector<double> mean(kUvLength, spec.uv_baseline);
  for (std::size_t i = 0; i < kUvLength; ++i) {
    const double nm = kUvStartNm + kUvStepNm * static_cast<double>(i);
    for (const auto& p : spec.uv_peaks[static_cast<std::size_t>(origin)]) {
      const double z = (nm - p.center_nm) / p.width_nm;
      mean[i] += p.amplitude * std::exp(-0.5 * z * z);
    }
  }
  return mean;
}

std::vector<double> ftir_mean(const GeneratorSpec& spec, Treatment treatment) {
  std::vector<double> mean(kFtirLength, spec.ftir_baseline);
  if (treatment == Treatment::Treated) {
    for (std::size_t i = 0; i < kFtirLength; ++i) {
      const double z = (static_cast<double>(kFtirStart) + static_cast<double>(i) -
                        spec.td_band_center) /
                       spec.td_band_width;
      mean[i] += spec.td_band_amplitude * std::exp(-0.5 * z * z);
    }
  }
  return mean;
}

namespace {

// One attempt with a given noise seed; returns nullopt when a gate rejects.
std::optional<StoneRecord> draw_stone(const GeneratorSpec& spec, Origin origin,
                                      Treatment treated, std::uint64_t stone_seed,
                                      std::uint64_t noise_seed) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::mt19937_64 latent(derive_seed(stone_seed, "latent"));
  std::mt19937_64 noise(noise_seed);
  const auto o = static_cast<std::size_t>(origin);

  StoneRecord rec;
  rec.origin = origin;
  rec.treatment = treated;

  // Latent draws first so they are identical across evaluations.
  std::array<double, kXrfLength> zx{};
  std::array<double, kIcpmsLength> zi{};
  for (auto& z : zx) z = normal(latent);
  for (auto& z : zi) z = normal(latent);

  {
    const auto mean = uv_mean(spec, origin);
    std::vector<double> values(kUvRows * kUvLength);
    for (std::size_t r = 0; r < kUvRows; ++r)
      for (std::size_t i = 0; i < kUvLength; ++i)
        values[r * kUvLength + i] = mean[i] + spec.uv_noise_sigma * normal(noise);
    if (std::any_of(values.begin(), values.end(), [](double v) { return v < 0.0; }))
      return std::nullopt;
    rec.uv = UvSpectrum(std::move(values));
  }
  {
    auto values = ftir_mean(spec, treated);
    for (auto& v : values) v += spec.ftir_noise_sigma * normal(noise);
    FtirSpectrum f = FtirSpectrum::fully_covered(std::move(values));
    if (!validate_ftir(f)) return std::nullopt;
    rec.ftir = std::move(f);
  }
  {
    std::array<double, kXrfLength> ppm{};
    for (std::size_t j = 0; j < kXrfLength; ++j) {
      const auto& m = spec.xrf[o][j];
      ppm[j] = std::exp(log_mu(m, spec.xrf_noise_log_sigma) + m.log_sigma * zx[j] +
                        spec.xrf_noise_log_sigma * normal(noise));
    }
    XrfComposition x(ppm);
    if (!validate_xrf(x)) return std::nullopt;
    rec.xrf = x;
  }
  {
    std::array<double, kIcpmsLength> ppm{};
    for (std::size_t j = 0; j < kIcpmsLength; ++j) {
      const auto& m = spec.icpms[o][j];
      ppm[j] = std::exp(log_mu(m, spec.icpms_noise_log_sigma) + m.log_sigma * zi[j] +
                        spec.icpms_noise_log_sigma * normal(noise));
    }
    rec.icpms = IcpmsComposition(ppm);
  }
  return rec;
}

}  // namespace

StoneRecord gen_stone(const GeneratorSpec& spec, Origin origin, Treatment treated,
                      std::uint64_t stone_seed, std::uint32_t evaluation,
                      const std::string& stone_id) {
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const auto noise_seed =
        derive_seed(stone_seed, "noise", (static_cast<std::uint64_t>(evaluation) << 8) |
                                             static_cast<std::uint64_t>(attempt));
    auto rec = draw_stone(spec, origin, treated, stone_seed, noise_seed);
    if (!rec) continue;
    rec->stone_id = stone_id.empty() ? "stone-" + std::to_string(stone_seed) : stone_id;
    std::mt19937_64 days(derive_seed(stone_seed, "days"));
    std::uniform_int_distribution<std::int64_t> first(0, spec.day_span);
    std::uniform_int_distribution<std::int64_t> gap(30, 1500);
    rec->evaluation_time = spec.first_day + first(days);
    for (std::uint32_t e = 0; e < evaluation; ++e) rec->evaluation_time += gap(days);
    return std::move(*rec);
  }
  fail(ErrorKind::GenerationFailed,
       "no valid draw after 16 attempts for stone seed " + std::to_string(stone_seed));
}

double empirical_validity(const GeneratorSpec& spec, std::size_t n) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto stone_seed = derive_seed(spec.seed, "validity", i);
    const auto origin = static_cast<Origin>(i % kNumOrigins);
    const auto treated = (i / kNumOrigins) % 2 ? Treatment::Treated : Treatment::NotTreated;
    if (draw_stone(spec, origin, treated, stone_seed, derive_seed(stone_seed, "noise", 0)))
      ++ok;
  }
  return n == 0 ? 1.0 : static_cast<double>(ok) / static_cast<double>(n);
}

void check_spec(const GeneratorSpec& spec) {
  validate_spec(spec);
  const double v = empirical_validity(spec);
  require(v >= 0.99, ErrorKind::InvalidConfig,
          "generator spec '" + spec.name + "' passes the ingest gates for only " +
              std::to_string(v * 100.0) + "% of stones");
}

std::vector<StoneRecord> gen_corpus(const GeneratorSpec& spec, std::size_t n) {
  validate_spec(spec);
  std::vector<StoneRecord> out;
  out.reserve(n + static_cast<std::size_t>(spec.repeat_fraction * static_cast<double>(n)) + 1);
  std::discrete_distribution<std::size_t> origin_dist(spec.origin_priors.begin(),
                                                      spec.origin_priors.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int width = 6;
  for (std::size_t i = 0; i < n; ++i) {
    const auto stone_seed = derive_seed(spec.seed, "stone", i);
    std::mt19937_64 labels(derive_seed(stone_seed, "labels"));
    const auto origin = static_cast<Origin>(origin_dist(labels));
    const auto treated =
        unit(labels) < spec.treated_fraction ? Treatment::Treated : Treatment::NotTreated;
    const bool repeat = unit(labels) < spec.repeat_fraction;
    std::string id = std::to_string(i);
    id = "S" + std::string(id.size() < width ? width - id.size() : 0, '0') + id;

    const std::uint32_t evaluations = repeat ? 2 : 1;
    for (std::uint32_t e = 0; e < evaluations; ++e) {
      StoneRecord rec = gen_stone(spec, origin, treated, stone_seed, e, id);
      if (spec.missing_fraction > 0.0) {
        std::mt19937_64 miss(derive_seed(stone_seed, "missing", e));
        std::array<bool, kNumSources> drop{};
        for (auto& d : drop) d = unit(miss) < spec.missing_fraction;
        if (std::all_of(drop.begin(), drop.end(), [](bool d) { return d; }))
          drop[std::uniform_int_distribution<std::size_t>(0, kNumSources - 1)(miss)] = false;
        if (drop[0]) rec.uv.reset();
        if (drop[1]) rec.ftir.reset();
        if (drop[2]) rec.xrf.reset();
        if (drop[3]) rec.icpms.reset();
      }
      out.push_back(std::move(rec));
    }
  }
  sort_and_check_corpus(out);
  return out;
}

// ---------------------------------------------------------------------------
// Bayes oracle

std::vector<double> bayes_posterior(const StoneRecord& record, const GeneratorSpec& spec,
                                    Task task, const std::vector<Source>& use) {
  auto used = [&](Source s) {
    return record.has(s) &&
           (use.empty() || std::find(use.begin(), use.end(), s) != use.end());
  };
  require(std::any_of(kAllSources.begin(), kAllSources.end(), used), ErrorKind::InvalidInput,
          "posterior needs at least one present source");

  std::array<double, kNumOrigins> ll_origin{};
  std::array<double, kNumTreatments> ll_treat{};

  if (used(Source::UV)) {
    const auto v = record.uv->values();
    const double inv2 = 1.0 / (2.0 * spec.uv_noise_sigma * spec.uv_noise_sigma);
    for (std::size_t o = 0; o < kNumOrigins; ++o) {
      const auto mean = uv_mean(spec, static_cast<Origin>(o));
      double acc = 0.0;
      for (std::size_t r = 0; r < kUvRows; ++r)
        for (std::size_t i = 0; i < kUvLength; ++i) {
          const double d = v[r * kUvLength + i] - mean[i];
          acc -= d * d * inv2;
        }
      ll_origin[o] += acc;
    }
  }
  if (used(Source::FTIR)) {
    const auto v = record.ftir->values();
    const auto cov = record.ftir->coverage();
    const double inv2 = 1.0 / (2.0 * spec.ftir_noise_sigma * spec.ftir_noise_sigma);
    for (std::size_t t = 0; t < kNumTreatments; ++t) {
      const auto mean = ftir_mean(spec, static_cast<Treatment>(t));
      double acc = 0.0;
      for (std::size_t i = 0; i < kFtirLength; ++i) {
        if (!cov[i]) continue;
        const double d = v[i] - mean[i];
        acc -= d * d * inv2;
      }
      ll_treat[t] += acc;
    }
  }
  auto lognormal_ll = [](double x, const ElementModel& m, double noise) {
    const double s = total_sigma(m, noise);
    const double z = (std::log(x) - log_mu(m, noise)) / s;
    return -std::log(s) - 0.5 * z * z;
  };
  if (used(Source::XRF)) {
    for (std::size_t o = 0; o < kNumOrigins; ++o)
      for (std::size_t j = 0; j < kXrfLength; ++j)
        ll_origin[o] += lognormal_ll((*record.xrf)[j], spec.xrf[o][j], spec.xrf_noise_log_sigma);
  }
  if (used(Source::ICPMS)) {
    for (std::size_t o = 0; o < kNumOrigins; ++o)
      for (std::size_t j = 0; j < kIcpmsLength; ++j)
        ll_origin[o] +=
            lognormal_ll((*record.icpms)[j], spec.icpms[o][j], spec.icpms_noise_log_sigma);
  }

  const double ninf = -std::numeric_limits<double>::infinity();
  const std::array<double, kNumTreatments> treat_prior{spec.treated_fraction,
                                                       1.0 - spec.treated_fraction};
  std::vector<double> joint(kNumOrigins * kNumTreatments);
  for (std::size_t o = 0; o < kNumOrigins; ++o)
    for (std::size_t t = 0; t < kNumTreatments; ++t) {
      const double prior = spec.origin_priors[o] * treat_prior[t];
      joint[o * kNumTreatments + t] =
          prior > 0.0 ? std::log(prior) + ll_origin[o] + ll_treat[t] : ninf;
    }
  const double norm = logsumexp(joint);

  const std::size_t c = num_classes(task);
  std::vector<double> post(c, 0.0);
  for (std::size_t o = 0; o < kNumOrigins; ++o)
    for (std::size_t t = 0; t < kNumTreatments; ++t) {
      const double p = std::exp(joint[o * kNumTreatments + t] - norm);
      post[task == Task::OD ? o : t] += p;
    }
  const double s = std::accumulate(post.begin(), post.end(), 0.0);
  for (auto& p : post) p /= s;
  return post;
}

double bayes_accuracy(const std::vector<StoneRecord>& records, const GeneratorSpec& spec,
                      Task task, const std::vector<Source>& use) {
  std::size_t correct = 0, total = 0;
  for (const auto& r : records) {
    const auto label = r.label(task);
    const bool usable = std::any_of(kAllSources.begin(), kAllSources.end(), [&](Source s) {
      return r.has(s) && (use.empty() || std::find(use.begin(), use.end(), s) != use.end());
    });
    if (!label || !usable) continue;
    ++total;
    if (argmax_label(bayes_posterior(r, spec, task, use)) == *label) ++correct;
  }
  require(total > 0, ErrorKind::InvalidInput, "no labelled records");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Reference specs

namespace {

// Log-space offsets (units of `separation`) of the discriminative entries.
struct Offset {
  std::size_t index;
  std::array<double, kNumOrigins> shift;
};

GeneratorSpec base_spec(double elem_sep, double uv_sep, double stone_sigma) {
  GeneratorSpec s;
  const std::array<double, kXrfLength> xrf_base = {
      985000, 300, 50, 30, 4000, 150, 5, 3, 2, 500, 200, 50, 40,
      10,     5,   5,  10, 20,   5,   5, 3, 2, 2,   2,   20, 30};
  const std::array<double, kIcpmsLength> icp_base = {0.5, 20, 520000, 0.3, 120, 8,  15, 3500,
                                                    1.0, 90, 2.0,    0.8, 0.4, 0.3, 0.1, 0.2};
  const std::vector<Offset> xrf_offsets = {
      {xrf_index::TiO2, {+0.5, -0.5, 0.0, +0.5}},  {xrf_index::V2O5, {+0.5, +1.0, -0.5, -0.5}},
      {xrf_index::Fe2O3, {-1.0, -0.5, -1.5, +0.5}}, {xrf_index::Ga2O3, {+0.5, -0.5, 0.0, -1.0}},
      {xrf_index::Cr2O3, {0.0, +0.5, -0.5, 0.0}}};
  const std::vector<Offset> icp_offsets = {
      {0, {0.0, 0.0, 0.0, +0.5}},   {1, {+0.5, -0.5, 0.0, +0.5}},  {4, {+0.5, -0.5, 0.0, +0.5}},
      {5, {+0.5, +1.0, -0.5, -0.5}}, {7, {-1.0, -0.5, -1.5, +0.5}}, {9, {+0.5, -0.5, 0.0, -1.0}},
      {10, {0.0, +0.5, -0.5, 0.0}},  {12, {0.0, 0.0, +0.5, 0.0}}};

  for (std::size_t o = 0; o < kNumOrigins; ++o) {
    for (std::size_t j = 0; j < kXrfLength; ++j)
      s.xrf[o][j] = {xrf_base[j], j == xrf_index::Al2O3 ? 0.005 : stone_sigma};
    for (std::size_t j = 0; j < kIcpmsLength; ++j)
      s.icpms[o][j] = {icp_base[j], j == 2 ? 0.005 : stone_sigma};
    for (const auto& off : xrf_offsets) s.xrf[o][off.index].mean_ppm *= std::exp(elem_sep * off.shift[o]);
    for (const auto& off : icp_offsets)
      s.icpms[o][off.index].mean_ppm *= std::exp(elem_sep * off.shift[o]);
  }
  s.xrf_noise_log_sigma = 0.05;
  s.icpms_noise_log_sigma = 0.05;

  // Fe3+ lines, Fe-Ti charge transfer band, Fe2+/Fe3+ NIR band.
  const std::array<std::array<double, 4>, kNumOrigins> uv_scale = {{
      {1.0 + 0.5 * uv_sep, 1.0, 1.0 + uv_sep, 1.0},
      {1.0, 1.0 + uv_sep, 1.0, 1.0 - 0.5 * uv_sep},
      {1.0 - 0.5 * uv_sep, 1.0, 1.0 - 0.5 * uv_sep, 1.0 + uv_sep},
      {1.0 + uv_sep, 1.0 - 0.5 * uv_sep, 1.0, 1.0},
  }};
  for (std::size_t o = 0; o < kNumOrigins; ++o) {
    s.uv_peaks[o] = {{388.0, 4.0, 0.08 * uv_scale[o][0]},
                     {450.0, 6.0, 0.05 * uv_scale[o][1]},
                     {580.0, 50.0, 0.30 * uv_scale[o][2]},
                     {860.0, 40.0, 0.10 * uv_scale[o][3]}};
  }
  s.uv_baseline = 0.2;
  s.uv_noise_sigma = 0.02;
  s.ftir_baseline = 0.5;
  s.ftir_noise_sigma = 0.05;
  s.td_band_center = 3309.0;
  s.td_band_width = 20.0;
  return s;
}

}  // namespace

GeneratorSpec easy_spec() {
  GeneratorSpec s = base_spec(0.55, 0.01, 0.25);
  s.name = "easy";
  s.seed = 11;
  s.td_band_amplitude = 0.15;
  return s;
}

GeneratorSpec realistic_spec() {
  GeneratorSpec s = base_spec(0.45, 0.008, 0.3);
  s.name = "realistic";
  s.seed = 23;
  s.td_band_amplitude = 0.035;
  s.repeat_fraction = 0.1;
  s.missing_fraction = 0.03;
  return s;
}

// ---------------------------------------------------------------------------
// Serialisation

std::string spec_to_json(const GeneratorSpec& s) {
  json j;
  j["name"] = s.name;
  j["seed"] = s.seed;
  j["origin_priors"] = s.origin_priors;
  j["treated_fraction"] = s.treated_fraction;
  json peaks = json::object();
  for (std::size_t o = 0; o < kNumOrigins; ++o) {
    json arr = json::array();
    for (const auto& p : s.uv_peaks[o])
      arr.push_back({{"center_nm", p.center_nm}, {"width_nm", p.width_nm},
                     {"amplitude", p.amplitude}});
    peaks[std::string(to_string(static_cast<Origin>(o)))] = arr;
  }
  j["uv"] = {{"baseline", s.uv_baseline}, {"noise_sigma", s.uv_noise_sigma}, {"peaks", peaks}};
  j["ftir"] = {{"baseline", s.ftir_baseline},
               {"noise_sigma", s.ftir_noise_sigma},
               {"td_band_center", s.td_band_center},
               {"td_band_width", s.td_band_width},
               {"td_band_amplitude", s.td_band_amplitude}};
  auto elements = [](const auto& table, const auto& names, double noise) {
    json entries = json::object();
    for (std::size_t o = 0; o < kNumOrigins; ++o) {
      json row = json::object();
      for (std::size_t k = 0; k < names.size(); ++k)
        row[std::string(names[k])] = {{"mean_ppm", table[o][k].mean_ppm},
                                      {"log_sigma", table[o][k].log_sigma}};
      entries[std::string(to_string(static_cast<Origin>(o)))] = row;
    }
    return json{{"noise_log_sigma", noise}, {"entries", entries}};
  };
  j["xrf"] = elements(s.xrf, xrf_manifest(), s.xrf_noise_log_sigma);
  j["icpms"] = elements(s.icpms, icpms_manifest(), s.icpms_noise_log_sigma);
  j["repeat_fraction"] = s.repeat_fraction;
  j["missing_fraction"] = s.missing_fraction;
  j["first_day"] = s.first_day;
  j["day_span"] = s.day_span;
  return j.dump(2);
}

GeneratorSpec spec_from_json(const std::string& text) {
  GeneratorSpec s;
  try {
    const json j = json::parse(text);
    s.name = j.value("name", "custom");
    s.seed = j.at("seed").get<std::uint64_t>();
    s.origin_priors = j.at("origin_priors").get<std::array<double, kNumOrigins>>();
    s.treated_fraction = j.at("treated_fraction").get<double>();
    const auto& uv = j.at("uv");
    s.uv_baseline = uv.at("baseline").get<double>();
    s.uv_noise_sigma = uv.at("noise_sigma").get<double>();
    for (std::size_t o = 0; o < kNumOrigins; ++o) {
      s.uv_peaks[o].clear();
      for (const auto& p : uv.at("peaks").at(std::string(to_string(static_cast<Origin>(o)))))
        s.uv_peaks[o].push_back({p.at("center_nm").get<double>(), p.at("width_nm").get<double>(),
                                 p.at("amplitude").get<double>()});
    }
    const auto& f = j.at("ftir");
    s.ftir_baseline = f.at("baseline").get<double>();
    s.ftir_noise_sigma = f.at("noise_sigma").get<double>();
    s.td_band_center = f.at("td_band_center").get<double>();
    s.td_band_width = f.at("td_band_width").get<double>();
    s.td_band_amplitude = f.at("td_band_amplitude").get<double>();
    auto elements = [](const json& src, auto& table, const auto& names, double& noise) {
      noise = src.at("noise_log_sigma").get<double>();
      for (std::size_t o = 0; o < kNumOrigins; ++o) {
        const auto& row = src.at("entries").at(std::string(to_string(static_cast<Origin>(o))));
        for (std::size_t k = 0; k < names.size(); ++k) {
          const auto& e = row.at(std::string(names[k]));
          table[o][k] = {e.at("mean_ppm").get<double>(), e.at("log_sigma").get<double>()};
        }
      }
    };
    elements(j.at("xrf"), s.xrf, xrf_manifest(), s.xrf_noise_log_sigma);
    elements(j.at("icpms"), s.icpms, icpms_manifest(), s.icpms_noise_log_sigma);
    s.repeat_fraction = j.value("repeat_fraction", 0.0);
    s.missing_fraction = j.value("missing_fraction", 0.0);
    s.first_day = j.value("first_day", std::int64_t{15706});
    s.day_span = j.value("day_span", std::int64_t{2920});
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("generator spec: ") + e.what());
  }
  validate_spec(s);
  return s;
}

GeneratorSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return spec_from_json(ss.str());
}

void save_spec(const GeneratorSpec& spec, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + path.string());
  out << spec_to_json(spec) << '\n';
}

GeneratorSpec resolve_spec(const std::string& name_or_path) {
  if (name_or_path == "easy") return easy_spec();
  if (name_or_path == "realistic") return realistic_spec();
  return load_spec(name_or_path);
}

}  // namespace gemnet
