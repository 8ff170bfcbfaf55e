#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gemnet/core_types.hpp"

namespace gemnet {

/// Gaussian absorbance bump on the UV wavelength grid.
struct UvPeak {
  double center_nm = 0.0;
  double width_nm = 1.0;  // standard deviation
  double amplitude = 0.0;
};

/// Log-normal concentration model for one elemental entry and origin.
/// `mean_ppm` is the arithmetic mean of the stone-level distribution;
/// `log_sigma` the stone-to-stone spread in log space.
struct ElementModel {
  double mean_ppm = 1.0;
  double log_sigma = 0.1;
};

/// Generative model for synthetic corpora. Spectra carry i.i.d. Gaussian
/// noise around class-conditional means; concentrations are log-normal with a
/// per-stone latent (shared by repeat evaluations) plus measurement noise.
/// Both choices keep the class posterior closed-form.
struct GeneratorSpec {
  std::string name = "custom";
  std::uint64_t seed = 1;
  std::array<double, kNumOrigins> origin_priors{0.25, 0.25, 0.25, 0.25};
  double treated_fraction = 0.5;

  double uv_baseline = 0.2;
  double uv_noise_sigma = 0.02;
  std::array<std::vector<UvPeak>, kNumOrigins> uv_peaks;

  double ftir_baseline = 0.5;
  double ftir_noise_sigma = 0.05;
  double td_band_center = 3309.0;
  double td_band_width = 20.0;  // standard deviation, cm^-1
  double td_band_amplitude = 0.1;

  std::array<std::array<ElementModel, kXrfLength>, kNumOrigins> xrf;
  double xrf_noise_log_sigma = 0.05;
  std::array<std::array<ElementModel, kIcpmsLength>, kNumOrigins> icpms;
  double icpms_noise_log_sigma = 0.05;

  double repeat_fraction = 0.0;   // stones that get a second evaluation
  double missing_fraction = 0.0;  // per-source drop probability
  std::int64_t first_day = 15706;  // 2013-01-01 in epoch days
  std::int64_t day_span = 2920;
};

/// Structural checks: priors sum to 1, amplitudes >= 0, sigmas > 0.
/// Throws InvalidConfig.
void validate_spec(const GeneratorSpec& spec);
/// Fraction of `n` sampled stones whose first draw passes every ingest gate.
double empirical_validity(const GeneratorSpec& spec, std::size_t n = 200);
/// validate_spec plus the empirical gate check (>= 0.99).
void check_spec(const GeneratorSpec& spec);

GeneratorSpec easy_spec();
GeneratorSpec realistic_spec();
/// "easy", "realistic", or a path to a spec file.
GeneratorSpec resolve_spec(const std::string& name_or_path);

std::string spec_to_json(const GeneratorSpec& spec);
GeneratorSpec spec_from_json(const std::string& text);
GeneratorSpec load_spec(const std::filesystem::path& path);
void save_spec(const GeneratorSpec& spec, const std::filesystem::path& path);

/// Class-conditional mean spectra (noise-free).
std::vector<double> uv_mean(const GeneratorSpec& spec, Origin origin);  // 1201 values
std::vector<double> ftir_mean(const GeneratorSpec& spec, Treatment treatment);  // 6801

/// Deterministic in (spec, origin, treated, stone_seed, evaluation). The
/// stone-level latent depends only on stone_seed so repeat evaluations share
/// it. Invalid draws are retried with a new noise sub-seed up to 16 times,
/// then GenerationFailed.
StoneRecord gen_stone(const GeneratorSpec& spec, Origin origin, Treatment treated,
                      std::uint64_t stone_seed, std::uint32_t evaluation = 0,
                      const std::string& stone_id = {});

/// `n` distinct stones (ids S000000..), labels from the priors, optional
/// repeat evaluations and source dropout. Sorted by (stone_id, time).
std::vector<StoneRecord> gen_corpus(const GeneratorSpec& spec, std::size_t n);

/// Exact joint log-likelihood-based posterior over (origin, treatment),
/// marginalised to the task's classes, using only the present sources that
/// `use` admits (all present sources when empty). InvalidInput if none.
std::vector<double> bayes_posterior(const StoneRecord& record, const GeneratorSpec& spec,
                                    Task task = Task::OD,
                                    const std::vector<Source>& use = {});

/// Accuracy of the posterior argmax against record labels, over records that
/// carry the label and at least one admitted source.
double bayes_accuracy(const std::vector<StoneRecord>& records, const GeneratorSpec& spec,
                      Task task, const std::vector<Source>& use = {});

}  // namespace gemnet
