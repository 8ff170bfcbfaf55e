#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gemnet/core_types.hpp"
#include "gemnet/netprims.hpp"

namespace gemnet {

enum class ElementalPooling { Cls, Flatten };

std::string_view to_string(ElementalPooling p);
ElementalPooling pooling_from_string(std::string_view s);

struct ModelConfig {
  Task task = Task::OD;
  std::vector<Source> allowed_sources{Source::UV, Source::FTIR, Source::XRF, Source::ICPMS};

  std::size_t hidden = 128;
  std::size_t blocks = 6;
  std::size_t block_kernel = 17;
  std::size_t block_stride = 2;
  /// Per-block strides; empty means block_stride for every block.
  std::vector<std::size_t> block_strides;
  std::size_t stem_kernel = 59;
  /// Spectral input lengths; shorter values are only for tests on raw inputs.
  std::size_t uv_length = kUvLength;
  std::size_t ftir_length = kFtirLength;

  std::size_t elemental_dim = 32;  // encoder output length
  std::size_t token_dim = 32;
  std::size_t intra_heads = 4;
  std::size_t inter_heads = 4;
  std::size_t ff_mult = 2;
  std::size_t references = 32;
  ElementalPooling pooling = ElementalPooling::Cls;
  bool presence_flags = false;

  std::uint64_t seed = 1;  // parameter initialisation

  /// Defaults for a task: TD allows UV and FTIR only.
  static ModelConfig for_task(Task task);
  /// Same architecture at reduced width, sized for CPU cross-validation.
  static ModelConfig compact(Task task);
  /// Minimal widths and short spectra for finite-difference checks.
  static ModelConfig tiny(Task task);

  std::size_t num_classes() const { return gemnet::num_classes(task); }
  bool allows(Source s) const;
  std::size_t stride_of(std::size_t block) const;
  /// Elemental features per row: 26 for XRF plus 16 for ICP-MS when allowed.
  std::size_t elemental_features() const;
  bool has_elemental() const { return elemental_features() > 0; }
};

/// Throws InvalidConfig (task gating, head divisibility, zero sizes).
void validate_config(const ModelConfig& config);

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

/// Embedding length of a spectral encoder under the configured padding
/// arithmetic (stem and output convolutions keep length; each block maps L to
/// ceil(L / stride)).
std::size_t spectral_embedding_length(const ModelConfig& config, Source source);
/// Total width of the fused feature vector fed to the head.
std::size_t fused_width(const ModelConfig& config);

/// Per-source training means used to stand in for masked or missing sources.
struct SourceMeans {
  std::vector<double> uv;    // 2 x 1201, row-major
  std::vector<double> ftir;  // 6801
  std::vector<double> xrf;   // 26
  std::vector<double> icpms; // 16
  bool operator==(const SourceMeans&) const = default;
};

/// Means over the records carrying each source. MissingSourceStatistics when
/// a source in `required` is absent from every record; other absent sources
/// are left empty.
SourceMeans compute_source_means(std::span<const StoneRecord> records,
                                 std::span<const Source> required = kAllSources);

/// true = masked (replaced by the training means).
using MaskState = std::array<bool, kNumSources>;
inline constexpr MaskState kNoMask{false, false, false, false};

/// One stone as the network sees it, means already substituted.
struct ModelInput {
  std::vector<double> uv;         // 2 * uv_length, empty if UV not allowed
  std::vector<double> ftir;       // ftir_length, empty if FTIR not allowed
  std::vector<double> elemental;  // raw concentrations, elemental_features()
  std::array<bool, kNumSources> substituted{};
};

/// Builds the network input: allowed sources that are masked or missing take
/// the means. NoUsableData if every allowed source is substituted and
/// `require_observed` is set.
ModelInput make_input(const StoneRecord& record, const MaskState& mask, const SourceMeans& means,
                      const ModelConfig& config, bool require_observed = true);

/// Elemental row (XRF then ICP-MS, allowed sources only) of a record with all
/// needed sources present.
std::vector<double> elemental_row(const StoneRecord& record, const ModelConfig& config);

class SpectralEncoder {
 public:
  struct Cache {
    nn::Tensor x, stem_out, last, last_act;
    std::vector<nn::ResidualBlock::Cache> blocks;
  };

  SpectralEncoder() = default;
  SpectralEncoder(nn::ParamStore& store, const std::string& name, std::size_t in_channels,
                  std::size_t length, const ModelConfig& config, std::mt19937_64& rng);
  /// x: in_channels x length. Returns the flattened embedding.
  std::vector<double> forward(const nn::Tensor& x, Cache* cache) const;
  void backward(std::span<const double> d_embedding, const Cache& cache) const;
  std::size_t embedding_length() const { return embedding_length_; }

 private:
  nn::Conv1d stem_, out_;
  std::vector<nn::ResidualBlock> blocks_;
  std::size_t in_channels_ = 0, length_ = 0, embedding_length_ = 0;
};

/// Per-feature tokens, intrasample attention over each row's tokens, then
/// intersample attention in which every query row sees the reference rows
/// and itself. Query outputs are pooled to elemental_dim.
class ElementalEncoder {
 public:
  struct Cache {
    std::size_t refs = 0;
    nn::Tensor rows;  // transformed inputs, (R+B) x F
    std::vector<std::vector<std::uint8_t>> flags;
    std::vector<nn::Tensor> tokens;  // T x d per row
    std::vector<nn::IntrasampleAttention::Cache> intra;
    nn::Tensor stacked;  // (R+B) x T*d
    nn::IntersampleAttention::Cache inter;
    nn::Tensor pooled_in;  // B x (d or T*d)
  };

  ElementalEncoder() = default;
  ElementalEncoder(nn::ParamStore& store, const std::string& name, const ModelConfig& config,
                   std::mt19937_64& rng);
  /// queries: B raw rows; references: R raw rows (R >= 1). Returns B x out.
  /// `query_flags` (presence per feature) is used only with presence flags.
  nn::Tensor forward(const std::vector<std::vector<double>>& queries,
                     const std::vector<std::vector<std::uint8_t>>& query_flags,
                     const std::vector<std::vector<double>>& references, Cache* cache) const;
  void backward(const nn::Tensor& d_out, const Cache& cache) const;

 private:
  nn::Tensor embed(std::span<const double> row, std::span<const std::uint8_t> flags) const;
  void embed_backward(const nn::Tensor& d_tokens, std::span<const double> row,
                      std::span<const std::uint8_t> flags) const;

  nn::Param* w_ = nullptr;     // F x d
  nn::Param* b_ = nullptr;     // F x d
  nn::Param* flag_ = nullptr;  // F x d, presence flags only
  nn::Param* cls_ = nullptr;   // d
  nn::IntrasampleAttention intra_;
  nn::IntersampleAttention inter_;
  nn::Linear pool_;
  std::size_t features_ = 0, dim_ = 0;
  ElementalPooling pooling_ = ElementalPooling::Cls;
  bool presence_ = false;
};

/// Elemental inputs enter the encoder as log1p(ppm).
double elemental_transform(double ppm);

class Model {
 public:
  struct Cache {
    std::size_t batch = 0;
    std::vector<SpectralEncoder::Cache> uv, ftir;  // index per distinct input
    std::vector<std::size_t> uv_slot, ftir_slot;   // sample -> cache index
    ElementalEncoder::Cache elemental;
    nn::Tensor fused;
    nn::BatchNorm::Cache bn;
    nn::Tensor normed;
  };

  explicit Model(ModelConfig config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  const SourceMeans& means() const { return means_; }
  void set_means(SourceMeans means);
  const std::vector<std::vector<double>>& references() const { return references_; }
  /// Raw elemental rows; InvalidConfig if empty while the elemental encoder
  /// is in use.
  void set_references(std::vector<std::vector<double>> rows);
  /// Seeded choice of up to config.references training rows that carry every
  /// allowed elemental source.
  void choose_references(std::span<const StoneRecord> train, std::uint64_t seed);

  /// Batch forward to logits (B x C). Train mode needs B >= 2.
  nn::Tensor forward_logits(const std::vector<ModelInput>& batch, nn::BatchNormMode mode,
                            Cache* cache, bool update_running = true) const;
  /// Replaces the head's running statistics with the exact mean and unbiased
  /// variance of the fused features over `inputs`.
  void recompute_batchnorm(const std::vector<ModelInput>& inputs);
  /// Accumulates parameter gradients for d loss / d logits.
  void backward(const nn::Tensor& d_logits, const Cache& cache) const;

  std::vector<double> encode_uv(std::span<const double> values) const;
  std::vector<double> encode_ftir(std::span<const double> values) const;
  /// Query rows against the given references (the stored ones by default).
  nn::Tensor encode_elemental(const std::vector<std::vector<double>>& rows,
                              const std::vector<std::vector<double>>* references = nullptr) const;

  Prediction forward(const StoneRecord& record, const MaskState& mask = kNoMask) const;
  std::vector<Prediction> predict(std::span<const StoneRecord> records,
                                  const MaskState& mask = kNoMask) const;
  std::vector<Prediction> predict_inputs(const std::vector<ModelInput>& inputs) const;

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  nn::Tensor fuse(const std::vector<ModelInput>& batch, Cache* cache) const;

  ModelConfig config_;
  nn::ParamStore params_;
  std::optional<SpectralEncoder> uv_enc_, ftir_enc_;
  std::optional<ElementalEncoder> elem_enc_;
  nn::BatchNorm bn_;
  nn::Linear readout_;
  SourceMeans means_;
  std::vector<std::vector<double>> references_;
};

}  // namespace gemnet
