#include "gemnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <json.hpp>

#include "gemnet/error.hpp"
#include "gemnet/seed.hpp"

namespace gemnet {

using nlohmann::json;
using nn::Tensor;

namespace {

constexpr std::size_t kPredictChunk = 64;
constexpr int kModelFormatVersion = 1;

std::size_t source_index(Source s) { return static_cast<std::size_t>(s); }

}  // namespace

std::string_view to_string(ElementalPooling p) {
  return p == ElementalPooling::Cls ? "cls" : "flatten";
}

ElementalPooling pooling_from_string(std::string_view s) {
  if (s == "cls") return ElementalPooling::Cls;
  if (s == "flatten") return ElementalPooling::Flatten;
  fail(ErrorKind::InvalidConfig, "unknown pooling '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::for_task(Task task) {
  ModelConfig c;
  c.task = task;
  if (task == Task::TD) c.allowed_sources = {Source::UV, Source::FTIR};
  return c;
}

ModelConfig ModelConfig::compact(Task task) {
  ModelConfig c = for_task(task);
  c.hidden = 8;
  c.token_dim = 8;
  c.intra_heads = 2;
  c.inter_heads = 2;
  c.references = 16;
  return c;
}

ModelConfig ModelConfig::tiny(Task task) {
  ModelConfig c = for_task(task);
  c.hidden = 8;
  c.blocks = 2;
  c.block_kernel = 3;
  c.stem_kernel = 5;
  c.uv_length = 12;
  c.ftir_length = 20;
  c.elemental_dim = 4;
  c.token_dim = 4;
  c.intra_heads = 2;
  c.inter_heads = 2;
  c.ff_mult = 1;
  c.references = 3;
  return c;
}

bool ModelConfig::allows(Source s) const {
  return std::find(allowed_sources.begin(), allowed_sources.end(), s) != allowed_sources.end();
}

std::size_t ModelConfig::stride_of(std::size_t block) const {
  return block_strides.empty() ? block_stride : block_strides.at(block);
}

std::size_t ModelConfig::elemental_features() const {
  return (allows(Source::XRF) ? kXrfLength : 0) + (allows(Source::ICPMS) ? kIcpmsLength : 0);
}

void validate_config(const ModelConfig& c) {
  require(!c.allowed_sources.empty(), ErrorKind::InvalidConfig, "no allowed sources");
  for (Source s : c.allowed_sources)
    require(source_allowed_for_task(c.task, s), ErrorKind::InvalidConfig,
            std::string(to_string(s)) + " is not a permitted input for " +
                std::string(to_string(c.task)));
  for (std::size_t i = 0; i < c.allowed_sources.size(); ++i)
    for (std::size_t j = i + 1; j < c.allowed_sources.size(); ++j)
      require(c.allowed_sources[i] != c.allowed_sources[j], ErrorKind::InvalidConfig,
              "duplicate allowed source");
  require(c.hidden >= 1 && c.blocks >= 1 && c.block_kernel >= 1 && c.block_stride >= 1 &&
              c.stem_kernel >= 1 && c.uv_length >= 1 && c.ftir_length >= 1,
          ErrorKind::InvalidConfig, "spectral encoder sizes must be positive");
  require(c.block_strides.empty() || c.block_strides.size() == c.blocks,
          ErrorKind::InvalidConfig, "block_strides needs one entry per block");
  for (std::size_t s : c.block_strides)
    require(s >= 1, ErrorKind::InvalidConfig, "block strides must be >= 1");
  if (c.has_elemental()) {
    require(c.elemental_dim >= 1 && c.token_dim >= 1 && c.ff_mult >= 1 && c.references >= 1,
            ErrorKind::InvalidConfig, "elemental encoder sizes must be positive");
    require(c.intra_heads >= 1 && c.token_dim % c.intra_heads == 0, ErrorKind::InvalidConfig,
            "token_dim must be divisible by intra_heads");
    const std::size_t width = (c.elemental_features() + 1) * c.token_dim;
    require(c.inter_heads >= 1 && width % c.inter_heads == 0, ErrorKind::InvalidConfig,
            "intersample width must be divisible by inter_heads");
  }
}

std::string config_to_json(const ModelConfig& c) {
  json j;
  j["task"] = std::string(to_string(c.task));
  j["allowed_sources"] = json::array();
  for (Source s : c.allowed_sources) j["allowed_sources"].push_back(std::string(to_string(s)));
  j["hidden"] = c.hidden;
  j["blocks"] = c.blocks;
  j["block_kernel"] = c.block_kernel;
  j["block_stride"] = c.block_stride;
  j["block_strides"] = c.block_strides;
  j["stem_kernel"] = c.stem_kernel;
  j["uv_length"] = c.uv_length;
  j["ftir_length"] = c.ftir_length;
  j["elemental_dim"] = c.elemental_dim;
  j["token_dim"] = c.token_dim;
  j["intra_heads"] = c.intra_heads;
  j["inter_heads"] = c.inter_heads;
  j["ff_mult"] = c.ff_mult;
  j["references"] = c.references;
  j["pooling"] = std::string(to_string(c.pooling));
  j["presence_flags"] = c.presence_flags;
  j["seed"] = c.seed;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    static const std::set<std::string> known = {
        "task",          "preset",    "allowed_sources", "hidden",        "blocks",
        "block_kernel",  "block_stride", "block_strides", "stem_kernel",  "uv_length",
        "ftir_length",   "elemental_dim", "token_dim",    "intra_heads",  "inter_heads",
        "ff_mult",       "references", "presence_flags",  "seed",         "pooling"};
    for (const auto& [key, value] : j.items())
      require(known.count(key) > 0, ErrorKind::InvalidConfig, "unknown model config key '" + key + "'");
    c = ModelConfig::for_task(task_from_string(j.value("task", std::string("OD"))));
    if (j.contains("preset")) {
      const auto preset = j.at("preset").get<std::string>();
      if (preset == "compact")
        c = ModelConfig::compact(c.task);
      else if (preset == "tiny")
        c = ModelConfig::tiny(c.task);
      else
        require(preset == "full", ErrorKind::InvalidConfig, "unknown preset '" + preset + "'");
    }
    if (j.contains("allowed_sources")) {
      c.allowed_sources.clear();
      for (const auto& s : j.at("allowed_sources"))
        c.allowed_sources.push_back(source_from_string(s.get<std::string>()));
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("hidden", c.hidden);
    get("blocks", c.blocks);
    get("block_kernel", c.block_kernel);
    get("block_stride", c.block_stride);
    get("block_strides", c.block_strides);
    get("stem_kernel", c.stem_kernel);
    get("uv_length", c.uv_length);
    get("ftir_length", c.ftir_length);
    get("elemental_dim", c.elemental_dim);
    get("token_dim", c.token_dim);
    get("intra_heads", c.intra_heads);
    get("inter_heads", c.inter_heads);
    get("ff_mult", c.ff_mult);
    get("references", c.references);
    get("presence_flags", c.presence_flags);
    get("seed", c.seed);
    if (j.contains("pooling")) c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("model config: ") + e.what());
  }
  validate_config(c);
  return c;
}

std::size_t spectral_embedding_length(const ModelConfig& c, Source source) {
  require(source == Source::UV || source == Source::FTIR, ErrorKind::InvalidInput,
          "not a spectral source");
  std::size_t len = source == Source::UV ? c.uv_length : c.ftir_length;
  for (std::size_t b = 0; b < c.blocks; ++b)
    len = nn::conv1d_output_length(len, c.block_kernel, c.stride_of(b), nn::Padding::Same);
  return len;
}

std::size_t fused_width(const ModelConfig& c) {
  std::size_t w = 0;
  if (c.allows(Source::UV)) w += spectral_embedding_length(c, Source::UV);
  if (c.allows(Source::FTIR)) w += spectral_embedding_length(c, Source::FTIR);
  if (c.has_elemental()) w += c.elemental_dim;
  return w;
}

// ---------------------------------------------------------------------------
// Means and inputs

SourceMeans compute_source_means(std::span<const StoneRecord> records,
                                 std::span<const Source> required) {
  SourceMeans m;
  std::array<std::size_t, kNumSources> count{};
  auto accumulate = [](std::vector<double>& acc, auto values) {
    if (acc.empty()) acc.assign(values.size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) acc[i] += values[i];
  };
  for (const auto& r : records) {
    if (r.uv) accumulate(m.uv, r.uv->values()), ++count[0];
    if (r.ftir) accumulate(m.ftir, r.ftir->values()), ++count[1];
    if (r.xrf) accumulate(m.xrf, std::span<const double>(r.xrf->values())), ++count[2];
    if (r.icpms) accumulate(m.icpms, std::span<const double>(r.icpms->values())), ++count[3];
  }
  std::array<std::vector<double>*, kNumSources> slots{&m.uv, &m.ftir, &m.xrf, &m.icpms};
  for (std::size_t s = 0; s < kNumSources; ++s)
    for (auto& v : *slots[s]) v /= static_cast<double>(count[s]);
  for (Source s : required)
    require(count[source_index(s)] > 0, ErrorKind::MissingSourceStatistics,
            "no training record carries " + std::string(to_string(s)));
  return m;
}

namespace {

void fill_substitute(std::vector<double>& out, const std::vector<double>& means, Source s,
                     std::size_t expected) {
  require(!means.empty(), ErrorKind::MissingSourceStatistics,
          "no means available for " + std::string(to_string(s)));
  require(means.size() == expected, ErrorKind::ShapeError,
          "means for " + std::string(to_string(s)) + " have the wrong length");
  out.insert(out.end(), means.begin(), means.end());
}

}  // namespace

ModelInput make_input(const StoneRecord& record, const MaskState& mask, const SourceMeans& means,
                      const ModelConfig& c, bool require_observed) {
  ModelInput in;
  auto observed = [&](Source s) { return record.has(s) && !mask[source_index(s)]; };
  if (c.allows(Source::UV)) {
    const std::size_t n = kUvRows * c.uv_length;
    if (observed(Source::UV)) {
      const auto v = record.uv->values();
      require(v.size() == n, ErrorKind::ShapeError, "UV length does not match the model");
      in.uv.assign(v.begin(), v.end());
    } else {
      fill_substitute(in.uv, means.uv, Source::UV, n);
      in.substituted[0] = true;
    }
  }
  if (c.allows(Source::FTIR)) {
    if (observed(Source::FTIR)) {
      const auto v = record.ftir->values();
      require(v.size() == c.ftir_length, ErrorKind::ShapeError,
              "FTIR length does not match the model");
      in.ftir.assign(v.begin(), v.end());
    } else {
      fill_substitute(in.ftir, means.ftir, Source::FTIR, c.ftir_length);
      in.substituted[1] = true;
    }
  }
  in.elemental.reserve(c.elemental_features());
  if (c.allows(Source::XRF)) {
    if (observed(Source::XRF)) {
      in.elemental.insert(in.elemental.end(), record.xrf->values().begin(),
                          record.xrf->values().end());
    } else {
      fill_substitute(in.elemental, means.xrf, Source::XRF, kXrfLength);
      in.substituted[2] = true;
    }
  }
  if (c.allows(Source::ICPMS)) {
    if (observed(Source::ICPMS)) {
      in.elemental.insert(in.elemental.end(), record.icpms->values().begin(),
                          record.icpms->values().end());
    } else {
      fill_substitute(in.elemental, means.icpms, Source::ICPMS, kIcpmsLength);
      in.substituted[3] = true;
    }
  }
  if (require_observed) {
    const bool any = std::any_of(c.allowed_sources.begin(), c.allowed_sources.end(),
                                 [&](Source s) { return !in.substituted[source_index(s)]; });
    require(any, ErrorKind::NoUsableData,
            "record " + record.stone_id + " has no usable source for this model");
  }
  return in;
}

std::vector<double> elemental_row(const StoneRecord& record, const ModelConfig& c) {
  std::vector<double> row;
  row.reserve(c.elemental_features());
  if (c.allows(Source::XRF)) {
    require(record.xrf.has_value(), ErrorKind::InvalidInput, "record lacks XRF");
    row.insert(row.end(), record.xrf->values().begin(), record.xrf->values().end());
  }
  if (c.allows(Source::ICPMS)) {
    require(record.icpms.has_value(), ErrorKind::InvalidInput, "record lacks ICP-MS");
    row.insert(row.end(), record.icpms->values().begin(), record.icpms->values().end());
  }
  return row;
}

// ---------------------------------------------------------------------------
// Spectral encoder

SpectralEncoder::SpectralEncoder(nn::ParamStore& store, const std::string& name,
                                 std::size_t in_channels, std::size_t length,
                                 const ModelConfig& c, std::mt19937_64& rng)
    : in_channels_(in_channels), length_(length) {
  stem_ = nn::Conv1d(store, name + ".stem", in_channels, c.hidden, c.stem_kernel, 1,
                     nn::Padding::Same, rng);
  std::size_t len = length;
  for (std::size_t b = 0; b < c.blocks; ++b) {
    blocks_.emplace_back(store, name + ".block" + std::to_string(b), c.hidden, c.hidden,
                         c.block_kernel, c.stride_of(b), rng);
    len = blocks_.back().output_length(len);
  }
  out_ = nn::Conv1d(store, name + ".out", c.hidden, 1, 1, 1, nn::Padding::Same, rng);
  embedding_length_ = len;
}

std::vector<double> SpectralEncoder::forward(const Tensor& x, Cache* cache) const {
  require(x.rank() == 2 && x.dim(0) == in_channels_ && x.dim(1) == length_,
          ErrorKind::ShapeError,
          "spectral encoder expects " + std::to_string(in_channels_) + "x" +
              std::to_string(length_) + ", got " + nn::shape_string(x.shape));
  Tensor h = stem_.forward(x);
  if (cache) {
    cache->x = x;
    cache->stem_out = h;
    cache->blocks.resize(blocks_.size());
  }
  for (std::size_t b = 0; b < blocks_.size(); ++b)
    h = blocks_[b].forward(h, cache ? &cache->blocks[b] : nullptr);
  Tensor a = nn::relu(h);
  Tensor y = out_.forward(a);
  if (cache) {
    cache->last = std::move(h);
    cache->last_act = std::move(a);
  }
  return std::move(y.data);
}

void SpectralEncoder::backward(std::span<const double> d_embedding, const Cache& cache) const {
  Tensor dy({1, embedding_length_}, std::vector<double>(d_embedding.begin(), d_embedding.end()));
  Tensor d = out_.backward(dy, cache.last_act);
  d = nn::relu_backward(d, cache.last);
  for (std::size_t b = blocks_.size(); b-- > 0;) d = blocks_[b].backward(d, cache.blocks[b]);
  stem_.backward(d, cache.x, /*need_dx=*/false);
}

// ---------------------------------------------------------------------------
// Elemental encoder

double elemental_transform(double ppm) { return std::log1p(ppm); }

ElementalEncoder::ElementalEncoder(nn::ParamStore& store, const std::string& name,
                                   const ModelConfig& c, std::mt19937_64& rng)
    : features_(c.elemental_features()),
      dim_(c.token_dim),
      pooling_(c.pooling),
      presence_(c.presence_flags) {
  w_ = &store.add(name + ".token_weight", {features_, dim_}, nn::Init::Uniform, rng, 1.0, 1.0);
  b_ = &store.add(name + ".token_bias", {features_, dim_}, nn::Init::Uniform, rng, 1.0, 1.0);
  if (presence_)
    flag_ = &store.add(name + ".token_flag", {features_, dim_}, nn::Init::Uniform, rng, 1.0, 1.0);
  cls_ = &store.add(name + ".cls", {dim_}, nn::Init::Uniform, rng, 1.0, 1.0);
  intra_ = nn::IntrasampleAttention(store, name + ".intra", dim_, c.intra_heads, c.ff_mult, rng);
  const std::size_t width = (features_ + 1) * dim_;
  inter_ = nn::IntersampleAttention(store, name + ".inter", width, c.inter_heads, c.ff_mult, rng);
  pool_ = nn::Linear(store, name + ".pool",
                     pooling_ == ElementalPooling::Cls ? dim_ : width, c.elemental_dim, rng);
}

Tensor ElementalEncoder::embed(std::span<const double> row,
                               std::span<const std::uint8_t> flags) const {
  Tensor t({features_ + 1, dim_});
  std::copy(cls_->value.data.begin(), cls_->value.data.end(), t.data.begin());
  for (std::size_t j = 0; j < features_; ++j) {
    double* out = t.ptr() + (j + 1) * dim_;
    const double* w = w_->value.ptr() + j * dim_;
    const double* b = b_->value.ptr() + j * dim_;
    for (std::size_t k = 0; k < dim_; ++k) out[k] = row[j] * w[k] + b[k];
    if (presence_ && flags[j]) {
      const double* f = flag_->value.ptr() + j * dim_;
      for (std::size_t k = 0; k < dim_; ++k) out[k] += f[k];
    }
  }
  return t;
}

void ElementalEncoder::embed_backward(const Tensor& d, std::span<const double> row,
                                      std::span<const std::uint8_t> flags) const {
  for (std::size_t k = 0; k < dim_; ++k) cls_->grad[k] += d[k];
  for (std::size_t j = 0; j < features_; ++j) {
    const double* g = d.ptr() + (j + 1) * dim_;
    double* gw = w_->grad.ptr() + j * dim_;
    double* gb = b_->grad.ptr() + j * dim_;
    for (std::size_t k = 0; k < dim_; ++k) {
      gw[k] += row[j] * g[k];
      gb[k] += g[k];
    }
    if (presence_ && flags[j]) {
      double* gf = flag_->grad.ptr() + j * dim_;
      for (std::size_t k = 0; k < dim_; ++k) gf[k] += g[k];
    }
  }
}

Tensor ElementalEncoder::forward(const std::vector<std::vector<double>>& queries,
                                 const std::vector<std::vector<std::uint8_t>>& query_flags,
                                 const std::vector<std::vector<double>>& references,
                                 Cache* cache) const {
  require(!references.empty(), ErrorKind::InvalidConfig, "empty reference set");
  require(!queries.empty(), ErrorKind::InvalidInput, "no elemental rows to encode");
  const std::size_t r = references.size(), b = queries.size(), n = r + b;
  const std::size_t t = features_ + 1, width = t * dim_;

  Tensor rows({n, features_});
  std::vector<std::vector<std::uint8_t>> flags(n, std::vector<std::uint8_t>(features_, 1));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& src = i < r ? references[i] : queries[i - r];
    require(src.size() == features_, ErrorKind::ShapeError,
            "elemental row has " + std::to_string(src.size()) + " entries, expected " +
                std::to_string(features_));
    for (std::size_t j = 0; j < features_; ++j) rows.at2(i, j) = elemental_transform(src[j]);
    if (i >= r && !query_flags.empty()) flags[i] = query_flags[i - r];
  }

  Tensor stacked({n, width});
  std::vector<Tensor> tokens;
  std::vector<nn::IntrasampleAttention::Cache> intra;
  if (cache) {
    tokens.reserve(n);
    intra.resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    Tensor tok = embed(std::span<const double>(rows.ptr() + i * features_, features_), flags[i]);
    const Tensor h = intra_.forward(tok, cache ? &intra[i] : nullptr);
    std::copy(h.data.begin(), h.data.end(), stacked.ptr() + i * width);
    if (cache) tokens.push_back(std::move(tok));
  }

  nn::IntersampleAttention::Cache inter_cache;
  const Tensor mixed = inter_.forward(stacked, cache ? &inter_cache : nullptr, r);

  const std::size_t pin = pooling_ == ElementalPooling::Cls ? dim_ : width;
  Tensor pooled_in({b, pin});
  for (std::size_t q = 0; q < b; ++q)
    std::copy_n(mixed.ptr() + (r + q) * width, pin, pooled_in.ptr() + q * pin);
  Tensor out = pool_.forward(pooled_in);

  if (cache) {
    cache->refs = r;
    cache->rows = std::move(rows);
    cache->flags = std::move(flags);
    cache->tokens = std::move(tokens);
    cache->intra = std::move(intra);
    cache->stacked = std::move(stacked);
    cache->inter = std::move(inter_cache);
    cache->pooled_in = std::move(pooled_in);
  }
  return out;
}

void ElementalEncoder::backward(const Tensor& d_out, const Cache& c) const {
  const std::size_t n = c.rows.dim(0), r = c.refs, b = n - r;
  const std::size_t t = features_ + 1, width = t * dim_;
  const std::size_t pin = c.pooled_in.dim(1);
  const Tensor d_pooled = pool_.backward(d_out, c.pooled_in);
  Tensor d_mixed({n, width});
  for (std::size_t q = 0; q < b; ++q)
    std::copy_n(d_pooled.ptr() + q * pin, pin, d_mixed.ptr() + (r + q) * width);
  const Tensor d_stacked = inter_.backward(d_mixed, c.inter);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor d_h({t, dim_});
    std::copy_n(d_stacked.ptr() + i * width, width, d_h.ptr());
    const Tensor d_tok = intra_.backward(d_h, c.intra[i]);
    embed_backward(d_tok, std::span<const double>(c.rows.ptr() + i * features_, features_),
                   c.flags[i]);
  }
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig config) : config_(std::move(config)) {
  validate_config(config_);
  std::mt19937_64 rng(derive_seed(config_.seed, "model-init"));
  if (config_.allows(Source::UV))
    uv_enc_.emplace(params_, "uv", kUvRows, config_.uv_length, config_, rng);
  if (config_.allows(Source::FTIR))
    ftir_enc_.emplace(params_, "ftir", 1, config_.ftir_length, config_, rng);
  if (config_.has_elemental()) elem_enc_.emplace(params_, "elemental", config_, rng);
  const std::size_t width = fused_width(config_);
  bn_ = nn::BatchNorm(params_, "head.bn", width, rng);
  readout_ = nn::Linear(params_, "head.readout", width, config_.num_classes(), rng);
  if (uv_enc_)
    require(uv_enc_->embedding_length() == spectral_embedding_length(config_, Source::UV),
            ErrorKind::ShapeError, "UV embedding length disagrees with the length formula");
  if (ftir_enc_)
    require(ftir_enc_->embedding_length() == spectral_embedding_length(config_, Source::FTIR),
            ErrorKind::ShapeError, "FTIR embedding length disagrees with the length formula");
}

void Model::set_means(SourceMeans means) { means_ = std::move(means); }

void Model::set_references(std::vector<std::vector<double>> rows) {
  if (config_.has_elemental())
    require(!rows.empty(), ErrorKind::InvalidConfig, "empty reference set");
  for (const auto& r : rows)
    require(r.size() == config_.elemental_features(), ErrorKind::ShapeError,
            "reference row has the wrong width");
  references_ = std::move(rows);
}

void Model::choose_references(std::span<const StoneRecord> train, std::uint64_t seed) {
  if (!config_.has_elemental()) return;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& r = train[i];
    if ((!config_.allows(Source::XRF) || r.xrf) && (!config_.allows(Source::ICPMS) || r.icpms))
      candidates.push_back(i);
  }
  require(!candidates.empty(), ErrorKind::InvalidConfig,
          "empty reference set: no training record carries every elemental source");
  std::mt19937_64 rng(derive_seed(seed, "references"));
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(std::min(candidates.size(), config_.references));
  std::vector<std::vector<double>> rows;
  rows.reserve(candidates.size());
  for (std::size_t i : candidates) rows.push_back(elemental_row(train[i], config_));
  set_references(std::move(rows));
}

Tensor Model::fuse(const std::vector<ModelInput>& batch, Cache* cache) const {
  const std::size_t b = batch.size();
  require(b >= 1, ErrorKind::InvalidBatch, "empty batch");
  const std::size_t width = fused_width(config_);
  Tensor fused({b, width});
  std::size_t offset = 0;

  // Substituted inputs are identical across the batch, so each encoder sees
  // them once.
  auto run_spectral = [&](const SpectralEncoder& enc, Source s, std::size_t channels,
                          std::size_t length, std::vector<SpectralEncoder::Cache>* caches,
                          std::vector<std::size_t>* slots) {
    const std::size_t e = enc.embedding_length();
    const std::size_t si = source_index(s);
    std::optional<std::size_t> shared_slot;
    std::vector<double> shared;
    std::vector<SpectralEncoder::Cache> local;
    auto& cs = caches ? *caches : local;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& values = s == Source::UV ? batch[i].uv : batch[i].ftir;
      require(values.size() == channels * length, ErrorKind::ShapeError,
              std::string(to_string(s)) + " input has the wrong length");
      std::vector<double> emb;
      std::size_t slot = 0;
      if (batch[i].substituted[si] && shared_slot) {
        slot = *shared_slot;
        emb = shared;
      } else {
        slot = cs.size();
        if (caches) cs.emplace_back();
        emb = enc.forward(Tensor({channels, length}, values), caches ? &cs.back() : nullptr);
        if (batch[i].substituted[si]) {
          shared_slot = slot;
          shared = emb;
        }
      }
      if (slots) slots->push_back(slot);
      std::copy(emb.begin(), emb.end(), fused.ptr() + i * width + offset);
    }
    offset += e;
  };

  if (cache) {
    *cache = Cache{};
    cache->batch = b;
  }
  if (uv_enc_)
    run_spectral(*uv_enc_, Source::UV, kUvRows, config_.uv_length, cache ? &cache->uv : nullptr,
                 cache ? &cache->uv_slot : nullptr);
  if (ftir_enc_)
    run_spectral(*ftir_enc_, Source::FTIR, 1, config_.ftir_length,
                 cache ? &cache->ftir : nullptr, cache ? &cache->ftir_slot : nullptr);
  if (elem_enc_) {
    std::vector<std::vector<double>> rows;
    std::vector<std::vector<std::uint8_t>> flags;
    rows.reserve(b);
    for (const auto& in : batch) {
      rows.push_back(in.elemental);
      if (config_.presence_flags) {
        std::vector<std::uint8_t> f;
        if (config_.allows(Source::XRF)) f.insert(f.end(), kXrfLength, !in.substituted[2]);
        if (config_.allows(Source::ICPMS)) f.insert(f.end(), kIcpmsLength, !in.substituted[3]);
        flags.push_back(std::move(f));
      }
    }
    const Tensor e =
        elem_enc_->forward(rows, flags, references_, cache ? &cache->elemental : nullptr);
    for (std::size_t i = 0; i < b; ++i)
      std::copy_n(e.ptr() + i * config_.elemental_dim, config_.elemental_dim,
                  fused.ptr() + i * width + offset);
    offset += config_.elemental_dim;
  }
  return fused;
}

Tensor Model::forward_logits(const std::vector<ModelInput>& batch, nn::BatchNormMode mode,
                             Cache* cache, bool update_running) const {
  Tensor fused = fuse(batch, cache);
  nn::BatchNorm::Cache bn_cache;
  Tensor normed = bn_.forward(fused, mode, cache ? &bn_cache : nullptr, update_running);
  Tensor logits = readout_.forward(normed);
  if (cache) {
    cache->fused = std::move(fused);
    cache->bn = std::move(bn_cache);
    cache->normed = std::move(normed);
  }
  return logits;
}

void Model::backward(const Tensor& d_logits, const Cache& c) const {
  const std::size_t b = c.batch, width = fused_width(config_);
  const Tensor d_normed = readout_.backward(d_logits, c.normed);
  const Tensor d_fused = bn_.backward(d_normed, c.bn);
  std::size_t offset = 0;

  auto back_spectral = [&](const SpectralEncoder& enc,
                           const std::vector<SpectralEncoder::Cache>& caches,
                           const std::vector<std::size_t>& slots) {
    const std::size_t e = enc.embedding_length();
    std::vector<std::vector<double>> grads(caches.size(), std::vector<double>(e, 0.0));
    for (std::size_t i = 0; i < b; ++i) {
      const double* g = d_fused.ptr() + i * width + offset;
      auto& acc = grads[slots[i]];
      for (std::size_t k = 0; k < e; ++k) acc[k] += g[k];
    }
    for (std::size_t s = 0; s < caches.size(); ++s) enc.backward(grads[s], caches[s]);
    offset += e;
  };
  if (uv_enc_) back_spectral(*uv_enc_, c.uv, c.uv_slot);
  if (ftir_enc_) back_spectral(*ftir_enc_, c.ftir, c.ftir_slot);
  if (elem_enc_) {
    const std::size_t e = config_.elemental_dim;
    Tensor d_e({b, e});
    for (std::size_t i = 0; i < b; ++i)
      std::copy_n(d_fused.ptr() + i * width + offset, e, d_e.ptr() + i * e);
    elem_enc_->backward(d_e, c.elemental);
  }
}

std::vector<double> Model::encode_uv(std::span<const double> values) const {
  require(uv_enc_.has_value(), ErrorKind::InvalidConfig, "model has no UV encoder");
  return uv_enc_->forward(
      Tensor({kUvRows, config_.uv_length}, std::vector<double>(values.begin(), values.end())),
      nullptr);
}

std::vector<double> Model::encode_ftir(std::span<const double> values) const {
  require(ftir_enc_.has_value(), ErrorKind::InvalidConfig, "model has no FTIR encoder");
  return ftir_enc_->forward(
      Tensor({1, config_.ftir_length}, std::vector<double>(values.begin(), values.end())),
      nullptr);
}

Tensor Model::encode_elemental(const std::vector<std::vector<double>>& rows,
                               const std::vector<std::vector<double>>* references) const {
  require(elem_enc_.has_value(), ErrorKind::InvalidConfig, "model has no elemental encoder");
  return elem_enc_->forward(rows, {}, references ? *references : references_, nullptr);
}

void Model::recompute_batchnorm(const std::vector<ModelInput>& inputs) {
  const std::size_t n = inputs.size();
  require(n >= 2, ErrorKind::InvalidBatch, "batch statistics need at least 2 inputs");
  const std::size_t width = fused_width(config_);
  std::vector<double> sum(width, 0.0), sq(width, 0.0);
  std::vector<Tensor> chunks;
  for (std::size_t start = 0; start < n; start += kPredictChunk) {
    const std::size_t end = std::min(n, start + kPredictChunk);
    const std::vector<ModelInput> chunk(inputs.begin() + static_cast<std::ptrdiff_t>(start),
                                        inputs.begin() + static_cast<std::ptrdiff_t>(end));
    chunks.push_back(fuse(chunk, nullptr));
    const Tensor& f = chunks.back();
    for (std::size_t i = 0; i < f.dim(0); ++i)
      for (std::size_t j = 0; j < width; ++j) sum[j] += f.at2(i, j);
  }
  for (double& v : sum) v /= static_cast<double>(n);
  for (const auto& f : chunks)
    for (std::size_t i = 0; i < f.dim(0); ++i)
      for (std::size_t j = 0; j < width; ++j) {
        const double d = f.at2(i, j) - sum[j];
        sq[j] += d * d;
      }
  auto& mean = params_.get("head.bn.running_mean").value;
  auto& var = params_.get("head.bn.running_var").value;
  for (std::size_t j = 0; j < width; ++j) {
    mean[j] = sum[j];
    var[j] = sq[j] / static_cast<double>(n - 1);
  }
}

std::vector<Prediction> Model::predict_inputs(const std::vector<ModelInput>& inputs) const {
  std::vector<Prediction> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += kPredictChunk) {
    const std::size_t end = std::min(inputs.size(), start + kPredictChunk);
    const std::vector<ModelInput> chunk(inputs.begin() + static_cast<std::ptrdiff_t>(start),
                                        inputs.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor logits = forward_logits(chunk, nn::BatchNormMode::Eval, nullptr, false);
    require(logits.all_finite(), ErrorKind::NumericalError, "non-finite logits");
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      out.push_back(Prediction::from_probs(
          nn::softmax(std::span<const double>(logits.ptr() + i * c, c)), config_.task));
  }
  return out;
}

Prediction Model::forward(const StoneRecord& record, const MaskState& mask) const {
  return predict_inputs({make_input(record, mask, means_, config_)}).front();
}

std::vector<Prediction> Model::predict(std::span<const StoneRecord> records,
                                       const MaskState& mask) const {
  std::vector<ModelInput> inputs;
  inputs.reserve(records.size());
  for (const auto& r : records) inputs.push_back(make_input(r, mask, means_, config_));
  return predict_inputs(inputs);
}

// ---------------------------------------------------------------------------
// Persistence

void Model::save(const std::filesystem::path& path) const {
  nn::CheckpointData data = nn::params_to_checkpoint(params_);
  json meta;
  meta["format"] = "gemnet-model";
  meta["version"] = kModelFormatVersion;
  meta["config"] = json::parse(config_to_json(config_));
  meta["step"] = params_.step;
  data.metadata = meta.dump();
  auto put = [&](const std::string& name, const std::vector<double>& v) {
    if (!v.empty()) data.tensors["means." + name] = Tensor({v.size()}, v);
  };
  put("uv", means_.uv);
  put("ftir", means_.ftir);
  put("xrf", means_.xrf);
  put("icpms", means_.icpms);
  if (!references_.empty()) {
    const std::size_t f = references_.front().size();
    Tensor refs({references_.size(), f});
    for (std::size_t i = 0; i < references_.size(); ++i)
      std::copy(references_[i].begin(), references_[i].end(), refs.ptr() + i * f);
    data.tensors["references"] = std::move(refs);
  }
  nn::write_checkpoint(path, data);
}

Model Model::load(const std::filesystem::path& path) {
  nn::CheckpointData data = nn::read_checkpoint(path);
  json meta;
  try {
    meta = json::parse(data.metadata);
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, "checkpoint metadata: " + std::string(e.what()));
  }
  require(meta.value("format", std::string()) == "gemnet-model", ErrorKind::ParseError,
          "not a model checkpoint: " + path.string());
  require(meta.value("version", 0) == kModelFormatVersion, ErrorKind::ParseError,
          "unsupported model checkpoint version");
  Model m(config_from_json(meta.at("config").dump()));
  m.params_.step = meta.value("step", std::int64_t{0});
  auto take = [&](const std::string& name) {
    auto it = data.tensors.find("means." + name);
    if (it == data.tensors.end()) return std::vector<double>{};
    auto v = std::move(it->second.data);
    data.tensors.erase(it);
    return v;
  };
  SourceMeans means;
  means.uv = take("uv");
  means.ftir = take("ftir");
  means.xrf = take("xrf");
  means.icpms = take("icpms");
  m.set_means(std::move(means));
  if (auto it = data.tensors.find("references"); it != data.tensors.end()) {
    const auto& t = it->second;
    std::vector<std::vector<double>> rows(t.dim(0));
    for (std::size_t i = 0; i < rows.size(); ++i)
      rows[i].assign(t.ptr() + i * t.dim(1), t.ptr() + (i + 1) * t.dim(1));
    m.set_references(std::move(rows));
    data.tensors.erase(it);
  }
  nn::load_params(m.params_, data);
  return m;
}

}  // namespace gemnet
