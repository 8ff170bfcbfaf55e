#pragma once

// Differentiable building blocks with hand-written backward passes.
//
// Every layer follows the same contract: forward() fills a cache that
// backward() consumes; backward() accumulates parameter gradients into the
// owning ParamStore slots and returns the gradient w.r.t. the layer input.
// All arithmetic is double precision and single threaded, so results are
// bitwise reproducible for a given build.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace gemnet::nn {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape_, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape_, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }
  void fill(double v);
  bool all_finite() const;
  bool operator==(const Tensor&) const = default;
};

std::size_t shape_size(const std::vector<std::size_t>& shape);
std::string shape_string(const std::vector<std::size_t>& shape);

enum class Init { Zeros, Ones, FanInUniform, Uniform };

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor moment1;
  Tensor moment2;
  bool trainable = true;
};

/// Named parameters with matching gradient slots. References returned by
/// add()/get() stay valid for the lifetime of the store.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  /// FanInUniform draws from +-1/sqrt(fan_in); Uniform from +-scale.
  Param& add(const std::string& name, std::vector<std::size_t> shape, Init init,
             std::mt19937_64& rng, double fan_in = 1.0, double scale = 1.0,
             bool trainable = true);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::deque<Param>& params() { return params_; }
  const std::deque<Param>& params() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  /// Copies of every value tensor, in insertion order.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

  std::int64_t step = 0;

 private:
  std::deque<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Elementwise and loss primitives

Tensor relu(const Tensor& x);
/// Gradient of relu given the forward input.
Tensor relu_backward(const Tensor& dy, const Tensor& x);

std::vector<double> softmax(std::span<const double> logits);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logits
};

/// -log softmax(logits)[label] with max subtraction. InvalidInput if label
/// is out of range.
LossAndGrad softmax_cross_entropy(std::span<const double> logits, std::size_t label);

// ---------------------------------------------------------------------------
// Convolution

enum class Padding { Same, Valid };

/// ceil(L/s) for same padding, floor((L-K)/s)+1 for valid. ShapeError when a
/// valid convolution does not fit.
std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                 Padding padding);

/// Cross-correlation of x (Cin x L) with w (Cout x Cin x K), bias optional.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor* bias, std::size_t stride,
              Padding padding);
/// Accumulates into dw/db; returns dx (empty tensor when need_dx is false).
Tensor conv1d_backward(const Tensor& dy, const Tensor& x, const Tensor& w, std::size_t stride,
                       Padding padding, Tensor& dw, Tensor* db, bool need_dx = true);

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParamStore& store, const std::string& name, std::size_t in_channels,
         std::size_t out_channels, std::size_t kernel, std::size_t stride, Padding padding,
         std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& dy, const Tensor& x, bool need_dx = true) const;
  std::size_t output_length(std::size_t length) const;
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  Param& weight() const { return *w_; }
  Param& bias() const { return *b_; }

 private:
  Param* w_ = nullptr;
  Param* b_ = nullptr;
  std::size_t in_ = 0, out_ = 0, kernel_ = 0, stride_ = 1;
  Padding padding_ = Padding::Same;
};

/// Pre-activation residual block: y = shortcut(x) + conv2(relu(conv1(relu(x)))).
/// conv1 carries the stride; the shortcut is a strided 1x1 convolution
/// whenever stride or channel count change, identity otherwise.
class ResidualBlock {
 public:
  struct Cache {
    Tensor x, a0, h1, a1;
  };

  ResidualBlock() = default;
  ResidualBlock(ParamStore& store, const std::string& name, std::size_t in_channels,
                std::size_t channels, std::size_t kernel, std::size_t stride,
                std::mt19937_64& rng);
  Tensor forward(const Tensor& x, Cache* cache) const;
  Tensor backward(const Tensor& dy, const Cache& cache, bool need_dx = true) const;
  std::size_t output_length(std::size_t length) const { return conv1_.output_length(length); }
  bool has_projection() const { return shortcut_.has_value(); }
  const Conv1d& conv1() const { return conv1_; }
  const Conv1d& conv2() const { return conv2_; }
  const std::optional<Conv1d>& shortcut() const { return shortcut_; }

 private:
  Conv1d conv1_, conv2_;
  std::optional<Conv1d> shortcut_;
  std::size_t in_ = 0, channels_ = 0;
};

// ---------------------------------------------------------------------------
// Dense layers

/// y = x W^T + b for x of shape (N x in); W is (out x in).
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& dy, const Tensor& x, bool need_dx = true) const;
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Param& weight() const { return *w_; }

 private:
  Param* w_ = nullptr;
  Param* b_ = nullptr;
  std::size_t in_ = 0, out_ = 0;
};

enum class BatchNormMode { Train, Eval };

/// Per-feature normalisation over the batch axis of an (N x F) input.
class BatchNorm {
 public:
  struct Cache {
    Tensor xhat;
    std::vector<double> inv_std;
    bool eval = false;
  };

  BatchNorm() = default;
  BatchNorm(ParamStore& store, const std::string& name, std::size_t features,
            std::mt19937_64& rng, double eps = 1e-5, double momentum = 0.1);
  /// Train mode needs N >= 2 (InvalidBatch otherwise) and updates the running
  /// statistics when update_running is set.
  Tensor forward(const Tensor& x, BatchNormMode mode, Cache* cache,
                 bool update_running = true) const;
  Tensor backward(const Tensor& dy, const Cache& cache) const;
  std::size_t features() const { return features_; }
  double eps() const { return eps_; }

 private:
  Param* gamma_ = nullptr;
  Param* beta_ = nullptr;
  Param* running_mean_ = nullptr;
  Param* running_var_ = nullptr;
  std::size_t features_ = 0;
  double eps_ = 1e-5, momentum_ = 0.1;
};

/// Normalises each row of a (T x D) input over D.
class LayerNorm {
 public:
  struct Cache {
    Tensor xhat;
    std::vector<double> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t dim, std::mt19937_64& rng,
            double eps = 1e-5);
  Tensor forward(const Tensor& x, Cache* cache) const;
  Tensor backward(const Tensor& dy, const Cache& cache) const;

 private:
  Param* gamma_ = nullptr;
  Param* beta_ = nullptr;
  std::size_t dim_ = 0;
  double eps_ = 1e-5;
};

/// Multi-head scaled dot-product self-attention over the rows of a (T x D)
/// input. No positional information is added. With context = c > 0 the first
/// c rows form a shared context: every row attends to those rows and to
/// itself only, so later rows never see each other.
class MultiHeadAttention {
 public:
  struct Cache {
    Tensor x, q, k, v, concat;
    std::vector<Tensor> probs;  // one (T x T) matrix per head
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, std::size_t dim,
                     std::size_t heads, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, Cache* cache, std::size_t context = 0) const;
  Tensor backward(const Tensor& dy, const Cache& cache) const;
  std::size_t heads() const { return heads_; }

 private:
  Linear wq_, wk_, wv_, wo_;
  std::size_t dim_ = 0, heads_ = 1;
};

/// Pre-norm transformer layer: y = x + attn(ln1(x)); z = y + ff(ln2(y)),
/// where ff is linear -> relu -> linear.
class TransformerLayer {
 public:
  struct Cache {
    LayerNorm::Cache ln1, ln2;
    MultiHeadAttention::Cache attn;
    Tensor n1, y, n2, hidden_pre, hidden;
  };

  TransformerLayer() = default;
  TransformerLayer(ParamStore& store, const std::string& name, std::size_t dim,
                   std::size_t heads, std::size_t ff_mult, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, Cache* cache, std::size_t context = 0) const;
  Tensor backward(const Tensor& dz, const Cache& cache) const;

 private:
  LayerNorm ln1_, ln2_;
  MultiHeadAttention attn_;
  Linear ff1_, ff2_;
};

/// Attention across the features of one sample: input (T x d), one token per
/// feature.
class IntrasampleAttention {
 public:
  using Cache = TransformerLayer::Cache;
  IntrasampleAttention() = default;
  IntrasampleAttention(ParamStore& store, const std::string& name, std::size_t token_dim,
                       std::size_t heads, std::size_t ff_mult, std::mt19937_64& rng);
  Tensor forward(const Tensor& rows, Cache* cache) const { return layer_.forward(rows, cache); }
  Tensor backward(const Tensor& dy, const Cache& cache) const {
    return layer_.backward(dy, cache);
  }

 private:
  TransformerLayer layer_;
};

/// Attention across samples: input (N x T*d), each sample flattened into one
/// token. Sample order carries no information. `context` as for
/// MultiHeadAttention: the leading rows are references shared by all others.
class IntersampleAttention {
 public:
  using Cache = TransformerLayer::Cache;
  IntersampleAttention() = default;
  IntersampleAttention(ParamStore& store, const std::string& name, std::size_t sample_dim,
                       std::size_t heads, std::size_t ff_mult, std::mt19937_64& rng);
  Tensor forward(const Tensor& samples, Cache* cache, std::size_t context = 0) const {
    return layer_.forward(samples, cache, context);
  }
  Tensor backward(const Tensor& dy, const Cache& cache) const {
    return layer_.backward(dy, cache);
  }

 private:
  TransformerLayer layer_;
};

// ---------------------------------------------------------------------------
// Optimisation

enum class OptimizerKind { Adam, Sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Applies one update to every trainable parameter and clears gradients.
/// NumericalError (parameters untouched) if any gradient is non-finite.
void optimizer_step(ParamStore& params, double lr, const OptimizerConfig& config = {});

// ---------------------------------------------------------------------------
// Checkpoints: "GEMNETCK" magic, u32 version, metadata string, then named
// tensors (name, rank, dims, little-endian doubles).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::string metadata;  // free-form, JSON by convention
  std::map<std::string, Tensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

CheckpointData params_to_checkpoint(const ParamStore& params);
/// Copies stored values into existing parameters; shapes must match.
void load_params(ParamStore& params, const CheckpointData& data);

}  // namespace gemnet::nn
