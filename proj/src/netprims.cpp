#include "gemnet/netprims.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <cstring>
#include <fstream>
#include <numeric>

#include <Eigen/Dense>

#include "gemnet/error.hpp"

namespace gemnet::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
CMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMatMap(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void check_rank2(const Tensor& t, const char* what) {
  require(t.rank() == 2, ErrorKind::ShapeError,
          std::string(what) + " expects a 2-D tensor, got " + shape_string(t.shape));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor / ParamStore

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape_, double fill)
    : shape(std::move(shape_)), data(shape_size(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> values)
    : shape(std::move(shape_)), data(std::move(values)) {
  require(shape_size(shape) == data.size(), ErrorKind::ShapeError,
          "shape " + shape_string(shape) + " does not match " + std::to_string(data.size()) +
              " values");
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

Param& ParamStore::add(const std::string& name, std::vector<std::size_t> shape, Init init,
                       std::mt19937_64& rng, double fan_in, double scale, bool trainable) {
  require(!has(name), ErrorKind::InvalidConfig, "duplicate parameter '" + name + "'");
  Param p;
  p.name = name;
  p.value = Tensor(shape);
  p.grad = Tensor(shape);
  p.moment1 = Tensor(shape);
  p.moment2 = Tensor(shape);
  p.trainable = trainable;
  switch (init) {
    case Init::Zeros: break;
    case Init::Ones: p.value.fill(1.0); break;
    case Init::FanInUniform: {
      const double bound = 1.0 / std::sqrt(std::max(fan_in, 1.0));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : p.value.data) v = dist(rng);
      break;
    }
    case Init::Uniform: {
      std::uniform_real_distribution<double> dist(-scale, scale);
      for (auto& v : p.value.data) v = dist(rng);
      break;
    }
  }
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back();
}

Param& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorKind::InvalidConfig, "unknown parameter '" + name + "'");
  return params_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorKind::InvalidConfig, "unknown parameter '" + name + "'");
  return params_[it->second];
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::vector<Tensor> ParamStore::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

void ParamStore::restore(const std::vector<Tensor>& values) {
  require(values.size() == params_.size(), ErrorKind::ShapeError, "snapshot size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require(values[i].shape == params_[i].value.shape, ErrorKind::ShapeError,
            "snapshot shape mismatch for " + params_[i].name);
    params_[i].value = values[i];
  }
}

// ---------------------------------------------------------------------------
// Elementwise / loss

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& dy, const Tensor& x) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(x[i] > 0.0)) dx[i] = 0.0;
  return dx;
}

std::vector<double> softmax(std::span<const double> logits) {
  require(!logits.empty(), ErrorKind::InvalidInput, "softmax of empty vector");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

LossAndGrad softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
  require(label < logits.size(), ErrorKind::InvalidInput,
          "label " + std::to_string(label) + " out of range for " +
              std::to_string(logits.size()) + " classes");
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - m);
  const double log_norm = m + std::log(sum);
  LossAndGrad out;
  out.loss = log_norm - logits[label];
  out.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - log_norm);
  out.grad[label] -= 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                 Padding padding) {
  require(kernel >= 1 && stride >= 1, ErrorKind::ShapeError, "kernel and stride must be >= 1");
  if (padding == Padding::Same) return (length + stride - 1) / stride;
  require(length >= kernel, ErrorKind::ShapeError,
          "valid convolution needs length >= kernel (" + std::to_string(length) + " < " +
              std::to_string(kernel) + ")");
  return (length - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t cin, length, cout, kernel, stride, lout;
  std::ptrdiff_t pad_left;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride,
                           Padding padding) {
  check_rank2(x, "conv1d input");
  require(w.rank() == 3, ErrorKind::ShapeError, "conv1d kernel must be Cout x Cin x K");
  require(w.dim(1) == x.dim(0), ErrorKind::ShapeError,
          "conv1d channel mismatch: input " + shape_string(x.shape) + ", kernel " +
              shape_string(w.shape));
  ConvGeometry g{};
  g.cin = x.dim(0);
  g.length = x.dim(1);
  g.cout = w.dim(0);
  g.kernel = w.dim(2);
  g.stride = stride;
  g.lout = conv1d_output_length(g.length, g.kernel, stride, padding);
  if (padding == Padding::Same) {
    const auto needed = static_cast<std::ptrdiff_t>((g.lout - 1) * stride + g.kernel) -
                        static_cast<std::ptrdiff_t>(g.length);
    g.pad_left = std::max<std::ptrdiff_t>(needed, 0) / 2;
  } else {
    g.pad_left = 0;
  }
  return g;
}

// Output positions l whose tap k lands inside the input: [lo, hi).
std::pair<std::size_t, std::size_t> valid_range(const ConvGeometry& g, std::size_t k) {
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  const auto off = static_cast<std::ptrdiff_t>(k) - g.pad_left;  // index = l*s + off
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(g.length) - 1 - off;
  std::ptrdiff_t hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(g.lout));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

RowMat im2col(const Tensor& x, const ConvGeometry& g) {
  RowMat col = RowMat::Zero(static_cast<Eigen::Index>(g.cin * g.kernel),
                            static_cast<Eigen::Index>(g.lout));
  for (std::size_t k = 0; k < g.kernel; ++k) {
    const auto [lo, hi] = valid_range(g, k);
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - g.pad_left;
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      double* row = col.data() + (ci * g.kernel + k) * g.lout;
      const double* src = x.ptr() + ci * g.length;
      for (std::size_t l = lo; l < hi; ++l)
        row[l] = src[static_cast<std::ptrdiff_t>(l * g.stride) + off];
    }
  }
  return col;
}

}  // namespace

namespace {

using StridedIn = Eigen::Map<const RowMat, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
using StridedOut = Eigen::Map<RowMat, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;

// Kernel tap k as a contiguous Cout x Cin matrix.
RowMat kernel_tap(const Tensor& w, const ConvGeometry& g, std::size_t k) {
  RowMat m(static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.cin));
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t ci = 0; ci < g.cin; ++ci)
      m(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(ci)) =
          w[(co * g.cin + ci) * g.kernel + k];
  return m;
}

// Input positions touched by tap k for outputs [lo, hi), as a Cin x (hi-lo) view.
std::ptrdiff_t tap_offset(const ConvGeometry& g, std::size_t k, std::size_t lo) {
  return static_cast<std::ptrdiff_t>(lo * g.stride) + static_cast<std::ptrdiff_t>(k) -
         g.pad_left;
}

// Below this many input channels im2col is cheaper than per-tap products.
constexpr std::size_t kPerTapMinChannels = 4;

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor* bias, std::size_t stride,
              Padding padding) {
  const auto g = conv_geometry(x, w, stride, padding);
  Tensor y({g.cout, g.lout});
  auto ym = as_mat(y, g.cout, g.lout);
  if (g.cin < kPerTapMinChannels) {
    const RowMat col = im2col(x, g);
    ym.noalias() = as_mat(w, g.cout, g.cin * g.kernel) * col;
  } else {
    const auto ci = static_cast<Eigen::Index>(g.cin);
    for (std::size_t k = 0; k < g.kernel; ++k) {
      const auto [lo, hi] = valid_range(g, k);
      if (lo >= hi) continue;
      const RowMat wk = kernel_tap(w, g, k);
      const StridedIn xs(x.ptr() + tap_offset(g, k, lo), ci, static_cast<Eigen::Index>(hi - lo),
                         Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(
                             static_cast<Eigen::Index>(g.length),
                             static_cast<Eigen::Index>(g.stride)));
      ym.middleCols(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo))
          .noalias() += wk * xs;
    }
  }
  if (bias) {
    require(bias->size() == g.cout, ErrorKind::ShapeError, "conv1d bias length mismatch");
    for (std::size_t c = 0; c < g.cout; ++c) ym.row(static_cast<Eigen::Index>(c)).array() += (*bias)[c];
  }
  return y;
}

Tensor conv1d_backward(const Tensor& dy, const Tensor& x, const Tensor& w, std::size_t stride,
                       Padding padding, Tensor& dw, Tensor* db, bool need_dx) {
  const auto g = conv_geometry(x, w, stride, padding);
  require(dy.rank() == 2 && dy.dim(0) == g.cout && dy.dim(1) == g.lout, ErrorKind::ShapeError,
          "conv1d gradient shape mismatch");
  const auto dym = as_mat(dy, g.cout, g.lout);
  if (db)
    for (std::size_t c = 0; c < g.cout; ++c) {
      const double* row = dy.ptr() + c * g.lout;
      (*db)[c] += std::accumulate(row, row + g.lout, 0.0);
    }
  if (g.cin < kPerTapMinChannels) {
    const RowMat col = im2col(x, g);
    as_mat(dw, g.cout, g.cin * g.kernel).noalias() += dym * col.transpose();
    if (!need_dx) return {};
    const RowMat dcol = as_mat(w, g.cout, g.cin * g.kernel).transpose() * dym;
    Tensor dx({g.cin, g.length});
    for (std::size_t k = 0; k < g.kernel; ++k) {
      const auto [lo, hi] = valid_range(g, k);
      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - g.pad_left;
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* row = dcol.data() + (ci * g.kernel + k) * g.lout;
        double* dst = dx.ptr() + ci * g.length;
        for (std::size_t l = lo; l < hi; ++l)
          dst[static_cast<std::ptrdiff_t>(l * g.stride) + off] += row[l];
      }
    }
    return dx;
  }
  Tensor dx;
  if (need_dx) dx = Tensor({g.cin, g.length});
  const auto ci = static_cast<Eigen::Index>(g.cin);
  const Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic> xstride(
      static_cast<Eigen::Index>(g.length), static_cast<Eigen::Index>(g.stride));
  RowMat dwk(static_cast<Eigen::Index>(g.cout), ci);
  for (std::size_t k = 0; k < g.kernel; ++k) {
    const auto [lo, hi] = valid_range(g, k);
    if (lo >= hi) continue;
    const auto n = static_cast<Eigen::Index>(hi - lo);
    const auto dys = dym.middleCols(static_cast<Eigen::Index>(lo), n);
    const StridedIn xs(x.ptr() + tap_offset(g, k, lo), ci, n, xstride);
    dwk.noalias() = dys * xs.transpose();
    for (std::size_t co = 0; co < g.cout; ++co)
      for (std::size_t c = 0; c < g.cin; ++c)
        dw[(co * g.cin + c) * g.kernel + k] +=
            dwk(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(c));
    if (need_dx) {
      StridedOut dxs(dx.ptr() + tap_offset(g, k, lo), ci, n, xstride);
      dxs.noalias() += kernel_tap(w, g, k).transpose() * dys;
    }
  }
  return dx;
}

Conv1d::Conv1d(ParamStore& store, const std::string& name, std::size_t in_channels,
               std::size_t out_channels, std::size_t kernel, std::size_t stride, Padding padding,
               std::mt19937_64& rng)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding) {
  require(kernel >= 1 && stride >= 1, ErrorKind::InvalidConfig, "kernel and stride must be >= 1");
  const double fan_in = static_cast<double>(in_channels * kernel);
  w_ = &store.add(name + ".weight", {out_channels, in_channels, kernel}, Init::FanInUniform, rng,
                  fan_in);
  b_ = &store.add(name + ".bias", {out_channels}, Init::Zeros, rng);
}

Tensor Conv1d::forward(const Tensor& x) const {
  return conv1d(x, w_->value, &b_->value, stride_, padding_);
}

Tensor Conv1d::backward(const Tensor& dy, const Tensor& x, bool need_dx) const {
  return conv1d_backward(dy, x, w_->value, stride_, padding_, w_->grad, &b_->grad, need_dx);
}

std::size_t Conv1d::output_length(std::size_t length) const {
  return conv1d_output_length(length, kernel_, stride_, padding_);
}

ResidualBlock::ResidualBlock(ParamStore& store, const std::string& name,
                             std::size_t in_channels, std::size_t channels, std::size_t kernel,
                             std::size_t stride, std::mt19937_64& rng)
    : in_(in_channels), channels_(channels) {
  conv1_ = Conv1d(store, name + ".conv1", in_channels, channels, kernel, stride, Padding::Same,
                  rng);
  conv2_ = Conv1d(store, name + ".conv2", channels, channels, kernel, 1, Padding::Same, rng);
  if (stride != 1 || in_channels != channels)
    shortcut_ = Conv1d(store, name + ".shortcut", in_channels, channels, 1, stride,
                       Padding::Same, rng);
}

Tensor ResidualBlock::forward(const Tensor& x, Cache* cache) const {
  check_rank2(x, "residual block input");
  require(x.dim(0) == in_, ErrorKind::ShapeError,
          "residual block expects " + std::to_string(in_) + " channels, got " +
              std::to_string(x.dim(0)));
  Tensor a0 = relu(x);
  Tensor h1 = conv1_.forward(a0);
  Tensor a1 = relu(h1);
  Tensor y = conv2_.forward(a1);
  if (shortcut_) {
    const Tensor sc = shortcut_->forward(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += sc[i];
  } else {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  }
  if (cache) {
    cache->x = x;
    cache->a0 = std::move(a0);
    cache->h1 = std::move(h1);
    cache->a1 = std::move(a1);
  }
  return y;
}

Tensor ResidualBlock::backward(const Tensor& dy, const Cache& cache, bool need_dx) const {
  const Tensor da1 = conv2_.backward(dy, cache.a1);
  const Tensor dh1 = relu_backward(da1, cache.h1);
  const Tensor da0 = conv1_.backward(dh1, cache.a0, need_dx);
  if (shortcut_) {
    Tensor dsc = shortcut_->backward(dy, cache.x, need_dx);
    if (!need_dx) return {};
    Tensor dx = relu_backward(da0, cache.x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dsc[i];
    return dx;
  }
  if (!need_dx) return {};
  Tensor dx = relu_backward(da0, cache.x);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               std::mt19937_64& rng, bool bias)
    : in_(in), out_(out) {
  w_ = &store.add(name + ".weight", {out, in}, Init::FanInUniform, rng, static_cast<double>(in));
  if (bias) b_ = &store.add(name + ".bias", {out}, Init::Zeros, rng);
}

Tensor Linear::forward(const Tensor& x) const {
  check_rank2(x, "linear input");
  require(x.dim(1) == in_, ErrorKind::ShapeError,
          "linear expects " + std::to_string(in_) + " features, got " + std::to_string(x.dim(1)));
  const std::size_t n = x.dim(0);
  Tensor y({n, out_});
  auto ym = as_mat(y, n, out_);
  ym.noalias() = as_mat(x, n, in_) * as_mat(w_->value, out_, in_).transpose();
  if (b_)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < out_; ++c) y.at2(r, c) += b_->value[c];
  return y;
}

Tensor Linear::backward(const Tensor& dy, const Tensor& x, bool need_dx) const {
  const std::size_t n = x.dim(0);
  require(dy.rank() == 2 && dy.dim(0) == n && dy.dim(1) == out_, ErrorKind::ShapeError,
          "linear gradient shape mismatch");
  const auto dym = as_mat(dy, n, out_);
  as_mat(w_->grad, out_, in_).noalias() += dym.transpose() * as_mat(x, n, in_);
  if (b_)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < out_; ++c) b_->grad[c] += dy.at2(r, c);
  if (!need_dx) return {};
  Tensor dx({n, in_});
  as_mat(dx, n, in_).noalias() = dym * as_mat(w_->value, out_, in_);
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(ParamStore& store, const std::string& name, std::size_t features,
                     std::mt19937_64& rng, double eps, double momentum)
    : features_(features), eps_(eps), momentum_(momentum) {
  gamma_ = &store.add(name + ".gamma", {features}, Init::Ones, rng);
  beta_ = &store.add(name + ".beta", {features}, Init::Zeros, rng);
  running_mean_ = &store.add(name + ".running_mean", {features}, Init::Zeros, rng, 1.0, 1.0,
                             false);
  running_var_ = &store.add(name + ".running_var", {features}, Init::Ones, rng, 1.0, 1.0, false);
}

Tensor BatchNorm::forward(const Tensor& x, BatchNormMode mode, Cache* cache,
                          bool update_running) const {
  check_rank2(x, "batch norm input");
  require(x.dim(1) == features_, ErrorKind::ShapeError, "batch norm feature mismatch");
  const std::size_t n = x.dim(0), f = features_;
  Tensor xhat({n, f});
  std::vector<double> inv_std(f);
  if (mode == BatchNormMode::Train) {
    require(n >= 2, ErrorKind::InvalidBatch, "batch norm in train mode needs >= 2 samples");
    for (std::size_t j = 0; j < f; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += x.at2(i, j);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = x.at2(i, j) - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      inv_std[j] = 1.0 / std::sqrt(var + eps_);
      for (std::size_t i = 0; i < n; ++i) xhat.at2(i, j) = (x.at2(i, j) - mean) * inv_std[j];
      if (update_running) {
        running_mean_->value[j] = (1.0 - momentum_) * running_mean_->value[j] + momentum_ * mean;
        const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
        running_var_->value[j] = (1.0 - momentum_) * running_var_->value[j] + momentum_ * unbiased;
      }
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      inv_std[j] = 1.0 / std::sqrt(running_var_->value[j] + eps_);
      for (std::size_t i = 0; i < n; ++i)
        xhat.at2(i, j) = (x.at2(i, j) - running_mean_->value[j]) * inv_std[j];
    }
  }
  Tensor y({n, f});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j)
      y.at2(i, j) = gamma_->value[j] * xhat.at2(i, j) + beta_->value[j];
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->eval = mode == BatchNormMode::Eval;
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& dy, const Cache& cache) const {
  const std::size_t n = dy.dim(0), f = features_;
  const bool eval = cache.eval;
  Tensor dx({n, f});
  for (std::size_t j = 0; j < f; ++j) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += dy.at2(i, j);
      sum_dy_xhat += dy.at2(i, j) * cache.xhat.at2(i, j);
    }
    gamma_->grad[j] += sum_dy_xhat;
    beta_->grad[j] += sum_dy;
    const double g = gamma_->value[j] * cache.inv_std[j];
    if (eval) {
      for (std::size_t i = 0; i < n; ++i) dx.at2(i, j) = g * dy.at2(i, j);
      continue;
    }
    const double nn = static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      dx.at2(i, j) = g / nn * (nn * dy.at2(i, j) - sum_dy - cache.xhat.at2(i, j) * sum_dy_xhat);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// LayerNorm

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t dim,
                     std::mt19937_64& rng, double eps)
    : dim_(dim), eps_(eps) {
  gamma_ = &store.add(name + ".gamma", {dim}, Init::Ones, rng);
  beta_ = &store.add(name + ".beta", {dim}, Init::Zeros, rng);
}

Tensor LayerNorm::forward(const Tensor& x, Cache* cache) const {
  check_rank2(x, "layer norm input");
  require(x.dim(1) == dim_, ErrorKind::ShapeError, "layer norm width mismatch");
  const std::size_t t = x.dim(0), d = dim_;
  Tensor xhat({t, d}), y({t, d});
  std::vector<double> inv_std(t);
  for (std::size_t r = 0; r < t; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x.at2(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = x.at2(r, c) - mean;
      var += z * z;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps_);
    for (std::size_t c = 0; c < d; ++c) {
      xhat.at2(r, c) = (x.at2(r, c) - mean) * inv_std[r];
      y.at2(r, c) = gamma_->value[c] * xhat.at2(r, c) + beta_->value[c];
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Tensor LayerNorm::backward(const Tensor& dy, const Cache& cache) const {
  const std::size_t t = dy.dim(0), d = dim_;
  Tensor dx({t, d});
  const double dd = static_cast<double>(d);
  for (std::size_t r = 0; r < t; ++r) {
    double sum_g = 0.0, sum_g_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double g = dy.at2(r, c) * gamma_->value[c];
      sum_g += g;
      sum_g_xhat += g * cache.xhat.at2(r, c);
      gamma_->grad[c] += dy.at2(r, c) * cache.xhat.at2(r, c);
      beta_->grad[c] += dy.at2(r, c);
    }
    for (std::size_t c = 0; c < d; ++c) {
      const double g = dy.at2(r, c) * gamma_->value[c];
      dx.at2(r, c) = cache.inv_std[r] / dd * (dd * g - sum_g - cache.xhat.at2(r, c) * sum_g_xhat);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Attention

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name,
                                       std::size_t dim, std::size_t heads, std::mt19937_64& rng)
    : dim_(dim), heads_(heads) {
  require(heads >= 1 && dim % heads == 0, ErrorKind::ShapeError,
          "attention width " + std::to_string(dim) + " not divisible by " +
              std::to_string(heads) + " heads");
  wq_ = Linear(store, name + ".q", dim, dim, rng);
  wk_ = Linear(store, name + ".k", dim, dim, rng);
  wv_ = Linear(store, name + ".v", dim, dim, rng);
  wo_ = Linear(store, name + ".o", dim, dim, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& x, Cache* cache, std::size_t context) const {
  check_rank2(x, "attention input");
  require(context <= x.dim(0), ErrorKind::ShapeError, "attention context exceeds row count");
  require(x.dim(1) == dim_, ErrorKind::ShapeError,
          "attention expects width " + std::to_string(dim_) + ", got " + std::to_string(x.dim(1)));
  const std::size_t t = x.dim(0), dh = dim_ / heads_;
  Tensor q = wq_.forward(x), k = wk_.forward(x), v = wv_.forward(x);
  Tensor concat({t, dim_});
  std::vector<Tensor> probs;
  probs.reserve(heads_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(dim_));
  using StridedC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  const auto ti = static_cast<Eigen::Index>(t), di = static_cast<Eigen::Index>(dh);
  for (std::size_t h = 0; h < heads_; ++h) {
    StridedC qh(q.ptr() + h * dh, ti, di, stride), kh(k.ptr() + h * dh, ti, di, stride),
        vh(v.ptr() + h * dh, ti, di, stride);
    Tensor p({t, t});
    auto pm = as_mat(p, t, t);
    pm.noalias() = (qh * kh.transpose()) * scale;
    for (std::size_t r = 0; r < t; ++r) {
      double* row = p.ptr() + r * t;
      auto visible = [&](std::size_t c) { return context == 0 || c < context || c == r; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < t; ++c)
        if (visible(c)) m = std::max(m, row[c]);
      double sum = 0.0;
      for (std::size_t c = 0; c < t; ++c) {
        row[c] = visible(c) ? std::exp(row[c] - m) : 0.0;
        sum += row[c];
      }
      for (std::size_t c = 0; c < t; ++c) row[c] /= sum;
    }
    Strided oh(concat.ptr() + h * dh, ti, di, stride);
    oh.noalias() = pm * vh;
    probs.push_back(std::move(p));
  }
  Tensor out = wo_.forward(concat);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->probs = std::move(probs);
  }
  return out;
}

Tensor MultiHeadAttention::backward(const Tensor& dy, const Cache& c) const {
  const std::size_t t = c.x.dim(0), dh = dim_ / heads_;
  const Tensor dconcat = wo_.backward(dy, c.concat);
  Tensor dq({t, dim_}), dk({t, dim_}), dv({t, dim_});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(dim_));
  using StridedC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  const auto ti = static_cast<Eigen::Index>(t), di = static_cast<Eigen::Index>(dh);
  for (std::size_t h = 0; h < heads_; ++h) {
    StridedC qh(c.q.ptr() + h * dh, ti, di, stride), kh(c.k.ptr() + h * dh, ti, di, stride),
        vh(c.v.ptr() + h * dh, ti, di, stride), doh(dconcat.ptr() + h * dh, ti, di, stride);
    const auto pm = as_mat(c.probs[h], t, t);
    Strided dvh(dv.ptr() + h * dh, ti, di, stride);
    dvh.noalias() = pm.transpose() * doh;
    RowMat dp = doh * vh.transpose();
    // softmax backward, row by row
    for (Eigen::Index r = 0; r < ti; ++r) {
      double dot = 0.0;
      for (Eigen::Index j = 0; j < dp.cols(); ++j) dot += dp(r, j) * pm(r, j);
      dp.row(r) = (pm.row(r).array() * (dp.row(r).array() - dot)).matrix();
    }
    dp *= scale;
    Strided dqh(dq.ptr() + h * dh, ti, di, stride), dkh(dk.ptr() + h * dh, ti, di, stride);
    dqh.noalias() = dp * kh;
    dkh.noalias() = dp.transpose() * qh;
  }
  Tensor dx = wq_.backward(dq, c.x);
  const Tensor dxk = wk_.backward(dk, c.x);
  const Tensor dxv = wv_.backward(dv, c.x);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dxk[i] + dxv[i];
  return dx;
}

TransformerLayer::TransformerLayer(ParamStore& store, const std::string& name, std::size_t dim,
                                   std::size_t heads, std::size_t ff_mult, std::mt19937_64& rng) {
  require(ff_mult >= 1, ErrorKind::InvalidConfig, "feed-forward multiplier must be >= 1");
  ln1_ = LayerNorm(store, name + ".ln1", dim, rng);
  attn_ = MultiHeadAttention(store, name + ".attn", dim, heads, rng);
  ln2_ = LayerNorm(store, name + ".ln2", dim, rng);
  ff1_ = Linear(store, name + ".ff1", dim, dim * ff_mult, rng);
  ff2_ = Linear(store, name + ".ff2", dim * ff_mult, dim, rng);
}

Tensor TransformerLayer::forward(const Tensor& x, Cache* cache, std::size_t context) const {
  Cache local;
  Cache& c = cache ? *cache : local;
  c.n1 = ln1_.forward(x, &c.ln1);
  const Tensor a = attn_.forward(c.n1, &c.attn, context);
  c.y = x;
  for (std::size_t i = 0; i < a.size(); ++i) c.y[i] += a[i];
  c.n2 = ln2_.forward(c.y, &c.ln2);
  c.hidden_pre = ff1_.forward(c.n2);
  c.hidden = relu(c.hidden_pre);
  Tensor z = ff2_.forward(c.hidden);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += c.y[i];
  return z;
}

Tensor TransformerLayer::backward(const Tensor& dz, const Cache& c) const {
  const Tensor dh = ff2_.backward(dz, c.hidden);
  const Tensor dhp = relu_backward(dh, c.hidden_pre);
  const Tensor dn2 = ff1_.backward(dhp, c.n2);
  Tensor dy = ln2_.backward(dn2, c.ln2);
  for (std::size_t i = 0; i < dy.size(); ++i) dy[i] += dz[i];
  const Tensor dn1 = attn_.backward(dy, c.attn);
  Tensor dx = ln1_.backward(dn1, c.ln1);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  return dx;
}

IntrasampleAttention::IntrasampleAttention(ParamStore& store, const std::string& name,
                                           std::size_t token_dim, std::size_t heads,
                                           std::size_t ff_mult, std::mt19937_64& rng)
    : layer_(store, name, token_dim, heads, ff_mult, rng) {}

IntersampleAttention::IntersampleAttention(ParamStore& store, const std::string& name,
                                           std::size_t sample_dim, std::size_t heads,
                                           std::size_t ff_mult, std::mt19937_64& rng)
    : layer_(store, name, sample_dim, heads, ff_mult, rng) {}

// ---------------------------------------------------------------------------
// Optimiser

void optimizer_step(ParamStore& params, double lr, const OptimizerConfig& config) {
  for (const auto& p : params.params())
    if (p.trainable && !p.grad.all_finite())
      fail(ErrorKind::NumericalError, "non-finite gradient in '" + p.name + "'");
  ++params.step;
  const double t = static_cast<double>(params.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (auto& p : params.params()) {
    if (!p.trainable) continue;
    if (config.kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr * p.grad[i];
    } else {
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        p.moment1[i] = config.beta1 * p.moment1[i] + (1.0 - config.beta1) * g;
        p.moment2[i] = config.beta2 * p.moment2[i] + (1.0 - config.beta2) * g * g;
        const double mhat = p.moment1[i] / c1;
        const double vhat = p.moment2[i] / c2;
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + config.eps);
      }
    }
    p.grad.fill(0.0);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
constexpr char kMagic[8] = {'G', 'E', 'M', 'N', 'E', 'T', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(in), ErrorKind::ParseError, "truncated checkpoint");
  return v;
}

std::string get_string(std::istream& in, std::uint64_t len) {
  require(len < (1ull << 32), ErrorKind::ParseError, "corrupt checkpoint string length");
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  require(static_cast<bool>(in), ErrorKind::ParseError, "truncated checkpoint");
  return s;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, data.metadata.size());
  out.write(data.metadata.data(), static_cast<std::streamsize>(data.metadata.size()));
  put<std::uint64_t>(out, data.tensors.size());
  for (const auto& [name, t] : data.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.ptr()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  require(static_cast<bool>(out), ErrorKind::IoError, "write failed for " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::MissingArtifact, "cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  require(in && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorKind::ParseError,
          path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in);
  require(version == kCheckpointVersion, ErrorKind::ParseError,
          "unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  data.metadata = get_string(in, get<std::uint64_t>(in));
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = get_string(in, get<std::uint32_t>(in));
    const auto rank = get<std::uint32_t>(in);
    require(rank <= 8, ErrorKind::ParseError, "corrupt tensor rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(in));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.ptr()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    require(static_cast<bool>(in), ErrorKind::ParseError, "truncated tensor '" + name + "'");
    data.tensors.emplace(name, std::move(t));
  }
  return data;
}

CheckpointData params_to_checkpoint(const ParamStore& params) {
  CheckpointData data;
  for (const auto& p : params.params()) data.tensors.emplace(p.name, p.value);
  return data;
}

void load_params(ParamStore& params, const CheckpointData& data) {
  for (auto& p : params.params()) {
    auto it = data.tensors.find(p.name);
    require(it != data.tensors.end(), ErrorKind::ParseError,
            "checkpoint lacks parameter '" + p.name + "'");
    require(it->second.shape == p.value.shape, ErrorKind::ShapeError,
            "checkpoint shape mismatch for '" + p.name + "'");
    p.value = it->second;
  }
}

}  // namespace gemnet::nn
