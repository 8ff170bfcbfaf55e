#pragma once

// Central finite-difference checks shared by the unit tests and the
// acceptance binary. Each check builds a primitive from a seed, draws random
// inputs and parameters, and returns the worst relative error between the
// analytic and numerical gradients over sampled input and parameter entries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "gemnet/model.hpp"
#include "gemnet/netprims.hpp"
#include "gemnet/seed.hpp"

namespace gemnet::testing {

inline constexpr double kFdStep = 1e-5;

/// |a - n| / max(|a|, |n|, 1e-5). The floor keeps gradients that are zero up
/// to round-off from counting as failures.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / scale;
}

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

inline nn::Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng,
                                double scale = 1.0) {
  nn::Tensor t(std::move(shape));
  t.data = random_values(t.size(), rng, scale);
  return t;
}

/// Replaces every trainable parameter with uniform(-0.5, 0.5) draws so zero
/// initialised biases and unit norm gains are exercised too.
inline void randomize_params(nn::ParamStore& store, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& p : store.params())
    if (p.trainable)
      for (auto& v : p.value.data) v = u(rng);
}

/// Up to `count` distinct indices in [0, n).
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count,
                                               std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, count));
  return idx;
}

/// Worst relative error over sampled entries of `values` whose analytic
/// gradient is `analytic`; `loss` re-evaluates the scalar objective.
/// Entries skipped because the perturbation straddled a ReLU kink.
inline std::size_t& kink_count() {
  thread_local std::size_t count = 0;
  return count;
}

/// Worst relative error of central differences over sampled entries.
/// A central difference is meaningless when +-h crosses a non-differentiable
/// point. Such an entry is recognised by one-sided differences that disagree
/// by far more than curvature allows, with the analytic value matching the
/// kink-free side; it is counted in kink_count() instead of scored.
inline double check_entries(std::vector<double>& values, const std::vector<double>& analytic,
                            const std::function<double()>& loss, std::mt19937_64& rng,
                            std::size_t samples = 12) {
  double worst = 0.0;
  for (std::size_t i : sample_indices(values.size(), samples, rng)) {
    const double saved = values[i];
    values[i] = saved + kFdStep;
    const double up = loss();
    values[i] = saved - kFdStep;
    const double down = loss();
    values[i] = saved;
    const double err = relative_error(analytic[i], (up - down) / (2.0 * kFdStep));
    if (err > 1e-4) {
      const double center = loss();
      const double fwd = (up - center) / kFdStep, bwd = (center - down) / kFdStep;
      const bool kink = relative_error(fwd, bwd) > 1e-2 &&
                        std::min(relative_error(analytic[i], fwd),
                                 relative_error(analytic[i], bwd)) < 1e-3;
      if (kink) {
        ++kink_count();
        continue;
      }
    }
    worst = std::max(worst, err);
  }
  return worst;
}

/// Checks every trainable parameter of a store; gradients must already hold
/// d loss / d param for the current values.
inline double check_params(nn::ParamStore& store, const std::function<double()>& loss,
                           std::mt19937_64& rng, std::size_t samples = 6) {
  double worst = 0.0;
  for (auto& p : store.params()) {
    if (!p.trainable) continue;
    const std::vector<double> analytic = p.grad.data;
    worst = std::max(worst, check_entries(p.value.data, analytic, loss, rng, samples));
  }
  return worst;
}

inline double dot(const nn::Tensor& a, const nn::Tensor& b) {
  return std::inner_product(a.data.begin(), a.data.end(), b.data.begin(), 0.0);
}

// ---------------------------------------------------------------------------
// Individual checks. Objective: <layer(x), R> for a fixed random R.

inline double check_relu(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-relu"));
  nn::Tensor x = random_tensor({5, 7}, rng);
  const nn::Tensor r = random_tensor({5, 7}, rng);
  const nn::Tensor dx = nn::relu_backward(r, x);
  return check_entries(x.data, dx.data, [&] { return dot(nn::relu(x), r); }, rng, 35);
}

inline double check_cross_entropy(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-ce"));
  const std::size_t c = 2 + seed % 5;
  std::vector<double> logits = random_values(c, rng, 2.0);
  const std::size_t label = std::uniform_int_distribution<std::size_t>(0, c - 1)(rng);
  const auto lg = nn::softmax_cross_entropy(logits, label);
  return check_entries(
      logits, lg.grad, [&] { return nn::softmax_cross_entropy(logits, label).loss; }, rng, c);
}

inline double check_conv1d(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-conv"));
  std::uniform_int_distribution<std::size_t> pick(1, 5);
  const std::size_t cin = pick(rng), cout = pick(rng), k = 2 * pick(rng) - 1 + seed % 2;
  const std::size_t stride = 1 + seed % 3;
  const auto padding = seed % 4 == 3 ? nn::Padding::Valid : nn::Padding::Same;
  const std::size_t len = k + 3 + pick(rng) * 3;
  nn::Tensor x = random_tensor({cin, len}, rng);
  nn::Tensor w = random_tensor({cout, cin, k}, rng, 0.5);
  nn::Tensor b = random_tensor({cout}, rng);
  const nn::Tensor y = nn::conv1d(x, w, &b, stride, padding);
  const nn::Tensor r = random_tensor(y.shape, rng);
  nn::Tensor dw(w.shape), db(b.shape);
  const nn::Tensor dx = nn::conv1d_backward(r, x, w, stride, padding, dw, &db);
  auto loss = [&] { return dot(nn::conv1d(x, w, &b, stride, padding), r); };
  return std::max({check_entries(x.data, dx.data, loss, rng), check_entries(w.data, dw.data, loss, rng),
                   check_entries(b.data, db.data, loss, rng)});
}

inline double check_residual_block(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-res"));
  nn::ParamStore store;
  const std::size_t cin = 1 + seed % 3, ch = 4, stride = seed % 2 ? 2 : 1;
  // cin >= 4 also covers the per-tap convolution path.
  const std::size_t in_ch = seed % 5 == 0 ? 5 : cin;
  nn::ResidualBlock block(store, "res", in_ch, ch, 3 + 2 * (seed % 2), stride, rng);
  randomize_params(store, rng);
  nn::Tensor x = random_tensor({in_ch, 11 + seed % 4}, rng);
  nn::ResidualBlock::Cache cache;
  const nn::Tensor y = block.forward(x, &cache);
  const nn::Tensor r = random_tensor(y.shape, rng);
  const nn::Tensor dx = block.backward(r, cache);
  auto loss = [&] { return dot(block.forward(x, nullptr), r); };
  return std::max(check_entries(x.data, dx.data, loss, rng), check_params(store, loss, rng));
}

inline double check_linear(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-linear"));
  nn::ParamStore store;
  nn::Linear lin(store, "lin", 3 + seed % 4, 2 + seed % 3, rng);
  randomize_params(store, rng);
  nn::Tensor x = random_tensor({4, lin.in_features()}, rng);
  const nn::Tensor r = random_tensor({4, lin.out_features()}, rng);
  const nn::Tensor dx = lin.backward(r, x);
  auto loss = [&] { return dot(lin.forward(x), r); };
  return std::max(check_entries(x.data, dx.data, loss, rng), check_params(store, loss, rng));
}

inline double check_batch_norm(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-bn"));
  nn::ParamStore store;
  nn::BatchNorm bn(store, "bn", 3 + seed % 3, rng);
  randomize_params(store, rng);
  const auto mode = seed % 4 == 0 ? nn::BatchNormMode::Eval : nn::BatchNormMode::Train;
  nn::Tensor x = random_tensor({2 + seed % 5, bn.features()}, rng);
  nn::BatchNorm::Cache cache;
  const nn::Tensor y = bn.forward(x, mode, &cache, false);
  const nn::Tensor r = random_tensor(y.shape, rng);
  const nn::Tensor dx = bn.backward(r, cache);
  auto loss = [&] { return dot(bn.forward(x, mode, nullptr, false), r); };
  return std::max(check_entries(x.data, dx.data, loss, rng), check_params(store, loss, rng));
}

inline double check_layer_norm(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-ln"));
  nn::ParamStore store;
  nn::LayerNorm ln(store, "ln", 3 + seed % 4, rng);
  randomize_params(store, rng);
  nn::Tensor x = random_tensor({3, 3 + seed % 4}, rng);
  nn::LayerNorm::Cache cache;
  const nn::Tensor y = ln.forward(x, &cache);
  const nn::Tensor r = random_tensor(y.shape, rng);
  const nn::Tensor dx = ln.backward(r, cache);
  auto loss = [&] { return dot(ln.forward(x, nullptr), r); };
  return std::max(check_entries(x.data, dx.data, loss, rng), check_params(store, loss, rng));
}

inline double check_attention(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-mha"));
  nn::ParamStore store;
  const std::size_t heads = 1 + seed % 2, dim = 2 * heads * (1 + seed % 2), t = 3 + seed % 3;
  nn::MultiHeadAttention mha(store, "mha", dim, heads, rng);
  randomize_params(store, rng);
  const std::size_t context = seed % 3 == 0 ? 0 : 1 + seed % 2;
  nn::Tensor x = random_tensor({t, dim}, rng);
  nn::MultiHeadAttention::Cache cache;
  const nn::Tensor y = mha.forward(x, &cache, context);
  const nn::Tensor r = random_tensor(y.shape, rng);
  const nn::Tensor dx = mha.backward(r, cache);
  auto loss = [&] { return dot(mha.forward(x, nullptr, context), r); };
  return std::max(check_entries(x.data, dx.data, loss, rng), check_params(store, loss, rng));
}

inline double check_transformer(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-tl"));
  nn::ParamStore store;
  const std::size_t dim = 4, t = 3 + seed % 3;
  nn::TransformerLayer layer(store, "tl", dim, 2, 1 + seed % 2, rng);
  randomize_params(store, rng);
  const std::size_t context = seed % 2 ? 2 : 0;
  nn::Tensor x = random_tensor({t, dim}, rng);
  nn::TransformerLayer::Cache cache;
  const nn::Tensor y = layer.forward(x, &cache, context);
  const nn::Tensor r = random_tensor(y.shape, rng);
  const nn::Tensor dx = layer.backward(r, cache);
  auto loss = [&] { return dot(layer.forward(x, nullptr, context), r); };
  return std::max(check_entries(x.data, dx.data, loss, rng), check_params(store, loss, rng));
}

inline double check_intrasample(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-intra"));
  nn::ParamStore store;
  nn::IntrasampleAttention att(store, "intra", 4, 2, 2, rng);
  randomize_params(store, rng);
  nn::Tensor x = random_tensor({5 + seed % 3, 4}, rng);
  nn::IntrasampleAttention::Cache cache;
  const nn::Tensor y = att.forward(x, &cache);
  const nn::Tensor r = random_tensor(y.shape, rng);
  const nn::Tensor dx = att.backward(r, cache);
  auto loss = [&] { return dot(att.forward(x, nullptr), r); };
  return std::max(check_entries(x.data, dx.data, loss, rng), check_params(store, loss, rng));
}

inline double check_intersample(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-inter"));
  nn::ParamStore store;
  nn::IntersampleAttention att(store, "inter", 6, 2, 1, rng);
  randomize_params(store, rng);
  const std::size_t context = 1 + seed % 3;
  nn::Tensor x = random_tensor({context + 2 + seed % 2, 6}, rng);
  nn::IntersampleAttention::Cache cache;
  const nn::Tensor y = att.forward(x, &cache, context);
  const nn::Tensor r = random_tensor(y.shape, rng);
  const nn::Tensor dx = att.backward(r, cache);
  auto loss = [&] { return dot(att.forward(x, nullptr, context), r); };
  return std::max(check_entries(x.data, dx.data, loss, rng), check_params(store, loss, rng));
}

/// Random tiny-config input batch with some sources substituted.
inline std::vector<ModelInput> tiny_inputs(const ModelConfig& cfg, std::size_t n,
                                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.5, 20.0);
  std::vector<ModelInput> batch(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& in = batch[i];
    if (cfg.allows(Source::UV)) in.uv = random_values(kUvRows * cfg.uv_length, rng);
    if (cfg.allows(Source::FTIR)) in.ftir = random_values(cfg.ftir_length, rng);
    for (std::size_t f = 0; f < cfg.elemental_features(); ++f) in.elemental.push_back(pos(rng));
  }
  // One shared substituted UV input exercises the per-batch encoder cache.
  if (n >= 3 && cfg.allows(Source::UV)) {
    batch[1].substituted[0] = batch[2].substituted[0] = true;
    batch[2].uv = batch[1].uv;
  }
  return batch;
}

/// Full forward + summed cross-entropy of the tiny model against every
/// parameter group and, via the spectral inputs, the encoder input path.
inline double check_tiny_model(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "fd-model"));
  ModelConfig cfg = ModelConfig::tiny(seed % 3 == 2 ? Task::TD : Task::OD);
  cfg.seed = seed;
  cfg.pooling = seed % 2 ? ElementalPooling::Flatten : ElementalPooling::Cls;
  Model model(cfg);
  randomize_params(model.params(), rng);
  if (cfg.has_elemental()) {
    std::vector<std::vector<double>> refs;
    std::uniform_real_distribution<double> pos(0.5, 20.0);
    for (std::size_t r = 0; r < cfg.references; ++r) {
      refs.emplace_back();
      for (std::size_t f = 0; f < cfg.elemental_features(); ++f) refs.back().push_back(pos(rng));
    }
    model.set_references(refs);
  }
  const auto batch = tiny_inputs(cfg, 4, rng);
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < batch.size(); ++i)
    labels.push_back(std::uniform_int_distribution<std::size_t>(0, cfg.num_classes() - 1)(rng));

  auto loss = [&] {
    const nn::Tensor logits = model.forward_logits(batch, nn::BatchNormMode::Train, nullptr, false);
    double total = 0.0;
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < batch.size(); ++i)
      total += nn::softmax_cross_entropy(std::span<const double>(logits.ptr() + i * c, c),
                                         labels[i]).loss;
    return total;
  };
  Model::Cache cache;
  const nn::Tensor logits = model.forward_logits(batch, nn::BatchNormMode::Train, &cache, false);
  const std::size_t c = logits.dim(1);
  nn::Tensor d({batch.size(), c});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto lg =
        nn::softmax_cross_entropy(std::span<const double>(logits.ptr() + i * c, c), labels[i]);
    for (std::size_t k = 0; k < c; ++k) d.at2(i, k) = lg.grad[k];
  }
  model.params().zero_grad();
  model.backward(d, cache);
  return check_params(model.params(), loss, rng, 4);
}

struct NamedCheck {
  std::string name;
  std::function<double(std::uint64_t)> run;
};

inline std::vector<NamedCheck> all_gradient_checks() {
  return {{"relu", check_relu},
          {"softmax_cross_entropy", check_cross_entropy},
          {"conv1d", check_conv1d},
          {"residual_block", check_residual_block},
          {"linear", check_linear},
          {"batch_norm", check_batch_norm},
          {"layer_norm", check_layer_norm},
          {"multi_head_attention", check_attention},
          {"transformer_layer", check_transformer},
          {"intrasample_attention", check_intrasample},
          {"intersample_attention", check_intersample},
          {"tiny_model", check_tiny_model}};
}

}  // namespace gemnet::testing
