#pragma once

// Toy encoder 2 -> 64 -> 3:
//   z = normalize(BN2(relu(BN1(x W1 + b1)) W2))
// The second linear layer carries no bias because BN2's shift absorbs it.
// The optional predictor head is 3 -> h -> 3 with an L2-normalized output.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mimax/autodiff.hpp"
#include "mimax/errors.hpp"
#include "mimax/rng.hpp"
#include "mimax/tensor.hpp"

namespace mimax {

inline constexpr std::size_t kInputDim = 2;
inline constexpr std::size_t kHiddenDim = 64;
inline constexpr std::size_t kEmbedDim = 3;
inline constexpr std::size_t kDefaultPredictorHidden = 16;

enum class Mode { kTrain, kEval };

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState identity(std::size_t d) {
    return {Tensor::filled({d}, 1.0), Tensor::zeros({d}), Tensor::zeros({d}),
            Tensor::filled({d}, 1.0)};
  }

  friend bool operator==(const BatchNormState&, const BatchNormState&) = default;
};

struct EncoderParams {
  Tensor w1;  // 2 x 64
  Tensor b1;  // 64
  BatchNormState bn1;
  Tensor w2;  // 64 x 3
  BatchNormState bn2;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

struct PredictorParams {
  Tensor w1;  // 3 x h
  Tensor b1;  // h
  Tensor w2;  // h x 3
  Tensor b2;  // 3

  friend bool operator==(const PredictorParams&, const PredictorParams&) = default;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;
using ConstNamedTensors = std::vector<std::pair<std::string, const Tensor*>>;

/// Trainable tensors in canonical order. Checkpoints, optimizers and EMA all
/// iterate this list.
inline NamedTensors named_parameters(EncoderParams& p) {
  return {{"w1", &p.w1},          {"b1", &p.b1},         {"bn1.gamma", &p.bn1.gamma},
          {"bn1.beta", &p.bn1.beta}, {"w2", &p.w2},      {"bn2.gamma", &p.bn2.gamma},
          {"bn2.beta", &p.bn2.beta}};
}

/// Non-trainable state (batch-norm running statistics).
inline NamedTensors named_buffers(EncoderParams& p) {
  return {{"bn1.running_mean", &p.bn1.running_mean},
          {"bn1.running_var", &p.bn1.running_var},
          {"bn2.running_mean", &p.bn2.running_mean},
          {"bn2.running_var", &p.bn2.running_var}};
}

inline NamedTensors named_parameters(PredictorParams& p) {
  return {{"w1", &p.w1}, {"b1", &p.b1}, {"w2", &p.w2}, {"b2", &p.b2}};
}

template <typename P>
ConstNamedTensors named_parameters(const P& p) {
  ConstNamedTensors out;
  for (auto& [name, t] : named_parameters(const_cast<P&>(p))) out.emplace_back(name, t);
  return out;
}

inline ConstNamedTensors named_buffers(const EncoderParams& p) {
  ConstNamedTensors out;
  for (auto& [name, t] : named_buffers(const_cast<EncoderParams&>(p)))
    out.emplace_back(name, t);
  return out;
}

template <typename P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters(p)) n += t->size();
  return n;
}

namespace detail {

inline Tensor uniform_fan_in(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace detail

/// Weights and first-layer bias ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)).
inline EncoderParams init_encoder(Rng& rng) {
  EncoderParams p;
  p.w1 = detail::uniform_fan_in(rng, {kInputDim, kHiddenDim}, kInputDim);
  p.b1 = detail::uniform_fan_in(rng, {kHiddenDim}, kInputDim);
  p.bn1 = BatchNormState::identity(kHiddenDim);
  p.w2 = detail::uniform_fan_in(rng, {kHiddenDim, kEmbedDim}, kHiddenDim);
  p.bn2 = BatchNormState::identity(kEmbedDim);
  return p;
}

inline PredictorParams init_predictor(
    Rng& rng, std::size_t hidden = kDefaultPredictorHidden) {
  if (hidden == 0) throw ConfigError("predictor hidden width must be > 0");
  PredictorParams p;
  p.w1 = detail::uniform_fan_in(rng, {kEmbedDim, hidden}, kEmbedDim);
  p.b1 = detail::uniform_fan_in(rng, {hidden}, kEmbedDim);
  p.w2 = detail::uniform_fan_in(rng, {hidden, kEmbedDim}, hidden);
  p.b2 = detail::uniform_fan_in(rng, {kEmbedDim}, hidden);
  return p;
}

// ---------------------------------------------------------------------------
// Binding parameters onto a tape

/// Parameter tensors registered as tape leaves, in named_parameters order.
struct BoundParams {
  std::vector<Var> vars;
  const Var& operator[](std::size_t i) const { return vars[i]; }
};

template <typename P>
BoundParams bind(Tape& tape, const P& params, bool trainable = true) {
  BoundParams b;
  for (const auto& [name, t] : named_parameters(params)) {
    b.vars.push_back(trainable ? tape.parameter(*t) : tape.constant(*t));
  }
  return b;
}

/// Gradients for each bound parameter after Tape::backward.
inline std::vector<Tensor> gradients(const Tape& tape, const BoundParams& b) {
  std::vector<Tensor> out;
  out.reserve(b.vars.size());
  for (const Var& v : b.vars) out.push_back(tape.grad(v));
  return out;
}

struct BatchStats {
  Tensor mean1, var1, mean2, var2;  // population variance
  std::size_t n = 0;
};

struct EncodeResult {
  Var z;          // N x 3, unit rows
  Var bn1_hat;    // standardized pre-affine activations of BN1
  Var bn2_hat;
  BatchStats stats;  // filled in train mode only
};

namespace detail {

inline std::pair<Tensor, Tensor> column_moments(const Tensor& h) {
  const std::size_t n = h.rows(), d = h.cols();
  std::vector<double> m(d, 0.0), v(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m[j] += h[i * d + j];
  for (double& x : m) x /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = h[i * d + j] - m[j];
      v[j] += c * c;
    }
  for (double& x : v) x /= static_cast<double>(n);
  return {Tensor({d}, std::move(m)), Tensor({d}, std::move(v))};
}

// (h - running_mean) / sqrt(running_var + eps) as a constant affine map.
inline Var standardize_running(Tape& tape, const Var& h,
                               const BatchNormState& bn) {
  const std::size_t d = bn.running_mean.size();
  std::vector<double> scale(d), shift(d);
  for (std::size_t j = 0; j < d; ++j) {
    scale[j] = 1.0 / std::sqrt(bn.running_var[j] + bn.eps);
    shift[j] = -bn.running_mean[j] * scale[j];
  }
  Var s = tape.constant(Tensor({d}, std::move(scale)));
  Var b = tape.constant(Tensor({d}, std::move(shift)));
  return add_row(mul_row(h, s), b);
}

inline Var bn_layer(Tape& tape, const Var& h, const BatchNormState& bn,
                    const Var& gamma, const Var& beta, Mode mode, Var& hat) {
  hat = mode == Mode::kTrain ? batch_standardize(h, bn.eps)
                             : standardize_running(tape, h, bn);
  return add_row(mul_row(hat, gamma), beta);
}

}  // namespace detail

/// Forward pass. In train mode batch statistics are used and returned in
/// EncodeResult::stats; running statistics are NOT touched here (see
/// update_running_stats). Eval mode reads running statistics only.
inline EncodeResult encode(Tape& tape, const BoundParams& b,
                           const EncoderParams& p, const Var& x, Mode mode) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != kInputDim) {
    throw DimensionError("encode expects N x 2 input, got " +
                         shape_string(xv.shape()));
  }
  if (mode == Mode::kTrain && xv.rows() < 2) {
    throw BatchTooSmallError("train-mode encode needs at least 2 rows, got " +
                             std::to_string(xv.rows()));
  }
  EncodeResult r;
  Var h1 = add_row(matmul(x, b[0]), b[1]);
  if (mode == Mode::kTrain) {
    auto [m, v] = detail::column_moments(h1.value());
    r.stats.mean1 = std::move(m);
    r.stats.var1 = std::move(v);
  }
  Var a1 = relu(detail::bn_layer(tape, h1, p.bn1, b[2], b[3], mode, r.bn1_hat));
  Var h2 = matmul(a1, b[4]);
  if (mode == Mode::kTrain) {
    auto [m, v] = detail::column_moments(h2.value());
    r.stats.mean2 = std::move(m);
    r.stats.var2 = std::move(v);
    r.stats.n = xv.rows();
  }
  Var o = detail::bn_layer(tape, h2, p.bn2, b[5], b[6], mode, r.bn2_hat);
  r.z = l2_normalize_rows(o);
  return r;
}

/// Exponential running-average update; the variance is stored unbiased.
inline void update_running_stats(EncoderParams& p, const BatchStats& s) {
  if (s.n < 2) return;
  const double corr = static_cast<double>(s.n) / static_cast<double>(s.n - 1);
  auto blend = [&](BatchNormState& bn, const Tensor& m, const Tensor& v) {
    for (std::size_t j = 0; j < m.size(); ++j) {
      bn.running_mean[j] =
          (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * m[j];
      bn.running_var[j] =
          (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * v[j] * corr;
    }
  };
  blend(p.bn1, s.mean1, s.var1);
  blend(p.bn2, s.mean2, s.var2);
}

/// Eval-mode embedding; does not modify `p`.
inline Tensor encode_eval(const EncoderParams& p, const Tensor& x) {
  Tape tape(Tape::Mode::kNoGrad);
  BoundParams b = bind(tape, p, false);
  return encode(tape, b, p, tape.constant(x), Mode::kEval).z.value();
}

inline Var predict(const BoundParams& b, const Var& z) {
  Var h = relu(add_row(matmul(z, b[0]), b[1]));
  return l2_normalize_rows(add_row(matmul(h, b[2]), b[3]));
}

inline Tensor predict_eval(const PredictorParams& p, const Tensor& z) {
  Tape tape(Tape::Mode::kNoGrad);
  BoundParams b = bind(tape, p, false);
  return predict(b, tape.constant(z)).value();
}

/// target <- tau * target + (1 - tau) * online for every trainable tensor.
/// Running statistics are copied from the online encoder.
inline void ema_update(EncoderParams& target, const EncoderParams& online,
                       double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw ConfigError("EMA coefficient must lie in [0, 1]");
  }
  auto dst = named_parameters(target);
  auto src = named_parameters(online);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto out = dst[i].second->mutable_data();
    auto in = src[i].second->data();
    for (std::size_t k = 0; k < out.size(); ++k)
      out[k] = tau * out[k] + (1.0 - tau) * in[k];
  }
  target.bn1.running_mean = online.bn1.running_mean;
  target.bn1.running_var = online.bn1.running_var;
  target.bn2.running_mean = online.bn2.running_mean;
  target.bn2.running_var = online.bn2.running_var;
}

inline EncoderParams copy_params(const EncoderParams& src) { return src; }

}  // namespace mimax
