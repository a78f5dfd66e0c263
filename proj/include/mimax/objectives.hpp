#pragma once

// Losses and variational MI estimators over batches of embeddings.
//
// Every function builds its value on the tape of its inputs, so the same
// code serves training (recording tape) and evaluation (no-grad tape).
// Losses are minimized; for the DV family total = -(joint - marginal).

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mimax/autodiff.hpp"
#include "mimax/errors.hpp"
#include "mimax/tensor.hpp"

namespace mimax {

struct LossBreakdown {
  double total = 0.0;
  double joint_term = 0.0;
  double marginal_term = 0.0;
};

/// Tape-level loss: differentiate `total`; the other two are reported.
struct LossExpr {
  Var total;
  Var joint;
  Var marginal;

  LossBreakdown values() const {
    return {total.value().item(), joint.value().item(),
            marginal.value().item()};
  }
};

class Temperature {
 public:
  constexpr Temperature() = default;
  explicit Temperature(double value) : value_(value) {
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw ConfigError("temperature must be a positive finite number");
    }
  }
  constexpr double value() const { return value_; }

 private:
  double value_ = 0.1;
};

namespace detail {

inline void require_pair(const Var& za, const Var& zb, const char* op) {
  if (za.value().rank() != 2 || za.shape() != zb.shape()) {
    throw DimensionError(std::string(op) + ": paired batches must share an " +
                         "N x d shape, got " + shape_string(za.shape()) +
                         " and " + shape_string(zb.shape()));
  }
  if (za.value().rows() < 2) {
    throw InsufficientNegativesError(std::string(op) +
                                     " needs a batch of at least 2 rows");
  }
}

// Critic T_ij = cos(za_i, zb_j) / temp, kept factored as unit rows + scale.
struct Critic {
  Var a;
  Var b;
  double scale;
};

inline Critic make_critic(const Var& za, const Var& zb, Temperature temp) {
  return {l2_normalize_rows(za), l2_normalize_rows(zb), 1.0 / temp.value()};
}

// Positive-pair scores T_ii as an N-vector.
inline Var positive_scores(const Critic& c) {
  const double d = static_cast<double>(c.a.value().cols());
  return scalar_mul(mean(mul(c.a, c.b), 1), d * c.scale);
}

inline Var negatives(const Critic& c, PairReduction kind) {
  return pairwise_score_reduce(c.a, c.b, c.scale, kind);
}

}  // namespace detail

/// Batchwise cosine-critic DV loss. Joint term is the mean positive score;
/// the marginal term is log of the mean of exp over the N(N-1) cross pairs.
inline LossExpr cos_dv_loss(const Var& za, const Var& zb, Temperature temp) {
  detail::require_pair(za, zb, "cos_dv_loss");
  const detail::Critic c = detail::make_critic(za, zb, temp);
  Var joint = mean(detail::positive_scores(c));
  Var marginal = detail::negatives(c, PairReduction::kOffdiagLogMeanExp);
  return {sub(marginal, joint), joint, marginal};
}

/// Cos-DV with the marginal term dropped (the collapse-prone ablation).
inline LossExpr joint_only_loss(const Var& za, const Var& zb,
                                Temperature temp) {
  detail::require_pair(za, zb, "joint_only_loss");
  Var joint = mean(detail::positive_scores(detail::make_critic(za, zb, temp)));
  return {neg(joint), joint, za.tape()->constant(Tensor::scalar(0.0))};
}

/// InfoNCE loss, -(estimate - log N). The marginal term is the mean
/// per-row log-sum-exp over all N candidates.
inline LossExpr infonce_loss(const Var& za, const Var& zb, Temperature temp) {
  detail::require_pair(za, zb, "infonce_loss");
  const detail::Critic c = detail::make_critic(za, zb, temp);
  Var joint = mean(detail::positive_scores(c));
  Var marginal = detail::negatives(c, PairReduction::kMeanRowLogSumExp);
  return {sub(marginal, joint), joint, marginal};
}

/// InfoNCE bound: mean_i [T_ii - log sum_j exp(T_ij)] + log N <= log N.
inline Var infonce_estimate(const Var& za, const Var& zb, Temperature temp) {
  const LossExpr l = infonce_loss(za, zb, temp);
  const double log_n = std::log(static_cast<double>(za.value().rows()));
  return add_scalar(neg(l.total), log_n);
}

/// JSD-style bound: E_joint[-softplus(-T)] - E_marginal[softplus(T)], with
/// the marginal expectation over off-diagonal pairs.
inline LossExpr jsd_loss(const Var& za, const Var& zb, Temperature temp) {
  detail::require_pair(za, zb, "jsd_loss");
  const detail::Critic c = detail::make_critic(za, zb, temp);
  Var joint = neg(mean(softplus(neg(detail::positive_scores(c)))));
  Var marginal = detail::negatives(c, PairReduction::kOffdiagMeanSoftplus);
  return {sub(marginal, joint), joint, marginal};
}

inline Var jsd_estimate(const Var& za, const Var& zb, Temperature temp) {
  return neg(jsd_loss(za, zb, temp).total);
}

/// -mean_i p_i . z_i; rows are expected to be unit length already and the
/// caller stops gradients into the target.
inline Var neg_cosine_loss(const Var& p, const Var& z_target) {
  if (p.value().rank() != 2 || p.shape() != z_target.shape()) {
    throw DimensionError("neg_cosine_loss: shapes " + shape_string(p.shape()) +
                         " and " + shape_string(z_target.shape()) + " differ");
  }
  const double n = static_cast<double>(p.value().rows());
  return scalar_mul(sum(mul(p, z_target)), -1.0 / n);
}

inline constexpr double kStandardizeEps = 1e-8;
inline constexpr double kMinFeatureVariance = 1e-12;

namespace detail {

inline void require_feature_variance(const Var& z, const char* which) {
  const Tensor& v = z.value();
  const std::size_t n = v.rows(), d = v.cols();
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += v[i * d + j];
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = v[i * d + j] - m;
      ss += c * c;
    }
    if (ss / static_cast<double>(n) < kMinFeatureVariance) {
      throw StandardizationError(std::string("feature ") + std::to_string(j) +
                                 " of " + which + " has zero variance");
    }
  }
}

}  // namespace detail

/// Cross-correlation C = za_std^T zb_std / N of per-feature standardized
/// batches (population variance, eps 1e-8).
inline Var cross_correlation(const Var& za, const Var& zb) {
  detail::require_pair(za, zb, "cross_correlation");
  detail::require_feature_variance(za, "zA");
  detail::require_feature_variance(zb, "zB");
  Var a = batch_standardize(za, kStandardizeEps);
  Var b = batch_standardize(zb, kStandardizeEps);
  const double n = static_cast<double>(za.value().rows());
  return scalar_mul(matmul(transpose(a), b), 1.0 / n);
}

/// Second-order DV surrogate: -trace(C) + lambda * sum_{i != j} C_ij^2.
/// joint_term = trace(C), marginal_term = the weighted redundancy penalty.
inline LossExpr taylor_dv_loss(const Var& za, const Var& zb,
                               double lambda = 1.0) {
  Var c = cross_correlation(za, zb);
  Var d = diag(c);
  Var joint = sum(d);
  Var off = sub(sum(mul(c, c)), sum(mul(d, d)));
  Var marginal = scalar_mul(off, lambda);
  return {sub(marginal, joint), joint, marginal};
}

/// 0.5 [L(za, zb) + L(zb, za)] for any loss with the LossExpr signature.
template <typename LossFn, typename... Extra>
LossExpr symmetric(LossFn&& loss, const Var& za, const Var& zb,
                   Extra&&... extra) {
  const LossExpr ab = loss(za, zb, extra...);
  const LossExpr ba = loss(zb, za, extra...);
  return {scalar_mul(add(ab.total, ba.total), 0.5),
          scalar_mul(add(ab.joint, ba.joint), 0.5),
          scalar_mul(add(ab.marginal, ba.marginal), 0.5)};
}

// ---------------------------------------------------------------------------
// Tensor-level evaluation without gradients

struct MIEstimates {
  double cos_dv = 0.0;
  double infonce = 0.0;
  double jsd = 0.0;
};

inline LossBreakdown evaluate_cos_dv(const Tensor& za, const Tensor& zb,
                                     Temperature temp) {
  Tape t(Tape::Mode::kNoGrad);
  return cos_dv_loss(t.constant(za), t.constant(zb), temp).values();
}

/// All three bounds on the same pair of embedding batches, sharing one pass
/// over the score rows.
inline MIEstimates estimate_all(const Tensor& za, const Tensor& zb,
                                Temperature temp) {
  Tape t(Tape::Mode::kNoGrad);
  Var a = t.constant(za);
  Var b = t.constant(zb);
  detail::require_pair(a, b, "estimate_all");
  const Tensor ah = l2_normalize_rows(a).value();
  const Tensor bh = l2_normalize_rows(b).value();
  const std::size_t n = ah.rows(), d = ah.cols();
  const double nn = static_cast<double>(n);
  const double pairs = nn * (nn - 1.0);
  std::vector<double> row(n);
  double pos = 0.0, lse = 0.0, sp_pos = 0.0, sp_off = 0.0;
  double dv = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    detail::score_row(ah.data().data() + i * d, bh.data().data(), n, d,
                      1.0 / temp.value(), row.data());
    pos += row[i];
    sp_pos += softplus(-row[i]);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sp_off += softplus(row[j]);
    const double m = *std::max_element(row.begin(), row.end());
    double off = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) off += std::exp(row[j] - m);
    lse += m + std::log(off + std::exp(row[i] - m));
    dv = detail::log_add_exp(dv, m + std::log(off));
  }
  MIEstimates e;
  e.cos_dv = pos / nn - (dv - std::log(pairs));
  e.infonce = (pos - lse) / nn + std::log(nn);
  e.jsd = -sp_pos / nn - sp_off / pairs;
  return e;
}

}  // namespace mimax
