#pragma once

// Frozen-encoder MI tracking and embedding-geometry diagnostics.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "mimax/encoder.hpp"
#include "mimax/errors.hpp"
#include "mimax/objectives.hpp"
#include "mimax/synth_data.hpp"
#include "mimax/tensor.hpp"

namespace mimax {

/// Mean pairwise cosine above this marks a collapsed representation.
inline constexpr double kCollapseThreshold = 0.99;

inline constexpr double kUnitTolerance = 1e-6;

struct NNGaps {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double sd = 0.0;  // population standard deviation over the k minima
};

/// Angle (degrees) from each center to its nearest other center, summarized.
inline NNGaps nn_angle_gaps(const Tensor& centers) {
  if (centers.rank() != 2 || centers.rows() < 2) {
    throw DimensionError("nn_angle_gaps needs at least 2 center rows");
  }
  const std::size_t k = centers.rows(), d = centers.cols();
  for (std::size_t i = 0; i < k; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += centers.at(i, j) * centers.at(i, j);
    if (std::abs(std::sqrt(ss) - 1.0) > kUnitTolerance) {
      throw DegenerateRowError("nn_angle_gaps: center " + std::to_string(i) +
                               " is not unit length");
    }
  }
  std::vector<double> nearest(k, 180.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t o = 0; o < k; ++o) {
      if (o == i) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += centers.at(i, j) * centers.at(o, j);
      dot = std::clamp(dot, -1.0, 1.0);
      nearest[i] = std::min(nearest[i], std::acos(dot) * 180.0 / std::numbers::pi);
    }
  }
  NNGaps g;
  g.min = *std::min_element(nearest.begin(), nearest.end());
  g.max = *std::max_element(nearest.begin(), nearest.end());
  for (double a : nearest) g.mean += a;
  g.mean /= static_cast<double>(k);
  for (double a : nearest) g.sd += (a - g.mean) * (a - g.mean);
  g.sd = std::sqrt(g.sd / static_cast<double>(k));
  return g;
}

struct CollapseScore {
  double mean_pairwise_cos = 0.0;
  std::vector<double> per_dim_std;

  bool collapsed() const { return mean_pairwise_cos > kCollapseThreshold; }
};

/// Mean cosine over pairs i < j via ||sum u_i||^2 = sum_ij u_i . u_j, in O(Nd).
inline CollapseScore collapse_score(const Tensor& z) {
  if (z.rank() != 2 || z.rows() < 2) {
    throw DimensionError("collapse_score needs at least 2 rows");
  }
  const std::size_t n = z.rows(), d = z.cols();
  std::vector<double> total(d, 0.0), mean(d, 0.0);
  double self = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += z.at(i, j) * z.at(i, j);
    const double norm = std::sqrt(ss);
    if (norm < kNormEpsilon) {
      throw DegenerateRowError("collapse_score: zero row " + std::to_string(i));
    }
    for (std::size_t j = 0; j < d; ++j) {
      const double u = z.at(i, j) / norm;
      total[j] += u;
      self += u * u;
      mean[j] += z.at(i, j);
    }
  }
  double sq = 0.0;
  for (double t : total) sq += t * t;
  const double nn = static_cast<double>(n);
  CollapseScore s;
  s.mean_pairwise_cos = (sq - self) / (nn * (nn - 1.0));
  s.per_dim_std.assign(d, 0.0);
  for (double& m : mean) m /= nn;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = z.at(i, j) - mean[j];
      s.per_dim_std[j] += c * c;
    }
  for (double& v : s.per_dim_std) v = std::sqrt(v / nn);
  return s;
}

/// Eval-mode embeddings of the k noise-free mixture centers (k x 3).
inline Tensor track_centers(const EncoderParams& encoder,
                            const GaussianMixtureSpec& spec) {
  return encode_eval(encoder, spec.centers());
}

/// MI bounds between encoder_a(x1) and encoder_b(x2) on held-out views.
/// Pass the same encoder twice for single-encoder methods.
inline MIEstimates estimate_mi_epoch(const EncoderParams& encoder_a,
                                     const EncoderParams& encoder_b,
                                     const PairedBatch& val, Temperature temp) {
  const Tensor za = encode_eval(encoder_a, val.x1);
  const Tensor zb = encode_eval(encoder_b, val.x2);
  return estimate_all(za, zb, temp);
}

/// One row of the per-epoch training trace. MI fields are empty when the
/// branch pairing is undefined.
struct MITraceRow {
  std::size_t epoch = 0;
  std::optional<double> mi_cos_dv;
  std::optional<double> mi_infonce;
  std::optional<double> mi_jsd;
  double mean_pairwise_cos = 0.0;
  NNGaps nn_gap;

  friend bool operator==(const MITraceRow& a, const MITraceRow& b) {
    return a.epoch == b.epoch && a.mi_cos_dv == b.mi_cos_dv &&
           a.mi_infonce == b.mi_infonce && a.mi_jsd == b.mi_jsd &&
           a.mean_pairwise_cos == b.mean_pairwise_cos &&
           a.nn_gap.mean == b.nn_gap.mean && a.nn_gap.min == b.nn_gap.min &&
           a.nn_gap.max == b.nn_gap.max && a.nn_gap.sd == b.nn_gap.sd;
  }
};

/// Consecutive-epoch decreases of one estimator column. Pairs with a missing
/// value on either side are skipped.
struct MonotonicityStats {
  std::size_t pairs = 0;
  std::size_t decreasing = 0;
  double max_drop = 0.0;
  std::optional<double> first, last;

  double decreasing_fraction() const {
    return pairs == 0 ? 0.0 : static_cast<double>(decreasing) / static_cast<double>(pairs);
  }
};

inline MonotonicityStats monotonicity(const std::vector<MITraceRow>& rows,
                                      std::optional<double> MITraceRow::*field) {
  MonotonicityStats s;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = rows[i].*field;
    if (!v) continue;
    if (!s.first) s.first = v;
    s.last = v;
    if (i == 0) continue;
    const auto& prev = rows[i - 1].*field;
    if (!prev) continue;
    ++s.pairs;
    if (*v < *prev) {
      ++s.decreasing;
      s.max_drop = std::max(s.max_drop, *prev - *v);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Data-processing check on finite alphabets

/// Row-stochastic channel: channel[x][y] = P(y | x).
using Channel = std::vector<std::vector<double>>;
/// Deterministic encoder over a finite alphabet: code[x] = z.
using Codebook = std::vector<std::size_t>;

struct InformativenessReport {
  double mi_z1_z2 = 0.0;
  double mi_x_z1 = 0.0;
  double mi_x_z2 = 0.0;

  bool holds(double tol = 1e-12) const {
    return mi_z1_z2 <= std::min(mi_x_z1, mi_x_z2) + tol;
  }
};

/// x ~ p_x, views x_v ~ channel_v(. | x), z_v = code_v[x_v]. All three MIs
/// are computed exactly by enumeration.
inline InformativenessReport verify_informativeness_bound(
    const std::vector<double>& p_x, const Channel& view1, const Channel& view2,
    const Codebook& code1, const Codebook& code2) {
  const std::size_t nx = p_x.size();
  auto num_codes = [](const Codebook& c) {
    return c.empty() ? std::size_t{0}
                     : *std::max_element(c.begin(), c.end()) + 1;
  };
  const std::size_t m1 = num_codes(code1), m2 = num_codes(code2);
  if (view1.size() != nx || view2.size() != nx) {
    throw DimensionError("channel rows must match the input alphabet");
  }
  if (m1 == 0 || m2 == 0) {
    throw DimensionError("codebooks must be non-empty");
  }
  std::vector<std::vector<double>> j12(m1, std::vector<double>(m2, 0.0));
  std::vector<std::vector<double>> jx1(nx, std::vector<double>(m1, 0.0));
  std::vector<std::vector<double>> jx2(nx, std::vector<double>(m2, 0.0));
  for (std::size_t x = 0; x < nx; ++x) {
    if (view1[x].size() != code1.size() || view2[x].size() != code2.size()) {
      throw DimensionError("channel columns must match the codebook size");
    }
    std::vector<double> q1(m1, 0.0), q2(m2, 0.0);
    for (std::size_t y = 0; y < code1.size(); ++y) q1[code1[y]] += view1[x][y];
    for (std::size_t y = 0; y < code2.size(); ++y) q2[code2[y]] += view2[x][y];
    for (std::size_t a = 0; a < m1; ++a) {
      jx1[x][a] += p_x[x] * q1[a];
      for (std::size_t b = 0; b < m2; ++b) j12[a][b] += p_x[x] * q1[a] * q2[b];
    }
    for (std::size_t b = 0; b < m2; ++b) jx2[x][b] += p_x[x] * q2[b];
  }
  // Renormalize away accumulated rounding so DiscreteJoint accepts the pmfs.
  auto normalized = [](std::vector<std::vector<double>> m) {
    double t = 0.0;
    for (const auto& r : m)
      for (double v : r) t += v;
    for (auto& r : m)
      for (double& v : r) v /= t;
    return DiscreteJoint(std::move(m));
  };
  return {exact_mi(normalized(std::move(j12))),
          exact_mi(normalized(std::move(jx1))),
          exact_mi(normalized(std::move(jx2)))};
}

}  // namespace mimax
