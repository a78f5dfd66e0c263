#pragma once

// Five-cluster Gaussian mixture on the unit circle, paired noisy views, and
// small discrete joints with exactly computable mutual information.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mimax/errors.hpp"
#include "mimax/rng.hpp"
#include "mimax/tensor.hpp"

namespace mimax {

struct GaussianMixtureSpec {
  std::size_t k = 5;
  double sigma = 0.05;
  double tau = 0.1;
  std::size_t n_per_cluster = 500;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 2) throw ConfigError("mixture needs k >= 2 clusters");
    if (!(sigma >= 0.0) || !std::isfinite(sigma))
      throw ConfigError("sigma must be finite and >= 0");
    if (!(tau >= 0.0) || !std::isfinite(tau))
      throw ConfigError("tau must be finite and >= 0");
    if (n_per_cluster < 1) throw ConfigError("n_per_cluster must be >= 1");
  }

  std::size_t total() const { return k * n_per_cluster; }

  /// Center of cluster `c` (0-based); c + 1 plays the role of the 1-based
  /// cluster index in mu_k = (cos 2 pi k / K, sin 2 pi k / K).
  std::array<double, 2> center(std::size_t c) const {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c + 1) /
                         static_cast<double>(k);
    return {std::cos(angle), std::sin(angle)};
  }

  Tensor centers() const {
    std::vector<double> data;
    data.reserve(2 * k);
    for (std::size_t c = 0; c < k; ++c) {
      const auto mu = center(c);
      data.push_back(mu[0]);
      data.push_back(mu[1]);
    }
    return Tensor({k, 2}, std::move(data));
  }
};

struct Dataset {
  Tensor x;                 // N x 2
  std::vector<int> labels;  // cluster per row
};

struct PairedBatch {
  Tensor x1;
  Tensor x2;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

/// Rows are cluster-major: n_per_cluster rows of cluster 0, then 1, ...
/// Each cluster draws from its own sub-stream of spec.seed.
inline Dataset generate_dataset(const GaussianMixtureSpec& spec) {
  spec.validate();
  const std::size_t n = spec.total();
  std::vector<double> data(2 * n);
  std::vector<int> labels(n);
  for (std::size_t c = 0; c < spec.k; ++c) {
    Rng rng(derive_seed(spec.seed, "cluster", c));
    const auto mu = spec.center(c);
    for (std::size_t i = 0; i < spec.n_per_cluster; ++i) {
      const std::size_t row = c * spec.n_per_cluster + i;
      const auto [z0, z1] = rng.normal_pair();
      data[2 * row] = mu[0] + spec.sigma * z0;
      data[2 * row + 1] = mu[1] + spec.sigma * z1;
      labels[row] = static_cast<int>(c);
    }
  }
  return {Tensor({n, 2}, std::move(data)), std::move(labels)};
}

/// Held-out set used for MI estimation: same spec, seed + 1.
inline Dataset generate_validation_dataset(const GaussianMixtureSpec& spec) {
  GaussianMixtureSpec v = spec;
  v.seed = spec.seed + 1;
  return generate_dataset(v);
}

/// x_v = x + eps_v with eps_v ~ N(0, tau^2 I), one sub-stream per view.
inline PairedBatch make_paired_views(const Tensor& base,
                                     const std::vector<int>& labels, double tau,
                                     std::uint64_t seed) {
  if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
  if (base.rank() != 2 || base.cols() != 2 || base.rows() != labels.size()) {
    throw DimensionError("make_paired_views expects N x 2 base and N labels");
  }
  auto perturb = [&](std::uint64_t view) {
    Rng rng(derive_seed(seed, "view", view));
    std::vector<double> out(base.values());
    for (std::size_t i = 0; i < base.rows(); ++i) {
      const auto [e0, e1] = rng.normal_pair();
      out[2 * i] += tau * e0;
      out[2 * i + 1] += tau * e1;
    }
    return Tensor(base.shape(), std::move(out));
  };
  return {perturb(1), perturb(2), labels};
}

inline PairedBatch make_paired_views(const Dataset& d, double tau,
                                     std::uint64_t seed) {
  return make_paired_views(d.x, d.labels, tau, seed);
}

/// Selects rows `idx` of a paired batch.
inline PairedBatch gather(const PairedBatch& b,
                          const std::vector<std::size_t>& idx) {
  std::vector<double> a(2 * idx.size()), c(2 * idx.size());
  std::vector<int> labels(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    a[2 * i] = b.x1[2 * idx[i]];
    a[2 * i + 1] = b.x1[2 * idx[i] + 1];
    c[2 * i] = b.x2[2 * idx[i]];
    c[2 * i + 1] = b.x2[2 * idx[i] + 1];
    labels[i] = b.labels[idx[i]];
  }
  const std::size_t n = idx.size();
  return {Tensor({n, 2}, std::move(a)), Tensor({n, 2}, std::move(c)),
          std::move(labels)};
}

// ---------------------------------------------------------------------------
// Exact-MI oracle

class DiscreteJoint {
 public:
  explicit DiscreteJoint(std::vector<std::vector<double>> pmf)
      : pmf_(std::move(pmf)) {
    if (pmf_.empty() || pmf_[0].empty())
      throw ConfigError("joint pmf must be non-empty");
    double total = 0.0;
    for (const auto& row : pmf_) {
      if (row.size() != pmf_[0].size()) throw ConfigError("ragged joint pmf");
      for (double p : row) {
        if (!(p >= 0.0)) throw ConfigError("joint pmf has a negative entry");
        total += p;
      }
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw ConfigError("joint pmf sums to " + std::to_string(total));
    }
  }

  std::size_t rows() const { return pmf_.size(); }
  std::size_t cols() const { return pmf_[0].size(); }
  double operator()(std::size_t a, std::size_t b) const { return pmf_[a][b]; }
  const std::vector<std::vector<double>>& pmf() const { return pmf_; }

  std::vector<double> marginal_a() const {
    std::vector<double> m(rows(), 0.0);
    for (std::size_t a = 0; a < rows(); ++a)
      for (double p : pmf_[a]) m[a] += p;
    return m;
  }

  std::vector<double> marginal_b() const {
    std::vector<double> m(cols(), 0.0);
    for (const auto& row : pmf_)
      for (std::size_t b = 0; b < cols(); ++b) m[b] += row[b];
    return m;
  }

  /// Samples `n` (a, b) pairs by inverse CDF over the flattened pmf.
  std::vector<std::pair<std::size_t, std::size_t>> sample(std::size_t n,
                                                          Rng& rng) const {
    std::vector<double> cdf;
    cdf.reserve(rows() * cols());
    double acc = 0.0;
    for (const auto& row : pmf_)
      for (double p : row) cdf.push_back(acc += p);
    std::vector<std::pair<std::size_t, std::size_t>> out(n);
    for (auto& o : out) {
      const double u = rng.uniform() * acc;
      std::size_t k = 0;
      while (k + 1 < cdf.size() && cdf[k] <= u) ++k;
      o = {k / cols(), k % cols()};
    }
    return out;
  }

 private:
  std::vector<std::vector<double>> pmf_;
};

/// I(A; B) in nats, with 0 log 0 = 0.
inline double exact_mi(const DiscreteJoint& j) {
  const auto pa = j.marginal_a();
  const auto pb = j.marginal_b();
  double mi = 0.0;
  for (std::size_t a = 0; a < j.rows(); ++a) {
    for (std::size_t b = 0; b < j.cols(); ++b) {
      const double p = j(a, b);
      if (p > 0.0) mi += p * std::log(p / (pa[a] * pb[b]));
    }
  }
  // Rounding can leave a tiny negative value for product pmfs.
  return mi < 0.0 ? 0.0 : mi;
}

}  // namespace mimax
