// Tensor, tape, RNG and synthetic-data tests.

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include "mimax/autodiff.hpp"
#include "mimax/rng.hpp"
#include "mimax/synth_data.hpp"
#include "test_util.hpp"

using namespace mimax;
using namespace mimax::testing;

namespace {

// Dense N x N matrix S = scale * a b^T, computed directly.
Tensor naive_scores(const Tensor& a, const Tensor& b, double scale) {
  const std::size_t n = a.rows(), d = a.cols();
  Tensor s = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double v = 0.0;
      for (std::size_t k = 0; k < d; ++k) v += a.at(i, k) * b.at(j, k);
      s.at(i, j) = scale * v;
    }
  return s;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_DOUBLE_EQ(m.at(1, 0), 3.0);
  EXPECT_THROW(m.item(), DimensionError);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), DimensionError);
}

TEST(Tape, NoGradTapeRecordsNothingDifferentiable) {
  Tape t(Tape::Mode::kNoGrad);
  Var x = t.parameter(Tensor::vector({1.0, 2.0}));
  EXPECT_FALSE(x.requires_grad());
  EXPECT_DOUBLE_EQ(sum(mul(x, x)).value().item(), 5.0);
}

TEST(Tape, RejectsVarsFromAnotherTape) {
  Tape a, b;
  Var x = a.parameter(Tensor::vector({1.0}));
  Var y = b.parameter(Tensor::vector({1.0}));
  EXPECT_THROW(add(x, y), std::invalid_argument);
}

TEST(Tape, StopGradientBlocksAncestors) {
  Tape t;
  Var x = t.parameter(Tensor::vector({1.5, -0.5}));
  Var y = add(mul(x, x), stop_gradient(scalar_mul(x, 3.0)));
  t.backward(sum(y));
  const Tensor g = t.grad(x);
  EXPECT_DOUBLE_EQ(g[0], 3.0);
  EXPECT_DOUBLE_EQ(g[1], -1.0);
}

TEST(Tape, GradientAccumulatesOverReuse) {
  Tape t;
  Var x = t.parameter(Tensor::scalar(2.0));
  t.backward(add(mul(x, x), mul(x, x)));
  EXPECT_DOUBLE_EQ(t.grad(x).item(), 8.0);
}

TEST(Ops, DomainErrors) {
  Tape t;
  EXPECT_THROW(log(t.parameter(Tensor::vector({1.0, 0.0}))), DomainError);
  EXPECT_THROW(l2_normalize_rows(t.parameter(Tensor::matrix({{0, 0}, {1, 0}}))),
               DegenerateRowError);
  EXPECT_THROW(matmul(t.parameter(Tensor::zeros({2, 3})), t.parameter(Tensor::zeros({2, 3}))),
               DimensionError);
  EXPECT_THROW(offdiag_logmeanexp(t.parameter(Tensor::zeros({1, 1}))),
               InsufficientNegativesError);
}

TEST(Ops, SoftplusIsStableAtExtremes) {
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
  EXPECT_GT(softplus(-800.0), -1e-300);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(sigmoid(-800.0), 0.0);
}

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  ScalarFn fn;
  double shift = 0.0;  // added to inputs (log needs positive values)
};

class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const std::vector<OpCase> cases = {
      {"matmul", {{4, 3}, {3, 2}},
       [](Tape&, const std::vector<Var>& v) { return sum(mul(matmul(v[0], v[1]), matmul(v[0], v[1]))); }},
      {"transpose", {{3, 2}},
       [](Tape&, const std::vector<Var>& v) { return sum(mul(matmul(transpose(v[0]), v[0]), matmul(transpose(v[0]), v[0]))); }},
      {"sub_mul", {{5}, {5}},
       [](Tape&, const std::vector<Var>& v) { return sum(mul(sub(v[0], v[1]), v[0])); }},
      {"exp_log", {{6}},
       [](Tape&, const std::vector<Var>& v) { return sum(log(add_scalar(exp(v[0]), 1.0))); }},
      {"log", {{6}}, [](Tape&, const std::vector<Var>& v) { return sum(mul(log(v[0]), v[0])); }, 3.0},
      {"relu", {{8}}, [](Tape&, const std::vector<Var>& v) { return sum(mul(relu(v[0]), v[0])); }},
      {"softplus", {{8}}, [](Tape&, const std::vector<Var>& v) { return sum(mul(softplus(v[0]), v[0])); }},
      {"mean_axis0", {{4, 3}},
       [](Tape&, const std::vector<Var>& v) { Var m = mean(mul(v[0], v[0]), 0); return sum(mul(m, m)); }},
      {"mean_axis1", {{4, 3}},
       [](Tape&, const std::vector<Var>& v) { Var m = mean(mul(v[0], v[0]), 1); return sum(mul(m, m)); }},
      {"variance", {{6, 3}},
       [](Tape&, const std::vector<Var>& v) { Var m = variance(v[0], 0); return sum(mul(m, m)); }},
      {"add_mul_row", {{5, 3}, {3}, {3}},
       [](Tape&, const std::vector<Var>& v) { Var y = add_row(mul_row(v[0], v[1]), v[2]); return sum(mul(y, y)); }},
      {"batch_standardize", {{6, 3}, {6, 3}},
       [](Tape&, const std::vector<Var>& v) { return sum(mul(batch_standardize(v[0], 1e-5), v[1])); }},
      {"l2_normalize_rows", {{5, 3}, {5, 3}},
       [](Tape&, const std::vector<Var>& v) { return sum(mul(l2_normalize_rows(v[0]), v[1])); }},
      {"cosine_sim_matrix", {{4, 3}, {4, 3}},
       [](Tape&, const std::vector<Var>& v) { Var s = cosine_sim_matrix(v[0], v[1]); return sum(mul(s, exp(s))); }},
      {"diag_offdiag_mean", {{5, 5}},
       [](Tape&, const std::vector<Var>& v) { return add(sum(mul(diag(v[0]), diag(v[0]))), mul(offdiag_mean(v[0]), offdiag_mean(v[0]))); }},
      {"offdiag_logmeanexp", {{5, 5}},
       [](Tape&, const std::vector<Var>& v) { return offdiag_logmeanexp(scalar_mul(v[0], 3.0)); }},
      {"logsumexp_rows", {{4, 4}},
       [](Tape&, const std::vector<Var>& v) { Var l = logsumexp_rows(v[0]); return sum(mul(l, l)); }},
      {"pair_lme", {{6, 3}, {6, 3}},
       [](Tape&, const std::vector<Var>& v) { return pairwise_score_reduce(v[0], v[1], 2.5, PairReduction::kOffdiagLogMeanExp); }},
      {"pair_rowlse", {{6, 3}, {6, 3}},
       [](Tape&, const std::vector<Var>& v) { return pairwise_score_reduce(v[0], v[1], 2.5, PairReduction::kMeanRowLogSumExp); }},
      {"pair_softplus", {{6, 3}, {6, 3}},
       [](Tape&, const std::vector<Var>& v) { return pairwise_score_reduce(v[0], v[1], 2.5, PairReduction::kOffdiagMeanSoftplus); }},
  };
  Rng rng(derive_seed(77, "op-grad", static_cast<std::uint64_t>(GetParam())));
  for (const auto& c : cases) {
    std::vector<Tensor> inputs;
    for (const auto& s : c.shapes) {
      Tensor t = random_tensor(rng, s);
      if (c.shift > 0.0)
        for (double& v : t.mutable_data()) v = c.shift + std::abs(v);
      inputs.push_back(std::move(t));
    }
    EXPECT_LT(gradient_check(c.fn, inputs), 1e-6) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 5));

TEST(PairwiseScoreReduce, MatchesMaterializedOracles) {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t n = 3 + rng.uniform_index(20);
    const Tensor a = random_tensor(rng, {n, 3});
    const Tensor b = random_tensor(rng, {n, 3});
    const double scale = 0.5 + 10.0 * rng.uniform();
    const Tensor s = naive_scores(a, b, scale);

    double lme_sum = 0.0, sp = 0.0, row_lse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row += std::exp(s.at(i, j));
        if (j == i) continue;
        lme_sum += std::exp(s.at(i, j));
        sp += std::log1p(std::exp(s.at(i, j)));
      }
      row_lse += std::log(row);
    }
    const double nn = static_cast<double>(n);
    const double lme = std::log(lme_sum / (nn * (nn - 1.0)));
    Tape t(Tape::Mode::kNoGrad);
    Var va = t.constant(a), vb = t.constant(b);
    auto rel = [](double x, double y) { return std::abs(x - y) / std::max(1.0, std::abs(y)); };
    EXPECT_LT(rel(pairwise_score_reduce(va, vb, scale, PairReduction::kOffdiagLogMeanExp).value().item(), lme), 1e-10);
    EXPECT_LT(rel(pairwise_score_reduce(va, vb, scale, PairReduction::kMeanRowLogSumExp).value().item(), row_lse / nn), 1e-10);
    EXPECT_LT(rel(pairwise_score_reduce(va, vb, scale, PairReduction::kOffdiagMeanSoftplus).value().item(), sp / (nn * (nn - 1.0))), 1e-10);
  }
}

TEST(PairwiseScoreReduce, GradientMatchesUnfusedComposition) {
  Rng rng(12);
  const Tensor a = random_tensor(rng, {9, 3});
  const Tensor b = random_tensor(rng, {9, 3});
  const ScalarFn fused = [](Tape&, const std::vector<Var>& v) {
    return pairwise_score_reduce(v[0], v[1], 4.0, PairReduction::kOffdiagLogMeanExp);
  };
  const ScalarFn unfused = [](Tape&, const std::vector<Var>& v) {
    return offdiag_logmeanexp(scalar_mul(matmul(v[0], transpose(v[1])), 4.0));
  };
  const auto gf = analytic_grads(fused, {a, b});
  const auto gu = analytic_grads(unfused, {a, b});
  EXPECT_LT(max_abs_diff(gf[0], gu[0]), 1e-10);
  EXPECT_LT(max_abs_diff(gf[1], gu[1]), 1e-10);
}

TEST(PairwiseScoreReduce, LargeScoresStayFinite) {
  Tape t(Tape::Mode::kNoGrad);
  const Tensor a = Tensor::matrix({{1, 0, 0}, {1, 0, 0}, {0, 1, 0}});
  const double v = pairwise_score_reduce(t.constant(a), t.constant(a), 1e4,
                                         PairReduction::kOffdiagLogMeanExp)
                       .value()
                       .item();
  // Two of six cross pairs score 1e4; the rest 0.
  EXPECT_NEAR(v, 1e4 + std::log(2.0 / 6.0), 1e-9);
}

// ---------------------------------------------------------------------------

TEST(Rng, EngineIsStandardMt19937_64) {
  Rng r(5489);
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = r.next_u64();
  EXPECT_EQ(v, 9981545732273789042ULL);
}

TEST(Rng, DerivedSeedsAreStableAndLabelled) {
  EXPECT_EQ(derive_seed(1, "view", 1), derive_seed(1, "view", 1));
  EXPECT_NE(derive_seed(1, "view", 1), derive_seed(1, "view", 2));
  EXPECT_NE(derive_seed(1, "view", 1), derive_seed(1, "cluster", 1));
  EXPECT_NE(derive_seed(1, "view", 1), derive_seed(2, "view", 1));
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  const int n = 200000;
  double s = 0.0, ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    ss += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.015);
}

TEST(Rng, UniformIndexCoversRangeEvenly) {
  Rng r(4);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[r.uniform_index(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
  const auto p = r.permutation(50);
  EXPECT_EQ(std::set<std::size_t>(p.begin(), p.end()).size(), 50u);
}

// ---------------------------------------------------------------------------

TEST(SynthData, DefaultSpecHas2500RowsBalanced) {
  const GaussianMixtureSpec spec;
  const Dataset d = generate_dataset(spec);
  ASSERT_EQ(d.x.rows(), 2500u);
  std::map<int, int> counts;
  for (int l : d.labels) ++counts[l];
  ASSERT_EQ(counts.size(), 5u);
  for (const auto& [label, c] : counts) EXPECT_EQ(c, 500);
}

TEST(SynthData, ClustersSitOnUnitCircleAtExpectedAngles) {
  const GaussianMixtureSpec spec;
  const Dataset d = generate_dataset(spec);
  for (std::size_t c = 0; c < spec.k; ++c) {
    double mx = 0.0, my = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < spec.n_per_cluster; ++i) {
      const std::size_t r = c * spec.n_per_cluster + i;
      mx += d.x.at(r, 0);
      my += d.x.at(r, 1);
    }
    mx /= spec.n_per_cluster;
    my /= spec.n_per_cluster;
    for (std::size_t i = 0; i < spec.n_per_cluster; ++i) {
      const std::size_t r = c * spec.n_per_cluster + i;
      ss += std::pow(d.x.at(r, 0) - mx, 2) + std::pow(d.x.at(r, 1) - my, 2);
    }
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c + 1) / 5.0;
    EXPECT_NEAR(mx, std::cos(angle), 0.01);
    EXPECT_NEAR(my, std::sin(angle), 0.01);
    EXPECT_NEAR(std::sqrt(ss / (2.0 * spec.n_per_cluster)), 0.05, 0.004);
  }
}

TEST(SynthData, ZeroNoiseGivesFiveDistinctRows) {
  GaussianMixtureSpec spec;
  spec.sigma = 0.0;
  spec.tau = 0.0;
  const Dataset d = generate_dataset(spec);
  std::set<std::pair<double, double>> rows;
  for (std::size_t i = 0; i < d.x.rows(); ++i) rows.insert({d.x.at(i, 0), d.x.at(i, 1)});
  EXPECT_EQ(rows.size(), 5u);
  const PairedBatch v = make_paired_views(d, spec.tau, 1);
  EXPECT_EQ(v.x1, d.x);
  EXPECT_EQ(v.x2, d.x);
}

TEST(SynthData, SeedDeterminesEverything) {
  GaussianMixtureSpec spec;
  EXPECT_EQ(generate_dataset(spec).x, generate_dataset(spec).x);
  EXPECT_NE(generate_dataset(spec).x, generate_validation_dataset(spec).x);
  spec.seed = 1;
  GaussianMixtureSpec zero;
  EXPECT_EQ(generate_dataset(spec).x, generate_validation_dataset(zero).x);
}

TEST(SynthData, ViewsAreIndependentNoisyCopies) {
  const GaussianMixtureSpec spec;
  const Dataset d = generate_dataset(spec);
  const PairedBatch v = make_paired_views(d, 0.1, 42);
  double s1 = 0.0, s2 = 0.0, cross = 0.0;
  const double n = static_cast<double>(d.x.size());
  for (std::size_t i = 0; i < d.x.size(); ++i) {
    const double e1 = v.x1[i] - d.x[i], e2 = v.x2[i] - d.x[i];
    s1 += e1 * e1;
    s2 += e2 * e2;
    cross += e1 * e2;
  }
  EXPECT_NEAR(std::sqrt(s1 / n), 0.1, 0.004);
  EXPECT_NEAR(std::sqrt(s2 / n), 0.1, 0.004);
  EXPECT_NEAR(cross / n, 0.0, 0.0005);
  EXPECT_EQ(v.labels, d.labels);
}

TEST(SynthData, RejectsInvalidSpecs) {
  GaussianMixtureSpec spec;
  spec.sigma = -1.0;
  EXPECT_THROW(generate_dataset(spec), ConfigError);
  spec = {};
  spec.k = 1;
  EXPECT_THROW(generate_dataset(spec), ConfigError);
  EXPECT_THROW(make_paired_views(generate_dataset({}), -0.1, 0), ConfigError);
}

TEST(ExactMi, ClosedForms) {
  EXPECT_NEAR(exact_mi(DiscreteJoint({{0.25, 0.25}, {0.25, 0.25}})), 0.0, 1e-15);
  std::vector<std::vector<double>> diag(4, std::vector<double>(4, 0.0));
  for (int i = 0; i < 4; ++i) diag[i][i] = 0.25;
  EXPECT_NEAR(exact_mi(DiscreteJoint(diag)), std::log(4.0), 1e-14);
  // Binary symmetric channel with crossover 0.1 on a uniform input.
  const double p = 0.1;
  const double h = -p * std::log(p) - (1 - p) * std::log(1 - p);
  EXPECT_NEAR(exact_mi(DiscreteJoint({{0.45, 0.05}, {0.05, 0.45}})), std::log(2.0) - h,
              1e-14);
  EXPECT_THROW(DiscreteJoint({{0.5, 0.6}}), ConfigError);
  EXPECT_THROW(DiscreteJoint({{0.5}, {0.25, 0.25}}), ConfigError);
}

TEST(ExactMi, SamplingFrequenciesMatchPmf) {
  const DiscreteJoint j({{0.1, 0.2}, {0.3, 0.4}});
  Rng rng(9);
  std::map<std::pair<std::size_t, std::size_t>, int> counts;
  for (const auto& s : j.sample(100000, rng)) ++counts[s];
  const double p00 = counts[{0, 0}] / 1e5, p11 = counts[{1, 1}] / 1e5;
  EXPECT_NEAR(p00, 0.1, 0.005);
  EXPECT_NEAR(p11, 0.4, 0.005);
}
