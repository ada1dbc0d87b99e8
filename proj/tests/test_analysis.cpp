// Tests for the verification harness: decay reports, root correlation,
// threshold sweeps, exact posteriors, and the empirical hypothesis checkers.
// Frozen constants come from an independent oracle (exact-fraction pair-count
// sums for the sweeps, Bayes closed forms and enumeration for the posterior,
// and eigenfunction algebra for the conditional second-moment ratios).

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "treecast/analysis.hpp"

namespace tc = treecast;

namespace {

tc::TransitionMatrix generic2() {
  Eigen::MatrixXd m(2, 2);
  m << 0.7, 0.3,
       0.4, 0.6;
  return tc::TransitionMatrix(m);
}

tc::TransitionMatrix absorbing3() {
  Eigen::MatrixXd m(3, 3);
  m << 0.5, 0.5, 0.0,
       0.5, 0.5, 0.0,
       0.0, 0.0, 1.0;
  return tc::TransitionMatrix(m);
}

tc::Word w(std::initializer_list<int> letters) { return tc::Word(letters); }

tc::MultiIndex mi(std::initializer_list<std::pair<tc::Word, int>> entries) {
  std::map<tc::Word, int, tc::WordLess> m;
  for (const auto& [word, j] : entries) m[word] = j;
  return tc::MultiIndex(std::move(m));
}

// The singleton family {{v} : v leaf}; closed under branch decomposition.
tc::SetFamily singleton_family(const tc::RootedTree& tree) {
  tc::SetFamily fam;
  for (const tc::Word& leaf : tree.leaves()) fam.push_back({leaf});
  return fam;
}

// f = sum over leaves of phi_1(x_v), the count statistic.
tc::LeafPolynomial count_statistic(const tc::RootedTree& tree) {
  tc::LeafPolynomial f;
  for (const tc::Word& leaf : tree.leaves()) f.add(mi({{leaf, 1}}), 1.0);
  return f;
}

tc::LeafPolynomial random_leaf_polynomial(const tc::RootedTree& tree, int q,
                                          int terms, int max_order,
                                          tc::Rng& rng) {
  const std::vector<tc::Word>& L = tree.leaves();
  tc::LeafPolynomial f;
  for (int t = 0; t < terms; ++t) {
    std::map<tc::Word, int, tc::WordLess> entries;
    const int order = 1 + rng.index(max_order);
    for (int k = 0; k < order; ++k)
      entries[L[rng.index(static_cast<int>(L.size()))]] =
          1 + rng.index(q - 1);
    f.add(tc::MultiIndex(std::move(entries)), rng.uniform(-1.0, 1.0));
  }
  return f;
}

// Frozen by the analysis oracle.
const double kRatioLamHalfL8 = 0.002607561929595828;
const double kQuotientLamHalfL8 = 0.49934810951760106;
const double kCorrLamHalfL8 = 0.05106429211881652;
const double kMinRatioLamEight = 0.47454412774541055;
const double kRatioLamEightL4 = 0.5534804986822471;
const double kBpTwoLeaf = 0.9411764705882353;       // 16/17
const double kBpDepth2Gen0 = 0.5515992133319532;
const double kBpDepth2Gen1 = 0.4484007866680468;
const double kCondRatioLo = 0.925;                  // 37/40
const double kCondRatioHi = 1.1;                    // 11/10
const double kLargestCStar = 0.9090909090909091;    // 10/11
const double kSupNormRatio = 4.0 / 37.0;            // 0.1 / 0.925
const double kDecayLam06L3 = 0.046656;              // (3/5)^6
const double kCorrLam06L3 = 0.216;                  // (3/5)^3

}  // namespace

// ---------------------------------------------------------------------------
// Decay reports.

TEST(DecayReport, SingleLeafClosedForm) {
  const tc::RootedTree tree = tc::make_dary(2, 3);
  const tc::TransitionMatrix M = tc::make_sym2(0.6);
  tc::LeafPolynomial f;
  f.add(mi({{w({1, 1, 1}), 1}}), 1.0);
  const tc::DecayReport rep = tc::decay_report(tree, M, f);
  EXPECT_NEAR(rep.var_f, 1.0, 1e-12);
  EXPECT_NEAR(rep.ratio, kDecayLam06L3, 1e-12);
  EXPECT_EQ(rep.degree, 1);
  EXPECT_EQ(rep.capacity, 1);
  // max{2 * 0.36, 0.6} = 0.72, raised to depth / 4.
  EXPECT_NEAR(rep.bound, std::pow(0.72, 0.75), 1e-12);
  EXPECT_TRUE(rep.pass);
}

TEST(DecayReport, ConstantThrowsZeroVariance) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  tc::LeafPolynomial f;
  f.add(tc::MultiIndex{}, 3.0);
  EXPECT_THROW(tc::decay_report(tree, M, f), tc::ZeroVariance);
}

TEST(DecayReport, RecordsDegreeAndCapacity) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  tc::LeafPolynomial f;
  f.add(mi({{w({1, 1}), 1}, {w({1, 2}), 1}}), 1.0);
  f.add(mi({{w({2, 1}), 1}}), 0.5);
  const tc::DecayReport rep = tc::decay_report(tree, M, f);
  EXPECT_EQ(rep.degree, 2);
  EXPECT_EQ(rep.capacity,
            tc::fractal_capacity(tree, {w({1, 1}), w({1, 2}), w({2, 1})}));
}

TEST(DecayReport, RandomDegreeOneReportsEmpiricalConstant) {
  const tc::RootedTree tree = tc::make_dary(2, 6);
  const tc::TransitionMatrix M = tc::make_sym2(0.5);
  tc::Rng rng(33301);
  const tc::LeafPolynomial f = random_leaf_polynomial(tree, 2, 20, 1, rng);
  const tc::DecayReport rep = tc::decay_report(tree, M, f);
  EXPECT_GE(rep.ratio, 0.0);
  EXPECT_LE(rep.ratio, 1.0 + 1e-12);
  EXPECT_NEAR(rep.bound, std::pow(0.5, 1.5), 1e-12);
  const double c_emp = rep.ratio / std::pow(0.25, 3.0);
  EXPECT_TRUE(std::isfinite(c_emp));
  EXPECT_GE(c_emp, 0.0);
}

TEST(DecayReport, JensenHoldsOnRandomPolynomials) {
  const tc::RootedTree tree = tc::make_dary(2, 3);
  const tc::TransitionMatrix M = generic2();
  tc::Rng rng(4259);
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const tc::LeafPolynomial f = random_leaf_polynomial(tree, 2, 5, 3, rng);
    try {
      const tc::DecayReport rep = tc::decay_report(tree, M, f);
      EXPECT_LE(rep.ratio, 1.0 + 1e-12);
      EXPECT_GE(rep.ratio, -1e-12);
      ++checked;
    } catch (const tc::ZeroVariance&) {
    }
  }
  EXPECT_GT(checked, 40);
}

// ---------------------------------------------------------------------------
// Correlation with the root.

TEST(CorrelationWithRoot, SingleLeafClosedForm) {
  const tc::RootedTree tree = tc::make_dary(2, 3);
  const tc::TransitionMatrix M = tc::make_sym2(0.6);
  const tc::SiteBasis site = tc::build_site_basis(M);
  tc::LeafPolynomial f;
  f.add(mi({{w({1, 1, 1}), 1}}), 1.0);
  EXPECT_NEAR(tc::correlation_with_root(tree, M, f, site.phi[1]),
              kCorrLam06L3, 1e-12);
}

TEST(CorrelationWithRoot, IndependentChainGivesZero) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = tc::make_sym2(0.0);
  const tc::SiteBasis site = tc::build_site_basis(M);
  tc::Rng rng(911);
  for (int trial = 0; trial < 5; ++trial) {
    const tc::LeafPolynomial f = random_leaf_polynomial(tree, 2, 4, 2, rng);
    try {
      EXPECT_NEAR(tc::correlation_with_root(tree, M, f, site.phi[1]), 0.0,
                  1e-12);
    } catch (const tc::ZeroVariance&) {
    }
  }
}

TEST(CorrelationWithRoot, BoundedByConditionalRatio) {
  const tc::RootedTree tree = tc::make_dary(2, 3);
  const tc::TransitionMatrix M = generic2();
  tc::Rng rng(70717);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const tc::LeafPolynomial f = random_leaf_polynomial(tree, 2, 4, 2, rng);
    Eigen::VectorXd g(2);
    g << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0);
    try {
      const double corr = tc::correlation_with_root(tree, M, f, g);
      const tc::DecayReport rep = tc::decay_report(tree, M, f);
      EXPECT_LE(std::abs(corr), std::sqrt(rep.ratio) + 1e-12);
      ++checked;
    } catch (const tc::ZeroVariance&) {
    }
  }
  EXPECT_GT(checked, 80);
}

TEST(CorrelationWithRoot, Rejections) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  tc::LeafPolynomial f;
  f.add(mi({{w({1, 1}), 1}}), 1.0);
  EXPECT_THROW(
      tc::correlation_with_root(tree, M, f, Eigen::VectorXd::Ones(2)),
      tc::ZeroVariance);
  tc::LeafPolynomial constant;
  constant.add(tc::MultiIndex{}, 1.0);
  Eigen::VectorXd g(2);
  g << 1.0, -1.0;
  EXPECT_THROW(tc::correlation_with_root(tree, M, constant, g),
               tc::ZeroVariance);
  EXPECT_THROW(tc::correlation_with_root(tree, M, f, Eigen::VectorXd::Ones(3)),
               tc::Error);
}

// ---------------------------------------------------------------------------
// Threshold sweeps.

TEST(KsSweep, FrozenSubcriticalValues) {
  std::vector<int> depths;
  for (int ell = 2; ell <= 8; ++ell) depths.push_back(ell);
  const std::vector<tc::SweepRow> rows = tc::ks_sweep(2, depths, {0.5});
  ASSERT_EQ(rows.size(), 7u);
  const tc::SweepRow& last = rows.back();
  EXPECT_EQ(last.depth, 8);
  EXPECT_EQ(last.d, 2);
  EXPECT_EQ(last.statistic, "count");
  EXPECT_NEAR(last.ratio, kRatioLamHalfL8, 1e-15);
  EXPECT_NEAR(last.correlation, kCorrLamHalfL8, 1e-13);
  const double quotient = rows[6].ratio / rows[5].ratio;
  EXPECT_NEAR(quotient, kQuotientLamHalfL8, 1e-12);
  EXPECT_LE(std::abs(quotient - 0.5), 0.05);  // within 10% of d lambda^2
  for (std::size_t i = 1; i < rows.size(); ++i)
    EXPECT_LT(rows[i].ratio, rows[i - 1].ratio);
}

TEST(KsSweep, FrozenSupercriticalValues) {
  std::vector<int> depths;
  for (int ell = 2; ell <= 8; ++ell) depths.push_back(ell);
  const std::vector<tc::SweepRow> rows = tc::ks_sweep(2, depths, {0.8});
  double min_ratio = 1.0;
  for (const tc::SweepRow& row : rows)
    min_ratio = std::min(min_ratio, row.ratio);
  EXPECT_NEAR(min_ratio, kMinRatioLamEight, 1e-12);
  EXPECT_GT(min_ratio, 0.05);
  EXPECT_NEAR(rows[2].ratio, kRatioLamEightL4, 1e-12);
}

TEST(KsSweep, MonotoneDecreasingBelowThreshold) {
  std::vector<int> depths;
  for (int ell = 2; ell <= 10; ++ell) depths.push_back(ell);
  const std::vector<tc::SweepRow> rows = tc::ks_sweep(2, depths, {0.6});
  for (std::size_t i = 1; i < rows.size(); ++i)
    EXPECT_LT(rows[i].ratio, rows[i - 1].ratio);
}

TEST(KsSweep, ZeroLambdaVanishes) {
  const std::vector<tc::SweepRow> rows = tc::ks_sweep(2, {1, 2, 3}, {0.0});
  for (const tc::SweepRow& row : rows) {
    EXPECT_EQ(row.ratio, 0.0);
    EXPECT_EQ(row.correlation, 0.0);
  }
}

TEST(KsSweep, AgreesWithEngine) {
  for (const int ell : {2, 3}) {
    const tc::RootedTree tree = tc::make_dary(2, ell);
    const tc::TransitionMatrix M = tc::make_sym2(0.5);
    const tc::SiteBasis site = tc::build_site_basis(M);
    const tc::LeafPolynomial f = count_statistic(tree);
    const tc::DecayReport rep = tc::decay_report(tree, M, f);
    const std::vector<tc::SweepRow> rows = tc::ks_sweep(2, {ell}, {0.5});
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_NEAR(rows[0].ratio, rep.ratio, 1e-9);
    EXPECT_NEAR(rows[0].correlation,
                tc::correlation_with_root(tree, M, f, site.phi[1]), 1e-9);
  }
}

TEST(KsSweep, CsvHasHeaderAndRows) {
  const std::vector<tc::SweepRow> rows = tc::ks_sweep(2, {2, 3}, {0.5});
  const std::string csv = tc::sweep_to_csv(rows);
  EXPECT_EQ(csv.rfind("lambda,d,depth,ratio,correlation,bound\n", 0), 0u);
  EXPECT_EQ(static_cast<int>(std::count(csv.begin(), csv.end(), '\n')), 3);
}

TEST(KsSweep, Rejections) {
  EXPECT_THROW(tc::ks_sweep(2, {2}, {0.5}, "majority"), tc::Error);
  EXPECT_THROW(tc::ks_sweep(0, {2}, {0.5}), tc::Error);
  EXPECT_THROW(tc::ks_sweep(2, {0}, {0.5}), tc::Error);
  EXPECT_THROW(tc::ks_sweep(2, {2}, {1.5}), tc::Error);
}

// ---------------------------------------------------------------------------
// Exact posteriors.

TEST(BpRootPosterior, TwoLeafClosedForm) {
  const tc::RootedTree tree = tc::make_dary(2, 1);
  const tc::TransitionMatrix M = tc::make_sym2(0.6);
  tc::Assignment obs;
  obs[w({1})] = 1;
  obs[w({2})] = 1;
  const Eigen::VectorXd post = tc::bp_root_posterior(tree, M, obs);
  EXPECT_NEAR(post(1), kBpTwoLeaf, 1e-14);
  EXPECT_NEAR(post.sum(), 1.0, 1e-12);
}

TEST(BpRootPosterior, FrozenDepthTwoGeneric) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  tc::Assignment obs;
  obs[w({1, 1})] = 0;
  obs[w({1, 2})] = 1;
  obs[w({2, 1})] = 1;
  obs[w({2, 2})] = 0;
  const Eigen::VectorXd post = tc::bp_root_posterior(tree, M, obs);
  EXPECT_NEAR(post(0), kBpDepth2Gen0, 1e-12);
  EXPECT_NEAR(post(1), kBpDepth2Gen1, 1e-12);
}

TEST(BpRootPosterior, MatchesBruteForceEnumeration) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  const Eigen::VectorXd nu = tc::reference_distribution(M);
  const std::vector<tc::Word>& leaves = tree.leaves();
  // Every observation over the four leaves.
  for (int mask = 0; mask < 16; ++mask) {
    tc::Assignment obs;
    for (int i = 0; i < 4; ++i) obs[leaves[i]] = (mask >> i) & 1;
    // Direct conditional table: sum the joint law over the hidden nodes.
    Eigen::VectorXd joint = Eigen::VectorXd::Zero(2);
    for (int r = 0; r < 2; ++r)
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          double p = nu(r) * M.entries()(r, a) * M.entries()(r, b);
          p *= M.entries()(a, obs[leaves[0]]) *
               M.entries()(a, obs[leaves[1]]) *
               M.entries()(b, obs[leaves[2]]) *
               M.entries()(b, obs[leaves[3]]);
          joint(r) += p;
        }
    const Eigen::VectorXd want = joint / joint.sum();
    const Eigen::VectorXd got = tc::bp_root_posterior(tree, M, obs);
    EXPECT_NEAR(got(0), want(0), 1e-10);
    EXPECT_NEAR(got(1), want(1), 1e-10);
  }
}

TEST(BpRootPosterior, IndependentChainReturnsPrior) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = tc::make_sym2(0.0);
  for (int mask = 0; mask < 4; ++mask) {
    tc::Assignment obs;
    obs[w({1, 1})] = mask & 1;
    obs[w({1, 2})] = (mask >> 1) & 1;
    obs[w({2, 1})] = 0;
    obs[w({2, 2})] = 1;
    const Eigen::VectorXd post = tc::bp_root_posterior(tree, M, obs);
    EXPECT_NEAR(post(0), 0.5, 1e-13);
    EXPECT_NEAR(post(1), 0.5, 1e-13);
  }
}

TEST(BpRootPosterior, AbsorbingChainAndZeroLikelihood) {
  const tc::RootedTree tree = tc::make_dary(2, 1);
  const tc::TransitionMatrix M = absorbing3();
  tc::Assignment certain;
  certain[w({1})] = 2;
  certain[w({2})] = 2;
  const Eigen::VectorXd post = tc::bp_root_posterior(tree, M, certain);
  EXPECT_NEAR(post(2), 1.0, 1e-13);

  tc::Assignment impossible;
  impossible[w({1})] = 2;
  impossible[w({2})] = 0;
  EXPECT_THROW(tc::bp_root_posterior(tree, M, impossible),
               tc::ZeroLikelihood);
}

TEST(BpRootPosterior, PermutationEquivariant) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  // Relabel states through the swap 0 <-> 1.
  Eigen::MatrixXd swapped(2, 2);
  swapped << 0.6, 0.4,
             0.3, 0.7;
  const tc::TransitionMatrix Ms(swapped);
  for (int mask = 0; mask < 16; ++mask) {
    tc::Assignment obs, obs_swapped;
    const std::vector<tc::Word>& leaves = tree.leaves();
    for (int i = 0; i < 4; ++i) {
      obs[leaves[i]] = (mask >> i) & 1;
      obs_swapped[leaves[i]] = 1 - ((mask >> i) & 1);
    }
    const Eigen::VectorXd a = tc::bp_root_posterior(tree, M, obs);
    const Eigen::VectorXd b = tc::bp_root_posterior(tree, Ms, obs_swapped);
    EXPECT_NEAR(a(0), b(1), 1e-12);
    EXPECT_NEAR(a(1), b(0), 1e-12);
  }
}

TEST(BpRootPosterior, Rejections) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  tc::Assignment missing;
  missing[w({1, 1})] = 0;
  EXPECT_THROW(tc::bp_root_posterior(tree, M, missing), tc::Error);
  tc::Assignment internal;
  for (const tc::Word& leaf : tree.leaves()) internal[leaf] = 0;
  internal[w({1})] = 0;
  EXPECT_THROW(tc::bp_root_posterior(tree, M, internal), tc::Error);
  tc::Assignment bad;
  for (const tc::Word& leaf : tree.leaves()) bad[leaf] = 0;
  bad[w({1, 1})] = 5;
  EXPECT_THROW(tc::bp_root_posterior(tree, M, bad), tc::Error);
}

// ---------------------------------------------------------------------------
// Two-sided conditional hypothesis checker.

TEST(AssumptionA, SymmetricChainPassesWithExactConditionals) {
  const tc::RootedTree tree = tc::make_dary(2, 5);
  const tc::TransitionMatrix M = tc::make_sym2(0.5);
  const tc::SetFamily fam = singleton_family(tree);
  const tc::AssumptionAReport rep =
      tc::check_assumption_A(tree, M, fam, 2.0, 0.5, 150, 17);
  EXPECT_TRUE(rep.pass());
  EXPECT_GT(rep.samples, 50);
  // Two-state symmetric chains make the conditional second moment constant.
  EXPECT_NEAR(rep.worst_conditional_lo, 1.0, 1e-9);
  EXPECT_NEAR(rep.worst_conditional_hi, 1.0, 1e-9);
  EXPECT_NEAR(rep.largest_valid_c_star, 1.0, 1e-9);
  // min{c_M, 1/min pi} = min{0.25, 2} = 0.25, and it is admissible.
  EXPECT_NEAR(rep.lemma_c_star, 0.25, 1e-15);
  EXPECT_TRUE(rep.lemma_c_star_valid);
  EXPECT_LE(rep.smallest_valid_h_star, 2.0 + 1e-6);
  EXPECT_NEAR(rep.epsilon, -std::log(0.5) / 1.1, 1e-12);
}

TEST(AssumptionA, ConditionalRatiosMatchOracle) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  const tc::SetFamily fam = {{w({1, 1})}};
  const tc::AssumptionAReport rep =
      tc::check_assumption_A(tree, M, fam, 1.0, 0.9, 40, 5);
  // Single-leaf site functions give ratios M phi_1^2 / E phi_1^2 exactly.
  EXPECT_NEAR(rep.worst_conditional_lo, kCondRatioLo, 1e-12);
  EXPECT_NEAR(rep.worst_conditional_hi, kCondRatioHi, 1e-12);
  EXPECT_NEAR(rep.largest_valid_c_star, kLargestCStar, 1e-12);
  EXPECT_NEAR(rep.worst_decay_ratio, 0.09, 1e-12);
  EXPECT_TRUE(rep.pass());

  // Ask for more than the chain affords and the lower bound fails.
  const tc::AssumptionAReport strict =
      tc::check_assumption_A(tree, M, fam, 1.0, 0.95, 40, 5);
  EXPECT_FALSE(strict.pass_lower);
  EXPECT_FALSE(strict.pass());
}

TEST(AssumptionA, OversizedCStarFailsLowerBound) {
  const tc::RootedTree tree = tc::make_dary(2, 3);
  const tc::TransitionMatrix M = tc::make_sym2(0.5);
  const tc::AssumptionAReport rep = tc::check_assumption_A(
      tree, M, singleton_family(tree), 1.0, 1.3, 60, 3);
  EXPECT_FALSE(rep.pass_lower);
  EXPECT_FALSE(rep.pass());
}

TEST(AssumptionA, IndependentChainTriviallyPasses) {
  const tc::RootedTree tree = tc::make_dary(2, 3);
  const tc::TransitionMatrix M = tc::make_sym2(0.0);
  const tc::AssumptionAReport rep = tc::check_assumption_A(
      tree, M, singleton_family(tree), 1.0, 0.5, 60, 11);
  EXPECT_TRUE(rep.pass());
  EXPECT_GT(rep.samples, 0);
  EXPECT_EQ(rep.worst_decay_ratio, 0.0);
  EXPECT_TRUE(std::isinf(rep.epsilon));
}

TEST(AssumptionA, Rejections) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  const tc::SetFamily closed = singleton_family(tree);
  EXPECT_THROW(tc::check_assumption_A(tree, M, {tree.leaves()}, 1.0, 0.5, 10),
               tc::NotClosed);
  EXPECT_THROW(tc::check_assumption_A(tree, M, closed, 0.0, 0.5, 10),
               tc::Error);
  EXPECT_THROW(tc::check_assumption_A(tree, M, closed, 1.0, -0.5, 10),
               tc::Error);
  EXPECT_THROW(tc::check_assumption_A(tree, M, closed, 1.0, 0.5, 0),
               tc::Error);
}

// ---------------------------------------------------------------------------
// Sup-norm covariance hypothesis checker.

TEST(AssumptionAg, SupNormRatioMatchesOracle) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  const tc::SetFamily fam = {{w({1, 1})}};
  const tc::AssumptionAgReport rep =
      tc::check_assumption_Ag(tree, M, fam, 1.0, 70, 23);
  // f = g = site function at one leaf: the covariance ratio at the parent
  // is (lambda / 3) / min_theta(M phi_1^2) = 0.1 / 0.925, height offset 0.
  EXPECT_NEAR(rep.worst_covariance_ratio, kSupNormRatio, 1e-9);
  EXPECT_TRUE(rep.pass());
  EXPECT_GT(rep.samples, 0);
}

TEST(AssumptionAg, ConditionalMeanAveragesToUnconditional) {
  // Tower property: the stationary average of (E_u f g)(theta) over theta
  // equals E[f g]. This is the identity that makes the covariance gap
  // |(E_u f g)(theta) - E f g| a centred quantity.
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  const Eigen::VectorXd nu = tc::reference_distribution(M);
  tc::VertexPolynomial fconst;
  tc::ProductTerm t;
  t.coeff = 2.5;
  fconst.terms.push_back(t);
  tc::VertexPolynomial g;
  tc::ProductTerm s;
  s.coeff = 1.0;
  Eigen::VectorXd vec(2);
  vec << -1.0, 2.0;
  s.factors[w({1, 1})] = vec;
  g.terms.push_back(s);
  const tc::VertexPolynomial prod = tc::poly_product(fconst, g);
  const tc::VertexPolynomial cond =
      tc::conditional_expectation_U(tree, M, prod, {w({1})});
  const double mean = tc::expectation(tree, M, prod, nu);
  double averaged = 0.0;
  for (int theta = 0; theta < 2; ++theta) {
    tc::Assignment x;
    for (const tc::Word& node : tree.nodes()) x[node] = 0;
    x[w({1})] = theta;
    averaged += nu(theta) * tc::evaluate(cond, x);
  }
  EXPECT_NEAR(averaged, mean, 1e-12);
  EXPECT_NEAR(mean, 2.5 * 2.0 / 7.0, 1e-12);

  // A centred constant is the zero polynomial, so its covariance gap is 0:
  // this is why the checker may include constants in sampled polynomials.
  tc::VertexPolynomial centred = fconst;
  tc::ProductTerm shift;
  shift.coeff = -tc::expectation(tree, M, fconst, nu);
  centred.terms.push_back(shift);
  const tc::VertexPolynomial cprod = tc::poly_product(centred, g);
  const tc::VertexPolynomial ccond =
      tc::conditional_expectation_U(tree, M, cprod, {w({1})});
  const double cmean = tc::expectation(tree, M, cprod, nu);
  for (int theta = 0; theta < 2; ++theta) {
    tc::Assignment x;
    for (const tc::Word& node : tree.nodes()) x[node] = 0;
    x[w({1})] = theta;
    EXPECT_NEAR(tc::evaluate(ccond, x) - cmean, 0.0, 1e-12);
  }
}

TEST(AssumptionAg, LemmaConversionCrossCheck) {
  const tc::RootedTree tree = tc::make_dary(2, 4);
  const tc::TransitionMatrix M = tc::make_sym2(0.5);
  const tc::SetFamily fam = singleton_family(tree);
  const tc::AssumptionAgReport rep_g =
      tc::check_assumption_Ag(tree, M, fam, 1.0, 120, 29);
  EXPECT_TRUE(rep_g.pass());
  const auto [h_star, c_star] =
      tc::two_sided_parameters_from_sup_norm(1.0, rep_g.epsilon);
  EXPECT_NEAR(h_star, 1.0 + 2.0 / rep_g.epsilon * std::log(2.0), 1e-12);
  EXPECT_EQ(c_star, 0.5);
  const tc::AssumptionAReport rep_a =
      tc::check_assumption_A(tree, M, fam, h_star, c_star, 120, 29);
  EXPECT_TRUE(rep_a.pass());
}

TEST(AssumptionAg, IndependentChainTriviallyPasses) {
  const tc::RootedTree tree = tc::make_dary(2, 3);
  const tc::TransitionMatrix M = tc::make_sym2(0.0);
  const tc::AssumptionAgReport rep = tc::check_assumption_Ag(
      tree, M, singleton_family(tree), 1.0, 60, 31);
  EXPECT_TRUE(rep.pass());
  EXPECT_EQ(rep.worst_covariance_ratio, 0.0);
  EXPECT_TRUE(std::isinf(rep.epsilon));
}

TEST(AssumptionAg, Rejections) {
  const tc::RootedTree tree = tc::make_dary(2, 2);
  const tc::TransitionMatrix M = generic2();
  EXPECT_THROW(
      tc::check_assumption_Ag(tree, M, {tree.leaves()}, 1.0, 10),
      tc::NotClosed);
  EXPECT_THROW(tc::check_assumption_Ag(tree, M, singleton_family(tree),
                                       -1.0, 10),
               tc::Error);
  EXPECT_THROW(tc::check_assumption_Ag(tree, M, singleton_family(tree),
                                       1.0, 0),
               tc::Error);
  EXPECT_THROW(tc::two_sided_parameters_from_sup_norm(1.0, 0.0), tc::Error);
}
