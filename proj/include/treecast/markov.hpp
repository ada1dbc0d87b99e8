#pragma once
// Ergodic transition matrices: stationary distribution, second eigenvalue,
// the epsilon rate parameter, the orthonormal site basis {phi_i}, and
// numerical contraction-rate reports for powers of the chain.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <utility>
#include <vector>

#include "treecast/common.hpp"

namespace treecast {

// A q x q row-stochastic matrix over the state space {0, ..., q-1}.
class TransitionMatrix {
 public:
  explicit TransitionMatrix(Eigen::MatrixXd entries) : m_(std::move(entries)) {
    if (m_.rows() < 2 || m_.rows() != m_.cols())
      throw Error("transition matrix must be square with q >= 2, got " +
                  std::to_string(m_.rows()) + "x" + std::to_string(m_.cols()));
    for (Eigen::Index i = 0; i < m_.rows(); ++i) {
      for (Eigen::Index j = 0; j < m_.cols(); ++j)
        if (m_(i, j) < 0.0)
          throw Error("negative entry at (" + std::to_string(i) + "," +
                      std::to_string(j) + "): " + fmt17(m_(i, j)));
      const double row_sum = m_.row(i).sum();
      if (std::abs(row_sum - 1.0) > tol::kRowSum)
        throw Error("row " + std::to_string(i) + " sums to " + fmt17(row_sum));
    }
  }

  int q() const { return static_cast<int>(m_.rows()); }
  double operator()(int from, int to) const { return m_(from, to); }
  const Eigen::MatrixXd& entries() const { return m_; }

  // True when every state reaches every other through positive entries.
  // Exact comparisons on the support digraph; no floating-point tolerance.
  bool is_irreducible() const {
    const int n = q();
    std::vector<std::vector<bool>> reach(n, std::vector<bool>(n));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) reach[i][j] = m_(i, j) > 0.0;
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i)
        if (reach[i][k])
          for (int j = 0; j < n; ++j)
            if (reach[k][j]) reach[i][j] = true;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (!reach[i][j]) return false;
    return true;
  }

  // gcd of the lengths of all cycles through the first state; only
  // meaningful for irreducible chains.  Computed exactly from breadth-first
  // levels: every edge (u, v) closes cycles of defect level(u) + 1 - level(v).
  int period() const {
    const int n = q();
    std::vector<int> level(n, -1);
    std::vector<int> queue{0};
    level[0] = 0;
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const int u = queue[head];
      for (int v = 0; v < n; ++v)
        if (m_(u, v) > 0.0 && level[v] < 0) {
          level[v] = level[u] + 1;
          queue.push_back(v);
        }
    }
    int g = 0;
    for (int u = 0; u < n; ++u)
      for (int v = 0; v < n; ++v)
        if (m_(u, v) > 0.0 && level[u] >= 0 && level[v] >= 0)
          g = std::gcd(g, std::abs(level[u] + 1 - level[v]));
    return g;
  }

  bool is_ergodic() const { return is_irreducible() && period() == 1; }

 private:
  Eigen::MatrixXd m_;
};

// Two-state symmetric chain with second eigenvalue exactly lambda.
inline TransitionMatrix make_sym2(double lambda) {
  Eigen::MatrixXd m(2, 2);
  m << (1.0 + lambda) / 2.0, (1.0 - lambda) / 2.0,
       (1.0 - lambda) / 2.0, (1.0 + lambda) / 2.0;
  return TransitionMatrix(m);
}

// Seeded strictly positive chain: entries 0.1 + u01 drawn row-major from
// Rng(seed), rows normalized.  Strict positivity makes it ergodic.
inline TransitionMatrix make_random_chain(int q, std::uint32_t seed) {
  if (q < 2) throw Error("random chain needs q >= 2");
  Rng rng(seed);
  Eigen::MatrixXd m(q, q);
  for (int i = 0; i < q; ++i) {
    for (int j = 0; j < q; ++j) m(i, j) = 0.1 + rng.u01();
    m.row(i) /= m.row(i).sum();
  }
  return TransitionMatrix(m);
}

// The unique pi with pi^T M = pi^T, solved directly as a rank-one-corrected
// linear system and verified to 1e-12 residual.
inline Eigen::VectorXd stationary_distribution(const TransitionMatrix& M) {
  if (!M.is_ergodic())
    throw NotErgodic("stationary distribution needs an ergodic chain");
  const int n = M.q();
  Eigen::MatrixXd A =
      M.entries().transpose() - Eigen::MatrixXd::Identity(n, n);
  A.row(n - 1).setOnes();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  b(n - 1) = 1.0;
  Eigen::VectorXd pi = A.partialPivLu().solve(b);
  pi /= pi.sum();
  const double residual =
      (M.entries().transpose() * pi - pi).lpNorm<Eigen::Infinity>();
  if (residual > tol::kStationary)
    throw Error("stationary solve residual " + fmt17(residual));
  for (int j = 0; j < n; ++j)
    if (!(pi(j) > 0.0))
      throw Error("stationary entry " + std::to_string(j) +
                  " is not positive: " + fmt17(pi(j)));
  return pi;
}

// An invariant distribution usable as a root measure for any chain: the
// stationary distribution when the chain is ergodic, and otherwise the
// Cesaro limit of the uniform start, obtained in closed form as the
// projection of the uniform vector onto ker(M^T - I) along range(M^T - I).
inline Eigen::VectorXd reference_distribution(const TransitionMatrix& M) {
  if (M.is_ergodic()) return stationary_distribution(M);
  const int n = M.q();
  const Eigen::MatrixXd A =
      M.entries().transpose() - Eigen::MatrixXd::Identity(n, n);
  const Eigen::VectorXd nu0 = Eigen::VectorXd::Constant(n, 1.0 / n);
  // The limit is nu0 + A y with A (nu0 + A y) = 0; solve the (singular)
  // normal problem in least squares.
  const Eigen::VectorXd y =
      (A * A).colPivHouseholderQr().solve(-(A * nu0));
  Eigen::VectorXd nu = nu0 + A * y;
  const double residual = (A * nu).lpNorm<Eigen::Infinity>();
  if (residual > tol::kStationary)
    throw Error("invariant projection residual " + fmt17(residual));
  for (int j = 0; j < n; ++j) {
    if (nu(j) < -tol::kStationary)
      throw Error("invariant projection entry " + std::to_string(j) +
                  " is negative: " + fmt17(nu(j)));
    nu(j) = std::max(nu(j), 0.0);
  }
  nu /= nu.sum();
  return nu;
}

// Largest eigenvalue modulus after removing one copy of the Perron
// eigenvalue 1; complex pairs contribute their modulus.
inline double second_eigenvalue(const TransitionMatrix& M) {
  if (!M.is_ergodic())
    throw NotErgodic("second eigenvalue needs an ergodic chain");
  Eigen::EigenSolver<Eigen::MatrixXd> solver(M.entries());
  if (solver.info() != Eigen::Success) throw Error("eigensolver failed");
  const auto& ev = solver.eigenvalues();
  int perron = 0;
  for (int i = 1; i < ev.size(); ++i)
    if (std::abs(ev(i) - 1.0) < std::abs(ev(perron) - 1.0)) perron = i;
  if (std::abs(ev(perron) - 1.0) > 1e-10)
    throw Error("no eigenvalue near 1; largest found " + fmt17(std::abs(ev(perron))));
  double lambda = 0.0;
  for (int i = 0; i < ev.size(); ++i)
    if (i != perron) lambda = std::max(lambda, std::abs(ev(i)));
  return lambda;
}

// Rate parameter: max{d lambda^2, lambda} = exp(-1.1 epsilon).
inline double epsilon_from_lambda(double lambda, double d) {
  if (d <= 0.0) throw Error("branching number must be positive");
  const double decay = std::max(d * lambda * lambda, lambda);
  if (decay >= 1.0)
    throw AboveThreshold("max{d lambda^2, lambda} = " + fmt17(decay));
  return -std::log(decay) / 1.1;
}

inline double epsilon(const TransitionMatrix& M, double d) {
  return epsilon_from_lambda(second_eigenvalue(M), d);
}

// Stationary distribution plus spectral data of a chain.
struct ChainSpectrum {
  Eigen::VectorXd pi;
  double lambda = 0.0;

  double epsilon_for(double d) const { return epsilon_from_lambda(lambda, d); }
};

inline ChainSpectrum chain_spectrum(const TransitionMatrix& M) {
  return ChainSpectrum{stationary_distribution(M), second_eigenvalue(M)};
}

// Orthonormal basis of L^2(pi): phi[0] = 1 and, for i >= 1, phi[i] has
// pi-mean 0 and pi-second-moment 1.
struct SiteBasis {
  std::vector<Eigen::VectorXd> phi;

  int q() const { return static_cast<int>(phi.size()); }
};

// pi-weighted Gram-Schmidt of the indicators of states 1, ..., q-1 against
// phi_0 = 1, in state order, so the basis is reproducible.  The weighting
// distribution must give positive mass to every state.
inline SiteBasis build_site_basis(const TransitionMatrix& M,
                                  const Eigen::VectorXd& pi) {
  const int n = M.q();
  if (pi.size() != n)
    throw Error("weight vector size " + std::to_string(pi.size()) +
                " does not match q = " + std::to_string(n));
  for (int j = 0; j < n; ++j)
    if (pi(j) <= 0.0)
      throw DegeneratePi("pi(" + std::to_string(j) + ") = " + fmt17(pi(j)));
  const auto dot = [&pi](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return (pi.array() * a.array() * b.array()).sum();
  };
  std::vector<Eigen::VectorXd> phi;
  phi.push_back(Eigen::VectorXd::Ones(n));
  for (int i = 1; i < n; ++i) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    v(i) = 1.0;
    for (const Eigen::VectorXd& p : phi) v -= dot(v, p) * p;
    const double norm2 = dot(v, v);
    if (norm2 <= 1e-24)
      throw Error("degenerate Gram-Schmidt step at state " + std::to_string(i));
    phi.push_back(v / std::sqrt(norm2));
  }
  return SiteBasis{std::move(phi)};
}

inline SiteBasis build_site_basis(const TransitionMatrix& M) {
  return build_site_basis(M, stationary_distribution(M));
}

// Empirical constants for the contraction of chain powers: the smallest C
// making each inequality hold over a deterministic test set plus seeded
// random draws, for k = 1..k_max.  Informational; constants depend on M.
struct MarkovDecayReport {
  int k_max = 0;
  double lambda = 0.0;
  // Var[(M^k a)] <= C k^(2q) lambda^(2k) Var[a]
  double c_var_decay = 1.0;
  // (1/C) sup|a - Ea|^2 <= Var[a] <= C sup|a - Ea|^2
  double c_var_vs_sup = 1.0;
  // sup|(M^k a) - Ea| <= C k^q lambda^k sup|a - Ea|
  double c_sup_decay = 1.0;

  double c_overall() const {
    return std::max({c_var_decay, c_var_vs_sup, c_sup_decay});
  }
};

inline MarkovDecayReport verify_markov_decay(const TransitionMatrix& M,
                                             int k_max,
                                             int random_draws = 20,
                                             std::uint32_t seed = 24030u) {
  if (k_max < 1) throw Error("k_max must be >= 1");
  const Eigen::VectorXd pi = stationary_distribution(M);
  const double lambda = second_eigenvalue(M);
  const int n = M.q();
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);

  // Test set: centered indicators, the site basis, seeded centered draws.
  std::vector<Eigen::VectorXd> fns;
  for (int j = 0; j < n; ++j) {
    Eigen::VectorXd v = -pi(j) * ones;
    v(j) += 1.0;
    fns.push_back(std::move(v));
  }
  const SiteBasis basis = build_site_basis(M);
  for (int i = 1; i < n; ++i) fns.push_back(basis.phi[i]);
  Rng rng(seed);
  for (int t = 0; t < random_draws; ++t) {
    Eigen::VectorXd v(n);
    for (int j = 0; j < n; ++j) v(j) = rng.uniform(-1.0, 1.0);
    v -= pi.dot(v) * ones;
    fns.push_back(std::move(v));
  }

  MarkovDecayReport report;
  report.k_max = k_max;
  report.lambda = lambda;
  for (const Eigen::VectorXd& a : fns) {
    const double var0 = (pi.array() * a.array().square()).sum();
    const double sup0 = a.lpNorm<Eigen::Infinity>();
    if (sup0 < 1e-15) continue;
    report.c_var_vs_sup = std::max({report.c_var_vs_sup,
                                    var0 / (sup0 * sup0),
                                    (sup0 * sup0) / var0});
    Eigen::VectorXd b = a;
    for (int k = 1; k <= k_max; ++k) {
      b = M.entries() * b;
      const double mean = pi.dot(b);  // zero in exact arithmetic
      const Eigen::VectorXd centered = b - mean * ones;
      const double var_k = (pi.array() * centered.array().square()).sum();
      const double sup_k = centered.lpNorm<Eigen::Infinity>();
      const double var_bound =
          std::pow(double(k), 2 * n) * std::pow(lambda, 2 * k) * var0;
      const double sup_bound =
          std::pow(double(k), n) * std::pow(lambda, k) * sup0;
      // A vanished bound (lambda = 0) forces an exactly constant image;
      // such terms carry no constant.
      if (var_bound > 0.0)
        report.c_var_decay = std::max(report.c_var_decay, var_k / var_bound);
      if (sup_bound > 0.0)
        report.c_sup_decay = std::max(report.c_sup_decay, sup_k / sup_bound);
    }
  }
  return report;
}

}  // namespace treecast
