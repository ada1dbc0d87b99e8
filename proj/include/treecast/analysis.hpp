#pragma once

// Verification harness on top of the decomposition machinery: variance-decay
// reports for leaf polynomials, root correlation, threshold sweeps for the
// count statistic, exact belief-propagation posteriors, and empirical
// checkers for the two inductive hypotheses (conditional-variance decay with
// two-sided conditional second moments, and the sup-norm covariance variant).

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "treecast/polyspace.hpp"

namespace treecast {

// max{d lambda^2, lambda}: the quantity whose position relative to 1 decides
// whether root influence survives to deep layers.
inline double decay_base(double lambda, double d) {
  if (d <= 0.0) throw Error("branching number must be positive");
  if (lambda < 0.0) throw Error("lambda must be a modulus");
  return std::max(d * lambda * lambda, lambda);
}

inline double decay_base(const TransitionMatrix& M, double d) {
  return decay_base(second_eigenvalue(M), d);
}

// Largest offspring count in the tree (1 for a bare root).
inline int branching_factor(const RootedTree& tree) {
  int d = 1;
  for (const Word& u : tree.nodes()) d = std::max(d, tree.child_count(u));
  return d;
}

namespace detail {

// exp(-eps * t) written through the base so that lambda = 0 and
// above-threshold chains take their correct limits without special cases:
// decay_factor(base, t) = base^(t / 1.1).
inline double decay_factor(double base, double t) {
  return std::pow(base, t / 1.1);
}

// A conditional expectation collapsed at u must be a function of x_u alone;
// read it off as a state vector.
inline Eigen::VectorXd collapse_to_vector(int q, const VertexPolynomial& f,
                                          const Word& u) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(q);
  for (const ProductTerm& term : f.terms) {
    if (term.factors.empty()) {
      out.array() += term.coeff;
    } else if (term.factors.size() == 1 &&
               term.factors.begin()->first == u) {
      out += term.coeff * term.factors.begin()->second;
    } else {
      throw Error("conditional expectation did not collapse at " +
                  word_to_string(u));
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Variance-decay report.

struct DecayReport {
  double var_f = 0.0;
  double var_cond_root = 0.0;
  double ratio = 0.0;   // Var[E[f | X_root]] / Var[f], in [0, 1] by Jensen
  double bound = 0.0;   // (max{d lambda^2, lambda})^(depth / 4)
  int degree = 0;       // Efron-Stein degree of f
  int capacity = 0;     // fractal capacity of the union support
  bool pass = false;    // ratio <= bound (informational: constants implicit)
};

inline DecayReport decay_report(const RootedTree& tree,
                                const TransitionMatrix& M,
                                const LeafPolynomial& f) {
  const detail::ChainBasis cb = detail::chain_basis(M);
  const VertexPolynomial g = to_vertex_polynomial(tree, M, f);
  DecayReport rep;
  rep.var_f = variance(tree, M, g, cb.nu);
  if (rep.var_f <= tol::kExact)
    throw ZeroVariance("Var f = " + fmt17(rep.var_f));
  rep.var_cond_root = variance(
      tree, M, conditional_expectation_U(tree, M, g, {Word{}}), cb.nu);
  rep.ratio = rep.var_cond_root / rep.var_f;
  rep.bound = std::pow(decay_base(M, branching_factor(tree)),
                       tree.depth() / 4.0);
  rep.degree = efron_stein_degree(f);
  std::set<Word, WordLess> support;
  for (const auto& [sigma, c] : f.coeffs)
    if (c != 0.0)
      for (const Word& v : sigma.support()) support.insert(v);
  rep.capacity = support.empty()
                     ? 0
                     : fractal_capacity(
                           tree, std::vector<Word>(support.begin(),
                                                   support.end()));
  rep.pass = rep.ratio <= rep.bound;
  return rep;
}

// Pearson correlation between f(X_leaves) and g(X_root).
inline double correlation_with_root(const RootedTree& tree,
                                    const TransitionMatrix& M,
                                    const LeafPolynomial& f,
                                    const Eigen::VectorXd& g) {
  const detail::ChainBasis cb = detail::chain_basis(M);
  if (static_cast<int>(g.size()) != M.q())
    throw Error("root function has wrong size");
  const VertexPolynomial fp = to_vertex_polynomial(tree, M, f);
  const double var_f = variance(tree, M, fp, cb.nu);
  if (var_f <= tol::kExact) throw ZeroVariance("Var f = " + fmt17(var_f));
  const double mean_g = cb.nu.dot(g);
  const double var_g = cb.nu.dot(g.cwiseProduct(g)) - mean_g * mean_g;
  if (var_g <= tol::kExact)
    throw ZeroVariance("Var g(X_root) = " + fmt17(var_g));

  VertexPolynomial gp;
  ProductTerm t;
  t.coeff = 1.0;
  t.factors[Word{}] = g;
  gp.terms.push_back(t);
  const double mean_f = expectation(tree, M, fp, cb.nu);
  const double cross = expectation(tree, M, poly_product(fp, gp), cb.nu);
  return (cross - mean_f * mean_g) / std::sqrt(var_f * var_g);
}

// ---------------------------------------------------------------------------
// Threshold sweep for the count statistic on the symmetric two-state chain.

struct SweepRow {
  double lambda = 0.0;
  int d = 0;
  int depth = 0;
  std::string statistic;
  double ratio = 0.0;
  double correlation = 0.0;
};

// Exact closed forms for f = sum over leaves of phi_1(x_v):
//   Var[E[f | X_root]] = (d lambda)^(2 depth),
//   Var[f] = sum over leaf pairs of lambda^(2 (depth - depth(lca))),
// with the pair counts d^depth (d^(depth-j) - d^(depth-j-1)) at lca depth j.
inline std::vector<SweepRow> ks_sweep(int d, const std::vector<int>& depths,
                                      const std::vector<double>& lambdas,
                                      const std::string& statistic = "count") {
  if (statistic != "count")
    throw Error("unknown sweep statistic '" + statistic + "'");
  if (d < 1) throw Error("branching number must be >= 1");
  std::vector<SweepRow> rows;
  for (const double lambda : lambdas) {
    if (lambda < 0.0 || lambda > 1.0)
      throw Error("lambda must lie in [0, 1]");
    for (const int ell : depths) {
      if (ell < 1) throw Error("depth must be >= 1");
      double var_f = std::pow(d, ell);  // diagonal pairs
      for (int j = 0; j < ell; ++j)
        var_f += std::pow(d, ell) *
                 (std::pow(d, ell - j) - std::pow(d, ell - j - 1)) *
                 std::pow(lambda, 2 * (ell - j));
      SweepRow row;
      row.lambda = lambda;
      row.d = d;
      row.depth = ell;
      row.statistic = statistic;
      row.ratio = std::pow(d * lambda, 2 * ell) / var_f;
      row.correlation = std::pow(d * lambda, ell) / std::sqrt(var_f);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "lambda,d,depth,ratio,correlation,bound\n";
  for (const SweepRow& row : rows) {
    const double bound = std::pow(decay_base(row.lambda, row.d),
                                  row.depth / 4.0);
    out << fmt17(row.lambda) << ',' << row.d << ',' << row.depth << ','
        << fmt17(row.ratio) << ',' << fmt17(row.correlation) << ','
        << fmt17(bound) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Exact root posterior by upward message passing (exact on trees).

inline Eigen::VectorXd bp_root_posterior(const RootedTree& tree,
                                         const TransitionMatrix& M,
                                         const Assignment& observation) {
  const int q = M.q();
  for (const auto& [node, state] : observation) {
    if (!tree.contains(node))
      throw NodeNotInTree("no node " + word_to_string(node));
    if (tree.child_count(node) != 0)
      throw Error("observed node " + word_to_string(node) +
                  " is not a leaf");
    if (state < 0 || state >= q)
      throw Error("state " + std::to_string(state) + " out of range");
  }
  for (const Word& leaf : tree.leaves())
    if (!observation.count(leaf))
      throw Error("leaf " + word_to_string(leaf) + " unobserved");

  std::map<Word, Eigen::VectorXd, WordLess> msg;
  const auto& nodes = tree.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const Word& u = *it;
    if (tree.child_count(u) == 0) {
      Eigen::VectorXd point = Eigen::VectorXd::Zero(q);
      point(observation.at(u)) = 1.0;
      msg[u] = std::move(point);
      continue;
    }
    Eigen::VectorXd m = Eigen::VectorXd::Ones(q);
    for (const Word& c : tree.children(u))
      m = m.cwiseProduct(M.entries() * msg.at(c));
    msg[u] = std::move(m);
  }
  Eigen::VectorXd post =
      reference_distribution(M).cwiseProduct(msg.at(Word{}));
  const double total = post.sum();
  if (total <= 0.0)
    throw ZeroLikelihood("observation has probability zero");
  return post / total;
}

// ---------------------------------------------------------------------------
// Random family polynomials: i.i.d. uniform coefficients on supports drawn
// from the given family, with a uniform site index at each vertex.

inline LeafPolynomial random_family_polynomial(const RootedTree& tree, int q,
                                               const SetFamily& supports,
                                               int terms, Rng& rng) {
  if (supports.empty()) throw EmptyInputSet("no candidate supports");
  if (q < 2) throw Error("need at least two states");
  if (terms < 1) throw Error("need at least one term");
  LeafPolynomial f;
  for (int t = 0; t < terms; ++t) {
    const LeafSet& S = supports[rng.index(supports.size())];
    std::map<Word, int, WordLess> entries;
    for (const Word& v : S) {
      if (!tree.contains(v)) throw NodeNotInTree(word_to_string(v));
      entries[v] = 1 + static_cast<int>(rng.index(q - 1));
    }
    f.add(MultiIndex(std::move(entries)), rng.uniform(-1.0, 1.0));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Checker for the two-part inductive hypothesis: conditional-variance decay
// below a height h_star, plus two-sided conditional second-moment bounds
// with constant c_star.

namespace detail {

// One empirical inequality instance: exempt when the parameter exceeds
// gate_h, satisfied when the parameter is at least need_h.
struct ParameterConstraint {
  double gate_h = 0.0;
  double need_h = -std::numeric_limits<double>::infinity();
};

inline double smallest_valid_parameter(
    const std::vector<ParameterConstraint>& constraints) {
  std::vector<double> candidates{0.0};
  for (const ParameterConstraint& c : constraints) {
    if (std::isfinite(c.need_h)) candidates.push_back(c.need_h);
    else if (c.need_h > 0) candidates.push_back(c.gate_h + 1e-6);
  }
  std::sort(candidates.begin(), candidates.end());
  for (const double h : candidates) {
    bool ok = true;
    for (const ParameterConstraint& c : constraints)
      if (c.gate_h >= h && !(c.need_h <= h + 1e-12)) {
        ok = false;
        break;
      }
    if (ok) return std::max(h, 0.0);
  }
  return candidates.back();
}

// Parameter value that makes base^((h_v - h)/scale) >= ratio at this vertex.
inline double required_parameter(double base, double scale, double h_v,
                                 double ratio) {
  if (ratio <= 0.0) return -std::numeric_limits<double>::infinity();
  if (base <= 0.0) return -std::numeric_limits<double>::infinity();
  if (base >= 1.0)
    return ratio <= 1.0 ? -std::numeric_limits<double>::infinity()
                        : std::numeric_limits<double>::infinity();
  return h_v - scale * std::log(ratio) / std::log(base);
}

// Family members whose leaves all lie at or below v.
inline SetFamily supports_below(const SetFamily& family, const Word& v) {
  SetFamily out;
  for (const LeafSet& S : family) {
    bool inside = !S.empty();
    for (const Word& leaf : S)
      if (!is_prefix(v, leaf)) {
        inside = false;
        break;
      }
    if (inside) out.push_back(S);
  }
  return out;
}

}  // namespace detail

struct AssumptionAReport {
  double h_star = 0.0;
  double c_star = 0.0;
  double epsilon = 0.0;  // -log(max{d lambda^2, lambda}) / 1.1
  int vertices = 0;
  int samples = 0;
  // Worst Var[E_v f] / (decay factor * Var f); pass_decay iff <= 1.
  double worst_decay_ratio = 0.0;
  // Extremes of E[(E_v f)^2 | X_parent = theta] / E[(E_v f)^2].
  double worst_conditional_lo = std::numeric_limits<double>::infinity();
  double worst_conditional_hi = 0.0;
  double smallest_valid_h_star = 0.0;
  double largest_valid_c_star = 1.0;
  // The closed-form candidate min{c_M, 1 / min_j pi(j)} and whether the
  // sampled inequalities actually admit it (treated as data, not truth).
  double lemma_c_star = 0.0;
  bool lemma_c_star_valid = false;
  bool pass_decay = true;
  bool pass_lower = true;
  bool pass_upper = true;
  bool pass() const { return pass_decay && pass_lower && pass_upper; }
};

inline AssumptionAReport check_assumption_A(const RootedTree& tree,
                                            const TransitionMatrix& M,
                                            const SetFamily& family,
                                            double h_star, double c_star,
                                            int sample_budget,
                                            std::uint32_t seed = 1) {
  if (!is_decomposition_closed(tree, family))
    throw NotClosed("family is not closed under branch decomposition");
  if (!(h_star > 0.0)) throw Error("h_star must be positive");
  // Values >= 1 are outside the hypothesis' domain and simply fail the
  // lower bound for any nonconstant polynomial; only reject nonsense.
  if (!(c_star > 0.0)) throw Error("c_star must be positive");
  if (sample_budget < 1) throw Error("sample budget must be positive");

  const detail::ChainBasis cb = detail::chain_basis(M);
  const int q = M.q();
  const double base = decay_base(M, branching_factor(tree));
  AssumptionAReport rep;
  rep.h_star = h_star;
  rep.c_star = c_star;
  rep.epsilon = base > 0.0 ? -std::log(base) / 1.1
                           : std::numeric_limits<double>::infinity();

  std::vector<Word> eligible;
  for (const Word& v : tree.nodes())
    if (tree.height(v) >= h_star) eligible.push_back(v);
  rep.vertices = static_cast<int>(eligible.size());
  const int per_vertex =
      std::max(1, sample_budget / std::max(1, rep.vertices));

  Rng rng(seed);
  std::vector<detail::ParameterConstraint> constraints;
  for (const Word& v : eligible) {
    const SetFamily below = detail::supports_below(family, v);
    if (below.empty()) continue;
    const double h_v = tree.height(v);
    for (int s = 0; s < per_vertex; ++s) {
      const LeafPolynomial f = random_family_polynomial(
          tree, q, below, 1 + static_cast<int>(rng.index(4)), rng);
      const VertexPolynomial fp = to_vertex_polynomial(tree, M, f);
      const double var_f = variance(tree, M, fp, cb.nu);
      if (var_f <= tol::kExact) continue;
      ++rep.samples;

      Eigen::VectorXd h = detail::collapse_to_vector(
          q, conditional_expectation_U(tree, M, fp, {v}), v);
      const double mean = cb.nu.dot(h);
      const double var_cond = cb.nu.dot(h.cwiseProduct(h)) - mean * mean;
      const double ratio0 = std::max(0.0, var_cond) / var_f;
      const double factor = detail::decay_factor(base, h_v - h_star);
      const double decay_ratio =
          factor > 0.0 ? ratio0 / factor
                       : (ratio0 <= tol::kExact
                              ? 0.0
                              : std::numeric_limits<double>::infinity());
      rep.worst_decay_ratio = std::max(rep.worst_decay_ratio, decay_ratio);
      if (decay_ratio > 1.0 + 1e-9) rep.pass_decay = false;
      constraints.push_back(
          {h_v, detail::required_parameter(base, 1.1, h_v, ratio0)});

      if (v.empty()) continue;  // conditional bounds need a parent
      h.array() -= mean;        // centred as the hypothesis requires
      const Eigen::VectorXd g2 = h.cwiseProduct(h);
      const double m2 = cb.nu.dot(g2);
      if (m2 <= tol::kExact) continue;
      const Eigen::VectorXd cond = M.entries() * g2;
      const double lo = cond.minCoeff() / m2;
      const double hi = cond.maxCoeff() / m2;
      rep.worst_conditional_lo = std::min(rep.worst_conditional_lo, lo);
      rep.worst_conditional_hi = std::max(rep.worst_conditional_hi, hi);
      const bool ok_lo = lo >= c_star - 1e-9;
      const bool ok_hi = hi <= 1.0 / c_star + 1e-9;
      if (!ok_lo) rep.pass_lower = false;
      if (!ok_hi) rep.pass_upper = false;
      rep.largest_valid_c_star =
          std::min(rep.largest_valid_c_star, std::min(lo, 1.0 / hi));
      if (!ok_lo || !ok_hi)
        constraints.push_back(
            {h_v, std::numeric_limits<double>::infinity()});
    }
  }
  rep.smallest_valid_h_star = detail::smallest_valid_parameter(constraints);

  const double c_M = M.entries().minCoeff();
  const double min_pi = cb.nu.minCoeff();
  rep.lemma_c_star = std::min(c_M, min_pi > 0.0 ? 1.0 / min_pi : 0.0);
  rep.lemma_c_star_valid =
      c_M > 0.0 && rep.lemma_c_star > 0.0 && rep.lemma_c_star < 1.0 &&
      rep.lemma_c_star <= rep.largest_valid_c_star + 1e-9;
  return rep;
}

// ---------------------------------------------------------------------------
// Checker for the sup-norm variant: conditional-variance decay at every
// vertex plus the covariance bound
//   max_theta |(E_u f g)(theta) - E f g|
//     <= base^((h(u) - h_circ)/2.2) sqrt(min_theta E_u f^2 min_theta E_u g^2)
// on centred pairs below u.

struct AssumptionAgReport {
  double h_circ = 0.0;
  double epsilon = 0.0;
  int vertices = 0;
  int samples = 0;
  double worst_decay_ratio = 0.0;       // over every vertex
  double worst_covariance_ratio = 0.0;  // over vertices with h >= h_circ
  double smallest_valid_h_circ = 0.0;
  bool pass_decay = true;
  bool pass_covariance = true;
  bool pass() const { return pass_decay && pass_covariance; }
};

inline AssumptionAgReport check_assumption_Ag(const RootedTree& tree,
                                              const TransitionMatrix& M,
                                              const SetFamily& family,
                                              double h_circ,
                                              int sample_budget,
                                              std::uint32_t seed = 1) {
  if (!is_decomposition_closed(tree, family))
    throw NotClosed("family is not closed under branch decomposition");
  if (!(h_circ > 0.0)) throw Error("h_circ must be positive");
  if (sample_budget < 1) throw Error("sample budget must be positive");

  const detail::ChainBasis cb = detail::chain_basis(M);
  const int q = M.q();
  const double base = decay_base(M, branching_factor(tree));
  AssumptionAgReport rep;
  rep.h_circ = h_circ;
  rep.epsilon = base > 0.0 ? -std::log(base) / 1.1
                           : std::numeric_limits<double>::infinity();

  const std::vector<Word>& all = tree.nodes();
  rep.vertices = static_cast<int>(all.size());
  const int per_vertex =
      std::max(1, sample_budget / std::max(1, rep.vertices));

  Rng rng(seed);
  std::vector<detail::ParameterConstraint> constraints;
  const auto centred = [&](const LeafPolynomial& f) {
    VertexPolynomial fp = to_vertex_polynomial(tree, M, f);
    const double mean = expectation(tree, M, fp, cb.nu);
    ProductTerm shift;
    shift.coeff = -mean;
    fp.terms.push_back(shift);
    return fp;
  };

  for (const Word& u : all) {
    const SetFamily below = detail::supports_below(family, u);
    if (below.empty()) continue;
    const double h_u = tree.height(u);
    for (int s = 0; s < per_vertex; ++s) {
      const VertexPolynomial fp = centred(random_family_polynomial(
          tree, q, below, 1 + static_cast<int>(rng.index(4)), rng));
      const double var_f = variance(tree, M, fp, cb.nu);
      if (var_f <= tol::kExact) continue;
      ++rep.samples;

      const Eigen::VectorXd hf = detail::collapse_to_vector(
          q, conditional_expectation_U(tree, M, fp, {u}), u);
      const double mean_f = cb.nu.dot(hf);
      const double var_cond =
          std::max(0.0, cb.nu.dot(hf.cwiseProduct(hf)) - mean_f * mean_f);
      const double ratio0 = var_cond / var_f;
      const double factor = detail::decay_factor(base, h_u - h_circ);
      const double decay_ratio =
          factor > 0.0 ? ratio0 / factor
                       : (ratio0 <= tol::kExact
                              ? 0.0
                              : std::numeric_limits<double>::infinity());
      rep.worst_decay_ratio = std::max(rep.worst_decay_ratio, decay_ratio);
      if (decay_ratio > 1.0 + 1e-9) rep.pass_decay = false;
      constraints.push_back(
          {std::numeric_limits<double>::infinity(),
           detail::required_parameter(base, 1.1, h_u, ratio0)});

      if (h_u < h_circ) continue;  // covariance bound is gated by height
      const VertexPolynomial gp = centred(random_family_polynomial(
          tree, q, below, 1 + static_cast<int>(rng.index(4)), rng));
      const Eigen::VectorXd cfg = detail::collapse_to_vector(
          q, conditional_expectation_U(tree, M, poly_product(fp, gp), {u}),
          u);
      const Eigen::VectorXd cff = detail::collapse_to_vector(
          q, conditional_expectation_U(tree, M, poly_product(fp, fp), {u}),
          u);
      const Eigen::VectorXd cgg = detail::collapse_to_vector(
          q, conditional_expectation_U(tree, M, poly_product(gp, gp), {u}),
          u);
      const double mean_fg = cb.nu.dot(cfg);
      const double lhs = (cfg.array() - mean_fg).abs().maxCoeff();
      const double scale = std::sqrt(std::max(0.0, cff.minCoeff()) *
                                     std::max(0.0, cgg.minCoeff()));
      const double rhs =
          std::pow(base, (h_u - h_circ) / 2.2) * scale;
      double cov_ratio;
      if (rhs > 0.0) {
        cov_ratio = lhs / rhs;
      } else {
        cov_ratio = lhs <= tol::kPointwise
                        ? 0.0
                        : std::numeric_limits<double>::infinity();
      }
      rep.worst_covariance_ratio =
          std::max(rep.worst_covariance_ratio, cov_ratio);
      if (cov_ratio > 1.0 + 1e-9) rep.pass_covariance = false;
      if (scale > 0.0)
        constraints.push_back(
            {h_u, detail::required_parameter(base, 2.2, h_u, lhs / scale)});
      else if (lhs > tol::kPointwise)
        constraints.push_back(
            {h_u, std::numeric_limits<double>::infinity()});
    }
  }
  rep.smallest_valid_h_circ = detail::smallest_valid_parameter(constraints);
  return rep;
}

// Parameters the sup-norm hypothesis hands to the two-sided one: the height
// offset grows by (2 / epsilon) log 2 and the constant becomes 1/2.
inline std::pair<double, double> two_sided_parameters_from_sup_norm(
    double h_circ, double epsilon) {
  if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  return {h_circ + 2.0 / epsilon * std::log(2.0), 0.5};
}

}  // namespace treecast
