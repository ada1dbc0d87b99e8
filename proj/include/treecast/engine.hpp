#pragma once
// The broadcast process itself: seeded sampling, an exact moment and
// conditional-expectation engine over product-form polynomials via
// bottom-up message passing, and a brute-force enumeration oracle.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "treecast/common.hpp"
#include "treecast/markov.hpp"
#include "treecast/tree.hpp"

namespace treecast {

using Assignment = std::map<Word, int, WordLess>;

// coeff * prod_v factors[v](x_v); a term with no factors is a constant.
struct ProductTerm {
  double coeff = 1.0;
  std::map<Word, Eigen::VectorXd, WordLess> factors;
};

// Sum of product terms; evaluation is well-defined for any full assignment.
struct VertexPolynomial {
  std::vector<ProductTerm> terms;

  static VertexPolynomial constant(double c) {
    VertexPolynomial f;
    f.terms.push_back(ProductTerm{c, {}});
    return f;
  }
};

inline void validate_term(const RootedTree& tree, int q,
                          const ProductTerm& term) {
  for (const auto& [node, factor] : term.factors) {
    if (!tree.contains(node))
      throw NodeNotInTree("factor at absent node " + word_to_string(node));
    if (factor.size() != q)
      throw Error("factor at " + word_to_string(node) + " has length " +
                  std::to_string(factor.size()) + ", expected " +
                  std::to_string(q));
  }
}

inline void validate_polynomial(const RootedTree& tree, int q,
                                const VertexPolynomial& f) {
  for (const ProductTerm& t : f.terms) validate_term(tree, q, t);
}

inline double evaluate(const ProductTerm& term, const Assignment& x) {
  double value = term.coeff;
  for (const auto& [node, factor] : term.factors) {
    const auto it = x.find(node);
    if (it == x.end())
      throw Error("assignment missing node " + word_to_string(node));
    value *= factor(it->second);
  }
  return value;
}

inline double evaluate(const VertexPolynomial& f, const Assignment& x) {
  double value = 0.0;
  for (const ProductTerm& t : f.terms) value += evaluate(t, x);
  return value;
}

inline VertexPolynomial poly_sum(const VertexPolynomial& a,
                                 const VertexPolynomial& b) {
  VertexPolynomial out = a;
  out.terms.insert(out.terms.end(), b.terms.begin(), b.terms.end());
  return out;
}

inline VertexPolynomial poly_scale(const VertexPolynomial& a, double c) {
  VertexPolynomial out = a;
  for (ProductTerm& t : out.terms) t.coeff *= c;
  return out;
}

// Pointwise product; factors at shared nodes multiply componentwise.
inline ProductTerm term_product(const ProductTerm& a, const ProductTerm& b) {
  ProductTerm out = a;
  out.coeff *= b.coeff;
  for (const auto& [node, factor] : b.factors) {
    const auto it = out.factors.find(node);
    if (it == out.factors.end())
      out.factors.emplace(node, factor);
    else
      it->second = it->second.cwiseProduct(factor);
  }
  return out;
}

inline VertexPolynomial poly_product(const VertexPolynomial& a,
                                     const VertexPolynomial& b) {
  VertexPolynomial out;
  out.terms.reserve(a.terms.size() * b.terms.size());
  for (const ProductTerm& s : a.terms)
    for (const ProductTerm& t : b.terms) out.terms.push_back(term_product(s, t));
  return out;
}

// One realization of the process: root from nu, children along rows of M.
struct BroadcastSample {
  Assignment assignment;
  std::uint32_t seed = 0;
};

inline void validate_distribution(const Eigen::VectorXd& nu, int q) {
  if (static_cast<int>(nu.size()) != q)
    throw BadDistribution("length " + std::to_string(nu.size()) +
                          ", expected " + std::to_string(q));
  double total = 0.0;
  for (int i = 0; i < nu.size(); ++i) {
    if (nu(i) < 0.0) throw BadDistribution("negative mass " + fmt17(nu(i)));
    total += nu(i);
  }
  if (std::abs(total - 1.0) > tol::kRowSum)
    throw BadDistribution("total mass " + fmt17(total));
}

namespace detail {
// CDF inversion on one u01 word.
inline int draw_from(Rng& rng, const Eigen::VectorXd& p) {
  const double u = rng.u01();
  double cdf = 0.0;
  for (int i = 0; i + 1 < p.size(); ++i) {
    cdf += p(i);
    if (u < cdf) return i;
  }
  return static_cast<int>(p.size()) - 1;
}
}  // namespace detail

// Nodes are visited in word order (parents before children), one u01 each.
inline BroadcastSample sample(const RootedTree& tree, const TransitionMatrix& M,
                              const Eigen::VectorXd& nu, std::uint32_t seed) {
  validate_distribution(nu, M.q());
  Rng rng(seed);
  BroadcastSample out;
  out.seed = seed;
  for (const Word& u : tree.nodes()) {
    if (u.empty()) {
      out.assignment[u] = detail::draw_from(rng, nu);
    } else {
      const int parent_state = out.assignment.at(tree.parent(u));
      out.assignment[u] =
          detail::draw_from(rng, M.entries().row(parent_state).transpose());
    }
  }
  return out;
}

inline BroadcastSample sample(const RootedTree& tree, const TransitionMatrix& M,
                              std::uint32_t seed) {
  return sample(tree, M, stationary_distribution(M), seed);
}

namespace detail {

// E[prod factors] by bottom-up messages over the ancestor closure of the
// factor nodes: m_u = f_u . prod_children (M m_c); untouched subtrees carry
// the all-ones message and are skipped.
inline double expectation_term(const RootedTree& tree,
                               const TransitionMatrix& M,
                               const Eigen::VectorXd& pi,
                               const ProductTerm& term) {
  if (term.factors.empty()) return term.coeff;
  std::set<Word, WordLess> active;
  for (const auto& [node, factor] : term.factors) {
    Word w = node;
    while (true) {
      if (!active.insert(w).second) break;
      if (w.empty()) break;
      w.pop_back();
    }
  }
  std::map<Word, Eigen::VectorXd, WordLess> msg;
  for (auto it = active.rbegin(); it != active.rend(); ++it) {
    const Word& u = *it;
    const auto fit = term.factors.find(u);
    Eigen::VectorXd m = fit != term.factors.end()
                            ? fit->second
                            : Eigen::VectorXd::Ones(M.q());
    for (const Word& c : tree.children(u)) {
      const auto mit = msg.find(c);
      if (mit != msg.end()) m = m.cwiseProduct(M.entries() * mit->second);
    }
    msg[u] = std::move(m);
  }
  return term.coeff * pi.dot(msg.at(Word{}));
}

}  // namespace detail

inline double expectation(const RootedTree& tree, const TransitionMatrix& M,
                          const ProductTerm& term, const Eigen::VectorXd& nu) {
  validate_term(tree, M.q(), term);
  validate_distribution(nu, M.q());
  return detail::expectation_term(tree, M, nu, term);
}

inline double expectation(const RootedTree& tree, const TransitionMatrix& M,
                          const ProductTerm& term) {
  return expectation(tree, M, term, stationary_distribution(M));
}

inline double expectation(const RootedTree& tree, const TransitionMatrix& M,
                          const VertexPolynomial& f,
                          const Eigen::VectorXd& nu) {
  validate_polynomial(tree, M.q(), f);
  validate_distribution(nu, M.q());
  double total = 0.0;
  for (const ProductTerm& t : f.terms)
    total += detail::expectation_term(tree, M, nu, t);
  return total;
}

inline double expectation(const RootedTree& tree, const TransitionMatrix& M,
                          const VertexPolynomial& f) {
  return expectation(tree, M, f, stationary_distribution(M));
}

// E_U f: in each term, factors strictly below each u in U collapse into a
// message factor at u; everything else is kept as a frozen symbol.  The
// result is a function of the variables not strictly below any u in U.
inline VertexPolynomial conditional_expectation_U(const RootedTree& tree,
                                                  const TransitionMatrix& M,
                                                  const VertexPolynomial& f,
                                                  const std::vector<Word>& U) {
  validate_polynomial(tree, M.q(), f);
  for (const Word& u : U)
    if (!tree.contains(u)) throw NodeNotInTree("no node " + word_to_string(u));
  for (std::size_t i = 0; i < U.size(); ++i)
    for (std::size_t j = 0; j < U.size(); ++j)
      if (i != j && is_prefix(U[i], U[j]))
        throw OverlappingU(word_to_string(U[j]) + " is below " +
                           word_to_string(U[i]));

  VertexPolynomial out;
  out.terms.reserve(f.terms.size());
  for (const ProductTerm& term : f.terms) {
    ProductTerm next;
    next.coeff = term.coeff;
    std::set<Word, WordLess> collapsed;
    for (const Word& u : U) {
      // Ancestor closure, within the subtree of u, of the factors strictly
      // below u.
      std::set<Word, WordLess> active;
      for (const auto& [node, factor] : term.factors)
        if (node != u && is_prefix(u, node)) {
          collapsed.insert(node);
          Word w = node;
          while (w != u) {
            if (!active.insert(w).second) break;
            w.pop_back();
          }
        }
      if (active.empty()) continue;
      std::map<Word, Eigen::VectorXd, WordLess> msg;
      for (auto it = active.rbegin(); it != active.rend(); ++it) {
        const Word& v = *it;
        const auto fit = term.factors.find(v);
        Eigen::VectorXd m = fit != term.factors.end()
                                ? fit->second
                                : Eigen::VectorXd::Ones(M.q());
        for (const Word& c : tree.children(v)) {
          const auto mit = msg.find(c);
          if (mit != msg.end()) m = m.cwiseProduct(M.entries() * mit->second);
        }
        msg[v] = std::move(m);
      }
      Eigen::VectorXd at_u = Eigen::VectorXd::Ones(M.q());
      for (const Word& c : tree.children(u)) {
        const auto mit = msg.find(c);
        if (mit != msg.end())
          at_u = at_u.cwiseProduct(M.entries() * mit->second);
      }
      const auto own = term.factors.find(u);
      if (own != term.factors.end()) at_u = at_u.cwiseProduct(own->second);
      next.factors[u] = std::move(at_u);
    }
    for (const auto& [node, factor] : term.factors)
      if (!collapsed.count(node) && !next.factors.count(node))
        next.factors.emplace(node, factor);
    out.terms.push_back(std::move(next));
  }
  return out;
}

// Polynomials wider than this are rejected before the quadratic expansion.
inline constexpr std::size_t kMaxVarianceTerms = 5000;

inline double variance(const RootedTree& tree, const TransitionMatrix& M,
                       const VertexPolynomial& f, const Eigen::VectorXd& nu) {
  if (f.terms.size() > kMaxVarianceTerms)
    throw TooLarge("variance of " + std::to_string(f.terms.size()) +
                   " terms exceeds the " + std::to_string(kMaxVarianceTerms) +
                   "-term guard");
  validate_polynomial(tree, M.q(), f);
  validate_distribution(nu, M.q());
  double mean = 0.0;
  for (const ProductTerm& t : f.terms)
    mean += detail::expectation_term(tree, M, nu, t);
  double second = 0.0;
  for (std::size_t i = 0; i < f.terms.size(); ++i) {
    second += detail::expectation_term(tree, M, nu,
                                       term_product(f.terms[i], f.terms[i]));
    for (std::size_t j = i + 1; j < f.terms.size(); ++j)
      second += 2.0 * detail::expectation_term(
                          tree, M, nu, term_product(f.terms[i], f.terms[j]));
  }
  const double var = second - mean * mean;
  if (var < -tol::kExact)
    throw Error("variance " + fmt17(var) + " beyond the negative floor");
  return std::max(var, 0.0);
}

inline double variance(const RootedTree& tree, const TransitionMatrix& M,
                       const VertexPolynomial& f) {
  return variance(tree, M, f, stationary_distribution(M));
}

// Var[(E_w f)(X)]: variance of the conditional expectation given everything
// not strictly below w.  At w = root this is Var_{theta~pi} E[f | X_rho].
inline double var_conditional_on(const RootedTree& tree,
                                 const TransitionMatrix& M,
                                 const VertexPolynomial& f, const Word& w) {
  return variance(tree, M, conditional_expectation_U(tree, M, f, {w}));
}

// Exhaustive joint-law evaluator: walks every assignment with its exact
// probability nu(x_root) prod M(x_parent, x_child).  Independent of the
// message-passing engine by construction.
class BruteForce {
 public:
  BruteForce(RootedTree tree, const TransitionMatrix& M)
      : BruteForce(std::move(tree), M, stationary_distribution(M)) {}

  BruteForce(RootedTree tree, const TransitionMatrix& M, Eigen::VectorXd nu)
      : tree_(std::move(tree)), m_(M), nu_(std::move(nu)) {
    validate_distribution(nu_, m_.q());
    const int n = tree_.node_count();
    if (n * std::log2(double(m_.q())) > 24.0 + 1e-9)
      throw TooLarge("q^nodes exceeds 2^24");
    nodes_ = tree_.nodes();
    parent_.assign(nodes_.size(), -1);
    std::map<Word, int, WordLess> index;
    for (std::size_t i = 0; i < nodes_.size(); ++i) index[nodes_[i]] = int(i);
    for (std::size_t i = 1; i < nodes_.size(); ++i)
      parent_[i] = index.at(tree_.parent(nodes_[i]));
    index_ = std::move(index);
  }

  // fn(states, probability) for every full assignment; states are indexed
  // by word order.  Pinned nodes (state >= 0 in pins) are held fixed.
  template <typename Fn>
  void for_each(Fn&& fn, const std::vector<int>& pins = {}) const {
    std::vector<int> x(nodes_.size(), 0);
    std::vector<double> prefix(nodes_.size() + 1, 1.0);
    recurse(0, x, prefix, pins, fn);
  }

  double total_mass() const {
    double mass = 0.0;
    for_each([&](const std::vector<int>&, double p) { mass += p; });
    return mass;
  }

  struct Moments {
    double mass = 0.0;
    double mean = 0.0;
    double second = 0.0;
    Eigen::VectorXd root_mass;
    Eigen::VectorXd root_sum;

    double var() const { return second - mean * mean; }

    // Var of E[f | X_root] under the root marginal.
    double var_conditional_root() const {
      double acc = 0.0, lin = 0.0;
      for (int t = 0; t < root_mass.size(); ++t)
        if (root_mass(t) > 0.0) {
          const double e = root_sum(t) / root_mass(t);
          acc += root_mass(t) * e * e;
          lin += root_sum(t);
        }
      return acc - lin * lin;
    }
  };

  // One enumeration pass serving every polynomial at once.
  std::vector<Moments> batch(const std::vector<VertexPolynomial>& fs) const {
    const int q = m_.q();
    struct CompiledFactor {
      int node;
      Eigen::VectorXd values;
    };
    struct CompiledTerm {
      double coeff;
      std::vector<CompiledFactor> factors;
    };
    std::vector<std::vector<CompiledTerm>> compiled;
    for (const VertexPolynomial& f : fs) {
      validate_polynomial(tree_, q, f);
      std::vector<CompiledTerm> terms;
      for (const ProductTerm& t : f.terms) {
        CompiledTerm ct{t.coeff, {}};
        for (const auto& [node, factor] : t.factors)
          ct.factors.push_back({index_.at(node), factor});
        terms.push_back(std::move(ct));
      }
      compiled.push_back(std::move(terms));
    }
    std::vector<Moments> out(fs.size());
    for (Moments& m : out) {
      m.root_mass = Eigen::VectorXd::Zero(q);
      m.root_sum = Eigen::VectorXd::Zero(q);
    }
    for_each([&](const std::vector<int>& x, double p) {
      for (std::size_t i = 0; i < compiled.size(); ++i) {
        double value = 0.0;
        for (const CompiledTerm& t : compiled[i]) {
          double term = t.coeff;
          for (const CompiledFactor& f : t.factors) term *= f.values(x[f.node]);
          value += term;
        }
        Moments& m = out[i];
        m.mass += p;
        m.mean += p * value;
        m.second += p * value * value;
        m.root_mass(x[0]) += p;
        m.root_sum(x[0]) += p * value;
      }
    });
    return out;
  }

  double expectation(const VertexPolynomial& f) const {
    return batch({f})[0].mean;
  }

  double variance(const VertexPolynomial& f) const { return batch({f})[0].var(); }

  double var_conditional_root(const VertexPolynomial& f) const {
    return batch({f})[0].var_conditional_root();
  }

  // E[f | X_root = theta] for each theta, by filtered enumeration.
  Eigen::VectorXd conditional_expectation_root(const VertexPolynomial& f) const {
    const Moments m = batch({f})[0];
    Eigen::VectorXd out = Eigen::VectorXd::Zero(m_.q());
    for (int t = 0; t < m_.q(); ++t)
      if (m.root_mass(t) > 0.0) out(t) = m.root_sum(t) / m.root_mass(t);
    return out;
  }

  // P(X_root = theta | observed), observed nodes pinned to their states.
  Eigen::VectorXd root_posterior(const Assignment& observed) const {
    std::vector<int> pins(nodes_.size(), -1);
    for (const auto& [node, state] : observed) {
      const auto it = index_.find(node);
      if (it == index_.end())
        throw NodeNotInTree("no node " + word_to_string(node));
      if (state < 0 || state >= m_.q())
        throw Error("state " + std::to_string(state) + " out of range");
      pins[it->second] = state;
    }
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(m_.q());
    for_each([&](const std::vector<int>& x, double p) { mass(x[0]) += p; },
             pins);
    const double total = mass.sum();
    if (total <= 0.0) throw ZeroLikelihood("observation has zero mass");
    return mass / total;
  }

  const std::vector<Word>& node_order() const { return nodes_; }

 private:
  template <typename Fn>
  void recurse(std::size_t i, std::vector<int>& x, std::vector<double>& prefix,
               const std::vector<int>& pins, Fn&& fn) const {
    if (i == nodes_.size()) {
      fn(std::as_const(x), prefix[nodes_.size()]);
      return;
    }
    const int pinned = i < pins.size() ? pins[i] : -1;
    for (int s = 0; s < m_.q(); ++s) {
      if (pinned >= 0 && s != pinned) continue;
      x[i] = s;
      const double step = i == 0 ? nu_(s) : m_(x[parent_[i]], s);
      if (step == 0.0) continue;  // zero-probability branch
      prefix[i + 1] = prefix[i] * step;
      recurse(i + 1, x, prefix, pins, fn);
    }
  }

  RootedTree tree_;  // by value: enumerable trees are small by the guard
  TransitionMatrix m_;
  Eigen::VectorXd nu_;
  std::vector<Word> nodes_;
  std::vector<int> parent_;
  std::map<Word, int, WordLess> index_;
};

}  // namespace treecast
