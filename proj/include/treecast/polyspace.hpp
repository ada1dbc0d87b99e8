#pragma once
// Polynomials over tree configurations in the product site basis:
// multi-indexed leaf polynomials, branch decomposition and fractal capacity
// of leaf sets, the centred product basis, the layered decomposition with
// its variance sandwich, and the canonical degree-one representation with
// block-averaged coefficients.

#include <algorithm>
#include <climits>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "treecast/common.hpp"
#include "treecast/engine.hpp"
#include "treecast/markov.hpp"
#include "treecast/partitions.hpp"
#include "treecast/tree.hpp"

namespace treecast {

// ---------------------------------------------------------------------------
// Multi-indices and leaf polynomials.

// A sparse map vertex -> basis index in [1, q-1]; absent vertices carry the
// constant basis element 0.  S(sigma) is the support, |sigma| its size.
struct MultiIndex {
  std::map<Word, int, WordLess> entries;

  MultiIndex() = default;
  explicit MultiIndex(std::map<Word, int, WordLess> e)
      : entries(std::move(e)) {
    for (auto it = entries.begin(); it != entries.end();) {
      if (it->second == 0) {
        it = entries.erase(it);
      } else if (it->second < 0) {
        throw Error("negative basis index " + std::to_string(it->second) +
                    " at " + word_to_string(it->first));
      } else {
        ++it;
      }
    }
  }

  int order() const { return static_cast<int>(entries.size()); }

  std::vector<Word> support() const {
    std::vector<Word> S;
    S.reserve(entries.size());
    for (const auto& [w, s] : entries) S.push_back(w);
    return S;
  }

  bool operator==(const MultiIndex& o) const { return entries == o.entries; }
  bool operator!=(const MultiIndex& o) const { return !(*this == o); }

  // Length-then-lex on the (vertex, index) sequence: the canonical order.
  bool operator<(const MultiIndex& o) const {
    auto a = entries.begin();
    auto b = o.entries.begin();
    const WordLess less;
    for (; a != entries.end() && b != o.entries.end(); ++a, ++b) {
      if (less(a->first, b->first)) return true;
      if (less(b->first, a->first)) return false;
      if (a->second != b->second) return a->second < b->second;
    }
    return a == entries.end() && b != o.entries.end();
  }
};

inline std::string multi_index_to_string(const MultiIndex& sigma) {
  std::string s = "{";
  for (const auto& [w, j] : sigma.entries) {
    if (s.size() > 1) s += ", ";
    s += word_to_string(w) + ":" + std::to_string(j);
  }
  return s + "}";
}

// A function of the leaf configuration written in the product site basis:
// f = sum_sigma c_sigma prod_{v in S(sigma)} phi_{sigma(v)}(x_v).  The
// representation is unique once the site basis is fixed.
struct LeafPolynomial {
  std::map<MultiIndex, double> coeffs;

  void add(const MultiIndex& sigma, double c) {
    if (c == 0.0) return;
    const double next = (coeffs[sigma] += c);
    if (next == 0.0) coeffs.erase(sigma);
  }
};

// Largest number of vertices touched by a term with non-zero coefficient.
inline int efron_stein_degree(const LeafPolynomial& f) {
  int deg = 0;
  for (const auto& [sigma, c] : f.coeffs)
    if (c != 0.0) deg = std::max(deg, sigma.order());
  return deg;
}

namespace detail {

// Common validation: vertices exist, indices fit the state space, and all
// touched vertices sit at one depth (leaves_only additionally pins the
// bottom layer).
inline void validate_index_set(const RootedTree& tree, int q,
                               const MultiIndex& sigma, bool leaves_only) {
  int depth = -1;
  for (const auto& [w, j] : sigma.entries) {
    if (!tree.contains(w))
      throw NodeNotInTree("no node " + word_to_string(w));
    if (j < 1 || j >= q)
      throw Error("basis index " + std::to_string(j) + " at " +
                  word_to_string(w) + " outside [1," + std::to_string(q) +
                  ")");
    if (depth < 0) depth = static_cast<int>(w.size());
    if (static_cast<int>(w.size()) != depth)
      throw BadSupport("vertices " + multi_index_to_string(sigma) +
                       " are not on one layer");
    if (leaves_only && tree.height(w) != 0)
      throw BadSupport(word_to_string(w) + " is not a leaf");
  }
}

inline void validate_leaf_polynomial(const RootedTree& tree, int q,
                                     const LeafPolynomial& f,
                                     bool leaves_only) {
  for (const auto& [sigma, c] : f.coeffs)
    validate_index_set(tree, q, sigma, leaves_only);
}

// Root measure and matching orthonormal site basis for a chain, ergodic or
// not: the reference distribution weighs the Gram-Schmidt steps.
struct ChainBasis {
  Eigen::VectorXd nu;
  SiteBasis site;
};

inline ChainBasis chain_basis(const TransitionMatrix& M) {
  ChainBasis cb;
  cb.nu = reference_distribution(M);
  cb.site = build_site_basis(M, cb.nu);
  return cb;
}

inline ProductTerm term_of(const SiteBasis& site, const MultiIndex& sigma,
                           double c) {
  ProductTerm t;
  t.coeff = c;
  for (const auto& [w, j] : sigma.entries) t.factors[w] = site.phi[j];
  return t;
}

}  // namespace detail

// Expansion into engine polynomials; inverse below recovers the unique
// coefficients (site-basis orthonormality under the reference measure).
inline VertexPolynomial to_vertex_polynomial(const RootedTree& tree,
                                             const TransitionMatrix& M,
                                             const LeafPolynomial& f) {
  detail::validate_leaf_polynomial(tree, M.q(), f, false);
  const detail::ChainBasis cb = detail::chain_basis(M);
  VertexPolynomial out;
  out.terms.reserve(f.coeffs.size());
  for (const auto& [sigma, c] : f.coeffs) {
    if (c == 0.0) continue;
    out.terms.push_back(detail::term_of(cb.site, sigma, c));
  }
  return out;
}

inline LeafPolynomial leaf_expand(const RootedTree& tree,
                                  const TransitionMatrix& M,
                                  const VertexPolynomial& g) {
  const int q = M.q();
  const detail::ChainBasis cb = detail::chain_basis(M);
  LeafPolynomial out;
  for (const ProductTerm& term : g.terms) {
    // Per-factor coordinates in the site basis: a_j = <factor, phi_j>_nu.
    std::vector<std::pair<Word, Eigen::VectorXd>> coords;
    for (const auto& [w, factor] : term.factors) {
      if (!tree.contains(w))
        throw NodeNotInTree("no node " + word_to_string(w));
      if (factor.size() != q)
        throw Error("factor at " + word_to_string(w) + " has length " +
                    std::to_string(factor.size()));
      Eigen::VectorXd a(q);
      for (int j = 0; j < q; ++j)
        a(j) = (cb.nu.array() * cb.site.phi[j].array() * factor.array()).sum();
      coords.emplace_back(w, std::move(a));
    }
    // Cartesian expansion over the chosen basis index at each factor.
    std::vector<std::pair<MultiIndex, double>> partial{{MultiIndex{}, term.coeff}};
    for (const auto& [w, a] : coords) {
      std::vector<std::pair<MultiIndex, double>> next;
      for (const auto& [sigma, c] : partial) {
        if (c == 0.0) continue;
        for (int j = 0; j < q; ++j) {
          if (a(j) == 0.0) continue;
          MultiIndex s = sigma;
          if (j > 0) s.entries[w] = j;
          next.emplace_back(std::move(s), c * a(j));
        }
      }
      partial = std::move(next);
    }
    for (const auto& [sigma, c] : partial) out.add(sigma, c);
  }
  return out;
}

// Direct pointwise evaluation, independent of the engine expansion.
inline double evaluate_leaf(const RootedTree& tree, const TransitionMatrix& M,
                            const LeafPolynomial& f, const Assignment& x) {
  detail::validate_leaf_polynomial(tree, M.q(), f, false);
  const detail::ChainBasis cb = detail::chain_basis(M);
  double total = 0.0;
  for (const auto& [sigma, c] : f.coeffs) {
    double term = c;
    for (const auto& [w, j] : sigma.entries) {
      const auto it = x.find(w);
      if (it == x.end())
        throw Error("assignment missing node " + word_to_string(w));
      term *= cb.site.phi[j](it->second);
    }
    total += term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Branch decomposition and fractal capacity.

// The nearest common ancestor rho(S), the child directions of rho(S) that S
// enters, and the pieces of S inside those subtrees.
struct BranchParts {
  Word rho;
  std::vector<int> children;
  std::map<int, std::vector<Word>> parts;
};

inline BranchParts branch_decompose(const RootedTree& tree,
                                    const std::vector<Word>& S) {
  if (S.size() < 2)
    throw TooSmall("branch decomposition needs |S| >= 2, got " +
                   std::to_string(S.size()));
  std::set<Word, WordLess> distinct(S.begin(), S.end());
  if (distinct.size() != S.size())
    throw Error("branch decomposition of a multiset");
  for (const Word& w : S) {
    if (!tree.contains(w)) throw NodeNotInTree("no node " + word_to_string(w));
    if (w.size() != S.front().size())
      throw BadSupport("set members are not on one layer");
  }
  BranchParts bp;
  bp.rho = nearest_common_ancestor(tree, S);
  for (const Word& w : distinct) bp.parts[w[bp.rho.size()]].push_back(w);
  for (const auto& [i, part] : bp.parts) bp.children.push_back(i);
  if (bp.children.size() < 2)
    throw Error("branch node fails minimality; set enters one child only");
  return bp;
}

// cap(S): 1 for singletons, else one more than the largest capacity among
// the branch parts.  Equals the first k whose family A_k contains S.
inline int fractal_capacity(const RootedTree& tree,
                            const std::vector<Word>& S) {
  if (S.empty()) throw EmptySet("capacity of the empty set");
  if (S.size() == 1) {
    if (!tree.contains(S.front()))
      throw NodeNotInTree("no node " + word_to_string(S.front()));
    return 1;
  }
  const BranchParts bp = branch_decompose(tree, S);
  int deepest = 0;
  for (const auto& [i, part] : bp.parts)
    deepest = std::max(deepest, fractal_capacity(tree, part));
  return 1 + deepest;
}

// Families of leaf subsets in canonical form: members sorted within, the
// family sorted by (size, lexicographic).
using LeafSet = std::vector<Word>;
using SetFamily = std::vector<LeafSet>;

namespace detail {

inline LeafSet canonical_set(LeafSet S) {
  std::sort(S.begin(), S.end(), WordLess{});
  return S;
}

struct LeafSetLess {
  bool operator()(const LeafSet& a, const LeafSet& b) const {
    if (a.size() != b.size()) return a.size() < b.size();
    const WordLess less;
    for (std::size_t t = 0; t < a.size(); ++t) {
      if (less(a[t], b[t])) return true;
      if (less(b[t], a[t])) return false;
    }
    return false;
  }
};

}  // namespace detail

// Number of leaves above which the powerset enumeration is refused.
inline constexpr int kMaxAkLeaves = 12;

// A_1 = singletons; A_k = sets that are singletons or whose branch parts
// all lie in A_{k-1}.  Built literally from that recurrence, independently
// of fractal_capacity, so the two constructions can be cross-checked.
inline SetFamily build_Ak(const RootedTree& tree, int k) {
  if (k < 1) throw Error("build_Ak needs k >= 1");
  const std::vector<Word>& L = tree.leaves();
  const int n = static_cast<int>(L.size());
  if (n > kMaxAkLeaves)
    throw TooLarge(std::to_string(n) + " leaves exceed the powerset cap " +
                   std::to_string(kMaxAkLeaves));
  std::set<LeafSet, detail::LeafSetLess> family;
  for (const Word& v : L) family.insert(LeafSet{v});
  for (int step = 2; step <= k; ++step) {
    std::set<LeafSet, detail::LeafSetLess> next = family;
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
      LeafSet S;
      for (int t = 0; t < n; ++t)
        if (mask >> t & 1u) S.push_back(L[t]);
      if (S.size() < 2 || next.count(S)) continue;
      const BranchParts bp = branch_decompose(tree, S);
      bool closed = true;
      for (const auto& [i, part] : bp.parts)
        if (!family.count(detail::canonical_set(part))) {
          closed = false;
          break;
        }
      if (closed) next.insert(S);
    }
    family = std::move(next);
  }
  return SetFamily(family.begin(), family.end());
}

// True when every member is a singleton or has all branch parts in the
// family: the closure property every decomposition below relies on.
inline bool is_decomposition_closed(const RootedTree& tree,
                                    const SetFamily& family) {
  std::set<LeafSet, detail::LeafSetLess> members;
  for (const LeafSet& S : family) members.insert(detail::canonical_set(S));
  for (const LeafSet& S : members) {
    if (S.empty()) return false;
    if (S.size() == 1) continue;
    const BranchParts bp = branch_decompose(tree, S);
    for (const auto& [i, part] : bp.parts)
      if (!members.count(detail::canonical_set(part))) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// The centred product basis psi and the expansion of phi in it.

namespace detail {

// sigma restricted to one branch part.
inline MultiIndex restrict_index(const MultiIndex& sigma,
                                 const std::vector<Word>& part) {
  MultiIndex out;
  for (const Word& w : part) out.entries[w] = sigma.entries.at(w);
  return out;
}

// The factors phi_{sigma^{(i)}} of the branch decomposition together with
// their engine-exact means.
struct BranchFactors {
  BranchParts bp;
  std::vector<MultiIndex> restricted;  // per child direction, in order
  std::vector<ProductTerm> phi;        // unit-coefficient product terms
  std::vector<double> mean;
};

inline BranchFactors branch_factors(const RootedTree& tree,
                                    const TransitionMatrix& M,
                                    const ChainBasis& cb,
                                    const MultiIndex& sigma) {
  BranchFactors bf;
  bf.bp = branch_decompose(tree, sigma.support());
  for (const int i : bf.bp.children) {
    MultiIndex rest = restrict_index(sigma, bf.bp.parts.at(i));
    ProductTerm t = term_of(cb.site, rest, 1.0);
    // Means at roundoff scale are genuine zeros (site vectors are centred),
    // so snap them: this keeps singleton factors shift-free and stops noise
    // coefficients from seeding spurious lower-order terms.
    double mean = expectation(tree, M, t, cb.nu);
    if (std::abs(mean) <= tol::kExact) mean = 0.0;
    bf.mean.push_back(mean);
    bf.restricted.push_back(std::move(rest));
    bf.phi.push_back(std::move(t));
  }
  return bf;
}

inline VertexPolynomial psi_from_factors(const BranchFactors& bf) {
  VertexPolynomial acc;
  ProductTerm one;
  one.coeff = 1.0;
  acc.terms.push_back(one);
  for (std::size_t i = 0; i < bf.phi.size(); ++i) {
    VertexPolynomial factor;
    factor.terms.push_back(bf.phi[i]);
    if (bf.mean[i] != 0.0) {
      ProductTerm shift;
      shift.coeff = -bf.mean[i];
      factor.terms.push_back(shift);
    }
    acc = poly_product(acc, factor);
  }
  return acc;
}

}  // namespace detail

// psi_sigma = prod over branch directions of (phi_{sigma^{(i)}} - mean),
// expanded into engine terms with engine-exact centering constants.
inline VertexPolynomial psi(const RootedTree& tree, const TransitionMatrix& M,
                            const MultiIndex& sigma) {
  if (sigma.order() < 2)
    throw TooSmall("psi needs |sigma| >= 2, got " +
                   std::to_string(sigma.order()));
  detail::validate_index_set(tree, M.q(), sigma, true);
  const detail::ChainBasis cb = detail::chain_basis(M);
  return detail::psi_from_factors(detail::branch_factors(tree, M, cb, sigma));
}

// The four components of phi_sigma = psi_sigma - a_subset - a_less - a_const:
// a_subset collects merged indices over >= 2 branch directions (so their
// branch node is still rho and their direction set is a proper subset),
// a_less collects single branch parts (branch node strictly below rho),
// a_const the scalar left over.
struct PhiPsiExpansion {
  VertexPolynomial psi_product;
  LeafPolynomial a_subset;
  LeafPolynomial a_less;
  double a_const = 0.0;
};

inline PhiPsiExpansion expand_phi_in_psi(const RootedTree& tree,
                                         const TransitionMatrix& M,
                                         const MultiIndex& sigma) {
  if (sigma.order() < 2)
    throw TooSmall("expansion needs |sigma| >= 2, got " +
                   std::to_string(sigma.order()));
  detail::validate_index_set(tree, M.q(), sigma, true);
  const detail::ChainBasis cb = detail::chain_basis(M);
  const detail::BranchFactors bf = detail::branch_factors(tree, M, cb, sigma);
  const std::size_t n = bf.phi.size();
  if (n >= 20)
    throw TooLarge(std::to_string(n) +
                   " branch directions exceed the expansion budget");

  PhiPsiExpansion out;
  out.psi_product = detail::psi_from_factors(bf);
  // psi_sigma = sum over direction subsets K of phi-merge(K) * prod_{i not
  // in K}(-m_i); move everything except K = all to the other side.
  for (std::uint32_t mask = 0; mask + 1 < (1u << n); ++mask) {
    double weight = 1.0;
    MultiIndex merged;
    std::size_t picked = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) {
        ++picked;
        for (const auto& [w, j] : bf.restricted[i].entries)
          merged.entries[w] = j;
      } else {
        weight *= -bf.mean[i];
      }
    }
    if (weight == 0.0) continue;
    if (picked == 0)
      out.a_const += weight;
    else if (picked == 1)
      out.a_less.add(merged, weight);
    else
      out.a_subset.add(merged, weight);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decomposition of one branch node's polynomial and of a whole function.

// p_u = tilde_f_u + p_less_u + c_u with tilde_f_u a centred combination of
// psi_sigma at the same branch node, p_less_u supported strictly below it.
struct PuDecomposition {
  VertexPolynomial tilde_f_u;
  LeafPolynomial psi_coeffs;  // tilde_f_u = sum c_sigma psi_sigma - mean
  LeafPolynomial p_less_u;
  double c_u = 0.0;
};

inline PuDecomposition decompose_pu(const RootedTree& tree,
                                    const TransitionMatrix& M,
                                    const LeafPolynomial& p_u) {
  detail::validate_leaf_polynomial(tree, M.q(), p_u, true);
  PuDecomposition out;
  bool have_rho = false;
  Word rho;
  std::map<MultiIndex, double> work;
  for (const auto& [sigma, c] : p_u.coeffs) {
    if (c == 0.0) continue;
    if (sigma.order() < 2)
      throw BadSupport("index " + multi_index_to_string(sigma) +
                       " has no internal branch node");
    const Word r = nearest_common_ancestor(tree, sigma.support());
    if (!have_rho) {
      rho = r;
      have_rho = true;
    } else if (r != rho) {
      throw BadSupport("indices split between branch nodes " +
                       word_to_string(rho) + " and " + word_to_string(r));
    }
    work[sigma] += c;
  }
  if (!have_rho) return out;  // zero polynomial: all parts zero

  const detail::ChainBasis cb = detail::chain_basis(M);
  int r_max = 0;
  const auto direction_count = [&](const MultiIndex& sigma) {
    return static_cast<int>(
        branch_decompose(tree, sigma.support()).children.size());
  };
  for (const auto& [sigma, c] : work)
    r_max = std::max(r_max, direction_count(sigma));

  VertexPolynomial f_u;
  for (int r = r_max; r >= 2; --r) {
    std::vector<std::pair<MultiIndex, double>> batch;
    for (const auto& [sigma, c] : work)
      if (c != 0.0 && direction_count(sigma) == r)
        batch.emplace_back(sigma, c);
    for (const auto& [sigma, c] : batch) {
      work.erase(sigma);
      const PhiPsiExpansion ex = expand_phi_in_psi(tree, M, sigma);
      out.psi_coeffs.add(sigma, c);
      f_u = poly_sum(f_u, poly_scale(ex.psi_product, c));
      for (const auto& [s, a] : ex.a_subset.coeffs) work[s] -= c * a;
      for (const auto& [s, a] : ex.a_less.coeffs) out.p_less_u.add(s, -c * a);
      out.c_u -= c * ex.a_const;
    }
  }
  for (const auto& [sigma, c] : work)
    if (c != 0.0)
      throw Error("recursion left index " + multi_index_to_string(sigma));

  const double mean = expectation(tree, M, f_u, cb.nu);
  ProductTerm shift;
  shift.coeff = -mean;
  out.tilde_f_u = std::move(f_u);
  if (mean != 0.0) out.tilde_f_u.terms.push_back(shift);
  out.c_u += mean;
  return out;
}

// The layered decomposition: centred branch-node parts above the floor
// layer, canonicalized degree-one parts on it, and the empirical two-sided
// variance comparison of sums against part sums.
struct LayerDecomposition {
  int k1 = 0;
  std::map<Word, VertexPolynomial, WordLess> f_u;
  std::map<Word, LeafPolynomial, WordLess> psi_coeffs;  // nodes above floor
  std::map<int, VertexPolynomial> f_k;
  double sandwich_lo = 1.0;
  double sandwich_hi = 1.0;
};

// Canonical degree-one parts, declared below.
struct Degree1Canonical {
  std::map<Word, Eigen::VectorXd, WordLess> parts;
  double var_f = 0.0;
  double sum_var_parts = 0.0;

  double ratio() const {
    if (var_f > 0.0) return sum_var_parts / var_f;
    return sum_var_parts > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  }
};

inline Degree1Canonical degree1_canonicalize(const RootedTree& tree,
                                             const TransitionMatrix& M,
                                             const LeafPolynomial& f);

inline LayerDecomposition full_decompose(const RootedTree& tree,
                                         const TransitionMatrix& M,
                                         const LeafPolynomial& f, int k1,
                                         const SetFamily* family = nullptr) {
  detail::validate_leaf_polynomial(tree, M.q(), f, true);
  if (k1 < 0 || k1 >= tree.depth())
    throw HeightOutOfRange("floor layer " + std::to_string(k1) +
                           " not in [0, " + std::to_string(tree.depth()) +
                           ")");
  if (family != nullptr) {
    if (!is_decomposition_closed(tree, *family))
      throw Error("family is not closed under branch decomposition");
    std::set<LeafSet, detail::LeafSetLess> members;
    for (const LeafSet& S : *family)
      members.insert(detail::canonical_set(S));
    for (const auto& [sigma, c] : f.coeffs)
      if (c != 0.0 && sigma.order() > 0 &&
          !members.count(detail::canonical_set(sigma.support())))
        throw BadSupport("index " + multi_index_to_string(sigma) +
                         " outside the supplied family");
  }
  const detail::ChainBasis cb = detail::chain_basis(M);
  const double mean_f =
      expectation(tree, M, to_vertex_polynomial(tree, M, f), cb.nu);
  if (std::abs(mean_f) > tol::kPointwise)
    throw NotCentered("E f = " + fmt17(mean_f));

  LayerDecomposition ld;
  ld.k1 = k1;
  std::map<MultiIndex, double> pool;
  for (const auto& [sigma, c] : f.coeffs)
    if (c != 0.0 && sigma.order() > 0) pool[sigma] = c;

  const auto branch_height = [&](const MultiIndex& sigma) {
    return tree.height(nearest_common_ancestor(tree, sigma.support()));
  };

  // Top-down sweep: peel off the centred part at every branch node above
  // the floor; subset terms re-enter at the same node inside decompose_pu,
  // lower terms re-enter the pool.
  for (int k = tree.depth(); k > k1; --k) {
    std::map<Word, LeafPolynomial, WordLess> groups;
    for (const auto& [sigma, c] : pool)
      if (c != 0.0 && branch_height(sigma) == k)
        groups[nearest_common_ancestor(tree, sigma.support())].add(sigma, c);
    for (const auto& [u, p_u] : groups) {
      for (const auto& kv : p_u.coeffs) pool.erase(kv.first);
      PuDecomposition dec = decompose_pu(tree, M, p_u);
      for (const auto& [sigma, c] : dec.p_less_u.coeffs) {
        pool[sigma] += c;
        if (pool[sigma] == 0.0) pool.erase(sigma);
      }
      ld.f_u[u] = std::move(dec.tilde_f_u);
      ld.psi_coeffs[u] = std::move(dec.psi_coeffs);
      // dec.c_u joins the global constant; tracked implicitly through the
      // centering below (the input is centred, so constants must cancel).
    }
  }

  // Floor layer: group what is left under the layer-k1 ancestors, project
  // each part onto its own vertex, canonicalize the projections, and swap
  // them in.  Centering each canonical projection keeps every part mean 0
  // while the swapped sum still matches the pooled remainder a.s.
  const std::vector<Word> floor = descendants_at_height(tree, Word{}, k1);
  LeafPolynomial h;
  std::map<Word, VertexPolynomial, WordLess> f_v;
  std::map<Word, Eigen::VectorXd, WordLess> g_v;
  for (const Word& v : floor) {
    LeafPolynomial part;
    for (const auto& [sigma, c] : pool)
      if (c != 0.0 && is_prefix(v, nearest_common_ancestor(tree, sigma.support())))
        part.add(sigma, c);
    VertexPolynomial poly = to_vertex_polynomial(tree, M, part);
    Eigen::VectorXd proj = Eigen::VectorXd::Zero(M.q());
    if (!poly.terms.empty()) {
      const VertexPolynomial cond =
          conditional_expectation_U(tree, M, poly, {v});
      for (const ProductTerm& t : cond.terms) {
        Eigen::VectorXd values = Eigen::VectorXd::Constant(M.q(), t.coeff);
        for (const auto& [node, factor] : t.factors) {
          if (node != v)
            throw Error("projection kept a factor at " +
                        word_to_string(node));
          values = values.cwiseProduct(factor);
        }
        proj += values;
      }
    }
    for (int j = 0; j < M.q(); ++j) {
      double a = 0.0;
      for (int s = 0; s < M.q(); ++s)
        a += cb.nu(s) * cb.site.phi[j](s) * proj(s);
      if (j == 0)
        h.add(MultiIndex{}, a);
      else if (a != 0.0)
        h.add(MultiIndex{{{v, j}}}, a);
    }
    f_v[v] = std::move(poly);
    g_v[v] = std::move(proj);
  }

  std::map<Word, Eigen::VectorXd, WordLess> h_v;
  if (!h.coeffs.empty()) {
    Degree1Canonical canon = degree1_canonicalize(tree, M, h);
    h_v = std::move(canon.parts);
  }
  for (const Word& v : floor) {
    VertexPolynomial part = f_v[v];
    Eigen::VectorXd patch = -g_v[v];
    const auto it = h_v.find(v);
    if (it != h_v.end()) patch += it->second;
    ProductTerm t;
    t.coeff = 1.0;
    t.factors[v] = std::move(patch);
    part.terms.push_back(std::move(t));
    // Centre exactly: the constructed part has mean 0 up to roundoff.
    const double m = expectation(tree, M, part, cb.nu);
    if (m != 0.0) {
      ProductTerm shift;
      shift.coeff = -m;
      part.terms.push_back(shift);
    }
    ld.f_u[v] = std::move(part);
  }

  for (int k = k1; k <= tree.depth(); ++k) {
    VertexPolynomial layer;
    for (const Word& u : descendants_at_height(tree, Word{}, k)) {
      const auto it = ld.f_u.find(u);
      if (it != ld.f_u.end()) layer = poly_sum(layer, it->second);
    }
    ld.f_k[k] = std::move(layer);
  }

  // Empirical two-sided comparison of E(sum of floor parts under w)^2
  // against the sum of squares, over every node w at height >= k1.
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  bool seen = false;
  for (const Word& w : tree.nodes()) {
    if (tree.height(w) < k1) continue;
    VertexPolynomial sum;
    double parts2 = 0.0;
    for (const Word& v : descendants_at_height(tree, w, k1)) {
      const auto it = ld.f_u.find(v);
      if (it == ld.f_u.end()) continue;
      sum = poly_sum(sum, it->second);
      parts2 +=
          expectation(tree, M, poly_product(it->second, it->second), cb.nu);
    }
    if (parts2 <= tol::kExact) continue;
    const double sum2 = expectation(tree, M, poly_product(sum, sum), cb.nu);
    lo = std::min(lo, sum2 / parts2);
    hi = std::max(hi, sum2 / parts2);
    seen = true;
  }
  ld.sandwich_lo = seen ? lo : 1.0;
  ld.sandwich_hi = seen ? hi : 1.0;
  return ld;
}

// ---------------------------------------------------------------------------
// Canonical degree-one representation.

namespace detail {

// A basis of the state space tagged with measurability levels: the value of
// a level-r vector at X_v is a.s. a function of the ancestor state r levels
// up, so coefficients may be averaged within blocks sharing that ancestor
// (block sums are preserved, hence the represented function is unchanged
// a.s.).  INT_MAX marks vectors measurable at every level.
struct AdaptedBasis {
  Eigen::MatrixXd B;
  std::vector<int> level;
};

inline AdaptedBasis adapted_basis_ergodic(const TransitionMatrix& M) {
  const PartitionChain chain = build_partition_chain(M);
  const WordSet words = build_word_set(chain);
  const XiBasis xi = build_xi_basis(M, chain, words);
  AdaptedBasis ab;
  ab.B.resize(M.q(), M.q());
  int col = 0;
  for (const Word& w : xi.words) {
    ab.B.col(col) = xi.xi.at(w);
    ab.level.push_back(w == xi.w0 ? INT_MAX : xi.r.at(w));
    ++col;
  }
  return ab;
}

// Level ladder for chains without ergodicity: Q_0 the discrete partition,
// Q_r the finest coarsening of Q_{r-1} in which every support of a row of
// M^r lies inside one part.  Parts of Q_r are a.s. determined r levels up,
// and the ladder stabilizes after at most q steps.
struct LevelLadder {
  std::vector<Partition> levels;

  int r_star() const { return static_cast<int>(levels.size()) - 1; }
};

inline LevelLadder build_level_ladder(const TransitionMatrix& M) {
  const int q = M.q();
  LevelLadder ladder;
  ladder.levels.push_back(Partition::discrete(q));
  Eigen::MatrixXd P = M.entries();
  while (true) {
    std::vector<StateSet> sets = ladder.levels.back().parts();
    for (int i = 0; i < q; ++i) {
      StateSet supp;
      for (int j = 0; j < q; ++j)
        if (P(i, j) > 0.0) supp.push_back(j);
      sets.push_back(std::move(supp));
    }
    Partition next = constrained_partition(q, sets);
    if (next == ladder.levels.back()) break;
    ladder.levels.push_back(std::move(next));
    if (static_cast<int>(ladder.levels.size()) > q + 1)
      throw Error("level ladder failed to stabilize");
    P = P * M.entries();
  }
  return ladder;
}

// True when membership in the part is preserved exactly by one chain step
// in both directions, so its indicator is a.s. constant along every path.
inline bool part_is_invariant(const TransitionMatrix& M, const StateSet& part) {
  std::vector<bool> in(M.q(), false);
  for (int s : part) in[s] = true;
  for (int i = 0; i < M.q(); ++i)
    for (int j = 0; j < M.q(); ++j)
      if (M(i, j) > 0.0 && in[i] != in[j]) return false;
  return true;
}

inline AdaptedBasis adapted_basis_ladder(const TransitionMatrix& M) {
  const int q = M.q();
  const LevelLadder ladder = build_level_ladder(M);
  const Partition& top = ladder.levels.back();
  AdaptedBasis ab;
  ab.B.resize(q, q);
  int col = 0;
  ab.B.col(col) = Eigen::VectorXd::Ones(q);
  ab.level.push_back(INT_MAX);
  ++col;
  const auto indicator = [&](const StateSet& part) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(q);
    for (int s : part) v(s) = 1.0;
    return v;
  };
  for (std::size_t p = 1; p < top.parts().size(); ++p) {
    // Skip the part holding the smallest state: 1 and the others span it.
    ab.B.col(col) = indicator(top.parts()[p]);
    ab.level.push_back(part_is_invariant(M, top.parts()[p]) ? INT_MAX
                                                            : ladder.r_star());
    ++col;
  }
  for (int r = ladder.r_star() - 1; r >= 0; --r) {
    const Partition& fine = ladder.levels[r];
    for (const StateSet& parent : ladder.levels[r + 1].parts()) {
      std::vector<const StateSet*> kids;
      for (const StateSet& child : fine.parts())
        if (std::includes(parent.begin(), parent.end(), child.begin(),
                          child.end()))
          kids.push_back(&child);
      for (std::size_t t = 1; t < kids.size(); ++t) {
        ab.B.col(col) =
            indicator(*kids[t]) -
            (static_cast<double>(kids[t]->size()) / parent.size()) *
                indicator(parent);
        ab.level.push_back(r);
        ++col;
      }
    }
  }
  if (col != q)
    throw Error("ladder basis has " + std::to_string(col) + " columns");
  return ab;
}

}  // namespace detail

// Expands a degree-one polynomial per vertex in a level-tagged state basis,
// averages each level's coefficients over blocks of vertices sharing the
// ancestor at that level, and reassembles per-vertex parts.  Averaging
// preserves block sums, so the summed function is unchanged a.s.; the part
// variances can only shrink toward the balanced representative.
inline Degree1Canonical degree1_canonicalize(const RootedTree& tree,
                                             const TransitionMatrix& M,
                                             const LeafPolynomial& f) {
  const int q = M.q();
  detail::validate_leaf_polynomial(tree, q, f, false);
  Degree1Canonical out;
  double constant = 0.0;
  std::map<Word, Eigen::VectorXd, WordLess> values;
  int depth = -1;
  const detail::ChainBasis cb = detail::chain_basis(M);
  for (const auto& [sigma, c] : f.coeffs) {
    if (c == 0.0) continue;
    if (sigma.order() == 0) {
      constant += c;
      continue;
    }
    if (sigma.order() > 1)
      throw NotDegreeOne("index " + multi_index_to_string(sigma) +
                         " touches " + std::to_string(sigma.order()) +
                         " vertices");
    const Word& v = sigma.entries.begin()->first;
    if (depth < 0) depth = static_cast<int>(v.size());
    if (static_cast<int>(v.size()) != depth)
      throw NotDegreeOne("vertices on mixed layers");
    const auto it = values.emplace(v, Eigen::VectorXd::Zero(q)).first;
    it->second += c * cb.site.phi[sigma.entries.begin()->second];
  }
  if (values.empty()) {
    if (constant != 0.0)
      throw NotDegreeOne("constant with no degree-one term to carry it");
    return out;
  }
  const double spread = constant / static_cast<double>(values.size());
  for (auto& [v, vec] : values)
    vec += Eigen::VectorXd::Constant(q, spread);

  const detail::AdaptedBasis ab = M.is_ergodic()
                                      ? detail::adapted_basis_ergodic(M)
                                      : detail::adapted_basis_ladder(M);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(ab.B);
  if (lu.rank() != q)
    throw Error("adapted basis spans rank " + std::to_string(lu.rank()));

  std::map<Word, Eigen::VectorXd, WordLess> coords;
  for (const auto& [v, vec] : values) coords[v] = lu.solve(vec);
  for (int j = 0; j < q; ++j) {
    const int steps = std::min<int>(ab.level[j], depth);
    std::map<Word, std::pair<double, int>, WordLess> blocks;
    for (const auto& [v, c] : coords) {
      auto& acc = blocks[tree.ancestor(v, steps)];
      acc.first += c(j);
      acc.second += 1;
    }
    for (auto& [v, c] : coords) {
      const auto& acc = blocks.at(tree.ancestor(v, steps));
      c(j) = acc.first / acc.second;
    }
  }
  for (const auto& [v, c] : coords) out.parts[v] = ab.B * c;

  out.var_f =
      variance(tree, M, to_vertex_polynomial(tree, M, f), cb.nu);
  for (const auto& [v, g] : out.parts) {
    ProductTerm t;
    t.coeff = 1.0;
    t.factors[v] = g;
    VertexPolynomial part;
    part.terms.push_back(std::move(t));
    out.sum_var_parts += variance(tree, M, part, cb.nu);
  }
  return out;
}

}  // namespace treecast
