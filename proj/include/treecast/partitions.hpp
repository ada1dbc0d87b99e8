#pragma once
// Partition machinery for a finite-state chain: row supports, finest
// constrained partitions, the two-index coarsening grid, the word
// identification of its parts, and the induced indicator basis whose
// conditional variances are controlled level by level.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "treecast/common.hpp"
#include "treecast/engine.hpp"
#include "treecast/markov.hpp"
#include "treecast/tree.hpp"

namespace treecast {

// Sorted, duplicate-free set of states in [0, q).
using StateSet = std::vector<int>;

namespace detail {

inline bool subset_of(const StateSet& a, const StateSet& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

inline bool intersects(const StateSet& a, const StateSet& b) {
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) return true;
    if (a[i] < b[j]) ++i; else ++j;
  }
  return false;
}

inline std::string set_to_string(const StateSet& s) {
  std::string out = "{";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "}";
}

inline Eigen::VectorXd indicator(int q, const StateSet& s) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(q);
  for (int x : s) v(x) = 1.0;
  return v;
}

}  // namespace detail

// A partition of the state space [0, q): disjoint non-empty parts covering
// every state.  Stored canonically (each part sorted, parts ordered by their
// minimal element), so equality of partitions is plain equality of data.
class Partition {
 public:
  Partition(int q, std::vector<StateSet> parts)
      : q_(q), parts_(std::move(parts)) {
    if (q_ < 1) throw Error("partition needs q >= 1");
    for (auto& p : parts_) {
      if (p.empty()) throw Error("partition with an empty part");
      std::sort(p.begin(), p.end());
      for (std::size_t t = 0; t < p.size(); ++t) {
        if (p[t] < 0 || p[t] >= q_)
          throw Error("state " + std::to_string(p[t]) + " outside [0," +
                      std::to_string(q_) + ")");
        if (t > 0 && p[t] == p[t - 1])
          throw Error("duplicate state " + std::to_string(p[t]) +
                      " inside a part");
      }
    }
    std::sort(parts_.begin(), parts_.end());
    index_of_.assign(q_, -1);
    for (std::size_t k = 0; k < parts_.size(); ++k)
      for (int s : parts_[k]) {
        if (index_of_[s] >= 0)
          throw Error("state " + std::to_string(s) + " appears in two parts");
        index_of_[s] = static_cast<int>(k);
      }
    for (int s = 0; s < q_; ++s)
      if (index_of_[s] < 0)
        throw Error("state " + std::to_string(s) + " not covered");
  }

  static Partition discrete(int q) {
    std::vector<StateSet> parts;
    for (int s = 0; s < q; ++s) parts.push_back({s});
    return Partition(q, std::move(parts));
  }

  static Partition single_block(int q) {
    StateSet all(q);
    for (int s = 0; s < q; ++s) all[s] = s;
    return Partition(q, {all});
  }

  int q() const { return q_; }
  int size() const { return static_cast<int>(parts_.size()); }
  const std::vector<StateSet>& parts() const { return parts_; }
  bool is_trivial() const { return parts_.size() == 1; }
  bool is_discrete() const { return static_cast<int>(parts_.size()) == q_; }

  int part_index_of(int state) const {
    if (state < 0 || state >= q_)
      throw Error("state " + std::to_string(state) + " outside [0," +
                  std::to_string(q_) + ")");
    return index_of_[state];
  }

  const StateSet& part_of(int state) const {
    return parts_[part_index_of(state)];
  }

  bool operator==(const Partition& o) const {
    return q_ == o.q_ && parts_ == o.parts_;
  }
  bool operator!=(const Partition& o) const { return !(*this == o); }

 private:
  int q_;
  std::vector<StateSet> parts_;
  std::vector<int> index_of_;
};

// True when every part of `fine` is contained in some part of `coarse`.
inline bool is_refinement_of(const Partition& fine, const Partition& coarse) {
  if (fine.q() != coarse.q())
    throw Error("refinement comparison across different state spaces");
  for (const StateSet& p : fine.parts())
    if (!detail::subset_of(p, coarse.part_of(p.front()))) return false;
  return true;
}

// S_i = { j : M(i, j) > 0 }, compared exactly: entries are inputs, supports
// are structural, so no epsilon thresholding is applied.
inline std::vector<StateSet> row_supports(const TransitionMatrix& M) {
  std::vector<StateSet> supports(M.q());
  for (int i = 0; i < M.q(); ++i)
    for (int j = 0; j < M.q(); ++j)
      if (M(i, j) > 0.0) supports[i].push_back(j);
  return supports;
}

// Finest partition of [0, q) in which every input subset lies inside a
// single part: connected components of the overlap graph on the subsets,
// with untouched states left as singletons.
inline Partition constrained_partition(int q,
                                       const std::vector<StateSet>& collection) {
  if (q < 1) throw Error("constrained_partition needs q >= 1");
  std::vector<int> root(q);
  for (int s = 0; s < q; ++s) root[s] = s;
  std::function<int(int)> find = [&](int x) {
    while (root[x] != x) x = root[x] = root[root[x]];
    return x;
  };
  for (const StateSet& raw : collection) {
    if (raw.empty())
      throw EmptyInputSet("constrained_partition given an empty subset");
    for (int s : raw)
      if (s < 0 || s >= q)
        throw Error("state " + std::to_string(s) + " outside [0," +
                    std::to_string(q) + ")");
    for (std::size_t t = 1; t < raw.size(); ++t)
      root[find(raw[0])] = find(raw[t]);
  }
  std::map<int, StateSet> groups;
  for (int s = 0; s < q; ++s) groups[find(s)].push_back(s);
  std::vector<StateSet> parts;
  for (auto& kv : groups) parts.push_back(std::move(kv.second));
  return Partition(q, std::move(parts));
}

// Image of a partition under the chain: each part P maps to
// Q = { i : S_i is contained in P }, and M * 1_P = 1_Q is verified
// numerically (exact zeros off the image, row-sum tolerance on it).
inline Partition forward_partition(const TransitionMatrix& M,
                                   const Partition& P) {
  if (M.q() != P.q()) throw Error("forward_partition: size mismatch");
  const int q = M.q();
  const auto supports = row_supports(M);
  std::vector<StateSet> images;
  for (const StateSet& part : P.parts()) {
    StateSet image;
    for (int i = 0; i < q; ++i) {
      if (detail::subset_of(supports[i], part)) {
        image.push_back(i);
      } else if (detail::intersects(supports[i], part)) {
        throw NotCompatible("support " + detail::set_to_string(supports[i]) +
                            " of state " + std::to_string(i) +
                            " straddles part " + detail::set_to_string(part));
      }
    }
    if (image.empty())
      throw NotIrreducible("no state leads into part " +
                           detail::set_to_string(part));
    const Eigen::VectorXd v = M.entries() * detail::indicator(q, part);
    for (int i = 0; i < q; ++i) {
      const bool hit = std::binary_search(image.begin(), image.end(), i);
      if (hit ? std::abs(v(i) - 1.0) > tol::kRowSum : v(i) != 0.0)
        throw Error("image indicator check failed at state " +
                    std::to_string(i) + ": " + fmt17(v(i)));
    }
    images.push_back(std::move(image));
  }
  return Partition(q, std::move(images));
}

// The two-index family of partitions: level r counts coarsening rounds,
// step s counts forward images within a round.  Level r0 is the first whose
// backed-off partition (s = 0) is the single block; one extra level is kept
// to witness stabilisation.
struct PartitionChain {
  int q = 0;
  int r0 = 0;
  std::map<std::pair<int, int>, Partition> grid;  // key (r, s), 0<=s<=r<=r0+1

  const Partition& at(int r, int s) const {
    auto it = grid.find({r, s});
    if (it == grid.end())
      throw Error("no grid entry (" + std::to_string(r) + "," +
                  std::to_string(s) + ")");
    return it->second;
  }
};

namespace detail {

// Unique preimage of `next` under the part bijection of the chain: each part
// of `next` must be tiled by base images, and pulls back to the union of the
// matching base parts.
inline Partition backward_partition(int q,
                                    const std::vector<StateSet>& base_parts,
                                    const std::vector<StateSet>& base_images,
                                    const Partition& next) {
  std::vector<StateSet> parts;
  for (const StateSet& target : next.parts()) {
    StateSet pre;
    std::size_t covered = 0;
    for (std::size_t k = 0; k < base_parts.size(); ++k)
      if (subset_of(base_images[k], target)) {
        pre.insert(pre.end(), base_parts[k].begin(), base_parts[k].end());
        covered += base_images[k].size();
      }
    if (covered != target.size())
      throw NotCompatible("part " + set_to_string(target) +
                          " is not a union of base images");
    std::sort(pre.begin(), pre.end());
    parts.push_back(std::move(pre));
  }
  return Partition(q, std::move(parts));
}

}  // namespace detail

// Builds the full grid by rounds: each new level starts from the finest
// partition compatible with the previous diagonal and all row supports,
// moves forward by the chain, and backs off to step 0 through the unique
// preimages.  Ergodic irreducible chains stabilise to the single block; the
// 4q cap turns a violated precondition into a loud failure.
inline PartitionChain build_partition_chain(const TransitionMatrix& M) {
  const int q = M.q();
  const auto supports = row_supports(M);
  PartitionChain chain;
  chain.q = q;
  chain.grid.emplace(std::make_pair(0, 0), Partition::discrete(q));

  const auto sc = [&](const Partition& P) {
    std::vector<StateSet> collection = P.parts();
    collection.insert(collection.end(), supports.begin(), supports.end());
    return constrained_partition(q, collection);
  };

  const int cap = 4 * q;
  std::vector<StateSet> base_parts, base_images;
  int r0 = -1;
  for (int r = 1; r <= cap + 1; ++r) {
    Partition start = sc(chain.at(r - 1, r - 1));     // entry (r, r-1)
    Partition diag = forward_partition(M, start);     // entry (r, r)
    if (r == 1) {
      base_parts = start.parts();
      for (const StateSet& part : base_parts) {
        StateSet image;
        for (int i = 0; i < q; ++i)
          if (detail::subset_of(supports[i], part)) image.push_back(i);
        base_images.push_back(std::move(image));
      }
    }
    chain.grid.emplace(std::make_pair(r, r - 1), std::move(start));
    chain.grid.emplace(std::make_pair(r, r), std::move(diag));
    for (int s = r - 2; s >= 0; --s)
      chain.grid.emplace(
          std::make_pair(r, s),
          detail::backward_partition(q, base_parts, base_images,
                                     chain.at(r, s + 1)));
    for (int s = 0; s < r; ++s) {
      if (!is_refinement_of(chain.at(r - 1, s), chain.at(r, s)))
        throw Error("level " + std::to_string(r) +
                    " failed to coarsen step " + std::to_string(s));
      if (!is_refinement_of(chain.at(1, 0), chain.at(r, s)))
        throw Error("grid entry not a union of base parts at (" +
                    std::to_string(r) + "," + std::to_string(s) + ")");
      if (forward_partition(M, chain.at(r, s)) != chain.at(r, s + 1))
        throw Error("forward image mismatch at (" + std::to_string(r) + "," +
                    std::to_string(s) + ")");
    }
    if (r0 < 0 && chain.at(r, 0).is_trivial()) r0 = r;
    if (r0 >= 0 && r == r0 + 1) break;
    if (r0 < 0 && r == cap)
      throw NonTermination("no single-block level within the safety cap " +
                           std::to_string(cap) +
                           "; chain is not ergodic and irreducible");
  }
  chain.r0 = r0;
  return chain;
}

// Words naming the grid parts.  The single block at level r0 is the word
// (1); inside a parent part the child parts are sorted by minimal element
// and receive letters 0..k-1, so letter 0 extends the part holding the
// parent's minimal element.  A word at tree depth t names a part of the
// backed-off partition at level r0 - t, i.e. r(w) = r0 + 1 - len(w).
struct WordSet {
  int r0 = 0;
  std::vector<Word> all_words;    // sorted by (length, lexicographic)
  std::vector<Word> basis_words;  // the q words ending in a positive letter
  std::map<Word, StateSet, WordLess> part_of;

  int r(const Word& w) const { return r0 + 1 - static_cast<int>(w.size()); }
};

inline WordSet build_word_set(const PartitionChain& chain) {
  WordSet ws;
  ws.r0 = chain.r0;
  const int q = chain.q;
  StateSet all(q);
  for (int s = 0; s < q; ++s) all[s] = s;
  const Word root{1};
  ws.part_of[root] = all;

  std::map<Word, StateSet, WordLess> level;
  level[root] = all;
  for (int s = chain.r0 - 1; s >= 0; --s) {
    const Partition& fine = chain.at(s, 0);
    std::map<Word, StateSet, WordLess> next;
    std::size_t assigned = 0;
    for (const auto& [w, parent_part] : level) {
      std::vector<StateSet> kids;
      for (const StateSet& p : fine.parts())
        if (detail::subset_of(p, parent_part)) kids.push_back(p);
      for (std::size_t i = 0; i < kids.size(); ++i) {
        Word cw = w;
        cw.push_back(static_cast<int>(i));
        ws.part_of[cw] = kids[i];
        next[cw] = kids[i];
        ++assigned;
      }
    }
    if (assigned != fine.parts().size())
      throw Error("word identification lost parts at level " +
                  std::to_string(s));
    level = std::move(next);
  }
  for (const auto& kv : ws.part_of) {
    ws.all_words.push_back(kv.first);
    if (kv.first.back() > 0) ws.basis_words.push_back(kv.first);
  }
  if (static_cast<int>(ws.basis_words.size()) != q)
    throw Error("expected " + std::to_string(q) + " basis words, got " +
                std::to_string(ws.basis_words.size()));
  return ws;
}

// The indicator basis attached to the basis words: the root word keeps the
// constant function 1, every other word w keeps the centred indicator of its
// part.  Spans all functions on the state space.
struct XiBasis {
  int q = 0;
  int r0 = 0;
  Word w0;                                      // unique word at level r0
  std::vector<Word> words;                      // the q basis words
  std::map<Word, Eigen::VectorXd, WordLess> xi;
  std::map<Word, int, WordLess> r;
};

inline XiBasis build_xi_basis(const TransitionMatrix& M,
                              const PartitionChain& chain,
                              const WordSet& words) {
  if (M.q() != chain.q || words.r0 != chain.r0 ||
      static_cast<int>(words.basis_words.size()) != M.q())
    throw Error("build_xi_basis: inconsistent inputs");
  const int q = M.q();
  const Eigen::VectorXd pi = stationary_distribution(M);

  XiBasis basis;
  basis.q = q;
  basis.r0 = chain.r0;
  basis.w0 = Word{1};
  for (const Word& w : words.basis_words) {
    const StateSet& part = words.part_of.at(w);
    Eigen::VectorXd v;
    if (w == basis.w0) {
      v = Eigen::VectorXd::Ones(q);
    } else {
      double mass = 0.0;
      for (int s : part) mass += pi(s);
      v = detail::indicator(q, part) - mass * Eigen::VectorXd::Ones(q);
      if (std::abs(pi.dot(v)) > tol::kExact)
        throw Error("basis vector for " + word_to_string(w) +
                    " is not centred: " + fmt17(pi.dot(v)));
    }
    basis.words.push_back(w);
    basis.xi[w] = std::move(v);
    basis.r[w] = words.r(w);
  }
  Eigen::MatrixXd A(q, q);
  for (int k = 0; k < q; ++k) A.col(k) = basis.xi.at(basis.words[k]);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  if (lu.rank() != q)
    throw Error("basis vectors span rank " + std::to_string(lu.rank()) +
                " < " + std::to_string(q));
  return basis;
}

// Empirical certificate for the basis: measurability of each vector at its
// own level, plus the three variance controls, reported as the smallest
// constants that make the inequalities hold over deterministic random
// coefficient draws (floored at 1).
struct CVBasisReport {
  int draws = 0;
  bool max_r_unique = true;
  // sup over basis words of E Var[xi_w(X_u) | X at the word's own level].
  double max_measurability_defect = 0.0;
  // Var[sum c_w xi_w(X_u)] <= C * max_{w != w0} c_w^2.
  double c_var_upper = 1.0;
  // two-level conditional variance of one level's combination
  //   >= (1/C) * max c_w^2.
  double c_level_lower = 1.0;
  // two-level conditional variance of all strictly lower levels
  //   <= C * max c_w^2.
  double c_below_upper = 1.0;

  double c_overall() const {
    return std::max({1.0, c_var_upper, c_level_lower, c_below_upper});
  }
};

// Verifies the basis on a path tree deep enough to walk r0 generations up:
// vector xi_w(X_u) must be a function of the ancestor state r(w) levels
// above u (defect within 1e-10, else MeasurabilityViolation), and the
// variance comparisons hold with finite constants, estimated from `draws`
// coefficient draws per level.
inline CVBasisReport check_cvbasis_properties(const XiBasis& basis,
                                              const TransitionMatrix& M,
                                              const RootedTree& path,
                                              int draws = 24,
                                              std::uint32_t seed = 61207) {
  if (basis.q != M.q()) throw Error("check_cvbasis_properties: size mismatch");
  if (draws < 1) throw Error("need at least one draw");
  const int needed = std::max(1, basis.r0);
  if (path.depth() < needed)
    throw TooSmall("path of depth >= " + std::to_string(needed) +
                   " required, got " + std::to_string(path.depth()));
  const Word u(static_cast<std::size_t>(path.depth()), 1);
  if (!path.contains(u))
    throw Error("probe tree has no spine node at depth " +
                std::to_string(path.depth()));

  const auto point = [&](const Eigen::VectorXd& g) {
    VertexPolynomial f;
    ProductTerm t;
    t.coeff = 1.0;
    t.factors[u] = g;
    f.terms.push_back(std::move(t));
    return f;
  };
  const auto mean_square = [&](const VertexPolynomial& f) {
    return expectation(path, M, poly_product(f, f));
  };
  // E Var[ E[g(X_u) | X_v] | X_parent(v) ] with v the ancestor rp above u.
  const auto two_level = [&](const Eigen::VectorXd& g, int rp) {
    const Word v = path.ancestor(u, rp);
    const Word pv = path.parent(v);
    const VertexPolynomial h = conditional_expectation_U(path, M, point(g), {v});
    const VertexPolynomial k = conditional_expectation_U(path, M, h, {pv});
    return mean_square(h) - mean_square(k);
  };

  CVBasisReport rep;
  rep.draws = draws;

  int top_count = 0;
  for (const auto& [w, rw] : basis.r)
    if (rw == basis.r0) ++top_count;
  rep.max_r_unique = (top_count == 1);

  for (const Word& w : basis.words) {
    if (w == basis.w0) continue;
    const int rw = basis.r.at(w);
    const VertexPolynomial f = point(basis.xi.at(w));
    const Word v = path.ancestor(u, rw);
    const VertexPolynomial h = conditional_expectation_U(path, M, f, {v});
    const double defect = std::abs(mean_square(f) - mean_square(h));
    rep.max_measurability_defect =
        std::max(rep.max_measurability_defect, defect);
  }
  if (rep.max_measurability_defect > tol::kPointwise)
    throw MeasurabilityViolation(
        "a basis vector varies below its own level: defect " +
        fmt17(rep.max_measurability_defect));

  std::vector<std::vector<Word>> at_level(basis.r0 + 1);
  for (const Word& w : basis.words) at_level[basis.r.at(w)].push_back(w);

  Rng rng(seed);
  const double inf = std::numeric_limits<double>::infinity();
  for (int t = 0; t < draws; ++t) {
    // Full combination against the largest non-constant coefficient.
    Eigen::VectorXd g = Eigen::VectorXd::Zero(basis.q);
    double max_sq = 0.0;
    for (const Word& w : basis.words) {
      const double c = rng.uniform(-1.0, 1.0);
      g += c * basis.xi.at(w);
      if (w != basis.w0) max_sq = std::max(max_sq, c * c);
    }
    if (max_sq > 0.0) {
      const double var_g = variance(path, M, point(g));
      rep.c_var_upper = std::max(rep.c_var_upper, var_g / max_sq);
    }

    for (int rp = 0; rp < basis.r0; ++rp) {
      if (!at_level[rp].empty()) {
        Eigen::VectorXd gl = Eigen::VectorXd::Zero(basis.q);
        double msq = 0.0;
        for (const Word& w : at_level[rp]) {
          const double c = rng.uniform(-1.0, 1.0);
          gl += c * basis.xi.at(w);
          msq = std::max(msq, c * c);
        }
        if (msq > 0.0) {
          const double qty = two_level(gl, rp);
          rep.c_level_lower =
              qty > 0.0 ? std::max(rep.c_level_lower, msq / qty) : inf;
        }
      }
      std::vector<Word> below;
      for (int rr = 0; rr < rp; ++rr)
        below.insert(below.end(), at_level[rr].begin(), at_level[rr].end());
      if (!below.empty()) {
        Eigen::VectorXd gb = Eigen::VectorXd::Zero(basis.q);
        double msq = 0.0;
        for (const Word& w : below) {
          const double c = rng.uniform(-1.0, 1.0);
          gb += c * basis.xi.at(w);
          msq = std::max(msq, c * c);
        }
        if (msq > 0.0) {
          const double qty = two_level(gb, rp);
          rep.c_below_upper = std::max(rep.c_below_upper, qty / msq);
        }
      }
    }
  }
  return rep;
}

}  // namespace treecast
