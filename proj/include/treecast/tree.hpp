#pragma once
// Finite rooted trees addressed by integer words: layer and descendant
// queries, degree-domination certificates, and deterministic generators.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "treecast/common.hpp"

namespace treecast {

// A vertex is its address: the child indices (1-based) along the path from
// the root.  The root is the empty word.
using Word = std::vector<int>;

// Orders words by length, then lexicographically; the canonical iteration
// order everywhere in the library.
struct WordLess {
  bool operator()(const Word& a, const Word& b) const {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
  }
};

inline bool is_prefix(const Word& p, const Word& w) {
  return p.size() <= w.size() && std::equal(p.begin(), p.end(), w.begin());
}

inline std::string word_to_string(const Word& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) s += '.';
    s += std::to_string(w[i]);
  }
  return s;
}

inline Word word_from_string(const std::string& s) {
  Word w;
  if (s.empty()) return w;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t dot = s.find('.', pos);
    const std::string part =
        s.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw Error("malformed word string '" + s + "'");
    w.push_back(std::stoi(part));
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  return w;
}

// A finite rooted tree of fixed depth, leaf-aligned: every leaf sits on the
// bottom layer, so height h(u) = depth - |word(u)| and h(leaf) = 0.
class RootedTree {
 public:
  using CountMap = std::map<Word, int, WordLess>;

  RootedTree(int depth, CountMap child_counts)
      : depth_(depth), counts_(std::move(child_counts)) {
    if (depth_ < 0) throw Error("depth must be >= 0");
    if (!counts_.count(Word{})) throw Error("missing root");
    for (const auto& [word, count] : counts_) {
      const int layer = static_cast<int>(word.size());
      if (layer > depth_)
        throw Error("node " + word_to_string(word) + " below depth");
      if (count < 0)
        throw Error("negative child count at " + word_to_string(word));
      if (layer == depth_ && count != 0)
        throw Error("bottom-layer node " + word_to_string(word) +
                    " has children");
      if (layer < depth_ && count == 0)
        throw Error("node " + word_to_string(word) +
                    " dies above the bottom layer (leaves must have height 0)");
      if (!word.empty()) {
        Word parent(word.begin(), word.end() - 1);
        const auto it = counts_.find(parent);
        if (it == counts_.end() || word.back() < 1 || word.back() > it->second)
          throw Error("node " + word_to_string(word) +
                      " inconsistent with parent child count");
      }
    }
    for (const auto& [word, count] : counts_) {
      nodes_.push_back(word);
      for (int i = 1; i <= count; ++i) {
        Word child = word;
        child.push_back(i);
        if (!counts_.count(child))
          throw Error("child " + word_to_string(child) + " not listed");
      }
      if (static_cast<int>(word.size()) == depth_) leaves_.push_back(word);
    }
  }

  int depth() const { return depth_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  const std::vector<Word>& nodes() const { return nodes_; }
  const std::vector<Word>& leaves() const { return leaves_; }
  const CountMap& child_counts() const { return counts_; }

  bool contains(const Word& u) const { return counts_.count(u) != 0; }

  int child_count(const Word& u) const { return counts_.at(require(u)); }

  std::vector<Word> children(const Word& u) const {
    const int count = child_count(u);
    std::vector<Word> out;
    out.reserve(count);
    for (int i = 1; i <= count; ++i) {
      Word child = u;
      child.push_back(i);
      out.push_back(std::move(child));
    }
    return out;
  }

  Word parent(const Word& u) const {
    require(u);
    if (u.empty()) throw Error("root has no parent");
    return Word(u.begin(), u.end() - 1);
  }

  // The ancestor k levels above u.
  Word ancestor(const Word& u, int k) const {
    require(u);
    if (k < 0 || k > static_cast<int>(u.size()))
      throw HeightOutOfRange("ancestor " + std::to_string(k) + " above " +
                             word_to_string(u));
    return Word(u.begin(), u.end() - k);
  }

  int height(const Word& u) const {
    return depth_ - static_cast<int>(require(u).size());
  }

  // L_k(u): descendants of u exactly k levels below it, in word order.
  std::vector<Word> layer_below(const Word& u, int k) const {
    require(u);
    if (k < 0 || k > height(u))
      throw HeightOutOfRange("layer " + std::to_string(k) + " below " +
                             word_to_string(u) + " of height " +
                             std::to_string(height(u)));
    std::vector<Word> frontier{u};
    for (int step = 0; step < k; ++step) {
      std::vector<Word> next;
      for (const Word& w : frontier)
        for (int i = 1; i <= counts_.at(w); ++i) {
          Word child = w;
          child.push_back(i);
          next.push_back(std::move(child));
        }
      frontier = std::move(next);
    }
    return frontier;
  }

  // All nodes with |word| = j (the jth layer from the root).
  std::vector<Word> layer(int j) const {
    if (j < 0 || j > depth_) throw HeightOutOfRange("layer " + std::to_string(j));
    std::vector<Word> out;
    for (const Word& w : nodes_)
      if (static_cast<int>(w.size()) == j) out.push_back(w);
    return out;
  }

  // True when a is an ancestor of b or equal to it.
  bool ancestor_or_equal(const Word& a, const Word& b) const {
    require(a);
    require(b);
    return is_prefix(a, b);
  }

 private:
  const Word& require(const Word& u) const {
    if (!counts_.count(u))
      throw NodeNotInTree("no node " + word_to_string(u));
    return u;
  }

  int depth_;
  CountMap counts_;
  std::vector<Word> nodes_;
  std::vector<Word> leaves_;
};

inline constexpr int kMaxTreeNodes = 1000000;

// Complete d-ary tree of the given depth.
inline RootedTree make_dary(int d, int depth) {
  if (d < 1) throw Error("make_dary needs d >= 1");
  if (depth < 0) throw Error("make_dary needs depth >= 0");
  std::int64_t total = 1, layer_size = 1;
  for (int j = 0; j < depth; ++j) {
    layer_size *= d;
    total += layer_size;
    if (total > kMaxTreeNodes)
      throw TooLarge("d-ary tree exceeds " + std::to_string(kMaxTreeNodes) +
                     " nodes");
  }
  RootedTree::CountMap counts;
  std::vector<Word> frontier{Word{}};
  for (int j = 0; j <= depth; ++j) {
    std::vector<Word> next;
    for (const Word& w : frontier) {
      counts[w] = j < depth ? d : 0;
      for (int i = 1; j < depth && i <= d; ++i) {
        Word child = w;
        child.push_back(i);
        next.push_back(std::move(child));
      }
    }
    frontier = std::move(next);
  }
  return RootedTree(depth, std::move(counts));
}

// Poisson child counts are drawn by CDF inversion from one u01 word each and
// truncated at this declared cap.
inline constexpr int kGaltonWatsonCap = 32;

inline int poisson_capped(Rng& rng, double mean, int cap) {
  const double u = rng.u01();
  double p = std::exp(-mean), cdf = p;
  for (int k = 0; k < cap; ++k) {
    if (u < cdf) return k;
    p *= mean / (k + 1);
    cdf += p;
  }
  return cap;
}

// Galton-Watson tree: child counts Poisson(mean_degree) truncated at
// kGaltonWatsonCap, drawn in word order from Rng(seed).  Nodes without
// bottom-layer descendants are pruned and the surviving children of each
// node are renumbered 1..k in their original order, so leaves end up
// exactly on the bottom layer.
inline RootedTree sample_galton_watson(double mean_degree, int depth,
                                       std::uint32_t seed,
                                       int max_nodes = kMaxTreeNodes) {
  if (mean_degree < 0.0) throw Error("mean degree must be >= 0");
  if (depth < 0) throw Error("depth must be >= 0");
  Rng rng(seed);
  std::map<Word, int, WordLess> raw;
  std::vector<Word> frontier{Word{}};
  std::int64_t total = 1;
  for (int j = 0; j <= depth; ++j) {
    std::vector<Word> next;
    for (const Word& w : frontier) {
      const int count =
          j < depth ? poisson_capped(rng, mean_degree, kGaltonWatsonCap) : 0;
      raw[w] = count;
      total += count;
      if (total > max_nodes)
        throw TooLarge("Galton-Watson sample exceeds " +
                       std::to_string(max_nodes) + " nodes");
      for (int i = 1; i <= count; ++i) {
        Word child = w;
        child.push_back(i);
        next.push_back(std::move(child));
      }
    }
    frontier = std::move(next);
  }

  // Survivors: nodes with a descendant on the bottom layer.
  std::map<Word, bool, WordLess> alive;
  for (auto it = raw.rbegin(); it != raw.rend(); ++it) {
    const Word& w = it->first;
    if (static_cast<int>(w.size()) == depth) {
      alive[w] = true;
      continue;
    }
    bool any = false;
    for (int i = 1; i <= it->second; ++i) {
      Word child = w;
      child.push_back(i);
      if (alive.count(child) && alive.at(child)) any = true;
    }
    alive[w] = any;
  }
  if (!alive.at(Word{}))
    throw Extinct("no descendants on layer " + std::to_string(depth));

  // Renumber surviving children consecutively, top-down.
  std::map<Word, Word, WordLess> renamed;
  renamed[Word{}] = Word{};
  RootedTree::CountMap counts;
  for (const auto& [w, ok] : alive) {
    if (!ok || !renamed.count(w)) continue;
    const Word& nw = renamed.at(w);
    int kept = 0;
    for (int i = 1; i <= raw.at(w); ++i) {
      Word child = w;
      child.push_back(i);
      if (alive.count(child) && alive.at(child)) {
        Word nchild = nw;
        nchild.push_back(++kept);
        renamed[child] = std::move(nchild);
      }
    }
    counts[nw] = kept;
  }
  return RootedTree(depth, std::move(counts));
}

// Deepest node whose word prefixes every element of S.
inline Word nearest_common_ancestor(const RootedTree& tree,
                                    const std::vector<Word>& S) {
  if (S.empty()) throw EmptySet("nearest common ancestor of nothing");
  for (const Word& s : S)
    if (!tree.contains(s)) throw NodeNotInTree("no node " + word_to_string(s));
  Word prefix = S.front();
  for (const Word& s : S) {
    std::size_t len = 0;
    while (len < prefix.size() && len < s.size() && prefix[len] == s[len])
      ++len;
    prefix.resize(len);
  }
  return prefix;
}

// D_k(u): descendants of u at height exactly k; equals L_{h(u)-k}(u).
inline std::vector<Word> descendants_at_height(const RootedTree& tree,
                                               const Word& u, int k) {
  const int h = tree.height(u);
  if (k < 0 || k > h)
    throw HeightOutOfRange("height " + std::to_string(k) + " not in [0, " +
                           std::to_string(h) + "]");
  return tree.layer_below(u, h - k);
}

// Minimal R with |L_k(u)| <= R d^k for every node u and 0 <= k <= h(u).
inline double check_domination(const RootedTree& tree, double d) {
  if (d < 1.0) throw Error("domination base must be >= 1");
  // counts_below[u][k] = |L_k(u)|, filled bottom-up.
  std::map<Word, std::vector<std::int64_t>, WordLess> below;
  double r_star = 0.0;
  const auto& nodes = tree.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const Word& u = *it;
    std::vector<std::int64_t> cnt{1};
    for (const Word& c : tree.children(u)) {
      const auto& sub = below.at(c);
      if (cnt.size() < sub.size() + 1) cnt.resize(sub.size() + 1, 0);
      for (std::size_t k = 0; k < sub.size(); ++k) cnt[k + 1] += sub[k];
    }
    double scale = 1.0;
    for (std::size_t k = 0; k < cnt.size(); ++k, scale *= d)
      r_star = std::max(r_star, static_cast<double>(cnt[k]) / scale);
    below[u] = std::move(cnt);
  }
  return r_star;
}

// Certificate that the tree's growth is dominated by R d^k.
struct DominationCert {
  double d = 1.0;
  double R = 1.0;
};

inline DominationCert certify_domination(const RootedTree& tree, double d) {
  return DominationCert{d, check_domination(tree, d)};
}

}  // namespace treecast
