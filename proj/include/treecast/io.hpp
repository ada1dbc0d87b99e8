#pragma once
// JSON round-trips for chains, trees, partitions, and polynomials, plus the
// compact text specs ("sym2:0.6", "dary:2x3", "random:3,7") accepted by the
// command-line driver.  Rendering is deterministic: object keys are sorted,
// floating-point values carry 17 significant digits, and non-finite values
// map to null, so identical inputs produce byte-identical artifacts.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "treecast/markov.hpp"
#include "treecast/partitions.hpp"
#include "treecast/polyspace.hpp"
#include "treecast/tree.hpp"

namespace treecast {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Deterministic rendering.

namespace detail {

inline void render_json_into(const Json& j, std::string& out, int indent,
                             int level) {
  const std::string pad(static_cast<std::size_t>(indent) * level, ' ');
  const std::string pad_in(static_cast<std::size_t>(indent) * (level + 1),
                           ' ');
  switch (j.type()) {
    case Json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ",\n";
        first = false;
        out += pad_in + Json(it.key()).dump() + ": ";
        render_json_into(it.value(), out, indent, level + 1);
      }
      out += "\n" + pad + "}";
      return;
    }
    case Json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out += "[\n";
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ",\n";
        out += pad_in;
        render_json_into(j[i], out, indent, level + 1);
      }
      out += "\n" + pad + "]";
      return;
    }
    case Json::value_t::number_float: {
      const double x = j.get<double>();
      out += std::isfinite(x) ? fmt17(x) : std::string("null");
      return;
    }
    default:
      out += j.dump();
      return;
  }
}

}  // namespace detail

inline std::string render_json(const Json& j, int indent = 2) {
  std::string out;
  detail::render_json_into(j, out, indent, 0);
  out += '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Transition matrices: {"q": int, "rows": [[...], ...]}.

inline Json matrix_to_json(const TransitionMatrix& M) {
  Json rows = Json::array();
  for (int i = 0; i < M.q(); ++i) {
    Json row = Json::array();
    for (int j = 0; j < M.q(); ++j) row.push_back(M.entries()(i, j));
    rows.push_back(std::move(row));
  }
  return Json{{"q", M.q()}, {"rows", std::move(rows)}};
}

inline TransitionMatrix matrix_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("q") || !j.contains("rows"))
    throw Error("matrix JSON needs fields 'q' and 'rows'");
  const int q = j.at("q").get<int>();
  const Json& rows = j.at("rows");
  if (q < 1 || !rows.is_array() || static_cast<int>(rows.size()) != q)
    throw Error("matrix JSON: 'rows' must hold q arrays of length q");
  Eigen::MatrixXd m(q, q);
  for (int i = 0; i < q; ++i) {
    const Json& row = rows.at(i);
    if (!row.is_array() || static_cast<int>(row.size()) != q)
      throw Error("matrix JSON: row " + std::to_string(i) + " has wrong size");
    for (int k = 0; k < q; ++k) m(i, k) = row.at(k).get<double>();
  }
  return TransitionMatrix(m);
}

// ---------------------------------------------------------------------------
// Trees: {"depth": int, "children_counts": {"": 2, "1": 2, ...}} with
// dot-joined integer words; the root is the empty string.

inline Json tree_to_json(const RootedTree& tree) {
  Json counts = Json::object();
  for (const auto& [word, count] : tree.child_counts())
    counts[word_to_string(word)] = count;
  return Json{{"depth", tree.depth()}, {"children_counts", std::move(counts)}};
}

inline RootedTree tree_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("depth") || !j.contains("children_counts"))
    throw Error("tree JSON needs fields 'depth' and 'children_counts'");
  RootedTree::CountMap counts;
  for (const auto& [key, value] : j.at("children_counts").items())
    counts[word_from_string(key)] = value.get<int>();
  return RootedTree(j.at("depth").get<int>(), std::move(counts));
}

// ---------------------------------------------------------------------------
// Words and leaf sets: words as integer arrays.

inline Json word_to_json(const Word& w) {
  Json a = Json::array();
  for (int letter : w) a.push_back(letter);
  return a;
}

inline Word word_from_json(const Json& j) {
  if (!j.is_array()) throw Error("word JSON must be an integer array");
  Word w;
  for (const Json& letter : j) w.push_back(letter.get<int>());
  return w;
}

inline Json leaf_set_to_json(const LeafSet& S) {
  Json a = Json::array();
  for (const Word& w : S) a.push_back(word_to_json(w));
  return a;
}

inline LeafSet leaf_set_from_json(const Json& j) {
  if (!j.is_array()) throw Error("leaf set JSON must be an array of words");
  LeafSet S;
  for (const Json& w : j) S.push_back(word_from_json(w));
  return S;
}

inline Json family_to_json(const SetFamily& family) {
  Json a = Json::array();
  for (const LeafSet& S : family) a.push_back(leaf_set_to_json(S));
  return a;
}

inline SetFamily family_from_json(const Json& j) {
  if (!j.is_array()) throw Error("family JSON must be an array of leaf sets");
  SetFamily family;
  for (const Json& S : j) family.push_back(leaf_set_from_json(S));
  return family;
}

// ---------------------------------------------------------------------------
// Partitions: parts as sorted integer arrays.

inline Json partition_to_json(const Partition& P) {
  Json parts = Json::array();
  for (const StateSet& part : P.parts()) {
    Json a = Json::array();
    for (int s : part) a.push_back(s);
    parts.push_back(std::move(a));
  }
  return parts;
}

inline Partition partition_from_json(int q, const Json& j) {
  if (!j.is_array()) throw Error("partition JSON must be an array of parts");
  std::vector<StateSet> parts;
  for (const Json& part : j) {
    if (!part.is_array()) throw Error("partition part must be an array");
    StateSet s;
    for (const Json& x : part) s.push_back(x.get<int>());
    parts.push_back(std::move(s));
  }
  return Partition(q, std::move(parts));
}

// ---------------------------------------------------------------------------
// Leaf polynomials: {"coeffs":[{"sigma":{"1.1":1,...},"c":0.5},...]}.

inline Json leaf_polynomial_to_json(const LeafPolynomial& f) {
  Json coeffs = Json::array();
  for (const auto& [sigma, c] : f.coeffs) {
    Json entry = Json::object();
    Json s = Json::object();
    for (const auto& [w, idx] : sigma.entries) s[word_to_string(w)] = idx;
    entry["sigma"] = std::move(s);
    entry["c"] = c;
    coeffs.push_back(std::move(entry));
  }
  return Json{{"coeffs", std::move(coeffs)}};
}

inline LeafPolynomial leaf_polynomial_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("coeffs"))
    throw Error("polynomial JSON needs field 'coeffs'");
  LeafPolynomial f;
  for (const Json& entry : j.at("coeffs")) {
    if (!entry.is_object() || !entry.contains("sigma") || !entry.contains("c"))
      throw Error("coefficient entry needs fields 'sigma' and 'c'");
    std::map<Word, int, WordLess> sigma;
    for (const auto& [key, value] : entry.at("sigma").items())
      sigma[word_from_string(key)] = value.get<int>();
    f.add(MultiIndex(std::move(sigma)), entry.at("c").get<double>());
  }
  return f;
}

// ---------------------------------------------------------------------------
// Vertex polynomials: {"terms":[{"coeff":x,"factors":{"1.1":[...],...}}]}.

inline Json vertex_polynomial_to_json(const VertexPolynomial& p) {
  Json terms = Json::array();
  for (const ProductTerm& t : p.terms) {
    Json factors = Json::object();
    for (const auto& [w, vec] : t.factors) {
      Json a = Json::array();
      for (int i = 0; i < vec.size(); ++i) a.push_back(vec(i));
      factors[word_to_string(w)] = std::move(a);
    }
    terms.push_back(Json{{"coeff", t.coeff}, {"factors", std::move(factors)}});
  }
  return Json{{"terms", std::move(terms)}};
}

inline VertexPolynomial vertex_polynomial_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("terms"))
    throw Error("polynomial JSON needs field 'terms'");
  VertexPolynomial p;
  for (const Json& entry : j.at("terms")) {
    if (!entry.is_object() || !entry.contains("coeff"))
      throw Error("term entry needs field 'coeff'");
    ProductTerm t;
    t.coeff = entry.at("coeff").get<double>();
    if (entry.contains("factors"))
      for (const auto& [key, value] : entry.at("factors").items()) {
        Eigen::VectorXd vec(value.size());
        for (std::size_t i = 0; i < value.size(); ++i)
          vec(static_cast<int>(i)) = value.at(i).get<double>();
        t.factors[word_from_string(key)] = std::move(vec);
      }
    p.terms.push_back(std::move(t));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Observations: {"1.1": 0, "1.2": 1, ...}.

inline Assignment assignment_from_json(const Json& j) {
  if (!j.is_object())
    throw Error("observation JSON must map word strings to states");
  Assignment a;
  for (const auto& [key, value] : j.items())
    a[word_from_string(key)] = value.get<int>();
  return a;
}

inline Json assignment_to_json(const Assignment& a) {
  Json j = Json::object();
  for (const auto& [w, s] : a) j[word_to_string(w)] = s;
  return j;
}

// ---------------------------------------------------------------------------
// Files.

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const Json::parse_error& e) {
    throw Error("cannot parse '" + path + "': " + e.what());
  }
  return j;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
}

// ---------------------------------------------------------------------------
// Text specs.

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t next = s.find(sep, pos);
    parts.push_back(
        s.substr(pos, next == std::string::npos ? std::string::npos
                                                : next - pos));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return parts;
}

}  // namespace detail

// Seeded chain with some structural zeros, rejection-sampled until ergodic.
inline TransitionMatrix make_random_sparse_chain(int q, std::uint32_t seed) {
  if (q < 2) throw Error("random chain needs q >= 2");
  Rng rng(seed);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Eigen::MatrixXd m(q, q);
    bool bad_row = false;
    for (int i = 0; i < q; ++i) {
      for (int j = 0; j < q; ++j)
        m(i, j) = rng.u01() < 0.3 ? 0.0 : 0.1 + rng.u01();
      const double total = m.row(i).sum();
      if (total <= 0.0) {
        bad_row = true;
        break;
      }
      m.row(i) /= total;
    }
    if (bad_row) continue;
    const TransitionMatrix M(m);
    if (M.is_ergodic()) return M;
  }
  throw Error("no ergodic chain found after 1000 attempts");
}

// "sym2:<lambda>" | "file:<path>" | "random:<q>,<seed>[,positive]".
inline TransitionMatrix chain_from_spec(const std::string& spec) {
  const std::size_t colon = spec.find(':');
  if (colon == std::string::npos)
    throw Error("chain spec '" + spec +
                "' must look like sym2:<lambda>, file:<path>, or "
                "random:<q>,<seed>[,positive]");
  const std::string kind = spec.substr(0, colon);
  const std::string rest = spec.substr(colon + 1);
  if (kind == "sym2") return make_sym2(std::stod(rest));
  if (kind == "file") return matrix_from_json(read_json_file(rest));
  if (kind == "random") {
    const std::vector<std::string> parts = detail::split(rest, ',');
    if (parts.size() < 2 || parts.size() > 3 ||
        (parts.size() == 3 && parts[2] != "positive"))
      throw Error("random chain spec must be random:<q>,<seed>[,positive]");
    const int q = std::stoi(parts[0]);
    const auto seed = static_cast<std::uint32_t>(std::stoul(parts[1]));
    return parts.size() == 3 ? make_random_chain(q, seed)
                             : make_random_sparse_chain(q, seed);
  }
  throw Error("unknown chain family '" + kind + "'");
}

// "dary:<d>x<depth>" | "gw:<mean>,<depth>,<seed>" | "file:<path>".
inline RootedTree tree_from_spec(const std::string& spec) {
  const std::size_t colon = spec.find(':');
  if (colon == std::string::npos)
    throw Error("tree spec '" + spec +
                "' must look like dary:<d>x<depth>, "
                "gw:<mean>,<depth>,<seed>, or file:<path>");
  const std::string kind = spec.substr(0, colon);
  const std::string rest = spec.substr(colon + 1);
  if (kind == "dary") {
    const std::size_t x = rest.find('x');
    if (x == std::string::npos)
      throw Error("d-ary tree spec must be dary:<d>x<depth>");
    return make_dary(std::stoi(rest.substr(0, x)),
                     std::stoi(rest.substr(x + 1)));
  }
  if (kind == "gw") {
    const std::vector<std::string> parts = detail::split(rest, ',');
    if (parts.size() != 3)
      throw Error("branching tree spec must be gw:<mean>,<depth>,<seed>");
    return sample_galton_watson(
        std::stod(parts[0]), std::stoi(parts[1]),
        static_cast<std::uint32_t>(std::stoul(parts[2])));
  }
  if (kind == "file") return tree_from_json(read_json_file(rest));
  throw Error("unknown tree family '" + kind + "'");
}

}  // namespace treecast
