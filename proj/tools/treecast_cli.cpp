// treecast: batch experiment driver for the broadcast-process laboratory.
//
// Subcommands expose the library end to end: chain spectra, partition-chain
// bases, fractal capacities, layer decompositions, variance-decay reports,
// threshold sweeps, exact root posteriors, hypothesis checkers, and an
// enumeration cross-check.  Artifacts are deterministic: identical
// invocations produce byte-identical bytes (sorted keys, 17-significant-digit
// numbers, seeded randomness).
//
// Exit codes: 0 success, 1 usage or input error, 2 at least one asserted
// invariant failed (failures are listed in a machine-readable trailer).

#include <cstdlib>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "treecast/analysis.hpp"
#include "treecast/io.hpp"

namespace tc = treecast;
using Json = tc::Json;

namespace {

struct Failure {
  std::string property;
  std::string instance;
};

struct Output {
  std::string dir;   // --outdir, else $TREECAST_OUT, else "."
  std::string name;  // --out artifact base name; empty = stdout only
};

Json failures_to_json(const std::vector<Failure>& failures) {
  Json a = Json::array();
  for (const Failure& f : failures)
    a.push_back(Json{{"property", f.property}, {"instance", f.instance}});
  return a;
}

// Prints the artifact, writes it when requested, and prints the trailer.
int finish(Json artifact, const std::vector<Failure>& failures,
           const Output& out) {
  artifact["invariant_failures"] = failures_to_json(failures);
  const std::string text = tc::render_json(artifact);
  std::cout << text;
  if (!out.name.empty())
    tc::write_text_file(out.dir + "/" + out.name + ".json", text);
  if (!failures.empty()) {
    std::cout << "invariant-failures: " << failures_to_json(failures).dump()
              << "\n";
    return 2;
  }
  return 0;
}

Json vector_to_json(const Eigen::VectorXd& v) {
  Json a = Json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

std::vector<int> parse_depths(const std::string& spec) {
  std::vector<int> depths;
  const std::size_t dots = spec.find("..");
  if (dots != std::string::npos) {
    const int lo = std::stoi(spec.substr(0, dots));
    const int hi = std::stoi(spec.substr(dots + 2));
    for (int ell = lo; ell <= hi; ++ell) depths.push_back(ell);
    return depths;
  }
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const std::size_t comma = spec.find(',', pos);
    depths.push_back(std::stoi(spec.substr(
        pos, comma == std::string::npos ? std::string::npos : comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return depths;
}

std::vector<double> parse_lambdas(const std::string& spec) {
  std::vector<double> lambdas;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const std::size_t comma = spec.find(',', pos);
    lambdas.push_back(std::stod(spec.substr(
        pos, comma == std::string::npos ? std::string::npos : comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return lambdas;
}

tc::SetFamily default_family(const tc::RootedTree& tree) {
  tc::SetFamily fam;
  for (const tc::Word& leaf : tree.leaves()) fam.push_back({leaf});
  return fam;
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
      entries[L[rng.index(static_cast<int>(L.size()))]] = 1 + rng.index(q - 1);
    f.add(tc::MultiIndex(std::move(entries)), rng.uniform(-1.0, 1.0));
  }
  return f;
}

// Membership test for the k-fold closure of singletons under branch
// decomposition, written as a direct recursion so it cross-checks the
// capacity recursion through an independent code path.
bool in_closure(const tc::RootedTree& tree, const tc::LeafSet& S, int k) {
  if (S.empty() || k < 1) return false;
  if (S.size() == 1) return true;
  const tc::BranchParts bp = tc::branch_decompose(tree, S);
  for (const auto& [child, part] : bp.parts)
    if (!in_closure(tree, part, k - 1)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Subcommand handlers.

int run_spectrum(const std::string& chain_spec, double d, const Output& out) {
  const tc::TransitionMatrix M = tc::chain_from_spec(chain_spec);
  const tc::ChainSpectrum s = tc::chain_spectrum(M);
  Json art{{"q", M.q()},
           {"lambda", s.lambda},
           {"pi", vector_to_json(s.pi)},
           {"ergodic", M.is_ergodic()}};
  if (d > 0.0) {
    art["d"] = d;
    art["ks_product"] = d * s.lambda * s.lambda;
    const double base = tc::decay_base(s.lambda, d);
    art["decay_base"] = base;
    art["epsilon"] = base < 1.0 ? Json(s.epsilon_for(d)) : Json();
  }
  return finish(std::move(art), {}, out);
}

int run_xi_basis(const std::string& chain_spec, const Output& out) {
  const tc::TransitionMatrix M = tc::chain_from_spec(chain_spec);
  const tc::PartitionChain chain = tc::build_partition_chain(M);
  const tc::WordSet words = tc::build_word_set(chain);
  const tc::XiBasis xi = tc::build_xi_basis(M, chain, words);

  Json grid = Json::array();
  for (const auto& [key, partition] : chain.grid)
    grid.push_back(Json{{"r", key.first},
                        {"s", key.second},
                        {"parts", tc::partition_to_json(partition)}});
  Json basis = Json::array();
  Eigen::MatrixXd span(M.q(), static_cast<int>(xi.words.size()));
  for (std::size_t i = 0; i < xi.words.size(); ++i) {
    const tc::Word& w = xi.words[i];
    Json part = Json::array();
    for (int s : words.part_of.at(w)) part.push_back(s);
    basis.push_back(Json{{"word", tc::word_to_json(w)},
                         {"r", xi.r.at(w)},
                         {"part", std::move(part)},
                         {"xi", vector_to_json(xi.xi.at(w))}});
    span.col(static_cast<int>(i)) = xi.xi.at(w);
  }
  Json art{{"q", xi.q},
           {"r0", xi.r0},
           {"w0", tc::word_to_json(xi.w0)},
           {"grid", std::move(grid)},
           {"basis", std::move(basis)}};

  std::vector<Failure> failures;
  if (static_cast<int>(xi.words.size()) != M.q())
    failures.push_back({"basis-size",
                        "expected " + std::to_string(M.q()) + " words, got " +
                            std::to_string(xi.words.size())});
  const int rank = static_cast<int>(Eigen::FullPivLU<Eigen::MatrixXd>(span)
                                        .setThreshold(1e-10)
                                        .rank());
  art["rank"] = rank;
  if (rank != M.q())
    failures.push_back(
        {"basis-spans", "rank " + std::to_string(rank) + " of " +
                            std::to_string(M.q())});
  if (xi.r0 > 4 * M.q())
    failures.push_back({"chain-length",
                        "r0 " + std::to_string(xi.r0) + " exceeds 4q"});
  return finish(std::move(art), failures, out);
}

int run_capacity(const std::string& tree_spec, const std::string& set_spec,
                 const Output& out) {
  const tc::RootedTree tree = tc::tree_from_spec(tree_spec);
  tc::LeafSet S;
  if (set_spec == "all-leaves") {
    S = tree.leaves();
  } else {
    std::size_t pos = 0;
    while (pos <= set_spec.size()) {
      const std::size_t comma = set_spec.find(',', pos);
      S.push_back(tc::word_from_string(set_spec.substr(
          pos,
          comma == std::string::npos ? std::string::npos : comma - pos)));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }
  S = tc::detail::canonical_set(std::move(S));
  const int capacity = tc::fractal_capacity(tree, S);

  int smallest = -1;
  for (int k = 1; k <= static_cast<int>(S.size()); ++k)
    if (in_closure(tree, S, k)) {
      smallest = k;
      break;
    }
  const bool cross_checked = smallest == capacity;

  std::vector<Failure> failures;
  if (!cross_checked)
    failures.push_back({"fractal-capacity-cross-check",
                        "recursion " + std::to_string(capacity) +
                            " vs closure membership " +
                            std::to_string(smallest)});
  if (capacity > static_cast<int>(S.size()))
    failures.push_back({"capacity-upper-bound",
                        std::to_string(capacity) + " > |S| = " +
                            std::to_string(S.size())});
  Json art{{"capacity", capacity},
           {"set_size", static_cast<int>(S.size())},
           {"cross_checked", cross_checked},
           {"set", tc::leaf_set_to_json(S)}};
  return finish(std::move(art), failures, out);
}

int run_decompose(const std::string& tree_spec, const std::string& chain_spec,
                  const std::string& poly_path, int k1, int samples,
                  std::uint32_t seed, const Output& out) {
  const tc::RootedTree tree = tc::tree_from_spec(tree_spec);
  const tc::TransitionMatrix M = tc::chain_from_spec(chain_spec);
  tc::LeafPolynomial f =
      tc::leaf_polynomial_from_json(tc::read_json_file(poly_path));
  const Eigen::VectorXd nu = tc::reference_distribution(M);
  // The decomposition applies to centred functions; the constant term
  // carries no layer structure, so it is split off and reported.
  const double subtracted =
      tc::expectation(tree, M, tc::to_vertex_polynomial(tree, M, f), nu);
  f.add(tc::MultiIndex{}, -subtracted);
  const tc::LayerDecomposition ld = tc::full_decompose(tree, M, f, k1);

  std::vector<Failure> failures;
  Json parts = Json::array();
  double sum_var = 0.0;
  for (const auto& [u, part] : ld.f_u) {
    const double mean = tc::expectation(tree, M, part, nu);
    const double var = tc::variance(tree, M, part, nu);
    sum_var += var;
    const int height = tree.height(u);
    parts.push_back(Json{{"vertex", tc::word_to_string(u)},
                         {"height", height},
                         {"mean", mean},
                         {"variance", var}});
    if (height > k1 && std::abs(mean) > 1e-10)
      failures.push_back({"part-mean-zero",
                          "vertex " + tc::word_to_string(u) + " mean " +
                              tc::fmt17(mean)});
  }
  Json layers = Json::array();
  for (const auto& [k, fk] : ld.f_k)
    layers.push_back(
        Json{{"k", k}, {"variance", tc::variance(tree, M, fk, nu)}});

  double max_gap = 0.0;
  for (int i = 0; i < samples; ++i) {
    const tc::Assignment x = tc::sample(tree, M, seed + i).assignment;
    double rhs = 0.0;
    for (const auto& [u, part] : ld.f_u) rhs += tc::evaluate(part, x);
    max_gap =
        std::max(max_gap, std::abs(tc::evaluate_leaf(tree, M, f, x) - rhs));
  }
  if (max_gap > 1e-10)
    failures.push_back({"parts-sum-to-f",
                        "max gap " + tc::fmt17(max_gap) + " over " +
                            std::to_string(samples) + " samples"});

  const double var_f =
      tc::variance(tree, M, tc::to_vertex_polynomial(tree, M, f), nu);
  Json art{{"k1", ld.k1},
           {"subtracted_mean", subtracted},
           {"var_f", var_f},
           {"sum_of_part_variances", sum_var},
           {"sandwich_lo", ld.sandwich_lo},
           {"sandwich_hi", ld.sandwich_hi},
           {"max_identity_gap", max_gap},
           {"samples", samples},
           {"parts", std::move(parts)},
           {"layers", std::move(layers)}};
  return finish(std::move(art), failures, out);
}

int run_decay(const std::string& tree_spec, const std::string& chain_spec,
              const std::string& poly_path, const Output& out) {
  const tc::RootedTree tree = tc::tree_from_spec(tree_spec);
  const tc::TransitionMatrix M = tc::chain_from_spec(chain_spec);
  const tc::LeafPolynomial f =
      tc::leaf_polynomial_from_json(tc::read_json_file(poly_path));
  const tc::DecayReport rep = tc::decay_report(tree, M, f);
  // pass is reported, not asserted: the decay theorem's constant is implicit.
  Json art{{"var_f", rep.var_f},
           {"var_conditional_root", rep.var_cond_root},
           {"ratio", rep.ratio},
           {"bound", rep.bound},
           {"degree", rep.degree},
           {"capacity", rep.capacity},
           {"pass", rep.pass}};
  return finish(std::move(art), {}, out);
}

int run_sweep(int d, const std::string& lambda_spec,
              const std::string& depth_spec, const std::string& statistic,
              const Output& out) {
  const std::vector<int> depths = parse_depths(depth_spec);
  const std::vector<double> lambdas = parse_lambdas(lambda_spec);
  const std::vector<tc::SweepRow> rows =
      tc::ks_sweep(d, depths, lambdas, statistic);
  const std::string csv = tc::sweep_to_csv(rows);
  std::cout << csv;

  // Closed form vs engine on the small cells; disagreement is a failure.
  std::vector<Failure> failures;
  for (const tc::SweepRow& row : rows) {
    if (row.depth > 4) continue;
    const tc::RootedTree tree = tc::make_dary(row.d, row.depth);
    const tc::TransitionMatrix M = tc::make_sym2(row.lambda);
    tc::LeafPolynomial f;
    for (const tc::Word& leaf : tree.leaves()) {
      std::map<tc::Word, int, tc::WordLess> entries;
      entries[leaf] = 1;
      f.add(tc::MultiIndex(std::move(entries)), 1.0);
    }
    const tc::DecayReport rep = tc::decay_report(tree, M, f);
    const tc::SiteBasis site = tc::build_site_basis(M);
    const double corr =
        tc::correlation_with_root(tree, M, f, site.phi[1]);
    const std::string cell = "lambda=" + tc::fmt17(row.lambda) +
                             ",depth=" + std::to_string(row.depth);
    if (std::abs(rep.ratio - row.ratio) > 1e-9)
      failures.push_back({"sweep-engine-agreement-ratio", cell});
    if (std::abs(corr - row.correlation) > 1e-9)
      failures.push_back({"sweep-engine-agreement-correlation", cell});
  }

  Json jrows = Json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Json row{{"lambda", rows[i].lambda},
             {"d", rows[i].d},
             {"depth", rows[i].depth},
             {"ratio", rows[i].ratio},
             {"correlation", rows[i].correlation},
             {"bound", std::pow(tc::decay_base(rows[i].lambda, rows[i].d),
                                rows[i].depth / 4.0)}};
    if (i > 0 && rows[i].lambda == rows[i - 1].lambda &&
        rows[i - 1].ratio > 0.0)
      row["quotient"] = rows[i].ratio / rows[i - 1].ratio;
    else
      row["quotient"] = Json();
    jrows.push_back(std::move(row));
  }
  Json art{{"d", d}, {"statistic", statistic}, {"rows", std::move(jrows)}};
  art["invariant_failures"] = failures_to_json(failures);
  if (!out.name.empty()) {
    tc::write_text_file(out.dir + "/" + out.name + ".csv", csv);
    tc::write_text_file(out.dir + "/" + out.name + ".json",
                        tc::render_json(art));
  }
  if (!failures.empty()) {
    std::cout << "invariant-failures: " << failures_to_json(failures).dump()
              << "\n";
    return 2;
  }
  return 0;
}

int run_bp(const std::string& tree_spec, const std::string& chain_spec,
           const std::string& obs_path, const Output& out) {
  const tc::RootedTree tree = tc::tree_from_spec(tree_spec);
  const tc::TransitionMatrix M = tc::chain_from_spec(chain_spec);
  const tc::Assignment obs =
      tc::assignment_from_json(tc::read_json_file(obs_path));
  const Eigen::VectorXd post = tc::bp_root_posterior(tree, M, obs);
  std::vector<Failure> failures;
  if (std::abs(post.sum() - 1.0) > 1e-12)
    failures.push_back(
        {"posterior-normalized", "sum " + tc::fmt17(post.sum())});
  Json art{{"posterior", vector_to_json(post)}, {"sum", post.sum()}};
  return finish(std::move(art), failures, out);
}

tc::SetFamily family_from_option(const tc::RootedTree& tree,
                                 const std::string& family_path) {
  if (family_path.empty()) return default_family(tree);
  return tc::family_from_json(tc::read_json_file(family_path));
}

int run_check_A(const std::string& tree_spec, const std::string& chain_spec,
                const std::string& family_path, double h_star, double c_star,
                int budget, std::uint32_t seed, const Output& out) {
  const tc::RootedTree tree = tc::tree_from_spec(tree_spec);
  const tc::TransitionMatrix M = tc::chain_from_spec(chain_spec);
  const tc::SetFamily fam = family_from_option(tree, family_path);
  const tc::AssumptionAReport rep =
      tc::check_assumption_A(tree, M, fam, h_star, c_star, budget, seed);
  std::vector<Failure> failures;
  if (!rep.pass_decay)
    failures.push_back({"conditional-variance-decay",
                        "worst ratio " + tc::fmt17(rep.worst_decay_ratio)});
  if (!rep.pass_lower)
    failures.push_back(
        {"conditional-second-moment-lower",
         "worst lo " + tc::fmt17(rep.worst_conditional_lo) + " < c* = " +
             tc::fmt17(c_star)});
  if (!rep.pass_upper)
    failures.push_back(
        {"conditional-second-moment-upper",
         "worst hi " + tc::fmt17(rep.worst_conditional_hi) + " > 1/c* = " +
             tc::fmt17(1.0 / c_star)});
  Json art{{"h_star", rep.h_star},
           {"c_star", rep.c_star},
           {"epsilon", rep.epsilon},
           {"vertices", rep.vertices},
           {"samples", rep.samples},
           {"worst_decay_ratio", rep.worst_decay_ratio},
           {"worst_conditional_lo", rep.worst_conditional_lo},
           {"worst_conditional_hi", rep.worst_conditional_hi},
           {"smallest_valid_h_star", rep.smallest_valid_h_star},
           {"largest_valid_c_star", rep.largest_valid_c_star},
           {"lemma_c_star", rep.lemma_c_star},
           {"lemma_c_star_valid", rep.lemma_c_star_valid},
           {"pass", rep.pass()}};
  return finish(std::move(art), failures, out);
}

int run_check_Ag(const std::string& tree_spec, const std::string& chain_spec,
                 const std::string& family_path, double h_circ, int budget,
                 std::uint32_t seed, const Output& out) {
  const tc::RootedTree tree = tc::tree_from_spec(tree_spec);
  const tc::TransitionMatrix M = tc::chain_from_spec(chain_spec);
  const tc::SetFamily fam = family_from_option(tree, family_path);
  const tc::AssumptionAgReport rep =
      tc::check_assumption_Ag(tree, M, fam, h_circ, budget, seed);
  std::vector<Failure> failures;
  if (!rep.pass_decay)
    failures.push_back({"conditional-variance-decay",
                        "worst ratio " + tc::fmt17(rep.worst_decay_ratio)});
  if (!rep.pass_covariance)
    failures.push_back(
        {"sup-norm-covariance",
         "worst ratio " + tc::fmt17(rep.worst_covariance_ratio)});
  const auto [h_star, c_star] = std::make_pair(
      rep.epsilon > 0.0 && std::isfinite(rep.epsilon)
          ? h_circ + 2.0 / rep.epsilon * std::log(2.0)
          : h_circ,
      0.5);
  Json art{{"h_circ", rep.h_circ},
           {"epsilon", rep.epsilon},
           {"vertices", rep.vertices},
           {"samples", rep.samples},
           {"worst_decay_ratio", rep.worst_decay_ratio},
           {"worst_covariance_ratio", rep.worst_covariance_ratio},
           {"smallest_valid_h_circ", rep.smallest_valid_h_circ},
           {"two_sided_h_star", h_star},
           {"two_sided_c_star", c_star},
           {"pass", rep.pass()}};
  return finish(std::move(art), failures, out);
}

int run_oracle_diff(const std::string& tree_spec,
                    const std::string& chain_spec, int q, int trials,
                    std::uint32_t seed, const Output& out) {
  const tc::RootedTree tree = tc::tree_from_spec(tree_spec);
  const tc::TransitionMatrix M = chain_spec.empty()
                                     ? tc::make_random_chain(q, seed)
                                     : tc::chain_from_spec(chain_spec);
  const tc::BruteForce oracle(tree, M);
  tc::Rng rng(seed);

  std::vector<tc::LeafPolynomial> polys;
  std::vector<tc::VertexPolynomial> vpolys;
  for (int t = 0; t < trials; ++t) {
    polys.push_back(
        random_leaf_polynomial(tree, M.q(), 1 + rng.index(4), 3, rng));
    vpolys.push_back(tc::to_vertex_polynomial(tree, M, polys.back()));
  }
  const std::vector<tc::BruteForce::Moments> moments = oracle.batch(vpolys);

  double max_expectation = 0.0, max_variance = 0.0, max_conditional = 0.0,
         max_posterior = 0.0;
  for (int t = 0; t < trials; ++t) {
    max_expectation =
        std::max(max_expectation, std::abs(tc::expectation(tree, M, vpolys[t]) -
                                           moments[t].mean));
    max_variance = std::max(
        max_variance,
        std::abs(tc::variance(tree, M, vpolys[t]) - moments[t].var()));
    max_conditional = std::max(
        max_conditional,
        std::abs(tc::var_conditional_on(tree, M, vpolys[t], tc::Word{}) -
                 moments[t].var_conditional_root()));
    tc::Assignment obs;
    for (const tc::Word& leaf : tree.leaves()) obs[leaf] = rng.index(M.q());
    const Eigen::VectorXd a = tc::bp_root_posterior(tree, M, obs);
    const Eigen::VectorXd b = oracle.root_posterior(obs);
    max_posterior =
        std::max(max_posterior, (a - b).lpNorm<Eigen::Infinity>());
  }

  const double tolerance = 1e-9;
  std::vector<Failure> failures;
  const auto check = [&](const char* name, double value) {
    if (value > tolerance)
      failures.push_back({name, "max diff " + tc::fmt17(value)});
  };
  check("oracle-expectation", max_expectation);
  check("oracle-variance", max_variance);
  check("oracle-conditional-variance", max_conditional);
  check("oracle-posterior", max_posterior);

  Json art{{"trials", trials},
           {"q", M.q()},
           {"max_expectation_diff", max_expectation},
           {"max_variance_diff", max_variance},
           {"max_conditional_variance_diff", max_conditional},
           {"max_posterior_diff", max_posterior},
           {"tolerance", tolerance},
           {"pass", failures.empty()}};
  return finish(std::move(art), failures, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"treecast: exact broadcast-process laboratory"};
  app.require_subcommand(1);

  Output out;
  const char* env_dir = std::getenv("TREECAST_OUT");
  out.dir = env_dir != nullptr && *env_dir != '\0' ? env_dir : ".";

  std::string chain_spec, tree_spec, poly_path, obs_path, family_path;
  std::string set_spec, lambda_spec, depth_spec, statistic = "count";
  double d_real = 0.0, h_star = 1.0, c_star = 0.5, h_circ = 1.0;
  int d_int = 2, k1 = 0, samples = 200, budget = 200, q = 2, trials = 50;
  std::uint32_t seed = 1;

  const auto add_out = [&](CLI::App* sub) {
    sub->add_option("--out", out.name, "artifact base name");
    sub->add_option("--outdir", out.dir,
                    "output directory (default $TREECAST_OUT or .)");
  };

  CLI::App* spectrum =
      app.add_subcommand("spectrum", "chain spectrum and decay base");
  spectrum->add_option("--chain", chain_spec, "chain spec")->required();
  spectrum->add_option("--d", d_real, "branching factor for the decay base");
  add_out(spectrum);

  CLI::App* xi =
      app.add_subcommand("xi-basis", "partition-chain grid and basis");
  xi->add_option("--chain", chain_spec, "chain spec")->required();
  add_out(xi);

  CLI::App* capacity =
      app.add_subcommand("capacity", "fractal capacity of a leaf set");
  capacity->add_option("--tree", tree_spec, "tree spec")->required();
  capacity
      ->add_option("--set", set_spec,
                   "'all-leaves' or comma-separated leaf words")
      ->required();
  add_out(capacity);

  CLI::App* decompose =
      app.add_subcommand("decompose", "layer decomposition of a polynomial");
  decompose->add_option("--tree", tree_spec, "tree spec")->required();
  decompose->add_option("--chain", chain_spec, "chain spec")->required();
  decompose->add_option("--poly", poly_path, "polynomial JSON")->required();
  decompose->add_option("--k1", k1, "floor layer (default 0)");
  decompose->add_option("--samples", samples, "identity-check samples");
  decompose->add_option("--seed", seed, "sampling seed");
  add_out(decompose);

  CLI::App* decay =
      app.add_subcommand("decay", "variance-decay report for a polynomial");
  decay->add_option("--tree", tree_spec, "tree spec")->required();
  decay->add_option("--chain", chain_spec, "chain spec")->required();
  decay->add_option("--poly", poly_path, "polynomial JSON")->required();
  add_out(decay);

  CLI::App* sweep =
      app.add_subcommand("sweep", "threshold sweep for the count statistic");
  sweep->add_option("--d", d_int, "branching factor")->required();
  sweep->add_option("--lambda,--lambdas", lambda_spec,
                    "comma-separated eigenvalues")
      ->required();
  sweep->add_option("--depths", depth_spec, "range a..b or comma list")
      ->required();
  sweep->add_option("--statistic", statistic, "statistic id (count)");
  add_out(sweep);

  CLI::App* bp = app.add_subcommand("bp", "exact root posterior");
  bp->add_option("--tree", tree_spec, "tree spec")->required();
  bp->add_option("--chain", chain_spec, "chain spec")->required();
  bp->add_option("--obs", obs_path, "observation JSON")->required();
  add_out(bp);

  CLI::App* check_a =
      app.add_subcommand("check-A", "two-sided conditional hypothesis check");
  check_a->add_option("--tree", tree_spec, "tree spec")->required();
  check_a->add_option("--chain", chain_spec, "chain spec")->required();
  check_a->add_option("--h-star", h_star, "height parameter")->required();
  check_a->add_option("--c-star", c_star, "conditional constant")->required();
  check_a->add_option("--budget", budget, "sample budget");
  check_a->add_option("--seed", seed, "sampling seed");
  check_a->add_option("--family", family_path,
                      "support family JSON (default: leaf singletons)");
  add_out(check_a);

  CLI::App* check_ag =
      app.add_subcommand("check-Ag", "sup-norm covariance hypothesis check");
  check_ag->add_option("--tree", tree_spec, "tree spec")->required();
  check_ag->add_option("--chain", chain_spec, "chain spec")->required();
  check_ag->add_option("--h-circ", h_circ, "height parameter")->required();
  check_ag->add_option("--budget", budget, "sample budget");
  check_ag->add_option("--seed", seed, "sampling seed");
  check_ag->add_option("--family", family_path,
                       "support family JSON (default: leaf singletons)");
  add_out(check_ag);

  CLI::App* oracle = app.add_subcommand(
      "oracle-diff", "engine vs full-enumeration cross-check");
  oracle->add_option("--tree", tree_spec, "tree spec")->required();
  oracle->add_option("--q", q, "state count for the random chain");
  oracle->add_option("--trials", trials, "random polynomials");
  oracle->add_option("--seed", seed, "sampling seed");
  oracle->add_option("--chain", chain_spec,
                     "chain spec (default: random strictly positive)");
  add_out(oracle);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*spectrum) return run_spectrum(chain_spec, d_real, out);
    if (*xi) return run_xi_basis(chain_spec, out);
    if (*capacity) return run_capacity(tree_spec, set_spec, out);
    if (*decompose)
      return run_decompose(tree_spec, chain_spec, poly_path, k1, samples,
                           seed, out);
    if (*decay) return run_decay(tree_spec, chain_spec, poly_path, out);
    if (*sweep)
      return run_sweep(d_int, lambda_spec, depth_spec, statistic, out);
    if (*bp) return run_bp(tree_spec, chain_spec, obs_path, out);
    if (*check_a)
      return run_check_A(tree_spec, chain_spec, family_path, h_star, c_star,
                         budget, seed, out);
    if (*check_ag)
      return run_check_Ag(tree_spec, chain_spec, family_path, h_circ, budget,
                          seed, out);
    if (*oracle)
      return run_oracle_diff(tree_spec, chain_spec, q, trials, seed, out);
  } catch (const tc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
