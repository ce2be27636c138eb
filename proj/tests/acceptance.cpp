// Acceptance run: one PASS/FAIL line per criterion with the measured value
// next to its pinned tolerance. Exits 1 if any criterion fails.
//   textmamba_acceptance CLI_PATH GOLDEN_DIR SCRATCH_DIR

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "support.hpp"
#include "textmamba/fixtures.hpp"
#include "textmamba/gradcheck_suite.hpp"
#include "textmamba/io.hpp"
#include "textmamba/model.hpp"
#include "textmamba/s6.hpp"
#include "textmamba/ss2d.hpp"

namespace tx = textmamba;
namespace fs = std::filesystem;
using tmt::Gen;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

std::string cli_path, golden_dir;
fs::path scratch_dir;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int run(const std::string& args, std::string* out = nullptr) {
  const fs::path o = scratch_dir / "cmd_stdout.txt";
  const std::string cmd =
      "\"" + cli_path + "\" " + args + " >\"" + o.string() + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  if (out) {
    std::ifstream f(o);
    *out = {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<std::string> na, nb;
  for (const auto& e : fs::directory_iterator(a)) na.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) nb.push_back(e.path().filename().string());
  std::sort(na.begin(), na.end());
  std::sort(nb.begin(), nb.end());
  if (na != nb || na.empty()) return false;
  for (const auto& n : na)
    if (slurp(a / n) != slurp(b / n)) return false;
  return true;
}

// ---- 1 ----------------------------------------------------------------------

Outcome scan_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst64 = 0, worst32 = 0;
  for (std::size_t len : {1, 2, 3, 7, 64, 1024, 4096}) {
    Gen g(1000 + len);
    const auto p64 = tx::S6Params<double>::init(32, 16, g.rng());
    const auto x64 = g.normal({len, 32});
    worst64 = std::max(worst64, tmt::normwise_rel_diff(tx::selective_scan_parallel(x64, p64),
                                                       tx::selective_scan_sequential(x64, p64)));
    const auto p32 = tx::S6Params<float>::init(32, 16, g.rng());
    const auto x32 = g.normal<float>({len, 32});
    worst32 = std::max(worst32, tmt::normwise_rel_diff(tx::selective_scan_parallel(x32, p32),
                                                       tx::selective_scan_sequential(x32, p32)));
  }
  const double secs = seconds_since(t0);
  return {worst64 <= 1e-10 && worst32 <= 1e-5 && secs < 10.0,
          "f64 " + fmt("%.2e", worst64) + " (<=1e-10), f32 " + fmt("%.2e", worst32) +
              " (<=1e-5), " + fmt("%.2f", secs) + " s (<10)"};
}

// ---- 2 ----------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  std::string worst_name;
  double worst_ratio = 0;
  for (const auto& m : tx::gradcheck_modules()) {
    const double tol = tx::default_gradcheck_tolerance(m);
    const auto r = tx::run_gradcheck(m, 1e-4);
    if (!r.passed(tol)) {
      o.ok = false;
      o.detail += m + " " + fmt("%.2e", r.max_relative_error) + " > " + fmt("%.0e", tol) + "; ";
    }
    if (r.max_relative_error / tol > worst_ratio) {
      worst_ratio = r.max_relative_error / tol;
      worst_name = m + " " + fmt("%.2e", r.max_relative_error) + "/" + fmt("%.0e", tol);
    }
  }
  const double secs = seconds_since(t0);
  if (secs >= 120.0) o.ok = false;
  o.detail += "closest to tolerance: " + worst_name + ", " + fmt("%.1f", secs) + " s (<120)";
  return o;
}

// ---- 3 ----------------------------------------------------------------------

Outcome topk_oracle() {
  Gen g(3);
  std::size_t mismatches = 0, not_idempotent = 0;
  for (int row = 0; row < 1000; ++row) {
    const std::size_t len = g.size(1, 64), k = g.size(1, len);
    // Strictly positive values, half of the rows drawn from a tiny set to force ties.
    auto w = row % 2 ? g.uniform({1, len}, 0.01, 1.0) : g.tie_heavy({1, len}, 3);
    if (row % 2 == 0)
      for (auto& v : w.data()) v += 1.0;
    const auto t = tx::topk_sparsify(w, k);
    const auto order = tmt::sorted_order(w.ptr(), len);
    std::vector<char> expect(len, 0);
    for (std::size_t r = 0; r < k; ++r) expect[order[r]] = 1;
    for (std::size_t i = 0; i < len; ++i)
      if ((t[i] != 0.0) != bool(expect[i]) || (expect[i] && t[i] != w[i])) ++mismatches;
    if (!(tx::topk_sparsify(t, k) == t)) ++not_idempotent;
  }

  const std::size_t c = 16, heads = 4, levels = 2, points = 3;
  const auto params = tx::DeformAttnParams<double>::init(c, heads, levels, points, g.rng());
  tx::EmbeddingSequence<double> seq(g.normal({20, c}), {{4, 4}, {2, 2}});
  const std::vector<tx::NdArray<double>> maps = {seq.level_map(0), seq.level_map(1)};
  tx::AttnOptions dense;
  dense.sparsify = false;
  tx::AttnOptions full;
  full.k = levels * points;
  const bool bit_exact =
      tx::deformable_attention(seq.tokens, maps, seq.reference_points(), params, dense) ==
      tx::deformable_attention(seq.tokens, maps, seq.reference_points(), params, full);
  return {mismatches == 0 && not_idempotent == 0 && bit_exact,
          std::to_string(mismatches) + " oracle mismatches and " +
              std::to_string(not_idempotent) + " non-idempotent rows over 1000 (0), dense k " +
              (bit_exact ? "bit-exact" : "DIFFERS")};
}

// ---- 4 ----------------------------------------------------------------------

Outcome ss2d_structure() {
  std::size_t bad_roundtrip = 0, bad_merge = 0, bad_flip = 0;
  Gen g(4);
  for (std::size_t h = 1; h <= 16; ++h) {
    for (std::size_t w = 1; w <= 16; ++w) {
      const auto m = g.normal({h, w, 3});
      for (auto id : tx::kScanPaths) {
        const auto path = tx::make_scan_path(id, h, w);
        if (!(tx::scatter_path(tx::gather_path(m, path), path, h, w) == m)) ++bad_roundtrip;
      }
      if (!(tx::cross_merge(tx::cross_scan(m), h, w) == m * 4.0)) ++bad_merge;
      const auto s = tx::cross_scan(m);
      const auto f = tx::cross_scan(tx::flip_width(m));
      for (std::size_t r = 0; r < h; ++r) {
        if (tmt::run_of(f[0], w, r) != tmt::run_of(s[1], w, h - 1 - r)) ++bad_flip;
        if (tmt::run_of(f[1], w, r) != tmt::run_of(s[0], w, h - 1 - r)) ++bad_flip;
      }
      for (std::size_t j = 0; j < w; ++j) {
        if (tmt::run_of(f[2], h, j) != tmt::run_of(s[2], h, w - 1 - j)) ++bad_flip;
        if (tmt::run_of(f[3], h, j) != tmt::run_of(s[3], h, w - 1 - j)) ++bad_flip;
      }
    }
  }
  return {bad_roundtrip + bad_merge + bad_flip == 0,
          "256 grids: " + std::to_string(bad_roundtrip) + " round-trip, " +
              std::to_string(bad_merge) + " merge, " + std::to_string(bad_flip) +
              " flip failures (all 0, exact)"};
}

// ---- 5 ----------------------------------------------------------------------

Outcome dsffn_degeneracies() {
  Gen g(5);
  const std::size_t c = 16;
  auto p = tx::DsffnParams<double>::init(c, g.rng());
  p.norm_gamma = g.uniform({c}, 0.5, 1.5);
  p.norm_beta = g.normal({c}, 0.2);
  const auto x = g.normal({30, c}, 2.0);
  const auto l_in = tx::ops::layer_norm(x, p.norm_gamma, p.norm_beta, tx::kLayerNormEps);

  auto zero = p;
  for (auto* t : {&zero.e1_w, &zero.e1_b, &zero.r1_w, &zero.r1_b, &zero.e2_w, &zero.e2_b,
                  &zero.r2_w, &zero.r2_b})
    t->fill(0);
  const bool exact = tx::dsffn_forward(x, zero) == l_in;

  auto twice = zero;
  for (std::size_t i = 0; i < c; ++i) {
    twice.e1_w(i, i) = 1;
    twice.e1_w(i, c + i) = -1;
    twice.r1_w(i, i) = 1;
    twice.r1_w(c + i, i) = -1;
  }
  const double dev = tmt::max_abs_diff(tx::dsffn_forward(x, twice), l_in * 2.0);
  return {exact && dev <= 1e-6, std::string("zero branches ") + (exact ? "exact" : "DIFFER") +
                                    ", 2x case " + fmt("%.2e", dev) + " (<=1e-6)"};
}

// ---- 6 ----------------------------------------------------------------------

tx::Assignment brute_force(const tx::NdArray<double>& cost) {
  const std::size_t rows = cost.dim(0), cols = cost.dim(1);
  std::vector<std::size_t> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  tx::Assignment best;
  double best_cost = INFINITY;
  std::size_t best_sum = 0;
  // Permutations of all columns cover every injective row -> column map.
  do {
    double c = 0;
    std::size_t s = 0;
    for (std::size_t t = 0; t < rows; ++t) {
      c += cost(t, perm[t]);
      s += perm[t];
    }
    if (c < best_cost || (c == best_cost && s < best_sum)) {
      best_cost = c;
      best_sum = s;
      best.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(rows));
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Outcome decoder_contracts() {
  tx::RunConfig cfg;
  cfg.num_proposals = 8;
  Outcome o;
  std::size_t out_of_range = 0, match_failures = 0, matched = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto fx = tx::generate_fixtures(seed);
    const auto params = tx::load_params<double>(fx, cfg);
    const auto r = tx::model_forward(fx.get("image").values, params, cfg);
    const auto& d = r.decoder;
    if (seed == 0) {
      const bool shapes = d.proposals.scores.shape() == tx::Shape{8} &&
                          d.mask_i.shape() == tx::Shape{8, 8, 8} &&
                          d.control_points.size() == 4 &&
                          d.control_points[0].shape() == tx::Shape{8, 16, 2};
      o.ok = o.ok && shapes;
      o.detail += std::string("shapes ") + (shapes ? "ok" : "WRONG");
    }
    for (std::size_t i = 0; i < d.priors.size(); ++i)
      if (!(d.priors[i] >= 0.0 && d.priors[i] <= 1.0)) ++out_of_range;
    for (const auto& cp : d.control_points)
      for (std::size_t i = 0; i < cp.size(); ++i)
        if (!(cp[i] >= 0.0 && cp[i] <= 1.0)) ++out_of_range;
    const auto targets = tx::load_targets<double>(fx);
    for (std::size_t nt = 1; nt <= std::min<std::size_t>(5, targets.count()); ++nt) {
      tx::Targets<double> sub;
      sub.points = tx::NdArray<double>({nt, 16, 2}, std::vector<double>(targets.points.ptr(),
                                                                        targets.points.ptr() + nt * 32));
      const auto cost = tx::matching_cost(d.proposals.scores, d.control_points.back(), sub.points,
                                          tx::LossWeights{});
      if (tx::match_predictions(d.proposals.scores, d.control_points.back(), sub) !=
          brute_force(cost))
        ++match_failures;
      ++matched;
    }
  }
  const auto prior = tx::anchor_priors(tx::NdArray<double>({8, 8, 8}, 0.3));
  double prior_dev = 0;
  for (std::size_t i = 0; i < prior.size(); ++i) prior_dev = std::max(prior_dev, std::abs(prior[i] - 0.5));
  o.ok = o.ok && out_of_range == 0 && match_failures == 0 && prior_dev <= 1e-6;
  o.detail += ", " + std::to_string(out_of_range) + " points outside [0,1]^2 (0), uniform prior " +
              fmt("%.1e", prior_dev) + " from centre (<=1e-6), matching " +
              std::to_string(matched - match_failures) + "/" + std::to_string(matched) +
              " equal to brute force";
  return o;
}

// ---- 7 ----------------------------------------------------------------------

Outcome loss_values() {
  tx::NdArray<double> m({8, 8});
  Gen g(7);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = g.coin() ? 1.0 : 0.0;
  const double dice = tx::dice_loss(m, m);
  const double focal = tx::focal_loss(tx::NdArray<double>({1}, {0.5}), tx::NdArray<double>({1}, {1.0}));
  const double focal_dev = std::abs(focal - 0.25 * 0.25 * std::log(2.0));
  const double total_dev = std::abs(tx::combine(0.1, 0.2, 0.3, {2, 5, 5}).total - 2.7);
  return {dice == 0.0 && focal_dev <= 1e-9 && total_dev <= 1e-9,
          "dice " + fmt("%g", dice) + " (==0), focal off by " + fmt("%.1e", focal_dev) +
              " (<=1e-9), weighted total off by " + fmt("%.1e", total_dev) + " (<=1e-9)"};
}

// ---- 8 ----------------------------------------------------------------------

Outcome parameter_ordering() {
  auto total = [](const tx::RunConfig& c) { return tx::parameter_counts(c).at("total"); };
  tx::RunConfig base;
  base.enable_ss2d = false;
  tx::RunConfig ss2d = base;
  ss2d.enable_ss2d = true;
  tx::RunConfig deep = base;
  deep.num_blocks = 18;
  const std::size_t d_ss2d = total(ss2d) - total(base), d_deep = total(deep) - total(base);

  tx::RunConfig c = base;
  c.enable_dsffn = c.enable_epem = false;
  std::vector<std::size_t> chain = {total(c)};
  c.enable_ss2d = true;
  chain.push_back(total(c));
  c.enable_dsffn = true;
  chain.push_back(total(c));
  c.enable_epem = true;
  chain.push_back(total(c));
  const bool increasing = std::is_sorted(chain.begin(), chain.end(), std::less_equal<>()) &&
                          std::adjacent_find(chain.begin(), chain.end()) == chain.end();
  std::ostringstream s;
  s << "+SS2D " << d_ss2d << " < +12 blocks " << d_deep << "; chain";
  for (auto v : chain) s << " " << v;
  return {d_ss2d < d_deep && increasing, s.str()};
}

// ---- 9 ----------------------------------------------------------------------

Outcome toggle_matrix() {
  const auto fx = tx::generate_fixtures(0);
  const auto image = fx.get("image").values;
  Outcome o;
  std::vector<tx::Shape> ref;
  int runs = 0;
  for (bool epem : {true, false}) {
    for (bool dsffn : {true, false}) {
      tx::RunConfig cfg;
      cfg.num_proposals = 8;
      cfg.enable_epem = epem;
      cfg.enable_dsffn = dsffn;
      const auto a = tx::run_forward(cfg, fx);
      const auto b = tx::run_forward(cfg, fx);
      std::vector<tx::Shape> shapes;
      for (std::size_t i = 0; i < a.tensors().size(); ++i) {
        shapes.push_back(a.tensors()[i].values.shape());
        if (!(a.tensors()[i].values == b.tensors()[i].values)) {
          o.ok = false;
          o.detail += "nondeterministic " + a.tensors()[i].name + "; ";
        }
      }
      if (ref.empty()) ref = shapes;
      if (shapes != ref) {
        o.ok = false;
        o.detail += "shape change; ";
      }
      if (!epem) {
        const auto p = tx::load_params<double>(fx, cfg);
        const auto r = tx::model_forward(image, p, cfg);
        const auto direct = tx::encoder_forward(
            tx::EmbeddingSequence<double>::flatten(tx::stub_forward(image, p.backbone).maps),
            p.detector.encoder, cfg.encoder());
        if (!(r.enhanced.tokens == direct.tokens)) {
          o.ok = false;
          o.detail += "EPEM-off sequence differs from the encoder output; ";
        }
      }
      ++runs;
    }
  }
  o.detail += std::to_string(runs) + " configurations, shapes equal, repeat runs bit-identical, "
              "EPEM-off output == encoder output";
  return o;
}

// ---- 10 ---------------------------------------------------------------------

Outcome linear_time() {
  std::string csv;
  if (run("bench-scan --lengths 256,1024,4096 --reps 5", &csv) != 0) return {false, "bench-scan failed"};
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  std::vector<double> seq;
  double dev = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() < 9) continue;
    seq.push_back(std::stod(f[4]));
    dev = std::max(dev, std::stod(f[8]));
  }
  if (seq.size() != 3) return {false, "unexpected bench-scan output"};
  const double ratio = seq.back() / seq.front();
  return {ratio >= 8.0 && ratio <= 24.0 && dev <= 1e-5,
          "sequential 4096/256 total-time ratio " + fmt("%.2f", ratio) +
              " (in [8, 24]), deviation " + fmt("%.2e", dev) + " (<=1e-5)"};
}

// ---- 11 ---------------------------------------------------------------------

Outcome determinism_gate() {
  const fs::path f1 = scratch_dir / "fx_a", f2 = scratch_dir / "fx_b";
  const fs::path o1 = scratch_dir / "fwd_a", o2 = scratch_dir / "fwd_b";
  for (const auto& d : {f1, f2, o1, o2}) fs::remove_all(d);
  const std::string cfg = golden_dir + "/config.json";
  bool ok = run("gen-fixtures --seed 0 --out \"" + f1.string() + "\"") == 0 &&
            run("gen-fixtures --seed 0 --out \"" + f2.string() + "\"") == 0;
  const bool fx_same = ok && same_tree(f1, f2);
  ok = ok && run("forward --config \"" + cfg + "\" --fixtures \"" + f1.string() + "\" --out \"" +
                 o1.string() + "\"") == 0;
  ok = ok && run("forward --config \"" + cfg + "\" --fixtures \"" + f2.string() + "\" --out \"" +
                 o2.string() + "\"") == 0;
  const bool fwd_same = ok && same_tree(o1, o2);
  const int cmp_fx =
      run("compare --golden \"" + golden_dir + "/fixtures\" --candidate \"" + f1.string() + "\"");
  const int cmp_fwd =
      run("compare --golden \"" + golden_dir + "/forward\" --candidate \"" + o1.string() + "\"");
  return {ok && fx_same && fwd_same && cmp_fx == 0 && cmp_fwd == 0,
          std::string("fixtures ") + (fx_same ? "byte-identical" : "DIFFER") + ", forward " +
              (fwd_same ? "byte-identical" : "DIFFER") + ", compare vs goldens exit " +
              std::to_string(cmp_fx) + "/" + std::to_string(cmp_fwd) + " (0/0)"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 4) {
    std::fprintf(stderr, "usage: %s CLI_PATH GOLDEN_DIR SCRATCH_DIR\n", argv[0]);
    return 2;
  }
  cli_path = argv[1];
  golden_dir = argv[2];
  scratch_dir = argv[3];
  fs::create_directories(scratch_dir);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"scan equivalence", scan_equivalence},
      {"gradient suite", gradient_suite},
      {"top-k oracle", topk_oracle},
      {"ss2d structure", ss2d_structure},
      {"dual-scale ffn degeneracies", dsffn_degeneracies},
      {"decoder contracts", decoder_contracts},
      {"loss values", loss_values},
      {"parameter ordering", parameter_ordering},
      {"toggle matrix", toggle_matrix},
      {"linear-time scan", linear_time},
      {"determinism gate", determinism_gate},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += o.ok ? 0 : 1;
    std::printf("criterion %2zu %s  %-28s %s\n", i + 1, o.ok ? "PASS" : "FAIL", criteria[i].first,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
