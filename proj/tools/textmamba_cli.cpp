// textmamba: fixture generation, forward runs, gradient checks, scan
// benchmark, parameter counts and golden comparison.
//
// Exit codes: 0 ok, 1 comparison or check failure, 2 usage error or
// unwritable output, 3 inconsistent input (the message names the field).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "textmamba/fixtures.hpp"
#include "textmamba/gradcheck_suite.hpp"
#include "textmamba/io.hpp"
#include "textmamba/kernels.hpp"
#include "textmamba/model.hpp"
#include "textmamba/scan_bench.hpp"

namespace tx = textmamba;
using json = nlohmann::ordered_json;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;
constexpr int kInconsistent = 3;

int report_input(const std::string& field, const std::string& what) {
  std::cerr << "error: inconsistent input [" << field << "]: " << what << "\n";
  return kInconsistent;
}

int cmd_gen_fixtures(std::uint64_t seed, const std::string& out) {
  try {
    const tx::io::TensorStore store = tx::generate_fixtures(seed);
    tx::io::write_store(out, store);
    json j;
    j["out"] = out;
    j["seed"] = seed;
    j["tensors"] = store.tensors().size();
    std::cout << j.dump(2) << "\n";
    return kOk;
  } catch (const tx::io::WriteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}

int cmd_forward(const std::string& config, const std::string& fixtures, const std::string& out) {
  try {
    const tx::RunConfig cfg = tx::io::load_config(config);
    const tx::io::TensorStore in = tx::io::read_store(fixtures);
    const tx::io::TensorStore result = tx::run_forward(cfg, in);
    tx::io::write_store(out, result);
    json j;
    j["out"] = out;
    for (const auto& t : result.tensors()) j["shapes"][t.name] = t.values.shape();
    const auto& loss = result.get("loss").values;
    j["loss"] = {{"cls", loss[0]}, {"seg", loss[1]}, {"reg", loss[2]}, {"total", loss[3]}};
    std::cout << j.dump(2) << "\n";
    return kOk;
  } catch (const tx::ConfigError& e) {
    return report_input(e.field, e.what());
  } catch (const tx::io::InputError& e) {
    return report_input(e.field, e.what());
  } catch (const tx::io::WriteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}

int cmd_gradcheck(const std::string& module, double eps, double tol) {
  const auto& names = tx::gradcheck_modules();
  if (std::find(names.begin(), names.end(), module) == names.end()) {
    std::cerr << "error: unknown module '" << module << "'; valid modules:";
    for (const auto& n : names) std::cerr << " " << n;
    std::cerr << "\n";
    return kUsage;
  }
  if (tol < 0.0) tol = tx::default_gradcheck_tolerance(module);
  const tx::GradCheckReport r = tx::run_gradcheck(module, eps);
  json j;
  j["module"] = module;
  j["epsilon"] = r.epsilon;
  j["tolerance"] = tol;
  j["scalars_checked"] = r.scalars_checked;
  j["max_relative_error"] = r.max_relative_error;
  j["worst_parameter"] = r.worst_parameter;
  j["worst_index"] = r.worst_index;
  j["worst_analytic"] = r.worst_analytic;
  j["worst_numeric"] = r.worst_numeric;
  j["refined_slots"] = r.refined_slots;
  j["all_finite"] = r.all_finite;
  j["passed"] = r.passed(tol);
  for (const auto& [name, err] : r.per_parameter_errors) j["per_parameter_errors"][name] = err;
  std::cout << j.dump(2) << "\n";
  if (!r.passed(tol)) {
    std::cerr << module << ": max relative error " << r.max_relative_error << " at "
              << r.worst_parameter << " exceeds " << tol << "\n";
    return kFailed;
  }
  return kOk;
}

int cmd_bench_scan(const std::vector<std::size_t>& lengths, std::size_t state, std::size_t channels,
                   std::size_t reps) {
  if (lengths.empty() || !std::is_sorted(lengths.begin(), lengths.end()) ||
      lengths.front() == 0) {
    std::cerr << "error: --lengths must be positive and ascending\n";
    return kUsage;
  }
  if (reps == 0 || state == 0 || channels == 0) {
    std::cerr << "error: --reps, --state and --channels must be >= 1\n";
    return kUsage;
  }
  const auto rows = tx::bench_scan(lengths, state, channels, reps);
  const int threads = tx::kernels::max_threads();
  std::cerr << "bench-scan: f32, " << threads << " thread(s), best of " << reps << "\n";
  std::printf("length,state,channels,threads,seq_total_ns,par_total_ns,seq_ns_per_token,"
              "par_ns_per_token,max_rel_deviation\n");
  for (const auto& r : rows) {
    const double n = static_cast<double>(r.length);
    std::printf("%zu,%zu,%zu,%d,%.0f,%.0f,%.3f,%.3f,%.3e\n", r.length, state, channels, threads,
                r.sequential_ns, r.parallel_ns, r.sequential_ns / n, r.parallel_ns / n,
                r.max_relative_deviation);
  }
  return kOk;
}

int cmd_params(const std::string& config) {
  try {
    const tx::RunConfig cfg = tx::io::load_config(config);
    json j;
    for (const auto& [name, count] : tx::parameter_counts(cfg)) j[name] = count;
    std::cout << j.dump(2) << "\n";
    return kOk;
  } catch (const tx::ConfigError& e) {
    return report_input(e.field, e.what());
  }
}

int cmd_compare(const std::string& golden_dir, const std::string& candidate_dir, double tol) {
  if (tol < 0.0) {
    std::cerr << "error: --tol must be >= 0\n";
    return kUsage;
  }
  tx::io::TensorStore golden, candidate;
  try {
    golden = tx::io::read_store(golden_dir);
    candidate = tx::io::read_store(candidate_dir);
  } catch (const tx::io::InputError& e) {
    return report_input(e.field, e.what());
  }
  bool ok = true;
  std::printf("name,status,max_abs_deviation,max_rel_deviation\n");
  std::set<std::string> golden_names;
  for (const auto& g : golden.tensors()) {
    golden_names.insert(g.name);
    if (!candidate.contains(g.name)) {
      std::printf("%s,missing,,\n", g.name.c_str());
      std::cerr << "missing tensor: " << g.name << "\n";
      ok = false;
      continue;
    }
    const auto& c = candidate.get(g.name);
    if (c.values.shape() != g.values.shape() || c.dtype != g.dtype) {
      std::printf("%s,mismatch,,\n", g.name.c_str());
      std::cerr << g.name << ": golden " << tx::shape_str(g.values.shape()) << " "
                << tx::io::dtype_name(g.dtype) << ", candidate "
                << tx::shape_str(c.values.shape()) << " " << tx::io::dtype_name(c.dtype) << "\n";
      ok = false;
      continue;
    }
    double max_abs = 0.0, max_rel = 0.0;
    bool within = true;
    for (std::size_t i = 0; i < g.values.size(); ++i) {
      const double a = c.values[i], b = g.values[i];
      if (a == b) continue;  // also covers equal infinities
      const double d = std::isnan(a) || std::isnan(b) ? std::numeric_limits<double>::infinity()
                                                      : std::abs(a - b);
      max_abs = std::max(max_abs, d);
      max_rel = std::max(max_rel, b != 0.0 ? d / std::abs(b) : d);
      if (!(d <= tol * std::max(1.0, std::abs(b)))) within = false;
    }
    std::printf("%s,%s,%.6e,%.6e\n", g.name.c_str(), within ? "ok" : "out_of_tolerance", max_abs,
                max_rel);
    if (!within) {
      std::cerr << g.name << ": max abs deviation " << max_abs << " exceeds tolerance " << tol
                << "\n";
      ok = false;
    }
  }
  for (const auto& c : candidate.tensors()) {
    if (!golden_names.count(c.name)) std::cerr << "note: extra candidate tensor " << c.name << "\n";
  }
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TextMamba numerical harness"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out, config, fixtures, module, golden, candidate;
  double eps = 1e-4, tol = -1.0, cmp_tol = 0.0;
  std::vector<std::size_t> lengths;
  std::size_t state = 16, channels = 32, reps = 3;

  auto* gen = app.add_subcommand("gen-fixtures", "Write seeded fixtures and a manifest");
  gen->add_option("--seed", seed, "RNG seed")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* fwd = app.add_subcommand("forward", "Run the full pipeline on a fixture directory");
  fwd->add_option("--config", config, "Run config (JSON)")->required();
  fwd->add_option("--fixtures", fixtures, "Fixture directory")->required();
  fwd->add_option("--out", out, "Output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of one module");
  gc->add_option("--module", module, "s6, ss2d, attn, dsffn, epem, mask_head, refine, losses, e2e")
      ->required();
  gc->add_option("--eps", eps, "Central-difference step")->check(CLI::PositiveNumber);
  gc->add_option("--tol", tol, "Max relative error (default 1e-4, e2e 1e-3)");

  auto* bench = app.add_subcommand("bench-scan", "Sequential vs parallel selective scan (CSV)");
  bench->add_option("--lengths", lengths, "Comma-separated ascending lengths")
      ->required()
      ->delimiter(',');
  bench->add_option("--state", state, "State dimension N");
  bench->add_option("--channels", channels, "Channel count C");
  bench->add_option("--reps", reps, "Repetitions (best is reported)");

  auto* params = app.add_subcommand("params", "Per-module parameter counts (JSON)");
  params->add_option("--config", config, "Run config (JSON)")->required();

  auto* cmp = app.add_subcommand("compare", "Compare two tensor directories");
  cmp->add_option("--golden", golden, "Reference directory")->required();
  cmp->add_option("--candidate", candidate, "Directory under test")->required();
  cmp->add_option("--tol", cmp_tol, "Allowed |a-b| / max(1, |golden|); 0 = bit-exact");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_fixtures(seed, out);
    if (*fwd) return cmd_forward(config, fixtures, out);
    if (*gc) return cmd_gradcheck(module, eps, tol);
    if (*bench) return cmd_bench_scan(lengths, state, channels, reps);
    if (*params) return cmd_params(config);
    if (*cmp) return cmd_compare(golden, candidate, cmp_tol);
  } catch (const tx::ShapeError& e) {
    return report_input("shape", e.what());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
