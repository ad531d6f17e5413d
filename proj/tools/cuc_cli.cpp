// cuc: batch front-end for calibration, single runs, sweeps, analysis and the
// mutual-information bound check.
//
// Exit codes: 0 ok, 1 usage or config error, 2 calibration error (including a
// missing or mismatched snapshot), 3 invariant violation.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "cuc/oracle.hpp"
#include "cuc/sweep.hpp"

namespace {

using namespace cuc;

enum Exit { kOk = 0, kUsage = 1, kCalibration = 2, kInvariant = 3 };

struct Common {
  std::string config;
  std::string env = "DriftBot";
  std::string out_dir;
  std::string snapshot;
};

void add_common(CLI::App* sub, Common& c, bool with_snapshot) {
  sub->add_option("-c,--config", c.config, "JSON config (see configs/schema.json); defaults apply when omitted")
      ->check(CLI::ExistingFile);
  sub->add_option("-e,--env", c.env, "environment when no config is given")
      ->check(CLI::IsMember({"DriftBot", "MassSpring1D"}))
      ->capture_default_str();
  sub->add_option("-o,--out-dir", c.out_dir, "output directory (overrides config output_dir)");
  if (with_snapshot)
    sub->add_option("-s,--snapshot", c.snapshot, "calibration snapshot (default <out-dir>/calibration.json)");
}

ExperimentConfig resolve_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? default_config(parse_env_id(c.env)) : load_config(c.config);
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  return cfg;
}

fs::path snapshot_path(const Common& c, const ExperimentConfig& cfg) {
  return c.snapshot.empty() ? fs::path(cfg.output_dir) / "calibration.json" : fs::path(c.snapshot);
}

Calibration open_snapshot(const Common& c, const ExperimentConfig& cfg) {
  fs::path p = snapshot_path(c, cfg);
  Snapshot s;
  try {
    s = load_snapshot(p);
  } catch (const ConfigError& e) {
    throw CalibrationError(std::string(e.what()) + " (run `cuc calibrate` first)");
  }
  if (s.env != cfg.env) throw CalibrationError("snapshot " + p.string() + " was calibrated for another environment");
  if (s.config_hash != config_hash(cfg))
    throw CalibrationError("snapshot " + p.string() + " was produced by config " + s.config_hash +
                           ", current config hashes to " + config_hash(cfg));
  return std::move(s.calibration);
}

int cmd_calibrate(const Common& c) {
  ExperimentConfig cfg = resolve_config(c);
  Calibration cal = calibrate(cfg);
  fs::path p = snapshot_path(c, cfg);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  save_snapshot(p, cfg, cal);
  const auto& nf = *cal.model.noise_floor();
  std::cout << "snapshot " << p.string() << "\n"
            << "config_hash " << config_hash(cfg) << "\n"
            << "noise_floor mu0=" << nf.mu0 << " sigma0=" << nf.sigma0 << "\n"
            << "thresholds tau_low=" << cal.thresholds.tau_low << " tau_high=" << cal.thresholds.tau_high << "\n";
  return kOk;
}

struct RunArgs {
  double po = 0.0;
  int tau = 0;
  std::string shift;  // param=value
  std::uint64_t seed = 1;
  std::string policy = "adaptive";
  int steps = 0;
  std::string out;
};

std::optional<ShiftSpec> parse_shift(const std::string& s, int onset) {
  if (s.empty()) return std::nullopt;
  auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--shift expects param=value, got '" + s + "'");
  double v = 0.0;
  try {
    std::size_t used = 0;
    v = std::stod(s.substr(eq + 1), &used);
    if (used != s.size() - eq - 1) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw ConfigError("--shift value is not a number: '" + s + "'");
  }
  return ShiftSpec{s.substr(0, eq), v, onset};
}

PolicyMode parse_policy(const std::string& s) {
  if (s == "adaptive") return PolicyMode::Adaptive;
  if (s == "task") return PolicyMode::Task;
  return PolicyMode::Excitation;
}

int cmd_run(const Common& c, const RunArgs& a) {
  ExperimentConfig cfg = resolve_config(c);
  const std::optional<ShiftSpec> shift[] = {parse_shift(a.shift, cfg.grid.onset)};
  Calibration cal = open_snapshot(c, cfg);
  const double po[] = {a.po};
  const int tau[] = {a.tau};
  const std::uint64_t seed[] = {a.seed};
  ConditionCell cell = condition_matrix(cfg.env, po, tau, shift, seed, cfg.grid.onset).front();

  PolicyMode mode = parse_policy(a.policy);
  EpisodeOptions eo;
  eo.mode = mode;
  eo.adapt = mode == PolicyMode::Adaptive;
  eo.max_steps = a.steps;
  EpisodeResult r = run_episode(cfg, cal.model, cal.thresholds, cell.condition, a.seed, eo);

  const std::string hash = config_hash(cfg);
  fs::path out = a.out;
  if (out.empty()) {
    char name[160];
    std::snprintf(name, sizeof name, "%s_po%g_tau%d_%s_seed%llu.%s.jsonl", cell.condition.label.c_str(), a.po, a.tau,
                  a.shift.empty() ? "noshift" : a.shift.c_str(), static_cast<unsigned long long>(a.seed),
                  std::string(to_string(mode)).c_str());
    out = fs::path(cfg.output_dir) / "runs" / name;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_atomic(out, trace_jsonl(r, hash, mode));

  std::printf("trace %s\nlabel %s  return %.6g  post_onset_kappa %.6g (%s)  budget_violations %d\n",
              out.string().c_str(), cell.condition.label.c_str(), r.episode_return, r.post_onset_kappa,
              std::string(to_string(classify_regime(r.post_onset_kappa, cal.thresholds))).c_str(),
              r.budget_violations);
  for (const auto& k : r.kappa)
    if (!std::isfinite(k.kappa)) {
      std::fprintf(stderr, "non-finite kappa at t=%d\n", k.t);
      return kInvariant;
    }
  return r.budget_violations > 0 ? kInvariant : kOk;
}

void print_report_summary(const json& rep) {
  for (const auto& [policy, arm] : rep.at("policies").items()) {
    std::cout << "[" << policy << "] cells=" << arm.at("n_cells") << " records=" << arm.at("n_records")
              << " budget_violations=" << arm.at("budget_violations") << "\n";
    for (const auto& [label, v] : arm.at("label_kappa").items())
      std::cout << "  " << label << " kappa=" << v.at("mean").get<double>() << " (" << v.at("regime").get<std::string>()
                << ", n=" << v.at("n") << ")\n";
    if (arm.contains("synergy_fraction")) {
      const auto& s = arm["synergy_fraction"];
      std::cout << "  super-additive " << s.at("n_superadditive") << "/" << s.at("n_configs");
      if (s.at("mean_synergy_frac").is_number())
        std::cout << "  mean synergy_frac=" << s["mean_synergy_frac"].get<double>();
      std::cout << "\n";
    }
  }
}

int cmd_sweep(const Common& c, int workers, std::size_t max_cells, bool no_traces) {
  ExperimentConfig cfg = resolve_config(c);
  Calibration cal = open_snapshot(c, cfg);
  SweepOptions so;
  so.out_dir = cfg.output_dir;
  so.workers = workers > 0 ? workers : cfg.workers;
  so.max_cells = max_cells;
  so.write_traces = !no_traces;
  SweepOutcome out = run_sweep(cfg, cal, so);
  std::cout << "ran " << out.ran << " resumed " << out.resumed << " of " << cfg.grid.size() * kSweepArms.size()
            << " cell runs\n";
  if (!out.complete) {
    std::cout << "incomplete; rerun the same command to resume\n";
    return kOk;
  }
  print_report_summary(out.report);
  std::cout << "report " << (fs::path(cfg.output_dir) / "report.json").string() << "\n";
  return out.arms[PolicyMode::Adaptive].budget_violations > 0 ? kInvariant : kOk;
}

int cmd_analyze(const Common& c) {
  ExperimentConfig cfg = resolve_config(c);
  Calibration cal = open_snapshot(c, cfg);
  auto cells = load_cells(cfg, cfg.output_dir);
  if (cells.empty()) throw ConfigError("no cell checkpoints under " + cfg.output_dir + "/cells");
  const std::string hash = config_hash(cfg);
  std::map<PolicyMode, ArmAnalysis> arms;
  json rep = analysis_report(cells, cfg, cal, hash, arms);
  const bool complete = cells.size() == cfg.grid.size() * kSweepArms.size();
  rep["complete"] = complete;
  fs::path dir = cfg.output_dir;
  write_atomic(dir / "summary.csv", summary_csv(cells, hash, cfg.seed));
  write_atomic(dir / "degradation.csv", degradation_csv(arms, hash, cfg.seed));
  write_atomic(dir / "report.json", rep.dump(1) + "\n");
  if (!complete) std::cout << "partial sweep: " << cells.size() << " cell runs\n";
  print_report_summary(rep);
  return arms[PolicyMode::Adaptive].budget_violations > 0 ? kInvariant : kOk;
}

struct OracleArgs {
  long long samples = 10000;
  std::uint64_t seed = 1;
  int n_s = 3;
  int n_theta = 3;
  std::string out;
  std::string coupling_out;
  int grid = 101;
};

int cmd_oracle_check(const OracleArgs& a) {
  if (a.samples < 1) {
    std::fprintf(stderr, "--samples must be >= 1\n");
    return kUsage;
  }
  std::mt19937_64 rng(a.seed);
  std::ostringstream csv;
  csv << "# version=" << kToolkitVersion << " seed=" << a.seed << " n_s=" << a.n_s << " n_theta=" << a.n_theta << "\n"
      << "seed,sample,mi,bound,slack,h_joint,holds\n";
  long long violations = 0;
  double worst_slack_err = 0.0;
  for (long long i = 0; i < a.samples; ++i) {
    auto b = random_belief(a.n_s, a.n_theta, rng);
    auto chk = verify_bound(b);
    double hj = marginal_entropies(b).h_joint;
    worst_slack_err = std::max(worst_slack_err, std::abs(chk.slack - hj));
    if (!chk.holds) ++violations;
    csv << a.seed << "," << i << "," << csv_num(chk.mi) << "," << csv_num(chk.bound) << "," << csv_num(chk.slack) << ","
        << csv_num(hj) << "," << (chk.holds ? 1 : 0) << "\n";
  }
  if (a.out.empty())
    std::cout << csv.str();
  else
    write_atomic(a.out, csv.str());

  long long inversions = 0;
  if (!a.coupling_out.empty()) {
    std::ostringstream cc;
    cc << "# version=" << kToolkitVersion << "\nn,lambda,mi,bound,monotone\n";
    for (int n : {2, 4, 8}) {
      double prev = -1.0;
      for (int k = 0; k < a.grid; ++k) {
        double lam = a.grid == 1 ? 0.0 : static_cast<double>(k) / (a.grid - 1);
        auto chk = verify_bound(coupling_family(lam, n));
        bool mono = chk.mi >= prev - 1e-12;
        if (!mono) ++inversions;
        prev = chk.mi;
        cc << n << "," << csv_num(lam) << "," << csv_num(chk.mi) << "," << csv_num(chk.bound) << "," << (mono ? 1 : 0)
           << "\n";
      }
    }
    write_atomic(a.coupling_out, cc.str());
  }
  std::fprintf(stderr, "samples %lld  violations %lld  max |slack - H_joint| %.3g  coupling inversions %lld\n",
               a.samples, violations, worst_slack_err, inversions);
  return violations > 0 || inversions > 0 || worst_slack_err > kBoundTolerance ? kInvariant : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compound uncertainty toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolkitVersion));

  Common common;
  auto* cal = app.add_subcommand("calibrate", "train the baseline ensemble and calibrate thresholds");
  add_common(cal, common, true);

  RunArgs ra;
  auto* run = app.add_subcommand("run", "run one episode and write its JSONL trace");
  add_common(run, common, true);
  run->add_option("--po", ra.po, "masked fraction of observation dimensions")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  run->add_option("--tau", ra.tau, "action delay in steps")->check(CLI::NonNegativeNumber)->capture_default_str();
  run->add_option("--shift", ra.shift, "dynamics shift as param=value, e.g. left_gain=0.5");
  run->add_option("--seed", ra.seed, "episode seed")->capture_default_str();
  run->add_option("--policy", ra.policy, "action selection")
      ->check(CLI::IsMember({"adaptive", "task", "excitation"}))
      ->capture_default_str();
  run->add_option("--steps", ra.steps, "stop after this many steps (0: horizon)")->check(CLI::NonNegativeNumber);
  run->add_option("--trace", ra.out, "trace path (default <out-dir>/runs/<cell>.jsonl)");

  int workers = 0;
  std::size_t max_cells = 0;
  bool no_traces = false;
  auto* sweep = app.add_subcommand("sweep", "run the condition matrix under both policies, then analyze");
  add_common(sweep, common, true);
  sweep->add_option("-j,--workers", workers, "parallel cells (default: config workers)")->check(CLI::PositiveNumber);
  sweep->add_option("--max-cells", max_cells, "stop after this many new cell runs; rerun to resume");
  sweep->add_flag("--no-traces", no_traces, "skip per-step JSONL traces");

  auto* analyze = app.add_subcommand("analyze", "recompute the report from cell checkpoints");
  add_common(analyze, common, true);

  OracleArgs oa;
  auto* oracle = app.add_subcommand("oracle-check", "verify I(s;theta) <= H(s) + H(theta) on random beliefs");
  oracle->add_option("-n,--samples", oa.samples, "number of Dirichlet beliefs")->capture_default_str();
  oracle->add_option("--seed", oa.seed, "sampler seed")->capture_default_str();
  oracle->add_option("--n-s", oa.n_s, "state support size")->check(CLI::PositiveNumber)->capture_default_str();
  oracle->add_option("--n-theta", oa.n_theta, "parameter support size")->check(CLI::PositiveNumber)->capture_default_str();
  oracle->add_option("--csv", oa.out, "write the per-sample CSV here instead of stdout");
  oracle->add_option("--coupling-csv", oa.coupling_out, "also sweep the coupling family and write its CSV");
  oracle->add_option("--grid", oa.grid, "lambda grid points for the coupling sweep")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*cal) return cmd_calibrate(common);
    if (*run) return cmd_run(common, ra);
    if (*sweep) return cmd_sweep(common, workers, max_cells, no_traces);
    if (*analyze) return cmd_analyze(common);
    if (*oracle) return cmd_oracle_check(oa);
  } catch (const CalibrationError& e) {
    std::fprintf(stderr, "calibration error: %s\n", e.what());
    return kCalibration;
  } catch (const LifecycleError& e) {
    std::fprintf(stderr, "invariant violation: %s\n", e.what());
    return kInvariant;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const SpecError& e) {
    std::fprintf(stderr, "bad condition: %s\n", e.what());
    return kUsage;
  } catch (const ParameterDomainError& e) {
    std::fprintf(stderr, "parameter out of range: %s\n", e.what());
    return kUsage;
  } catch (const InputError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvariant;
  }
  return kUsage;
}
