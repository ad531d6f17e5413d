#pragma once

// Condition-matrix sweep: independent cells on a worker pool, one checkpoint
// per cell, analysis after the join.

#include <array>
#include <atomic>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <thread>
#include <tuple>

#include "cuc/analysis.hpp"
#include "cuc/experiment.hpp"
#include "cuc/io.hpp"

namespace cuc {

// Every cell runs under both policies: the fixed task policy (the degradation
// analysis) and the regime-adaptive policy (budget compliance, mitigation).
inline constexpr std::array<PolicyMode, 2> kSweepArms{PolicyMode::Task, PolicyMode::Adaptive};

inline EpisodeOptions arm_options(PolicyMode mode, bool keep_steps) {
  EpisodeOptions eo;
  eo.mode = mode;
  eo.adapt = mode == PolicyMode::Adaptive;
  eo.keep_steps = keep_steps;
  return eo;
}

struct CellResult {
  ConditionCell cell;
  PolicyMode policy = PolicyMode::Task;
  std::string id;
  double episode_return = 0.0;
  double post_onset_kappa = 0.0;
  double post_onset_kappa_windowed = 0.0;
  double post_onset_sigma_theta = 0.0;
  double post_onset_sigma_s = 0.0;
  double post_onset_mse = 0.0;
  double kappa_peak = 0.0;
  int kappa_peak_t = 0;
  int budget_violations = 0;
  int fallbacks = 0;
  int steps = 0;
};

inline std::string cell_id(const ConditionCell& c, PolicyMode policy) {
  char buf[112];
  std::snprintf(buf, sizeof buf, "po%g_tau%d_shift%d_seed%llu.%s", c.po, c.tau, c.shift_index,
                static_cast<unsigned long long>(c.seed), std::string(to_string(policy)).c_str());
  return buf;
}

inline CellResult summarize(const ConditionCell& cell, PolicyMode policy, const EpisodeResult& r) {
  CellResult c;
  c.cell = cell;
  c.policy = policy;
  c.id = cell_id(cell, policy);
  c.episode_return = r.episode_return;
  c.post_onset_kappa = r.post_onset_kappa;
  c.post_onset_kappa_windowed = r.post_onset_kappa_windowed;
  c.post_onset_sigma_theta = r.post_onset_sigma_theta;
  c.post_onset_sigma_s = r.post_onset_sigma_s;
  c.post_onset_mse = r.post_onset_mse;
  c.kappa_peak = r.kappa_peak;
  c.kappa_peak_t = r.kappa_peak_t;
  c.budget_violations = r.budget_violations;
  c.fallbacks = r.fallbacks;
  c.steps = r.n_steps;
  return c;
}

inline json cell_json(const CellResult& c, const std::string& hash) {
  json j = provenance(hash, c.cell.seed);
  j["kind"] = "cell";
  j["id"] = c.id;
  j["policy"] = std::string(to_string(c.policy));
  j["label"] = c.cell.condition.label;
  j["po"] = c.cell.po;
  j["tau"] = c.cell.tau;
  j["shift_index"] = c.cell.shift_index;
  j["return"] = c.episode_return;
  j["post_onset_kappa"] = c.post_onset_kappa;
  j["post_onset_kappa_windowed"] = c.post_onset_kappa_windowed;
  j["post_onset_sigma_theta"] = c.post_onset_sigma_theta;
  j["post_onset_sigma_s"] = c.post_onset_sigma_s;
  j["post_onset_mse"] = c.post_onset_mse;
  j["kappa_peak"] = c.kappa_peak;
  j["kappa_peak_t"] = c.kappa_peak_t;
  j["budget_violations"] = c.budget_violations;
  j["fallbacks"] = c.fallbacks;
  j["steps"] = c.steps;
  return j;
}

// Restores a checkpoint into `c` (whose cell is already set). False if the
// file belongs to another config.
inline bool cell_from_json(const json& j, const std::string& hash, CellResult& c) {
  if (j.value("config_hash", std::string{}) != hash || j.value("id", std::string{}) != c.id) return false;
  c.episode_return = j.at("return").get<double>();
  c.post_onset_kappa = j.at("post_onset_kappa").get<double>();
  c.post_onset_kappa_windowed = j.at("post_onset_kappa_windowed").get<double>();
  c.post_onset_sigma_theta = j.at("post_onset_sigma_theta").get<double>();
  c.post_onset_sigma_s = j.at("post_onset_sigma_s").get<double>();
  c.post_onset_mse = j.at("post_onset_mse").get<double>();
  c.kappa_peak = j.at("kappa_peak").get<double>();
  c.kappa_peak_t = j.at("kappa_peak_t").get<int>();
  c.budget_violations = j.at("budget_violations").get<int>();
  c.fallbacks = j.at("fallbacks").get<int>();
  c.steps = j.at("steps").get<int>();
  return true;
}

// One degradation record per C4 cell of the given policy, matched on seed with
// the C1 cell, the C2 cell with the same mask and the C3 cell with the same
// delay/shift.
inline std::vector<DegradationRecord> match_records(const std::vector<CellResult>& all, const ExperimentConfig& cfg,
                                                    PolicyMode policy = PolicyMode::Task) {
  std::vector<CellResult> cells;
  for (const auto& c : all)
    if (c.policy == policy) cells.push_back(c);
  int none = -1;
  for (std::size_t i = 0; i < cfg.grid.shift.size(); ++i)
    if (!cfg.grid.shift[i]) {
      none = static_cast<int>(i);
      break;
    }
  using Key = std::tuple<double, int, int, std::uint64_t>;
  std::map<Key, const CellResult*> by;
  for (const auto& c : cells) by[{c.cell.po, c.cell.tau, c.cell.shift_index, c.cell.seed}] = &c;
  auto find = [&](double po, int tau, int si, std::uint64_t seed) -> const CellResult* {
    auto it = by.find({po, tau, si, seed});
    return it == by.end() ? nullptr : it->second;
  };
  std::vector<DegradationRecord> out;
  for (const auto& c : cells) {
    if (c.cell.condition.label != "C4") continue;
    const auto& k = c.cell;
    const CellResult* c1 = none >= 0 ? find(0.0, 0, none, k.seed) : nullptr;
    const CellResult* c2 = none >= 0 ? find(k.po, 0, none, k.seed) : nullptr;
    const CellResult* c3 = find(0.0, k.tau, k.shift_index, k.seed);
    if (!c1 || !c2 || !c3) continue;
    MatchedReturns m{c.id, c1->episode_return, c2->episode_return, c3->episode_return, c.episode_return,
                     k.po, k.tau, static_cast<bool>(k.condition.shift)};
    out.push_back(degradation(m));
  }
  return out;
}

struct SweepOptions {
  fs::path out_dir = "out";
  int workers = 1;
  std::size_t max_cells = 0;  // stop after this many newly run cells (0: no limit)
  bool write_traces = true;
};

struct ArmAnalysis {
  std::vector<DegradationRecord> records;
  std::map<std::string, double> label_kappa;  // seed-averaged post-onset kappa per label
  int budget_violations = 0;
};

struct SweepOutcome {
  std::vector<CellResult> cells;  // grid order, arms adjacent; only completed cells when incomplete
  std::size_t ran = 0;
  std::size_t resumed = 0;
  bool complete = false;
  std::map<PolicyMode, ArmAnalysis> arms;
  json report;
};

inline std::string summary_csv(const std::vector<CellResult>& cells, const std::string& hash, std::uint64_t seed) {
  std::string s = csv_header_comment(hash, seed);
  s += "id,policy,label,po,tau,shift_index,seed,return,post_onset_kappa,post_onset_kappa_windowed,post_onset_sigma_theta,"
       "post_onset_sigma_s,post_onset_mse,kappa_peak,kappa_peak_t,budget_violations,fallbacks,steps\n";
  for (const auto& c : cells) {
    s += c.id + "," + std::string(to_string(c.policy)) + "," + c.cell.condition.label + "," + csv_num(c.cell.po) + "," + std::to_string(c.cell.tau) + "," +
         std::to_string(c.cell.shift_index) + "," + std::to_string(c.cell.seed) + "," + csv_num(c.episode_return) +
         "," + csv_num(c.post_onset_kappa) + "," + csv_num(c.post_onset_kappa_windowed) + "," +
         csv_num(c.post_onset_sigma_theta) + "," + csv_num(c.post_onset_sigma_s) + "," + csv_num(c.post_onset_mse) +
         "," + csv_num(c.kappa_peak) + "," + std::to_string(c.kappa_peak_t) + "," +
         std::to_string(c.budget_violations) + "," + std::to_string(c.fallbacks) + "," + std::to_string(c.steps) +
         "\n";
  }
  return s;
}

inline std::string degradation_csv(const std::map<PolicyMode, ArmAnalysis>& arms, const std::string& hash,
                                   std::uint64_t seed) {
  std::string s = csv_header_comment(hash, seed);
  s += "config_id,policy,po,tau,shifted,return_c1,return_c2,return_c3,return_c4,delta_po,delta_theta,delta_compound,"
       "synergy_frac,synergy_units,fractions_defined\n";
  for (const auto& [mode, arm] : arms)
    for (const auto& r : arm.records)
    s += r.config_id + "," + std::string(to_string(mode)) + "," + csv_num(r.po) + "," + std::to_string(r.tau) + "," + (r.shifted ? "1" : "0") + "," +
         csv_num(r.return_c1) + "," + csv_num(r.return_c2) + "," + csv_num(r.return_c3) + "," +
         csv_num(r.return_c4) + "," + csv_num(r.delta_po) + "," + csv_num(r.delta_theta) + "," +
         csv_num(r.delta_compound) + "," + csv_num(r.synergy_frac) + "," + csv_num(r.synergy_units) + "," +
         (r.fractions_defined ? "1" : "0") + "\n";
  return s;
}

// Per-arm analysis over completed cells: label means, synergy statistics,
// stratified rate tests where the strata exist.
inline json arm_report(const std::vector<CellResult>& all, PolicyMode policy, const ExperimentConfig& cfg,
                       const Calibration& cal, ArmAnalysis& arm) {
  arm.records = match_records(all, cfg, policy);
  std::map<std::string, std::vector<double>> by_label;
  arm.budget_violations = 0;
  std::size_t n = 0;
  for (const auto& c : all) {
    if (c.policy != policy) continue;
    ++n;
    by_label[c.cell.condition.label].push_back(c.post_onset_kappa);
    arm.budget_violations += c.budget_violations;
  }
  json rep;
  rep["n_cells"] = n;
  json lk = json::object();
  for (const auto& [l, v] : by_label) {
    double m = mean_of(v);
    arm.label_kappa[l] = m;
    lk[l] = {{"mean", m}, {"n", v.size()}, {"regime", std::string(to_string(classify_regime(m, cal.thresholds)))}};
  }
  rep["label_kappa"] = lk;
  rep["budget_violations"] = arm.budget_violations;
  rep["n_records"] = arm.records.size();
  const auto& records = arm.records;
  if (!records.empty()) {
    rep["synergy_fraction"] = synergy_json(superadditive_rate(records, 0.0, SynergyScale::Fraction));
    rep["synergy_units"] = synergy_json(superadditive_rate(records, 0.0, SynergyScale::Units));
    json tests = json::object();
    try {
      tests["by_delay"] = rate_test_json(stratified_rate_test(records, StratumKey::DelayLevel));
    } catch (const InputError& e) {
      tests["by_delay"] = {{"skipped", e.what()}};
    }
    try {
      tests["shift_only_vs_delayed"] = rate_test_json(stratified_rate_test(records, StratumKey::ShiftOnly));
    } catch (const InputError& e) {
      tests["shift_only_vs_delayed"] = {{"skipped", e.what()}};
    }
    rep["rate_tests"] = tests;
  } else {
    rep["note"] = "no matched C1/C2/C3/C4 quadruples in the grid";
  }
  return rep;
}

inline json analysis_report(const std::vector<CellResult>& cells, const ExperimentConfig& cfg, const Calibration& cal,
                            const std::string& hash, std::map<PolicyMode, ArmAnalysis>& arms) {
  json rep = provenance(hash, cfg.seed);
  rep["kind"] = "report";
  rep["env"] = std::string(to_string(cfg.env));
  rep["n_cells"] = cells.size();
  rep["thresholds"] = {{"tau_low", cal.thresholds.tau_low}, {"tau_high", cal.thresholds.tau_high}};
  rep["primary_policy"] = std::string(to_string(PolicyMode::Task));
  json js = json::object();
  for (PolicyMode m : kSweepArms) js[std::string(to_string(m))] = arm_report(cells, m, cfg, cal, arms[m]);
  rep["policies"] = js;
  return rep;
}

inline SweepOutcome run_sweep(const ExperimentConfig& cfg, const Calibration& cal, const SweepOptions& opt) {
  if (opt.workers < 1) throw ConfigError("workers must be >= 1");
  const std::string hash = config_hash(cfg);
  auto grid = condition_matrix(cfg.env, cfg.grid.po, cfg.grid.delay, cfg.grid.shift, cfg.grid.seeds, cfg.grid.onset);
  const fs::path cell_dir = opt.out_dir / "cells";
  fs::create_directories(cell_dir);

  const std::size_t n_arms = kSweepArms.size();
  std::vector<std::optional<CellResult>> results(grid.size() * n_arms);
  std::vector<std::size_t> pending;
  SweepOutcome out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    CellResult c;
    c.cell = grid[i / n_arms];
    c.policy = kSweepArms[i % n_arms];
    c.id = cell_id(c.cell, c.policy);
    fs::path ck = cell_dir / (c.id + ".json");
    if (fs::exists(ck)) {
      json j;
      try {
        j = json::parse(read_file(ck));
      } catch (const json::exception&) {
        pending.push_back(i);  // torn or foreign file: recompute
        continue;
      }
      if (!cell_from_json(j, hash, c))
        throw ConfigError("output directory holds results from a different config: " + ck.string());
      results[i] = c;
      ++out.resumed;
    } else {
      pending.push_back(i);
    }
  }
  if (opt.max_cells > 0 && pending.size() > opt.max_cells) pending.resize(opt.max_cells);

  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto worker = [&] {
    for (;;) {
      std::size_t k = next.fetch_add(1);
      if (k >= pending.size()) return;
      {
        std::lock_guard<std::mutex> lk(err_mu);
        if (err) return;
      }
      std::size_t i = pending[k];
      const auto& g = grid[i / n_arms];
      try {
        PolicyMode mode = kSweepArms[i % n_arms];
        EpisodeOptions eo = arm_options(mode, opt.write_traces);
        auto r = run_episode(cfg, cal.model, cal.thresholds, g.condition, g.seed, eo);
        CellResult c = summarize(g, mode, r);
        if (opt.write_traces) write_atomic(cell_dir / (c.id + ".jsonl"), trace_jsonl(r, hash, eo.mode));
        write_atomic(cell_dir / (c.id + ".json"), cell_json(c, hash).dump(1) + "\n");
        results[i] = std::move(c);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  const int n_workers = std::min<int>(opt.workers, static_cast<int>(std::max<std::size_t>(pending.size(), 1)));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (err) std::rethrow_exception(err);
  out.ran = pending.size();

  for (auto& r : results)
    if (r) out.cells.push_back(*r);
  out.complete = out.cells.size() == results.size();
  if (!out.complete) return out;

  out.report = analysis_report(out.cells, cfg, cal, hash, out.arms);
  write_atomic(opt.out_dir / "summary.csv", summary_csv(out.cells, hash, cfg.seed));
  write_atomic(opt.out_dir / "degradation.csv", degradation_csv(out.arms, hash, cfg.seed));
  write_atomic(opt.out_dir / "report.json", out.report.dump(1) + "\n");
  return out;
}

// Re-reads the cell checkpoints of a finished (or partial) sweep directory.
inline std::vector<CellResult> load_cells(const ExperimentConfig& cfg, const fs::path& out_dir) {
  const std::string hash = config_hash(cfg);
  auto grid = condition_matrix(cfg.env, cfg.grid.po, cfg.grid.delay, cfg.grid.shift, cfg.grid.seeds, cfg.grid.onset);
  std::vector<CellResult> cells;
  for (const auto& g : grid)
    for (PolicyMode m : kSweepArms) {
      CellResult c;
      c.cell = g;
      c.policy = m;
      c.id = cell_id(g, m);
      fs::path ck = out_dir / "cells" / (c.id + ".json");
      if (!fs::exists(ck)) continue;
      if (!cell_from_json(json::parse(read_file(ck)), hash, c))
        throw ConfigError("cell checkpoint from a different config: " + ck.string());
      cells.push_back(std::move(c));
    }
  return cells;
}

}  // namespace cuc
