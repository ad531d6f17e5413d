#pragma once

// Config, snapshot, trace and table persistence. Every file carries the
// toolkit version, the config hash and the seed.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "cuc/analysis.hpp"
#include "cuc/error.hpp"
#include "cuc/experiment.hpp"

namespace cuc {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// ---- config ---------------------------------------------------------------

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline json vec_json(const Vec& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vec json_vec(const json& j) {
  auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

inline json mat_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) r[static_cast<std::size_t>(c)] = m(i, c);
    rows.push_back(r);
  }
  return rows;
}

inline Eigen::MatrixXd json_mat(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& r = j[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(r.size()) != cols) throw ConfigError("ragged matrix in snapshot");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = r[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace detail

inline json shift_json(const std::optional<ShiftSpec>& s) {
  if (!s) return nullptr;
  return {{"param", s->param}, {"value", s->value}};
}

inline json hyper_json(const EnsembleHyper& h) {
  return {{"members", h.members}, {"hidden", h.hidden},     {"epochs", h.epochs},     {"lr", h.lr},
          {"batch", h.batch},     {"t_pre", h.t_pre},       {"adapt_lr", h.adapt_lr}, {"adapt_epochs", h.adapt_epochs}};
}

inline EnsembleHyper hyper_from_json(const json& j, EnsembleHyper h = {}) {
  const std::string w = "ensemble";
  detail::check_keys(j, {"members", "hidden", "epochs", "lr", "batch", "t_pre", "adapt_lr", "adapt_epochs"}, w);
  detail::read(j, "members", h.members, w);
  detail::read(j, "hidden", h.hidden, w);
  detail::read(j, "epochs", h.epochs, w);
  detail::read(j, "lr", h.lr, w);
  detail::read(j, "batch", h.batch, w);
  detail::read(j, "t_pre", h.t_pre, w);
  detail::read(j, "adapt_lr", h.adapt_lr, w);
  detail::read(j, "adapt_epochs", h.adapt_epochs, w);
  if (h.members < 2 || h.hidden < 1 || h.epochs < 0 || h.batch < 1 || !(h.lr > 0.0) || !(h.adapt_lr > 0.0) ||
      h.adapt_epochs < 0)
    throw ConfigError("ensemble: hyperparameter out of range");
  return h;
}

// Full config as JSON (every field, defaults included).
inline json config_to_json(const ExperimentConfig& c) {
  json theta = json::object();
  for (const auto& [k, v] : c.theta.values()) theta[k] = v;
  json shifts = json::array();
  for (const auto& s : c.grid.shift) shifts.push_back(shift_json(s));
  json j = {
      {"env", std::string(to_string(c.env))},
      {"theta", theta},
      {"horizon", c.horizon},
      {"seed", c.seed},
      {"grid",
       {{"po", c.grid.po}, {"delay", c.grid.delay}, {"shift", shifts}, {"seeds", c.grid.seeds}, {"onset", c.grid.onset}}},
      {"calibration_seeds", c.calibration_seeds},
      {"ensemble", hyper_json(c.ensemble)},
      {"clip", c.clip},
      {"c_tau", c.c_tau},
      {"policy",
       {{"candidates", c.policy.candidates},
        {"alpha_max", c.policy.alpha_max},
        {"delta_max", c.policy.delta_max},
        {"lambda", c.policy.lambda}}},
      {"run",
       {{"kappa_window", c.run.kappa_window},
        {"adapt_every", c.run.adapt_every},
        {"probe_window", c.run.probe_window},
        {"excitation", c.run.excitation}}},
      {"thresholds", c.thresholds ? json{{"tau_low", c.thresholds->tau_low}, {"tau_high", c.thresholds->tau_high}}
                                  : json(nullptr)},
      {"output_dir", c.output_dir},
      {"workers", c.workers},
  };
  return j;
}

// Missing keys take the defaults of the selected environment; unknown keys
// and out-of-range values are errors.
inline ExperimentConfig config_from_json(const json& j) {
  const std::string w = "config";
  detail::check_keys(j,
                     {"env", "theta", "horizon", "seed", "grid", "calibration_seeds", "ensemble", "clip", "c_tau",
                      "policy", "run", "thresholds", "output_dir", "workers"},
                     w);
  EnvId env = EnvId::DriftBot;
  if (j.contains("env")) {
    try {
      env = parse_env_id(j["env"].get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config.env: ") + e.what());
    }
  }
  ExperimentConfig c = default_config(env);
  if (j.contains("theta")) {
    const auto& t = j["theta"];
    if (!t.is_object()) throw ConfigError("config.theta: expected an object");
    for (const auto& [k, v] : t.items()) {
      if (!c.theta.contains(k)) throw ConfigError("config.theta: unknown parameter '" + k + "'");
      if (!v.is_number()) throw ConfigError("config.theta." + k + ": expected a number");
      c.theta.set(k, v.get<double>());
    }
    try {
      validate_params(c.theta, param_bounds(env));
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config.theta: ") + e.what());
    }
  }
  detail::read(j, "horizon", c.horizon, w);
  detail::read(j, "seed", c.seed, w);
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    detail::check_keys(g, {"po", "delay", "shift", "seeds", "onset"}, "config.grid");
    detail::read(g, "po", c.grid.po, "config.grid");
    detail::read(g, "delay", c.grid.delay, "config.grid");
    detail::read(g, "seeds", c.grid.seeds, "config.grid");
    detail::read(g, "onset", c.grid.onset, "config.grid");
    if (g.contains("shift")) {
      if (!g["shift"].is_array()) throw ConfigError("config.grid.shift: expected an array");
      c.grid.shift.clear();
      for (const auto& s : g["shift"]) {
        if (s.is_null()) {
          c.grid.shift.push_back(std::nullopt);
          continue;
        }
        detail::check_keys(s, {"param", "value"}, "config.grid.shift[]");
        ShiftSpec sp;
        detail::read(s, "param", sp.param, "config.grid.shift[]");
        detail::read(s, "value", sp.value, "config.grid.shift[]");
        sp.onset_t = c.grid.onset;
        try {
          sp.validate(env);
        } catch (const std::exception& e) {
          throw ConfigError(std::string("config.grid.shift: ") + e.what());
        }
        c.grid.shift.push_back(sp);
      }
    }
  }
  for (auto& s : c.grid.shift)
    if (s) s->onset_t = c.grid.onset;
  detail::read(j, "calibration_seeds", c.calibration_seeds, w);
  if (j.contains("ensemble")) c.ensemble = hyper_from_json(j["ensemble"], c.ensemble);
  detail::read(j, "clip", c.clip, w);
  detail::read(j, "c_tau", c.c_tau, w);
  if (j.contains("policy")) {
    const auto& p = j["policy"];
    detail::check_keys(p, {"candidates", "alpha_max", "delta_max", "lambda"}, "config.policy");
    detail::read(p, "candidates", c.policy.candidates, "config.policy");
    detail::read(p, "alpha_max", c.policy.alpha_max, "config.policy");
    detail::read(p, "delta_max", c.policy.delta_max, "config.policy");
    detail::read(p, "lambda", c.policy.lambda, "config.policy");
  }
  if (j.contains("run")) {
    const auto& r = j["run"];
    detail::check_keys(r, {"kappa_window", "adapt_every", "probe_window", "excitation"}, "config.run");
    detail::read(r, "kappa_window", c.run.kappa_window, "config.run");
    detail::read(r, "adapt_every", c.run.adapt_every, "config.run");
    detail::read(r, "probe_window", c.run.probe_window, "config.run");
    detail::read(r, "excitation", c.run.excitation, "config.run");
  }
  if (j.contains("thresholds") && !j["thresholds"].is_null()) {
    const auto& t = j["thresholds"];
    detail::check_keys(t, {"tau_low", "tau_high"}, "config.thresholds");
    RegimeThresholds thr;
    detail::read(t, "tau_low", thr.tau_low, "config.thresholds");
    detail::read(t, "tau_high", thr.tau_high, "config.thresholds");
    try {
      thr.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config.thresholds: ") + e.what());
    }
    c.thresholds = thr;
  }
  detail::read(j, "output_dir", c.output_dir, w);
  detail::read(j, "workers", c.workers, w);

  if (c.horizon < 1) throw ConfigError("config.horizon must be >= 1");
  if (c.grid.onset < 0 || c.grid.onset >= c.horizon) throw ConfigError("config.grid.onset must lie in [0, horizon)");
  if (!(c.clip > 0.0)) throw ConfigError("config.clip must be positive");
  if (!(c.c_tau >= 0.0)) throw ConfigError("config.c_tau must be >= 0");
  if (c.policy.candidates < 2 || !(c.policy.alpha_max > 0.0) || !(c.policy.delta_max > 0.0) ||
      !(c.policy.lambda >= 0.0))
    throw ConfigError("config.policy: value out of range");
  if (c.run.kappa_window < 1 || c.run.adapt_every < 0 || c.run.probe_window < 1 || !(c.run.excitation >= 0.0))
    throw ConfigError("config.run: value out of range");
  if (c.workers < 1) throw ConfigError("config.workers must be >= 1");
  for (int d : c.grid.delay)
    if (d < 0) throw ConfigError("config.grid.delay: levels must be >= 0");
  for (double po : c.grid.po) {
    try {
      mask_for_po(env, po, c.grid.onset);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config.grid.po: ") + e.what());
    }
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// Hash over the fields that affect results (not output location or worker count).
inline std::string config_hash(const ExperimentConfig& c) {
  json j = config_to_json(c);
  j.erase("output_dir");
  j.erase("workers");
  return hex64(fnv1a(j.dump()));
}

inline json provenance(const std::string& hash, std::uint64_t seed) {
  return {{"version", kToolkitVersion}, {"config_hash", hash}, {"seed", seed}};
}

// ---- atomic file writes -----------------------------------------------------

inline void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << content;
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---- snapshot ---------------------------------------------------------------

inline constexpr const char* kSnapshotFormat = "cuc-snapshot";

inline json snapshot_to_json(const ExperimentConfig& cfg, const Calibration& cal) {
  const auto& m = cal.model;
  const auto& nz = m.normalizer();
  json members = json::array();
  for (const auto& p : m.members())
    members.push_back({{"w1", detail::mat_json(p.w1)},
                       {"b1", detail::vec_json(p.b1)},
                       {"w2", detail::mat_json(p.w2)},
                       {"b2", detail::vec_json(p.b2)}});
  json labels = json::object();
  for (const auto& [l, v] : cal.label_means) labels[l] = v;
  json j = provenance(config_hash(cfg), cfg.seed);
  j["format"] = kSnapshotFormat;
  j["env"] = std::string(to_string(cfg.env));
  j["hyper"] = hyper_json(m.hyper());
  j["normalizer"] = {{"in_mean", detail::vec_json(nz.in_mean)},
                     {"in_scale", detail::vec_json(nz.in_scale)},
                     {"out_mean", detail::vec_json(nz.out_mean)},
                     {"out_scale", detail::vec_json(nz.out_scale)}};
  j["members"] = members;
  j["noise_floor"] = {{"mu0", m.noise_floor()->mu0}, {"sigma0", m.noise_floor()->sigma0}};
  j["thresholds"] = {{"tau_low", cal.thresholds.tau_low}, {"tau_high", cal.thresholds.tau_high}};
  j["clip"] = cal.clip;
  j["c_tau"] = cal.c_tau;
  j["calibration_label_means"] = labels;
  j["c1_p95"] = cal.c1_p95;
  j["weights_hash"] = hex64(m.weights_hash());
  return j;
}

struct Snapshot {
  Calibration calibration;
  EnvId env = EnvId::DriftBot;
  std::string config_hash;
};

inline Snapshot snapshot_from_json(const json& j) {
  try {
    if (j.value("format", std::string{}) != kSnapshotFormat) throw ConfigError("not a calibration snapshot");
    Snapshot s;
    s.env = parse_env_id(j.at("env").get<std::string>());
    s.config_hash = j.at("config_hash").get<std::string>();
    EnsembleHyper h = hyper_from_json(j.at("hyper"));
    const auto& nj = j.at("normalizer");
    Normalizer nz{detail::json_vec(nj.at("in_mean")), detail::json_vec(nj.at("in_scale")),
                  detail::json_vec(nj.at("out_mean")), detail::json_vec(nj.at("out_scale"))};
    std::vector<Predictor> members;
    for (const auto& mj : j.at("members")) {
      Predictor p;
      p.w1 = detail::json_mat(mj.at("w1"));
      p.b1 = detail::json_vec(mj.at("b1"));
      p.w2 = detail::json_mat(mj.at("w2"));
      p.b2 = detail::json_vec(mj.at("b2"));
      if (p.b1.size() != p.w1.rows() || p.w2.cols() != p.w1.rows() || p.b2.size() != p.w2.rows())
        throw ConfigError("snapshot member has inconsistent shapes");
      members.push_back(std::move(p));
    }
    auto& cal = s.calibration;
    cal.model = EnsembleModel(std::move(members), std::move(nz), h, j.at("seed").get<std::uint64_t>());
    cal.model.set_noise_floor({j.at("noise_floor").at("mu0").get<double>(), j.at("noise_floor").at("sigma0").get<double>()});
    cal.model.freeze();
    cal.thresholds = {j.at("thresholds").at("tau_low").get<double>(), j.at("thresholds").at("tau_high").get<double>()};
    cal.thresholds.validate();
    cal.clip = j.at("clip").get<double>();
    cal.c_tau = j.at("c_tau").get<double>();
    for (const auto& [l, v] : j.at("calibration_label_means").items()) cal.label_means[l] = v.get<double>();
    cal.c1_p95 = j.at("c1_p95").get<double>();
    if (j.contains("weights_hash") && j["weights_hash"].get<std::string>() != hex64(cal.model.weights_hash()))
      throw ConfigError("snapshot weights do not match their recorded hash");
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed snapshot: ") + e.what());
  } catch (const InputError& e) {
    throw ConfigError(std::string("malformed snapshot: ") + e.what());
  }
}

inline void save_snapshot(const fs::path& path, const ExperimentConfig& cfg, const Calibration& cal) {
  write_atomic(path, snapshot_to_json(cfg, cal).dump(1) + "\n");
}

inline Snapshot load_snapshot(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("snapshot not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("snapshot " + path.string() + ": " + e.what());
  }
  return snapshot_from_json(j);
}

// ---- traces -----------------------------------------------------------------

inline json condition_json(const ConditionSpec& c) {
  json j = {{"label", c.label}};
  j["mask"] = c.mask ? json{{"dims", c.mask->masked_dims}, {"onset", c.mask->onset_t}} : json(nullptr);
  j["delay"] = c.delay ? json{{"tau", c.delay->tau}, {"onset", c.delay->onset_t}} : json(nullptr);
  j["shift"] = c.shift ? json{{"param", c.shift->param}, {"value", c.shift->value}, {"onset", c.shift->onset_t}}
                       : json(nullptr);
  return j;
}

inline json transition_json(const Transition& tr) {
  return {{"t", tr.t},
          {"obs", detail::vec_json(tr.obs)},
          {"action", detail::vec_json(tr.action)},
          {"next_obs", detail::vec_json(tr.next_obs)},
          {"delta", detail::vec_json(tr.delta)},
          {"reward", tr.reward},
          {"risk", tr.risk}};
}

// One transition per line.
inline std::string episode_trace_jsonl(const EpisodeTrace& tr) {
  std::string out;
  for (const auto& s : tr.steps) {
    json l = transition_json(s);
    l["condition"] = tr.condition;
    out += l.dump() + "\n";
  }
  return out;
}

// JSONL: one header line, then one line per step.
inline std::string trace_jsonl(const EpisodeResult& r, const std::string& hash, PolicyMode mode) {
  std::string out;
  json head = provenance(hash, r.seed);
  head["kind"] = "trace";
  head["condition"] = condition_json(r.condition);
  head["policy"] = std::string(to_string(mode));
  out += head.dump() + "\n";
  for (const auto& s : r.steps) {
    json l = {{"t", s.k.t},
              {"sigma_theta", s.k.sigma_theta},
              {"sigma_s", s.k.sigma_s},
              {"kappa", s.k.kappa},
              {"kappa_control", s.kappa_control},
              {"regime", std::string(to_string(s.regime))},
              {"alpha", s.weights.alpha},
              {"delta", s.weights.delta},
              {"po", s.po},
              {"tau", s.tau},
              {"action", detail::vec_json(s.agent.action)},
              {"reward", s.agent.reward},
              {"risk", s.agent.risk}};
    if (s.chosen >= 0) {
      l["chosen"] = s.chosen;
      l["score"] = {{"task", s.score.task}, {"ig", s.score.ig}, {"risk", s.score.risk}, {"value", s.score.value}};
      l["fallback"] = s.fallback;
      l["budget_violation"] = s.budget_violation;
      l["min_candidate_risk"] = s.min_candidate_risk;
    }
    out += l.dump() + "\n";
  }
  json tail = {{"summary",
                {{"return", r.episode_return},
                 {"post_onset_kappa", r.post_onset_kappa},
                 {"post_onset_kappa_windowed", r.post_onset_kappa_windowed},
                 {"post_onset_sigma_theta", r.post_onset_sigma_theta},
                 {"post_onset_sigma_s", r.post_onset_sigma_s},
                 {"post_onset_mse", r.post_onset_mse},
                 {"kappa_peak", r.kappa_peak},
                 {"kappa_peak_t", r.kappa_peak_t},
                 {"budget_violations", r.budget_violations},
                 {"fallbacks", r.fallbacks},
                 {"steps", r.n_steps}}}};
  out += tail.dump() + "\n";
  return out;
}

// ---- CSV --------------------------------------------------------------------

inline std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string csv_header_comment(const std::string& hash, std::uint64_t seed) {
  return std::string("# version=") + kToolkitVersion + " config_hash=" + hash + " seed=" + std::to_string(seed) + "\n";
}

inline json synergy_json(const SynergyReport& r) {
  auto stratum = [](const StratumRate& s) {
    return json{{"key", s.key}, {"n", s.n}, {"flagged", s.flagged}, {"rate", s.rate}};
  };
  json per_delay = json::array();
  for (const auto& s : r.per_delay) per_delay.push_back(stratum(s));
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"n_configs", r.n_configs},
          {"n_superadditive", r.n_superadditive},
          {"rate", num(r.rate)},
          {"threshold", r.threshold},
          {"scale", r.scale == SynergyScale::Fraction ? "fraction" : "units"},
          {"mean_synergy_units", num(r.mean_synergy_units)},
          {"mean_synergy_frac", num(r.mean_synergy_frac)},
          {"t_test",
           {{"defined", r.test.defined},
            {"n", r.test.n},
            {"mean", num(r.test.mean)},
            {"t", num(r.test.t)},
            {"df", r.test.df},
            {"p_value", num(r.test.p_value)},
            {"ci_low", num(r.test.ci_low)},
            {"ci_high", num(r.test.ci_high)}}},
          {"per_delay", per_delay},
          {"note", r.note}};
}

inline json rate_test_json(const RateTest& t) {
  json strata = json::array();
  for (const auto& s : t.strata) strata.push_back({{"key", s.key}, {"n", s.n}, {"flagged", s.flagged}, {"rate", s.rate}});
  return {{"strata", strata}, {"chi2", t.chi2}, {"df", t.df}, {"p_value", t.p_value}};
}

}  // namespace cuc
