#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lnwarm/layers.hpp"
#include "lnwarm/parallel.hpp"
#include "lnwarm/schedopt.hpp"
#include "lnwarm/theory.hpp"
#include "lnwarm/trainer.hpp"

namespace lnwarm::cli {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kOutDirEnv = "LNWARM_OUT_DIR";
inline constexpr const char* kDefaultOutDir = "lnwarm-out";

enum ExitCode : int { kExitPass = 0, kExitVerdictFail = 1, kExitUsage = 2 };

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------
namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& key, std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = s.find(',', start);
    std::string item = trim(s.substr(start, comma == std::string_view::npos ? s.npos : comma - start));
    if (item.empty()) throw UsageError("key '" + key + "': empty list item");
    out.push_back(std::move(item));
    if (comma == std::string_view::npos) return out;
    start = comma + 1;
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw UsageError("key '" + key + "': expected a non-negative integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
    throw UsageError("key '" + key + "': expected a finite number, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw UsageError("key '" + key + "': expected true or false, got '" + s + "'");
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Shortest decimal form that parses back to the same double.
inline std::string shortest_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace detail

// Resolved key -> values map. Scalar keys hold one value, list keys one or more.
class RunConfig {
 public:
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::vector<std::string> values) { values_[key] = std::move(values); }
  void append(const std::string& key, const std::vector<std::string>& values) {
    auto& v = values_[key];
    v.insert(v.end(), values.begin(), values.end());
  }

  const std::vector<std::string>& values(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("missing key '" + key + "'");
    return it->second;
  }
  const std::string& str(const std::string& key) const {
    const auto& v = values(key);
    if (v.size() != 1) throw UsageError("key '" + key + "' takes exactly one value");
    return v.front();
  }
  std::uint64_t u64(const std::string& key) const { return detail::parse_u64(key, str(key)); }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }
  double real(const std::string& key) const { return detail::parse_double(key, str(key)); }
  bool flag(const std::string& key) const { return detail::parse_bool(key, str(key)); }
  std::vector<std::uint64_t> u64s(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& s : values(key)) out.push_back(detail::parse_u64(key, s));
    return out;
  }
  std::vector<std::size_t> sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : values(key)) out.push_back(static_cast<std::size_t>(detail::parse_u64(key, s)));
    return out;
  }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : values(key)) out.push_back(detail::parse_double(key, s));
    return out;
  }

  const std::map<std::string, std::vector<std::string>>& entries() const { return values_; }

  // key=value lines, sorted by key; list keys repeat.
  std::string echo() const {
    std::string out;
    for (const auto& [k, vs] : values_)
      for (const auto& v : vs) out += k + "=" + v + "\n";
    return out;
  }

 private:
  std::map<std::string, std::vector<std::string>> values_;
};

struct KeySpec {
  std::string name;
  std::string help;
  bool list = false;
  std::string fallback;                               // default when derive is empty
  std::function<std::string(const RunConfig&)> derive;  // default computed from other keys
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------
struct Table {
  std::string name;
  std::vector<std::string> header;
  std::vector<std::vector<Json>> rows;
};

struct Report {
  std::string command;
  RunConfig config;
  std::vector<Table> tables;  // tables.front() is the primary CSV
  std::vector<Verdict> verdicts;
  Json extra = Json::object();

  bool passed() const {
    return std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.passed; });
  }
};

inline std::string csv_cell(const Json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_boolean()) return j.get<bool>() ? "true" : "false";
  if (j.is_number_unsigned()) return std::to_string(j.get<std::uint64_t>());
  if (j.is_number_integer()) return std::to_string(j.get<std::int64_t>());
  if (j.is_number_float()) return detail::format_double(j.get<double>());
  throw std::logic_error("csv_cell: unsupported value");
}

inline std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.header.size(); ++i) out += (i ? "," : "") + t.header[i];
  out += "\n";
  for (const auto& row : t.rows) {
    if (row.size() != t.header.size()) throw std::logic_error("to_csv: row width differs from header");
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_cell(row[i]);
    out += "\n";
  }
  return out;
}

// Non-finite doubles have no JSON literal; they are written as strings.
inline Json json_cell(const Json& j) {
  if (j.is_number_float() && !std::isfinite(j.get<double>())) return csv_cell(j);
  return j;
}

inline Json to_json(const Report& r) {
  Json j;
  j["command"] = r.command;
  j["tool_version"] = kToolVersion;
  j["rng_algorithm"] = kRngAlgorithm;
  j["schema_version"] = kSchemaVersion;
  Json cfg = Json::object();
  for (const auto& [k, vs] : r.config.entries()) cfg[k] = vs.size() == 1 ? Json(vs.front()) : Json(vs);
  j["config"] = cfg;
  Json tables = Json::array();
  for (const auto& t : r.tables) {
    Json rows = Json::array();
    for (const auto& row : t.rows) {
      Json o = Json::object();
      for (std::size_t i = 0; i < row.size(); ++i) o[t.header[i]] = json_cell(row[i]);
      rows.push_back(o);
    }
    tables.push_back({{"name", t.name}, {"header", t.header}, {"rows", rows}});
  }
  j["tables"] = tables;
  Json verdicts = Json::array();
  for (const auto& v : r.verdicts)
    verdicts.push_back({{"name", v.name},
                        {"value", json_cell(v.value)},
                        {"comparison", v.comparison},
                        {"lower", json_cell(v.lower)},
                        {"upper", json_cell(v.upper)},
                        {"passed", v.passed}});
  j["verdicts"] = verdicts;
  j["passed"] = r.passed();
  for (const auto& [k, v] : r.extra.items()) j[k] = v;
  return j;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------
struct Command {
  std::string name;  // as typed, e.g. "verify lemma1"
  std::string stem;  // output file stem, e.g. "verify-lemma1"
  std::string help;
  std::vector<KeySpec> keys;
  std::function<Report(const RunConfig&)> run;

  const KeySpec* find(const std::string& key) const {
    for (const auto& k : keys)
      if (k.name == key) return &k;
    return nullptr;
  }
};

namespace detail {

inline KeySpec key(std::string name, std::string fallback, std::string help) {
  return {std::move(name), std::move(help), false, std::move(fallback), {}};
}
inline KeySpec list_key(std::string name, std::string fallback, std::string help) {
  return {std::move(name), std::move(help), true, std::move(fallback), {}};
}
inline KeySpec derived_key(std::string name, std::function<std::string(const RunConfig&)> f,
                           std::string help) {
  return {std::move(name), std::move(help), false, {}, std::move(f)};
}

inline KeySpec threads_key() {
  return key("threads", std::to_string(default_threads()), "worker threads (results do not depend on it)");
}
inline KeySpec out_key() {
  return key("out", kDefaultOutDir, std::string("output directory, or - for CSV on stdout; env ") + kOutDirEnv);
}

inline Variant parse_variant(const std::string& s) {
  if (s == "post") return Variant::PostLN;
  if (s == "pre") return Variant::PreLN;
  throw UsageError("variant must be post or pre, got '" + s + "'");
}

inline TargetRule parse_targets(const std::string& s) {
  if (s == "next") return TargetRule::NextToken;
  if (s == "uniform") return TargetRule::Uniform;
  throw UsageError("targets must be next or uniform, got '" + s + "'");
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::SGD;
  throw UsageError("optimizer must be adam or sgd, got '" + s + "'");
}

inline std::vector<KeySpec> theory_model_keys(std::size_t d, std::size_t L, std::size_t n) {
  return {key("variant", "post", "post or pre"), key("d", std::to_string(d), "model width"),
          key("L", std::to_string(L), "number of layers"), key("n", std::to_string(n), "sequence length"),
          key("vocab", "32", "vocabulary size")};
}

inline ModelConfig theory_config(const RunConfig& c) {
  return ModelConfig::theory(c.size("d"), c.size("L"), c.size("n"), c.size("vocab"),
                             parse_variant(c.str("variant")));
}

inline std::vector<KeySpec> protocol_keys() {
  return {key("seeds", "20", "initializations averaged"),
          key("batches", "5", "batches per initialization"),
          key("batch_size", "8", "sequences per batch"),
          key("targets", "next", "next or uniform"),
          key("base_seed", "1", "root seed"),
          threads_key()};
}

inline GradStatsProtocol protocol(const RunConfig& c) {
  GradStatsProtocol p;
  p.seeds = c.size("seeds");
  p.batches = c.size("batches");
  p.batch_size = c.size("batch_size");
  p.targets = parse_targets(c.str("targets"));
  p.base_seed = c.u64("base_seed");
  p.threads = c.size("threads");
  if (p.seeds < 1 || p.batches < 1 || p.batch_size < 1)
    throw UsageError("seeds, batches and batch_size must be >= 1");
  return p;
}

inline std::vector<KeySpec> schedule_keys(const std::string& lr, const std::string& warmup) {
  std::vector<KeySpec> k = {key("schedule", "warmup-invsqrt",
                                "warmup-invsqrt, warmup-linear, drop-invsqrt, linear or fixed"),
                            key("drop_step", "1", "last full-rate step of drop-invsqrt"),
                            key("drop_factor", "0.1", "rate multiplier after drop_step"),
                            derived_key("total_steps", [](const RunConfig& c) { return c.str("steps"); },
                                        "end of linear decay (default: steps)")};
  if (!lr.empty()) k.push_back(key("lr", lr, "peak learning rate"));
  if (!warmup.empty()) k.push_back(key("warmup", warmup, "warm-up steps (1 means none)"));
  return k;
}

inline Schedule schedule(const RunConfig& c, double lr, std::size_t warmup) {
  Schedule s;
  s.kind = parse_schedule_kind(c.str("schedule"));
  s.lr_max = lr;
  s.warmup_steps = warmup;
  s.total_steps = c.size("total_steps");
  s.drop_step = c.size("drop_step");
  s.drop_factor = c.real("drop_factor");
  s.validate();
  return s;
}

inline std::vector<KeySpec> train_keys() {
  return {key("variant", "pre", "post or pre"),
          key("task", "copy", "copy or markov"),
          key("d", "64", "model width"),
          key("d_ff", std::to_string(kCalibratedDff), "feed-forward width"),
          key("L", "6", "number of layers"),
          key("n", "16", "sequence length"),
          key("H", "4", "attention heads"),
          derived_key("d_k", [](const RunConfig& c) { return std::to_string(c.size("d") / std::max<std::size_t>(1, c.size("H"))); },
                      "per-head key width (default: d/H)"),
          derived_key("d_v", [](const RunConfig& c) { return std::to_string(c.size("d") / std::max<std::size_t>(1, c.size("H"))); },
                      "per-head value width (default: d/H)"),
          key("vocab", "32", "vocabulary size"),
          derived_key("causal", [](const RunConfig& c) { return c.str("task") == "markov" ? "true" : "false"; },
                      "causal attention mask (default: true for markov)"),
          key("ln_epsilon", "1e-05", "layer-norm epsilon"),
          derived_key("embed_variance",
                      [](const RunConfig& c) { return shortest_double(1.0 / (4.0 * static_cast<double>(std::max<std::size_t>(1, c.size("d"))))); },
                      "variance of the tied embedding (default: 1/(4d))"),
          key("embed_scale", "1", "embedding multiplier"),
          key("optimizer", "adam", "adam or sgd"),
          key("beta1", "0.9", "Adam beta1"),
          key("beta2", "0.98", "Adam beta2"),
          key("adam_eps", "1e-08", "Adam epsilon"),
          key("steps", std::to_string(kCalibratedHorizon), "training horizon"),
          key("batch_size", std::to_string(kCalibratedBatch), "sequences per step"),
          key("eval_interval", "25", "steps between evaluations"),
          key("stop_on_converged", "true", "halt a run at its first converged evaluation"),
          key("dataset_size", "4096", "training pool size"),
          key("eval_size", "64", "held-out sequences"),
          key("task_seed", "1", "seed of the task data"),
          threads_key(),
          out_key()};
}

struct TrainSetup {
  ModelConfig model;
  TaskData data;
  OptimizerKind optimizer = OptimizerKind::Adam;
  TrainOptions options;
  std::size_t steps = 0;
};

inline TrainSetup train_setup(const RunConfig& c, Variant variant) {
  TrainSetup s;
  ModelConfig& m = s.model;
  m = ModelConfig::trainable(c.size("d"), c.size("d_ff"), c.size("L"), c.size("n"), c.size("H"),
                             c.size("vocab"), variant);
  m.d_k = c.size("d_k");
  m.d_v = c.size("d_v");
  m.causal = c.flag("causal");
  m.ln_epsilon = c.real("ln_epsilon");
  m.embed_variance = c.real("embed_variance");
  m.embed_scale = c.real("embed_scale");
  m.validate();
  TaskSpec t;
  t.kind = parse_task_kind(c.str("task"));
  t.vocab = m.vocab;
  t.n = m.n;
  t.dataset_size = c.size("dataset_size");
  t.eval_size = c.size("eval_size");
  t.seed = c.u64("task_seed");
  s.data = make_task(t);
  s.optimizer = parse_optimizer(c.str("optimizer"));
  s.options.batch_size = c.size("batch_size");
  s.options.eval_interval = c.size("eval_interval");
  s.options.beta1 = c.real("beta1");
  s.options.beta2 = c.real("beta2");
  s.options.adam_eps = c.real("adam_eps");
  s.options.stop_on_converged = c.flag("stop_on_converged");
  s.steps = c.size("steps");
  return s;
}

inline Json training_constants(const ModelConfig& m, const TrainOptions& o) {
  return {{"divergence_factor", kDivergenceFactor},
          {"divergence_patience", kDivergencePatience},
          {"convergence_fraction", kConvergenceFraction},
          {"convergence_threshold", convergence_threshold(m, o)}};
}

inline Report report(const std::string& command, const RunConfig& c) {
  Report r;
  r.command = command;
  r.config = c;
  return r;
}

inline Json row_value(std::size_t v) { return Json(static_cast<std::uint64_t>(v)); }

}  // namespace detail

inline Report cmd_verify_lemma1(const RunConfig& c) {
  Rng rng(c.u64("seed"));
  const std::size_t d = c.size("d"), samples = c.size("samples");
  const double sigma = c.real("sigma");
  const Lemma1Result r = check_lemma1(d, sigma, samples, rng);
  Report rep = detail::report("verify lemma1", c);
  rep.tables.push_back({"lemma1",
                        {"schema_version", "d", "sigma", "samples", "estimate", "target", "rel_err"},
                        {{kSchemaVersion, detail::row_value(d), sigma, detail::row_value(samples), r.estimate,
                          r.target, r.rel_err}}});
  rep.verdicts.push_back({"lemma1_rel_err", r.rel_err, "<", 0.0, kLemma1RelTol, r.rel_err < kLemma1RelTol});
  return rep;
}

inline Report cmd_verify_lemma2(const RunConfig& c) {
  Rng rng(c.u64("seed"));
  const ModelConfig m = detail::theory_config(c);
  const Lemma2Report r = check_lemma2(m, c.size("samples"), rng, c.size("threads"));
  Report rep = detail::report("verify lemma2", c);
  Table t{"lemma2", {"schema_version", "variant", "layer", "mean_sq_norm", "lower", "upper", "passed"}, {}};
  for (const auto& row : r.rows) {
    t.rows.push_back({kSchemaVersion, to_string(m.variant), detail::row_value(row.layer), row.mean_sq_norm,
                      row.lower, row.upper, row.passed});
    rep.verdicts.push_back({to_string(m.variant) + "_layer_" + std::to_string(row.layer), row.mean_sq_norm,
                            "in", row.lower, row.upper, row.passed});
  }
  rep.tables.push_back(std::move(t));
  return rep;
}

inline Report cmd_verify_lemma3(const RunConfig& c) {
  const Rng root(c.u64("seed"));
  Report rep = detail::report("verify lemma3", c);
  Table ratios{"lemma3", {"schema_version", "d", "trials", "max_ratio"}, {}};
  const auto dims = c.sizes("dims");
  for (std::size_t i = 0; i < dims.size(); ++i) {
    Rng rng = root.fork(i + 1);
    const double worst = check_lemma3(dims[i], c.size("trials"), rng);
    ratios.rows.push_back({kSchemaVersion, detail::row_value(dims[i]), detail::row_value(c.size("trials")), worst});
    rep.verdicts.push_back({"ratio_d" + std::to_string(dims[i]), worst, "<=", 0.0, 1.0 + kLemma3Slack,
                            worst <= 1.0 + kLemma3Slack});
  }
  Rng fd_rng = root.fork(0);
  const double fd = ln_jacobian_fd_error(c.size("fd_d"), c.size("fd_points"), c.real("fd_step"), fd_rng);
  rep.verdicts.push_back({"jacobian_fd_max_abs_err", fd, "<=", 0.0, kJacobianFdTol, fd <= kJacobianFdTol});
  rep.tables.push_back(std::move(ratios));
  rep.tables.push_back({"fd",
                        {"schema_version", "d", "points", "step", "max_abs_err"},
                        {{kSchemaVersion, detail::row_value(c.size("fd_d")), detail::row_value(c.size("fd_points")),
                          c.real("fd_step"), fd}}});
  return rep;
}

inline Report cmd_verify_theorem1(const RunConfig& c) {
  const auto depths = c.sizes("depths");
  if (depths.empty()) throw UsageError("depths: need at least one depth");
  for (std::size_t L : depths)
    if (L < 1) throw UsageError("depths: every depth must be >= 1");
  const GradStatsProtocol proto = detail::protocol(c);
  Report rep = detail::report("verify theorem1", c);
  Table sweep{"depth", {"schema_version", "variant", "L", "d", "mean_grad_norm", "std", "seeds"}, {}};
  Table head{"head-grad", {"schema_version", "variant", "L", "mean_head_grad_norm"}, {}};
  for (Variant v : {Variant::PostLN, Variant::PreLN}) {
    const ModelConfig tmpl = ModelConfig::theory(c.size("d"), depths.front(), c.size("n"), c.size("vocab"), v);
    const auto rows = depth_sweep(depths, tmpl, proto);
    for (const auto& r : rows) {
      sweep.rows.push_back({kSchemaVersion, to_string(v), detail::row_value(r.L), detail::row_value(r.d),
                            r.mean_grad_norm, r.std, detail::row_value(r.seeds)});
      head.rows.push_back({kSchemaVersion, to_string(v), detail::row_value(r.L), r.mean_head_grad_norm});
    }
    rep.verdicts.push_back(v == Variant::PostLN ? post_ln_constancy(rows) : pre_ln_sqrt_scaling(rows));
  }
  rep.tables.push_back(std::move(sweep));
  rep.tables.push_back(std::move(head));
  return rep;
}

inline Report cmd_verify_concentration(const RunConfig& c) {
  Rng rng(c.u64("seed"));
  const std::size_t d = c.size("d");
  const double eps = c.real("epsilon");
  const std::string source = c.str("source");
  std::function<double()> sampler;
  if (source == "chi2") {
    sampler = chi_square_sampler(d, rng);
  } else if (source == "model") {
    sampler = hidden_state_sampler(detail::theory_config(c), rng);
  } else {
    throw UsageError("source must be chi2 or model, got '" + source + "'");
  }
  const BoundedCheck b = check_concentration(sampler, eps, chi_square_delta(d, eps), c.size("trials"));
  Report rep = detail::report("verify concentration", c);
  rep.tables.push_back({"concentration",
                        {"schema_version", "source", "d", "epsilon", "trials", "empirical_mean",
                         "exceed_fraction", "delta_bound", "threshold"},
                        {{kSchemaVersion, source, detail::row_value(d), eps, detail::row_value(b.trials),
                          b.empirical_mean, b.empirical_exceed_fraction, b.delta_bound, b.threshold}}});
  rep.verdicts.push_back({"exceed_fraction", b.empirical_exceed_fraction, "<=", 0.0, b.threshold, b.passed});
  return rep;
}

inline Report cmd_gradstats(const RunConfig& c) {
  const ModelConfig m = detail::theory_config(c);
  if (m.L < 1) throw UsageError("L must be >= 1");
  const GradStatsProtocol proto = detail::protocol(c);
  const auto rows = layer_profile(m, proto);
  const std::string run_id = "gradstats-" + to_string(m.variant) + "-L" + std::to_string(m.L) + "-d" +
                             std::to_string(m.d);
  Report rep = detail::report("gradstats", c);
  Table t{"layer_profile",
          {"schema_version", "run_id", "variant", "L", "d", "n", "seed_count", "layer", "matrix",
           "grad_fro_mean", "grad_fro_std"},
          {}};
  for (const auto& r : rows)
    t.rows.push_back({kSchemaVersion, run_id, to_string(m.variant), detail::row_value(m.L), detail::row_value(m.d),
                      detail::row_value(m.n), detail::row_value(proto.seeds), detail::row_value(r.layer), r.matrix,
                      r.mean_grad_norm, r.std});
  rep.tables.push_back(std::move(t));
  if (m.variant == Variant::PostLN) {
    if (m.L >= 2) {
      rep.verdicts.push_back(post_ln_increasing(rows));
      rep.verdicts.push_back(post_ln_log_slope(rows));
    }
  } else {
    rep.verdicts.push_back(pre_ln_flat(rows));
  }
  return rep;
}

inline std::string run_id(const RunConfig& c, const std::string& variant, const std::string& lr,
                          const std::string& warmup, std::uint64_t seed) {
  return variant + "-" + c.str("schedule") + "-w" + warmup + "-lr" + lr + "-s" + std::to_string(seed);
}

inline Table record_table() {
  return {"train",
          {"schema_version", "run_id", "variant", "schedule", "step", "lr", "train_loss", "eval_loss",
           "grad_global_norm", "status"},
          {}};
}

inline void append_records(Table& t, const std::string& id, const std::string& variant,
                           const std::string& schedule, const std::vector<RunRecord>& records) {
  for (const auto& r : records)
    t.rows.push_back({kSchemaVersion, id, variant, schedule, detail::row_value(r.step), r.lr, r.train_loss,
                      r.eval_loss, r.grad_global_norm, to_string(r.status)});
}

inline Report cmd_train(const RunConfig& c) {
  const Variant variant = detail::parse_variant(c.str("variant"));
  const detail::TrainSetup s = detail::train_setup(c, variant);
  ArmSpec arm;
  arm.name = to_string(variant);
  arm.config = s.model;
  arm.schedule = detail::schedule(c, c.real("lr"), c.size("warmup"));
  arm.optimizer = s.optimizer;
  arm.steps = s.steps;
  arm.seeds = c.u64s("seeds");
  arm.options = s.options;
  const ArmResult res = run_arm(arm, s.data, c.size("threads"));

  Report rep = detail::report("train", c);
  Table records = record_table();
  Table summary{"summary", {"schema_version", "run_id", "final_step", "final_eval_loss", "status"}, {}};
  for (std::size_t i = 0; i < res.runs.size(); ++i) {
    const std::string id = run_id(c, arm.name, c.str("lr"), c.str("warmup"), res.seeds[i]);
    append_records(records, id, arm.name, c.str("schedule"), res.runs[i]);
    const auto& runs = res.runs[i];
    summary.rows.push_back({kSchemaVersion, id, detail::row_value(runs.empty() ? 0 : runs.back().step),
                            final_eval_loss(runs), to_string(final_status(runs))});
  }
  rep.tables.push_back(std::move(records));
  rep.tables.push_back(std::move(summary));
  const double half = 0.5 * static_cast<double>(res.runs.size());
  rep.verdicts.push_back({"converged_seeds", static_cast<double>(res.count(RunStatus::Converged)), ">", half,
                          static_cast<double>(res.runs.size()), res.majority(RunStatus::Converged)});
  rep.extra["constants"] = detail::training_constants(s.model, s.options);
  if (s.data.transition.rows() > 1) rep.extra["markov_optimal_loss"] = s.data.optimal_loss;
  return rep;
}

// Picks the lr at which Pre-LN without warm-up converges on a seed majority and
// Post-LN without warm-up ends furthest behind it (ratio of mean final eval loss).
inline Report cmd_calibrate_lr(const RunConfig& c) {
  const auto lrs = c.values("lrs");
  Report rep = detail::report("calibrate-lr", c);
  Table runs{"calibration",
             {"schema_version", "lr", "variant", "seed", "final_step", "final_eval_loss", "status"},
             {}};
  Table summary{"summary",
                {"schema_version", "lr", "pre_converged", "post_converged", "pre_mean_final_eval",
                 "post_mean_final_eval", "ratio", "eligible"},
                {}};
  double best_lr = std::nan(""), best_ratio = 0.0;
  std::vector<double> lr_values;
  Json constants;
  for (const auto& lr_text : lrs) {
    const double lr = detail::parse_double("lrs", lr_text);
    lr_values.push_back(lr);
    ArmResult res[2];
    for (int v = 0; v < 2; ++v) {
      const Variant variant = v == 0 ? Variant::PreLN : Variant::PostLN;
      const detail::TrainSetup s = detail::train_setup(c, variant);
      constants = detail::training_constants(s.model, s.options);
      ArmSpec arm{to_string(variant), s.model, detail::schedule(c, lr, 1), s.optimizer, s.steps,
                  c.u64s("seeds"), s.options};
      res[v] = run_arm(arm, s.data, c.size("threads"));
      for (std::size_t i = 0; i < res[v].runs.size(); ++i) {
        const auto& r = res[v].runs[i];
        runs.rows.push_back({kSchemaVersion, lr_text, arm.name, res[v].seeds[i],
                             detail::row_value(r.empty() ? 0 : r.back().step), final_eval_loss(r),
                             to_string(final_status(r))});
      }
    }
    const double pre = res[0].mean_final_eval(), post = res[1].mean_final_eval();
    const double ratio = post / pre;
    const bool eligible = res[0].majority(RunStatus::Converged) && std::isfinite(ratio);
    summary.rows.push_back({kSchemaVersion, lr_text, detail::row_value(res[0].count(RunStatus::Converged)),
                            detail::row_value(res[1].count(RunStatus::Converged)), pre, post, ratio, eligible});
    if (eligible && ratio > best_ratio) {
      best_ratio = ratio;
      best_lr = lr;
    }
  }
  rep.tables.push_back(std::move(runs));
  rep.tables.push_back(std::move(summary));
  const auto [lo, hi] = std::minmax_element(lr_values.begin(), lr_values.end());
  rep.verdicts.push_back({"selected_lr", best_lr, "in", *lo, *hi, std::isfinite(best_lr)});
  rep.extra["constants"] = constants;
  rep.extra["selected_ratio"] = best_ratio;
  return rep;
}

inline Report cmd_schedule_preview(const RunConfig& c) {
  const std::size_t steps = c.size("steps");
  if (steps < 1) throw UsageError("steps must be >= 1");
  const Schedule s = detail::schedule(c, c.real("lr"), c.size("warmup"));
  Report rep = detail::report("schedule-preview", c);
  Table t{"schedule", {"schema_version", "t", "lr"}, {}};
  const bool warm = s.kind == ScheduleKind::WarmupInvSqrt || s.kind == ScheduleKind::WarmupLinearDecay;
  const std::size_t from = warm ? s.warmup_steps : 1;
  double rises = 0.0;
  for (std::size_t step = 1; step <= steps; ++step) {
    const double lr = lr_at(s, step);
    t.rows.push_back({kSchemaVersion, detail::row_value(step), lr});
    if (step > from && lr > lr_at(s, step - 1)) rises += 1.0;
  }
  rep.tables.push_back(std::move(t));
  rep.verdicts.push_back({"increases_after_warmup", rises, "==", 0.0, 0.0, rises == 0.0});
  return rep;
}

inline const std::vector<Command>& commands() {
  using detail::key;
  using detail::list_key;
  static const std::vector<Command> all = [] {
    std::vector<Command> v;
    v.push_back({"verify lemma1", "verify-lemma1", "E||ReLU(X)||^2 = sigma^2 d / 2",
                 {key("d", "512", "dimension"), key("sigma", "1", "standard deviation"),
                  key("samples", "10000", "Monte Carlo samples"), key("seed", "1", "seed"), detail::out_key()},
                 cmd_verify_lemma1});
    {
      auto keys = detail::theory_model_keys(64, 6, 4);
      keys.push_back(key("samples", "200", "(initialization, input) draws"));
      keys.push_back(key("seed", "1", "seed"));
      keys.push_back(detail::threads_key());
      keys.push_back(detail::out_key());
      v.push_back({"verify lemma2", "verify-lemma2", "hidden-state norms at initialization", keys,
                   cmd_verify_lemma2});
    }
    v.push_back({"verify lemma3", "verify-lemma3", "layer-norm Jacobian spectral bound",
                 {list_key("dims", "4,64,512", "dimensions for the spectral bound"),
                  key("trials", "1000", "draws per dimension"), key("fd_d", "8", "dimension of the FD check"),
                  key("fd_points", "100", "points of the FD check"), key("fd_step", "1e-05", "FD step"),
                  key("seed", "1", "seed"), detail::out_key()},
                 cmd_verify_lemma3});
    {
      std::vector<KeySpec> keys = {list_key("depths", "6,8,10,12,14", "stack depths"),
                                   key("d", "64", "model width"), key("n", "16", "sequence length"),
                                   key("vocab", "32", "vocabulary size")};
      for (auto& k : detail::protocol_keys()) keys.push_back(k);
      keys.push_back(detail::out_key());
      v.push_back({"verify theorem1", "verify-theorem1", "last-layer gradient norm across depths", keys,
                   cmd_verify_theorem1});
    }
    {
      auto keys = detail::theory_model_keys(64, 6, 16);
      keys.push_back(key("source", "chi2", "chi2 or model (hidden states, reported only)"));
      keys.push_back(key("epsilon", "0.5", "relative deviation"));
      keys.push_back(key("trials", "10000", "draws"));
      keys.push_back(key("seed", "1", "seed"));
      keys.push_back(detail::out_key());
      v.push_back({"verify concentration", "verify-concentration", "(epsilon, delta)-boundedness", keys,
                   cmd_verify_concentration});
    }
    {
      auto keys = detail::theory_model_keys(64, 6, 16);
      for (auto& k : detail::protocol_keys()) keys.push_back(k);
      keys.push_back(detail::out_key());
      v.push_back({"gradstats", "gradstats", "per-layer FFN gradient norms at initialization", keys,
                   cmd_gradstats});
    }
    {
      auto keys = detail::train_keys();
      for (auto& k : detail::schedule_keys(detail::shortest_double(kCalibratedLr), "1")) keys.push_back(k);
      keys.push_back(list_key("seeds", "1", "training seeds"));
      v.push_back({"train", "train", "train on a synthetic task", keys, cmd_train});
    }
    {
      auto keys = detail::train_keys();
      for (auto& k : detail::schedule_keys("", "")) keys.push_back(k);
      keys.push_back(list_key("lrs", "0.0003,0.001,0.003", "candidate peak rates"));
      keys.push_back(list_key("seeds", "1,2,3", "training seeds per arm"));
      v.push_back({"calibrate-lr", "calibrate-lr", "sweep lr for the no-warm-up separation", keys,
                   cmd_calibrate_lr});
    }
    {
      auto keys = detail::schedule_keys("0.001", "4000");
      keys.push_back(key("steps", "16000", "last step"));
      keys.push_back(detail::out_key());
      v.push_back({"schedule-preview", "schedule-preview", "learning rate per step", keys, cmd_schedule_preview});
    }
    return v;
  }();
  return all;
}

inline const Command& find_command(const std::string& name) {
  for (const auto& c : commands())
    if (c.name == name) return c;
  throw UsageError("unknown command '" + name + "'");
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------
inline RunConfig parse_config_text(const std::string& text, const Command& cmd) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string k = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    const KeySpec* spec = cmd.find(k);
    if (!spec) throw UsageError("config line " + std::to_string(lineno) + ": unknown key '" + k + "' for " + cmd.name);
    if (value.empty()) throw UsageError("config line " + std::to_string(lineno) + ": empty value for '" + k + "'");
    if (spec->list) {
      cfg.append(k, detail::split_list(k, value));
    } else if (cfg.has(k)) {
      throw UsageError("config line " + std::to_string(lineno) + ": duplicate key '" + k + "'");
    } else {
      cfg.set(k, {value});
    }
  }
  return cfg;
}

inline RunConfig parse_config_file(const std::string& path, const Command& cmd) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), cmd);
}

// Later layers win: file, then the output-directory env var, then flags; the
// rest is filled from defaults, derived ones last.
inline RunConfig resolve(const Command& cmd, const RunConfig& file, const std::map<std::string, std::string>& flags,
                         const char* env_out) {
  RunConfig cfg = file;
  if (env_out && *env_out && cmd.find("out")) cfg.set("out", {env_out});
  for (const auto& [k, v] : flags) {
    const KeySpec* spec = cmd.find(k);
    if (!spec) throw UsageError("unknown key '" + k + "' for " + cmd.name);
    cfg.set(k, spec->list ? detail::split_list(k, v) : std::vector<std::string>{detail::trim(v)});
  }
  for (const auto& k : cmd.keys)
    if (!k.derive && !cfg.has(k.name))
      cfg.set(k.name, k.list ? detail::split_list(k.name, k.fallback) : std::vector<std::string>{k.fallback});
  for (const auto& k : cmd.keys)
    if (k.derive && !cfg.has(k.name)) cfg.set(k.name, {k.derive(cfg)});
  for (const auto& [k, vs] : cfg.entries()) {
    if (vs.empty()) throw UsageError("key '" + k + "' has no value");
    if (!cmd.find(k)->list && vs.size() != 1) throw UsageError("key '" + k + "' takes exactly one value");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------
namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  f << content;
  if (!f) throw std::runtime_error("write failed for '" + p.string() + "'");
}

}  // namespace detail

// Returns the files written; with out = "-" the primary CSV goes to `out` instead.
inline std::vector<std::string> write_report(const Report& r, const std::string& stem, std::ostream& out) {
  const std::string dir = r.config.str("out");
  if (dir == "-") {
    out << to_csv(r.tables.front());
    return {};
  }
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& content) {
    const fs::path p = fs::path(dir) / name;
    detail::write_file(p, content);
    written.push_back(p.string());
  };
  for (std::size_t i = 0; i < r.tables.size(); ++i)
    emit(stem + (i == 0 ? "" : "-" + r.tables[i].name) + ".csv", to_csv(r.tables[i]));
  emit(stem + ".json", to_json(r).dump(2) + "\n");
  emit(stem + ".cfg", r.config.echo());
  return written;
}

inline void print_verdicts(const Report& r, std::ostream& err) {
  for (const auto& v : r.verdicts)
    err << (v.passed ? "PASS " : "FAIL ") << v.name << " = " << detail::format_double(v.value) << " "
        << v.comparison << " [" << detail::format_double(v.lower) << ", " << detail::format_double(v.upper)
        << "]\n";
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-normalization placement and warm-up experiments"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  CLI::App* verify = app.add_subcommand("verify", "check a lemma or theorem numerically");
  verify->require_subcommand(1);

  struct Bound {
    const Command* cmd;
    CLI::App* app;
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
  };
  std::vector<std::unique_ptr<Bound>> bound;
  for (const auto& cmd : commands()) {
    auto b = std::make_unique<Bound>();
    b->cmd = &cmd;
    const bool nested = cmd.name.rfind("verify ", 0) == 0;
    b->app = (nested ? verify : &app)->add_subcommand(nested ? cmd.name.substr(7) : cmd.name, cmd.help);
    b->app->add_option("--config", b->config_path, "key=value run-config file");
    for (const auto& k : cmd.keys) {
      std::string help = k.help + (k.derive ? "" : " [" + k.fallback + "]");
      if (k.list) help += " (comma list)";
      b->options[k.name] = b->app->add_option("--" + k.name, b->values[k.name], help);
    }
    bound.push_back(std::move(b));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitPass : kExitUsage;
  }

  const Bound* chosen = nullptr;
  for (const auto& b : bound)
    if (b->app->parsed()) chosen = b.get();
  if (!chosen) {
    err << "error: no command given\n";
    return kExitUsage;
  }
  const Command& cmd = *chosen->cmd;
  try {
    std::map<std::string, std::string> flags;
    for (const auto& [k, opt] : chosen->options)
      if (opt->count() > 0) flags[k] = chosen->values.at(k);
    const RunConfig file = chosen->config_path.empty() ? RunConfig{} : parse_config_file(chosen->config_path, cmd);
    const RunConfig cfg = resolve(cmd, file, flags, std::getenv(kOutDirEnv));
    const Report r = cmd.run(cfg);
    for (const auto& path : write_report(r, cmd.stem, out)) err << "wrote " << path << "\n";
    print_verdicts(r, err);
    return r.passed() ? kExitPass : kExitVerdictFail;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {  // ArgumentError, ShapeError
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitVerdictFail;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv = {"lnwarm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace lnwarm::cli
