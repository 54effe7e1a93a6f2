#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "esi/algebra.hpp"
#include "esi/characterization.hpp"
#include "esi/conditions.hpp"
#include "esi/measure.hpp"
#include "esi/pacbayes.hpp"
#include "esi/random_eta.hpp"
#include "esi/scale.hpp"
#include "esi/sequential.hpp"
#include "esi/support.hpp"
#include "esi/verify.hpp"

namespace esi::io {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

enum ExitCode : int { exit_holds = 0, exit_fails = 1, exit_inconclusive = 2, exit_input_error = 3 };

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> t{"verify",     "bounds",   "compose",    "characterize",
                                          "conditions", "pacbayes", "random_eta", "sequential"};
  return t;
}

// CLI verbs use dashes where task names use underscores.
inline std::string task_from_verb(std::string verb) {
  for (auto& ch : verb)
    if (ch == '-') ch = '_';
  return verb;
}

struct BudgetSpec {
  std::size_t samples = 100000;
  std::size_t chunks = 64;
  double k_sigma = 3.0;
  double eps_min = 1e-4;
  double eps_max = 1e2;
  std::size_t grid_points = 64;
};

struct Scenario {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  BudgetSpec budget;
  std::string task;
  json payload;
  json raw;

  EvalBudget eval_budget() const {
    EvalBudget b;
    b.seed = seed;
    b.samples = budget.samples;
    b.chunks = budget.chunks;
    return b;
  }
  VerifyConfig verify_config() const {
    VerifyConfig c;
    c.k_sigma = budget.k_sigma;
    c.grid.eps_min = budget.eps_min;
    c.grid.eps_max = budget.eps_max;
    c.grid.points = budget.grid_points;
    return c;
  }
};

// Columns are fixed per table kind:
//   bound_vs_n: n, bound, eps_star
//   margin_vs_eps: eps, margin, se
//   tail_quantiles: delta, quantile
//   crossing_frequency: delta, threshold, frequency, se
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

struct Report {
  json doc;
  std::map<std::string, Table> tables;
  std::vector<Verdict> verdicts;
  std::string summary;
  double wall_seconds = 0;

  int exit_code() const {
    bool inconclusive = false;
    for (auto v : verdicts) {
      if (v == Verdict::fails) return exit_fails;
      inconclusive = inconclusive || v == Verdict::inconclusive;
    }
    return inconclusive ? exit_inconclusive : exit_holds;
  }
};

// ---------------------------------------------------------------------------
// Field access with path-qualified diagnostics.

namespace field {

[[noreturn]] inline void fail(const std::string& path, const std::string& what) {
  throw Error(Errc::SchemaMismatch, path + ": " + what);
}

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }
inline std::string index(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

inline void object(const json& o, const std::string& path) {
  if (!o.is_object()) fail(path, "expected an object");
}

inline void only(const json& o, const std::string& path, std::initializer_list<const char*> allowed) {
  object(o, path);
  for (auto it = o.begin(); it != o.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) fail(join(path, it.key()), "unknown field");
  }
}

inline const json& req(const json& o, const std::string& key, const std::string& path) {
  object(o, path);
  auto it = o.find(key);
  if (it == o.end()) fail(join(path, key), "missing");
  return *it;
}

inline bool has(const json& o, const std::string& key) { return o.is_object() && o.contains(key); }

inline double number(const json& v, const std::string& path) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf") return kInf;
    if (s == "-inf") return -kInf;
  }
  fail(path, "expected a number");
}

inline double number(const json& o, const std::string& key, const std::string& path) {
  return number(req(o, key, path), join(path, key));
}

inline double number_or(const json& o, const std::string& key, const std::string& path, double dflt) {
  return has(o, key) ? number(o, key, path) : dflt;
}

inline double positive(const json& o, const std::string& key, const std::string& path) {
  const double x = number(o, key, path);
  if (!(x > 0)) fail(join(path, key), "must be positive");
  return x;
}

inline std::uint64_t unsigned_int(const json& v, const std::string& path) {
  if (!v.is_number_unsigned()) fail(path, "expected a nonnegative integer");
  return v.get<std::uint64_t>();
}

inline std::size_t count(const json& o, const std::string& key, const std::string& path) {
  return static_cast<std::size_t>(unsigned_int(req(o, key, path), join(path, key)));
}

inline std::size_t count_or(const json& o, const std::string& key, const std::string& path, std::size_t dflt) {
  return has(o, key) ? count(o, key, path) : dflt;
}

inline bool boolean_or(const json& o, const std::string& key, const std::string& path, bool dflt) {
  if (!has(o, key)) return dflt;
  const auto& v = o.at(key);
  if (!v.is_boolean()) fail(join(path, key), "expected true or false");
  return v.get<bool>();
}

inline std::string string(const json& o, const std::string& key, const std::string& path) {
  const auto& v = req(o, key, path);
  if (!v.is_string()) fail(join(path, key), "expected a string");
  return v.get<std::string>();
}

inline const json& array(const json& o, const std::string& key, const std::string& path, bool nonempty = true) {
  const auto& v = req(o, key, path);
  if (!v.is_array()) fail(join(path, key), "expected an array");
  if (nonempty && v.empty()) fail(join(path, key), "empty");
  return v;
}

inline std::vector<double> numbers(const json& o, const std::string& key, const std::string& path) {
  const auto& a = array(o, key, path);
  std::vector<double> out;
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(number(a[i], index(join(path, key), i)));
  return out;
}

// Library validation errors raised while building an input become schema errors at path.
template <class F>
auto guarded(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == Errc::SchemaMismatch) throw;
    fail(path, e.what());
  }
}

}  // namespace field

// ---------------------------------------------------------------------------
// Input objects.

inline Model parse_model(const json& j, const std::string& path) {
  using namespace field;
  const std::string fam = string(j, "family", path);
  return guarded(path, [&]() -> Model {
    if (fam == "constant") {
      only(j, path, {"family", "c"});
      return Model::constant(number(j, "c", path));
    }
    if (fam == "two_point") {
      only(j, path, {"family", "x1", "p1", "x2"});
      return Model::two_point(number(j, "x1", path), number(j, "p1", path), number(j, "x2", path));
    }
    if (fam == "rademacher") {
      only(j, path, {"family"});
      return Model::rademacher();
    }
    if (fam == "gaussian") {
      only(j, path, {"family", "mean", "variance"});
      return Model::gaussian(number(j, "mean", path), number(j, "variance", path));
    }
    if (fam == "exponential") {
      only(j, path, {"family", "rate"});
      return Model::exponential(number(j, "rate", path));
    }
    if (fam == "gamma") {
      only(j, path, {"family", "shape", "rate"});
      return Model::gamma(number(j, "shape", path), number(j, "rate", path));
    }
    if (fam == "uniform") {
      only(j, path, {"family", "a", "b"});
      return Model::uniform(number(j, "a", path), number(j, "b", path));
    }
    if (fam == "finite_discrete") {
      only(j, path, {"family", "atoms"});
      const auto& a = array(j, "atoms", path);
      std::vector<Atom> atoms;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const std::string p = index(join(path, "atoms"), i);
        only(a[i], p, {"value", "prob"});
        atoms.push_back({number(a[i], "value", p), number(a[i], "prob", p)});
      }
      return Model::finite_discrete(atoms);
    }
    if (fam == "variance_needed") {
      only(j, path, {"family", "nu"});
      return Model::variance_needed(number(j, "nu", path));
    }
    if (fam == "empirical") {
      only(j, path, {"family", "values"});
      return Model::empirical(numbers(j, "values", path));
    }
    if (fam == "shifted") {
      only(j, path, {"family", "base", "c"});
      return Model::shifted(parse_model(req(j, "base", path), join(path, "base")), number(j, "c", path));
    }
    if (fam == "affine") {
      only(j, path, {"family", "base", "a", "b"});
      return Model::affine(parse_model(req(j, "base", path), join(path, "base")), number(j, "a", path),
                           number(j, "b", path));
    }
    if (fam == "negate") {
      only(j, path, {"family", "base"});
      return Model::negate(parse_model(req(j, "base", path), join(path, "base")));
    }
    if (fam == "positive_part") {
      only(j, path, {"family", "base"});
      return Model::positive_part(parse_model(req(j, "base", path), join(path, "base")));
    }
    if (fam == "iid_sum" || fam == "iid_mean") {
      only(j, path, {"family", "base", "n"});
      const Model b = parse_model(req(j, "base", path), join(path, "base"));
      const std::size_t n = count(j, "n", path);
      return fam == "iid_sum" ? Model::iid_sum(b, n) : Model::iid_mean(b, n);
    }
    fail(join(path, "family"), "unknown model family '" + fam + "'");
  });
}

inline std::vector<Model> parse_members(const json& o, const std::string& path, const char* key = "members") {
  const auto& a = field::array(o, key, path);
  std::vector<Model> out;
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(parse_model(a[i], field::index(field::join(path, key), i)));
  return out;
}

inline ScaleFunction parse_scale(const json& j, const std::string& path) {
  using namespace field;
  const std::string kind = string(j, "kind", path);
  return guarded(path, [&]() -> ScaleFunction {
    if (kind == "constant") {
      only(j, path, {"kind", "eta"});
      return ScaleFunction::constant(number(j, "eta", path));
    }
    if (kind == "linear") {
      only(j, path, {"kind", "C", "eta_star"});
      return ScaleFunction::linear_capped(number(j, "C", path), number_or(j, "eta_star", path, kInf));
    }
    if (kind == "power") {
      only(j, path, {"kind", "C", "gamma", "eta_star"});
      return ScaleFunction::power_capped(number(j, "C", path), number(j, "gamma", path),
                                         number_or(j, "eta_star", path, kInf));
    }
    if (kind == "tabulated") {
      only(j, path, {"kind", "points"});
      const auto& a = array(j, "points", path);
      std::vector<std::pair<double, double>> pts;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const std::string p = index(join(path, "points"), i);
        only(a[i], p, {"eps", "u"});
        pts.emplace_back(number(a[i], "eps", p), number(a[i], "u", p));
      }
      return ScaleFunction::tabulated(pts);
    }
    fail(join(path, "kind"), "unknown scale kind '" + kind + "'");
  });
}

inline RhsOffset parse_offset(const json& j, const std::string& path) {
  using namespace field;
  only(j, path, {"value", "over_eta", "power_coef", "power_exponent"});
  RhsOffset r;
  r.constant = number_or(j, "value", path, 0);
  r.inverse = number_or(j, "over_eta", path, 0);
  r.power_coef = number_or(j, "power_coef", path, 0);
  r.power_exponent = number_or(j, "power_exponent", path, 1);
  return r;
}

// "uniform", a weight array, or {"degenerate": index}.
inline DiscreteMeasure parse_measure(const json& j, std::size_t m, const std::string& path) {
  using namespace field;
  DiscreteMeasure d;
  if (j.is_string() && j.get<std::string>() == "uniform") {
    d = DiscreteMeasure::uniform(m);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) d.weights.push_back(number(j[i], index(path, i)));
  } else if (j.is_object()) {
    only(j, path, {"degenerate"});
    const std::size_t at = count(j, "degenerate", path);
    if (at >= m) fail(join(path, "degenerate"), "index outside the family");
    d = DiscreteMeasure::degenerate(m, at);
  } else {
    fail(path, "expected \"uniform\", a weight array or {\"degenerate\": k}");
  }
  if (d.size() != m) fail(path, "needs " + std::to_string(m) + " weights");
  guarded(path, [&] {
    d.validate();
    return 0;
  });
  return d;
}

// ---------------------------------------------------------------------------
// Scenario parsing.

inline Scenario parse_scenario(const std::string& text) {
  using namespace field;
  Scenario s;
  try {
    s.raw = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(Errc::ParseError, std::string("scenario: ") + e.what());
  }
  const json& j = s.raw;
  object(j, "scenario");
  only(j, "", {"schema_version", "seed", "budget", "task", "payload"});
  {
    const auto& v = req(j, "schema_version", "");
    if (!v.is_number_integer() || v.get<long long>() != kSchemaVersion)
      fail("schema_version", "must be " + std::to_string(kSchemaVersion));
  }
  s.seed = unsigned_int(req(j, "seed", ""), "seed");
  s.task = string(j, "task", "");
  bool known = false;
  for (const auto& t : task_names()) known = known || t == s.task;
  if (!known) throw Error(Errc::UnknownTask, "task: unknown task '" + s.task + "'");
  if (has(j, "budget")) {
    const auto& b = j.at("budget");
    only(b, "budget", {"samples", "chunks", "k_sigma", "eps_min", "eps_max", "grid_points"});
    s.budget.samples = count_or(b, "samples", "budget", s.budget.samples);
    s.budget.chunks = count_or(b, "chunks", "budget", s.budget.chunks);
    s.budget.k_sigma = number_or(b, "k_sigma", "budget", s.budget.k_sigma);
    s.budget.eps_min = number_or(b, "eps_min", "budget", s.budget.eps_min);
    s.budget.eps_max = number_or(b, "eps_max", "budget", s.budget.eps_max);
    s.budget.grid_points = count_or(b, "grid_points", "budget", s.budget.grid_points);
    if (s.budget.samples == 0) fail("budget.samples", "must be positive");
    if (s.budget.chunks == 0) fail("budget.chunks", "must be positive");
    if (!(s.budget.k_sigma > 0)) fail("budget.k_sigma", "must be positive");
    if (!(s.budget.eps_min > 0 && s.budget.eps_min < s.budget.eps_max)) fail("budget.eps_min", "needs 0 < eps_min < eps_max");
    if (s.budget.grid_points < 2) fail("budget.grid_points", "needs at least 2 points");
  }
  s.payload = req(j, "payload", "");
  object(s.payload, "payload");
  return s;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::ParseError, "scenario: cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

// ---------------------------------------------------------------------------
// Report encoding.

inline json num(double x) {
  if (std::isfinite(x)) return x;
  return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
}

// A numeric entry with its evaluation method and, when stochastic, its SE.
inline json measured(double value, EvalMethod method, double se = 0) {
  json j{{"value", num(value)}, {"method", method_name(method)}};
  if (method == EvalMethod::monte_carlo) j["se"] = num(se);
  return j;
}

inline json exact(double value) { return measured(value, EvalMethod::closed_form); }

inline json report_json(const VerificationReport& r) {
  json j{{"verdict", verdict_name(r.verdict)},
         {"worst_margin", measured(r.worst_margin, r.method, r.margin_se)},
         {"worst_epsilon", num(r.worst_epsilon)},
         {"method", method_name(r.method)}};
  if (r.method == EvalMethod::monte_carlo) {
    j["samples"] = r.sample_count;
    j["seed"] = r.seed;
  }
  return j;
}

inline json offset_json(const RhsOffset& o) {
  return {{"value", num(o.constant)},
          {"over_eta", num(o.inverse)},
          {"power_coef", num(o.power_coef)},
          {"power_exponent", num(o.power_exponent)}};
}

inline json cert_json(const EsiCertificate& c) {
  json j{{"lhs", c.lhs ? describe(*c.lhs) : c.lhs_label},
         {"rhs", num(c.rhs)},
         {"scale", c.scale.describe()},
         {"offset", offset_json(c.offset)},
         {"holds", c.holds()},
         {"provenance", c.provenance}};
  if (c.evidence) j["evidence"] = report_json(*c.evidence);
  return j;
}

inline Table margin_table(const VerificationReport& r) {
  Table t{{"eps", "margin", "se"}, {}};
  for (const auto& p : r.points) t.rows.push_back({p.eps, p.margin, p.se});
  return t;
}

inline std::string csv_field(double x) { return format_double(x); }

// Header row, comma separated, shortest round-trip floats, newline-terminated.
inline std::string emit_plot_data(const Report& rep, const std::string& which) {
  auto it = rep.tables.find(which);
  if (it == rep.tables.end()) throw Error(Errc::MissingTable, "report has no table '" + which + "'");
  std::string out;
  for (std::size_t i = 0; i < it->second.columns.size(); ++i) out += (i ? "," : "") + it->second.columns[i];
  out += "\n";
  for (const auto& row : it->second.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_field(row[i]);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task runners. Each fills doc["results"], tables and verdicts.

namespace detail {

struct Ctx {
  const Scenario& s;
  Report& rep;
  json& results;
  EvalBudget budget;
  VerifyConfig cfg;

  void verdict(Verdict v, const std::string& what) {
    rep.verdicts.push_back(v);
    rep.doc["verdicts"].push_back({{"check", what}, {"verdict", verdict_name(v)}});
  }
  void check(bool ok, const std::string& what) { verdict(ok ? Verdict::holds : Verdict::fails, what); }
  void line(const std::string& l) { rep.summary += l + "\n"; }
};

inline Verdict verdict_of(bool ok) { return ok ? Verdict::holds : Verdict::fails; }

inline void run_verify(Ctx& c) {
  using namespace field;
  const json& p = c.s.payload;
  only(p, "payload", {"lhs", "rhs", "scale", "offset", "delta"});
  const Model lhs = parse_model(req(p, "lhs", "payload"), "payload.lhs");
  std::optional<Model> rhs;
  if (has(p, "rhs")) rhs = parse_model(p.at("rhs"), "payload.rhs");
  const ScaleFunction u = parse_scale(req(p, "scale", "payload"), "payload.scale");
  const RhsOffset off = has(p, "offset") ? parse_offset(p.at("offset"), "payload.offset") : RhsOffset{};
  const auto cert = verify_esi(lhs, rhs, u, off, c.cfg, c.budget);
  c.results["certificate"] = cert_json(cert);
  c.rep.tables["margin_vs_eps"] = margin_table(*cert.evidence);
  c.verdict(cert.evidence->verdict, "lhs <=_u rhs + offset");
  c.line("statement: " + cert.lhs_label + " <=_u " + cert.rhs_label + " with u = " + u.describe());
  c.line("worst margin: " + format_double(cert.evidence->worst_margin) + " at eps = " +
         format_double(cert.evidence->worst_epsilon) + " (" + method_name(cert.evidence->method) + ")");
  if (has(p, "delta")) {
    const double delta = number(p, "delta", "payload");
    if (!(delta > 0 && delta < 1)) fail("payload.delta", "must lie in (0,1)");
    if (cert.holds() && off.is_zero()) {
      const auto b = extract_bounds(cert, delta);
      c.results["bounds"] = {{"delta", delta},
                             {"expectation_bound", exact(b.expectation_bound)},
                             {"hp_bound", exact(b.hp_bound)},
                             {"argmin_epsilon", num(b.argmin_epsilon)}};
      c.rep.tables["tail_quantiles"] = {{"delta", "quantile"}, {{delta, b.hp_bound}}};
    }
  }
}

inline void run_bounds(Ctx& c) {
  using namespace field;
  const json& p = c.s.payload;
  only(p, "payload", {"scale", "ns", "delta", "complexity", "tail", "union"});
  const ScaleFunction u = parse_scale(req(p, "scale", "payload"), "payload.scale");
  const auto ns = numbers(p, "ns", "payload");
  for (std::size_t i = 0; i < ns.size(); ++i)
    if (!(ns[i] >= 1)) fail(index("payload.ns", i), "sample sizes must be at least 1");
  const double delta = number(p, "delta", "payload");
  const double comp = number_or(p, "complexity", "payload", 0);
  const auto r = guarded("payload", [&] { return optimize_rate(u, ns, delta, comp); });
  Table t{{"n", "bound", "eps_star"}, {}};
  json pts = json::array();
  for (const auto& q : r.points) {
    t.rows.push_back({q.n, q.bound, q.eps_star});
    pts.push_back({{"n", num(q.n)}, {"bound", exact(q.bound)}, {"eps_star", num(q.eps_star)}});
  }
  c.rep.tables["bound_vs_n"] = t;
  c.results["rate"] = {{"gamma", num(r.gamma)},
                       {"alpha", num(r.alpha)},
                       {"fitted_slope", exact(r.fitted_slope)},
                       {"points", pts}};
  c.verdict(Verdict::holds, "rate optimization");
  c.line("fitted slope: " + format_double(r.fitted_slope) + " (law n^-" + format_double(r.alpha) + ")");

  if (has(p, "tail")) {
    const json& t2 = p.at("tail");
    only(t2, "payload.tail", {"a", "b", "eta_prime", "z", "deltas"});
    const TailBoundParams tb{positive(t2, "a", "payload.tail"), positive(t2, "b", "payload.tail")};
    std::optional<Model> z;
    if (has(t2, "z")) z = parse_model(t2.at("z"), "payload.tail.z");
    auto cert = guarded("payload.tail",
                        [&] { return tail_to_esi(tb, number(t2, "eta_prime", "payload.tail"), z); });
    if (z) cert.evidence = reverify(cert, c.cfg, c.budget);
    c.results["tail_certificate"] = cert_json(cert);
    if (cert.evidence) c.verdict(cert.evidence->verdict, "tail certificate recheck");
    std::vector<double> ds = has(t2, "deltas") ? numbers(t2, "deltas", "payload.tail") : std::vector<double>{0.1, 0.05, 0.01};
    Table q{{"delta", "quantile"}, {}};
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (!(ds[i] > 0 && ds[i] < 1)) fail(index("payload.tail.deltas", i), "must lie in (0,1)");
      // Z <=_eta c gives Z <= c + log(1/delta)/eta with probability >= 1 - delta.
      q.rows.push_back({ds[i], cert.rhs + std::log(1 / ds[i]) / cert.scale.eta()});
    }
    c.rep.tables["tail_quantiles"] = q;
    c.line("tail certificate: Z <=_" + format_double(cert.scale.eta()) + " " + format_double(cert.rhs));
  }
  if (has(p, "union")) {
    const json& un = p.at("union");
    only(un, "payload.union", {"eta", "k", "delta"});
    const auto k = count(un, "k", "payload.union");
    const auto cu = guarded("payload.union", [&] {
      return compare_union_bound(number(un, "eta", "payload.union"), static_cast<int>(k),
                                 number(un, "delta", "payload.union"));
    });
    c.results["union"] = {{"chained_bound", exact(cu.chained_bound)},
                          {"union_bound", exact(cu.union_bound)},
                          {"saving", exact(cu.saving)}};
  }
}

inline void run_compose(Ctx& c) {
  using namespace field;
  const json& p = c.s.payload;
  only(p, "payload", {"mode", "inputs", "copies", "recheck"});
  const std::string mode_s = string(p, "mode", "payload");
  CompositionMode mode;
  if (mode_s == "dependent")
    mode = CompositionMode::dependent;
  else if (mode_s == "independent")
    mode = CompositionMode::independent;
  else if (mode_s == "iid_average")
    mode = CompositionMode::iid_average;
  else
    fail("payload.mode", "expected dependent, independent or iid_average");
  const auto& ins = array(p, "inputs", "payload");
  const std::size_t copies = count_or(p, "copies", "payload", 1);
  if (copies == 0) fail("payload.copies", "must be positive");
  const bool recheck = boolean_or(p, "recheck", "payload", true);
  std::vector<EsiCertificate> certs;
  bool all_hold = true;
  json jin = json::array();
  for (std::size_t i = 0; i < ins.size(); ++i) {
    const std::string path = index("payload.inputs", i);
    only(ins[i], path, {"lhs", "scale"});
    const Model x = parse_model(req(ins[i], "lhs", path), join(path, "lhs"));
    const ScaleFunction u = parse_scale(req(ins[i], "scale", path), join(path, "scale"));
    auto cert = verify_esi(x, std::nullopt, u, {}, c.cfg, c.budget);
    jin.push_back(cert_json(cert));
    c.verdict(cert.evidence->verdict, "input " + std::to_string(i));
    all_hold = all_hold && cert.holds();
    for (std::size_t k = 0; k < copies; ++k) certs.push_back(cert);
  }
  c.results["inputs"] = jin;
  if (!all_hold) {
    c.results["combined"] = nullptr;
    c.line("combined: not formed (an input does not hold)");
    return;
  }
  const auto out = guarded("payload", [&] { return combine(certs, mode, recheck, c.cfg); });
  c.results["combined"] = cert_json(out);
  if (out.evidence) {
    c.verdict(out.evidence->verdict, "combined recheck");
    c.rep.tables["margin_vs_eps"] = margin_table(*out.evidence);
  }
  c.line("combined: " + out.lhs_label + " <=_u 0 with u = " + out.scale.describe());
}

inline void run_characterize(Ctx& c) {
  using namespace field;
  const json& p = c.s.payload;
  only(p, "payload", {"members", "scale"});
  const FamilySpec fam = guarded("payload.members", [&] { return FamilySpec(parse_members(p, "payload")); });
  const ScaleFunction u = parse_scale(req(p, "scale", "payload"), "payload.scale");
  RoundtripConfig rc;
  rc.verify = c.cfg;
  const auto r = characterization_roundtrip(fam, u, rc);
  json legs = json::array();
  for (const auto& l : r.legs) {
    legs.push_back({{"name", l.name},
                    {"checked", l.checked},
                    {"passed", l.passed},
                    {"worst_margin", exact(l.worst_margin)},
                    {"detail", l.detail}});
    if (l.checked) c.check(l.passed, "leg " + l.name);
    c.line("leg " + l.name + ": " + (l.checked ? (l.passed ? "passed" : "failed") : "skipped"));
  }
  c.results = {{"regular", r.regular},
               {"subcentered", r.subcentered},
               {"eta_star", num(r.eta_star)},
               {"C_star", num(r.C_star)},
               {"tail", {{"a", num(r.tail.a)}, {"b", num(r.tail.b)}}},
               {"legs", legs}};
  if (r.subgamma) c.results["subgamma"] = {{"c", num(r.subgamma->c)}, {"v", num(r.subgamma->v)}};
  if (r.linear_scale) c.results["linear_scale"] = r.linear_scale->describe();
}

inline WitnessParams parse_witness(const json& j, const std::string& path) {
  using namespace field;
  only(j, path, {"c", "C", "variant", "target"});
  WitnessParams w;
  w.c = number_or(j, "c", path, w.c);
  w.C = number_or(j, "C", path, w.C);
  if (has(j, "variant")) {
    const auto v = string(j, "variant", path);
    if (v == "plain")
      w.variant = WitnessVariant::plain;
    else if (v == "squared")
      w.variant = WitnessVariant::squared;
    else
      fail(join(path, "variant"), "expected plain or squared");
  }
  if (has(j, "target")) {
    const auto v = string(j, "target", path);
    if (v == "x")
      w.target = SquaredTarget::x;
    else if (v == "x_minus")
      w.target = SquaredTarget::x_minus;
    else
      fail(join(path, "target"), "expected x or x_minus");
  }
  return w;
}

inline void run_conditions(Ctx& c) {
  using namespace field;
  const json& p = c.s.payload;
  only(p, "payload",
       {"members", "analysis", "betas", "ordered_sequence", "witness", "c", "delta", "scale", "b", "eta_star"});
  const auto members = parse_members(p, "payload");
  const FamilySpec fam = guarded("payload.members", [&] { return FamilySpec(members); });
  const std::string a = string(p, "analysis", "payload");
  if (a == "bernstein") {
    BernsteinConfig bc;
    bc.ordered_sequence = boolean_or(p, "ordered_sequence", "payload", false);
    const auto r = bernstein_fit(fam, numbers(p, "betas", "payload"), bc);
    json fits = json::array();
    for (const auto& f : r.fits)
      fits.push_back({{"beta", num(f.beta)}, {"B", exact(f.B)}, {"feasible", f.feasible}, {"growth_flag", f.growth_flag}});
    c.results = {{"fits", fits},
                 {"largest_feasible_beta", num(r.largest_feasible_beta)},
                 {"feasible_up_to", num(r.feasible_up_to)}};
    c.verdict(Verdict::holds, "bernstein fit");
    c.line("largest feasible beta: " + format_double(r.largest_feasible_beta));
  } else if (a == "witness") {
    const auto w = parse_witness(req(p, "witness", "payload"), "payload.witness");
    const auto r = witness_check(fam, w);
    json ms = json::array();
    for (const auto& m : r.members)
      ms.push_back({{"lhs", num(m.lhs)},
                    {"rhs", num(m.rhs)},
                    {"ratio", num(m.ratio)},
                    {"ratio_se", num(m.ratio_se)},
                    {"zero_denominator", m.zero_denominator},
                    {"pass", m.pass}});
    c.results = {{"members", ms}, {"all_pass", r.all_pass()}};
    c.check(r.all_pass(), "witness of badness");
    c.line(std::string("witness: ") + (r.all_pass() ? "all members pass" : "a member fails"));
  } else if (a == "smallball") {
    const double cc = number(p, "c", "payload"), dd = number(p, "delta", "payload");
    json ms = json::array();
    bool ok = true;
    for (std::size_t i = 0; i < fam.size(); ++i) {
      const auto r = guarded(index("payload.members", i), [&] { return smallball_verify(fam.members[i], cc, dd); });
      ms.push_back({{"K", num(r.params.K)},
                    {"Ccap", num(r.params.Ccap)},
                    {"upper_part", measured(r.upper_part, r.method)},
                    {"lower_part", measured(r.lower_part, r.method)},
                    {"mean", num(r.mean)},
                    {"first_holds", r.first_holds},
                    {"second_holds", r.second_holds}});
      ok = ok && r.first_holds && r.second_holds;
    }
    c.results = {{"members", ms}};
    c.check(ok, "small-ball inequalities");
    c.line(std::string("small ball: ") + (ok ? "both inequalities hold" : "an inequality fails"));
  } else if (a == "gm") {
    const ScaleFunction u = parse_scale(req(p, "scale", "payload"), "payload.scale");
    const auto w = has(p, "witness") ? parse_witness(p.at("witness"), "payload.witness") : WitnessParams{};
    const auto r = gm_transform(fam, u, w, c.cfg);
    json certs = json::array();
    for (const auto& ce : r.certs) certs.push_back(cert_json(ce));
    c.results = {{"c_star", num(r.c_star)}, {"certificates", certs}};
    bool ok = true;
    for (const auto& ce : r.certs) ok = ok && ce.holds();
    c.check(ok, "gm transform certificates");
    c.line("c*: " + format_double(r.c_star));
  } else if (a == "equivalence") {
    EquivalenceConfig ec;
    ec.verify = c.cfg;
    if (has(p, "betas")) ec.betas = numbers(p, "betas", "payload");
    ec.eta_star = number_or(p, "eta_star", "payload", ec.eta_star);
    const double b = number(p, "b", "payload");
    const auto r = equivalence_suite(fam, b, ec);
    json rows = json::array();
    for (const auto& row : r.augmented)
      rows.push_back({{"beta", num(row.beta)},
                      {"c", num(row.c)},
                      {"c_star", num(row.c_star)},
                      {"eta_circ", num(row.eta_circ)},
                      {"C_circ", num(row.C_circ)},
                      {"passed", row.passed}});
    c.results = {{"regular", r.regular},
                 {"esi_family", r.esi_family},
                 {"augmented", rows},
                 {"c1_constants", r.c1_constants},
                 {"c2_constant", num(r.c2_constant)},
                 {"c1_holds", r.c1_holds},
                 {"c2_holds", r.c2_holds},
                 {"d12", r.d12},
                 {"d23", r.d23},
                 {"d31", r.d31},
                 {"strong_betas", r.strong_betas},
                 {"violated_betas", r.violated_betas}};
    c.check(r.d12, "direction 1->2");
    c.check(r.d31, "direction 3->1");
    c.line(std::string("directions: 1->2 ") + (r.d12 ? "pass" : "fail") + ", 2->3 " + (r.d23 ? "pass" : "fail") +
           ", 3->1 " + (r.d31 ? "pass" : "fail"));
  } else {
    fail("payload.analysis", "expected bernstein, witness, smallball, gm or equivalence");
  }
}

inline void run_pacbayes(Ctx& c) {
  using namespace field;
  const json& p = c.s.payload;
  only(p, "payload", {"members", "prior", "posterior", "eta", "n", "part", "simulate"});
  PacBayesFamily fam{parse_members(p, "payload"), {}};
  const std::size_t m = fam.size();
  const auto prior = parse_measure(req(p, "prior", "payload"), m, "payload.prior");
  const auto post = parse_measure(req(p, "posterior", "payload"), m, "payload.posterior");
  const double eta = positive(p, "eta", "payload");
  const std::size_t n = count_or(p, "n", "payload", 1);
  if (n == 0) fail("payload.n", "must be positive");
  const std::size_t part = count(p, "part", "payload");
  if (part < 1 || part > 3) fail("payload.part", "must be 1, 2 or 3");
  std::vector<EsiCertificate> certs;
  if (part == 2) {
    json jm = json::array();
    for (std::size_t f = 0; f < m; ++f) {
      certs.push_back(verify_esi(fam.members[f], std::nullopt, ScaleFunction::constant(eta), {}, c.cfg, c.budget));
      jm.push_back(cert_json(certs.back()));
      c.verdict(certs.back().evidence->verdict, "member " + std::to_string(f) + " <=_eta 0");
    }
    c.results["member_certificates"] = jm;
    for (const auto& ce : certs)
      if (!ce.holds()) {
        c.results["bound"] = nullptr;
        return;
      }
  }
  const auto r = pacbayes_combine(static_cast<int>(part), fam, prior, post, eta, n, part == 2 ? &certs : nullptr,
                                  c.budget);
  c.results["bound"] = {{"part", part},
                        {"eta", num(r.bound.eta)},
                        {"n_copies", n},
                        {"kl", exact(r.bound.kl)},
                        {"bound_value", exact(r.bound.bound_value)}};
  if (r.bound.annealed_term) c.results["bound"]["annealed_term"] = exact(*r.bound.annealed_term);
  c.results["certificate"] = cert_json(r.cert);
  c.line("part " + std::to_string(part) + " bound: " + format_double(r.bound.bound_value) + " at scale " +
         format_double(r.bound.eta));
  if (boolean_or(p, "simulate", "payload", true)) {
    const auto v = pacbayes_verify(static_cast<int>(part), fam, prior, fixed_posterior(post), eta, n, c.budget, c.cfg);
    c.results["simulation"] = report_json(v);
    c.verdict(v.verdict, "composed certificate simulation");
    c.line("simulation: " + std::string(verdict_name(v.verdict)));
  }
}

inline void run_random_eta(Ctx& c) {
  using namespace field;
  const json& p = c.s.payload;
  only(p, "payload", {"grid", "outcomes", "delta"});
  const auto grid = numbers(p, "grid", "payload");
  const auto& outs = array(p, "outcomes", "payload");
  std::vector<std::pair<double, std::size_t>> pi;
  std::vector<std::vector<double>> w;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const std::string path = index("payload.outcomes", i);
    only(outs[i], path, {"prob", "index", "w"});
    const std::size_t k = count(outs[i], "index", path);
    if (k >= grid.size()) fail(join(path, "index"), "outside the grid");
    pi.emplace_back(number(outs[i], "prob", path), k);
    w.push_back(numbers(outs[i], "w", path));
    if (w.back().size() != grid.size()) fail(join(path, "w"), "needs one value per grid point");
  }
  const auto s = guarded("payload", [&] { return finite_scenario(grid, pi, w); });
  const auto v = verify_random_eta(s, c.budget, c.cfg);
  c.results["verification"] = report_json(v);
  c.results["expectation"] = exact(std::exp(v.worst_margin));
  c.verdict(v.verdict, "E[exp(eta-hat W)] <= 1");
  c.line("E[exp(eta-hat W)] = " + format_double(std::exp(v.worst_margin)));
  if (v.verdict == Verdict::holds) {
    const double delta = number_or(p, "delta", "payload", 0.05);
    if (!(delta > 0 && delta <= 1)) fail("payload.delta", "must lie in (0,1]");
    const auto b = random_eta_bounds(s, delta, c.budget, c.cfg);
    c.results["bounds"] = {{"delta", delta},
                           {"hp_frequency", measured(b.hp_frequency, b.method, b.hp_se)},
                           {"hp_ok", b.hp_ok},
                           {"mean_x", measured(b.mean_x, b.method)},
                           {"mean_inv_eta", measured(b.mean_inv_eta, b.method)},
                           {"lhs_minus_rhs", measured(b.lhs_minus_rhs, b.method, b.lhs_minus_rhs_se)},
                           {"expectation_ok", b.expectation_ok},
                           {"holds_without_correction", b.holds_without_correction},
                           {"partial_converse", report_json(b.partial_converse)}};
    c.check(b.expectation_ok, "E[X] <= E[Y + 1/eta-hat]");
    c.check(b.hp_ok, "high-probability bound");
    c.verdict(b.partial_converse.verdict, "partial converse");
    c.line(std::string("expectation bound: ") + (b.expectation_ok ? "holds" : "fails") +
           "; without the 1/eta-hat term: " + (b.holds_without_correction ? "holds" : "fails"));
  }
}

inline void run_sequential(Ctx& c) {
  using namespace field;
  const json& p = c.s.payload;
  only(p, "payload", {"increment", "eta", "horizon", "compensate", "stop", "deltas", "conditional"});
  const Model x = parse_model(req(p, "increment", "payload"), "payload.increment");
  const double eta = positive(p, "eta", "payload");
  const std::size_t T = count(p, "horizon", "payload");
  if (T == 0) fail("payload.horizon", "must be at least 1");
  Model inc = x;
  if (boolean_or(p, "compensate", "payload", false)) {
    const double a = annealed_expectation(x, eta, c.budget).value;
    if (!std::isfinite(a)) fail("payload.increment", "annealed expectation is infinite at eta");
    inc = Model::shifted(x, a);
    c.results["compensation"] = exact(a);
  }
  StoppingRule stop = stop_at(T);
  const json& st = req(p, "stop", "payload");
  const std::string rule = string(st, "rule", "payload.stop");
  if (rule == "fixed") {
    only(st, "payload.stop", {"rule", "t"});
    const std::size_t t = count(st, "t", "payload.stop");
    if (t == 0 || t > T) fail("payload.stop.t", "must lie in 1..horizon");
    stop = stop_at(t);
  } else if (rule == "crossing") {
    only(st, "payload.stop", {"rule", "level"});
    stop = stop_on_crossing(number(st, "level", "payload.stop"), T);
  } else {
    fail("payload.stop.rule", "expected fixed or crossing");
  }
  const ProcessSpec spec = iid_process(inc, T, eta, stop);
  const std::size_t paths = c.budget.samples;

  if (has(p, "conditional")) {
    const json& cj = p.at("conditional");
    only(cj, "payload.conditional", {"histories", "draws"});
    const auto r = conditional_esi_check(spec, count(cj, "histories", "payload.conditional"),
                                         count(cj, "draws", "payload.conditional"), c.budget,
                                         ConditionalCheckConfig{16, c.cfg});
    c.results["conditional"] = {{"verdict", verdict_name(r.verdict)},
                                {"worst_margin", measured(r.worst_margin, r.points.front().method, r.worst_se)},
                                {"points", r.points.size()},
                                {"measurable_ok", r.measurable_ok},
                                {"tower_ok", r.tower_ok},
                                {"unconditional_ok", r.unconditional_ok},
                                {"supermartingale_ok", r.supermartingale_ok}};
    c.verdict(r.verdict, "conditional ESI");
  }

  const auto ss = stopped_sum_check(spec, paths, c.budget, c.cfg);
  c.results["stopped_sum"] = {{"estimate", measured(ss.estimate, EvalMethod::monte_carlo, ss.se)},
                              {"report", report_json(ss.report)},
                              {"within_band", ss.within_band},
                              {"mean_tau", num(ss.mean_tau)},
                              {"max_tau", ss.max_tau},
                              {"mean_sum", measured(ss.mean_sum, EvalMethod::monte_carlo, ss.mean_sum_se)}};
  c.check(ss.within_band, "E[exp(eta S_tau)] <= 1 + k SE");
  c.line("E[exp(eta S_tau)] = " + format_double(ss.estimate) + " +- " + format_double(ss.se) + " (" +
         verdict_name(ss.report.verdict) + ")");

  std::vector<double> deltas = has(p, "deltas") ? numbers(p, "deltas", "payload") : std::vector<double>{0.05};
  for (std::size_t i = 0; i < deltas.size(); ++i)
    if (!(deltas[i] > 0 && deltas[i] <= 1)) fail(index("payload.deltas", i), "must lie in (0,1]");
  const auto v = ville_bound(spec, deltas, paths, std::nullopt, c.budget, c.cfg);
  Table cf{{"delta", "threshold", "frequency", "se"}, {}};
  Table tq{{"delta", "quantile"}, {}};
  json lv = json::array();
  for (const auto& l : v.levels) {
    cf.rows.push_back({l.delta, l.threshold, l.frequency, l.se});
    tq.rows.push_back({l.delta, l.threshold});
    lv.push_back({{"delta", num(l.delta)},
                  {"threshold", num(l.threshold)},
                  {"frequency", measured(l.frequency, EvalMethod::monte_carlo, l.se)},
                  {"ok", l.ok}});
    c.check(l.ok, "ville crossing at delta " + format_double(l.delta));
    c.line("ville delta " + format_double(l.delta) + ": frequency " + format_double(l.frequency));
  }
  c.rep.tables["crossing_frequency"] = cf;
  c.rep.tables["tail_quantiles"] = tq;
  c.results["ville"] = {{"levels", lv}, {"sup_certificate", cert_json(v.sup_cert)}};
  c.verdict(v.sup_cert.evidence->verdict, "sup certificate simulation");
}

}  // namespace detail

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples;
};

inline Scenario apply(Scenario s, const Overrides& o) {
  if (o.seed) s.seed = *o.seed;
  if (o.samples) {
    if (*o.samples == 0) throw Error(Errc::SchemaMismatch, "--samples: must be positive");
    s.budget.samples = *o.samples;
  }
  return s;
}

// Dispatches to the module operation named by the task. Errors raised by the
// operation on the scenario's inputs propagate as esi::Error.
inline Report run_scenario(const Scenario& s) {
  const auto t0 = std::chrono::steady_clock::now();
  Report rep;
  rep.doc["schema_version"] = kSchemaVersion;
  rep.doc["task"] = s.task;
  rep.doc["seed"] = s.seed;
  rep.doc["inputs"] = s.raw;
  rep.doc["budget"] = {{"samples", s.budget.samples},   {"chunks", s.budget.chunks},
                       {"k_sigma", num(s.budget.k_sigma)}, {"eps_min", num(s.budget.eps_min)},
                       {"eps_max", num(s.budget.eps_max)}, {"grid_points", s.budget.grid_points}};
  rep.doc["verdicts"] = json::array();
  json results = json::object();
  detail::Ctx c{s, rep, results, s.eval_budget(), s.verify_config()};
  c.line("task: " + s.task);
  c.line("seed: " + std::to_string(s.seed));
  if (s.task == "verify")
    detail::run_verify(c);
  else if (s.task == "bounds")
    detail::run_bounds(c);
  else if (s.task == "compose")
    detail::run_compose(c);
  else if (s.task == "characterize")
    detail::run_characterize(c);
  else if (s.task == "conditions")
    detail::run_conditions(c);
  else if (s.task == "pacbayes")
    detail::run_pacbayes(c);
  else if (s.task == "random_eta")
    detail::run_random_eta(c);
  else if (s.task == "sequential")
    detail::run_sequential(c);
  else
    throw Error(Errc::UnknownTask, "task: unknown task '" + s.task + "'");
  rep.doc["results"] = results;
  json tables = json::array();
  for (const auto& [name, t] : rep.tables) tables.push_back({{"name", name}, {"columns", t.columns}, {"rows", t.rows.size()}});
  rep.doc["tables"] = tables;
  const int code = rep.exit_code();
  rep.doc["exit_code"] = code;
  rep.summary += "exit code: " + std::to_string(code) + "\n";
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline std::string report_text(const Report& rep) { return rep.doc.dump(2) + "\n"; }

// report.json, summary.txt and one CSV per table; timing.json holds the
// wall-clock time, kept apart so the other files are reproducible.
inline void write_outputs(const Report& rep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& body) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error(Errc::InvalidArgument, "--out: cannot write '" + (dir / name).string() + "'");
    out << body;
  };
  put("report.json", report_text(rep));
  put("summary.txt", rep.summary);
  for (const auto& kv : rep.tables) put(kv.first + ".csv", emit_plot_data(rep, kv.first));
  put("timing.json", json{{"wall_seconds", rep.wall_seconds}}.dump(2) + "\n");
}

}  // namespace esi::io
