#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "esi/measure.hpp"
#include "esi/scale.hpp"

namespace esi {

// f(eta) = constant + inverse/eta + power_coef * eta^power_exponent. Covers the
// right-hand offsets that appear in practice: c, KL/eta, log(2)/eta, C*eta^p.
// An infinite exponent follows eta^{1/0} := 0.
struct RhsOffset {
  double constant = 0.0;
  double inverse = 0.0;
  double power_coef = 0.0;
  double power_exponent = 1.0;

  static RhsOffset none() { return {}; }
  static RhsOffset value(double c) { return {c, 0, 0, 1}; }
  static RhsOffset over_eta(double k) { return {0, k, 0, 1}; }
  static RhsOffset power(double coef, double exponent) { return {0, 0, coef, exponent}; }

  double operator()(double eta) const {
    double r = constant;
    if (inverse != 0) r += std::isinf(eta) ? 0.0 : inverse / eta;
    if (power_coef != 0 && std::isfinite(power_exponent)) r += power_coef * std::pow(eta, power_exponent);
    return r;
  }
  bool is_zero() const {
    return constant == 0 && inverse == 0 && (power_coef == 0 || !std::isfinite(power_exponent));
  }
  RhsOffset plus(const RhsOffset& o) const {
    RhsOffset r = *this;
    r.constant += o.constant;
    r.inverse += o.inverse;
    if (o.power_coef != 0) {
      if (r.power_coef != 0 && r.power_exponent != o.power_exponent)
        throw Error(Errc::Unsupported, "cannot add offsets with different power exponents");
      r.power_coef += o.power_coef;
      r.power_exponent = o.power_exponent;
    }
    return r;
  }
  std::string describe() const {
    std::string s = format_double(constant);
    if (inverse != 0) s += " + " + format_double(inverse) + "/eta";
    if (power_coef != 0) s += " + " + format_double(power_coef) + "*eta^" + format_double(power_exponent);
    return s;
  }
};

struct GridSpec {
  double eps_min = 1e-4;
  double eps_max = 1e2;
  std::size_t points = 64;
  std::size_t refine = 4;  // extra points on each side of the worst grid point
};

struct VerifyConfig {
  GridSpec grid;
  double k_sigma = 3.0;
  // Rounding allowance on the margin for exact evaluation, quadrature and
  // simulation (the last only matters for zero-variance estimates).
  double closed_form_slack = 1e-12;
  double quadrature_slack = 1e-9;
  double monte_carlo_slack = 1e-12;
};

enum class Verdict { holds, fails, inconclusive };

inline const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::holds: return "holds";
    case Verdict::fails: return "fails";
    case Verdict::inconclusive: return "inconclusive";
  }
  return "?";
}

struct MarginPoint {
  double eps;
  double eta;
  double margin;
  double se;
};

struct VerificationReport {
  Verdict verdict = Verdict::inconclusive;
  double worst_epsilon = 0.0;
  double worst_margin = 0.0;
  double margin_se = 0.0;
  std::vector<double> eps_grid;
  std::vector<MarginPoint> points;
  EvalMethod method = EvalMethod::closed_form;
  std::uint64_t seed = 0;
  std::size_t sample_count = 0;
};

// X <=_u Y + f(u). The left side is kept when it is a concrete model; the
// right side is a constant (the library always works with differences).
struct EsiCertificate {
  std::optional<Model> lhs;
  double rhs = 0.0;
  ScaleFunction scale = ScaleFunction::constant(1.0);
  RhsOffset offset;
  std::optional<VerificationReport> evidence;
  std::vector<std::string> provenance;
  std::string lhs_label;
  std::string rhs_label;

  bool asserted() const { return !provenance.empty() && provenance.front().rfind("asserted", 0) == 0; }
  bool derived() const { return !provenance.empty() && provenance.back().rfind("derived", 0) == 0; }
  // Verified as holding, or taken as true by construction.
  bool holds() const { return evidence ? evidence->verdict == Verdict::holds : (asserted() || derived()); }
  std::string lineage() const {
    std::string s;
    for (const auto& p : provenance) s += (s.empty() ? "" : " | ") + p;
    return s;
  }
};

namespace detail {

inline MarginPoint margin_at(const Model& diff, double eps, double eta, const RhsOffset& offset,
                             const EvalBudget& budget, EvalMethod& method, std::size_t& samples) {
  if (std::isinf(eta)) {
    // The almost-sure limit: sup of the support against the offset.
    return {eps, eta, support(diff).hi - offset(eta) - eps, 0.0};
  }
  const AnnealedValue a = annealed_expectation(diff, eta, budget);
  if (a.method == EvalMethod::monte_carlo) {
    method = EvalMethod::monte_carlo;
    samples = std::max(samples, a.sample_count);
  } else if (a.method == EvalMethod::quadrature && method == EvalMethod::closed_form) {
    method = EvalMethod::quadrature;
  }
  const double m = std::isinf(a.value) ? kInf : a.value - offset(eta) - eps;
  return {eps, eta, m, a.standard_error};
}

inline void assign_verdict(VerificationReport& r, const VerifyConfig& cfg) {
  const double slack = r.method == EvalMethod::closed_form ? cfg.closed_form_slack
                       : r.method == EvalMethod::quadrature ? cfg.quadrature_slack
                                                            : cfg.monte_carlo_slack;
  const double k = cfg.k_sigma;
  const MarginPoint* fail = nullptr;
  const MarginPoint* upper = nullptr;
  for (const auto& p : r.points) {
    if (p.margin - k * p.se > slack && (!fail || p.margin - k * p.se > fail->margin - k * fail->se)) fail = &p;
    if (!upper || p.margin + k * p.se > upper->margin + k * upper->se) upper = &p;
  }
  const MarginPoint* w = fail ? fail : upper;
  r.worst_epsilon = w->eps;
  r.worst_margin = w->margin;
  r.margin_se = w->se;
  if (fail)
    r.verdict = Verdict::fails;
  else if (upper->margin + k * upper->se <= slack)
    r.verdict = Verdict::holds;
  else
    r.verdict = Verdict::inconclusive;
}

}  // namespace detail

// Report for E[e^{eta V}] <= 1 from an estimate of the expectation, on the
// annealed scale: margin log(mean)/eta, standard error by the delta method.
inline VerificationReport expectation_report(double mean, double se, double eta, EvalMethod method,
                                             std::size_t samples, std::uint64_t seed, const VerifyConfig& cfg = {}) {
  VerificationReport r;
  r.method = method;
  r.seed = seed;
  r.sample_count = samples;
  r.eps_grid = {0.0};
  r.points.push_back({0.0, eta, std::log(mean) / eta, mean > 0 ? se / (mean * eta) : 0.0});
  detail::assign_verdict(r, cfg);
  return r;
}

// Checks A^{u(eps)}[D - f(u(eps))] <= eps over the eps grid (a single point for
// a constant scale), D being the difference X - Y.
inline VerificationReport verify_difference(const Model& diff, const ScaleFunction& scale, const RhsOffset& offset = {},
                                            const VerifyConfig& cfg = {}, const EvalBudget& budget = {}) {
  VerificationReport r;
  r.seed = budget.seed;
  if (scale.is_constant()) {
    r.points.push_back(detail::margin_at(diff, 0.0, scale.eta(), offset, budget, r.method, r.sample_count));
    r.eps_grid = {0.0};
    detail::assign_verdict(r, cfg);
    return r;
  }
  const GridSpec& g = cfg.grid;
  if (!(g.eps_min > 0) || !(g.eps_max > g.eps_min) || g.points < 2)
    throw Error(Errc::InvalidArgument, "eps grid must be log-spaced over 0 < eps_min < eps_max");
  std::vector<double> grid = log_spaced(g.eps_min, g.eps_max, g.points);
  auto eval_all = [&](const std::vector<double>& eps) {
    std::vector<MarginPoint> pts;
    pts.reserve(eps.size());
    for (double e : eps) pts.push_back(detail::margin_at(diff, e, scale(e), offset, budget, r.method, r.sample_count));
    return pts;
  };
  r.points = eval_all(grid);
  if (g.refine > 0) {
    std::size_t w = 0;
    for (std::size_t i = 1; i < r.points.size(); ++i)
      if (r.points[i].margin + cfg.k_sigma * r.points[i].se > r.points[w].margin + cfg.k_sigma * r.points[w].se) w = i;
    std::vector<double> extra;
    for (int side : {-1, 1}) {
      const long j = static_cast<long>(w) + side;
      if (j < 0 || j >= static_cast<long>(grid.size())) continue;
      const double a = std::log(grid[w]), b = std::log(grid[static_cast<std::size_t>(j)]);
      for (std::size_t k = 1; k <= g.refine; ++k)
        extra.push_back(std::exp(a + (b - a) * static_cast<double>(k) / static_cast<double>(g.refine + 1)));
    }
    auto more = eval_all(extra);
    r.points.insert(r.points.end(), more.begin(), more.end());
    std::sort(r.points.begin(), r.points.end(), [](const auto& x, const auto& y) { return x.eps < y.eps; });
  }
  for (const auto& p : r.points) r.eps_grid.push_back(p.eps);
  detail::assign_verdict(r, cfg);
  return r;
}

inline double constant_value(const std::optional<Model>& rhs) {
  if (!rhs) return 0.0;
  if (auto* c = rhs->as<family::Constant>()) return c->c;
  throw Error(Errc::IncomparableModels,
              "right-hand side must be a constant; pass the coupled difference X - Y as the left-hand side");
}

inline EsiCertificate verify_esi(const Model& lhs, const std::optional<Model>& rhs, const ScaleFunction& scale,
                                 const RhsOffset& offset = {}, const VerifyConfig& cfg = {},
                                 const EvalBudget& budget = {}) {
  const double c = constant_value(rhs);
  const Model diff = c == 0.0 ? lhs : Model::shifted(lhs, c);
  EsiCertificate cert;
  cert.lhs = lhs;
  cert.rhs = c;
  cert.scale = scale;
  cert.offset = offset;
  cert.evidence = verify_difference(diff, scale, offset, cfg, budget);
  cert.lhs_label = describe(lhs);
  cert.rhs_label = format_double(c);
  cert.provenance.push_back("verified: " + cert.lhs_label + " <=_" + scale.describe() + " " + cert.rhs_label +
                            (offset.is_zero() ? "" : " + (" + offset.describe() + ")"));
  return cert;
}

// Re-runs verification on a certificate that carries a concrete left side.
inline VerificationReport reverify(const EsiCertificate& cert, const VerifyConfig& cfg = {},
                                   const EvalBudget& budget = {}) {
  if (!cert.lhs) throw Error(Errc::UncertifiedInput, "certificate has no concrete left-hand model");
  const Model diff = cert.rhs == 0.0 ? *cert.lhs : Model::shifted(*cert.lhs, cert.rhs);
  return verify_difference(diff, cert.scale, cert.offset, cfg, budget);
}

struct BoundExtraction {
  double expectation_bound = 0.0;
  double hp_bound = 0.0;  // holds with probability at least 1 - delta
  double argmin_epsilon = 0.0;
};

namespace detail {

// Minimizes phi over eps > 0: coarse log grid, then golden section on log eps.
template <class Phi>
std::pair<double, double> minimize_log_eps(Phi&& phi, double lo = 1e-12, double hi = 1e8, std::size_t n = 241) {
  const auto grid = log_spaced(lo, hi, n);
  std::size_t best = 0;
  double best_v = kInf;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = phi(grid[i]);
    if (v < best_v) {
      best_v = v;
      best = i;
    }
  }
  double a = std::log(grid[best == 0 ? 0 : best - 1]);
  double b = std::log(grid[std::min(best + 1, n - 1)]);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = phi(std::exp(c)), fd = phi(std::exp(d));
  for (int it = 0; it < 200 && (b - a) > 1e-10 * std::max(1.0, std::abs(a)); ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = phi(std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = phi(std::exp(d));
    }
  }
  const double x = std::exp(0.5 * (a + b));
  const double fx = phi(x);
  if (fx <= best_v) return {x, fx};
  return {grid[best], best_v};
}

inline void require_holds(const EsiCertificate& cert) {
  if (!cert.holds()) throw Error(Errc::UncertifiedInput, "certificate does not hold");
}

}  // namespace detail

inline BoundExtraction extract_bounds(const EsiCertificate& cert, double delta) {
  detail::require_holds(cert);
  if (!(delta > 0 && delta <= 1)) throw Error(Errc::InvalidArgument, "delta must lie in (0,1]");
  const double L = -std::log(delta);
  BoundExtraction b;
  const ScaleFunction& u = cert.scale;
  if (u.is_constant()) {
    const double eta = u.eta();
    b.expectation_bound = cert.rhs + cert.offset(eta);
    b.hp_bound = b.expectation_bound + (std::isinf(eta) ? 0.0 : L / eta);
    b.argmin_epsilon = 0.0;
    return b;
  }
  if (cert.offset.is_zero()) {
    b.expectation_bound = cert.rhs;
  } else {
    auto [e, v] = detail::minimize_log_eps([&](double eps) { return cert.offset(u(eps)) + eps; });
    b.expectation_bound = cert.rhs + v;
  }
  if (L == 0 && cert.offset.is_zero()) {
    b.hp_bound = cert.rhs;
    b.argmin_epsilon = 0.0;
    return b;
  }
  auto [e, v] = detail::minimize_log_eps([&](double eps) {
    const double eta = u(eps);
    return cert.offset(eta) + L / eta + eps;
  });
  b.hp_bound = cert.rhs + v;
  b.argmin_epsilon = e;
  return b;
}

struct TailBoundParams {
  double a;
  double b;
};

// P(Z >= eps) <= a e^{-b eps} for all eps gives Z <=_{eta'} c for 0 < eta' < b.
inline EsiCertificate tail_to_esi(const TailBoundParams& tail, double eta_prime,
                                  const std::optional<Model>& z = std::nullopt) {
  if (!(tail.a > 0) || !(tail.b > 0)) throw Error(Errc::InvalidArgument, "tail parameters must be positive");
  if (!(eta_prime > 0 && eta_prime < tail.b)) throw Error(Errc::EtaOutOfRange, "eta' must lie in (0, b)");
  EsiCertificate cert;
  cert.lhs = z;
  cert.rhs = std::log1p(tail.a * eta_prime / (tail.b - eta_prime)) / eta_prime;
  cert.scale = ScaleFunction::constant(eta_prime);
  cert.lhs_label = z ? describe(*z) : "Z";
  cert.rhs_label = format_double(cert.rhs);
  cert.provenance.push_back("asserted: tail_to_esi(a=" + format_double(tail.a) + ",b=" + format_double(tail.b) +
                            ",eta'=" + format_double(eta_prime) + ")");
  return cert;
}

// Z <=_u 0 gives Z_+ <=_u log(2)/u; the same offset covers Z*1{Z >= c} for c > 0.
inline EsiCertificate positive_part_bound(const EsiCertificate& cert) {
  if (cert.rhs != 0.0 || !cert.offset.is_zero()) throw Error(Errc::WrongShape, "premise must read Z <=_u 0");
  detail::require_holds(cert);
  EsiCertificate out;
  if (cert.lhs) out.lhs = Model::positive_part(*cert.lhs);
  out.scale = cert.scale;
  out.offset = RhsOffset::over_eta(std::log(2.0));
  out.provenance = cert.provenance;
  out.lhs_label = "(" + cert.lhs_label + ")_+";
  out.rhs_label = "0";
  out.provenance.push_back("derived: positive_part_bound");
  return out;
}

struct MarkovBound {
  double bound_exact;
  double bound_e;
};

// From 0 <=_eta X: P(X >= a) <= E[X]/a + p log(1/p)/(eta a), p = P(X < 0).
inline MarkovBound esi_markov(const EsiCertificate& cert, double mean, double p_negative, double a) {
  if (!(a > 0)) throw Error(Errc::NegativeA, "a must be positive");
  detail::require_holds(cert);
  if (!(p_negative >= 0 && p_negative <= 1)) throw Error(Errc::InvalidArgument, "p_negative must lie in [0,1]");
  const double eta = cert.scale.eta();
  return {mean / a + plog_inv(p_negative) / (eta * a), mean / a + 1.0 / (std::exp(1.0) * eta * a)};
}

// Verifies 0 <=_eta X (as -X <=_eta 0) and evaluates the bound from the model's moments.
inline std::pair<EsiCertificate, MarkovBound> esi_markov(const Model& x, double eta, double a,
                                                         const VerifyConfig& cfg = {}) {
  EsiCertificate cert = verify_esi(Model::negate(x), std::nullopt, ScaleFunction::constant(eta), {}, cfg);
  const Moments m = moments(x);
  if (!cert.holds()) throw Error(Errc::UncertifiedInput, "0 <=_eta X does not hold");
  return {cert, esi_markov(cert, m.mean, m.prob_negative, a)};
}

}  // namespace esi
