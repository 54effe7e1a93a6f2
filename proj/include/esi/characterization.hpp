#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "esi/measure.hpp"
#include "esi/scale.hpp"
#include "esi/verify.hpp"

namespace esi {

// A^eta[X - E X] <= (1/2) v eta / (1 - c eta) for 0 <= c eta < 1.
struct SubgammaParams {
  double c = 0.0;
  double v = 1.0;
};

inline void validate(const SubgammaParams& p) {
  if (!(p.c >= 0) || !std::isfinite(p.c) || !(p.v > 0) || !std::isfinite(p.v))
    throw Error(Errc::InvalidArgument, "subgamma parameters need c >= 0, v > 0");
}

struct FamilySpec {
  std::vector<Model> members;
  std::vector<Moments> member_moments;

  explicit FamilySpec(std::vector<Model> m) : members(std::move(m)) {
    if (members.empty()) throw Error(Errc::EmptyInput, "members: empty");
    for (const auto& x : members) member_moments.push_back(moments(x));
  }
  std::size_t size() const { return members.size(); }
  bool regular() const {
    for (const auto& m : member_moments)
      if (!m.regular()) return false;
    return true;
  }
  bool subcentered() const {
    for (const auto& m : member_moments)
      if (!m.subcentered()) return false;
    return true;
  }
  double sup_variance() const {
    double s = 0;
    for (const auto& m : member_moments) s = std::max(s, m.variance);
    return s;
  }
  double inf_mean() const {
    double s = kInf;
    for (const auto& m : member_moments) s = std::min(s, m.mean);
    return s;
  }
};

// From U - E U <=_{eta*} C: c = 1/eta*, v = Var U + 2 e^{eta* C} / eta*^2.
// The 1/eta*^2 factor is what the moment bound E[U_+^n] <= n! M / eta*^n gives.
inline SubgammaParams fit_subgamma_from_strong(double variance, double eta_star, double C) {
  if (!std::isfinite(variance)) throw Error(Errc::InfiniteVariance, "variance is infinite; the family is not regular");
  if (!(variance >= 0)) throw Error(Errc::InvalidArgument, "variance must be nonnegative");
  if (!(eta_star > 0) || !std::isfinite(eta_star)) throw Error(Errc::NonpositiveEta, "eta* must be positive and finite");
  if (!std::isfinite(C)) throw Error(Errc::InvalidArgument, "C must be finite");
  return {1.0 / eta_star, variance + 2.0 * std::exp(eta_star * C) / (eta_star * eta_star)};
}

inline double subgamma_envelope(const SubgammaParams& p, double eta) {
  const double d = 1.0 - p.c * eta;
  return d > 0 ? 0.5 * p.v * eta / d : kInf;
}

// h(eps) = eps / (2v) capped at 1/(2c); c = 0 leaves the slope uncapped.
inline ScaleFunction subgamma_to_scale(const SubgammaParams& p) {
  validate(p);
  return ScaleFunction::linear_capped(1.0 / (2.0 * p.v), p.c > 0 ? 1.0 / (2.0 * p.c) : kInf);
}

inline double subgamma_tail_bound(const SubgammaParams& p, double delta) {
  validate(p);
  if (!(delta > 0 && delta <= 1)) throw Error(Errc::InvalidArgument, "delta must lie in (0,1]");
  const double L = -std::log(delta);
  return std::sqrt(2.0 * p.v * L) + p.c * L;
}

struct SubgammaCheck {
  double worst_margin = -kInf;  // max over the grid of A^eta[X - EX] - envelope(eta)
  double worst_eta = 0.0;
  std::vector<double> etas;
};

// Checks the subgamma envelope for X - E X on eta_k = eta_max k / n, k = 1..n.
inline SubgammaCheck check_subgamma(const Model& x, const SubgammaParams& p, double eta_max, std::size_t n = 64) {
  const Model centered = Model::shifted(x, moments(x).mean);
  SubgammaCheck r;
  for (std::size_t k = 1; k <= n; ++k) {
    const double eta = eta_max * static_cast<double>(k) / static_cast<double>(n);
    r.etas.push_back(eta);
    const double env = subgamma_envelope(p, eta);
    const double m = std::isinf(env) ? -kInf : annealed_expectation(centered, eta).value - env;
    if (m > r.worst_margin || r.etas.size() == 1) {
      r.worst_margin = m;
      r.worst_eta = eta;
    }
  }
  return r;
}

// (E[e^{eta U}] - 1) / eta^2 for U = X - E X; bounded as eta -> 0 exactly when
// the right tail is subgamma with finite variance.
inline std::vector<double> subgamma_blowup_profile(const Model& x, const std::vector<double>& etas) {
  const Model centered = Model::shifted(x, moments(x).mean);
  std::vector<double> out;
  for (double eta : etas) out.push_back(std::expm1(log_mgf(centered, eta)) / (eta * eta));
  return out;
}

struct RoundtripConfig {
  VerifyConfig verify;
  // Grid for picking C'': the smallest eps with u(eps) >= u(sel_eps_max)/2.
  double sel_eps_min = 1e-3;
  double sel_eps_max = 1.0;
  std::size_t sel_points = 64;
  std::size_t subgamma_points = 64;
  std::vector<double> deltas = {0.5, 0.1, 0.01, 1e-3, 1e-6};
  std::size_t tail_points = 64;
  double tol = 1e-9;
};

struct RoundtripLeg {
  std::string name;
  bool checked = false;
  bool passed = false;
  bool needs_regularity = false;
  double worst_margin = 0.0;
  std::string detail;
};

struct RoundtripReport {
  bool regular = false;
  bool subcentered = false;
  double eta_star = 0.0;
  double C_star = 0.0;
  std::optional<SubgammaParams> subgamma;
  std::optional<ScaleFunction> linear_scale;
  TailBoundParams tail{1.0, 1.0};
  std::vector<RoundtripLeg> legs;
  bool all_passed() const {
    for (const auto& l : legs)
      if (!l.passed) return false;
    return true;
  }
  const RoundtripLeg* leg(const std::string& n) const {
    for (const auto& l : legs)
      if (l.name == n) return &l;
    return nullptr;
  }
};

namespace detail {

inline double worst_over(const FamilySpec& fam, const std::function<double(const Model&, const Moments&)>& margin) {
  double w = -kInf;
  for (std::size_t i = 0; i < fam.size(); ++i) w = std::max(w, margin(fam.members[i], fam.member_moments[i]));
  return w;
}

}  // namespace detail

// Runs the cycle (1) -> (2) -> (3) -> (4) -> (1) plus (3) -> (5) -> (6) on a
// family certified against the ESI function u.
inline RoundtripReport characterization_roundtrip(const FamilySpec& fam, const ScaleFunction& u,
                                                  const RoundtripConfig& cfg = {}) {
  RoundtripReport rep;
  rep.regular = fam.regular();
  rep.subcentered = fam.subcentered();

  for (std::size_t i = 0; i < fam.size(); ++i) {
    const auto r = verify_difference(fam.members[i], u, {}, cfg.verify);
    if (r.verdict != Verdict::holds)
      throw Error(Errc::NotAnEsiFamily, "member " + std::to_string(i) + " (" + describe(fam.members[i]) +
                                            ") does not satisfy X <=_u 0: " + verdict_name(r.verdict));
  }

  // (1) -> (2): eta* = u(C''), C* = C'' - inf_f E X_f.
  {
    RoundtripLeg leg{"1->2", true, false, false, 0, ""};
    const auto grid = log_spaced(cfg.sel_eps_min, cfg.sel_eps_max, cfg.sel_points);
    const double target = 0.5 * u(cfg.sel_eps_max);
    double c2 = grid.back();
    for (double e : grid)
      if (u(e) >= target) {
        c2 = e;
        break;
      }
    rep.eta_star = u(c2);
    rep.C_star = c2 + std::max(0.0, -fam.inf_mean());
    leg.worst_margin = detail::worst_over(fam, [&](const Model& x, const Moments& mo) {
      return verify_difference(Model::shifted(x, mo.mean), ScaleFunction::constant(rep.eta_star),
                               RhsOffset::value(rep.C_star), cfg.verify)
          .worst_margin;
    });
    leg.passed = leg.worst_margin <= cfg.tol && rep.subcentered;
    leg.detail = "C''=" + format_double(c2) + " eta*=" + format_double(rep.eta_star) + " C*=" +
                 format_double(rep.C_star);
    rep.legs.push_back(leg);
  }

  // (2) -> (3)
  {
    RoundtripLeg leg{"2->3", true, false, true, 0, ""};
    try {
      rep.subgamma = fit_subgamma_from_strong(fam.sup_variance(), rep.eta_star, rep.C_star);
      leg.worst_margin = detail::worst_over(fam, [&](const Model& x, const Moments&) {
        return check_subgamma(x, *rep.subgamma, rep.eta_star, cfg.subgamma_points).worst_margin;
      });
      leg.passed = leg.worst_margin <= cfg.tol;
      leg.detail = "c=" + format_double(rep.subgamma->c) + " v=" + format_double(rep.subgamma->v);
    } catch (const Error& e) {
      if (e.code() != Errc::InfiniteVariance) throw;
      leg.worst_margin = kInf;
      leg.detail = e.what();
    }
    rep.legs.push_back(leg);
  }

  auto skipped = [&](const char* name, bool needs_reg) {
    rep.legs.push_back({name, false, false, needs_reg, kInf, "no subgamma parameters to continue from"});
  };
  if (!rep.subgamma) {
    skipped("3->4", false);
    skipped("4->1", false);
    skipped("3->5", false);
    skipped("5->6", true);
    return rep;
  }
  const SubgammaParams sg = *rep.subgamma;

  // (3) -> (4): X - E X <=_h 0 for the linear-capped h.
  rep.linear_scale = subgamma_to_scale(sg);
  const ScaleFunction& h = *rep.linear_scale;
  {
    RoundtripLeg leg{"3->4", true, false, false, 0, "h=" + h.describe()};
    leg.worst_margin = detail::worst_over(fam, [&](const Model& x, const Moments& mo) {
      return verify_difference(Model::shifted(x, mo.mean), h, {}, cfg.verify).worst_margin;
    });
    leg.passed = leg.worst_margin <= cfg.tol;
    rep.legs.push_back(leg);
  }
  // (4) -> (1): X <=_h 0 with u = h.
  {
    RoundtripLeg leg{"4->1", true, false, false, 0, "u=h"};
    leg.worst_margin = detail::worst_over(
        fam, [&](const Model& x, const Moments&) { return verify_difference(x, h, {}, cfg.verify).worst_margin; });
    leg.passed = leg.worst_margin <= cfg.tol && rep.subcentered;
    rep.legs.push_back(leg);
  }
  // (3) -> (5): P(X > sqrt(2 v L) + c L) <= delta, from the exact cdf.
  {
    RoundtripLeg leg{"3->5", true, false, false, -kInf, ""};
    for (double d : cfg.deltas) {
      const double t = subgamma_tail_bound(sg, d);
      leg.worst_margin = std::max(leg.worst_margin, detail::worst_over(fam, [&](const Model& x, const Moments&) {
                                    return (1.0 - cdf(x, t, true)) - d;
                                  }));
    }
    leg.passed = leg.worst_margin <= cfg.tol;
    rep.legs.push_back(leg);
  }
  // (5) -> (6) -> strong ESI: the subgamma quantile function inverts to
  // P(X > t) <= e^{-h(t)} with h(t) >= t/(2c) - v/(4c^2), i.e. a = e^{v/(4c^2)},
  // b = 1/(2c). In the subGaussian limit h(t) = t^2/(2v) >= t - v/2.
  {
    RoundtripLeg leg{"5->6", true, false, true, -kInf, ""};
    rep.tail = sg.c > 0 ? TailBoundParams{std::exp(sg.v / (4 * sg.c * sg.c)), 1.0 / (2 * sg.c)}
                        : TailBoundParams{std::exp(sg.v / 2), 1.0};
    const auto ts = log_spaced(1e-3, 50.0 * (std::sqrt(sg.v) + sg.c + 1), cfg.tail_points);
    for (double t : ts) {
      const double bound = std::min(1.0, rep.tail.a * std::exp(-rep.tail.b * t));
      leg.worst_margin = std::max(
          leg.worst_margin,
          detail::worst_over(fam, [&](const Model& x, const Moments&) { return (1.0 - cdf(x, t, false)) - bound; }));
    }
    const EsiCertificate c = tail_to_esi(rep.tail, rep.tail.b / 2);
    const double esi_m = detail::worst_over(fam, [&](const Model& x, const Moments&) {
      return verify_difference(x, c.scale, RhsOffset::value(c.rhs), cfg.verify).worst_margin;
    });
    leg.worst_margin = std::max(leg.worst_margin, esi_m);
    leg.passed = leg.worst_margin <= cfg.tol && rep.subcentered;
    leg.detail = "a=" + format_double(rep.tail.a) + " b=" + format_double(rep.tail.b) + " c'=" + format_double(c.rhs);
    rep.legs.push_back(leg);
  }
  return rep;
}

}  // namespace esi
