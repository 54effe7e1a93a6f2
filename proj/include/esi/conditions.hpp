#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "esi/characterization.hpp"
#include "esi/measure.hpp"
#include "esi/scale.hpp"
#include "esi/verify.hpp"

namespace esi {

// ---------------------------------------------------------------- Bernstein

struct BernsteinFit {
  double beta;
  double B;  // sup_f E[L^2] / E[L]^beta; +inf when infeasible
  bool feasible;
  bool growth_flag = false;  // ratios grow without settling along an ordered family
};

struct BernsteinConfig {
  // Treat the members as a sequence approaching a limit and flag a beta as
  // infeasible when its ratio keeps growing along the sequence.
  bool ordered_sequence = false;
  double growth_factor = 10.0;
};

struct BernsteinSummary {
  std::vector<BernsteinFit> fits;
  double largest_feasible_beta = -1.0;
  // Sup b such that every grid beta below b is feasible ([0, b) in grid terms).
  double feasible_up_to = 0.0;
};

namespace detail {

inline double bernstein_ratio(double second, double mean, double beta) {
  if (beta == 0) return second;
  if (mean == 0) return second == 0 ? 0.0 : kInf;
  return second / std::pow(mean, beta);
}

}  // namespace detail

// L_f are losses (E L_f >= 0); pass X_f = -L_f families through negate first.
inline BernsteinSummary bernstein_fit(const FamilySpec& losses, const std::vector<double>& beta_grid,
                                      const BernsteinConfig& cfg = {}) {
  for (std::size_t i = 0; i < losses.size(); ++i)
    if (losses.member_moments[i].mean < 0)
      throw Error(Errc::NegativeMean, "member " + std::to_string(i) + " has E[L] < 0");
  BernsteinSummary s;
  std::vector<double> grid = beta_grid;
  std::sort(grid.begin(), grid.end());
  bool all_so_far = true;
  for (double beta : grid) {
    if (!(beta >= 0 && beta <= 1)) throw Error(Errc::InvalidArgument, "beta must lie in [0,1]");
    std::vector<double> ratios;
    for (const auto& m : losses.member_moments) ratios.push_back(detail::bernstein_ratio(m.second_moment, m.mean, beta));
    BernsteinFit f{beta, *std::max_element(ratios.begin(), ratios.end()), true};
    f.feasible = std::isfinite(f.B);
    if (cfg.ordered_sequence && f.feasible && ratios.size() >= 4) {
      const std::size_t h = ratios.size() / 2;
      bool increasing = true;
      for (std::size_t i = h + 1; i < ratios.size(); ++i) increasing = increasing && ratios[i] > ratios[i - 1];
      const double first = ratios.front() > 0 ? ratios.front() : std::nextafter(0.0, 1.0);
      if (increasing && ratios.back() >= cfg.growth_factor * first) {
        f.growth_flag = true;
        f.feasible = false;
      }
    }
    if (f.feasible) s.largest_feasible_beta = beta;
    if (all_so_far && f.feasible)
      s.feasible_up_to = beta;
    else
      all_so_far = false;
    s.fits.push_back(f);
  }
  return s;
}

// ------------------------------------------------------------------ witness

enum class WitnessVariant { plain, squared };
enum class SquaredTarget { x, x_minus };

struct WitnessParams {
  double c = 0.5;
  double C = 1.0;
  WitnessVariant variant = WitnessVariant::plain;
  SquaredTarget target = SquaredTarget::x;
};

struct WitnessMember {
  double lhs;    // E[V 1{V >= C}], V = -X (plain) or U^2 (squared)
  double rhs;    // E[V]
  double ratio;  // lhs / rhs
  double ratio_se;
  bool zero_denominator;
  bool pass;
};

struct WitnessReport {
  std::vector<WitnessMember> members;
  bool all_pass() const {
    for (const auto& m : members)
      if (!m.pass) return false;
    return true;
  }
};

inline void validate(const WitnessParams& p) {
  if (!(p.c > 0 && p.c < 1)) throw Error(Errc::InvalidArgument, "witness c must lie in (0,1)");
  if (!(p.C > 0)) throw Error(Errc::InvalidArgument, "witness C must be positive");
}

namespace detail {

inline double witness_value(double x, const WitnessParams& p) {
  if (p.variant == WitnessVariant::plain) return -x;
  const double u = p.target == SquaredTarget::x ? x : std::min(x, 0.0);
  return u * u;
}

// Points where V(x) = C so truncated quadrature sees the jump.
inline std::vector<double> witness_breaks(const WitnessParams& p) {
  if (p.variant == WitnessVariant::plain) return {-p.C};
  const double r = std::sqrt(p.C);
  return p.target == SquaredTarget::x ? std::vector<double>{-r, 0.0, r} : std::vector<double>{-r, 0.0};
}

}  // namespace detail

inline WitnessMember witness_member(const Model& x, const WitnessParams& p) {
  validate(p);
  if (p.variant == WitnessVariant::plain && moments(x).mean > 0)
    throw Error(Errc::PreconditionViolated, "plain witness needs E[X] <= 0");
  WitnessMember w{};
  if (auto vals = detail::empirical_values(x)) {
    const double n = static_cast<double>(vals->size());
    double sa = 0, sb = 0;
    for (double v : *vals) {
      const double b = detail::witness_value(v, p);
      sa += b >= p.C ? b : 0.0;
      sb += b;
    }
    w.lhs = sa / n;
    w.rhs = sb / n;
    if (w.rhs > 0) {
      w.ratio = w.lhs / w.rhs;
      double s2 = 0;
      for (double v : *vals) {
        const double b = detail::witness_value(v, p);
        const double d = (b >= p.C ? b : 0.0) - w.ratio * b;
        s2 += d * d;
      }
      w.ratio_se = vals->size() > 1 ? std::sqrt(s2 / (n - 1) / n) / w.rhs : 0.0;
    }
  } else {
    const auto br = detail::witness_breaks(p);
    w.lhs = expect(
        x, [&](double v) { const double b = detail::witness_value(v, p); return b >= p.C ? b : 0.0; }, br);
    w.rhs = expect(x, [&](double v) { return detail::witness_value(v, p); }, br);
    if (w.rhs > 0) w.ratio = w.lhs / w.rhs;
  }
  w.zero_denominator = !(w.rhs > 0);
  w.pass = w.zero_denominator || w.lhs <= p.c * w.rhs;
  return w;
}

inline WitnessReport witness_check(const FamilySpec& fam, const WitnessParams& p) {
  WitnessReport r;
  for (const auto& m : fam.members) r.members.push_back(witness_member(m, p));
  return r;
}

// --------------------------------------------------------------- small ball

struct SmallBallParams {
  double c;
  double delta;
  double K;
  double Ccap;
};

struct SmallBallCheck {
  SmallBallParams params;
  double upper_part;  // E[1{Z >= K} Z]
  double lower_part;  // E[1{Z < K} Z]
  double mean;
  bool first_holds;   // E[1{Z>=K} Z] <= c (E[1{Z>=K} Z])^{1-delta}
  bool second_holds;  // E[Z] <= Ccap E[1{Z<K} Z]
  EvalMethod method;
};

inline SmallBallParams smallball(double z2bar, double c, double delta) {
  if (!(z2bar > 0) || !std::isfinite(z2bar)) throw Error(Errc::InvalidArgument, "E[Z^2] must be positive and finite");
  if (!(c > 0 && c < 1)) throw Error(Errc::InvalidArgument, "c must lie in (0,1)");
  if (!(delta > 0)) throw Error(Errc::InvalidArgument, "delta must be positive");
  return {c, delta, std::pow(c, -(1 + delta) / delta) * z2bar, 1.0 / (1.0 - c)};
}

// E[Z 1{Z < K}], in closed form where the family allows it.
inline std::pair<double, EvalMethod> truncated_mean_below(const Model& z, double K) {
  if (auto atoms = discrete_atoms(z)) {
    double s = 0;
    for (const auto& a : *atoms)
      if (a.value < K) s += a.prob * a.value;
    return {s, EvalMethod::closed_form};
  }
  if (auto* e = z.as<family::Exponential>()) {
    const double k = e->rate * K;
    return {K <= 0 ? 0.0 : -std::expm1(-k) / e->rate - K * std::exp(-k), EvalMethod::closed_form};
  }
  if (auto* g = z.as<family::Gamma>()) {
    return {K <= 0 ? 0.0 : g->shape / g->rate * boost::math::gamma_p(g->shape + 1, g->rate * K),
            EvalMethod::closed_form};
  }
  if (auto* u = z.as<family::Uniform>()) {
    const double hi = std::clamp(K, u->a, u->b);
    return {(hi * hi - u->a * u->a) / (2 * (u->b - u->a)), EvalMethod::closed_form};
  }
  return {expect(z, [K](double x) { return x < K ? x : 0.0; }, {K}), EvalMethod::quadrature};
}

inline SmallBallCheck smallball_verify(const Model& z, double c, double delta) {
  if (support(z).lo < 0) throw Error(Errc::NonNonnegativeModel, "Z must be nonnegative");
  const Moments mo = moments(z);
  SmallBallCheck r{};
  if (mo.second_moment == 0) {
    r.params = {c, delta, 0.0, 1.0 / (1.0 - c)};
    r.first_holds = r.second_holds = true;
    r.method = EvalMethod::closed_form;
    return r;
  }
  r.params = smallball(mo.second_moment, c, delta);
  auto [low, method] = truncated_mean_below(z, r.params.K);
  r.lower_part = low;
  r.mean = mo.mean;
  r.upper_part = std::max(0.0, mo.mean - low);
  r.method = method;
  r.first_holds = r.upper_part <= c * std::pow(r.upper_part, 1 - delta) * (1 + 1e-12);
  r.second_holds = r.mean <= r.params.Ccap * r.lower_part * (1 + 1e-12);
  return r;
}

// ------------------------------------------------------------- GM transform

struct GmResult {
  double c_star;
  std::vector<EsiCertificate> certs;  // X_f - c* E[X_f] <=_{u/2} 0
  std::vector<double> tried;
};

// Largest c* in (0,1] (20-step bisection) for which every shifted member
// verifies against u/2.
inline GmResult gm_transform(const FamilySpec& fam, const ScaleFunction& u, const WitnessParams& witness,
                             const VerifyConfig& cfg = {}) {
  if (!std::isfinite(u.supremum())) throw Error(Errc::PreconditionViolated, "sup u must be finite");
  WitnessParams w = witness;
  w.variant = WitnessVariant::plain;
  if (!witness_check(fam, w).all_pass()) throw Error(Errc::PreconditionViolated, "witness condition fails");
  const ScaleFunction half = u.scaled(0.5);
  GmResult r{};
  auto feasible = [&](double cs) {
    r.tried.push_back(cs);
    for (std::size_t i = 0; i < fam.size(); ++i) {
      const Model d = Model::shifted(fam.members[i], cs * fam.member_moments[i].mean);
      if (verify_difference(d, half, {}, cfg).verdict != Verdict::holds) return false;
    }
    return true;
  };
  double lo = 0.0, hi = 1.0;
  if (feasible(1.0)) {
    lo = 1.0;
  } else {
    for (int it = 0; it < 20; ++it) {
      const double mid = 0.5 * (lo + hi);
      (feasible(mid) ? lo : hi) = mid;
    }
  }
  if (!(lo > 0)) throw Error(Errc::NoFeasibleCStar, "no c* on the bisection grid verifies against u/2");
  r.c_star = lo;
  for (std::size_t i = 0; i < fam.size(); ++i) {
    auto cert = verify_esi(fam.members[i], Model::constant(lo * fam.member_moments[i].mean), half, {}, cfg);
    cert.provenance.push_back("gm_transform c*=" + format_double(lo));
    r.certs.push_back(std::move(cert));
  }
  return r;
}

// ---------------------------------------------------------- equivalence suite

struct EquivalenceConfig {
  std::vector<double> betas = {0.0, 0.25, 0.5, 0.75};
  std::vector<double> c_values = {0.0, 0.1};
  std::vector<double> cstar_values = {0.0, 0.5, 0.9};
  double eta_star = 0.2;    // the strong ESI scale the family is checked at
  int eta_levels = 4;       // eta° in {eta*/2^j : j < eta_levels}
  std::size_t eta_grid = 41;  // check points on (0, eta°], log-spaced down to eta°/1000
  double witness_c = 0.5;
  int witness_ladder = 40;  // C in {4^j * min E[U^2]}
  std::vector<int> c1_orders = {0, 2};
  BernsteinConfig bernstein;
  VerifyConfig verify;
};

struct AugmentedRow {
  double beta, c, c_star;
  double eta_circ = 0;
  double C_circ = kInf;
  bool passed = false;
};

struct EquivalenceReport {
  bool regular = false;
  bool esi_family = false;
  std::optional<WitnessParams> witness;
  BernsteinSummary bernstein;
  std::vector<AugmentedRow> augmented;  // (1 -> 2) rows per (beta, c, c*)
  std::vector<double> c1_constants;     // per order in cfg.c1_orders
  double c2_constant = kInf;
  bool c1_holds = false, c2_holds = false;
  bool d12 = false, d23 = false, d31 = false;
  std::vector<double> strong_betas;    // betas where (3) holds
  std::vector<double> violated_betas;  // (3) holds but Bernstein does not
};

namespace detail {

inline double esi_expect(const Model& x, const RealFn& g) { return expect(x, g, {0.0}); }

inline std::vector<double> eta_checks(double eta_circ, std::size_t n) {
  return log_spaced(eta_circ * 1e-3, eta_circ, n);
}

}  // namespace detail

inline EquivalenceReport equivalence_suite(const FamilySpec& fam, double b, const EquivalenceConfig& cfg = {}) {
  if (!(b > 0 && b < 1)) throw Error(Errc::InvalidArgument, "b must lie in (0,1)");
  EquivalenceReport rep;
  rep.regular = fam.regular();
  if (!rep.regular) throw Error(Errc::NotRegular, "family has a member with infinite second moment");

  // Squared witness for U = X, then U = X_-; C on a geometric ladder.
  for (SquaredTarget t : {SquaredTarget::x, SquaredTarget::x_minus}) {
    double base = kInf;
    for (const auto& m : fam.member_moments)
      if (m.second_moment > 0) base = std::min(base, m.second_moment);
    if (!std::isfinite(base)) base = 1.0;
    for (int j = 0; j < cfg.witness_ladder && !rep.witness; ++j) {
      WitnessParams p{cfg.witness_c, base * std::pow(4.0, j), WitnessVariant::squared, t};
      if (witness_check(fam, p).all_pass()) rep.witness = p;
    }
    if (rep.witness) break;
  }
  if (!rep.witness) throw Error(Errc::SquaredWitnessFailed, "no C on the ladder satisfies the squared witness");

  rep.esi_family = true;
  for (const auto& x : fam.members)
    rep.esi_family =
        rep.esi_family && verify_difference(x, ScaleFunction::constant(cfg.eta_star), {}, cfg.verify).verdict == Verdict::holds;

  std::vector<Model> losses;
  for (const auto& x : fam.members) losses.push_back(Model::negate(x));
  bool nonneg_loss = true;
  for (const auto& m : fam.member_moments) nonneg_loss = nonneg_loss && m.mean <= 0;
  std::vector<double> betas;
  for (double beta : cfg.betas)
    if (beta < b) betas.push_back(beta);
  if (nonneg_loss) rep.bernstein = bernstein_fit(FamilySpec(losses), betas, cfg.bernstein);
  auto bernstein_ok = [&](double beta) {
    for (const auto& f : rep.bernstein.fits)
      if (f.beta == beta) return f.feasible;
    return false;
  };
  bool bernstein_all = nonneg_loss;
  for (double beta : betas) bernstein_all = bernstein_all && bernstein_ok(beta);

  // (1 -> 2): C° = sup over members and eta in (0, eta°] of
  // A^eta[X + c eta X^2 - c* E X] / eta^{1/(1-beta)}.
  for (double beta : betas)
    for (double c : cfg.c_values)
      for (double cs : cfg.cstar_values) {
        AugmentedRow row{beta, c, cs};
        const double p = 1.0 / (1.0 - beta);
        for (int j = 0; j < cfg.eta_levels; ++j) {
          const double eta_c = cfg.eta_star / std::pow(2.0, j);
          double sup = -kInf;
          for (std::size_t i = 0; i < fam.size(); ++i) {
            const double mean = fam.member_moments[i].mean;
            for (double eta : detail::eta_checks(eta_c, cfg.eta_grid)) {
              const double mgf = detail::esi_expect(fam.members[i], [&](double x) {
                return std::exp(eta * (x + c * eta * x * x - cs * mean));
              });
              sup = std::max(sup, std::log(mgf) / eta / std::pow(eta, p));
            }
          }
          if (std::isfinite(sup)) {
            row.eta_circ = eta_c;
            row.C_circ = std::max(sup, 0.0);
            row.passed = true;
            break;
          }
        }
        rep.augmented.push_back(row);
      }

  // C1: E[|X|^{2+k} e^{eta X}] <= C° (E X^2)^{1-delta} with delta = 1 - beta,
  // reported for the largest beta on the grid (the strictest exponent).
  const double beta_max = betas.empty() ? 0.0 : *std::max_element(betas.begin(), betas.end());
  const auto etas = detail::eta_checks(cfg.eta_star, cfg.eta_grid);
  rep.c1_holds = true;
  for (int k : cfg.c1_orders) {
    double sup = 0;
    for (std::size_t i = 0; i < fam.size(); ++i) {
      const double m2 = fam.member_moments[i].second_moment;
      for (double eta : etas) {
        const double num = detail::esi_expect(
            fam.members[i], [&](double x) { return std::pow(std::abs(x), 2.0 + k) * std::exp(eta * x); });
        const double den = std::pow(m2, beta_max);
        sup = std::max(sup, num == 0 ? 0.0 : num / den);
      }
    }
    rep.c1_constants.push_back(sup);
    rep.c1_holds = rep.c1_holds && std::isfinite(sup);
  }
  // C2: E[X^2] <= C E[X^2 e^{eta X}].
  {
    double sup = 0;
    for (std::size_t i = 0; i < fam.size(); ++i) {
      const double m2 = fam.member_moments[i].second_moment;
      for (double eta : etas) {
        const double den = detail::esi_expect(fam.members[i], [&](double x) { return x * x * std::exp(eta * x); });
        sup = std::max(sup, m2 == 0 ? 0.0 : m2 / den);
      }
    }
    rep.c2_constant = sup;
    rep.c2_holds = std::isfinite(sup);
  }

  bool all_aug = true;
  for (const auto& r : rep.augmented) all_aug = all_aug && r.passed;
  rep.d12 = !(rep.esi_family && bernstein_all) || (all_aug && rep.c1_holds);
  // (2 -> 3) is the c = c* = 0 row.
  rep.d23 = true;
  for (const auto& r : rep.augmented)
    if (r.c == 0 && r.c_star == 0) {
      if (r.passed) rep.strong_betas.push_back(r.beta);
      bool implied_by_2 = false;
      for (const auto& s : rep.augmented) implied_by_2 = implied_by_2 || (s.beta == r.beta && s.passed);
      rep.d23 = rep.d23 && (!implied_by_2 || r.passed);
    }
  // (3 -> 1)
  rep.d31 = rep.c2_holds;
  for (double beta : rep.strong_betas)
    if (!bernstein_ok(beta)) rep.violated_betas.push_back(beta);
  rep.d31 = rep.d31 && rep.violated_betas.empty() && nonneg_loss;
  return rep;
}

}  // namespace esi
