#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "esi/measure.hpp"
#include "esi/scale.hpp"
#include "esi/verify.hpp"

namespace esi {

enum class CompositionMode { dependent, independent, iid_average };

inline const char* mode_name(CompositionMode m) {
  switch (m) {
    case CompositionMode::dependent: return "dependent";
    case CompositionMode::independent: return "independent";
    case CompositionMode::iid_average: return "iid_average";
  }
  return "?";
}

namespace detail {

// (sum 1/eta_i)^{-1}, with +inf links contributing nothing.
inline double harmonic_eta(const std::vector<double>& etas) {
  double s = 0, only = kInf;
  std::size_t finite = 0;
  for (double e : etas)
    if (!std::isinf(e)) {
      s += 1.0 / e;
      only = e;
      ++finite;
    }
  if (finite <= 1) return only;
  return 1.0 / s;
}

inline std::string joined_labels(const std::vector<EsiCertificate>& certs, const char* sep) {
  std::string s;
  for (const auto& c : certs) s += (s.empty() ? "" : sep) + c.lhs_label;
  return s;
}

}  // namespace detail

// Combines X_i <=_{u_i} 0 into a statement about the sum (or, for
// iid_average, the mean). The result is derived; pass recheck = true to
// attach a numerical check when the left-hand model is known.
inline EsiCertificate combine(const std::vector<EsiCertificate>& certs, CompositionMode mode, bool recheck = false,
                              const VerifyConfig& cfg = {}) {
  if (certs.empty()) throw Error(Errc::EmptyInput, "combine needs at least one certificate");
  for (const auto& c : certs) {
    if (c.rhs != 0.0 || !c.offset.is_zero()) throw Error(Errc::WrongShape, "combine expects X_i <=_u 0");
    detail::require_holds(c);
  }
  const std::size_t n = certs.size();
  EsiCertificate out;
  out.rhs_label = "0";
  for (const auto& c : certs)
    for (const auto& p : c.provenance) out.provenance.push_back(p);

  switch (mode) {
    case CompositionMode::dependent:
    case CompositionMode::independent: {
      std::vector<double> etas;
      for (const auto& c : certs) {
        if (!c.scale.is_constant())
          throw Error(mode == CompositionMode::dependent ? Errc::MixedScalesUnderDependentMode : Errc::NonConstantScale,
                      "sums are composed for constant scales only");
        etas.push_back(c.scale.eta());
      }
      const double eta = mode == CompositionMode::dependent ? detail::harmonic_eta(etas)
                                                            : *std::min_element(etas.begin(), etas.end());
      out.scale = ScaleFunction::constant(eta);
      out.lhs_label = detail::joined_labels(certs, " + ");
      // Sums of identical independent models are representable.
      if (mode == CompositionMode::independent && certs.front().lhs) {
        bool same = true;
        for (const auto& c : certs) same = same && c.lhs && describe(*c.lhs) == describe(*certs.front().lhs);
        if (same) out.lhs = Model::iid_sum(*certs.front().lhs, n);
      }
      break;
    }
    case CompositionMode::iid_average: {
      for (const auto& c : certs)
        if (!(c.scale == certs.front().scale))
          throw Error(Errc::InvalidArgument, "iid_average needs the same scale for every input");
      out.scale = certs.front().scale.scaled(static_cast<double>(n));
      if (certs.front().lhs) out.lhs = Model::iid_mean(*certs.front().lhs, n);
      out.lhs_label = "mean" + std::to_string(n) + "(" + certs.front().lhs_label + ")";
      break;
    }
  }
  out.provenance.push_back("derived: combine(" + std::string(mode_name(mode)) + ", n=" + std::to_string(n) +
                           ") -> " + out.scale.describe());
  if (recheck && out.lhs) out.evidence = reverify(out, cfg);
  return out;
}

// n iid copies of X <=_u 0 give mean <=_{n u} 0.
inline EsiCertificate average_iid(const EsiCertificate& cert, std::size_t n, bool recheck = false,
                                  const VerifyConfig& cfg = {}) {
  if (n == 0) throw Error(Errc::EmptyInput, "average over zero copies");
  return combine(std::vector<EsiCertificate>(n, cert), CompositionMode::iid_average, recheck, cfg);
}

// X <=_{eta1} Y and Y <=_{eta2} Z (both as differences with constant right
// sides) give X <=_eta Z. Offsets are evaluated at each link's own eta.
inline EsiCertificate chain(const EsiCertificate& c1, const EsiCertificate& c2, bool associated = false) {
  if (!c1.scale.is_constant() || !c2.scale.is_constant())
    throw Error(Errc::NonConstantScale, "chain needs constant scales");
  detail::require_holds(c1);
  detail::require_holds(c2);
  const double e1 = c1.scale.eta(), e2 = c2.scale.eta();
  EsiCertificate out;
  out.scale = ScaleFunction::constant(associated ? std::min(e1, e2) : detail::harmonic_eta({e1, e2}));
  out.rhs = c1.rhs + c1.offset(e1) + c2.rhs + c2.offset(e2);
  out.lhs_label = c1.lhs_label;
  out.rhs_label = c2.rhs_label;
  out.provenance = c1.provenance;
  out.provenance.insert(out.provenance.end(), c2.provenance.begin(), c2.provenance.end());
  out.provenance.push_back(std::string("derived: chain(") + (associated ? "associated" : "dependent") + ") -> " +
                           out.scale.describe());
  return out;
}

struct UnionComparison {
  double chained_bound;
  double union_bound;
  double saving;
};

// k chained eta-links: (k/eta) log(1/delta) against the union bound (k/eta) log(k/delta).
inline UnionComparison compare_union_bound(double eta, int k, double delta) {
  if (!(eta > 0)) throw Error(Errc::NonpositiveEta, "eta must be positive");
  if (k < 2) throw Error(Errc::InvalidArgument, "need at least two links");
  if (!(delta > 0 && delta <= 1)) throw Error(Errc::InvalidArgument, "delta must lie in (0,1]");
  const double kk = static_cast<double>(k);
  return {kk / eta * -std::log(delta), kk / eta * std::log(kk / delta), kk / eta * std::log(kk)};
}

// X <=_u 0 with u = C* eps^gamma ^ eta*  <=>  X <=_eta C° eta^{1/gamma} for 0 < eta <= eta°.
struct GammaStrongForm {
  double eta_circ;
  double C_circ;
  double gamma;
  RhsOffset offset() const { return RhsOffset::power(C_circ, gamma == 0 ? kInf : 1.0 / gamma); }
};

// Substituting eta = C* eps^gamma gives eps = (eta/C*)^{1/gamma}, so C° = C*^{-1/gamma}.
// For gamma = 0 the offset vanishes and the strong scale is min(C*, eta*).
inline GammaStrongForm gamma_strong_convert(double C_star, double gamma, double eta_star) {
  if (!(C_star > 0) || !(eta_star > 0)) throw Error(Errc::InvalidArgument, "C* and eta* must be positive");
  if (!(gamma >= 0 && gamma <= 1)) throw Error(Errc::InvalidArgument, "gamma must lie in [0,1]");
  if (gamma == 0) return {std::min(C_star, eta_star), 0.0, 0.0};
  return {eta_star, std::pow(C_star, -1.0 / gamma), gamma};
}

inline ScaleFunction gamma_strong_invert(const GammaStrongForm& g) {
  if (g.gamma == 0) return ScaleFunction::constant(g.eta_circ);
  return ScaleFunction::power_capped(std::pow(g.C_circ, -g.gamma), g.gamma, g.eta_circ);
}

struct RatePoint {
  double n;
  double bound;
  double eps_star;
  bool on_power_branch;
};

struct RateResult {
  double gamma = 0;
  double alpha = 1;
  double fitted_slope = 0;
  std::vector<RatePoint> points;
};

namespace detail {

inline RatePoint rate_point(const ScaleFunction& u, double n, double K) {
  // A constant scale (gamma = 0 included) puts the infimum at eps -> 0.
  if (u.is_constant() || (u.kind() != ScaleFunction::Kind::tabulated && u.gamma() == 0))
    return {n, K / (n * u.left_limit()), 0.0, false};
  auto [e, v] = minimize_log_eps([&](double eps) { return eps + K / (n * u(eps)); }, 1e-15, 1e8, 481);
  const bool power = (u.kind() == ScaleFunction::Kind::power_capped || u.kind() == ScaleFunction::Kind::linear_capped) &&
                     u.coefficient() * std::pow(e, u.gamma()) < u.cap();
  return {n, v, e, power};
}

}  // namespace detail

// Minimizes eps + (comp + log(1/delta)) / (n u(eps)) at each n and fits the
// log-log slope of the bound against n by least squares.
inline RateResult optimize_rate(const ScaleFunction& u, const std::vector<double>& ns, double delta, double comp = 0) {
  if (ns.empty()) throw Error(Errc::EmptyInput, "sample-size grid is empty");
  if (!(delta > 0 && delta < 1)) throw Error(Errc::InvalidArgument, "delta must lie in (0,1)");
  if (!(comp >= 0)) throw Error(Errc::InvalidArgument, "complexity must be nonnegative");
  RateResult r;
  r.gamma = u.is_constant() ? 0.0
            : (u.kind() == ScaleFunction::Kind::power_capped || u.kind() == ScaleFunction::Kind::linear_capped)
                ? u.gamma()
                : kInf;
  r.alpha = std::isfinite(r.gamma) ? 1.0 / (1.0 + r.gamma) : std::nan("");
  const double K = comp - std::log(delta);
  for (double n : ns) {
    if (!(n >= 1)) throw Error(Errc::InvalidArgument, "n must be at least 1");
    r.points.push_back(detail::rate_point(u, n, K));
  }
  if (r.points.size() >= 2) {
    double mx = 0, my = 0;
    for (const auto& p : r.points) {
      mx += std::log(p.n);
      my += std::log(p.bound);
    }
    mx /= static_cast<double>(r.points.size());
    my /= static_cast<double>(r.points.size());
    double sxy = 0, sxx = 0;
    for (const auto& p : r.points) {
      sxy += (std::log(p.n) - mx) * (std::log(p.bound) - my);
      sxx += (std::log(p.n) - mx) * (std::log(p.n) - mx);
    }
    r.fitted_slope = sxy / sxx;
  }
  return r;
}

// Single-n form; the slope is fitted over the decade [n, 10n].
inline RateResult optimize_rate(const ScaleFunction& u, double n, double delta, double comp = 0) {
  return optimize_rate(u, std::vector<double>{n, std::sqrt(10.0) * n, 10.0 * n}, delta, comp);
}

}  // namespace esi
