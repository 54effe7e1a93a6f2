#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "esi/support.hpp"

namespace esi::quad {

inline constexpr double kRelTol = 1e-13;
inline constexpr unsigned kMaxDepth = 18;
// Unbounded ranges are cut where the integrand drops below this fraction of its peak.
inline constexpr double kTruncation = 1e-16;

template <class F>
double finite(F&& f, double a, double b) {
  if (!(b > a)) return 0.0;
  double err = 0.0;
  return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, a, b, kMaxDepth, kRelTol, &err);
}

// Integral of f over [a, a + dir*inf), walking out in segments of doubling
// length until both the integrand and the latest segment are negligible.
template <class F>
double tail(F&& f, double a, double dir, double step) {
  double total = 0.0, abs_total = 0.0;
  double peak = std::abs(f(a));
  double left = a, len = step;
  for (int k = 0; k < 80; ++k) {
    const double right = left + dir * len;
    const double piece = dir > 0 ? finite(f, left, right) : finite(f, right, left);
    total += piece;
    abs_total += std::abs(piece);
    const double fr = std::abs(f(right));
    const double fm = std::abs(f(0.5 * (left + right)));
    peak = std::max({peak, fr, fm});
    if (!std::isfinite(total)) return total;
    if (fr <= kTruncation * peak && std::abs(piece) <= kTruncation * std::max(abs_total, 1e-300) && k >= 2)
      break;
    left = right;
    len *= 2.0;
  }
  return total;
}

// Integral of f over (lo, hi), either end possibly infinite. `breaks` are
// points where f may be discontinuous; `anchor` and `scale` give the
// integrand's bulk location for the walk into an infinite end.
template <class F>
double line(F&& f, double lo, double hi, std::vector<double> breaks, double anchor, double scale) {
  if (!(hi > lo)) return 0.0;
  double lo_f = std::isfinite(lo) ? lo : std::min(anchor, hi);
  double hi_f = std::isfinite(hi) ? hi : std::max(anchor, lo);
  for (double b : breaks) {
    if (!std::isfinite(b) || b <= lo || b >= hi) continue;
    if (!std::isfinite(lo)) lo_f = std::min(lo_f, b);
    if (!std::isfinite(hi)) hi_f = std::max(hi_f, b);
  }
  breaks.push_back(lo_f);
  breaks.push_back(hi_f);
  if (anchor > lo && anchor < hi) breaks.push_back(anchor);
  std::vector<double> pts;
  for (double b : breaks)
    if (std::isfinite(b) && b >= lo_f && b <= hi_f) pts.push_back(b);
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) total += finite(f, pts[i], pts[i + 1]);
  if (!std::isfinite(lo)) total += tail(f, pts.front(), -1.0, scale);
  if (!std::isfinite(hi)) total += tail(f, pts.back(), +1.0, scale);
  return total;
}

}  // namespace esi::quad
