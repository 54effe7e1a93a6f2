#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "esi/support.hpp"

namespace esi {

// The ESI function u: strictly positive, nondecreasing and continuous in eps > 0.
class ScaleFunction {
 public:
  enum class Kind { constant, linear_capped, power_capped, tabulated };

  // eta = +inf is allowed and stands for "almost surely".
  static ScaleFunction constant(double eta) {
    if (!(eta > 0)) throw Error(Errc::InvalidScale, "constant scale needs eta > 0");
    ScaleFunction s(Kind::constant);
    s.c_ = eta;
    return s;
  }
  // u(eps) = C * eps, capped at eta_star (kInf for no cap).
  static ScaleFunction linear_capped(double C, double eta_star = kInf) {
    ScaleFunction s = power_capped(C, 1.0, eta_star);
    s.kind_ = Kind::linear_capped;
    return s;
  }
  // u(eps) = min(C_star * eps^gamma, eta_star).
  static ScaleFunction power_capped(double C_star, double gamma, double eta_star) {
    if (!(C_star > 0) || !std::isfinite(C_star)) throw Error(Errc::InvalidScale, "C* must be positive and finite");
    if (!(gamma >= 0 && gamma <= 1)) throw Error(Errc::InvalidScale, "gamma must lie in [0,1]");
    if (!(eta_star > 0)) throw Error(Errc::InvalidScale, "eta* must be positive");
    ScaleFunction s(Kind::power_capped);
    s.c_ = C_star;
    s.gamma_ = gamma;
    s.cap_ = eta_star;
    return s;
  }
  // Piecewise linear through (eps, u) pairs, constant beyond both ends. A
  // leading point (0, 0) is allowed and makes the scale weak.
  static ScaleFunction tabulated(std::vector<std::pair<double, double>> grid) {
    if (grid.empty()) throw Error(Errc::InvalidScale, "tabulated scale needs at least one point");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto [e, u] = grid[i];
      if (!(e >= 0) || !std::isfinite(e) || !std::isfinite(u) || u < 0)
        throw Error(Errc::InvalidScale, "tabulated point out of range");
      if (u == 0 && !(i == 0 && e == 0)) throw Error(Errc::InvalidScale, "u must be positive for eps > 0");
      if (i > 0 && !(e > grid[i - 1].first)) throw Error(Errc::InvalidScale, "eps must be increasing");
      if (i > 0 && u < grid[i - 1].second) throw Error(Errc::InvalidScale, "u must be nondecreasing");
    }
    if (grid.size() == 1 && grid[0].second == 0)
      throw Error(Errc::InvalidScale, "tabulated scale identically zero");
    ScaleFunction s(Kind::tabulated);
    s.grid_ = std::move(grid);
    return s;
  }

  double operator()(double eps) const {
    switch (kind_) {
      case Kind::constant: return c_;
      case Kind::linear_capped:
      case Kind::power_capped: {
        const double p = gamma_ == 0 ? c_ : c_ * std::pow(eps, gamma_);
        return std::min(p, cap_);
      }
      case Kind::tabulated: {
        if (eps <= grid_.front().first) return grid_.front().second;
        if (eps >= grid_.back().first) return grid_.back().second;
        auto it = std::upper_bound(grid_.begin(), grid_.end(), eps,
                                   [](double e, const auto& p) { return e < p.first; });
        const auto& [e1, u1] = *it;
        const auto& [e0, u0] = *(it - 1);
        return u0 + (u1 - u0) * (eps - e0) / (e1 - e0);
      }
    }
    return 0.0;
  }

  // The scale k*u, for k > 0.
  ScaleFunction scaled(double k) const {
    if (!(k > 0)) throw Error(Errc::InvalidScale, "scale factor must be positive");
    ScaleFunction s = *this;
    s.c_ *= k;
    s.cap_ *= k;
    for (auto& p : s.grid_) p.second *= k;
    return s;
  }

  double supremum() const {
    switch (kind_) {
      case Kind::constant: return c_;
      case Kind::linear_capped:
      case Kind::power_capped: return gamma_ == 0 ? std::min(c_, cap_) : cap_;
      case Kind::tabulated: return grid_.back().second;
    }
    return kInf;
  }
  double left_limit() const {
    switch (kind_) {
      case Kind::constant: return c_;
      case Kind::linear_capped:
      case Kind::power_capped: return gamma_ == 0 ? std::min(c_, cap_) : 0.0;
      case Kind::tabulated: return grid_.front().second;
    }
    return 0.0;
  }

  Kind kind() const { return kind_; }
  bool is_constant() const { return kind_ == Kind::constant; }
  double eta() const {
    if (!is_constant()) throw Error(Errc::NonConstantScale, "scale is not constant");
    return c_;
  }
  double coefficient() const { return c_; }
  double gamma() const { return gamma_; }
  double cap() const { return cap_; }
  const std::vector<std::pair<double, double>>& grid() const { return grid_; }

  std::string describe() const {
    switch (kind_) {
      case Kind::constant: return "constant(eta=" + format_double(c_) + ")";
      case Kind::linear_capped:
        return "linear_capped(C=" + format_double(c_) + ",eta_star=" + format_double(cap_) + ")";
      case Kind::power_capped:
        return "power_capped(C_star=" + format_double(c_) + ",gamma=" + format_double(gamma_) +
               ",eta_star=" + format_double(cap_) + ")";
      case Kind::tabulated: return "tabulated(points=" + std::to_string(grid_.size()) + ")";
    }
    return "?";
  }

  bool operator==(const ScaleFunction& o) const {
    return kind_ == o.kind_ && c_ == o.c_ && gamma_ == o.gamma_ && cap_ == o.cap_ && grid_ == o.grid_;
  }

 private:
  explicit ScaleFunction(Kind k) : kind_(k) {}
  Kind kind_;
  double c_ = 1.0;
  double gamma_ = 1.0;
  double cap_ = kInf;
  std::vector<std::pair<double, double>> grid_;
};

enum class ScaleClass { strong, weak, general };

inline const char* scale_class_name(ScaleClass c) {
  switch (c) {
    case ScaleClass::strong: return "strong";
    case ScaleClass::weak: return "weak";
    case ScaleClass::general: return "general";
  }
  return "?";
}

inline ScaleClass classify_scale(const ScaleFunction& u) {
  if (u.is_constant()) return ScaleClass::strong;
  return u.left_limit() == 0.0 ? ScaleClass::weak : ScaleClass::general;
}

}  // namespace esi
