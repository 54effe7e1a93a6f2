#pragma once

// Reference computations for the test suites. They deliberately avoid the
// library's own quadrature and closed forms.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <vector>

namespace oracle {

// Composite Simpson rule with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, std::size_t n = 200000) {
  if (n % 2) ++n;
  const double h = (b - a) / static_cast<double>(n);
  double s = f(a) + f(b);
  for (std::size_t i = 1; i < n; ++i) s += f(a + h * static_cast<double>(i)) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double normal_pdf(double x, double mu = 0.0, double var = 1.0) {
  const double z = (x - mu);
  return std::exp(-0.5 * z * z / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

// E[g(X)] for X ~ N(mu, var) by Simpson over mu +- 40 sd.
inline double gaussian_expect(const std::function<double(double)>& g, double mu, double var) {
  const double sd = std::sqrt(var);
  return simpson([&](double x) { return g(x) * normal_pdf(x, mu, var); }, mu - 40 * sd, mu + 40 * sd);
}

// integral_1^inf t^{-nu} e^{-eta t} dt on the log axis t = e^s.
inline double power_tail_laplace(double nu, double eta) {
  const double top = eta > 0 ? std::log(800.0 / eta) : 200.0;
  return simpson([&](double s) { return std::exp(s * (1.0 - nu) - eta * std::exp(s)); }, 0.0, top, 400000);
}

// Bernoulli KL divergence kl(q || p).
inline double bernoulli_kl(double q, double p) {
  double r = 0;
  if (q > 0) r += q * std::log(q / p);
  if (q < 1) r += (1 - q) * std::log((1 - q) / (1 - p));
  return r;
}

inline double log_binomial(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace oracle
