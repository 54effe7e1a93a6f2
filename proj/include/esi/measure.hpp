#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "esi/quadrature.hpp"
#include "esi/scale.hpp"
#include "esi/support.hpp"

namespace esi {

struct Atom {
  double value;
  double prob;
};

namespace family {
struct Constant {
  double c;
};
struct TwoPoint {
  double x1, p1, x2;
};
struct Rademacher {};
struct Gaussian {
  double mean, variance;
};
struct Exponential {
  double rate;
};
struct Gamma {
  double shape, rate;
};
struct Uniform {
  double a, b;
};
struct FiniteDiscrete {
  std::vector<Atom> atoms;
};
// Density |u|^{-nu} on u <= -1 plus an atom at x_nu = (nu-1)/(nu-2)^2, nu in (2.5, 3):
// mean zero, infinite variance, finite MGF only for eta >= 0.
struct VarianceNeeded {
  double nu;
  double atom() const { return (nu - 1) / ((nu - 2) * (nu - 2)); }
  double atom_prob() const { return (nu - 2) / (nu - 1); }
};
struct Empirical {
  std::shared_ptr<const std::vector<double>> sample;
};
}  // namespace family

class RandomVariableModel;
using Model = RandomVariableModel;

class RandomVariableModel {
 public:
  enum class Op { negate, affine, positive_part, iid_sum, shifted };
  struct Transform {
    Op op;
    double a = 1.0;  // affine slope, or the subtracted constant for `shifted`
    double b = 0.0;  // affine intercept
    std::size_t n = 1;
    std::shared_ptr<const RandomVariableModel> base;
  };
  using Node = std::variant<family::Constant, family::TwoPoint, family::Rademacher, family::Gaussian,
                            family::Exponential, family::Gamma, family::Uniform, family::FiniteDiscrete,
                            family::VarianceNeeded, family::Empirical, Transform>;

  static Model constant(double c) {
    require(std::isfinite(c), "constant must be finite");
    return Model(family::Constant{c});
  }
  static Model two_point(double x1, double p1, double x2) {
    require(std::isfinite(x1) && std::isfinite(x2), "two_point values must be finite");
    require(p1 >= 0 && p1 <= 1, "two_point p1 must lie in [0,1]");
    return Model(family::TwoPoint{x1, p1, x2});
  }
  static Model rademacher() { return Model(family::Rademacher{}); }
  static Model gaussian(double mean, double variance) {
    require(std::isfinite(mean) && variance > 0 && std::isfinite(variance), "gaussian needs finite mean, variance > 0");
    return Model(family::Gaussian{mean, variance});
  }
  static Model exponential(double rate) {
    require(rate > 0 && std::isfinite(rate), "exponential rate must be positive");
    return Model(family::Exponential{rate});
  }
  static Model gamma(double shape, double rate) {
    require(shape > 0 && rate > 0 && std::isfinite(shape) && std::isfinite(rate), "gamma needs shape, rate > 0");
    return Model(family::Gamma{shape, rate});
  }
  static Model uniform(double a, double b) {
    require(std::isfinite(a) && std::isfinite(b) && a < b, "uniform needs a < b");
    return Model(family::Uniform{a, b});
  }
  static Model finite_discrete(std::vector<Atom> atoms) {
    require(!atoms.empty(), "finite_discrete needs at least one atom");
    double total = 0.0;
    for (const auto& at : atoms) {
      require(std::isfinite(at.value), "atom values must be finite");
      require(at.prob >= 0, "atom probabilities must be nonnegative");
      total += at.prob;
    }
    require(std::abs(total - 1.0) <= 1e-12, "atom probabilities must sum to 1");
    return Model(family::FiniteDiscrete{std::move(atoms)});
  }
  static Model variance_needed(double nu) {
    require(nu > 2.5 && nu < 3.0, "variance_needed needs nu in (2.5, 3)");
    return Model(family::VarianceNeeded{nu});
  }
  static Model empirical(std::vector<double> sample) {
    require(!sample.empty(), "empirical sample must be nonempty");
    for (double x : sample) require(std::isfinite(x), "empirical sample must be finite");
    return Model(family::Empirical{std::make_shared<const std::vector<double>>(std::move(sample))});
  }

  static Model negate(const Model& base) { return transform(Op::negate, base); }
  // a * X + b
  static Model affine(const Model& base, double a, double b) {
    require(std::isfinite(a) && std::isfinite(b), "affine coefficients must be finite");
    Model m = transform(Op::affine, base);
    std::get<Transform>(m.node_).a = a;
    std::get<Transform>(m.node_).b = b;
    return m;
  }
  static Model positive_part(const Model& base) { return transform(Op::positive_part, base); }
  // Sum of n independent copies.
  static Model iid_sum(const Model& base, std::size_t n) {
    require(n >= 1, "iid_sum needs n >= 1");
    Model m = transform(Op::iid_sum, base);
    std::get<Transform>(m.node_).n = n;
    return m;
  }
  // Mean of n independent copies.
  static Model iid_mean(const Model& base, std::size_t n) {
    return affine(iid_sum(base, n), 1.0 / static_cast<double>(n), 0.0);
  }
  // X - c
  static Model shifted(const Model& base, double c) {
    require(std::isfinite(c), "shift must be finite");
    Model m = transform(Op::shifted, base);
    std::get<Transform>(m.node_).a = c;
    return m;
  }

  const Node& node() const { return node_; }
  template <class T>
  const T* as() const {
    return std::get_if<T>(&node_);
  }

 private:
  explicit RandomVariableModel(Node n) : node_(std::move(n)) {}
  static void require(bool ok, const char* what) {
    if (!ok) throw Error(Errc::InvalidModel, what);
  }
  static Model transform(Op op, const Model& base) {
    Transform t;
    t.op = op;
    t.base = std::make_shared<const Model>(base);
    return Model(std::move(t));
  }
  Node node_;
};

struct MgfDomain {
  double lo = -kInf, hi = kInf;
  bool lo_closed = false, hi_closed = false;
  bool contains(double eta) const {
    const bool above = eta > lo || (lo_closed && eta == lo);
    const bool below = eta < hi || (hi_closed && eta == hi);
    return above && below;
  }
};

struct Moments {
  double mean = 0.0;
  double second_moment = 0.0;  // +inf when infinite
  double variance = 0.0;       // +inf when infinite
  double prob_negative = 0.0;
  bool regular() const { return std::isfinite(second_moment); }
  bool subcentered() const { return mean <= 0.0; }
};

enum class EvalMethod { closed_form, quadrature, monte_carlo };

inline const char* method_name(EvalMethod m) {
  switch (m) {
    case EvalMethod::closed_form: return "closed_form";
    case EvalMethod::quadrature: return "quadrature";
    case EvalMethod::monte_carlo: return "monte_carlo";
  }
  return "?";
}

struct AnnealedValue {
  double value = 0.0;  // +inf outside the MGF domain
  double standard_error = 0.0;
  EvalMethod method = EvalMethod::closed_form;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;
};

struct Support {
  double lo, hi;
};

using RealFn = std::function<double(double)>;

namespace detail {

inline const Model& base_of(const Model::Transform& t) {
  if (!t.base) throw Error(Errc::EmptyModel, "transform without a base model");
  return *t.base;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Closed-family form of an iid sum when one exists.
inline std::optional<Model> reduce_sum(const Model& base, std::size_t n) {
  const double k = static_cast<double>(n);
  if (n == 1) return base;
  if (auto* c = base.as<family::Constant>()) return Model::constant(k * c->c);
  if (auto* g = base.as<family::Gaussian>()) return Model::gaussian(k * g->mean, k * g->variance);
  if (auto* e = base.as<family::Exponential>()) return Model::gamma(k, e->rate);
  if (auto* g = base.as<family::Gamma>()) return Model::gamma(k * g->shape, g->rate);
  if (auto* t = base.as<Model::Transform>()) {
    const Model& inner = base_of(*t);
    switch (t->op) {
      case Model::Op::iid_sum: return reduce_sum(inner, t->n * n).value_or(Model::iid_sum(inner, t->n * n));
      case Model::Op::negate:
        if (auto r = reduce_sum(inner, n)) return Model::negate(*r);
        return std::nullopt;
      case Model::Op::affine:
        if (auto r = reduce_sum(inner, n)) return Model::affine(*r, t->a, k * t->b);
        return std::nullopt;
      case Model::Op::shifted:
        if (auto r = reduce_sum(inner, n)) return Model::shifted(*r, k * t->a);
        return std::nullopt;
      case Model::Op::positive_part: return std::nullopt;
    }
  }
  return std::nullopt;
}

// reduce_sum, but only when the result no longer contains the sum node itself.
inline std::optional<Model> closed_sum(const Model& base, std::size_t n) {
  auto r = reduce_sum(base, n);
  if (!r) return std::nullopt;
  if (auto* t = r->as<Model::Transform>(); t && t->op == Model::Op::iid_sum) return std::nullopt;
  return r;
}

constexpr std::size_t kMaxAtoms = 200000;

inline std::vector<Atom> merge_atoms(std::vector<Atom> atoms) {
  std::map<double, double> m;
  for (const auto& a : atoms)
    if (a.prob > 0) m[a.value] += a.prob;
  std::vector<Atom> out;
  out.reserve(m.size());
  for (const auto& [v, p] : m) out.push_back({v, p});
  return out;
}

}  // namespace detail

// Exact atoms for finitely supported models (including empirical samples).
inline std::optional<std::vector<Atom>> discrete_atoms(const Model& m) {
  using namespace family;
  if (auto* c = m.as<Constant>()) return std::vector<Atom>{{c->c, 1.0}};
  if (auto* t = m.as<TwoPoint>()) return detail::merge_atoms({{t->x1, t->p1}, {t->x2, 1.0 - t->p1}});
  if (m.as<Rademacher>()) return std::vector<Atom>{{-1.0, 0.5}, {1.0, 0.5}};
  if (auto* d = m.as<FiniteDiscrete>()) return detail::merge_atoms(d->atoms);
  if (auto* e = m.as<Empirical>()) {
    const double w = 1.0 / static_cast<double>(e->sample->size());
    std::vector<Atom> atoms;
    atoms.reserve(e->sample->size());
    for (double x : *e->sample) atoms.push_back({x, w});
    return detail::merge_atoms(std::move(atoms));
  }
  if (auto* t = m.as<Model::Transform>()) {
    auto inner = discrete_atoms(detail::base_of(*t));
    if (!inner) return std::nullopt;
    std::vector<Atom> out;
    switch (t->op) {
      case Model::Op::negate:
        for (auto a : *inner) out.push_back({-a.value, a.prob});
        break;
      case Model::Op::affine:
        for (auto a : *inner) out.push_back({t->a * a.value + t->b, a.prob});
        break;
      case Model::Op::shifted:
        for (auto a : *inner) out.push_back({a.value - t->a, a.prob});
        break;
      case Model::Op::positive_part:
        for (auto a : *inner) out.push_back({std::max(a.value, 0.0), a.prob});
        break;
      case Model::Op::iid_sum: {
        std::vector<Atom> acc{{0.0, 1.0}};
        for (std::size_t i = 0; i < t->n; ++i) {
          std::map<double, double> next;
          for (const auto& x : acc)
            for (const auto& y : *inner) next[x.value + y.value] += x.prob * y.prob;
          if (next.size() > detail::kMaxAtoms) return std::nullopt;
          acc.clear();
          for (const auto& [v, p] : next) acc.push_back({v, p});
        }
        return acc;
      }
    }
    return detail::merge_atoms(std::move(out));
  }
  return std::nullopt;
}

inline bool is_finitely_supported(const Model& m) { return discrete_atoms(m).has_value(); }

inline MgfDomain mgf_domain(const Model& m) {
  using namespace family;
  if (auto* e = m.as<Exponential>()) return {-kInf, e->rate, false, false};
  if (auto* g = m.as<Gamma>()) return {-kInf, g->rate, false, false};
  if (m.as<VarianceNeeded>()) return {0.0, kInf, true, false};
  if (auto* t = m.as<Model::Transform>()) {
    const MgfDomain d = mgf_domain(detail::base_of(*t));
    switch (t->op) {
      case Model::Op::negate: return {-d.hi, -d.lo, d.hi_closed, d.lo_closed};
      case Model::Op::affine:
        if (t->a == 0) return {};
        if (t->a > 0) return {d.lo / t->a, d.hi / t->a, d.lo_closed, d.hi_closed};
        return {d.hi / t->a, d.lo / t->a, d.hi_closed, d.lo_closed};
      case Model::Op::shifted:
      case Model::Op::iid_sum: return d;
      case Model::Op::positive_part: return {-kInf, std::max(d.hi, 0.0), false, d.hi_closed || d.hi <= 0.0};
    }
  }
  return {};
}

inline Support support(const Model& m) {
  using namespace family;
  if (auto* c = m.as<Constant>()) return {c->c, c->c};
  if (m.as<Gaussian>()) return {-kInf, kInf};
  if (m.as<Exponential>() || m.as<Gamma>()) return {0.0, kInf};
  if (auto* u = m.as<Uniform>()) return {u->a, u->b};
  if (auto* v = m.as<VarianceNeeded>()) return {-kInf, v->atom()};
  if (auto* t = m.as<Model::Transform>()) {
    const Support s = support(detail::base_of(*t));
    switch (t->op) {
      case Model::Op::negate: return {-s.hi, -s.lo};
      case Model::Op::affine: {
        if (t->a == 0) return {t->b, t->b};
        const double a = t->a * s.lo + t->b, b = t->a * s.hi + t->b;
        return {std::min(a, b), std::max(a, b)};
      }
      case Model::Op::shifted: return {s.lo - t->a, s.hi - t->a};
      case Model::Op::positive_part: return {std::max(s.lo, 0.0), std::max(s.hi, 0.0)};
      case Model::Op::iid_sum: {
        const double k = static_cast<double>(t->n);
        return {s.lo == -kInf ? -kInf : k * s.lo, s.hi == kInf ? kInf : k * s.hi};
      }
    }
  }
  auto atoms = discrete_atoms(m);
  return {atoms->front().value, atoms->back().value};
}

// E[g(X)]. `breaks` lists points where g may jump.
inline double expect(const Model& m, const RealFn& g, std::vector<double> breaks = {}) {
  using namespace family;
  if (auto atoms = discrete_atoms(m)) {
    double s = 0.0;
    for (const auto& a : *atoms) s += a.prob * g(a.value);
    return s;
  }
  if (auto* n = m.as<Gaussian>()) {
    const double sd = std::sqrt(n->variance), mu = n->mean;
    const double norm = 1.0 / (sd * std::sqrt(2.0 * std::numbers::pi));
    auto f = [&](double x) {
      const double z = (x - mu) / sd;
      return g(x) * norm * std::exp(-0.5 * z * z);
    };
    return quad::line(f, -kInf, kInf, breaks, mu, sd);
  }
  if (auto* e = m.as<Exponential>()) {
    const double r = e->rate;
    auto f = [&](double x) { return g(x) * r * std::exp(-r * x); };
    return quad::line(f, 0.0, kInf, breaks, 0.0, 1.0 / r);
  }
  if (auto* ga = m.as<Gamma>()) {
    const double k = ga->shape, r = ga->rate, lg = std::lgamma(k);
    auto f = [&](double x) {
      if (x <= 0) return 0.0;
      return g(x) * std::exp((k - 1) * std::log(x) + k * std::log(r) - r * x - lg);
    };
    const double mode = k > 1 ? (k - 1) / r : 0.0;
    return quad::line(f, 0.0, kInf, breaks, mode, std::sqrt(k) / r);
  }
  if (auto* u = m.as<Uniform>()) {
    const double w = 1.0 / (u->b - u->a);
    auto f = [&](double x) { return g(x) * w; };
    return quad::line(f, u->a, u->b, breaks, 0.5 * (u->a + u->b), u->b - u->a);
  }
  if (auto* v = m.as<VarianceNeeded>()) {
    // Density part on the log axis t = e^w: integral over w >= 0 of g(-e^w) e^{w(1-nu)}.
    const double nu = v->nu;
    auto f = [&](double w) { return g(-std::exp(w)) * std::exp(w * (1.0 - nu)); };
    std::vector<double> wb;
    for (double b : breaks)
      if (b < -1.0) wb.push_back(std::log(-b));
    return v->atom_prob() * g(v->atom()) + quad::line(f, 0.0, kInf, wb, 0.0, 1.0);
  }
  if (auto* t = m.as<Model::Transform>()) {
    const Model& base = detail::base_of(*t);
    switch (t->op) {
      case Model::Op::negate: {
        for (double& b : breaks) b = -b;
        return expect(base, [&](double x) { return g(-x); }, breaks);
      }
      case Model::Op::affine: {
        if (t->a == 0) return g(t->b);
        for (double& b : breaks) b = (b - t->b) / t->a;
        return expect(base, [&](double x) { return g(t->a * x + t->b); }, breaks);
      }
      case Model::Op::shifted: {
        for (double& b : breaks) b += t->a;
        return expect(base, [&](double x) { return g(x - t->a); }, breaks);
      }
      case Model::Op::positive_part: {
        std::vector<double> nb{0.0};
        for (double b : breaks)
          if (b > 0) nb.push_back(b);
        return expect(base, [&](double x) { return g(std::max(x, 0.0)); }, nb);
      }
      case Model::Op::iid_sum: {
        if (auto r = detail::closed_sum(base, t->n)) return expect(*r, g, breaks);
        throw Error(Errc::Unsupported, "expectation of an iid sum without a closed family");
      }
    }
  }
  throw Error(Errc::Unsupported, "expectation for this model");
}

// P(X <= t) when inclusive, P(X < t) otherwise.
inline double cdf(const Model& m, double t, bool inclusive = true) {
  using namespace family;
  if (auto atoms = discrete_atoms(m)) {
    double s = 0.0;
    for (const auto& a : *atoms)
      if (a.value < t || (inclusive && a.value == t)) s += a.prob;
    return std::min(1.0, s);
  }
  if (auto* n = m.as<Gaussian>()) return detail::normal_cdf((t - n->mean) / std::sqrt(n->variance));
  if (auto* e = m.as<Exponential>()) return t <= 0 ? 0.0 : -std::expm1(-e->rate * t);
  if (auto* g = m.as<Gamma>()) return t <= 0 ? 0.0 : boost::math::gamma_p(g->shape, g->rate * t);
  if (auto* u = m.as<Uniform>()) return std::clamp((t - u->a) / (u->b - u->a), 0.0, 1.0);
  if (auto* v = m.as<VarianceNeeded>()) {
    const double left = 1.0 / (v->nu - 1.0);
    if (t < -1.0) return std::pow(-t, 1.0 - v->nu) * left;
    if (t < v->atom() || (!inclusive && t == v->atom())) return left;
    return 1.0;
  }
  if (auto* tr = m.as<Model::Transform>()) {
    const Model& base = detail::base_of(*tr);
    switch (tr->op) {
      case Model::Op::negate: return 1.0 - cdf(base, -t, !inclusive);
      case Model::Op::affine: {
        if (tr->a == 0) return (tr->b < t || (inclusive && tr->b == t)) ? 1.0 : 0.0;
        const double x = (t - tr->b) / tr->a;
        return tr->a > 0 ? cdf(base, x, inclusive) : 1.0 - cdf(base, x, !inclusive);
      }
      case Model::Op::shifted: return cdf(base, t + tr->a, inclusive);
      case Model::Op::positive_part:
        if (t < 0 || (t == 0 && !inclusive)) return 0.0;
        return cdf(base, t, inclusive);
      case Model::Op::iid_sum:
        if (auto r = detail::closed_sum(base, tr->n)) return cdf(*r, t, inclusive);
        throw Error(Errc::Unsupported, "distribution function of an iid sum without a closed family");
    }
  }
  throw Error(Errc::Unsupported, "distribution function for this model");
}

inline Moments moments(const Model& m) {
  using namespace family;
  Moments r;
  auto finish = [&](Moments x) {
    if (!std::isfinite(x.second_moment)) x.variance = kInf;
    x.prob_negative = cdf(m, 0.0, false);
    return x;
  };
  if (auto atoms = discrete_atoms(m)) {
    double mean = 0, sec = 0;
    for (const auto& a : *atoms) {
      mean += a.prob * a.value;
      sec += a.prob * a.value * a.value;
    }
    double var = 0;
    for (const auto& a : *atoms) var += a.prob * (a.value - mean) * (a.value - mean);
    return finish({mean, sec, var, 0});
  }
  if (auto* n = m.as<Gaussian>()) return finish({n->mean, n->variance + n->mean * n->mean, n->variance, 0});
  if (auto* e = m.as<Exponential>()) {
    const double r2 = e->rate * e->rate;
    return finish({1 / e->rate, 2 / r2, 1 / r2, 0});
  }
  if (auto* g = m.as<Gamma>()) {
    const double k = g->shape, r = g->rate;
    return finish({k / r, k * (k + 1) / (r * r), k / (r * r), 0});
  }
  if (auto* u = m.as<Uniform>()) {
    const double a = u->a, b = u->b;
    return finish({0.5 * (a + b), (a * a + a * b + b * b) / 3, (b - a) * (b - a) / 12, 0});
  }
  if (m.as<VarianceNeeded>()) return finish({0.0, kInf, kInf, 0});
  if (auto* t = m.as<Model::Transform>()) {
    const Model& base = detail::base_of(*t);
    const Moments b = moments(base);
    switch (t->op) {
      case Model::Op::negate: return finish({-b.mean, b.second_moment, b.variance, 0});
      case Model::Op::affine: {
        if (t->a == 0) return finish({t->b, t->b * t->b, 0, 0});
        const double mean = t->a * b.mean + t->b;
        const double var = t->a * t->a * b.variance;
        return finish({mean, var + mean * mean, var, 0});
      }
      case Model::Op::shifted: {
        const double mean = b.mean - t->a;
        return finish({mean, b.variance + mean * mean, b.variance, 0});
      }
      case Model::Op::positive_part: {
        const double m1 = expect(base, [](double x) { return std::max(x, 0.0); }, {0.0});
        const double m2 = expect(base, [](double x) { return x > 0 ? x * x : 0.0; }, {0.0});
        return finish({m1, m2, std::max(0.0, m2 - m1 * m1), 0});
      }
      case Model::Op::iid_sum: {
        const double k = static_cast<double>(t->n);
        const double mean = k * b.mean, var = k * b.variance;
        return finish({mean, var + mean * mean, var, 0});
      }
    }
  }
  return r;
}

namespace detail {

// log E[e^{eta X}] plus the delta-method variance of that estimate (nonzero
// only for empirical models).
struct LogMgf {
  double value = 0.0;
  double variance = 0.0;
  bool quadrature = false;
  bool empirical = false;
  std::size_t samples = 0;
};

inline std::optional<std::vector<double>> empirical_values(const Model& m) {
  if (auto* e = m.as<family::Empirical>()) return *e->sample;
  if (auto* t = m.as<Model::Transform>()) {
    if (t->op == Model::Op::iid_sum) return std::nullopt;
    auto v = empirical_values(base_of(*t));
    if (!v) return std::nullopt;
    for (double& x : *v) {
      switch (t->op) {
        case Model::Op::negate: x = -x; break;
        case Model::Op::affine: x = t->a * x + t->b; break;
        case Model::Op::shifted: x -= t->a; break;
        case Model::Op::positive_part: x = std::max(x, 0.0); break;
        case Model::Op::iid_sum: break;
      }
    }
    return v;
  }
  return std::nullopt;
}

inline double variance_needed_tail_mgf(double nu, double eta) {
  // integral_1^inf t^{-nu} e^{-eta t} dt = eta^{nu-1} Gamma(1-nu, eta), reached from
  // the positive shape 3-nu by two steps of Gamma(s,x) = (Gamma(s+1,x) - x^s e^{-x}) / s.
  if (eta == 0) return 1.0 / (nu - 1.0);
  const double x = eta, ex = std::exp(-x);
  const double g3 = boost::math::tgamma(3.0 - nu, x);
  const double scaled = std::pow(x, nu - 1.0) * g3;  // x^{nu-1} Gamma(3-nu, x)
  return ((scaled - x * ex) / (2.0 - nu) - ex) / (1.0 - nu);
}

// log sum_i p_i e^{eta x_i}. Near eta = 0 the log1p/expm1 form keeps the
// absolute error at rounding level, so A^eta = value/eta stays accurate.
inline double log_mean_exp(const std::vector<Atom>& atoms, double eta) {
  double mx = -kInf;
  for (const auto& a : atoms)
    if (a.prob > 0) mx = std::max(mx, std::abs(eta * a.value));
  if (mx < 1.0) {
    double y = 0;
    for (const auto& a : atoms) y += a.prob * std::expm1(eta * a.value);
    if (y > -0.5) return std::log1p(y);
  }
  std::vector<double> terms;
  for (const auto& a : atoms)
    if (a.prob > 0) terms.push_back(std::log(a.prob) + eta * a.value);
  return log_sum_exp(terms);
}

inline LogMgf log_mgf(const Model& m, double eta) {
  using namespace family;
  if (eta == 0) return {};
  if (auto v = empirical_values(m)) {
    const std::size_t n = v->size();
    double mx = -kInf;
    for (double x : *v) mx = std::max(mx, eta * x);
    double s = 0, s2 = 0;
    for (double x : *v) {
      const double w = std::exp(eta * x - mx);
      s += w;
      s2 += w * w;
    }
    const double mean = s / static_cast<double>(n);
    const double var_w = n > 1 ? std::max(0.0, (s2 - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1)) : 0.0;
    LogMgf r;
    r.value = mx + std::log(mean);
    r.variance = var_w / (static_cast<double>(n) * mean * mean);
    r.empirical = true;
    r.samples = n;
    return r;
  }
  if (!mgf_domain(m).contains(eta)) return {kInf};
  if (auto* c = m.as<Constant>()) return {eta * c->c};
  if (auto* t = m.as<TwoPoint>()) {
    return {log_mean_exp({{t->x1, t->p1}, {t->x2, 1.0 - t->p1}}, eta)};
  }
  if (m.as<Rademacher>()) {
    const double a = std::abs(eta);
    if (a < 20) {
      const double sh = std::sinh(0.5 * a);
      return {std::log1p(2 * sh * sh)};  // cosh a = 1 + 2 sinh^2(a/2)
    }
    return {a + std::log1p(std::exp(-2 * a)) - std::log(2.0)};
  }
  if (auto* d = m.as<FiniteDiscrete>()) {
    return {log_mean_exp(d->atoms, eta)};
  }
  if (auto* g = m.as<Gaussian>()) return {eta * g->mean + 0.5 * eta * eta * g->variance};
  if (auto* e = m.as<Exponential>()) return {-std::log1p(-eta / e->rate)};
  if (auto* g = m.as<Gamma>()) return {-g->shape * std::log1p(-eta / g->rate)};
  if (auto* u = m.as<Uniform>()) {
    const double w = u->b - u->a, x = eta * w;
    if (std::abs(x) < 1e-8) return {eta * u->a + 0.5 * x + x * x / 24.0};
    if (eta > 0) return {eta * u->b + std::log(-std::expm1(-x) / x)};
    return {eta * u->a + std::log(std::expm1(x) / x)};
  }
  if (auto* v = m.as<VarianceNeeded>()) {
    const double tail = variance_needed_tail_mgf(v->nu, eta);
    return {log_sum_exp(std::log(tail), std::log(v->atom_prob()) + eta * v->atom())};
  }
  if (auto* t = m.as<Model::Transform>()) {
    const Model& base = base_of(*t);
    switch (t->op) {
      case Model::Op::negate: return log_mgf(base, -eta);
      case Model::Op::affine: {
        LogMgf r = log_mgf(base, t->a * eta);
        r.value += eta * t->b;
        return r;
      }
      case Model::Op::shifted: {
        LogMgf r = log_mgf(base, eta);
        r.value -= eta * t->a;
        return r;
      }
      case Model::Op::iid_sum: {
        LogMgf r = log_mgf(base, eta);
        const double k = static_cast<double>(t->n);
        r.value *= k;
        r.variance *= k * k;
        return r;
      }
      case Model::Op::positive_part: {
        if (auto atoms = discrete_atoms(base)) {
          for (auto& a : *atoms) a.value = std::max(a.value, 0.0);
          return {log_mean_exp(*atoms, eta)};
        }
        const double e = expect(base, [eta](double x) { return x > 0 ? std::exp(eta * x) : 1.0; }, {0.0});
        LogMgf r{std::log(e)};
        r.quadrature = true;
        return r;
      }
    }
  }
  throw Error(Errc::Unsupported, "moment generating function for this model");
}

}  // namespace detail

// log E[e^{eta X}]; +inf outside the MGF domain.
inline double log_mgf(const Model& m, double eta) { return detail::log_mgf(m, eta).value; }

// A^eta[X] = (1/eta) log E[e^{eta X}].
inline AnnealedValue annealed_expectation(const Model& m, double eta, const EvalBudget& budget = {}) {
  if (!(eta > 0)) throw Error(Errc::NonpositiveEta, "annealed expectation needs eta > 0");
  const detail::LogMgf lm = detail::log_mgf(m, eta);
  AnnealedValue r;
  r.value = lm.value / eta;
  r.standard_error = std::sqrt(lm.variance) / eta;
  if (lm.empirical && r.standard_error > 0) {
    r.method = EvalMethod::monte_carlo;
    r.sample_count = lm.samples;
    r.seed = budget.seed;
  } else {
    r.method = lm.quadrature ? EvalMethod::quadrature : EvalMethod::closed_form;
  }
  return r;
}

inline double sample(const Model& m, Rng& rng) {
  using namespace family;
  if (auto* c = m.as<Constant>()) return c->c;
  if (auto* t = m.as<TwoPoint>()) return uniform01(rng) < t->p1 ? t->x1 : t->x2;
  if (m.as<Rademacher>()) return uniform01(rng) < 0.5 ? -1.0 : 1.0;
  if (auto* d = m.as<FiniteDiscrete>()) {
    const double u = uniform01(rng);
    double acc = 0;
    for (const auto& a : d->atoms) {
      acc += a.prob;
      if (u < acc) return a.value;
    }
    return d->atoms.back().value;
  }
  if (auto* g = m.as<Gaussian>()) return g->mean + std::sqrt(g->variance) * standard_normal(rng);
  if (auto* e = m.as<Exponential>()) return -std::log(uniform01(rng)) / e->rate;
  if (auto* g = m.as<Gamma>()) return std::gamma_distribution<double>(g->shape, 1.0 / g->rate)(rng);
  if (auto* u = m.as<Uniform>()) return u->a + (u->b - u->a) * uniform01(rng);
  if (auto* v = m.as<VarianceNeeded>()) {
    if (uniform01(rng) < 1.0 / (v->nu - 1.0)) return -std::pow(uniform01(rng), -1.0 / (v->nu - 1.0));
    return v->atom();
  }
  if (auto* e = m.as<Empirical>()) {
    const auto n = e->sample->size();
    auto i = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
    return (*e->sample)[std::min(i, n - 1)];
  }
  if (auto* t = m.as<Model::Transform>()) {
    const Model& base = detail::base_of(*t);
    switch (t->op) {
      case Model::Op::negate: return -sample(base, rng);
      case Model::Op::affine: return t->a * sample(base, rng) + t->b;
      case Model::Op::shifted: return sample(base, rng) - t->a;
      case Model::Op::positive_part: return std::max(sample(base, rng), 0.0);
      case Model::Op::iid_sum: {
        if (auto r = detail::closed_sum(base, t->n)) return sample(*r, rng);
        if (auto* tp = base.as<TwoPoint>()) {
          const auto k = std::binomial_distribution<std::uint64_t>(t->n, tp->p1)(rng);
          return static_cast<double>(k) * tp->x1 + static_cast<double>(t->n - k) * tp->x2;
        }
        if (base.as<Rademacher>()) {
          const auto k = std::binomial_distribution<std::uint64_t>(t->n, 0.5)(rng);
          return 2.0 * static_cast<double>(k) - static_cast<double>(t->n);
        }
        double s = 0;
        for (std::size_t i = 0; i < t->n; ++i) s += sample(base, rng);
        return s;
      }
    }
  }
  throw Error(Errc::Unsupported, "sampling for this model");
}

inline std::string describe(const Model& m) {
  using namespace family;
  const auto f = format_double;
  if (auto* c = m.as<Constant>()) return "constant(" + f(c->c) + ")";
  if (auto* t = m.as<TwoPoint>()) return "two_point(" + f(t->x1) + "," + f(t->p1) + "," + f(t->x2) + ")";
  if (m.as<Rademacher>()) return "rademacher";
  if (auto* g = m.as<Gaussian>()) return "gaussian(" + f(g->mean) + "," + f(g->variance) + ")";
  if (auto* e = m.as<Exponential>()) return "exponential(" + f(e->rate) + ")";
  if (auto* g = m.as<Gamma>()) return "gamma(" + f(g->shape) + "," + f(g->rate) + ")";
  if (auto* u = m.as<Uniform>()) return "uniform(" + f(u->a) + "," + f(u->b) + ")";
  if (auto* d = m.as<FiniteDiscrete>()) return "finite_discrete(" + std::to_string(d->atoms.size()) + " atoms)";
  if (auto* v = m.as<VarianceNeeded>()) return "variance_needed(" + f(v->nu) + ")";
  if (auto* e = m.as<Empirical>()) return "empirical(n=" + std::to_string(e->sample->size()) + ")";
  if (auto* t = m.as<Model::Transform>()) {
    const std::string b = t->base ? describe(*t->base) : "?";
    switch (t->op) {
      case Model::Op::negate: return "-(" + b + ")";
      case Model::Op::affine: return f(t->a) + "*(" + b + ")+" + f(t->b);
      case Model::Op::positive_part: return "(" + b + ")_+";
      case Model::Op::iid_sum: return "sum" + std::to_string(t->n) + "(" + b + ")";
      case Model::Op::shifted: return "(" + b + ")-" + f(t->a);
    }
  }
  return "?";
}

struct TaylorResidual {
  bool exists_etaprime = false;
  double residual_at_0 = 0.0;
  double residual_at_eta = 0.0;
};

// R(t) = E[e^{eta X}] - 1 - eta E[X] - eta^2/2 E[X^2 e^{tX}] scanned over t in [0, eta];
// a sign change certifies the intermediate point of the second-order expansion.
inline TaylorResidual extended_taylor_residual(const Model& m, double eta) {
  if (!(eta > 0)) throw Error(Errc::NonpositiveEta, "taylor residual needs eta > 0");
  const MgfDomain d = mgf_domain(m);
  if (!(eta < d.hi) || !d.contains(eta)) throw Error(Errc::DomainViolation, "eta must lie strictly inside the MGF domain");
  const Moments mo = moments(m);
  if (!mo.regular()) throw Error(Errc::PreconditionViolated, "second moment must be finite");
  const double M = std::exp(log_mgf(m, eta));
  const double base = M - 1.0 - eta * mo.mean;
  auto R = [&](double t) {
    const double h = t == 0 ? mo.second_moment : expect(m, [t](double x) { return x * x * std::exp(t * x); });
    return base - 0.5 * eta * eta * h;
  };
  constexpr int kSteps = 64;
  const double tol = 1e-12 * std::max(1.0, M);
  TaylorResidual out;
  double prev = R(0.0);
  out.residual_at_0 = prev;
  out.exists_etaprime = std::abs(prev) <= tol;
  for (int k = 1; k <= kSteps; ++k) {
    const double cur = R(eta * k / kSteps);
    if (std::abs(cur) <= tol || prev * cur <= 0) out.exists_etaprime = true;
    prev = cur;
  }
  out.residual_at_eta = prev;
  return out;
}

}  // namespace esi
