#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "esi/pacbayes.hpp"
#include "esi/support.hpp"
#include "esi/verify.hpp"

namespace esi {

// One draw of a random-eta scenario: the selected grid index and the
// values X_eta, Y_eta for every eta in the grid.
struct RandomEtaDraw {
  std::size_t index = 0;
  std::vector<double> x;
  std::vector<double> y;
};

struct RandomEtaOutcome {
  double prob;
  RandomEtaDraw draw;
};

struct RandomEtaScenario {
  std::vector<double> grid;
  // Either a generator or a finite outcome list (which also enables exact evaluation).
  std::function<void(Rng&, RandomEtaDraw&)> generator;
  std::optional<std::vector<RandomEtaOutcome>> outcomes;
  std::string selector = "unspecified";

  void validate() const {
    if (grid.empty()) throw Error(Errc::EmptyGrid, "grid: empty");
    for (double e : grid)
      if (!(e > 0) || !std::isfinite(e)) throw Error(Errc::NonpositiveEta, "grid values must be positive and finite");
    if (!generator && !outcomes) throw Error(Errc::InvalidArgument, "scenario needs a generator or outcomes");
    if (outcomes) {
      double s = 0;
      for (const auto& o : *outcomes) {
        if (!(o.prob >= 0)) throw Error(Errc::InvalidArgument, "outcome probabilities must be nonnegative");
        if (o.draw.index >= grid.size() || o.draw.x.size() != grid.size() || o.draw.y.size() != grid.size())
          throw Error(Errc::InvalidArgument, "outcome does not match the grid");
        s += o.prob;
      }
      if (std::abs(s - 1) > 1e-12) throw Error(Errc::InvalidArgument, "outcome probabilities must sum to 1");
    }
  }

  void draw(Rng& rng, RandomEtaDraw& d) const {
    if (generator) {
      generator(rng, d);
      return;
    }
    const double u = uniform01(rng);
    double c = 0;
    for (const auto& o : *outcomes) {
      c += o.prob;
      if (u < c) {
        d = o.draw;
        return;
      }
    }
    d = outcomes->back().draw;
  }

  // Exact expectation of g over the outcome list.
  template <class G>
  double exact(G&& g) const {
    double s = 0;
    for (const auto& o : *outcomes)
      if (o.prob > 0) s += o.prob * g(o.draw);
    return s;
  }
};

// Constant W_eta = X_eta - Y_eta per outcome, with eta-hat = grid[index].
inline RandomEtaScenario finite_scenario(std::vector<double> grid,
                                         const std::vector<std::pair<double, std::size_t>>& prob_index,
                                         const std::vector<std::vector<double>>& w) {
  RandomEtaScenario s;
  s.grid = std::move(grid);
  s.outcomes.emplace();
  for (std::size_t i = 0; i < prob_index.size(); ++i)
    s.outcomes->push_back({prob_index[i].first, {prob_index[i].second, w[i], std::vector<double>(s.grid.size(), 0.0)}});
  s.selector = "finite outcome list";
  s.validate();
  return s;
}

namespace detail {

inline double eta_hat(const RandomEtaScenario& s, const RandomEtaDraw& d) { return s.grid.at(d.index); }

inline double w_hat(const RandomEtaDraw& d) { return d.x[d.index] - d.y[d.index]; }

// Chunked Monte Carlo of several per-draw statistics at once.
template <std::size_t K, class F>
std::array<MeanAccumulator, K> scenario_mc(const RandomEtaScenario& s, const EvalBudget& b, F&& stats) {
  struct Acc {
    std::array<MeanAccumulator, K> a;
    void merge(const Acc& o) {
      for (std::size_t k = 0; k < K; ++k) a[k].merge(o.a[k]);
    }
  };
  auto parts = run_chunked<Acc>(b.samples, b.chunks, b.seed, b.threads, [&](std::size_t, std::size_t count, Rng& rng) {
    Acc acc;
    RandomEtaDraw d;
    for (std::size_t r = 0; r < count; ++r) {
      s.draw(rng, d);
      const std::array<double, K> v = stats(d);
      for (std::size_t k = 0; k < K; ++k) acc.a[k].add(v[k]);
    }
    return acc;
  });
  return merge_all(parts).a;
}

}  // namespace detail

// E[exp(eta-hat W_eta-hat)] <= 1, i.e. eta-hat (X - Y) <=_1 0.
inline VerificationReport verify_random_eta(const RandomEtaScenario& s, const EvalBudget& budget = {},
                                            const VerifyConfig& cfg = {}) {
  s.validate();
  auto stat = [&](const RandomEtaDraw& d) { return std::exp(detail::eta_hat(s, d) * detail::w_hat(d)); };
  if (s.outcomes) return expectation_report(s.exact(stat), 0.0, 1.0, EvalMethod::closed_form, 0, budget.seed, cfg);
  auto acc = detail::scenario_mc<1>(s, budget, [&](const RandomEtaDraw& d) { return std::array<double, 1>{stat(d)}; });
  return expectation_report(acc[0].mean(), acc[0].standard_error(), 1.0, EvalMethod::monte_carlo, acc[0].n,
                            budget.seed, cfg);
}

struct RandomEtaBounds {
  EvalMethod method;
  double delta;
  // P(X <= Y + log(1/delta)/eta-hat) against 1 - delta.
  double hp_frequency, hp_se;
  bool hp_ok;
  // E[X] <= E[Y + 1/eta-hat]; lhs_minus_rhs carries the (paired) standard error.
  double mean_x, mean_y, mean_inv_eta;
  double lhs_minus_rhs, lhs_minus_rhs_se;
  bool expectation_ok;
  bool holds_without_correction;  // E[X] <= E[Y], which the theorem does not promise
  // X <=_{eta-hat/2} Y + 2 log 2 / eta-hat.
  VerificationReport partial_converse;
};

inline RandomEtaBounds random_eta_bounds(const RandomEtaScenario& s, double delta, const EvalBudget& budget = {},
                                         const VerifyConfig& cfg = {}) {
  if (!(delta > 0 && delta <= 1)) throw Error(Errc::InvalidArgument, "delta must lie in (0,1]");
  if (verify_random_eta(s, budget, cfg).verdict != Verdict::holds)
    throw Error(Errc::UnverifiedScenario, "random-eta ESI does not verify");
  const double k = cfg.k_sigma;
  const double L = -std::log(delta);
  auto stats = [&](const RandomEtaDraw& d) {
    const double e = detail::eta_hat(s, d), w = detail::w_hat(d);
    return std::array<double, 6>{w <= L / e ? 1.0 : 0.0, d.x[d.index], d.y[d.index], 1.0 / e,
                                 w - 1.0 / e, std::exp(0.5 * e * w - std::log(2.0))};
  };
  RandomEtaBounds r{};
  r.delta = delta;
  std::array<double, 6> mean{}, se{};
  std::size_t n = 0;
  if (s.outcomes) {
    r.method = EvalMethod::closed_form;
    for (std::size_t j = 0; j < 6; ++j) mean[j] = s.exact([&](const RandomEtaDraw& d) { return stats(d)[j]; });
  } else {
    r.method = EvalMethod::monte_carlo;
    const auto acc = detail::scenario_mc<6>(s, budget, stats);
    for (std::size_t j = 0; j < 6; ++j) {
      mean[j] = acc[j].mean();
      se[j] = acc[j].standard_error();
    }
    n = acc[0].n;
  }
  r.hp_frequency = mean[0];
  r.hp_se = se[0];
  r.hp_ok = r.hp_frequency + k * r.hp_se >= 1 - delta;
  r.mean_x = mean[1];
  r.mean_y = mean[2];
  r.mean_inv_eta = mean[3];
  r.lhs_minus_rhs = mean[4];
  r.lhs_minus_rhs_se = se[4];
  const double slack = r.method == EvalMethod::closed_form ? cfg.closed_form_slack : 0.0;
  r.expectation_ok = r.lhs_minus_rhs - k * r.lhs_minus_rhs_se <= slack * std::max(1.0, r.mean_inv_eta);
  r.holds_without_correction = r.mean_x <= r.mean_y;
  r.partial_converse = expectation_report(mean[5], se[5], 1.0, r.method, n, budget.seed, cfg);
  return r;
}

// sum_i X_{i,eta}(Z^n) with eta-hat = selector(Z^n) over a finite grid.
struct RandomEtaSumSpec {
  std::size_t n = 1;
  std::vector<double> grid;
  std::function<double(Rng&)> draw_z;
  std::function<double(std::size_t i, std::size_t k, const std::vector<double>& z)> x;  // X_{i, grid[k]}
  std::function<std::size_t(const std::vector<double>& z)> selector;
};

struct SumCheckConfig {
  bool strict = true;
  std::size_t slot_histories = 8;  // sampled z^{n \ i} per (i, eta)
  std::size_t slot_draws = 4000;   // draws of Z_i per history
};

struct RandomEtaSumResult {
  double lhs, lhs_se;  // E[sum_i X_{i, eta-hat}]
  double rhs, rhs_se;  // E[(log|G| + 1)/eta-hat]
  double diff_se;
  bool holds;          // lhs - rhs <= k se of the paired difference
  std::size_t slot_checks = 0;
  double worst_slot_margin = -kInf;  // max over checks of log E[e^{eta X}] / eta
};

inline RandomEtaSumResult random_eta_sum(const RandomEtaSumSpec& spec, const EvalBudget& budget = {},
                                         const SumCheckConfig& scfg = {}, const VerifyConfig& cfg = {}) {
  if (spec.grid.empty()) throw Error(Errc::EmptyGrid, "grid: empty");
  for (double e : spec.grid)
    if (!(e > 0)) throw Error(Errc::NonpositiveEta, "grid values must be positive");
  if (spec.n == 0) throw Error(Errc::InvalidArgument, "n must be at least 1");
  RandomEtaSumResult r{};
  const double k = cfg.k_sigma;
  if (scfg.strict) {
    // Conditional ESI per slot: fix z^{n \ i}, redraw Z_i.
    Rng rng = substream(budget.seed, 0xA55A5AA5ULL);
    std::vector<double> z(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i)
      for (std::size_t g = 0; g < spec.grid.size(); ++g)
        for (std::size_t h = 0; h < scfg.slot_histories; ++h) {
          for (auto& v : z) v = spec.draw_z(rng);
          MeanAccumulator acc;
          for (std::size_t t = 0; t < scfg.slot_draws; ++t) {
            z[i] = spec.draw_z(rng);
            acc.add(std::exp(spec.grid[g] * spec.x(i, g, z)));
          }
          const auto rep = expectation_report(acc.mean(), acc.standard_error(), spec.grid[g], EvalMethod::monte_carlo,
                                              acc.n, budget.seed, cfg);
          ++r.slot_checks;
          r.worst_slot_margin = std::max(r.worst_slot_margin, rep.worst_margin);
          if (rep.verdict == Verdict::fails)
            throw Error(Errc::AssumptionUnverified, "conditional ESI fails at slot " + std::to_string(i) +
                                                        ", eta=" + format_double(spec.grid[g]));
        }
  }
  const double pen = std::log(static_cast<double>(spec.grid.size())) + 1;
  struct Acc {
    MeanAccumulator lhs, rhs, diff;
    void merge(const Acc& o) {
      lhs.merge(o.lhs);
      rhs.merge(o.rhs);
      diff.merge(o.diff);
    }
  };
  auto parts = run_chunked<Acc>(budget.samples, budget.chunks, budget.seed, budget.threads,
                                [&](std::size_t, std::size_t count, Rng& rng) {
                                  Acc a;
                                  std::vector<double> z(spec.n);
                                  for (std::size_t t = 0; t < count; ++t) {
                                    for (auto& v : z) v = spec.draw_z(rng);
                                    const std::size_t g = spec.selector(z);
                                    if (g >= spec.grid.size())
                                      throw Error(Errc::InvalidArgument, "selector left the grid");
                                    double s = 0;
                                    for (std::size_t i = 0; i < spec.n; ++i) s += spec.x(i, g, z);
                                    const double rr = pen / spec.grid[g];
                                    a.lhs.add(s);
                                    a.rhs.add(rr);
                                    a.diff.add(s - rr);
                                  }
                                  return a;
                                });
  const Acc a = merge_all(parts);
  r.lhs = a.lhs.mean();
  r.lhs_se = a.lhs.standard_error();
  r.rhs = a.rhs.mean();
  r.rhs_se = a.rhs.standard_error();
  r.diff_se = a.diff.standard_error();
  r.holds = a.diff.mean() <= k * r.diff_se;
  return r;
}

// PAC-Bayes over the grid: each draw yields X_eta for all eta and a
// posterior over the grid; eta-hat ~ posterior.
struct EtaPosteriorScenario {
  std::vector<double> grid;
  DiscreteMeasure prior;
  std::function<void(Rng&, std::vector<double>& x, DiscreteMeasure& posterior)> generator;
  std::vector<EsiCertificate> certs;  // X_eta <=_eta 0 for each grid point
};

struct RandomEtaCertificate {
  std::vector<double> grid;
  std::string statement;
  std::vector<std::string> provenance;
};

struct PacBayesEtaResult {
  RandomEtaCertificate cert;
  std::optional<EsiCertificate> fixed;  // |G| = 1: the input certificate unchanged
  VerificationReport evidence;          // E[exp(eta-hat W_eta-hat)] <= 1, W = X - penalty/eta
  double delta;
  double hp_frequency, hp_se;  // P(X <= (penalty + log 1/delta)/eta-hat)
  double expectation, expectation_se;  // E[X - (penalty + 1)/eta-hat] <= 0
  bool hp_ok, expectation_ok;
};

// log(d posterior / d prior) at grid point k; -log prior_k for a degenerate posterior.
inline double eta_penalty(const DiscreteMeasure& prior, const DiscreteMeasure& posterior, std::size_t k) {
  if (posterior.weights.at(k) > 0 && prior.weights.at(k) == 0)
    throw Error(Errc::SupportViolation, "posterior puts mass outside the prior support");
  return std::log(posterior.weights[k] / prior.weights[k]);
}

inline PacBayesEtaResult pacbayes_on_eta(const EtaPosteriorScenario& s, double delta, const EvalBudget& budget = {},
                                         const VerifyConfig& cfg = {}) {
  if (s.grid.empty()) throw Error(Errc::EmptyGrid, "grid: empty");
  if (!(delta > 0 && delta <= 1)) throw Error(Errc::InvalidArgument, "delta must lie in (0,1]");
  s.prior.validate();
  if (s.prior.size() != s.grid.size()) throw Error(Errc::InvalidArgument, "prior must have one weight per grid point");
  if (s.certs.size() != s.grid.size()) throw Error(Errc::MissingCertificates, "need X_eta <=_eta 0 for every eta");
  for (std::size_t k = 0; k < s.grid.size(); ++k) {
    const auto& c = s.certs[k];
    if (!c.holds() || !c.scale.is_constant() || c.scale.eta() < s.grid[k] || c.rhs != 0 || !c.offset.is_zero())
      throw Error(Errc::MissingCertificates, "need X_eta <=_eta 0 for every eta");
  }
  PacBayesEtaResult r{};
  r.delta = delta;
  r.cert.grid = s.grid;
  r.cert.statement = "X_etahat <=_etahat log(dPost/dPrior)(etahat) / etahat";
  for (const auto& c : s.certs)
    for (const auto& p : c.provenance) r.cert.provenance.push_back(p);
  r.cert.provenance.push_back("derived: pacbayes_on_eta (|G|=" + std::to_string(s.grid.size()) + ")");
  if (s.grid.size() == 1) r.fixed = s.certs.front();

  const double L = -std::log(delta);
  struct Acc {
    MeanAccumulator e, hp, ex;
    void merge(const Acc& o) {
      e.merge(o.e);
      hp.merge(o.hp);
      ex.merge(o.ex);
    }
  };
  // The inner expectation over eta-hat ~ posterior is exact per draw.
  auto parts = run_chunked<Acc>(budget.samples, budget.chunks, budget.seed, budget.threads,
                                [&](std::size_t, std::size_t count, Rng& rng) {
                                  Acc a;
                                  std::vector<double> x;
                                  DiscreteMeasure post;
                                  for (std::size_t t = 0; t < count; ++t) {
                                    s.generator(rng, x, post);
                                    if (post.size() != s.grid.size() || x.size() != s.grid.size())
                                      throw Error(Errc::InvalidArgument, "draw does not match the grid");
                                    double e = 0, hp = 0, ex = 0;
                                    for (std::size_t k = 0; k < s.grid.size(); ++k) {
                                      const double q = post.weights[k];
                                      if (q == 0) continue;
                                      const double pen = eta_penalty(s.prior, post, k), eta = s.grid[k];
                                      e += q * std::exp(eta * x[k] - pen);
                                      hp += q * (x[k] <= (pen + L) / eta ? 1.0 : 0.0);
                                      ex += q * (x[k] - (pen + 1) / eta);
                                    }
                                    a.e.add(e);
                                    a.hp.add(hp);
                                    a.ex.add(ex);
                                  }
                                  return a;
                                });
  const Acc a = merge_all(parts);
  r.evidence = expectation_report(a.e.mean(), a.e.standard_error(), 1.0, EvalMethod::monte_carlo, a.e.n, budget.seed, cfg);
  r.hp_frequency = a.hp.mean();
  r.hp_se = a.hp.standard_error();
  r.expectation = a.ex.mean();
  r.expectation_se = a.ex.standard_error();
  r.hp_ok = r.hp_frequency + cfg.k_sigma * r.hp_se >= 1 - delta;
  r.expectation_ok = r.expectation - cfg.k_sigma * r.expectation_se <= 0;
  return r;
}

}  // namespace esi
