#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "esi/measure.hpp"
#include "esi/pacbayes.hpp"
#include "esi/support.hpp"
#include "esi/verify.hpp"

namespace esi {

// Realized increments X_1..X_k; the prefix generating the filtration.
using History = std::vector<double>;
using IncrementGenerator = std::function<double(const History&, Rng&)>;
// Called after each increment with the prefix so far; true stops the path.
using StoppingRule = std::function<bool(const History&)>;
// Finite conditional law of X_{k+1} given a history of length k.
using ConditionalLaw = std::function<std::vector<Atom>(const History&)>;

struct ProcessSpec {
  IncrementGenerator increment;
  std::size_t horizon = 0;
  StoppingRule stop;
  double eta = 1.0;
  ConditionalLaw exact_conditional;  // optional; enables enumeration

  void validate() const {
    if (horizon == 0) throw Error(Errc::HorizonZero, "horizon: must be at least 1");
    if (!increment) throw Error(Errc::InvalidArgument, "increment_generator: missing");
    if (!(eta > 0) || !std::isfinite(eta)) throw Error(Errc::NonpositiveEta, "eta: must be positive");
  }
};

inline StoppingRule stop_at(std::size_t t) {
  return [t](const History& h) { return h.size() >= t; };
}

// First t with S_t >= level, capped at t = cap.
inline StoppingRule stop_on_crossing(double level, std::size_t cap) {
  return [level, cap](const History& h) {
    double s = 0;
    for (double x : h) s += x;
    return s >= level || h.size() >= cap;
  };
}

inline IncrementGenerator iid_increments(const Model& m) {
  return [m](const History&, Rng& rng) { return sample(m, rng); };
}

inline ProcessSpec iid_process(const Model& m, std::size_t horizon, double eta, StoppingRule stop = {}) {
  ProcessSpec s{iid_increments(m), horizon, stop ? std::move(stop) : stop_at(horizon), eta, {}};
  if (auto atoms = discrete_atoms(m)) s.exact_conditional = [a = *atoms](const History&) { return a; };
  return s;
}

// Z_i = X_i - A^eta[X] stopped at the first crossing of level (or at horizon).
inline ProcessSpec wald_process(const Model& m, double eta, double level, std::size_t horizon,
                                const EvalBudget& budget = {}) {
  const double a = annealed_expectation(m, eta, budget).value;
  if (!std::isfinite(a)) throw Error(Errc::EtaOutOfRange, "annealed expectation is infinite at eta");
  return iid_process(Model::shifted(m, a), horizon, eta, stop_on_crossing(level, horizon));
}

namespace detail {

inline double exact_annealed(const std::vector<Atom>& atoms, double eta) {
  std::vector<double> lw;
  lw.reserve(atoms.size());
  for (const auto& a : atoms)
    if (a.prob > 0) lw.push_back(std::log(a.prob) + eta * a.value);
  return log_sum_exp(lw) / eta;
}

inline bool within(double margin, double se, double slack, double k) { return margin - k * se <= slack; }

struct SimulatedPath {
  History h;
  double sum = 0;
  double max_sum = 0;  // includes S_0 = 0
};

// Runs the path until the rule fires; false if it has not fired by the horizon.
inline bool run_stopped(const ProcessSpec& s, Rng& rng, SimulatedPath& p) {
  p.h.clear();
  p.sum = p.max_sum = 0;
  for (std::size_t t = 1; t <= s.horizon; ++t) {
    const double x = s.increment(p.h, rng);
    p.h.push_back(x);
    p.sum += x;
    p.max_sum = std::max(p.max_sum, p.sum);
    if (s.stop && s.stop(p.h)) return true;
  }
  return false;
}

inline void run_full(const ProcessSpec& s, Rng& rng, SimulatedPath& p) {
  p.h.clear();
  p.sum = p.max_sum = 0;
  for (std::size_t t = 1; t <= s.horizon; ++t) {
    const double x = s.increment(p.h, rng);
    p.h.push_back(x);
    p.sum += x;
    p.max_sum = std::max(p.max_sum, p.sum);
  }
}

// Estimate of E[e^{eta X_{k+1}} | h] from fresh conditional draws.
inline MeanAccumulator conditional_mgf(const ProcessSpec& s, const History& h, std::size_t draws, Rng& rng,
                                       bool& constant_draws, double& first) {
  MeanAccumulator acc;
  constant_draws = true;
  for (std::size_t d = 0; d < draws; ++d) {
    const double x = s.increment(h, rng);
    if (d == 0) first = x;
    constant_draws = constant_draws && x == first;
    acc.add(std::exp(s.eta * x));
  }
  return acc;
}

inline std::vector<std::size_t> check_times(std::size_t horizon, std::size_t max_times) {
  std::vector<std::size_t> ts;
  const std::size_t m = std::max<std::size_t>(1, std::min(max_times, horizon));
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t t = m == 1 ? 1 : 1 + (j * (horizon - 1)) / (m - 1);
    if (ts.empty() || ts.back() != t) ts.push_back(t);
  }
  return ts;
}

}  // namespace detail

struct ConditionalCheckConfig {
  std::size_t max_times = 16;  // checked times, evenly spread over 1..T
  VerifyConfig verify;
};

// A^eta[X_t | h] for one sampled history h of length t - 1; `coarse` rows
// condition on h with its last entry dropped.
struct ConditionalPoint {
  std::size_t path = 0;
  std::size_t t = 0;
  std::size_t history_length = 0;
  double margin = 0;
  double se = 0;
  double mgf_mean = 0;  // conditional mean of M_t / M_{t-1}
  double mgf_se = 0;
  EvalMethod method = EvalMethod::closed_form;
  bool measurable = false;  // increment determined by the history
  bool ok = false;
};

struct ConditionalReport {
  std::vector<ConditionalPoint> points;
  std::vector<ConditionalPoint> coarse;
  std::vector<ConditionalPoint> unconditional;  // path = 0, pooled over histories
  double worst_margin = -kInf;
  double worst_se = 0;
  bool conditional_ok = true;
  bool measurable_ok = true;
  bool tower_ok = true;
  bool unconditional_ok = true;
  bool supermartingale_ok = true;
  Verdict verdict = Verdict::holds;
  std::uint64_t seed = 0;

  bool all_ok() const { return conditional_ok && measurable_ok && tower_ok && unconditional_ok && supermartingale_ok; }
};

namespace detail {

struct ConditionalChunk {
  std::vector<ConditionalPoint> points, coarse;
  void merge(const ConditionalChunk& o) {
    points.insert(points.end(), o.points.begin(), o.points.end());
    coarse.insert(coarse.end(), o.coarse.begin(), o.coarse.end());
  }
};

inline void finish_point(ConditionalPoint& p, const MeanAccumulator& acc, double eta, double slack, double k) {
  p.mgf_mean = acc.mean();
  p.mgf_se = acc.standard_error();
  p.margin = std::log(p.mgf_mean) / eta;
  p.se = p.mgf_mean > 0 ? p.mgf_se / (p.mgf_mean * eta) : 0.0;
  p.ok = within(p.margin, p.se, slack, k);
}

}  // namespace detail

// Samples n_histories paths and checks A^eta[X_t | h] <= 0 along each, plus the
// structural consequences: measurable increments are <= 0, the pooled
// unconditional annealed value is <= 0, and the check survives coarser
// conditioning (last history entry redrawn).
inline ConditionalReport conditional_esi_check(const ProcessSpec& s, std::size_t n_histories,
                                               std::size_t n_conditional_draws, const EvalBudget& budget = {},
                                               const ConditionalCheckConfig& cfg = {}) {
  s.validate();
  if (n_histories == 0 || n_conditional_draws == 0)
    throw Error(Errc::InvalidArgument, "n_histories and n_conditional_draws must be positive");
  const auto times = detail::check_times(s.horizon, cfg.max_times);
  const double k = cfg.verify.k_sigma;
  const double exact_slack = cfg.verify.closed_form_slack, mc_slack = cfg.verify.monte_carlo_slack;

  auto chunks = run_chunked<detail::ConditionalChunk>(
      n_histories, budget.chunks, budget.seed, budget.threads, [&](std::size_t c, std::size_t count, Rng& rng) {
        detail::ConditionalChunk out;
        const std::size_t nc = std::max<std::size_t>(1, std::min(budget.chunks, n_histories));
        const std::size_t first = c * (n_histories / nc) + std::min(c, n_histories % nc);
        detail::SimulatedPath path;
        for (std::size_t i = 0; i < count; ++i) {
          detail::run_full(s, rng, path);
          for (std::size_t t : times) {
            const History h(path.h.begin(), path.h.begin() + static_cast<std::ptrdiff_t>(t - 1));
            ConditionalPoint p;
            p.path = first + i;
            p.t = t;
            p.history_length = t - 1;
            if (s.exact_conditional) {
              const auto atoms = s.exact_conditional(h);
              p.method = EvalMethod::closed_form;
              p.margin = detail::exact_annealed(atoms, s.eta);
              p.mgf_mean = std::exp(s.eta * p.margin);
              p.measurable = atoms.size() == 1;
              p.ok = detail::within(p.margin, 0, exact_slack, k);
            } else {
              p.method = EvalMethod::monte_carlo;
              double x0 = 0;
              const auto acc = detail::conditional_mgf(s, h, n_conditional_draws, rng, p.measurable, x0);
              detail::finish_point(p, acc, s.eta, mc_slack, k);
              if (p.measurable) {
                // A history-determined increment is its own annealed value.
                p.margin = x0;
                p.mgf_mean = std::exp(s.eta * x0);
                p.se = p.mgf_se = 0;
                p.ok = detail::within(p.margin, 0, mc_slack, k);
              }
            }
            out.points.push_back(p);
            if (t < 2) continue;
            // Coarser filtration: drop X_{t-1} and integrate it out.
            ConditionalPoint q = p;
            q.history_length = t - 2;
            q.measurable = false;
            History g(h.begin(), h.end() - 1);
            if (s.exact_conditional) {
              std::vector<double> lw;
              for (const auto& a : s.exact_conditional(g)) {
                if (a.prob <= 0) continue;
                g.push_back(a.value);
                lw.push_back(std::log(a.prob) + s.eta * detail::exact_annealed(s.exact_conditional(g), s.eta));
                g.pop_back();
              }
              q.margin = log_sum_exp(lw) / s.eta;
              q.mgf_mean = std::exp(s.eta * q.margin);
              q.ok = detail::within(q.margin, 0, exact_slack, k);
            } else {
              MeanAccumulator acc;
              for (std::size_t d = 0; d < n_conditional_draws; ++d) {
                g.push_back(s.increment(g, rng));
                acc.add(std::exp(s.eta * s.increment(g, rng)));
                g.pop_back();
              }
              detail::finish_point(q, acc, s.eta, mc_slack, k);
            }
            out.coarse.push_back(q);
          }
        }
        return out;
      });
  const auto all = merge_all(chunks);

  ConditionalReport r;
  r.seed = budget.seed;
  r.points = all.points;
  r.coarse = all.coarse;
  bool any_fail = false;
  for (const auto& p : r.points) {
    r.conditional_ok = r.conditional_ok && p.ok;
    if (p.measurable) r.measurable_ok = r.measurable_ok && p.margin <= exact_slack;
    const double slack = p.method == EvalMethod::closed_form ? exact_slack : mc_slack;
    any_fail = any_fail || p.margin - k * p.se > slack;
    if (p.margin + k * p.se > r.worst_margin + k * r.worst_se) {
      r.worst_margin = p.margin;
      r.worst_se = p.se;
    }
    // Supermartingale step: E[M_t / M_{t-1} | h] <= 1 within k SE.
    r.supermartingale_ok = r.supermartingale_ok && p.mgf_mean - k * p.mgf_se <= 1 + slack;
  }
  for (const auto& q : r.coarse) r.tower_ok = r.tower_ok && q.ok;

  // Pooled over histories the conditional MGFs estimate E[e^{eta X_t}].
  for (std::size_t t : times) {
    MeanAccumulator acc;
    bool exact = true;
    for (const auto& p : r.points)
      if (p.t == t) {
        acc.add(p.mgf_mean);
        exact = exact && p.method == EvalMethod::closed_form;
      }
    ConditionalPoint u;
    u.t = t;
    u.method = EvalMethod::monte_carlo;
    detail::finish_point(u, acc, s.eta, exact ? exact_slack : mc_slack, k);
    r.unconditional_ok = r.unconditional_ok && u.ok;
    r.unconditional.push_back(u);
  }

  if (any_fail)
    r.verdict = Verdict::fails;
  else if (r.conditional_ok)
    r.verdict = Verdict::holds;
  else
    r.verdict = Verdict::inconclusive;
  return r;
}

struct StoppedSumResult {
  double estimate = 0;  // E[e^{eta S_tau}]
  double se = 0;
  VerificationReport report;
  // estimate <= 1 + k SE. A martingale (no overshoot) makes the inequality
  // tight, where the strict verdict is inconclusive by construction.
  bool within_band = false;
  double mean_tau = 0;
  std::size_t max_tau = 0;
  double mean_sum = 0;  // E[S_tau]
  double mean_sum_se = 0;
};

namespace detail {

struct StoppedChunk {
  MeanAccumulator mgf, tau, sum;
  std::size_t max_tau = 0;
  bool never_fired = false;
  void merge(const StoppedChunk& o) {
    mgf.merge(o.mgf);
    tau.merge(o.tau);
    sum.merge(o.sum);
    max_tau = std::max(max_tau, o.max_tau);
    never_fired = never_fired || o.never_fired;
  }
};

}  // namespace detail

// Optional stopping: conditional ESI of the increments with tau <= T gives
// S_tau <=_eta 0. Simulates n_paths stopped sums.
inline StoppedSumResult stopped_sum_check(const ProcessSpec& s, std::size_t n_paths, const EvalBudget& budget = {},
                                          const VerifyConfig& cfg = {}) {
  s.validate();
  if (!s.stop) throw Error(Errc::StoppingRuleNeverFires, "stopping_rule: missing");
  if (n_paths == 0) throw Error(Errc::InvalidArgument, "n_paths must be positive");
  auto chunks = run_chunked<detail::StoppedChunk>(
      n_paths, budget.chunks, budget.seed, budget.threads, [&](std::size_t, std::size_t count, Rng& rng) {
        detail::StoppedChunk out;
        detail::SimulatedPath path;
        for (std::size_t i = 0; i < count; ++i) {
          if (!detail::run_stopped(s, rng, path)) {
            out.never_fired = true;
            break;
          }
          out.mgf.add(std::exp(s.eta * path.sum));
          out.tau.add(static_cast<double>(path.h.size()));
          out.sum.add(path.sum);
          out.max_tau = std::max(out.max_tau, path.h.size());
        }
        return out;
      });
  const auto all = merge_all(chunks);
  if (all.never_fired)
    throw Error(Errc::StoppingRuleNeverFires,
                "stopping_rule: did not fire by the horizon T = " + std::to_string(s.horizon));
  StoppedSumResult r;
  r.estimate = all.mgf.mean();
  r.se = all.mgf.standard_error();
  r.report = expectation_report(r.estimate, r.se, s.eta, EvalMethod::monte_carlo, all.mgf.n, budget.seed, cfg);
  r.within_band = r.estimate <= 1 + cfg.k_sigma * r.se + cfg.monte_carlo_slack;
  r.mean_tau = all.tau.mean();
  r.max_tau = all.max_tau;
  r.mean_sum = all.sum.mean();
  r.mean_sum_se = all.sum.standard_error();
  return r;
}

struct VilleLevel {
  double delta = 1;
  double threshold = 0;  // crossing of sup_t S_t at log(1/delta)/eta*
  double frequency = 0;
  double se = 0;
  bool ok = false;  // frequency <= delta + k SE
};

struct VilleResult {
  std::vector<VilleLevel> levels;
  EsiCertificate sup_cert;  // sup_{t<=T} S_t <=_eta c, c from the exponential tail
  std::size_t paths = 0;

  bool all_ok() const {
    for (const auto& l : levels)
      if (!l.ok) return false;
    return sup_cert.holds();
  }
};

namespace detail {

struct VilleChunk {
  std::vector<MeanAccumulator> hits;
  MeanAccumulator sup_mgf;
  void merge(const VilleChunk& o) {
    if (hits.empty()) hits.resize(o.hits.size());
    for (std::size_t i = 0; i < o.hits.size(); ++i) hits[i].merge(o.hits[i]);
    sup_mgf.merge(o.sup_mgf);
  }
};

}  // namespace detail

// Ville on the e-process prod_{s<=t} e^{eta* X_s} (eta* = spec.eta):
// P(sup_t S_t >= x) <= e^{-eta* x}, hence sup_t S_t <=_eta c for eta < eta*.
// Paths run to the horizon; the stopping rule is not used. The default
// certificate scale is eta*/2.
inline VilleResult ville_bound(const ProcessSpec& s, const std::vector<double>& deltas, std::size_t n_paths,
                               std::optional<double> cert_eta = std::nullopt, const EvalBudget& budget = {},
                               const VerifyConfig& cfg = {}) {
  s.validate();
  if (deltas.empty()) throw Error(Errc::EmptyInput, "deltas: empty");
  for (double d : deltas)
    if (!(d > 0 && d <= 1)) throw Error(Errc::InvalidArgument, "delta must lie in (0, 1]");
  if (n_paths == 0) throw Error(Errc::InvalidArgument, "n_paths must be positive");
  const double eta_star = s.eta;
  const double eta_c = cert_eta.value_or(eta_star / 2);

  VilleResult r;
  r.paths = n_paths;
  r.sup_cert = tail_to_esi({1.0, eta_star}, eta_c);
  r.sup_cert.lhs_label = "sup_{t<=" + std::to_string(s.horizon) + "} S_t";
  r.sup_cert.provenance.push_back("derived: ville maximal inequality at eta*=" + format_double(eta_star));
  const double c = r.sup_cert.rhs;

  std::vector<double> thresholds;
  for (double d : deltas) thresholds.push_back(-std::log(d) / eta_star);
  auto chunks = run_chunked<detail::VilleChunk>(
      n_paths, budget.chunks, budget.seed, budget.threads, [&](std::size_t, std::size_t count, Rng& rng) {
        detail::VilleChunk out;
        out.hits.resize(deltas.size());
        detail::SimulatedPath path;
        for (std::size_t i = 0; i < count; ++i) {
          detail::run_full(s, rng, path);
          for (std::size_t j = 0; j < deltas.size(); ++j) out.hits[j].add(path.max_sum >= thresholds[j] ? 1.0 : 0.0);
          out.sup_mgf.add(std::exp(eta_c * (path.max_sum - c)));
        }
        return out;
      });
  const auto all = merge_all(chunks);
  for (std::size_t j = 0; j < deltas.size(); ++j) {
    VilleLevel l;
    l.delta = deltas[j];
    l.threshold = thresholds[j];
    l.frequency = all.hits[j].mean();
    l.se = all.hits[j].standard_error();
    l.ok = l.frequency <= l.delta + cfg.k_sigma * l.se + cfg.monte_carlo_slack;
    r.levels.push_back(l);
  }
  r.sup_cert.evidence = expectation_report(all.sup_mgf.mean(), all.sup_mgf.standard_error(), eta_c,
                                           EvalMethod::monte_carlo, all.sup_mgf.n, budget.seed, cfg);
  return r;
}

inline VilleResult ville_bound(const ProcessSpec& s, double delta, std::size_t n_paths, const EvalBudget& budget = {},
                               const VerifyConfig& cfg = {}) {
  return ville_bound(s, std::vector<double>{delta}, n_paths, std::nullopt, budget, cfg);
}

// Stopping rule for a family run in parallel: sees the time and the per-member
// running sums.
using FamilyStoppingRule = std::function<bool(std::size_t t, const std::vector<double>& sums)>;

struct StoppedPacBayesResult {
  EsiCertificate cert;        // E_post[S_{f,tau} - tau A^eta[X_f]] <=_eta KL/eta (fixed posterior)
  VerificationReport report;  // simulation of the stopped statement under the posterior rule
  std::vector<double> member_annealed;
  double mean_tau = 0;
};

// Part 3 under optional stopping: each e^{eta (S_{f,t} - t A^eta[X_f])} is a
// martingale, so E_post[(1/tau) sum X_{f,i} - A^eta[X_f]] <=_{tau eta} KL/(tau eta).
// The certificate is stated at the fixed posterior; the simulation accepts any
// posterior rule evaluated on the stopped means.
inline StoppedPacBayesResult stopped_pacbayes(const PacBayesFamily& fam, const DiscreteMeasure& prior,
                                              const DiscreteMeasure& posterior, const PosteriorRule& rule, double eta,
                                              std::size_t horizon, const FamilyStoppingRule& stop,
                                              const EvalBudget& budget = {}, const VerifyConfig& cfg = {}) {
  if (horizon == 0) throw Error(Errc::HorizonZero, "horizon: must be at least 1");
  if (!stop) throw Error(Errc::StoppingRuleNeverFires, "stopping_rule: missing");
  StoppedPacBayesResult r;
  auto base = pacbayes_combine(3, fam, prior, posterior, eta, 1, nullptr, budget);
  r.member_annealed = base.bound.member_annealed;
  r.cert = base.cert;
  r.cert.lhs_label = "E_post[S_{f,tau} - tau A^eta[X_f]]";
  r.cert.rhs = 0;
  r.cert.rhs_label = "0";
  r.cert.provenance.push_back("derived: optional stopping (tau <= " + std::to_string(horizon) + ")");
  const auto& a = r.member_annealed;

  struct Chunk {
    MeanAccumulator mgf, tau;
    bool never_fired = false;
    void merge(const Chunk& o) {
      mgf.merge(o.mgf);
      tau.merge(o.tau);
      never_fired = never_fired || o.never_fired;
    }
  };
  auto chunks = run_chunked<Chunk>(
      budget.samples, budget.chunks, budget.seed, budget.threads, [&](std::size_t, std::size_t count, Rng& rng) {
        Chunk out;
        std::vector<double> draw, sums(fam.size()), means(fam.size());
        for (std::size_t i = 0; i < count; ++i) {
          std::fill(sums.begin(), sums.end(), 0.0);
          std::size_t t = 0;
          bool fired = false;
          while (t < horizon && !fired) {
            fam.draw(rng, draw);
            ++t;
            for (std::size_t f = 0; f < fam.size(); ++f) sums[f] += draw[f];
            fired = stop(t, sums);
          }
          if (!fired) {
            out.never_fired = true;
            break;
          }
          const double tt = static_cast<double>(t);
          for (std::size_t f = 0; f < fam.size(); ++f) means[f] = sums[f] / tt;
          const DiscreteMeasure q = rule(means);
          double lhs = 0;
          for (std::size_t f = 0; f < fam.size(); ++f)
            if (q.weights[f] > 0) lhs += q.weights[f] * (sums[f] - tt * a[f]);
          out.mgf.add(std::exp(eta * lhs - kl_discrete(q, prior)));
          out.tau.add(tt);
        }
        return out;
      });
  const auto all = merge_all(chunks);
  if (all.never_fired)
    throw Error(Errc::StoppingRuleNeverFires, "stopping_rule: did not fire by the horizon T = " + std::to_string(horizon));
  r.report = expectation_report(all.mgf.mean(), all.mgf.standard_error(), eta, EvalMethod::monte_carlo, all.mgf.n,
                                budget.seed, cfg);
  r.cert.evidence = r.report;
  r.mean_tau = all.tau.mean();
  return r;
}

}  // namespace esi
