#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "esi/measure.hpp"
#include "esi/scale.hpp"
#include "esi/support.hpp"
#include "esi/verify.hpp"

namespace esi {

// Probability mass function over family members, indexed by member position.
struct DiscreteMeasure {
  std::vector<double> weights;

  static DiscreteMeasure uniform(std::size_t m) {
    if (m == 0) throw Error(Errc::EmptyInput, "measure over zero members");
    return {std::vector<double>(m, 1.0 / static_cast<double>(m))};
  }
  static DiscreteMeasure degenerate(std::size_t m, std::size_t at) {
    if (at >= m) throw Error(Errc::InvalidArgument, "degenerate point outside the family");
    std::vector<double> w(m, 0.0);
    w[at] = 1.0;
    return {w};
  }
  std::size_t size() const { return weights.size(); }
  void validate() const {
    if (weights.empty()) throw Error(Errc::EmptyInput, "weights: empty");
    double s = 0;
    for (double w : weights) {
      if (!(w >= 0) || !std::isfinite(w)) throw Error(Errc::InvalidArgument, "weights must be nonnegative");
      s += w;
    }
    if (std::abs(s - 1) > 1e-12) throw Error(Errc::InvalidArgument, "weights must sum to 1");
  }
};

inline double kl_discrete(const DiscreteMeasure& posterior, const DiscreteMeasure& prior) {
  posterior.validate();
  prior.validate();
  if (posterior.size() != prior.size()) throw Error(Errc::InvalidArgument, "posterior and prior sizes differ");
  double s = 0;
  for (std::size_t i = 0; i < prior.size(); ++i) {
    const double q = posterior.weights[i], p = prior.weights[i];
    if (q == 0) continue;
    if (p == 0) throw Error(Errc::SupportViolation, "posterior puts mass outside the prior support");
    s += q * std::log(q / p);
  }
  return std::max(s, 0.0);
}

// KL between Bernoulli(q) and Bernoulli(p).
inline double kl_bernoulli(double q, double p) {
  if (!(q >= 0 && q <= 1 && p >= 0 && p <= 1)) throw Error(Errc::InvalidArgument, "Bernoulli means lie in [0,1]");
  double r = 0;
  if (q > 0) r += p == 0 ? kInf : q * std::log(q / p);
  if (q < 1) r += p == 1 ? kInf : (1 - q) * std::log((1 - q) / (1 - p));
  return std::max(r, 0.0);
}

// X_f = g_f(Z): the members' marginals plus, optionally, a sampler drawing
// all members at one Z. Without a sampler members are drawn independently.
struct PacBayesFamily {
  std::vector<Model> members;
  std::function<void(Rng&, std::vector<double>&)> joint;

  std::size_t size() const { return members.size(); }
  void draw(Rng& rng, std::vector<double>& out) const {
    out.resize(members.size());
    if (joint) {
      joint(rng, out);
      return;
    }
    for (std::size_t f = 0; f < members.size(); ++f) out[f] = sample(members[f], rng);
  }
};

struct PacBayesBound {
  int part = 2;
  double eta = 1;  // scale of the composed statement, n * eta
  std::size_t n_copies = 1;
  double kl = 0;
  std::optional<double> annealed_term;
  std::vector<double> member_annealed;  // A^eta[X_f] (part 3) or empty
  double bound_value = 0;
};

struct PacBayesResult {
  PacBayesBound bound;
  EsiCertificate cert;
};

namespace detail {

inline void check_measures(const PacBayesFamily& fam, const DiscreteMeasure& prior, const DiscreteMeasure& post) {
  if (fam.size() == 0) throw Error(Errc::EmptyInput, "members: empty");
  if (prior.size() != fam.size() || post.size() != fam.size())
    throw Error(Errc::InvalidArgument, "measures must have one weight per member");
}

// A^{n eta} over (Z^n, f) ~ P (x) prior of the n-sample mean: (1/(n eta)) log sum pi_f (E e^{eta X_f})^n.
inline double mixture_annealed(const std::vector<double>& annealed, const DiscreteMeasure& prior, double eta,
                               std::size_t n) {
  const double ne = eta * static_cast<double>(n);
  std::vector<double> terms;
  for (std::size_t f = 0; f < annealed.size(); ++f)
    if (prior.weights[f] > 0) terms.push_back(std::log(prior.weights[f]) + ne * annealed[f]);
  return log_sum_exp(terms) / ne;
}

inline void require_member_certs(const std::vector<EsiCertificate>* certs, std::size_t m, double eta) {
  if (!certs || certs->size() != m) throw Error(Errc::MissingCertificates, "part 2 needs one certificate per member");
  for (const auto& c : *certs) {
    if (!c.holds() || !c.scale.is_constant() || c.scale.eta() < eta || c.rhs != 0 || !c.offset.is_zero())
      throw Error(Errc::MissingCertificates, "part 2 needs X_f <=_eta 0 for every member");
  }
}

// Per-member offset a_f subtracted inside the posterior expectation.
inline std::vector<double> part_offsets(int part, const std::vector<double>& annealed, const DiscreteMeasure& prior,
                                        double eta, std::size_t n) {
  switch (part) {
    case 1: return std::vector<double>(annealed.size(), mixture_annealed(annealed, prior, eta, n));
    case 2: return std::vector<double>(annealed.size(), 0.0);
    case 3: return annealed;
  }
  throw Error(Errc::InvalidArgument, "part must be 1, 2 or 3");
}

inline std::vector<double> member_annealed(const PacBayesFamily& fam, double eta, const EvalBudget& budget) {
  std::vector<double> a;
  for (const auto& m : fam.members) a.push_back(annealed_expectation(m, eta, budget).value);
  return a;
}

}  // namespace detail

// E_post[mean_n(X_f)] - a <=_{n eta} KL/(n eta), where a is the prior-mixture
// annealed term (part 1), 0 given X_f <=_eta 0 (part 2) or E_post[A^eta[X_f]] (part 3).
inline PacBayesResult pacbayes_combine(int part, const PacBayesFamily& fam, const DiscreteMeasure& prior,
                                       const DiscreteMeasure& posterior, double eta, std::size_t n_copies = 1,
                                       const std::vector<EsiCertificate>* certs = nullptr,
                                       const EvalBudget& budget = {}) {
  if (part < 1 || part > 3) throw Error(Errc::InvalidArgument, "part must be 1, 2 or 3");
  if (!(eta > 0) || !std::isfinite(eta)) throw Error(Errc::NonpositiveEta, "eta must be positive and finite");
  if (n_copies == 0) throw Error(Errc::InvalidArgument, "n_copies must be at least 1");
  detail::check_measures(fam, prior, posterior);
  PacBayesResult r;
  auto& b = r.bound;
  b.part = part;
  b.n_copies = n_copies;
  b.eta = eta * static_cast<double>(n_copies);
  b.kl = kl_discrete(posterior, prior);
  double annealed = 0;
  if (part == 2) {
    detail::require_member_certs(certs, fam.size(), eta);
  } else {
    const auto a = detail::member_annealed(fam, eta, budget);
    if (part == 1) {
      annealed = detail::mixture_annealed(a, prior, eta, n_copies);
    } else {
      b.member_annealed = a;
      for (std::size_t f = 0; f < a.size(); ++f)
        if (posterior.weights[f] > 0) annealed += posterior.weights[f] * a[f];
    }
    b.annealed_term = annealed;
  }
  b.bound_value = annealed + b.kl / b.eta;

  auto& c = r.cert;
  c.scale = ScaleFunction::constant(b.eta);
  c.rhs = annealed;
  c.offset = RhsOffset::over_eta(b.kl);
  c.lhs_label = n_copies == 1 ? "E_post[X_f]" : "E_post[mean" + std::to_string(n_copies) + "(X_f)]";
  c.rhs_label = part == 1 ? "A_prior-mixture" : part == 3 ? "E_post[A^eta[X_f]]" : "0";
  if (certs)
    for (const auto& in : *certs)
      for (const auto& p : in.provenance) c.provenance.push_back(p);
  c.provenance.push_back("derived: pacbayes part " + std::to_string(part) + " (KL=" + format_double(b.kl) +
                         ", n=" + std::to_string(n_copies) + ") -> " + c.scale.describe());
  return r;
}

// The posterior as a function of the per-member sample means.
using PosteriorRule = std::function<DiscreteMeasure(const std::vector<double>& member_means)>;

inline PosteriorRule fixed_posterior(DiscreteMeasure q) {
  return [q = std::move(q)](const std::vector<double>&) { return q; };
}

// q_f proportional to prior_f exp(scale * (means_f - offsets_f)).
inline DiscreteMeasure gibbs_posterior(const DiscreteMeasure& prior, const std::vector<double>& means,
                                       const std::vector<double>& offsets, double scale) {
  std::vector<double> lw(prior.size(), -kInf);
  for (std::size_t f = 0; f < prior.size(); ++f)
    if (prior.weights[f] > 0) lw[f] = std::log(prior.weights[f]) + scale * (means[f] - offsets[f]);
  const double z = log_sum_exp(lw);
  DiscreteMeasure q{std::vector<double>(prior.size())};
  double s = 0;
  for (std::size_t f = 0; f < prior.size(); ++f) s += q.weights[f] = std::exp(lw[f] - z);
  for (double& w : q.weights) w /= s;
  return q;
}

// Simulates E[exp(n eta (E_post[mean_n(X_f) - a_f]) - KL(post || prior))] over
// replications of (Z_1..Z_n); the composed statement claims it is at most 1.
inline VerificationReport pacbayes_verify(int part, const PacBayesFamily& fam, const DiscreteMeasure& prior,
                                          const PosteriorRule& rule, double eta, std::size_t n_copies,
                                          const EvalBudget& budget = {}, const VerifyConfig& cfg = {}) {
  if (!(eta > 0)) throw Error(Errc::NonpositiveEta, "eta must be positive");
  if (n_copies == 0) throw Error(Errc::InvalidArgument, "n_copies must be at least 1");
  detail::check_measures(fam, prior, prior);
  const auto annealed = part == 2 ? std::vector<double>(fam.size(), 0.0) : detail::member_annealed(fam, eta, budget);
  const auto offsets = detail::part_offsets(part, annealed, prior, eta, n_copies);
  const double ne = eta * static_cast<double>(n_copies);
  auto parts = run_chunked<MeanAccumulator>(
      budget.samples, budget.chunks, budget.seed, budget.threads, [&](std::size_t, std::size_t count, Rng& rng) {
        MeanAccumulator acc;
        std::vector<double> draw, means(fam.size());
        for (std::size_t r = 0; r < count; ++r) {
          std::fill(means.begin(), means.end(), 0.0);
          for (std::size_t i = 0; i < n_copies; ++i) {
            fam.draw(rng, draw);
            for (std::size_t f = 0; f < fam.size(); ++f) means[f] += draw[f];
          }
          for (double& m : means) m /= static_cast<double>(n_copies);
          const DiscreteMeasure q = rule(means);
          double lhs = 0;
          for (std::size_t f = 0; f < fam.size(); ++f)
            if (q.weights[f] > 0) lhs += q.weights[f] * (means[f] - offsets[f]);
          acc.add(std::exp(ne * lhs - kl_discrete(q, prior)));
        }
        return acc;
      });
  const auto acc = merge_all(parts);
  return expectation_report(acc.mean(), acc.standard_error(), ne, EvalMethod::monte_carlo, acc.n, budget.seed, cfg);
}

struct ZhangResult {
  PacBayesResult result;
  std::string reading;
};

// Part 3 on n iid copies: E_post[mean_n(X_f) - A^eta[X_f]] <=_{n eta} KL/(n eta).
inline ZhangResult zhang_bound(const PacBayesFamily& fam, const DiscreteMeasure& prior, const DiscreteMeasure& posterior,
                               double eta, std::size_t n, const EvalBudget& budget = {}) {
  ZhangResult z{pacbayes_combine(3, fam, prior, posterior, eta, n, nullptr, budget), {}};
  z.reading =
      "with X_f = -L_f (minus excess loss): -E_post[A^eta[-L_f]] <= E_post[empirical excess loss] + KL/(n eta) = "
      "E_post[empirical excess loss] + " +
      format_double(z.result.bound.kl / z.result.bound.eta) + " in ESI at scale " + format_double(z.result.bound.eta);
  z.result.cert.provenance.push_back("derived: zhang (n=" + std::to_string(n) + ")");
  return z;
}

struct BeginBound {
  double bound;          // bound on KL(E_post[empirical loss] || E_post[true loss])
  double annealed_term;  // A^eta over (Z^n, f) ~ P (x) prior of n KL(empirical, true)
  double annealed_se;
  double kl;
  std::size_t samples;
};

// Jensen on the jointly convex KL, then part 1 applied to n KL(mean_n(l_f), E l_f):
// bound = (A^eta[n KL] + KL(post||prior)/eta) / n. The annealed term is
// Monte Carlo, stratified by member.
inline BeginBound begin_bound(const std::vector<Model>& losses, const DiscreteMeasure& prior,
                              const DiscreteMeasure& posterior, double eta, std::size_t n, const EvalBudget& budget = {}) {
  if (losses.empty()) throw Error(Errc::EmptyInput, "members: empty");
  if (!(eta > 0)) throw Error(Errc::NonpositiveEta, "eta must be positive");
  if (n == 0) throw Error(Errc::InvalidArgument, "n must be at least 1");
  if (prior.size() != losses.size() || posterior.size() != losses.size())
    throw Error(Errc::InvalidArgument, "measures must have one weight per member");
  for (const auto& l : losses) {
    const Support s = support(l);
    if (s.lo < 0 || s.hi > 1) throw Error(Errc::LossOutOfRange, "losses must lie in [0,1]");
  }
  const double kl = kl_discrete(posterior, prior);
  const std::size_t per = std::max<std::size_t>(1, budget.samples / losses.size());
  const double nn = static_cast<double>(n);
  double total = 0, var = 0;
  for (std::size_t f = 0; f < losses.size(); ++f) {
    if (prior.weights[f] == 0) continue;
    const double p = moments(losses[f]).mean;
    auto parts = run_chunked<MeanAccumulator>(
        per, budget.chunks, splitmix64(budget.seed ^ (0x9E3779B97F4A7C15ULL * (f + 1))), budget.threads,
        [&](std::size_t, std::size_t count, Rng& rng) {
          MeanAccumulator acc;
          for (std::size_t r = 0; r < count; ++r) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += sample(losses[f], rng);
            acc.add(std::exp(eta * nn * kl_bernoulli(std::clamp(s / nn, 0.0, 1.0), p)));
          }
          return acc;
        });
    const auto acc = merge_all(parts);
    total += prior.weights[f] * acc.mean();
    var += prior.weights[f] * prior.weights[f] * acc.variance() / static_cast<double>(acc.n);
  }
  const double annealed = std::log(total) / eta;
  return {(annealed + kl / eta) / nn, annealed, std::sqrt(var) / (total * eta), kl, per * losses.size()};
}

}  // namespace esi
