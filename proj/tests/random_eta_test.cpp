#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "esi/random_eta.hpp"
#include "oracle.hpp"

using namespace esi;

namespace {

template <class F>
void expect_error(Errc code, F&& f) {
  try {
    f();
    FAIL() << "no error thrown";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// W_eta1 = C1 < 0, W_eta2 = C2 > 0, eta1 = -1/C1, eta2 = 1/C2, P(eta-hat = eta1) = p1.
RandomEtaScenario counterexample(double C1, double C2, double p1) {
  return finite_scenario({-1 / C1, 1 / C2}, {{p1, 0}, {1 - p1, 1}}, {{C1, C2}, {C1, C2}});
}

// eta-hat = 1 when G < 0, else 1/2; X_eta = G - eta/2, Y = 0.
RandomEtaScenario gaussian_selector() {
  RandomEtaScenario s;
  s.grid = {0.5, 1.0};
  s.generator = [](Rng& rng, RandomEtaDraw& d) {
    const double g = standard_normal(rng);
    d.index = g < 0 ? 1 : 0;
    d.x = {g - 0.25, g - 0.5};
    d.y = {0.0, 0.0};
  };
  s.selector = "eta = 1 if G < 0 else 1/2";
  return s;
}

// The same scenario drawn by simulation instead of enumeration.
RandomEtaScenario as_simulation(RandomEtaScenario s) {
  auto outs = *s.outcomes;
  s.outcomes.reset();
  s.generator = [outs](Rng& rng, RandomEtaDraw& d) {
    const double u = uniform01(rng);
    double c = 0;
    for (const auto& o : outs) {
      c += o.prob;
      if (u < c) {
        d = o.draw;
        return;
      }
    }
    d = outs.back().draw;
  };
  return s;
}

}  // namespace

TEST(RandomEta, CounterexampleClosedForm) {
  for (double C2 : {10.0, 100.0, 1000.0}) {
    const auto s = counterexample(-1, C2, 0.75);
    const auto rep = verify_random_eta(s);
    EXPECT_EQ(rep.method, EvalMethod::closed_form);
    EXPECT_NEAR(std::exp(rep.worst_margin), 0.75 * std::exp(-1.0) + 0.25 * std::exp(1.0), 1e-12);
    EXPECT_EQ(rep.verdict, Verdict::holds);
    const auto b = random_eta_bounds(s, 0.05);
    EXPECT_NEAR(b.mean_x, -0.75 + 0.25 * C2, 1e-12 * C2);
    EXPECT_NEAR(b.mean_inv_eta, 0.75 + 0.25 * C2, 1e-12 * C2);
    EXPECT_TRUE(b.expectation_ok);
    EXPECT_FALSE(b.holds_without_correction);
    EXPECT_EQ(b.partial_converse.verdict, Verdict::holds);
  }
  EXPECT_NEAR(0.75 * std::exp(-1.0) + 0.25 * std::exp(1.0), 0.9555, 1e-4);
}

TEST(RandomEta, UnverifiedScenarioRejected) {
  const auto s = counterexample(-1, 10, 0.25);
  EXPECT_EQ(verify_random_eta(s).verdict, Verdict::fails);
  expect_error(Errc::UnverifiedScenario, [&] { random_eta_bounds(s, 0.1); });
}

TEST(RandomEta, EmptyGrid) {
  RandomEtaScenario s;
  s.generator = [](Rng&, RandomEtaDraw&) {};
  expect_error(Errc::EmptyGrid, [&] { verify_random_eta(s); });
}

TEST(RandomEta, TwoStateEnumerationAgreesWithSimulation) {
  const auto s = finite_scenario({0.5, 2.0}, {{0.4, 0}, {0.35, 1}, {0.25, 1}}, {{-1, 0.2}, {0.3, -0.6}, {2, -1.5}});
  const auto exact = verify_random_eta(s);
  // 0.4 e^{-0.5} + 0.35 e^{-1.2} + 0.25 e^{-3}
  const double ref = 0.4 * std::exp(-0.5) + 0.35 * std::exp(-1.2) + 0.25 * std::exp(-3.0);
  EXPECT_NEAR(std::exp(exact.worst_margin), ref, 1e-15);
  EvalBudget b;
  b.seed = 9;
  const auto mc = verify_random_eta(as_simulation(s), b);
  EXPECT_EQ(mc.method, EvalMethod::monte_carlo);
  const double m = std::exp(mc.worst_margin), se = mc.margin_se * m;
  EXPECT_LE(std::abs(m - ref), 3 * se);
}

TEST(RandomEtaProperty, ConstantSelectorMatchesFixedEta) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> uv(-2, 1), up(0.05, 1);
  for (int k = 0; k < 50; ++k) {
    std::vector<Atom> atoms;
    double tot = 0;
    for (int j = 0; j < 3; ++j) {
      atoms.push_back({uv(rng), up(rng)});
      tot += atoms.back().prob;
    }
    std::vector<std::pair<double, std::size_t>> pi;
    std::vector<std::vector<double>> w;
    for (auto& a : atoms) {
      a.prob /= tot;
      pi.push_back({a.prob, 0});
      w.push_back({a.value});
    }
    const double eta = 0.2 + 0.05 * k;
    const auto s = finite_scenario({eta}, pi, w);
    const auto r = verify_random_eta(s);
    const auto v = verify_difference(Model::finite_discrete(atoms), ScaleFunction::constant(eta));
    EXPECT_NEAR(r.worst_margin, eta * v.worst_margin, 1e-12);
    EXPECT_EQ(r.verdict, v.verdict);
  }
  // Simulated constant selector against the Gaussian closed form.
  RandomEtaScenario g;
  g.grid = {0.5};
  g.generator = [](Rng& r, RandomEtaDraw& d) {
    d.index = 0;
    d.x = {standard_normal(r) - 0.4};
    d.y = {0.0};
  };
  EvalBudget b;
  b.seed = 3;
  const auto rep = verify_random_eta(g, b);
  const double exact = std::exp(0.5 * (-0.4 + 0.25));
  const double m = std::exp(rep.worst_margin);
  EXPECT_LE(std::abs(m - exact), 3 * rep.margin_se * m);
}

TEST(RandomEtaProperty, ExpectationCheckNeverFailsWhenVerified) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> uw(-4, 3), ue(0.05, 3), up(0.05, 1);
  int verified = 0;
  for (int k = 0; k < 400; ++k) {
    const std::size_t G = 2 + k % 3, m = 2 + k % 4;
    std::vector<double> grid;
    for (std::size_t g = 0; g < G; ++g) grid.push_back(ue(rng));
    std::vector<std::pair<double, std::size_t>> pi;
    std::vector<std::vector<double>> w;
    double tot = 0;
    for (std::size_t i = 0; i < m; ++i) {
      pi.push_back({up(rng), static_cast<std::size_t>(rng() % G)});
      tot += pi.back().first;
      std::vector<double> wi;
      for (std::size_t g = 0; g < G; ++g) wi.push_back(uw(rng));
      w.push_back(wi);
    }
    double acc = 0;
    for (std::size_t i = 0; i + 1 < m; ++i) acc += pi[i].first /= tot;
    pi.back().first = 1 - acc;
    const auto s = finite_scenario(grid, pi, w);
    if (verify_random_eta(s).verdict != Verdict::holds) continue;
    ++verified;
    for (double d : {0.5, 0.1, 1e-3}) {
      const auto b = random_eta_bounds(s, d);
      EXPECT_TRUE(b.expectation_ok) << k;
      EXPECT_TRUE(b.hp_ok) << k;
      EXPECT_NE(b.partial_converse.verdict, Verdict::fails) << k;
    }
  }
  EXPECT_GT(verified, 50);
}

TEST(RandomEta, GaussianSelectorFrequency) {
  const auto s = gaussian_selector();
  EvalBudget b;
  b.samples = 100000;
  b.seed = 21;
  const auto rep = verify_random_eta(s, b);
  // E = Phi(-1) + Phi(1/2): each branch integrates e^{aG - a^2/2} over its half line.
  const double exact = 0.5 * std::erfc(1 / std::sqrt(2.0)) + 0.5 * std::erfc(-0.5 / std::sqrt(2.0));
  const double m = std::exp(rep.worst_margin);
  EXPECT_LE(std::abs(m - exact), 3 * rep.margin_se * m);
  EXPECT_EQ(rep.verdict, Verdict::holds);
  const auto bd = random_eta_bounds(s, 0.5, b);
  EXPECT_TRUE(bd.hp_ok);
  EXPECT_GE(bd.hp_frequency, 0.5);
  EXPECT_TRUE(bd.expectation_ok);
}

TEST(RandomEtaSum, SingleGridPoint) {
  RandomEtaSumSpec sp;
  sp.n = 5;
  sp.grid = {0.8};
  sp.draw_z = [](Rng& r) { return standard_normal(r); };
  sp.x = [](std::size_t i, std::size_t, const std::vector<double>& z) { return z[i] - 0.4; };
  sp.selector = [](const std::vector<double>&) { return std::size_t{0}; };
  EvalBudget b;
  b.samples = 20000;
  const auto r = random_eta_sum(sp, b);
  EXPECT_DOUBLE_EQ(r.rhs, 1 / 0.8);
  EXPECT_EQ(r.rhs_se, 0.0);
  EXPECT_TRUE(r.holds);
  EXPECT_NEAR(r.lhs, -2.0, 4 * r.lhs_se);
  EXPECT_EQ(r.slot_checks, 5u * 8);
}

TEST(RandomEtaSum, DataDrivenSelector) {
  RandomEtaSumSpec sp;
  sp.n = 20;
  sp.grid = {0.5, 1.0};
  sp.draw_z = [](Rng& r) { return standard_normal(r); };
  sp.x = [&](std::size_t i, std::size_t k, const std::vector<double>& z) { return z[i] - sp.grid[k] / 2; };
  // Pick the larger eta exactly when the sample looks favourable.
  sp.selector = [](const std::vector<double>& z) {
    double s = 0;
    for (double v : z) s += v;
    return s > 0 ? std::size_t{1} : std::size_t{0};
  };
  EvalBudget b;
  b.samples = 50000;
  b.seed = 6;
  const auto r = random_eta_sum(sp, b);
  EXPECT_TRUE(r.holds);
  EXPECT_LT(r.lhs, r.rhs);
  EXPECT_LE(r.worst_slot_margin, 3 * 0.05);
}

TEST(RandomEtaSum, StrictModeRejectsBrokenAssumption) {
  RandomEtaSumSpec sp;
  sp.n = 3;
  sp.grid = {1.0};
  sp.draw_z = [](Rng& r) { return standard_normal(r); };
  sp.x = [](std::size_t i, std::size_t, const std::vector<double>& z) { return z[i]; };
  sp.selector = [](const std::vector<double>&) { return std::size_t{0}; };
  EvalBudget b;
  b.samples = 1000;
  expect_error(Errc::AssumptionUnverified, [&] { random_eta_sum(sp, b); });
  SumCheckConfig permissive;
  permissive.strict = false;
  EXPECT_NO_THROW(random_eta_sum(sp, b, permissive));
}

TEST(RandomEtaSum, OneTermMatchesBoundsPlusLogG) {
  // n = 1: E[X_etahat] <= E[(log|G| + 1)/etahat], the expectation bound plus a log|G| penalty.
  RandomEtaSumSpec sp;
  sp.n = 1;
  sp.grid = {0.5, 1.0};
  sp.draw_z = [](Rng& r) { return standard_normal(r); };
  sp.x = [&](std::size_t, std::size_t k, const std::vector<double>& z) { return z[0] - sp.grid[k] / 2; };
  sp.selector = [](const std::vector<double>& z) { return z[0] < 0 ? std::size_t{1} : std::size_t{0}; };
  EvalBudget b;
  b.samples = 100000;
  b.seed = 21;
  const auto r = random_eta_sum(sp, b);
  const auto bd = random_eta_bounds(gaussian_selector(), 0.5, b);
  EXPECT_TRUE(r.holds);
  EXPECT_NEAR(r.rhs, (std::log(2.0) + 1) * bd.mean_inv_eta, 4 * r.rhs_se);
}

TEST(PacBayesOnEta, Penalties) {
  const auto u8 = DiscreteMeasure::uniform(8);
  EXPECT_EQ(eta_penalty(u8, u8, 3), 0.0);
  EXPECT_NEAR(eta_penalty(u8, DiscreteMeasure::degenerate(8, 2), 2), std::log(8.0), 1e-15);
  expect_error(Errc::SupportViolation,
               [] { eta_penalty(DiscreteMeasure{{1.0, 0.0}}, DiscreteMeasure{{0.0, 1.0}}, 1); });
}

TEST(PacBayesOnEta, SingleGridPointIsIdentity) {
  EtaPosteriorScenario s;
  s.grid = {0.6};
  s.prior = DiscreteMeasure::uniform(1);
  const Model x = Model::gaussian(-0.3, 1);
  s.certs = {verify_esi(x, std::nullopt, ScaleFunction::constant(0.6))};
  s.generator = [&](Rng& r, std::vector<double>& v, DiscreteMeasure& q) {
    v = {sample(x, r)};
    q = DiscreteMeasure::uniform(1);
  };
  EvalBudget b;
  b.samples = 20000;
  const auto r = pacbayes_on_eta(s, 0.1, b);
  ASSERT_TRUE(r.fixed.has_value());
  EXPECT_EQ(r.fixed->scale, s.certs[0].scale);
  EXPECT_EQ(r.fixed->rhs, s.certs[0].rhs);
  EXPECT_TRUE(r.fixed->offset.is_zero());
  EXPECT_EQ(r.fixed->provenance, s.certs[0].provenance);
  EXPECT_NE(r.evidence.verdict, Verdict::fails);
}

TEST(PacBayesOnEta, TwoEtaGaussian) {
  // X_eta = G - eta/2 shares G across eta; the posterior picks eta by the sign of G.
  EtaPosteriorScenario s;
  s.grid = {0.5, 1.0};
  s.prior = DiscreteMeasure::uniform(2);
  for (double e : s.grid) s.certs.push_back(verify_esi(Model::gaussian(-e / 2, 1), std::nullopt, ScaleFunction::constant(e)));
  s.generator = [](Rng& r, std::vector<double>& v, DiscreteMeasure& q) {
    const double g = standard_normal(r);
    v = {g - 0.25, g - 0.5};
    q = DiscreteMeasure::degenerate(2, g < 0 ? 1 : 0);
  };
  EvalBudget b;
  b.samples = 100000;
  b.seed = 13;
  const auto r = pacbayes_on_eta(s, 0.05, b);
  // Fubini: E[pi0(etahat) e^{etahat X}] = (Phi(-1) + Phi(1/2)) / 2.
  const double exact = 0.5 * (0.5 * std::erfc(1 / std::sqrt(2.0)) + 0.5 * std::erfc(-0.5 / std::sqrt(2.0)));
  const double m = std::exp(r.evidence.worst_margin);
  EXPECT_LE(std::abs(m - exact), 3 * r.evidence.margin_se * m);
  EXPECT_EQ(r.evidence.verdict, Verdict::holds);
  EXPECT_TRUE(r.hp_ok);
  EXPECT_TRUE(r.expectation_ok);
  EXPECT_FALSE(r.fixed.has_value());

  // Posterior = prior is tight: the expectation is exactly 1.
  s.generator = [](Rng& r2, std::vector<double>& v, DiscreteMeasure& q) {
    const double g = standard_normal(r2);
    v = {g - 0.25, g - 0.5};
    q = DiscreteMeasure::uniform(2);
  };
  const auto t = pacbayes_on_eta(s, 0.05, b);
  EXPECT_NE(t.evidence.verdict, Verdict::fails);
  EXPECT_LE(std::abs(t.evidence.worst_margin), 3 * t.evidence.margin_se);
}

TEST(PacBayesOnEta, MissingCertificates) {
  EtaPosteriorScenario s;
  s.grid = {0.5, 1.0};
  s.prior = DiscreteMeasure::uniform(2);
  s.certs = {verify_esi(Model::gaussian(-0.25, 1), std::nullopt, ScaleFunction::constant(0.5))};
  expect_error(Errc::MissingCertificates, [&] { pacbayes_on_eta(s, 0.1); });
}
