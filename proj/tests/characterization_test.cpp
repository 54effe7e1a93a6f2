#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "esi/characterization.hpp"
#include "oracle.hpp"

using namespace esi;

namespace {

// Largest eta with A^eta[X] <= target, by bisection on the log axis.
double largest_eta(const Model& x, double target, double hi) {
  double lo = 1e-12;
  for (int i = 0; i < 200; ++i) {
    const double mid = std::sqrt(lo * hi);
    if (annealed_expectation(x, mid).value <= target)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

// A tabulated ESI function for a single model, built with a safety factor of 4 on eps.
ScaleFunction tabulated_for(const Model& x, double eta_hi) {
  std::vector<std::pair<double, double>> pts = {{0.0, 0.0}};
  for (double e : log_spaced(1e-7, 1e3, 121)) pts.push_back({e, largest_eta(x, e / 4, eta_hi)});
  for (std::size_t i = 2; i < pts.size(); ++i) pts[i].second = std::max(pts[i].second, pts[i - 1].second);
  return ScaleFunction::tabulated(pts);
}

}  // namespace

TEST(FitSubgamma, DirectSubstitution) {
  auto p = fit_subgamma_from_strong(1.0, 1.0, 0.0);
  EXPECT_DOUBLE_EQ(p.c, 1.0);
  EXPECT_DOUBLE_EQ(p.v, 3.0);
}

TEST(FitSubgamma, StandardGaussianEnvelopeOnGrid) {
  auto p = fit_subgamma_from_strong(1.0, 1.0, 0.5);
  EXPECT_DOUBLE_EQ(p.c, 1.0);
  EXPECT_NEAR(p.v, 1 + 2 * std::exp(0.5), 1e-15);
  // A^eta[X] = eta/2 for a standard Gaussian.
  for (int k = 1; k <= 64; ++k) {
    const double eta = k / 64.0;
    const double env = eta < 1 ? 0.5 * p.v * eta / (1 - eta) : kInf;
    EXPECT_LE(eta / 2, env);
  }
  auto chk = check_subgamma(Model::gaussian(0, 1), p, 1.0);
  EXPECT_LE(chk.worst_margin, 1e-9);
  EXPECT_EQ(chk.etas.size(), 64u);
}

TEST(FitSubgamma, InfiniteVarianceIsRejected) {
  const Model u = Model::variance_needed(2.75);
  try {
    fit_subgamma_from_strong(moments(u).variance, 1.0, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InfiniteVariance);
  }
}

TEST(FitSubgamma, VarianceNeededBlowsUpNearZero) {
  const double nu = 2.75, x = (nu - 1) / ((nu - 2) * (nu - 2)), q = (nu - 2) / (nu - 1);
  const std::vector<double> etas = {0.1, 0.03, 0.01, 3e-3, 1e-3};
  const auto prof = subgamma_blowup_profile(Model::variance_needed(nu), etas);
  for (std::size_t i = 1; i < prof.size(); ++i) EXPECT_GT(prof[i], prof[i - 1]);
  EXPECT_GT(prof.back(), 1.5 * prof.front());
  // Independent quadrature of the same quantity (the mean is 0).
  for (std::size_t i = 0; i < etas.size(); ++i) {
    const double e = etas[i];
    const double ref = (q * std::exp(e * x) + oracle::power_tail_laplace(nu, e) - 1) / (e * e);
    EXPECT_NEAR(prof[i], ref, 1e-6 * ref);
  }
  // A regular model stays bounded: the profile approaches Var/2.
  const auto g = subgamma_blowup_profile(Model::gaussian(0, 2), etas);
  EXPECT_NEAR(g.back(), 1.0, 1e-3);
}

TEST(SubgammaToScale, FormulaInstances) {
  auto h = subgamma_to_scale({1, 3});
  EXPECT_EQ(h, ScaleFunction::linear_capped(1.0 / 6, 0.5));
  auto g = subgamma_to_scale({0, 1});
  EXPECT_DOUBLE_EQ(g.coefficient(), 0.5);
  EXPECT_TRUE(std::isinf(g.cap()));
  EXPECT_DOUBLE_EQ(g(1e6), 5e5);
}

TEST(SubgammaToScale, GaussianGeneralEsiReverifies) {
  const Model x = Model::gaussian(0, 1);
  auto h = subgamma_to_scale(fit_subgamma_from_strong(1.0, 1.0, 0.5));
  auto cert = verify_esi(Model::shifted(x, moments(x).mean), std::nullopt, h);
  EXPECT_EQ(cert.evidence->verdict, Verdict::holds);
  for (const auto& pt : cert.evidence->points) EXPECT_NEAR(pt.margin, pt.eta / 2 - pt.eps, 1e-12);
}

TEST(SubgammaToScaleProperty, EnvelopeBelowEpsAtScale) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uc(0, 3), uv(0.01, 20);
  for (int k = 0; k < 200; ++k) {
    const SubgammaParams p{k % 5 == 0 ? 0.0 : uc(rng), uv(rng)};
    auto h = subgamma_to_scale(p);
    for (double e : log_spaced(1e-4, 1e2, 64)) {
      const double eta = h(e);
      ASSERT_LE(0.5 * p.v * eta / (1 - p.c * eta), e * (1 + 1e-12));
    }
  }
}

TEST(FitSubgammaProperty, EnvelopeHoldsOnAnalyticFamilies) {
  struct Case {
    Model m;
    double eta_star;
  };
  const std::vector<Case> cases = {{Model::gaussian(0.3, 2), 1.0},  {Model::gamma(2, 1), 0.5},
                                   {Model::uniform(-1, 3), 2.0},    {Model::rademacher(), 3.0},
                                   {Model::two_point(-2, 0.3, 1), 1.5}, {Model::exponential(2), 1.0},
                                   {Model::finite_discrete({{-1, 0.2}, {0, 0.5}, {4, 0.3}}), 0.7}};
  for (const auto& c : cases) {
    const Moments mo = moments(c.m);
    const double C = annealed_expectation(Model::shifted(c.m, mo.mean), c.eta_star).value;
    const auto p = fit_subgamma_from_strong(mo.variance, c.eta_star, C);
    const auto chk = check_subgamma(c.m, p, c.eta_star);
    EXPECT_LE(chk.worst_margin, 1e-9) << describe(c.m);
  }
  // Cross-check one case against its closed form: Gamma(2,1), A^eta[X-2] = -2 log(1-eta)/eta - 2.
  const double C = -2 * std::log(0.5) / 0.5 - 2;
  const auto p = fit_subgamma_from_strong(2.0, 0.5, C);
  for (int k = 1; k < 64; ++k) {
    const double eta = 0.5 * k / 64;
    EXPECT_LE(-2 * std::log1p(-eta) / eta - 2, 0.5 * p.v * eta / (1 - p.c * eta));
  }
}

TEST(SubgammaTailBound, Instances) {
  EXPECT_EQ(subgamma_tail_bound({1, 3}, 1.0), 0.0);
  EXPECT_NEAR(subgamma_tail_bound({1, 3}, std::exp(-1.0)), std::sqrt(6.0) + 1, 1e-15);
  EXPECT_NEAR(subgamma_tail_bound({1, 3}, std::exp(-1.0)), 3.4495, 1e-4);
}

TEST(SubgammaTailBoundProperty, MonotoneAndUnbounded) {
  double prev = -1;
  auto ds = log_spaced(1e-300, 1.0, 100);
  std::reverse(ds.begin(), ds.end());
  for (double d : ds) {
    const double b = subgamma_tail_bound({0.5, 2}, d);
    EXPECT_GE(b, prev);
    prev = b;
  }
  EXPECT_GT(prev, 300);
}

TEST(SubgammaTailBound, GammaQuantilesStayBelow) {
  const double eta_star = 0.5, C = -2 * std::log(0.5) / 0.5 - 2;
  const auto p = fit_subgamma_from_strong(2.0, eta_star, C);
  std::mt19937_64 rng(17);
  std::gamma_distribution<double> g(2.0, 1.0);
  std::vector<double> xs(1000000);
  for (auto& x : xs) x = g(rng) - 2.0;
  std::sort(xs.begin(), xs.end());
  for (double d : {0.1, 0.01}) {
    const double q = xs[static_cast<std::size_t>((1 - d) * xs.size())];
    EXPECT_LE(q, subgamma_tail_bound(p, d));
  }
}

TEST(Roundtrip, TwoGaussiansPassEveryLeg) {
  FamilySpec fam({Model::gaussian(-0.1, 1), Model::gaussian(-0.2, 0.5)});
  auto rep = characterization_roundtrip(fam, ScaleFunction::linear_capped(1.0));
  EXPECT_TRUE(rep.regular);
  EXPECT_TRUE(rep.subcentered);
  for (const auto& l : rep.legs) EXPECT_TRUE(l.checked && l.passed) << l.name << " " << l.detail;
  EXPECT_EQ(rep.legs.size(), 6u);
  EXPECT_TRUE(rep.all_passed());
  // C'' is the first grid point with u >= 1/2.
  EXPECT_GE(rep.eta_star, 0.5);
  EXPECT_LT(rep.eta_star, 0.5 * std::pow(1000.0, 1.0 / 63));
  EXPECT_NEAR(rep.C_star, rep.eta_star + 0.2, 1e-12);
}

TEST(Roundtrip, ConstantPassesTrivially) {
  FamilySpec fam({Model::constant(-1)});
  auto rep = characterization_roundtrip(fam, ScaleFunction::power_capped(1, 0.5, 1));
  EXPECT_TRUE(rep.all_passed());
}

TEST(Roundtrip, VarianceNeededBreaksAtSubgamma) {
  const Model u = Model::variance_needed(2.75);
  FamilySpec fam({u});
  EXPECT_FALSE(fam.regular());
  auto rep = characterization_roundtrip(fam, tabulated_for(u, 1.0));
  ASSERT_NE(rep.leg("1->2"), nullptr);
  EXPECT_TRUE(rep.leg("1->2")->passed);
  EXPECT_TRUE(rep.leg("2->3")->checked);
  EXPECT_FALSE(rep.leg("2->3")->passed);
  EXPECT_FALSE(rep.leg("3->4")->checked);
  EXPECT_FALSE(rep.all_passed());
}

TEST(Roundtrip, NotAnEsiFamily) {
  FamilySpec fam({Model::gaussian(-0.1, 1), Model::gaussian(0.1, 1)});
  try {
    characterization_roundtrip(fam, ScaleFunction::linear_capped(1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotAnEsiFamily);
  }
}

TEST(FamilySpec, EmptyMembers) {
  try {
    FamilySpec fam({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("members: empty"), std::string::npos);
  }
}
