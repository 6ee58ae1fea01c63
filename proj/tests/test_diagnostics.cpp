#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "setinfer/diagnostics.hpp"
#include "setinfer/oracles.hpp"
#include "setinfer/rng.hpp"
#include "setinfer/simulators.hpp"

using namespace setinfer;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// slow but independent inverse CDF via erfc bisection
double quantile_bisect(double p) {
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST_CASE("normal quantile matches a bisection oracle") {
  for (double p : {1e-12, 1e-6, 0.001, 0.02425, 0.1, 0.25, 0.5, 0.75, 0.9, 0.975, 0.999,
                   1.0 - 1e-9}) {
    const double q = diag::normal_quantile(p);
    const double ref = quantile_bisect(p);
    CHECK_THAT(q, WithinAbs(ref, 1e-8 * std::max(1.0, std::abs(ref))));
  }
  CHECK_THAT(diag::normal_quantile(0.975), WithinAbs(1.959963984540054, 1e-12));
  CHECK_THAT(diag::normal_quantile(0.8413447460685429), WithinAbs(1.0, 1e-9));
  CHECK_THAT(diag::normal_quantile(0.5), WithinAbs(0.0, 1e-15));
  CHECK_THAT(diag::normal_quantile(0.25) + diag::normal_quantile(0.75), WithinAbs(0.0, 1e-15));
  CHECK_THROWS_AS(diag::normal_quantile(0.0), std::domain_error);
  CHECK_THROWS_AS(diag::normal_quantile(1.0), std::domain_error);
  CHECK_THROWS_AS(diag::normal_quantile(-0.2), std::domain_error);
}

TEST_CASE("gaussian hpdi is the central interval per dimension") {
  oracle::GaussianPosterior post{{2.0, -1.0}, {4.0, 0.25}};
  const auto iv = diag::hpdi(post, 0.6827);
  REQUIRE(iv.size() == 2);
  // 68.27% of a Gaussian lies within one standard deviation
  CHECK_THAT(iv[0].lo, WithinAbs(2.0 - 2.0, 1e-3 * 2.0));
  CHECK_THAT(iv[0].hi, WithinAbs(2.0 + 2.0, 1e-3 * 2.0));
  CHECK_THAT(iv[1].lo, WithinAbs(-1.5, 1e-3 * 0.5));
  CHECK_THAT(iv[1].hi, WithinAbs(-0.5, 1e-3 * 0.5));

  const auto v95 = diag::hpdi(oracle::GaussianPosterior{{0.0}, {1.0}}, 0.95);
  CHECK_THAT(v95[0].hi, WithinAbs(1.959963984540054, 1e-12));
  CHECK(v95[0].contains(0.0));
  CHECK_FALSE(v95[0].contains(2.0));

  CHECK_THROWS_AS(diag::hpdi(post, 0.0), std::domain_error);
  CHECK_THROWS_AS(diag::hpdi(post, 1.0), std::domain_error);
}

TEST_CASE("sample hpdi agrees with the gaussian branch on normal draws") {
  rng::Stream st(991);
  std::vector<double> draws(100000);
  for (auto& d : draws) d = st.normal();
  for (double level : {0.6827, 0.95}) {
    const auto sample = diag::hpdi(draws, level);
    const auto gauss = diag::hpdi(oracle::GaussianPosterior{{0.0}, {1.0}}, level)[0];
    CHECK_THAT(sample.width(), WithinRel(gauss.width(), 0.02));
    CHECK_THAT(sample.lo, WithinAbs(gauss.lo, 0.05));
    CHECK_THAT(sample.hi, WithinAbs(gauss.hi, 0.05));
  }
}

TEST_CASE("sample hpdi hugs the mode of a skewed distribution") {
  // narrowest 50% window of Exp(1) is [0, ln 2]; a central interval would
  // start near the 25th percentile (~0.288)
  rng::Stream st(17);
  std::vector<double> draws(100000);
  for (auto& d : draws) d = -std::log(st.uniform());
  const auto iv = diag::hpdi(draws, 0.5);
  CHECK(iv.lo < 0.01);
  CHECK_THAT(iv.hi, WithinAbs(std::log(2.0), 0.05));

  std::vector<double> tiny(99, 0.0);
  CHECK_THROWS_WITH(diag::hpdi(tiny, 0.5), ContainsSubstring("at least 100"));
}

TEST_CASE("exact posterior attains nominal coverage") {
  sim::ModelConfigs sims;
  diag::PosteriorFn exact = [&](const sim::EventSet& e) {
    return oracle::conjugate_posterior(sims.mvn, e);
  };
  const auto rep = diag::expected_coverage(exact, sim::ModelTag::Mvn, sims, {0.05, 0.32, 0.5},
                                           400, {1, 10, 50}, 2024);
  REQUIRE(rep.cells.size() == 9);
  CHECK(rep.replicas == 400);
  CHECK(rep.dims == 3);
  for (const auto& c : rep.cells) {
    CHECK(c.trials == 400 * 3);
    CHECK(c.hits >= 0);
    CHECK(c.hits <= c.trials);
    CHECK_THAT(c.coverage, WithinAbs(double(c.hits) / double(c.trials), 1e-15));
    CHECK_THAT(c.se, WithinAbs(std::sqrt(c.coverage * (1 - c.coverage) / double(c.trials)), 1e-15));
    // calibrated posterior: every cell within 3 binomial standard errors
    CHECK(std::abs(c.coverage - (1.0 - c.alpha)) <= 3.0 * c.se);
  }
  CHECK(rep.worst_gap_over_se() <= 3.0);
  CHECK(&rep.cell(1, 2) == &rep.cells[5]);

  std::ostringstream csv;
  rep.write_csv(csv);
  CHECK_THAT(csv.str(), ContainsSubstring("alpha,cardinality,hits,trials,coverage,se"));
  std::ostringstream sum;
  rep.write_summary(sum);
  CHECK_THAT(sum.str(), ContainsSubstring("report: coverage"));
  CHECK_THAT(sum.str(), ContainsSubstring("replicas: 400"));
}

TEST_CASE("overconfident posterior is flagged as undercoverage") {
  sim::ModelConfigs sims;
  diag::PosteriorFn half = [&](const sim::EventSet& e) {
    auto p = oracle::conjugate_posterior(sims.mvn, e);
    for (auto& v : p.var) v *= 0.25;  // report half the true width
    return p;
  };
  const auto rep = diag::expected_coverage(half, sim::ModelTag::Mvn, sims, {0.05, 0.32}, 400,
                                           {10}, 2024);
  for (const auto& c : rep.cells) {
    CHECK((1.0 - c.alpha) - c.coverage > 10.0 * c.se);
  }
}

TEST_CASE("coverage input validation") {
  sim::ModelConfigs sims;
  diag::PosteriorFn exact = [&](const sim::EventSet& e) {
    return oracle::conjugate_posterior(sims.mvn, e);
  };
  CHECK_THROWS_WITH(
      diag::expected_coverage(exact, sim::ModelTag::Mvn, sims, {0.1}, 99, {10}, 1),
      ContainsSubstring("100 replicas"));
  CHECK_THROWS_AS(diag::expected_coverage(exact, sim::ModelTag::Mvn, sims, {}, 100, {10}, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(diag::expected_coverage(exact, sim::ModelTag::Mvn, sims, {1.0}, 100, {10}, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      diag::expected_coverage(exact, sim::ModelTag::Mvn, sims, {0.1}, 100, {10, 10}, 1),
      std::invalid_argument);
  CHECK_THROWS_AS(diag::expected_coverage(exact, sim::ModelTag::Mvn, sims, {0.1}, 100, {}, 1),
                  std::invalid_argument);

  // posterior whose dimension disagrees with the truth
  diag::PosteriorFn wrong = [](const sim::EventSet&) {
    return oracle::GaussianPosterior{{0.0}, {1.0}};
  };
  CHECK_THROWS_WITH(
      diag::expected_coverage(wrong, sim::ModelTag::Mvn, sims, {0.1}, 100, {5}, 1),
      ContainsSubstring("dimension mismatch"));
}

TEST_CASE("percentile interpolates linearly") {
  std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  CHECK_THAT(diag::percentile(v, 0.5), WithinAbs(2.5, 1e-15));
  CHECK_THAT(diag::percentile(v, 0.0), WithinAbs(1.0, 1e-15));
  CHECK_THAT(diag::percentile(v, 1.0), WithinAbs(4.0, 1e-15));
  CHECK_THAT(diag::percentile(v, 1.0 / 3.0), WithinAbs(2.0, 1e-12));
  CHECK_THROWS_AS(diag::percentile({}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(diag::percentile(v, 1.5), std::domain_error);
}

TEST_CASE("width scaling of the exact posterior matches the analytic curve") {
  sim::ModelConfigs sims;
  diag::PosteriorFn exact = [&](const sim::EventSet& e) {
    return oracle::conjugate_posterior(sims.mvn, e);
  };
  const auto rep = diag::width_scaling_report(exact, sims, 50, {1, 10, 50, 200}, 77);
  REQUIRE(rep.rows.size() == 4);
  CHECK(rep.sequences == 50);
  CHECK(rep.worst_median_rel_err() <= 1e-12);
  for (std::size_t ci = 0; ci < rep.rows.size(); ++ci) {
    const auto& row = rep.rows[ci];
    REQUIRE(row.median_sigma.size() == 3);
    for (std::size_t d = 0; d < 3; ++d) {
      // conjugate width: 1/var = 1/prior_var + n_draws/likelihood_var
      const double n_draws =
          double(row.cardinality) * double(sims.mvn.draws_per_event);
      const double direct =
          std::sqrt(1.0 / (1.0 / 9.0 + n_draws / sims.mvn.sigma2[d]));
      CHECK_THAT(row.analytic_sigma[d], WithinRel(direct, 1e-12));
      CHECK(row.p16_sigma[d] <= row.median_sigma[d]);
      CHECK(row.median_sigma[d] <= row.p84_sigma[d]);
      if (ci > 0) CHECK(row.median_sigma[d] < rep.rows[ci - 1].median_sigma[d]);
    }
  }
  // a single event cannot widen the posterior beyond the prior
  for (double m : rep.rows.front().median_sigma) CHECK(m <= 3.0);

  std::ostringstream csv;
  rep.write_csv(csv);
  CHECK_THAT(csv.str(),
             ContainsSubstring("cardinality,dimension,median_sigma,p16_sigma,p84_sigma,analytic_sigma"));

  CHECK_THROWS_AS(diag::width_scaling_report(exact, sims, 0, {1, 10}, 77), std::invalid_argument);
  CHECK_THROWS_WITH(diag::width_scaling_report(exact, sims, 10, {1, 201}, 77),
                    ContainsSubstring("n_max"));
}

TEST_CASE("rank helpers") {
  const std::vector<double> v{3.0, 1.0, 4.0, 1.0, 5.0};
  const auto r = diag::ranks_average_ties(v);
  const std::vector<double> want{3.0, 1.5, 4.0, 1.5, 5.0};
  REQUIRE(r.size() == want.size());
  for (std::size_t i = 0; i < r.size(); ++i) CHECK_THAT(r[i], WithinAbs(want[i], 1e-15));

  CHECK_THROWS_AS(diag::spearman({1.0, 2.0}, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(diag::spearman({1.0, 2.0}, {1.0, 2.0}), std::invalid_argument);
  CHECK(diag::spearman({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}) == 0.0);
}

TEST_CASE("isotonic regression pools adjacent violators") {
  const auto fit = diag::isotonic_fit({1.0, 3.0, 2.0, 4.0});
  const std::vector<double> want{1.0, 2.5, 2.5, 4.0};
  REQUIRE(fit.size() == want.size());
  for (std::size_t i = 0; i < fit.size(); ++i) CHECK_THAT(fit[i], WithinAbs(want[i], 1e-15));

  const auto dec = diag::isotonic_fit({4.0, 2.0, 3.0, 1.0}, false);
  const std::vector<double> want_dec{4.0, 2.5, 2.5, 1.0};
  for (std::size_t i = 0; i < dec.size(); ++i) CHECK_THAT(dec[i], WithinAbs(want_dec[i], 1e-15));

  CHECK(diag::isotonic_fit({}).empty());
  const auto sorted = diag::isotonic_fit({1.0, 2.0, 3.0});
  for (std::size_t i = 0; i < 3; ++i) CHECK(sorted[i] == double(i + 1));
}

TEST_CASE("bijectivity report on monotone and noisy maps") {
  std::vector<double> xs(40);
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = 0.1 * double(i) - 2.0;

  // identical inputs: perfect rank agreement
  const auto self = diag::bijectivity_report(xs, xs);
  CHECK(self.spearman_rho == 1.0);
  CHECK(self.isotonic_rms == 0.0);
  CHECK(self.count == 40);

  // any strictly monotone map preserves ranks exactly
  std::vector<double> ys(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = std::tanh(xs[i]);
  const auto mono = diag::bijectivity_report(xs, ys);
  CHECK(mono.spearman_rho == 1.0);
  CHECK(mono.isotonic_rms == 0.0);

  // decreasing map: rho is exactly -1 and the decreasing fit is exact
  std::vector<double> yd(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) yd[i] = -xs[i];
  const auto anti = diag::bijectivity_report(xs, yd);
  CHECK(anti.spearman_rho == -1.0);
  CHECK(anti.isotonic_rms == 0.0);

  // small noise perturbs both scores a little
  rng::Stream ns(5);
  std::vector<double> yn = ys;
  for (auto& y : yn) y += 0.05 * ns.normal();
  const auto noisy = diag::bijectivity_report(xs, yn);
  CHECK(noisy.spearman_rho > 0.95);
  CHECK(noisy.spearman_rho < 1.0);
  CHECK(noisy.isotonic_rms > 0.0);
  CHECK(noisy.isotonic_rms < 0.06);

  std::ostringstream sum;
  noisy.write_summary(sum);
  CHECK_THAT(sum.str(), ContainsSubstring("report: bijectivity"));
  CHECK_THAT(sum.str(), ContainsSubstring("spearman_rho:"));

  CHECK_THROWS_AS(diag::bijectivity_report({1.0}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(diag::bijectivity_report({1.0, 2.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("factorized posterior identity holds on the conforming toy") {
  diag::DiscreteToy toy;
  CHECK(diag::factorization_check(toy) <= 1e-12);

  toy.events = 9;  // largest enumerable case, 2^19 states
  CHECK(diag::factorization_check(toy) <= 1e-12);

  diag::DiscreteToy single;
  single.events = 1;
  // with one event the identity is the probability chain rule
  CHECK(diag::factorization_check(single) <= 1e-15);
}

TEST_CASE("cross-event coupling breaks the factorization") {
  diag::DiscreteToy toy;
  toy.couple_first_z_to_second_x = true;
  const double dev = diag::factorization_check(toy);
  CHECK(dev > 0.01);
  CHECK(dev < 1.0);

  diag::DiscreteToy big;
  big.events = 10;
  CHECK_THROWS_WITH(diag::factorization_check(big), ContainsSubstring("state space too large"));

  diag::DiscreteToy bad;
  bad.theta_prior = {0.5, 0.6};
  CHECK_THROWS_WITH(diag::factorization_check(bad), ContainsSubstring("normalized"));
}

TEST_CASE("speed bench separates cheap and expensive evaluators") {
  sim::ModelConfigs sims;
  std::vector<sim::EventSet> datasets;
  for (int i = 0; i < 32; ++i) {
    datasets.push_back(sim::sample_training_task(sim::ModelTag::Mvn, sims, 7, i));
  }
  double sink = 0.0;
  auto cheap = [&](const sim::EventSet& e) {
    double s = 0.0;
    for (double f : e.features) s += f;
    sink += s;
  };
  auto costly = [&](const sim::EventSet& e) {
    double s = 0.0;
    for (int k = 0; k < 400; ++k) {
      for (double f : e.features) s += std::sqrt(std::abs(f) + double(k));
    }
    sink += s;
  };
  const auto rep = diag::speed_bench(cheap, costly, datasets);
  INFO("sink " << sink << " ratio " << rep.ratio);
  CHECK(rep.datasets == 32);
  CHECK(rep.neural_total_ms > 0.0);
  CHECK(rep.reference_total_ms > 0.0);
  CHECK_THAT(rep.neural_per_dataset_ms, WithinRel(rep.neural_total_ms / 32.0, 1e-12));
  CHECK(rep.ratio < 0.5);

  std::ostringstream sum;
  rep.write_summary(sum);
  CHECK_THAT(sum.str(), ContainsSubstring("report: speed_bench"));
  CHECK_THAT(sum.str(), ContainsSubstring("ratio:"));

  CHECK_THROWS_AS(diag::speed_bench(cheap, costly, {}), std::invalid_argument);
}
