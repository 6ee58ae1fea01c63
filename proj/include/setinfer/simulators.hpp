#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "setinfer/events.hpp"
#include "setinfer/rng.hpp"

namespace setinfer::sim {

struct MvnModelConfig {
  int dimension = 3;
  std::array<double, 3> sigma2{2.0, 4.0, 6.0};  // likelihood covariance diagonal
  int draws_per_event = 5;
  double prior_mean = 0.0;
  double prior_std = 3.0;
  std::int64_t n_max = 200;

  std::int64_t feature_width() const { return dimension * draws_per_event; }
};

struct RateMixtureConfig {
  double n_s = 10.0;   // nominal signal yield at theta = 1
  double n_b = 100.0;  // nominal background yield at theta_nu = 1
  double mu_s = -7.0, sigma_s = 2.0;
  double mu_b = 0.0, sigma_b = 3.0;
  // training / evaluation parameter ranges
  double theta_lo = 3.0, theta_hi = 7.0;
  double nu_lo = 0.5, nu_hi = 2.0;

  double rate(double theta, double theta_nu) const { return n_s * theta + n_b * theta_nu; }
  double signal_fraction(double theta, double theta_nu) const {
    return n_s * theta / rate(theta, theta_nu);
  }
};

struct BumpHuntConfig {
  std::int64_t n0 = 100;
  double sigma_s = 0.1;
  double mu_b = 0.0, sigma_b = 1.0;
  double prior_theta_lo = 0.0, prior_theta_hi = 1.0;
  double prior_nu_mean = 1.0, prior_nu_std = 2.0;
};

inline EventSet simulate_mvn(const MvnModelConfig& cfg, const std::array<double, 3>& theta,
                             std::int64_t n, std::uint64_t seed) {
  if (n < 1 || n > cfg.n_max) {
    throw std::out_of_range("simulate_mvn: N = " + std::to_string(n) + " outside [1, " +
                            std::to_string(cfg.n_max) + "]");
  }
  rng::Stream s(seed);
  EventSet e;
  e.model = ModelTag::Mvn;
  e.seed = seed;
  e.cardinality = n;
  e.feature_width = cfg.feature_width();
  e.features.resize(static_cast<std::size_t>(n * e.feature_width));
  std::size_t idx = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (int k = 0; k < cfg.draws_per_event; ++k) {
      for (int d = 0; d < cfg.dimension; ++d) {
        e.features[idx++] = s.normal(theta[static_cast<std::size_t>(d)],
                                     std::sqrt(cfg.sigma2[static_cast<std::size_t>(d)]));
      }
    }
  }
  e.truth = Truth{{theta[0], theta[1], theta[2]}, std::nullopt};
  return e;
}

inline EventSet simulate_rate_mixture(const RateMixtureConfig& cfg, double theta, double theta_nu,
                                      std::uint64_t seed) {
  if (!(theta > 0.0) || !(theta_nu > 0.0)) {
    throw std::domain_error("simulate_rate_mixture: rates require theta > 0 and theta_nu > 0");
  }
  rng::Stream s(seed);
  const double lambda = cfg.rate(theta, theta_nu);
  const double c_s = cfg.signal_fraction(theta, theta_nu);
  const std::int64_t n = s.poisson(lambda);
  EventSet e;
  e.model = ModelTag::RateMixture;
  e.seed = seed;
  e.cardinality = n;
  e.feature_width = 1;
  e.features.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    if (s.uniform() < c_s) {
      e.features[static_cast<std::size_t>(i)] = s.normal(cfg.mu_s, cfg.sigma_s);
    } else {
      e.features[static_cast<std::size_t>(i)] = s.normal(cfg.mu_b, cfg.sigma_b);
    }
  }
  e.truth = Truth{{theta}, theta_nu};
  return e;
}

inline EventSet simulate_bump(const BumpHuntConfig& cfg, double theta, double theta_nu,
                              std::uint64_t seed) {
  if (theta < 0.0 || theta > 1.0) {
    throw std::domain_error("simulate_bump: theta must lie in [0, 1]");
  }
  rng::Stream s(seed);
  EventSet e;
  e.model = ModelTag::BumpHunt;
  e.seed = seed;
  e.cardinality = cfg.n0;
  e.feature_width = 1;
  e.features.resize(static_cast<std::size_t>(cfg.n0));
  for (std::int64_t i = 0; i < cfg.n0; ++i) {
    if (s.uniform() < theta) {
      e.features[static_cast<std::size_t>(i)] = s.normal(theta_nu, cfg.sigma_s);
    } else {
      e.features[static_cast<std::size_t>(i)] = s.normal(cfg.mu_b, cfg.sigma_b);
    }
  }
  e.truth = Truth{{theta}, theta_nu};
  return e;
}

struct ModelConfigs {
  MvnModelConfig mvn;
  RateMixtureConfig rate;
  BumpHuntConfig bump;
};

/// Joint draw from p(params) p({x} | params) for one model, fully determined
/// by (master seed, task index). Parameter draws and the forward simulation
/// use separate derived streams.
inline EventSet sample_training_task(ModelTag model, const ModelConfigs& cfg,
                                     std::uint64_t master_seed, std::uint64_t index) {
  rng::Stream param = rng::Stream::substream(master_seed, 2 * index);
  const std::uint64_t sim_seed = rng::stream_seed(master_seed, 2 * index + 1);
  switch (model) {
    case ModelTag::Mvn: {
      std::array<double, 3> theta;
      for (auto& t : theta) t = param.normal(cfg.mvn.prior_mean, cfg.mvn.prior_std);
      const std::int64_t n =
          1 + static_cast<std::int64_t>(param.uniform_index(static_cast<std::uint64_t>(cfg.mvn.n_max)));
      return simulate_mvn(cfg.mvn, theta, n, sim_seed);
    }
    case ModelTag::RateMixture: {
      const double theta = param.uniform(cfg.rate.theta_lo, cfg.rate.theta_hi);
      const double nu = param.uniform(cfg.rate.nu_lo, cfg.rate.nu_hi);
      return simulate_rate_mixture(cfg.rate, theta, nu, sim_seed);
    }
    case ModelTag::BumpHunt: {
      const double theta = param.uniform(cfg.bump.prior_theta_lo, cfg.bump.prior_theta_hi);
      const double nu = param.normal(cfg.bump.prior_nu_mean, cfg.bump.prior_nu_std);
      return simulate_bump(cfg.bump, theta, nu, sim_seed);
    }
  }
  throw std::invalid_argument("sample_training_task: unknown model tag");
}

/// sample_training_task with the cardinality pinned to n where the model
/// leaves it free (MVN). The parameter draw consumes the same substream, so
/// truth values match the free-cardinality task of the same index. Models
/// whose cardinality is structural ignore n.
inline EventSet sample_training_task_fixed_n(ModelTag model, const ModelConfigs& cfg,
                                             std::uint64_t master_seed, std::uint64_t index,
                                             std::int64_t n) {
  if (model != ModelTag::Mvn) return sample_training_task(model, cfg, master_seed, index);
  rng::Stream param = rng::Stream::substream(master_seed, 2 * index);
  std::array<double, 3> theta;
  for (auto& t : theta) t = param.normal(cfg.mvn.prior_mean, cfg.mvn.prior_std);
  return simulate_mvn(cfg.mvn, theta, n, rng::stream_seed(master_seed, 2 * index + 1));
}

}  // namespace setinfer::sim
