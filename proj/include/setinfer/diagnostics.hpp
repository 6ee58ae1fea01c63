#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "setinfer/oracles.hpp"
#include "setinfer/simulators.hpp"

namespace setinfer::diag {

// ---------------------------------------------------------------------------
// Normal quantile

/// Inverse standard-normal CDF: Acklam's rational approximation polished by
/// one Halley step against erfc, accurate to full double precision.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_quantile: p must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double err = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = err * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

// ---------------------------------------------------------------------------
// Highest-posterior-density intervals

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

/// Gaussian branch: by symmetry the HPDI is the central interval per
/// dimension, mean +- z_{(1+level)/2} sigma.
inline std::vector<Interval> hpdi(const oracle::GaussianPosterior& post, double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::domain_error("hpdi: level must lie in (0, 1)");
  const double z = normal_quantile(0.5 * (1.0 + level));
  std::vector<Interval> out(post.mean.size());
  for (std::size_t d = 0; d < post.mean.size(); ++d) {
    const double half = z * post.sd(d);
    out[d] = {post.mean[d] - half, post.mean[d] + half};
  }
  return out;
}

/// Sample branch: the narrowest window containing ceil(level * n) sorted
/// samples.
inline Interval hpdi(std::vector<double> samples, double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::domain_error("hpdi: level must lie in (0, 1)");
  if (samples.size() < 100) {
    throw std::invalid_argument("hpdi: sample branch needs at least 100 samples");
  }
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  std::size_t k = static_cast<std::size_t>(
      std::ceil(level * static_cast<double>(n)));
  k = std::clamp<std::size_t>(k, 2, n);
  Interval best{samples[0], samples[k - 1]};
  for (std::size_t i = 1; i + k <= n; ++i) {
    if (samples[i + k - 1] - samples[i] < best.width()) {
      best = {samples[i], samples[i + k - 1]};
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Coverage calibration

/// Any map from a dataset to a diagonal-Gaussian posterior: a trained network,
/// an analytic oracle, or a deliberately miscalibrated probe.
using PosteriorFn = std::function<oracle::GaussianPosterior(const sim::EventSet&)>;

struct CoverageCell {
  double alpha = 0.0;
  std::int64_t cardinality = 0;
  std::int64_t hits = 0;
  std::int64_t trials = 0;
  double coverage = 0.0;
  double se = 0.0;
};

struct CoverageReport {
  std::vector<double> alphas;
  std::vector<std::int64_t> cardinalities;
  std::int64_t replicas = 0;
  std::int64_t dims = 0;
  std::vector<CoverageCell> cells;  // alpha-major, cardinality-minor

  const CoverageCell& cell(std::size_t alpha_index, std::size_t card_index) const {
    return cells.at(alpha_index * cardinalities.size() + card_index);
  }

  /// Largest |empirical - nominal| over all cells, in absolute terms and in
  /// units of the cell's binomial standard error.
  double worst_gap() const {
    double g = 0.0;
    for (const auto& c : cells) g = std::max(g, std::abs(c.coverage - (1.0 - c.alpha)));
    return g;
  }
  double worst_gap_over_se() const {
    double g = 0.0;
    for (const auto& c : cells) {
      if (c.se > 0.0) g = std::max(g, std::abs(c.coverage - (1.0 - c.alpha)) / c.se);
    }
    return g;
  }

  void write_csv(std::ostream& os) const {
    os << "alpha,cardinality,hits,trials,coverage,se\n";
    for (const auto& c : cells) {
      os << sim::format_g17(c.alpha) << ',' << c.cardinality << ',' << c.hits << ',' << c.trials
         << ',' << sim::format_g17(c.coverage) << ',' << sim::format_g17(c.se) << '\n';
    }
  }
  void write_summary(std::ostream& os) const {
    os << "report: coverage\n"
       << "replicas: " << replicas << "\n"
       << "dims: " << dims << "\n"
       << "cells: " << cells.size() << "\n"
       << "worst_abs_gap: " << sim::format_g17(worst_gap()) << "\n"
       << "worst_gap_over_se: " << sim::format_g17(worst_gap_over_se()) << "\n";
  }
};

namespace detail {

inline std::vector<double> truth_vector(const sim::EventSet& task) {
  if (!task.truth) throw std::invalid_argument("coverage: task without ground truth");
  std::vector<double> t = task.truth->theta;
  if (task.truth->theta_nu) t.push_back(*task.truth->theta_nu);
  return t;
}

inline void check_cardinalities(const std::vector<std::int64_t>& cards) {
  if (cards.empty()) throw std::invalid_argument("cardinality grid must be non-empty");
  for (std::size_t i = 0; i < cards.size(); ++i) {
    if (cards[i] < 1 || (i > 0 && cards[i] <= cards[i - 1])) {
      throw std::invalid_argument("cardinalities must be strictly increasing and positive");
    }
  }
}

}  // namespace detail

/// Empirical expected coverage over prior-sampled replicas: for each replica
/// the truth is drawn with the dataset, the posterior is evaluated on each
/// cardinality prefix, and per-dimension HPDI containment of the truth is
/// pooled into one binomial cell per (alpha, cardinality).
inline CoverageReport expected_coverage(const PosteriorFn& infer, sim::ModelTag model,
                                        const sim::ModelConfigs& sims,
                                        const std::vector<double>& alphas, std::int64_t replicas,
                                        const std::vector<std::int64_t>& cardinalities,
                                        std::uint64_t seed) {
  if (replicas < 100) throw std::invalid_argument("expected_coverage: need at least 100 replicas");
  if (alphas.empty()) throw std::invalid_argument("expected_coverage: empty alpha grid");
  for (double a : alphas) {
    if (!(a > 0.0 && a < 1.0)) throw std::invalid_argument("expected_coverage: alpha outside (0, 1)");
  }
  detail::check_cardinalities(cardinalities);
  const std::int64_t n_max = cardinalities.back();

  std::vector<double> z(alphas.size());
  for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
    z[ai] = normal_quantile(1.0 - 0.5 * alphas[ai]);
  }

  std::vector<std::int64_t> hits(alphas.size() * cardinalities.size(), 0);
  std::int64_t dims = -1;
  for (std::int64_t r = 0; r < replicas; ++r) {
    const auto task = sim::sample_training_task_fixed_n(model, sims, seed,
                                                        static_cast<std::uint64_t>(r), n_max);
    if (task.cardinality < n_max) {
      throw std::invalid_argument("expected_coverage: model produced " +
                                  std::to_string(task.cardinality) +
                                  " events, below the requested cardinality " +
                                  std::to_string(n_max));
    }
    const auto truth = detail::truth_vector(task);
    for (std::size_t ci = 0; ci < cardinalities.size(); ++ci) {
      const auto post = infer(task.prefix(cardinalities[ci]));
      if (dims < 0) dims = static_cast<std::int64_t>(post.mean.size());
      if (post.mean.size() != truth.size() ||
          post.mean.size() != static_cast<std::size_t>(dims)) {
        throw std::invalid_argument("expected_coverage: posterior/truth dimension mismatch");
      }
      for (std::size_t d = 0; d < truth.size(); ++d) {
        const double dev = std::abs(truth[d] - post.mean[d]);
        for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
          if (dev <= z[ai] * post.sd(d)) ++hits[ai * cardinalities.size() + ci];
        }
      }
    }
  }

  CoverageReport rep;
  rep.alphas = alphas;
  rep.cardinalities = cardinalities;
  rep.replicas = replicas;
  rep.dims = dims;
  const std::int64_t trials = replicas * dims;
  for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
    for (std::size_t ci = 0; ci < cardinalities.size(); ++ci) {
      CoverageCell c;
      c.alpha = alphas[ai];
      c.cardinality = cardinalities[ci];
      c.hits = hits[ai * cardinalities.size() + ci];
      c.trials = trials;
      c.coverage = static_cast<double>(c.hits) / static_cast<double>(trials);
      c.se = std::sqrt(c.coverage * (1.0 - c.coverage) / static_cast<double>(trials));
      rep.cells.push_back(c);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Posterior width scaling

/// Linear-interpolation percentile of an unsorted sample (p in [0, 1]).
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("percentile: empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("percentile: p must lie in [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

struct WidthScalingRow {
  std::int64_t cardinality = 0;
  std::vector<double> median_sigma;  // per dimension
  std::vector<double> p16_sigma;
  std::vector<double> p84_sigma;
  std::vector<double> analytic_sigma;
};

struct WidthScalingReport {
  std::int64_t sequences = 0;
  std::vector<WidthScalingRow> rows;

  /// Largest relative gap between the median inferred sigma and the analytic
  /// value over all (cardinality, dimension) cells.
  double worst_median_rel_err() const {
    double g = 0.0;
    for (const auto& r : rows) {
      for (std::size_t d = 0; d < r.median_sigma.size(); ++d) {
        g = std::max(g, std::abs(r.median_sigma[d] / r.analytic_sigma[d] - 1.0));
      }
    }
    return g;
  }

  void write_csv(std::ostream& os) const {
    os << "cardinality,dimension,median_sigma,p16_sigma,p84_sigma,analytic_sigma\n";
    for (const auto& r : rows) {
      for (std::size_t d = 0; d < r.median_sigma.size(); ++d) {
        os << r.cardinality << ',' << d << ',' << sim::format_g17(r.median_sigma[d]) << ','
           << sim::format_g17(r.p16_sigma[d]) << ',' << sim::format_g17(r.p84_sigma[d]) << ','
           << sim::format_g17(r.analytic_sigma[d]) << '\n';
      }
    }
  }
  void write_summary(std::ostream& os) const {
    os << "report: width_scaling\n"
       << "sequences: " << sequences << "\n"
       << "cardinalities: " << rows.size() << "\n"
       << "worst_median_rel_err: " << sim::format_g17(worst_median_rel_err()) << "\n";
  }
};

/// Median and middle-68% band of the inferred per-dimension sigma against the
/// analytic conjugate sigma, per cardinality, over fresh MVN test sequences.
inline WidthScalingReport width_scaling_report(const PosteriorFn& infer,
                                               const sim::ModelConfigs& sims,
                                               std::int64_t sequences,
                                               const std::vector<std::int64_t>& cardinalities,
                                               std::uint64_t seed) {
  if (sequences < 1) throw std::invalid_argument("width_scaling_report: need sequences >= 1");
  detail::check_cardinalities(cardinalities);
  if (cardinalities.back() > sims.mvn.n_max) {
    throw std::invalid_argument("width_scaling_report: cardinality exceeds the model's n_max");
  }
  const auto dims = static_cast<std::size_t>(sims.mvn.dimension);

  // sigma samples indexed [cardinality][dimension][sequence]
  std::vector<std::vector<std::vector<double>>> sig(
      cardinalities.size(), std::vector<std::vector<double>>(dims));
  WidthScalingReport rep;
  rep.sequences = sequences;
  rep.rows.resize(cardinalities.size());

  for (std::int64_t s = 0; s < sequences; ++s) {
    const auto task = sim::sample_training_task_fixed_n(sim::ModelTag::Mvn, sims, seed,
                                                        static_cast<std::uint64_t>(s),
                                                        cardinalities.back());
    for (std::size_t ci = 0; ci < cardinalities.size(); ++ci) {
      const auto prefix = task.prefix(cardinalities[ci]);
      const auto post = infer(prefix);
      if (post.mean.size() != dims) {
        throw std::invalid_argument("width_scaling_report: posterior dimension mismatch");
      }
      for (std::size_t d = 0; d < dims; ++d) sig[ci][d].push_back(post.sd(d));
      if (s == 0) {
        const auto exact = oracle::conjugate_posterior(sims.mvn, prefix);
        auto& row = rep.rows[ci];
        row.cardinality = cardinalities[ci];
        for (std::size_t d = 0; d < dims; ++d) {
          row.analytic_sigma.push_back(exact.sd(d));
        }
      }
    }
  }
  for (std::size_t ci = 0; ci < cardinalities.size(); ++ci) {
    auto& row = rep.rows[ci];
    for (std::size_t d = 0; d < dims; ++d) {
      row.median_sigma.push_back(percentile(sig[ci][d], 0.5));
      row.p16_sigma.push_back(percentile(sig[ci][d], 0.16));
      row.p84_sigma.push_back(percentile(sig[ci][d], 0.84));
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Rank statistics and bijectivity

/// Ranks starting at 1, ties shared as the average rank.
inline std::vector<double> ranks_average_ties(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> out(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) out[idx[k]] = shared;
    i = j + 1;
  }
  return out;
}

/// Spearman rank correlation (Pearson correlation of average-tie ranks).
/// Returns 0 when either input is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: size mismatch");
  if (a.size() < 3) throw std::invalid_argument("spearman: need at least 3 points");
  const auto ra = ranks_average_ties(a);
  const auto rb = ranks_average_ties(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// Pool-adjacent-violators fit of y (in its given order) by a monotone
/// sequence, minimizing squared error.
inline std::vector<double> isotonic_fit(const std::vector<double>& y, bool increasing = true) {
  if (y.empty()) return {};
  if (!increasing) {
    std::vector<double> neg(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) neg[i] = -y[i];
    auto fit = isotonic_fit(neg, true);
    for (auto& f : fit) f = -f;
    return fit;
  }
  struct Block {
    double sum;
    std::size_t count;
  };
  std::vector<Block> blocks;
  blocks.reserve(y.size());
  for (double yi : y) {
    blocks.push_back({yi, 1});
    while (blocks.size() > 1) {
      const auto& top = blocks.back();
      const auto& prev = blocks[blocks.size() - 2];
      if (prev.sum * static_cast<double>(top.count) <=
          top.sum * static_cast<double>(prev.count)) {
        break;  // block means already non-decreasing
      }
      Block merged{prev.sum + top.sum, prev.count + top.count};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  std::vector<double> out;
  out.reserve(y.size());
  for (const auto& bl : blocks) {
    const double mean = bl.sum / static_cast<double>(bl.count);
    out.insert(out.end(), bl.count, mean);
  }
  return out;
}

struct BijectivityReport {
  double spearman_rho = 0.0;
  double isotonic_rms = 0.0;
  std::int64_t count = 0;

  void write_summary(std::ostream& os) const {
    os << "report: bijectivity\n"
       << "count: " << count << "\n"
       << "spearman_rho: " << sim::format_g17(spearman_rho) << "\n"
       << "isotonic_rms: " << sim::format_g17(isotonic_rms) << "\n";
  }
};

/// Monotone-association score between matched statistic evaluations: Spearman
/// rho plus the RMS residual of the best monotone (isotonic) map from the
/// first input's order to the second's values.
inline BijectivityReport bijectivity_report(const std::vector<double>& neural,
                                            const std::vector<double>& reference) {
  if (neural.size() != reference.size()) {
    throw std::invalid_argument("bijectivity_report: size mismatch");
  }
  if (neural.size() < 3) throw std::invalid_argument("bijectivity_report: need at least 3 points");
  BijectivityReport rep;
  rep.count = static_cast<std::int64_t>(neural.size());
  rep.spearman_rho = spearman(neural, reference);

  std::vector<std::size_t> idx(neural.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return neural[a] < neural[b]; });
  std::vector<double> ordered(neural.size());
  for (std::size_t i = 0; i < idx.size(); ++i) ordered[i] = reference[idx[i]];
  const auto fit = isotonic_fit(ordered, rep.spearman_rho >= 0.0);
  double sq = 0.0;
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    sq += (fit[i] - ordered[i]) * (fit[i] - ordered[i]);
  }
  rep.isotonic_rms = std::sqrt(sq / static_cast<double>(ordered.size()));
  return rep;
}

// ---------------------------------------------------------------------------
// Discrete factorization check

/// Fully enumerable binary hierarchical model: global theta, one latent z_i
/// and one observable x_i per event. The coupling knob makes the second
/// event's observable depend on the first event's latent, breaking the
/// conditional-independence assumption behind the factorized posterior.
struct DiscreteToy {
  std::int64_t events = 3;
  std::array<double, 2> theta_prior{0.4, 0.6};
  std::array<std::array<double, 2>, 2> z_given_theta{{{0.7, 0.3}, {0.2, 0.8}}};
  std::array<std::array<std::array<double, 2>, 2>, 2> x_given_z_theta{{
      {{{0.9, 0.1}, {0.35, 0.65}}},
      {{{0.6, 0.4}, {0.15, 0.85}}},
  }};
  bool couple_first_z_to_second_x = false;

  void validate() const {
    if (events < 1) throw std::invalid_argument("DiscreteToy: need at least one event");
    if (events > 9) {
      throw std::invalid_argument("DiscreteToy: state space too large to enumerate");
    }
    auto check_pair = [](double p0, double p1) {
      if (p0 < 0.0 || p1 < 0.0 || std::abs(p0 + p1 - 1.0) > 1e-12) {
        throw std::invalid_argument("DiscreteToy: distributions must be normalized");
      }
    };
    check_pair(theta_prior[0], theta_prior[1]);
    for (int t = 0; t < 2; ++t) {
      check_pair(z_given_theta[t][0], z_given_theta[t][1]);
      for (int z = 0; z < 2; ++z) check_pair(x_given_z_theta[t][z][0], x_given_z_theta[t][z][1]);
    }
  }
};

/// Brute-force check of the factorized-posterior identity
/// p(theta, {z} | {x}) = p(theta | {x}) prod_i p(z_i | theta, x_i):
/// enumerates the exact joint, builds the right-hand side from the local
/// tables, and returns the max absolute deviation over all states.
inline double factorization_check(const DiscreteToy& toy) {
  toy.validate();
  const auto n = static_cast<std::size_t>(toy.events);
  const std::size_t states = std::size_t{1} << n;

  std::vector<double> joint(2 * states * states, 0.0);
  std::vector<double> p_x(states, 0.0);
  std::vector<double> p_theta_x(2 * states, 0.0);
  for (int t = 0; t < 2; ++t) {
    for (std::size_t zm = 0; zm < states; ++zm) {
      for (std::size_t xm = 0; xm < states; ++xm) {
        double p = toy.theta_prior[t];
        for (std::size_t i = 0; i < n; ++i) {
          const int zi = static_cast<int>((zm >> i) & 1U);
          const int xi = static_cast<int>((xm >> i) & 1U);
          int z_for_x = zi;
          if (toy.couple_first_z_to_second_x && i == 1) {
            z_for_x = zi ^ static_cast<int>(zm & 1U);
          }
          p *= toy.z_given_theta[t][zi] * toy.x_given_z_theta[t][z_for_x][xi];
        }
        joint[(static_cast<std::size_t>(t) * states + zm) * states + xm] = p;
        p_x[xm] += p;
        p_theta_x[static_cast<std::size_t>(t) * states + xm] += p;
      }
    }
  }

  // local posteriors p(z | theta, x) from the per-event tables
  double pz_local[2][2][2];  // [theta][x][z]
  for (int t = 0; t < 2; ++t) {
    for (int x = 0; x < 2; ++x) {
      double norm = 0.0;
      for (int z = 0; z < 2; ++z) {
        pz_local[t][x][z] = toy.z_given_theta[t][z] * toy.x_given_z_theta[t][z][x];
        norm += pz_local[t][x][z];
      }
      for (int z = 0; z < 2; ++z) pz_local[t][x][z] /= norm;
    }
  }

  double worst = 0.0;
  for (std::size_t xm = 0; xm < states; ++xm) {
    if (p_x[xm] <= 0.0) continue;
    for (int t = 0; t < 2; ++t) {
      const double p_theta_given_x = p_theta_x[static_cast<std::size_t>(t) * states + xm] / p_x[xm];
      for (std::size_t zm = 0; zm < states; ++zm) {
        const double lhs =
            joint[(static_cast<std::size_t>(t) * states + zm) * states + xm] / p_x[xm];
        double rhs = p_theta_given_x;
        for (std::size_t i = 0; i < n; ++i) {
          rhs *= pz_local[t][(xm >> i) & 1U][(zm >> i) & 1U];
        }
        worst = std::max(worst, std::abs(lhs - rhs));
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Amortization timing

struct SpeedBenchReport {
  std::int64_t datasets = 0;
  double neural_total_ms = 0.0;
  double reference_total_ms = 0.0;
  double neural_per_dataset_ms = 0.0;
  double reference_per_dataset_ms = 0.0;
  double ratio = 0.0;  // neural / reference

  void write_summary(std::ostream& os) const {
    os << "report: speed_bench\n"
       << "datasets: " << datasets << "\n"
       << "neural_total_ms: " << sim::format_g17(neural_total_ms) << "\n"
       << "reference_total_ms: " << sim::format_g17(reference_total_ms) << "\n"
       << "neural_per_dataset_ms: " << sim::format_g17(neural_per_dataset_ms) << "\n"
       << "reference_per_dataset_ms: " << sim::format_g17(reference_per_dataset_ms) << "\n"
       << "ratio: " << sim::format_g17(ratio) << "\n";
  }
};

/// Wall-clock comparison of two dataset-level evaluators over the same
/// datasets, after one untimed warm-up call each.
inline SpeedBenchReport speed_bench(const std::function<void(const sim::EventSet&)>& neural,
                                    const std::function<void(const sim::EventSet&)>& reference,
                                    const std::vector<sim::EventSet>& datasets) {
  if (datasets.empty()) throw std::invalid_argument("speed_bench: no datasets");
  neural(datasets.front());
  reference(datasets.front());

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  for (const auto& e : datasets) neural(e);
  const auto t1 = clock::now();
  for (const auto& e : datasets) reference(e);
  const auto t2 = clock::now();

  SpeedBenchReport rep;
  rep.datasets = static_cast<std::int64_t>(datasets.size());
  rep.neural_total_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  rep.reference_total_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
  rep.neural_per_dataset_ms = rep.neural_total_ms / static_cast<double>(rep.datasets);
  rep.reference_per_dataset_ms = rep.reference_total_ms / static_cast<double>(rep.datasets);
  rep.ratio = rep.reference_total_ms > 0.0 ? rep.neural_total_ms / rep.reference_total_ms
                                           : std::numeric_limits<double>::infinity();
  return rep;
}

}  // namespace setinfer::diag
