#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

#include "setinfer/stats.hpp"

namespace setinfer::quad {

/// Nodes/weights for ∫ e^{-t²} f(t) dt ≈ Σ wᵢ f(tᵢ). For large n the extreme
/// weights underflow double range, so log_weights carries the exact values.
struct GaussHermiteRule {
  std::vector<double> nodes;  // ascending
  std::vector<double> weights;
  std::vector<double> log_weights;
};

namespace detail {

/// (h_n, h_{n-1}) of the orthonormal physicists' Hermite family, jointly
/// rescaled to stay in range; the rescale cancels in the Newton ratio.
inline std::pair<double, double> hermite_scaled_pair(int n, double t) {
  double hm = 0.0;
  double h = std::pow(std::numbers::pi, -0.25);
  for (int k = 0; k < n; ++k) {
    const double hp = std::sqrt(2.0 / (k + 1)) * t * h -
                      std::sqrt(static_cast<double>(k) / (k + 1)) * hm;
    hm = h;
    h = hp;
    if (std::fabs(h) > 1e140) {
      h *= 1e-140;
      hm *= 1e-140;
    }
  }
  return {h, hm};
}

/// log Σ_{k<n} h_k(t)², overflow-safe; the Gauss weight is the reciprocal of
/// the sum (Christoffel function of the orthonormal family).
inline double log_christoffel_sum(int n, double t) {
  double hm = 0.0;
  double h = std::pow(std::numbers::pi, -0.25);
  double s = h * h;
  double log_scale = 0.0;
  for (int k = 0; k + 1 < n; ++k) {
    const double hp = std::sqrt(2.0 / (k + 1)) * t * h -
                      std::sqrt(static_cast<double>(k) / (k + 1)) * hm;
    hm = h;
    h = hp;
    s += h * h;
    if (std::fabs(h) > 1e140) {
      h *= 1e-140;
      hm *= 1e-140;
      s *= 1e-280;  // terms this drops are ~e^{-640} of the running sum
      log_scale += 280.0 * std::numbers::ln10;
    }
  }
  return std::log(s) + log_scale;
}

}  // namespace detail

inline GaussHermiteRule compute_gauss_hermite(int n) {
  if (n < 1) throw std::invalid_argument("gauss_hermite: node count must be >= 1");
  GaussHermiteRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  rule.log_weights.resize(n);
  const double sqrt_pi = std::sqrt(std::numbers::pi);
  if (n == 1) {
    rule.nodes[0] = 0.0;
    rule.weights[0] = sqrt_pi;
    rule.log_weights[0] = std::log(sqrt_pi);
    return rule;
  }
  // nodes = eigenvalues of the Jacobi matrix (diag 0, offdiag sqrt(k/2)),
  // polished by two Newton steps on the orthonormal recurrence
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd sub(n - 1);
  for (int k = 1; k < n; ++k) sub[k - 1] = std::sqrt(0.5 * k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
  for (int i = 0; i < n; ++i) {
    double t = es.eigenvalues()[i];
    for (int pass = 0; pass < 2; ++pass) {
      const auto [hn, hnm] = detail::hermite_scaled_pair(n, t);
      const double deriv = std::sqrt(2.0 * n) * hnm;
      if (deriv != 0.0) t -= hn / deriv;
    }
    const double lw = -detail::log_christoffel_sum(n, t);
    rule.nodes[i] = t;
    rule.log_weights[i] = lw;
    rule.weights[i] = std::exp(lw);
  }
  return rule;
}

inline const GaussHermiteRule& gauss_hermite(int n) {
  static std::map<int, GaussHermiteRule> cache;
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, compute_gauss_hermite(n)).first;
  return it->second;
}

/// E_{z ~ No(mean, sd)}[g(z)].
inline double gaussian_expectation(const std::function<double(double)>& g, double mean, double sd,
                                   int n) {
  const auto& r = gauss_hermite(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    acc += r.weights[i] * g(mean + std::numbers::sqrt2 * sd * r.nodes[i]);
  return acc / std::sqrt(std::numbers::pi);
}

/// log E_{z ~ No(mean, sd)}[exp(log_g(z))], fully in log space.
inline double gaussian_log_expectation(const std::function<double(double)>& log_g, double mean,
                                       double sd, int n) {
  const auto& r = gauss_hermite(n);
  std::vector<double> terms(n);
  for (int i = 0; i < n; ++i)
    terms[i] = r.log_weights[i] + log_g(mean + std::numbers::sqrt2 * sd * r.nodes[i]);
  return stats::logsumexp(terms) - 0.5 * std::log(std::numbers::pi);
}

namespace detail {

inline double simpson_rec(const std::function<double(double)>& f, double a, double b, double fa,
                          double fm, double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::fabs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

}  // namespace detail

inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                               double tol = 1e-12, int max_depth = 60) {
  if (!(a < b)) throw std::invalid_argument("adaptive_simpson: requires a < b");
  const double m = 0.5 * (a + b);
  const double fa = f(a), fm = f(m), fb = f(b);
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return detail::simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

}  // namespace setinfer::quad
