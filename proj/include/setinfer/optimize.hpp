#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

namespace setinfer::opt {

struct ScalarResult {
  double x = 0.0;
  double fx = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Bounded scalar minimization: golden-section steps with parabolic
/// acceleration (Brent's scheme). No interior bracket is required, so minima
/// at the bounds converge cleanly to the boundary.
inline ScalarResult brent_minimize(const std::function<double(double)>& f, double lo, double hi,
                                   double xatol = 1e-10, int max_iter = 500) {
  if (!(lo < hi)) throw std::invalid_argument("brent_minimize: requires lo < hi");
  const double golden = 0.5 * (3.0 - std::sqrt(5.0));
  const double sqrt_eps = std::sqrt(std::numeric_limits<double>::epsilon());
  double a = lo, b = hi;
  double xf = a + golden * (b - a);
  double nfc = xf, fulc = xf;
  double rat = 0.0, e = 0.0;
  double fx = f(xf);
  double fnfc = fx, ffulc = fx;
  int evals = 1;
  bool converged = true;
  double xm = 0.5 * (a + b);
  double tol1 = sqrt_eps * std::fabs(xf) + xatol / 3.0;
  double tol2 = 2.0 * tol1;

  while (std::fabs(xf - xm) > tol2 - 0.5 * (b - a)) {
    bool use_golden = true;
    if (std::fabs(e) > tol1) {
      // parabola through (xf, nfc, fulc)
      double r = (xf - nfc) * (fx - ffulc);
      double q = (xf - fulc) * (fx - fnfc);
      double p = (xf - fulc) * q - (xf - nfc) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      q = std::fabs(q);
      const double prev = e;
      e = rat;
      if (std::fabs(p) < std::fabs(0.5 * q * prev) && p > q * (a - xf) && p < q * (b - xf)) {
        rat = p / q;
        use_golden = false;
        const double trial = xf + rat;
        if ((trial - a) < tol2 || (b - trial) < tol2) rat = (xm - xf >= 0.0 ? tol1 : -tol1);
      }
    }
    if (use_golden) {
      e = (xf >= xm) ? a - xf : b - xf;
      rat = golden * e;
    }
    const double x = xf + (rat >= 0.0 ? 1.0 : -1.0) * std::max(std::fabs(rat), tol1);
    const double fu = f(x);
    ++evals;
    if (fu <= fx) {
      if (x >= xf) a = xf; else b = xf;
      fulc = nfc; ffulc = fnfc;
      nfc = xf;  fnfc = fx;
      xf = x;    fx = fu;
    } else {
      if (x < xf) a = x; else b = x;
      if (fu <= fnfc || nfc == xf) {
        fulc = nfc; ffulc = fnfc;
        nfc = x;    fnfc = fu;
      } else if (fu <= ffulc || fulc == xf || fulc == nfc) {
        fulc = x; ffulc = fu;
      }
    }
    xm = 0.5 * (a + b);
    tol1 = sqrt_eps * std::fabs(xf) + xatol / 3.0;
    tol2 = 2.0 * tol1;
    if (evals >= max_iter) {
      converged = false;
      break;
    }
  }
  if (!std::isfinite(fx)) converged = false;
  return {xf, fx, evals, converged};
}

struct SimplexResult {
  std::vector<double> x;
  double fx = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Nelder-Mead with the standard reflection/expansion/contraction/shrink
/// coefficients (1, 2, 1/2, 1/2). Infinite objective values are legal and act
/// as soft walls, so box constraints can be imposed inside f.
inline SimplexResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                                 const std::vector<double>& x0, const std::vector<double>& step,
                                 double ftol = 1e-13, int max_iter = 4000) {
  const std::size_t n = x0.size();
  if (n == 0) throw std::invalid_argument("nelder_mead: empty start point");
  if (step.size() != n) throw std::invalid_argument("nelder_mead: step size mismatch");
  std::vector<std::vector<double>> xs(n + 1, x0);
  for (std::size_t i = 0; i < n; ++i) xs[i + 1][i] += step[i];
  std::vector<double> fs(n + 1);
  for (std::size_t i = 0; i <= n; ++i) fs[i] = f(xs[i]);

  int iter = 0;
  bool converged = false;
  std::vector<std::size_t> ord(n + 1);
  while (iter < max_iter) {
    std::iota(ord.begin(), ord.end(), std::size_t{0});
    std::sort(ord.begin(), ord.end(), [&](std::size_t l, std::size_t r) { return fs[l] < fs[r]; });
    const std::size_t best = ord[0], worst = ord[n], second = ord[n - 1];
    if (std::isfinite(fs[worst]) &&
        std::fabs(fs[worst] - fs[best]) <=
            ftol * (std::fabs(fs[best]) + std::fabs(fs[worst]) + 1e-12)) {
      converged = true;
      break;
    }
    ++iter;
    std::vector<double> c(n, 0.0);
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == worst) continue;
      for (std::size_t d = 0; d < n; ++d) c[d] += xs[i][d];
    }
    for (double& v : c) v /= static_cast<double>(n);
    auto along = [&](double t) {
      std::vector<double> y(n);
      for (std::size_t d = 0; d < n; ++d) y[d] = c[d] + t * (c[d] - xs[worst][d]);
      return y;
    };

    std::vector<double> xr = along(1.0);
    const double fr = f(xr);
    if (fr < fs[best]) {
      std::vector<double> xe = along(2.0);
      const double fe = f(xe);
      if (fe < fr) {
        xs[worst] = std::move(xe);
        fs[worst] = fe;
      } else {
        xs[worst] = std::move(xr);
        fs[worst] = fr;
      }
    } else if (fr < fs[second]) {
      xs[worst] = std::move(xr);
      fs[worst] = fr;
    } else {
      const bool outside = fr < fs[worst];
      std::vector<double> xc = along(outside ? 0.5 : -0.5);
      const double fc = f(xc);
      if (fc < std::min(fr, fs[worst])) {
        xs[worst] = std::move(xc);
        fs[worst] = fc;
      } else {
        for (std::size_t i = 0; i <= n; ++i) {
          if (i == best) continue;
          for (std::size_t d = 0; d < n; ++d)
            xs[i][d] = xs[best][d] + 0.5 * (xs[i][d] - xs[best][d]);
          fs[i] = f(xs[i]);
        }
      }
    }
  }
  std::size_t bi = 0;
  for (std::size_t i = 1; i <= n; ++i)
    if (fs[i] < fs[bi]) bi = i;
  return {xs[bi], fs[bi], iter, converged};
}

}  // namespace setinfer::opt
