#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "setinfer/autodiff.hpp"
#include "setinfer/rng.hpp"

namespace setinfer::nn {

enum class Activation { Relu, Gelu };

inline const char* activation_name(Activation a) {
  return a == Activation::Relu ? "relu" : "gelu";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "gelu") return Activation::Gelu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

inline ad::Var activate(Activation a, const ad::Var& v) {
  return a == Activation::Relu ? ad::relu(v) : ad::gelu(v);
}

struct MlpConfig {
  std::int64_t input = 0;
  std::vector<std::int64_t> hidden;
  std::int64_t output = 0;
  Activation activation = Activation::Relu;
};

namespace detail {

/// Fan-in-scaled uniform init for a linear layer's weight and bias.
inline ad::Var init_linear_weight(ad::ParameterStore& ps, const std::string& name,
                                  std::int64_t in, std::int64_t out, rng::Stream& rng,
                                  double scale = 1.0) {
  const double bound = scale / std::sqrt(static_cast<double>(in));
  ad::Array w(ad::Shape{in, out});
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
  return ps.create(name, std::move(w));
}

inline ad::Var init_linear_bias(ad::ParameterStore& ps, const std::string& name, std::int64_t in,
                                std::int64_t out, rng::Stream& rng, double scale = 1.0) {
  const double bound = scale / std::sqrt(static_cast<double>(in));
  ad::Array b(ad::Shape{out});
  for (std::int64_t i = 0; i < b.size(); ++i) b[i] = rng.uniform(-bound, bound);
  return ps.create(name, std::move(b));
}

}  // namespace detail

/// Plain fully connected network. Parameters live in the owning store under
/// `<prefix>.w<k>` / `<prefix>.b<k>`; an empty hidden list degenerates to a
/// single linear layer.
class Mlp {
 public:
  Mlp(ad::ParameterStore& ps, std::string prefix, MlpConfig cfg, rng::Stream& rng,
      double final_scale = 1.0)
      : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
    validate();
    const auto widths = layer_widths();
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const bool last = l + 2 == widths.size();
      const double scale = last ? final_scale : 1.0;
      ws_.push_back(detail::init_linear_weight(ps, layer_name("w", l), widths[l], widths[l + 1],
                                               rng, scale));
      bs_.push_back(
          detail::init_linear_bias(ps, layer_name("b", l), widths[l], widths[l + 1], rng, scale));
    }
  }

  static Mlp attach(ad::ParameterStore& ps, std::string prefix, MlpConfig cfg) {
    Mlp m(std::move(cfg), std::move(prefix));
    const auto widths = m.layer_widths();
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      ad::Var w = ps.get(m.layer_name("w", l));
      ad::Var b = ps.get(m.layer_name("b", l));
      if (w.shape() != ad::Shape{widths[l], widths[l + 1]} ||
          b.shape() != ad::Shape{widths[l + 1]}) {
        throw ad::ShapeError("Mlp::attach: stored shape mismatch at " + m.layer_name("w", l));
      }
      m.ws_.push_back(w);
      m.bs_.push_back(b);
    }
    return m;
  }

  /// x: [rows, input] -> [rows, output].
  ad::Var operator()(const ad::Var& x) const {
    if (x.value().rank() != 2 || x.shape()[1] != cfg_.input) {
      throw ad::ShapeError("mlp '" + prefix_ + "': expected input width " +
                           std::to_string(cfg_.input) + ", got " + ad::shape_str(x.shape()));
    }
    ad::Var h = x;
    for (std::size_t l = 0; l < ws_.size(); ++l) {
      h = ad::add(ad::matmul(h, ws_[l]), bs_[l]);
      if (l + 1 < ws_.size()) h = activate(cfg_.activation, h);
    }
    return h;
  }

  const MlpConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < ws_.size(); ++l) {
      out.push_back(layer_name("w", l));
      out.push_back(layer_name("b", l));
    }
    return out;
  }

 private:
  Mlp(MlpConfig cfg, std::string prefix) : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
    validate();
  }

  void validate() const {
    if (cfg_.input <= 0 || cfg_.output <= 0) {
      throw std::invalid_argument("mlp '" + prefix_ + "': widths must be positive");
    }
    for (auto h : cfg_.hidden) {
      if (h <= 0) throw std::invalid_argument("mlp '" + prefix_ + "': widths must be positive");
    }
  }

  std::vector<std::int64_t> layer_widths() const {
    std::vector<std::int64_t> w{cfg_.input};
    w.insert(w.end(), cfg_.hidden.begin(), cfg_.hidden.end());
    w.push_back(cfg_.output);
    return w;
  }

  std::string layer_name(const char* kind, std::size_t l) const {
    return prefix_ + "." + kind + std::to_string(l);
  }

  MlpConfig cfg_;
  std::string prefix_;
  std::vector<ad::Var> ws_, bs_;
};

// ---------------------------------------------------------------------------
// Gaussian head

/// Smooth clamp keeping log-stds in [lo, hi] without gradient dead zones.
inline ad::Var smooth_clamp(const ad::Var& v, double lo = -7.0, double hi = 5.0) {
  return ad::add(ad::sub(v, ad::softplus(v - hi)), ad::softplus(lo - v));
}

struct GaussianParams {
  ad::Var mean;
  ad::Var log_std;
};

/// Splits raw head output [..., 2d] into mean and clamped log-std.
inline GaussianParams gaussian_head(const ad::Var& raw, std::int64_t dim) {
  const auto& shape = raw.shape();
  if (shape.empty() || shape.back() != 2 * dim) {
    throw ad::ShapeError("gaussian_head: expected trailing width " + std::to_string(2 * dim) +
                         ", got " + ad::shape_str(shape));
  }
  auto parts = ad::chunk(raw, -1, 2);
  return GaussianParams{parts[0], smooth_clamp(parts[1])};
}

/// Diagonal Gaussian log density, summed over the trailing axis:
/// sum_d [ -1/2 log 2pi - log sigma_d - 1/2 ((t_d - mu_d)/sigma_d)^2 ].
inline ad::Var gaussian_log_prob(const GaussianParams& g, const ad::Var& target) {
  for (const ad::Var* v : {&g.mean, &g.log_std, &target}) {
    for (std::int64_t i = 0; i < v->value().size(); ++i) {
      if (!std::isfinite(v->value()[i])) {
        throw ad::NumericError("gaussian_log_prob: non-finite input");
      }
    }
  }
  constexpr double kHalfLog2Pi = 0.9189385332046727418;
  ad::Var z = ad::mul(ad::sub(target, g.mean), ad::exp(ad::mul(g.log_std, ad::Var::constant(-1.0))));
  ad::Var elem = ad::sub(ad::sub(ad::Var::constant(-kHalfLog2Pi), g.log_std),
                         ad::mul(ad::mul(z, z), ad::Var::constant(0.5)));
  return ad::sum(elem, -1);
}

// ---------------------------------------------------------------------------
// optimizer

inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("cosine_lr: step outside [0, total_steps]");
  }
  return base_lr * 0.5 *
         (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::int64_t total_steps = 0;  // > 0 enables cosine annealing to zero
};

/// AdamW with decoupled weight decay and optional cosine annealing. Decay is
/// applied to weight matrices only (names containing ".w"); per-parameter
/// learning-rate multipliers support grouped rates.
class AdamW {
 public:
  AdamW(ad::ParameterStore& ps, AdamWConfig cfg) : ps_(&ps), cfg_(cfg) {
    for (const auto& name : ps.names()) {
      const auto& shape = ps.values(name).shape();
      m_.emplace(name, ad::Array(shape, 0.0));
      v_.emplace(name, ad::Array(shape, 0.0));
    }
  }

  void set_lr_scale(const std::string& name, double scale) {
    if (!ps_->has(name)) throw std::out_of_range("AdamW: unknown parameter '" + name + "'");
    lr_scale_[name] = scale;
  }

  /// Applies `scale` to every parameter whose name starts with `prefix.`.
  void set_group_lr_scale(const std::string& prefix, double scale) {
    bool any = false;
    for (const auto& name : ps_->names()) {
      if (name.rfind(prefix + ".", 0) == 0) {
        lr_scale_[name] = scale;
        any = true;
      }
    }
    if (!any) throw std::out_of_range("AdamW: no parameters under prefix '" + prefix + "'");
  }

  std::int64_t step_count() const { return t_; }

  /// Learning rate the next step will use.
  double current_lr() const {
    if (cfg_.total_steps > 0) {
      return cosine_lr(std::min(t_, cfg_.total_steps), cfg_.total_steps, cfg_.lr);
    }
    return cfg_.lr;
  }

  void step(const ad::GradMap& grads) {
    const double lr_t = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, m] : m_) {
      auto git = grads.find(name);
      if (git == grads.end()) {
        throw std::out_of_range("AdamW: gradient map missing parameter '" + name + "'");
      }
      const ad::Array& g = git->second;
      ad::Array& vv = v_.at(name);
      ad::Array& p = ps_->values(name);
      const double lr = lr_t * lr_scale(name);
      const double wd = decays(name) ? cfg_.weight_decay : 0.0;
      for (std::int64_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        if (!std::isfinite(gi)) {
          throw ad::NumericError("AdamW: non-finite gradient for parameter '" + name + "'");
        }
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        vv[i] = cfg_.beta2 * vv[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = vv[i] / bc2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p[i]);
      }
    }
  }

 private:
  double lr_scale(const std::string& name) const {
    auto it = lr_scale_.find(name);
    return it == lr_scale_.end() ? 1.0 : it->second;
  }

  static bool decays(const std::string& name) { return name.find(".w") != std::string::npos; }

  ad::ParameterStore* ps_;
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, ad::Array> m_, v_;
  std::map<std::string, double> lr_scale_;
};

}  // namespace setinfer::nn
