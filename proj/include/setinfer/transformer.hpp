#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "setinfer/nn.hpp"

namespace setinfer::nn {

struct TransformerConfig {
  std::int64_t input = 0;  // per-event feature width
  std::int64_t embed = 64;
  std::int64_t blocks = 2;
  std::int64_t heads = 4;
  std::int64_t ff = 128;
  std::int64_t n_max = 200;

  void validate() const {
    if (input <= 0 || embed <= 0 || blocks <= 0 || heads <= 0 || ff <= 0 || n_max <= 0) {
      throw std::invalid_argument("TransformerConfig: sizes must be positive");
    }
    if (embed % heads != 0) {
      throw std::invalid_argument("TransformerConfig: embed width must be divisible by heads");
    }
  }
};

/// Pre-norm decoder-only transformer over an event sequence. Row i of the
/// output is the cumulative embedding of the cardinality-(i+1) prefix: the
/// additive causal mask drives attention weights of later positions to an
/// exact zero through exp underflow.
class CausalTransformer {
 public:
  CausalTransformer(ad::ParameterStore& ps, const std::string& prefix, TransformerConfig cfg,
                    rng::Stream& rng)
      : cfg_(validated(cfg)), prefix_(prefix) {
    auto w = [&](const std::string& name, std::int64_t in, std::int64_t out) {
      return detail::init_linear_weight(ps, prefix + "." + name, in, out, rng);
    };
    auto b = [&](const std::string& name, std::int64_t in, std::int64_t out) {
      return detail::init_linear_bias(ps, prefix + "." + name, in, out, rng);
    };
    embed_w_ = w("embed.w", cfg_.input, cfg_.embed);
    embed_b_ = b("embed.b", cfg_.input, cfg_.embed);
    for (std::int64_t blk = 0; blk < cfg_.blocks; ++blk) {
      Block bl;
      const std::string p = "blk" + std::to_string(blk);
      bl.ln1_g = ps.create(prefix + "." + p + ".ln1.g", ad::Array({cfg_.embed}, 1.0));
      bl.ln1_b = ps.create(prefix + "." + p + ".ln1.b", ad::Array({cfg_.embed}, 0.0));
      bl.wq = w(p + ".wq", cfg_.embed, cfg_.embed);
      bl.bq = b(p + ".bq", cfg_.embed, cfg_.embed);
      bl.wk = w(p + ".wk", cfg_.embed, cfg_.embed);
      bl.wv = w(p + ".wv", cfg_.embed, cfg_.embed);
      bl.bv = b(p + ".bv", cfg_.embed, cfg_.embed);
      bl.wo = w(p + ".wo", cfg_.embed, cfg_.embed);
      bl.bo = b(p + ".bo", cfg_.embed, cfg_.embed);
      bl.ln2_g = ps.create(prefix + "." + p + ".ln2.g", ad::Array({cfg_.embed}, 1.0));
      bl.ln2_b = ps.create(prefix + "." + p + ".ln2.b", ad::Array({cfg_.embed}, 0.0));
      bl.ff_w1 = w(p + ".ff.w0", cfg_.embed, cfg_.ff);
      bl.ff_b1 = b(p + ".ff.b0", cfg_.embed, cfg_.ff);
      bl.ff_w2 = w(p + ".ff.w1", cfg_.ff, cfg_.embed);
      bl.ff_b2 = b(p + ".ff.b1", cfg_.ff, cfg_.embed);
      blocks_.push_back(std::move(bl));
    }
    final_g_ = ps.create(prefix + ".lnf.g", ad::Array({cfg_.embed}, 1.0));
    final_b_ = ps.create(prefix + ".lnf.b", ad::Array({cfg_.embed}, 0.0));
  }

  static CausalTransformer attach(ad::ParameterStore& ps, const std::string& prefix,
                                  TransformerConfig cfg) {
    CausalTransformer t(validated(cfg), prefix);
    auto g = [&](const std::string& name) { return ps.get(prefix + "." + name); };
    t.embed_w_ = g("embed.w");
    t.embed_b_ = g("embed.b");
    for (std::int64_t blk = 0; blk < cfg.blocks; ++blk) {
      Block bl;
      const std::string p = "blk" + std::to_string(blk);
      bl.ln1_g = g(p + ".ln1.g");
      bl.ln1_b = g(p + ".ln1.b");
      bl.wq = g(p + ".wq");
      bl.bq = g(p + ".bq");
      bl.wk = g(p + ".wk");
      bl.wv = g(p + ".wv");
      bl.bv = g(p + ".bv");
      bl.wo = g(p + ".wo");
      bl.bo = g(p + ".bo");
      bl.ln2_g = g(p + ".ln2.g");
      bl.ln2_b = g(p + ".ln2.b");
      bl.ff_w1 = g(p + ".ff.w0");
      bl.ff_b1 = g(p + ".ff.b0");
      bl.ff_w2 = g(p + ".ff.w1");
      bl.ff_b2 = g(p + ".ff.b1");
      t.blocks_.push_back(std::move(bl));
    }
    t.final_g_ = g("lnf.g");
    t.final_b_ = g("lnf.b");
    return t;
  }

  /// events: [N, input] -> cumulative embeddings [N, embed].
  ad::Var forward(const ad::Var& events) const { return forward_impl(events, nullptr); }

  /// Post-softmax attention matrices, one [N, N] array per (block, head).
  std::vector<ad::Array> attention_matrices(const ad::Var& events) const {
    std::vector<ad::Array> att;
    forward_impl(events, &att);
    return att;
  }

  const TransformerConfig& config() const { return cfg_; }

 private:
  struct Block {
    ad::Var ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo, ln2_g, ln2_b, ff_w1, ff_b1, ff_w2,
        ff_b2;
  };

  CausalTransformer(TransformerConfig cfg, std::string prefix)
      : cfg_(cfg), prefix_(std::move(prefix)) {}

  static TransformerConfig validated(TransformerConfig cfg) {
    cfg.validate();
    return cfg;
  }

  static ad::Var layer_norm(const ad::Var& x, const ad::Var& g, const ad::Var& b) {
    ad::Var centered = ad::sub(x, ad::mean(x, 1, true));
    ad::Var var = ad::mean(ad::mul(centered, centered), 1, true);
    ad::Var norm = ad::div(centered, ad::sqrt(var + 1e-5));
    return ad::add(ad::mul(norm, g), b);
  }

  ad::Array causal_mask(std::int64_t n) const {
    ad::Array m(ad::Shape{n, n}, 0.0);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = i + 1; j < n; ++j) m[i * n + j] = -1e30;
    return m;
  }

  ad::Array positional_encoding(std::int64_t n) const {
    ad::Array pe(ad::Shape{n, cfg_.embed});
    for (std::int64_t pos = 0; pos < n; ++pos) {
      for (std::int64_t i = 0; i < cfg_.embed; i += 2) {
        const double freq =
            std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(cfg_.embed));
        pe[pos * cfg_.embed + i] = std::sin(static_cast<double>(pos) * freq);
        if (i + 1 < cfg_.embed) pe[pos * cfg_.embed + i + 1] = std::cos(static_cast<double>(pos) * freq);
      }
    }
    return pe;
  }

  ad::Var forward_impl(const ad::Var& events, std::vector<ad::Array>* att_out) const {
    if (events.value().rank() != 2 || events.shape()[1] != cfg_.input) {
      throw ad::ShapeError("transformer '" + prefix_ + "': expected input width " +
                           std::to_string(cfg_.input) + ", got " + ad::shape_str(events.shape()));
    }
    const std::int64_t n = events.shape()[0];
    if (n < 1) throw std::invalid_argument("transformer: empty sequence");
    if (n > cfg_.n_max) {
      throw std::out_of_range("transformer: sequence length " + std::to_string(n) +
                              " exceeds n_max " + std::to_string(cfg_.n_max));
    }
    const std::int64_t dh = cfg_.embed / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    ad::Var mask = ad::Var::constant(causal_mask(n));

    ad::Var x = ad::add(ad::matmul(events, embed_w_), embed_b_);
    x = ad::add(x, ad::Var::constant(positional_encoding(n)));

    for (const Block& bl : blocks_) {
      ad::Var h = layer_norm(x, bl.ln1_g, bl.ln1_b);
      ad::Var q = ad::add(ad::matmul(h, bl.wq), bl.bq);
      // no key bias: a shared key offset shifts each score row uniformly and
      // softmax is invariant to that, so the parameter would be dead weight
      ad::Var k = ad::matmul(h, bl.wk);
      ad::Var v = ad::add(ad::matmul(h, bl.wv), bl.bv);
      std::vector<ad::Var> head_outs;
      head_outs.reserve(static_cast<std::size_t>(cfg_.heads));
      for (std::int64_t hh = 0; hh < cfg_.heads; ++hh) {
        ad::Var qh = ad::slice(q, 1, hh * dh, dh);
        ad::Var kh = ad::slice(k, 1, hh * dh, dh);
        ad::Var vh = ad::slice(v, 1, hh * dh, dh);
        ad::Var scores = ad::add(ad::mul(ad::matmul(qh, ad::transpose(kh)),
                                         ad::Var::constant(scale)),
                                 mask);
        ad::Var att = ad::softmax(scores, 1);
        if (att_out) att_out->push_back(att.value());
        head_outs.push_back(ad::matmul(att, vh));
      }
      ad::Var attn = ad::concat(head_outs, 1);
      x = ad::add(x, ad::add(ad::matmul(attn, bl.wo), bl.bo));
      ad::Var h2 = layer_norm(x, bl.ln2_g, bl.ln2_b);
      ad::Var ff = ad::add(ad::matmul(ad::gelu(ad::add(ad::matmul(h2, bl.ff_w1), bl.ff_b1)),
                                      bl.ff_w2),
                           bl.ff_b2);
      x = ad::add(x, ff);
    }
    return layer_norm(x, final_g_, final_b_);
  }

  TransformerConfig cfg_;
  std::string prefix_;
  ad::Var embed_w_, embed_b_;
  std::vector<Block> blocks_;
  ad::Var final_g_, final_b_;
};

}  // namespace setinfer::nn
