#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "setinfer/events.hpp"
#include "setinfer/nn.hpp"

namespace setinfer::nn {

struct DeepSetConfig {
  MlpConfig encoder;  // F -> embed_glob + embed_loc
  MlpConfig decoder;  // pooled width (+1 cardinality, +extra) -> head inputs
  std::int64_t embed_glob = 0;
  std::int64_t embed_loc = 0;
  bool concat_cardinality = false;  // extended models condition on N
  std::int64_t extra_width = 0;     // per-dataset conditioning inputs (e.g. theta)
  double pool_scale = 1.0;          // fixed rescale of pooled sums
  double cardinality_scale = 0.01;  // fixed rescale of the appended N

  std::int64_t pooled_width() const { return embed_glob + (concat_cardinality ? 1 : 0); }

  void validate() const {
    if (embed_glob <= 0 || embed_loc < 0 || extra_width < 0) {
      throw std::invalid_argument("DeepSetConfig: widths must be non-negative, embed_glob > 0");
    }
    if (encoder.output != embed_glob + embed_loc) {
      throw std::invalid_argument(
          "DeepSetConfig: encoder output must equal embed_glob + embed_loc");
    }
    if (decoder.input != pooled_width() + extra_width) {
      throw std::invalid_argument("DeepSetConfig: decoder input width must be " +
                                  std::to_string(pooled_width() + extra_width));
    }
  }
};

struct DeepSetOutput {
  ad::Var global;  // [B, decoder output]
  ad::Var local;   // [rows, embed_loc]; undefined when embed_loc == 0
};

/// Permutation-invariant set network: per-event encoder, canonical-order sum
/// pooling of the global chunk, then a decoder on the pooled embedding plus
/// any per-dataset conditioning inputs.
class DeepSet {
 public:
  DeepSet(ad::ParameterStore& ps, const std::string& prefix, DeepSetConfig cfg, rng::Stream& rng,
          double final_scale = 1.0)
      : cfg_(validated(std::move(cfg))),
        enc_(ps, prefix + ".enc", cfg_.encoder, rng),
        dec_(ps, prefix + ".dec", cfg_.decoder, rng, final_scale) {}

  static DeepSet attach(ad::ParameterStore& ps, const std::string& prefix, DeepSetConfig cfg) {
    cfg.validate();
    Mlp enc = Mlp::attach(ps, prefix + ".enc", cfg.encoder);
    Mlp dec = Mlp::attach(ps, prefix + ".dec", cfg.decoder);
    return DeepSet(std::move(enc), std::move(dec), std::move(cfg));
  }

  /// [rows, F] -> per-event embeddings [rows, embed_glob + embed_loc].
  ad::Var encode(const ad::Var& events) const { return enc_(events); }

  /// Pooled per-dataset embedding [B, pooled_width()] from per-event
  /// embeddings; sums each dataset's global chunks in canonical order and
  /// appends the scaled cardinality when configured.
  ad::Var pool(const ad::Var& embeddings, const std::vector<std::int64_t>& offsets) const {
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      if (offsets[s + 1] == offsets[s]) {
        throw std::invalid_argument("deepset: empty event set at segment " + std::to_string(s));
      }
    }
    ad::Var glob =
        cfg_.embed_loc == 0 ? embeddings : ad::slice(embeddings, 1, 0, cfg_.embed_glob);
    ad::Var pooled = ad::segment_sum(glob, offsets);
    if (cfg_.pool_scale != 1.0) pooled = pooled * cfg_.pool_scale;
    if (cfg_.concat_cardinality) {
      const std::int64_t b = static_cast<std::int64_t>(offsets.size()) - 1;
      ad::Array ns(ad::Shape{b, 1});
      for (std::int64_t s = 0; s < b; ++s) {
        ns[s] = static_cast<double>(offsets[static_cast<std::size_t>(s) + 1] -
                                    offsets[static_cast<std::size_t>(s)]) *
                cfg_.cardinality_scale;
      }
      pooled = ad::concat({pooled, ad::Var::constant(std::move(ns))}, 1);
    }
    return pooled;
  }

  /// Decoder over pooled embeddings, with optional [B, extra_width] inputs.
  ad::Var decode(const ad::Var& pooled, const ad::Var& extra = ad::Var()) const {
    if (cfg_.extra_width == 0) {
      if (extra.defined()) throw std::invalid_argument("deepset: unexpected extra inputs");
      return dec_(pooled);
    }
    if (!extra.defined() || extra.value().rank() != 2 || extra.shape()[1] != cfg_.extra_width) {
      throw ad::ShapeError("deepset: expected extra inputs of width " +
                           std::to_string(cfg_.extra_width));
    }
    return dec_(ad::concat({pooled, extra}, 1));
  }

  DeepSetOutput forward(const ad::Var& events, const std::vector<std::int64_t>& offsets,
                        const ad::Var& extra = ad::Var()) const {
    ad::Var emb = encode(events);
    DeepSetOutput out;
    out.global = decode(pool(emb, offsets), extra);
    if (cfg_.embed_loc > 0) out.local = ad::slice(emb, 1, cfg_.embed_glob, cfg_.embed_loc);
    return out;
  }

  /// Single-dataset convenience over an EventSet.
  DeepSetOutput forward(const sim::EventSet& events, const ad::Var& extra = ad::Var()) const {
    if (events.cardinality < 1) throw std::invalid_argument("deepset: empty event set");
    ad::Array x(ad::Shape{events.cardinality, events.feature_width}, events.features);
    return forward(ad::Var::constant(std::move(x)), {0, events.cardinality}, extra);
  }

  const DeepSetConfig& config() const { return cfg_; }
  const Mlp& encoder() const { return enc_; }
  const Mlp& decoder() const { return dec_; }

 private:
  DeepSet(Mlp enc, Mlp dec, DeepSetConfig cfg)
      : cfg_(std::move(cfg)), enc_(std::move(enc)), dec_(std::move(dec)) {}

  static DeepSetConfig validated(DeepSetConfig cfg) {
    cfg.validate();
    return cfg;
  }

  DeepSetConfig cfg_;
  Mlp enc_, dec_;
};

}  // namespace setinfer::nn
