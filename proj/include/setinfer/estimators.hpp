#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "setinfer/checkpoint.hpp"
#include "setinfer/deepset.hpp"
#include "setinfer/oracles.hpp"
#include "setinfer/simulators.hpp"
#include "setinfer/transformer.hpp"

namespace setinfer::est {

using oracle::GaussianPosterior;

/// Training diverged or produced non-finite values; callers map this to a
/// distinct failure class (the CLI reserves an exit code for it).
struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Arch { DeepSet, Transformer };

inline const char* arch_name(Arch a) { return a == Arch::DeepSet ? "deepset" : "transformer"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "deepset") return Arch::DeepSet;
  if (s == "transformer") return Arch::Transformer;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

// ---------------------------------------------------------------------------
// Training configs

struct HierTrainConfig {
  sim::ModelTag model = sim::ModelTag::Mvn;
  Arch arch = Arch::DeepSet;
  std::int64_t dataset_count = 50000;
  std::int64_t batch_size = 128;
  std::int64_t epochs = 50;
  double validation_fraction = 0.1;
  // Adds the per-event term to the loss for models with local parameters.
  // None of the built-in models declare any, so the flag is accepted but the
  // loss keeps only the global term.
  bool local_head = false;
  // Each task contributes a uniformly drawn prefix of itself to the loss
  // instead of the full set. Events are iid given the parameters, so a prefix
  // is an exact draw of a smaller experiment; this amortizes the estimator
  // across cardinalities for models whose task sampler pins the set size.
  // The sequence architecture already trains every prefix through its causal
  // mask, so the flag only affects the deep-set path.
  bool prefix_augment = false;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::int64_t patience = 10;
  // set-network sizing
  std::vector<std::int64_t> enc_hidden{512, 512};
  std::int64_t embed = 256;
  std::vector<std::int64_t> dec_hidden{256};
  // sequence-network sizing
  std::int64_t tr_embed = 64;
  std::int64_t tr_blocks = 2;
  std::int64_t tr_heads = 4;
  std::int64_t tr_ff = 128;
  std::int64_t head_hidden = 64;
  // optional warm start: parameters are loaded from this checkpoint (matched
  // by name, shapes must agree) before the first optimizer step
  std::string init_checkpoint;
  sim::ModelConfigs sims;

  void validate() const {
    if (dataset_count < batch_size || batch_size < 1) {
      throw std::invalid_argument("HierTrainConfig: dataset count must cover one batch");
    }
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw std::invalid_argument("HierTrainConfig: validation fraction must lie in (0, 1)");
    }
    if (epochs < 1 || patience < 1 || !(lr > 0.0)) {
      throw std::invalid_argument("HierTrainConfig: epochs, patience and lr must be positive");
    }
  }
};

struct FreqTrainConfig {
  std::int64_t steps = 30000;
  std::int64_t positives = 100;
  std::int64_t negatives = 100;
  double delta_lo = 0.5, delta_hi = 2.0;
  double theta0_lo = 3.0, theta0_hi = 7.0;
  double nu_lo = 0.5, nu_hi = 2.0;
  double lr_encoder = 1e-4;  // per-element network
  double lr_set = 1e-3;      // pooled-embedding network
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> enc_hidden{512, 512};
  std::int64_t embed = 256;
  std::vector<std::int64_t> dec_hidden{256};
  std::int64_t val_batches = 2;
  std::int64_t eval_every = 250;
  std::string init_checkpoint;  // optional warm start, as in HierTrainConfig
  sim::ModelConfigs sims;

  void validate() const {
    if (steps < 0) throw std::invalid_argument("FreqTrainConfig: negative step count");
    if (positives < 2 || positives % 2 != 0 || negatives < 1) {
      throw std::invalid_argument(
          "FreqTrainConfig: positives must be even (split across the two offsets)");
    }
    if (!(delta_lo > 0.0) || delta_hi < delta_lo) {
      throw std::invalid_argument("FreqTrainConfig: offsets must be positive");
    }
    if (!(lr_encoder > 0.0) || !(lr_set > 0.0) || eval_every < 1 || val_batches < 1) {
      throw std::invalid_argument("FreqTrainConfig: bad optimizer or eval settings");
    }
    if (!(theta0_lo - delta_hi > 0.0)) {
      throw std::invalid_argument("FreqTrainConfig: theta0 - delta can leave the rate support");
    }
  }
};

// ---------------------------------------------------------------------------
// Shared helpers

namespace detail {

inline std::int64_t theta_dim(sim::ModelTag model, const sim::ModelConfigs& sims) {
  return model == sim::ModelTag::Mvn ? sims.mvn.dimension : 2;
}

inline std::int64_t feature_width(sim::ModelTag model, const sim::ModelConfigs& sims) {
  return model == sim::ModelTag::Mvn ? sims.mvn.feature_width() : 1;
}

/// Fixed rescale keeping pooled sums O(1) across the model's cardinality range.
inline double pool_scale_for(sim::ModelTag model, const sim::ModelConfigs& sims) {
  switch (model) {
    case sim::ModelTag::Mvn: return 1.0 / static_cast<double>(sims.mvn.n_max);
    case sim::ModelTag::RateMixture:
      return 1.0 / sims.rate.rate(sims.rate.theta_hi, sims.rate.nu_hi);
    case sim::ModelTag::BumpHunt: return 1.0 / static_cast<double>(sims.bump.n0);
  }
  throw std::invalid_argument("pool_scale_for: unknown model");
}

inline std::vector<double> targets_of(const sim::EventSet& e) {
  if (!e.truth) throw std::invalid_argument("training task without ground truth");
  std::vector<double> t = e.truth->theta;
  if (e.truth->theta_nu) t.push_back(*e.truth->theta_nu);
  return t;
}

inline std::string join_int_list(const std::vector<std::int64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<std::int64_t> split_int_list(const std::string& s) {
  std::vector<std::int64_t> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (!item.empty()) out.push_back(std::stoll(item));
  }
  return out;
}

/// Events reordered into a content-defined order, so any permutation of the
/// same set maps to one bit pattern before the order-sensitive sum pooling.
inline sim::EventSet canonical_order(const sim::EventSet& e) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(e.cardinality));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
    const double* ra = e.row(a);
    const double* rb = e.row(b);
    return std::lexicographical_compare(ra, ra + e.feature_width, rb, rb + e.feature_width);
  });
  return e.permuted(idx);
}

struct SetBatch {
  ad::Var features;                   // [rows, F]
  std::vector<std::int64_t> offsets;  // B + 1 boundaries
  ad::Var targets;                    // [B, D]
  std::uint64_t first_index = 0;
};

inline SetBatch assemble_batch(sim::ModelTag model, const sim::ModelConfigs& sims,
                               const std::vector<sim::EventSet>& sets,
                               std::int64_t theta_dim_) {
  std::int64_t rows = 0;
  for (const auto& s : sets) rows += s.cardinality;
  const std::int64_t width = feature_width(model, sims);
  ad::Array x(ad::Shape{rows, width});
  ad::Array t(ad::Shape{static_cast<std::int64_t>(sets.size()), theta_dim_});
  std::vector<std::int64_t> offsets{0};
  std::int64_t r = 0;
  for (std::size_t b = 0; b < sets.size(); ++b) {
    const auto& s = sets[b];
    std::copy(s.features.begin(), s.features.end(), &x[r * width]);
    r += s.cardinality;
    offsets.push_back(r);
    const auto tv = targets_of(s);
    if (static_cast<std::int64_t>(tv.size()) != theta_dim_) {
      throw std::invalid_argument("training task target width mismatch");
    }
    std::copy(tv.begin(), tv.end(), &t[static_cast<std::int64_t>(b) * theta_dim_]);
  }
  SetBatch out;
  out.features = ad::Var::constant(std::move(x));
  out.offsets = std::move(offsets);
  out.targets = ad::Var::constant(std::move(t));
  return out;
}

inline void shuffle_indices(std::vector<std::uint64_t>& idx, rng::Stream& rs) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[rs.uniform_index(i)]);
  }
}

[[noreturn]] inline void training_failure(const std::string& who, std::int64_t epoch,
                                          std::uint64_t master_seed, std::uint64_t first_index,
                                          const std::string& why) {
  throw NumericFailure(who + ": non-finite loss at epoch " + std::to_string(epoch) +
                       ", master seed " + std::to_string(master_seed) +
                       ", first task index " + std::to_string(first_index) +
                       (why.empty() ? "" : " (" + why + ")"));
}

inline void warm_start(ad::ParameterStore& ps, const std::string& path) {
  if (path.empty()) return;
  ckpt::Checkpoint::load_file(path).load_into(ps);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Hierarchical loss

/// Negative per-dataset evidence terms: the batch-mean global log-density,
/// plus (when a local head is present) the batch-mean of the per-event local
/// log-densities. `total` is built as the plain sum of the two reported terms,
/// so the decomposition is exact by construction.
struct HierLoss {
  ad::Var total;
  ad::Var global_term;
  ad::Var local_term;
};

inline HierLoss hierarchical_loss(const nn::GaussianParams& global, const ad::Var& theta,
                                  const nn::GaussianParams* local = nullptr,
                                  const ad::Var* local_targets = nullptr) {
  if (theta.value().rank() != 2) throw ad::ShapeError("hierarchical_loss: targets must be [B, D]");
  const double batch = static_cast<double>(theta.shape()[0]);
  HierLoss out;
  out.global_term = -ad::mean_all(nn::gaussian_log_prob(global, theta));
  if (local != nullptr) {
    if (local_targets == nullptr) {
      throw std::invalid_argument("hierarchical_loss: local head without targets");
    }
    out.local_term = -(ad::sum_all(nn::gaussian_log_prob(*local, *local_targets)) / batch);
  } else {
    out.local_term = ad::Var::constant(0.0);
  }
  out.total = out.global_term + out.local_term;
  return out;
}

// ---------------------------------------------------------------------------
// Hierarchical posterior training

namespace detail {

inline nn::DeepSetConfig hier_deepset_config(const HierTrainConfig& cfg) {
  nn::DeepSetConfig ds;
  ds.encoder.input = feature_width(cfg.model, cfg.sims);
  ds.encoder.hidden = cfg.enc_hidden;
  ds.encoder.output = cfg.embed;
  ds.embed_glob = cfg.embed;
  ds.concat_cardinality = true;
  ds.pool_scale = pool_scale_for(cfg.model, cfg.sims);
  ds.decoder.input = ds.pooled_width();
  ds.decoder.hidden = cfg.dec_hidden;
  ds.decoder.output = 2 * theta_dim(cfg.model, cfg.sims);
  return ds;
}

inline nn::TransformerConfig hier_transformer_config(const HierTrainConfig& cfg) {
  nn::TransformerConfig tr;
  tr.input = feature_width(cfg.model, cfg.sims);
  tr.embed = cfg.tr_embed;
  tr.blocks = cfg.tr_blocks;
  tr.heads = cfg.tr_heads;
  tr.ff = cfg.tr_ff;
  tr.n_max = cfg.model == sim::ModelTag::Mvn ? cfg.sims.mvn.n_max : 1024;
  return tr;
}

inline void write_common_meta(ckpt::Checkpoint& ck, const HierTrainConfig& cfg) {
  ck.set_meta("config.kind", "hier");
  ck.set_meta("config.model", sim::model_name(cfg.model));
  ck.set_meta("config.arch", arch_name(cfg.arch));
  ck.set_meta("config.input", feature_width(cfg.model, cfg.sims));
  ck.set_meta("config.theta_dim", theta_dim(cfg.model, cfg.sims));
  ck.set_meta("config.seed", std::to_string(cfg.seed));
  ck.set_meta("config.prefix_augment", cfg.prefix_augment ? "true" : "false");
  ck.set_meta("config.artifact", static_cast<std::int64_t>(ckpt::kArtifactVersion));
}

struct BestTracker {
  double best_val = std::numeric_limits<double>::infinity();
  std::int64_t best_step = -1;
  std::int64_t since_improvement = 0;
  std::map<std::string, ad::Array> snapshot;

  /// Returns true when this value became the new best.
  bool observe(double val, std::int64_t step, const ad::ParameterStore& ps) {
    if (val < best_val) {
      best_val = val;
      best_step = step;
      since_improvement = 0;
      snapshot.clear();
      for (const auto& name : ps.names()) snapshot.emplace(name, ps.values(name));
      return true;
    }
    ++since_improvement;
    return false;
  }
};

}  // namespace detail

inline ckpt::Checkpoint train_transformer_posterior(HierTrainConfig cfg);

/// Trains the amortized posterior q(theta | {x}) on prior-sampled simulator
/// tasks and returns the checkpoint with the lowest validation loss. The
/// deep-set variant batches whole datasets through segment pooling; the
/// sequence variant is dispatched to train_transformer_posterior.
inline ckpt::Checkpoint train_hierarchical_posterior(const HierTrainConfig& cfg) {
  cfg.validate();
  if (cfg.arch == Arch::Transformer) return train_transformer_posterior(cfg);

  const std::int64_t dim = detail::theta_dim(cfg.model, cfg.sims);
  const auto n_val = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(static_cast<double>(cfg.dataset_count) *
                                                cfg.validation_fraction)));
  const std::int64_t n_train = cfg.dataset_count - n_val;
  if (n_train < cfg.batch_size) {
    throw std::invalid_argument("train_hierarchical_posterior: too few training tasks");
  }

  ad::ParameterStore ps;
  rng::Stream init_rng = rng::Stream::substream(cfg.seed, 0xA11);
  nn::DeepSet net(ps, "ds", detail::hier_deepset_config(cfg), init_rng);
  detail::warm_start(ps, cfg.init_checkpoint);

  const std::int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  oc.total_steps = cfg.epochs * steps_per_epoch;
  nn::AdamW opt(ps, oc);

  auto prefix_for_training = [&](sim::EventSet e, std::uint64_t tag) {
    if (!cfg.prefix_augment || e.cardinality <= 1) return e;
    rng::Stream r = rng::Stream::substream(cfg.seed, tag);
    const auto n =
        1 + static_cast<std::int64_t>(r.uniform_index(static_cast<std::uint64_t>(e.cardinality)));
    return n == e.cardinality ? e : e.prefix(n);
  };

  std::vector<sim::EventSet> val_sets;
  val_sets.reserve(static_cast<std::size_t>(n_val));
  for (std::int64_t i = n_train; i < cfg.dataset_count; ++i) {
    val_sets.push_back(prefix_for_training(
        sim::sample_training_task(cfg.model, cfg.sims, cfg.seed, static_cast<std::uint64_t>(i)),
        (1ULL << 63) + static_cast<std::uint64_t>(i)));
  }

  auto batch_nll = [&](const std::vector<sim::EventSet>& sets) {
    auto batch = detail::assemble_batch(cfg.model, cfg.sims, sets, dim);
    auto out = net.forward(batch.features, batch.offsets);
    auto head = nn::gaussian_head(out.global, dim);
    return hierarchical_loss(head, batch.targets);
  };
  auto validation_loss = [&]() {
    double total = 0.0;
    for (std::size_t start = 0; start < val_sets.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto stop = std::min(val_sets.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<sim::EventSet> chunk(val_sets.begin() + static_cast<std::ptrdiff_t>(start),
                                       val_sets.begin() + static_cast<std::ptrdiff_t>(stop));
      total += batch_nll(chunk).total.value()[0] * static_cast<double>(chunk.size());
    }
    return total / static_cast<double>(val_sets.size());
  };

  ckpt::Checkpoint ck;
  detail::BestTracker best;
  std::vector<std::uint64_t> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  bool early = false;
  std::int64_t epochs_run = 0;

  for (std::int64_t epoch = 0; epoch < cfg.epochs && !early; ++epoch) {
    rng::Stream shuffle_rng =
        rng::Stream::substream(cfg.seed, 0xE000 + static_cast<std::uint64_t>(epoch));
    detail::shuffle_indices(order, shuffle_rng);
    double train_sum = 0.0;
    std::int64_t train_count = 0;
    for (std::int64_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::int64_t stop = std::min(n_train, start + cfg.batch_size);
      std::vector<sim::EventSet> sets;
      sets.reserve(static_cast<std::size_t>(stop - start));
      for (std::int64_t k = start; k < stop; ++k) {
        const std::uint64_t id = order[static_cast<std::size_t>(k)];
        sets.push_back(prefix_for_training(
            sim::sample_training_task(cfg.model, cfg.sims, cfg.seed, id),
            (1ULL << 62) + static_cast<std::uint64_t>(epoch) * (1ULL << 32) + id));
      }
      try {
        auto loss = batch_nll(sets);
        const double lv = loss.total.value()[0];
        if (!std::isfinite(lv)) throw ad::NumericError("loss value not finite");
        auto grads = ad::backward(loss.total, ps);
        opt.step(grads);
        train_sum += lv * static_cast<double>(stop - start);
      } catch (const ad::NumericError& e) {
        detail::training_failure("train_hierarchical_posterior", epoch, cfg.seed,
                                 order[static_cast<std::size_t>(start)], e.what());
      }
      ps.zero_grad();
      train_count += stop - start;
    }
    const double train_loss = train_sum / static_cast<double>(train_count);
    const double val_loss = validation_loss();
    ck.curve.push_back({epoch, opt.current_lr(), train_loss, val_loss});
    best.observe(val_loss, epoch, ps);
    epochs_run = epoch + 1;
    if (best.since_improvement >= cfg.patience) early = true;
  }

  detail::write_common_meta(ck, cfg);
  ck.set_meta("config.enc_hidden", detail::join_int_list(cfg.enc_hidden));
  ck.set_meta("config.embed", cfg.embed);
  ck.set_meta("config.dec_hidden", detail::join_int_list(cfg.dec_hidden));
  ck.set_meta_f("config.pool_scale", detail::pool_scale_for(cfg.model, cfg.sims));
  ck.set_meta("run.best_epoch", best.best_step);
  ck.set_meta_f("run.best_val", best.best_val);
  ck.set_meta_f("run.final_val", ck.curve.back().val_loss);
  ck.set_meta("run.epochs_run", epochs_run);
  if (early) {
    ck.set_meta("run.warning", "validation loss stalled for " + std::to_string(cfg.patience) +
                                   " epochs; stopped early");
  }
  for (auto& [name, arr] : best.snapshot) ck.params.emplace_back(name, std::move(arr));
  ck.stamp_fingerprint();
  return ck;
}

/// Sequence variant: trains on full-length event sequences and scores every
/// prefix cardinality at once through the causal mask; the loss per dataset
/// is the sum of the per-prefix posterior log-densities.
inline ckpt::Checkpoint train_transformer_posterior(HierTrainConfig cfg) {
  cfg.arch = Arch::Transformer;
  cfg.validate();
  const std::int64_t dim = detail::theta_dim(cfg.model, cfg.sims);
  const std::int64_t width = detail::feature_width(cfg.model, cfg.sims);
  const auto tr_cfg = detail::hier_transformer_config(cfg);
  const std::int64_t fixed_n = cfg.model == sim::ModelTag::Mvn ? tr_cfg.n_max : -1;

  const auto n_val = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(static_cast<double>(cfg.dataset_count) *
                                                cfg.validation_fraction)));
  const std::int64_t n_train = cfg.dataset_count - n_val;
  if (n_train < cfg.batch_size) {
    throw std::invalid_argument("train_transformer_posterior: too few training tasks");
  }

  ad::ParameterStore ps;
  rng::Stream init_rng = rng::Stream::substream(cfg.seed, 0xA11);
  nn::CausalTransformer net(ps, "tr", tr_cfg, init_rng);
  nn::MlpConfig head_cfg;
  head_cfg.input = tr_cfg.embed;
  head_cfg.hidden = {cfg.head_hidden};
  head_cfg.output = 2 * dim;
  nn::Mlp head(ps, "head", head_cfg, init_rng);
  detail::warm_start(ps, cfg.init_checkpoint);

  const std::int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  oc.total_steps = cfg.epochs * steps_per_epoch;
  nn::AdamW opt(ps, oc);

  auto draw_task = [&](std::uint64_t index) {
    return fixed_n > 0
               ? sim::sample_training_task_fixed_n(cfg.model, cfg.sims, cfg.seed, index, fixed_n)
               : sim::sample_training_task(cfg.model, cfg.sims, cfg.seed, index);
  };
  // negative sum of prefix log-densities for one sequence, scaled by 1/batch
  auto sequence_loss = [&](const sim::EventSet& task, double inv_batch) {
    ad::Array x(ad::Shape{task.cardinality, width}, task.features);
    ad::Var h = net.forward(ad::Var::constant(std::move(x)));
    auto gp = nn::gaussian_head(head(h), dim);
    const auto tv = detail::targets_of(task);
    ad::Var target = ad::Var::constant(ad::Array(ad::Shape{dim}, tv));
    return ad::sum_all(nn::gaussian_log_prob(gp, target)) * (-inv_batch);
  };

  std::vector<sim::EventSet> val_sets;
  for (std::int64_t i = n_train; i < cfg.dataset_count; ++i) {
    val_sets.push_back(draw_task(static_cast<std::uint64_t>(i)));
  }
  auto validation_loss = [&]() {
    double total = 0.0;
    for (const auto& task : val_sets) total += sequence_loss(task, 1.0).value()[0];
    return total / static_cast<double>(val_sets.size());
  };

  ckpt::Checkpoint ck;
  detail::BestTracker best;
  std::vector<std::uint64_t> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  bool early = false;
  std::int64_t epochs_run = 0;

  for (std::int64_t epoch = 0; epoch < cfg.epochs && !early; ++epoch) {
    rng::Stream shuffle_rng =
        rng::Stream::substream(cfg.seed, 0xE000 + static_cast<std::uint64_t>(epoch));
    detail::shuffle_indices(order, shuffle_rng);
    double train_sum = 0.0;
    std::int64_t train_count = 0;
    for (std::int64_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::int64_t stop = std::min(n_train, start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(stop - start);
      try {
        double batch_loss = 0.0;
        ad::GradMap grads;
        for (std::int64_t k = start; k < stop; ++k) {
          auto task = draw_task(order[static_cast<std::size_t>(k)]);
          ad::Var loss = sequence_loss(task, inv_batch);
          batch_loss += loss.value()[0];
          if (k + 1 < stop) {
            ad::backward(loss);  // grads accumulate in the store until zero_grad
          } else {
            grads = ad::backward(loss, ps);
          }
        }
        if (!std::isfinite(batch_loss)) throw ad::NumericError("loss value not finite");
        opt.step(grads);
        train_sum += batch_loss * static_cast<double>(stop - start);
      } catch (const ad::NumericError& e) {
        detail::training_failure("train_transformer_posterior", epoch, cfg.seed,
                                 order[static_cast<std::size_t>(start)], e.what());
      }
      ps.zero_grad();
      train_count += stop - start;
    }
    const double train_loss = train_sum / static_cast<double>(train_count);
    const double val_loss = validation_loss();
    ck.curve.push_back({epoch, opt.current_lr(), train_loss, val_loss});
    best.observe(val_loss, epoch, ps);
    epochs_run = epoch + 1;
    if (best.since_improvement >= cfg.patience) early = true;
  }

  detail::write_common_meta(ck, cfg);
  ck.set_meta("config.tr_embed", tr_cfg.embed);
  ck.set_meta("config.tr_blocks", tr_cfg.blocks);
  ck.set_meta("config.tr_heads", tr_cfg.heads);
  ck.set_meta("config.tr_ff", tr_cfg.ff);
  ck.set_meta("config.n_max", tr_cfg.n_max);
  ck.set_meta("config.head_hidden", cfg.head_hidden);
  ck.set_meta("run.best_epoch", best.best_step);
  ck.set_meta_f("run.best_val", best.best_val);
  ck.set_meta_f("run.final_val", ck.curve.back().val_loss);
  ck.set_meta("run.epochs_run", epochs_run);
  if (early) {
    ck.set_meta("run.warning", "validation loss stalled for " + std::to_string(cfg.patience) +
                                   " epochs; stopped early");
  }
  for (auto& [name, arr] : best.snapshot) ck.params.emplace_back(name, std::move(arr));
  ck.stamp_fingerprint();
  return ck;
}

// ---------------------------------------------------------------------------
// Amortized inference

/// Frozen posterior network rebuilt from a checkpoint; reusable across many
/// datasets without re-loading parameters.
class HierPosteriorNet {
 public:
  static HierPosteriorNet from_checkpoint(const ckpt::Checkpoint& ck) {
    if (ck.require_meta("config.kind") != "hier") {
      throw std::invalid_argument("checkpoint does not hold a posterior estimator");
    }
    HierPosteriorNet net;
    net.arch_ = parse_arch(ck.require_meta("config.arch"));
    net.input_ = ck.meta_int("config.input");
    net.dim_ = ck.meta_int("config.theta_dim");
    ck.load_into(net.ps_);
    if (net.arch_ == Arch::DeepSet) {
      nn::DeepSetConfig ds;
      ds.encoder.input = net.input_;
      ds.encoder.hidden = detail::split_int_list(ck.require_meta("config.enc_hidden"));
      ds.encoder.output = ck.meta_int("config.embed");
      ds.embed_glob = ds.encoder.output;
      ds.concat_cardinality = true;
      ds.pool_scale = ck.meta_double("config.pool_scale");
      ds.decoder.input = ds.pooled_width();
      ds.decoder.hidden = detail::split_int_list(ck.require_meta("config.dec_hidden"));
      ds.decoder.output = 2 * net.dim_;
      net.set_ = nn::DeepSet::attach(net.ps_, "ds", ds);
    } else {
      nn::TransformerConfig tr;
      tr.input = net.input_;
      tr.embed = ck.meta_int("config.tr_embed");
      tr.blocks = ck.meta_int("config.tr_blocks");
      tr.heads = ck.meta_int("config.tr_heads");
      tr.ff = ck.meta_int("config.tr_ff");
      tr.n_max = ck.meta_int("config.n_max");
      net.seq_ = nn::CausalTransformer::attach(net.ps_, "tr", tr);
      nn::MlpConfig head_cfg;
      head_cfg.input = tr.embed;
      head_cfg.hidden = {ck.meta_int("config.head_hidden")};
      head_cfg.output = 2 * net.dim_;
      net.head_ = nn::Mlp::attach(net.ps_, "head", head_cfg);
    }
    return net;
  }

  Arch arch() const { return arch_; }
  std::int64_t theta_dim() const { return dim_; }
  std::int64_t input_width() const { return input_; }

  GaussianPosterior infer(const sim::EventSet& events) const {
    if (events.cardinality < 1) throw std::invalid_argument("infer: empty event set");
    if (events.feature_width != input_) {
      throw std::invalid_argument("infer: event feature width " +
                                  std::to_string(events.feature_width) +
                                  " does not match checkpoint width " + std::to_string(input_));
    }
    if (arch_ == Arch::DeepSet) {
      auto out = set_->forward(detail::canonical_order(events));
      return head_to_posterior(nn::gaussian_head(out.global, dim_), 0);
    }
    return prefix_posteriors(events).back();
  }

  /// Posterior after each prefix 1..N. Single forward pass for the sequence
  /// network; repeated pooling for the set network.
  std::vector<GaussianPosterior> prefix_posteriors(const sim::EventSet& events) const {
    if (events.cardinality < 1) throw std::invalid_argument("infer: empty event set");
    if (events.feature_width != input_) {
      throw std::invalid_argument("infer: event feature width mismatch");
    }
    std::vector<GaussianPosterior> out;
    out.reserve(static_cast<std::size_t>(events.cardinality));
    if (arch_ == Arch::DeepSet) {
      for (std::int64_t n = 1; n <= events.cardinality; ++n) out.push_back(infer(events.prefix(n)));
      return out;
    }
    ad::Array x(ad::Shape{events.cardinality, events.feature_width}, events.features);
    ad::Var h = seq_->forward(ad::Var::constant(std::move(x)));
    auto gp = nn::gaussian_head((*head_)(h), dim_);
    for (std::int64_t i = 0; i < events.cardinality; ++i) out.push_back(head_to_posterior(gp, i));
    return out;
  }

 private:
  HierPosteriorNet() = default;

  GaussianPosterior head_to_posterior(const nn::GaussianParams& gp, std::int64_t row) const {
    GaussianPosterior post;
    post.mean.resize(static_cast<std::size_t>(dim_));
    post.var.resize(static_cast<std::size_t>(dim_));
    for (std::int64_t d = 0; d < dim_; ++d) {
      post.mean[static_cast<std::size_t>(d)] = gp.mean.value()[row * dim_ + d];
      const double ls = gp.log_std.value()[row * dim_ + d];
      post.var[static_cast<std::size_t>(d)] = std::exp(2.0 * ls);
    }
    return post;
  }

  ad::ParameterStore ps_;
  std::optional<nn::DeepSet> set_;
  std::optional<nn::CausalTransformer> seq_;
  std::optional<nn::Mlp> head_;
  Arch arch_ = Arch::DeepSet;
  std::int64_t input_ = 0;
  std::int64_t dim_ = 0;
};

inline GaussianPosterior infer_posterior(const ckpt::Checkpoint& ck, const sim::EventSet& events) {
  return HierPosteriorNet::from_checkpoint(ck).infer(events);
}

// ---------------------------------------------------------------------------
// Frequentist dataset-wide test statistic

/// Per-step curriculum: reference parameters, offset, and the simulated
/// parameter/label of every dataset in the minibatch. Negatives come first,
/// then the +offset positives, then the -offset positives; every dataset is
/// evaluated at conditioning theta0.
struct FreqBatchPlan {
  double theta0 = 0.0;
  double delta = 0.0;
  double nu0 = 0.0;
  std::vector<double> theta_sim;
  std::vector<double> nu_sim;
  std::vector<double> labels;
  std::uint64_t sim_seed_base = 0;
};

inline FreqBatchPlan plan_freq_batch(const FreqTrainConfig& cfg, std::int64_t step) {
  rng::Stream rs = rng::Stream::substream(cfg.seed, 2 * static_cast<std::uint64_t>(step));
  FreqBatchPlan plan;
  plan.theta0 = rs.uniform(cfg.theta0_lo, cfg.theta0_hi);
  plan.delta = rs.uniform(cfg.delta_lo, cfg.delta_hi);
  plan.nu0 = rs.uniform(cfg.nu_lo, cfg.nu_hi);
  for (std::int64_t k = 0; k < cfg.negatives; ++k) {
    plan.theta_sim.push_back(plan.theta0);
    plan.nu_sim.push_back(plan.nu0);
    plan.labels.push_back(0.0);
  }
  for (std::int64_t side = 0; side < 2; ++side) {
    const double theta = side == 0 ? plan.theta0 + plan.delta : plan.theta0 - plan.delta;
    for (std::int64_t k = 0; k < cfg.positives / 2; ++k) {
      plan.theta_sim.push_back(theta);
      plan.nu_sim.push_back(rs.uniform(cfg.nu_lo, cfg.nu_hi));
      plan.labels.push_back(1.0);
    }
  }
  plan.sim_seed_base = rng::stream_seed(cfg.seed, 2 * static_cast<std::uint64_t>(step) + 1);
  return plan;
}

namespace detail {

inline nn::DeepSetConfig freq_deepset_config(const FreqTrainConfig& cfg) {
  nn::DeepSetConfig ds;
  ds.encoder.input = 1;
  ds.encoder.hidden = cfg.enc_hidden;
  ds.encoder.output = cfg.embed;
  ds.embed_glob = cfg.embed;
  ds.concat_cardinality = true;
  ds.extra_width = 1;  // conditioning theta
  ds.pool_scale = pool_scale_for(sim::ModelTag::RateMixture, cfg.sims);
  ds.decoder.input = ds.pooled_width() + 1;
  ds.decoder.hidden = cfg.dec_hidden;
  ds.decoder.output = 1;
  return ds;
}

inline sim::EventSet simulate_nonempty(const sim::RateMixtureConfig& rc, double theta, double nu,
                                       std::uint64_t seed) {
  sim::EventSet e = sim::simulate_rate_mixture(rc, theta, nu, seed);
  while (e.cardinality == 0) {  // cardinality 0 has probability exp(-60) or less here
    seed = rng::stream_seed(seed, 0xDEAD);
    e = sim::simulate_rate_mixture(rc, theta, nu, seed);
  }
  return e;
}

struct FreqBatch {
  ad::Var features;
  std::vector<std::int64_t> offsets;
  ad::Var conditioning;  // [B, 1], all theta0
  ad::Var labels;        // [B, 1]
};

inline FreqBatch assemble_freq_batch(const FreqTrainConfig& cfg, const FreqBatchPlan& plan) {
  const auto b = static_cast<std::int64_t>(plan.theta_sim.size());
  std::vector<sim::EventSet> sets;
  sets.reserve(static_cast<std::size_t>(b));
  std::int64_t rows = 0;
  for (std::int64_t k = 0; k < b; ++k) {
    sets.push_back(simulate_nonempty(cfg.sims.rate, plan.theta_sim[static_cast<std::size_t>(k)],
                                     plan.nu_sim[static_cast<std::size_t>(k)],
                                     rng::stream_seed(plan.sim_seed_base,
                                                      static_cast<std::uint64_t>(k))));
    rows += sets.back().cardinality;
  }
  ad::Array x(ad::Shape{rows, 1});
  ad::Array cond(ad::Shape{b, 1}, plan.theta0);
  ad::Array y(ad::Shape{b, 1}, plan.labels);
  std::vector<std::int64_t> offsets{0};
  std::int64_t r = 0;
  for (const auto& s : sets) {
    std::copy(s.features.begin(), s.features.end(), &x[r]);
    r += s.cardinality;
    offsets.push_back(r);
  }
  FreqBatch out;
  out.features = ad::Var::constant(std::move(x));
  out.offsets = std::move(offsets);
  out.conditioning = ad::Var::constant(std::move(cond));
  out.labels = ad::Var::constant(std::move(y));
  return out;
}

/// Stable binary cross-entropy on logits: mean of softplus(l) - y l.
inline ad::Var bce_with_logits(const ad::Var& logits, const ad::Var& labels) {
  return ad::mean_all(ad::softplus(logits) - labels * logits);
}

}  // namespace detail

/// Trains the dataset-level classifier whose sigmoid output plays the role of
/// a parameterized test statistic. The final layer starts at zero, so the
/// untrained network outputs exactly 1/2 everywhere.
inline ckpt::Checkpoint train_neural_test_statistic(const FreqTrainConfig& cfg) {
  cfg.validate();
  ad::ParameterStore ps;
  rng::Stream init_rng = rng::Stream::substream(cfg.seed, 0xA11);
  nn::DeepSet net(ps, "freq", detail::freq_deepset_config(cfg), init_rng, 0.0);
  detail::warm_start(ps, cfg.init_checkpoint);

  nn::AdamWConfig oc;
  oc.lr = cfg.lr_set;
  oc.weight_decay = cfg.weight_decay;
  nn::AdamW opt(ps, oc);
  opt.set_group_lr_scale("freq.enc", cfg.lr_encoder / cfg.lr_set);

  auto batch_loss = [&](const FreqBatchPlan& plan) {
    auto batch = detail::assemble_freq_batch(cfg, plan);
    ad::Var logits = net.forward(batch.features, batch.offsets, batch.conditioning).global;
    return detail::bce_with_logits(logits, batch.labels);
  };
  // validation batches use step indices past the end of the training schedule
  auto validation_loss = [&]() {
    double total = 0.0;
    for (std::int64_t j = 0; j < cfg.val_batches; ++j) {
      total += batch_loss(plan_freq_batch(cfg, cfg.steps + j)).value()[0];
    }
    return total / static_cast<double>(cfg.val_batches);
  };

  ckpt::Checkpoint ck;
  detail::BestTracker best;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    auto plan = plan_freq_batch(cfg, step);
    double lv = 0.0;
    try {
      ad::Var loss = batch_loss(plan);
      lv = loss.value()[0];
      if (!std::isfinite(lv)) throw ad::NumericError("loss value not finite");
      auto grads = ad::backward(loss, ps);
      opt.step(grads);
    } catch (const ad::NumericError& e) {
      throw NumericFailure("train_neural_test_statistic: non-finite loss at step " +
                           std::to_string(step) + ", master seed " + std::to_string(cfg.seed) +
                           ", batch seed " + std::to_string(plan.sim_seed_base) + " (" +
                           e.what() + ")");
    }
    ps.zero_grad();
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      const double val = validation_loss();
      ck.curve.push_back({step + 1, opt.current_lr(), lv, val});
      best.observe(val, step + 1, ps);
    }
  }
  if (best.best_step < 0) best.observe(validation_loss(), 0, ps);  // untrained fallback

  ck.set_meta("config.kind", "freq");
  ck.set_meta("config.model", sim::model_name(sim::ModelTag::RateMixture));
  ck.set_meta("config.arch", arch_name(Arch::DeepSet));
  ck.set_meta("config.input", static_cast<std::int64_t>(1));
  ck.set_meta("config.enc_hidden", detail::join_int_list(cfg.enc_hidden));
  ck.set_meta("config.embed", cfg.embed);
  ck.set_meta("config.dec_hidden", detail::join_int_list(cfg.dec_hidden));
  ck.set_meta_f("config.pool_scale", detail::pool_scale_for(sim::ModelTag::RateMixture, cfg.sims));
  ck.set_meta("config.seed", std::to_string(cfg.seed));
  ck.set_meta("config.artifact", static_cast<std::int64_t>(ckpt::kArtifactVersion));
  ck.set_meta("run.best_step", best.best_step);
  ck.set_meta_f("run.best_val", best.best_val);
  for (auto& [name, arr] : best.snapshot) ck.params.emplace_back(name, std::move(arr));
  ck.stamp_fingerprint();
  return ck;
}

// ---------------------------------------------------------------------------
// Test-statistic scans

struct GridMin {
  std::size_t index = 0;
  double theta_hat = 0.0;
};

/// Grid argmin (ties toward the lower index) refined by a quadratic through
/// the minimum and its neighbors; boundary minima are returned unrefined.
inline GridMin refine_grid_minimum(const std::vector<double>& grid,
                                   const std::vector<double>& values) {
  if (grid.empty() || grid.size() != values.size()) {
    throw std::invalid_argument("refine_grid_minimum: grid/value size mismatch");
  }
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    if (!(grid[i] < grid[i + 1])) {
      throw std::invalid_argument("refine_grid_minimum: grid must be strictly increasing");
    }
  }
  GridMin out;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] < values[out.index]) out.index = i;
  }
  out.theta_hat = grid[out.index];
  const std::size_t i = out.index;
  if (i == 0 || i + 1 == grid.size()) return out;
  const double x0 = grid[i - 1], x1 = grid[i], x2 = grid[i + 1];
  const double f0 = values[i - 1], f1 = values[i], f2 = values[i + 1];
  const double num = (x1 - x0) * (x1 - x0) * (f1 - f2) - (x1 - x2) * (x1 - x2) * (f1 - f0);
  // den is minus the weighted second difference, so a proper interior minimum
  // makes it strictly negative; zero means the triple is flat.
  const double den = (x1 - x0) * (f1 - f2) - (x1 - x2) * (f1 - f0);
  if (!(den < 0.0) || !std::isfinite(num)) return out;
  out.theta_hat = std::clamp(x1 - 0.5 * num / den, x0, x2);
  return out;
}

struct ScanResult {
  std::vector<double> theta_grid;
  std::vector<double> s;      // sigmoid network output per grid point
  std::vector<double> logit;  // pre-sigmoid output, rank-safe when s saturates
  std::size_t argmin_index = 0;
  double theta_hat = 0.0;
};

/// Frozen classifier rebuilt from a checkpoint.
class FreqNet {
 public:
  static FreqNet from_checkpoint(const ckpt::Checkpoint& ck) {
    if (ck.require_meta("config.kind") != "freq") {
      throw std::invalid_argument("checkpoint does not hold a test-statistic network");
    }
    FreqNet net;
    ck.load_into(net.ps_);
    nn::DeepSetConfig ds;
    ds.encoder.input = ck.meta_int("config.input");
    ds.encoder.hidden = detail::split_int_list(ck.require_meta("config.enc_hidden"));
    ds.encoder.output = ck.meta_int("config.embed");
    ds.embed_glob = ds.encoder.output;
    ds.concat_cardinality = true;
    ds.extra_width = 1;
    ds.pool_scale = ck.meta_double("config.pool_scale");
    ds.decoder.input = ds.pooled_width() + 1;
    ds.decoder.hidden = detail::split_int_list(ck.require_meta("config.dec_hidden"));
    ds.decoder.output = 1;
    net.set_ = nn::DeepSet::attach(net.ps_, "freq", ds);
    return net;
  }

  /// Classifier output s({x}, theta) in (0, 1).
  double output(const sim::EventSet& events, double theta) const {
    return scan(events, {theta}).s[0];
  }

  /// One encoder+pooling pass per dataset; the pooled embedding is reused for
  /// every grid point through a single stacked decoder evaluation.
  ScanResult scan(const sim::EventSet& events, const std::vector<double>& grid) const {
    if (grid.empty()) throw std::invalid_argument("scan: empty grid");
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
      if (!(grid[i] < grid[i + 1])) {
        throw std::invalid_argument("scan: grid must be strictly increasing");
      }
    }
    if (events.cardinality < 1) throw std::invalid_argument("scan: empty event set");
    if (events.feature_width != 1) throw std::invalid_argument("scan: expected width-1 events");

    ad::Array x(ad::Shape{events.cardinality, 1}, events.features);
    ad::Var emb = set_->encode(ad::Var::constant(std::move(x)));
    const ad::Array pooled = set_->pool(emb, {0, events.cardinality}).value();

    const auto g = static_cast<std::int64_t>(grid.size());
    const std::int64_t w = pooled.shape()[1];
    ad::Array tiled(ad::Shape{g, w});
    for (std::int64_t i = 0; i < g; ++i) {
      std::copy(pooled.data(), pooled.data() + w, tiled.data() + i * w);
    }
    ad::Array cond(ad::Shape{g, 1}, grid);
    ad::Var logits =
        set_->decode(ad::Var::constant(std::move(tiled)), ad::Var::constant(std::move(cond)));
    ScanResult out;
    out.theta_grid = grid;
    out.s.resize(grid.size());
    out.logit.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
      out.logit[i] = logits.value()[static_cast<std::int64_t>(i)];
      out.s[i] = 1.0 / (1.0 + std::exp(-out.logit[i]));
    }
    const auto r = refine_grid_minimum(grid, out.s);
    out.argmin_index = r.index;
    out.theta_hat = r.theta_hat;
    return out;
  }

 private:
  FreqNet() = default;

  ad::ParameterStore ps_;
  std::optional<nn::DeepSet> set_;
};

inline ScanResult scan_test_statistic(const ckpt::Checkpoint& ck, const sim::EventSet& events,
                                      const std::vector<double>& grid) {
  return FreqNet::from_checkpoint(ck).scan(events, grid);
}

}  // namespace setinfer::est
