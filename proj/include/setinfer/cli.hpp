#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "setinfer/checkpoint.hpp"
#include "setinfer/diagnostics.hpp"
#include "setinfer/estimators.hpp"
#include "setinfer/oracles.hpp"
#include "setinfer/simulators.hpp"

namespace setinfer::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

/// Bad or missing configuration, including inputs named by the config that do
/// not exist. Mapped to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem failures on files we could name but not read or write. Mapped
/// to exit code 3.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Run configuration: dotted-key structured text, strict schema

/// One `key = value` pair per line, nesting through dotted keys, `#` comments.
/// Typed getters mark keys as consumed; after a command has read its schema,
/// reject_unknown_keys() turns every leftover key into an error, so typos
/// cannot be silently absorbed.
class RunConfig {
 public:
  static RunConfig parse(std::istream& is, const std::string& origin) {
    RunConfig rc;
    rc.origin_ = origin;
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected 'key = value', got '" + t + "'");
      }
      const std::string key = trim(t.substr(0, eq));
      const std::string value = trim(t.substr(eq + 1));
      if (key.empty() || !valid_key(key)) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": bad config key '" + key +
                          "'");
      }
      if (value.empty()) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": config key '" + key +
                          "' has an empty value");
      }
      if (!rc.kv_.emplace(key, value).second) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate config key '" +
                          key + "'");
      }
    }
    return rc;
  }

  static RunConfig parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path + "'");
    return parse(is, path);
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  /// Flag overrides (--seed, --out) replace the config value before hashing.
  void override_value(const std::string& key, const std::string& value) { kv_[key] = value; }

  std::string require_str(const std::string& key) {
    const std::string* v = find(key);
    if (!v) throw ConfigError("missing required config key '" + key + "'");
    return *v;
  }
  std::string get_str(const std::string& key, const std::string& def) {
    const std::string* v = find(key);
    return v ? *v : def;
  }

  std::int64_t require_i64(const std::string& key) { return parse_i64(key, require_str(key)); }
  std::int64_t get_i64(const std::string& key, std::int64_t def) {
    const std::string* v = find(key);
    return v ? parse_i64(key, *v) : def;
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) {
    const std::string* v = find(key);
    if (!v) return def;
    if (!v->empty() && (*v)[0] == '-') {
      throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + *v + "'");
    }
    try {
      std::size_t used = 0;
      const std::uint64_t out = std::stoull(*v, &used);
      if (used != v->size()) throw std::invalid_argument("");
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + *v + "'");
    }
  }
  double get_f64(const std::string& key, double def) {
    const std::string* v = find(key);
    return v ? parse_f64(key, *v) : def;
  }
  bool get_bool(const std::string& key, bool def) {
    const std::string* v = find(key);
    if (!v) return def;
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + *v + "'");
  }
  std::vector<double> get_f64_list(const std::string& key, std::vector<double> def) {
    const std::string* v = find(key);
    if (!v) return def;
    std::vector<double> out;
    for (const auto& item : split_list(key, *v)) out.push_back(parse_f64(key, item));
    return out;
  }
  std::vector<std::int64_t> get_i64_list(const std::string& key, std::vector<std::int64_t> def) {
    const std::string* v = find(key);
    if (!v) return def;
    std::vector<std::int64_t> out;
    for (const auto& item : split_list(key, *v)) out.push_back(parse_i64(key, item));
    return out;
  }

  void reject_unknown_keys() const {
    std::string bad;
    for (const auto& [k, v] : kv_) {
      if (!seen_.count(k)) bad += (bad.empty() ? "" : ", ") + ("'" + k + "'");
    }
    if (!bad.empty()) throw ConfigError("unknown config key " + bad + " in " + origin_);
  }

  /// Sorted key=value lines of every result-affecting key; the output
  /// directory is plumbing, not physics, so it stays out of the hash.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : kv_) {
      if (k == "out") continue;
      out += k + "=" + v + "\n";
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  static bool valid_key(const std::string& k) {
    for (char c : k) {
      const bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
      if (!ok) return false;
    }
    return k.front() != '.' && k.back() != '.';
  }
  const std::string* find(const std::string& key) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return nullptr;
    seen_.insert(key);
    return &it->second;
  }
  static std::int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const std::int64_t out = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument("");
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
  }
  static double parse_f64(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("");
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
  }
  static std::vector<std::string> split_list(const std::string& key, const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(v);
    while (std::getline(ss, cur, ',')) {
      cur = trim(cur);
      if (cur.empty()) throw ConfigError("config key '" + key + "': empty list entry");
      out.push_back(cur);
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
  }

  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> seen_;
  std::string origin_;
};

// ---------------------------------------------------------------------------
// Common settings and artifact metadata

struct CommonConfig {
  std::string command;
  std::optional<sim::ModelTag> model;
  sim::ModelConfigs sims;
  std::uint64_t seed = 0;
  std::string out = ".";
  std::string artifact = "1";
  std::uint64_t config_hash = 0;
  int workers = 1;
};

inline void read_model_blocks(RunConfig& rc, sim::ModelConfigs& s) {
  {
    auto& m = s.mvn;
    const auto sig = rc.get_f64_list("mvn.sigma2", {m.sigma2[0], m.sigma2[1], m.sigma2[2]});
    if (sig.size() != 3) throw ConfigError("config key 'mvn.sigma2': expected 3 entries");
    std::copy(sig.begin(), sig.end(), m.sigma2.begin());
    m.draws_per_event = static_cast<int>(rc.get_i64("mvn.draws_per_event", m.draws_per_event));
    m.prior_mean = rc.get_f64("mvn.prior_mean", m.prior_mean);
    m.prior_std = rc.get_f64("mvn.prior_std", m.prior_std);
    m.n_max = rc.get_i64("mvn.n_max", m.n_max);
    if (m.draws_per_event < 1 || m.n_max < 1 || !(m.prior_std > 0.0)) {
      throw ConfigError("mvn block: draws_per_event and n_max must be >= 1, prior_std > 0");
    }
    for (double v : m.sigma2) {
      if (!(v > 0.0)) throw ConfigError("config key 'mvn.sigma2': entries must be positive");
    }
  }
  {
    auto& r = s.rate;
    r.n_s = rc.get_f64("rate.n_s", r.n_s);
    r.n_b = rc.get_f64("rate.n_b", r.n_b);
    r.mu_s = rc.get_f64("rate.mu_s", r.mu_s);
    r.sigma_s = rc.get_f64("rate.sigma_s", r.sigma_s);
    r.mu_b = rc.get_f64("rate.mu_b", r.mu_b);
    r.sigma_b = rc.get_f64("rate.sigma_b", r.sigma_b);
    r.theta_lo = rc.get_f64("rate.theta_lo", r.theta_lo);
    r.theta_hi = rc.get_f64("rate.theta_hi", r.theta_hi);
    r.nu_lo = rc.get_f64("rate.nu_lo", r.nu_lo);
    r.nu_hi = rc.get_f64("rate.nu_hi", r.nu_hi);
    if (!(r.sigma_s > 0.0) || !(r.sigma_b > 0.0) || !(r.theta_lo < r.theta_hi) ||
        !(r.nu_lo < r.nu_hi) || !(r.n_s > 0.0) || !(r.n_b > 0.0)) {
      throw ConfigError("rate block: yields and widths must be positive, ranges ordered");
    }
  }
  {
    auto& b = s.bump;
    b.n0 = rc.get_i64("bump.n0", b.n0);
    b.sigma_s = rc.get_f64("bump.sigma_s", b.sigma_s);
    b.mu_b = rc.get_f64("bump.mu_b", b.mu_b);
    b.sigma_b = rc.get_f64("bump.sigma_b", b.sigma_b);
    b.prior_theta_lo = rc.get_f64("bump.prior_theta_lo", b.prior_theta_lo);
    b.prior_theta_hi = rc.get_f64("bump.prior_theta_hi", b.prior_theta_hi);
    b.prior_nu_mean = rc.get_f64("bump.prior_nu_mean", b.prior_nu_mean);
    b.prior_nu_std = rc.get_f64("bump.prior_nu_std", b.prior_nu_std);
    if (b.n0 < 1 || !(b.sigma_s > 0.0) || !(b.sigma_b > 0.0) || !(b.prior_nu_std > 0.0) ||
        !(b.prior_theta_lo < b.prior_theta_hi)) {
      throw ConfigError("bump block: n0 >= 1, widths positive, theta prior ordered");
    }
  }
}

inline sim::Metadata artifact_metadata(const CommonConfig& c) {
  return {{"config_hash", hex64(c.config_hash)},
          {"master_seed", std::to_string(c.seed)},
          {"artifact_version", c.artifact},
          {"command", c.command}};
}

/// Buffered report writer. Content accumulates in memory behind the standard
/// metadata block; finish() persists it, fail() persists whatever was
/// accumulated plus a FAILED marker so partial results survive an abort.
class Report {
 public:
  Report(fs::path path, const CommonConfig& c) : path_(std::move(path)) {
    for (const auto& [k, v] : artifact_metadata(c)) buf_ += "# " + k + ": " + v + "\n";
  }
  void line(const std::string& s) {
    buf_ += s;
    buf_ += '\n';
  }
  void raw(const std::string& s) { buf_ += s; }
  void finish() {
    write(buf_);
    done_ = true;
  }
  void fail(const std::string& why) {
    if (done_) return;
    try {
      write(buf_ + "FAILED: " + why + "\n");
    } catch (const std::exception&) {
      // a failed failure marker must not mask the original error
    }
    done_ = true;
  }

 private:
  void write(const std::string& s) const {
    std::ofstream os(path_);
    if (!os) throw IoError("cannot write '" + path_.string() + "'");
    os << s;
    os.flush();
    if (!os) throw IoError("write failed for '" + path_.string() + "'");
  }

  fs::path path_;
  std::string buf_;
  bool done_ = false;
};

// ---------------------------------------------------------------------------
// Small helpers

/// Index-sharded thread pool. Work item i only ever depends on i, so results
/// are identical for any worker count.
inline void parallel_for(std::int64_t n, int workers,
                         const std::function<void(std::int64_t)>& fn) {
  const int use = static_cast<int>(std::min<std::int64_t>(std::max(1, workers), std::max<std::int64_t>(n, 1)));
  if (use <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::mutex mu;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(use);
  for (int w = 0; w < use; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first_error) first_error = std::current_exception();
          next.store(n);
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline std::vector<double> linspace(double lo, double hi, std::int64_t points) {
  if (points < 2 || !(hi > lo)) {
    throw ConfigError("grid: need at least two points with hi > lo");
  }
  std::vector<double> g(points);
  for (std::int64_t i = 0; i < points; ++i) {
    g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  }
  return g;
}

inline void require_file(const std::string& key, const std::string& path) {
  if (!fs::exists(path)) {
    throw ConfigError("config key '" + key + "': file '" + path + "' does not exist");
  }
}

inline sim::EventSetBatch load_batch(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  try {
    return sim::read_eventset_batch(is);
  } catch (const std::exception& e) {
    throw IoError("cannot parse '" + path + "': " + e.what());
  }
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return std::sqrt(sq / static_cast<double>(v.size() - 1));
}

inline double rmse(const std::vector<double>& a, const std::vector<double>& b) {
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(sq / static_cast<double>(a.size()));
}

inline sim::ModelTag require_model(const CommonConfig& c) {
  if (!c.model) throw ConfigError("missing required config key 'model'");
  return *c.model;
}

inline void check_checkpoint_model(const ckpt::Checkpoint& ck, const CommonConfig& c) {
  if (!c.model) return;
  const std::string have = ck.require_meta("config.model");
  if (have != sim::model_name(*c.model)) {
    throw ConfigError("config model '" + std::string(sim::model_name(*c.model)) +
                      "' does not match checkpoint model '" + have + "'");
  }
}

// ---------------------------------------------------------------------------
// simulate

inline void cmd_simulate(RunConfig& rc, const CommonConfig& c) {
  const auto model = require_model(c);
  const std::int64_t count = rc.require_i64("simulate.count");
  const std::int64_t per_file = rc.get_i64("simulate.per_file", 1000);
  const std::string prefix = rc.get_str("simulate.prefix", "datasets");
  rc.reject_unknown_keys();
  if (count < 0) throw ConfigError("config key 'simulate.count': must be >= 0");
  if (per_file < 1) throw ConfigError("config key 'simulate.per_file': must be >= 1");

  const std::int64_t shards = count == 0 ? 0 : (count + per_file - 1) / per_file;
  std::vector<std::uint64_t> seeds(count);
  std::vector<std::int64_t> cards(count);
  std::vector<std::vector<double>> truths(count);
  std::vector<std::string> files(shards);

  Report man(fs::path(c.out) / "manifest.txt", c);
  try {
    parallel_for(shards, c.workers, [&](std::int64_t sh) {
      const std::int64_t lo = sh * per_file;
      const std::int64_t hi = std::min(count, lo + per_file);
      std::vector<sim::EventSet> sets;
      sets.reserve(static_cast<std::size_t>(hi - lo));
      for (std::int64_t k = lo; k < hi; ++k) {
        sets.push_back(
            sim::sample_training_task(model, c.sims, c.seed, static_cast<std::uint64_t>(k)));
        seeds[k] = sets.back().seed;
        cards[k] = sets.back().cardinality;
        truths[k] = est::detail::targets_of(sets.back());
      }
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%05lld.events", prefix.c_str(),
                    static_cast<long long>(sh));
      files[sh] = name;
      sim::Metadata md = artifact_metadata(c);
      md.emplace_back("model", sim::model_name(model));
      md.emplace_back("shard", std::to_string(sh));
      md.emplace_back("first_index", std::to_string(lo));
      const fs::path path = fs::path(c.out) / name;
      std::ofstream os(path);
      if (!os) throw IoError("cannot write '" + path.string() + "'");
      sim::write_eventset_batch(os, sets, md);
      os.flush();
      if (!os) throw IoError("write failed for '" + path.string() + "'");
    });

    man.line("report: simulate");
    man.line("model: " + std::string(sim::model_name(model)));
    man.line("count: " + std::to_string(count));
    man.line("shards: " + std::to_string(shards));
    for (std::int64_t sh = 0; sh < shards; ++sh) {
      const std::int64_t lo = sh * per_file;
      const std::int64_t hi = std::min(count, lo + per_file);
      man.line("shard: " + std::to_string(sh) + " " + files[sh] + " " + std::to_string(lo) + " " +
               std::to_string(hi - lo));
    }
    if (count > 0) {
      const auto [mn_it, mx_it] = std::minmax_element(cards.begin(), cards.end());
      const std::int64_t mn = *mn_it, mx = *mx_it;
      const std::int64_t bins = std::min<std::int64_t>(10, mx - mn + 1);
      const double width = static_cast<double>(mx - mn + 1) / static_cast<double>(bins);
      std::vector<std::int64_t> hist(bins, 0);
      for (std::int64_t n : cards) {
        auto b = static_cast<std::int64_t>(static_cast<double>(n - mn) / width);
        ++hist[std::min(b, bins - 1)];
      }
      man.line("cardinality_min: " + std::to_string(mn));
      man.line("cardinality_max: " + std::to_string(mx));
      for (std::int64_t b = 0; b < bins; ++b) {
        const auto blo = mn + static_cast<std::int64_t>(std::ceil(width * static_cast<double>(b)));
        const auto bhi = std::min(
            mx, mn + static_cast<std::int64_t>(std::ceil(width * static_cast<double>(b + 1))) - 1);
        man.line("cardinality_hist: " + std::to_string(blo) + " " + std::to_string(bhi) + " " +
                 std::to_string(hist[b]));
      }
      const std::size_t dims = truths[0].size();
      for (std::size_t d = 0; d < dims; ++d) {
        std::vector<double> col(count);
        for (std::int64_t k = 0; k < count; ++k) col[k] = truths[k][d];
        double mean = 0.0;
        for (double v : col) mean += v;
        mean /= static_cast<double>(count);
        man.line("truth_mean_p" + std::to_string(d) + ": " + sim::format_g17(mean));
        man.line("truth_sd_p" + std::to_string(d) + ": " + sim::format_g17(sample_sd(col)));
      }
      man.line("datasets:");
      std::string header = "index,seed,cardinality";
      for (std::size_t d = 0; d < dims; ++d) header += ",p" + std::to_string(d);
      man.line(header);
      for (std::int64_t k = 0; k < count; ++k) {
        std::string row =
            std::to_string(k) + "," + std::to_string(seeds[k]) + "," + std::to_string(cards[k]);
        for (double v : truths[k]) row += "," + sim::format_g17(v);
        man.line(row);
      }
    }
    man.finish();
  } catch (const std::exception& e) {
    man.fail(e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// train

inline void cmd_train(RunConfig& rc, const CommonConfig& c) {
  const std::string kind = rc.require_str("train.kind");
  if (kind != "hier" && kind != "freq") {
    throw ConfigError("config key 'train.kind': expected 'hier' or 'freq', got '" + kind + "'");
  }
  const std::string ck_name = rc.get_str("train.checkpoint_name", "checkpoint.txt");
  const std::string log_name = rc.get_str("train.runlog_name", "runlog.csv");
  const std::string resume = rc.get_str("train.resume", "");
  if (!resume.empty()) {
    require_file("train.resume", resume);
    const auto prev = ckpt::Checkpoint::load_file(resume);
    if (prev.require_meta("config.kind") != kind) {
      throw ConfigError("config key 'train.resume': checkpoint '" + resume + "' holds a '" +
                        prev.require_meta("config.kind") + "' network, expected '" + kind + "'");
    }
  }

  est::HierTrainConfig tc;
  est::FreqTrainConfig fc;
  const bool is_hier = kind == "hier";
  if (is_hier) {
    tc.model = require_model(c);
    tc.sims = c.sims;
    tc.seed = c.seed;
    tc.arch = est::parse_arch(rc.get_str("train.arch", "deepset"));
    tc.dataset_count = rc.get_i64("train.dataset_count", tc.dataset_count);
    tc.batch_size = rc.get_i64("train.batch_size", tc.batch_size);
    tc.epochs = rc.get_i64("train.epochs", tc.epochs);
    tc.validation_fraction = rc.get_f64("train.val_fraction", tc.validation_fraction);
    tc.local_head = rc.get_bool("train.local_head", tc.local_head);
    tc.prefix_augment = rc.get_bool("train.prefix_augment", tc.prefix_augment);
    tc.lr = rc.get_f64("train.lr", tc.lr);
    tc.weight_decay = rc.get_f64("train.weight_decay", tc.weight_decay);
    tc.patience = rc.get_i64("train.patience", tc.patience);
    tc.enc_hidden = rc.get_i64_list("train.enc_hidden", tc.enc_hidden);
    tc.embed = rc.get_i64("train.embed", tc.embed);
    tc.dec_hidden = rc.get_i64_list("train.dec_hidden", tc.dec_hidden);
    tc.tr_embed = rc.get_i64("train.tr_embed", tc.tr_embed);
    tc.tr_blocks = rc.get_i64("train.tr_blocks", tc.tr_blocks);
    tc.tr_heads = rc.get_i64("train.tr_heads", tc.tr_heads);
    tc.tr_ff = rc.get_i64("train.tr_ff", tc.tr_ff);
    tc.head_hidden = rc.get_i64("train.head_hidden", tc.head_hidden);
    tc.init_checkpoint = resume;
    rc.reject_unknown_keys();
    tc.validate();
  } else {
    if (c.model && *c.model != sim::ModelTag::RateMixture) {
      throw ConfigError("train.kind 'freq' requires model 'rate_mixture'");
    }
    fc.sims = c.sims;
    fc.seed = c.seed;
    fc.steps = rc.get_i64("train.steps", fc.steps);
    fc.positives = rc.get_i64("train.positives", fc.positives);
    fc.negatives = rc.get_i64("train.negatives", fc.negatives);
    fc.delta_lo = rc.get_f64("train.delta_lo", fc.delta_lo);
    fc.delta_hi = rc.get_f64("train.delta_hi", fc.delta_hi);
    fc.theta0_lo = rc.get_f64("train.theta0_lo", fc.theta0_lo);
    fc.theta0_hi = rc.get_f64("train.theta0_hi", fc.theta0_hi);
    fc.nu_lo = rc.get_f64("train.nu_lo", fc.nu_lo);
    fc.nu_hi = rc.get_f64("train.nu_hi", fc.nu_hi);
    fc.lr_encoder = rc.get_f64("train.lr_encoder", fc.lr_encoder);
    fc.lr_set = rc.get_f64("train.lr_set", fc.lr_set);
    fc.weight_decay = rc.get_f64("train.weight_decay", fc.weight_decay);
    fc.val_batches = rc.get_i64("train.val_batches", fc.val_batches);
    fc.eval_every = rc.get_i64("train.eval_every", fc.eval_every);
    fc.enc_hidden = rc.get_i64_list("train.enc_hidden", fc.enc_hidden);
    fc.embed = rc.get_i64("train.embed", fc.embed);
    fc.dec_hidden = rc.get_i64_list("train.dec_hidden", fc.dec_hidden);
    fc.init_checkpoint = resume;
    rc.reject_unknown_keys();
    fc.validate();
  }

  Report rep(fs::path(c.out) / "train_report.txt", c);
  try {
    const ckpt::Checkpoint ck = [&] {
      auto out = is_hier ? est::train_hierarchical_posterior(tc) : est::train_neural_test_statistic(fc);
      out.set_meta("cli.config_hash", hex64(c.config_hash));
      out.set_meta("cli.artifact_version", c.artifact);
      return out;
    }();
    ck.save_file((fs::path(c.out) / ck_name).string());

    const fs::path log_path = fs::path(c.out) / log_name;
    {
      std::ofstream os(log_path);
      if (!os) throw IoError("cannot write '" + log_path.string() + "'");
      for (const auto& [k, v] : artifact_metadata(c)) os << "# " << k << ": " << v << "\n";
      ck.write_run_log(os);
      os.flush();
      if (!os) throw IoError("write failed for '" + log_path.string() + "'");
    }

    rep.line("report: train");
    rep.line("checkpoint: " + ck_name);
    rep.line("runlog: " + log_name);
    for (const auto& [k, v] : ck.meta) rep.line(k + ": " + v);
    rep.finish();
  } catch (const std::exception& e) {
    rep.fail(e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// infer

inline void cmd_infer(RunConfig& rc, const CommonConfig& c) {
  const std::string ck_path = rc.require_str("infer.checkpoint");
  const std::string ds_path = rc.require_str("infer.dataset");
  const std::int64_t index = rc.get_i64("infer.index", 0);
  const bool prefix_curve = rc.get_bool("infer.prefix_curve", false);
  rc.reject_unknown_keys();
  require_file("infer.checkpoint", ck_path);
  require_file("infer.dataset", ds_path);

  const auto ck = ckpt::Checkpoint::load_file(ck_path);
  const auto net = est::HierPosteriorNet::from_checkpoint(ck);
  check_checkpoint_model(ck, c);
  const auto batch = load_batch(ds_path);
  if (index < 0 || index >= static_cast<std::int64_t>(batch.sets.size())) {
    throw ConfigError("config key 'infer.index': " + std::to_string(index) + " outside [0, " +
                      std::to_string(batch.sets.size()) + ")");
  }
  const sim::EventSet& e = batch.sets[static_cast<std::size_t>(index)];
  const auto post = net.infer(e);

  Report rep(fs::path(c.out) / "infer_report.csv", c);
  const bool have_truth = e.truth.has_value();
  const auto truth = have_truth ? est::detail::targets_of(e) : std::vector<double>{};
  rep.line(have_truth ? "dimension,mean,sd,truth" : "dimension,mean,sd");
  for (std::size_t d = 0; d < post.mean.size(); ++d) {
    std::string row = std::to_string(d) + "," + sim::format_g17(post.mean[d]) + "," +
                      sim::format_g17(post.sd(d));
    if (have_truth) row += "," + sim::format_g17(truth[d]);
    rep.line(row);
  }
  rep.line("# dataset: " + ds_path + " index " + std::to_string(index));
  rep.line("# cardinality: " + std::to_string(e.cardinality));
  rep.finish();

  if (prefix_curve) {
    Report pc(fs::path(c.out) / "infer_prefix_curve.csv", c);
    pc.line("cardinality,dimension,mean,sd");
    const auto posts = net.prefix_posteriors(e);
    for (std::size_t n = 0; n < posts.size(); ++n) {
      for (std::size_t d = 0; d < posts[n].mean.size(); ++d) {
        pc.line(std::to_string(n + 1) + "," + std::to_string(d) + "," +
                sim::format_g17(posts[n].mean[d]) + "," + sim::format_g17(posts[n].sd(d)));
      }
    }
    pc.finish();
  }
}

// ---------------------------------------------------------------------------
// scan

inline void cmd_scan(RunConfig& rc, const CommonConfig& c) {
  const std::string ck_path = rc.require_str("scan.checkpoint");
  const std::string ds_path = rc.require_str("scan.dataset");
  const std::int64_t index = rc.get_i64("scan.index", 0);
  const double lo = rc.get_f64("scan.grid_lo", 3.0);
  const double hi = rc.get_f64("scan.grid_hi", 7.0);
  const std::int64_t points = rc.get_i64("scan.grid_points", 81);
  rc.reject_unknown_keys();
  require_file("scan.checkpoint", ck_path);
  require_file("scan.dataset", ds_path);

  const auto net = est::FreqNet::from_checkpoint(ckpt::Checkpoint::load_file(ck_path));
  const auto batch = load_batch(ds_path);
  if (index < 0 || index >= static_cast<std::int64_t>(batch.sets.size())) {
    throw ConfigError("config key 'scan.index': " + std::to_string(index) + " outside [0, " +
                      std::to_string(batch.sets.size()) + ")");
  }
  const auto res = net.scan(batch.sets[static_cast<std::size_t>(index)], linspace(lo, hi, points));

  Report rep(fs::path(c.out) / "scan_report.csv", c);
  rep.line("theta,s,logit");
  for (std::size_t i = 0; i < res.theta_grid.size(); ++i) {
    rep.line(sim::format_g17(res.theta_grid[i]) + "," + sim::format_g17(res.s[i]) + "," +
             sim::format_g17(res.logit[i]));
  }
  rep.line("# theta_hat: " + sim::format_g17(res.theta_hat));
  rep.line("# argmin_index: " + std::to_string(res.argmin_index));
  rep.line("# s_min: " + sim::format_g17(res.s[res.argmin_index]));
  rep.finish();
}

// ---------------------------------------------------------------------------
// coverage

inline void cmd_coverage(RunConfig& rc, const CommonConfig& c) {
  const std::string ck_path = rc.require_str("coverage.checkpoint");
  std::vector<double> default_alphas;
  for (int k = 1; k <= 19; ++k) default_alphas.push_back(0.05 * k);
  const auto alphas = rc.get_f64_list("coverage.alphas", default_alphas);
  const auto replicas = rc.get_i64("coverage.replicas", 200);
  const auto cards = rc.get_i64_list("coverage.cardinalities", {1, 10, 50});
  rc.reject_unknown_keys();
  const auto model = require_model(c);
  require_file("coverage.checkpoint", ck_path);

  const auto ck = ckpt::Checkpoint::load_file(ck_path);
  const auto net = est::HierPosteriorNet::from_checkpoint(ck);
  check_checkpoint_model(ck, c);

  Report csv(fs::path(c.out) / "coverage_report.csv", c);
  Report txt(fs::path(c.out) / "coverage_summary.txt", c);
  try {
    const auto rep = diag::expected_coverage(
        [&](const sim::EventSet& e) { return net.infer(e); }, model, c.sims, alphas, replicas,
        cards, c.seed);
    std::ostringstream body;
    rep.write_csv(body);
    csv.raw(body.str());
    csv.finish();
    std::ostringstream sum;
    rep.write_summary(sum);
    txt.raw(sum.str());
    txt.finish();
  } catch (const std::exception& e) {
    csv.fail(e.what());
    txt.fail(e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// compare-freq

inline void cmd_compare_freq(RunConfig& rc, const CommonConfig& c) {
  const std::string ck_path = rc.require_str("compare_freq.checkpoint");
  const auto count = rc.get_i64("compare_freq.datasets", 1000);
  const auto cond = rc.get_f64_list("compare_freq.theta_cond", {3.0, 4.0, 5.0, 6.0, 7.0});
  const double lo = rc.get_f64("compare_freq.grid_lo", 3.0);
  const double hi = rc.get_f64("compare_freq.grid_hi", 7.0);
  const auto points = rc.get_i64("compare_freq.grid_points", 81);
  const auto examples = rc.get_i64("compare_freq.curve_examples", 3);
  rc.reject_unknown_keys();
  if (c.model && *c.model != sim::ModelTag::RateMixture) {
    throw ConfigError("compare-freq requires model 'rate_mixture'");
  }
  if (count < 3) throw ConfigError("config key 'compare_freq.datasets': need at least 3");
  require_file("compare_freq.checkpoint", ck_path);

  const auto net = est::FreqNet::from_checkpoint(ckpt::Checkpoint::load_file(ck_path));
  const auto grid = linspace(lo, hi, points);
  const std::int64_t kept = std::min(examples, count);

  std::vector<double> theta_true(count), th_neural(count), th_oracle(count);
  std::vector<std::vector<double>> cond_logit(cond.size(), std::vector<double>(count));
  std::vector<std::vector<double>> cond_t(cond.size(), std::vector<double>(count));
  std::vector<std::vector<double>> ex_s(kept), ex_t(kept);

  Report curves(fs::path(c.out) / "compare_freq_curves.csv", c);
  Report bij(fs::path(c.out) / "compare_freq_bijectivity.csv", c);
  Report pts(fs::path(c.out) / "compare_freq_points.csv", c);
  Report sum(fs::path(c.out) / "compare_freq_summary.txt", c);
  try {
    parallel_for(count, c.workers, [&](std::int64_t k) {
      const auto e = sim::sample_training_task(sim::ModelTag::RateMixture, c.sims, c.seed,
                                               static_cast<std::uint64_t>(k));
      theta_true[k] = e.truth->theta.at(0);
      const auto sres = net.scan(e, grid);
      const auto pres = oracle::profile_likelihood_ratio(e, grid, c.sims.rate);
      th_neural[k] = sres.theta_hat;
      th_oracle[k] = pres.theta_hat;
      const auto cres = net.scan(e, cond);
      for (std::size_t ci = 0; ci < cond.size(); ++ci) {
        cond_logit[ci][k] = cres.logit[ci];
        const auto prof = oracle::profile_at(e, cond[ci], c.sims.rate);
        cond_t[ci][k] = -2.0 * (prof.loglik - pres.loglik_hat);
      }
      if (k < kept) {
        ex_s[k] = sres.s;
        ex_t[k] = pres.t;
      }
    });

    curves.line("dataset,theta,s,t");
    for (std::int64_t k = 0; k < kept; ++k) {
      for (std::size_t i = 0; i < grid.size(); ++i) {
        curves.line(std::to_string(k) + "," + sim::format_g17(grid[i]) + "," +
                    sim::format_g17(ex_s[k][i]) + "," + sim::format_g17(ex_t[k][i]));
      }
    }
    curves.finish();

    bij.line("theta_cond,count,spearman_rho,isotonic_rms");
    double min_rho = 1.0;
    std::vector<std::string> sum_lines;
    for (std::size_t ci = 0; ci < cond.size(); ++ci) {
      const auto b = diag::bijectivity_report(cond_logit[ci], cond_t[ci]);
      min_rho = std::min(min_rho, b.spearman_rho);
      bij.line(sim::format_g17(cond[ci]) + "," + std::to_string(b.count) + "," +
               sim::format_g17(b.spearman_rho) + "," + sim::format_g17(b.isotonic_rms));
      sum_lines.push_back("theta_cond " + sim::format_g17(cond[ci]) +
                          " spearman_rho: " + sim::format_g17(b.spearman_rho));
    }
    bij.finish();

    pts.line("dataset,theta_true,theta_hat_neural,theta_hat_oracle");
    for (std::int64_t k = 0; k < count; ++k) {
      pts.line(std::to_string(k) + "," + sim::format_g17(theta_true[k]) + "," +
               sim::format_g17(th_neural[k]) + "," + sim::format_g17(th_oracle[k]));
    }
    const double err = rmse(th_neural, th_oracle);
    pts.line("# rmse_neural_vs_oracle: " + sim::format_g17(err));
    pts.finish();

    sum.line("report: compare_freq");
    sum.line("datasets: " + std::to_string(count));
    for (const auto& l : sum_lines) sum.line(l);
    sum.line("min_spearman_rho: " + sim::format_g17(min_rho));
    sum.line("rmse_neural_vs_oracle: " + sim::format_g17(err));
    sum.finish();
  } catch (const std::exception& e) {
    curves.fail(e.what());
    bij.fail(e.what());
    pts.fail(e.what());
    sum.fail(e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// compare-bayes

inline void cmd_compare_bayes(RunConfig& rc, const CommonConfig& c) {
  const std::string ck_path = rc.require_str("compare_bayes.checkpoint");
  const auto grid = rc.get_f64_list("compare_bayes.theta_nu", {-2.0, 0.0, 2.0});
  const auto replicas = rc.get_i64("compare_bayes.replicas", 400);
  const auto samples = rc.get_i64("compare_bayes.mcmc_samples", 20000);
  const auto burnin = rc.get_i64("compare_bayes.mcmc_burnin", 5000);
  const double nom = rc.get_f64("compare_bayes.theta_nu_nom", 0.5);
  rc.reject_unknown_keys();
  if (c.model && *c.model != sim::ModelTag::BumpHunt) {
    throw ConfigError("compare-bayes requires model 'bump_hunt'");
  }
  if (replicas < 2) throw ConfigError("config key 'compare_bayes.replicas': need at least 2");
  require_file("compare_bayes.checkpoint", ck_path);

  const auto ck = ckpt::Checkpoint::load_file(ck_path);
  const auto net = est::HierPosteriorNet::from_checkpoint(ck);
  if (ck.require_meta("config.model") != "bump_hunt") {
    throw ConfigError("compare-bayes: checkpoint was trained on model '" +
                      ck.require_meta("config.model") + "', expected 'bump_hunt'");
  }
  const auto& bc = c.sims.bump;
  static constexpr const char* kMethods[4] = {"neural", "mcmc_raw", "mcmc_nom", "mcmc_marg"};
  static constexpr oracle::SummaryTag kTags[3] = {oracle::SummaryTag::RawX,
                                                  oracle::SummaryTag::Nom,
                                                  oracle::SummaryTag::Marg};

  Report rows(fs::path(c.out) / "compare_bayes_report.csv", c);
  Report sum(fs::path(c.out) / "compare_bayes_summary.txt", c);
  rows.line("theta_nu_true,method,median_sigma_theta,p16_sigma_theta,p84_sigma_theta,replicas");
  sum.line("report: compare_bayes");
  sum.line("replicas: " + std::to_string(replicas));
  try {
    double worst_ratio_gap = 0.0;
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
      std::vector<std::array<double, 4>> sig(replicas);
      std::atomic<std::int64_t> bad_chains{0};
      parallel_for(replicas, c.workers, [&](std::int64_t r) {
        const auto pi = static_cast<std::uint64_t>(gi) * static_cast<std::uint64_t>(replicas) +
                        static_cast<std::uint64_t>(r);
        auto pstream = rng::Stream::substream(c.seed, 2 * pi);
        const double th_true =
            bc.prior_theta_lo + (bc.prior_theta_hi - bc.prior_theta_lo) * pstream.uniform();
        const auto e =
            sim::simulate_bump(bc, th_true, grid[gi], rng::stream_seed(c.seed, 2 * pi + 1));
        sig[r][0] = net.infer(e).sd(0);
        for (int ti = 0; ti < 3; ++ti) {
          oracle::SummaryPosteriorConfig spc;
          spc.tag = kTags[ti];
          spc.theta_nu_nom = nom;
          spc.bump = bc;
          spc.mcmc.samples = samples;
          spc.mcmc.burn_in = burnin;
          spc.mcmc.seed = rng::stream_seed(e.seed, static_cast<std::uint64_t>(ti) + 1);
          const auto chain = oracle::posterior_from_summaries(e, spc);
          if (!chain.converged) ++bad_chains;
          sig[r][static_cast<std::size_t>(ti) + 1] = sample_sd(chain.column(0));
        }
      });
      std::array<double, 4> med{};
      for (int m = 0; m < 4; ++m) {
        std::vector<double> col(replicas);
        for (std::int64_t r = 0; r < replicas; ++r) col[r] = sig[r][m];
        med[m] = diag::percentile(col, 0.5);
        rows.line(sim::format_g17(grid[gi]) + "," + kMethods[m] + "," + sim::format_g17(med[m]) +
                  "," + sim::format_g17(diag::percentile(col, 0.16)) + "," +
                  sim::format_g17(diag::percentile(col, 0.84)) + "," + std::to_string(replicas));
      }
      worst_ratio_gap = std::max(worst_ratio_gap, std::abs(med[0] / med[1] - 1.0));
      sum.line("theta_nu " + sim::format_g17(grid[gi]) +
               " neural_over_raw: " + sim::format_g17(med[0] / med[1]));
      if (bad_chains > 0) {
        sum.line("warning: " + std::to_string(bad_chains.load()) +
                 " non-converged chains at theta_nu " + sim::format_g17(grid[gi]));
      }
    }
    sum.line("worst_neural_over_raw_gap: " + sim::format_g17(worst_ratio_gap));
    rows.finish();
    sum.finish();
  } catch (const std::exception& e) {
    rows.fail(e.what());
    sum.fail(e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// bench

inline void cmd_bench(RunConfig& rc, const CommonConfig& c) {
  const std::string ck_path = rc.require_str("bench.checkpoint");
  const auto count = rc.get_i64("bench.datasets", 1000);
  const double lo = rc.get_f64("bench.grid_lo", 3.0);
  const double hi = rc.get_f64("bench.grid_hi", 7.0);
  const auto points = rc.get_i64("bench.grid_points", 81);
  rc.reject_unknown_keys();
  if (c.model && *c.model != sim::ModelTag::RateMixture) {
    throw ConfigError("bench requires model 'rate_mixture'");
  }
  if (count < 1) throw ConfigError("config key 'bench.datasets': need at least 1");
  require_file("bench.checkpoint", ck_path);

  const auto net = est::FreqNet::from_checkpoint(ckpt::Checkpoint::load_file(ck_path));
  const auto grid = linspace(lo, hi, points);
  std::vector<sim::EventSet> datasets;
  datasets.reserve(count);
  for (std::int64_t k = 0; k < count; ++k) {
    datasets.push_back(sim::sample_training_task(sim::ModelTag::RateMixture, c.sims, c.seed,
                                                 static_cast<std::uint64_t>(k)));
  }

  Report out(fs::path(c.out) / "bench_report.txt", c);
  try {
    const auto rep = diag::speed_bench(
        [&](const sim::EventSet& e) { net.scan(e, grid); },
        [&](const sim::EventSet& e) { oracle::profile_likelihood_ratio(e, grid, c.sims.rate); },
        datasets);
    std::ostringstream body;
    rep.write_summary(body);
    out.raw(body.str());
    out.line("grid_points: " + std::to_string(points));
    out.finish();
  } catch (const std::exception& e) {
    out.fail(e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// entry point

inline int run(int argc, char** argv) {
  CLI::App app{"simulation-based inference over hierarchical event ensembles"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_flag;
  std::string seed_flag;
  int workers = 1;

  struct Cmd {
    const char* name;
    const char* desc;
    void (*fn)(RunConfig&, const CommonConfig&);
    CLI::App* sub = nullptr;
  };
  std::vector<Cmd> cmds = {
      {"simulate", "generate seeded datasets plus a manifest", &cmd_simulate},
      {"train", "fit an amortized estimator and save a checkpoint", &cmd_train},
      {"infer", "posterior summary for one stored dataset", &cmd_infer},
      {"scan", "neural test statistic over a parameter grid", &cmd_scan},
      {"coverage", "empirical coverage of posterior intervals", &cmd_coverage},
      {"compare-freq", "neural statistic against the profile likelihood oracle", &cmd_compare_freq},
      {"compare-bayes", "posterior widths against MCMC references", &cmd_compare_bayes},
      {"bench", "wall-clock cost of neural scans versus the oracle", &cmd_bench},
  };
  for (auto& cc : cmds) {
    cc.sub = app.add_subcommand(cc.name, cc.desc);
    cc.sub->add_option("--config", config_path, "run configuration file")->required();
    cc.sub->add_option("--out", out_flag, "output directory (overrides config key 'out')");
    cc.sub->add_option("--seed", seed_flag, "master seed (overrides config key 'seed')");
    cc.sub->add_option("--workers", workers, "worker threads for independent replicas");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "setinfer: " << e.what() << std::endl;
    return kExitConfig;
  }

  const Cmd* chosen = nullptr;
  for (const auto& cc : cmds) {
    if (cc.sub->parsed()) chosen = &cc;
  }

  try {
    RunConfig rc = RunConfig::parse_file(config_path);
    if (chosen->sub->count("--seed") > 0) rc.override_value("seed", seed_flag);
    if (chosen->sub->count("--out") > 0) rc.override_value("out", out_flag);

    CommonConfig c;
    c.command = chosen->name;
    c.config_hash = fnv1a(c.command + "\n" + rc.canonical());
    if (rc.has("model")) c.model = sim::parse_model(rc.require_str("model"));
    read_model_blocks(rc, c.sims);
    c.seed = rc.get_u64("seed", 0);
    c.out = rc.get_str("out", ".");
    c.artifact = rc.get_str("artifact", "1");
    c.workers = std::max(1, workers);

    std::error_code ec;
    fs::create_directories(c.out, ec);
    if (ec || !fs::is_directory(c.out)) {
      throw IoError("cannot create output directory '" + c.out + "'");
    }

    chosen->fn(rc, c);
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "setinfer: config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "setinfer: io error: " << e.what() << std::endl;
    return kExitIo;
  } catch (const est::NumericFailure& e) {
    std::cerr << "setinfer: numeric failure: " << e.what() << std::endl;
    return kExitNumeric;
  } catch (const ad::NumericError& e) {
    std::cerr << "setinfer: numeric failure: " << e.what() << std::endl;
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "setinfer: config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const std::out_of_range& e) {
    std::cerr << "setinfer: config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const std::domain_error& e) {
    std::cerr << "setinfer: config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "setinfer: error: " << e.what() << std::endl;
    return kExitIo;
  }
}

}  // namespace setinfer::cli
