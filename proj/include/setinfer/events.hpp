#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace setinfer::sim {

enum class ModelTag { Mvn, RateMixture, BumpHunt };

inline const char* model_name(ModelTag m) {
  switch (m) {
    case ModelTag::Mvn: return "mvn";
    case ModelTag::RateMixture: return "rate_mixture";
    case ModelTag::BumpHunt: return "bump_hunt";
  }
  return "?";
}

inline ModelTag parse_model(const std::string& s) {
  if (s == "mvn") return ModelTag::Mvn;
  if (s == "rate_mixture") return ModelTag::RateMixture;
  if (s == "bump_hunt") return ModelTag::BumpHunt;
  throw std::invalid_argument("unknown model tag '" + s + "'");
}

struct Truth {
  std::vector<double> theta;
  std::optional<double> theta_nu;
};

/// One simulated dataset: N events of F features each, in generation order,
/// with the generating parameters recorded when known.
struct EventSet {
  ModelTag model = ModelTag::Mvn;
  std::int64_t cardinality = 0;
  std::int64_t feature_width = 0;
  std::vector<double> features;  // row-major N x F
  std::optional<Truth> truth;
  std::uint64_t seed = 0;

  double* row(std::int64_t i) { return features.data() + i * feature_width; }
  const double* row(std::int64_t i) const { return features.data() + i * feature_width; }
  double at(std::int64_t i, std::int64_t j) const { return features[i * feature_width + j]; }

  /// Dataset restricted to the first n events (same truth and seed).
  EventSet prefix(std::int64_t n) const {
    if (n < 0 || n > cardinality) throw std::out_of_range("EventSet::prefix: bad length");
    EventSet out = *this;
    out.cardinality = n;
    out.features.assign(features.begin(), features.begin() + n * feature_width);
    return out;
  }

  EventSet permuted(const std::vector<std::int64_t>& perm) const {
    if (static_cast<std::int64_t>(perm.size()) != cardinality) {
      throw std::out_of_range("EventSet::permuted: permutation size mismatch");
    }
    EventSet out = *this;
    for (std::int64_t i = 0; i < cardinality; ++i) {
      for (std::int64_t j = 0; j < feature_width; ++j) {
        out.features[i * feature_width + j] = features[perm[i] * feature_width + j];
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// on-disk batch format: structured text, 17 significant digits

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

using Metadata = std::vector<std::pair<std::string, std::string>>;

inline void write_eventset_batch(std::ostream& os, const std::vector<EventSet>& sets,
                                 const Metadata& metadata) {
  os << "setinfer-eventset v1\n";
  for (const auto& [k, v] : metadata) os << k << ": " << v << "\n";
  os << "count: " << sets.size() << "\n";
  for (std::size_t idx = 0; idx < sets.size(); ++idx) {
    const EventSet& e = sets[idx];
    os << "dataset: " << idx << "\n";
    os << "model: " << model_name(e.model) << "\n";
    os << "seed: " << e.seed << "\n";
    if (e.truth) {
      os << "theta:";
      for (double t : e.truth->theta) os << ' ' << format_g17(t);
      os << "\n";
      if (e.truth->theta_nu) os << "theta_nu: " << format_g17(*e.truth->theta_nu) << "\n";
    }
    os << "cardinality: " << e.cardinality << "\n";
    os << "features: " << e.feature_width << "\n";
    for (std::int64_t i = 0; i < e.cardinality; ++i) {
      for (std::int64_t j = 0; j < e.feature_width; ++j) {
        if (j) os << ' ';
        os << format_g17(e.at(i, j));
      }
      os << "\n";
    }
  }
}

struct EventSetBatch {
  Metadata metadata;
  std::vector<EventSet> sets;
};

inline EventSetBatch read_eventset_batch(std::istream& is) {
  EventSetBatch batch;
  std::string line;
  if (!std::getline(is, line) || line != "setinfer-eventset v1") {
    throw std::runtime_error("eventset batch: bad header");
  }
  auto split_kv = [](const std::string& l) -> std::pair<std::string, std::string> {
    auto pos = l.find(": ");
    if (pos == std::string::npos) {
      if (!l.empty() && l.back() == ':') return {l.substr(0, l.size() - 1), ""};
      throw std::runtime_error("eventset batch: malformed line '" + l + "'");
    }
    return {l.substr(0, pos), l.substr(pos + 2)};
  };

  std::size_t count = 0;
  bool have_count = false;
  while (!have_count && std::getline(is, line)) {
    auto [k, v] = split_kv(line);
    if (k == "count") {
      count = std::stoull(v);
      have_count = true;
    } else {
      batch.metadata.emplace_back(k, v);
    }
  }
  if (!have_count) throw std::runtime_error("eventset batch: missing count");

  for (std::size_t idx = 0; idx < count; ++idx) {
    EventSet e;
    Truth truth;
    bool have_truth = false;
    if (!std::getline(is, line)) throw std::runtime_error("eventset batch: truncated");
    {
      auto [k, v] = split_kv(line);
      if (k != "dataset" || std::stoull(v) != idx) {
        throw std::runtime_error("eventset batch: expected dataset " + std::to_string(idx));
      }
    }
    std::int64_t width = -1;
    while (std::getline(is, line)) {
      auto [k, v] = split_kv(line);
      if (k == "model") {
        e.model = parse_model(v);
      } else if (k == "seed") {
        e.seed = std::stoull(v);
      } else if (k == "theta") {
        std::istringstream ss(v);
        double t;
        while (ss >> t) truth.theta.push_back(t);
        have_truth = true;
      } else if (k == "theta_nu") {
        truth.theta_nu = std::stod(v);
        have_truth = true;
      } else if (k == "cardinality") {
        e.cardinality = std::stoll(v);
      } else if (k == "features") {
        width = std::stoll(v);
        break;
      } else {
        throw std::runtime_error("eventset batch: unexpected key '" + k + "'");
      }
    }
    if (width < 0) throw std::runtime_error("eventset batch: missing features header");
    e.feature_width = width;
    e.features.reserve(static_cast<std::size_t>(e.cardinality * width));
    for (std::int64_t i = 0; i < e.cardinality; ++i) {
      if (!std::getline(is, line)) throw std::runtime_error("eventset batch: truncated rows");
      std::istringstream ss(line);
      double x;
      std::int64_t got = 0;
      while (ss >> x) {
        e.features.push_back(x);
        ++got;
      }
      if (got != width) {
        throw std::runtime_error("eventset batch: row " + std::to_string(i) + " has " +
                                 std::to_string(got) + " columns, expected " +
                                 std::to_string(width));
      }
    }
    if (have_truth) e.truth = std::move(truth);
    batch.sets.push_back(std::move(e));
  }
  return batch;
}

}  // namespace setinfer::sim
