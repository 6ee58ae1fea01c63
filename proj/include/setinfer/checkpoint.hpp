#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "setinfer/autodiff.hpp"
#include "setinfer/events.hpp"

namespace setinfer::ckpt {

inline constexpr int kArtifactVersion = 1;

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

inline void put_f64_le(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

inline double get_f64_le(std::istream& is) {
  char buf[8];
  is.read(buf, 8);
  if (!is) throw std::runtime_error("checkpoint: truncated payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

}  // namespace detail

struct CurvePoint {
  std::int64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

/// Single-file training artifact: a line-oriented text header carrying the
/// architecture config, training metadata and loss curve, followed by the
/// parameter payload as little-endian 64-bit floats in header order. Save
/// then load reproduces the parameters bit-exactly.
class Checkpoint {
 public:
  std::map<std::string, std::string> meta;
  std::vector<CurvePoint> curve;
  std::vector<std::pair<std::string, ad::Array>> params;

  void set_meta(const std::string& key, const std::string& value) {
    if (key.empty() || key.find(' ') != std::string::npos || key.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint: meta key must be non-empty and space-free");
    }
    if (value.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint: meta value must be single-line");
    }
    meta[key] = value;
  }

  void set_meta(const std::string& key, std::int64_t value) {
    set_meta(key, std::to_string(value));
  }

  void set_meta_f(const std::string& key, double value) { set_meta(key, sim::format_g17(value)); }

  const std::string& require_meta(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw std::out_of_range("checkpoint: missing meta key '" + key + "'");
    return it->second;
  }

  std::int64_t meta_int(const std::string& key) const { return std::stoll(require_meta(key)); }
  double meta_double(const std::string& key) const { return std::stod(require_meta(key)); }

  /// Hash of the architecture-defining metadata (every `config.*` key).
  std::uint64_t config_fingerprint() const {
    std::string blob;
    for (const auto& [k, v] : meta) {
      if (k.rfind("config.", 0) == 0) {
        blob += k;
        blob += '=';
        blob += v;
        blob += '\n';
      }
    }
    return fnv1a(blob);
  }

  void stamp_fingerprint() {
    std::ostringstream hex;
    hex << std::hex << config_fingerprint();
    set_meta("fingerprint", hex.str());
  }

  void verify_fingerprint() const {
    auto it = meta.find("fingerprint");
    if (it == meta.end()) return;
    std::ostringstream hex;
    hex << std::hex << config_fingerprint();
    if (hex.str() != it->second) {
      throw std::runtime_error("checkpoint: config fingerprint mismatch (stored " + it->second +
                               ", computed " + hex.str() + ")");
    }
  }

  void add_params_from(const ad::ParameterStore& ps) {
    for (const auto& name : ps.names()) params.emplace_back(name, ps.values(name));
  }

  /// Creates or overwrites store entries from the payload.
  void load_into(ad::ParameterStore& ps) const {
    for (const auto& [name, arr] : params) {
      if (ps.has(name)) {
        ad::Array& dst = ps.values(name);
        if (dst.shape() != arr.shape()) {
          throw std::runtime_error("checkpoint: shape mismatch for parameter '" + name + "'");
        }
        dst = arr;
      } else {
        ps.create(name, arr);
      }
    }
  }

  void save(std::ostream& os) const {
    os << "setinfer-checkpoint v" << kArtifactVersion << "\n";
    os << "dtype float64-le\n";
    for (const auto& [k, v] : meta) os << "meta " << k << ' ' << v << "\n";
    for (const auto& c : curve) {
      os << "curve " << c.step << ' ' << sim::format_g17(c.lr) << ' '
         << sim::format_g17(c.train_loss) << ' ' << sim::format_g17(c.val_loss) << "\n";
    }
    for (const auto& [name, arr] : params) {
      os << "param " << name << ' ' << arr.rank();
      for (std::size_t d = 0; d < arr.rank(); ++d) os << ' ' << arr.shape()[d];
      os << "\n";
    }
    os << "end\n";
    for (const auto& [name, arr] : params) {
      for (std::int64_t i = 0; i < arr.size(); ++i) detail::put_f64_le(os, arr[i]);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed");
  }

  void save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    save(os);
  }

  static Checkpoint load(std::istream& is) {
    Checkpoint ck;
    std::string line;
    if (!std::getline(is, line) || line != "setinfer-checkpoint v1") {
      throw std::runtime_error("checkpoint: bad magic line");
    }
    if (!std::getline(is, line) || line != "dtype float64-le") {
      throw std::runtime_error("checkpoint: unsupported dtype line");
    }
    bool ended = false;
    while (std::getline(is, line)) {
      if (line == "end") {
        ended = true;
        break;
      }
      std::istringstream ls(line);
      std::string kind;
      ls >> kind;
      if (kind == "meta") {
        std::string key;
        ls >> key;
        std::string value;
        std::getline(ls, value);
        if (!value.empty() && value.front() == ' ') value.erase(0, 1);
        ck.meta[key] = value;
      } else if (kind == "curve") {
        CurvePoint c;
        ls >> c.step >> c.lr >> c.train_loss >> c.val_loss;
        if (!ls) throw std::runtime_error("checkpoint: malformed curve line");
        ck.curve.push_back(c);
      } else if (kind == "param") {
        std::string name;
        std::size_t rank = 0;
        ls >> name >> rank;
        if (!ls || rank > 8) throw std::runtime_error("checkpoint: malformed param line");
        ad::Shape shape(rank);
        for (std::size_t d = 0; d < rank; ++d) ls >> shape[d];
        if (!ls) throw std::runtime_error("checkpoint: malformed param line");
        ck.params.emplace_back(name, ad::Array(shape));
      } else {
        throw std::runtime_error("checkpoint: unknown header line '" + line + "'");
      }
    }
    if (!ended) throw std::runtime_error("checkpoint: missing end marker");
    for (auto& [name, arr] : ck.params) {
      for (std::int64_t i = 0; i < arr.size(); ++i) arr[i] = detail::get_f64_le(is);
    }
    ck.verify_fingerprint();
    return ck;
  }

  static Checkpoint load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    return load(is);
  }

  /// Loss curve as comma-separated rows for external plotting.
  void write_run_log(std::ostream& os) const {
    os << "step,lr,train_loss,val_loss\n";
    for (const auto& c : curve) {
      os << c.step << ',' << sim::format_g17(c.lr) << ',' << sim::format_g17(c.train_loss) << ','
         << sim::format_g17(c.val_loss) << '\n';
    }
  }
};

}  // namespace setinfer::ckpt
