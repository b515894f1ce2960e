// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mam/digest.hpp"
#include "mam/error.hpp"
#include "mam/tensor.hpp"

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace mam {

using Metadata = std::map<std::string, std::string>;

/// Ordered name -> tensor map plus string metadata. Iteration follows insertion order.
class Checkpoint {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor tensor) {
    if (index_.contains(name)) fail(ErrorCode::BadSpec, "duplicate tensor name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(tensor));
  }

  /// Replaces an existing tensor in place, keeping its position.
  void replace(const std::string& name, Tensor tensor) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::BadSpec, "no tensor named '" + name + "'");
    entries_[it->second].second = std::move(tensor);
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::BadSpec, "no tensor named '" + name + "'");
    return entries_[it->second].second;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  Metadata& metadata() { return metadata_; }
  const Metadata& metadata() const { return metadata_; }

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.entries_ == b.entries_ && a.metadata_ == b.metadata_;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  Metadata metadata_;
};

namespace detail {

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exponent = (h >> 10) & 0x1Fu;
  std::uint32_t mantissa = h & 0x3FFu;
  std::uint32_t bits;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exponent = 127 - 15 + 1;
      while ((mantissa & 0x400u) == 0) {
        mantissa <<= 1;
        --exponent;
      }
      mantissa &= 0x3FFu;
      bits = sign | (exponent << 23) | (mantissa << 13);
    }
  } else if (exponent == 0x1F) {
    bits = sign | 0x7F800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

inline std::string json_string(const std::string& s) {
  try {
    return nlohmann::json(s).dump();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::BadSpec, "name or metadata is not valid UTF-8: " + std::string(e.what()));
  }
}

inline std::uint64_t read_u64_le(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

}  // namespace detail

/// Serialized JSON header for `c` with the data offsets the writer will use.
/// Keys are sorted bytewise, "__metadata__" first, no whitespace.
inline std::string serialize_header(const Checkpoint& c) {
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> offsets;
  std::uint64_t cursor = 0;
  for (const auto& [name, t] : c.entries()) {
    offsets[name] = {cursor, cursor + t.byte_size()};
    cursor += t.byte_size();
  }
  std::string out = "{";
  bool first = true;
  if (!c.metadata().empty()) {
    out += "\"__metadata__\":{";
    bool first_meta = true;
    for (const auto& [k, v] : c.metadata()) {
      if (!first_meta) out += ",";
      first_meta = false;
      out += detail::json_string(k) + ":" + detail::json_string(v);
    }
    out += "}";
    first = false;
  }
  for (const auto& [name, range] : offsets) {
    const auto& t = c.at(name);
    if (!first) out += ",";
    first = false;
    out += detail::json_string(name) + ":{\"data_offsets\":[" + std::to_string(range.first) + "," +
           std::to_string(range.second) + "],\"dtype\":\"" + std::string(dtype_name(t.dtype())) +
           "\",\"shape\":[";
    for (std::size_t i = 0; i < t.shape().size(); ++i) {
      if (i) out += ",";
      out += std::to_string(t.shape()[i]);
    }
    out += "]}";
  }
  out += "}";
  return out;
}

/// Full container bytes: u64 header length, header, then payloads in insertion order.
inline std::string serialize_checkpoint(const Checkpoint& c) {
  if (c.metadata().contains("__metadata__")) fail(ErrorCode::BadSpec, "reserved metadata key");
  for (const auto& [name, t] : c.entries())
    if (name == "__metadata__") fail(ErrorCode::BadSpec, "tensor name '__metadata__' is reserved");
  const std::string header = serialize_header(c);
  std::string out;
  std::size_t total = 8 + header.size();
  for (const auto& [name, t] : c.entries()) total += t.byte_size();
  out.reserve(total);
  const std::uint64_t n = header.size();
  out.append(reinterpret_cast<const char*>(&n), 8);
  out += header;
  for (const auto& [name, t] : c.entries()) {
    auto b = t.bytes();
    out.append(reinterpret_cast<const char*>(b.data()), b.size());
  }
  return out;
}

/// Digest of the canonical serialization, computed without materializing it.
inline std::string checkpoint_digest(const Checkpoint& c) {
  const std::string header = serialize_header(c);
  const std::uint64_t n = header.size();
  Fnv1a64 h;
  h.update(std::as_bytes(std::span(&n, 1)));
  h.update(header);
  for (const auto& [name, t] : c.entries()) h.update(t.bytes());
  return h.hex();
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  using nlohmann::json;
  if (bytes.size() < 8) fail(ErrorCode::MalformedHeader, "file shorter than the 8-byte length prefix");
  const std::uint64_t header_len = detail::read_u64_le(bytes.data());
  if (header_len > bytes.size() - 8)
    fail(ErrorCode::MalformedHeader, "header length " + std::to_string(header_len) + " exceeds file size");
  json header;
  try {
    header = json::parse(bytes.substr(8, header_len));
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedHeader, std::string("invalid JSON header: ") + e.what());
  }
  if (!header.is_object()) fail(ErrorCode::MalformedHeader, "header is not a JSON object");

  Checkpoint out;
  struct Pending {
    std::string name;
    std::string dtype;
    Shape shape;
    std::uint64_t begin, end;
  };
  std::vector<Pending> pending;
  for (const auto& [key, value] : header.items()) {
    if (key == "__metadata__") {
      if (!value.is_object()) fail(ErrorCode::MalformedHeader, "__metadata__ is not an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) fail(ErrorCode::MalformedHeader, "metadata value for '" + mk + "' is not a string");
        out.metadata()[mk] = mv.get<std::string>();
      }
      continue;
    }
    if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") || !value.contains("data_offsets"))
      fail(ErrorCode::MalformedHeader, "entry '" + key + "' lacks dtype/shape/data_offsets");
    const auto& dt = value["dtype"];
    const auto& sh = value["shape"];
    const auto& off = value["data_offsets"];
    if (!dt.is_string()) fail(ErrorCode::MalformedHeader, "dtype of '" + key + "' is not a string");
    if (!sh.is_array()) fail(ErrorCode::MalformedHeader, "shape of '" + key + "' is not an array");
    if (!off.is_array() || off.size() != 2 || !off[0].is_number_unsigned() || !off[1].is_number_unsigned())
      fail(ErrorCode::MalformedHeader, "data_offsets of '" + key + "' must be two unsigned integers");
    Pending p{key, dt.get<std::string>(), {}, off[0].get<std::uint64_t>(), off[1].get<std::uint64_t>()};
    for (const auto& d : sh) {
      if (!d.is_number_unsigned()) fail(ErrorCode::MalformedHeader, "shape of '" + key + "' has a non-integer entry");
      const auto dim = d.get<std::uint64_t>();
      if (dim == 0) fail(ErrorCode::MalformedHeader, "shape of '" + key + "' has a zero dimension");
      p.shape.push_back(dim);
    }
    if (p.dtype != "F16" && p.dtype != "F32" && p.dtype != "F64")
      fail(ErrorCode::UnsupportedDtype, "tensor '" + key + "' has dtype " + p.dtype);
    pending.push_back(std::move(p));
  }

  std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) { return a.begin < b.begin; });
  const std::string_view buffer = bytes.substr(8 + header_len);
  std::uint64_t cursor = 0;
  for (const auto& p : pending) {
    const std::uint64_t elem = p.dtype == "F16" ? 2 : p.dtype == "F32" ? 4 : 8;
    std::uint64_t numel = 1;
    for (auto d : p.shape) {
      if (numel > (std::uint64_t{1} << 62) / d) fail(ErrorCode::MalformedHeader, "shape of '" + p.name + "' overflows");
      numel *= d;
    }
    if (p.end < p.begin) fail(ErrorCode::MalformedHeader, "data_offsets of '" + p.name + "' are reversed");
    if (p.begin != cursor)
      fail(ErrorCode::MalformedHeader, "data range of '" + p.name + "' " +
                                           (p.begin < cursor ? "overlaps the previous tensor" : "leaves a gap"));
    if (p.end - p.begin != numel * elem)
      fail(ErrorCode::MalformedHeader, "data range of '" + p.name + "' does not match its shape and dtype");
    if (p.end > buffer.size()) fail(ErrorCode::MalformedHeader, "data range of '" + p.name + "' is out of bounds");
    cursor = p.end;
  }
  if (cursor != buffer.size()) fail(ErrorCode::MalformedHeader, "trailing bytes after the last tensor");

  for (const auto& p : pending) {
    const char* src = buffer.data() + p.begin;
    const std::size_t n = shape_numel(p.shape);
    if (p.dtype == "F64") {
      std::vector<double> v(n);
      std::memcpy(v.data(), src, n * 8);
      out.add(p.name, Tensor(p.shape, std::move(v)));
    } else if (p.dtype == "F32") {
      std::vector<float> v(n);
      std::memcpy(v.data(), src, n * 4);
      out.add(p.name, Tensor(p.shape, std::move(v)));
    } else {
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        v[i] = detail::half_to_float(h);
      }
      out.add(p.name, Tensor(p.shape, std::move(v)));
    }
  }
  return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::Io, "read error on '" + path.string() + "'");
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "write error on '" + path.string() + "'");
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file_bytes(path)); }

inline void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(c));
}

// ---------------------------------------------------------------------------
// Attention layer structure

constexpr std::string_view kLayerPlaceholder = "{layer}";

struct LayerPatternConfig {
  std::string q, k, v;
  std::optional<std::string> q_bias, k_bias, v_bias;
  std::optional<std::size_t> num_layers;

  bool has_bias() const { return q_bias || k_bias || v_bias; }

  void validate() const {
    auto check = [](std::string_view role, const std::string& p) {
      const auto first = p.find(kLayerPlaceholder);
      if (first == std::string::npos || p.find(kLayerPlaceholder, first + 1) != std::string::npos)
        fail(ErrorCode::BadPattern, std::string(role) + " pattern must contain {layer} exactly once: '" + p + "'");
    };
    check("q", q);
    check("k", k);
    check("v", v);
    if (has_bias() && !(q_bias && k_bias && v_bias))
      fail(ErrorCode::BadPattern, "bias patterns must be given for all of q, k and v or none");
    if (q_bias) check("q_bias", *q_bias);
    if (k_bias) check("k_bias", *k_bias);
    if (v_bias) check("v_bias", *v_bias);
  }

  static LayerPatternConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(ErrorCode::BadPattern, "pattern config must be a JSON object");
    auto str = [&](const char* key) -> std::optional<std::string> {
      if (!j.contains(key)) return std::nullopt;
      if (!j[key].is_string()) fail(ErrorCode::BadPattern, std::string(key) + " must be a string");
      return j[key].get<std::string>();
    };
    LayerPatternConfig cfg;
    auto q = str("q"), k = str("k"), v = str("v");
    if (!q || !k || !v) fail(ErrorCode::BadPattern, "pattern config requires q, k and v");
    cfg.q = *q;
    cfg.k = *k;
    cfg.v = *v;
    cfg.q_bias = str("q_bias");
    cfg.k_bias = str("k_bias");
    cfg.v_bias = str("v_bias");
    if (j.contains("num_layers")) {
      if (!j["num_layers"].is_number_unsigned()) fail(ErrorCode::BadPattern, "num_layers must be a positive integer");
      cfg.num_layers = j["num_layers"].get<std::size_t>();
    }
    cfg.validate();
    return cfg;
  }

  static LayerPatternConfig load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(read_file_bytes(path)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::BadPattern, "cannot parse pattern config '" + path.string() + "': " + e.what());
    }
  }

  /// Naming used by the built-in toy transformer.
  static LayerPatternConfig toy() {
    return {"layer.{layer}.attn.q.weight", "layer.{layer}.attn.k.weight", "layer.{layer}.attn.v.weight",
            std::nullopt, std::nullopt, std::nullopt, std::nullopt};
  }

  /// Hugging Face BertModel naming.
  static LayerPatternConfig bert() {
    const std::string p = "encoder.layer.{layer}.attention.self.";
    return {p + "query.weight", p + "key.weight", p + "value.weight", p + "query.bias", p + "key.bias",
            p + "value.bias", std::nullopt};
  }

  /// Hugging Face HubertModel naming.
  static LayerPatternConfig hubert() {
    const std::string p = "encoder.layers.{layer}.attention.";
    return {p + "q_proj.weight", p + "k_proj.weight", p + "v_proj.weight", p + "q_proj.bias", p + "k_proj.bias",
            p + "v_proj.bias", std::nullopt};
  }
};

inline std::string substitute_layer(const std::string& pattern, std::size_t layer) {
  std::string out = pattern;
  const auto pos = out.find(kLayerPlaceholder);
  out.replace(pos, kLayerPlaceholder.size(), std::to_string(layer));
  return out;
}

enum class Role { Q, K, V, QBias, KBias, VBias };

inline std::string_view role_name(Role r) {
  switch (r) {
    case Role::Q: return "Q";
    case Role::K: return "K";
    case Role::V: return "V";
    case Role::QBias: return "QBias";
    case Role::KBias: return "KBias";
    case Role::VBias: return "VBias";
  }
  return "?";
}

struct AttentionLayer {
  std::size_t index = 0;
  std::string q, k, v;
  std::optional<std::string> q_bias, k_bias, v_bias;
  Shape weight_shape;
  std::optional<Shape> bias_shape;

  /// (role, tensor name) pairs of the attention set; biases only when requested and present.
  std::vector<std::pair<Role, std::string>> tensors(bool include_bias) const {
    std::vector<std::pair<Role, std::string>> out{{Role::Q, q}, {Role::K, k}, {Role::V, v}};
    if (include_bias && q_bias) {
      out.emplace_back(Role::QBias, *q_bias);
      out.emplace_back(Role::KBias, *k_bias);
      out.emplace_back(Role::VBias, *v_bias);
    }
    return out;
  }
};

struct ModelView {
  std::vector<AttentionLayer> layers;
  std::size_t hidden_size = 0;

  std::size_t num_layers() const { return layers.size(); }
  bool has_bias() const { return !layers.empty() && layers.front().q_bias.has_value(); }
};

/// Discovers layers 0..L-1 by substituting {layer} until the first index with
/// no attention tensors, or exactly cfg.num_layers layers when given.
inline ModelView build_model_view(const Checkpoint& c, const LayerPatternConfig& cfg) {
  cfg.validate();
  ModelView view;
  for (std::size_t i = 0;; ++i) {
    if (cfg.num_layers && i == *cfg.num_layers) break;
    AttentionLayer layer;
    layer.index = i;
    layer.q = substitute_layer(cfg.q, i);
    layer.k = substitute_layer(cfg.k, i);
    layer.v = substitute_layer(cfg.v, i);
    std::vector<std::string> names{layer.q, layer.k, layer.v};
    if (cfg.has_bias()) {
      layer.q_bias = substitute_layer(*cfg.q_bias, i);
      layer.k_bias = substitute_layer(*cfg.k_bias, i);
      layer.v_bias = substitute_layer(*cfg.v_bias, i);
      names.insert(names.end(), {*layer.q_bias, *layer.k_bias, *layer.v_bias});
    }
    for (std::size_t a = 0; a < names.size(); ++a)
      for (std::size_t b = a + 1; b < names.size(); ++b)
        if (names[a] == names[b]) fail(ErrorCode::BadPattern, "two roles map to tensor '" + names[a] + "'");

    const auto present = std::count_if(names.begin(), names.end(), [&](const auto& n) { return c.contains(n); });
    if (present == 0) {
      if (i == 0) fail(ErrorCode::NoLayersFound, "no attention tensors for layer 0 (looked for '" + layer.q + "')");
      if (cfg.num_layers)
        fail(ErrorCode::NoLayersFound, "layer " + std::to_string(i) + " requested by num_layers is missing");
      break;
    }
    if (static_cast<std::size_t>(present) != names.size()) {
      std::string missing;
      for (const auto& n : names)
        if (!c.contains(n)) missing += (missing.empty() ? "" : ", ") + n;
      fail(ErrorCode::RaggedLayers, "layer " + std::to_string(i) + " is missing " + missing);
    }

    const auto& q = c.at(layer.q);
    if (q.rank() != 2) fail(ErrorCode::ShapeInconsistent, "layer " + std::to_string(i) + " Q weight is not a matrix");
    if (c.at(layer.k).shape() != q.shape() || c.at(layer.v).shape() != q.shape())
      fail(ErrorCode::ShapeInconsistent, "layer " + std::to_string(i) + " Q/K/V shapes differ");
    layer.weight_shape = q.shape();
    if (layer.q_bias) {
      const auto& bs = c.at(*layer.q_bias).shape();
      if (bs != Shape{q.shape()[0]} || c.at(*layer.k_bias).shape() != bs || c.at(*layer.v_bias).shape() != bs)
        fail(ErrorCode::ShapeInconsistent, "layer " + std::to_string(i) + " bias shapes do not match the weights");
      layer.bias_shape = bs;
    }
    const std::size_t hidden = q.shape()[0];
    if (i == 0) view.hidden_size = hidden;
    else if (hidden != view.hidden_size)
      fail(ErrorCode::ShapeInconsistent, "layer " + std::to_string(i) + " hidden size " + std::to_string(hidden) +
                                             " differs from layer 0 (" + std::to_string(view.hidden_size) + ")");
    view.layers.push_back(std::move(layer));
  }
  return view;
}

/// Source and target must agree on layer count and per-layer Q/K/V shapes.
inline void validate_compatibility(const ModelView& source, const ModelView& target) {
  if (source.num_layers() != target.num_layers())
    fail(ErrorCode::LayerCountMismatch, "source has " + std::to_string(source.num_layers()) + " layers, target has " +
                                            std::to_string(target.num_layers()));
  for (std::size_t i = 0; i < source.num_layers(); ++i) {
    const auto& s = source.layers[i];
    const auto& t = target.layers[i];
    if (s.weight_shape != t.weight_shape)
      fail(ErrorCode::ShapeMismatch, "layer " + std::to_string(i) + " role Q: " + shape_string(s.weight_shape) +
                                         " vs " + shape_string(t.weight_shape));
    if (s.bias_shape && t.bias_shape && *s.bias_shape != *t.bias_shape)
      fail(ErrorCode::ShapeMismatch, "layer " + std::to_string(i) + " role QBias: " + shape_string(*s.bias_shape) +
                                         " vs " + shape_string(*t.bias_shape));
  }
}

}  // namespace mam
