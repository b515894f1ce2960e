// SPDX-License-Identifier: Apache-2.0
// Shared generators for the unit tests and the acceptance runner.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mam/mam.hpp"

namespace mam::fixtures {

template <typename F>
bool throws_code(F&& f, ErrorCode code) {
  try {
    f();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, DType dtype = DType::F32, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from_values(dtype, shape, v);
}

inline std::string random_name(Rng& rng) {
  static const std::string alphabet = "abcxyz019._-/\"\\ \xc3\xa9";
  std::string s = "t";
  const auto len = 1 + rng.below(12);
  for (std::uint64_t i = 0; i < len; ++i) {
    char c = alphabet[rng.below(alphabet.size())];
    if (c == '\xc3' || c == '\xa9') {
      s += "\xc3\xa9";
      continue;
    }
    s += c;
  }
  return s;
}

/// 1..max_tensors tensors of mixed rank, dims and dtype, plus random metadata.
inline Checkpoint random_checkpoint(Rng& rng, std::size_t max_tensors = 64) {
  Checkpoint c;
  const auto n = 1 + rng.below(max_tensors);
  while (c.size() < n) {
    const auto name = random_name(rng) + std::to_string(c.size());
    Shape shape(1 + rng.below(4));
    for (auto& d : shape) d = 1 + rng.below(6);
    const DType dt = rng.below(2) ? DType::F32 : DType::F64;
    // occasional extreme magnitudes and signed zeros
    auto t = random_tensor(shape, rng, dt, std::pow(10.0, static_cast<double>(rng.below(60)) - 30.0));
    if (rng.below(8) == 0) t = Tensor::from_values(dt, shape, std::vector<double>(shape_numel(shape), -0.0));
    c.add(name, std::move(t));
  }
  const auto m = rng.below(4);
  for (std::uint64_t i = 0; i < m; ++i) c.metadata()["k" + random_name(rng)] = random_name(rng);
  return c;
}

/// Checkpoint with toy-style attention names for L layers of width d, plus
/// non-attention tensors that merges must leave alone.
inline Checkpoint attention_checkpoint(Rng& rng, std::size_t layers, std::size_t d, DType dtype = DType::F32,
                                       bool biases = false) {
  Checkpoint c;
  c.add("embed.weight", random_tensor({10, d}, rng, dtype));
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".attn.";
    for (const char* r : {"q", "k", "v", "o"}) c.add(p + r + ".weight", random_tensor({d, d}, rng, dtype));
    if (biases)
      for (const char* r : {"q", "k", "v"}) c.add(p + r + ".bias", random_tensor({d}, rng, dtype));
    c.add("layer." + std::to_string(i) + ".ffn.w1", random_tensor({2 * d, d}, rng, dtype));
  }
  c.add("head.weight", random_tensor({3, d}, rng, dtype));
  return c;
}

inline LayerPatternConfig toy_pattern_with_bias() {
  auto cfg = LayerPatternConfig::toy();
  cfg.q_bias = "layer.{layer}.attn.q.bias";
  cfg.k_bias = "layer.{layer}.attn.k.bias";
  cfg.v_bias = "layer.{layer}.attn.v.bias";
  return cfg;
}

inline std::string container_bytes(const std::string& header, const std::string& buffer) {
  std::string out(8, '\0');
  std::uint64_t n = header.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((n >> (8 * i)) & 0xFF);
  return out + header + buffer;
}

/// Files that every reader must reject with MalformedHeader.
inline std::vector<std::pair<std::string, std::string>> malformed_corpus() {
  std::vector<std::pair<std::string, std::string>> out;
  const std::string buf16(16, '\x01');
  const std::string ok_header = R"({"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]},)"
                                R"("b":{"data_offsets":[8,16],"dtype":"F32","shape":[2]}})";
  const std::string valid = container_bytes(ok_header, buf16);

  out.emplace_back("empty file", "");
  out.emplace_back("short length prefix", valid.substr(0, 5));
  for (std::size_t cut : {8ul, 9ul, 8 + ok_header.size() / 2, 8 + ok_header.size() - 1})
    out.emplace_back("truncated header at " + std::to_string(cut), valid.substr(0, cut));
  out.emplace_back("truncated data", valid.substr(0, valid.size() - 3));
  {
    std::string big = valid;
    big[0] = '\xff';
    big[1] = '\xff';
    out.emplace_back("length exceeds file", big);
  }
  out.emplace_back("bad json", container_bytes(R"({"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]})", buf16));
  out.emplace_back("garbage json", container_bytes("not json at all", buf16));
  out.emplace_back("header is an array", container_bytes("[1,2]", ""));
  out.emplace_back("overlap",
                   container_bytes(R"({"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]},)"
                                   R"("b":{"data_offsets":[4,12],"dtype":"F32","shape":[2]}})",
                                   buf16.substr(0, 12)));
  out.emplace_back("duplicate range",
                   container_bytes(R"({"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]},)"
                                   R"("b":{"data_offsets":[0,8],"dtype":"F32","shape":[2]}})",
                                   buf16.substr(0, 8)));
  out.emplace_back("gap", container_bytes(R"({"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]},)"
                                          R"("b":{"data_offsets":[12,20],"dtype":"F32","shape":[2]}})",
                                          std::string(20, '\x01')));
  out.emplace_back("out of bounds",
                   container_bytes(R"({"a":{"data_offsets":[0,32],"dtype":"F32","shape":[8]}})", buf16));
  out.emplace_back("size mismatch",
                   container_bytes(R"({"a":{"data_offsets":[0,16],"dtype":"F32","shape":[3]}})", buf16));
  out.emplace_back("reversed offsets",
                   container_bytes(R"({"a":{"data_offsets":[16,0],"dtype":"F32","shape":[4]}})", buf16));
  out.emplace_back("trailing bytes", container_bytes(R"({"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]}})",
                                                     buf16));
  out.emplace_back("zero dimension",
                   container_bytes(R"({"a":{"data_offsets":[0,0],"dtype":"F32","shape":[0]}})", ""));
  out.emplace_back("missing dtype", container_bytes(R"({"a":{"data_offsets":[0,16],"shape":[4]}})", buf16));
  out.emplace_back("negative shape",
                   container_bytes(R"({"a":{"data_offsets":[0,16],"dtype":"F32","shape":[-4]}})", buf16));
  out.emplace_back("string offsets",
                   container_bytes(R"({"a":{"data_offsets":["0","16"],"dtype":"F32","shape":[4]}})", buf16));
  out.emplace_back("metadata not strings",
                   container_bytes(R"({"__metadata__":{"x":1},"a":{"data_offsets":[0,16],"dtype":"F32","shape":[4]}})",
                                   buf16));
  return out;
}

}  // namespace mam::fixtures
