#pragma once

// Checkpoint file format (bit-exact):
//   magic "BTXF" | format version u32 | header length u64 | UTF-8 JSON header
//   then per-tensor records, sorted by name:
//     name length u32 | name bytes | dtype tag u8 (0=f32, 1=f64) | rank u8 |
//     extents u64 each | raw little-endian scalar data
// All integers little-endian.

#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "btx/common.hpp"
#include "btx/model.hpp"

namespace btx {

constexpr uint32_t kCheckpointVersion = 1;

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j{{"n_layers", cfg.n_layers},   {"d_model", cfg.d_model},
                   {"n_heads", cfg.n_heads},     {"d_ff", cfg.d_ff},
                   {"vocab_size", cfg.vocab_size}, {"max_context", cfg.max_context}};
  if (cfg.moe)
    j["moe"] = {{"n_experts", cfg.moe->n_experts},
                {"top_k", cfg.moe->top_k},
                {"lb_coeff", cfg.moe->lb_coeff}};
  else
    j["moe"] = nullptr;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_context = j.at("max_context").get<int>();
  if (j.contains("moe") && !j.at("moe").is_null()) {
    MoeConfig moe;
    moe.n_experts = j.at("moe").at("n_experts").get<int>();
    moe.top_k = j.at("moe").at("top_k").get<int>();
    moe.lb_coeff = j.at("moe").at("lb_coeff").get<double>();
    cfg.moe = moe;
  }
  return cfg;
}

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}

  std::string take(size_t n) {
    require(pos_ + n <= b_.size(), "truncated checkpoint file: " + path_);
    std::string out = b_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  uint32_t u32() {
    auto s = take(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<size_t>(i)]);
    return v;
  }
  uint64_t u64() {
    auto s = take(8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<size_t>(i)]);
    return v;
  }
  uint8_t u8() { return static_cast<unsigned char>(take(1)[0]); }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::string path_;
  size_t pos_ = 0;
};

template <typename S>
constexpr uint8_t dtype_tag() {
  return std::is_same_v<S, float> ? 0 : 1;
}

// little-endian scalar encode/decode via bit pattern
template <typename S>
void put_scalar(std::string& out, S v) {
  using U = std::conditional_t<sizeof(S) == 4, uint32_t, uint64_t>;
  U bits;
  std::memcpy(&bits, &v, sizeof(S));
  for (size_t i = 0; i < sizeof(S); ++i) out += static_cast<char>((bits >> (8 * i)) & 0xff);
}

template <typename S>
S get_scalar(const unsigned char* p) {
  using U = std::conditional_t<sizeof(S) == 4, uint32_t, uint64_t>;
  U bits = 0;
  for (size_t i = sizeof(S); i > 0; --i) bits = (bits << 8) | p[i - 1];
  S v;
  std::memcpy(&v, &bits, sizeof(S));
  return v;
}

}  // namespace detail

template <typename S>
std::string serialize_checkpoint(const Checkpoint<S>& ckpt) {
  validate_checkpoint(ckpt);
  nlohmann::json header{{"config", model_config_to_json(ckpt.config)},
                        {"metadata", ckpt.metadata}};
  const std::string header_text = header.dump();

  std::string out = "BTXF";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, header_text.size());
  out += header_text;
  // std::map iteration is already name-sorted
  for (const auto& [name, tensor] : ckpt.tensors) {
    detail::put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    out += static_cast<char>(detail::dtype_tag<S>());
    out += static_cast<char>(tensor.rank());
    for (int64_t e : tensor.shape()) detail::put_u64(out, static_cast<uint64_t>(e));
    for (S v : tensor.values()) detail::put_scalar(out, v);
  }
  return out;
}

template <typename S>
Checkpoint<S> deserialize_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::ByteReader r(bytes, path);
  require(r.take(4) == "BTXF", "not a checkpoint file (bad magic): " + path);
  const uint32_t version = r.u32();
  require(version == kCheckpointVersion,
          "unsupported checkpoint version " + std::to_string(version) + ": " + path);
  const uint64_t header_len = r.u64();
  nlohmann::json header = nlohmann::json::parse(r.take(header_len));
  Checkpoint<S> ckpt;
  ckpt.config = model_config_from_json(header.at("config"));
  ckpt.metadata = header.at("metadata").get<std::string>();
  while (!r.done()) {
    const uint32_t name_len = r.u32();
    const std::string name = r.take(name_len);
    const uint8_t tag = r.u8();
    require(tag == detail::dtype_tag<S>(), "checkpoint dtype mismatch for tensor " + name +
                                               " in " + path);
    const uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<int64_t>(r.u64());
    const int64_t n = shape_numel(shape);
    const std::string raw = r.take(static_cast<size_t>(n) * sizeof(S));
    std::vector<S> values(static_cast<size_t>(n));
    const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
    for (int64_t i = 0; i < n; ++i)
      values[static_cast<size_t>(i)] = detail::get_scalar<S>(p + static_cast<size_t>(i) * sizeof(S));
    ckpt.tensors.emplace(name, Tensor<S>::from(std::move(shape), std::move(values)));
  }
  validate_checkpoint(ckpt);
  return ckpt;
}

template <typename S>
void save_checkpoint(const Checkpoint<S>& ckpt, const std::string& path) {
  write_file(path, serialize_checkpoint(ckpt));
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<S>(read_file(path), path);
}

}  // namespace btx
