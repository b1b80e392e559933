#pragma once

// Low-rank adapter pairs. An adapted weight W (d_in x d_out) behaves as
// W + (alpha/rank) * down * up with down: d_in x r and up: r x d_out; the
// delta starts at zero because up is zero-initialized.

#include <map>
#include <string>
#include <vector>

#include "btx/common.hpp"
#include "btx/tensor.hpp"

namespace btx {

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  // substring patterns matched against canonical tensor names
  std::vector<std::string> target_patterns = {"attn.q", "attn.k", "attn.v", "attn.o",
                                              "ffn.up", "ffn.gate", "ffn.down", "moe.expert"};

  void validate() const {
    require(rank >= 1, "lora.rank must be >= 1");
    require(std::isfinite(alpha / rank), "lora scaling alpha/rank must be finite");
  }

  double scaling() const { return alpha / static_cast<double>(rank); }

  bool matches(const std::string& name) const {
    for (const auto& p : target_patterns)
      if (name.find(p) != std::string::npos) return true;
    return false;
  }
};

template <typename S>
struct LoraAdapter {
  Tensor<S> down;  // d_in x r
  Tensor<S> up;    // r x d_out
  S scaling = S(1);
};

template <typename S>
using LoraSet = std::map<std::string, LoraAdapter<S>>;

// x * (W + s * down * up) without forming the dense delta.
template <typename S>
Tensor<S> lora_linear(const Tensor<S>& x, const Tensor<S>& w, const LoraAdapter<S>* adapter) {
  Tensor<S> out = matmul(x, w);
  if (adapter != nullptr)
    out = add(out, scale(matmul(matmul(x, adapter->down), adapter->up), adapter->scaling));
  return out;
}

}  // namespace btx
