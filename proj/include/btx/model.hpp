#pragma once

// Byte-level decoder-only transformer: pre-norm blocks, rotary attention,
// gated feed-forward, and optionally a mixture-of-experts FFN per layer.
// Every layer is composed from the tensor op set, so the whole forward pass
// is differentiable through the tape.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "btx/common.hpp"
#include "btx/lora.hpp"
#include "btx/moe.hpp"
#include "btx/tensor.hpp"
#include "btx/tokenizer.hpp"

namespace btx {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = kVocabSize;
  int max_context = 256;
  std::optional<MoeConfig> moe;

  void validate() const {
    require(n_layers >= 1, "model.n_layers must be >= 1");
    require(d_model >= 1 && n_heads >= 1, "model dims must be positive");
    require(d_model % n_heads == 0, "model.d_model must be divisible by n_heads");
    require(d_ff >= 1, "model.d_ff must be >= 1");
    require(vocab_size >= 2, "model.vocab_size must be >= 2");
    require(max_context >= 1, "model.max_context must be >= 1");
    if (moe) moe->validate();
  }

  int head_dim() const { return d_model / n_heads; }
  bool is_moe() const { return moe.has_value(); }
};

template <typename S>
struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor<S>> tensors;  // canonical names, name-sorted
  std::string metadata;

  const Tensor<S>& at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "checkpoint missing tensor: " + name);
    return it->second;
  }
};

inline std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }

// The canonical parameter list; a checkpoint must carry exactly these names
// with exactly these shapes.
inline std::vector<std::pair<std::string, Shape>> canonical_params(const ModelConfig& cfg) {
  const int64_t d = cfg.d_model, ff = cfg.d_ff, v = cfg.vocab_size;
  std::vector<std::pair<std::string, Shape>> out;
  out.push_back({"embed.tok", {v, d}});
  out.push_back({"head.out", {d, v}});
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = layer_prefix(i);
    out.push_back({p + "norm1.gain", {d}});
    out.push_back({p + "norm2.gain", {d}});
    for (const char* w : {"q", "k", "v", "o"}) out.push_back({p + "attn." + w, {d, d}});
    if (cfg.is_moe()) {
      out.push_back({p + "moe.router", {d, cfg.moe->n_experts}});
      for (int e = 0; e < cfg.moe->n_experts; ++e) {
        const std::string ep = p + "moe.expert." + std::to_string(e) + ".";
        out.push_back({ep + "up", {d, ff}});
        out.push_back({ep + "gate", {d, ff}});
        out.push_back({ep + "down", {ff, d}});
      }
    } else {
      out.push_back({p + "ffn.up", {d, ff}});
      out.push_back({p + "ffn.gate", {d, ff}});
      out.push_back({p + "ffn.down", {ff, d}});
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

template <typename S>
void validate_checkpoint(const Checkpoint<S>& ckpt) {
  ckpt.config.validate();
  auto expected = canonical_params(ckpt.config);
  require(ckpt.tensors.size() == expected.size(),
          "checkpoint tensor count mismatch: have " + std::to_string(ckpt.tensors.size()) +
              ", expected " + std::to_string(expected.size()));
  for (const auto& [name, shape] : expected) {
    auto it = ckpt.tensors.find(name);
    require(it != ckpt.tensors.end(), "checkpoint missing tensor: " + name);
    require(it->second.shape() == shape, "checkpoint tensor " + name + " has shape " +
                                             shape_str(it->second.shape()) + ", expected " +
                                             shape_str(shape));
  }
}

// Deterministic init: scaled-normal weights (std 0.02), residual-feeding
// projections scaled by 1/sqrt(2*n_layers), unit norm gains, zero routers.
template <typename S>
Checkpoint<S> init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Checkpoint<S> ckpt;
  ckpt.config = cfg;
  ckpt.metadata = "init:seed=" + std::to_string(seed);
  const double residual_std = 0.02 / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& [name, shape] : canonical_params(cfg)) {
    Tensor<S> t = Tensor<S>::zeros(shape);
    if (name.find("norm") != std::string::npos) {
      std::fill(t.values().begin(), t.values().end(), S(1));
    } else if (name.find("moe.router") != std::string::npos) {
      // zeros: uniform gating at step 0
    } else {
      const bool residual_proj = name.find("attn.o") != std::string::npos ||
                                 name.find(".down") != std::string::npos;
      const double std_dev = residual_proj ? residual_std : 0.02;
      Rng rng(seed ^ fnv1a64(name));
      for (auto& v : t.values()) v = static_cast<S>(rng.normal(0.0, std_dev));
    }
    ckpt.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

template <typename S>
struct ForwardOptions {
  const LoraSet<S>* lora = nullptr;
  RoutingTrace* trace = nullptr;                    // appended per MoE layer
  const std::vector<ScriptLabel>* labels = nullptr; // per-token, for the trace
  std::vector<Tensor<S>>* aux_losses = nullptr;     // one per MoE layer
};

namespace detail {

template <typename S>
const LoraAdapter<S>* find_adapter(const ForwardOptions<S>& opts, const std::string& name) {
  if (opts.lora == nullptr) return nullptr;
  auto it = opts.lora->find(name);
  return it == opts.lora->end() ? nullptr : &it->second;
}

// Constant tensors reused across layers of one forward call.
template <typename S>
struct ForwardConstants {
  Tensor<S> causal_mask;            // T x T, 0 on/below diagonal, -1e9 above
  Tensor<S> rope_cos, rope_sin;     // T x head_dim
  Tensor<S> rope_rotate;            // head_dim x head_dim pair rotation
  std::vector<Tensor<S>> head_select;  // d x head_dim per head
  Tensor<S> ones_row_d;             // 1 x d

  ForwardConstants(int64_t t, const ModelConfig& cfg) {
    const int64_t d = cfg.d_model, dh = cfg.head_dim();
    causal_mask = Tensor<S>::zeros({t, t});
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = i + 1; j < t; ++j) causal_mask.at(i, j) = S(-1e9);
    rope_cos = Tensor<S>::zeros({t, dh});
    rope_sin = Tensor<S>::zeros({t, dh});
    for (int64_t pos = 0; pos < t; ++pos)
      for (int64_t i = 0; i < dh / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / dh);
        const double angle = static_cast<double>(pos) * freq;
        rope_cos.at(pos, 2 * i) = static_cast<S>(std::cos(angle));
        rope_cos.at(pos, 2 * i + 1) = static_cast<S>(std::cos(angle));
        rope_sin.at(pos, 2 * i) = static_cast<S>(std::sin(angle));
        rope_sin.at(pos, 2 * i + 1) = static_cast<S>(std::sin(angle));
      }
    rope_rotate = Tensor<S>::zeros({dh, dh});
    for (int64_t i = 0; i < dh / 2; ++i) {
      rope_rotate.at(2 * i + 1, 2 * i) = S(-1);
      rope_rotate.at(2 * i, 2 * i + 1) = S(1);
    }
    head_select.reserve(static_cast<size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      Tensor<S> e = Tensor<S>::zeros({d, dh});
      for (int64_t c = 0; c < dh; ++c) e.at(h * dh + c, c) = S(1);
      head_select.push_back(std::move(e));
    }
    ones_row_d = Tensor<S>::full({1, d}, S(1));
  }
};

// x*cos + rotate_pairs(x)*sin, composed from mul/matmul/add.
template <typename S>
Tensor<S> apply_rope(const Tensor<S>& x, const ForwardConstants<S>& c) {
  return add(mul(x, c.rope_cos), mul(matmul(x, c.rope_rotate), c.rope_sin));
}

template <typename S>
Tensor<S> attention_block(const Checkpoint<S>& ckpt, int layer, const Tensor<S>& h,
                          const ForwardConstants<S>& c, const ForwardOptions<S>& opts) {
  const ModelConfig& cfg = ckpt.config;
  const std::string p = layer_prefix(layer) + "attn.";
  auto proj = [&](const char* w) {
    return lora_linear(h, ckpt.at(p + w), find_adapter(opts, p + w));
  };
  Tensor<S> q = proj("q"), k = proj("k"), v = proj("v");
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));
  Tensor<S> merged;
  for (int head = 0; head < cfg.n_heads; ++head) {
    const Tensor<S>& sel = c.head_select[static_cast<size_t>(head)];
    Tensor<S> qh = apply_rope(matmul(q, sel), c);
    Tensor<S> kh = apply_rope(matmul(k, sel), c);
    Tensor<S> vh = matmul(v, sel);
    Tensor<S> scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), c.causal_mask);
    Tensor<S> picked = matmul(softmax(scores, -1), vh);
    Tensor<S> spread = matmul(picked, transpose(sel));
    merged = head == 0 ? spread : add(merged, spread);
  }
  return lora_linear(merged, ckpt.at(p + "o"), find_adapter(opts, p + "o"));
}

template <typename S>
struct FfnParams {
  Tensor<S> up, gate, down;
  std::string name_prefix;  // for adapter lookup
};

template <typename S>
Tensor<S> gated_ffn(const Tensor<S>& h, const FfnParams<S>& ffn, const ForwardOptions<S>& opts) {
  Tensor<S> zu = lora_linear(h, ffn.up, find_adapter(opts, ffn.name_prefix + "up"));
  Tensor<S> zg = lora_linear(h, ffn.gate, find_adapter(opts, ffn.name_prefix + "gate"));
  Tensor<S> act = mul(mul(zg, sigmoid(zg)), zu);
  return lora_linear(act, ffn.down, find_adapter(opts, ffn.name_prefix + "down"));
}

}  // namespace detail

template <typename S>
struct MoeOutput {
  Tensor<S> y;
  Tensor<S> aux_loss;  // N * sum_i f_i P_i, differentiable through P
  RoutingTrace trace;
};

// Top-k expert dispatch. Gates are the softmax over the selected logits
// (unselected entries are pushed to exactly zero by an additive mask), and
// each expert only sees the tokens routed to it.
template <typename S>
MoeOutput<S> moe_apply(const Tensor<S>& h, const std::vector<detail::FfnParams<S>>& experts,
                       const Tensor<S>& router, const MoeConfig& cfg,
                       const ForwardOptions<S>& opts,
                       const std::vector<ScriptLabel>* labels = nullptr) {
  cfg.validate();
  require(static_cast<int>(experts.size()) == cfg.n_experts,
          "expert count does not match moe config");
  const int64_t t = h.dim(0);
  const int n = cfg.n_experts, k = cfg.top_k;
  require(router.rank() == 2 && router.dim(0) == h.dim(1) && router.dim(1) == n,
          "router shape mismatch");

  Tensor<S> logits = matmul(h, router);  // T x N
  TopK topk = route_topk(logits, k);
  Tensor<S> probs = softmax(logits, -1);  // full distribution, for the aux loss

  // renormalized top-k gates via additive masking of unselected experts
  Tensor<S> gate_mask = Tensor<S>::full({t, n}, S(-1e9));
  for (int64_t row = 0; row < t; ++row)
    for (int i = 0; i < k; ++i) gate_mask.at(row, topk.ids[static_cast<size_t>(row * k + i)]) = S(0);
  Tensor<S> gates = softmax(add(logits, gate_mask), -1);  // T x N, zeros off the top-k

  MoeOutput<S> out;
  Tensor<S> ones_row = Tensor<S>::full({1, h.dim(1)}, S(1));
  for (int e = 0; e < n; ++e) {
    std::vector<int64_t> rows;
    for (int64_t row = 0; row < t; ++row)
      for (int i = 0; i < k; ++i)
        if (topk.ids[static_cast<size_t>(row * k + i)] == e) rows.push_back(row);
    if (rows.empty()) continue;
    const int64_t te = static_cast<int64_t>(rows.size());
    Tensor<S> take = Tensor<S>::zeros({te, t});
    for (int64_t r = 0; r < te; ++r) take.at(r, rows[static_cast<size_t>(r)]) = S(1);
    Tensor<S> col = Tensor<S>::zeros({static_cast<int64_t>(n), 1});
    col.at(e, 0) = S(1);

    Tensor<S> xe = matmul(take, h);
    Tensor<S> fe = detail::gated_ffn(xe, experts[static_cast<size_t>(e)], opts);
    Tensor<S> ge = matmul(take, matmul(gates, col));       // te x 1
    Tensor<S> weighted = mul(matmul(ge, ones_row), fe);    // te x d
    Tensor<S> scattered = matmul(transpose(take), weighted);
    out.y = out.y.defined() ? add(out.y, scattered) : scattered;
  }

  // load balance: f from top-1 counts (constant), P from mean router probs
  Tensor<S> f_const = Tensor<S>::zeros({static_cast<int64_t>(n), 1});
  for (int64_t row = 0; row < t; ++row)
    f_const.at(topk.ids[static_cast<size_t>(row * k)], 0) += S(1) / static_cast<S>(t);
  Tensor<S> mean_row = Tensor<S>::full({1, t}, S(1) / static_cast<S>(t));
  Tensor<S> p_mean = matmul(mean_row, probs);  // 1 x N
  out.aux_loss = scale(sum(mul(p_mean, transpose(f_const))), static_cast<S>(n));

  out.trace.entries.reserve(static_cast<size_t>(t));
  for (int64_t row = 0; row < t; ++row) {
    RoutingEntry entry;
    entry.position = row;
    entry.script = labels != nullptr && row < static_cast<int64_t>(labels->size())
                       ? (*labels)[static_cast<size_t>(row)]
                       : ScriptLabel::Other;
    for (int i = 0; i < k; ++i) {
      entry.expert_ids.push_back(topk.ids[static_cast<size_t>(row * k + i)]);
      entry.gates.push_back(topk.gates[static_cast<size_t>(row * k + i)]);
    }
    for (int e = 0; e < n; ++e) entry.router_probs.push_back(static_cast<double>(probs.at(row, e)));
    out.trace.entries.push_back(std::move(entry));
  }
  return out;
}

// Spec-shaped single-layer entry point used by tests and analytics.
template <typename S>
MoeOutput<S> moe_forward(const Tensor<S>& x, const std::vector<std::array<Tensor<S>, 3>>& experts,
                         const Tensor<S>& router, const MoeConfig& cfg,
                         const std::vector<ScriptLabel>* labels = nullptr) {
  std::vector<detail::FfnParams<S>> params;
  params.reserve(experts.size());
  for (const auto& e : experts) params.push_back({e[0], e[1], e[2], ""});
  ForwardOptions<S> opts;
  return moe_apply(x, params, router, cfg, opts, labels);
}

// Logits for one token sequence; participates in the active tape.
template <typename S>
Tensor<S> forward_tokens(const Checkpoint<S>& ckpt, const std::vector<int32_t>& tokens,
                         const ForwardOptions<S>& opts = {}) {
  const ModelConfig& cfg = ckpt.config;
  const int64_t t = static_cast<int64_t>(tokens.size());
  require(t >= 1, "forward on empty token sequence");
  require(t <= cfg.max_context, "sequence length " + std::to_string(t) +
                                    " exceeds max_context " + std::to_string(cfg.max_context));
  detail::ForwardConstants<S> consts(t, cfg);
  Tensor<S> x = embedding(ckpt.at("embed.tok"), tokens);
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = layer_prefix(layer);
    Tensor<S> h1 = rms_norm(x, ckpt.at(p + "norm1.gain"), S(1e-6));
    x = add(x, detail::attention_block(ckpt, layer, h1, consts, opts));
    Tensor<S> h2 = rms_norm(x, ckpt.at(p + "norm2.gain"), S(1e-6));
    if (cfg.is_moe()) {
      std::vector<detail::FfnParams<S>> experts;
      for (int e = 0; e < cfg.moe->n_experts; ++e) {
        const std::string ep = p + "moe.expert." + std::to_string(e) + ".";
        experts.push_back({ckpt.at(ep + "up"), ckpt.at(ep + "gate"), ckpt.at(ep + "down"), ep});
      }
      MoeOutput<S> moe =
          moe_apply(h2, experts, ckpt.at(p + "moe.router"), *cfg.moe, opts, opts.labels);
      x = add(x, moe.y);
      if (opts.aux_losses != nullptr) opts.aux_losses->push_back(moe.aux_loss);
      if (opts.trace != nullptr)
        for (auto& e : moe.trace.entries) opts.trace->entries.push_back(e);
    } else {
      detail::FfnParams<S> ffn{ckpt.at(p + "ffn.up"), ckpt.at(p + "ffn.gate"),
                               ckpt.at(p + "ffn.down"), p + "ffn."};
      x = add(x, detail::gated_ffn(h2, ffn, opts));
    }
  }
  return matmul(x, ckpt.at("head.out"));
}

// Batched convenience wrapper: [B x T x V] logits, no tape participation.
template <typename S>
Tensor<S> forward_logits(const Checkpoint<S>& ckpt, const std::vector<std::vector<int32_t>>& batch) {
  require(!batch.empty(), "forward_logits on empty batch");
  const int64_t t = static_cast<int64_t>(batch[0].size());
  for (const auto& seq : batch)
    require(static_cast<int64_t>(seq.size()) == t, "forward_logits needs equal-length rows");
  Tensor<S> out = Tensor<S>::zeros({static_cast<int64_t>(batch.size()), t, ckpt.config.vocab_size});
  for (size_t b = 0; b < batch.size(); ++b) {
    Tensor<S> logits = forward_tokens(ckpt, batch[b]);
    std::copy(logits.values().begin(), logits.values().end(),
              out.data() + static_cast<int64_t>(b) * t * ckpt.config.vocab_size);
  }
  return out;
}

// exp(mean token-level cross-entropy), teacher-forced over the corpus.
template <typename S>
double perplexity(const Checkpoint<S>& ckpt, const std::vector<std::vector<int32_t>>& corpus) {
  require(!corpus.empty(), "perplexity on empty corpus");
  double total = 0.0;
  int64_t count = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    std::vector<int32_t> inputs(seq.begin(), seq.end() - 1);
    Tensor<S> logits = forward_tokens(ckpt, inputs);
    const int64_t v = ckpt.config.vocab_size;
    for (size_t i = 0; i + 1 < seq.size(); ++i) {
      const S* row = logits.data() + static_cast<int64_t>(i) * v;
      double mx = static_cast<double>(row[0]);
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (int64_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      total += mx + std::log(z) - static_cast<double>(row[seq[i + 1]]);
      ++count;
    }
  }
  require(count > 0, "perplexity needs at least one next-token position");
  return std::exp(total / static_cast<double>(count));
}

struct GenerateMode {
  bool greedy = true;
  double temperature = 1.0;
  uint64_t seed = 0;

  static GenerateMode greedy_mode() { return {true, 0.0, 0}; }
  static GenerateMode sample_mode(double temperature, uint64_t seed) {
    return {false, temperature, seed};
  }
};

// Autoregressive decoding; stops at max_new tokens, the end-of-text token, or
// the context limit. Greedy ties resolve to the lowest token id.
template <typename S>
std::vector<int32_t> generate(const Checkpoint<S>& ckpt, const std::vector<int32_t>& prompt,
                              int max_new, const GenerateMode& mode) {
  require(!prompt.empty(), "generate needs a non-empty prompt");
  require(static_cast<int>(prompt.size()) <= ckpt.config.max_context,
          "prompt exceeds max_context");
  std::vector<int32_t> tokens = prompt;
  Rng rng(mode.seed);
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) >= ckpt.config.max_context) break;
    Tensor<S> logits = forward_tokens(ckpt, tokens);
    const int64_t v = ckpt.config.vocab_size;
    const S* row = logits.data() + (static_cast<int64_t>(tokens.size()) - 1) * v;
    int32_t next = 0;
    if (mode.greedy || mode.temperature <= 0.0) {
      for (int64_t j = 1; j < v; ++j)
        if (row[j] > row[next]) next = static_cast<int32_t>(j);
    } else {
      // inverse-CDF sample of softmax(logits / temperature)
      double mx = static_cast<double>(row[0]);
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      std::vector<double> p(static_cast<size_t>(v));
      double z = 0;
      for (int64_t j = 0; j < v; ++j) {
        p[static_cast<size_t>(j)] = std::exp((static_cast<double>(row[j]) - mx) / mode.temperature);
        z += p[static_cast<size_t>(j)];
      }
      double u = rng.uniform() * z;
      double acc = 0;
      next = static_cast<int32_t>(v - 1);
      for (int64_t j = 0; j < v; ++j) {
        acc += p[static_cast<size_t>(j)];
        if (u < acc) {
          next = static_cast<int32_t>(j);
          break;
        }
      }
    }
    if (next == kEos) break;
    tokens.push_back(next);
  }
  return tokens;
}

}  // namespace btx
