#pragma once

// Mixture-of-experts feed-forward layer: top-k token routing with renormalized
// gates, a load-balancing auxiliary loss, and per-token routing traces.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "btx/common.hpp"
#include "btx/tensor.hpp"

namespace btx {

struct MoeConfig {
  int n_experts = 1;
  int top_k = 1;
  double lb_coeff = 0.01;

  void validate() const {
    require(n_experts >= 1, "moe.n_experts must be >= 1");
    require(top_k >= 1 && top_k <= n_experts, "moe.top_k must be in [1, n_experts]");
    require(lb_coeff >= 0.0, "moe.lb_coeff must be >= 0");
  }
};

enum class ScriptLabel : uint8_t { Arabic, Latin, Mixed, Other };

inline const char* script_label_name(ScriptLabel s) {
  switch (s) {
    case ScriptLabel::Arabic: return "arabic";
    case ScriptLabel::Latin: return "latin";
    case ScriptLabel::Mixed: return "mixed";
    case ScriptLabel::Other: return "other";
  }
  return "other";
}

inline ScriptLabel script_label_from_name(const std::string& s) {
  if (s == "arabic") return ScriptLabel::Arabic;
  if (s == "latin") return ScriptLabel::Latin;
  if (s == "mixed") return ScriptLabel::Mixed;
  if (s == "other") return ScriptLabel::Other;
  fail("unknown script label: " + s);
}

struct RoutingEntry {
  int64_t position = 0;
  ScriptLabel script = ScriptLabel::Other;
  std::vector<int> expert_ids;     // k entries, gate-descending, distinct
  std::vector<double> gates;       // renormalized, positive, sum to 1
  std::vector<double> router_probs;  // full softmax over all N experts
};

struct RoutingTrace {
  std::vector<RoutingEntry> entries;
};

struct TopK {
  std::vector<int> ids;       // T*k, row-major
  std::vector<double> gates;  // T*k
  int k = 0;
};

// Per token: the k largest router logits, ties broken by lowest expert index;
// gates are the softmax over the selected logits only.
template <typename S>
TopK route_topk(const Tensor<S>& router_logits, int k) {
  require(router_logits.rank() == 2, "route_topk expects [T x N] logits");
  const int64_t t = router_logits.dim(0);
  const int64_t n = router_logits.dim(1);
  require(k >= 1 && k <= n, "top_k exceeds expert count");
  TopK out;
  out.k = k;
  out.ids.resize(static_cast<size_t>(t * k));
  out.gates.resize(static_cast<size_t>(t * k));
  std::vector<int> order(static_cast<size_t>(n));
  for (int64_t row = 0; row < t; ++row) {
    const S* l = router_logits.data() + row * n;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (l[a] != l[b]) return l[a] > l[b];
      return a < b;
    });
    double mx = static_cast<double>(l[order[0]]);
    double z = 0;
    std::vector<double> e(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
      e[static_cast<size_t>(i)] = std::exp(static_cast<double>(l[order[static_cast<size_t>(i)]]) - mx);
      z += e[static_cast<size_t>(i)];
    }
    for (int i = 0; i < k; ++i) {
      out.ids[static_cast<size_t>(row * k + i)] = order[static_cast<size_t>(i)];
      out.gates[static_cast<size_t>(row * k + i)] = e[static_cast<size_t>(i)] / z;
    }
  }
  return out;
}

// N * sum_i f_i * P_i over a batch trace, where f_i is the top-1 token share
// of expert i and P_i the mean full-softmax router probability. Computed at
// 64-bit regardless of the model scalar.
inline double load_balance_loss(const RoutingTrace& trace, int n_experts) {
  require(!trace.entries.empty(), "load_balance_loss on empty trace");
  std::vector<double> f(static_cast<size_t>(n_experts), 0.0);
  std::vector<double> p(static_cast<size_t>(n_experts), 0.0);
  for (const auto& e : trace.entries) {
    require(!e.expert_ids.empty(), "trace entry without expert assignments");
    f[static_cast<size_t>(e.expert_ids[0])] += 1.0;
    require(e.router_probs.size() == static_cast<size_t>(n_experts),
            "trace entry missing full router probabilities");
    for (int i = 0; i < n_experts; ++i) p[static_cast<size_t>(i)] += e.router_probs[static_cast<size_t>(i)];
  }
  const double t = static_cast<double>(trace.entries.size());
  double loss = 0.0;
  for (int i = 0; i < n_experts; ++i) loss += (f[static_cast<size_t>(i)] / t) * (p[static_cast<size_t>(i)] / t);
  return loss * n_experts;
}

// Line-oriented trace export: position, script label, "expert:gate" pairs.
inline std::string export_trace(const RoutingTrace& trace) {
  std::string out;
  char buf[64];
  for (const auto& e : trace.entries) {
    out += std::to_string(e.position);
    out += '\t';
    out += script_label_name(e.script);
    for (size_t i = 0; i < e.expert_ids.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "\t%d:%.6f", e.expert_ids[i], e.gates[i]);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline RoutingTrace parse_trace(const std::string& text) {
  RoutingTrace trace;
  for (const auto& line : split_on(text, '\n')) {
    if (line.empty()) continue;
    auto fields = split_on(line, '\t');
    require(fields.size() >= 3, "malformed trace line: " + line);
    RoutingEntry e;
    e.position = std::stoll(fields[0]);
    e.script = script_label_from_name(fields[1]);
    for (size_t i = 2; i < fields.size(); ++i) {
      auto sep = fields[i].find(':');
      require(sep != std::string::npos, "malformed trace pair: " + fields[i]);
      e.expert_ids.push_back(std::stoi(fields[i].substr(0, sep)));
      e.gates.push_back(std::stod(fields[i].substr(sep + 1)));
    }
    trace.entries.push_back(std::move(e));
  }
  return trace;
}

}  // namespace btx
