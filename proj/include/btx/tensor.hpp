#pragma once

// Dense tensors with reverse-mode autodiff over the op set a decoder-only
// transformer needs. Scalar type is a template parameter: float for training,
// double for gradient checking.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "btx/common.hpp"

namespace btx {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline uint64_t next_tensor_id() {
  static std::atomic<uint64_t> counter{0};
  return ++counter;
}

template <typename S>
struct TensorStorage {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // allocated lazily, same size as values
  bool requires_grad = false;
  uint64_t id = next_tensor_id();

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  Tensor() : st_(nullptr) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->shape = std::move(shape);
    t.st_->values.assign(static_cast<size_t>(shape_numel(t.st_->shape)), S(0));
    return t;
  }

  static Tensor full(Shape shape, S value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.st_->values.begin(), t.st_->values.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> values) {
    require(shape_numel(shape) == static_cast<int64_t>(values.size()),
            "tensor data length does not match shape " + shape_str(shape));
    Tensor t;
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->shape = std::move(shape);
    t.st_->values = std::move(values);
    return t;
  }

  static Tensor scalar(S value) { return from({}, {value}); }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int64_t numel() const { return static_cast<int64_t>(st_->values.size()); }
  int64_t dim(size_t i) const { return st_->shape.at(i); }
  size_t rank() const { return st_->shape.size(); }
  uint64_t id() const { return st_->id; }

  S* data() { return st_->values.data(); }
  const S* data() const { return st_->values.data(); }
  std::vector<S>& values() { return st_->values; }
  const std::vector<S>& values() const { return st_->values; }

  S item() const {
    require(numel() == 1, "item() requires a one-element tensor");
    return st_->values[0];
  }

  S at(int64_t r, int64_t c) const { return st_->values[static_cast<size_t>(r * dim(1) + c)]; }
  S& at(int64_t r, int64_t c) { return st_->values[static_cast<size_t>(r * dim(1) + c)]; }

  bool requires_grad() const { return st_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    st_->requires_grad = v;
    if (v) st_->ensure_grad();
    return *this;
  }

  std::vector<S>& grad() {
    st_->ensure_grad();
    return st_->grad;
  }
  const std::vector<S>& grad_view() const { return st_->grad; }
  void zero_grad() {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }

  // Deep copy of the values; grad and tape history are not carried over.
  Tensor clone() const {
    Tensor t;
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->shape = st_->shape;
    t.st_->values = st_->values;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> v(st_->values.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(st_->values[i]);
    return Tensor<T>::from(st_->shape, std::move(v));
  }

  std::shared_ptr<TensorStorage<S>> storage() const { return st_; }

 private:
  std::shared_ptr<TensorStorage<S>> st_;
};

// Tape of backward closures in forward (topological) order. One backward pass
// per tape; the node list is cleared by it. Thread-local activation: ops
// record onto the innermost live tape of the current thread.
template <typename S>
class GradTape {
 public:
  GradTape() {
    prev_ = active_;
    active_ = this;
  }
  ~GradTape() { active_ = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  void record(const char* op, std::function<void()> backward) {
    nodes_.push_back({op, std::move(backward)});
  }

  size_t size() const { return nodes_.size(); }

  void backward(Tensor<S> root) {
    require(root.numel() == 1, "backward root must be a scalar tensor");
    require(!consumed_, "tape already consumed by a previous backward pass");
    require(root.requires_grad(), "backward root was not recorded on the tape");
    consumed_ = true;
    root.grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    nodes_.clear();
  }

 private:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  GradTape* prev_ = nullptr;
  static thread_local GradTape* active_;
};

template <typename S>
thread_local GradTape<S>* GradTape<S>::active_ = nullptr;

namespace detail {

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
  for (S v : t.values()) {
    if (!std::isfinite(static_cast<double>(v))) {
      fail(std::string("non-finite value produced by op '") + op + "' (tensor #" +
           std::to_string(t.id()) + ")");
    }
  }
}

// Marks the output differentiable and records the closure when a tape is live
// and some input needs gradients.
template <typename S, typename Fn>
void track(const char* op, Tensor<S>& out, bool any_input_grad, Fn&& backward) {
  check_finite(out, op);
  if (any_input_grad && GradTape<S>::active() != nullptr) {
    out.set_requires_grad(true);
    GradTape<S>::active()->record(op, std::forward<Fn>(backward));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op set
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
  require(a.dim(1) == b.dim(0), "matmul inner extents differ: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  // ikj order: unit-stride inner loop, vectorizes well
  const S* pa = a.data();
  const S* pb = b.data();
  S* pc = out.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t kk = 0; kk < k; ++kk) {
      const S aik = pa[i * k + kk];
      if (aik == S(0)) continue;
      const S* brow = pb + kk * n;
      S* crow = pc + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  bool track_a = a.requires_grad();
  bool track_b = b.requires_grad();
  detail::track("matmul", out, track_a || track_b, [=]() mutable {
    auto as = a.storage();
    auto bs = b.storage();
    auto os = out.storage();
    const S* dc = os->grad.data();
    if (track_a) {
      as->ensure_grad();
      S* da = as->grad.data();
      const S* pbv = bs->values.data();
      // dA += dC * B^T (row-by-row dot products)
      for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
          const S* drow = dc + i * n;
          const S* brow = pbv + kk * n;
          S acc = 0;
          for (int64_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
          da[i * k + kk] += acc;
        }
    }
    if (track_b) {
      bs->ensure_grad();
      S* db = bs->grad.data();
      // dB += A^T * dC
      for (int64_t kk = 0; kk < k; ++kk)
        for (int64_t i = 0; i < m; ++i) {
          const S aik = as->values[static_cast<size_t>(i * k + kk)];
          if (aik == S(0)) continue;
          const S* drow = dc + i * n;
          S* brow = db + kk * n;
          for (int64_t j = 0; j < n; ++j) brow[j] += aik * drow[j];
        }
    }
  });
  return out;
}

namespace detail {
template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + " shape mismatch: " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}
}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  bool ga = a.requires_grad(), gb = b.requires_grad();
  detail::track("add", out, ga || gb, [=]() mutable {
    auto os = out.storage();
    if (ga) {
      auto as = a.storage();
      as->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i];
    }
    if (gb) {
      auto bs = b.storage();
      bs->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i) bs->grad[i] += os->grad[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  bool ga = a.requires_grad(), gb = b.requires_grad();
  detail::track("mul", out, ga || gb, [=]() mutable {
    auto os = out.storage();
    if (ga) {
      auto as = a.storage();
      as->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i] * b.data()[i];
    }
    if (gb) {
      auto bs = b.storage();
      bs->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i) bs->grad[i] += os->grad[i] * a.data()[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
  detail::track("scale", out, a.requires_grad(), [=]() mutable {
    auto as = a.storage();
    auto os = out.storage();
    as->ensure_grad();
    for (size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i] * c;
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  S acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  detail::track("sum", out, a.requires_grad(), [=]() mutable {
    auto as = a.storage();
    auto os = out.storage();
    as->ensure_grad();
    const S d = os->grad[0];
    for (auto& g : as->grad) g += d;
  });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

// Softmax along the given axis, max-subtracted for stability.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  require(!x.shape().empty(), "softmax needs rank >= 1");
  if (axis < 0) axis += static_cast<int>(x.rank());
  require(axis >= 0 && axis < static_cast<int>(x.rank()), "softmax axis out of range");
  const auto& shape = x.shape();
  int64_t axis_n = shape[static_cast<size_t>(axis)];
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  int64_t outer = x.numel() / (axis_n * inner);

  Tensor<S> out = Tensor<S>::zeros(shape);
  const S* px = x.data();
  S* py = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * axis_n * inner + in;
      S mx = px[base];
      for (int64_t a = 1; a < axis_n; ++a) mx = std::max(mx, px[base + a * inner]);
      S total = 0;
      for (int64_t a = 0; a < axis_n; ++a) {
        S e = std::exp(px[base + a * inner] - mx);
        py[base + a * inner] = e;
        total += e;
      }
      for (int64_t a = 0; a < axis_n; ++a) py[base + a * inner] /= total;
    }
  }
  detail::track("softmax", out, x.requires_grad(), [=]() mutable {
    auto xs = x.storage();
    auto os = out.storage();
    xs->ensure_grad();
    const S* y = os->values.data();
    const S* dy = os->grad.data();
    S* dx = xs->grad.data();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * axis_n * inner + in;
        S dot = 0;
        for (int64_t a = 0; a < axis_n; ++a) dot += dy[base + a * inner] * y[base + a * inner];
        for (int64_t a = 0; a < axis_n; ++a) {
          const int64_t k = base + a * inner;
          dx[k] += y[k] * (dy[k] - dot);
        }
      }
    }
  });
  return out;
}

// x / sqrt(mean(x^2) + eps) * gain, normalizing the last axis.
template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gain, S eps) {
  require(x.rank() >= 1, "rms_norm needs rank >= 1");
  const int64_t d = x.shape().back();
  require(gain.numel() == d, "rms_norm gain must match the last axis");
  const int64_t rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> inv_rms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const S* px = x.data() + r * d;
    S ms = 0;
    for (int64_t i = 0; i < d; ++i) ms += px[i] * px[i];
    ms = ms / static_cast<S>(d) + eps;
    const S inv = S(1) / std::sqrt(ms);
    inv_rms[static_cast<size_t>(r)] = inv;
    S* py = out.data() + r * d;
    for (int64_t i = 0; i < d; ++i) py[i] = px[i] * inv * gain.data()[i];
  }
  bool gx = x.requires_grad(), gg = gain.requires_grad();
  detail::track("rms_norm", out, gx || gg, [=]() mutable {
    auto xs = x.storage();
    auto gs = gain.storage();
    auto os = out.storage();
    const S* dy = os->grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* px = xs->values.data() + r * d;
      const S inv = inv_rms[static_cast<size_t>(r)];
      if (gx) {
        xs->ensure_grad();
        S* dx = xs->grad.data() + r * d;
        const S* drow = dy + r * d;
        S dot = 0;  // sum of dy*g*x
        for (int64_t i = 0; i < d; ++i) dot += drow[i] * gs->values[static_cast<size_t>(i)] * px[i];
        const S c = dot * inv * inv * inv / static_cast<S>(d);
        for (int64_t i = 0; i < d; ++i)
          dx[i] += drow[i] * gs->values[static_cast<size_t>(i)] * inv - px[i] * c;
      }
      if (gg) {
        gs->ensure_grad();
        const S* drow = dy + r * d;
        for (int64_t i = 0; i < d; ++i) gs->grad[static_cast<size_t>(i)] += drow[i] * px[i] * inv;
      }
    }
  });
  return out;
}

// Gathers rows of `table` (V x d) by token id.
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int32_t>& ids) {
  require(table.rank() == 2, "embedding table must be rank-2");
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int32_t id : ids)
    require(id >= 0 && id < v, "token id " + std::to_string(id) + " out of range [0," +
                                   std::to_string(v) + ")");
  const int64_t t = static_cast<int64_t>(ids.size());
  Tensor<S> out = Tensor<S>::zeros({t, d});
  for (int64_t i = 0; i < t; ++i)
    std::copy_n(table.data() + ids[static_cast<size_t>(i)] * d, d, out.data() + i * d);
  detail::track("embedding", out, table.requires_grad(), [=]() mutable {
    auto ts = table.storage();
    auto os = out.storage();
    ts->ensure_grad();
    for (int64_t i = 0; i < t; ++i) {
      S* dst = ts->grad.data() + ids[static_cast<size_t>(i)] * d;
      const S* src = os->grad.data() + i * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  require(shape_numel(new_shape) == x.numel(), "reshape changes element count");
  Tensor<S> out = Tensor<S>::from(std::move(new_shape), x.values());
  detail::track("reshape", out, x.requires_grad(), [=]() mutable {
    auto xs = x.storage();
    auto os = out.storage();
    xs->ensure_grad();
    for (size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
  });
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  require(x.rank() == 2, "transpose expects a rank-2 tensor");
  const int64_t m = x.dim(0), n = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.data()[j * m + i] = x.data()[i * n + j];
  detail::track("transpose", out, x.requires_grad(), [=]() mutable {
    auto xs = x.storage();
    auto os = out.storage();
    xs->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) xs->grad[static_cast<size_t>(i * n + j)] += os->grad[static_cast<size_t>(j * m + i)];
  });
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const S v = x.data()[i];
    out.data()[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                              : std::exp(v) / (S(1) + std::exp(v));
  }
  detail::track("sigmoid", out, x.requires_grad(), [=]() mutable {
    auto xs = x.storage();
    auto os = out.storage();
    xs->ensure_grad();
    for (size_t i = 0; i < os->grad.size(); ++i) {
      const S y = os->values[i];
      xs->grad[i] += os->grad[i] * y * (S(1) - y);
    }
  });
  return out;
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::log(x.data()[i]);
  detail::track("log", out, x.requires_grad(), [=]() mutable {
    auto xs = x.storage();
    auto os = out.storage();
    xs->ensure_grad();
    for (size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i] / xs->values[i];
  });
  return out;
}

// log(sigmoid(x)) in the overflow-safe form; keeps DPO losses finite for
// large |margin|.
template <typename S>
Tensor<S> logsigmoid(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const S v = x.data()[i];
    out.data()[i] = v >= S(0) ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
  }
  detail::track("logsigmoid", out, x.requires_grad(), [=]() mutable {
    auto xs = x.storage();
    auto os = out.storage();
    xs->ensure_grad();
    for (size_t i = 0; i < os->grad.size(); ++i) {
      const S v = xs->values[i];
      const S sig_neg = v >= S(0) ? std::exp(-v) / (S(1) + std::exp(-v))
                                  : S(1) / (S(1) + std::exp(v));
      xs->grad[i] += os->grad[i] * sig_neg;
    }
  });
  return out;
}

// Mean over unmasked positions of -log softmax(logits)[target].
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int32_t>& targets,
                        const std::vector<uint8_t>& mask) {
  require(logits.rank() == 2, "cross_entropy expects rank-2 logits");
  const int64_t t = logits.dim(0), v = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == t, "cross_entropy targets length mismatch");
  require(static_cast<int64_t>(mask.size()) == t, "cross_entropy mask length mismatch");
  int64_t active = 0;
  for (uint8_t m : mask) active += m ? 1 : 0;
  require(active > 0, "empty loss support");
  for (int64_t i = 0; i < t; ++i)
    require(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < v,
            "cross_entropy target out of range");

  S total = 0;
  std::vector<S> lse(static_cast<size_t>(t)), mx(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const S* row = logits.data() + i * v;
    S m = row[0];
    for (int64_t j = 1; j < v; ++j) m = std::max(m, row[j]);
    S s = 0;
    for (int64_t j = 0; j < v; ++j) s += std::exp(row[j] - m);
    const S l = m + std::log(s);
    mx[static_cast<size_t>(i)] = m;
    lse[static_cast<size_t>(i)] = l;
    total += l - row[targets[static_cast<size_t>(i)]];
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(active));
  detail::track("cross_entropy", out, logits.requires_grad(), [=]() mutable {
    auto ls = logits.storage();
    auto os = out.storage();
    ls->ensure_grad();
    const S d = os->grad[0] / static_cast<S>(active);
    for (int64_t i = 0; i < t; ++i) {
      if (!mask[static_cast<size_t>(i)]) continue;
      const S* row = ls->values.data() + i * v;
      S* drow = ls->grad.data() + i * v;
      const S m = mx[static_cast<size_t>(i)];
      const S l = lse[static_cast<size_t>(i)];
      for (int64_t j = 0; j < v; ++j) {
        const S p = std::exp(row[j] - m) / std::exp(l - m);
        drow[j] += d * (p - (j == targets[static_cast<size_t>(i)] ? S(1) : S(0)));
      }
    }
  });
  return out;
}

template <typename S>
void backward(GradTape<S>& tape, const Tensor<S>& root) {
  tape.backward(root);
}

}  // namespace btx
