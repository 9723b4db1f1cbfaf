#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lldif/tensor.hpp"

namespace lldif {

// Reverse-mode autodiff over Tensor values. Graphs are built by the op
// functions below; each node keeps shared_ptrs to its parents and a closure
// that scatters its output gradient into theirs. backward() walks the graph
// in reverse topological order. Leaves created with make_param persist
// across graphs, so parameter gradients accumulate between zero_grad calls.

struct Var;
using VarPtr = std::shared_ptr<Var>;

struct Var {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  std::vector<VarPtr> parents;
  std::function<void(Var&)> backward_fn;
  bool requires_grad = false;

  explicit Var(Tensor v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

  Tensor& grad_ref() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    return grad;
  }
  void zero_grad() { grad = Tensor(); }
  const std::vector<int>& shape() const { return value.shape(); }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph recording in scope; forwards still compute values.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

/// When set, every softmax op appends its probability tensor here.
/// Used by tests to audit attention normalization; single-threaded use only.
inline std::vector<Tensor>*& softmax_probe() {
  thread_local std::vector<Tensor>* probe = nullptr;
  return probe;
}

inline VarPtr make_param(Tensor v) { return std::make_shared<Var>(std::move(v), true); }
inline VarPtr make_const(Tensor v) { return std::make_shared<Var>(std::move(v), false); }

namespace detail {

inline VarPtr make_node(Tensor value, std::vector<VarPtr> parents,
                        std::function<void(Var&)> backward) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto node = std::make_shared<Var>(std::move(value), rg && grad_mode());
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward);
  }
  return node;
}

}  // namespace detail

/// Backpropagates from a scalar root; accumulates into every reachable
/// requires_grad leaf.
inline void backward(const VarPtr& root) {
  check(root->value.numel() == 1, "backward: root must be scalar");
  // iterative post-order DFS for topological order
  std::vector<Var*> topo;
  std::unordered_set<Var*> seen;
  std::vector<std::pair<Var*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Var* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_ref()[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Var* v = *it;
    if (v->backward_fn) v->backward_fn(*v);
  }
}

// ---------------------------------------------------------------------------
// elementwise and scalar ops

inline VarPtr add(const VarPtr& a, const VarPtr& b) {
  check(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor out = a->value + b->value;
  return detail::make_node(std::move(out), {a, b}, [a, b](Var& self) {
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (long i = 0; i < gb.numel(); ++i) gb[i] += self.grad[i];
    }
  });
}

inline VarPtr sub(const VarPtr& a, const VarPtr& b) {
  check(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor out = a->value - b->value;
  return detail::make_node(std::move(out), {a, b}, [a, b](Var& self) {
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (long i = 0; i < gb.numel(); ++i) gb[i] -= self.grad[i];
    }
  });
}

inline VarPtr mul(const VarPtr& a, const VarPtr& b) {
  check(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return detail::make_node(std::move(out), {a, b}, [a, b](Var& self) {
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (long i = 0; i < gb.numel(); ++i) gb[i] += self.grad[i] * a->value[i];
    }
  });
}

inline VarPtr scale(const VarPtr& a, double s) {
  Tensor out = a->value * s;
  return detail::make_node(std::move(out), {a}, [a, s](Var& self) {
    if (!a->requires_grad) return;
    Tensor& ga = a->grad_ref();
    for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * s;
  });
}

inline VarPtr neg(const VarPtr& a) { return scale(a, -1.0); }

/// Elementwise multiply by a scalar variable (e.g. a learnable temperature).
inline VarPtr scale_by(const VarPtr& a, const VarPtr& s) {
  check(s->value.numel() == 1, "scale_by: scale must be scalar");
  double sv = s->value[0];
  Tensor out = a->value * sv;
  return detail::make_node(std::move(out), {a, s}, [a, s, sv](Var& self) {
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * sv;
    }
    if (s->requires_grad) {
      double acc = 0.0;
      for (long i = 0; i < a->value.numel(); ++i) acc += self.grad[i] * a->value[i];
      s->grad_ref()[0] += acc;
    }
  });
}

inline VarPtr exp_op(const VarPtr& a) {
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  Tensor kept = out;
  return detail::make_node(std::move(out), {a}, [a, kept](Var& self) {
    if (!a->requires_grad) return;
    Tensor& ga = a->grad_ref();
    for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * kept[i];
  });
}

/// log(x + eps); the guard keeps the op defined at x = 0.
inline VarPtr log_eps(const VarPtr& a, double eps = 0.0) {
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::log(out[i] + eps);
  return detail::make_node(std::move(out), {a}, [a, eps](Var& self) {
    if (!a->requires_grad) return;
    Tensor& ga = a->grad_ref();
    for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] / (a->value[i] + eps);
  });
}

inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

inline VarPtr gelu(const VarPtr& a) {
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] = gelu_scalar(out[i]);
  return detail::make_node(std::move(out), {a}, [a](Var& self) {
    if (!a->requires_grad) return;
    Tensor& ga = a->grad_ref();
    for (long i = 0; i < ga.numel(); ++i) {
      double x = a->value[i];
      double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      ga[i] += self.grad[i] * (cdf + x * phi);
    }
  });
}

// ---------------------------------------------------------------------------
// reductions and shaping

inline VarPtr sum(const VarPtr& a) {
  Tensor out = Tensor::scalar(a->value.sum());
  return detail::make_node(std::move(out), {a}, [a](Var& self) {
    if (!a->requires_grad) return;
    Tensor& ga = a->grad_ref();
    double g = self.grad[0];
    for (long i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

inline VarPtr mean(const VarPtr& a) {
  long n = a->value.numel();
  Tensor out = Tensor::scalar(a->value.sum() / static_cast<double>(n));
  return detail::make_node(std::move(out), {a}, [a, n](Var& self) {
    if (!a->requires_grad) return;
    Tensor& ga = a->grad_ref();
    double g = self.grad[0] / static_cast<double>(n);
    for (long i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

/// {N, D} -> {D}, mean over rows.
inline VarPtr mean_rows(const VarPtr& a) {
  check(a->value.rank() == 2, "mean_rows: rank 2 expected");
  int n = a->value.dim(0), d = a->value.dim(1);
  Tensor out({d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += a->value.at(i, j);
  for (int j = 0; j < d; ++j) out[j] /= n;
  return detail::make_node(std::move(out), {a}, [a, n, d](Var& self) {
    if (!a->requires_grad) return;
    Tensor& ga = a->grad_ref();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) ga.at(i, j) += self.grad[j] / n;
  });
}

inline VarPtr reshape(const VarPtr& a, std::vector<int> new_shape) {
  Tensor out = a->value.reshaped(new_shape);
  return detail::make_node(std::move(out), {a}, [a](Var& self) {
    if (!a->requires_grad) return;
    Tensor& ga = a->grad_ref();
    for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
  });
}

inline VarPtr concat_vec(const std::vector<VarPtr>& parts) {
  check(!parts.empty(), "concat_vec: empty input");
  int total = 0;
  for (const auto& p : parts) {
    check(p->value.rank() == 1, "concat_vec: rank 1 expected");
    total += p->value.dim(0);
  }
  Tensor out({total});
  long off = 0;
  for (const auto& p : parts)
    for (long i = 0; i < p->value.numel(); ++i) out[off++] = p->value[i];
  return detail::make_node(std::move(out), parts, [parts](Var& self) {
    long off = 0;
    for (const auto& p : parts) {
      if (p->requires_grad) {
        Tensor& g = p->grad_ref();
        for (long i = 0; i < g.numel(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.numel();
    }
  });
}

/// Stack rank-1 vectors into {N, D}.
inline VarPtr stack_rows(const std::vector<VarPtr>& rows) {
  check(!rows.empty(), "stack_rows: empty input");
  int d = rows[0]->value.dim(0);
  int n = static_cast<int>(rows.size());
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) {
    check(rows[i]->value.rank() == 1 && rows[i]->value.dim(0) == d,
          "stack_rows: inconsistent row shapes");
    for (int j = 0; j < d; ++j) out.at(i, j) = rows[i]->value[j];
  }
  return detail::make_node(std::move(out), rows, [rows, d](Var& self) {
    for (size_t i = 0; i < rows.size(); ++i) {
      if (!rows[i]->requires_grad) continue;
      Tensor& g = rows[i]->grad_ref();
      for (int j = 0; j < d; ++j) g[j] += self.grad.at(static_cast<int>(i), j);
    }
  });
}

inline VarPtr row(const VarPtr& a, int i) {
  check(a->value.rank() == 2, "row: rank 2 expected");
  int d = a->value.dim(1);
  Tensor out({d});
  for (int j = 0; j < d; ++j) out[j] = a->value.at(i, j);
  return detail::make_node(std::move(out), {a}, [a, i, d](Var& self) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    for (int j = 0; j < d; ++j) g.at(i, j) += self.grad[j];
  });
}

inline VarPtr gather_rows(const VarPtr& a, std::vector<int> idx) {
  check(a->value.rank() == 2, "gather_rows: rank 2 expected");
  int d = a->value.dim(1), m = static_cast<int>(idx.size());
  Tensor out({m, d});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = a->value.at(idx[i], j);
  return detail::make_node(std::move(out), {a}, [a, idx = std::move(idx), d](Var& self) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < d; ++j) g.at(idx[i], j) += self.grad.at(static_cast<int>(i), j);
  });
}

/// Columns [c0, c1) of a rank-2 tensor, or elements [c0, c1) of a vector.
inline VarPtr slice_cols(const VarPtr& a, int c0, int c1) {
  int rank = a->value.rank();
  check(rank == 1 || rank == 2, "slice_cols: rank 1 or 2 expected");
  int n = rank == 1 ? 1 : a->value.dim(0);
  int d = rank == 1 ? a->value.dim(0) : a->value.dim(1);
  int w = c1 - c0;
  check(c0 >= 0 && w > 0 && c1 <= d, "slice_cols: range out of bounds");
  Tensor out(rank == 1 ? std::vector<int>{w} : std::vector<int>{n, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) out[static_cast<long>(i) * w + j] = a->value[static_cast<long>(i) * d + c0 + j];
  return detail::make_node(std::move(out), {a}, [a, c0, w, n, d](Var& self) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j)
        g[static_cast<long>(i) * d + c0 + j] += self.grad[static_cast<long>(i) * w + j];
  });
}

inline VarPtr concat_cols(const std::vector<VarPtr>& parts) {
  check(!parts.empty(), "concat_cols: empty input");
  int n = parts[0]->value.dim(0), total = 0;
  for (const auto& p : parts) {
    check(p->value.rank() == 2 && p->value.dim(0) == n, "concat_cols: row mismatch");
    total += p->value.dim(1);
  }
  Tensor out({n, total});
  int off = 0;
  for (const auto& p : parts) {
    int w = p->value.dim(1);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j) out.at(i, off + j) = p->value.at(i, j);
    off += w;
  }
  return detail::make_node(std::move(out), parts, [parts, n](Var& self) {
    int off = 0;
    for (const auto& p : parts) {
      int w = p->value.dim(1);
      if (p->requires_grad) {
        Tensor& g = p->grad_ref();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < w; ++j) g.at(i, j) += self.grad.at(i, off + j);
      }
      off += w;
    }
  });
}

/// Concatenate rank-2 blocks vertically: {Ni, D} -> {sum Ni, D}.
inline VarPtr concat_rows(const std::vector<VarPtr>& parts) {
  check(!parts.empty(), "concat_rows: empty input");
  int d = parts[0]->value.dim(1), total = 0;
  for (const auto& p : parts) {
    check(p->value.rank() == 2 && p->value.dim(1) == d, "concat_rows: col mismatch");
    total += p->value.dim(0);
  }
  Tensor out({total, d});
  long off = 0;
  for (const auto& p : parts) {
    for (long i = 0; i < p->value.numel(); ++i) out[off + i] = p->value[i];
    off += p->value.numel();
  }
  return detail::make_node(std::move(out), parts, [parts](Var& self) {
    long off = 0;
    for (const auto& p : parts) {
      if (p->requires_grad) {
        Tensor& g = p->grad_ref();
        for (long i = 0; i < g.numel(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.numel();
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

inline VarPtr matmul(const VarPtr& a, const VarPtr& b) {
  check(a->value.rank() == 2 && b->value.rank() == 2, "matmul: rank 2 expected");
  check(a->value.dim(1) == b->value.dim(0), "matmul: inner dim mismatch");
  int n = a->value.dim(0), m = b->value.dim(1);
  Tensor out({n, m});
  out.mat().noalias() = a->value.mat() * b->value.mat();
  return detail::make_node(std::move(out), {a, b}, [a, b](Var& self) {
    if (a->requires_grad)
      a->grad_ref().mat().noalias() += self.grad.mat() * b->value.mat().transpose();
    if (b->requires_grad)
      b->grad_ref().mat().noalias() += a->value.mat().transpose() * self.grad.mat();
  });
}

inline VarPtr transpose(const VarPtr& a) {
  check(a->value.rank() == 2, "transpose: rank 2 expected");
  int n = a->value.dim(0), m = a->value.dim(1);
  Tensor out({m, n});
  out.mat() = a->value.mat().transpose();
  return detail::make_node(std::move(out), {a}, [a](Var& self) {
    if (a->requires_grad) a->grad_ref().mat() += self.grad.mat().transpose();
  });
}

/// x {in} or {N, in} times W {out, in}, plus optional bias {out}.
inline VarPtr linear(const VarPtr& x, const VarPtr& W, const VarPtr& b = nullptr) {
  int out_dim = W->value.dim(0), in_dim = W->value.dim(1);
  bool vec_in = x->value.rank() == 1;
  int n = vec_in ? 1 : x->value.dim(0);
  check((vec_in ? x->value.dim(0) : x->value.dim(1)) == in_dim, "linear: input dim mismatch");
  Tensor out(vec_in ? std::vector<int>{out_dim} : std::vector<int>{n, out_dim});
  out.as_mat(n, out_dim).noalias() = x->value.as_mat(n, in_dim) * W->value.mat().transpose();
  if (b) {
    check(b->value.dim(0) == out_dim, "linear: bias dim mismatch");
    auto o = out.as_mat(n, out_dim);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out_dim; ++j) o(i, j) += b->value[j];
  }
  std::vector<VarPtr> parents = b ? std::vector<VarPtr>{x, W, b} : std::vector<VarPtr>{x, W};
  return detail::make_node(std::move(out), std::move(parents),
                           [x, W, b, n, in_dim, out_dim](Var& self) {
    auto gy = self.grad.as_mat(n, out_dim);
    if (x->requires_grad)
      x->grad_ref().as_mat(n, in_dim).noalias() += gy * W->value.mat();
    if (W->requires_grad)
      W->grad_ref().mat().noalias() += gy.transpose() * x->value.as_mat(n, in_dim);
    if (b && b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < out_dim; ++j) gb[j] += gy(i, j);
    }
  });
}

inline VarPtr l2_normalize(const VarPtr& x, double eps = 1e-12) {
  check(x->value.rank() == 1, "l2_normalize: rank 1 expected");
  double r = 0.0;
  for (long i = 0; i < x->value.numel(); ++i) r += x->value[i] * x->value[i];
  r = std::sqrt(r);
  double denom = std::max(r, eps);
  Tensor out = x->value * (1.0 / denom);
  Tensor y = out;
  return detail::make_node(std::move(out), {x}, [x, y, denom](Var& self) {
    if (!x->requires_grad) return;
    double dot = 0.0;
    for (long i = 0; i < y.numel(); ++i) dot += self.grad[i] * y[i];
    Tensor& g = x->grad_ref();
    for (long i = 0; i < g.numel(); ++i) g[i] += (self.grad[i] - y[i] * dot) / denom;
  });
}

// ---------------------------------------------------------------------------
// normalization and softmax

/// Softmax along the last dimension of a rank-1 or rank-2 tensor.
inline VarPtr softmax(const VarPtr& a) {
  int rank = a->value.rank();
  check(rank == 1 || rank == 2, "softmax: rank 1 or 2 expected");
  int n = rank == 1 ? 1 : a->value.dim(0);
  int d = rank == 1 ? a->value.dim(0) : a->value.dim(1);
  Tensor out = a->value;
  auto o = out.as_mat(n, d);
  for (int i = 0; i < n; ++i) {
    double mx = o(i, 0);
    for (int j = 1; j < d; ++j) mx = std::max(mx, o(i, j));
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      o(i, j) = std::exp(o(i, j) - mx);
      s += o(i, j);
    }
    for (int j = 0; j < d; ++j) o(i, j) /= s;
  }
  if (softmax_probe()) softmax_probe()->push_back(out);
  Tensor p = out;
  return detail::make_node(std::move(out), {a}, [a, p, n, d](Var& self) {
    if (!a->requires_grad) return;
    auto pm = p.as_mat(n, d);
    auto gy = self.grad.as_mat(n, d);
    auto gx = a->grad_ref().as_mat(n, d);
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += gy(i, j) * pm(i, j);
      for (int j = 0; j < d; ++j) gx(i, j) += pm(i, j) * (gy(i, j) - dot);
    }
  });
}

namespace detail {

// Shared layernorm core: normalizes `groups` contiguous-or-strided groups of
// size d. idx(i, j) maps (group, element) to the flat index.
template <typename IndexFn>
inline void layernorm_fwd(const Tensor& x, Tensor& out, Tensor& mu, Tensor& inv_sigma,
                          int groups, int d, double eps, IndexFn idx) {
  for (int i = 0; i < groups; ++i) {
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += x[idx(i, j)];
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = x[idx(i, j)] - m;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    mu[i] = m;
    inv_sigma[i] = is;
    for (int j = 0; j < d; ++j) out[idx(i, j)] = (x[idx(i, j)] - m) * is;
  }
}

template <typename IndexFn>
inline void layernorm_bwd(const Tensor& xhat, const Tensor& inv_sigma, const Tensor& gy,
                          Tensor& gx, int groups, int d, IndexFn idx) {
  for (int i = 0; i < groups; ++i) {
    double mean_gy = 0.0, mean_gy_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      mean_gy += gy[idx(i, j)];
      mean_gy_xhat += gy[idx(i, j)] * xhat[idx(i, j)];
    }
    mean_gy /= d;
    mean_gy_xhat /= d;
    for (int j = 0; j < d; ++j) {
      gx[idx(i, j)] +=
          inv_sigma[i] * (gy[idx(i, j)] - mean_gy - xhat[idx(i, j)] * mean_gy_xhat);
    }
  }
}

}  // namespace detail

inline constexpr double kLayerNormEps = 1e-6;

/// Affine-free layernorm over the channel axis of {C, H, W}, one group per
/// spatial site.
inline VarPtr layernorm_channels(const VarPtr& a, double eps = kLayerNormEps) {
  check(a->value.rank() == 3, "layernorm_channels: rank 3 expected");
  int c = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
  int hw = h * w;
  auto idx = [hw](int site, int ch) { return static_cast<long>(ch) * hw + site; };
  Tensor out(a->value.shape()), mu({hw}), inv_sigma({hw});
  detail::layernorm_fwd(a->value, out, mu, inv_sigma, hw, c, eps, idx);
  Tensor xhat = out;
  return detail::make_node(std::move(out), {a},
                           [a, xhat, inv_sigma, hw, c, idx](Var& self) {
    if (!a->requires_grad) return;
    detail::layernorm_bwd(xhat, inv_sigma, self.grad, a->grad_ref(), hw, c, idx);
  });
}

/// Affine-free layernorm over the last dim of {N, D} (or a single {D} row).
inline VarPtr layernorm_rows(const VarPtr& a, double eps = kLayerNormEps) {
  int rank = a->value.rank();
  check(rank == 1 || rank == 2, "layernorm_rows: rank 1 or 2 expected");
  int n = rank == 1 ? 1 : a->value.dim(0);
  int d = rank == 1 ? a->value.dim(0) : a->value.dim(1);
  auto idx = [d](int i, int j) { return static_cast<long>(i) * d + j; };
  Tensor out(a->value.shape()), mu({n}), inv_sigma({n});
  detail::layernorm_fwd(a->value, out, mu, inv_sigma, n, d, eps, idx);
  Tensor xhat = out;
  return detail::make_node(std::move(out), {a}, [a, xhat, inv_sigma, n, d, idx](Var& self) {
    if (!a->requires_grad) return;
    detail::layernorm_bwd(xhat, inv_sigma, self.grad, a->grad_ref(), n, d, idx);
  });
}

// ---------------------------------------------------------------------------
// spatial ops on {C, H, W}

namespace detail {

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// im2col: {Cin, H, W} -> {Cin*k*k, OH*OW}
inline Tensor im2col(const Tensor& x, int k, int stride, int pad, int oh, int ow) {
  int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor cols({cin * k * k, oh * ow});
  long r = 0;
  for (int c = 0; c < cin; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj, ++r) {
        double* dst = cols.data() + r * (oh * ow);
        for (int oi = 0; oi < oh; ++oi) {
          int ii = oi * stride + ki - pad;
          for (int oj = 0; oj < ow; ++oj) {
            int jj = oj * stride + kj - pad;
            dst[oi * ow + oj] =
                (ii >= 0 && ii < h && jj >= 0 && jj < w) ? x.at3(c, ii, jj) : 0.0;
          }
        }
      }
  return cols;
}

inline void col2im_acc(const Tensor& cols, Tensor& gx, int k, int stride, int pad,
                       int oh, int ow) {
  int cin = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  long r = 0;
  for (int c = 0; c < cin; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj, ++r) {
        const double* src = cols.data() + r * (oh * ow);
        for (int oi = 0; oi < oh; ++oi) {
          int ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          for (int oj = 0; oj < ow; ++oj) {
            int jj = oj * stride + kj - pad;
            if (jj >= 0 && jj < w) gx.at3(c, ii, jj) += src[oi * ow + oj];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution, weight {Cout, Cin, k, k}, optional bias {Cout}.
inline VarPtr conv2d(const VarPtr& x, const VarPtr& W, const VarPtr& b, int stride,
                     int pad) {
  check(x->value.rank() == 3 && W->value.rank() == 4, "conv2d: bad ranks");
  int cin = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  int cout = W->value.dim(0), k = W->value.dim(2);
  check(W->value.dim(1) == cin && W->value.dim(3) == k, "conv2d: weight shape mismatch");
  int oh = detail::conv_out_dim(h, k, stride, pad);
  int ow = detail::conv_out_dim(w, k, stride, pad);
  check(oh > 0 && ow > 0, "conv2d: output would be empty");
  Tensor cols = detail::im2col(x->value, k, stride, pad, oh, ow);
  Tensor out({cout, oh, ow});
  out.as_mat(cout, oh * ow).noalias() =
      W->value.as_mat(cout, cin * k * k) * cols.mat();
  if (b) {
    check(b->value.dim(0) == cout, "conv2d: bias shape mismatch");
    for (int c = 0; c < cout; ++c) {
      double bv = b->value[c];
      double* dst = out.data() + static_cast<long>(c) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) dst[i] += bv;
    }
  }
  std::vector<VarPtr> parents = b ? std::vector<VarPtr>{x, W, b} : std::vector<VarPtr>{x, W};
  return detail::make_node(std::move(out), std::move(parents),
                           [x, W, b, k, stride, pad, oh, ow, cin, cout](Var& self) {
    auto gy = self.grad.as_mat(cout, oh * ow);
    if (W->requires_grad) {
      // im2col is recomputed here instead of cached; graphs hold many conv
      // nodes and the recompute is cheaper than the memory.
      Tensor cols = detail::im2col(x->value, k, stride, pad, oh, ow);
      W->grad_ref().as_mat(cout, cin * k * k).noalias() += gy * cols.mat().transpose();
    }
    if (x->requires_grad) {
      Tensor gcols({cin * k * k, oh * ow});
      gcols.mat().noalias() = W->value.as_mat(cout, cin * k * k).transpose() * gy;
      detail::col2im_acc(gcols, x->grad_ref(), k, stride, pad, oh, ow);
    }
    if (b && b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int c = 0; c < cout; ++c) {
        double acc = 0.0;
        const double* src = self.grad.data() + static_cast<long>(c) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) acc += src[i];
        gb[c] += acc;
      }
    }
  });
}

/// Depthwise 3x3 convolution, weight {C, 3, 3}, stride 1, pad 1, no bias.
inline VarPtr depthwise3x3(const VarPtr& x, const VarPtr& W) {
  check(x->value.rank() == 3 && W->value.rank() == 3, "depthwise3x3: bad ranks");
  int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  check(W->value.dim(0) == c && W->value.dim(1) == 3 && W->value.dim(2) == 3,
        "depthwise3x3: weight shape mismatch");
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int ki = 0; ki < 3; ++ki) {
          int ii = i + ki - 1;
          if (ii < 0 || ii >= h) continue;
          for (int kj = 0; kj < 3; ++kj) {
            int jj = j + kj - 1;
            if (jj >= 0 && jj < w) acc += W->value.at3(ch, ki, kj) * x->value.at3(ch, ii, jj);
          }
        }
        out.at3(ch, i, j) = acc;
      }
  return detail::make_node(std::move(out), {x, W}, [x, W, c, h, w](Var& self) {
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double gy = self.grad.at3(ch, i, j);
          if (gy == 0.0) continue;
          for (int ki = 0; ki < 3; ++ki) {
            int ii = i + ki - 1;
            if (ii < 0 || ii >= h) continue;
            for (int kj = 0; kj < 3; ++kj) {
              int jj = j + kj - 1;
              if (jj < 0 || jj >= w) continue;
              if (x->requires_grad)
                x->grad_ref().at3(ch, ii, jj) += gy * W->value.at3(ch, ki, kj);
              if (W->requires_grad)
                W->grad_ref().at3(ch, ki, kj) += gy * x->value.at3(ch, ii, jj);
            }
          }
        }
  });
}

inline VarPtr upsample2x(const VarPtr& x) {
  check(x->value.rank() == 3, "upsample2x: rank 3 expected");
  int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) out.at3(ch, i, j) = x->value.at3(ch, i / 2, j / 2);
  return detail::make_node(std::move(out), {x}, [x, c, h, w](Var& self) {
    if (!x->requires_grad) return;
    Tensor& g = x->grad_ref();
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) g.at3(ch, i / 2, j / 2) += self.grad.at3(ch, i, j);
  });
}

/// Average pooling to an exact {oh, ow} grid; input dims must be divisible.
inline VarPtr avgpool_to(const VarPtr& x, int oh, int ow) {
  check(x->value.rank() == 3, "avgpool_to: rank 3 expected");
  int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  check(h % oh == 0 && w % ow == 0, "avgpool_to: dims not divisible");
  int bh = h / oh, bw = w / ow;
  double inv = 1.0 / (bh * bw);
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int oi = 0; oi < oh; ++oi)
      for (int oj = 0; oj < ow; ++oj) {
        double acc = 0.0;
        for (int i = 0; i < bh; ++i)
          for (int j = 0; j < bw; ++j) acc += x->value.at3(ch, oi * bh + i, oj * bw + j);
        out.at3(ch, oi, oj) = acc * inv;
      }
  return detail::make_node(std::move(out), {x}, [x, c, oh, ow, bh, bw, inv](Var& self) {
    if (!x->requires_grad) return;
    Tensor& g = x->grad_ref();
    for (int ch = 0; ch < c; ++ch)
      for (int oi = 0; oi < oh; ++oi)
        for (int oj = 0; oj < ow; ++oj) {
          double gy = self.grad.at3(ch, oi, oj) * inv;
          for (int i = 0; i < bh; ++i)
            for (int j = 0; j < bw; ++j) g.at3(ch, oi * bh + i, oj * bw + j) += gy;
        }
  });
}

/// Global average pool {C, H, W} -> {C}.
inline VarPtr global_avgpool(const VarPtr& x) {
  check(x->value.rank() == 3, "global_avgpool: rank 3 expected");
  int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  double inv = 1.0 / (h * w);
  Tensor out({c});
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    const double* src = x->value.data() + static_cast<long>(ch) * h * w;
    for (int i = 0; i < h * w; ++i) acc += src[i];
    out[ch] = acc * inv;
  }
  return detail::make_node(std::move(out), {x}, [x, c, h, w, inv](Var& self) {
    if (!x->requires_grad) return;
    Tensor& g = x->grad_ref();
    for (int ch = 0; ch < c; ++ch) {
      double gy = self.grad[ch] * inv;
      double* dst = g.data() + static_cast<long>(ch) * h * w;
      for (int i = 0; i < h * w; ++i) dst[i] += gy;
    }
  });
}

/// {C, H, W} -> {H*W, C} token matrix (row = spatial site, row-major scan).
inline VarPtr chw_to_tokens(const VarPtr& x) {
  check(x->value.rank() == 3, "chw_to_tokens: rank 3 expected");
  int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  int hw = h * w;
  Tensor out({hw, c});
  for (int ch = 0; ch < c; ++ch)
    for (int s = 0; s < hw; ++s) out.at(s, ch) = x->value[static_cast<long>(ch) * hw + s];
  return detail::make_node(std::move(out), {x}, [x, c, hw](Var& self) {
    if (!x->requires_grad) return;
    Tensor& g = x->grad_ref();
    for (int ch = 0; ch < c; ++ch)
      for (int s = 0; s < hw; ++s) g[static_cast<long>(ch) * hw + s] += self.grad.at(s, ch);
  });
}

/// {H*W, C} token matrix -> {C, H, W}.
inline VarPtr tokens_to_chw(const VarPtr& x, int h, int w) {
  check(x->value.rank() == 2 && x->value.dim(0) == h * w, "tokens_to_chw: shape mismatch");
  int c = x->value.dim(1), hw = h * w;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int s = 0; s < hw; ++s) out[static_cast<long>(ch) * hw + s] = x->value.at(s, ch);
  return detail::make_node(std::move(out), {x}, [x, c, hw](Var& self) {
    if (!x->requires_grad) return;
    Tensor& g = x->grad_ref();
    for (int ch = 0; ch < c; ++ch)
      for (int s = 0; s < hw; ++s) g.at(s, ch) += self.grad[static_cast<long>(ch) * hw + s];
  });
}

/// {C} -> {C, H, W}: copies each channel value over an H x W plane.
inline VarPtr broadcast_channels(const VarPtr& v, int h, int w) {
  check(v->value.rank() == 1, "broadcast_channels: rank 1 expected");
  int c = v->value.dim(0);
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    double* dst = out.data() + static_cast<long>(ch) * h * w;
    std::fill(dst, dst + h * w, v->value[ch]);
  }
  return detail::make_node(std::move(out), {v}, [v, c, h, w](Var& self) {
    if (!v->requires_grad) return;
    Tensor& g = v->grad_ref();
    for (int ch = 0; ch < c; ++ch) {
      const double* src = self.grad.data() + static_cast<long>(ch) * h * w;
      double acc = 0.0;
      for (int i = 0; i < h * w; ++i) acc += src[i];
      g[ch] += acc;
    }
  });
}

inline VarPtr concat_channels(const VarPtr& a, const VarPtr& b) {
  check(a->value.rank() == 3 && b->value.rank() == 3, "concat_channels: rank 3 expected");
  check(a->value.dim(1) == b->value.dim(1) && a->value.dim(2) == b->value.dim(2),
        "concat_channels: spatial mismatch");
  int ca = a->value.dim(0), cb = b->value.dim(0);
  int h = a->value.dim(1), w = a->value.dim(2);
  Tensor out({ca + cb, h, w});
  std::copy(a->value.data(), a->value.data() + a->value.numel(), out.data());
  std::copy(b->value.data(), b->value.data() + b->value.numel(), out.data() + a->value.numel());
  return detail::make_node(std::move(out), {a, b}, [a, b](Var& self) {
    long na = a->value.numel();
    if (a->requires_grad) {
      Tensor& g = a->grad_ref();
      for (long i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (b->requires_grad) {
      Tensor& g = b->grad_ref();
      for (long i = 0; i < g.numel(); ++i) g[i] += self.grad[na + i];
    }
  });
}

// ---------------------------------------------------------------------------
// losses

enum class Reduction { kSum, kMean };

/// Cross entropy from logits {N, M} with integer labels; stable log-softmax.
inline VarPtr cross_entropy_with_logits(const VarPtr& logits, std::vector<int> labels,
                                        Reduction red) {
  check(logits->value.rank() == 2, "cross_entropy: rank 2 logits expected");
  int n = logits->value.dim(0), m = logits->value.dim(1);
  check(static_cast<int>(labels.size()) == n, "cross_entropy: label count mismatch");
  for (int y : labels) check(y >= 0 && y < m, "cross_entropy: label out of range");
  Tensor probs({n, m});
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = logits->value.at(i, 0);
    for (int j = 1; j < m; ++j) mx = std::max(mx, logits->value.at(i, j));
    double s = 0.0;
    for (int j = 0; j < m; ++j) {
      probs.at(i, j) = std::exp(logits->value.at(i, j) - mx);
      s += probs.at(i, j);
    }
    for (int j = 0; j < m; ++j) probs.at(i, j) /= s;
    total += std::log(s) + mx - logits->value.at(i, labels[static_cast<size_t>(i)]);
  }
  double scale_w = red == Reduction::kMean ? 1.0 / n : 1.0;
  Tensor out = Tensor::scalar(total * scale_w);
  return detail::make_node(std::move(out), {logits},
                           [logits, probs, labels = std::move(labels), n, m,
                            scale_w](Var& self) {
    if (!logits->requires_grad) return;
    double g = self.grad[0] * scale_w;
    Tensor& gl = logits->grad_ref();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        gl.at(i, j) += g * (probs.at(i, j) - (labels[static_cast<size_t>(i)] == j ? 1.0 : 0.0));
  });
}

}  // namespace lldif
