#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "modprompt/tensor.hpp"

namespace modprompt {

// Reverse-mode tape over Tensor values. Ops are layer-grained (conv, norm,
// activation, loss) with hand-derived backward passes; the finite-difference
// harness in the test suite is the authority on their correctness.
//
// Graph nodes are shared_ptr-linked child -> parent, so dropping the loss
// root frees every intermediate while parameter leaves survive in their
// owning store.
struct Node {
  Tensor val;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buf() {
    if (grad.v.empty()) grad = Tensor(val.shape);
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

inline Var make_leaf(Tensor t, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->requires_grad = requires_grad;
  return n;
}

inline Var make_node(std::vector<int> shape, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->val = Tensor(std::move(shape));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  n->parents = std::move(parents);
  return n;
}

// Accumulates `seed` into the loss gradient then walks the tape in reverse
// topological order. `loss` must be a scalar node.
inline void backward(const Var& loss, double seed = 1.0) {
  if (loss->val.size() != 1) throw std::logic_error("backward: loss must be scalar");
  loss->grad_buf().v[0] += seed;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // `order` is parents-before-children; run children first.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.v.empty()) n->backward(*n);
  }
}

inline void zero_grad(const Var& v) { v->grad = Tensor(); }

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor::shape_str(a.shape) + " vs " +
                                Tensor::shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a->val, b->val, "add");
  Var out = make_node(a->val.shape, {a, b});
  for (std::int64_t i = 0; i < out->val.size(); ++i)
    out->val.at(i) = a->val.at(i) + b->val.at(i);
  out->backward = [](Node& n) {
    for (int k = 0; k < 2; ++k) {
      Node* p = n.parents[k].get();
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buf();
      for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i);
    }
  };
  return out;
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a->val, b->val, "mul");
  Var out = make_node(a->val.shape, {a, b});
  for (std::int64_t i = 0; i < out->val.size(); ++i)
    out->val.at(i) = a->val.at(i) * b->val.at(i);
  out->backward = [](Node& n) {
    Node* a = n.parents[0].get();
    Node* b = n.parents[1].get();
    if (a->requires_grad) {
      Tensor& g = a->grad_buf();
      for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i) * b->val.at(i);
    }
    if (b->requires_grad) {
      Tensor& g = b->grad_buf();
      for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i) * a->val.at(i);
    }
  };
  return out;
}

inline Var scale(const Var& a, double c) {
  Var out = make_node(a->val.shape, {a});
  for (std::int64_t i = 0; i < out->val.size(); ++i) out->val.at(i) = a->val.at(i) * c;
  out->backward = [c](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i) * c;
  };
  return out;
}

inline Var silu(const Var& a) {
  Var out = make_node(a->val.shape, {a});
  for (std::int64_t i = 0; i < out->val.size(); ++i) {
    double x = a->val.at(i);
    out->val.at(i) = x / (1.0 + std::exp(-x));
  }
  out->backward = [](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    for (std::int64_t i = 0; i < g.size(); ++i) {
      double x = a->val.at(i);
      double s = 1.0 / (1.0 + std::exp(-x));
      g.at(i) += n.grad.at(i) * (s + x * s * (1.0 - s));
    }
  };
  return out;
}

inline Var sigmoid(const Var& a) {
  Var out = make_node(a->val.shape, {a});
  for (std::int64_t i = 0; i < out->val.size(); ++i)
    out->val.at(i) = 1.0 / (1.0 + std::exp(-a->val.at(i)));
  out->backward = [](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    for (std::int64_t i = 0; i < g.size(); ++i) {
      double s = n.val.at(i);
      g.at(i) += n.grad.at(i) * s * (1.0 - s);
    }
  };
  return out;
}

// exp with an upper cap on the exponent; gradient is zero above the cap.
inline Var exp_capped(const Var& a, double cap = 12.0) {
  Var out = make_node(a->val.shape, {a});
  for (std::int64_t i = 0; i < out->val.size(); ++i)
    out->val.at(i) = std::exp(std::min(a->val.at(i), cap));
  out->backward = [cap](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    for (std::int64_t i = 0; i < g.size(); ++i)
      if (a->val.at(i) < cap) g.at(i) += n.grad.at(i) * n.val.at(i);
  };
  return out;
}

// clamp to [0,1]; pass-through gradient inside the range, and at a violated
// bound only the component pulling the value back in survives.
inline Var clamp01_st(const Var& a) {
  Var out = make_node(a->val.shape, {a});
  for (std::int64_t i = 0; i < out->val.size(); ++i)
    out->val.at(i) = std::min(1.0, std::max(0.0, a->val.at(i)));
  out->backward = [](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    for (std::int64_t i = 0; i < g.size(); ++i) {
      double x = a->val.at(i);
      double gi = n.grad.at(i);
      if (x < 0.0) {
        if (gi < 0.0) g.at(i) += gi;
      } else if (x > 1.0) {
        if (gi > 0.0) g.at(i) += gi;
      } else {
        g.at(i) += gi;
      }
    }
  };
  return out;
}

inline Var reshape(const Var& a, std::vector<int> shape) {
  if (Tensor::count(shape) != a->val.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Var out = make_node(std::move(shape), {a});
  out->val.v = a->val.v;
  out->backward = [](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i);
  };
  return out;
}

inline Var mean_all(const Var& a) {
  Var out = make_node({1}, {a});
  double s = 0.0;
  for (double x : a->val.v) s += x;
  double inv = a->val.size() > 0 ? 1.0 / static_cast<double>(a->val.size()) : 0.0;
  out->val.at(0) = s * inv;
  out->backward = [inv](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    double gi = n.grad.at(0) * inv;
    for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += gi;
  };
  return out;
}

// y = x * s + t with scalar nodes s, t.
inline Var affine_scalar(const Var& x, const Var& s, const Var& t) {
  if (s->val.size() != 1 || t->val.size() != 1)
    throw std::invalid_argument("affine_scalar: s, t must be scalars");
  Var out = make_node(x->val.shape, {x, s, t});
  double sv = s->val.at(0), tv = t->val.at(0);
  for (std::int64_t i = 0; i < out->val.size(); ++i)
    out->val.at(i) = x->val.at(i) * sv + tv;
  out->backward = [sv](Node& n) {
    Node* x = n.parents[0].get();
    Node* s = n.parents[1].get();
    Node* t = n.parents[2].get();
    if (x->requires_grad) {
      Tensor& g = x->grad_buf();
      for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i) * sv;
    }
    if (s->requires_grad) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < n.grad.size(); ++i) acc += n.grad.at(i) * x->val.at(i);
      s->grad_buf().at(0) += acc;
    }
    if (t->requires_grad) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < n.grad.size(); ++i) acc += n.grad.at(i);
      t->grad_buf().at(0) += acc;
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// Spatial ops ([H,W,C] layout)
// ---------------------------------------------------------------------------

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& X = x->val;
  const Tensor& W = w->val;
  if (X.shape.size() != 3 || W.shape.size() != 4)
    throw std::invalid_argument("conv2d: expects x[H,W,Ci], w[Co,kh,kw,Ci]");
  int H = X.dim(0), Wd = X.dim(1), Ci = X.dim(2);
  int Co = W.dim(0), kh = W.dim(1), kw = W.dim(2);
  if (W.dim(3) != Ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (b->val.size() != Co) throw std::invalid_argument("conv2d: bias size mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (Wd + 2 * pad - kw) / stride + 1;

  Var out = make_node({Ho, Wo, Co}, {x, w, b});
  const double* xp = X.v.data();
  const double* wp = W.v.data();
  const double* bp = b->val.v.data();
  double* op = out->val.v.data();
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      double* orow = op + (static_cast<std::size_t>(oy) * Wo + ox) * Co;
      for (int oc = 0; oc < Co; ++oc) orow[oc] = bp[oc];
      for (int ky = 0; ky < kh; ++ky) {
        int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= Wd) continue;
          const double* xrow = xp + (static_cast<std::size_t>(iy) * Wd + ix) * Ci;
          const double* wrow = wp + (static_cast<std::size_t>(ky) * kw + kx) * Ci;
          for (int oc = 0; oc < Co; ++oc) {
            const double* wk = wrow + static_cast<std::size_t>(oc) * kh * kw * Ci;
            double acc = 0.0;
            for (int ic = 0; ic < Ci; ++ic) acc += xrow[ic] * wk[ic];
            orow[oc] += acc;
          }
        }
      }
    }
  }

  out->backward = [stride, pad, H, Wd, Ci, Co, kh, kw, Ho, Wo](Node& n) {
    Node* x = n.parents[0].get();
    Node* w = n.parents[1].get();
    Node* b = n.parents[2].get();
    const double* gp = n.grad.v.data();
    const double* xp = x->val.v.data();
    const double* wp = w->val.v.data();
    double* gx = nullptr;
    double* gw = nullptr;
    if (x->requires_grad) gx = x->grad_buf().v.data();
    if (w->requires_grad) gw = w->grad_buf().v.data();
    if (b->requires_grad) {
      double* gb = b->grad_buf().v.data();
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const double* grow = gp + (static_cast<std::size_t>(oy) * Wo + ox) * Co;
          for (int oc = 0; oc < Co; ++oc) gb[oc] += grow[oc];
        }
    }
    if (!gx && !gw) return;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        const double* grow = gp + (static_cast<std::size_t>(oy) * Wo + ox) * Co;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= Wd) continue;
            std::size_t xoff = (static_cast<std::size_t>(iy) * Wd + ix) * Ci;
            std::size_t woff = (static_cast<std::size_t>(ky) * kw + kx) * Ci;
            for (int oc = 0; oc < Co; ++oc) {
              double g = grow[oc];
              if (g == 0.0) continue;
              std::size_t wko = woff + static_cast<std::size_t>(oc) * kh * kw * Ci;
              if (gx) {
                const double* wk = wp + wko;
                double* gxr = gx + xoff;
                for (int ic = 0; ic < Ci; ++ic) gxr[ic] += g * wk[ic];
              }
              if (gw) {
                const double* xr = xp + xoff;
                double* gwr = gw + wko;
                for (int ic = 0; ic < Ci; ++ic) gwr[ic] += g * xr[ic];
              }
            }
          }
        }
      }
    }
  };
  return out;
}

inline Var depthwise_conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& X = x->val;
  const Tensor& W = w->val;
  if (X.shape.size() != 3 || W.shape.size() != 3)
    throw std::invalid_argument("depthwise_conv2d: expects x[H,W,C], w[C,kh,kw]");
  int H = X.dim(0), Wd = X.dim(1), C = X.dim(2);
  if (W.dim(0) != C || b->val.size() != C)
    throw std::invalid_argument("depthwise_conv2d: channel mismatch");
  int kh = W.dim(1), kw = W.dim(2);
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (Wd + 2 * pad - kw) / stride + 1;

  Var out = make_node({Ho, Wo, C}, {x, w, b});
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      double* orow = &out->val.at3(oy, ox, 0);
      for (int c = 0; c < C; ++c) orow[c] = b->val.at(c);
      for (int ky = 0; ky < kh; ++ky) {
        int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= Wd) continue;
          const double* xrow = &X.at3(iy, ix, 0);
          for (int c = 0; c < C; ++c)
            orow[c] += xrow[c] * W.v[(static_cast<std::size_t>(c) * kh + ky) * kw + kx];
        }
      }
    }

  out->backward = [stride, pad, H, Wd, C, kh, kw, Ho, Wo](Node& n) {
    Node* x = n.parents[0].get();
    Node* w = n.parents[1].get();
    Node* b = n.parents[2].get();
    bool need_x = x->requires_grad, need_w = w->requires_grad;
    if (b->requires_grad) {
      Tensor& gb = b->grad_buf();
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox)
          for (int c = 0; c < C; ++c) gb.at(c) += n.grad.at3(oy, ox, c);
    }
    if (!need_x && !need_w) return;
    Tensor* gx = need_x ? &x->grad_buf() : nullptr;
    Tensor* gw = need_w ? &w->grad_buf() : nullptr;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= Wd) continue;
            for (int c = 0; c < C; ++c) {
              double g = n.grad.at3(oy, ox, c);
              std::size_t wi = (static_cast<std::size_t>(c) * kh + ky) * kw + kx;
              if (gx) gx->at3(iy, ix, c) += g * w->val.v[wi];
              if (gw) gw->v[wi] += g * x->val.at3(iy, ix, c);
            }
          }
        }
  };
  return out;
}

inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      double eps = 1e-5) {
  const Tensor& X = x->val;
  int H = X.dim(0), W = X.dim(1), C = X.dim(2);
  if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
  if (gamma->val.size() != C || beta->val.size() != C)
    throw std::invalid_argument("group_norm: affine size mismatch");
  int gc = C / groups;

  Var out = make_node(X.shape, {x, gamma, beta});
  auto xhat = std::make_shared<Tensor>(X.shape);
  auto inv_sigma = std::make_shared<std::vector<double>>(groups);
  std::int64_t n_per_group = static_cast<std::int64_t>(H) * W * gc;
  for (int g = 0; g < groups; ++g) {
    double mu = 0.0;
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        for (int c = g * gc; c < (g + 1) * gc; ++c) mu += X.at3(y, xx, c);
    mu /= static_cast<double>(n_per_group);
    double var = 0.0;
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        for (int c = g * gc; c < (g + 1) * gc; ++c) {
          double d = X.at3(y, xx, c) - mu;
          var += d * d;
        }
    var /= static_cast<double>(n_per_group);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[g] = is;
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        for (int c = g * gc; c < (g + 1) * gc; ++c) {
          double xh = (X.at3(y, xx, c) - mu) * is;
          xhat->at3(y, xx, c) = xh;
          out->val.at3(y, xx, c) = gamma->val.at(c) * xh + beta->val.at(c);
        }
  }

  out->backward = [H, W, C, groups, gc, xhat, inv_sigma, n_per_group](Node& n) {
    Node* x = n.parents[0].get();
    Node* gamma = n.parents[1].get();
    Node* beta = n.parents[2].get();
    if (gamma->requires_grad) {
      Tensor& gg = gamma->grad_buf();
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          for (int c = 0; c < C; ++c) gg.at(c) += n.grad.at3(y, xx, c) * xhat->at3(y, xx, c);
    }
    if (beta->requires_grad) {
      Tensor& gb = beta->grad_buf();
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          for (int c = 0; c < C; ++c) gb.at(c) += n.grad.at3(y, xx, c);
    }
    if (!x->requires_grad) return;
    Tensor& gx = x->grad_buf();
    double inv_n = 1.0 / static_cast<double>(n_per_group);
    for (int g = 0; g < groups; ++g) {
      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          for (int c = g * gc; c < (g + 1) * gc; ++c) {
            double dxh = n.grad.at3(y, xx, c) * gamma->val.at(c);
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat->at3(y, xx, c);
          }
      double is = (*inv_sigma)[g];
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          for (int c = g * gc; c < (g + 1) * gc; ++c) {
            double dxh = n.grad.at3(y, xx, c) * gamma->val.at(c);
            gx.at3(y, xx, c) +=
                is * (dxh - inv_n * sum_dxh - xhat->at3(y, xx, c) * inv_n * sum_dxh_xh);
          }
    }
  };
  return out;
}

inline Var upsample2x(const Var& x) {
  int H = x->val.dim(0), W = x->val.dim(1), C = x->val.dim(2);
  Var out = make_node({2 * H, 2 * W, C}, {x});
  for (int y = 0; y < 2 * H; ++y)
    for (int xx = 0; xx < 2 * W; ++xx)
      for (int c = 0; c < C; ++c) out->val.at3(y, xx, c) = x->val.at3(y / 2, xx / 2, c);
  out->backward = [H, W, C](Node& n) {
    Node* x = n.parents[0].get();
    if (!x->requires_grad) return;
    Tensor& g = x->grad_buf();
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        for (int c = 0; c < C; ++c) g.at3(y / 2, xx / 2, c) += n.grad.at3(y, xx, c);
  };
  return out;
}

inline Var concat_channels(const Var& a, const Var& b) {
  int H = a->val.dim(0), W = a->val.dim(1), Ca = a->val.dim(2), Cb = b->val.dim(2);
  if (b->val.dim(0) != H || b->val.dim(1) != W)
    throw std::invalid_argument("concat_channels: spatial mismatch");
  Var out = make_node({H, W, Ca + Cb}, {a, b});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < Ca; ++c) out->val.at3(y, x, c) = a->val.at3(y, x, c);
      for (int c = 0; c < Cb; ++c) out->val.at3(y, x, Ca + c) = b->val.at3(y, x, c);
    }
  out->backward = [H, W, Ca, Cb](Node& n) {
    Node* a = n.parents[0].get();
    Node* b = n.parents[1].get();
    if (a->requires_grad) {
      Tensor& g = a->grad_buf();
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < Ca; ++c) g.at3(y, x, c) += n.grad.at3(y, x, c);
    }
    if (b->requires_grad) {
      Tensor& g = b->grad_buf();
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < Cb; ++c) g.at3(y, x, c) += n.grad.at3(y, x, Ca + c);
    }
  };
  return out;
}

// out = img with `patch` added at offset (y0, x0); shapes [H,W,C], [ph,pw,C].
inline Var add_patch(const Var& img, const Var& patch, int y0, int x0) {
  int H = img->val.dim(0), W = img->val.dim(1), C = img->val.dim(2);
  int ph = patch->val.dim(0), pw = patch->val.dim(1);
  if (patch->val.dim(2) != C || y0 < 0 || x0 < 0 || y0 + ph > H || x0 + pw > W)
    throw std::invalid_argument("add_patch: patch out of bounds");
  Var out = make_node(img->val.shape, {img, patch});
  out->val.v = img->val.v;
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x)
      for (int c = 0; c < C; ++c) out->val.at3(y0 + y, x0 + x, c) += patch->val.at3(y, x, c);
  out->backward = [y0, x0, ph, pw, C](Node& n) {
    Node* img = n.parents[0].get();
    Node* patch = n.parents[1].get();
    if (img->requires_grad) {
      Tensor& g = img->grad_buf();
      for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i);
    }
    if (patch->requires_grad) {
      Tensor& g = patch->grad_buf();
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x)
          for (int c = 0; c < C; ++c) g.at3(y, x, c) += n.grad.at3(y0 + y, x0 + x, c);
    }
  };
  return out;
}

// out = img + values ⊙ mask, with a constant 0/1 mask.
inline Var add_masked(const Var& img, const Var& values, Tensor mask) {
  detail::check_same_shape(img->val, values->val, "add_masked");
  detail::check_same_shape(img->val, mask, "add_masked(mask)");
  Var out = make_node(img->val.shape, {img, values});
  auto m = std::make_shared<Tensor>(std::move(mask));
  for (std::int64_t i = 0; i < out->val.size(); ++i)
    out->val.at(i) = img->val.at(i) + values->val.at(i) * m->at(i);
  out->backward = [m](Node& n) {
    Node* img = n.parents[0].get();
    Node* values = n.parents[1].get();
    if (img->requires_grad) {
      Tensor& g = img->grad_buf();
      for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i);
    }
    if (values->requires_grad) {
      Tensor& g = values->grad_buf();
      for (std::int64_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i) * m->at(i);
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// Matrix / loss ops
// ---------------------------------------------------------------------------

// [N,D] x [K,D]^T -> [N,K]
inline Var matmul_nt(const Var& a, const Var& b) {
  int N = a->val.dim(0), D = a->val.dim(1), K = b->val.dim(0);
  if (b->val.dim(1) != D) throw std::invalid_argument("matmul_nt: inner dim mismatch");
  Var out = make_node({N, K}, {a, b});
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) {
      double acc = 0.0;
      for (int d = 0; d < D; ++d) acc += a->val.at2(i, d) * b->val.at2(k, d);
      out->val.at2(i, k) = acc;
    }
  out->backward = [N, D, K](Node& n) {
    Node* a = n.parents[0].get();
    Node* b = n.parents[1].get();
    if (a->requires_grad) {
      Tensor& g = a->grad_buf();
      for (int i = 0; i < N; ++i)
        for (int k = 0; k < K; ++k) {
          double gv = n.grad.at2(i, k);
          for (int d = 0; d < D; ++d) g.at2(i, d) += gv * b->val.at2(k, d);
        }
    }
    if (b->requires_grad) {
      Tensor& g = b->grad_buf();
      for (int i = 0; i < N; ++i)
        for (int k = 0; k < K; ++k) {
          double gv = n.grad.at2(i, k);
          for (int d = 0; d < D; ++d) g.at2(k, d) += gv * a->val.at2(i, d);
        }
    }
  };
  return out;
}

// Row-wise L2 normalization of [N,D].
inline Var l2norm_rows(const Var& a, double eps = 1e-12) {
  int N = a->val.dim(0), D = a->val.dim(1);
  Var out = make_node(a->val.shape, {a});
  auto norms = std::make_shared<std::vector<double>>(N);
  for (int i = 0; i < N; ++i) {
    double s = 0.0;
    for (int d = 0; d < D; ++d) s += a->val.at2(i, d) * a->val.at2(i, d);
    double nn = std::sqrt(s + eps);
    (*norms)[i] = nn;
    for (int d = 0; d < D; ++d) out->val.at2(i, d) = a->val.at2(i, d) / nn;
  }
  out->backward = [N, D, norms](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    for (int i = 0; i < N; ++i) {
      double nn = (*norms)[i];
      double dot = 0.0;
      for (int d = 0; d < D; ++d) dot += a->val.at2(i, d) * n.grad.at2(i, d);
      double n3 = nn * nn * nn;
      for (int d = 0; d < D; ++d)
        g.at2(i, d) += n.grad.at2(i, d) / nn - a->val.at2(i, d) * dot / n3;
    }
  };
  return out;
}

// Select rows of [N,M] by index -> [K,M].
inline Var gather_rows(const Var& a, std::vector<int> idx) {
  int M = a->val.dim(1);
  int K = static_cast<int>(idx.size());
  Var out = make_node({K, M}, {a});
  auto ids = std::make_shared<std::vector<int>>(std::move(idx));
  for (int k = 0; k < K; ++k)
    for (int m = 0; m < M; ++m) out->val.at2(k, m) = a->val.at2((*ids)[k], m);
  out->backward = [ids, M](Node& n) {
    Node* a = n.parents[0].get();
    if (!a->requires_grad) return;
    Tensor& g = a->grad_buf();
    for (std::size_t k = 0; k < ids->size(); ++k)
      for (int m = 0; m < M; ++m) g.at2((*ids)[k], m) += n.grad.at2(static_cast<int>(k), m);
  };
  return out;
}

// Mean binary cross-entropy of sigmoid(logits) against constant targets.
// Numerically stable log-sum-exp form.
inline Var bce_logits_mean(const Var& logits, Tensor targets) {
  detail::check_same_shape(logits->val, targets, "bce_logits_mean");
  std::int64_t n = logits->val.size();
  Var out = make_node({1}, {logits});
  auto tgt = std::make_shared<Tensor>(std::move(targets));
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double z = logits->val.at(i);
    double t = tgt->at(i);
    acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  double inv = 1.0 / static_cast<double>(n);
  out->val.at(0) = acc * inv;
  out->backward = [tgt, inv](Node& nn) {
    Node* logits = nn.parents[0].get();
    if (!logits->requires_grad) return;
    Tensor& g = logits->grad_buf();
    double gs = nn.grad.at(0) * inv;
    for (std::int64_t i = 0; i < g.size(); ++i) {
      double s = 1.0 / (1.0 + std::exp(-logits->val.at(i)));
      g.at(i) += gs * (s - tgt->at(i));
    }
  };
  return out;
}

// Mean (1 - IoU) between predicted boxes [N,4] (x1,y1,x2,y2) and constant
// targets. Piecewise-smooth; corners are measure zero for the optimizer.
inline Var iou_loss_mean(const Var& pred, Tensor target) {
  detail::check_same_shape(pred->val, target, "iou_loss_mean");
  int N = pred->val.dim(0);
  if (N == 0) throw std::invalid_argument("iou_loss_mean: empty");
  Var out = make_node({1}, {pred});
  auto tgt = std::make_shared<Tensor>(std::move(target));
  double acc = 0.0;
  for (int i = 0; i < N; ++i) {
    double px1 = pred->val.at2(i, 0), py1 = pred->val.at2(i, 1);
    double px2 = pred->val.at2(i, 2), py2 = pred->val.at2(i, 3);
    double qx1 = tgt->at2(i, 0), qy1 = tgt->at2(i, 1);
    double qx2 = tgt->at2(i, 2), qy2 = tgt->at2(i, 3);
    double iw = std::min(px2, qx2) - std::max(px1, qx1);
    double ih = std::min(py2, qy2) - std::max(py1, qy1);
    double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
    double ap = (px2 - px1) * (py2 - py1);
    double aq = (qx2 - qx1) * (qy2 - qy1);
    double uni = ap + aq - inter;
    acc += 1.0 - (uni > 0 ? inter / uni : 0.0);
  }
  double inv = 1.0 / static_cast<double>(N);
  out->val.at(0) = acc * inv;
  out->backward = [tgt, N, inv](Node& n) {
    Node* pred = n.parents[0].get();
    if (!pred->requires_grad) return;
    Tensor& g = pred->grad_buf();
    double gs = n.grad.at(0) * inv;
    for (int i = 0; i < N; ++i) {
      double px1 = pred->val.at2(i, 0), py1 = pred->val.at2(i, 1);
      double px2 = pred->val.at2(i, 2), py2 = pred->val.at2(i, 3);
      double qx1 = tgt->at2(i, 0), qy1 = tgt->at2(i, 1);
      double qx2 = tgt->at2(i, 2), qy2 = tgt->at2(i, 3);
      double iw = std::min(px2, qx2) - std::max(px1, qx1);
      double ih = std::min(py2, qy2) - std::max(py1, qy1);
      bool inter_pos = iw > 0 && ih > 0;
      double inter = inter_pos ? iw * ih : 0.0;
      double ap = (px2 - px1) * (py2 - py1);
      double aq = (qx2 - qx1) * (qy2 - qy1);
      double uni = ap + aq - inter;
      if (uni <= 0) continue;
      // d(IoU)/dI with U = Ap + Aq - I, and d(IoU)/dAp.
      double dI = (uni + inter) / (uni * uni);
      double dAp = -inter / (uni * uni);
      // Intersection edge derivatives (zero where the target edge is active).
      double dI_px1 = inter_pos && px1 > qx1 ? -ih : 0.0;
      double dI_py1 = inter_pos && py1 > qy1 ? -iw : 0.0;
      double dI_px2 = inter_pos && px2 < qx2 ? ih : 0.0;
      double dI_py2 = inter_pos && py2 < qy2 ? iw : 0.0;
      double h = py2 - py1, w = px2 - px1;
      // loss = 1 - IoU, so flip sign.
      g.at2(i, 0) += -gs * (dI * dI_px1 + dAp * (-h));
      g.at2(i, 1) += -gs * (dI * dI_py1 + dAp * (-w));
      g.at2(i, 2) += -gs * (dI * dI_px2 + dAp * h);
      g.at2(i, 3) += -gs * (dI * dI_py2 + dAp * w);
    }
  };
  return out;
}

}  // namespace modprompt
