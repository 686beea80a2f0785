#pragma once

#include <Eigen/Core>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mmsynth/core.hpp"
#include "mmsynth/tensor.hpp"

namespace mmsynth {

// Reverse-mode autodiff over Tensor<T>. Define-by-run: tape order is
// topological, so backward is a single reverse sweep. One tape per sample;
// gradients of parameter leaves flow into external sinks so concurrent
// workers can accumulate into private buffers and be reduced in a fixed
// order.

template <typename T>
struct Node {
  const Tensor<T>* val = nullptr;
  Tensor<T> owned;
  Tensor<T> grad;
  Tensor<T>* grad_sink = nullptr;
  std::vector<Node<T>*> parents;
  std::function<void(Node<T>&)> back;
  bool needs_grad = false;

  const Tensor<T>& v() const { return *val; }
};

template <typename T>
class Tape {
 public:
  Node<T>* input(Tensor<T> value, bool needs_grad = false) {
    Node<T>* n = make();
    n->owned = std::move(value);
    n->val = &n->owned;
    n->needs_grad = needs_grad;
    return n;
  }

  // Leaf viewing external storage (a parameter); grads accumulate into sink.
  Node<T>* external(const Tensor<T>* value, Tensor<T>* sink, bool needs_grad) {
    Node<T>* n = make();
    n->val = value;
    n->grad_sink = needs_grad ? sink : nullptr;
    n->needs_grad = needs_grad;
    return n;
  }

  Node<T>* make() { return &nodes_.emplace_back(); }

  static Tensor<T>* grad_of(Node<T>* p) {
    if (!p || !p->needs_grad) return nullptr;
    if (p->grad.empty()) p->grad = Tensor<T>::zeros(p->v().shape());
    return &p->grad;
  }

  void backward(Node<T>* root, T seed = T(1)) {
    if (root->v().numel() != 1) throw ShapeError("backward root must be scalar");
    if (root->grad.empty()) root->grad = Tensor<T>::zeros(root->v().shape());
    root->grad[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = *it;
      if (!n.back || n.grad.empty()) continue;
      n.back(n);
    }
    // flush leaf grads to sinks in creation order
    for (auto& n : nodes_) {
      if (n.grad_sink && !n.grad.empty()) n.grad_sink->add_(n.grad);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node<T>> nodes_;
};

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
template <typename T>
using EVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
inline void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int ho, int wo, Tensor<T>& cols) {
  int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  for (int c = 0; c < ci; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        int row = (c * kh + ki) * kw + kj;
        T* dst = cols.data() + static_cast<int64_t>(row) * ho * wo;
        for (int oi = 0; oi < ho; ++oi) {
          int ih = oi * stride + ki - pad;
          for (int oj = 0; oj < wo; ++oj) {
            int iw = oj * stride + kj - pad;
            dst[oi * wo + oj] =
                (ih >= 0 && ih < h && iw >= 0 && iw < w) ? x.data()[(static_cast<int64_t>(c) * h + ih) * w + iw]
                                                         : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
inline void col2im_add(const Tensor<T>& cols, int kh, int kw, int stride, int pad, int ho, int wo, Tensor<T>& dx) {
  int ci = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  for (int c = 0; c < ci; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        int row = (c * kh + ki) * kw + kj;
        const T* src = cols.data() + static_cast<int64_t>(row) * ho * wo;
        for (int oi = 0; oi < ho; ++oi) {
          int ih = oi * stride + ki - pad;
          if (ih < 0 || ih >= h) continue;
          for (int oj = 0; oj < wo; ++oj) {
            int iw = oj * stride + kj - pad;
            if (iw < 0 || iw >= w) continue;
            dx.data()[(static_cast<int64_t>(c) * h + ih) * w + iw] += src[oi * wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---- convolution -----------------------------------------------------------

// x [Ci,H,W], w [Co,Ci,kh,kw], b [Co] -> [Co,Ho,Wo]
template <typename T>
Node<T>* conv2d(Tape<T>& tape, Node<T>* x, Node<T>* w, Node<T>* b, int stride = 1, int pad = 1) {
  using namespace detail;
  const auto& xv = x->v();
  const auto& wv = w->v();
  if (xv.rank() != 3 || wv.rank() != 4) throw ShapeError("conv2d: expects x[C,H,W], w[Co,Ci,kh,kw]");
  int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != ci) throw ShapeError("conv2d: channel mismatch " + xv.shape_str() + " vs " + wv.shape_str());
  if (b->v().numel() != co) throw ShapeError("conv2d: bias size mismatch");
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (wd + 2 * pad - kw) / stride + 1;
  int k = ci * kh * kw;

  bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
  auto cols = std::make_shared<Tensor<T>>();
  if (!pointwise) {
    *cols = Tensor<T>({k, ho * wo});
    im2col(xv, kh, kw, stride, pad, ho, wo, *cols);
  }
  const T* cols_ptr = pointwise ? xv.data() : cols->data();

  Tensor<T> out({co, ho, wo});
  {
    ECMap<T> wm(wv.data(), co, k);
    ECMap<T> cm(cols_ptr, k, ho * wo);
    EMap<T> ym(out.data(), co, ho * wo);
    ym.noalias() = wm * cm;
    for (int c = 0; c < co; ++c) ym.row(c).array() += b->v()[c];
  }

  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x, w, b};
  n->needs_grad = x->needs_grad || w->needs_grad || b->needs_grad;
  n->back = [x, w, b, cols, pointwise, ci, h, wd, co, kh, kw, k, ho, wo, stride, pad](Node<T>& nn) {
    using namespace detail;
    ECMap<T> dy(nn.grad.data(), co, ho * wo);
    const T* cols_ptr2 = pointwise ? x->v().data() : cols->data();
    if (auto* gw = Tape<T>::grad_of(w)) {
      ECMap<T> cm(cols_ptr2, k, ho * wo);
      EMap<T> dwm(gw->data(), co, k);
      dwm.noalias() += dy * cm.transpose();
    }
    if (auto* gb = Tape<T>::grad_of(b)) {
      for (int c = 0; c < co; ++c) (*gb)[c] += dy.row(c).sum();
    }
    if (auto* gx = Tape<T>::grad_of(x)) {
      ECMap<T> wm(w->v().data(), co, k);
      if (pointwise) {
        EMap<T> dxm(gx->data(), k, ho * wo);
        dxm.noalias() += wm.transpose() * dy;
      } else {
        Tensor<T> dcols({k, ho * wo});
        EMap<T> dcm(dcols.data(), k, ho * wo);
        dcm.noalias() = wm.transpose() * dy;
        col2im_add(dcols, kh, kw, stride, pad, ho, wo, *gx);
      }
    }
  };
  return n;
}

// ---- dense layer ------------------------------------------------------------

// x [n], w [m,n], b [m] -> [m]
template <typename T>
Node<T>* linear(Tape<T>& tape, Node<T>* x, Node<T>* w, Node<T>* b) {
  using namespace detail;
  int m = w->v().dim(0), k = w->v().dim(1);
  if (x->v().numel() != k) throw ShapeError("linear: input size mismatch");
  if (b->v().numel() != m) throw ShapeError("linear: bias size mismatch");
  Tensor<T> out({m});
  {
    ECMap<T> wm(w->v().data(), m, k);
    Eigen::Map<const EVec<T>> xv(x->v().data(), k);
    Eigen::Map<EVec<T>> yv(out.data(), m);
    yv.noalias() = wm * xv;
    for (int i = 0; i < m; ++i) out[i] += b->v()[i];
  }
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x, w, b};
  n->needs_grad = x->needs_grad || w->needs_grad || b->needs_grad;
  n->back = [x, w, b, m, k](Node<T>& nn) {
    Eigen::Map<const EVec<T>> dy(nn.grad.data(), m);
    if (auto* gw = Tape<T>::grad_of(w)) {
      EMap<T> dwm(gw->data(), m, k);
      Eigen::Map<const EVec<T>> xv(x->v().data(), k);
      dwm.noalias() += dy * xv.transpose();
    }
    if (auto* gb = Tape<T>::grad_of(b)) {
      for (int i = 0; i < m; ++i) (*gb)[i] += nn.grad[i];
    }
    if (auto* gx = Tape<T>::grad_of(x)) {
      ECMap<T> wm(w->v().data(), m, k);
      Eigen::Map<EVec<T>> dxv(gx->data(), k);
      dxv.noalias() += wm.transpose() * dy;
    }
  };
  return n;
}

// ---- elementwise ------------------------------------------------------------

template <typename T>
Node<T>* leaky_relu(Tape<T>& tape, Node<T>* x, T alpha) {
  Tensor<T> out(x->v().shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    T v = x->v()[i];
    out[i] = v > T(0) ? v : alpha * v;
  }
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x};
  n->needs_grad = x->needs_grad;
  n->back = [x, alpha](Node<T>& nn) {
    if (auto* gx = Tape<T>::grad_of(x)) {
      for (int64_t i = 0; i < nn.grad.numel(); ++i)
        (*gx)[i] += nn.grad[i] * (x->v()[i] > T(0) ? T(1) : alpha);
    }
  };
  return n;
}

template <typename T>
Node<T>* sigmoid(Tape<T>& tape, Node<T>* x) {
  Tensor<T> out(x->v().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-x->v()[i]));
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x};
  n->needs_grad = x->needs_grad;
  n->back = [x](Node<T>& nn) {
    if (auto* gx = Tape<T>::grad_of(x)) {
      for (int64_t i = 0; i < nn.grad.numel(); ++i) {
        T y = nn.v()[i];
        (*gx)[i] += nn.grad[i] * y * (T(1) - y);
      }
    }
  };
  return n;
}

template <typename T>
Node<T>* tanh_op(Tape<T>& tape, Node<T>* x) {
  Tensor<T> out(x->v().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(x->v()[i]);
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x};
  n->needs_grad = x->needs_grad;
  n->back = [x](Node<T>& nn) {
    if (auto* gx = Tape<T>::grad_of(x)) {
      for (int64_t i = 0; i < nn.grad.numel(); ++i) {
        T y = nn.v()[i];
        (*gx)[i] += nn.grad[i] * (T(1) - y * y);
      }
    }
  };
  return n;
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
Node<T>* upsample2x(Tape<T>& tape, Node<T>* x) {
  int c = x->v().dim(0), h = x->v().dim(1), w = x->v().dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        T v = x->v().at(ci, i, j);
        out.at(ci, 2 * i, 2 * j) = v;
        out.at(ci, 2 * i, 2 * j + 1) = v;
        out.at(ci, 2 * i + 1, 2 * j) = v;
        out.at(ci, 2 * i + 1, 2 * j + 1) = v;
      }
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x};
  n->needs_grad = x->needs_grad;
  n->back = [x, c, h, w](Node<T>& nn) {
    if (auto* gx = Tape<T>::grad_of(x)) {
      for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            gx->at(ci, i, j) += nn.grad.at(ci, 2 * i, 2 * j) + nn.grad.at(ci, 2 * i, 2 * j + 1) +
                                nn.grad.at(ci, 2 * i + 1, 2 * j) + nn.grad.at(ci, 2 * i + 1, 2 * j + 1);
          }
    }
  };
  return n;
}

template <typename T>
Node<T>* concat_channels(Tape<T>& tape, const std::vector<Node<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  int h = parts[0]->v().dim(1), w = parts[0]->v().dim(2);
  int ctot = 0;
  for (auto* p : parts) {
    if (p->v().rank() != 3 || p->v().dim(1) != h || p->v().dim(2) != w)
      throw ShapeError("concat_channels: spatial mismatch");
    ctot += p->v().dim(0);
  }
  Tensor<T> out({ctot, h, w});
  int64_t off = 0;
  for (auto* p : parts) {
    int64_t n = p->v().numel();
    std::copy(p->v().data(), p->v().data() + n, out.data() + off);
    off += n;
  }
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = parts;
  for (auto* p : parts) n->needs_grad = n->needs_grad || p->needs_grad;
  n->back = [parts](Node<T>& nn) {
    int64_t off = 0;
    for (auto* p : parts) {
      int64_t cnt = p->v().numel();
      if (auto* gp = Tape<T>::grad_of(p)) {
        for (int64_t i = 0; i < cnt; ++i) (*gp)[i] += nn.grad[off + i];
      }
      off += cnt;
    }
  };
  return n;
}

// 1-D slice [offset, offset+len)
template <typename T>
Node<T>* slice_vec(Tape<T>& tape, Node<T>* x, int offset, int len) {
  if (offset < 0 || offset + len > x->v().numel()) throw ShapeError("slice_vec: out of range");
  Tensor<T> out({len});
  for (int i = 0; i < len; ++i) out[i] = x->v()[offset + i];
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x};
  n->needs_grad = x->needs_grad;
  n->back = [x, offset, len](Node<T>& nn) {
    if (auto* gx = Tape<T>::grad_of(x)) {
      for (int i = 0; i < len; ++i) (*gx)[offset + i] += nn.grad[i];
    }
  };
  return n;
}

template <typename T>
Node<T>* gather_vec(Tape<T>& tape, Node<T>* x, std::vector<int> idx) {
  Tensor<T> out({static_cast<int>(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x->v().numel()) throw ShapeError("gather_vec: index out of range");
    out[static_cast<int64_t>(i)] = x->v()[idx[i]];
  }
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x};
  n->needs_grad = x->needs_grad;
  n->back = [x, idx](Node<T>& nn) {
    if (auto* gx = Tape<T>::grad_of(x)) {
      for (size_t i = 0; i < idx.size(); ++i) (*gx)[idx[i]] += nn.grad[static_cast<int64_t>(i)];
    }
  };
  return n;
}

// ---- modulation & fusion ----------------------------------------------------

// out_c = x_c * (gamma_c + 1) + beta_c, gamma/beta broadcast over H,W
template <typename T>
Node<T>* film_modulate(Tape<T>& tape, Node<T>* x, Node<T>* gamma, Node<T>* beta) {
  int c = x->v().dim(0);
  if (gamma->v().numel() != c || beta->v().numel() != c)
    throw ShapeError("film_modulate: expected " + std::to_string(c) + " scale/shift channels, got " +
                     std::to_string(gamma->v().numel()) + "/" + std::to_string(beta->v().numel()));
  int hw = x->v().dim(1) * x->v().dim(2);
  Tensor<T> out(x->v().shape());
  for (int ci = 0; ci < c; ++ci) {
    T g = gamma->v()[ci] + T(1), b = beta->v()[ci];
    const T* xp = x->v().data() + static_cast<int64_t>(ci) * hw;
    T* op = out.data() + static_cast<int64_t>(ci) * hw;
    for (int i = 0; i < hw; ++i) op[i] = xp[i] * g + b;
  }
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x, gamma, beta};
  n->needs_grad = x->needs_grad || gamma->needs_grad || beta->needs_grad;
  n->back = [x, gamma, beta, c, hw](Node<T>& nn) {
    auto* gx = Tape<T>::grad_of(x);
    auto* gg = Tape<T>::grad_of(gamma);
    auto* gb = Tape<T>::grad_of(beta);
    for (int ci = 0; ci < c; ++ci) {
      const T* dy = nn.grad.data() + static_cast<int64_t>(ci) * hw;
      const T* xp = x->v().data() + static_cast<int64_t>(ci) * hw;
      if (gx) {
        T g = gamma->v()[ci] + T(1);
        T* gxp = gx->data() + static_cast<int64_t>(ci) * hw;
        for (int i = 0; i < hw; ++i) gxp[i] += dy[i] * g;
      }
      if (gg) {
        T acc = T(0);
        for (int i = 0; i < hw; ++i) acc += dy[i] * xp[i];
        (*gg)[ci] += acc;
      }
      if (gb) {
        T acc = T(0);
        for (int i = 0; i < hw; ++i) acc += dy[i];
        (*gb)[ci] += acc;
      }
    }
  };
  return n;
}

template <typename T>
Node<T>* softmax_vec(Tape<T>& tape, Node<T>* x) {
  int m = static_cast<int>(x->v().numel());
  Tensor<T> out({m});
  T mx = x->v()[0];
  for (int i = 1; i < m; ++i) mx = std::max(mx, x->v()[i]);
  T sum = T(0);
  for (int i = 0; i < m; ++i) {
    out[i] = std::exp(x->v()[i] - mx);
    sum += out[i];
  }
  for (int i = 0; i < m; ++i) out[i] /= sum;
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {x};
  n->needs_grad = x->needs_grad;
  n->back = [x, m](Node<T>& nn) {
    if (auto* gx = Tape<T>::grad_of(x)) {
      T dot = T(0);
      for (int i = 0; i < m; ++i) dot += nn.grad[i] * nn.v()[i];
      for (int i = 0; i < m; ++i) (*gx)[i] += nn.v()[i] * (nn.grad[i] - dot);
    }
  };
  return n;
}

// out = sum_s weights[s] * features[s]; features share one shape
template <typename T>
Node<T>* weighted_sum_maps(Tape<T>& tape, const std::vector<Node<T>*>& features, Node<T>* weights) {
  if (features.empty()) throw TaskError("weighted_sum_maps: no feature streams");
  int s = static_cast<int>(features.size());
  if (weights->v().numel() != s) throw ShapeError("weighted_sum_maps: weight count mismatch");
  Tensor<T> out(features[0]->v().shape());
  for (int si = 0; si < s; ++si) {
    if (!features[static_cast<size_t>(si)]->v().same_shape(out)) throw ShapeError("weighted_sum_maps: shape mismatch");
    T wv = weights->v()[si];
    const T* f = features[static_cast<size_t>(si)]->v().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += wv * f[i];
  }
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = features;
  n->parents.push_back(weights);
  n->needs_grad = weights->needs_grad;
  for (auto* f : features) n->needs_grad = n->needs_grad || f->needs_grad;
  n->back = [features, weights, s](Node<T>& nn) {
    for (int si = 0; si < s; ++si) {
      Node<T>* f = features[static_cast<size_t>(si)];
      if (auto* gf = Tape<T>::grad_of(f)) {
        T wv = weights->v()[si];
        for (int64_t i = 0; i < nn.grad.numel(); ++i) (*gf)[i] += wv * nn.grad[i];
      }
    }
    if (auto* gw = Tape<T>::grad_of(weights)) {
      for (int si = 0; si < s; ++si) {
        const T* f = features[static_cast<size_t>(si)]->v().data();
        T acc = T(0);
        for (int64_t i = 0; i < nn.grad.numel(); ++i) acc += nn.grad[i] * f[i];
        (*gw)[si] += acc;
      }
    }
  };
  return n;
}

// ---- reductions -------------------------------------------------------------

// mean_i |a_i - b_i| (subgradient 0 at ties)
template <typename T>
Node<T>* mean_abs_diff(Tape<T>& tape, Node<T>* a, Node<T>* b) {
  if (!a->v().same_shape(b->v())) throw ShapeError("mean_abs_diff: shape mismatch");
  int64_t cnt = a->v().numel();
  T acc = T(0);
  for (int64_t i = 0; i < cnt; ++i) acc += std::abs(a->v()[i] - b->v()[i]);
  Tensor<T> out({1});
  out[0] = acc / static_cast<T>(cnt);
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {a, b};
  n->needs_grad = a->needs_grad || b->needs_grad;
  n->back = [a, b, cnt](Node<T>& nn) {
    T g = nn.grad[0] / static_cast<T>(cnt);
    auto* ga = Tape<T>::grad_of(a);
    auto* gb = Tape<T>::grad_of(b);
    for (int64_t i = 0; i < cnt; ++i) {
      T d = a->v()[i] - b->v()[i];
      T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
      if (ga) (*ga)[i] += g * s;
      if (gb) (*gb)[i] -= g * s;
    }
  };
  return n;
}

// mean_i (a_i - c)^2
template <typename T>
Node<T>* mean_sq_to(Tape<T>& tape, Node<T>* a, T c) {
  int64_t cnt = a->v().numel();
  T acc = T(0);
  for (int64_t i = 0; i < cnt; ++i) {
    T d = a->v()[i] - c;
    acc += d * d;
  }
  Tensor<T> out({1});
  out[0] = acc / static_cast<T>(cnt);
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->parents = {a};
  n->needs_grad = a->needs_grad;
  n->back = [a, c, cnt](Node<T>& nn) {
    if (auto* ga = Tape<T>::grad_of(a)) {
      T g = nn.grad[0] * T(2) / static_cast<T>(cnt);
      for (int64_t i = 0; i < cnt; ++i) (*ga)[i] += g * (a->v()[i] - c);
    }
  };
  return n;
}

// sum_i coeff_i * scalar_i
template <typename T>
Node<T>* scalar_combine(Tape<T>& tape, const std::vector<std::pair<Node<T>*, T>>& terms) {
  Tensor<T> out({1});
  for (const auto& [node, c] : terms) {
    if (node->v().numel() != 1) throw ShapeError("scalar_combine: non-scalar term");
    out[0] += c * node->v()[0];
  }
  Node<T>* n = tape.make();
  n->owned = std::move(out);
  n->val = &n->owned;
  for (const auto& [node, c] : terms) {
    n->parents.push_back(node);
    n->needs_grad = n->needs_grad || node->needs_grad;
  }
  auto coeffs = terms;
  n->back = [coeffs](Node<T>& nn) {
    for (const auto& [node, c] : coeffs) {
      if (auto* g = Tape<T>::grad_of(node)) (*g)[0] += c * nn.grad[0];
    }
  };
  return n;
}

// ---- parameters ------------------------------------------------------------

template <typename T>
struct AdamSlot {
  Tensor<T> m, v;
  int64_t t = 0;
};

template <typename T>
struct Param {
  std::string path;
  Tensor<T> value;
  AdamSlot<T> adam;
};

template <typename T>
class ParamStore {
 public:
  int add(std::string path, Tensor<T> init) {
    if (index_.count(path)) throw ConfigError("duplicate parameter path: " + path);
    int id = static_cast<int>(params_.size());
    index_[path] = id;
    params_.push_back(Param<T>{std::move(path), std::move(init), {}});
    return id;
  }

  int find(const std::string& path) const {
    auto it = index_.find(path);
    return it == index_.end() ? -1 : it->second;
  }

  Param<T>& at(int id) { return params_[static_cast<size_t>(id)]; }
  const Param<T>& at(int id) const { return params_[static_cast<size_t>(id)]; }
  size_t size() const { return params_.size(); }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, int> index_;
};

// Per-worker gradient accumulator, reduced in a fixed order after the
// parallel section.
template <typename T>
class GradBuffer {
 public:
  explicit GradBuffer(size_t n_params) : grads_(n_params) {}

  Tensor<T>* slot(const ParamStore<T>& store, int id) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g = Tensor<T>::zeros(store.at(id).value.shape());
    return &g;
  }

  const Tensor<T>& grad(int id) const { return grads_[static_cast<size_t>(id)]; }
  bool touched(int id) const { return !grads_[static_cast<size_t>(id)].empty(); }
  size_t size() const { return grads_.size(); }

  void reduce_from(const GradBuffer<T>& other, const ParamStore<T>& store) {
    for (size_t i = 0; i < grads_.size(); ++i) {
      if (!other.touched(static_cast<int>(i))) continue;
      slot(store, static_cast<int>(i))->add_(other.grads_[i]);
    }
  }

  void clear() {
    for (auto& g : grads_) g = Tensor<T>();
  }

 private:
  std::vector<Tensor<T>> grads_;
};

template <typename T>
Node<T>* param_leaf(Tape<T>& tape, ParamStore<T>& store, int id, GradBuffer<T>* grads) {
  auto& p = store.at(id);
  return tape.external(&p.value, grads ? grads->slot(store, id) : nullptr, grads != nullptr);
}

}  // namespace mmsynth
