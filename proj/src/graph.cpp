#include "iip/graph.hpp"

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <cstring>

namespace iip::grad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

struct ConvGeom {
  int N, C, H, W;    // conv input
  int K, kh, kw;     // kernel
  int stride, pad;
  int OH, OW;        // conv output

  int64_t cols_rows() const { return static_cast<int64_t>(C) * kh * kw; }
  int64_t cols_cols() const { return static_cast<int64_t>(N) * OH * OW; }
};

ConvGeom conv_geom(const std::vector<int>& xs, const std::vector<int>& ks, int stride, int pad) {
  require(xs.size() == 4 && ks.size() == 4,
          "conv: expected 4-d input and kernel, got " + shape_str(xs) + " and " + shape_str(ks));
  require(stride >= 1 && pad >= 0, "conv: bad stride/pad");
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, pad, 0, 0};
  require(ks[1] == g.C, "conv: channel mismatch between input " + shape_str(xs) + " and kernel " +
                            shape_str(ks));
  const int hn = g.H + 2 * pad - g.kh;
  const int wn = g.W + 2 * pad - g.kw;
  require(hn >= 0 && wn >= 0 && hn % stride == 0 && wn % stride == 0,
          "conv: geometry does not tile, input " + shape_str(xs) + " kernel " + shape_str(ks));
  g.OH = hn / stride + 1;
  g.OW = wn / stride + 1;
  require(g.OH >= 1 && g.OW >= 1, "conv: empty output");
  return g;
}

// cols[(c*kh+i)*kw+j, n*OH*OW + oh*OW + ow] = x[n,c,oh*s-p+i,ow*s-p+j]
void im2col(const ConvGeom& g, const double* x, double* cols) {
  const int64_t plane = static_cast<int64_t>(g.H) * g.W;
  const int64_t ocols = g.cols_cols();
  for (int c = 0; c < g.C; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        double* row = cols + ((static_cast<int64_t>(c) * g.kh + i) * g.kw + j) * ocols;
        for (int n = 0; n < g.N; ++n) {
          const double* xp = x + (static_cast<int64_t>(n) * g.C + c) * plane;
          for (int oh = 0; oh < g.OH; ++oh) {
            const int h = oh * g.stride - g.pad + i;
            double* dst = row + (static_cast<int64_t>(n) * g.OH + oh) * g.OW;
            if (h < 0 || h >= g.H) {
              std::memset(dst, 0, sizeof(double) * static_cast<size_t>(g.OW));
              continue;
            }
            const double* src = xp + static_cast<int64_t>(h) * g.W;
            for (int ow = 0; ow < g.OW; ++ow) {
              const int w = ow * g.stride - g.pad + j;
              dst[ow] = (w < 0 || w >= g.W) ? 0.0 : src[w];
            }
          }
        }
      }
    }
  }
}

// adjoint of im2col: accumulates into x
void col2im(const ConvGeom& g, const double* cols, double* x) {
  const int64_t plane = static_cast<int64_t>(g.H) * g.W;
  const int64_t ocols = g.cols_cols();
  for (int c = 0; c < g.C; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const double* row = cols + ((static_cast<int64_t>(c) * g.kh + i) * g.kw + j) * ocols;
        for (int n = 0; n < g.N; ++n) {
          double* xp = x + (static_cast<int64_t>(n) * g.C + c) * plane;
          for (int oh = 0; oh < g.OH; ++oh) {
            const int h = oh * g.stride - g.pad + i;
            if (h < 0 || h >= g.H) continue;
            const double* src = row + (static_cast<int64_t>(n) * g.OH + oh) * g.OW;
            double* dst = xp + static_cast<int64_t>(h) * g.W;
            for (int ow = 0; ow < g.OW; ++ow) {
              const int w = ow * g.stride - g.pad + j;
              if (w >= 0 && w < g.W) dst[w] += src[ow];
            }
          }
        }
      }
    }
  }
}

// y[n,k,oh,ow] <-> ymat[k, n*OH*OW + oh*OW + ow]
void nchw_to_mat(const ConvGeom& g, const double* y, double* ymat) {
  const int64_t plane = static_cast<int64_t>(g.OH) * g.OW;
  for (int n = 0; n < g.N; ++n)
    for (int k = 0; k < g.K; ++k)
      std::memcpy(ymat + (static_cast<int64_t>(k) * g.N + n) * plane,
                  y + (static_cast<int64_t>(n) * g.K + k) * plane,
                  sizeof(double) * static_cast<size_t>(plane));
}

void mat_to_nchw(const ConvGeom& g, const double* ymat, double* y) {
  const int64_t plane = static_cast<int64_t>(g.OH) * g.OW;
  for (int n = 0; n < g.N; ++n)
    for (int k = 0; k < g.K; ++k)
      std::memcpy(y + (static_cast<int64_t>(n) * g.K + k) * plane,
                  ymat + (static_cast<int64_t>(k) * g.N + n) * plane,
                  sizeof(double) * static_cast<size_t>(plane));
}

}  // namespace

int Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&, int)> bp) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backprop = std::move(bp);
#ifndef NDEBUG
  assert(n.value.all_finite() && "graph: non-finite values after forward op");
#endif
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

Tensor& Graph::grad_buf(int id) {
  Node& n = nodes_[check(id)];
  if (!n.grad_live) {
    n.grad = Tensor(n.value.shape);
    n.grad_live = true;
  }
  return n.grad;
}

void Graph::accumulate(int id, const Tensor& g) {
  Tensor& buf = grad_buf(id);
  for (size_t i = 0; i < buf.v.size(); ++i) buf.v[i] += g.v[i];
}

const Tensor& Graph::gradient(int id) const {
  const Node& n = nodes_[check(id)];
  if (!n.grad_live) throw UsageError("graph: gradient not populated for node");
  return n.grad;
}

void Graph::backward(int root) {
  const Node& r = nodes_[check(root)];
  if (r.value.numel() != 1) throw UsageError("graph: backward requires a scalar loss");
  if (swept_) throw UsageError("graph: repeated backward without reset_grads()");
  swept_ = true;
  grad_buf(root).v[0] = 1.0;
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_live || !n.requires_grad || !n.backprop) continue;
    n.backprop(*this, id);
  }
}

void Graph::reset_grads() {
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.grad_live = false;
  }
  swept_ = false;
}

// ---------------------------------------------------------------- elementwise

int Graph::add(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = ta.v[i] + tb.v[i];
  bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Graph& g, int self) {
    const Tensor& go = g.gradient(self);
    if (g.requires_grad(a)) g.accumulate(a, go);
    if (g.requires_grad(b)) g.accumulate(b, go);
  });
}

int Graph::sub(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "sub: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = ta.v[i] - tb.v[i];
  bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Graph& g, int self) {
    const Tensor& go = g.gradient(self);
    if (g.requires_grad(a)) g.accumulate(a, go);
    if (g.requires_grad(b)) {
      Tensor& buf = g.grad_buf(b);
      for (size_t i = 0; i < buf.v.size(); ++i) buf.v[i] -= go.v[i];
    }
  });
}

int Graph::scale(int a, double s) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = ta.v[i] * s;
  return push(std::move(out), requires_grad(a), [a, s](Graph& g, int self) {
    if (!g.requires_grad(a)) return;
    const Tensor& go = g.gradient(self);
    Tensor& buf = g.grad_buf(a);
    for (size_t i = 0; i < buf.v.size(); ++i) buf.v[i] += s * go.v[i];
  });
}

int Graph::relu(int a) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = ta.v[i] > 0.0 ? ta.v[i] : 0.0;
  return push(std::move(out), requires_grad(a), [a](Graph& g, int self) {
    if (!g.requires_grad(a)) return;
    const Tensor& go = g.gradient(self);
    const Tensor& in = g.value(a);
    Tensor& buf = g.grad_buf(a);
    for (size_t i = 0; i < buf.v.size(); ++i)
      if (in.v[i] > 0.0) buf.v[i] += go.v[i];
  });
}

int Graph::reshape(int a, std::vector<int> shape) {
  const Tensor& ta = value(a);
  require(Tensor::numel_of(shape) == ta.numel(),
          "reshape: element count mismatch " + shape_str(ta.shape) + " -> " + shape_str(shape));
  Tensor out(shape, ta.v);
  return push(std::move(out), requires_grad(a), [a](Graph& g, int self) {
    if (!g.requires_grad(a)) return;
    const Tensor& go = g.gradient(self);
    Tensor& buf = g.grad_buf(a);
    for (size_t i = 0; i < buf.v.size(); ++i) buf.v[i] += go.v[i];
  });
}

namespace {
// flatten a shape into (outer, axis_len, inner) around `axis`
void axis_split(const std::vector<int>& s, int axis, int64_t& outer, int64_t& alen, int64_t& inner) {
  outer = 1;
  inner = 1;
  alen = s[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace

int Graph::concat(int axis, const std::vector<int>& xs) {
  require(!xs.empty(), "concat: no inputs");
  const std::vector<int>& base = value(xs[0]).shape;
  require(axis >= 0 && axis < static_cast<int>(base.size()), "concat: bad axis");
  std::vector<int> oshape = base;
  int total = 0;
  bool rg = false;
  for (int x : xs) {
    const std::vector<int>& s = value(x).shape;
    require(s.size() == base.size(), "concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis)
        require(s[i] == base[i], "concat: shape mismatch " + shape_str(s) + " vs " + shape_str(base));
    total += s[static_cast<size_t>(axis)];
    rg = rg || requires_grad(x);
  }
  oshape[static_cast<size_t>(axis)] = total;
  Tensor out(oshape);
  int64_t outer, alen_total, inner;
  axis_split(oshape, axis, outer, alen_total, inner);
  int64_t off = 0;
  for (int x : xs) {
    const Tensor& t = value(x);
    int64_t o2, alen, i2;
    axis_split(t.shape, axis, o2, alen, i2);
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.v.data() + (o * alen_total + off) * inner, t.v.data() + o * alen * inner,
                  sizeof(double) * static_cast<size_t>(alen * inner));
    off += alen;
  }
  std::vector<int> parts(xs.begin(), xs.end());
  return push(std::move(out), rg, [axis, parts](Graph& g, int self) {
    const Tensor& go = g.gradient(self);
    int64_t outer, alen_total, inner;
    axis_split(go.shape, axis, outer, alen_total, inner);
    int64_t off = 0;
    for (int x : parts) {
      int64_t o2, alen, i2;
      axis_split(g.value(x).shape, axis, o2, alen, i2);
      if (g.requires_grad(x)) {
        Tensor& buf = g.grad_buf(x);
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = go.v.data() + (o * alen_total + off) * inner;
          double* dst = buf.v.data() + o * alen * inner;
          for (int64_t i = 0; i < alen * inner; ++i) dst[i] += src[i];
        }
      }
      off += alen;
    }
  });
}

int Graph::slice(int a, int axis, int start, int end) {
  const Tensor& ta = value(a);
  require(axis >= 0 && axis < ta.rank(), "slice: bad axis");
  const int alen = ta.size(axis);
  require(start >= 0 && end > start && end <= alen, "slice: bad range on " + shape_str(ta.shape));
  std::vector<int> oshape = ta.shape;
  oshape[static_cast<size_t>(axis)] = end - start;
  Tensor out(oshape);
  int64_t outer, alen_full, inner;
  axis_split(ta.shape, axis, outer, alen_full, inner);
  const int64_t alen_out = end - start;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.v.data() + o * alen_out * inner, ta.v.data() + (o * alen_full + start) * inner,
                sizeof(double) * static_cast<size_t>(alen_out * inner));
  return push(std::move(out), requires_grad(a), [a, axis, start](Graph& g, int self) {
    if (!g.requires_grad(a)) return;
    const Tensor& go = g.gradient(self);
    Tensor& buf = g.grad_buf(a);
    int64_t outer, alen_full, inner;
    axis_split(buf.shape, axis, outer, alen_full, inner);
    int64_t o2, alen_out, i2;
    axis_split(go.shape, axis, o2, alen_out, i2);
    for (int64_t o = 0; o < outer; ++o) {
      const double* src = go.v.data() + o * alen_out * inner;
      double* dst = buf.v.data() + (o * alen_full + start) * inner;
      for (int64_t i = 0; i < alen_out * inner; ++i) dst[i] += src[i];
    }
  });
}

int Graph::broadcast_rows(int a, int n) {
  const Tensor& ta = value(a);
  require(ta.rank() == 2 && ta.size(0) == 1, "broadcast_rows: expected [1,D], got " + shape_str(ta.shape));
  require(n >= 1, "broadcast_rows: bad count");
  const int d = ta.size(1);
  Tensor out({n, d});
  for (int r = 0; r < n; ++r)
    std::memcpy(out.v.data() + static_cast<int64_t>(r) * d, ta.v.data(), sizeof(double) * static_cast<size_t>(d));
  return push(std::move(out), requires_grad(a), [a, n, d](Graph& g, int self) {
    if (!g.requires_grad(a)) return;
    const Tensor& go = g.gradient(self);
    Tensor& buf = g.grad_buf(a);
    for (int r = 0; r < n; ++r)
      for (int i = 0; i < d; ++i) buf.v[static_cast<size_t>(i)] += go.v[static_cast<size_t>(r) * d + i];
  });
}

int Graph::mean_axis0(int a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 2, "mean_axis0: expected [N,D], got " + shape_str(ta.shape));
  const int n = ta.size(0), d = ta.size(1);
  Tensor out({1, d});
  for (int r = 0; r < n; ++r)
    for (int i = 0; i < d; ++i) out.v[static_cast<size_t>(i)] += ta.v[static_cast<size_t>(r) * d + i];
  for (int i = 0; i < d; ++i) out.v[static_cast<size_t>(i)] /= n;
  return push(std::move(out), requires_grad(a), [a, n, d](Graph& g, int self) {
    if (!g.requires_grad(a)) return;
    const Tensor& go = g.gradient(self);
    Tensor& buf = g.grad_buf(a);
    for (int r = 0; r < n; ++r)
      for (int i = 0; i < d; ++i) buf.v[static_cast<size_t>(r) * d + i] += go.v[static_cast<size_t>(i)] / n;
  });
}

int Graph::mean(int a) {
  const Tensor& ta = value(a);
  const int64_t n = ta.numel();
  double s = 0.0;
  for (double x : ta.v) s += x;
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  return push(std::move(out), requires_grad(a), [a, n](Graph& g, int self) {
    if (!g.requires_grad(a)) return;
    const double go = g.gradient(self).v[0] / static_cast<double>(n);
    Tensor& buf = g.grad_buf(a);
    for (double& x : buf.v) x += go;
  });
}

int Graph::sum_sq(int a) {
  const Tensor& ta = value(a);
  double s = 0.0;
  for (double x : ta.v) s += x * x;
  return push(Tensor::scalar(s), requires_grad(a), [a](Graph& g, int self) {
    if (!g.requires_grad(a)) return;
    const double go = g.gradient(self).v[0];
    const Tensor& in = g.value(a);
    Tensor& buf = g.grad_buf(a);
    for (size_t i = 0; i < buf.v.size(); ++i) buf.v[i] += 2.0 * in.v[i] * go;
  });
}

// --------------------------------------------------------------------- dense

int Graph::linear(int x, int w, int b) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  const Tensor& tb = value(b);
  require(tx.rank() == 2 && tw.rank() == 2 && tb.rank() == 1,
          "linear: expected [N,F],[F,O],[O], got " + shape_str(tx.shape) + " " + shape_str(tw.shape) +
              " " + shape_str(tb.shape));
  const int n = tx.size(0), f = tx.size(1), o = tw.size(1);
  require(tw.size(0) == f && tb.size(0) == o,
          "linear: shape mismatch " + shape_str(tx.shape) + " x " + shape_str(tw.shape));
  Tensor out({n, o});
  {
    CMapRM X(tx.v.data(), n, f);
    CMapRM W(tw.v.data(), f, o);
    MapRM Y(out.v.data(), n, o);
    Y.noalias() = X * W;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < o; ++c) out.v[static_cast<size_t>(r) * o + c] += tb.v[static_cast<size_t>(c)];
  }
  bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  return push(std::move(out), rg, [x, w, b, n, f, o](Graph& g, int self) {
    const Tensor& go = g.gradient(self);
    CMapRM GY(go.v.data(), n, o);
    if (g.requires_grad(x)) {
      CMapRM W(g.value(w).v.data(), f, o);
      MapRM GX(g.grad_buf(x).v.data(), n, f);
      GX.noalias() += GY * W.transpose();
    }
    if (g.requires_grad(w)) {
      CMapRM X(g.value(x).v.data(), n, f);
      MapRM GW(g.grad_buf(w).v.data(), f, o);
      GW.noalias() += X.transpose() * GY;
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buf(b);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < o; ++c) gb.v[static_cast<size_t>(c)] += go.v[static_cast<size_t>(r) * o + c];
    }
  });
}

int Graph::conv2d(int x, int k, int stride, int pad) {
  const Tensor& tx = value(x);
  const Tensor& tk = value(k);
  const ConvGeom g = conv_geom(tx.shape, tk.shape, stride, pad);
  const int64_t ckk = g.cols_rows(), m = g.cols_cols();
  std::vector<double> cols(static_cast<size_t>(ckk * m));
  im2col(g, tx.v.data(), cols.data());
  std::vector<double> ymat(static_cast<size_t>(g.K) * m);
  {
    CMapRM W(tk.v.data(), g.K, ckk);
    CMapRM Cm(cols.data(), ckk, m);
    MapRM Y(ymat.data(), g.K, m);
    Y.noalias() = W * Cm;
  }
  Tensor out({g.N, g.K, g.OH, g.OW});
  mat_to_nchw(g, ymat.data(), out.v.data());
  bool rg = requires_grad(x) || requires_grad(k);
  return push(std::move(out), rg, [x, k, g](Graph& gr, int self) {
    const Tensor& go = gr.gradient(self);
    const int64_t ckk = g.cols_rows(), m = g.cols_cols();
    std::vector<double> gymat(static_cast<size_t>(g.K) * m);
    nchw_to_mat(g, go.v.data(), gymat.data());
    CMapRM GY(gymat.data(), g.K, m);
    if (gr.requires_grad(k)) {
      std::vector<double> cols(static_cast<size_t>(ckk * m));
      im2col(g, gr.value(x).v.data(), cols.data());
      CMapRM Cm(cols.data(), ckk, m);
      MapRM GW(gr.grad_buf(k).v.data(), g.K, ckk);
      GW.noalias() += GY * Cm.transpose();
    }
    if (gr.requires_grad(x)) {
      std::vector<double> gcols(static_cast<size_t>(ckk * m));
      CMapRM W(gr.value(k).v.data(), g.K, ckk);
      MapRM GC(gcols.data(), ckk, m);
      GC.noalias() = W.transpose() * GY;
      col2im(g, gcols.data(), gr.grad_buf(x).v.data());
    }
  });
}

int Graph::conv_transpose2d(int x, int k, int stride, int pad) {
  const Tensor& tx = value(x);
  const Tensor& tk = value(k);
  require(tx.rank() == 4 && tk.rank() == 4, "conv_transpose: expected 4-d input and kernel, got " +
                                                shape_str(tx.shape) + " and " + shape_str(tk.shape));
  require(tx.size(1) == tk.size(0), "conv_transpose: channel mismatch " + shape_str(tx.shape) +
                                        " vs kernel " + shape_str(tk.shape));
  // output of the transpose = input of the matching conv
  const int N = tx.size(0), K = tk.size(0), C = tk.size(1), kh = tk.size(2), kw = tk.size(3);
  const int OH = tx.size(2), OW = tx.size(3);
  const int H = (OH - 1) * stride - 2 * pad + kh;
  const int W = (OW - 1) * stride - 2 * pad + kw;
  require(H >= 1 && W >= 1, "conv_transpose: empty output");
  const ConvGeom g = conv_geom({N, C, H, W}, tk.shape, stride, pad);
  require(g.OH == OH && g.OW == OW, "conv_transpose: inconsistent geometry");
  const int64_t ckk = g.cols_rows(), m = g.cols_cols();

  std::vector<double> ymat(static_cast<size_t>(K) * m);
  nchw_to_mat(g, tx.v.data(), ymat.data());
  std::vector<double> cols(static_cast<size_t>(ckk * m));
  {
    CMapRM W_(tk.v.data(), K, ckk);
    CMapRM Y(ymat.data(), K, m);
    MapRM Cm(cols.data(), ckk, m);
    Cm.noalias() = W_.transpose() * Y;
  }
  Tensor out({N, C, H, W});
  col2im(g, cols.data(), out.v.data());
  bool rg = requires_grad(x) || requires_grad(k);
  return push(std::move(out), rg, [x, k, g](Graph& gr, int self) {
    const Tensor& go = gr.gradient(self);  // shape [N,C,H,W]
    const int64_t ckk = g.cols_rows(), m = g.cols_cols();
    std::vector<double> gcols(static_cast<size_t>(ckk * m));
    im2col(g, go.v.data(), gcols.data());
    CMapRM GC(gcols.data(), ckk, m);
    if (gr.requires_grad(x)) {
      std::vector<double> gymat(static_cast<size_t>(g.K) * m);
      CMapRM W_(gr.value(k).v.data(), g.K, ckk);
      MapRM GY(gymat.data(), g.K, m);
      GY.noalias() = W_ * GC;
      Tensor gx({g.N, g.K, g.OH, g.OW});
      mat_to_nchw(g, gymat.data(), gx.v.data());
      gr.accumulate(x, gx);
    }
    if (gr.requires_grad(k)) {
      std::vector<double> ymat(static_cast<size_t>(g.K) * m);
      nchw_to_mat(g, gr.value(x).v.data(), ymat.data());
      CMapRM Y(ymat.data(), g.K, m);
      MapRM GW(gr.grad_buf(k).v.data(), g.K, ckk);
      GW.noalias() += Y * GC.transpose();
    }
  });
}

int Graph::bias_channels(int x, int b) {
  const Tensor& tx = value(x);
  const Tensor& tb = value(b);
  require(tx.rank() == 4 && tb.rank() == 1 && tb.size(0) == tx.size(1),
          "bias_channels: shape mismatch " + shape_str(tx.shape) + " vs " + shape_str(tb.shape));
  const int N = tx.size(0), C = tx.size(1);
  const int64_t plane = static_cast<int64_t>(tx.size(2)) * tx.size(3);
  Tensor out(tx.shape, tx.v);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double* p = out.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
      const double bc = tb.v[static_cast<size_t>(c)];
      for (int64_t i = 0; i < plane; ++i) p[i] += bc;
    }
  bool rg = requires_grad(x) || requires_grad(b);
  return push(std::move(out), rg, [x, b, N, C, plane](Graph& g, int self) {
    const Tensor& go = g.gradient(self);
    if (g.requires_grad(x)) g.accumulate(x, go);
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buf(b);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* p = go.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
          double s = 0.0;
          for (int64_t i = 0; i < plane; ++i) s += p[i];
          gb.v[static_cast<size_t>(c)] += s;
        }
    }
  });
}

// ------------------------------------------------------------------- warping

int Graph::bilinear_sample(int src, int flow) {
  const Tensor& ts = value(src);
  const Tensor& tf = value(flow);
  require(ts.rank() == 4 && tf.rank() == 4, "bilinear_sample: expected 4-d tensors, got " +
                                                shape_str(ts.shape) + " and " + shape_str(tf.shape));
  require(tf.size(1) == 2 && tf.size(0) == ts.size(0) && tf.size(2) == ts.size(2) &&
              tf.size(3) == ts.size(3),
          "bilinear_sample: flow must be [N,2,H,W] matching source " + shape_str(ts.shape) +
              ", got " + shape_str(tf.shape));
  const int N = ts.size(0), C = ts.size(1), H = ts.size(2), W = ts.size(3);
  require(H >= 2 && W >= 2, "bilinear_sample: source too small");
  const int64_t plane = static_cast<int64_t>(H) * W;
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n) {
    const double* fx_p = tf.v.data() + static_cast<int64_t>(n) * 2 * plane;
    const double* fy_p = fx_p + plane;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const int64_t pix = static_cast<int64_t>(i) * W + j;
        double xs = j + fx_p[pix];
        double ys = i + fy_p[pix];
        if (!(xs >= 0.0)) xs = 0.0;  // also catches non-finite flow
        if (xs > W - 1) xs = W - 1;
        if (!(ys >= 0.0)) ys = 0.0;
        if (ys > H - 1) ys = H - 1;
        int x0 = static_cast<int>(std::floor(xs));
        int y0 = static_cast<int>(std::floor(ys));
        if (x0 > W - 2) x0 = W - 2;
        if (y0 > H - 2) y0 = H - 2;
        const double ax = xs - x0, ay = ys - y0;
        for (int c = 0; c < C; ++c) {
          const double* sp = ts.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
          const double v00 = sp[static_cast<int64_t>(y0) * W + x0];
          const double v01 = sp[static_cast<int64_t>(y0) * W + x0 + 1];
          const double v10 = sp[static_cast<int64_t>(y0 + 1) * W + x0];
          const double v11 = sp[static_cast<int64_t>(y0 + 1) * W + x0 + 1];
          out.v[(static_cast<int64_t>(n) * C + c) * plane + pix] =
              (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11);
        }
      }
    }
  }
  bool rg = requires_grad(src) || requires_grad(flow);
  return push(std::move(out), rg, [src, flow, N, C, H, W, plane](Graph& g, int self) {
    const Tensor& go = g.gradient(self);
    const Tensor& ts = g.value(src);
    const Tensor& tf = g.value(flow);
    const bool need_src = g.requires_grad(src);
    const bool need_flow = g.requires_grad(flow);
    Tensor* gs = need_src ? &g.grad_buf(src) : nullptr;
    Tensor* gf = need_flow ? &g.grad_buf(flow) : nullptr;
    for (int n = 0; n < N; ++n) {
      const double* fx_p = tf.v.data() + static_cast<int64_t>(n) * 2 * plane;
      const double* fy_p = fx_p + plane;
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          const int64_t pix = static_cast<int64_t>(i) * W + j;
          const double xs_raw = j + fx_p[pix];
          const double ys_raw = i + fy_p[pix];
          const bool cx = !(xs_raw >= 0.0) || xs_raw > W - 1;
          const bool cy = !(ys_raw >= 0.0) || ys_raw > H - 1;
          double xs = cx ? (xs_raw > W - 1 ? W - 1 : 0.0) : xs_raw;
          double ys = cy ? (ys_raw > H - 1 ? H - 1 : 0.0) : ys_raw;
          int x0 = static_cast<int>(std::floor(xs));
          int y0 = static_cast<int>(std::floor(ys));
          if (x0 > W - 2) x0 = W - 2;
          if (y0 > H - 2) y0 = H - 2;
          const double ax = xs - x0, ay = ys - y0;
          double dxs = 0.0, dys = 0.0;
          for (int c = 0; c < C; ++c) {
            const double gouts = go.v[(static_cast<int64_t>(n) * C + c) * plane + pix];
            if (gouts == 0.0) continue;
            const double* sp = ts.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
            const int64_t i00 = static_cast<int64_t>(y0) * W + x0;
            const int64_t i10 = static_cast<int64_t>(y0 + 1) * W + x0;
            const double v00 = sp[i00], v01 = sp[i00 + 1], v10 = sp[i10], v11 = sp[i10 + 1];
            if (need_src) {
              double* gp = gs->v.data() + (static_cast<int64_t>(n) * C + c) * plane;
              gp[i00] += gouts * (1.0 - ay) * (1.0 - ax);
              gp[i00 + 1] += gouts * (1.0 - ay) * ax;
              gp[i10] += gouts * ay * (1.0 - ax);
              gp[i10 + 1] += gouts * ay * ax;
            }
            if (need_flow) {
              dxs += gouts * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10));
              dys += gouts * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01));
            }
          }
          if (need_flow) {
            double* gfx = gf->v.data() + static_cast<int64_t>(n) * 2 * plane;
            double* gfy = gfx + plane;
            if (!cx) gfx[pix] += dxs;
            if (!cy) gfy[pix] += dys;
          }
        }
      }
    }
  });
}

// -------------------------------------------------------------------- losses

int Graph::l1_loss(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "l1_loss: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  double s = 0.0;
  for (size_t i = 0; i < ta.v.size(); ++i) s += std::abs(ta.v[i] - tb.v[i]);
  bool rg = requires_grad(a) || requires_grad(b);
  return push(Tensor::scalar(s), rg, [a, b](Graph& g, int self) {
    const double go = g.gradient(self).v[0];
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    const bool na = g.requires_grad(a), nb = g.requires_grad(b);
    Tensor* ga = na ? &g.grad_buf(a) : nullptr;
    Tensor* gb = nb ? &g.grad_buf(b) : nullptr;
    for (size_t i = 0; i < ta.v.size(); ++i) {
      const double d = ta.v[i] - tb.v[i];
      const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (na) ga->v[i] += go * s;
      if (nb) gb->v[i] -= go * s;
    }
  });
}

int Graph::mse_loss(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "mse_loss: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  double s = 0.0;
  for (size_t i = 0; i < ta.v.size(); ++i) {
    const double d = ta.v[i] - tb.v[i];
    s += d * d;
  }
  bool rg = requires_grad(a) || requires_grad(b);
  return push(Tensor::scalar(s), rg, [a, b](Graph& g, int self) {
    const double go = g.gradient(self).v[0];
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    const bool na = g.requires_grad(a), nb = g.requires_grad(b);
    Tensor* ga = na ? &g.grad_buf(a) : nullptr;
    Tensor* gb = nb ? &g.grad_buf(b) : nullptr;
    for (size_t i = 0; i < ta.v.size(); ++i) {
      const double d = 2.0 * (ta.v[i] - tb.v[i]) * go;
      if (na) ga->v[i] += d;
      if (nb) gb->v[i] -= d;
    }
  });
}

}  // namespace iip::grad
