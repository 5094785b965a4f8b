#include "uniddg/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "uniddg/errors.hpp"

namespace uniddg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

int conv_out(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// x_n: one sample (C,H,W) -> cols (C*kh*kw, Ho*Wo), row-major.
void im2col(const double* xn, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* cols) {
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    const double* xc = xn + static_cast<std::int64_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        double* dst = cols + row * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill(dst + static_cast<std::int64_t>(oh) * Wo,
                      dst + static_cast<std::int64_t>(oh + 1) * Wo, 0.0);
            continue;
          }
          const double* xrow = xc + static_cast<std::int64_t>(ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[static_cast<std::int64_t>(oh) * Wo + ow] =
                (iw >= 0 && iw < W) ? xrow[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, double* dxn) {
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    double* xc = dxn + static_cast<std::int64_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const double* src = cols + row * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          double* xrow = xc + static_cast<std::int64_t>(ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) xrow[iw] += src[static_cast<std::int64_t>(oh) * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad, std::function<void()> bw) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape, 0.0);
  return n.grad;
}

void Tape::accumulate(int id, const Tensor& g) {
  Tensor& dst = grad_buf(id);
  for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
}

void Tape::check_same_shape(Var a, Var b, const char* op) const {
  if (!value(a).same_shape(value(b)))
    throw ShapeError(std::string(op) + ": shape mismatch " + value(a).shape_str() + " vs " +
                     value(b).shape_str());
}

Var Tape::input(Tensor v) {
  Var out = push(std::move(v), false, nullptr);
  nodes_.back().leaf = true;
  return out;
}

Var Tape::param(const Tensor& v) {
  Var out = push(v, true, nullptr);
  nodes_.back().leaf = true;
  return out;
}

Var Tape::add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Tensor y = value(a);
  const Tensor& vb = value(b);
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += vb[i];
  bool rg = needs(a) || needs(b);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id, bi = b.id;
    nodes_.back().backward = [this, oi, ai, bi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      if (needs(Var{ai})) accumulate(ai, g);
      if (needs(Var{bi})) accumulate(bi, g);
    };
  }
  return out;
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Tensor y = value(a);
  const Tensor& vb = value(b);
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] -= vb[i];
  bool rg = needs(a) || needs(b);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id, bi = b.id;
    nodes_.back().backward = [this, oi, ai, bi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      if (needs(Var{ai})) accumulate(ai, g);
      if (needs(Var{bi})) {
        Tensor& db = grad_buf(bi);
        for (std::int64_t i = 0; i < g.numel(); ++i) db[i] -= g[i];
      }
    };
  }
  return out;
}

Var Tape::mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Tensor y = value(a);
  const Tensor& vb = value(b);
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= vb[i];
  bool rg = needs(a) || needs(b);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id, bi = b.id;
    nodes_.back().backward = [this, oi, ai, bi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      if (needs(Var{ai})) {
        const Tensor& vb2 = value(Var{bi});
        Tensor& da = grad_buf(ai);
        for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * vb2[i];
      }
      if (needs(Var{bi})) {
        const Tensor& va2 = value(Var{ai});
        Tensor& db = grad_buf(bi);
        for (std::int64_t i = 0; i < g.numel(); ++i) db[i] += g[i] * va2[i];
      }
    };
  }
  return out;
}

Var Tape::scale(Var a, double c) {
  Tensor y = value(a);
  for (auto& v : y.data) v *= c;
  bool rg = needs(a);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id;
    nodes_.back().backward = [this, oi, ai, c] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& da = grad_buf(ai);
      for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * c;
    };
  }
  return out;
}

Var Tape::mul_tensor(Var a, const Tensor& c) {
  if (!value(a).same_shape(c))
    throw ShapeError("mul_tensor: shape mismatch " + value(a).shape_str() + " vs " + c.shape_str());
  Tensor y = value(a);
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= c[i];
  bool rg = needs(a);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id;
    Tensor cc = c;
    nodes_.back().backward = [this, oi, ai, cc = std::move(cc)] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& da = grad_buf(ai);
      for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * cc[i];
    };
  }
  return out;
}

Var Tape::mask_channels(Var x, const Tensor& mask) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4 || mask.rank() != 3 || vx.dim(0) != mask.dim(0) ||
      vx.dim(2) != mask.dim(1) || vx.dim(3) != mask.dim(2))
    throw ShapeError("mask_channels: image " + vx.shape_str() + " vs mask " + mask.shape_str());
  const int N = vx.dim(0), C = vx.dim(1);
  const std::int64_t HW = static_cast<std::int64_t>(vx.dim(2)) * vx.dim(3);
  Tensor y = vx;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double* yc = y.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
      const double* m = mask.data.data() + static_cast<std::int64_t>(n) * HW;
      for (std::int64_t i = 0; i < HW; ++i) yc[i] *= m[i];
    }
  bool rg = needs(x);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id;
    Tensor mm = mask;
    nodes_.back().backward = [this, oi, xi, N, C, HW, mm = std::move(mm)] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& dx = grad_buf(xi);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * HW;
          const double* m = mm.data.data() + static_cast<std::int64_t>(n) * HW;
          for (std::int64_t i = 0; i < HW; ++i) dx[off + i] += g[off + i] * m[i];
        }
    };
  }
  return out;
}

Var Tape::leaky_relu(Var a, double slope) {
  Tensor y = value(a);
  for (auto& v : y.data) v = v > 0 ? v : slope * v;
  bool rg = needs(a);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id;
    nodes_.back().backward = [this, oi, ai, slope] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& vx = value(Var{ai});
      Tensor& da = grad_buf(ai);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        da[i] += g[i] * (vx[i] > 0 ? 1.0 : slope);
    };
  }
  return out;
}

Var Tape::tanh_(Var a) {
  Tensor y = value(a);
  for (auto& v : y.data) v = std::tanh(v);
  bool rg = needs(a);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id;
    nodes_.back().backward = [this, oi, ai] {
      const Node& o = nodes_[static_cast<size_t>(oi)];
      Tensor& da = grad_buf(ai);
      for (std::int64_t i = 0; i < o.grad.numel(); ++i)
        da[i] += o.grad[i] * (1.0 - o.value[i] * o.value[i]);
    };
  }
  return out;
}

Var Tape::concat_ch(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 4 || vb.rank() != 4 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2) ||
      va.dim(3) != vb.dim(3))
    throw ShapeError("concat_ch: " + va.shape_str() + " vs " + vb.shape_str());
  const int N = va.dim(0), Ca = va.dim(1), Cb = vb.dim(1);
  const std::int64_t HW = static_cast<std::int64_t>(va.dim(2)) * va.dim(3);
  Tensor y({N, Ca + Cb, va.dim(2), va.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::memcpy(y.data.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * HW,
                va.data.data() + static_cast<std::int64_t>(n) * Ca * HW,
                sizeof(double) * static_cast<size_t>(Ca * HW));
    std::memcpy(y.data.data() + (static_cast<std::int64_t>(n) * (Ca + Cb) + Ca) * HW,
                vb.data.data() + static_cast<std::int64_t>(n) * Cb * HW,
                sizeof(double) * static_cast<size_t>(Cb * HW));
  }
  bool rg = needs(a) || needs(b);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id, bi = b.id;
    nodes_.back().backward = [this, oi, ai, bi, N, Ca, Cb, HW] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      if (needs(Var{ai})) {
        Tensor& da = grad_buf(ai);
        for (int n = 0; n < N; ++n) {
          const double* src = g.data.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * HW;
          double* dst = da.data.data() + static_cast<std::int64_t>(n) * Ca * HW;
          for (std::int64_t i = 0; i < Ca * HW; ++i) dst[i] += src[i];
        }
      }
      if (needs(Var{bi})) {
        Tensor& db = grad_buf(bi);
        for (int n = 0; n < N; ++n) {
          const double* src =
              g.data.data() + (static_cast<std::int64_t>(n) * (Ca + Cb) + Ca) * HW;
          double* dst = db.data.data() + static_cast<std::int64_t>(n) * Cb * HW;
          for (std::int64_t i = 0; i < Cb * HW; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return out;
}

Var Tape::permute_n(Var x, const std::vector<int>& perm) {
  const Tensor& vx = value(x);
  const int N = vx.dim(0);
  if (static_cast<int>(perm.size()) != N) throw ShapeError("permute_n: bad permutation length");
  const std::int64_t stride = vx.numel() / N;
  Tensor y(vx.shape);
  for (int i = 0; i < N; ++i)
    std::memcpy(y.data.data() + i * stride, vx.data.data() + perm[static_cast<size_t>(i)] * stride,
                sizeof(double) * static_cast<size_t>(stride));
  bool rg = needs(x);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id;
    std::vector<int> p = perm;
    nodes_.back().backward = [this, oi, xi, p = std::move(p), N, stride] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& dx = grad_buf(xi);
      for (int i = 0; i < N; ++i) {
        const double* src = g.data.data() + i * stride;
        double* dst = dx.data.data() + p[static_cast<size_t>(i)] * stride;
        for (std::int64_t j = 0; j < stride; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

Var Tape::slice_cols(Var x, int start, int len) {
  const Tensor& vx = value(x);
  if (vx.rank() != 2 || start < 0 || start + len > vx.dim(1))
    throw ShapeError("slice_cols: bad slice on " + vx.shape_str());
  const int N = vx.dim(0), F = vx.dim(1);
  Tensor y({N, len});
  for (int n = 0; n < N; ++n)
    std::memcpy(y.data.data() + static_cast<std::int64_t>(n) * len,
                vx.data.data() + static_cast<std::int64_t>(n) * F + start,
                sizeof(double) * static_cast<size_t>(len));
  bool rg = needs(x);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id;
    nodes_.back().backward = [this, oi, xi, start, len, N, F] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& dx = grad_buf(xi);
      for (int n = 0; n < N; ++n)
        for (int j = 0; j < len; ++j)
          dx[static_cast<std::int64_t>(n) * F + start + j] +=
              g[static_cast<std::int64_t>(n) * len + j];
    };
  }
  return out;
}

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  const Tensor& vb = value(b);
  if (vx.rank() != 4 || vw.rank() != 4) throw ShapeError("conv2d: expects NCHW input and OIKK weight");
  const int N = vx.dim(0), Cin = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const int Cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
  if (vw.dim(1) != Cin)
    throw ShapeError("conv2d: weight expects " + std::to_string(vw.dim(1)) + " input channels, got " +
                     std::to_string(Cin));
  if (vb.numel() != Cout) throw ShapeError("conv2d: bias length mismatch");
  const int Ho = conv_out(H, kh, stride, pad), Wo = conv_out(W, kw, stride, pad);
  if (Ho < 1 || Wo < 1)
    throw ShapeError("conv2d: output would be empty for input " + vx.shape_str());
  const int K = Cin * kh * kw;
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;

  Tensor y({N, Cout, Ho, Wo});
#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n) {
    std::vector<double> cols(static_cast<size_t>(K) * P);
    im2col(vx.data.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, kh, kw, stride,
           pad, Ho, Wo, cols.data());
    MapM On(y.data.data() + static_cast<std::int64_t>(n) * Cout * P, Cout, P);
    CMapM Wm(vw.data.data(), Cout, K);
    CMapM Cm(cols.data(), K, P);
    On.noalias() = Wm * Cm;
    for (int c = 0; c < Cout; ++c) On.row(c).array() += vb[c];
  }

  bool rg = needs(x) || needs(w) || needs(b);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id, wi = w.id, bi = b.id;
    nodes_.back().backward = [this, oi, xi, wi, bi, N, Cin, H, W, Cout, kh, kw, stride, pad, Ho,
                              Wo, K, P] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& vx2 = value(Var{xi});
      const Tensor& vw2 = value(Var{wi});
      const bool need_x = needs(Var{xi});
      const bool need_w = needs(Var{wi});
      const bool need_b = needs(Var{bi});
      Tensor* dx = need_x ? &grad_buf(xi) : nullptr;
      std::vector<double> dw_part;
      if (need_w) dw_part.assign(static_cast<size_t>(N) * Cout * K, 0.0);
#pragma omp parallel for schedule(static)
      for (int n = 0; n < N; ++n) {
        CMapM Gn(g.data.data() + static_cast<std::int64_t>(n) * Cout * P, Cout, P);
        if (need_x) {
          std::vector<double> dcols(static_cast<size_t>(K) * P);
          MapM Dc(dcols.data(), K, P);
          CMapM Wm(vw2.data.data(), Cout, K);
          Dc.noalias() = Wm.transpose() * Gn;
          col2im_acc(dcols.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                     dx->data.data() + static_cast<std::int64_t>(n) * Cin * H * W);
        }
        if (need_w) {
          std::vector<double> cols(static_cast<size_t>(K) * P);
          im2col(vx2.data.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, kh, kw,
                 stride, pad, Ho, Wo, cols.data());
          MapM Dw(dw_part.data() + static_cast<std::int64_t>(n) * Cout * K, Cout, K);
          CMapM Cm(cols.data(), K, P);
          Dw.noalias() = Gn * Cm.transpose();
        }
      }
      if (need_w) {
        Tensor& dw = grad_buf(wi);
        for (int n = 0; n < N; ++n) {
          const double* src = dw_part.data() + static_cast<std::int64_t>(n) * Cout * K;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(Cout) * K; ++i) dw[i] += src[i];
        }
      }
      if (need_b) {
        Tensor& db = grad_buf(bi);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < Cout; ++c) {
            const double* gr = g.data.data() + (static_cast<std::int64_t>(n) * Cout + c) * P;
            double s = 0;
            for (std::int64_t i = 0; i < P; ++i) s += gr[i];
            db[c] += s;
          }
      }
    };
  }
  return out;
}

Var Tape::maxpool2(Var x) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4) throw ShapeError("maxpool2: expects NCHW");
  const int N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  if (H % 2 || W % 2) throw ShapeError("maxpool2: spatial dims must be even, got " + vx.shape_str());
  const int Ho = H / 2, Wo = W / 2;
  Tensor y({N, C, Ho, Wo});
  std::vector<std::uint8_t> arg(static_cast<size_t>(y.numel()));
  std::int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xc = vx.data.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow, ++o) {
          const double v00 = xc[(2 * oh) * W + 2 * ow], v01 = xc[(2 * oh) * W + 2 * ow + 1];
          const double v10 = xc[(2 * oh + 1) * W + 2 * ow], v11 = xc[(2 * oh + 1) * W + 2 * ow + 1];
          double best = v00;
          std::uint8_t bi = 0;
          if (v01 > best) { best = v01; bi = 1; }
          if (v10 > best) { best = v10; bi = 2; }
          if (v11 > best) { best = v11; bi = 3; }
          y[o] = best;
          arg[static_cast<size_t>(o)] = bi;
        }
    }
  bool rg = needs(x);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id;
    nodes_.back().backward = [this, oi, xi, arg = std::move(arg), N, C, H, W, Ho, Wo] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& dx = grad_buf(xi);
      std::int64_t o2 = 0;
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          double* xc = dx.data.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
          for (int oh = 0; oh < Ho; ++oh)
            for (int ow = 0; ow < Wo; ++ow, ++o2) {
              const std::uint8_t b = arg[static_cast<size_t>(o2)];
              const int ih = 2 * oh + (b >> 1), iw = 2 * ow + (b & 1);
              xc[static_cast<std::int64_t>(ih) * W + iw] += g[o2];
            }
        }
    };
  }
  return out;
}

Var Tape::upsample2(Var x) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4) throw ShapeError("upsample2: expects NCHW");
  const int N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  Tensor y({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xc = vx.data.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      double* yc = y.data.data() + (static_cast<std::int64_t>(n) * C + c) * 4 * H * W;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const double v = xc[static_cast<std::int64_t>(h) * W + w];
          double* r0 = yc + static_cast<std::int64_t>(2 * h) * 2 * W + 2 * w;
          double* r1 = r0 + 2 * W;
          r0[0] = r0[1] = r1[0] = r1[1] = v;
        }
    }
  bool rg = needs(x);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id;
    nodes_.back().backward = [this, oi, xi, N, C, H, W] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& dx = grad_buf(xi);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* gc = g.data.data() + (static_cast<std::int64_t>(n) * C + c) * 4 * H * W;
          double* xc = dx.data.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              const double* r0 = gc + static_cast<std::int64_t>(2 * h) * 2 * W + 2 * w;
              const double* r1 = r0 + 2 * W;
              xc[static_cast<std::int64_t>(h) * W + w] += r0[0] + r0[1] + r1[0] + r1[1];
            }
        }
    };
  }
  return out;
}

Var Tape::linear(Var x, Var w, Var b) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  const Tensor& vb = value(b);
  if (vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1))
    throw ShapeError("linear: " + vx.shape_str() + " vs weight " + vw.shape_str());
  const int N = vx.dim(0), F = vx.dim(1), O = vw.dim(0);
  if (vb.numel() != O) throw ShapeError("linear: bias length mismatch");
  Tensor y({N, O});
  {
    CMapM X(vx.data.data(), N, F), Wm(vw.data.data(), O, F);
    MapM Y(y.data.data(), N, O);
    Y.noalias() = X * Wm.transpose();
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o) y[static_cast<std::int64_t>(n) * O + o] += vb[o];
  }
  bool rg = needs(x) || needs(w) || needs(b);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id, wi = w.id, bi = b.id;
    nodes_.back().backward = [this, oi, xi, wi, bi, N, F, O] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      CMapM G(g.data.data(), N, O);
      if (needs(Var{xi})) {
        const Tensor& vw2 = value(Var{wi});
        Tensor& dx = grad_buf(xi);
        MapM DX(dx.data.data(), N, F);
        DX.noalias() += G * CMapM(vw2.data.data(), O, F);
      }
      if (needs(Var{wi})) {
        const Tensor& vx2 = value(Var{xi});
        Tensor& dw = grad_buf(wi);
        MapM DW(dw.data.data(), O, F);
        DW.noalias() += G.transpose() * CMapM(vx2.data.data(), N, F);
      }
      if (needs(Var{bi})) {
        Tensor& db = grad_buf(bi);
        for (int n = 0; n < N; ++n)
          for (int o = 0; o < O; ++o) db[o] += g[static_cast<std::int64_t>(n) * O + o];
      }
    };
  }
  return out;
}

Var Tape::global_avg_pool(Var x) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4) throw ShapeError("global_avg_pool: expects NCHW");
  const int N = vx.dim(0), C = vx.dim(1);
  const std::int64_t HW = static_cast<std::int64_t>(vx.dim(2)) * vx.dim(3);
  Tensor y({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xc = vx.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
      double s = 0;
      for (std::int64_t i = 0; i < HW; ++i) s += xc[i];
      y[static_cast<std::int64_t>(n) * C + c] = s / static_cast<double>(HW);
    }
  bool rg = needs(x);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id;
    nodes_.back().backward = [this, oi, xi, N, C, HW] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& dx = grad_buf(xi);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double gv = g[static_cast<std::int64_t>(n) * C + c] / static_cast<double>(HW);
          double* xc = dx.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) xc[i] += gv;
        }
    };
  }
  return out;
}

Var Tape::batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training,
                     double momentum, double eps) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4) throw ShapeError("batch_norm: expects NCHW");
  const int N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  if (value(gamma).numel() != C || value(beta).numel() != C)
    throw ShapeError("batch_norm: affine parameter length mismatch");
  const std::int64_t HW = static_cast<std::int64_t>(H) * W;
  const double m = static_cast<double>(N) * static_cast<double>(HW);

  Tensor mean({C}), invstd({C});
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (int n = 0; n < N; ++n) {
        const double* xc = vx.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) s += xc[i];
      }
      const double mu = s / m;
      double v = 0;
      for (int n = 0; n < N; ++n) {
        const double* xc = vx.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          const double d = xc[i] - mu;
          v += d * d;
        }
      }
      v /= m;
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(v + eps);
      state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * v;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = 1.0 / std::sqrt(state.running_var[c] + eps);
    }
  }

  const Tensor& vg = value(gamma);
  const Tensor& vbta = value(beta);
  Tensor y(vx.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xc = vx.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
      double* yc = y.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
      const double mu = mean[c], is = invstd[c], ga = vg[c], be = vbta[c];
      for (std::int64_t i = 0; i < HW; ++i) yc[i] = ga * (xc[i] - mu) * is + be;
    }

  bool rg = needs(x) || needs(gamma) || needs(beta);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id, gi = gamma.id, bi = beta.id;
    nodes_.back().backward = [this, oi, xi, gi, bi, mean = std::move(mean),
                              invstd = std::move(invstd), training, N, C, HW, m] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& vx2 = value(Var{xi});
      const Tensor& vg2 = value(Var{gi});
      const bool nx = needs(Var{xi}), ng = needs(Var{gi}), nb = needs(Var{bi});
      Tensor* dx = nx ? &grad_buf(xi) : nullptr;
      Tensor* dgam = ng ? &grad_buf(gi) : nullptr;
      Tensor* dbet = nb ? &grad_buf(bi) : nullptr;
      for (int c = 0; c < C; ++c) {
        const double mu = mean[c], is = invstd[c], ga = vg2[c];
        double sum_g = 0, sum_gx = 0;
        for (int n = 0; n < N; ++n) {
          const double* gc = g.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
          const double* xc = vx2.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) {
            sum_g += gc[i];
            sum_gx += gc[i] * (xc[i] - mu) * is;
          }
        }
        if (ng) (*dgam)[c] += sum_gx;
        if (nb) (*dbet)[c] += sum_g;
        if (nx) {
          for (int n = 0; n < N; ++n) {
            const double* gc = g.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
            const double* xc = vx2.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
            double* dxc = dx->data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
            if (training) {
              for (std::int64_t i = 0; i < HW; ++i) {
                const double xh = (xc[i] - mu) * is;
                dxc[i] += ga * is * (gc[i] - sum_g / m - xh * sum_gx / m);
              }
            } else {
              for (std::int64_t i = 0; i < HW; ++i) dxc[i] += ga * is * gc[i];
            }
          }
        }
      }
    };
  }
  return out;
}

Var Tape::instance_norm(Var x, double eps) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4) throw ShapeError("instance_norm: expects NCHW");
  const int N = vx.dim(0), C = vx.dim(1);
  const std::int64_t HW = static_cast<std::int64_t>(vx.dim(2)) * vx.dim(3);
  const double m = static_cast<double>(HW);
  if (HW < 2) throw ShapeError("instance_norm: needs >= 2 elements per channel");

  Tensor mean({N, C}), invstd({N, C});
  Tensor y(vx.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * HW;
      const double* xc = vx.data.data() + off;
      double s = 0;
      for (std::int64_t i = 0; i < HW; ++i) s += xc[i];
      const double mu = s / m;
      double v = 0;
      for (std::int64_t i = 0; i < HW; ++i) {
        const double d = xc[i] - mu;
        v += d * d;
      }
      v /= m;
      const double is = 1.0 / std::sqrt(v + eps);
      mean[static_cast<std::int64_t>(n) * C + c] = mu;
      invstd[static_cast<std::int64_t>(n) * C + c] = is;
      double* yc = y.data.data() + off;
      for (std::int64_t i = 0; i < HW; ++i) yc[i] = (xc[i] - mu) * is;
    }

  bool rg = needs(x);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id;
    nodes_.back().backward = [this, oi, xi, mean = std::move(mean), invstd = std::move(invstd), N,
                              C, HW, m] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& vx2 = value(Var{xi});
      Tensor& dx = grad_buf(xi);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * HW;
          const double mu = mean[static_cast<std::int64_t>(n) * C + c];
          const double is = invstd[static_cast<std::int64_t>(n) * C + c];
          const double* gc = g.data.data() + off;
          const double* xc = vx2.data.data() + off;
          double sum_g = 0, sum_gx = 0;
          for (std::int64_t i = 0; i < HW; ++i) {
            sum_g += gc[i];
            sum_gx += gc[i] * (xc[i] - mu) * is;
          }
          double* dxc = dx.data.data() + off;
          for (std::int64_t i = 0; i < HW; ++i) {
            const double xh = (xc[i] - mu) * is;
            dxc[i] += is * (gc[i] - sum_g / m - xh * sum_gx / m);
          }
        }
    };
  }
  return out;
}

Var Tape::adain(Var x, Var alpha, Var beta, double eps) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4) throw ShapeError("adain: expects NCHW");
  const int N = vx.dim(0), C = vx.dim(1);
  const Tensor& va = value(alpha);
  const Tensor& vbt = value(beta);
  if (va.rank() != 2 || va.dim(0) != N || va.dim(1) != C || !va.same_shape(vbt))
    throw ShapeError("adain: alpha/beta must be {N,C}, got " + va.shape_str() + " and " +
                     vbt.shape_str() + " for input " + vx.shape_str());
  const std::int64_t HW = static_cast<std::int64_t>(vx.dim(2)) * vx.dim(3);
  if (HW < 2) throw ShapeError("adain: each channel needs >= 2 elements");
  const double m = static_cast<double>(HW);

  Tensor mean({N, C}), sd({N, C});
  Tensor y(vx.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::int64_t nc = static_cast<std::int64_t>(n) * C + c;
      const std::int64_t off = nc * HW;
      const double* xc = vx.data.data() + off;
      double s = 0;
      for (std::int64_t i = 0; i < HW; ++i) s += xc[i];
      const double mu = s / m;
      double v = 0;
      for (std::int64_t i = 0; i < HW; ++i) {
        const double d = xc[i] - mu;
        v += d * d;
      }
      const double stdev = std::sqrt(v / m);
      mean[nc] = mu;
      sd[nc] = stdev;
      const double denom = stdev + eps;
      const double a = va[nc], b = vbt[nc];
      double* yc = y.data.data() + off;
      for (std::int64_t i = 0; i < HW; ++i) yc[i] = a * (xc[i] - mu) / denom + b;
    }

  bool rg = needs(x) || needs(alpha) || needs(beta);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id, ai = alpha.id, bi = beta.id;
    nodes_.back().backward = [this, oi, xi, ai, bi, mean = std::move(mean), sd = std::move(sd),
                              eps, N, C, HW, m] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& vx2 = value(Var{xi});
      const Tensor& va2 = value(Var{ai});
      const bool nx = needs(Var{xi}), na = needs(Var{ai}), nb = needs(Var{bi});
      Tensor* dx = nx ? &grad_buf(xi) : nullptr;
      Tensor* da = na ? &grad_buf(ai) : nullptr;
      Tensor* db = nb ? &grad_buf(bi) : nullptr;
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::int64_t nc = static_cast<std::int64_t>(n) * C + c;
          const std::int64_t off = nc * HW;
          const double mu = mean[nc], stdev = sd[nc], denom = stdev + eps, a = va2[nc];
          const double* gc = g.data.data() + off;
          const double* xc = vx2.data.data() + off;
          double sum_g = 0, sum_gx = 0;  // sum_gx = sum g*(x-mu)
          for (std::int64_t i = 0; i < HW; ++i) {
            sum_g += gc[i];
            sum_gx += gc[i] * (xc[i] - mu);
          }
          if (na) (*da)[nc] += sum_gx / denom;
          if (nb) (*db)[nc] += sum_g;
          if (nx) {
            double* dxc = dx->data.data() + off;
            const double gbar = sum_g / m;
            const double var_term =
                stdev > 1e-12 ? a * sum_gx / (m * stdev * denom * denom) : 0.0;
            for (std::int64_t i = 0; i < HW; ++i)
              dxc[i] += a * (gc[i] - gbar) / denom - (xc[i] - mu) * var_term;
          }
        }
    };
  }
  return out;
}

Var Tape::softmax_ch(Var x) {
  const Tensor& vx = value(x);
  if (vx.rank() != 4) throw ShapeError("softmax_ch: expects NCHW");
  const int N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const std::int64_t HW = static_cast<std::int64_t>(H) * W;
  Tensor y(vx.shape);
  for (int n = 0; n < N; ++n) {
    const double* xn = vx.data.data() + static_cast<std::int64_t>(n) * C * HW;
    double* yn = y.data.data() + static_cast<std::int64_t>(n) * C * HW;
    for (std::int64_t p = 0; p < HW; ++p) {
      double mx = xn[p];
      for (int c = 1; c < C; ++c) mx = std::max(mx, xn[c * HW + p]);
      double z = 0;
      for (int c = 0; c < C; ++c) {
        const double e = std::exp(xn[c * HW + p] - mx);
        yn[c * HW + p] = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) yn[c * HW + p] /= z;
    }
  }
  bool rg = needs(x);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, xi = x.id;
    nodes_.back().backward = [this, oi, xi, N, C, HW] {
      const Node& o = nodes_[static_cast<size_t>(oi)];
      Tensor& dx = grad_buf(xi);
      for (int n = 0; n < N; ++n) {
        const double* yn = o.value.data.data() + static_cast<std::int64_t>(n) * C * HW;
        const double* gn = o.grad.data.data() + static_cast<std::int64_t>(n) * C * HW;
        double* dn = dx.data.data() + static_cast<std::int64_t>(n) * C * HW;
        for (std::int64_t p = 0; p < HW; ++p) {
          double dot = 0;
          for (int c = 0; c < C; ++c) dot += gn[c * HW + p] * yn[c * HW + p];
          for (int c = 0; c < C; ++c)
            dn[c * HW + p] += yn[c * HW + p] * (gn[c * HW + p] - dot);
        }
      }
    };
  }
  return out;
}

Var Tape::reparam_sample(Var mean, Var logvar, const Tensor& eps) {
  check_same_shape(mean, logvar, "reparam_sample");
  const Tensor& vm = value(mean);
  if (!vm.same_shape(eps)) throw ShapeError("reparam_sample: eps shape mismatch");
  const Tensor& vl = value(logvar);
  Tensor y(vm.shape);
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const double lv = std::clamp(vl[i], -20.0, 20.0);
    y[i] = vm[i] + std::exp(0.5 * lv) * eps[i];
  }
  bool rg = needs(mean) || needs(logvar);
  Var out = push(std::move(y), rg, nullptr);
  if (rg) {
    int oi = out.id, mi = mean.id, li = logvar.id;
    Tensor ec = eps;
    nodes_.back().backward = [this, oi, mi, li, ec = std::move(ec)] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      if (needs(Var{mi})) accumulate(mi, g);
      if (needs(Var{li})) {
        const Tensor& vl2 = value(Var{li});
        Tensor& dl = grad_buf(li);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          if (vl2[i] <= -20.0 || vl2[i] >= 20.0) continue;
          dl[i] += g[i] * 0.5 * std::exp(0.5 * vl2[i]) * ec[i];
        }
      }
    };
  }
  return out;
}

Var Tape::dot_const(Var a, const Tensor& r) {
  const Tensor& va = value(a);
  if (!va.same_shape(r)) throw ShapeError("dot_const: shape mismatch");
  double s = 0;
  for (std::int64_t i = 0; i < va.numel(); ++i) s += va[i] * r[i];
  bool rg = needs(a);
  Var out = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id;
    Tensor rc = r;
    nodes_.back().backward = [this, oi, ai, rc = std::move(rc)] {
      const double g = nodes_[static_cast<size_t>(oi)].grad[0];
      Tensor& da = grad_buf(ai);
      for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += g * rc[i];
    };
  }
  return out;
}

Var Tape::l1_mean(Var a, Var b) {
  check_same_shape(a, b, "l1_mean");
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  const double inv = 1.0 / static_cast<double>(va.numel());
  double s = 0;
  for (std::int64_t i = 0; i < va.numel(); ++i) s += std::abs(va[i] - vb[i]);
  bool rg = needs(a) || needs(b);
  Var out = push(Tensor::scalar(s * inv), rg, nullptr);
  if (rg) {
    int oi = out.id, ai = a.id, bi = b.id;
    nodes_.back().backward = [this, oi, ai, bi, inv] {
      const double g = nodes_[static_cast<size_t>(oi)].grad[0];
      const Tensor& va2 = value(Var{ai});
      const Tensor& vb2 = value(Var{bi});
      const bool na = needs(Var{ai}), nb = needs(Var{bi});
      Tensor* da = na ? &grad_buf(ai) : nullptr;
      Tensor* db = nb ? &grad_buf(bi) : nullptr;
      for (std::int64_t i = 0; i < va2.numel(); ++i) {
        const double d = va2[i] - vb2[i];
        const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        if (na) (*da)[i] += g * inv * sgn;
        if (nb) (*db)[i] -= g * inv * sgn;
      }
    };
  }
  return out;
}

Var Tape::soft_dice_loss(Var probs, const Tensor& onehot, double eps) {
  const Tensor& vp = value(probs);
  if (!vp.same_shape(onehot))
    throw ShapeError("soft_dice_loss: probs " + vp.shape_str() + " vs target " + onehot.shape_str());
  if (vp.rank() != 4 || vp.dim(1) < 2) throw ShapeError("soft_dice_loss: expects NCHW with C >= 2");
  const int N = vp.dim(0), C = vp.dim(1);
  const std::int64_t HW = static_cast<std::int64_t>(vp.dim(2)) * vp.dim(3);
  const int K = C - 1;  // foreground classes

  Tensor num({N, K}), den({N, K});
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    double dsum = 0;
    for (int k = 1; k < C; ++k) {
      const double* p = vp.data.data() + (static_cast<std::int64_t>(n) * C + k) * HW;
      const double* t = onehot.data.data() + (static_cast<std::int64_t>(n) * C + k) * HW;
      double u = 0, pp = 0, tt = 0;
      for (std::int64_t i = 0; i < HW; ++i) {
        u += p[i] * t[i];
        pp += p[i] * p[i];
        tt += t[i] * t[i];
      }
      const double uu = 2.0 * u + eps, vv = pp + tt + eps;
      num[static_cast<std::int64_t>(n) * K + (k - 1)] = uu;
      den[static_cast<std::int64_t>(n) * K + (k - 1)] = vv;
      dsum += uu / vv;
    }
    loss += 1.0 - dsum / K;
  }
  loss /= N;

  bool rg = needs(probs);
  Var out = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    int oi = out.id, pi = probs.id;
    Tensor th = onehot;
    nodes_.back().backward = [this, oi, pi, th = std::move(th), num = std::move(num),
                              den = std::move(den), N, C, K, HW] {
      const double g = nodes_[static_cast<size_t>(oi)].grad[0];
      const Tensor& vp2 = value(Var{pi});
      Tensor& dp = grad_buf(pi);
      const double scale = g / (static_cast<double>(N) * K);
      for (int n = 0; n < N; ++n)
        for (int k = 1; k < C; ++k) {
          const std::int64_t off = (static_cast<std::int64_t>(n) * C + k) * HW;
          const double uu = num[static_cast<std::int64_t>(n) * K + (k - 1)];
          const double vv = den[static_cast<std::int64_t>(n) * K + (k - 1)];
          const double* p = vp2.data.data() + off;
          const double* t = th.data.data() + off;
          double* d = dp.data.data() + off;
          for (std::int64_t i = 0; i < HW; ++i)
            d[i] -= scale * (2.0 * t[i] * vv - 2.0 * p[i] * uu) / (vv * vv);
        }
    };
  }
  return out;
}

Var Tape::weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: term/weight count mismatch");
  double s = 0;
  bool rg = false;
  for (size_t i = 0; i < terms.size(); ++i) {
    if (value(terms[i]).numel() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    s += weights[i] * value(terms[i])[0];
    rg = rg || needs(terms[i]);
  }
  Var out = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    int oi = out.id;
    std::vector<int> ids(terms.size());
    for (size_t i = 0; i < terms.size(); ++i) ids[i] = terms[i].id;
    std::vector<double> ws = weights;
    nodes_.back().backward = [this, oi, ids = std::move(ids), ws = std::move(ws)] {
      const double g = nodes_[static_cast<size_t>(oi)].grad[0];
      for (size_t i = 0; i < ids.size(); ++i)
        if (needs(Var{ids[i]})) grad_buf(ids[i])[0] += g * ws[i];
    };
  }
  return out;
}

void Tape::backward(Var loss) {
  Node& ln = nodes_[static_cast<size_t>(loss.id)];
  if (ln.value.numel() != 1) throw ShapeError("backward: loss must be a scalar");
  grad_buf(loss.id)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.backward && n.grad.numel() > 0) n.backward();
    if (!n.leaf) {
      // consumers have already run; this node's buffers are dead
      n.value = Tensor();
      n.grad = Tensor();
      n.backward = nullptr;
    }
  }
}

}  // namespace uniddg
