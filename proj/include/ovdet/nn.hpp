#pragma once

// Minimal dense NN substrate used by the detector: CHW tensors stored as
// (channels x pixels) Eigen matrices, 3x3/1x1 convolutions via im2col, 2x2
// max-pooling, bilinear ROI pooling, linear layers, and a named parameter
// store with SGD-momentum. Every kernel has an explicit backward; parameter
// gradients ACCUMULATE so a batch is a sequence of backward calls.

#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ovdet/common.hpp"
#include "ovdet/datakit.hpp"

namespace ovdet::nn {

template <class S>
struct Tensor3 {
  int c = 0, h = 0, w = 0;
  MatX<S> m;  // (c, h*w), spatial index y*w + x

  static Tensor3 zeros(int c, int h, int w) {
    Tensor3 t;
    t.c = c;
    t.h = h;
    t.w = w;
    t.m = MatX<S>::Zero(c, static_cast<Eigen::Index>(h) * w);
    return t;
  }
  S at(int ch, int y, int x) const { return m(ch, static_cast<Eigen::Index>(y) * w + x); }
  S& at(int ch, int y, int x) { return m(ch, static_cast<Eigen::Index>(y) * w + x); }
};

template <class S>
struct Param {
  MatX<S> v;    // value
  MatX<S> g;    // gradient accumulator
  MatX<S> mom;  // SGD momentum buffer
};

template <class S>
class ParamStore {
 public:
  Param<S>& create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (items_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    Param<S>& p = items_[name];
    p.v = MatX<S>::Zero(rows, cols);
    p.g = MatX<S>::Zero(rows, cols);
    p.mom = MatX<S>::Zero(rows, cols);
    return p;
  }
  Param<S>& at(const std::string& name) {
    auto it = items_.find(name);
    if (it == items_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  const Param<S>& at(const std::string& name) const {
    auto it = items_.find(name);
    if (it == items_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return items_.count(name) != 0; }

  std::vector<std::string> names() const {  // sorted: map order
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& [k, v] : items_) out.push_back(k);
    return out;
  }

  void zero_grad() {
    for (auto& [k, p] : items_) p.g.setZero();
  }

  /// Classic SGD with momentum: mom <- mu*mom + g; v <- v - lr*mom.
  void sgd_step(double lr, double mu) {
    for (auto& [k, p] : items_) {
      p.mom = static_cast<S>(mu) * p.mom + p.g;
      p.v -= static_cast<S>(lr) * p.mom;
    }
  }

  std::size_t size() const { return items_.size(); }

 private:
  std::map<std::string, Param<S>> items_;  // ordered => deterministic traversal
};

/// He-normal fill for layers followed by ReLU.
template <class S>
void he_init(MatX<S>& w, Eigen::Index fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      w(i, j) = static_cast<S>(std * rng.normal());
    }
  }
}

/// im2col for 3x3, stride 1, zero padding 1: output (c*9, h*w); row index
/// ci*9 + ky*3 + kx holds x[ci, y+ky-1, x+kx-1].
template <class S>
MatX<S> im2col3(const Tensor3<S>& x) {
  MatX<S> cols = MatX<S>::Zero(static_cast<Eigen::Index>(x.c) * 9,
                               static_cast<Eigen::Index>(x.h) * x.w);
  for (int ci = 0; ci < x.c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = static_cast<Eigen::Index>(ci) * 9 + ky * 3 + kx;
        for (int y = 0; y < x.h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= x.h) continue;
          const int x_lo = std::max(0, 1 - kx);
          const int x_hi = std::min(x.w, x.w + 1 - kx);
          if (x_hi <= x_lo) continue;
          cols.row(row).segment(static_cast<Eigen::Index>(y) * x.w + x_lo, x_hi - x_lo) =
              x.m.row(ci).segment(static_cast<Eigen::Index>(sy) * x.w + x_lo + kx - 1,
                                  x_hi - x_lo);
        }
      }
    }
  }
  return cols;
}

/// Adjoint of im2col3: scatter-adds column gradients back to input pixels.
template <class S>
Tensor3<S> col2im3(const MatX<S>& dcols, int c, int h, int w) {
  Tensor3<S> dx = Tensor3<S>::zeros(c, h, w);
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = static_cast<Eigen::Index>(ci) * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const int x_lo = std::max(0, 1 - kx);
          const int x_hi = std::min(w, w + 1 - kx);
          if (x_hi <= x_lo) continue;
          dx.m.row(ci).segment(static_cast<Eigen::Index>(sy) * w + x_lo + kx - 1, x_hi - x_lo) +=
              dcols.row(row).segment(static_cast<Eigen::Index>(y) * w + x_lo, x_hi - x_lo);
        }
      }
    }
  }
  return dx;
}

/// 3x3 convolution, stride 1, pad 1. W is (out_c, in_c*9). The im2col matrix
/// is written to `cols` for reuse in the backward pass.
template <class S>
Tensor3<S> conv3x3_forward(const Tensor3<S>& x, const Param<S>& weight, const Param<S>& bias,
                           MatX<S>* cols) {
  *cols = im2col3(x);
  Tensor3<S> y;
  y.c = static_cast<int>(weight.v.rows());
  y.h = x.h;
  y.w = x.w;
  y.m = weight.v * (*cols);
  y.m.colwise() += bias.v.col(0);
  return y;
}

template <class S>
Tensor3<S> conv3x3_backward(const Tensor3<S>& dy, const MatX<S>& cols, Param<S>& weight,
                            Param<S>& bias, int in_c, int in_h, int in_w) {
  weight.g += dy.m * cols.transpose();
  bias.g.col(0) += dy.m.rowwise().sum();
  const MatX<S> dcols = weight.v.transpose() * dy.m;
  return col2im3(dcols, in_c, in_h, in_w);
}

template <class S>
Tensor3<S> conv1x1_forward(const Tensor3<S>& x, const Param<S>& weight, const Param<S>& bias) {
  Tensor3<S> y;
  y.c = static_cast<int>(weight.v.rows());
  y.h = x.h;
  y.w = x.w;
  y.m = weight.v * x.m;
  y.m.colwise() += bias.v.col(0);
  return y;
}

template <class S>
Tensor3<S> conv1x1_backward(const Tensor3<S>& dy, const Tensor3<S>& x, Param<S>& weight,
                            Param<S>& bias) {
  weight.g += dy.m * x.m.transpose();
  bias.g.col(0) += dy.m.rowwise().sum();
  Tensor3<S> dx;
  dx.c = x.c;
  dx.h = x.h;
  dx.w = x.w;
  dx.m = weight.v.transpose() * dy.m;
  return dx;
}

template <class S>
void relu_inplace(Tensor3<S>& x) {
  x.m = x.m.cwiseMax(S(0));
}

/// Backward through ReLU given the POST-activation tensor.
template <class S>
Tensor3<S> relu_backward(const Tensor3<S>& dy, const Tensor3<S>& post) {
  Tensor3<S> dx = dy;
  dx.m = (post.m.array() > S(0)).template cast<S>() * dy.m.array();
  return dx;
}

/// 2x2 max-pool, stride 2 (even sizes only). `argmax(ch, k)` records the
/// winning input pixel index for output pixel k.
template <class S>
Tensor3<S> maxpool2_forward(const Tensor3<S>& x, Eigen::MatrixXi* argmax) {
  if (x.h % 2 != 0 || x.w % 2 != 0) throw std::invalid_argument("maxpool2 needs even sizes");
  const int oh = x.h / 2, ow = x.w / 2;
  Tensor3<S> y = Tensor3<S>::zeros(x.c, oh, ow);
  argmax->resize(x.c, static_cast<Eigen::Index>(oh) * ow);
  for (int ci = 0; ci < x.c; ++ci) {
    for (int y0 = 0; y0 < oh; ++y0) {
      for (int x0 = 0; x0 < ow; ++x0) {
        S best = x.at(ci, 2 * y0, 2 * x0);
        int best_idx = 2 * y0 * x.w + 2 * x0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (2 * y0 + dy) * x.w + (2 * x0 + dx);
            const S v = x.m(ci, idx);
            if (v > best) {
              best = v;
              best_idx = idx;
            }
          }
        }
        y.at(ci, y0, x0) = best;
        (*argmax)(ci, static_cast<Eigen::Index>(y0) * ow + x0) = best_idx;
      }
    }
  }
  return y;
}

template <class S>
Tensor3<S> maxpool2_backward(const Tensor3<S>& dy, const Eigen::MatrixXi& argmax, int in_h,
                             int in_w) {
  Tensor3<S> dx = Tensor3<S>::zeros(dy.c, in_h, in_w);
  for (int ci = 0; ci < dy.c; ++ci) {
    for (Eigen::Index k = 0; k < dy.m.cols(); ++k) {
      dx.m(ci, argmax(ci, k)) += dy.m(ci, k);
    }
  }
  return dx;
}

/// One bilinear sample: up to 4 (pixel index, weight) taps.
struct RoiSample {
  int idx[4] = {0, 0, 0, 0};
  double w[4] = {0, 0, 0, 0};
};

struct RoiCache {
  std::vector<RoiSample> samples;  // P*P entries, bin-major (row then col)
  bool degenerate = false;
};

namespace detail {

/// Bilinear taps for continuous feature coordinate (sx, sy); cell (ix, iy)
/// holds its value at center (ix + 0.5, iy + 0.5).
inline RoiSample bilinear_taps(double sx, double sy, int w, int h) {
  const double gx = std::min(std::max(sx - 0.5, 0.0), static_cast<double>(w - 1));
  const double gy = std::min(std::max(sy - 0.5, 0.0), static_cast<double>(h - 1));
  const int x0 = std::min(static_cast<int>(gx), w - 1);
  const int y0 = std::min(static_cast<int>(gy), h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = gx - x0;
  const double fy = gy - y0;
  RoiSample s;
  s.idx[0] = y0 * w + x0;
  s.w[0] = (1 - fx) * (1 - fy);
  s.idx[1] = y0 * w + x1;
  s.w[1] = fx * (1 - fy);
  s.idx[2] = y1 * w + x0;
  s.w[2] = (1 - fx) * fy;
  s.idx[3] = y1 * w + x1;
  s.w[3] = fx * fy;
  return s;
}

}  // namespace detail

/// Bilinear ROI pooling of an image-coordinate box onto a PxP grid (one
/// sample per bin center). A box spanning less than one feature cell is
/// answered from its nearest single cell and flagged degenerate.
template <class S>
MatX<S> roi_align_forward(const Tensor3<S>& fm, const datakit::BBox& box, double stride, int p,
                          RoiCache* cache) {
  cache->samples.clear();
  cache->degenerate = false;
  const double fx0 = box.x_min / stride, fy0 = box.y_min / stride;
  const double fw = box.width() / stride, fh = box.height() / stride;
  if (fw * fh < 1.0) {
    cache->degenerate = true;
    const double cx = std::min(std::max(fx0 + fw / 2, 0.0), fm.w - 1e-9);
    const double cy = std::min(std::max(fy0 + fh / 2, 0.0), fm.h - 1e-9);
    RoiSample s;
    s.idx[0] = static_cast<int>(cy) * fm.w + static_cast<int>(cx);
    s.w[0] = 1.0;
    cache->samples.assign(static_cast<std::size_t>(p) * p, s);
  } else {
    const double bw = fw / p, bh = fh / p;
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < p; ++j) {
        const double sx = fx0 + (j + 0.5) * bw;
        const double sy = fy0 + (i + 0.5) * bh;
        cache->samples.push_back(detail::bilinear_taps(sx, sy, fm.w, fm.h));
      }
    }
  }
  MatX<S> out(fm.c, static_cast<Eigen::Index>(p) * p);
  for (std::size_t k = 0; k < cache->samples.size(); ++k) {
    const RoiSample& s = cache->samples[k];
    out.col(static_cast<Eigen::Index>(k)) =
        static_cast<S>(s.w[0]) * fm.m.col(s.idx[0]) + static_cast<S>(s.w[1]) * fm.m.col(s.idx[1]) +
        static_cast<S>(s.w[2]) * fm.m.col(s.idx[2]) + static_cast<S>(s.w[3]) * fm.m.col(s.idx[3]);
  }
  return out;
}

/// Accumulates the pooled-output gradient back onto the feature map.
template <class S>
void roi_align_backward(const MatX<S>& dout, const RoiCache& cache, Tensor3<S>* dfm) {
  for (std::size_t k = 0; k < cache.samples.size(); ++k) {
    const RoiSample& s = cache.samples[k];
    for (int t = 0; t < 4; ++t) {
      if (s.w[t] == 0.0) continue;
      dfm->m.col(s.idx[t]) += static_cast<S>(s.w[t]) * dout.col(static_cast<Eigen::Index>(k));
    }
  }
}

template <class S>
VecX<S> linear_forward(const VecX<S>& v, const Param<S>& weight, const Param<S>& bias) {
  return weight.v * v + bias.v.col(0);
}

/// Accumulates dW/db; returns gradient w.r.t. the input vector.
template <class S>
VecX<S> linear_backward(const VecX<S>& dy, const VecX<S>& v, Param<S>& weight, Param<S>& bias) {
  weight.g += dy * v.transpose();
  bias.g.col(0) += dy;
  return weight.v.transpose() * dy;
}

template <class S>
VecX<S> global_avg_pool(const Tensor3<S>& x) {
  return x.m.rowwise().mean();
}

}  // namespace ovdet::nn
