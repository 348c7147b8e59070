#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "pmil/error.hpp"
#include "pmil/rng.hpp"

// Small dense/conv layer stack with hand-derived backward passes. Training
// runs in float; the same templates instantiate in double so analytic
// gradients can be checked against central finite differences.
namespace pmil::nn {

template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    v.assign(n, T(0));
  }

  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  size_t numel() const { return v.size(); }
  bool allfinite() const {
    for (const T& x : v) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }
};

template <typename T>
struct ParamBlock {
  std::string name;
  std::vector<T> w;
  std::vector<T> g;

  void resize(size_t n) {
    w.assign(n, T(0));
    g.assign(n, T(0));
  }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

// ---------------------------------------------------------------------------
// Layers. Each forward caches what backward needs; backward accumulates into
// parameter gradients and returns the input gradient.
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
 public:
  Conv2d(std::string name, int cin, int cout, int k, int stride, int pad)
      : cin_(cin), cout_(cout), k_(k), stride_(stride), pad_(pad) {
    weight_.name = name + ".w";
    bias_.name = name + ".b";
    weight_.resize(static_cast<size_t>(cout) * cin * k * k);
    bias_.resize(static_cast<size_t>(cout));
  }

  void init(Rng& rng) {
    const double stddev = std::sqrt(2.0 / (cin_ * k_ * k_));
    for (T& w : weight_.w) w = static_cast<T>(rng.normal() * stddev);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    require(x.shape.size() == 4 && x.dim(1) == cin_, "Conv2d: input shape");
    x_ = x;
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    oh_ = (h + 2 * pad_ - k_) / stride_ + 1;
    ow_ = (w + 2 * pad_ - k_) / stride_ + 1;
    require(oh_ > 0 && ow_ > 0, "Conv2d: output collapsed to zero");
    Tensor<T> y({n, cout_, oh_, ow_});
    const int kdim = cin_ * k_ * k_;
    const int m = oh_ * ow_;
    std::vector<T> col(static_cast<size_t>(kdim) * m);
    ConstRowMap<T> wmap(weight_.w.data(), cout_, kdim);
    for (int s = 0; s < n; ++s) {
      im2col(x.v.data() + static_cast<size_t>(s) * cin_ * h * w, h, w,
             col.data());
      ConstRowMap<T> cmap(col.data(), kdim, m);
      RowMap<T> ymap(y.v.data() + static_cast<size_t>(s) * cout_ * m, cout_, m);
      ymap.noalias() = wmap * cmap;
      for (int c = 0; c < cout_; ++c) ymap.row(c).array() += bias_.w[c];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int n = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
    const int kdim = cin_ * k_ * k_;
    const int m = oh_ * ow_;
    Tensor<T> dx(x_.shape);
    std::vector<T> col(static_cast<size_t>(kdim) * m);
    std::vector<T> dcol(static_cast<size_t>(kdim) * m);
    ConstRowMap<T> wmap(weight_.w.data(), cout_, kdim);
    RowMap<T> dwmap(weight_.g.data(), cout_, kdim);
    for (int s = 0; s < n; ++s) {
      // im2col is recomputed instead of cached; the GEMMs dominate anyway.
      im2col(x_.v.data() + static_cast<size_t>(s) * cin_ * h * w, h, w,
             col.data());
      ConstRowMap<T> cmap(col.data(), kdim, m);
      ConstRowMap<T> dymap(dy.v.data() + static_cast<size_t>(s) * cout_ * m,
                           cout_, m);
      dwmap.noalias() += dymap * cmap.transpose();
      for (int c = 0; c < cout_; ++c) bias_.g[c] += dymap.row(c).sum();
      RowMap<T> dcmap(dcol.data(), kdim, m);
      dcmap.noalias() = wmap.transpose() * dymap;
      col2im(dcol.data(), h, w,
             dx.v.data() + static_cast<size_t>(s) * cin_ * h * w);
    }
    return dx;
  }

  std::vector<ParamBlock<T>*> params() { return {&weight_, &bias_}; }

 private:
  void im2col(const T* x, int h, int w, T* col) const {
    const int m = oh_ * ow_;
    int kk = 0;
    for (int c = 0; c < cin_; ++c) {
      const T* xc = x + static_cast<size_t>(c) * h * w;
      for (int ki = 0; ki < k_; ++ki) {
        for (int kj = 0; kj < k_; ++kj, ++kk) {
          T* crow = col + static_cast<size_t>(kk) * m;
          for (int oy = 0; oy < oh_; ++oy) {
            const int iy = oy * stride_ - pad_ + ki;
            if (iy < 0 || iy >= h) {
              for (int ox = 0; ox < ow_; ++ox) crow[oy * ow_ + ox] = T(0);
              continue;
            }
            for (int ox = 0; ox < ow_; ++ox) {
              const int ix = ox * stride_ - pad_ + kj;
              crow[oy * ow_ + ox] =
                  (ix >= 0 && ix < w) ? xc[iy * w + ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const T* dcol, int h, int w, T* dx) const {
    const int m = oh_ * ow_;
    int kk = 0;
    for (int c = 0; c < cin_; ++c) {
      T* xc = dx + static_cast<size_t>(c) * h * w;
      for (int ki = 0; ki < k_; ++ki) {
        for (int kj = 0; kj < k_; ++kj, ++kk) {
          const T* crow = dcol + static_cast<size_t>(kk) * m;
          for (int oy = 0; oy < oh_; ++oy) {
            const int iy = oy * stride_ - pad_ + ki;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < ow_; ++ox) {
              const int ix = ox * stride_ - pad_ + kj;
              if (ix >= 0 && ix < w) xc[iy * w + ix] += crow[oy * ow_ + ox];
            }
          }
        }
      }
    }
  }

  int cin_, cout_, k_, stride_, pad_;
  int oh_ = 0, ow_ = 0;
  Tensor<T> x_;
  ParamBlock<T> weight_, bias_;
};

template <typename T>
class Linear {
 public:
  Linear(std::string name, int in, int out) : in_(in), out_(out) {
    weight_.name = name + ".w";
    bias_.name = name + ".b";
    weight_.resize(static_cast<size_t>(out) * in);
    bias_.resize(static_cast<size_t>(out));
  }

  void init(Rng& rng) {
    const double stddev = std::sqrt(2.0 / in_);
    for (T& w : weight_.w) w = static_cast<T>(rng.normal() * stddev);
  }

  // x: [N, in] -> [N, out]
  Tensor<T> forward(const Tensor<T>& x) {
    require(x.shape.size() == 2 && x.dim(1) == in_, "Linear: input shape");
    x_ = x;
    const int n = x.dim(0);
    Tensor<T> y({n, out_});
    ConstRowMap<T> xmap(x.v.data(), n, in_);
    ConstRowMap<T> wmap(weight_.w.data(), out_, in_);
    RowMap<T> ymap(y.v.data(), n, out_);
    ymap.noalias() = xmap * wmap.transpose();
    ymap.rowwise() +=
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias_.w.data(),
                                                              out_);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int n = x_.dim(0);
    Tensor<T> dx(x_.shape);
    ConstRowMap<T> xmap(x_.v.data(), n, in_);
    ConstRowMap<T> dymap(dy.v.data(), n, out_);
    ConstRowMap<T> wmap(weight_.w.data(), out_, in_);
    RowMap<T> dwmap(weight_.g.data(), out_, in_);
    RowMap<T> dxmap(dx.v.data(), n, in_);
    dwmap.noalias() += dymap.transpose() * xmap;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dbmap(bias_.g.data(), out_);
    dbmap += dymap.colwise().sum();
    dxmap.noalias() = dymap * wmap;
    return dx;
  }

  std::vector<ParamBlock<T>*> params() { return {&weight_, &bias_}; }

 private:
  int in_, out_;
  Tensor<T> x_;
  ParamBlock<T> weight_, bias_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    y_ = x;
    for (T& v : y_.v) v = v > T(0) ? v : T(0);
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx = dy;
    for (size_t i = 0; i < dx.v.size(); ++i) {
      if (y_.v[i] <= T(0)) dx.v[i] = T(0);
    }
    return dx;
  }

 private:
  Tensor<T> y_;
};

template <typename T>
class Sigmoid {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    y_ = x;
    for (T& v : y_.v) v = T(1) / (T(1) + std::exp(-v));
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx = dy;
    for (size_t i = 0; i < dx.v.size(); ++i) {
      dx.v[i] *= y_.v[i] * (T(1) - y_.v[i]);
    }
    return dx;
  }

 private:
  Tensor<T> y_;
};

// Nearest-neighbor 2x upsampling.
template <typename T>
class Upsample2x {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    in_shape_ = x.shape;
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> y({n, c, 2 * h, 2 * w});
    for (int s = 0; s < n * c; ++s) {
      const T* xs = x.v.data() + static_cast<size_t>(s) * h * w;
      T* ys = y.v.data() + static_cast<size_t>(s) * 4 * h * w;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          const T v = xs[i * w + j];
          T* r0 = ys + (2 * i) * 2 * w + 2 * j;
          T* r1 = r0 + 2 * w;
          r0[0] = r0[1] = r1[0] = r1[1] = v;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(in_shape_);
    const int n = in_shape_[0], c = in_shape_[1], h = in_shape_[2],
              w = in_shape_[3];
    for (int s = 0; s < n * c; ++s) {
      const T* dys = dy.v.data() + static_cast<size_t>(s) * 4 * h * w;
      T* dxs = dx.v.data() + static_cast<size_t>(s) * h * w;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          const T* r0 = dys + (2 * i) * 2 * w + 2 * j;
          const T* r1 = r0 + 2 * w;
          dxs[i * w + j] = r0[0] + r0[1] + r1[0] + r1[1];
        }
      }
    }
    return dx;
  }

 private:
  std::vector<int> in_shape_;
};

// Inverted dropout; identity when inactive.
template <typename T>
class Dropout {
 public:
  explicit Dropout(double p) : p_(p) {}

  Tensor<T> forward(const Tensor<T>& x, bool active, Rng& rng) {
    if (!active || p_ <= 0.0) {
      active_ = false;
      return x;
    }
    active_ = true;
    mask_.assign(x.v.size(), T(0));
    const T scale = static_cast<T>(1.0 / (1.0 - p_));
    Tensor<T> y = x;
    for (size_t i = 0; i < y.v.size(); ++i) {
      if (rng.uniform() >= p_) {
        mask_[i] = scale;
        y.v[i] *= scale;
      } else {
        y.v[i] = T(0);
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (!active_) return dy;
    Tensor<T> dx = dy;
    for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] *= mask_[i];
    return dx;
  }

 private:
  double p_;
  bool active_ = false;
  std::vector<T> mask_;
};

// ---------------------------------------------------------------------------
// Shape plumbing shared by the models.
// ---------------------------------------------------------------------------

// Stacks b below a along the batch dimension.
template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape.size() == b.shape.size(), "concat_batch: rank mismatch");
  for (size_t i = 1; i < a.shape.size(); ++i) {
    require(a.shape[i] == b.shape[i], "concat_batch: shape mismatch");
  }
  std::vector<int> s = a.shape;
  s[0] += b.shape[0];
  Tensor<T> out(s);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
  return out;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int begin, int count) {
  std::vector<int> s = x.shape;
  s[0] = count;
  Tensor<T> out(s);
  const size_t stride = x.numel() / x.dim(0);
  std::copy(x.v.begin() + begin * stride, x.v.begin() + (begin + count) * stride,
            out.v.begin());
  return out;
}

// Concatenates along the channel dimension of [N, C, H, W] tensors.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: shape mismatch");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2),
            w = a.dim(3);
  Tensor<T> out({n, ca + cb, h, w});
  const size_t plane = static_cast<size_t>(h) * w;
  for (int s = 0; s < n; ++s) {
    std::copy(a.v.begin() + s * ca * plane, a.v.begin() + (s + 1) * ca * plane,
              out.v.begin() + s * (ca + cb) * plane);
    std::copy(b.v.begin() + s * cb * plane, b.v.begin() + (s + 1) * cb * plane,
              out.v.begin() + (s * (ca + cb) + ca) * plane);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& d, int ca) {
  const int n = d.dim(0), c = d.dim(1), h = d.dim(2), w = d.dim(3);
  const int cb = c - ca;
  Tensor<T> a({n, ca, h, w}), b({n, cb, h, w});
  const size_t plane = static_cast<size_t>(h) * w;
  for (int s = 0; s < n; ++s) {
    std::copy(d.v.begin() + s * c * plane, d.v.begin() + (s * c + ca) * plane,
              a.v.begin() + s * ca * plane);
    std::copy(d.v.begin() + (s * c + ca) * plane,
              d.v.begin() + (s + 1) * c * plane, b.v.begin() + s * cb * plane);
  }
  return {std::move(a), std::move(b)};
}

// Broadcasts [N, D] to [N, D, h, w].
template <typename T>
Tensor<T> tile_to_map(const Tensor<T>& x, int h, int w) {
  const int n = x.dim(0), d = x.dim(1);
  Tensor<T> out({n, d, h, w});
  const size_t plane = static_cast<size_t>(h) * w;
  for (int s = 0; s < n; ++s) {
    for (int c = 0; c < d; ++c) {
      const T v = x.v[static_cast<size_t>(s) * d + c];
      T* p = out.v.data() + (static_cast<size_t>(s) * d + c) * plane;
      std::fill(p, p + plane, v);
    }
  }
  return out;
}

// Backward of tile_to_map: sums over the spatial plane.
template <typename T>
Tensor<T> sum_spatial(const Tensor<T>& d) {
  const int n = d.dim(0), c = d.dim(1), h = d.dim(2), w = d.dim(3);
  Tensor<T> out({n, c});
  const size_t plane = static_cast<size_t>(h) * w;
  for (int s = 0; s < n * c; ++s) {
    const T* p = d.v.data() + static_cast<size_t>(s) * plane;
    T acc = T(0);
    for (size_t i = 0; i < plane; ++i) acc += p[i];
    out.v[s] = acc;
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tensor<T> x, std::vector<int> shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  require(n == x.numel(), "reshape: numel mismatch");
  x.shape = std::move(shape);
  return x;
}

// Row-wise softmax of [N, K].
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape);
  for (int i = 0; i < n; ++i) {
    const T* row = logits.v.data() + static_cast<size_t>(i) * k;
    T* orow = out.v.data() + static_cast<size_t>(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < k; ++j) orow[j] /= sum;
  }
  return out;
}

// dL/dlogits from dL/dprobs through row-wise softmax.
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& probs, const Tensor<T>& dp) {
  const int n = probs.dim(0), k = probs.dim(1);
  Tensor<T> dlogits(probs.shape);
  for (int i = 0; i < n; ++i) {
    const T* p = probs.v.data() + static_cast<size_t>(i) * k;
    const T* d = dp.v.data() + static_cast<size_t>(i) * k;
    T* dl = dlogits.v.data() + static_cast<size_t>(i) * k;
    T dot = T(0);
    for (int j = 0; j < k; ++j) dot += p[j] * d[j];
    for (int j = 0; j < k; ++j) dl[j] = p[j] * (d[j] - dot);
  }
  return dlogits;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  Adam(std::vector<ParamBlock<T>*> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
        eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->w.size(), T(0));
      v_.emplace_back(p->w.size(), T(0));
    }
  }

  void zero_grad() {
    for (auto* p : params_) std::fill(p->g.begin(), p->g.end(), T(0));
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t b = 0; b < params_.size(); ++b) {
      auto& w = params_[b]->w;
      auto& g = params_[b]->g;
      auto& m = m_[b];
      auto& v = v_[b];
      for (size_t i = 0; i < w.size(); ++i) {
        m[i] = static_cast<T>(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
        v[i] = static_cast<T>(beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i]);
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        w[i] -= static_cast<T>(lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  long long step_count() const { return t_; }

  // Flat views used by checkpointing.
  std::vector<std::vector<T>>& moment1() { return m_; }
  std::vector<std::vector<T>>& moment2() { return v_; }
  void set_step_count(long long t) { t_ = t; }

 private:
  std::vector<ParamBlock<T>*> params_;
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

}  // namespace pmil::nn
