// aseg: NCHW tensor type and reverse-mode autodiff tape.
//
// Tensors are plain value containers; differentiable ops are free functions
// that take the Tape recording the current forward pass. Backward replays the
// tape in reverse, accumulating into .grad of every tensor that requires it.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace aseg {

template <typename T>
struct Tensor;

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
struct Tensor {
  int n = 1, c = 1, h = 1, w = 1;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily, same size as data when present
  bool requires_grad = false;

  std::size_t size() const { return data.size(); }
  bool is_scalar() const { return n == 1 && c == 1 && h == 1 && w == 1; }

  T& at(int in, int ic, int iy, int ix) {
    return data[((std::size_t(in) * c + ic) * h + iy) * w + ix];
  }
  T at(int in, int ic, int iy, int ix) const {
    return data[((std::size_t(in) * c + ic) * h + iy) * w + ix];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() { grad.assign(data.size(), T(0)); }

  std::string shape_str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }

  static TensorPtr<T> make(int n, int c, int h, int w, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<T>>();
    t->n = n; t->c = c; t->h = h; t->w = w;
    t->data.assign(std::size_t(n) * c * h * w, T(0));
    t->requires_grad = requires_grad;
    return t;
  }
  static TensorPtr<T> scalar(T v, bool requires_grad = false) {
    auto t = make(1, 1, 1, 1, requires_grad);
    t->data[0] = v;
    return t;
  }
  static TensorPtr<T> from(int n, int c, int h, int w, std::vector<T> values,
                           bool requires_grad = false) {
    auto t = make(n, c, h, w, requires_grad);
    if (values.size() != t->size())
      throw std::invalid_argument("Tensor::from: value count " +
                                  std::to_string(values.size()) + " != shape " +
                                  t->shape_str());
    t->data = std::move(values);
    return t;
  }
};

inline void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

template <typename T>
void check_same_shape(const std::string& op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n != b.n || a.c != b.c || a.h != b.h || a.w != b.w)
    shape_error(op, "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// Records one backward closure per forward op, replayed in reverse order.
template <typename T>
class Tape {
 public:
  bool recording = true;

  void push(std::function<void()> fn) {
    if (recording) records_.push_back(std::move(fn));
  }

  void backward(const TensorPtr<T>& loss) {
    if (!loss->is_scalar())
      shape_error("backward", "loss must be scalar, got " + loss->shape_str());
    loss->ensure_grad();
    loss->grad[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }

 private:
  std::vector<std::function<void()>> records_;
};

enum class Pad { Same, Valid };

// ---------------------------------------------------------------------------
// im2col / col2im (dilated, strided)

template <typename T>
void im2col(const T* src, int c, int h, int w, int k, int stride, int dilation,
            int pad, int oh, int ow, T* col) {
  // col has shape (c*k*k) x (oh*ow), row-major
  for (int ic = 0; ic < c; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (std::size_t(ic) * k * k + ky * k + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky * dilation;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = T(0);
            continue;
          }
          const T* srow = src + (std::size_t(ic) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx * dilation;
            row[oy * ow + ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int c, int h, int w, int k, int stride, int dilation,
            int pad, int oh, int ow, T* dst /* accumulated into */) {
  for (int ic = 0; ic < c; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (std::size_t(ic) * k * k + ky * k + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky * dilation;
          if (iy < 0 || iy >= h) continue;
          T* drow = dst + (std::size_t(ic) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx * dilation;
            if (ix >= 0 && ix < w) drow[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ---------------------------------------------------------------------------
// conv2d: weight Cout x Cin x k x k

template <typename T>
TensorPtr<T> conv2d(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias, int stride = 1, int dilation = 1,
                    Pad pad = Pad::Same) {
  const int cout = weight->n, cin = weight->c, k = weight->h;
  if (weight->h != weight->w) shape_error("conv2d", "non-square kernel");
  if (dilation < 1) shape_error("conv2d", "dilation must be >= 1");
  if (x->c != cin)
    shape_error("conv2d", "input channels " + std::to_string(x->c) +
                              " != weight Cin " + std::to_string(cin) +
                              " (input " + x->shape_str() + ", weight " +
                              weight->shape_str() + ")");
  if (bias && (int)bias->size() != cout)
    shape_error("conv2d", "bias size != Cout");

  const int span = (k - 1) * dilation + 1;
  const int p = pad == Pad::Same ? ((k - 1) * dilation) / 2 : 0;
  const int oh = (x->h + 2 * p - span) / stride + 1;
  const int ow = (x->w + 2 * p - span) / stride + 1;
  if (oh <= 0 || ow <= 0)
    shape_error("conv2d", "kernel span " + std::to_string(span) +
                              " exceeds padded input " + x->shape_str());

  auto y = Tensor<T>::make(x->n, cout, oh, ow);
  const int ckk = cin * k * k;
  std::vector<T> col(std::size_t(ckk) * oh * ow);
  ConstMatMap<T> W(weight->data.data(), cout, ckk);
  for (int in = 0; in < x->n; ++in) {
    im2col(x->data.data() + std::size_t(in) * cin * x->h * x->w, cin, x->h, x->w,
           k, stride, dilation, p, oh, ow, col.data());
    ConstMatMap<T> C(col.data(), ckk, oh * ow);
    MatMap<T> Y(y->data.data() + std::size_t(in) * cout * oh * ow, cout, oh * ow);
    Y.noalias() = W * C;
  }
  if (bias) {
    for (int in = 0; in < x->n; ++in)
      for (int ic = 0; ic < cout; ++ic) {
        T b = bias->data[ic];
        T* base = y->data.data() + (std::size_t(in) * cout + ic) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) base[i] += b;
      }
  }

  y->requires_grad = x->requires_grad || weight->requires_grad ||
                     (bias && bias->requires_grad);
  if (y->requires_grad) {
    int xh = x->h, xw = x->w, xn = x->n;
    tape.push([=]() {
      const int ckk2 = cin * k * k;
      std::vector<T> colbuf(std::size_t(ckk2) * oh * ow);
      std::vector<T> dcol(std::size_t(ckk2) * oh * ow);
      if (weight->requires_grad) weight->ensure_grad();
      if (x->requires_grad) x->ensure_grad();
      ConstMatMap<T> W2(weight->data.data(), cout, ckk2);
      for (int in = 0; in < xn; ++in) {
        ConstMatMap<T> dY(y->grad.data() + std::size_t(in) * cout * oh * ow, cout,
                          oh * ow);
        if (weight->requires_grad) {
          im2col(x->data.data() + std::size_t(in) * cin * xh * xw, cin, xh, xw, k,
                 stride, dilation, p, oh, ow, colbuf.data());
          ConstMatMap<T> C(colbuf.data(), ckk2, oh * ow);
          MatMap<T> dW(weight->grad.data(), cout, ckk2);
          dW.noalias() += dY * C.transpose();
        }
        if (x->requires_grad) {
          MatMap<T> dC(dcol.data(), ckk2, oh * ow);
          dC.noalias() = W2.transpose() * dY;
          col2im(dcol.data(), cin, xh, xw, k, stride, dilation, p, oh, ow,
                 x->grad.data() + std::size_t(in) * cin * xh * xw);
        }
      }
      if (bias && bias->requires_grad) {
        bias->ensure_grad();
        for (int in = 0; in < xn; ++in)
          for (int ic = 0; ic < cout; ++ic) {
            const T* base = y->grad.data() + (std::size_t(in) * cout + ic) * oh * ow;
            T s = T(0);
            for (int i = 0; i < oh * ow; ++i) s += base[i];
            bias->grad[ic] += s;
          }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv_transpose2d: weight Cin x Cout x k x k, kernel fixed to 2*stride,
// padding stride/2, so output spatial = input spatial * stride.

template <typename T>
TensorPtr<T> conv_transpose2d(Tape<T>& tape, const TensorPtr<T>& x,
                              const TensorPtr<T>& weight, const TensorPtr<T>& bias,
                              int stride) {
  if (stride != 2 && stride != 4)
    shape_error("conv_transpose2d", "unsupported stride " + std::to_string(stride));
  const int cin = weight->n, cout = weight->c, k = weight->h;
  if (k != 2 * stride)
    shape_error("conv_transpose2d", "kernel must be 2*stride");
  if (x->c != cin)
    shape_error("conv_transpose2d", "input channels " + std::to_string(x->c) +
                                        " != weight Cin " + std::to_string(cin));
  const int p = stride / 2 + (stride == 2 ? 0 : 0);  // pad = stride/2? see below
  // out = (in-1)*stride - 2*pad + k ; with k = 2*stride we need pad = stride/2
  const int padv = stride / 2;
  const int oh = (x->h - 1) * stride - 2 * padv + k;
  const int ow = (x->w - 1) * stride - 2 * padv + k;
  (void)p;

  auto y = Tensor<T>::make(x->n, cout, oh, ow);
  // Forward of deconv == backward-data of a conv mapping y -> x, i.e. col2im
  // of W^T * x. Treat x as the "output gradient" of that conv.
  const int ckk = cout * k * k;
  std::vector<T> col(std::size_t(ckk) * x->h * x->w);
  ConstMatMap<T> W(weight->data.data(), cin, ckk);
  for (int in = 0; in < x->n; ++in) {
    ConstMatMap<T> X(x->data.data() + std::size_t(in) * cin * x->h * x->w, cin,
                     x->h * x->w);
    MatMap<T> C(col.data(), ckk, x->h * x->w);
    C.noalias() = W.transpose() * X;
    col2im(col.data(), cout, oh, ow, k, stride, 1, padv, x->h, x->w,
           y->data.data() + std::size_t(in) * cout * oh * ow);
  }
  if (bias) {
    if ((int)bias->size() != cout) shape_error("conv_transpose2d", "bias size != Cout");
    for (int in = 0; in < x->n; ++in)
      for (int ic = 0; ic < cout; ++ic) {
        T b = bias->data[ic];
        T* base = y->data.data() + (std::size_t(in) * cout + ic) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) base[i] += b;
      }
  }

  y->requires_grad = x->requires_grad || weight->requires_grad ||
                     (bias && bias->requires_grad);
  if (y->requires_grad) {
    int xh = x->h, xw = x->w, xn = x->n;
    tape.push([=]() {
      // dx = conv(dy, W) with stride/pad of the dual conv; dW from (dy, x).
      const int ckk2 = cout * k * k;
      std::vector<T> colbuf(std::size_t(ckk2) * xh * xw);
      if (x->requires_grad) x->ensure_grad();
      if (weight->requires_grad) weight->ensure_grad();
      ConstMatMap<T> W2(weight->data.data(), cin, ckk2);
      for (int in = 0; in < xn; ++in) {
        im2col(y->grad.data() + std::size_t(in) * cout * oh * ow, cout, oh, ow, k,
               stride, 1, padv, xh, xw, colbuf.data());
        ConstMatMap<T> C(colbuf.data(), ckk2, xh * xw);
        if (x->requires_grad) {
          MatMap<T> dX(x->grad.data() + std::size_t(in) * cin * xh * xw, cin,
                       xh * xw);
          dX.noalias() += W2 * C;
        }
        if (weight->requires_grad) {
          ConstMatMap<T> X(x->data.data() + std::size_t(in) * cin * xh * xw, cin,
                           xh * xw);
          MatMap<T> dW(weight->grad.data(), cin, ckk2);
          dW.noalias() += X * C.transpose();
        }
      }
      if (bias && bias->requires_grad) {
        bias->ensure_grad();
        for (int in = 0; in < xn; ++in)
          for (int ic = 0; ic < cout; ++ic) {
            const T* base = y->grad.data() + (std::size_t(in) * cout + ic) * oh * ow;
            T s = T(0);
            for (int i = 0; i < oh * ow; ++i) s += base[i];
            bias->grad[ic] += s;
          }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// batch_norm

template <typename T>
struct BnStats {
  std::vector<T> running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.9);
};

template <typename T>
TensorPtr<T> batch_norm(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, BnStats<T>& stats, bool training) {
  const int c = x->c;
  if ((int)gamma->size() != c || (int)beta->size() != c)
    shape_error("batch_norm", "gamma/beta length " + std::to_string(gamma->size()) +
                                  " != C " + std::to_string(c));
  if ((int)stats.running_mean.size() != c) {
    stats.running_mean.assign(c, T(0));
    stats.running_var.assign(c, T(1));
  }
  const std::size_t plane = std::size_t(x->h) * x->w;
  const std::size_t cnt = std::size_t(x->n) * plane;

  auto y = Tensor<T>::make(x->n, c, x->h, x->w);
  auto mean = std::make_shared<std::vector<T>>(c, T(0));
  auto invstd = std::make_shared<std::vector<T>>(c, T(0));
  auto xhat = std::make_shared<std::vector<T>>();

  if (training) {
    for (int ic = 0; ic < c; ++ic) {
      T m = T(0), v = T(0);
      for (int in = 0; in < x->n; ++in) {
        const T* base = x->data.data() + (std::size_t(in) * c + ic) * plane;
        for (std::size_t i = 0; i < plane; ++i) m += base[i];
      }
      m /= T(cnt);
      for (int in = 0; in < x->n; ++in) {
        const T* base = x->data.data() + (std::size_t(in) * c + ic) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          T d = base[i] - m;
          v += d * d;
        }
      }
      v /= T(cnt);
      (*mean)[ic] = m;
      (*invstd)[ic] = T(1) / std::sqrt(v + stats.eps);
      stats.running_mean[ic] = stats.momentum * stats.running_mean[ic] + (T(1) - stats.momentum) * m;
      stats.running_var[ic] = stats.momentum * stats.running_var[ic] + (T(1) - stats.momentum) * v;
    }
  } else {
    for (int ic = 0; ic < c; ++ic) {
      (*mean)[ic] = stats.running_mean[ic];
      (*invstd)[ic] = T(1) / std::sqrt(stats.running_var[ic] + stats.eps);
    }
  }

  xhat->resize(x->size());
  for (int in = 0; in < x->n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const T* src = x->data.data() + (std::size_t(in) * c + ic) * plane;
      T* xh = xhat->data() + (std::size_t(in) * c + ic) * plane;
      T* dst = y->data.data() + (std::size_t(in) * c + ic) * plane;
      T m = (*mean)[ic], is = (*invstd)[ic], g = gamma->data[ic], b = beta->data[ic];
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (src[i] - m) * is;
        dst[i] = g * xh[i] + b;
      }
    }

  y->requires_grad = x->requires_grad || gamma->requires_grad || beta->requires_grad;
  if (y->requires_grad) {
    int xn = x->n;
    tape.push([=]() {
      if (gamma->requires_grad) gamma->ensure_grad();
      if (beta->requires_grad) beta->ensure_grad();
      if (x->requires_grad) x->ensure_grad();
      for (int ic = 0; ic < c; ++ic) {
        T g = gamma->data[ic], is = (*invstd)[ic];
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (int in = 0; in < xn; ++in) {
          const T* dy = y->grad.data() + (std::size_t(in) * c + ic) * plane;
          const T* xh = xhat->data() + (std::size_t(in) * c + ic) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * xh[i];
          }
        }
        if (gamma->requires_grad) gamma->grad[ic] += sum_dy_xhat;
        if (beta->requires_grad) beta->grad[ic] += sum_dy;
        if (!x->requires_grad) continue;
        if (training) {
          T inv_cnt = T(1) / T(cnt);
          for (int in = 0; in < xn; ++in) {
            const T* dy = y->grad.data() + (std::size_t(in) * c + ic) * plane;
            const T* xh = xhat->data() + (std::size_t(in) * c + ic) * plane;
            T* dx = x->grad.data() + (std::size_t(in) * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i)
              dx[i] += g * is * (dy[i] - inv_cnt * sum_dy - xh[i] * inv_cnt * sum_dy_xhat);
          }
        } else {
          for (int in = 0; in < xn; ++in) {
            const T* dy = y->grad.data() + (std::size_t(in) * c + ic) * plane;
            T* dx = x->grad.data() + (std::size_t(in) * c + ic) * plane;
            for (std::size_t i = 0; i < plane; ++i) dx[i] += g * is * dy[i];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& x) {
  auto y = Tensor<T>::make(x->n, x->c, x->h, x->w);
  for (std::size_t i = 0; i < x->size(); ++i)
    y->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
  y->requires_grad = x->requires_grad;
  if (y->requires_grad)
    tape.push([=]() {
      x->ensure_grad();
      for (std::size_t i = 0; i < x->size(); ++i)
        if (x->data[i] > T(0)) x->grad[i] += y->grad[i];
    });
  return y;
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>& tape, const TensorPtr<T>& x) {
  auto y = Tensor<T>::make(x->n, x->c, x->h, x->w);
  for (std::size_t i = 0; i < x->size(); ++i) {
    T v = x->data[i];
    y->data[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                           : std::exp(v) / (T(1) + std::exp(v));
  }
  y->requires_grad = x->requires_grad;
  if (y->requires_grad)
    tape.push([=]() {
      x->ensure_grad();
      for (std::size_t i = 0; i < x->size(); ++i)
        x->grad[i] += y->grad[i] * y->data[i] * (T(1) - y->data[i]);
    });
  return y;
}

// softmax over the channel axis, per pixel, with max subtraction
template <typename T>
TensorPtr<T> softmax_channels(Tape<T>& tape, const TensorPtr<T>& x) {
  auto y = Tensor<T>::make(x->n, x->c, x->h, x->w);
  const std::size_t plane = std::size_t(x->h) * x->w;
  for (int in = 0; in < x->n; ++in)
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int ic = 0; ic < x->c; ++ic)
        mx = std::max(mx, x->data[(std::size_t(in) * x->c + ic) * plane + i]);
      T sum = T(0);
      for (int ic = 0; ic < x->c; ++ic) {
        std::size_t idx = (std::size_t(in) * x->c + ic) * plane + i;
        y->data[idx] = std::exp(x->data[idx] - mx);
        sum += y->data[idx];
      }
      for (int ic = 0; ic < x->c; ++ic)
        y->data[(std::size_t(in) * x->c + ic) * plane + i] /= sum;
    }
  y->requires_grad = x->requires_grad;
  if (y->requires_grad) {
    int xc = x->c, xn = x->n;
    tape.push([=]() {
      x->ensure_grad();
      for (int in = 0; in < xn; ++in)
        for (std::size_t i = 0; i < plane; ++i) {
          T dot = T(0);
          for (int ic = 0; ic < xc; ++ic) {
            std::size_t idx = (std::size_t(in) * xc + ic) * plane + i;
            dot += y->grad[idx] * y->data[idx];
          }
          for (int ic = 0; ic < xc; ++ic) {
            std::size_t idx = (std::size_t(in) * xc + ic) * plane + i;
            x->grad[idx] += y->data[idx] * (y->grad[idx] - dot);
          }
        }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> global_avg_pool(Tape<T>& tape, const TensorPtr<T>& x) {
  auto y = Tensor<T>::make(x->n, x->c, 1, 1);
  const std::size_t plane = std::size_t(x->h) * x->w;
  for (int in = 0; in < x->n; ++in)
    for (int ic = 0; ic < x->c; ++ic) {
      const T* base = x->data.data() + (std::size_t(in) * x->c + ic) * plane;
      T s = T(0);
      for (std::size_t i = 0; i < plane; ++i) s += base[i];
      y->data[std::size_t(in) * x->c + ic] = s / T(plane);
    }
  y->requires_grad = x->requires_grad;
  if (y->requires_grad) {
    int xn = x->n, xc = x->c;
    tape.push([=]() {
      x->ensure_grad();
      for (int in = 0; in < xn; ++in)
        for (int ic = 0; ic < xc; ++ic) {
          T g = y->grad[std::size_t(in) * xc + ic] / T(plane);
          T* base = x->grad.data() + (std::size_t(in) * xc + ic) * plane;
          for (std::size_t i = 0; i < plane; ++i) base[i] += g;
        }
    });
  }
  return y;
}

// bilinear interpolation, align-corners=false convention
template <typename T>
TensorPtr<T> bilinear_upsample(Tape<T>& tape, const TensorPtr<T>& x, int factor) {
  if (factor < 1) shape_error("bilinear_upsample", "factor must be >= 1");
  if (factor == 1) {
    auto y = Tensor<T>::make(x->n, x->c, x->h, x->w);
    y->data = x->data;
    y->requires_grad = x->requires_grad;
    if (y->requires_grad)
      tape.push([=]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += y->grad[i];
      });
    return y;
  }
  const int oh = x->h * factor, ow = x->w * factor;
  auto y = Tensor<T>::make(x->n, x->c, oh, ow);
  // Each output pixel samples 4 input taps with fixed weights.
  struct Taps { int y0, y1, x0, x1; T wy, wx; };
  auto taps = std::make_shared<std::vector<Taps>>(std::size_t(oh) * ow);
  const T scale = T(1) / T(factor);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      T sy = (T(oy) + T(0.5)) * scale - T(0.5);
      T sx = (T(ox) + T(0.5)) * scale - T(0.5);
      int y0 = (int)std::floor(sy), x0 = (int)std::floor(sx);
      T wy = sy - T(y0), wx = sx - T(x0);
      Taps& t = (*taps)[std::size_t(oy) * ow + ox];
      t.y0 = std::min(std::max(y0, 0), x->h - 1);
      t.y1 = std::min(std::max(y0 + 1, 0), x->h - 1);
      t.x0 = std::min(std::max(x0, 0), x->w - 1);
      t.x1 = std::min(std::max(x0 + 1, 0), x->w - 1);
      t.wy = wy;
      t.wx = wx;
    }
  const std::size_t iplane = std::size_t(x->h) * x->w;
  const std::size_t oplane = std::size_t(oh) * ow;
  for (int in = 0; in < x->n; ++in)
    for (int ic = 0; ic < x->c; ++ic) {
      const T* src = x->data.data() + (std::size_t(in) * x->c + ic) * iplane;
      T* dst = y->data.data() + (std::size_t(in) * x->c + ic) * oplane;
      for (std::size_t i = 0; i < oplane; ++i) {
        const Taps& t = (*taps)[i];
        T top = src[t.y0 * x->w + t.x0] * (T(1) - t.wx) + src[t.y0 * x->w + t.x1] * t.wx;
        T bot = src[t.y1 * x->w + t.x0] * (T(1) - t.wx) + src[t.y1 * x->w + t.x1] * t.wx;
        dst[i] = top * (T(1) - t.wy) + bot * t.wy;
      }
    }
  y->requires_grad = x->requires_grad;
  if (y->requires_grad) {
    int xn = x->n, xc = x->c, xw = x->w;
    tape.push([=]() {
      x->ensure_grad();
      for (int in = 0; in < xn; ++in)
        for (int ic = 0; ic < xc; ++ic) {
          T* dsrc = x->grad.data() + (std::size_t(in) * xc + ic) * iplane;
          const T* dy = y->grad.data() + (std::size_t(in) * xc + ic) * oplane;
          for (std::size_t i = 0; i < oplane; ++i) {
            const Taps& t = (*taps)[i];
            T g = dy[i];
            dsrc[t.y0 * xw + t.x0] += g * (T(1) - t.wy) * (T(1) - t.wx);
            dsrc[t.y0 * xw + t.x1] += g * (T(1) - t.wy) * t.wx;
            dsrc[t.y1 * xw + t.x0] += g * t.wy * (T(1) - t.wx);
            dsrc[t.y1 * xw + t.x1] += g * t.wy * t.wx;
          }
        }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> concat_channels(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->n != b->n || a->h != b->h || a->w != b->w)
    shape_error("concat_channels",
                "N/H/W mismatch " + a->shape_str() + " vs " + b->shape_str());
  auto y = Tensor<T>::make(a->n, a->c + b->c, a->h, a->w);
  const std::size_t plane = std::size_t(a->h) * a->w;
  for (int in = 0; in < a->n; ++in) {
    std::copy(a->data.begin() + std::size_t(in) * a->c * plane,
              a->data.begin() + std::size_t(in + 1) * a->c * plane,
              y->data.begin() + std::size_t(in) * (a->c + b->c) * plane);
    std::copy(b->data.begin() + std::size_t(in) * b->c * plane,
              b->data.begin() + std::size_t(in + 1) * b->c * plane,
              y->data.begin() + (std::size_t(in) * (a->c + b->c) + a->c) * plane);
  }
  y->requires_grad = a->requires_grad || b->requires_grad;
  if (y->requires_grad) {
    int ac = a->c, bc = b->c, an = a->n;
    tape.push([=]() {
      for (int in = 0; in < an; ++in) {
        if (a->requires_grad) {
          a->ensure_grad();
          const T* dy = y->grad.data() + std::size_t(in) * (ac + bc) * plane;
          T* da = a->grad.data() + std::size_t(in) * ac * plane;
          for (std::size_t i = 0; i < std::size_t(ac) * plane; ++i) da[i] += dy[i];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          const T* dy = y->grad.data() + (std::size_t(in) * (ac + bc) + ac) * plane;
          T* db = b->grad.data() + std::size_t(in) * bc * plane;
          for (std::size_t i = 0; i < std::size_t(bc) * plane; ++i) db[i] += dy[i];
        }
      }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  check_same_shape("add", *a, *b);
  auto y = Tensor<T>::make(a->n, a->c, a->h, a->w);
  for (std::size_t i = 0; i < a->size(); ++i) y->data[i] = a->data[i] + b->data[i];
  y->requires_grad = a->requires_grad || b->requires_grad;
  if (y->requires_grad)
    tape.push([=]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += y->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += y->grad[i];
      }
    });
  return y;
}

template <typename T>
TensorPtr<T> hadamard(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  check_same_shape("hadamard", *a, *b);
  auto y = Tensor<T>::make(a->n, a->c, a->h, a->w);
  for (std::size_t i = 0; i < a->size(); ++i) y->data[i] = a->data[i] * b->data[i];
  y->requires_grad = a->requires_grad || b->requires_grad;
  if (y->requires_grad)
    tape.push([=]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += y->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += y->grad[i] * a->data[i];
      }
    });
  return y;
}

// x (NxCxHxW) scaled per channel by s (NxCx1x1)
template <typename T>
TensorPtr<T> scale_channels(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& s) {
  if (s->n != x->n || s->c != x->c || s->h != 1 || s->w != 1)
    shape_error("scale_channels",
                "scale must be Nx" + std::to_string(x->c) + "x1x1, got " + s->shape_str());
  auto y = Tensor<T>::make(x->n, x->c, x->h, x->w);
  const std::size_t plane = std::size_t(x->h) * x->w;
  for (int in = 0; in < x->n; ++in)
    for (int ic = 0; ic < x->c; ++ic) {
      T sc = s->data[std::size_t(in) * x->c + ic];
      const T* src = x->data.data() + (std::size_t(in) * x->c + ic) * plane;
      T* dst = y->data.data() + (std::size_t(in) * x->c + ic) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * sc;
    }
  y->requires_grad = x->requires_grad || s->requires_grad;
  if (y->requires_grad) {
    int xn = x->n, xc = x->c;
    tape.push([=]() {
      for (int in = 0; in < xn; ++in)
        for (int ic = 0; ic < xc; ++ic) {
          std::size_t off = (std::size_t(in) * xc + ic) * plane;
          if (x->requires_grad) {
            x->ensure_grad();
            T sc = s->data[std::size_t(in) * xc + ic];
            for (std::size_t i = 0; i < plane; ++i) x->grad[off + i] += y->grad[off + i] * sc;
          }
          if (s->requires_grad) {
            s->ensure_grad();
            T g = T(0);
            for (std::size_t i = 0; i < plane; ++i) g += y->grad[off + i] * x->data[off + i];
            s->grad[std::size_t(in) * xc + ic] += g;
          }
        }
    });
  }
  return y;
}

// N x C x 1 x 1 broadcast to N x C x H x W (image-pooling branch upsample;
// bilinear interpolation of a 1x1 map is the constant itself)
template <typename T>
TensorPtr<T> broadcast_spatial(Tape<T>& tape, const TensorPtr<T>& x, int h, int w) {
  if (x->h != 1 || x->w != 1)
    shape_error("broadcast_spatial", "input must be Nx" + std::to_string(x->c) +
                                         "x1x1, got " + x->shape_str());
  auto y = Tensor<T>::make(x->n, x->c, h, w);
  const std::size_t plane = std::size_t(h) * w;
  for (std::size_t nc = 0; nc < x->size(); ++nc)
    std::fill(y->data.begin() + nc * plane, y->data.begin() + (nc + 1) * plane,
              x->data[nc]);
  y->requires_grad = x->requires_grad;
  if (y->requires_grad)
    tape.push([=]() {
      x->ensure_grad();
      for (std::size_t nc = 0; nc < x->size(); ++nc) {
        T s = T(0);
        const T* base = y->grad.data() + nc * plane;
        for (std::size_t i = 0; i < plane; ++i) s += base[i];
        x->grad[nc] += s;
      }
    });
  return y;
}

// Scatter input channels to a wider output: output channel keep[i] = input
// channel i, all other channels zero. Restores pruned widths before a
// shortcut addition.
template <typename T>
TensorPtr<T> expand_channels(Tape<T>& tape, const TensorPtr<T>& x,
                             const std::vector<int>& keep, int out_channels) {
  if ((int)keep.size() != x->c)
    shape_error("expand_channels", "keep list size != input channels");
  for (int k : keep)
    if (k < 0 || k >= out_channels)
      shape_error("expand_channels", "keep index out of range");
  auto y = Tensor<T>::make(x->n, out_channels, x->h, x->w);
  const std::size_t plane = std::size_t(x->h) * x->w;
  for (int in = 0; in < x->n; ++in)
    for (int ic = 0; ic < x->c; ++ic)
      std::copy(x->data.begin() + (std::size_t(in) * x->c + ic) * plane,
                x->data.begin() + (std::size_t(in) * x->c + ic + 1) * plane,
                y->data.begin() + (std::size_t(in) * out_channels + keep[ic]) * plane);
  y->requires_grad = x->requires_grad;
  if (y->requires_grad) {
    int xn = x->n, xc = x->c;
    auto kp = keep;
    tape.push([=]() {
      x->ensure_grad();
      for (int in = 0; in < xn; ++in)
        for (int ic = 0; ic < xc; ++ic) {
          const T* dy = y->grad.data() + (std::size_t(in) * out_channels + kp[ic]) * plane;
          T* dx = x->grad.data() + (std::size_t(in) * xc + ic) * plane;
          for (std::size_t i = 0; i < plane; ++i) dx[i] += dy[i];
        }
    });
  }
  return y;
}

// Zero out the listed channels, keeping width. Oracle op for pruning tests.
template <typename T>
TensorPtr<T> zero_channels(Tape<T>& tape, const TensorPtr<T>& x,
                           const std::vector<int>& channels) {
  auto y = Tensor<T>::make(x->n, x->c, x->h, x->w);
  y->data = x->data;
  std::vector<char> zeroed(x->c, 0);
  for (int ch : channels) {
    if (ch < 0 || ch >= x->c) shape_error("zero_channels", "channel out of range");
    zeroed[ch] = 1;
  }
  const std::size_t plane = std::size_t(x->h) * x->w;
  for (int in = 0; in < x->n; ++in)
    for (int ic = 0; ic < x->c; ++ic)
      if (zeroed[ic])
        std::fill(y->data.begin() + (std::size_t(in) * x->c + ic) * plane,
                  y->data.begin() + (std::size_t(in) * x->c + ic + 1) * plane, T(0));
  y->requires_grad = x->requires_grad;
  if (y->requires_grad) {
    int xn = x->n, xc = x->c;
    tape.push([=]() {
      x->ensure_grad();
      for (int in = 0; in < xn; ++in)
        for (int ic = 0; ic < xc; ++ic) {
          if (zeroed[ic]) continue;
          const T* dy = y->grad.data() + (std::size_t(in) * xc + ic) * plane;
          T* dx = x->grad.data() + (std::size_t(in) * xc + ic) * plane;
          for (std::size_t i = 0; i < plane; ++i) dx[i] += dy[i];
        }
    });
  }
  return y;
}

// inverted dropout; mask is supplied so callers control the RNG stream
template <typename T>
TensorPtr<T> dropout(Tape<T>& tape, const TensorPtr<T>& x, const std::vector<char>& mask,
                     T keep_prob) {
  if (mask.size() != x->size()) shape_error("dropout", "mask size != tensor size");
  auto y = Tensor<T>::make(x->n, x->c, x->h, x->w);
  const T scale = T(1) / keep_prob;
  for (std::size_t i = 0; i < x->size(); ++i)
    y->data[i] = mask[i] ? x->data[i] * scale : T(0);
  y->requires_grad = x->requires_grad;
  if (y->requires_grad) {
    auto m = mask;
    tape.push([=]() {
      x->ensure_grad();
      for (std::size_t i = 0; i < x->size(); ++i)
        if (m[i]) x->grad[i] += y->grad[i] * scale;
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& x) {
  T s = T(0);
  for (T v : x->data) s += v;
  auto y = Tensor<T>::scalar(s);
  y->requires_grad = x->requires_grad;
  if (y->requires_grad)
    tape.push([=]() {
      x->ensure_grad();
      for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += y->grad[0];
    });
  return y;
}

// y = sum_i w_i * x_i over scalar tensors
template <typename T>
TensorPtr<T> weighted_sum(Tape<T>& tape, const std::vector<TensorPtr<T>>& xs,
                          const std::vector<T>& ws) {
  if (xs.size() != ws.size()) shape_error("weighted_sum", "terms/weights mismatch");
  T s = T(0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!xs[i]->is_scalar()) shape_error("weighted_sum", "non-scalar term");
    s += ws[i] * xs[i]->data[0];
  }
  auto y = Tensor<T>::scalar(s);
  for (auto& x : xs) y->requires_grad = y->requires_grad || x->requires_grad;
  if (y->requires_grad)
    tape.push([=]() {
      for (std::size_t i = 0; i < xs.size(); ++i)
        if (xs[i]->requires_grad) {
          xs[i]->ensure_grad();
          xs[i]->grad[0] += ws[i] * y->grad[0];
        }
    });
  return y;
}

// mean over non-ignored pixels of -log softmax(logits)[label]
template <typename T>
TensorPtr<T> softmax_cross_entropy(Tape<T>& tape, const TensorPtr<T>& logits,
                                   const std::vector<int>& labels, int ignore_index = 255) {
  const std::size_t plane = std::size_t(logits->h) * logits->w;
  if (labels.size() != std::size_t(logits->n) * plane)
    shape_error("softmax_cross_entropy", "label count " + std::to_string(labels.size()) +
                                             " != N*H*W of " + logits->shape_str());
  const int C = logits->c;
  auto probs = std::make_shared<std::vector<T>>(logits->size());
  T loss = T(0);
  std::size_t valid = 0;
  for (int in = 0; in < logits->n; ++in)
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int ic = 0; ic < C; ++ic)
        mx = std::max(mx, logits->data[(std::size_t(in) * C + ic) * plane + i]);
      T sum = T(0);
      for (int ic = 0; ic < C; ++ic) {
        std::size_t idx = (std::size_t(in) * C + ic) * plane + i;
        (*probs)[idx] = std::exp(logits->data[idx] - mx);
        sum += (*probs)[idx];
      }
      for (int ic = 0; ic < C; ++ic) (*probs)[(std::size_t(in) * C + ic) * plane + i] /= sum;
      int lbl = labels[std::size_t(in) * plane + i];
      if (lbl == ignore_index) continue;
      if (lbl < 0 || lbl >= C)
        shape_error("softmax_cross_entropy", "label " + std::to_string(lbl) +
                                                 " out of range for C=" + std::to_string(C));
      ++valid;
      loss -= std::log((*probs)[(std::size_t(in) * C + lbl) * plane + i]);
    }
  if (valid == 0)
    throw std::invalid_argument("softmax_cross_entropy: all pixels ignored");
  loss /= T(valid);
  auto y = Tensor<T>::scalar(loss);
  y->requires_grad = logits->requires_grad;
  if (y->requires_grad) {
    auto lbls = std::make_shared<std::vector<int>>(labels);
    int ln = logits->n;
    tape.push([=]() {
      logits->ensure_grad();
      T g = y->grad[0] / T(valid);
      for (int in = 0; in < ln; ++in)
        for (std::size_t i = 0; i < plane; ++i) {
          int lbl = (*lbls)[std::size_t(in) * plane + i];
          if (lbl == ignore_index) continue;
          for (int ic = 0; ic < C; ++ic) {
            std::size_t idx = (std::size_t(in) * C + ic) * plane + i;
            T p = (*probs)[idx];
            logits->grad[idx] += g * (p - (ic == lbl ? T(1) : T(0)));
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// grad_check: central finite differences against the tape gradient

template <typename T>
double grad_check(const std::function<TensorPtr<T>(Tape<T>&)>& closure,
                  const std::vector<TensorPtr<T>>& inputs, T eps = T(1e-5)) {
  Tape<T> tape;
  auto loss = closure(tape);
  for (auto& in : inputs) in->zero_grad();
  tape.backward(loss);
  double max_rel = 0.0;
  for (auto& in : inputs) {
    in->ensure_grad();
    // floor the denominator at a fraction of the tensor's gradient scale so
    // finite-difference rounding noise on near-zero elements is not reported
    // as a relative error against an absolute epsilon
    double gscale = 0.0;
    for (std::size_t i = 0; i < in->size(); ++i)
      gscale = std::max(gscale, std::abs(double(in->grad[i])));
    const double floor = std::max(1e-8, 1e-4 * gscale);
    for (std::size_t i = 0; i < in->size(); ++i) {
      T saved = in->data[i];
      in->data[i] = saved + eps;
      Tape<T> tp;
      tp.recording = false;
      T up = closure(tp)->data[0];
      in->data[i] = saved - eps;
      Tape<T> tm;
      tm.recording = false;
      T dn = closure(tm)->data[0];
      in->data[i] = saved;
      double fd = (double(up) - double(dn)) / (2.0 * double(eps));
      double an = double(in->grad[i]);
      double denom = std::max({std::abs(fd), std::abs(an), floor});
      max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// deterministic RNG (splitmix-seeded xorshift + Box-Muller), stable across
// platforms unlike std distributions

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {
    next();  // decorrelate trivially related seeds
  }

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  double uniform() { return double(next() >> 11) * (1.0 / 9007199254740992.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + int(next() % std::uint64_t(hi - lo + 1));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  Rng split(std::uint64_t stream) const {
    Rng r(state_ ^ (0xd1342543de82ef95ULL * (stream + 1)));
    return r;
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// He-normal initialization: std = sqrt(2 / fan_in)
template <typename T>
void he_init(Tensor<T>& t, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / double(fan_in));
  for (auto& v : t.data) v = T(rng.normal() * std);
}

}  // namespace aseg
