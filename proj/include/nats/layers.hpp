/* Copyright 2026 The natsearch Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef NATS_LAYERS_HPP_
#define NATS_LAYERS_HPP_

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "nats/conv_ops.hpp"
#include "nats/tensor.hpp"

namespace nats {

// train: batch statistics, caches for backward.
// eval:  running statistics, no caches needed.
// probe: eval with every rectifier replaced by identity and normalization
//        pinned to unit statistics; used for receptive-field analysis.
enum class RunMode { train, eval, probe };

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

template <typename T>
struct BufferRef {
  std::string name;
  Tensor<T>* value;
};

template <typename T>
struct Registry {
  std::vector<ParamRef<T>> params;
  std::vector<BufferRef<T>> buffers;

  void add_param(const std::string& name, Tensor<T>* v, Tensor<T>* g) {
    params.push_back({name, v, g});
  }
  void add_buffer(const std::string& name, Tensor<T>* v) {
    buffers.push_back({name, v});
  }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, RunMode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& gy) = 0;
  virtual void collect(const std::string& prefix, Registry<T>& reg) {}
  virtual Shape output_shape(const Shape& in) const { return in; }
  virtual long long macs(const Shape& in) const { return 0; }
  virtual void zero_grad() {}
};

template <typename T>
long long param_count(Layer<T>& layer) {
  Registry<T> reg;
  layer.collect("", reg);
  long long n = 0;
  for (const auto& p : reg.params) n += static_cast<long long>(p.value->size());
  return n;
}

template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(int in_c, int out_c, int kernel, int stride, int dil_h, int dil_w,
         int pad_h, int pad_w, bool bias)
      : in_c_(in_c),
        out_c_(out_c),
        k_(kernel),
        stride_(stride),
        dil_h_(dil_h),
        dil_w_(dil_w),
        pad_h_(pad_h),
        pad_w_(pad_w),
        has_bias_(bias),
        weight({out_c, in_c, kernel, kernel}),
        wgrad({out_c, in_c, kernel, kernel}) {
    if (bias) {
      bias_param = Tensor<T>({out_c});
      bgrad = Tensor<T>({out_c});
    }
  }

  // Square kernel, symmetric dilation, same padding.
  static std::unique_ptr<Conv2d<T>> same(int in_c, int out_c, int kernel,
                                         int stride, int dilation = 1,
                                         bool bias = false) {
    const int pad = same_padding(kernel, dilation);
    return std::make_unique<Conv2d<T>>(in_c, out_c, kernel, stride, dilation,
                                       dilation, pad, pad, bias);
  }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode) override {
    geom_ = conv2d_geom(x, weight, stride_, dil_h_, dil_w_, pad_h_, pad_w_);
    x_shape_ = x.shape();
    const bool keep = mode != RunMode::eval;
    return conv2d_forward(x, weight, has_bias_ ? &bias_param : nullptr,
                          stride_, dil_h_, dil_w_, pad_h_, pad_w_,
                          keep ? &col_ : nullptr);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    auto grads =
        conv2d_backward(x_shape_, weight, gy, col_, geom_, has_bias_);
    for (std::size_t i = 0; i < wgrad.size(); ++i) wgrad[i] += grads.gw[i];
    if (has_bias_)
      for (std::size_t i = 0; i < bgrad.size(); ++i) bgrad[i] += grads.gbias[i];
    return std::move(grads.gx);
  }

  void collect(const std::string& prefix, Registry<T>& reg) override {
    reg.add_param(prefix + "weight", &weight, &wgrad);
    if (has_bias_) reg.add_param(prefix + "bias", &bias_param, &bgrad);
  }

  void zero_grad() override {
    wgrad.zero();
    if (has_bias_) bgrad.zero();
  }

  Shape output_shape(const Shape& in) const override {
    return {in[0], out_c_, conv_out_extent(in[2], k_, stride_, dil_h_, pad_h_),
            conv_out_extent(in[3], k_, stride_, dil_w_, pad_w_)};
  }

  long long macs(const Shape& in) const override {
    const Shape out = output_shape(in);
    return 1LL * out_c_ * in_c_ * k_ * k_ * out[2] * out[3];
  }

  int out_channels() const { return out_c_; }
  int in_channels() const { return in_c_; }
  int stride() const { return stride_; }

  Tensor<T> weight;
  Tensor<T> wgrad;
  Tensor<T> bias_param;
  Tensor<T> bgrad;

 private:
  int in_c_, out_c_, k_, stride_, dil_h_, dil_w_, pad_h_, pad_w_;
  bool has_bias_;
  Shape x_shape_;
  Conv2dGeom geom_;
  MatrixX<T> col_;
};

template <typename T>
class BatchNorm2d : public Layer<T> {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1)
      : c_(channels),
        eps_(eps),
        momentum_(momentum),
        gamma({channels}),
        beta({channels}),
        ggrad({channels}),
        bgrad({channels}),
        running_mean({channels}),
        running_var({channels}) {
    gamma.fill(T(1));
    running_var.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode) override {
    if (x.dim(1) != c_)
      throw ShapeError("batchnorm: expected " + std::to_string(c_) +
                       " channels, got " + std::to_string(x.dim(1)));
    const int batch = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t m = static_cast<std::size_t>(batch) * plane;
    Tensor<T> y(x.shape());

    if (mode == RunMode::train) {
      xhat_ = Tensor<T>(x.shape());
      invstd_.assign(static_cast<std::size_t>(c_), T(0));
#pragma omp parallel for schedule(static)
      for (int c = 0; c < c_; ++c) {
        double sum = 0, sq = 0;
        for (int n = 0; n < batch; ++n) {
          const T* p = plane_ptr(x, n, c, plane);
          for (std::size_t i = 0; i < plane; ++i) {
            sum += p[i];
            sq += static_cast<double>(p[i]) * p[i];
          }
        }
        const double mean = sum / static_cast<double>(m);
        const double var =
            std::max(0.0, sq / static_cast<double>(m) - mean * mean);
        const double inv = 1.0 / std::sqrt(var + eps_);
        invstd_[static_cast<std::size_t>(c)] = static_cast<T>(inv);
        const double g = gamma[static_cast<std::size_t>(c)];
        const double b = beta[static_cast<std::size_t>(c)];
        for (int n = 0; n < batch; ++n) {
          const T* p = plane_ptr(x, n, c, plane);
          T* xh = plane_ptr(xhat_, n, c, plane);
          T* py = plane_ptr(y, n, c, plane);
          for (std::size_t i = 0; i < plane; ++i) {
            const double v = (p[i] - mean) * inv;
            xh[i] = static_cast<T>(v);
            py[i] = static_cast<T>(g * v + b);
          }
        }
        const double unbiased =
            m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1)
                  : var;
        running_mean[static_cast<std::size_t>(c)] = static_cast<T>(
            (1 - momentum_) * running_mean[static_cast<std::size_t>(c)] +
            momentum_ * mean);
        running_var[static_cast<std::size_t>(c)] = static_cast<T>(
            (1 - momentum_) * running_var[static_cast<std::size_t>(c)] +
            momentum_ * unbiased);
      }
      batch_ = batch;
      hw_ = static_cast<int>(plane);
      mode_ = RunMode::train;
    } else {
      // eval uses running statistics; probe pins them to (0, 1).
      scale_.assign(static_cast<std::size_t>(c_), T(0));
#pragma omp parallel for schedule(static)
      for (int c = 0; c < c_; ++c) {
        const std::size_t ci = static_cast<std::size_t>(c);
        const double mean = mode == RunMode::probe ? 0.0 : running_mean[ci];
        const double var = mode == RunMode::probe ? 1.0 : running_var[ci];
        const double inv = 1.0 / std::sqrt(var + eps_);
        const double s = gamma[ci] * inv;
        scale_[ci] = static_cast<T>(s);
        const double b = beta[ci] - s * mean;
        for (int n = 0; n < batch; ++n) {
          const T* p = plane_ptr(x, n, c, plane);
          T* py = plane_ptr(y, n, c, plane);
          for (std::size_t i = 0; i < plane; ++i)
            py[i] = static_cast<T>(s * p[i] + b);
        }
      }
      batch_ = batch;
      hw_ = static_cast<int>(plane);
      mode_ = mode;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const std::size_t plane = static_cast<std::size_t>(hw_);
    Tensor<T> gx(gy.shape());
    if (mode_ != RunMode::train) {
#pragma omp parallel for schedule(static)
      for (int c = 0; c < c_; ++c) {
        const T s = scale_[static_cast<std::size_t>(c)];
        for (int n = 0; n < batch_; ++n) {
          const T* pg = plane_ptr(gy, n, c, plane);
          T* px = plane_ptr(gx, n, c, plane);
          for (std::size_t i = 0; i < plane; ++i) px[i] = s * pg[i];
        }
      }
      return gx;
    }
    const double m = static_cast<double>(batch_) * hw_;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < c_; ++c) {
      const std::size_t ci = static_cast<std::size_t>(c);
      double dbeta = 0, dgamma = 0;
      for (int n = 0; n < batch_; ++n) {
        const T* pg = plane_ptr(gy, n, c, plane);
        const T* xh = plane_ptr(xhat_, n, c, plane);
        for (std::size_t i = 0; i < plane; ++i) {
          dbeta += pg[i];
          dgamma += static_cast<double>(pg[i]) * xh[i];
        }
      }
      ggrad[ci] += static_cast<T>(dgamma);
      bgrad[ci] += static_cast<T>(dbeta);
      const double k = gamma[ci] * invstd_[ci];
      for (int n = 0; n < batch_; ++n) {
        const T* pg = plane_ptr(gy, n, c, plane);
        const T* xh = plane_ptr(xhat_, n, c, plane);
        T* px = plane_ptr(gx, n, c, plane);
        for (std::size_t i = 0; i < plane; ++i)
          px[i] = static_cast<T>(k * (pg[i] - dbeta / m - xh[i] * dgamma / m));
      }
    }
    return gx;
  }

  void collect(const std::string& prefix, Registry<T>& reg) override {
    reg.add_param(prefix + "gamma", &gamma, &ggrad);
    reg.add_param(prefix + "beta", &beta, &bgrad);
    reg.add_buffer(prefix + "running_mean", &running_mean);
    reg.add_buffer(prefix + "running_var", &running_var);
  }

  void zero_grad() override {
    ggrad.zero();
    bgrad.zero();
  }

  int channels() const { return c_; }

  Tensor<T> gamma, beta, ggrad, bgrad;
  Tensor<T> running_mean, running_var;

 private:
  static T* plane_ptr(Tensor<T>& t, int n, int c, std::size_t plane) {
    return t.data() +
           (static_cast<std::size_t>(n) * t.dim(1) + c) * plane;
  }
  static const T* plane_ptr(const Tensor<T>& t, int n, int c,
                            std::size_t plane) {
    return t.data() +
           (static_cast<std::size_t>(n) * t.dim(1) + c) * plane;
  }

  int c_;
  double eps_, momentum_;
  Tensor<T> xhat_;
  std::vector<T> invstd_, scale_;
  int batch_ = 0, hw_ = 0;
  RunMode mode_ = RunMode::train;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, RunMode mode) override {
    identity_ = mode == RunMode::probe;
    if (identity_) return x;
    Tensor<T> y(x.shape());
    mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const bool pos = x[i] > T(0);
      mask_[i] = pos;
      y[i] = pos ? x[i] : T(0);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    if (identity_) return gy;
    Tensor<T> gx(gy.shape());
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx[i] = mask_[i] ? gy[i] : T(0);
    return gx;
  }

 private:
  std::vector<char> mask_;
  bool identity_ = false;
};

template <typename T>
class MaxPool2d : public Layer<T> {
 public:
  MaxPool2d(int kernel, int stride, int pad)
      : k_(kernel), stride_(stride), pad_(pad) {}

  Tensor<T> forward(const Tensor<T>& x, RunMode) override {
    x_shape_ = x.shape();
    const Shape out = output_shape(x.shape());
    Tensor<T> y(out);
    argmax_.assign(y.size(), 0);
    const int oh = out[2], ow = out[3];
    for (int n = 0; n < x.dim(0); ++n)
      for (int c = 0; c < x.dim(1); ++c) {
        const T* px = x.data() + (static_cast<std::size_t>(n) * x.dim(1) + c) *
                                     x.dim(2) * x.dim(3);
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            T best = 0;
            std::size_t best_idx = 0;
            bool found = false;
            for (int ky = 0; ky < k_; ++ky)
              for (int kx = 0; kx < k_; ++kx) {
                const int iy = oy * stride_ - pad_ + ky;
                const int ix = ox * stride_ - pad_ + kx;
                if (iy < 0 || iy >= x.dim(2) || ix < 0 || ix >= x.dim(3))
                  continue;
                const std::size_t idx =
                    static_cast<std::size_t>(iy) * x.dim(3) + ix;
                if (!found || px[idx] > best) {
                  best = px[idx];
                  best_idx = idx;
                  found = true;
                }
              }
            const std::size_t oidx =
                ((static_cast<std::size_t>(n) * x.dim(1) + c) * oh + oy) * ow +
                ox;
            y[oidx] = best;
            argmax_[oidx] = best_idx;
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(x_shape_);
    const int oh = gy.dim(2), ow = gy.dim(3);
    for (int n = 0; n < gy.dim(0); ++n)
      for (int c = 0; c < gy.dim(1); ++c) {
        T* px = gx.data() + (static_cast<std::size_t>(n) * gy.dim(1) + c) *
                                x_shape_[2] * x_shape_[3];
        const std::size_t base =
            (static_cast<std::size_t>(n) * gy.dim(1) + c) *
            static_cast<std::size_t>(oh) * ow;
        for (std::size_t i = 0; i < static_cast<std::size_t>(oh) * ow; ++i)
          px[argmax_[base + i]] += gy[base + i];
      }
    return gx;
  }

  Shape output_shape(const Shape& in) const override {
    return {in[0], in[1], (in[2] + 2 * pad_ - k_) / stride_ + 1,
            (in[3] + 2 * pad_ - k_) / stride_ + 1};
  }

 private:
  int k_, stride_, pad_;
  Shape x_shape_;
  std::vector<std::size_t> argmax_;
};

template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, RunMode) override {
    x_shape_ = x.shape();
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> y({x.dim(0), x.dim(1)});
    for (int n = 0; n < x.dim(0); ++n)
      for (int c = 0; c < x.dim(1); ++c) {
        const T* p = x.data() +
                     (static_cast<std::size_t>(n) * x.dim(1) + c) * plane;
        double acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        y.at(n, c) = static_cast<T>(acc / static_cast<double>(plane));
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(x_shape_);
    const std::size_t plane =
        static_cast<std::size_t>(x_shape_[2]) * x_shape_[3];
    for (int n = 0; n < gy.dim(0); ++n)
      for (int c = 0; c < gy.dim(1); ++c) {
        const T g = gy.at(n, c) / static_cast<T>(plane);
        T* p = gx.data() +
               (static_cast<std::size_t>(n) * gy.dim(1) + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = g;
      }
    return gx;
  }

  Shape output_shape(const Shape& in) const override { return {in[0], in[1]}; }

 private:
  Shape x_shape_;
};

template <typename T>
class Linear : public Layer<T> {
 public:
  Linear(int in_features, int out_features)
      : in_(in_features),
        out_(out_features),
        weight({out_features, in_features}),
        bias({out_features}),
        wgrad({out_features, in_features}),
        bgrad({out_features}) {}

  Tensor<T> forward(const Tensor<T>& x, RunMode) override {
    if (x.dim(1) != in_)
      throw ShapeError("linear: feature mismatch");
    x_ = x;
    Tensor<T> y({x.dim(0), out_});
    ConstRowMatrixMap<T> xm(x.data(), x.dim(0), in_);
    ConstRowMatrixMap<T> wm(weight.data(), out_, in_);
    RowMatrixMap<T> ym(y.data(), x.dim(0), out_);
    ym.noalias() = xm * wm.transpose();
    for (int n = 0; n < x.dim(0); ++n)
      for (int o = 0; o < out_; ++o) y.at(n, o) += bias[static_cast<std::size_t>(o)];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(x_.shape());
    ConstRowMatrixMap<T> gym(gy.data(), gy.dim(0), out_);
    ConstRowMatrixMap<T> xm(x_.data(), x_.dim(0), in_);
    ConstRowMatrixMap<T> wm(weight.data(), out_, in_);
    RowMatrixMap<T> gxm(gx.data(), gx.dim(0), in_);
    gxm.noalias() = gym * wm;
    RowMatrixMap<T> gwm(wgrad.data(), out_, in_);
    gwm.noalias() += gym.transpose() * xm;
    for (int n = 0; n < gy.dim(0); ++n)
      for (int o = 0; o < out_; ++o) bgrad[static_cast<std::size_t>(o)] += gy.at(n, o);
    return gx;
  }

  void collect(const std::string& prefix, Registry<T>& reg) override {
    reg.add_param(prefix + "weight", &weight, &wgrad);
    reg.add_param(prefix + "bias", &bias, &bgrad);
  }

  void zero_grad() override {
    wgrad.zero();
    bgrad.zero();
  }

  Shape output_shape(const Shape& in) const override { return {in[0], out_}; }
  long long macs(const Shape& in) const override { return 1LL * in_ * out_; }

  Tensor<T> weight, bias, wgrad, bgrad;

 private:
  int in_, out_;
  Tensor<T> x_;
};

// Mean cross-entropy over the batch; returns the loss and writes the logit
// gradient (softmax minus one-hot, scaled by 1/N).
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits,
                             const std::vector<int>& labels,
                             Tensor<T>* grad = nullptr) {
  const int batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<int>(labels.size()) != batch)
    throw ShapeError("cross entropy: label count mismatch");
  if (grad) *grad = Tensor<T>(logits.shape());
  double loss = 0;
  for (int n = 0; n < batch; ++n) {
    const T* row = logits.data() + static_cast<std::size_t>(n) * classes;
    double mx = row[0];
    for (int k = 1; k < classes; ++k) mx = std::max(mx, static_cast<double>(row[k]));
    double denom = 0;
    for (int k = 0; k < classes; ++k) denom += std::exp(row[k] - mx);
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= classes) throw ConfigError("cross entropy: label out of range");
    loss += -(row[y] - mx - std::log(denom));
    if (grad) {
      for (int k = 0; k < classes; ++k) {
        const double p = std::exp(row[k] - mx) / denom;
        grad->at(n, k) =
            static_cast<T>((p - (k == y ? 1.0 : 0.0)) / batch);
      }
    }
  }
  return loss / batch;
}

}  // namespace nats

#endif  // NATS_LAYERS_HPP_
