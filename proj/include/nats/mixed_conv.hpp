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
#ifndef NATS_MIXED_CONV_HPP_
#define NATS_MIXED_CONV_HPP_

#include <cmath>
#include <string>
#include <vector>

#include "nats/conv_ops.hpp"
#include "nats/genotype.hpp"
#include "nats/layers.hpp"
#include "nats/tensor.hpp"

namespace nats {

// Shape contract of one searchable 3x3 convolution: G dilation candidates
// whose outputs are split into N equal channel groups. Output channels must
// divide evenly into the groups; the kernel is fixed at 3.
struct MixedConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 3;
  int stride = 1;
  std::vector<Genotype> genotypes;
  int group_count = 1;

  int candidate_count() const { return static_cast<int>(genotypes.size()); }
  int group_width() const { return out_channels / group_count; }
};

inline void validate_mixed_spec(const MixedConvSpec& spec,
                                const std::string& layer_id = "") {
  const std::string where =
      layer_id.empty() ? "mixed conv" : "mixed conv " + layer_id;
  if (spec.kernel_size != 3)
    throw ConfigError(where + ": kernel size must be 3, got " +
                      std::to_string(spec.kernel_size));
  if (spec.stride != 1 && spec.stride != 2)
    throw ConfigError(where + ": stride must be 1 or 2");
  if (spec.in_channels < 1 || spec.out_channels < 1 || spec.group_count < 1)
    throw ConfigError(where + ": channel/group counts must be positive");
  if (spec.genotypes.empty())
    throw ConfigError(where + ": empty genotype list");
  for (const Genotype& g : spec.genotypes) validate_genotype(g);
  if (spec.out_channels % spec.group_count != 0)
    throw ConfigError(where + ": out_channels " +
                      std::to_string(spec.out_channels) +
                      " not divisible into " +
                      std::to_string(spec.group_count) + " groups");
}

// Architecture parameters for one layer: one row per channel group, one
// column per genotype. Entries must stay finite throughout the search.
template <typename T>
struct AlphaTable {
  Tensor<T> values;  // (N, G)

  AlphaTable() = default;
  AlphaTable(int groups, int candidates) : values({groups, candidates}) {}

  int groups() const { return values.rank() == 2 ? values.dim(0) : 0; }
  int candidates() const { return values.rank() == 2 ? values.dim(1) : 0; }

  void check_finite(const std::string& where) const {
    if (!values.all_finite())
      throw InternalError(where + ": non-finite architecture parameter");
  }
};

// One weight replica per genotype; dilation never changes the weight shape,
// so all replicas share (C_out, C_in, K, K).
template <typename T>
struct CandidateWeights {
  std::vector<Tensor<T>> replicas;

  int count() const { return static_cast<int>(replicas.size()); }
};

// G independent copies of the baseline kernel. Replicas may diverge while
// the supernet trains; the baseline tensor itself is left untouched.
template <typename T>
CandidateWeights<T> init_from_baseline(const Tensor<T>& baseline,
                                       int candidates) {
  if (baseline.rank() != 4 || baseline.dim(2) != 3 || baseline.dim(3) != 3)
    throw ShapeError("init_from_baseline: expected (Co,Ci,3,3) kernel, got " +
                     shape_str(baseline.shape()));
  CandidateWeights<T> w;
  w.replicas.assign(static_cast<std::size_t>(candidates), baseline);
  return w;
}

// One candidate path: cross-correlation with per-orientation dilation and
// matching same-padding so every genotype yields ceil(H/stride) output.
template <typename T>
Tensor<T> candidate_forward(const Tensor<T>& x, const Tensor<T>& weight,
                            const Genotype& genotype, int stride) {
  const int k = weight.dim(2);
  return conv2d_forward<T>(x, weight, nullptr, stride, genotype.d_h,
                           genotype.d_w, same_padding(k, genotype.d_h),
                           same_padding(k, genotype.d_w));
}

// Numerically stable softmax over one alpha row.
template <typename T>
void softmax_row(const T* alpha, int count, T* out) {
  T mx = alpha[0];
  for (int g = 1; g < count; ++g) mx = std::max(mx, alpha[g]);
  double denom = 0;
  for (int g = 0; g < count; ++g) {
    const double e = std::exp(static_cast<double>(alpha[g] - mx));
    out[g] = static_cast<T>(e);
    denom += e;
  }
  for (int g = 0; g < count; ++g)
    out[g] = static_cast<T>(static_cast<double>(out[g]) / denom);
}

template <typename T>
std::vector<T> softmax_row(const std::vector<T>& alpha) {
  std::vector<T> out(alpha.size());
  softmax_row(alpha.data(), static_cast<int>(alpha.size()), out.data());
  return out;
}

// Softmax weights for every group row of an alpha table.
template <typename T>
Tensor<T> softmax_rows(const AlphaTable<T>& alpha) {
  Tensor<T> p(alpha.values.shape());
  const int groups = alpha.groups(), cands = alpha.candidates();
  for (int i = 0; i < groups; ++i)
    softmax_row(alpha.values.data() + static_cast<std::size_t>(i) * cands,
                cands, p.data() + static_cast<std::size_t>(i) * cands);
  return p;
}

// Channel-grouped mixture: group i of the output is the softmax(alpha_i)-
// weighted sum of the candidate outputs' channels [i*w, (i+1)*w). With a
// single group this reduces to the path-level mixture.
template <typename T>
Tensor<T> mixed_forward(const Tensor<T>& x, const CandidateWeights<T>& weights,
                        const AlphaTable<T>& alpha,
                        const MixedConvSpec& spec) {
  validate_mixed_spec(spec);
  if (weights.count() != spec.candidate_count())
    throw ShapeError("mixed_forward: weight replica count mismatch");
  if (alpha.groups() != spec.group_count ||
      alpha.candidates() != spec.candidate_count())
    throw ShapeError("mixed_forward: alpha table shape " +
                     shape_str(alpha.values.shape()) + " does not match (N,G)=(" +
                     std::to_string(spec.group_count) + "," +
                     std::to_string(spec.candidate_count()) + ")");
  alpha.check_finite("mixed_forward");

  const Tensor<T> p = softmax_rows(alpha);
  Tensor<T> out;
  const int width = spec.group_width();
  for (int g = 0; g < spec.candidate_count(); ++g) {
    Tensor<T> yg = candidate_forward(x, weights.replicas[static_cast<std::size_t>(g)],
                                     spec.genotypes[static_cast<std::size_t>(g)],
                                     spec.stride);
    if (g == 0) out = Tensor<T>(yg.shape());
    const std::size_t plane = static_cast<std::size_t>(yg.dim(2)) * yg.dim(3);
    for (int n = 0; n < yg.dim(0); ++n)
      for (int i = 0; i < spec.group_count; ++i) {
        const T w = p.at(i, g);
        for (int c = i * width; c < (i + 1) * width; ++c) {
          const T* src = yg.data() +
                         (static_cast<std::size_t>(n) * yg.dim(1) + c) * plane;
          T* dst = out.data() +
                   (static_cast<std::size_t>(n) * yg.dim(1) + c) * plane;
          for (std::size_t q = 0; q < plane; ++q) dst[q] += w * src[q];
        }
      }
  }
  return out;
}

// The searchable layer used inside supernet bottlenecks. Keeps per-candidate
// weight replicas, the alpha table, and the caches needed to produce
// gradients with respect to input, every replica, and every alpha entry.
template <typename T>
class MixedDilatedConv : public Layer<T> {
 public:
  explicit MixedDilatedConv(MixedConvSpec spec) : spec_(std::move(spec)) {
    validate_mixed_spec(spec_);
    const int g = spec_.candidate_count();
    weights_.replicas.assign(
        static_cast<std::size_t>(g),
        Tensor<T>({spec_.out_channels, spec_.in_channels, 3, 3}));
    wgrads_.assign(static_cast<std::size_t>(g),
                   Tensor<T>({spec_.out_channels, spec_.in_channels, 3, 3}));
    alpha_ = AlphaTable<T>(spec_.group_count, g);
    alpha_grad_ = Tensor<T>({spec_.group_count, g});
  }

  const MixedConvSpec& spec() const { return spec_; }
  AlphaTable<T>& alpha() { return alpha_; }
  const AlphaTable<T>& alpha() const { return alpha_; }
  Tensor<T>& alpha_grad() { return alpha_grad_; }
  CandidateWeights<T>& weights() { return weights_; }

  void set_baseline(const Tensor<T>& baseline) {
    check_shape(baseline,
                {spec_.out_channels, spec_.in_channels, 3, 3},
                "mixed conv baseline weight");
    weights_ = init_from_baseline(baseline, spec_.candidate_count());
  }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode) override {
    alpha_.check_finite("mixed forward");
    const int cand = spec_.candidate_count();
    const bool keep = mode != RunMode::eval;
    probs_ = softmax_rows(alpha_);
    x_shape_ = x.shape();
    if (keep) {
      cols_.resize(static_cast<std::size_t>(cand));
      geoms_.resize(static_cast<std::size_t>(cand));
      outputs_.resize(static_cast<std::size_t>(cand));
    }

    Tensor<T> out;
    const int width = spec_.group_width();
    for (int g = 0; g < cand; ++g) {
      const Genotype& geno = spec_.genotypes[static_cast<std::size_t>(g)];
      const Tensor<T>& w = weights_.replicas[static_cast<std::size_t>(g)];
      Tensor<T> yg = conv2d_forward<T>(
          x, w, nullptr, spec_.stride, geno.d_h, geno.d_w,
          same_padding(3, geno.d_h), same_padding(3, geno.d_w),
          keep ? &cols_[static_cast<std::size_t>(g)] : nullptr);
      if (keep)
        geoms_[static_cast<std::size_t>(g)] =
            conv2d_geom(x, w, spec_.stride, geno.d_h, geno.d_w,
                        same_padding(3, geno.d_h), same_padding(3, geno.d_w));
      if (g == 0) out = Tensor<T>(yg.shape());
      const std::size_t plane =
          static_cast<std::size_t>(yg.dim(2)) * yg.dim(3);
      for (int n = 0; n < yg.dim(0); ++n)
        for (int i = 0; i < spec_.group_count; ++i) {
          const T pw = probs_.at(i, g);
          for (int c = i * width; c < (i + 1) * width; ++c) {
            const T* src =
                yg.data() +
                (static_cast<std::size_t>(n) * yg.dim(1) + c) * plane;
            T* dst = out.data() +
                     (static_cast<std::size_t>(n) * yg.dim(1) + c) * plane;
            for (std::size_t q = 0; q < plane; ++q) dst[q] += pw * src[q];
          }
        }
      if (keep) outputs_[static_cast<std::size_t>(g)] = std::move(yg);
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int cand = spec_.candidate_count();
    const int width = spec_.group_width();
    const std::size_t plane = static_cast<std::size_t>(gy.dim(2)) * gy.dim(3);
    const int batch = gy.dim(0);

    // dL/dp[i][g] = <gy group i, y_g group i>
    MatrixX<double> dp(spec_.group_count, cand);
    dp.setZero();
    Tensor<T> gx(x_shape_);
    Tensor<T> scaled(gy.shape());
    for (int g = 0; g < cand; ++g) {
      const Tensor<T>& yg = outputs_[static_cast<std::size_t>(g)];
      for (int i = 0; i < spec_.group_count; ++i) {
        const T pw = probs_.at(i, g);
        double dot = 0;
        for (int n = 0; n < batch; ++n)
          for (int c = i * width; c < (i + 1) * width; ++c) {
            const std::size_t off =
                (static_cast<std::size_t>(n) * gy.dim(1) + c) * plane;
            const T* pg = gy.data() + off;
            const T* py = yg.data() + off;
            T* ps = scaled.data() + off;
            for (std::size_t q = 0; q < plane; ++q) {
              dot += static_cast<double>(pg[q]) * py[q];
              ps[q] = pw * pg[q];
            }
          }
        dp(i, g) = dot;
      }
      auto grads = conv2d_backward<T>(
          x_shape_, weights_.replicas[static_cast<std::size_t>(g)], scaled,
          cols_[static_cast<std::size_t>(g)],
          geoms_[static_cast<std::size_t>(g)], false);
      Tensor<T>& wg = wgrads_[static_cast<std::size_t>(g)];
      for (std::size_t q = 0; q < wg.size(); ++q) wg[q] += grads.gw[q];
      for (std::size_t q = 0; q < gx.size(); ++q) gx[q] += grads.gx[q];
    }

    // Softmax Jacobian per group row: da[g] = p[g]*(dp[g] - sum_g' p[g']dp[g'])
    for (int i = 0; i < spec_.group_count; ++i) {
      double inner = 0;
      for (int g = 0; g < cand; ++g)
        inner += static_cast<double>(probs_.at(i, g)) * dp(i, g);
      for (int g = 0; g < cand; ++g)
        alpha_grad_.at(i, g) += static_cast<T>(
            static_cast<double>(probs_.at(i, g)) * (dp(i, g) - inner));
    }
    return gx;
  }

  void collect(const std::string& prefix, Registry<T>& reg) override {
    for (int g = 0; g < spec_.candidate_count(); ++g) {
      reg.add_param(prefix + "g" + std::to_string(g) + ".weight",
                    &weights_.replicas[static_cast<std::size_t>(g)],
                    &wgrads_[static_cast<std::size_t>(g)]);
    }
    reg.add_param(prefix + "alpha", &alpha_.values, &alpha_grad_);
  }

  void zero_grad() override {
    for (auto& g : wgrads_) g.zero();
    alpha_grad_.zero();
  }

  Shape output_shape(const Shape& in) const override {
    const int oh = conv_out_extent(in[2], 3, spec_.stride, 1, 1);
    const int ow = conv_out_extent(in[3], 3, spec_.stride, 1, 1);
    return {in[0], spec_.out_channels, oh, ow};
  }

  long long macs(const Shape& in) const override {
    // Supernet cost: every candidate path runs.
    const Shape out = output_shape(in);
    return 1LL * spec_.candidate_count() * spec_.out_channels *
           spec_.in_channels * 9 * out[2] * out[3];
  }

 private:
  MixedConvSpec spec_;
  CandidateWeights<T> weights_;
  std::vector<Tensor<T>> wgrads_;
  AlphaTable<T> alpha_;
  Tensor<T> alpha_grad_;

  Tensor<T> probs_;
  Shape x_shape_;
  std::vector<MatrixX<T>> cols_;
  std::vector<Conv2dGeom> geoms_;
  std::vector<Tensor<T>> outputs_;
};

}  // namespace nats

#endif  // NATS_MIXED_CONV_HPP_
