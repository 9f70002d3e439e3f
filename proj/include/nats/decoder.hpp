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
#ifndef NATS_DECODER_HPP_
#define NATS_DECODER_HPP_

#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nats/mixed_conv.hpp"

namespace nats {

// Per-group winning genotype indices (Eq-style argmax decode).
struct IndexVector {
  std::vector<int> ind;

  int groups() const { return static_cast<int>(ind.size()); }
};

// Fraction of channel groups won by each genotype, kept as exact rationals
// count/denominator so conservation can be asserted without rounding.
struct IntensityVector {
  std::vector<long long> counts;  // one per genotype
  long long denom = 1;            // the group count N

  int candidates() const { return static_cast<int>(counts.size()); }
  double value(int g) const {
    return static_cast<double>(counts[static_cast<std::size_t>(g)]) /
           static_cast<double>(denom);
  }
  long long count_sum() const {
    return std::accumulate(counts.begin(), counts.end(), 0LL);
  }
};

struct DecodedEntry {
  Genotype genotype;
  int channels = 0;
};

inline bool operator==(const DecodedEntry& a, const DecodedEntry& b) {
  return a.genotype == b.genotype && a.channels == b.channels;
}

// Discrete outcome for one layer: surviving genotypes (positive intensity
// only, in genotype-index order) with their channel allocations, plus the
// channel permutation induced by regrouping. permutation[original] =
// decoded position; gather() gives the inverse view (decoded position ->
// original channel).
struct DecodedBlockSpec {
  std::string layer_id;
  std::vector<DecodedEntry> entries;
  std::vector<int> permutation;

  int total_channels() const {
    int n = 0;
    for (const auto& e : entries) n += e.channels;
    return n;
  }
  bool identity_permutation() const {
    for (std::size_t i = 0; i < permutation.size(); ++i)
      if (permutation[i] != static_cast<int>(i)) return false;
    return true;
  }
  std::vector<int> gather() const {
    std::vector<int> g(permutation.size());
    for (std::size_t i = 0; i < permutation.size(); ++i)
      g[static_cast<std::size_t>(permutation[i])] = static_cast<int>(i);
    return g;
  }
};

inline void validate_decoded_spec(const DecodedBlockSpec& spec,
                                  int out_channels) {
  if (spec.total_channels() != out_channels)
    throw ConfigError("decoded spec " + spec.layer_id + ": channels sum to " +
                      std::to_string(spec.total_channels()) + ", expected " +
                      std::to_string(out_channels));
  if (static_cast<int>(spec.permutation.size()) != out_channels)
    throw ConfigError("decoded spec " + spec.layer_id +
                      ": permutation length mismatch");
  std::vector<char> seen(static_cast<std::size_t>(out_channels), 0);
  for (int p : spec.permutation) {
    if (p < 0 || p >= out_channels || seen[static_cast<std::size_t>(p)])
      throw ConfigError("decoded spec " + spec.layer_id +
                        ": permutation is not a bijection");
    seen[static_cast<std::size_t>(p)] = 1;
  }
  for (const auto& e : spec.entries) {
    validate_genotype(e.genotype);
    if (e.channels <= 0)
      throw ConfigError("decoded spec " + spec.layer_id +
                        ": non-positive channel entry");
  }
}

// Row-wise argmax over the alpha table; ties break toward the lowest
// genotype index, which by construction is the baseline dilation.
template <typename T>
IndexVector decode_indices(const AlphaTable<T>& alpha) {
  alpha.check_finite("decode_indices");
  IndexVector out;
  out.ind.resize(static_cast<std::size_t>(alpha.groups()));
  for (int i = 0; i < alpha.groups(); ++i) {
    int best = 0;
    for (int g = 1; g < alpha.candidates(); ++g)
      if (alpha.values.at(i, g) > alpha.values.at(i, best)) best = g;
    out.ind[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

// I^g = #{i : ind_i = g} / N, exact.
inline IntensityVector intensity(const IndexVector& ind, int candidates) {
  if (ind.groups() < 1) throw ConfigError("intensity: empty index vector");
  IntensityVector out;
  out.counts.assign(static_cast<std::size_t>(candidates), 0);
  out.denom = ind.groups();
  for (int g : ind.ind) {
    if (g < 0 || g >= candidates)
      throw ConfigError("intensity: genotype index out of range");
    ++out.counts[static_cast<std::size_t>(g)];
  }
  return out;
}

// Channel allocation per genotype, C_out * I^g. Exact because C_out divides
// evenly into N groups; zero entries are dropped later.
inline std::vector<int> decoded_channels(int out_channels,
                                         const IntensityVector& intensities) {
  if (out_channels % intensities.denom != 0)
    throw InternalError("decoded_channels: C_out=" +
                        std::to_string(out_channels) +
                        " not divisible by group count " +
                        std::to_string(intensities.denom));
  const long long width = out_channels / intensities.denom;
  std::vector<int> channels(intensities.counts.size());
  for (std::size_t g = 0; g < intensities.counts.size(); ++g)
    channels[g] = static_cast<int>(width * intensities.counts[g]);
  return channels;
}

// Stable regrouping permutation: channels of groups that selected genotype 0
// come first (original order preserved), then genotype 1, and so on.
// Returns permutation[original channel] = decoded position.
inline std::vector<int> channel_permutation(const IndexVector& ind,
                                            int out_channels) {
  const int groups = ind.groups();
  if (groups < 1 || out_channels % groups != 0)
    throw ConfigError("channel_permutation: C_out=" +
                      std::to_string(out_channels) +
                      " incompatible with N=" + std::to_string(groups));
  const int width = out_channels / groups;
  int max_geno = 0;
  for (int g : ind.ind) max_geno = std::max(max_geno, g);

  std::vector<int> perm(static_cast<std::size_t>(out_channels));
  int pos = 0;
  for (int g = 0; g <= max_geno; ++g)
    for (int i = 0; i < groups; ++i)
      if (ind.ind[static_cast<std::size_t>(i)] == g)
        for (int c = i * width; c < (i + 1) * width; ++c)
          perm[static_cast<std::size_t>(c)] = pos++;
  return perm;
}

// Slices of the baseline kernel by output channel, grouped by selected
// genotype in stable order. Slice g has decoded_channels[g] rows; empty
// slices are kept so indices line up with the genotype list.
template <typename T>
std::vector<Tensor<T>> decompose_weights(const Tensor<T>& baseline,
                                         const IndexVector& ind,
                                         int candidates) {
  if (baseline.rank() != 4)
    throw ShapeError("decompose_weights: expected 4-d kernel");
  const int out_channels = baseline.dim(0);
  const int groups = ind.groups();
  if (groups < 1 || out_channels % groups != 0)
    throw ShapeError("decompose_weights: " + std::to_string(out_channels) +
                     " output channels not divisible into " +
                     std::to_string(groups) + " groups");
  const int width = out_channels / groups;
  const std::size_t row =
      static_cast<std::size_t>(baseline.dim(1)) * baseline.dim(2) *
      baseline.dim(3);

  std::vector<std::vector<int>> rows_per_geno(
      static_cast<std::size_t>(candidates));
  for (int i = 0; i < groups; ++i) {
    const int g = ind.ind[static_cast<std::size_t>(i)];
    if (g < 0 || g >= candidates)
      throw ShapeError("decompose_weights: genotype index out of range");
    for (int c = i * width; c < (i + 1) * width; ++c)
      rows_per_geno[static_cast<std::size_t>(g)].push_back(c);
  }

  std::vector<Tensor<T>> slices;
  slices.reserve(static_cast<std::size_t>(candidates));
  for (int g = 0; g < candidates; ++g) {
    const auto& rows = rows_per_geno[static_cast<std::size_t>(g)];
    Tensor<T> slice({static_cast<int>(rows.size()), baseline.dim(1),
                     baseline.dim(2), baseline.dim(3)});
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(baseline.data() + static_cast<std::size_t>(rows[r]) * row,
                baseline.data() + (static_cast<std::size_t>(rows[r]) + 1) * row,
                slice.data() + r * row);
    slices.push_back(std::move(slice));
  }
  return slices;
}

// Full decode of one layer: argmax -> intensity -> channel allocation ->
// permutation. Only positive-intensity genotypes survive.
template <typename T>
DecodedBlockSpec decode_block_spec(const AlphaTable<T>& alpha,
                                   const MixedConvSpec& spec,
                                   const std::string& layer_id = "") {
  validate_mixed_spec(spec, layer_id);
  if (alpha.groups() != spec.group_count ||
      alpha.candidates() != spec.candidate_count())
    throw ShapeError("decode_block: alpha shape mismatch for " + layer_id);
  const IndexVector ind = decode_indices(alpha);
  const IntensityVector inten = intensity(ind, spec.candidate_count());
  const std::vector<int> channels = decoded_channels(spec.out_channels, inten);

  DecodedBlockSpec out;
  out.layer_id = layer_id;
  for (int g = 0; g < spec.candidate_count(); ++g)
    if (channels[static_cast<std::size_t>(g)] > 0)
      out.entries.push_back({spec.genotypes[static_cast<std::size_t>(g)],
                             channels[static_cast<std::size_t>(g)]});
  out.permutation = channel_permutation(ind, spec.out_channels);
  validate_decoded_spec(out, spec.out_channels);
  return out;
}

template <typename T>
struct DecodedBlock {
  DecodedBlockSpec spec;
  std::vector<Tensor<T>> weights;  // one per surviving entry
};

// Decode plus weight decomposition from the baseline kernel (never from the
// supernet replicas).
template <typename T>
DecodedBlock<T> decode_block(const AlphaTable<T>& alpha,
                             const MixedConvSpec& spec,
                             const Tensor<T>& baseline_weight,
                             const std::string& layer_id = "") {
  check_shape(baseline_weight,
              {spec.out_channels, spec.in_channels, 3, 3},
              "decode_block baseline weight");
  DecodedBlock<T> out;
  out.spec = decode_block_spec(alpha, spec, layer_id);
  const IndexVector ind = decode_indices(alpha);
  auto slices = decompose_weights(baseline_weight, ind, spec.candidate_count());
  for (std::size_t g = 0; g < slices.size(); ++g)
    if (slices[g].dim(0) > 0) out.weights.push_back(std::move(slices[g]));
  if (out.weights.size() != out.spec.entries.size())
    throw InternalError("decode_block: slice/entry count mismatch");
  return out;
}

// Discrete multi-dilation block: the concatenation, in genotype order, of
// per-genotype dilated convolutions over the full input. Output channel p
// corresponds to original channel gather[p] of the un-decoded layer.
template <typename T>
class DecodedMultiConv : public Layer<T> {
 public:
  DecodedMultiConv(const DecodedBlockSpec& spec, int in_channels, int stride,
                   std::vector<Tensor<T>> weights)
      : spec_(spec), in_c_(in_channels), stride_(stride) {
    validate_decoded_spec(spec_, spec_.total_channels());
    if (weights.size() != spec_.entries.size())
      throw ShapeError("decoded block: weight count mismatch");
    for (std::size_t e = 0; e < weights.size(); ++e) {
      check_shape(weights[e],
                  {spec_.entries[e].channels, in_channels, 3, 3},
                  "decoded block weight");
      subs_.push_back(std::make_unique<Conv2d<T>>(
          in_channels, spec_.entries[e].channels, 3, stride,
          spec_.entries[e].genotype.d_h, spec_.entries[e].genotype.d_w,
          same_padding(3, spec_.entries[e].genotype.d_h),
          same_padding(3, spec_.entries[e].genotype.d_w), false));
      subs_.back()->weight = std::move(weights[e]);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode) override {
    Tensor<T> out;
    int offset = 0;
    for (std::size_t e = 0; e < subs_.size(); ++e) {
      Tensor<T> ye = subs_[e]->forward(x, mode);
      if (e == 0) {
        out = Tensor<T>({x.dim(0), spec_.total_channels(), ye.dim(2),
                         ye.dim(3)});
      }
      const std::size_t plane =
          static_cast<std::size_t>(ye.dim(2)) * ye.dim(3);
      for (int n = 0; n < ye.dim(0); ++n)
        std::copy(ye.data() + static_cast<std::size_t>(n) * ye.dim(1) * plane,
                  ye.data() + static_cast<std::size_t>(n + 1) * ye.dim(1) *
                                  plane,
                  out.data() +
                      (static_cast<std::size_t>(n) * out.dim(1) + offset) *
                          plane);
      offset += ye.dim(1);
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx;
    int offset = 0;
    const std::size_t plane = static_cast<std::size_t>(gy.dim(2)) * gy.dim(3);
    for (std::size_t e = 0; e < subs_.size(); ++e) {
      const int ce = spec_.entries[e].channels;
      Tensor<T> gslice({gy.dim(0), ce, gy.dim(2), gy.dim(3)});
      for (int n = 0; n < gy.dim(0); ++n)
        std::copy(gy.data() +
                      (static_cast<std::size_t>(n) * gy.dim(1) + offset) *
                          plane,
                  gy.data() +
                      (static_cast<std::size_t>(n) * gy.dim(1) + offset + ce) *
                          plane,
                  gslice.data() + static_cast<std::size_t>(n) * ce * plane);
      Tensor<T> gxe = subs_[e]->backward(gslice);
      if (e == 0)
        gx = std::move(gxe);
      else
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gxe[i];
      offset += ce;
    }
    return gx;
  }

  void collect(const std::string& prefix, Registry<T>& reg) override {
    for (std::size_t e = 0; e < subs_.size(); ++e)
      subs_[e]->collect(prefix + "sub" + std::to_string(e) + ".", reg);
  }

  void zero_grad() override {
    for (auto& s : subs_) s->zero_grad();
  }

  Shape output_shape(const Shape& in) const override {
    return {in[0], spec_.total_channels(),
            conv_out_extent(in[2], 3, stride_, 1, 1),
            conv_out_extent(in[3], 3, stride_, 1, 1)};
  }

  long long macs(const Shape& in) const override {
    // Same cost as the plain convolution it replaces: channel counts sum to
    // C_out and dilation does not change MACs.
    const Shape out = output_shape(in);
    return 1LL * spec_.total_channels() * in_c_ * 9 * out[2] * out[3];
  }

  const DecodedBlockSpec& decoded_spec() const { return spec_; }

 private:
  DecodedBlockSpec spec_;
  int in_c_, stride_;
  std::vector<std::unique_ptr<Conv2d<T>>> subs_;
};

inline void to_json(nlohmann::json& j, const DecodedBlockSpec& spec) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : spec.entries)
    entries.push_back({{"dilation", e.genotype}, {"channels", e.channels}});
  j = {{"layer", spec.layer_id},
       {"entries", entries},
       {"permutation", spec.permutation}};
}

inline void from_json(const nlohmann::json& j, DecodedBlockSpec& spec) {
  spec.layer_id = j.at("layer").get<std::string>();
  spec.entries.clear();
  if (!j.at("entries").is_array() || j.at("entries").empty())
    throw ConfigError("decoded spec " + spec.layer_id +
                      ": \"entries\" must be a non-empty array");
  for (const auto& e : j.at("entries")) {
    DecodedEntry entry;
    entry.genotype = e.at("dilation").get<Genotype>();
    entry.channels = e.at("channels").get<int>();
    spec.entries.push_back(entry);
  }
  spec.permutation = j.at("permutation").get<std::vector<int>>();
  validate_decoded_spec(spec, spec.total_channels());
}

}  // namespace nats

#endif  // NATS_DECODER_HPP_
