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
#ifndef NATS_BACKBONE_HPP_
#define NATS_BACKBONE_HPP_

#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "nats/checkpoint.hpp"
#include "nats/decoder.hpp"
#include "nats/genotype.hpp"
#include "nats/layers.hpp"
#include "nats/mixed_conv.hpp"

namespace nats {

struct StageDesc {
  int blocks = 0;
  int mid_channels = 0;
  int stride = 1;
};

// Residual backbone description. Blocks are 1x1 -> 3x3 -> 1x1 bottlenecks
// with expansion 4; only the middle 3x3 of stages 3-5 is searchable. Stage
// ids follow the convention that stage 2 is the first residual stage.
struct BackboneSpec {
  std::string name;
  int input_channels = 1;
  int num_classes = 4;
  int stem_channels = 16;
  int stem_kernel = 3;
  int stem_stride = 1;
  bool stem_pool = false;
  int expansion = 4;
  bool desk_scale = true;
  std::vector<StageDesc> stages;  // index s -> stage id s+2

  static constexpr int kFirstStageId = 2;

  int stage_count() const { return static_cast<int>(stages.size()); }
  int stage_id(int index) const { return kFirstStageId + index; }
  int stage_index(int id) const { return id - kFirstStageId; }
  bool searchable_stage(int id) const { return id >= 3 && id <= 5; }

  int total_stride() const {
    int s = stem_stride * (stem_pool ? 2 : 1);
    for (const auto& st : stages) s *= st.stride;
    return s;
  }

  // Compact preset for CPU-scale experiments: full bottleneck topology with
  // narrow channels and total stride 8 so stage-5 dilations stay inside a
  // 64x64 input.
  static BackboneSpec mini_resnet() {
    BackboneSpec b;
    b.name = "mini-resnet";
    b.input_channels = 1;
    b.stem_channels = 16;
    b.stem_kernel = 3;
    b.stem_stride = 1;
    b.stem_pool = false;
    b.desk_scale = true;
    b.stages = {{2, 16, 1}, {2, 32, 2}, {2, 64, 2}, {2, 128, 2}};
    return b;
  }

  // ResNet-50 shaped preset (used for parity accounting, not for training
  // here).
  static BackboneSpec resnet50() {
    BackboneSpec b;
    b.name = "resnet50";
    b.input_channels = 3;
    b.num_classes = 1000;
    b.stem_channels = 64;
    b.stem_kernel = 7;
    b.stem_stride = 2;
    b.stem_pool = true;
    b.desk_scale = false;
    b.stages = {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}, {3, 512, 2}};
    return b;
  }

  static BackboneSpec preset(const std::string& name) {
    if (name == "mini-resnet") return mini_resnet();
    if (name == "resnet50") return resnet50();
    throw ConfigError("unknown backbone preset \"" + name +
                      "\" (expected mini-resnet or resnet50)");
  }
};

// 1x1 reduce -> 3x3 (searchable slot) -> 1x1 expand with residual shortcut.
template <typename T>
class BottleneckBlock : public Layer<T> {
 public:
  BottleneckBlock(int in_c, int mid_c, int out_c, int stride)
      : in_c_(in_c),
        mid_c_(mid_c),
        out_c_(out_c),
        stride_(stride),
        conv1_(std::make_unique<Conv2d<T>>(in_c, mid_c, 1, 1, 1, 1, 0, 0,
                                           false)),
        bn1_(mid_c),
        conv2_(Conv2d<T>::same(mid_c, mid_c, 3, stride)),
        bn2_(mid_c),
        conv3_(std::make_unique<Conv2d<T>>(mid_c, out_c, 1, 1, 1, 1, 0, 0,
                                           false)),
        bn3_(out_c),
        has_downsample_(stride != 1 || in_c != out_c) {
    if (has_downsample_) {
      ds_conv_ = std::make_unique<Conv2d<T>>(in_c, out_c, 1, stride, 1, 1, 0,
                                             0, false);
      ds_bn_ = std::make_unique<BatchNorm2d<T>>(out_c);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode) override {
    Tensor<T> a = relu1_.forward(bn1_.forward(conv1_->forward(x, mode), mode),
                                 mode);
    a = relu2_.forward(bn2_.forward(conv2_->forward(a, mode), mode), mode);
    Tensor<T> y = bn3_.forward(conv3_->forward(a, mode), mode);
    Tensor<T> shortcut =
        has_downsample_
            ? ds_bn_->forward(ds_conv_->forward(x, mode), mode)
            : x;
    if (!y.same_shape(shortcut))
      throw ShapeError("bottleneck: residual shape mismatch");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += shortcut[i];
    return relu_out_.forward(y, mode);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const Tensor<T> g = relu_out_.backward(gy);
    Tensor<T> gmain = conv1_->backward(bn1_.backward(
        relu1_.backward(conv2_->backward(bn2_.backward(relu2_.backward(
            conv3_->backward(bn3_.backward(g))))))));
    if (has_downsample_) {
      Tensor<T> gsc = ds_conv_->backward(ds_bn_->backward(g));
      for (std::size_t i = 0; i < gmain.size(); ++i) gmain[i] += gsc[i];
    } else {
      for (std::size_t i = 0; i < gmain.size(); ++i) gmain[i] += g[i];
    }
    return gmain;
  }

  void collect(const std::string& prefix, Registry<T>& reg) override {
    conv1_->collect(prefix + "conv1.", reg);
    bn1_.collect(prefix + "bn1.", reg);
    conv2_->collect(prefix + "conv2.", reg);
    bn2_.collect(prefix + "bn2.", reg);
    conv3_->collect(prefix + "conv3.", reg);
    bn3_.collect(prefix + "bn3.", reg);
    if (has_downsample_) {
      ds_conv_->collect(prefix + "downsample.conv.", reg);
      ds_bn_->collect(prefix + "downsample.bn.", reg);
    }
  }

  void zero_grad() override {
    conv1_->zero_grad();
    bn1_.zero_grad();
    conv2_->zero_grad();
    bn2_.zero_grad();
    conv3_->zero_grad();
    bn3_.zero_grad();
    if (has_downsample_) {
      ds_conv_->zero_grad();
      ds_bn_->zero_grad();
    }
  }

  Shape output_shape(const Shape& in) const override {
    return {in[0], out_c_, (in[2] + stride_ - 1) / stride_,
            (in[3] + stride_ - 1) / stride_};
  }

  long long macs(const Shape& in) const override {
    long long total = conv1_->macs(in);
    Shape a = conv1_->output_shape(in);
    total += conv2_->macs(a);
    a = conv2_->output_shape(a);
    total += conv3_->macs(a);
    if (has_downsample_) total += ds_conv_->macs(in);
    return total;
  }

  // Searchable-slot surgery used by supernet construction and plan
  // application.
  Layer<T>* conv2_slot() { return conv2_.get(); }
  void set_conv2(std::unique_ptr<Layer<T>> layer) { conv2_ = std::move(layer); }
  Conv2d<T>* conv2_as_plain() { return dynamic_cast<Conv2d<T>*>(conv2_.get()); }
  MixedDilatedConv<T>* conv2_as_mixed() {
    return dynamic_cast<MixedDilatedConv<T>*>(conv2_.get());
  }
  DecodedMultiConv<T>* conv2_as_decoded() {
    return dynamic_cast<DecodedMultiConv<T>*>(conv2_.get());
  }
  BatchNorm2d<T>& bn2() { return bn2_; }
  Conv2d<T>& conv3() { return *conv3_; }
  int mid_channels() const { return mid_c_; }
  int in_channels() const { return in_c_; }
  int out_channels() const { return out_c_; }
  int stride() const { return stride_; }

 private:
  int in_c_, mid_c_, out_c_, stride_;
  std::unique_ptr<Conv2d<T>> conv1_;
  BatchNorm2d<T> bn1_;
  ReLU<T> relu1_;
  std::unique_ptr<Layer<T>> conv2_;
  BatchNorm2d<T> bn2_;
  ReLU<T> relu2_;
  std::unique_ptr<Conv2d<T>> conv3_;
  BatchNorm2d<T> bn3_;
  std::unique_ptr<Conv2d<T>> ds_conv_;
  std::unique_ptr<BatchNorm2d<T>> ds_bn_;
  ReLU<T> relu_out_;
  bool has_downsample_;
};

template <typename T>
class Backbone {
 public:
  explicit Backbone(const BackboneSpec& spec)
      : spec_(spec),
        stem_conv_(std::make_unique<Conv2d<T>>(
            spec.input_channels, spec.stem_channels, spec.stem_kernel,
            spec.stem_stride, 1, 1, spec.stem_kernel / 2, spec.stem_kernel / 2,
            false)),
        stem_bn_(spec.stem_channels),
        fc_(nullptr) {
    if (spec.stem_pool) pool_ = std::make_unique<MaxPool2d<T>>(3, 2, 1);
    int in_c = spec.stem_channels;
    for (int s = 0; s < spec.stage_count(); ++s) {
      const StageDesc& st = spec.stages[static_cast<std::size_t>(s)];
      std::vector<std::unique_ptr<BottleneckBlock<T>>> blocks;
      for (int b = 0; b < st.blocks; ++b) {
        const int stride = b == 0 ? st.stride : 1;
        const int out_c = st.mid_channels * spec.expansion;
        blocks.push_back(std::make_unique<BottleneckBlock<T>>(
            in_c, st.mid_channels, out_c, stride));
        in_c = out_c;
      }
      stages_.push_back(std::move(blocks));
    }
    feature_channels_ = in_c;
    fc_ = std::make_unique<Linear<T>>(in_c, spec.num_classes);
  }

  const BackboneSpec& spec() const { return spec_; }
  int feature_channels() const { return feature_channels_; }

  Tensor<T> forward_features(const Tensor<T>& x, RunMode mode) {
    Tensor<T> h = stem_relu_.forward(
        stem_bn_.forward(stem_conv_->forward(x, mode), mode), mode);
    if (pool_) h = pool_->forward(h, mode);
    for (auto& stage : stages_)
      for (auto& block : stage) h = block->forward(h, mode);
    return h;
  }

  Tensor<T> forward(const Tensor<T>& x, RunMode mode) {
    Tensor<T> h = forward_features(x, mode);
    h = gap_.forward(h, mode);
    return fc_->forward(h, mode);
  }

  Tensor<T> backward_features(const Tensor<T>& gfeatures) {
    Tensor<T> g = gfeatures;
    for (auto stage = stages_.rbegin(); stage != stages_.rend(); ++stage)
      for (auto block = stage->rbegin(); block != stage->rend(); ++block)
        g = (*block)->backward(g);
    if (pool_) g = pool_->backward(g);
    return stem_conv_->backward(stem_bn_.backward(stem_relu_.backward(g)));
  }

  Tensor<T> backward(const Tensor<T>& glogits) {
    Tensor<T> g = fc_->backward(glogits);
    g = gap_.backward(g);
    return backward_features(g);
  }

  void collect(Registry<T>& reg) {
    stem_conv_->collect("stem.conv.", reg);
    stem_bn_.collect("stem.bn.", reg);
    for (int s = 0; s < spec_.stage_count(); ++s)
      for (std::size_t b = 0; b < stages_[static_cast<std::size_t>(s)].size();
           ++b)
        stages_[static_cast<std::size_t>(s)][b]->collect(
            layer_id(spec_.stage_id(s), static_cast<int>(b)) + ".", reg);
    fc_->collect("head.fc.", reg);
  }

  void zero_grad() {
    stem_conv_->zero_grad();
    stem_bn_.zero_grad();
    for (auto& stage : stages_)
      for (auto& block : stage) block->zero_grad();
    fc_->zero_grad();
  }

  static std::string layer_id(int stage_id, int block_index) {
    return "stage" + std::to_string(stage_id) + ".block" +
           std::to_string(block_index);
  }

  std::vector<std::string> searchable_layer_ids() const {
    std::vector<std::string> ids;
    for (int s = 0; s < spec_.stage_count(); ++s) {
      const int id = spec_.stage_id(s);
      if (!spec_.searchable_stage(id)) continue;
      for (std::size_t b = 0; b < stages_[static_cast<std::size_t>(s)].size();
           ++b)
        ids.push_back(layer_id(id, static_cast<int>(b)));
    }
    return ids;
  }

  BottleneckBlock<T>& block(int stage_id, int block_index) {
    return *stages_[static_cast<std::size_t>(spec_.stage_index(stage_id))]
                   [static_cast<std::size_t>(block_index)];
  }

  BottleneckBlock<T>& block(const std::string& id) {
    // ids look like "stage3.block1"
    const auto dot = id.find('.');
    if (dot == std::string::npos || id.substr(0, 5) != "stage" ||
        id.substr(dot + 1, 5) != "block")
      throw ConfigError("malformed layer id \"" + id + "\"");
    const int stage_id = std::stoi(id.substr(5, dot - 5));
    const int block_index = std::stoi(id.substr(dot + 6));
    const int si = spec_.stage_index(stage_id);
    if (si < 0 || si >= spec_.stage_count() ||
        block_index >= static_cast<int>(stages_[static_cast<std::size_t>(si)].size()))
      throw ConfigError("layer id \"" + id + "\" not present in backbone " +
                        spec_.name);
    return block(stage_id, block_index);
  }

  std::map<std::string, MixedDilatedConv<T>*> mixed_layers() {
    std::map<std::string, MixedDilatedConv<T>*> out;
    for (const std::string& id : searchable_layer_ids())
      if (auto* m = block(id).conv2_as_mixed()) out[id] = m;
    return out;
  }

  int stage_count() const { return spec_.stage_count(); }
  int blocks_in_stage(int stage_id) const {
    return static_cast<int>(
        stages_[static_cast<std::size_t>(spec_.stage_index(stage_id))].size());
  }

  long long count_params() {
    Registry<T> reg;
    collect(reg);
    long long n = 0;
    for (const auto& p : reg.params)
      n += static_cast<long long>(p.value->size());
    return n;
  }

  long long count_macs(int in_h, int in_w) const {
    Shape shape{1, spec_.input_channels, in_h, in_w};
    long long total = stem_conv_->macs(shape);
    shape = stem_conv_->output_shape(shape);
    if (pool_) shape = pool_->output_shape(shape);
    for (const auto& stage : stages_)
      for (const auto& block : stage) {
        total += block->macs(shape);
        shape = block->output_shape(shape);
      }
    total += fc_->macs({shape[0], feature_channels_});
    return total;
  }

 private:
  BackboneSpec spec_;
  std::unique_ptr<Conv2d<T>> stem_conv_;
  BatchNorm2d<T> stem_bn_;
  ReLU<T> stem_relu_;
  std::unique_ptr<MaxPool2d<T>> pool_;
  std::vector<std::vector<std::unique_ptr<BottleneckBlock<T>>>> stages_;
  GlobalAvgPool<T> gap_;
  std::unique_ptr<Linear<T>> fc_;
  int feature_channels_ = 0;
};

// Deterministic He initialization of all convolution / linear kernels, in
// registry order. Norm scales and biases keep their constructor values.
template <typename T>
void init_params(Backbone<T>& net, std::uint64_t seed) {
  Registry<T> reg;
  net.collect(reg);
  std::mt19937_64 rng(derive_seed(seed, 0x11));
  for (auto& p : reg.params) {
    const bool kernel =
        p.name.size() > 6 && p.name.ends_with("weight") && p.value->rank() >= 2;
    if (!kernel) continue;
    std::size_t fan_in = 1;
    for (int d = 1; d < p.value->rank(); ++d)
      fan_in *= static_cast<std::size_t>(p.value->dim(d));
    fill_he_normal(*p.value, rng, fan_in);
  }
}

template <typename T>
Backbone<T> build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  Backbone<T> net(spec);
  init_params(net, seed);
  return net;
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> named_arrays(
    Backbone<T>& net) {
  Registry<T> reg;
  net.collect(reg);
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (const auto& p : reg.params) out.emplace_back(p.name, p.value);
  for (const auto& b : reg.buffers) out.emplace_back(b.name, b.value);
  return out;
}

template <typename T>
void save_network(Backbone<T>& net, const std::filesystem::path& dir,
                  nlohmann::json extras = nlohmann::json::object()) {
  extras["backbone"] = net.spec().name;
  extras["num_classes"] = net.spec().num_classes;
  extras["input_channels"] = net.spec().input_channels;
  save_checkpoint<T>(dir, named_arrays(net), extras);
}

template <typename T>
void load_arrays_into(Backbone<T>& net,
                      const std::map<std::string, Tensor<T>>& arrays) {
  Registry<T> reg;
  net.collect(reg);
  auto copy_into = [&](const std::string& name, Tensor<T>* dst) {
    auto it = arrays.find(name);
    if (it == arrays.end())
      throw ConfigError("checkpoint missing array \"" + name + "\"");
    if (it->second.shape() != dst->shape())
      throw ConfigError("checkpoint shape mismatch for \"" + name +
                        "\": file has " + shape_str(it->second.shape()) +
                        ", network needs " + shape_str(dst->shape()));
    std::copy(it->second.data(), it->second.data() + it->second.size(),
              dst->data());
  };
  for (auto& p : reg.params) copy_into(p.name, p.value);
  for (auto& b : reg.buffers) copy_into(b.name, b.value);
}

template <typename T>
void load_network(Backbone<T>& net, const std::filesystem::path& dir) {
  load_arrays_into(net, load_checkpoint<T>(dir));
}

// ---------------------------------------------------------------------------
// Supernet construction

// Replace every searchable 3x3 convolution with a channel-grouped mixture of
// dilated replicas; each replica starts as a copy of the layer's current
// kernel and all alphas start at zero (a uniform mixture).
template <typename T>
std::map<std::string, MixedDilatedConv<T>*> to_supernet(
    Backbone<T>& net, const SearchSpaceConfig& space) {
  validate_search_space(space);
  std::map<std::string, MixedDilatedConv<T>*> handles;
  for (const std::string& id : net.searchable_layer_ids()) {
    BottleneckBlock<T>& blk = net.block(id);
    const int stage_id = std::stoi(id.substr(5, id.find('.') - 5));
    const StageSpace& stage_space = space.stage(stage_id);
    Conv2d<T>* plain = blk.conv2_as_plain();
    if (!plain)
      throw InternalError("to_supernet: slot of " + id + " already replaced");

    MixedConvSpec spec;
    spec.in_channels = blk.mid_channels();
    spec.out_channels = blk.mid_channels();
    spec.stride = blk.stride();
    spec.genotypes = stage_space.genotypes;
    spec.group_count = group_count_for_layer(space, spec.out_channels, id);
    validate_mixed_spec(spec, id);

    auto mixed = std::make_unique<MixedDilatedConv<T>>(spec);
    mixed->set_baseline(plain->weight);
    handles[id] = mixed.get();
    blk.set_conv2(std::move(mixed));
  }
  return handles;
}

template <typename T>
struct Supernet {
  Backbone<T> net;
  std::map<std::string, MixedDilatedConv<T>*> mixed;
};

// Baseline weights, when given, are loaded into the plain backbone before
// the searchable slots are replaced, so every replica starts from the
// baseline kernel and everything else keeps the baseline values.
template <typename T>
Supernet<T> build_supernet(const BackboneSpec& backbone,
                           const SearchSpaceConfig& space, std::uint64_t seed,
                           const std::map<std::string, Tensor<T>>*
                               baseline_weights = nullptr) {
  Supernet<T> s{build_backbone<T>(backbone, seed), {}};
  if (baseline_weights) load_arrays_into(s.net, *baseline_weights);
  s.mixed = to_supernet(s.net, space);
  return s;
}

// ---------------------------------------------------------------------------
// Transform plans

struct PlanProvenance {
  std::string config_digest;
  int epoch = -1;
  std::string dataset_id;
};

struct TransformPlan {
  std::string backbone;
  SearchSpaceConfig search_space;
  std::map<std::string, DecodedBlockSpec> layers;
  PlanProvenance provenance;
};

inline void to_json(nlohmann::json& j, const PlanProvenance& p) {
  j = {{"config_digest", p.config_digest},
       {"epoch", p.epoch},
       {"dataset_id", p.dataset_id}};
}

inline void from_json(const nlohmann::json& j, PlanProvenance& p) {
  p.config_digest = j.value("config_digest", "");
  p.epoch = j.value("epoch", -1);
  p.dataset_id = j.value("dataset_id", "");
}

inline void to_json(nlohmann::json& j, const TransformPlan& plan) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [id, spec] : plan.layers) layers[id] = spec;
  j = {{"backbone", plan.backbone},
       {"search_space", plan.search_space},
       {"layers", layers},
       {"provenance", plan.provenance}};
}

inline void from_json(const nlohmann::json& j, TransformPlan& plan) {
  plan.backbone = j.at("backbone").get<std::string>();
  plan.search_space = j.at("search_space").get<SearchSpaceConfig>();
  plan.layers.clear();
  for (const auto& [id, spec] : j.at("layers").items()) {
    DecodedBlockSpec s = spec.get<DecodedBlockSpec>();
    if (s.layer_id != id)
      throw ConfigError("plan layer key \"" + id +
                        "\" disagrees with entry layer \"" + s.layer_id +
                        "\"");
    plan.layers[id] = std::move(s);
  }
  plan.provenance = j.value("provenance", PlanProvenance{});
}

template <typename T>
void validate_plan(const TransformPlan& plan, Backbone<T>& net) {
  if (plan.backbone != net.spec().name)
    throw ConfigError("plan targets backbone \"" + plan.backbone +
                      "\" but network is \"" + net.spec().name + "\"");
  const auto ids = net.searchable_layer_ids();
  if (plan.layers.size() != ids.size())
    throw ConfigError("plan covers " + std::to_string(plan.layers.size()) +
                      " layers, backbone has " + std::to_string(ids.size()) +
                      " searchable layers");
  for (const std::string& id : ids) {
    auto it = plan.layers.find(id);
    if (it == plan.layers.end())
      throw ConfigError("plan is missing layer \"" + id + "\"");
    validate_decoded_spec(it->second, net.block(id).mid_channels());
  }
}

// Weight slices for a decoded layer, taken per entry from the baseline
// kernel rows in decoded order.
template <typename T>
std::vector<Tensor<T>> decompose_by_spec(const Tensor<T>& baseline,
                                         const DecodedBlockSpec& spec) {
  const std::vector<int> gather = spec.gather();
  const std::size_t row = static_cast<std::size_t>(baseline.dim(1)) *
                          baseline.dim(2) * baseline.dim(3);
  std::vector<Tensor<T>> out;
  int pos = 0;
  for (const auto& entry : spec.entries) {
    Tensor<T> slice({entry.channels, baseline.dim(1), baseline.dim(2),
                     baseline.dim(3)});
    for (int r = 0; r < entry.channels; ++r) {
      const int src = gather[static_cast<std::size_t>(pos + r)];
      std::copy(baseline.data() + static_cast<std::size_t>(src) * row,
                baseline.data() + (static_cast<std::size_t>(src) + 1) * row,
                slice.data() + static_cast<std::size_t>(r) * row);
    }
    pos += entry.channels;
    out.push_back(std::move(slice));
  }
  return out;
}

template <typename T>
void permute_channels(Tensor<T>& t, const std::vector<int>& gather, int axis) {
  Tensor<T> src = t;
  if (axis == 0) {
    const std::size_t row = t.size() / static_cast<std::size_t>(t.dim(0));
    for (int p = 0; p < t.dim(0); ++p)
      std::copy(src.data() + static_cast<std::size_t>(gather[static_cast<std::size_t>(p)]) * row,
                src.data() + static_cast<std::size_t>(gather[static_cast<std::size_t>(p)] + 1) * row,
                t.data() + static_cast<std::size_t>(p) * row);
  } else if (axis == 1) {
    std::size_t inner = 1;
    for (int d = 2; d < t.rank(); ++d)
      inner *= static_cast<std::size_t>(t.dim(d));
    for (int o = 0; o < t.dim(0); ++o)
      for (int p = 0; p < t.dim(1); ++p)
        std::copy(src.data() + (static_cast<std::size_t>(o) * t.dim(1) +
                                gather[static_cast<std::size_t>(p)]) *
                                   inner,
                  src.data() + (static_cast<std::size_t>(o) * t.dim(1) +
                                gather[static_cast<std::size_t>(p)] + 1) *
                                   inner,
                  t.data() + (static_cast<std::size_t>(o) * t.dim(1) + p) *
                                 inner);
  } else {
    throw InternalError("permute_channels: unsupported axis");
  }
}

// Apply a decoded plan to a baseline network in place: each searchable 3x3
// becomes the concatenation of per-genotype sub-convolutions with weights
// decomposed from the baseline kernel, and the induced channel reorder is
// propagated into the following normalization and the next 1x1 convolution
// so the block stays functionally identical to the hard-selected supernet.
template <typename T>
void apply_plan_inplace(Backbone<T>& net, const TransformPlan& plan) {
  validate_plan(plan, net);
  for (const auto& [id, spec] : plan.layers) {
    BottleneckBlock<T>& blk = net.block(id);
    Conv2d<T>* plain = blk.conv2_as_plain();
    if (!plain)
      throw InternalError("apply_plan: slot of " + id + " already replaced");
    auto weights = decompose_by_spec(plain->weight, spec);
    auto decoded = std::make_unique<DecodedMultiConv<T>>(
        spec, blk.mid_channels(), blk.stride(), std::move(weights));
    blk.set_conv2(std::move(decoded));

    if (!spec.identity_permutation()) {
      const std::vector<int> gather = spec.gather();
      permute_channels(blk.bn2().gamma, gather, 0);
      permute_channels(blk.bn2().beta, gather, 0);
      permute_channels(blk.bn2().running_mean, gather, 0);
      permute_channels(blk.bn2().running_var, gather, 0);
      permute_channels(blk.conv3().weight, gather, 1);
    }
  }
}

template <typename T>
Backbone<T> apply_plan(const BackboneSpec& backbone, const TransformPlan& plan,
                       const std::map<std::string, Tensor<T>>& baseline_weights,
                       std::uint64_t seed = 0) {
  Backbone<T> net = build_backbone<T>(backbone, seed);
  load_arrays_into(net, baseline_weights);
  apply_plan_inplace(net, plan);
  return net;
}

struct CountResult {
  long long params = 0;
  long long macs = 0;

  friend bool operator==(const CountResult&, const CountResult&) = default;
};

// Learnable parameter count plus multiply-accumulate count at the given
// input size (convolutions and the classifier head; normalization and
// pooling contribute no MACs).
template <typename T>
CountResult count_params_flops(Backbone<T>& net, int in_h, int in_w) {
  return {net.count_params(), net.count_macs(in_h, in_w)};
}

}  // namespace nats

#endif  // NATS_BACKBONE_HPP_
