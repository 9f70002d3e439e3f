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
#ifndef NATS_GENOTYPE_HPP_
#define NATS_GENOTYPE_HPP_

#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nats/common.hpp"

namespace nats {

// A candidate operation: a 3x3 convolution with per-orientation dilation
// (d_h vertical, d_w horizontal). (1,3) and (3,1) are distinct candidates.
struct Genotype {
  int d_h = 1;
  int d_w = 1;

  friend bool operator==(const Genotype&, const Genotype&) = default;
  friend auto operator<=>(const Genotype&, const Genotype&) = default;

  bool symmetric() const { return d_h == d_w; }
  // Scalar summary used by analysis: the dilation for symmetric candidates,
  // the mean of both orientations otherwise.
  double mean_dilation() const { return 0.5 * (d_h + d_w); }

  std::string str() const {
    return "(" + std::to_string(d_h) + "," + std::to_string(d_w) + ")";
  }
};

inline void validate_genotype(const Genotype& g) {
  if (g.d_h < 1 || g.d_w < 1)
    throw ConfigError("genotype dilations must be >= 1, got " + g.str());
}

// Ordered candidate set for one backbone stage. The position of a genotype in
// `genotypes` is the index used by alpha tables and decoding; it is fixed at
// construction time.
struct StageSpace {
  int stage_id = 0;
  std::vector<Genotype> genotypes;

  int candidate_count() const { return static_cast<int>(genotypes.size()); }
};

inline void validate_stage_space(const StageSpace& s) {
  if (s.genotypes.empty())
    throw ConfigError("stage " + std::to_string(s.stage_id) +
                      ": empty genotype list");
  std::set<Genotype> seen;
  for (const Genotype& g : s.genotypes) {
    validate_genotype(g);
    if (!seen.insert(g).second)
      throw ConfigError("stage " + std::to_string(s.stage_id) +
                        ": duplicate genotype " + g.str());
  }
}

enum class GroupingMode { fixed_group_count, fixed_channels_per_group };

inline std::string to_string(GroupingMode m) {
  return m == GroupingMode::fixed_group_count ? "fixed_group_count"
                                              : "fixed_channels_per_group";
}

inline GroupingMode grouping_mode_from_string(const std::string& s) {
  if (s == "fixed_group_count") return GroupingMode::fixed_group_count;
  if (s == "fixed_channels_per_group")
    return GroupingMode::fixed_channels_per_group;
  throw ConfigError("unknown grouping_mode \"" + s + "\"");
}

// The searchable-space surface: per-stage candidate sets for stages 3-5 plus
// the channel-grouping rule.
struct SearchSpaceConfig {
  std::string setting = "B";  // "A", "B", "C" or "custom"
  GroupingMode grouping_mode = GroupingMode::fixed_group_count;
  int grouping_value = 16;
  std::map<int, StageSpace> stage_spaces;

  const StageSpace& stage(int stage_id) const {
    auto it = stage_spaces.find(stage_id);
    if (it == stage_spaces.end())
      throw ConfigError("search space has no stage " +
                        std::to_string(stage_id));
    return it->second;
  }
};

inline void validate_search_space(const SearchSpaceConfig& cfg) {
  if (cfg.grouping_value < 1)
    throw ConfigError("grouping_value must be >= 1, got " +
                      std::to_string(cfg.grouping_value));
  std::set<int> ids;
  for (const auto& [id, space] : cfg.stage_spaces) {
    if (id != space.stage_id)
      throw InternalError("stage map key/id mismatch");
    validate_stage_space(space);
    ids.insert(id);
  }
  if (ids != std::set<int>{3, 4, 5})
    throw ConfigError("search space must cover exactly stages 3,4,5");
}

// Built-in candidate sets. Scalar dilations expand to symmetric pairs (d,d);
// symmetric candidates come first in ascending order, asymmetric pairs after
// them, so index 0 is always the untransformed baseline (1,1).
//   A: stage3 {1,3}, stage4 {1,3}, stage5 {1,3,5}
//   B: stage3 {1,2,3}, stage4 {1,2,3}, stage5 {1,2,3,4,5}
//   C: B plus {(1,3),(3,1)} for stages 3-4 and {(1,3),(3,1),(1,5),(5,1)}
//      for stage 5
inline SearchSpaceConfig default_space(const std::string& setting) {
  auto sym = [](std::initializer_list<int> ds) {
    std::vector<Genotype> out;
    for (int d : ds) out.push_back({d, d});
    return out;
  };
  SearchSpaceConfig cfg;
  cfg.setting = setting;
  std::map<int, std::vector<Genotype>> per_stage;
  if (setting == "A") {
    per_stage[3] = sym({1, 3});
    per_stage[4] = sym({1, 3});
    per_stage[5] = sym({1, 3, 5});
  } else if (setting == "B") {
    per_stage[3] = sym({1, 2, 3});
    per_stage[4] = sym({1, 2, 3});
    per_stage[5] = sym({1, 2, 3, 4, 5});
  } else if (setting == "C") {
    per_stage[3] = sym({1, 2, 3});
    per_stage[4] = sym({1, 2, 3});
    per_stage[5] = sym({1, 2, 3, 4, 5});
    for (int s : {3, 4}) {
      per_stage[s].push_back({1, 3});
      per_stage[s].push_back({3, 1});
    }
    per_stage[5].push_back({1, 3});
    per_stage[5].push_back({3, 1});
    per_stage[5].push_back({1, 5});
    per_stage[5].push_back({5, 1});
  } else {
    throw ConfigError("unknown search-space setting \"" + setting +
                      "\" (expected A, B or C)");
  }
  for (const auto& [id, genos] : per_stage)
    cfg.stage_spaces[id] = StageSpace{id, genos};
  validate_search_space(cfg);
  return cfg;
}

// Number of channel groups N for a layer with `out_channels` outputs.
// fixed_group_count: N = grouping_value; fixed_channels_per_group:
// N = out_channels / grouping_value. Division must be exact in both modes.
inline int group_count_for_layer(const SearchSpaceConfig& cfg,
                                 int out_channels,
                                 const std::string& layer_id = "") {
  if (out_channels < 1)
    throw ConfigError("out_channels must be >= 1, got " +
                      std::to_string(out_channels));
  const std::string where = layer_id.empty() ? "layer" : "layer " + layer_id;
  int groups;
  if (cfg.grouping_mode == GroupingMode::fixed_group_count) {
    groups = cfg.grouping_value;
  } else {
    if (out_channels % cfg.grouping_value != 0)
      throw ConfigError(where + ": out_channels " +
                        std::to_string(out_channels) +
                        " not divisible by channels-per-group " +
                        std::to_string(cfg.grouping_value));
    groups = out_channels / cfg.grouping_value;
  }
  if (out_channels % groups != 0)
    throw ConfigError(where + ": out_channels " +
                      std::to_string(out_channels) +
                      " not divisible into " + std::to_string(groups) +
                      " equal groups");
  return groups;
}

inline void to_json(nlohmann::json& j, const Genotype& g) {
  j = nlohmann::json::array({g.d_h, g.d_w});
}

inline void from_json(const nlohmann::json& j, Genotype& g) {
  if (!j.is_array() || j.size() != 2)
    throw ConfigError("genotype must be a [d_h, d_w] pair, got " + j.dump());
  g.d_h = j[0].get<int>();
  g.d_w = j[1].get<int>();
  validate_genotype(g);
}

inline void to_json(nlohmann::json& j, const SearchSpaceConfig& cfg) {
  nlohmann::json stages = nlohmann::json::object();
  for (const auto& [id, space] : cfg.stage_spaces)
    stages[std::to_string(id)] = space.genotypes;
  j = {{"setting", cfg.setting},
       {"grouping_mode", to_string(cfg.grouping_mode)},
       {"grouping_value", cfg.grouping_value},
       {"stages", stages}};
}

inline void from_json(const nlohmann::json& j, SearchSpaceConfig& cfg) {
  cfg.setting = j.at("setting").get<std::string>();
  cfg.grouping_mode =
      grouping_mode_from_string(j.at("grouping_mode").get<std::string>());
  cfg.grouping_value = j.at("grouping_value").get<int>();
  cfg.stage_spaces.clear();
  for (const auto& [key, genos] : j.at("stages").items()) {
    StageSpace space;
    space.stage_id = std::stoi(key);
    space.genotypes = genos.get<std::vector<Genotype>>();
    cfg.stage_spaces[space.stage_id] = std::move(space);
  }
  validate_search_space(cfg);
}

}  // namespace nats

#endif  // NATS_GENOTYPE_HPP_
