#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevalign/random.hpp"
#include "bevalign/tensor.hpp"

namespace bevalign {

// Every trainable tensor belongs to exactly one group; checkpoint loading
// can filter on them (backbone-only warm starts).
enum class ParamGroup { backbone_img, backbone_pcd, adapters, prompts, auxiliary };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone_img: return "backbone_img";
    case ParamGroup::backbone_pcd: return "backbone_pcd";
    case ParamGroup::adapters: return "adapters";
    case ParamGroup::prompts: return "prompts";
    case ParamGroup::auxiliary: return "auxiliary";
  }
  throw std::logic_error("group_name: unknown group");
}

inline std::optional<ParamGroup> group_from_name(const std::string& s) {
  if (s == "backbone_img") return ParamGroup::backbone_img;
  if (s == "backbone_pcd") return ParamGroup::backbone_pcd;
  if (s == "adapters") return ParamGroup::adapters;
  if (s == "prompts") return ParamGroup::prompts;
  if (s == "auxiliary") return ParamGroup::auxiliary;
  return std::nullopt;
}

// Named trainable tensors. Iteration order is the sorted name order, so
// optimizer sweeps and checkpoint layouts are deterministic.
class ParameterStore {
public:
  Tensor create(const std::string& name, ParamGroup group, std::size_t rows, std::size_t cols,
                std::vector<double> values) {
    if (entries_.count(name)) {
      throw std::logic_error("ParameterStore: duplicate parameter " + name);
    }
    Tensor t = Tensor::from_values(rows, cols, std::move(values), true);
    entries_.emplace(name, Entry{t, group});
    return t;
  }

  Tensor create_zeros(const std::string& name, ParamGroup group, std::size_t rows,
                      std::size_t cols) {
    return create(name, group, rows, cols, std::vector<double>(rows * cols, 0.0));
  }

  Tensor create_normal(const std::string& name, ParamGroup group, std::size_t rows,
                       std::size_t cols, Rng& rng, double stddev) {
    return create(name, group, rows, cols, random_normal_values(rng, rows * cols, stddev));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw std::out_of_range("ParameterStore: unknown parameter " + name);
    }
    return it->second.tensor;
  }

  ParamGroup group_of(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw std::out_of_range("ParameterStore: unknown parameter " + name);
    }
    return it->second.group;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, entry] : entries_) out.push_back(name);
    return out;
  }

  std::vector<std::string> names_in_group(ParamGroup g) const {
    std::vector<std::string> out;
    for (const auto& [name, entry] : entries_) {
      if (entry.group == g) out.push_back(name);
    }
    return out;
  }

  void clear_grads() {
    for (auto& [name, entry] : entries_) entry.tensor.clear_grad();
  }

  std::size_t size() const { return entries_.size(); }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& [name, entry] : entries_) n += entry.tensor.size();
    return n;
  }

private:
  struct Entry {
    Tensor tensor;
    ParamGroup group;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace bevalign
