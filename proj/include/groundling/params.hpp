#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "groundling/rng.hpp"
#include "groundling/tensor.hpp"

namespace groundling {

// Named parameter collection. Iteration order is lexicographic everywhere
// (std::map), which keeps optimizer sweeps and checkpoints deterministic.
// Each tensor draws its init from its own stream seeded by the tensor name,
// so adding or removing one parameter never shifts another's values.
template <typename S>
struct ParamStore {
  std::map<std::string, Tensor<S>> tensors;
  std::set<std::string> trainable;

  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  Tensor<S>& get(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IndexError("no parameter named " + name);
    return it->second;
  }
  const Tensor<S>& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IndexError("no parameter named " + name);
    return it->second;
  }

  // Gaussian(0, scale) entries.
  Tensor<S>& add_gaussian(const std::string& name, std::vector<int> shape,
                          uint64_t init_seed, double scale) {
    SplitMix64 rng(mix_seed(init_seed, hash_name(name)));
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i)
      t.data[i] = S(rng.gaussian() * scale);
    return put(name, std::move(t));
  }

  Tensor<S>& add_constant(const std::string& name, std::vector<int> shape,
                          S value) {
    return put(name, Tensor<S>::full(std::move(shape), value));
  }

  Tensor<S>& put(const std::string& name, Tensor<S> t) {
    auto [it, fresh] = tensors.insert_or_assign(name, std::move(t));
    if (fresh) trainable.insert(name);
    return it->second;
  }

  void freeze(const std::string& name) {
    get(name);
    trainable.erase(name);
  }
  void unfreeze(const std::string& name) {
    get(name);
    trainable.insert(name);
  }
  void freeze_all() { trainable.clear(); }
  bool is_trainable(const std::string& name) const {
    return trainable.count(name) > 0;
  }

  // Names with the given prefix, in map order.
  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : tensors)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

  template <typename S2>
  ParamStore<S2> cast() const {
    ParamStore<S2> out;
    for (const auto& [k, v] : tensors) {
      Tensor<S2> t = Tensor<S2>::zeros(v.shape);
      for (int64_t i = 0; i < v.numel(); ++i) t.data[i] = S2(v.data[i]);
      out.tensors.emplace(k, std::move(t));
    }
    out.trainable = trainable;
    return out;
  }
};

}  // namespace groundling
