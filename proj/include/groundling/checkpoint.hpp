#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "groundling/params.hpp"

namespace groundling {

// Binary training snapshot. Tensors are stored as f32 little-endian
// row-major regardless of the runtime scalar; optimizer moments ride along
// as ordinary tensors under opt.* names. save -> load -> save is
// byte-identical.
struct Checkpoint {
  std::string stage;
  ParamStore<float> params;
  std::string config_text;
  std::map<std::string, uint64_t> rng_states;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);

// Throws BadMagic on a foreign file, FormatError on truncation.
Checkpoint load_checkpoint(const std::string& path);

// Copies values from `from` into `into` for every name `into` already has.
// Missing names throw FormatError; shape conflicts throw DimensionMismatch
// naming the tensor. Extra tensors in `from` are left behind (heads that a
// later stage drops, optimizer state the caller unpacks separately).
template <typename S>
void merge_params(ParamStore<S>& into, const ParamStore<float>& from) {
  for (auto& [name, t] : into.tensors) {
    auto it = from.tensors.find(name);
    if (it == from.tensors.end())
      throw FormatError("checkpoint is missing tensor " + name);
    if (it->second.shape != t.shape)
      throw DimensionMismatch("tensor " + name + ": stored " +
                              shape_str(it->second.shape) + " vs model " +
                              shape_str(t.shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = S(it->second.data[i]);
  }
}

// Stage-transition merge: copies only the names both sides have, so a later
// stage can attach fresh heads while inheriting the shared trunk. Names under
// `required` prefixes must come from the checkpoint; anything else absent
// keeps its fresh init. Shape conflicts throw as in merge_params.
template <typename S>
void merge_params_partial(ParamStore<S>& into, const ParamStore<float>& from,
                          const std::vector<std::string>& required) {
  for (auto& [name, t] : into.tensors) {
    auto it = from.tensors.find(name);
    if (it == from.tensors.end()) {
      for (const std::string& prefix : required)
        if (name.rfind(prefix, 0) == 0)
          throw FormatError("checkpoint is missing tensor " + name);
      continue;
    }
    if (it->second.shape != t.shape)
      throw DimensionMismatch("tensor " + name + ": stored " +
                              shape_str(it->second.shape) + " vs model " +
                              shape_str(t.shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = S(it->second.data[i]);
  }
}

}  // namespace groundling
