#pragma once

#include <string>
#include <utility>
#include <vector>

#include "utuning/autograd.hpp"

namespace utuning {

// Flat named-tensor container, little-endian throughout:
//   magic "UTNT" | u32 version (1) | u64 tensor count
//   per tensor: u32 name length | name bytes | u8 dtype (0 = f64)
//               | u32 rank | u64 extents... | raw f64 data
// Names are free-form; loaders match on them exactly.

void save_named_tensors(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::string& path);

/// Snapshot of parameter values.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Var>>& params);

/// Restores values into an existing parameter set. Every stored tensor must
/// find a matching name and shape; extras or misses are errors.
void load_checkpoint_into(const std::string& path,
                          const std::vector<std::pair<std::string, Var>>& params);

}  // namespace utuning
