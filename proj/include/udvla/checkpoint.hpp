#pragma once

#include <string>
#include <utility>
#include <vector>

#include "udvla/tensor.hpp"

namespace udvla {

// Binary tensor-table file, magic "UDVLA01\0", little-endian. Each entry is
// (name-length u32, name utf-8, rank u32, dims u32 x rank, payload f64);
// a trailing u64 holds the entry count.
void save_tensor_table(const std::string& path,
                       const std::vector<std::pair<std::string, Tensor>>& entries);
std::vector<std::pair<std::string, Tensor>> load_tensor_table(
    const std::string& path);

}  // namespace udvla
