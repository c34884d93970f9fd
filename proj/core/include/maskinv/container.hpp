// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace maskinv {

// One entry of the flat weight container: shape plus row-major f32 values.
struct NamedTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;
};

// Keys sorted; serialization is deterministic for a given map.
using TensorMap = std::map<std::string, NamedTensor>;

// Flat tensor container: 8-byte little-endian header length, JSON header
// mapping name -> {dtype, shape, data_offsets}, then raw little-endian f32
// data. Only dtype F32 is accepted.
TensorMap read_tensor_container(const std::string& path);
void write_tensor_container(const std::string& path, const TensorMap& tensors);

}  // namespace maskinv
