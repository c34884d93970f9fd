// SPDX-License-Identifier: Apache-2.0
#include "maskinv/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "maskinv/errors.hpp"

namespace maskinv {

namespace {

using json = nlohmann::ordered_json;

// On-disk numbers are little-endian; this codec assumes a little-endian
// host, which the build targets.
static_assert(std::endian::native == std::endian::little,
              "tensor container codec requires a little-endian host");

std::uint64_t checked_elements(const std::vector<std::int64_t>& shape,
                               const std::string& name) {
  std::uint64_t count = 1;
  for (std::int64_t dim : shape) {
    if (dim < 0) {
      throw LoadError("tensor '" + name + "' has a negative dimension");
    }
    count *= static_cast<std::uint64_t>(dim);
  }
  return count;
}

}  // namespace

TensorMap read_tensor_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");

  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) throw LoadError("'" + path + "': truncated header length");
  if (header_len == 0 || header_len > (1ull << 30)) {
    throw LoadError("'" + path + "': implausible header length " +
                    std::to_string(header_len));
  }

  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw LoadError("'" + path + "': truncated header");

  json root;
  try {
    root = json::parse(header);
  } catch (const json::parse_error& e) {
    throw LoadError("'" + path + "': bad container header: " + e.what());
  }
  if (!root.is_object()) {
    throw LoadError("'" + path + "': container header must be an object");
  }

  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());

  TensorMap tensors;
  for (const auto& [name, entry] : root.items()) {
    if (name == "__metadata__") continue;
    if (!entry.is_object()) {
      throw LoadError("'" + path + "': entry '" + name +
                      "' must be an object");
    }
    const std::string dtype = entry.value("dtype", std::string());
    if (dtype != "F32") {
      throw LoadError("'" + path + "': tensor '" + name +
                      "' has unsupported dtype '" + dtype + "'");
    }
    NamedTensor tensor;
    const auto shape_it = entry.find("shape");
    if (shape_it == entry.end() || !shape_it->is_array()) {
      throw LoadError("'" + path + "': tensor '" + name + "' lacks a shape");
    }
    for (const auto& dim : *shape_it) {
      if (!dim.is_number_integer()) {
        throw LoadError("'" + path + "': tensor '" + name +
                        "' has a non-integer dimension");
      }
      tensor.shape.push_back(dim.get<std::int64_t>());
    }
    const auto off_it = entry.find("data_offsets");
    if (off_it == entry.end() || !off_it->is_array() || off_it->size() != 2) {
      throw LoadError("'" + path + "': tensor '" + name +
                      "' lacks data_offsets");
    }
    const std::uint64_t begin = (*off_it)[0].get<std::uint64_t>();
    const std::uint64_t end = (*off_it)[1].get<std::uint64_t>();
    const std::uint64_t count = checked_elements(tensor.shape, name);
    if (end < begin || end > data.size() ||
        end - begin != count * sizeof(float)) {
      throw LoadError("'" + path + "': tensor '" + name +
                      "' has inconsistent data_offsets");
    }
    tensor.values.resize(count);
    std::memcpy(tensor.values.data(), data.data() + begin, end - begin);
    tensors.emplace(name, std::move(tensor));
  }
  return tensors;
}

void write_tensor_container(const std::string& path, const TensorMap& tensors) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    const std::uint64_t count = checked_elements(tensor.shape, name);
    if (count != tensor.values.size()) {
      throw ArgumentError("tensor '" + name + "' shape does not match " +
                          std::to_string(tensor.values.size()) + " values");
    }
    json entry;
    entry["dtype"] = "F32";
    entry["shape"] = tensor.shape;
    const std::uint64_t bytes = count * sizeof(float);
    entry["data_offsets"] = {offset, offset + bytes};
    header[name] = std::move(entry);
    offset += bytes;
  }

  const std::string header_text = header.dump();
  const std::uint64_t header_len = header_text.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, tensor] : tensors) {
    (void)name;
    out.write(reinterpret_cast<const char*>(tensor.values.data()),
              static_cast<std::streamsize>(tensor.values.size() *
                                           sizeof(float)));
  }
  if (!out) throw LoadError("write to '" + path + "' failed");
}

}  // namespace maskinv
