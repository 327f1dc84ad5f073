#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "pemp/tensor.hpp"

namespace pemp {

/// Tensor blob: "PEMPT1", u32 rank, u64 dims[rank], f64 payload, all
/// little-endian.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

std::string tensor_to_bytes(const Tensor& t);
Tensor tensor_from_bytes(const std::string& bytes);

/// Named tensors in insertion order.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Checkpoint container: "PEMPC1", u32 count, then per entry u32 name length,
/// name bytes and a tensor blob.
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into existing tensors by name. Every target must
/// be present with a matching shape.
void assign_from(const NamedTensors& source, const NamedTensors& targets);

}  // namespace pemp
