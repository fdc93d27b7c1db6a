#pragma once

// IBCK tensor container, version 1. All integers and payloads are little-endian.
//
//   "IBCK" | u32 version | u32 header_len | header JSON (UTF-8)
//   u32 tensor_count
//   per tensor: u16 name_len | name | u8 rank | u32 extent * rank | f64 * numel

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibcircuit/tensor.hpp"

namespace ibc {

inline constexpr std::uint32_t kIbckVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct IbckFile {
  nlohmann::json header = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const;
};

std::string encode_ibck(const IbckFile& file);
IbckFile decode_ibck(std::string_view bytes);

void write_ibck(const std::filesystem::path& path, const IbckFile& file);
IbckFile read_ibck(const std::filesystem::path& path);

// Whole-file helpers shared by the other writers.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace ibc
