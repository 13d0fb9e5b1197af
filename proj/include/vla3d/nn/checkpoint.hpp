#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vla3d/nn/params.hpp"

namespace vla3d {

/// Malformed or unsupported file. `offset` is the byte position where
/// parsing failed, or npos when not applicable.
class format_error : public std::runtime_error {
 public:
  format_error(const std::string& what, std::size_t offset = npos)
      : std::runtime_error(offset == npos ? what : what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace vla3d

namespace vla3d::nn {

inline constexpr char kTensorMagic[6] = {'3', 'D', 'V', 'L', 'A', '1'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

using TensorRecords = std::vector<std::pair<std::string, Tensor>>;

/// Little-endian container: magic "3DVLA1", u32 version, then records of
/// (u32 name length, name bytes, u32 rank, u32 dims[rank], f64 payload).
std::vector<std::uint8_t> encode_tensor_records(const TensorRecords& records);
TensorRecords decode_tensor_records(const std::vector<std::uint8_t>& bytes);

void write_tensor_file(const std::filesystem::path& path, const TensorRecords& records);
TensorRecords read_tensor_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store);
/// Overwrites every parameter of `store` from the file. Missing names, extra
/// names or shape differences raise format_error naming the parameter.
void load_checkpoint(const std::filesystem::path& path, ParamStore& store);

}  // namespace vla3d::nn
