#pragma once

#include "fsr/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <vector>

namespace fsr {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat tensor record shared by checkpoints and dataset images. Layout, all
/// integers little-endian:
///   "FSRCKPT" (7 bytes) | version u32 | entry count u32 |
///   per entry: name length u32 | name bytes | rank u32 | dims u64 x rank |
///              float64 x product(dims)
inline constexpr char kCheckpointMagic[] = "FSRCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_tensors(std::istream& in);

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

}  // namespace fsr
