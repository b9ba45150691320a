#include "fsr/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace fsr {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IoError("checkpoint: truncated record");
    return value;
}

constexpr std::size_t kMagicLen = sizeof(kCheckpointMagic) - 1;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

}  // namespace

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& entries) {
    out.write(kCheckpointMagic, kMagicLen);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        const Shape& shape = e.tensor.shape();
        put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
        for (std::size_t d : shape) put<std::uint64_t>(out, d);
        auto data = e.tensor.data();
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(double)));
    }
    if (!out) throw IoError("checkpoint: write failed");
}

std::vector<NamedTensor> read_tensors(std::istream& in) {
    std::array<char, kMagicLen> magic{};
    in.read(magic.data(), kMagicLen);
    if (!in || std::memcmp(magic.data(), kCheckpointMagic, kMagicLen) != 0) {
        throw IoError("checkpoint: bad magic");
    }
    const auto version = get<std::uint32_t>(in);
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = get<std::uint32_t>(in);
    std::vector<NamedTensor> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<std::uint32_t>(in);
        if (name_len > 4096) throw IoError("checkpoint: name too long");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rank = get<std::uint32_t>(in);
        if (rank > 8) throw IoError("checkpoint: rank too large in " + name);
        Shape shape(rank);
        std::uint64_t total = 1;
        for (auto& d : shape) {
            const auto dim = get<std::uint64_t>(in);
            total *= dim;
            if (total > kMaxElements) throw IoError("checkpoint: tensor too large in " + name);
            d = static_cast<std::size_t>(dim);
        }
        std::vector<double> values(static_cast<std::size_t>(total));
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
        if (!in) throw IoError("checkpoint: truncated payload in " + name);
        entries.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
    }
    return entries;
}

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_tensors(out, entries);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return read_tensors(in);
}

}  // namespace fsr
