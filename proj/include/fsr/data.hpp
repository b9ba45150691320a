#pragma once

#include "fsr/nn.hpp"
#include "fsr/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fsr {

enum class TextureKind { None, Stripes, Speckle };

/// Style of one synthetic domain. Applied identically to every class.
struct DomainSpec {
    std::size_t id = 0;
    std::string name;
    std::array<double, 3> gain{1.0, 1.0, 1.0};
    std::array<double, 3> offset{0.0, 0.0, 0.0};
    TextureKind texture = TextureKind::None;
    double texture_amplitude = 0.0;
    double background = 0.1;
};

struct Sample {
    std::vector<double> image;  // (3, size, size), values in [0, 1]
    std::size_t y = 0;
    std::size_t d = 0;
    std::uint64_t id = 0;
};

enum class Split { Train, Val, Test };
std::string split_name(Split split);
Split parse_split(const std::string& text);

inline constexpr std::size_t kShapeVocabulary = 8;
inline constexpr std::size_t kImageChannels = 3;

/// The four default domains; the last one is the conventional target.
std::vector<DomainSpec> default_domains();

/// Class-determined shapes at random position and scale, styled per `spec`.
/// Deterministic given the arguments.
std::vector<Sample> generate(const DomainSpec& spec, std::size_t num_classes,
                             std::size_t per_class, std::uint64_t seed,
                             std::size_t image_size = 32);

/// Class-content mask only (1 inside the shape), independent of style.
std::vector<double> shape_mask(std::size_t cls, double cx, double cy, double radius,
                               std::size_t image_size);

struct SplitSamples {
    std::vector<Sample> train;
    std::vector<Sample> val;
};

/// Per (domain, class) stratified split; round(count * val_fraction) go to val.
SplitSamples split_stratified(const std::vector<Sample>& samples, double val_fraction);

struct Benchmark {
    std::vector<Sample> train;  // sources
    std::vector<Sample> val;    // sources
    std::vector<Sample> test;   // target, held out entirely
    std::vector<std::size_t> source_domains;
    std::size_t target_domain = 0;
    std::size_t num_classes = 0;
    std::size_t image_size = 32;
};

struct BenchmarkSizes {
    std::size_t num_classes = 7;
    std::size_t per_class = 100;  // 700 images per domain
    double val_fraction = 0.1;
    std::size_t image_size = 32;
};

Benchmark make_benchmark(const std::vector<DomainSpec>& sources, const DomainSpec& target,
                         const BenchmarkSizes& sizes, std::uint64_t seed);

/// Stacks images into an (N, 3, size, size) tensor.
Tensor batch_images(std::span<const Sample> samples, std::span<const std::size_t> indices);
Tensor batch_images(std::span<const Sample> samples);

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/manifest.csv with one "relpath,y,d,split" line per
// sample and one flat tensor file per image under <dir>/images/.

struct DatasetEntry {
    Sample sample;
    Split split = Split::Train;
};

void write_dataset(const std::filesystem::path& dir, const std::vector<DatasetEntry>& entries);
std::vector<DatasetEntry> read_dataset(const std::filesystem::path& dir);

/// Every domain of `domains` with its train/val split, seeded like make_benchmark
/// so that benchmark_from_entries reproduces the same images.
std::vector<DatasetEntry> make_dataset(const std::vector<DomainSpec>& domains,
                                       const BenchmarkSizes& sizes, std::uint64_t seed);

/// Builds a benchmark from stored entries: every domain except `target`
/// contributes its train/val rows; the target domain is used whole as test.
Benchmark benchmark_from_entries(const std::vector<DatasetEntry>& entries, std::size_t target);

}  // namespace fsr
