#include "fsr/data.hpp"

#include "fsr/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace fsr {

namespace {

constexpr double kForeground = 0.85;
constexpr double kPixelNoise = 0.03;

std::uint64_t domain_seed(std::uint64_t seed, std::size_t domain) {
    return seed + 1000003ULL * (domain + 1);
}

// Area of each shape inside the unit box [-1, 1]^2. Radii are rescaled so
// every class covers the same expected area, which keeps channel means free
// of class information.
constexpr double kShapeArea[kShapeVocabulary] = {3.14158, 2.56, 1.53018, 1.55,
                                                 2.19103, 2.005, 1.14, 1.55498};
constexpr double kCommonArea = 2.0;

bool inside_shape(std::size_t cls, double u, double v) {
    switch (cls) {
        case 0: return u * u + v * v <= 1.0;
        case 1: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
        case 2: return v >= -0.9 && v <= 0.8 && std::abs(u) <= 0.9 * (v + 0.9) / 1.7;
        case 3:
            return (std::abs(u) <= 0.25 && std::abs(v) <= 0.9) ||
                   (std::abs(v) <= 0.25 && std::abs(u) <= 0.9);
        case 4: {
            const double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.55 * 0.55;
        }
        case 5: return std::abs(u) + std::abs(v) <= 1.0;
        case 6: return std::abs(u) <= 0.95 && std::abs(v) <= 0.3;
        case 7:
            return std::abs(std::abs(u) - std::abs(v)) <= 0.25 && std::abs(u) <= 0.9 &&
                   std::abs(v) <= 0.9;
        default: return false;
    }
}

}  // namespace

std::string split_name(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::Train;
    if (text == "val") return Split::Val;
    if (text == "test") return Split::Test;
    throw std::invalid_argument("unknown split '" + text + "'");
}

std::vector<DomainSpec> default_domains() {
    return {
        {0, "photo", {0.95, 0.85, 0.75}, {0.05, 0.08, 0.10}, TextureKind::None, 0.0, 0.15},
        {1, "art", {0.55, 0.90, 0.45}, {0.30, 0.02, 0.25}, TextureKind::Stripes, 0.15, 0.30},
        {2, "cartoon", {0.85, 0.35, 0.90}, {0.02, 0.40, 0.05}, TextureKind::None, 0.0, 0.05},
        {3, "sketch", {0.55, 0.55, 0.55}, {0.25, 0.25, 0.25}, TextureKind::Speckle, 0.15, 0.35},
    };
}

std::vector<double> shape_mask(std::size_t cls, double cx, double cy, double radius,
                               std::size_t image_size) {
    std::vector<double> mask(image_size * image_size, 0.0);
    for (std::size_t y = 0; y < image_size; ++y) {
        for (std::size_t x = 0; x < image_size; ++x) {
            const double u = (static_cast<double>(x) + 0.5 - cx) / radius;
            const double v = (static_cast<double>(y) + 0.5 - cy) / radius;
            if (inside_shape(cls, u, v)) mask[y * image_size + x] = 1.0;
        }
    }
    return mask;
}

std::vector<Sample> generate(const DomainSpec& spec, std::size_t num_classes,
                             std::size_t per_class, std::uint64_t seed, std::size_t image_size) {
    if (num_classes < 2 || num_classes > kShapeVocabulary) {
        throw std::invalid_argument("generate: class count must be in [2, " +
                                    std::to_string(kShapeVocabulary) + "], got " +
                                    std::to_string(num_classes));
    }
    if (image_size < 8) throw std::invalid_argument("generate: image size must be >= 8");
    // Geometry and style draw from separate streams so that specs differing
    // only in style produce identical shape masks.
    Rng geometry(seed * 0x9E3779B97F4A7C15ULL + 17);
    Rng style(seed * 0xBF58476D1CE4E5B9ULL + spec.id * 7919 + 3);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, kPixelNoise);
    const double size = static_cast<double>(image_size);
    const std::size_t plane = image_size * image_size;

    std::vector<Sample> out;
    out.reserve(num_classes * per_class);
    for (std::size_t i = 0; i < per_class; ++i) {
        for (std::size_t cls = 0; cls < num_classes; ++cls) {
            const double radius = size * (0.22 + 0.10 * unit(geometry)) *
                                  std::sqrt(kCommonArea / kShapeArea[cls]);
            const double room = std::max(0.0, size - 2.0 * radius - 2.0);
            const double cx = radius + 1.0 + unit(geometry) * room;
            const double cy = radius + 1.0 + unit(geometry) * room;
            const auto mask = shape_mask(cls, cx, cy, radius, image_size);

            const double phase = unit(style) * 2.0 * std::numbers::pi;
            const double period = 4.0 + 3.0 * unit(style);
            Sample s;
            s.y = cls;
            s.d = spec.id;
            s.id = (static_cast<std::uint64_t>(spec.id) << 32) | (i * num_classes + cls);
            s.image.resize(kImageChannels * plane);
            for (std::size_t p = 0; p < plane; ++p) {
                const double lum = mask[p] > 0.0 ? kForeground : spec.background;
                double tex = 0.0;
                if (spec.texture == TextureKind::Stripes) {
                    const double x = static_cast<double>(p % image_size);
                    const double y = static_cast<double>(p / image_size);
                    tex = spec.texture_amplitude *
                          std::sin(2.0 * std::numbers::pi * (x + y) / period + phase);
                } else if (spec.texture == TextureKind::Speckle) {
                    tex = spec.texture_amplitude * (2.0 * unit(style) - 1.0);
                }
                for (std::size_t c = 0; c < kImageChannels; ++c) {
                    const double v = spec.gain[c] * lum + spec.offset[c] + tex + noise(style);
                    s.image[c * plane + p] = std::clamp(v, 0.0, 1.0);
                }
            }
            out.push_back(std::move(s));
        }
    }
    return out;
}

SplitSamples split_stratified(const std::vector<Sample>& samples, double val_fraction) {
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
        throw std::invalid_argument("split_stratified: val fraction must be in [0, 1)");
    }
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        groups[{samples[i].d, samples[i].y}].push_back(i);
    }
    std::vector<bool> is_val(samples.size(), false);
    for (const auto& [key, members] : groups) {
        const auto n_val = static_cast<std::size_t>(
            std::llround(static_cast<double>(members.size()) * val_fraction));
        // Members arrive in generation order, which is already random in geometry.
        for (std::size_t j = members.size() - n_val; j < members.size(); ++j) {
            is_val[members[j]] = true;
        }
    }
    SplitSamples out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        (is_val[i] ? out.val : out.train).push_back(samples[i]);
    }
    if (out.train.empty()) throw std::invalid_argument("split_stratified: empty train split");
    return out;
}

std::vector<DatasetEntry> make_dataset(const std::vector<DomainSpec>& domains,
                                       const BenchmarkSizes& sizes, std::uint64_t seed) {
    std::vector<DatasetEntry> out;
    for (const auto& spec : domains) {
        auto samples = generate(spec, sizes.num_classes, sizes.per_class,
                                domain_seed(seed, spec.id), sizes.image_size);
        auto split = split_stratified(samples, sizes.val_fraction);
        for (auto& s : split.train) out.push_back({std::move(s), Split::Train});
        for (auto& s : split.val) out.push_back({std::move(s), Split::Val});
    }
    return out;
}

Benchmark make_benchmark(const std::vector<DomainSpec>& sources, const DomainSpec& target,
                         const BenchmarkSizes& sizes, std::uint64_t seed) {
    if (sources.empty()) throw std::invalid_argument("make_benchmark: no source domains");
    Benchmark b;
    b.num_classes = sizes.num_classes;
    b.image_size = sizes.image_size;
    b.target_domain = target.id;
    for (const auto& spec : sources) {
        if (spec.id == target.id) {
            throw std::invalid_argument("make_benchmark: target domain " +
                                        std::to_string(target.id) + " is also a source");
        }
        b.source_domains.push_back(spec.id);
        auto samples = generate(spec, sizes.num_classes, sizes.per_class,
                                domain_seed(seed, spec.id), sizes.image_size);
        auto split = split_stratified(samples, sizes.val_fraction);
        b.train.insert(b.train.end(), split.train.begin(), split.train.end());
        b.val.insert(b.val.end(), split.val.begin(), split.val.end());
    }
    b.test = generate(target, sizes.num_classes, sizes.per_class, domain_seed(seed, target.id),
                      sizes.image_size);
    if (b.val.empty() || b.test.empty()) throw std::invalid_argument("make_benchmark: empty split");
    return b;
}

Tensor batch_images(std::span<const Sample> samples, std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("batch_images: empty batch");
    const std::size_t numel = samples[indices[0]].image.size();
    const auto size = static_cast<std::size_t>(
        std::llround(std::sqrt(static_cast<double>(numel / kImageChannels))));
    std::vector<double> data;
    data.reserve(numel * indices.size());
    for (std::size_t i : indices) {
        const auto& img = samples[i].image;
        if (img.size() != numel) throw std::invalid_argument("batch_images: mixed image sizes");
        data.insert(data.end(), img.begin(), img.end());
    }
    return Tensor::from({indices.size(), kImageChannels, size, size}, std::move(data));
}

Tensor batch_images(std::span<const Sample> samples) {
    std::vector<std::size_t> all(samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return batch_images(samples, all);
}

// ---------------------------------------------------------------------------

void write_dataset(const std::filesystem::path& dir, const std::vector<DatasetEntry>& entries) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
    std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
    if (!manifest) throw IoError("cannot write " + (dir / "manifest.csv").string());
    for (const auto& e : entries) {
        const auto& s = e.sample;
        const std::string rel = "images/d" + std::to_string(s.d) + "_" + std::to_string(s.id) + ".bin";
        const auto size = static_cast<std::size_t>(
            std::llround(std::sqrt(static_cast<double>(s.image.size() / kImageChannels))));
        save_tensors(dir / rel,
                     {{"image", Tensor::from({kImageChannels, size, size}, s.image)},
                      {"id", Tensor::scalar(static_cast<double>(s.id))}});
        manifest << rel << ',' << s.y << ',' << s.d << ',' << split_name(e.split) << '\n';
    }
    if (!manifest) throw IoError("write failed for " + (dir / "manifest.csv").string());
}

std::vector<DatasetEntry> read_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.csv");
    if (!manifest) throw IoError("cannot open " + (dir / "manifest.csv").string());
    std::vector<DatasetEntry> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string rel, y, d, split;
        if (!std::getline(row, rel, ',') || !std::getline(row, y, ',') ||
            !std::getline(row, d, ',') || !std::getline(row, split)) {
            throw IoError("manifest line " + std::to_string(line_no) + ": expected relpath,y,d,split");
        }
        DatasetEntry e;
        try {
            e.sample.y = std::stoul(y);
            e.sample.d = std::stoul(d);
            e.split = parse_split(split);
        } catch (const std::exception& ex) {
            throw IoError("manifest line " + std::to_string(line_no) + ": " + ex.what());
        }
        for (auto& t : load_tensors(dir / rel)) {
            if (t.name == "image") e.sample.image.assign(t.tensor.data().begin(), t.tensor.data().end());
            if (t.name == "id") e.sample.id = static_cast<std::uint64_t>(t.tensor.item());
        }
        if (e.sample.image.empty()) throw IoError(rel + ": missing image entry");
        out.push_back(std::move(e));
    }
    return out;
}

Benchmark benchmark_from_entries(const std::vector<DatasetEntry>& entries, std::size_t target) {
    Benchmark b;
    b.target_domain = target;
    std::size_t max_class = 0;
    for (const auto& e : entries) {
        max_class = std::max(max_class, e.sample.y);
        if (e.sample.d == target) {
            b.test.push_back(e.sample);
            continue;
        }
        if (std::find(b.source_domains.begin(), b.source_domains.end(), e.sample.d) ==
            b.source_domains.end()) {
            b.source_domains.push_back(e.sample.d);
        }
        if (e.split == Split::Val) b.val.push_back(e.sample);
        else b.train.push_back(e.sample);
    }
    std::sort(b.source_domains.begin(), b.source_domains.end());
    b.num_classes = max_class + 1;
    if (!b.train.empty()) {
        b.image_size = static_cast<std::size_t>(std::llround(
            std::sqrt(static_cast<double>(b.train.front().image.size() / kImageChannels))));
    }
    if (b.train.empty() || b.val.empty() || b.test.empty()) {
        throw std::invalid_argument("benchmark: target domain " + std::to_string(target) +
                                    " leaves an empty split");
    }
    return b;
}

}  // namespace fsr
