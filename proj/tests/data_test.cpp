#include "fsr/data.hpp"
#include "fsr/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

using namespace fsr;

namespace {

std::array<double, 3> channel_means(const Sample& s) {
    const std::size_t plane = s.image.size() / 3;
    std::array<double, 3> m{};
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < plane; ++p) m[c] += s.image[c * plane + p];
        m[c] /= static_cast<double>(plane);
    }
    return m;
}

// Softmax regression on standardized features; returns held-out accuracy.
double linear_probe(const std::vector<std::array<double, 3>>& train_x,
                    const std::vector<std::size_t>& train_y,
                    const std::vector<std::array<double, 3>>& test_x,
                    const std::vector<std::size_t>& test_y, std::size_t classes) {
    std::array<double, 3> mean{}, sd{};
    for (const auto& x : train_x)
        for (int c = 0; c < 3; ++c) mean[c] += x[c] / static_cast<double>(train_x.size());
    for (const auto& x : train_x)
        for (int c = 0; c < 3; ++c) sd[c] += (x[c] - mean[c]) * (x[c] - mean[c]);
    for (int c = 0; c < 3; ++c) sd[c] = std::sqrt(sd[c] / static_cast<double>(train_x.size())) + 1e-12;
    auto to_tensor = [&](const std::vector<std::array<double, 3>>& xs) {
        std::vector<double> v;
        for (const auto& x : xs)
            for (int c = 0; c < 3; ++c) v.push_back((x[c] - mean[c]) / sd[c]);
        return Tensor::from({xs.size(), 3}, std::move(v));
    };
    const Tensor xt = to_tensor(train_x);
    Rng rng(0);
    Linear head(3, classes, rng);
    auto params = head.parameters("probe");
    Sgd sgd(SgdOptions{0.9, 0.0});
    for (int it = 0; it < 300; ++it) {
        zero_grads(params);
        backward(cross_entropy(head.forward(xt), train_y));
        sgd.step(params, 0.1);
    }
    NoGradGuard ng;
    const Tensor logits = head.forward(to_tensor(test_x));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test_y.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < classes; ++k)
            if (logits.at({i, k}) > logits.at({i, best})) best = k;
        if (best == test_y[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test_y.size());
}

}  // namespace

TEST(Generate, DeterministicForSeed) {
    const auto spec = default_domains()[1];
    const auto a = generate(spec, 7, 5, 99);
    const auto b = generate(spec, 7, 5, 99);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].y, b[i].y);
        EXPECT_EQ(a[i].id, b[i].id);
    }
    EXPECT_NE(generate(spec, 7, 5, 100)[0].image, a[0].image);
}

TEST(Generate, PaletteOnlyChangeKeepsMasks) {
    DomainSpec a{0, "a", {0.9, 0.8, 0.7}, {0.05, 0.05, 0.05}, TextureKind::None, 0.0, 0.1};
    DomainSpec b{1, "b", {0.5, 0.9, 0.6}, {0.3, 0.0, 0.2}, TextureKind::None, 0.0, 0.1};
    const auto sa = generate(a, 7, 10, 5);
    const auto sb = generate(b, 7, 10, 5);
    const std::size_t plane = 32 * 32;
    double mean_a = 0.0, mean_b = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        // Foreground lies far above the background in channel 0 for both
        // palettes, well beyond the pixel noise.
        const double ta = a.gain[0] * (0.85 + 0.1) / 2 + a.offset[0];
        const double tb = b.gain[0] * (0.85 + 0.1) / 2 + b.offset[0];
        for (std::size_t p = 0; p < plane; ++p) {
            ASSERT_EQ(sa[i].image[p] > ta, sb[i].image[p] > tb) << "sample " << i << " pixel " << p;
        }
        mean_a += channel_means(sa[i])[0];
        mean_b += channel_means(sb[i])[0];
    }
    EXPECT_GT(std::abs(mean_a - mean_b) / static_cast<double>(sa.size()), 0.1);
}

TEST(Generate, PixelRangeAndLabels) {
    for (const auto& spec : default_domains()) {
        for (const auto& s : generate(spec, 7, 3, 1)) {
            EXPECT_LT(s.y, 7u);
            EXPECT_EQ(s.d, spec.id);
            EXPECT_EQ(s.image.size(), 3u * 32 * 32);
            for (double v : s.image) {
                ASSERT_GE(v, 0.0);
                ASSERT_LE(v, 1.0);
            }
        }
    }
}

TEST(Generate, RejectsBadClassCount) {
    const auto spec = default_domains()[0];
    EXPECT_THROW(generate(spec, 1, 2, 0), std::invalid_argument);
    EXPECT_THROW(generate(spec, kShapeVocabulary + 1, 2, 0), std::invalid_argument);
    EXPECT_NO_THROW(generate(spec, kShapeVocabulary, 1, 0));
}

TEST(Generate, DomainChannelMeansSeparate) {
    const auto domains = default_domains();
    std::vector<std::vector<std::array<double, 3>>> feats;
    for (const auto& spec : domains) {
        std::vector<std::array<double, 3>> f;
        for (const auto& s : generate(spec, 7, 143, 11)) f.push_back(channel_means(s));
        feats.push_back(std::move(f));
    }
    for (std::size_t a = 0; a < domains.size(); ++a)
        for (std::size_t b = a + 1; b < domains.size(); ++b) {
            double best = 0.0;
            for (int c = 0; c < 3; ++c) {
                double ma = 0, mb = 0, va = 0, vb = 0;
                for (const auto& x : feats[a]) ma += x[c] / feats[a].size();
                for (const auto& x : feats[b]) mb += x[c] / feats[b].size();
                for (const auto& x : feats[a]) va += (x[c] - ma) * (x[c] - ma) / feats[a].size();
                for (const auto& x : feats[b]) vb += (x[c] - mb) * (x[c] - mb) / feats[b].size();
                best = std::max(best, std::abs(ma - mb) / std::sqrt((va + vb) / 2));
            }
            EXPECT_GT(best, 2.0) << domains[a].name << " vs " << domains[b].name;
        }
}

TEST(Generate, LabelsIndependentOfStyleStatistics) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::vector<std::array<double, 3>> tx, vx;
        std::vector<std::size_t> ty, vy;
        for (const auto& spec : default_domains()) {
            auto split = split_stratified(generate(spec, 7, 100, seed), 0.3);
            for (const auto& s : split.train) {
                tx.push_back(channel_means(s));
                ty.push_back(s.y);
            }
            for (const auto& s : split.val) {
                vx.push_back(channel_means(s));
                vy.push_back(s.y);
            }
        }
        const double acc = linear_probe(tx, ty, vx, vy, 7);
        EXPECT_NEAR(acc, 1.0 / 7.0, 0.05) << "seed " << seed;
    }
}

TEST(Generate, DomainsLinearlySeparableFromChannelMeans) {
    std::vector<std::array<double, 3>> tx, vx;
    std::vector<std::size_t> ty, vy;
    for (const auto& spec : default_domains()) {
        auto split = split_stratified(generate(spec, 7, 100, 3), 0.3);
        for (const auto& s : split.train) {
            tx.push_back(channel_means(s));
            ty.push_back(s.d);
        }
        for (const auto& s : split.val) {
            vx.push_back(channel_means(s));
            vy.push_back(s.d);
        }
    }
    EXPECT_GT(linear_probe(tx, ty, vx, vy, 4), 0.9);
}

TEST(Benchmark, NineToOneSplit) {
    const auto d = default_domains();
    const auto b = make_benchmark({d[0], d[1], d[2]}, d[3], {}, 7);
    EXPECT_EQ(b.train.size(), 3u * 630);
    EXPECT_EQ(b.val.size(), 3u * 70);
    EXPECT_EQ(b.test.size(), 700u);
    EXPECT_EQ(b.source_domains, (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(b.target_domain, 3u);
}

TEST(Benchmark, TargetHeldOutAndClassesBalanced) {
    const auto d = default_domains();
    const auto b = make_benchmark({d[1], d[2], d[3]}, d[0], {}, 8);
    std::set<std::uint64_t> source_ids;
    for (const auto* part : {&b.train, &b.val})
        for (const auto& s : *part) {
            EXPECT_NE(s.d, 0u);
            source_ids.insert(s.id);
        }
    for (const auto& s : b.test) {
        EXPECT_EQ(s.d, 0u);
        EXPECT_EQ(source_ids.count(s.id), 0u);
    }
    for (const auto* part : {&b.train, &b.val}) {
        std::map<std::pair<std::size_t, std::size_t>, std::size_t> counts;
        for (const auto& s : *part) ++counts[{s.d, s.y}];
        std::size_t lo = SIZE_MAX, hi = 0;
        for (const auto& [k, v] : counts) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        EXPECT_LE(hi - lo, 1u);
        EXPECT_EQ(counts.size(), 3u * 7);
    }
}

TEST(Benchmark, RejectsTargetAmongSourcesAndEmptySplits) {
    const auto d = default_domains();
    EXPECT_THROW(make_benchmark({d[0], d[1]}, d[1], {}, 0), std::invalid_argument);
    EXPECT_THROW(make_benchmark({}, d[1], {}, 0), std::invalid_argument);
    BenchmarkSizes tiny;
    tiny.per_class = 1;
    EXPECT_THROW(make_benchmark({d[0], d[1]}, d[2], tiny, 0), std::invalid_argument);
}

TEST(Dataset, RoundTripThroughDisk) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "fsrlab_data_test";
    fs::remove_all(dir);
    std::vector<DatasetEntry> entries;
    for (const auto& spec : default_domains()) {
        auto split = split_stratified(generate(spec, 3, 4, 2, 16), 0.25);
        for (auto& s : split.train) entries.push_back({s, Split::Train});
        for (auto& s : split.val) entries.push_back({s, Split::Val});
    }
    write_dataset(dir, entries);
    const auto back = read_dataset(dir);
    ASSERT_EQ(back.size(), entries.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].sample.image, entries[i].sample.image);
        EXPECT_EQ(back[i].sample.y, entries[i].sample.y);
        EXPECT_EQ(back[i].sample.d, entries[i].sample.d);
        EXPECT_EQ(back[i].sample.id, entries[i].sample.id);
        EXPECT_EQ(back[i].split, entries[i].split);
    }
    const auto b = benchmark_from_entries(back, 2);
    EXPECT_EQ(b.test.size(), 12u);
    EXPECT_EQ(b.source_domains, (std::vector<std::size_t>{0, 1, 3}));
    EXPECT_EQ(b.image_size, 16u);
    EXPECT_EQ(b.num_classes, 3u);
    EXPECT_THROW(benchmark_from_entries(back, 9), std::invalid_argument);
    fs::remove_all(dir);
    EXPECT_THROW(read_dataset(dir), std::exception);
}

TEST(Dataset, BatchImagesStacks) {
    const auto s = generate(default_domains()[0], 2, 2, 0, 8);
    const std::vector<std::size_t> idx{3, 1};
    const Tensor x = batch_images(s, idx);
    EXPECT_EQ(x.shape(), (Shape{2, 3, 8, 8}));
    EXPECT_EQ(x.data()[0], s[3].image[0]);
    EXPECT_EQ(x.data()[3 * 64], s[1].image[0]);
}

TEST(Dataset, StoredDatasetReproducesInMemoryBenchmark) {
    BenchmarkSizes sizes;
    sizes.per_class = 10;
    sizes.image_size = 12;
    const auto domains = default_domains();
    const auto entries = make_dataset(domains, sizes, 77);
    EXPECT_EQ(entries.size(), 4u * 7u * 10u);
    const auto stored = benchmark_from_entries(entries, 1);
    const auto direct = make_benchmark({domains[0], domains[2], domains[3]}, domains[1], sizes, 77);
    ASSERT_EQ(stored.train.size(), direct.train.size());
    ASSERT_EQ(stored.val.size(), direct.val.size());
    ASSERT_EQ(stored.test.size(), direct.test.size());
    for (std::size_t i = 0; i < direct.train.size(); ++i) {
        EXPECT_EQ(stored.train[i].image, direct.train[i].image);
        EXPECT_EQ(stored.train[i].y, direct.train[i].y);
    }
    auto key = [](const Sample& s) { return std::make_pair(s.id, s.image); };
    std::set<std::pair<std::uint64_t, std::vector<double>>> a, b;
    for (const auto& s : stored.test) a.insert(key(s));
    for (const auto& s : direct.test) b.insert(key(s));
    EXPECT_EQ(a, b);
}
