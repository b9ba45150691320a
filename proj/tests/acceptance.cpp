// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.
//
// usage: acceptance <path to fsrlab> [--only 1,2,...]

#include "fsr/fsr_module.hpp"
#include "fsr/gradcheck_suite.hpp"
#include "fsr/metrics.hpp"
#include "fsr/style.hpp"
#include "fsr/training.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>

using namespace fsr;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity(const std::string& cli) {
    const auto t0 = Clock::now();
    const fs::path report = fs::temp_directory_path() / "fsrlab_gradcheck_report.csv";
    const std::string cmd = "\"" + cli + "\" gradcheck > \"" + report.string() + "\" 2>/dev/null";
    const int rc = std::system(cmd.c_str());
    const double elapsed = seconds_since(t0);

    std::ifstream in(report);
    std::string line;
    std::getline(in, line);
    std::set<std::string> names;
    double worst = 0.0;
    bool all_pass = true;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string name, params, err, status;
        std::getline(ss, name, ',');
        std::getline(ss, params, ',');
        std::getline(ss, err, ',');
        std::getline(ss, status, ',');
        names.insert(name);
        worst = std::max(worst, std::stod(err));
        all_pass = all_pass && status == "PASS";
    }
    fs::remove(report);
    const bool losses = names.count("L_d") && names.count("L_fsr") && names.count("L_cls");
    Outcome o;
    o.pass = rc == 0 && all_pass && losses && names.size() >= 20 && worst < 1e-4 && elapsed < 120.0;
    o.detail = std::to_string(names.size()) + " cases, worst rel err " + fmt("%.2e", worst) +
               ", " + fmt("%.1f", elapsed) + " s";
    return o;
}

Outcome style_algebra() {
    const auto t0 = Clock::now();
    Rng rng(11);
    double identity = 0.0, standard = 0.0, content = 0.0, alpha_one = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor f = uniform({4, 6, 5, 5}, rng, -3.0, 3.0);
        const auto s = channel_stats(f);
        identity = std::max(identity, max_abs_diff(adain(f, s.mu, s.sigma), f));

        const Tensor in = instance_norm(f, Tensor::full({6}, 1.0), Tensor::zeros({6}));
        const auto si = channel_stats(in, 0.0);
        for (double m : si.mu.data()) standard = std::max(standard, std::abs(m));
        for (double sd : si.sigma.data()) standard = std::max(standard, std::abs(sd - 1.0));

        auto params = FsrParams::create(6, 6, rng);
        params.dec_b = uniform({6}, rng, 0.5, 1.0);  // keeps decoded sigma positive
        const NoiseDraw draw = sample_noise(4, 6, AlphaDistribution{}, rng);
        const Tensor g = fsr_forward(f, params, draw);
        const auto decoded = decode_style(s, params, draw);
        const Tensor content_f = normalize_content(f, 0.0);
        const auto cf = content_f.data();
        for (std::size_t p = 0; p < 24; ++p) {
            if (decoded.sigma.data()[p] <= 0.0) continue;
            const auto gd = g.data();
            const Tensor plane = Tensor::from(
                {1, 1, 5, 5}, std::vector<double>(gd.begin() + p * 25, gd.begin() + (p + 1) * 25));
            const Tensor content_g = normalize_content(plane, 0.0);
            const auto cg = content_g.data();
            for (std::size_t i = 0; i < 25; ++i) content = std::max(content, std::abs(cg[i] - cf[p * 25 + i]));
        }

        const NoiseDraw a1 = draw.with_alpha(1.0);
        const NoiseDraw other = sample_noise(4, 6, AlphaDistribution{}, rng).with_alpha(1.0);
        alpha_one = std::max(alpha_one, max_abs_diff(fsr_forward(f, params, a1), fsr_forward(f, params, other)));
    }
    const double elapsed = seconds_since(t0);
    Outcome o;
    o.pass = identity <= 1e-9 && standard <= 1e-4 && content <= 1e-8 && alpha_one <= 1e-12 &&
             elapsed < 10.0;
    o.detail = "adain identity " + fmt("%.1e", identity) + ", IN stats " + fmt("%.1e", standard) +
               ", content " + fmt("%.1e", content) + ", alpha=1 " + fmt("%.1e", alpha_one) + ", " +
               fmt("%.2f", elapsed) + " s";
    return o;
}

Outcome discrepancy_oracle() {
    std::vector<Tensor> hand{Tensor::from({1}, {0.0}), Tensor::from({1}, {1.0}), Tensor::from({1}, {3.0})};
    const double h = domain_discrepancy(hand);
    Rng rng(12);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 2 + trial % 5, c = 1 + trial % 7;
        std::vector<Tensor> maps;
        std::vector<std::vector<double>> gap(k, std::vector<double>(c, 0.0));
        for (std::size_t m = 0; m < k; ++m) {
            maps.push_back(uniform({c, 3, 3}, rng, -5.0, 5.0));
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t i = 0; i < 9; ++i) gap[m][ch] += maps[m].data()[ch * 9 + i];
                gap[m][ch] /= 9.0;
            }
        }
        double total = 0.0;
        for (std::size_t m = 0; m < k; ++m)
            for (std::size_t n = m + 1; n < k; ++n)
                for (std::size_t ch = 0; ch < c; ++ch) total += std::abs(gap[m][ch] - gap[n][ch]);
        const double brute = 2.0 * total / static_cast<double>(k * (k - 1));
        worst = std::max(worst, std::abs(domain_discrepancy(maps) - brute));
    }
    return {h == 2.0 && worst <= 1e-10,
            "hand case " + fmt("%.17g", h) + ", worst brute-force gap " + fmt("%.1e", worst)};
}

Outcome schedule() {
    const auto domains = default_domains();
    BenchmarkSizes sizes;
    sizes.per_class = 4;
    sizes.val_fraction = 0.25;
    sizes.image_size = 8;
    const Benchmark bench = make_benchmark({domains[0], domains[1], domains[2]}, domains[3], sizes, 5);
    TrainConfig c;
    c.stages = 4;
    c.epochs_per_stage = 15;
    c.batch_size = 16;
    c.backbone.channels = {4, 6, 8, 8};
    c.profile_stages = false;

    struct Hashes {
        std::uint64_t disc, fsr, body;
    } last{};
    auto snapshot = [](const Trainer& t) {
        return Hashes{hash_tensors(t.model().discriminator_parameters()),
                      hash_tensors(t.fsr_parameters()),
                      hash_tensors(t.extractor_classifier_parameters())};
    };
    std::size_t phase_checks = 0, phase_violations = 0;
    TrainObserver obs;
    obs.on_stage_begin = [&](std::size_t, const Trainer& t) { last = snapshot(t); };
    obs.on_phase = [&](Phase p, const Trainer& t) {
        const Hashes now = snapshot(t);
        const bool ok = (now.disc != last.disc) == (p == Phase::Discriminator) &&
                        (now.fsr != last.fsr) == (p == Phase::Fsr) &&
                        (now.body != last.body) == (p == Phase::Classifier);
        ++phase_checks;
        if (!ok) ++phase_violations;
        last = now;
    };
    const TrainResult r = progressive_train(bench, c, obs);

    const std::size_t per_stage = 15 * r.steps_per_epoch;
    bool sequence = r.log.size() == 4 * per_stage;
    for (std::size_t i = 0; sequence && i < r.log.size(); ++i) {
        sequence = r.log[i].block == i / per_stage + 1;
    }
    bool carry = r.stages.size() == 4;
    for (std::size_t s = 1; carry && s < r.stages.size(); ++s) {
        carry = r.stages[s].backbone_hash_begin == r.stages[s - 1].backbone_hash_end;
    }
    Outcome o;
    o.pass = sequence && carry && phase_violations == 0 && phase_checks == 3 * r.log.size();
    o.detail = "T^=" + std::to_string(r.steps_per_epoch) + ", " + std::to_string(r.log.size()) +
               " steps, positions " + (sequence ? "exact" : "WRONG") + ", carry-over " +
               (carry ? "ok" : "BROKEN") + ", " + std::to_string(phase_checks) +
               " phase checks with " + std::to_string(phase_violations) + " violations";
    return o;
}

// ---------------------------------------------------------------------------
// Desk-scale runs shared by the relative criteria.

constexpr std::size_t kSeeds = 5;
constexpr std::size_t kTarget = 3;

struct RunSummary {
    double target_accuracy = 0.0;
    std::vector<double> discrepancy;
    double seconds = 0.0;
};

Benchmark desk_benchmark(std::uint64_t seed) {
    const auto domains = default_domains();
    std::vector<DomainSpec> sources;
    for (const auto& d : domains)
        if (d.id != kTarget) sources.push_back(d);
    return make_benchmark(sources, domains[kTarget], BenchmarkSizes{}, 1234 + seed);
}

RunSummary desk_run(const Benchmark& bench, TrainConfig config) {
    const auto t0 = Clock::now();
    const TrainResult r = progressive_train(bench, config);
    RunSummary s;
    s.target_accuracy = evaluate(*r.best_model, bench.test, bench.num_classes).top1;
    s.discrepancy = r.stages.back().discrepancy->values;
    s.seconds = seconds_since(t0);
    return s;
}

TrainConfig desk_config(std::uint64_t seed) {
    TrainConfig c;
    c.seed = seed;
    c.profile_stages = true;
    return c;
}

class DeskRuns {
public:
    const RunSummary& get(const std::string& variant, std::uint64_t seed) {
        const auto key = variant + "/" + std::to_string(seed);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        if (!bench_ || bench_seed_ != seed) {
            bench_ = std::make_unique<Benchmark>(desk_benchmark(seed));
            bench_seed_ = seed;
        }
        TrainConfig c = desk_config(seed);
        if (variant == "baseline") c.lambda = 0.0;
        else if (variant == "no-div") c.ablation.disable_div = true;
        else if (variant == "no-con") c.ablation.disable_con = true;
        else if (variant == "shared") c.ablation.shared_fsr = true;
        else if (variant == "no-noise") c.ablation.no_noise = true;
        else if (variant == "no-encdec") c.ablation.no_encdec = true;
        else if (variant == "fixed2") c.fixed_block = 2;
        RunSummary s = desk_run(*bench_, c);
        std::printf("  run %-9s seed %llu: target acc %.4f, d = [%.4f %.4f %.4f %.4f], %.1f s\n",
                    variant.c_str(), static_cast<unsigned long long>(seed), s.target_accuracy,
                    s.discrepancy[0], s.discrepancy[1], s.discrepancy[2], s.discrepancy[3],
                    s.seconds);
        std::fflush(stdout);
        return cache_.emplace(key, std::move(s)).first->second;
    }

private:
    std::map<std::string, RunSummary> cache_;
    std::unique_ptr<Benchmark> bench_;
    std::uint64_t bench_seed_ = 0;
};

double mean_accuracy(DeskRuns& runs, const std::string& variant) {
    double sum = 0.0;
    for (std::uint64_t s = 0; s < kSeeds; ++s) sum += runs.get(variant, s).target_accuracy;
    return sum / kSeeds;
}

Outcome relative_improvement(DeskRuns& runs) {
    double delta = 0.0, seconds = 0.0;
    std::size_t improved = 0;
    for (std::uint64_t s = 0; s < kSeeds; ++s) {
        const auto& base = runs.get("baseline", s);
        const auto& full = runs.get("full", s);
        delta += full.target_accuracy - base.target_accuracy;
        seconds += base.seconds + full.seconds;
        if (full.target_accuracy > base.target_accuracy) ++improved;
    }
    delta /= kSeeds;
    return {delta > 0.0 && improved >= 4 && seconds < 1800.0,
            "mean delta " + fmt("%+.4f", delta) + ", improved on " + std::to_string(improved) +
                "/5 seeds, " + fmt("%.0f", seconds) + " s"};
}

Outcome fixed_block_direction(DeskRuns& runs) {
    std::size_t agree = 0;
    std::string deltas;
    for (std::uint64_t s = 0; s < kSeeds; ++s) {
        const DiscrepancyProfile fixed{"fixed2", runs.get("fixed2", s).discrepancy, 2};
        const DiscrepancyProfile base{"baseline", runs.get("baseline", s).discrepancy, std::nullopt};
        const auto d = discrepancy_delta(fixed, base);
        if (d[1] > 0.0 && (d[2] < 0.0 || d[3] < 0.0)) ++agree;
        deltas += " [" + fmt("%+.3f", d[0]) + fmt(" %+.3f", d[1]) + fmt(" %+.3f", d[2]) +
                  fmt(" %+.3f", d[3]) + "]";
    }
    return {agree >= 3, std::to_string(agree) + "/5 seeds match; deltas" + deltas};
}

Outcome ablation_ordering(DeskRuns& runs) {
    const double full = mean_accuracy(runs, "full");
    std::size_t ties = 0;
    bool ordered = true;
    std::string detail = "full " + fmt("%.4f", full);
    for (const char* v : {"no-div", "no-con", "shared", "no-noise"}) {
        const double m = mean_accuracy(runs, v);
        if (m == full) ++ties;
        if (m > full) ordered = false;
        detail += std::string(", ") + v + " " + fmt("%.4f", m);
    }
    bool encdec_ran = true;
    try {
        runs.get("no-encdec", 0);
    } catch (const std::exception& e) {
        encdec_ran = false;
        detail += std::string(", no-encdec threw: ") + e.what();
    }
    detail += encdec_ran ? ", no-encdec completed" : "";
    return {ordered && ties <= 1 && encdec_ran, detail};
}

Outcome determinism(const std::string& cli) {
    const fs::path root = fs::temp_directory_path() / "fsrlab_determinism";
    fs::remove_all(root);
    const std::string common = " train --per-class 20 --image-size 16 --iters 6 --batch 16 --seed 3 --force";
    bool ok = true;
    for (const char* run : {"a", "b"}) {
        const std::string cmd = "\"" + cli + "\"" + common + " --out \"" + (root / run).string() +
                                "\" > /dev/null 2>&1";
        ok = ok && std::system(cmd.c_str()) == 0;
    }
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    const std::string a = slurp(root / "a" / "logs" / "train_log.csv");
    const std::string b = slurp(root / "b" / "logs" / "train_log.csv");
    fs::remove_all(root);
    const bool same = ok && !a.empty() && a == b;
    return {same, std::to_string(a.size()) + " bytes, " + (same ? "identical" : "different or missing")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string cli;
    std::vector<int> only;
    app.add_option("cli", cli, "path to the fsrlab executable")->required()->check(CLI::ExistingFile);
    app.add_option("--only", only, "criteria to run")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    DeskRuns runs;
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient integrity", [&] { return gradient_integrity(cli); }},
        {"style algebra", [] { return style_algebra(); }},
        {"discrepancy oracle", [] { return discrepancy_oracle(); }},
        {"progressive schedule", [] { return schedule(); }},
        {"relative improvement over baseline", [&] { return relative_improvement(runs); }},
        {"fixed block 2 discrepancy direction", [&] { return fixed_block_direction(runs); }},
        {"ablation ordering", [&] { return ablation_ordering(runs); }},
        {"determinism", [&] { return determinism(cli); }},
    };

    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        all = all && o.pass;
        std::printf("criterion %d %s: %s (%s)\n", id, o.pass ? "PASS" : "FAIL",
                    criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    return all ? 0 : 1;
}
