#include "run_config.hpp"

#include "fsr/checkpoint.hpp"
#include "fsr/gradcheck_suite.hpp"
#include "fsr/metrics.hpp"
#include "fsr/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#ifndef FSRLAB_BUILD_ID
#define FSRLAB_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using namespace fsrcli;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kNumerical = 3, kIo = 4 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Flags shared by the commands that build settings. Values stay unset unless
// given on the command line, so the config file can fill them.
struct SettingFlags {
    std::string config;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    bool star = false;
    CLI::Option* star_opt = nullptr;

    void add(CLI::App& app, const std::string& key, const std::string& help) {
        options[key] = app.add_option("--" + key, values[key], help);
    }

    Settings resolve() const {
        Settings s = default_settings();
        if (!config.empty()) merge_config_file(s, config);
        for (const auto& [key, opt] : options) {
            if (opt->count() > 0) set_value(s, key, values.at(key));
        }
        if (star_opt && star_opt->count() > 0) set_value(s, "star", "true");
        return s;
    }
};

void add_data_flags(CLI::App& app, SettingFlags& f) {
    app.add_option("--config", f.config, "key = value settings file")->check(CLI::ExistingFile);
    f.add(app, "data", "dataset directory written by 'gen' (default: generate in memory)");
    f.add(app, "data-seed", "seed of the synthetic images");
    f.add(app, "per-class", "images per class and domain");
    f.add(app, "image-size", "image side length");
    f.add(app, "val-fraction", "source validation fraction");
    f.add(app, "target-domain", "held-out domain id (0 photo, 1 art, 2 cartoon, 3 sketch)");
}

void add_train_flags(CLI::App& app, SettingFlags& f) {
    add_data_flags(app, f);
    f.add(app, "seed", "training seed");
    f.add(app, "lambda", "weight of the augmented classification loss; 0 gives the baseline");
    f.add(app, "stages", "number of training stages");
    f.add(app, "iters", "iterations per stage");
    f.add(app, "epochs", "epochs per stage; overrides --iters when > 0");
    f.add(app, "batch", "batch size");
    f.add(app, "lr-backbone", "feature extractor learning rate");
    f.add(app, "lr-head", "classifier, discriminator and FSR learning rate");
    f.add(app, "momentum", "SGD momentum");
    f.add(app, "weight-decay", "SGD weight decay");
    f.add(app, "clip-norm", "gradient norm cap per update; 0 disables");
    f.add(app, "alpha-dist", "uniform or beta:<v>");
    f.add(app, "ablate", "none, no-div, no-con, shared, no-noise or no-encdec");
    f.add(app, "fixed-block", "keep FSR at this block in every stage");
    f.add(app, "eval-interval", "steps between validation checks; 0 = once per stage");
    f.star_opt = app.add_flag("--star", f.star, "FSR after every block in every stage");
}

fsr::Benchmark load_benchmark(const Settings& s) {
    const std::size_t target = target_domain(s);
    const std::string& data = s.at("data");
    if (!data.empty()) {
        if (!fs::is_directory(data)) throw fsr::IoError("dataset directory " + data + " not found");
        return fsr::benchmark_from_entries(fsr::read_dataset(data), target);
    }
    const auto domains = fsr::default_domains();
    std::vector<fsr::DomainSpec> sources;
    for (const auto& d : domains)
        if (d.id != target) sources.push_back(d);
    return fsr::make_benchmark(sources, domains[target], benchmark_sizes(s), data_seed(s));
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw fsr::IoError("cannot write " + path.string());
    return out;
}

// Refuses a non-empty directory unless forced; a forced run starts from an
// empty directory.
void prepare_dir(const fs::path& dir, bool force, const std::string& hash) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) {
            std::string why = dir.string() + " is not empty";
            std::ifstream manifest(dir / "manifest.txt");
            std::string line;
            while (std::getline(manifest, line)) {
                if (line == "config_hash=" + hash) why += " and holds a run with the same config hash";
            }
            throw UsageError(why + "; pass --force to overwrite");
        }
        for (const auto& e : fs::directory_iterator(dir)) fs::remove_all(e.path());
    }
    fs::create_directories(dir);
}

void write_manifest(const fs::path& dir, const Settings& s, const std::string& command,
                    const std::string& status) {
    auto out = open_out(dir / "manifest.txt");
    out << "command=" << command << "\n";
    out << "config_hash=" << to_hex(settings_hash(s)) << "\n";
    out << "build_id=" << FSRLAB_BUILD_ID << "\n";
    out << "status=" << status << "\n";
    for (const auto& [k, v] : s) out << "setting." << k << "=" << v << "\n";
    if (command == "train") out << "layout=checkpoints/,logs/,metrics/,results.csv\n";
}

std::string run_tag(const Settings& s) {
    if (s.at("lambda") == "0") return "baseline";
    std::string tag = "fsr";
    if (s.at("ablate") != "none") tag += "-" + s.at("ablate");
    if (s.at("star") == "true") tag += "-star";
    if (s.at("fixed-block") != "none") tag += "-fixed" + s.at("fixed-block");
    return tag;
}

int cmd_gen(const SettingFlags& flags, const std::string& out_dir, bool force) {
    const Settings s = flags.resolve();
    const auto sizes = benchmark_sizes(s);
    prepare_dir(out_dir, force, to_hex(settings_hash(s)));
    const auto entries = fsr::make_dataset(fsr::default_domains(), sizes, data_seed(s));
    fsr::write_dataset(out_dir, entries);
    write_manifest(out_dir, s, "gen", "complete");
    std::printf("wrote %zu images to %s\n", entries.size(), out_dir.c_str());
    return kOk;
}

int cmd_train(const SettingFlags& flags, const std::string& out_dir, bool force) {
    const Settings s = flags.resolve();
    fsr::TrainConfig config = train_config(s);
    const fsr::Benchmark bench = load_benchmark(s);
    config.backbone.input_size = bench.image_size;

    const fs::path dir = out_dir;
    prepare_dir(dir, force, to_hex(settings_hash(s)));
    for (const char* sub : {"checkpoints", "logs", "metrics"}) fs::create_directories(dir / sub);
    write_manifest(dir, s, "train", "running");

    auto log = open_out(dir / "logs" / "train_log.csv");
    fsr::write_training_log_header(log);
    fsr::TrainObserver observer;
    observer.on_step = [&](const fsr::LossRecord& r) { fsr::write_training_log_row(log, r); };
    config.profile_stages = false;

    fsr::TrainResult result;
    try {
        result = fsr::progressive_train(bench, config, observer);
    } catch (const fsr::NumericalError&) {
        log.flush();
        write_manifest(dir, s, "train", "failed");
        throw;
    }
    log.close();

    fsr::save_tensors(dir / "checkpoints" / "final.ckpt", result.final_model->state());
    fsr::save_tensors(dir / "checkpoints" / "best.ckpt", result.best_model->state());

    {
        auto stages = open_out(dir / "logs" / "stages.csv");
        stages << "stage,blocks,steps,val_accuracy,backbone_hash_begin,backbone_hash_end\n";
        for (const auto& st : result.stages) {
            std::string blocks;
            for (std::size_t b : st.blocks) blocks += (blocks.empty() ? "" : ";") + std::to_string(b);
            stages << st.stage << "," << blocks << "," << st.steps << ","
                   << fsr::format_double(st.val_accuracy) << "," << to_hex(st.backbone_hash_begin)
                   << "," << to_hex(st.backbone_hash_end) << "\n";
        }
    }

    std::optional<std::size_t> block;
    if (config.fixed_block) block = config.fixed_block;
    const std::vector<fsr::DiscrepancyProfile> profile{
        fsr::discrepancy_profile(*result.final_model, bench.train, run_tag(s), block)};
    {
        auto out = open_out(dir / "metrics" / "discrepancy.csv");
        fsr::write_discrepancy_csv(out, profile);
    }

    const auto acc = fsr::evaluate(*result.best_model, bench.test, bench.num_classes);
    {
        auto out = open_out(dir / "results.csv");
        const std::vector<fsr::ResultRow> rows{{config.seed, bench.target_domain, acc.top1}};
        fsr::write_results_csv(out, rows);
    }
    write_manifest(dir, s, "train", "complete");
    std::printf("best source val %.4f at step %zu; target %zu accuracy %.4f (%zu images)\n",
                result.best_val_accuracy, result.best_step, bench.target_domain, acc.top1,
                acc.count);
    return kOk;
}

int cmd_eval(const SettingFlags& flags, const std::string& checkpoint, const std::string& split) {
    const Settings s = flags.resolve();
    if (split != "test" && split != "val") throw UsageError("--split must be test or val");
    if (!fs::is_regular_file(checkpoint)) throw fsr::IoError("checkpoint " + checkpoint + " not found");
    std::optional<fsr::Model> loaded;
    try {
        loaded.emplace(fsr::Model::from_state(fsr::load_tensors(checkpoint)));
    } catch (const fsr::TensorError& e) {
        throw fsr::IoError(checkpoint + " does not hold a model: " + e.what());
    }
    fsr::Model& model = *loaded;
    const auto bench = load_benchmark(s);
    const auto& samples = split == "test" ? bench.test : bench.val;
    const auto acc = fsr::evaluate(model, samples, bench.num_classes);
    std::printf("split,count,accuracy\n%s,%zu,%s\n", split.c_str(), acc.count,
                fsr::format_double(acc.top1).c_str());
    std::printf("class,accuracy\n");
    for (std::size_t c = 0; c < acc.per_class.size(); ++c) {
        std::printf("%zu,%s\n", c, fsr::format_double(acc.per_class[c]).c_str());
    }
    return kOk;
}

int cmd_gradcheck(std::uint64_t seed) {
    const auto cases = fsr::run_gradcheck_suite(seed);
    bool ok = true;
    std::printf("case,params,max_rel_error,status\n");
    for (const auto& c : cases) {
        std::printf("%s,%zu,%.3e,%s\n", c.name.c_str(), c.report.params.size(),
                    c.report.max_rel_error, c.report.passed ? "PASS" : "FAIL");
        ok = ok && c.report.passed;
    }
    std::fprintf(stderr, "%s: %zu cases\n", ok ? "all passed" : "FAILED", cases.size());
    return ok ? kOk : kNumerical;
}

fsr::DiscrepancyProfile read_profile(const fs::path& run) {
    const fs::path path = run / "metrics" / "discrepancy.csv";
    std::ifstream in(path);
    if (!in) throw fsr::IoError("cannot read " + path.string());
    const auto profiles = fsr::read_discrepancy_csv(in);
    if (profiles.empty()) throw fsr::IoError(path.string() + " holds no profile");
    return profiles.front();
}

int cmd_discrepancy(const std::string& run_a, const std::string& run_b, const std::string& out) {
    const auto a = read_profile(run_a);
    const auto b = read_profile(run_b);
    const auto delta = fsr::discrepancy_delta(a, b);
    std::ofstream file;
    if (!out.empty()) file = open_out(out);
    std::ostream& os = out.empty() ? std::cout : file;
    os << "block," << a.run << "," << b.run << ",delta\n";
    for (std::size_t i = 0; i < delta.size(); ++i) {
        os << i + 1 << "," << fsr::format_double(a.values[i]) << ","
           << fsr::format_double(b.values[i]) << "," << fsr::format_double(delta[i]) << "\n";
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Feature-based style randomization experiments on synthetic domains"};
    app.require_subcommand(1);

    SettingFlags gen_flags, train_flags, eval_flags;
    std::string out_dir, checkpoint, split = "test", run_a, run_b, delta_out;
    bool force = false;
    std::uint64_t gradcheck_seed = 0;

    auto* gen = app.add_subcommand("gen", "write the four-domain synthetic dataset");
    add_data_flags(*gen, gen_flags);
    gen->add_option("--out", out_dir, "dataset directory")->required();
    gen->add_flag("--force", force, "overwrite a non-empty directory");

    auto* train = app.add_subcommand("train", "run progressive training");
    add_train_flags(*train, train_flags);
    train->add_option("--out", out_dir, "run directory")->required();
    train->add_flag("--force", force, "overwrite a non-empty run directory");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_data_flags(*eval, eval_flags);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--split", split, "test (target domain) or val (source validation)");

    auto* grad = app.add_subcommand("gradcheck", "check gradients of every op and loss");
    grad->add_option("--seed", gradcheck_seed, "seed for the random inputs");

    auto* disc = app.add_subcommand("discrepancy", "per-block discrepancy delta of two runs (a - b)");
    disc->add_option("run_a", run_a, "run directory")->required();
    disc->add_option("run_b", run_b, "run directory")->required();
    disc->add_option("--out", delta_out, "CSV path (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*gen) return cmd_gen(gen_flags, out_dir, force);
        if (*train) return cmd_train(train_flags, out_dir, force);
        if (*eval) return cmd_eval(eval_flags, checkpoint, split);
        if (*grad) return cmd_gradcheck(gradcheck_seed);
        if (*disc) return cmd_discrepancy(run_a, run_b, delta_out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kUsage;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const fsr::NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kNumerical;
    } catch (const fsr::NonFiniteError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kNumerical;
    } catch (const fsr::IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return kUsage;
}
