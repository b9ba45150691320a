#include "run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>

namespace fsrcli {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double as_double(const Settings& s, const std::string& key) {
    const std::string& v = s.at(key);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    return out;
}

std::uint64_t as_uint(const Settings& s, const std::string& key) {
    const std::string& v = s.at(key);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

bool as_bool(const Settings& s, const std::string& key) {
    const std::string& v = s.at(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

}  // namespace

Settings default_settings() {
    return {
        {"seed", "0"},
        {"data-seed", "1234"},
        {"lambda", "1"},
        {"stages", "4"},
        {"iters", "100"},
        {"epochs", "0"},
        {"batch", "64"},
        {"lr-backbone", "0.01"},
        {"lr-head", "0.01"},
        {"momentum", "0.9"},
        {"weight-decay", "0.0005"},
        {"clip-norm", "5"},
        {"alpha-dist", "uniform"},
        {"ablate", "none"},
        {"star", "false"},
        {"fixed-block", "none"},
        {"target-domain", "3"},
        {"per-class", "100"},
        {"image-size", "32"},
        {"val-fraction", "0.1"},
        {"eval-interval", "0"},
        {"data", ""},
    };
}

void set_value(Settings& settings, const std::string& key, const std::string& value) {
    auto it = settings.find(key);
    if (it == settings.end()) throw ConfigError("unknown setting '" + key + "'");
    it->second = value;
}

void merge_config_file(Settings& settings, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
        }
        set_value(settings, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
}

fsr::TrainConfig train_config(const Settings& s) {
    fsr::TrainConfig c;
    c.seed = as_uint(s, "seed");
    c.lambda = as_double(s, "lambda");
    c.stages = as_uint(s, "stages");
    c.iters_per_stage = as_uint(s, "iters");
    c.epochs_per_stage = as_uint(s, "epochs");
    c.batch_size = as_uint(s, "batch");
    c.lr_backbone = as_double(s, "lr-backbone");
    c.lr_head = as_double(s, "lr-head");
    c.momentum = as_double(s, "momentum");
    c.weight_decay = as_double(s, "weight-decay");
    c.clip_norm = as_double(s, "clip-norm");
    c.eval_interval = as_uint(s, "eval-interval");
    c.star_mode = as_bool(s, "star");
    try {
        c.alpha = fsr::AlphaDistribution::parse(s.at("alpha-dist"));
    } catch (const std::exception& e) {
        throw ConfigError(std::string("alpha-dist: ") + e.what());
    }
    if (s.at("fixed-block") != "none") c.fixed_block = as_uint(s, "fixed-block");

    const std::string& ablate = s.at("ablate");
    if (ablate == "no-div") c.ablation.disable_div = true;
    else if (ablate == "no-con") c.ablation.disable_con = true;
    else if (ablate == "shared") c.ablation.shared_fsr = true;
    else if (ablate == "no-noise") c.ablation.no_noise = true;
    else if (ablate == "no-encdec") c.ablation.no_encdec = true;
    else if (ablate != "none") throw ConfigError("ablate: unknown variant '" + ablate + "'");

    c.backbone.input_size = as_uint(s, "image-size");
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

fsr::BenchmarkSizes benchmark_sizes(const Settings& s) {
    fsr::BenchmarkSizes b;
    b.per_class = as_uint(s, "per-class");
    b.image_size = as_uint(s, "image-size");
    b.val_fraction = as_double(s, "val-fraction");
    if (b.per_class == 0) throw ConfigError("per-class must be >= 1");
    if (b.image_size < 4) throw ConfigError("image-size must be >= 4");
    if (!(b.val_fraction > 0.0 && b.val_fraction < 1.0)) {
        throw ConfigError("val-fraction must lie in (0, 1)");
    }
    return b;
}

std::size_t target_domain(const Settings& s) {
    const auto t = as_uint(s, "target-domain");
    if (t >= fsr::default_domains().size()) {
        throw ConfigError("target-domain " + std::to_string(t) + " out of range");
    }
    return t;
}

std::uint64_t data_seed(const Settings& s) { return as_uint(s, "data-seed"); }

std::uint64_t settings_hash(const Settings& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [k, v] : s) {
        for (char ch : k + "=" + v + "\n") {
            h ^= static_cast<unsigned char>(ch);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace fsrcli
