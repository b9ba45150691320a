#include "fsr/metrics.hpp"

#include "fsr/style.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace fsr {

namespace {

std::vector<double> pooled_vector(const Tensor& t) {
    if (t.rank() == 1) return {t.data().begin(), t.data().end()};
    if (t.rank() == 3 || (t.rank() == 4 && t.dim(0) == 1)) {
        const std::size_t c = t.rank() == 3 ? t.dim(0) : t.dim(1);
        const std::size_t plane = t.numel() / c;
        std::vector<double> out(c, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const auto d = t.data().subspan(ch * plane, plane);
            out[ch] = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(plane);
        }
        return out;
    }
    throw std::invalid_argument("domain_discrepancy: expected (C, H, W) or (C), got " +
                                shape_to_string(t.shape()));
}

}  // namespace

double domain_discrepancy(std::span<const Tensor> domain_means) {
    const std::size_t k = domain_means.size();
    if (k < 2) throw std::invalid_argument("domain_discrepancy: need at least two domains");
    std::vector<std::vector<double>> gap;
    for (const auto& t : domain_means) {
        if (t.shape() != domain_means[0].shape()) {
            throw std::invalid_argument("domain_discrepancy: shape mismatch " +
                                        shape_to_string(t.shape()) + " vs " +
                                        shape_to_string(domain_means[0].shape()));
        }
        gap.push_back(pooled_vector(t));
    }
    double total = 0.0;
    for (std::size_t m = 0; m < k; ++m) {
        for (std::size_t n = m + 1; n < k; ++n) {
            for (std::size_t c = 0; c < gap[m].size(); ++c) total += std::abs(gap[m][c] - gap[n][c]);
        }
    }
    return 2.0 * total / static_cast<double>(k * (k - 1));
}

DiscrepancyProfile discrepancy_profile(Model& model, std::span<const Sample> samples,
                                       const std::string& run,
                                       std::optional<std::size_t> fsr_block,
                                       std::size_t batch_size) {
    if (samples.empty()) throw std::invalid_argument("discrepancy_profile: no samples");
    NoGradGuard no_grad;
    const std::size_t blocks = model.backbone.block_count();
    std::map<std::size_t, std::size_t> domain_index;
    for (const auto& s : samples) domain_index.emplace(s.d, domain_index.size());
    for (std::size_t i = 0; auto& [d, idx] : domain_index) idx = i++;
    const std::size_t k = domain_index.size();

    // sums[block][domain] = running sum of per-sample GAP vectors
    std::vector<std::vector<std::vector<double>>> sums(blocks, std::vector<std::vector<double>>(k));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t b = 0; b < blocks; ++b) {
        for (auto& v : sums[b]) v.assign(model.backbone.channels_at(b + 1), 0.0);
    }
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor h = batch_images(samples, idx);
        for (std::size_t b = 0; b < blocks; ++b) {
            h = model.backbone.forward_blocks(h, b, b + 1, Mode::Eval);
            const Tensor pooled = global_avg_pool(h);
            const std::size_t c = pooled.dim(1);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                auto& acc = sums[b][domain_index.at(samples[idx[r]].d)];
                for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += pooled.data()[r * c + ch];
            }
        }
        for (std::size_t i : idx) ++counts[domain_index.at(samples[i].d)];
    }

    DiscrepancyProfile profile{run, {}, fsr_block};
    for (std::size_t b = 0; b < blocks; ++b) {
        std::vector<Tensor> means;
        for (std::size_t m = 0; m < k; ++m) {
            std::vector<double> v = sums[b][m];
            for (auto& x : v) x /= static_cast<double>(counts[m]);
            const std::size_t c = v.size();
            means.push_back(Tensor::from({c}, std::move(v)));
        }
        profile.values.push_back(domain_discrepancy(means));
    }
    return profile;
}

std::vector<double> discrepancy_delta(const DiscrepancyProfile& a, const DiscrepancyProfile& b) {
    if (a.values.size() != b.values.size()) {
        throw std::invalid_argument("discrepancy_delta: block count mismatch (" +
                                    std::to_string(a.values.size()) + " vs " +
                                    std::to_string(b.values.size()) + ")");
    }
    std::vector<double> out(a.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] - b.values[i];
    return out;
}

Accuracy evaluate(Model& model, std::span<const Sample> samples, std::size_t num_classes,
                  std::size_t batch_size) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
    NoGradGuard no_grad;
    std::vector<std::size_t> correct(num_classes, 0), total(num_classes, 0);
    std::size_t hits = 0;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor logits =
            model.classifier.forward(model.backbone.features(batch_images(samples, idx), Mode::Eval));
        const std::size_t k = logits.dim(1);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto row = logits.data().subspan(r * k, k);
            const auto pred = static_cast<std::size_t>(
                std::distance(row.begin(), std::max_element(row.begin(), row.end())));
            const std::size_t y = samples[idx[r]].y;
            if (y >= num_classes) throw std::invalid_argument("evaluate: label out of range");
            ++total[y];
            if (pred == y) {
                ++correct[y];
                ++hits;
            }
        }
    }
    Accuracy acc;
    acc.count = samples.size();
    acc.top1 = static_cast<double>(hits) / static_cast<double>(samples.size());
    for (std::size_t c = 0; c < num_classes; ++c) {
        acc.per_class.push_back(total[c] ? static_cast<double>(correct[c]) / static_cast<double>(total[c])
                                         : 0.0);
    }
    return acc;
}

// ---------------------------------------------------------------------------

Tensor mixstyle(const Tensor& f, std::span<const std::size_t> perm, std::span<const double> weights,
                double epsilon) {
    const std::size_t n = f.dim(0);
    if (n < 2) throw std::invalid_argument("mixstyle: batch of at least 2 required");
    if (perm.size() != n || weights.size() != n) {
        throw std::invalid_argument("mixstyle: permutation/weights must have one entry per sample");
    }
    const auto stats = channel_stats(f, epsilon);
    const Tensor w = Tensor::from({n, 1}, {weights.begin(), weights.end()});
    std::vector<double> rest(n);
    for (std::size_t i = 0; i < n; ++i) rest[i] = 1.0 - weights[i];
    const Tensor w_rest = Tensor::from({n, 1}, std::move(rest));
    auto mu = w * stats.mu + w_rest * gather_rows(stats.mu, perm);
    auto sigma = w * stats.sigma + w_rest * gather_rows(stats.sigma, perm);
    return adain(f, mu, sigma, epsilon);
}

Tensor padain(const Tensor& f, std::span<const std::size_t> perm, const std::vector<bool>& swap,
              double epsilon) {
    const std::size_t n = f.dim(0);
    if (perm.size() != n || swap.size() != n) {
        throw std::invalid_argument("padain: permutation/mask must have one entry per sample");
    }
    if (std::none_of(swap.begin(), swap.end(), [](bool b) { return b; })) return f;
    std::vector<double> mask(n);
    for (std::size_t i = 0; i < n; ++i) mask[i] = swap[i] ? 1.0 : 0.0;
    const auto stats = channel_stats(f, epsilon);
    const Tensor m = Tensor::from({n, 1}, mask);
    for (auto& v : mask) v = 1.0 - v;
    const Tensor keep = Tensor::from({n, 1}, mask);
    auto mu = keep * stats.mu + m * gather_rows(stats.mu, perm);
    auto sigma = keep * stats.sigma + m * gather_rows(stats.sigma, perm);
    return adain(f, mu, sigma, epsilon);
}

Tensor baseline_augment(const Tensor& f, const BaselineAugment& mode, Rng& rng) {
    const std::size_t n = f.dim(0);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    if (mode.kind == BaselineKind::MixStyle) {
        if (!(mode.param > 0.0)) throw std::invalid_argument("mixstyle: Beta parameter must be > 0");
        std::gamma_distribution<double> gamma(mode.param, 1.0);
        std::vector<double> w(n);
        for (auto& x : w) {
            double a = 0.0, b = 0.0;
            do {
                a = gamma(rng);
                b = gamma(rng);
            } while (a + b == 0.0);
            x = a / (a + b);
        }
        return mixstyle(f, perm, w);
    }
    if (mode.param < 0.0 || mode.param > 1.0) {
        throw std::invalid_argument("padain: probability must be in [0, 1]");
    }
    std::bernoulli_distribution coin(mode.param);
    std::vector<bool> swap(n);
    for (std::size_t i = 0; i < n; ++i) swap[i] = coin(rng);
    return padain(f, perm, swap);
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

void write_training_log_header(std::ostream& out) {
    out << "step,stage,block,L_d,L_con,L_div,L_cls,lr\n";
}

void write_training_log_row(std::ostream& out, const LossRecord& r) {
    out << r.step << ',' << r.stage << ',' << r.block << ',' << format_double(r.l_d) << ','
        << format_double(r.l_con) << ',' << format_double(r.l_div) << ','
        << format_double(r.l_cls) << ',' << format_double(r.lr) << '\n';
}

void write_discrepancy_csv(std::ostream& out, std::span<const DiscrepancyProfile> profiles) {
    out << "run,block,d_i\n";
    for (const auto& p : profiles) {
        for (std::size_t i = 0; i < p.values.size(); ++i) {
            out << p.run << ',' << (i + 1) << ',' << format_double(p.values[i]) << '\n';
        }
    }
}

std::vector<DiscrepancyProfile> read_discrepancy_csv(std::istream& in) {
    std::vector<DiscrepancyProfile> out;
    std::string line;
    if (!std::getline(in, line) || line.rfind("run,block,d_i", 0) != 0) {
        throw std::invalid_argument("discrepancy csv: missing header run,block,d_i");
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string run, block, value;
        if (!std::getline(row, run, ',') || !std::getline(row, block, ',') ||
            !std::getline(row, value)) {
            throw std::invalid_argument("discrepancy csv: malformed row '" + line + "'");
        }
        auto it = std::find_if(out.begin(), out.end(),
                               [&](const DiscrepancyProfile& p) { return p.run == run; });
        if (it == out.end()) {
            out.push_back({run, {}, std::nullopt});
            it = std::prev(out.end());
        }
        const std::size_t b = std::stoul(block);
        if (b != it->values.size() + 1) {
            throw std::invalid_argument("discrepancy csv: blocks out of order for run " + run);
        }
        it->values.push_back(std::stod(value));
    }
    return out;
}

void write_results_csv(std::ostream& out, std::span<const ResultRow> rows) {
    out << "seed,target_domain,accuracy\n";
    for (const auto& r : rows) {
        out << r.seed << ',' << r.target_domain << ',' << format_double(r.accuracy) << '\n';
    }
}

void write_series_csv(std::ostream& out, std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("series: x/y length mismatch");
    out << "x,y\n";
    for (std::size_t i = 0; i < x.size(); ++i) {
        out << format_double(x[i]) << ',' << format_double(y[i]) << '\n';
    }
}

}  // namespace fsr
