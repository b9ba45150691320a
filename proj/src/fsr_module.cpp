#include "fsr/fsr_module.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fsr {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

void check_finite_tensor(const Tensor& t, const std::string& name) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) throw TensorError("fsr: non-finite parameter " + name);
    }
}

}  // namespace

FsrParams FsrParams::create(std::size_t channels, std::size_t hidden, Rng& rng) {
    if (channels == 0 || hidden == 0) throw TensorError("FsrParams: dimensions must be >= 1");
    FsrParams p;
    p.enc_w = uniform_tensor({channels, hidden}, std::sqrt(1.0 / static_cast<double>(channels)), rng);
    p.enc_b = Tensor::zeros({hidden}, true);
    p.dec_w = uniform_tensor({hidden, channels}, std::sqrt(1.0 / static_cast<double>(hidden)), rng);
    p.dec_b = Tensor::zeros({channels}, true);
    return p;
}

std::vector<NamedTensor> FsrParams::parameters(const std::string& prefix) const {
    return {{prefix + "/theta_a/w", enc_w},
            {prefix + "/theta_a/b", enc_b},
            {prefix + "/theta_b/w", dec_w},
            {prefix + "/theta_b/b", dec_b}};
}

void FsrParams::check_finite() const {
    for (const auto& p : parameters("fsr")) check_finite_tensor(p.tensor, p.name);
}

// ---------------------------------------------------------------------------

AlphaDistribution AlphaDistribution::parse(const std::string& text) {
    if (text == "uniform") return {};
    const std::string prefix = "beta:";
    if (text.rfind(prefix, 0) == 0) {
        double v = 0.0;
        try {
            std::size_t used = 0;
            v = std::stod(text.substr(prefix.size()), &used);
            if (used != text.size() - prefix.size()) throw std::invalid_argument(text);
        } catch (const std::exception&) {
            throw std::invalid_argument("alpha distribution: bad beta parameter in '" + text + "'");
        }
        if (!(v > 0.0)) {
            throw std::invalid_argument("alpha distribution: beta parameter must be > 0");
        }
        return {AlphaKind::Beta, v};
    }
    throw std::invalid_argument("alpha distribution: expected 'uniform' or 'beta:<v>', got '" +
                                text + "'");
}

std::string AlphaDistribution::to_string() const {
    if (kind == AlphaKind::Uniform) return "uniform";
    std::ostringstream os;
    os.precision(17);
    os << "beta:" << beta;
    return os.str();
}

NoiseDraw NoiseDraw::rows(std::span<const std::size_t> index) const {
    NoGradGuard no_grad;
    return {gather_rows(n_mu, index), gather_rows(n_sigma, index), gather_rows(alpha, index)};
}

NoiseDraw NoiseDraw::with_alpha(double value) const {
    return {n_mu, n_sigma, Tensor::full(alpha.shape(), value)};
}

NoiseDraw sample_noise(std::size_t batch, std::size_t hidden, const AlphaDistribution& dist,
                       Rng& rng) {
    if (dist.kind == AlphaKind::Beta && !(dist.beta > 0.0)) {
        throw TensorError("sample_noise: beta parameter must be > 0");
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> mu(batch * hidden), sigma(batch * hidden), alpha(batch);
    for (auto& v : mu) v = normal(rng);
    for (auto& v : sigma) v = normal(rng);
    if (dist.kind == AlphaKind::Uniform) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (auto& a : alpha) a = u(rng);
    } else {
        std::gamma_distribution<double> gamma(dist.beta, 1.0);
        for (auto& a : alpha) {
            double x = 0.0, y = 0.0;
            do {
                x = gamma(rng);
                y = gamma(rng);
            } while (x + y == 0.0);
            a = x / (x + y);
        }
    }
    return {Tensor::from({batch, hidden}, std::move(mu)),
            Tensor::from({batch, hidden}, std::move(sigma)),
            Tensor::from({batch, 1}, std::move(alpha))};
}

// ---------------------------------------------------------------------------

DecodedStyle decode_style(const StyleStats& stats, const FsrParams& params,
                          const NoiseDraw& draw) {
    const std::size_t n = stats.mu.dim(0);
    if (stats.mu.dim(1) != params.channels()) {
        throw TensorError("fsr: feature map has " + std::to_string(stats.mu.dim(1)) +
                          " channels, FSR expects " + std::to_string(params.channels()));
    }
    const Shape noise_shape{n, params.hidden()};
    if (draw.n_mu.shape() != noise_shape || draw.n_sigma.shape() != noise_shape ||
        draw.alpha.shape() != Shape{n, 1}) {
        throw TensorError("fsr: noise draw " + shape_to_string(draw.n_mu.shape()) +
                          " does not match batch " + std::to_string(n) + " x hidden " +
                          std::to_string(params.hidden()));
    }
    params.check_finite();

    std::vector<double> rest(n);
    for (std::size_t i = 0; i < n; ++i) rest[i] = 1.0 - draw.alpha.data()[i];
    const Tensor one_minus_alpha = Tensor::from({n, 1}, std::move(rest));

    auto embed = [&](const Tensor& stat, const Tensor& noise) {
        auto encoded = relu(matmul(stat, params.enc_w) + params.enc_b);
        return draw.alpha * encoded + one_minus_alpha * noise;
    };
    auto decode = [&](const Tensor& e) { return relu(matmul(e, params.dec_w) + params.dec_b); };
    return {decode(embed(stats.mu, draw.n_mu)), decode(embed(stats.sigma, draw.n_sigma))};
}

Tensor fsr_forward(const Tensor& f, const FsrParams& params, const NoiseDraw& draw,
                   double epsilon) {
    const auto stats = channel_stats(f, epsilon);
    const auto style = decode_style(stats, params, draw);
    const std::size_t n = f.dim(0);
    const std::size_t c = f.dim(1);
    auto content = (f - reshape(stats.mu, {n, c, 1, 1})) / reshape(stats.sigma, {n, c, 1, 1});
    return content * reshape(style.sigma, {n, c, 1, 1}) + reshape(style.mu, {n, c, 1, 1});
}

Tensor fsr_forward_ablated(const Tensor& f, FsrAblation mode, const FsrParams* params,
                           const NoiseDraw& draw, double epsilon) {
    switch (mode) {
        case FsrAblation::None:
        case FsrAblation::NoNoise: {
            if (params == nullptr) throw TensorError("fsr_forward_ablated: parameters required");
            return fsr_forward(f, *params, mode == FsrAblation::NoNoise ? draw.with_alpha(1.0) : draw,
                               epsilon);
        }
        case FsrAblation::NoEncDec: {
            const auto stats = channel_stats(f, epsilon);
            if (draw.n_mu.shape() != stats.mu.shape() || draw.n_sigma.shape() != stats.mu.shape()) {
                throw TensorError("fsr_forward_ablated: noise " +
                                  shape_to_string(draw.n_mu.shape()) + " must match stats " +
                                  shape_to_string(stats.mu.shape()));
            }
            return adain(f, stats.mu + draw.n_mu, relu(stats.sigma + draw.n_sigma), epsilon);
        }
    }
    throw TensorError("fsr_forward_ablated: unknown mode");
}

// ---------------------------------------------------------------------------

FsrBank::FsrBank(std::size_t num_domains, std::size_t channels, std::size_t hidden, bool shared,
                 Rng& rng)
    : shared_(shared), channels_(channels), hidden_(hidden) {
    if (num_domains == 0) throw TensorError("FsrBank: at least one domain required");
    const std::size_t count = shared ? 1 : num_domains;
    for (std::size_t i = 0; i < count; ++i) entries_.push_back(FsrParams::create(channels, hidden, rng));
}

const FsrParams& FsrBank::for_domain(std::size_t domain) const {
    if (shared_) return entries_.front();
    if (domain >= entries_.size()) {
        throw TensorError("FsrBank: no FSR for domain " + std::to_string(domain));
    }
    return entries_[domain];
}

Tensor FsrBank::apply(const Tensor& f, std::span<const std::size_t> domains,
                      const NoiseDraw& draw, FsrAblation ablation, double epsilon) const {
    if (f.rank() != 4 || f.dim(0) != domains.size() || draw.batch() != domains.size()) {
        throw TensorError("FsrBank::apply: batch of " + std::to_string(domains.size()) +
                          " domain labels vs feature map " + shape_to_string(f.shape()));
    }
    if (shared_) return fsr_forward_ablated(f, ablation, &entries_.front(), draw, epsilon);

    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < domains.size(); ++i) {
        (void)for_domain(domains[i]);
        groups[domains[i]].push_back(i);
    }
    if (groups.size() == 1) {
        return fsr_forward_ablated(f, ablation, &for_domain(groups.begin()->first), draw, epsilon);
    }
    std::vector<Tensor> parts;
    std::vector<std::size_t> order;
    for (const auto& [domain, rows] : groups) {
        parts.push_back(fsr_forward_ablated(gather_rows(f, rows), ablation, &for_domain(domain),
                                            draw.rows(rows), epsilon));
        order.insert(order.end(), rows.begin(), rows.end());
    }
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t j = 0; j < order.size(); ++j) inverse[order[j]] = j;
    return gather_rows(concat_rows(parts), inverse);
}

std::vector<NamedTensor> FsrBank::parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        auto p = entries_[i].parameters(shared_ ? "fsr/shared" : "fsr/" + std::to_string(i));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

}  // namespace fsr
