#pragma once

#include "fsr/nn.hpp"
#include "fsr/style.hpp"
#include "fsr/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fsr {

/// Encoder (C -> D) and decoder (D -> C) of one style-randomization instance.
struct FsrParams {
    /// Weights uniform in +-sqrt(1/fan_in), biases zero.
    static FsrParams create(std::size_t channels, std::size_t hidden, Rng& rng);

    std::size_t channels() const { return enc_w.dim(0); }
    std::size_t hidden() const { return enc_w.dim(1); }

    /// Names "<prefix>/theta_a/w", "<prefix>/theta_a/b", "<prefix>/theta_b/w", "<prefix>/theta_b/b".
    std::vector<NamedTensor> parameters(const std::string& prefix) const;
    void check_finite() const;

    Tensor enc_w;  // (C, D)
    Tensor enc_b;  // (D)
    Tensor dec_w;  // (D, C)
    Tensor dec_b;  // (C)
};

enum class AlphaKind { Uniform, Beta };

struct AlphaDistribution {
    AlphaKind kind = AlphaKind::Uniform;
    double beta = 1.0;  // Beta(beta, beta) parameter

    /// "uniform" or "beta:<v>".
    static AlphaDistribution parse(const std::string& text);
    std::string to_string() const;
};

/// Noise and mixing weights for one forward call.
struct NoiseDraw {
    Tensor n_mu;     // (N, D), standard normal
    Tensor n_sigma;  // (N, D), standard normal
    Tensor alpha;    // (N, 1), in [0, 1]

    std::size_t batch() const { return alpha.dim(0); }
    NoiseDraw rows(std::span<const std::size_t> index) const;
    NoiseDraw with_alpha(double value) const;
};

NoiseDraw sample_noise(std::size_t batch, std::size_t hidden, const AlphaDistribution& dist,
                       Rng& rng);

/// Decoded style targets ReLU(theta_b(E_mu)), ReLU(theta_b(E_sigma)), each (N, C),
/// where E = alpha * ReLU(theta_a(stat)) + (1 - alpha) * noise.
struct DecodedStyle {
    Tensor mu;
    Tensor sigma;
};
DecodedStyle decode_style(const StyleStats& stats, const FsrParams& params,
                          const NoiseDraw& draw);

/// Restyles f with the decoded targets, keeping its normalized content.
Tensor fsr_forward(const Tensor& f, const FsrParams& params, const NoiseDraw& draw,
                   double epsilon = kStyleEpsilon);

enum class FsrAblation { None, NoNoise, NoEncDec };

/// NoNoise: fsr_forward with alpha forced to 1.
/// NoEncDec: adain(f, f_mu + n_mu, ReLU(f_sigma + n_sigma)), noise of width C;
/// `params` is unused.
Tensor fsr_forward_ablated(const Tensor& f, FsrAblation mode, const FsrParams* params,
                           const NoiseDraw& draw, double epsilon = kStyleEpsilon);

/// One FSR per source domain, or a single shared one.
class FsrBank {
public:
    FsrBank(std::size_t num_domains, std::size_t channels, std::size_t hidden, bool shared,
            Rng& rng);

    std::size_t size() const { return entries_.size(); }
    bool shared() const { return shared_; }
    std::size_t channels() const { return channels_; }
    std::size_t hidden() const { return hidden_; }
    const FsrParams& for_domain(std::size_t domain) const;

    /// Routes each sample through the FSR of its domain; output rows keep input order.
    Tensor apply(const Tensor& f, std::span<const std::size_t> domains, const NoiseDraw& draw,
                 FsrAblation ablation = FsrAblation::None, double epsilon = kStyleEpsilon) const;

    /// Names "fsr/<domain>/..." ("fsr/shared/..." in shared mode).
    std::vector<NamedTensor> parameters() const;

private:
    std::vector<FsrParams> entries_;
    bool shared_;
    std::size_t channels_;
    std::size_t hidden_;
};

}  // namespace fsr
