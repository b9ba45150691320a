#pragma once

#include "fsr/tensor.hpp"

namespace fsr {

inline constexpr double kStyleEpsilon = 1e-6;

/// Per-sample, per-channel style of a feature map.
struct StyleStats {
    Tensor mu;     // (N, C)
    Tensor sigma;  // (N, C), sqrt(spatial variance + epsilon)
    double epsilon = kStyleEpsilon;
};

/// Spatial mean and standard deviation of each (sample, channel) plane.
StyleStats channel_stats(const Tensor& f, double epsilon = kStyleEpsilon);

/// (f - f_mu) / f_sigma with the statistics broadcast back over H, W.
Tensor normalize_content(const Tensor& f, double epsilon = kStyleEpsilon);

/// gamma * (f - f_mu) / f_sigma + beta, gamma and beta shaped (C).
Tensor instance_norm(const Tensor& f, const Tensor& gamma, const Tensor& beta,
                     double epsilon = kStyleEpsilon);

/// Re-standardizes f and imposes target statistics. Targets are (C), shared
/// by every sample, or (N, C), one row per sample. Negative sigma is rejected.
Tensor adain(const Tensor& f, const Tensor& target_mu, const Tensor& target_sigma,
             double epsilon = kStyleEpsilon);

}  // namespace fsr
