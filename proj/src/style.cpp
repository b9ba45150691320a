#include "fsr/style.hpp"

#include <algorithm>

namespace fsr {

namespace {

void check_feature_map(const Tensor& f, const char* who) {
    if (f.rank() != 4) {
        throw TensorError(std::string(who) + ": expected (N, C, H, W), got " +
                          shape_to_string(f.shape()));
    }
    if (f.dim(2) * f.dim(3) == 0) {
        throw TensorError(std::string(who) + ": empty spatial extent");
    }
}

// (N, C) or (C) -> broadcastable against (N, C, H, W).
Tensor as_style_map(const Tensor& s, const Tensor& f, const char* who) {
    const std::size_t n = f.dim(0);
    const std::size_t c = f.dim(1);
    if (s.rank() == 1 && s.dim(0) == c) return reshape(s, {1, c, 1, 1});
    if (s.rank() == 2 && s.dim(0) == n && s.dim(1) == c) return reshape(s, {n, c, 1, 1});
    throw TensorError(std::string(who) + ": style target " + shape_to_string(s.shape()) +
                      " does not match feature map " + shape_to_string(f.shape()));
}

}  // namespace

StyleStats channel_stats(const Tensor& f, double epsilon) {
    check_feature_map(f, "channel_stats");
    if (!(epsilon >= 0.0)) throw TensorError("channel_stats: epsilon must be >= 0");
    const std::size_t n = f.dim(0);
    const std::size_t c = f.dim(1);
    auto mu = mean(f, {2, 3});
    auto centered = f - reshape(mu, {n, c, 1, 1});
    auto var = mean(square(centered), {2, 3});
    return {mu, sqrt(add_scalar(var, epsilon)), epsilon};
}

Tensor normalize_content(const Tensor& f, double epsilon) {
    const auto stats = channel_stats(f, epsilon);
    const std::size_t n = f.dim(0);
    const std::size_t c = f.dim(1);
    return (f - reshape(stats.mu, {n, c, 1, 1})) / reshape(stats.sigma, {n, c, 1, 1});
}

Tensor instance_norm(const Tensor& f, const Tensor& gamma, const Tensor& beta, double epsilon) {
    check_feature_map(f, "instance_norm");
    const std::size_t c = f.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
        throw TensorError("instance_norm: gamma " + shape_to_string(gamma.shape()) + " / beta " +
                          shape_to_string(beta.shape()) + " do not match " +
                          std::to_string(c) + " channels");
    }
    return normalize_content(f, epsilon) * reshape(gamma, {1, c, 1, 1}) +
           reshape(beta, {1, c, 1, 1});
}

Tensor adain(const Tensor& f, const Tensor& target_mu, const Tensor& target_sigma,
             double epsilon) {
    check_feature_map(f, "adain");
    auto sd = target_sigma.data();
    if (std::any_of(sd.begin(), sd.end(), [](double v) { return v < 0.0; })) {
        throw TensorError("adain: negative target sigma");
    }
    auto mu_map = as_style_map(target_mu, f, "adain");
    auto sigma_map = as_style_map(target_sigma, f, "adain");
    return normalize_content(f, epsilon) * sigma_map + mu_map;
}

}  // namespace fsr
