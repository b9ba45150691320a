#pragma once

#include "fsr/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace fsr {

using Rng = std::mt19937_64;

enum class Mode { Train, Eval };

/// 2-D convolution over (N, C_in, H, W) with weight (C_out, C_in, k, k) and bias (C_out).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

/// Global average pooling, (N, C, H, W) -> (N, C).
Tensor global_avg_pool(const Tensor& f);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Row-wise softmax of an (N, K) tensor.
Tensor softmax(const Tensor& logits);

struct ConvBlockSpec {
    std::size_t in_channels = 3;
    std::size_t out_channels = 16;
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t padding = 1;
};

/// conv -> per-channel batch normalization -> ReLU.
class ConvBlock {
public:
    static constexpr double kNormEpsilon = 1e-5;
    static constexpr double kRunningMomentum = 0.1;

    ConvBlock(const ConvBlockSpec& spec, Rng& rng);

    /// In Train mode normalizes with batch statistics and, if `update_running`,
    /// folds them into the running averages used in Eval mode.
    Tensor forward(const Tensor& x, Mode mode, bool update_running = false);

    const ConvBlockSpec& spec() const { return spec_; }
    std::size_t output_extent(std::size_t in) const;

    std::vector<NamedTensor> parameters(const std::string& prefix) const;
    std::vector<NamedTensor> buffers(const std::string& prefix) const;

    Tensor weight;
    Tensor bias;
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;

private:
    ConvBlockSpec spec_;
};

struct BackboneSpec {
    std::size_t in_channels = 3;
    std::size_t input_size = 32;
    std::vector<std::size_t> channels{16, 32, 64, 128};
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t padding = 1;
};

/// Feature extractor with explicit block boundaries. Block indices are 1-based:
/// forward_to(x, i) yields the output of block i.
class Backbone {
public:
    Backbone(const BackboneSpec& spec, Rng& rng);

    std::size_t block_count() const { return blocks_.size(); }
    const BackboneSpec& spec() const { return spec_; }
    std::size_t channels_at(std::size_t block) const;
    std::size_t extent_at(std::size_t block) const;
    std::size_t feature_dim() const { return spec_.channels.back(); }

    /// Applies blocks from+1 .. to to a block-`from` output (from = 0 means input).
    Tensor forward_blocks(const Tensor& x, std::size_t from, std::size_t to, Mode mode,
                          bool update_running = false);
    Tensor forward_to(const Tensor& x, std::size_t block, Mode mode, bool update_running = false);
    /// Remaining blocks after `block` followed by global average pooling.
    Tensor forward_rest(const Tensor& f, std::size_t block, Mode mode, bool update_running = false);
    Tensor features(const Tensor& x, Mode mode, bool update_running = false);

    ConvBlock& block(std::size_t index);
    const ConvBlock& block(std::size_t index) const;

    std::vector<NamedTensor> parameters() const;
    std::vector<NamedTensor> buffers() const;

private:
    void check_block_input(const Tensor& f, std::size_t block) const;

    BackboneSpec spec_;
    std::vector<ConvBlock> blocks_;
};

/// Single fully connected layer.
class Linear {
public:
    Linear(std::size_t in, std::size_t out, Rng& rng);
    Tensor forward(const Tensor& x) const;
    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }
    std::vector<NamedTensor> parameters(const std::string& prefix) const;

    Tensor weight;  // (in, out)
    Tensor bias;    // (out)
};

/// Feature extractor, label classifier and domain discriminator.
struct Model {
    Model(const BackboneSpec& spec, std::size_t num_classes, std::size_t num_domains, Rng& rng);

    Backbone backbone;
    Linear classifier;
    Linear discriminator;

    std::vector<NamedTensor> backbone_parameters() const { return backbone.parameters(); }
    std::vector<NamedTensor> classifier_parameters() const {
        return classifier.parameters("classifier");
    }
    std::vector<NamedTensor> discriminator_parameters() const {
        return discriminator.parameters("discriminator");
    }
    /// Parameters and normalization buffers, for checkpoints.
    std::vector<NamedTensor> state() const;
    /// Copies values by name from `entries` into this model; throws on a
    /// missing name or a shape mismatch.
    void load_state(const std::vector<NamedTensor>& entries);
    /// Rebuilds the architecture from checkpoint tensor shapes.
    static Model from_state(const std::vector<NamedTensor>& entries);

    Model clone() const;
};

struct SgdOptions {
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay:
/// v = m v + (g + wd p); p -= lr v. Parameters without a gradient are skipped.
class Sgd {
public:
    explicit Sgd(SgdOptions options = {}) : options_(options) {}

    void step(std::span<const NamedTensor> params, double lr);
    void forget(std::span<const NamedTensor> params);
    const SgdOptions& options() const { return options_; }

private:
    SgdOptions options_;
    std::unordered_map<const Node*, std::vector<double>> velocity_;
};

void zero_grads(std::span<const NamedTensor> params);
/// Rescales gradients so their joint L2 norm is at most `max_norm`; returns
/// the norm before rescaling. `max_norm` <= 0 leaves them untouched.
double clip_grad_norm(std::span<const NamedTensor> params, double max_norm);
void set_requires_grad(std::span<const NamedTensor> params, bool value);

/// FNV-1a over names, shapes and raw value bytes.
std::uint64_t hash_tensors(std::span<const NamedTensor> tensors);

}  // namespace fsr
