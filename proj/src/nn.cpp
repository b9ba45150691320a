#include "fsr/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>

namespace fsr {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
    if (in + 2 * padding < kernel) throw TensorError("conv: kernel larger than padded input");
    return (in + 2 * padding - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
    if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) ||
        weight.dim(2) != weight.dim(3) || bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
        throw TensorError("conv2d: shape mismatch, input " + shape_to_string(x.shape()) +
                          " weight " + shape_to_string(weight.shape()) + " bias " +
                          shape_to_string(bias.shape()));
    }
    if (stride == 0) throw TensorError("conv2d: stride must be positive");
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t co = weight.dim(0), k = weight.dim(2);
    const std::size_t ho = conv_output_extent(h, k, stride, padding);
    const std::size_t wo = conv_output_extent(w, k, stride, padding);
    const std::size_t plane = ho * wo;
    const std::size_t rows = ci * k * k;
    const std::size_t cols_n = n * plane;

    // im2col: (ci*k*k) x (n*ho*wo)
    auto cols = std::make_shared<std::vector<double>>(rows * cols_n, 0.0);
    const auto xd = x.data();
    for (std::size_t c = 0; c < ci; ++c) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                double* row = cols->data() + ((c * k + ki) * k + kj) * cols_n;
                for (std::size_t s = 0; s < n; ++s) {
                    const double* img = xd.data() + (s * ci + c) * h * w;
                    double* dst = row + s * plane;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const std::ptrdiff_t iw =
                                static_cast<std::ptrdiff_t>(ow * stride + kj) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                            dst[oh * wo + ow] = img[ih * static_cast<std::ptrdiff_t>(w) + iw];
                        }
                    }
                }
            }
        }
    }

    RowMatrix out_mat = ConstMap(weight.data().data(), co, rows) * ConstMap(cols->data(), rows, cols_n);
    const auto bd = bias.data();
    std::vector<double> out(n * co * plane);
    for (std::size_t o = 0; o < co; ++o) {
        for (std::size_t s = 0; s < n; ++s) {
            const double* src = out_mat.data() + o * cols_n + s * plane;
            double* dst = out.data() + (s * co + o) * plane;
            for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bd[o];
        }
    }

    return make_result(
        {n, co, ho, wo}, std::move(out), {x, weight, bias},
        [=](Node& self) {
            Node& px = *self.parents[0];
            Node& pw = *self.parents[1];
            Node& pb = *self.parents[2];
            RowMatrix dout(co, cols_n);
            for (std::size_t o = 0; o < co; ++o) {
                for (std::size_t s = 0; s < n; ++s) {
                    std::memcpy(dout.data() + o * cols_n + s * plane,
                                self.grad.data() + (s * co + o) * plane, plane * sizeof(double));
                }
            }
            if (pb.requires_grad) {
                auto& gb = pb.grad_buffer();
                for (std::size_t o = 0; o < co; ++o) gb[o] += dout.row(static_cast<Eigen::Index>(o)).sum();
            }
            if (pw.requires_grad) {
                MutMap(pw.grad_buffer().data(), co, rows).noalias() +=
                    dout * ConstMap(cols->data(), rows, cols_n).transpose();
            }
            if (px.requires_grad) {
                RowMatrix dcols = ConstMap(pw.data.data(), co, rows).transpose() * dout;
                auto& gx = px.grad_buffer();
                for (std::size_t c = 0; c < ci; ++c) {
                    for (std::size_t ki = 0; ki < k; ++ki) {
                        for (std::size_t kj = 0; kj < k; ++kj) {
                            const double* row = dcols.data() + ((c * k + ki) * k + kj) * cols_n;
                            for (std::size_t s = 0; s < n; ++s) {
                                double* img = gx.data() + (s * ci + c) * h * w;
                                const double* src = row + s * plane;
                                for (std::size_t oh = 0; oh < ho; ++oh) {
                                    const std::ptrdiff_t ih =
                                        static_cast<std::ptrdiff_t>(oh * stride + ki) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                                    for (std::size_t ow = 0; ow < wo; ++ow) {
                                        const std::ptrdiff_t iw =
                                            static_cast<std::ptrdiff_t>(ow * stride + kj) -
                                            static_cast<std::ptrdiff_t>(padding);
                                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                                        img[ih * static_cast<std::ptrdiff_t>(w) + iw] +=
                                            src[oh * wo + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor global_avg_pool(const Tensor& f) {
    if (f.rank() != 4) {
        throw TensorError("global_avg_pool: expected (N, C, H, W), got " +
                          shape_to_string(f.shape()));
    }
    return mean(f, {2, 3});
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
        throw TensorError("cross_entropy: logits " + shape_to_string(logits.shape()) + " vs " +
                          std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0);
    const std::size_t k = logits.dim(1);
    for (std::size_t label : labels) {
        if (label >= k) {
            throw TensorError("cross_entropy: label " + std::to_string(label) +
                              " out of range for " + std::to_string(k) + " classes");
        }
    }
    const auto ld = logits.data();
    auto probs = std::make_shared<std::vector<double>>(n * k);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = ld.data() + i * k;
        const double m = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
        const double lse = m + std::log(z);
        total += lse - row[labels[i]];
        for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - lse);
    }
    std::vector<std::size_t> y(labels.begin(), labels.end());
    return make_result({}, {total / static_cast<double>(n)}, {logits},
                       [probs, y = std::move(y), n, k](Node& self) {
                           Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           auto& gp = p.grad_buffer();
                           const double g = self.grad[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                               for (std::size_t j = 0; j < k; ++j) {
                                   const double target = j == y[i] ? 1.0 : 0.0;
                                   gp[i * k + j] += g * ((*probs)[i * k + j] - target);
                               }
                           }
                       });
}

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 2) throw TensorError("softmax: expected (N, K)");
    auto shifted = logits - max(logits, {1}, true);
    auto e = exp(shifted);
    return e / sum(e, {1}, true);
}

// ---------------------------------------------------------------------------

ConvBlock::ConvBlock(const ConvBlockSpec& spec, Rng& rng) : spec_(spec) {
    const std::size_t fan_in = spec.in_channels * spec.kernel * spec.kernel;
    weight = uniform_tensor({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel},
                            std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
    bias = Tensor::zeros({spec.out_channels}, true);
    gamma = Tensor::full({spec.out_channels}, 1.0, true);
    beta = Tensor::zeros({spec.out_channels}, true);
    running_mean = Tensor::zeros({spec.out_channels});
    running_var = Tensor::full({spec.out_channels}, 1.0);
}

std::size_t ConvBlock::output_extent(std::size_t in) const {
    return conv_output_extent(in, spec_.kernel, spec_.stride, spec_.padding);
}

Tensor ConvBlock::forward(const Tensor& x, Mode mode, bool update_running) {
    const std::size_t c = spec_.out_channels;
    auto z = conv2d(x, weight, bias, spec_.stride, spec_.padding);
    const Shape channel_shape{1, c, 1, 1};
    auto g = reshape(gamma, channel_shape);
    auto b = reshape(beta, channel_shape);

    Tensor normalized;
    if (mode == Mode::Train) {
        auto mu = mean(z, {0, 2, 3}, true);
        auto centered = z - mu;
        auto var = mean(square(centered), {0, 2, 3}, true);
        normalized = centered / sqrt(add_scalar(var, kNormEpsilon));
        if (update_running) {
            const double count = static_cast<double>(z.numel() / c);
            const double unbias = count > 1 ? count / (count - 1) : 1.0;
            auto rm = running_mean.mutable_data();
            auto rv = running_var.mutable_data();
            for (std::size_t ch = 0; ch < c; ++ch) {
                rm[ch] = (1 - kRunningMomentum) * rm[ch] + kRunningMomentum * mu.data()[ch];
                rv[ch] = (1 - kRunningMomentum) * rv[ch] +
                         kRunningMomentum * var.data()[ch] * unbias;
            }
        }
    } else {
        auto rm = reshape(running_mean, channel_shape);
        auto rv = reshape(running_var, channel_shape);
        normalized = (z - rm) / sqrt(add_scalar(rv, kNormEpsilon));
    }
    return relu(normalized * g + b);
}

std::vector<NamedTensor> ConvBlock::parameters(const std::string& prefix) const {
    return {{prefix + "/conv/w", weight},
            {prefix + "/conv/b", bias},
            {prefix + "/norm/gamma", gamma},
            {prefix + "/norm/beta", beta}};
}

std::vector<NamedTensor> ConvBlock::buffers(const std::string& prefix) const {
    return {{prefix + "/norm/running_mean", running_mean},
            {prefix + "/norm/running_var", running_var}};
}

// ---------------------------------------------------------------------------

Backbone::Backbone(const BackboneSpec& spec, Rng& rng) : spec_(spec) {
    if (spec.channels.size() < 2) throw TensorError("Backbone: at least two blocks required");
    std::size_t in = spec.in_channels;
    std::size_t extent = spec.input_size;
    for (std::size_t out : spec.channels) {
        ConvBlockSpec bs{in, out, spec.kernel, spec.stride, spec.padding};
        blocks_.emplace_back(bs, rng);
        extent = blocks_.back().output_extent(extent);
        in = out;
    }
}

std::size_t Backbone::channels_at(std::size_t block) const {
    if (block == 0) return spec_.in_channels;
    if (block > blocks_.size()) throw TensorError("Backbone: block index out of range");
    return spec_.channels[block - 1];
}

std::size_t Backbone::extent_at(std::size_t block) const {
    if (block > blocks_.size()) throw TensorError("Backbone: block index out of range");
    std::size_t extent = spec_.input_size;
    for (std::size_t i = 0; i < block; ++i) extent = blocks_[i].output_extent(extent);
    return extent;
}

void Backbone::check_block_input(const Tensor& f, std::size_t block) const {
    const std::size_t c = channels_at(block);
    const std::size_t e = extent_at(block);
    if (f.rank() != 4 || f.dim(1) != c || f.dim(2) != e || f.dim(3) != e) {
        throw TensorError("Backbone: expected block-" + std::to_string(block) +
                          " output shaped (N, " + std::to_string(c) + ", " + std::to_string(e) +
                          ", " + std::to_string(e) + "), got " + shape_to_string(f.shape()));
    }
}

Tensor Backbone::forward_blocks(const Tensor& x, std::size_t from, std::size_t to, Mode mode,
                                bool update_running) {
    if (from > to || to > blocks_.size()) {
        throw TensorError("Backbone: invalid block range " + std::to_string(from) + ".." +
                          std::to_string(to));
    }
    check_block_input(x, from);
    Tensor h = x;
    for (std::size_t i = from; i < to; ++i) h = blocks_[i].forward(h, mode, update_running);
    return h;
}

Tensor Backbone::forward_to(const Tensor& x, std::size_t block, Mode mode, bool update_running) {
    if (block < 1 || block > blocks_.size()) {
        throw TensorError("forward_to: block index " + std::to_string(block) +
                          " out of range 1.." + std::to_string(blocks_.size()));
    }
    return forward_blocks(x, 0, block, mode, update_running);
}

Tensor Backbone::forward_rest(const Tensor& f, std::size_t block, Mode mode,
                              bool update_running) {
    if (block < 1 || block > blocks_.size()) {
        throw TensorError("forward_rest: block index " + std::to_string(block) +
                          " out of range 1.." + std::to_string(blocks_.size()));
    }
    return global_avg_pool(forward_blocks(f, block, blocks_.size(), mode, update_running));
}

Tensor Backbone::features(const Tensor& x, Mode mode, bool update_running) {
    return global_avg_pool(forward_blocks(x, 0, blocks_.size(), mode, update_running));
}

ConvBlock& Backbone::block(std::size_t index) {
    if (index < 1 || index > blocks_.size()) throw TensorError("Backbone: block out of range");
    return blocks_[index - 1];
}

const ConvBlock& Backbone::block(std::size_t index) const {
    if (index < 1 || index > blocks_.size()) throw TensorError("Backbone: block out of range");
    return blocks_[index - 1];
}

std::vector<NamedTensor> Backbone::parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        auto p = blocks_[i].parameters("backbone/block" + std::to_string(i + 1));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

std::vector<NamedTensor> Backbone::buffers() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        auto p = blocks_[i].buffers("backbone/block" + std::to_string(i + 1));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

// ---------------------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, Rng& rng) {
    weight = uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    bias = Tensor::zeros({out}, true);
}

Tensor Linear::forward(const Tensor& x) const { return matmul(x, weight) + bias; }

std::vector<NamedTensor> Linear::parameters(const std::string& prefix) const {
    return {{prefix + "/w", weight}, {prefix + "/b", bias}};
}

// ---------------------------------------------------------------------------

Model::Model(const BackboneSpec& spec, std::size_t num_classes, std::size_t num_domains, Rng& rng)
    : backbone(spec, rng),
      classifier(spec.channels.back(), num_classes, rng),
      discriminator(spec.channels.back(), num_domains, rng) {}

std::vector<NamedTensor> Model::state() const {
    std::vector<NamedTensor> out = backbone.parameters();
    auto buf = backbone.buffers();
    out.insert(out.end(), buf.begin(), buf.end());
    for (auto& p : classifier_parameters()) out.push_back(p);
    for (auto& p : discriminator_parameters()) out.push_back(p);
    out.push_back({"meta/input_size",
                   Tensor::scalar(static_cast<double>(backbone.spec().input_size))});
    return out;
}

void Model::load_state(const std::vector<NamedTensor>& entries) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.tensor;
    for (auto& dst : state()) {
        auto it = by_name.find(dst.name);
        if (it == by_name.end()) throw TensorError("load_state: missing entry " + dst.name);
        if (it->second->shape() != dst.tensor.shape()) {
            throw TensorError("load_state: shape mismatch for " + dst.name + ": " +
                              shape_to_string(it->second->shape()) + " vs " +
                              shape_to_string(dst.tensor.shape()));
        }
        auto src = it->second->data();
        std::copy(src.begin(), src.end(), dst.tensor.mutable_data().begin());
    }
}

Model Model::from_state(const std::vector<NamedTensor>& entries) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.tensor;
    auto find = [&](const std::string& name) -> const Tensor& {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw TensorError("from_state: missing entry " + name);
        return *it->second;
    };
    BackboneSpec spec;
    spec.channels.clear();
    for (std::size_t i = 1;; ++i) {
        auto it = by_name.find("backbone/block" + std::to_string(i) + "/conv/w");
        if (it == by_name.end()) break;
        const Shape& s = it->second->shape();
        if (s.size() != 4) throw TensorError("from_state: conv weight must be rank 4");
        if (i == 1) spec.in_channels = s[1];
        spec.kernel = s[2];
        spec.channels.push_back(s[0]);
    }
    const Tensor& input_size = find("meta/input_size");
    spec.input_size = static_cast<std::size_t>(input_size.item());
    const std::size_t classes = find("classifier/w").dim(1);
    const std::size_t domains = find("discriminator/w").dim(1);
    Rng rng(0);
    Model model(spec, classes, domains, rng);
    model.load_state(entries);
    return model;
}

Model Model::clone() const { return from_state(state()); }

// ---------------------------------------------------------------------------

void Sgd::step(std::span<const NamedTensor> params, double lr) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        if (!t.has_grad()) continue;
        auto& v = velocity_[t.node()];
        auto data = t.mutable_data();
        auto grad = t.grad();
        if (v.empty()) v.assign(data.size(), 0.0);
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i] + options_.weight_decay * data[i];
            v[i] = options_.momentum * v[i] + g;
            data[i] -= lr * v[i];
        }
    }
}

void Sgd::forget(std::span<const NamedTensor> params) {
    for (const auto& p : params) velocity_.erase(p.tensor.node());
}

double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (const auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (double& g : p.tensor.node()->grad) g *= f;
        }
    }
    return norm;
}

void zero_grads(std::span<const NamedTensor> params) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

void set_requires_grad(std::span<const NamedTensor> params, bool value) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.set_requires_grad(value);
    }
}

std::uint64_t hash_tensors(std::span<const NamedTensor> tensors) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* bytes, std::size_t len) {
        const auto* b = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& t : tensors) {
        mix(t.name.data(), t.name.size());
        for (std::size_t d : t.tensor.shape()) mix(&d, sizeof(d));
        auto data = t.tensor.data();
        mix(data.data(), data.size() * sizeof(double));
    }
    return h;
}

}  // namespace fsr
