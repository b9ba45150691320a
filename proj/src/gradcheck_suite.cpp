#include "fsr/gradcheck_suite.hpp"

#include "fsr/fsr_module.hpp"
#include "fsr/metrics.hpp"
#include "fsr/nn.hpp"
#include "fsr/style.hpp"
#include "fsr/training.hpp"

#include <functional>
#include <memory>
#include <random>

namespace fsr {

namespace {

Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = true) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

struct Case {
    std::string name;
    std::function<Tensor()> fn;
    std::vector<NamedTensor> params;
};

void primitive_cases(std::vector<Case>& cases, Rng& rng) {
    auto a = uniform({3, 4}, rng, -2, 2);
    auto b = uniform({4}, rng, -2, 2);
    auto pos = uniform({3, 4}, rng, 0.5, 2);
    auto m = uniform({4, 2}, rng, -2, 2);
    auto w34 = uniform({3, 4}, rng, -1, 1, false);
    auto w4 = uniform({4}, rng, -1, 1, false);
    auto w3 = uniform({3}, rng, -1, 1, false);
    auto w32 = uniform({3, 2}, rng, -1, 1, false);
    auto dot = [](const Tensor& t, const Tensor& w) { return sum(t * w); };

    cases.push_back({"add", [=] { return dot(a + b, w34); }, {{"a", a}, {"b", b}}});
    cases.push_back({"sub", [=] { return dot(a - b, w34); }, {{"a", a}, {"b", b}}});
    cases.push_back({"mul", [=] { return dot(a * b, w34); }, {{"a", a}, {"b", b}}});
    cases.push_back({"div", [=] { return dot(a / pos, w34); }, {{"a", a}, {"pos", pos}}});
    cases.push_back({"relu", [=] { return dot(relu(a), w34); }, {{"a", a}}});
    cases.push_back({"exp", [=] { return dot(exp(a), w34); }, {{"a", a}}});
    cases.push_back({"log", [=] { return dot(log(pos), w34); }, {{"pos", pos}}});
    cases.push_back({"sqrt", [=] { return dot(sqrt(pos), w34); }, {{"pos", pos}}});
    cases.push_back({"neg", [=] { return dot(neg(a), w34); }, {{"a", a}}});
    cases.push_back({"scale", [=] { return dot(scale(a, -1.7), w34); }, {{"a", a}}});
    cases.push_back({"add_scalar", [=] { return dot(square(add_scalar(a, 0.3)), w34); }, {{"a", a}}});
    cases.push_back({"square", [=] { return dot(square(a), w34); }, {{"a", a}}});
    cases.push_back({"matmul", [=] { return dot(matmul(a, m), w32); }, {{"a", a}, {"m", m}}});
    cases.push_back({"sum", [=] { return dot(sum(a, {1}), w3); }, {{"a", a}}});
    cases.push_back({"mean", [=] { return dot(mean(a, {0}), w4); }, {{"a", a}}});
    cases.push_back({"max", [=] { return dot(max(a, {1}), w3); }, {{"a", a}}});
    cases.push_back({"reshape", [=] { return dot(reshape(a, {4, 3}), reshape(w34, {4, 3})); },
                     {{"a", a}}});
    cases.push_back({"gather_rows",
                     [=] {
                         const std::vector<std::size_t> rows{2, 0, 2};
                         return dot(gather_rows(a, rows), gather_rows(w34, rows));
                     },
                     {{"a", a}}});
    cases.push_back({"concat_rows",
                     [=] {
                         const std::vector<Tensor> parts{a, pos};
                         const std::vector<Tensor> weights{w34, w34};
                         return dot(concat_rows(parts), concat_rows(weights));
                     },
                     {{"a", a}, {"pos", pos}}});
}

void network_cases(std::vector<Case>& cases, Rng& rng) {
    auto x = uniform({2, 2, 5, 5}, rng, -2, 2);
    auto k = uniform({3, 2, 3, 3}, rng, -1, 1);
    auto kb = uniform({3}, rng, -1, 1);
    auto wc = uniform({2, 3, 3, 3}, rng, -1, 1, false);
    cases.push_back({"conv2d", [=] { return sum(conv2d(x, k, kb, 2, 1) * wc); },
                     {{"x", x}, {"weight", k}, {"bias", kb}}});

    auto g = uniform({2, 3, 4, 4}, rng, -2, 2);
    auto wg = uniform({2, 3}, rng, -1, 1, false);
    cases.push_back({"global_avg_pool", [=] { return sum(global_avg_pool(g) * wg); }, {{"f", g}}});

    auto z = uniform({4, 5}, rng, -3, 3);
    const std::vector<std::size_t> labels{0, 4, 2, 2};
    auto wz = uniform({4, 5}, rng, -1, 1, false);
    cases.push_back({"cross_entropy", [=] { return cross_entropy(z, labels); }, {{"logits", z}}});
    cases.push_back({"softmax", [=] { return sum(softmax(z) * wz); }, {{"logits", z}}});

    ConvBlock block(ConvBlockSpec{2, 3, 3, 2, 1}, rng);
    auto wb = uniform({2, 3, 3, 3}, rng, -1, 1, false);
    cases.push_back({"conv_block",
                     [=]() mutable { return sum(block.forward(x, Mode::Train) * wb); },
                     {{"x", x}, {"weight", block.weight}, {"bias", block.bias},
                      {"gamma", block.gamma}, {"beta", block.beta}}});

    Linear lin(3, 4, rng);
    auto h = uniform({5, 3}, rng, -2, 2);
    auto wl = uniform({5, 4}, rng, -1, 1, false);
    cases.push_back({"linear", [=] { return sum(lin.forward(h) * wl); },
                     {{"x", h}, {"weight", lin.weight}, {"bias", lin.bias}}});
}

void style_cases(std::vector<Case>& cases, Rng& rng) {
    auto f = uniform({3, 4, 3, 3}, rng, -2, 2);
    auto wmu = uniform({3, 4}, rng, -1, 1, false);
    auto wsd = uniform({3, 4}, rng, -1, 1, false);
    auto wf = uniform({3, 4, 3, 3}, rng, -1, 1, false);
    cases.push_back({"channel_stats",
                     [=] {
                         const auto s = channel_stats(f);
                         return sum(s.mu * wmu) + sum(s.sigma * wsd);
                     },
                     {{"f", f}}});
    auto gamma = uniform({4}, rng, 0.5, 1.5);
    auto beta = uniform({4}, rng, -1, 1);
    cases.push_back({"instance_norm", [=] { return sum(instance_norm(f, gamma, beta) * wf); },
                     {{"f", f}, {"gamma", gamma}, {"beta", beta}}});
    auto mu = uniform({3, 4}, rng, -1, 1);
    auto sigma = uniform({3, 4}, rng, 0.5, 2);
    cases.push_back({"adain", [=] { return sum(adain(f, mu, sigma) * wf); },
                     {{"f", f}, {"mu", mu}, {"sigma", sigma}}});

    auto params = FsrParams::create(4, 4, rng);
    // Non-zero biases keep the ReLUs away from their kink at this scale.
    params.enc_b = uniform({4}, rng, 0.2, 0.6);
    params.dec_b = uniform({4}, rng, 0.2, 0.6);
    const NoiseDraw draw = sample_noise(3, 4, AlphaDistribution{}, rng);
    auto fsr_params = params.parameters("fsr");
    fsr_params.push_back({"f", f});
    cases.push_back({"fsr_forward", [=] { return sum(fsr_forward(f, params, draw) * wf); },
                     fsr_params});

    const std::vector<std::size_t> perm{2, 0, 1};
    const std::vector<double> weights{0.3, 0.6, 0.9};
    cases.push_back({"mixstyle", [=] { return sum(mixstyle(f, perm, weights) * wf); }, {{"f", f}}});
}

void loss_cases(std::vector<Case>& cases, Rng& rng, std::uint64_t seed) {
    TrainConfig config;
    config.seed = seed;
    config.backbone.input_size = 8;
    config.backbone.channels = {3, 4, 5};
    config.stages = 3;
    config.batch_size = 6;
    auto trainer = std::make_shared<Trainer>(config, 3, 3);
    trainer->begin_stage(2);

    Batch batch;
    batch.x = uniform({6, 3, 8, 8}, rng, 0, 1, false);
    batch.y = {0, 1, 2, 0, 1, 2};
    batch.d = {0, 0, 1, 1, 2, 2};
    const auto noise = trainer->draw_noise(6);

    cases.push_back({"L_d", [=] { return trainer->loss_domain(batch); },
                     trainer->model().discriminator_parameters()});
    cases.push_back({"L_fsr", [=] { return trainer->loss_fsr(batch, noise); },
                     trainer->fsr_parameters()});
    cases.push_back({"L_cls", [=] { return trainer->loss_cls(batch, 1.0, noise); },
                     trainer->extractor_classifier_parameters()});
}

}  // namespace

std::vector<SuiteCase> run_gradcheck_suite(std::uint64_t seed, double step, double tolerance) {
    Rng rng(seed);
    std::vector<Case> cases;
    primitive_cases(cases, rng);
    network_cases(cases, rng);
    style_cases(cases, rng);
    loss_cases(cases, rng, seed);

    std::vector<SuiteCase> out;
    for (auto& c : cases) {
        out.push_back({c.name, gradcheck(c.fn, c.params, step, tolerance)});
    }
    Tape::current().clear();
    return out;
}

}  // namespace fsr
