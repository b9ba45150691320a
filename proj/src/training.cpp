#include "fsr/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fsr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_finite_loss(const Tensor& loss, const char* name, std::size_t step) {
    if (!std::isfinite(loss.item())) {
        throw NumericalError(std::string("non-finite ") + name + " at step " +
                             std::to_string(step) + " (value " + std::to_string(loss.item()) + ")");
    }
}

void append(std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src) {
    dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace

Placement TrainConfig::placement() const {
    if (star_mode) return Placement::Star;
    if (fixed_block) return Placement::Fixed;
    return Placement::Progressive;
}

void TrainConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (stages == 0) throw std::invalid_argument("stages must be >= 1");
    if (iters_per_stage == 0 && epochs_per_stage == 0) {
        throw std::invalid_argument("iterations per stage must be >= 1");
    }
    if (batch_size < 2) throw std::invalid_argument("batch size must be >= 2");
    if (lr_backbone < 0.0 || lr_head < 0.0) throw std::invalid_argument("learning rates must be >= 0");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip norm must be >= 0");
    if (star_mode && fixed_block) {
        throw std::invalid_argument("star mode and a fixed block are mutually exclusive");
    }
    if (fixed_block && *fixed_block == 0) throw std::invalid_argument("fixed block is 1-based");
    if (ablation.disable_div && ablation.disable_con) {
        throw std::invalid_argument("disabling both FSR loss terms leaves nothing to train");
    }
    if (ablation.no_noise && ablation.no_encdec) {
        throw std::invalid_argument("no-noise and no-encdec ablations are mutually exclusive");
    }
    const std::size_t blocks = backbone.channels.size();
    if (fixed_block && *fixed_block > blocks) {
        throw std::invalid_argument("fixed block " + std::to_string(*fixed_block) +
                                    " exceeds block count " + std::to_string(blocks));
    }
    if (placement() == Placement::Progressive && stages > blocks) {
        throw std::invalid_argument("stage/block mismatch: " + std::to_string(stages) +
                                    " stages but only " + std::to_string(blocks) + " blocks");
    }
}

std::vector<std::size_t> TrainConfig::active_blocks(std::size_t stage) const {
    if (stage < 1 || stage > stages) {
        throw std::invalid_argument("stage " + std::to_string(stage) + " out of range 1.." +
                                    std::to_string(stages));
    }
    switch (placement()) {
        case Placement::Star: {
            std::vector<std::size_t> all(backbone.channels.size());
            std::iota(all.begin(), all.end(), std::size_t{1});
            return all;
        }
        case Placement::Fixed: return {*fixed_block};
        case Placement::Progressive: return {stage};
    }
    return {};
}

// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& config, std::size_t num_classes, std::size_t num_domains)
    : config_(config),
      num_classes_(num_classes),
      num_domains_(num_domains),
      init_rng_(config.seed * 0x9E3779B97F4A7C15ULL + 1),
      noise_rng_(config.seed * 0xD1B54A32D192ED03ULL + 2),
      sgd_(SgdOptions{config.momentum, config.weight_decay}) {
    config_.validate();
    if (num_domains < 2) throw std::invalid_argument("Trainer: at least two source domains required");
    model_ = std::make_unique<Model>(config_.backbone, num_classes, num_domains, init_rng_);
}

void Trainer::begin_stage(std::size_t stage) {
    auto next = config_.active_blocks(stage);
    for (auto it = banks_.begin(); it != banks_.end();) {
        if (std::find(next.begin(), next.end(), it->first) == next.end()) {
            auto params = it->second.parameters();
            sgd_.forget(params);
            it = banks_.erase(it);
        } else {
            ++it;
        }
    }
    for (std::size_t b : next) {
        if (banks_.count(b)) continue;
        const std::size_t channels = model_->backbone.channels_at(b);
        banks_.emplace(b, FsrBank(num_domains_, channels, channels, config_.ablation.shared_fsr,
                                  init_rng_));
    }
    active_ = std::move(next);
    stage_ = stage;
}

const FsrBank& Trainer::bank(std::size_t block) const {
    auto it = banks_.find(block);
    if (it == banks_.end()) throw std::invalid_argument("no FSR at block " + std::to_string(block));
    return it->second;
}

std::vector<NamedTensor> Trainer::fsr_parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& [block, bank] : banks_) append(out, bank.parameters());
    return out;
}

std::vector<NamedTensor> Trainer::extractor_classifier_parameters() const {
    auto out = model_->backbone_parameters();
    append(out, model_->classifier_parameters());
    return out;
}

bool Trainer::fsr_trainable() const { return !config_.ablation.no_encdec; }

FsrAblation Trainer::ablation_mode() const {
    if (config_.ablation.no_encdec) return FsrAblation::NoEncDec;
    if (config_.ablation.no_noise) return FsrAblation::NoNoise;
    return FsrAblation::None;
}

void Trainer::route_gradients(Route route) {
    auto disc = model_->discriminator_parameters();
    auto fsr = fsr_parameters();
    auto body = extractor_classifier_parameters();
    set_requires_grad(disc, route == Route::Discriminator);
    set_requires_grad(fsr, route == Route::Fsr);
    set_requires_grad(body, route == Route::Classifier);
}

std::vector<NoiseDraw> Trainer::draw_noise(std::size_t batch) {
    if (active_.empty()) throw std::logic_error("draw_noise: no active stage");
    std::vector<NoiseDraw> out;
    for (std::size_t b : active_) {
        out.push_back(sample_noise(batch, bank(b).hidden(), config_.alpha, noise_rng_));
    }
    return out;
}

Tensor Trainer::augmented_features(const Tensor& f_first, std::span<const std::size_t> domains,
                                   const std::vector<NoiseDraw>& noise) {
    if (noise.size() != active_.size()) {
        throw std::invalid_argument("augmented_features: one noise draw per active block required");
    }
    Tensor h = f_first;
    std::size_t prev = active_.front();
    for (std::size_t k = 0; k < active_.size(); ++k) {
        const std::size_t b = active_[k];
        h = model_->backbone.forward_blocks(h, prev, b, Mode::Train);
        h = bank(b).apply(h, domains, noise[k], ablation_mode());
        prev = b;
    }
    return model_->backbone.forward_rest(h, prev, Mode::Train);
}

Tensor Trainer::loss_domain(const Batch& batch) {
    route_gradients(Route::Discriminator);
    Tensor pooled;
    {
        NoGradGuard no_grad;
        pooled = model_->backbone.features(batch.x, Mode::Train);
    }
    return cross_entropy(model_->discriminator.forward(pooled), batch.d);
}

Tensor Trainer::loss_fsr(const Batch& batch, const std::vector<NoiseDraw>& noise,
                         FsrLossParts* parts) {
    route_gradients(Route::Fsr);
    Tensor f;
    {
        NoGradGuard no_grad;
        f = model_->backbone.forward_to(batch.x, active_.front(), Mode::Train);
    }
    const Tensor pooled = augmented_features(f, batch.d, noise);
    const Tensor l_con = cross_entropy(model_->classifier.forward(pooled), batch.y);
    const Tensor l_div = neg(cross_entropy(model_->discriminator.forward(pooled), batch.d));
    if (parts) {
        parts->l_con = config_.ablation.disable_con ? kNaN : l_con.item();
        parts->l_div = config_.ablation.disable_div ? kNaN : l_div.item();
    }
    if (config_.ablation.disable_div) return l_con;
    if (config_.ablation.disable_con) return l_div;
    return l_con + l_div;
}

Tensor Trainer::loss_cls(const Batch& batch, double lambda, const std::vector<NoiseDraw>& noise,
                         bool include_augmented, bool update_running) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("loss_cls: lambda must be >= 0");
    route_gradients(Route::Classifier);
    const std::size_t first = include_augmented ? active_.front() : model_->backbone.block_count();
    const Tensor f = model_->backbone.forward_to(batch.x, first, Mode::Train, update_running);
    const Tensor pooled = model_->backbone.forward_rest(f, first, Mode::Train, update_running);
    const Tensor ce = cross_entropy(model_->classifier.forward(pooled), batch.y);
    if (!include_augmented) return ce;
    const Tensor aug = augmented_features(f, batch.d, noise);
    return ce + scale(cross_entropy(model_->classifier.forward(aug), batch.y), lambda);
}

LossRecord Trainer::train_step(const Batch& batch, const std::function<void(Phase)>& after_phase) {
    if (active_.empty()) throw std::logic_error("train_step: call begin_stage first");
    Tape::current().clear();
    ++step_;
    try {
        return run_phases(batch, after_phase);
    } catch (const NonFiniteError& e) {
        Tape::current().clear();
        throw NumericalError("step " + std::to_string(step_) + ": " + e.what());
    }
}

LossRecord Trainer::run_phases(const Batch& batch, const std::function<void(Phase)>& after_phase) {
    const bool baseline = config_.lambda == 0.0;
    const std::size_t n = batch.y.size();

    LossRecord rec;
    rec.step = step_;
    rec.stage = stage_;
    rec.block = active_.size() == 1 ? active_.front() : 0;
    rec.l_d = rec.l_con = rec.l_div = kNaN;
    rec.lr = config_.lr_backbone;

    auto disc = model_->discriminator_parameters();
    auto fsr = fsr_parameters();
    auto body = extractor_classifier_parameters();
    auto clear_all = [&] {
        zero_grads(disc);
        zero_grads(fsr);
        zero_grads(body);
    };

    // Baseline runs (lambda = 0) never use the augmented branch, so the
    // discriminator and FSR updates cannot influence the extractor/classifier.
    if (!baseline && config_.update_discriminator) {
        clear_all();
        const Tensor l_d = loss_domain(batch);
        check_finite_loss(l_d, "L_d", step_);
        backward(l_d);
        clip_grad_norm(disc, config_.clip_norm);
        sgd_.step(disc, config_.lr_head);
        rec.l_d = l_d.item();
    }
    if (after_phase) after_phase(Phase::Discriminator);

    if (!baseline) {
        const auto noise = draw_noise(n);
        FsrLossParts parts;
        if (fsr_trainable()) {
            clear_all();
            const Tensor l_fsr = loss_fsr(batch, noise, &parts);
            check_finite_loss(l_fsr, "L_fsr", step_);
            backward(l_fsr);
            clip_grad_norm(fsr, config_.clip_norm);
            sgd_.step(fsr, config_.lr_head);
        } else {
            NoGradGuard no_grad;
            (void)loss_fsr(batch, noise, &parts);
        }
        rec.l_con = parts.l_con;
        rec.l_div = parts.l_div;
    }
    if (after_phase) after_phase(Phase::Fsr);

    {
        std::vector<NoiseDraw> noise;
        if (!baseline) noise = draw_noise(n);
        clear_all();
        const Tensor l_cls = loss_cls(batch, config_.lambda, noise, !baseline, true);
        check_finite_loss(l_cls, "L_cls", step_);
        backward(l_cls);
        clip_grad_norm(body, config_.clip_norm);
        sgd_.step(model_->backbone_parameters(), config_.lr_backbone);
        sgd_.step(model_->classifier_parameters(), config_.lr_head);
        rec.l_cls = l_cls.item();
    }
    clear_all();
    if (after_phase) after_phase(Phase::Classifier);
    return rec;
}

// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(const std::vector<Sample>& samples, std::size_t batch_size,
                           const std::vector<std::size_t>& source_domains, std::uint64_t seed)
    : samples_(samples), batch_size_(batch_size), order_(samples.size()), rng_(seed) {
    if (samples.size() < batch_size) {
        throw std::invalid_argument("BatchSampler: " + std::to_string(samples.size()) +
                                    " samples cannot fill a batch of " + std::to_string(batch_size));
    }
    for (std::size_t i = 0; i < source_domains.size(); ++i) domain_index_[source_domains[i]] = i;
    for (const auto& s : samples) {
        if (!domain_index_.count(s.d)) {
            throw std::invalid_argument("BatchSampler: sample from non-source domain " +
                                        std::to_string(s.d));
        }
    }
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
}

std::size_t BatchSampler::steps_per_epoch() const { return samples_.size() / batch_size_; }

Batch BatchSampler::next() {
    if (cursor_ + batch_size_ > order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }
    std::span<const std::size_t> idx(order_.data() + cursor_, batch_size_);
    cursor_ += batch_size_;
    Batch b;
    b.x = batch_images(samples_, idx);
    for (std::size_t i : idx) {
        b.y.push_back(samples_[i].y);
        b.d.push_back(domain_index_.at(samples_[i].d));
    }
    return b;
}

TrainResult progressive_train(const Benchmark& bench, const TrainConfig& input_config,
                              const TrainObserver& observer) {
    TrainConfig config = input_config;
    config.backbone.input_size = bench.image_size;
    config.validate();

    Trainer trainer(config, bench.num_classes, bench.source_domains.size());
    BatchSampler sampler(bench.train, config.batch_size, bench.source_domains,
                         config.seed * 0x94D049BB133111EBULL + 3);

    TrainResult result;
    result.steps_per_epoch = std::max<std::size_t>(1, sampler.steps_per_epoch());
    result.iters_per_stage = config.epochs_per_stage > 0
                                 ? config.epochs_per_stage * result.steps_per_epoch
                                 : config.iters_per_stage;
    const std::string run_tag = config.lambda == 0.0 ? "baseline" : "fsr";
    double best = -1.0;

    auto consider = [&](std::size_t step) {
        const double acc = evaluate(trainer.model(), bench.val, bench.num_classes).top1;
        if (acc > best) {
            best = acc;
            result.best_step = step;
            result.best_model = std::make_unique<Model>(trainer.model().clone());
        }
        return acc;
    };

    for (std::size_t stage = 1; stage <= config.stages; ++stage) {
        trainer.begin_stage(stage);
        StageMetrics metrics;
        metrics.stage = stage;
        metrics.blocks = trainer.active_blocks();
        metrics.backbone_hash_begin = hash_tensors(trainer.model().backbone_parameters());
        if (observer.on_stage_begin) observer.on_stage_begin(stage, trainer);

        for (std::size_t t = 0; t < result.iters_per_stage; ++t) {
            const Batch batch = sampler.next();
            std::function<void(Phase)> hook;
            if (observer.on_phase) hook = [&](Phase p) { observer.on_phase(p, trainer); };
            const LossRecord rec = trainer.train_step(batch, hook);
            result.log.push_back(rec);
            if (observer.on_step) observer.on_step(rec);
            const bool last = t + 1 == result.iters_per_stage;
            if (config.eval_interval > 0 && !last && rec.step % config.eval_interval == 0) {
                consider(rec.step);
            }
        }

        metrics.steps = result.iters_per_stage;
        metrics.val_accuracy = consider(trainer.steps_taken());
        metrics.backbone_hash_end = hash_tensors(trainer.model().backbone_parameters());
        if (config.profile_stages) {
            std::optional<std::size_t> block;
            if (config.lambda > 0.0 && metrics.blocks.size() == 1) block = metrics.blocks.front();
            metrics.discrepancy = discrepancy_profile(trainer.model(), bench.train, run_tag, block);
        }
        if (observer.on_stage_end) observer.on_stage_end(stage, trainer);
        result.stages.push_back(std::move(metrics));
    }

    result.best_val_accuracy = best;
    result.final_model = std::make_unique<Model>(trainer.model().clone());
    return result;
}

}  // namespace fsr
