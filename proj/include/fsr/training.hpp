#pragma once

#include "fsr/data.hpp"
#include "fsr/fsr_module.hpp"
#include "fsr/metrics.hpp"
#include "fsr/nn.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsr {

/// Raised when a loss or parameter turns non-finite during training.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AblationFlags {
    bool disable_div = false;   // drop the diversity term from the FSR loss
    bool disable_con = false;   // drop the consistency term from the FSR loss
    bool shared_fsr = false;    // one FSR for all source domains
    bool no_noise = false;      // alpha forced to 1
    bool no_encdec = false;     // noise added straight to the statistics
};

enum class Placement { Progressive, Star, Fixed };

struct TrainConfig {
    double lambda = 1.0;
    std::size_t stages = 4;
    std::size_t iters_per_stage = 100;
    std::size_t epochs_per_stage = 0;  // > 0 overrides iters_per_stage
    double lr_backbone = 1e-2;
    double lr_head = 1e-2;  // classifier, discriminator and FSR
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double clip_norm = 5.0;  // per-update gradient norm cap; 0 disables
    std::size_t batch_size = 64;
    AlphaDistribution alpha;
    std::uint64_t seed = 0;
    AblationFlags ablation;
    bool star_mode = false;
    std::optional<std::size_t> fixed_block;
    bool update_discriminator = true;
    std::size_t eval_interval = 0;  // steps between validation checks; 0 = once per stage
    bool profile_stages = true;     // d^i profile at each stage end
    BackboneSpec backbone;

    Placement placement() const;
    /// Throws std::invalid_argument on inconsistent settings.
    void validate() const;
    /// FSR positions active during `stage` (1-based).
    std::vector<std::size_t> active_blocks(std::size_t stage) const;
};

struct Batch {
    Tensor x;
    std::vector<std::size_t> y;
    std::vector<std::size_t> d;  // source-domain index in [0, K)
};

struct FsrLossParts {
    double l_con = 0.0;
    double l_div = 0.0;
};

enum class Phase { Discriminator = 1, Fsr = 2, Classifier = 3 };

/// Owns the model, the FSR banks and the optimizer state of one run.
class Trainer {
public:
    Trainer(const TrainConfig& config, std::size_t num_classes, std::size_t num_domains);

    const TrainConfig& config() const { return config_; }
    Model& model() { return *model_; }
    const Model& model() const { return *model_; }

    /// Moves FSR to the positions of `stage`; banks at new positions are
    /// freshly initialized, banks at positions no longer used are dropped.
    void begin_stage(std::size_t stage);
    std::size_t stage() const { return stage_; }
    const std::vector<std::size_t>& active_blocks() const { return active_; }
    const FsrBank& bank(std::size_t block) const;
    std::vector<NamedTensor> fsr_parameters() const;
    std::vector<NamedTensor> extractor_classifier_parameters() const;

    /// Noise for every active position, in the order of active_blocks().
    std::vector<NoiseDraw> draw_noise(std::size_t batch);

    /// Cross-entropy of the discriminator on original features. Only the
    /// discriminator receives gradient.
    Tensor loss_domain(const Batch& batch);
    /// L_con + L_div on augmented features; only FSR parameters receive gradient.
    Tensor loss_fsr(const Batch& batch, const std::vector<NoiseDraw>& noise,
                    FsrLossParts* parts = nullptr);
    /// CE(original) + lambda * CE(augmented); extractor and classifier receive
    /// gradient, flowing through the FSR computation. Skips the augmented
    /// branch when `include_augmented` is false.
    Tensor loss_cls(const Batch& batch, double lambda, const std::vector<NoiseDraw>& noise,
                    bool include_augmented = true, bool update_running = false);

    /// Pooled features after the augmented path from the first active block on.
    Tensor augmented_features(const Tensor& f_first, std::span<const std::size_t> domains,
                              const std::vector<NoiseDraw>& noise);

    /// Discriminator, FSR and extractor/classifier updates, in that order, each
    /// on a fresh forward pass. `after_phase` runs after each update.
    LossRecord train_step(const Batch& batch,
                          const std::function<void(Phase)>& after_phase = {});

    std::size_t steps_taken() const { return step_; }

private:
    LossRecord run_phases(const Batch& batch, const std::function<void(Phase)>& after_phase);
    enum class Route { Discriminator, Fsr, Classifier, None };
    void route_gradients(Route route);
    bool fsr_trainable() const;
    FsrAblation ablation_mode() const;

    TrainConfig config_;
    std::size_t num_classes_;
    std::size_t num_domains_;
    Rng init_rng_;
    Rng noise_rng_;
    std::unique_ptr<Model> model_;
    std::map<std::size_t, FsrBank> banks_;
    std::vector<std::size_t> active_;
    std::size_t stage_ = 0;
    std::size_t step_ = 0;
    Sgd sgd_;
};

struct StageMetrics {
    std::size_t stage = 0;
    std::vector<std::size_t> blocks;
    std::size_t steps = 0;
    double val_accuracy = 0.0;
    std::optional<DiscrepancyProfile> discrepancy;
    std::uint64_t backbone_hash_begin = 0;
    std::uint64_t backbone_hash_end = 0;
};

struct TrainResult {
    std::unique_ptr<Model> final_model;
    std::unique_ptr<Model> best_model;  // best source-validation accuracy
    double best_val_accuracy = 0.0;
    std::size_t best_step = 0;
    std::vector<LossRecord> log;
    std::vector<StageMetrics> stages;
    std::size_t steps_per_epoch = 0;
    std::size_t iters_per_stage = 0;
};

struct TrainObserver {
    std::function<void(std::size_t stage, const Trainer&)> on_stage_begin;
    std::function<void(std::size_t stage, const Trainer&)> on_stage_end;
    std::function<void(Phase, const Trainer&)> on_phase;
    std::function<void(const LossRecord&)> on_step;
};

/// Samples shuffled pooled-source batches; reshuffles at each epoch boundary.
class BatchSampler {
public:
    BatchSampler(const std::vector<Sample>& samples, std::size_t batch_size,
                 const std::vector<std::size_t>& source_domains, std::uint64_t seed);
    Batch next();
    std::size_t steps_per_epoch() const;

private:
    const std::vector<Sample>& samples_;
    std::size_t batch_size_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::map<std::size_t, std::size_t> domain_index_;
    Rng rng_;
};

/// Runs every stage of the schedule on `bench` and keeps the model with the
/// best source-validation accuracy.
TrainResult progressive_train(const Benchmark& bench, const TrainConfig& config,
                              const TrainObserver& observer = {});

}  // namespace fsr
