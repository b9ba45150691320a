#pragma once

#include "fsr/data.hpp"
#include "fsr/nn.hpp"
#include "fsr/tensor.hpp"

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fsr {

/// 2/(K(K-1)) * sum over domain pairs of the L1 distance between GAP vectors.
/// Each entry is one domain's mean feature map, shaped (C, H, W) or already
/// pooled to (C); all entries must share a shape.
double domain_discrepancy(std::span<const Tensor> domain_means);

struct DiscrepancyProfile {
    std::string run;                      // "baseline" or "fsr"
    std::vector<double> values;           // values[i - 1] = d^i
    std::optional<std::size_t> fsr_block;
};

/// d^i at every block of the model, from eval-mode features of `samples`
/// grouped by their domain label.
DiscrepancyProfile discrepancy_profile(Model& model, std::span<const Sample> samples,
                                       const std::string& run,
                                       std::optional<std::size_t> fsr_block = std::nullopt,
                                       std::size_t batch_size = 256);

/// Per-block d_a - d_b; negative means run `a` has the smaller discrepancy.
std::vector<double> discrepancy_delta(const DiscrepancyProfile& a, const DiscrepancyProfile& b);

struct Accuracy {
    double top1 = 0.0;
    std::vector<double> per_class;
    std::size_t count = 0;
};

/// Top-1 accuracy of the label classifier in eval mode.
Accuracy evaluate(Model& model, std::span<const Sample> samples, std::size_t num_classes,
                  std::size_t batch_size = 256);

// ---------------------------------------------------------------------------
// Reference feature augmentations.

enum class BaselineKind { MixStyle, PAdaIN };

struct BaselineAugment {
    BaselineKind kind = BaselineKind::MixStyle;
    double param = 0.1;  // MixStyle: Beta(param, param); pAdaIN: swap probability
};

/// adain(f, w*own + (1-w)*partner stats), with partner = perm[i].
Tensor mixstyle(const Tensor& f, std::span<const std::size_t> perm, std::span<const double> weights,
                double epsilon = 1e-6);
/// Sample i takes partner perm[i]'s stats where swap[i], else stays unchanged.
Tensor padain(const Tensor& f, std::span<const std::size_t> perm, const std::vector<bool>& swap,
              double epsilon = 1e-6);
Tensor baseline_augment(const Tensor& f, const BaselineAugment& mode, Rng& rng);

// ---------------------------------------------------------------------------
// CSV output.

struct LossRecord {
    std::size_t step = 0;
    std::size_t stage = 0;
    std::size_t block = 0;  // 0 when FSR is active at every block
    double l_d = 0.0;
    double l_con = 0.0;
    double l_div = 0.0;
    double l_cls = 0.0;
    double lr = 0.0;
};

std::string format_double(double v);

void write_training_log_header(std::ostream& out);
void write_training_log_row(std::ostream& out, const LossRecord& r);

void write_discrepancy_csv(std::ostream& out, std::span<const DiscrepancyProfile> profiles);
/// Reads "run,block,d_i" rows; one profile per distinct run tag, in file order.
std::vector<DiscrepancyProfile> read_discrepancy_csv(std::istream& in);

struct ResultRow {
    std::uint64_t seed = 0;
    std::size_t target_domain = 0;
    double accuracy = 0.0;
};
void write_results_csv(std::ostream& out, std::span<const ResultRow> rows);

/// "x,y" series for external plotting.
void write_series_csv(std::ostream& out, std::span<const double> x, std::span<const double> y);

}  // namespace fsr
