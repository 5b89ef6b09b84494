#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpcad/backbone.hpp"
#include "mpcad/core.hpp"
#include "mpcad/fusion.hpp"
#include "mpcad/memory.hpp"

namespace mpcad {

/// Patch-grid region labels (a stand-in for a segmentation model's output).
struct RegionMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<int> labels;  // row-major, nonnegative

    bool operator==(const RegionMask&) const = default;
};

struct TaskDataset {
    std::string task_name;
    std::vector<Image> images;
    std::vector<RegionMask> region_masks;  // one per image

    void validate() const;
};

/// Precomputed patch features standing in for images (external backbones).
struct FeatureDataset {
    std::string task_name;
    std::vector<FeatureGrid> grids;
    std::vector<RegionMask> region_masks;  // empty or one per grid

    void validate() const;
};

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 8;
    double learning_rate = 5e-5;
    double momentum = 0.9;
    double sigma = 1.0;
    double lambda_alpha = 1.0;
    double lambda_beta = 1.0;
    double alpha_fusion = 0.9;
    double k_sigmoid = 1.5;
    std::vector<double> delta_set = default_delta_set();
    std::uint64_t seed = 42;

    double validation_fraction = 0.2;
    std::size_t key_budget = 196;   // N_f
    std::size_t bank_budget = 196;  // N_g
    std::size_t max_pairs = 20000;  // pair sampling cap for the visual loss

    void validate() const;
};

/// Mean squared error between per-sample scores and pseudo-labels.
double loss_text(std::span<const double> scores, std::span<const double> labels);

struct VisualLoss {
    double value = 0.0;
    Mat d_features;  // same shape as the feature grid values; empty unless requested
};

/// lambda_alpha * (sum of cosines over patch pairs in different regions)
///   - lambda_beta * (sum of cosines over pairs in the same region).
/// Grids with more than 196 patches use max_pairs pairs drawn from `pair_rng`.
VisualLoss loss_visual(const FeatureGrid& features, const RegionMask& regions, double lambda_alpha,
                       double lambda_beta, bool with_gradient = false, Rng* pair_rng = nullptr,
                       std::size_t max_pairs = 20000);

struct PseudoBatch {
    std::vector<Image> images;
    std::vector<int> labels;  // 0 clean, 1 noised; interleaved
};

/// Each clean image followed by a copy with N(0, sigma^2) pixel noise.
PseudoBatch pseudo_label_batch(const std::vector<Image>& images, double sigma, Rng& rng);

Image add_noise(const Image& image, double sigma, Rng& rng);
FeatureGrid add_noise(const FeatureGrid& grid, double sigma, Rng& rng);

/// Image-level text score: max over patches of 1 - cos(project(patch), embedding).
/// Optionally returns the gradients with respect to the embedding and to the features.
struct TextScore {
    double value = 0.0;
    Vec d_embedding;
    Mat d_features;
};
TextScore text_image_score(const FeatureGrid& features, const Vec& embedding, const Mat& projection,
                           bool with_gradient = false);

struct EpochRecord {
    std::size_t epoch = 0;
    double loss_text = 0.0;
    std::optional<double> loss_visual;  // absent when visual prompts are not trained
    double b_v = 0.0;
    double b_t = 0.0;
};

struct AdaptReport {
    std::vector<EpochRecord> epochs;
    std::size_t train_count = 0;
    std::size_t validation_count = 0;
};

void write_training_log(std::ostream& out, const std::vector<EpochRecord>& epochs);

/// Builds one task memory from normal images: FPS keys, prompt tuning, coreset bank,
/// calibration on a held-out pseudo-labeled split. Registers the task name as a token.
MemoryBank adapt_task(const TaskDataset& dataset, const MemoryBank& bank, const TrainConfig& config,
                      Backbone& backbone, AdaptReport* report = nullptr);

/// Feature-file mode: features are fixed, so the visual prompt is left empty and only
/// the text prompt is tuned; noise is added in feature space.
MemoryBank adapt_task_features(const FeatureDataset& dataset, const MemoryBank& bank, const TrainConfig& config,
                               Backbone& backbone, AdaptReport* report = nullptr);

}  // namespace mpcad
