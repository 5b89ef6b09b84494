#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "mpcad/backbone.hpp"
#include "mpcad/core.hpp"
#include "mpcad/memory.hpp"

namespace mpcad {

inline constexpr std::size_t kOutputResolution = 224;

/// Greedy-search state for one sigmoid center.
struct CalibState {
    Calibration params;
    std::vector<double> history;  // accepted b per round
};

/// Raw map with one 0/1 label per pixel.
struct LabeledMap {
    ScoreMap map;
    std::vector<int> labels;
};

const std::vector<double>& default_delta_set();

/// Nearest-neighbour L2 distance of every patch to the bank rows, at grid resolution.
ScoreMap score_visual(const FeatureGrid& features, const PatchSet& bank);
ScoreMap score_visual(const FeatureGrid& features, const TaskMemory& bank_entry);

/// 1 - cos(project(patch), text embedding) per patch; zero patches score 1.
ScoreMap score_text(const FeatureGrid& features, const Vec& text_embedding, const Mat& projection);

/// Elementwise 1 / (1 + exp(-k (x - b))).
ScoreMap anm(const ScoreMap& map, const Calibration& calib);
double anm_value(double x, const Calibration& calib);

/// Validation score of a candidate: AUPR first; equal AUPR (a pure re-centering keeps
/// the ranking) falls back to the balanced accuracy of thresholding the normalized map
/// at 0.5, i.e. of using b as the decision boundary.
struct CalibScore {
    double aupr = 0.0;
    double balanced_accuracy = 0.0;
    bool operator>(const CalibScore& o) const {
        return aupr > o.aupr || (aupr == o.aupr && balanced_accuracy > o.balanced_accuracy);
    }
};

CalibScore calibration_score(std::span<const LabeledMap> validation, const Calibration& calib);

/// One greedy round: every b_old + delta is scored and the best accepted; ties go to the
/// smallest |delta|, then the negative one. With single-class labels b is kept.
CalibState greedy_calibrate(const CalibState& calib, std::span<const LabeledMap> validation,
                            std::span<const double> delta_set = default_delta_set());

/// Raw branch maps of the same images, for calibrating one branch against the fused result.
struct FusedValidation {
    std::vector<ScoreMap> visual;
    std::vector<ScoreMap> text;
    std::vector<std::vector<int>> labels;
};

CalibScore fused_calibration_score(const FusedValidation& v, const Calibration& cv, const Calibration& ct,
                                   double alpha);

enum class Branch { visual, text };

/// Greedy round on one branch's b, scored on the fused maps with the other branch fixed.
CalibState greedy_calibrate_fused(const CalibState& calib, Branch branch, const Calibration& other,
                                  const FusedValidation& validation, double alpha,
                                  std::span<const double> delta_set = default_delta_set());

/// alpha * map_v + (1 - alpha) * map_t.
ScoreMap fuse(const ScoreMap& map_v, const ScoreMap& map_t, double alpha);

struct BranchMaps {
    ScoreMap visual;  // raw, upsampled
    ScoreMap text;    // raw, upsampled
};

/// Raw S_V and S_T for one feature grid, upsampled to out_hw x out_hw.
BranchMaps score_branches(const FeatureGrid& features, const TaskMemory& mem, const Vec& text_embedding,
                          const Mat& projection, std::size_t out_hw = kOutputResolution);

/// Normalizes (or, with use_anm false, passes through) and fuses both branches.
ScoreMap fuse_branches(const BranchMaps& maps, const TaskMemory& mem, double alpha, bool use_anm = true);

struct InferenceResult {
    ScoreMap map;
    double image_score = 0.0;
    std::size_t task = 0;
    double task_similarity = 0.0;
};

/// Read-only scorer over a bank; caches one text embedding per task.
class Detector {
public:
    Detector(const MemoryBank& bank, const Backbone& backbone, double alpha);

    const MemoryBank& bank() const { return *bank_; }
    const Backbone& backbone() const { return *backbone_; }
    double alpha() const { return alpha_; }
    const Vec& text_embedding(std::size_t task) const { return embeddings_.at(task); }
    const Mat& projection() const { return projection_; }

    TaskMatch identify(const Image& image) const;
    TaskMatch identify(const FeatureGrid& key_features) const;

    /// Raw branch maps under a chosen task.
    BranchMaps branches(const Image& image, std::size_t task) const;
    BranchMaps branches(const FeatureGrid& score_features, std::size_t task) const;

    InferenceResult infer(const Image& image, std::optional<std::size_t> forced_task = std::nullopt) const;
    /// Feature-file mode: the same grid serves for identification and scoring.
    InferenceResult infer(const FeatureGrid& features, std::optional<std::size_t> forced_task = std::nullopt) const;

private:
    InferenceResult finish(const BranchMaps& maps, const TaskMatch& match) const;

    const MemoryBank* bank_;
    const Backbone* backbone_;
    double alpha_;
    std::vector<Vec> embeddings_;
    Mat projection_;
};

InferenceResult infer_image(const Image& image, const MemoryBank& bank, const Backbone& backbone, double alpha);

/// 8-bit binary PGM, value round(255 * score) clamped to [0,255].
void write_score_pgm(const ScoreMap& map, const std::filesystem::path& path);
/// Row-major f32 little-endian values, no header.
void write_score_raw(const ScoreMap& map, const std::filesystem::path& path);
ScoreMap read_score_raw(const std::filesystem::path& path, std::size_t height, std::size_t width);

}  // namespace mpcad
