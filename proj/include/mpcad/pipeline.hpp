#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mpcad/backbone.hpp"
#include "mpcad/features.hpp"
#include "mpcad/fusion.hpp"
#include "mpcad/memory.hpp"
#include "mpcad/metrics.hpp"
#include "mpcad/synthetic.hpp"
#include "mpcad/tuning.hpp"

namespace mpcad {

// ============================================================================
// Configuration
// ============================================================================

enum class DataMode { synthetic, images, features };

std::string to_string(DataMode m);
DataMode data_mode_from_string(const std::string& s);

struct TaskSource {
    std::string name;
    std::filesystem::path path;  // task directory (images and features modes)
    std::optional<Texture> texture;  // synthetic mode; defaults to the family named like the task
};

/// Shape of generated tasks; image size and patch size follow the backbone.
struct SyntheticOptions {
    std::size_t train_images = 10;
    std::size_t test_normal = 8;
    std::size_t test_anomalous = 8;
    double defect_area = 0.04;
    std::size_t region_levels = 4;
};

struct RunConfig {
    std::uint64_t seed = 42;
    BackboneConfig backbone;
    TrainConfig train;
    DataMode mode = DataMode::synthetic;
    std::vector<TaskSource> tasks = default_tasks();
    SyntheticOptions synthetic;
    std::filesystem::path out_dir;

    static std::vector<TaskSource> default_tasks();

    /// Unique names, valid sub-configs and, outside synthetic mode, existing task paths.
    void validate() const;
    /// Training settings with the run seed applied.
    TrainConfig effective_train() const;
    SyntheticTaskSpec synthetic_spec(std::size_t task) const;
};

/// Applies one `key = value` setting; unknown keys and unparsable values raise ConfigError.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Flat text format: one `key = value` per line, `#` starts a comment. The `tasks` key
/// is applied first so that per-task keys may appear anywhere. Relative task paths are
/// resolved against `base_dir`.
RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Settings in a form parse_run_config accepts (paths written as given).
void write_run_config(std::ostream& out, const RunConfig& cfg);

// ============================================================================
// Image files
// ============================================================================

/// Binary PGM (1 channel) or PPM (3 channels), maxval 255, scaled to [0, 1].
Image read_pnm(const std::filesystem::path& path);
/// Values must lie in [0, 1]; stored as round(255 v).
void write_pnm(const Image& image, const std::filesystem::path& path);

struct Gray8 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;
};
Gray8 read_pgm8(const std::filesystem::path& path);
void write_pgm8(const Gray8& g, const std::filesystem::path& path);

/// Nearest-neighbour resampling of a binary mask.
std::vector<std::uint8_t> resize_mask(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width,
                                      std::size_t out_h, std::size_t out_w);

// ============================================================================
// Task data
// ============================================================================

/// Labeled evaluation images (or feature grids) with defect masks at output resolution.
struct TestSet {
    std::vector<Image> images;
    std::vector<FeatureGrid> grids;
    std::vector<int> labels;
    std::vector<std::vector<std::uint8_t>> masks;  // kOutputResolution^2 each, 1 = defect

    std::size_t size() const { return labels.size(); }
    bool feature_mode() const { return !grids.empty(); }
};

struct TaskData {
    std::string name;
    TaskDataset train_images;      // pixel modes
    FeatureDataset train_features;  // feature mode
    TestSet test;
};

TaskData load_task(const RunConfig& cfg, std::size_t index);

/// Directory layout: train/NNN.ppm, train/NNN.regions.pgm, test/NNN.ppm, test/NNN.mask.pgm.
void save_task_images(const SyntheticTask& task, const std::filesystem::path& dir);
/// Directory layout: train.cadf (with regions), test.cadf, test/NNN.mask.pgm; features are
/// the backbone's unprompted scoring-layer outputs.
void save_task_features(const SyntheticTask& task, const Backbone& backbone, const std::filesystem::path& dir);

// ============================================================================
// Evaluation
// ============================================================================

struct ScoredImage {
    std::size_t task = 0;
    double similarity = 0.0;
    BranchMaps maps;
};

/// Raw branch maps of one test item under the identified (or forced) task.
ScoredImage score_test_item(const Detector& detector, const TestSet& set, std::size_t i,
                            std::optional<std::size_t> forced_task = std::nullopt);

struct TaskMetrics {
    double image_auroc = 0.0;
    double pixel_aupr = 0.0;
    std::size_t identified = 0;  // items routed to the true task
};

/// Image AUROC on max-of-map scores and pixel AUPR on the flattened fused maps.
TaskMetrics task_metrics(const std::vector<ScoredImage>& scored, const TestSet& set, const MemoryBank& bank,
                         std::size_t true_task, double alpha, bool use_anm = true);

struct AblationRow {
    std::string task;
    double fused = 0.0;        // configured alpha, with ANM
    double without_anm = 0.0;  // configured alpha, raw maps
    double visual_only = 0.0;  // alpha = 1
    double text_only = 0.0;    // alpha = 0
};

struct RunResult {
    std::string mode;
    bool visual_prompt_tuning = true;
    std::vector<std::string> task_names;
    EvalMatrix image_auroc;
    EvalMatrix pixel_aupr;
    std::vector<TaskResult> final_rows;
    std::optional<double> fm_image_auroc;
    std::optional<double> fm_pixel_aupr;
    double task_id_accuracy = 0.0;  // over all test items after the last task
    std::vector<AblationRow> ablation;
    std::vector<AdaptReport> reports;
    MemoryBank bank;
    std::uint64_t backbone_checksum = 0;
};

struct RunHooks {
    std::function<void(const std::string&)> progress;
    /// Called after each task is adapted and all seen tasks are evaluated.
    std::function<void(std::size_t stage, const MemoryBank&, const Backbone&, const std::vector<TaskData>&)>
        after_stage;
};

/// Adapts tasks in order; after each one evaluates every task seen so far. A failing stage
/// is rethrown with the task named.
RunResult run_sequence(const RunConfig& cfg, const RunHooks& hooks = {});

/// Evaluates a stored bank on the configured tasks (final-stage numbers only).
RunResult evaluate_bank(const RunConfig& cfg, const MemoryBank& bank);

void write_eval_matrix(std::ostream& out, const EvalMatrix& m, const std::vector<std::string>& names);
void write_ablation(std::ostream& out, const std::vector<AblationRow>& rows);
std::string run_metadata_json(const RunResult& r, const RunConfig& cfg);

/// results.tsv, image_auroc.tsv, pixel_aupr.tsv, ablation.tsv, metadata.json, bank.cmpb and
/// one train_<task>.tsv log per adapted task.
void write_run_outputs(const RunResult& r, const RunConfig& cfg, const std::filesystem::path& dir);

/// Memory bank as JSON (full arrays).
std::string bank_to_json(const MemoryBank& bank);

}  // namespace mpcad
