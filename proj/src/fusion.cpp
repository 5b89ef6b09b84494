#include "mpcad/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "mpcad/binary_io.hpp"
#include "mpcad/metrics.hpp"

namespace mpcad {

namespace {

void check_validation(std::span<const LabeledMap> validation) {
    if (validation.empty()) throw DataError("calibration needs at least one validation map");
    for (const auto& v : validation)
        if (v.labels.size() != v.map.values().size()) throw DataError("validation labels do not match map size");
}

/// Candidate offsets ordered so that the first strictly better one wins ties by
/// smallest |delta|, then the negative sign.
std::vector<double> tie_order(std::span<const double> deltas) {
    std::vector<double> out(deltas.begin(), deltas.end());
    std::stable_sort(out.begin(), out.end(), [](double a, double b) {
        if (std::abs(a) != std::abs(b)) return std::abs(a) < std::abs(b);
        return a < b;
    });
    return out;
}

template <class ScoreFn>
CalibState greedy_step(const CalibState& calib, std::span<const double> delta_set, ScoreFn score) {
    CalibState out = calib;
    double best_b = calib.params.b;
    std::optional<CalibScore> best;
    for (double d : tie_order(delta_set)) {
        Calibration c = calib.params;
        c.b += d;
        const CalibScore s = score(c);
        if (!best || s > *best) {
            best = s;
            best_b = c.b;
        }
    }
    out.params.b = best_b;
    out.history.push_back(best_b);
    return out;
}

double balanced_accuracy(std::span<const double> values, std::span<const int> labels) {
    double tp = 0.0, tn = 0.0, pos = 0.0, neg = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const bool flagged = values[i] > 0.5;
        if (labels[i]) {
            pos += 1.0;
            tp += flagged;
        } else {
            neg += 1.0;
            tn += !flagged;
        }
    }
    if (neg == 0.0) return tp / pos;
    return 0.5 * (tp / pos + tn / neg);
}

CalibScore score_sorted(const std::vector<std::pair<double, int>>& sorted, const Calibration& calib) {
    std::vector<double> values(sorted.size());
    std::vector<int> labels(sorted.size());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        values[i] = anm_value(sorted[i].first, calib);
        labels[i] = sorted[i].second;
    }
    return {aupr_presorted(values, labels), balanced_accuracy(values, labels)};
}

std::vector<std::pair<double, int>> sorted_pixels(std::span<const LabeledMap> validation) {
    std::vector<std::pair<double, int>> px;
    for (const auto& v : validation)
        for (std::size_t i = 0; i < v.labels.size(); ++i) px.emplace_back(v.map.values()[i], v.labels[i]);
    std::stable_sort(px.begin(), px.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    return px;
}

bool has_positive(const std::vector<std::vector<int>>& labels) {
    for (const auto& l : labels)
        if (std::find(l.begin(), l.end(), 1) != l.end()) return true;
    return false;
}

}  // namespace

const std::vector<double>& default_delta_set() {
    static const std::vector<double> deltas{0.0, 0.1, -0.1, 0.5, -0.5, 1.0, -1.0, 3.0, -3.0};
    return deltas;
}

ScoreMap score_visual(const FeatureGrid& features, const PatchSet& bank) {
    if (features.channels() != bank.channels()) throw DataError("feature and bank channel counts differ");
    const Mat& rows = bank.rows();
    std::vector<double> out(features.patches());
    for (std::size_t p = 0; p < out.size(); ++p) {
        const auto f = features.values().row(static_cast<Eigen::Index>(p));
        out[p] = std::sqrt((rows.rowwise() - f).rowwise().squaredNorm().minCoeff());
    }
    return ScoreMap(features.grid_h(), features.grid_w(), std::move(out));
}

ScoreMap score_visual(const FeatureGrid& features, const TaskMemory& bank_entry) {
    return score_visual(features, bank_entry.feature_bank);
}

ScoreMap score_text(const FeatureGrid& features, const Vec& text_embedding, const Mat& projection) {
    if (static_cast<std::size_t>(projection.rows()) != features.channels() ||
        projection.cols() != text_embedding.size())
        throw DataError("text projection shape does not match features and embedding");
    const Mat projected = features.values() * projection;
    const double t_norm = text_embedding.norm();
    if (t_norm == 0.0) throw DataError("degenerate vector");
    std::vector<double> out(features.patches());
    std::size_t zero_patches = 0;
    for (std::size_t p = 0; p < out.size(); ++p) {
        const auto row = projected.row(static_cast<Eigen::Index>(p));
        const double n = row.norm();
        if (n == 0.0) {
            out[p] = 1.0;
            ++zero_patches;
            continue;
        }
        const double c = std::clamp(row.dot(text_embedding.transpose()) / (n * t_norm), -1.0, 1.0);
        out[p] = 1.0 - c;
    }
    if (zero_patches > 0) warn(std::to_string(zero_patches) + " zero-norm patch(es) scored as 1 by the text branch");
    return ScoreMap(features.grid_h(), features.grid_w(), std::move(out));
}

double anm_value(double x, const Calibration& calib) {
    const double z = calib.k * (x - calib.b);
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

ScoreMap anm(const ScoreMap& map, const Calibration& calib) {
    std::vector<double> out(map.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = anm_value(map.values()[i], calib);
    return ScoreMap(map.height(), map.width(), std::move(out), true);
}

CalibScore calibration_score(std::span<const LabeledMap> validation, const Calibration& calib) {
    check_validation(validation);
    return score_sorted(sorted_pixels(validation), calib);
}

CalibState greedy_calibrate(const CalibState& calib, std::span<const LabeledMap> validation,
                            std::span<const double> delta_set) {
    check_validation(validation);
    const auto px = sorted_pixels(validation);
    if (std::none_of(px.begin(), px.end(), [](const auto& p) { return p.second == 1; })) {
        warn("calibration skipped: validation maps have no positive pixels");
        CalibState out = calib;
        out.history.push_back(calib.params.b);
        return out;
    }
    return greedy_step(calib, delta_set, [&](const Calibration& c) { return score_sorted(px, c); });
}

CalibScore fused_calibration_score(const FusedValidation& v, const Calibration& cv, const Calibration& ct,
                                   double alpha) {
    if (v.visual.size() != v.text.size() || v.visual.size() != v.labels.size() || v.visual.empty())
        throw DataError("fused validation parts differ in length");
    std::vector<double> values;
    std::vector<int> labels;
    for (std::size_t i = 0; i < v.visual.size(); ++i) {
        const auto fused = fuse(anm(v.visual[i], cv), anm(v.text[i], ct), alpha);
        if (v.labels[i].size() != fused.values().size()) throw DataError("validation labels do not match map size");
        values.insert(values.end(), fused.values().begin(), fused.values().end());
        labels.insert(labels.end(), v.labels[i].begin(), v.labels[i].end());
    }
    return {aupr(values, labels), balanced_accuracy(values, labels)};
}

CalibState greedy_calibrate_fused(const CalibState& calib, Branch branch, const Calibration& other,
                                  const FusedValidation& validation, double alpha,
                                  std::span<const double> delta_set) {
    if (!has_positive(validation.labels)) {
        warn("calibration skipped: validation maps have no positive pixels");
        CalibState out = calib;
        out.history.push_back(calib.params.b);
        return out;
    }
    return greedy_step(calib, delta_set, [&](const Calibration& c) {
        return branch == Branch::visual ? fused_calibration_score(validation, c, other, alpha)
                                        : fused_calibration_score(validation, other, c, alpha);
    });
}

ScoreMap fuse(const ScoreMap& map_v, const ScoreMap& map_t, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    if (map_v.height() != map_t.height() || map_v.width() != map_t.width())
        throw DataError("fused maps differ in shape");
    if (!map_v.normalized() || !map_t.normalized()) throw DataError("fusion expects normalized maps");
    std::vector<double> out(map_v.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = map_v.values()[i], t = map_t.values()[i];
        out[i] = std::clamp(alpha * v + (1.0 - alpha) * t, std::min(v, t), std::max(v, t));
    }
    return ScoreMap(map_v.height(), map_v.width(), std::move(out), true);
}

BranchMaps score_branches(const FeatureGrid& features, const TaskMemory& mem, const Vec& text_embedding,
                          const Mat& projection, std::size_t out_hw) {
    return {bilinear_upsample(score_visual(features, mem), out_hw, out_hw),
            bilinear_upsample(score_text(features, text_embedding, projection), out_hw, out_hw)};
}

ScoreMap fuse_branches(const BranchMaps& maps, const TaskMemory& mem, double alpha, bool use_anm) {
    if (use_anm) return fuse(anm(maps.visual, mem.calib_v), anm(maps.text, mem.calib_t), alpha);
    // Without ANM the raw distances are fused as they are; the result is not bounded.
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    std::vector<double> out(maps.visual.values().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = alpha * maps.visual.values()[i] + (1.0 - alpha) * maps.text.values()[i];
    return ScoreMap(maps.visual.height(), maps.visual.width(), std::move(out));
}

Detector::Detector(const MemoryBank& bank, const Backbone& backbone, double alpha)
    : bank_(&bank), backbone_(&backbone), alpha_(alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    if (bank.empty()) throw DataError("memory bank is empty");
    for (const auto& t : bank.tasks()) embeddings_.push_back(backbone.encode_text(t.text_prompt));
    const auto& cfg = backbone.config();
    const std::size_t channels = bank.at(0).feature_bank.channels();
    projection_ = channels == cfg.dim ? backbone.weights().visual_to_text
                                      : text_projection(cfg.seed, channels, cfg.text_dim);
}

TaskMatch Detector::identify(const Image& image) const { return identify(backbone_->key_features(image)); }

TaskMatch Detector::identify(const FeatureGrid& key_features) const {
    return infer_task(*bank_, key_features.flatten());
}

BranchMaps Detector::branches(const Image& image, std::size_t task) const {
    const auto& mem = bank_->at(task);
    const VisualPrompt* prompt = mem.visual_prompt.empty() ? nullptr : &mem.visual_prompt;
    return branches(backbone_->score_features(image, prompt), task);
}

BranchMaps Detector::branches(const FeatureGrid& score_features, std::size_t task) const {
    const auto& mem = bank_->at(task);
    const Mat projection =
        score_features.channels() == static_cast<std::size_t>(projection_.rows())
            ? projection_
            : text_projection(backbone_->config().seed, score_features.channels(), backbone_->config().text_dim);
    return score_branches(score_features, mem, embeddings_.at(task), projection);
}

InferenceResult Detector::finish(const BranchMaps& maps, const TaskMatch& match) const {
    InferenceResult r;
    r.map = fuse_branches(maps, bank_->at(match.index), alpha_);
    r.image_score = r.map.max();
    r.task = match.index;
    r.task_similarity = match.score;
    return r;
}

InferenceResult Detector::infer(const Image& image, std::optional<std::size_t> forced_task) const {
    TaskMatch match;
    if (forced_task) {
        match.index = *forced_task;
        match.score = task_similarity(bank_->at(*forced_task).keys, backbone_->key_features(image).flatten());
    } else {
        match = identify(image);
    }
    return finish(branches(image, match.index), match);
}

InferenceResult Detector::infer(const FeatureGrid& features, std::optional<std::size_t> forced_task) const {
    TaskMatch match;
    if (forced_task) {
        match.index = *forced_task;
        match.score = task_similarity(bank_->at(*forced_task).keys, features.flatten());
    } else {
        match = identify(features);
    }
    return finish(branches(features, match.index), match);
}

InferenceResult infer_image(const Image& image, const MemoryBank& bank, const Backbone& backbone, double alpha) {
    return Detector(bank, backbone, alpha).infer(image);
}

void write_score_pgm(const ScoreMap& map, const std::filesystem::path& path) {
    std::string header = "P5\n" + std::to_string(map.width()) + " " + std::to_string(map.height()) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    for (double v : map.values())
        bytes.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * v), 0L, 255L)));
    write_file(path, bytes);
}

void write_score_raw(const ScoreMap& map, const std::filesystem::path& path) {
    ByteWriter w;
    for (double v : map.values()) w.f32(static_cast<float>(v));
    write_file(path, w.bytes());
}

ScoreMap read_score_raw(const std::filesystem::path& path, std::size_t height, std::size_t width) {
    const auto bytes = read_file(path);
    if (bytes.size() != 4 * height * width) throw FormatError(FormatErrorKind::truncated, "score map size mismatch");
    ByteReader r(bytes);
    std::vector<double> values(height * width);
    for (auto& v : values) v = r.f32();
    const bool bounded = std::all_of(values.begin(), values.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
    return ScoreMap(height, width, std::move(values), bounded);
}

}  // namespace mpcad
