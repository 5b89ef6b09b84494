#include "mpcad/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "mpcad/sampling.hpp"

namespace mpcad {

namespace {

constexpr std::size_t kAllPairsLimit = 196;

std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
    return h;
}

void check_mask(const RegionMask& m) {
    if (m.labels.size() != m.height * m.width) throw DataError("region mask size does not match its dimensions");
    for (int l : m.labels)
        if (l < 0) throw DataError("region labels must be nonnegative");
}

Mat unit_rows(const Mat& f, Vec& norms) {
    norms = f.rowwise().norm();
    if ((norms.array() == 0.0).any()) throw DataError("degenerate vector");
    return norms.cwiseInverse().asDiagonal() * f;
}

/// Row-wise Jacobian of x / |x|: maps dL/du to dL/dx.
Mat through_normalization(const Mat& g_unit, const Mat& unit, const Vec& norms) {
    const Vec radial = (g_unit.cwiseProduct(unit)).rowwise().sum();
    return norms.cwiseInverse().asDiagonal() * (g_unit - radial.asDiagonal() * unit);
}

/// Momentum SGD: v <- mu v + g, p <- p - lr v.
void momentum_step(Mat& param, Mat& velocity, const Mat& grad, double lr, double mu) {
    if (velocity.size() == 0) velocity = Mat::Zero(param.rows(), param.cols());
    velocity = mu * velocity + grad;
    param -= lr * velocity;
    if (!param.allFinite()) throw NumericalError("prompt update produced non-finite values");
}

/// Where features come from: backbone images or fixed grids.
class Source {
public:
    virtual ~Source() = default;
    virtual std::size_t count() const = 0;
    virtual FeatureGrid key(std::size_t i) const = 0;
    virtual FeatureGrid score(std::size_t i, const VisualPrompt* p) const = 0;
    virtual FeatureGrid noisy_score(std::size_t i, const VisualPrompt* p, double sigma, Rng& rng) const = 0;
    /// Pixel input for visual prompt tuning; null when features are fixed.
    virtual const Image* image(std::size_t) const { return nullptr; }
    bool trains_visual() const { return image(0) != nullptr; }
};

class ImageSource final : public Source {
public:
    ImageSource(const TaskDataset& d, const Backbone& b) : d_(d), b_(b) {}
    std::size_t count() const override { return d_.images.size(); }
    FeatureGrid key(std::size_t i) const override { return b_.key_features(d_.images[i]); }
    FeatureGrid score(std::size_t i, const VisualPrompt* p) const override {
        return b_.score_features(d_.images[i], p);
    }
    FeatureGrid noisy_score(std::size_t i, const VisualPrompt* p, double sigma, Rng& rng) const override {
        return b_.score_features(add_noise(d_.images[i], sigma, rng), p);
    }
    const Image* image(std::size_t i) const override { return &d_.images[i]; }

private:
    const TaskDataset& d_;
    const Backbone& b_;
};

class GridSource final : public Source {
public:
    explicit GridSource(const FeatureDataset& d) : d_(d) {}
    std::size_t count() const override { return d_.grids.size(); }
    FeatureGrid key(std::size_t i) const override { return d_.grids[i]; }
    FeatureGrid score(std::size_t i, const VisualPrompt*) const override { return d_.grids[i]; }
    FeatureGrid noisy_score(std::size_t i, const VisualPrompt*, double sigma, Rng& rng) const override {
        return add_noise(d_.grids[i], sigma, rng);
    }

private:
    const FeatureDataset& d_;
};

struct Split {
    std::vector<std::size_t> train, validation;
};

/// The last round(n * fraction) items are held out (at least one when n >= 2).
Split split_items(std::size_t n, double fraction) {
    auto n_val = static_cast<std::size_t>(std::lround(static_cast<double>(n) * fraction));
    if (n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
    else n_val = 0;
    Split s;
    for (std::size_t i = 0; i < n; ++i) (i < n - n_val ? s.train : s.validation).push_back(i);
    return s;
}

PatchSet stack(const std::vector<FeatureGrid>& grids) {
    std::vector<PatchSet> sets;
    sets.reserve(grids.size());
    for (const auto& g : grids) sets.push_back(g.flatten());
    return concat(sets);
}

struct Calibrated {
    Calibration v, t;
    std::vector<std::pair<double, double>> per_round;  // (b_v, b_t) after each logged round
};

double mean_of(const std::vector<ScoreMap>& maps) {
    double s = 0.0, n = 0.0;
    for (const auto& m : maps)
        for (double v : m.values()) {
            s += v;
            n += 1.0;
        }
    return s / n;
}

/// Per-branch greedy rounds on own maps, then one joint round on fused maps.
Calibrated calibrate(const FusedValidation& val, const TrainConfig& cfg) {
    std::vector<ScoreMap> clean_v, clean_t;
    std::vector<LabeledMap> lv, lt;
    for (std::size_t i = 0; i < val.labels.size(); ++i) {
        lv.push_back({val.visual[i], val.labels[i]});
        lt.push_back({val.text[i], val.labels[i]});
        if (val.labels[i].front() == 0) {
            clean_v.push_back(val.visual[i]);
            clean_t.push_back(val.text[i]);
        }
    }
    CalibState sv{{cfg.k_sigmoid, mean_of(clean_v)}, {}};
    CalibState st{{cfg.k_sigmoid, mean_of(clean_t)}, {}};

    Calibrated out;
    for (std::size_t round = 0; round < cfg.epochs; ++round) {
        const double bv = sv.params.b, bt = st.params.b;
        sv = greedy_calibrate(sv, lv, cfg.delta_set);
        st = greedy_calibrate(st, lt, cfg.delta_set);
        out.per_round.emplace_back(sv.params.b, st.params.b);
        if (sv.params.b == bv && st.params.b == bt) break;  // deterministic fixed point
    }
    sv = greedy_calibrate_fused(sv, Branch::visual, st.params, val, cfg.alpha_fusion, cfg.delta_set);
    st = greedy_calibrate_fused(st, Branch::text, sv.params, val, cfg.alpha_fusion, cfg.delta_set);
    while (out.per_round.size() < cfg.epochs) out.per_round.push_back(out.per_round.back());
    out.per_round.back() = {sv.params.b, st.params.b};
    out.v = sv.params;
    out.t = st.params;
    return out;
}

MemoryBank adapt(const Source& src, const std::vector<RegionMask>& masks, const std::string& task_name,
                 const MemoryBank& bank, const TrainConfig& cfg, Backbone& backbone, AdaptReport* report) {
    cfg.validate();
    if (bank.find(task_name)) throw DataError("task '" + task_name + "' already in the memory bank");
    backbone.register_words(task_name);
    const auto& bcfg = backbone.config();

    const Rng root = Rng(cfg.seed).split(name_hash(task_name));
    Rng init_t = root.split(1), init_v = root.split(2), shuffle_rng = root.split(3), noise_rng = root.split(4),
        pair_rng = root.split(5), val_rng = root.split(6);

    const Split split = split_items(src.count(), cfg.validation_fraction);
    if (split.validation.empty()) warn("task '" + task_name + "': too few images to hold out; validating on training data");
    const auto& val_items = split.validation.empty() ? split.train : split.validation;

    TaskMemory mem;
    mem.task_name = task_name;

    // (1) task identity keys from unprompted features of every image
    {
        std::vector<FeatureGrid> keys;
        for (std::size_t i = 0; i < src.count(); ++i) keys.push_back(src.key(i));
        const PatchSet all = stack(keys);
        mem.keys = fps(all, {std::min(cfg.key_budget, all.count())});
    }

    // (2) prompt initialization
    mem.text_prompt = TextPrompt::standard_normal(task_name, bcfg.text_prompt_rows, bcfg.text_dim, init_t);
    const bool train_visual = src.trains_visual();
    if (train_visual)
        mem.visual_prompt = VisualPrompt::uniform(bcfg.n_layers, bcfg.visual_prompt_len, bcfg.dim, init_v);
    const VisualPrompt* vp = train_visual ? &mem.visual_prompt : nullptr;

    const std::size_t channels = mem.keys.channels();
    const Mat projection =
        channels == bcfg.dim ? backbone.weights().visual_to_text : text_projection(bcfg.seed, channels, bcfg.text_dim);

    // (3) prompt optimization
    std::vector<Mat> vel_v(train_visual ? bcfg.n_layers : 0);
    Mat vel_t;
    std::vector<EpochRecord> records;
    std::vector<std::size_t> order = split.train;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) try {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        double sum_t = 0.0, sum_v = 0.0;
        std::size_t batches = 0, visual_terms = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            const std::span<const std::size_t> batch(order.data() + start, stop - start);

            if (train_visual) {
                std::vector<Mat> grad(bcfg.n_layers, Mat::Zero(static_cast<Eigen::Index>(bcfg.visual_prompt_len),
                                                                static_cast<Eigen::Index>(bcfg.dim)));
                for (std::size_t i : batch) {
                    EncodeOptions opts;
                    opts.depth = bcfg.tap_layer_score;
                    opts.train = true;
                    const VisionTape tape = backbone.encode_image_recorded(*src.image(i), vp, opts);
                    const VisualLoss lv = loss_visual(tape.layer(bcfg.tap_layer_score), masks[i], cfg.lambda_alpha,
                                                      cfg.lambda_beta, true, &pair_rng, cfg.max_pairs);
                    if (!std::isfinite(lv.value))
                        throw NumericalError("task '" + task_name + "': non-finite visual loss at epoch " +
                                             std::to_string(epoch));
                    std::vector<Mat> d_layers(bcfg.tap_layer_score);
                    d_layers.back() = lv.d_features / static_cast<double>(batch.size());
                    const auto g = tape.backward(d_layers);
                    for (std::size_t l = 0; l < g.size(); ++l) grad[l] += g[l];
                    sum_v += lv.value;
                    ++visual_terms;
                }
                for (std::size_t l = 0; l < bcfg.n_layers; ++l)
                    momentum_step(mem.visual_prompt.layers[l], vel_v[l], grad[l], cfg.learning_rate, cfg.momentum);
            }

            const TextTape tt = backbone.encode_text_recorded(mem.text_prompt);
            const Vec& emb = tt.embedding();
            Vec d_emb = Vec::Zero(emb.size());
            std::vector<double> scores, labels;
            std::vector<Vec> d_scores;
            for (std::size_t i : batch) {
                for (int label = 0; label < 2; ++label) {
                    const FeatureGrid f =
                        label ? src.noisy_score(i, vp, cfg.sigma, noise_rng) : src.score(i, vp);
                    TextScore ts = text_image_score(f, emb, projection, true);
                    scores.push_back(ts.value);
                    labels.push_back(label);
                    d_scores.push_back(std::move(ts.d_embedding));
                }
            }
            const double lt = loss_text(scores, labels);
            if (!std::isfinite(lt))
                throw NumericalError("task '" + task_name + "': non-finite text loss at epoch " + std::to_string(epoch));
            const double n = static_cast<double>(scores.size());
            for (std::size_t s = 0; s < scores.size(); ++s) d_emb += (2.0 / n) * (scores[s] - labels[s]) * d_scores[s];
            momentum_step(mem.text_prompt.learnable, vel_t, tt.backward(d_emb), cfg.learning_rate, cfg.momentum);
            sum_t += lt;
            ++batches;
        }
        EpochRecord r;
        r.epoch = epoch;
        r.loss_text = sum_t / static_cast<double>(batches);
        if (train_visual) r.loss_visual = sum_v / static_cast<double>(visual_terms);
        records.push_back(r);
    } catch (const DataError& e) {
        // finite inputs turning non-finite mid-training means the prompts diverged
        throw NumericalError("task '" + task_name + "': " + e.what() + " at epoch " + std::to_string(epoch));
    } catch (const NumericalError& e) {
        const std::string what = e.what();
        if (what.rfind("task '", 0) == 0) throw;
        throw NumericalError("task '" + task_name + "': " + what + " at epoch " + std::to_string(epoch));
    }

    // (4) coreset of prompt-conditioned training features
    {
        std::vector<FeatureGrid> feats;
        for (std::size_t i : split.train) feats.push_back(src.score(i, vp));
        const PatchSet all = stack(feats);
        mem.feature_bank = coreset_select(all, {std::min(cfg.bank_budget, all.count())});
    }

    // (5) calibration on the held-out split and its noised copies
    const Vec emb = backbone.encode_text(mem.text_prompt);
    const TaskMemory scoring = mem.quantized();  // score against the bank as it will be stored
    FusedValidation val;
    for (std::size_t i : val_items) {
        for (int label = 0; label < 2; ++label) {
            const FeatureGrid f = label ? src.noisy_score(i, vp, cfg.sigma, val_rng) : src.score(i, vp);
            BranchMaps maps = score_branches(f, scoring, emb, projection);
            val.labels.emplace_back(maps.visual.values().size(), label);
            val.visual.push_back(std::move(maps.visual));
            val.text.push_back(std::move(maps.text));
        }
    }
    const Calibrated cal = calibrate(val, cfg);
    mem.calib_v = cal.v;
    mem.calib_t = cal.t;
    for (std::size_t e = 0; e < records.size(); ++e) {
        records[e].b_v = cal.per_round[e].first;
        records[e].b_t = cal.per_round[e].second;
    }

    if (report) {
        report->epochs = std::move(records);
        report->train_count = split.train.size();
        report->validation_count = split.validation.size();
    }

    // (6) append
    return insert_task(bank, mem);
}

}  // namespace

void TaskDataset::validate() const {
    if (task_name.empty()) throw DataError("task needs a name");
    if (images.empty()) throw DataError("task '" + task_name + "' has no images");
    if (region_masks.size() != images.size()) throw DataError("task '" + task_name + "': one region mask per image");
    for (const auto& img : images) {
        if (img.channels != images.front().channels || img.height != images.front().height ||
            img.width != images.front().width)
            throw DataError("task '" + task_name + "': images differ in size");
        if (img.pixels.size() != img.channels * img.height * img.width) throw DataError("image buffer size mismatch");
    }
    for (const auto& m : region_masks) check_mask(m);
}

void FeatureDataset::validate() const {
    if (task_name.empty()) throw DataError("task needs a name");
    if (grids.empty()) throw DataError("task '" + task_name + "' has no feature grids");
    if (!region_masks.empty() && region_masks.size() != grids.size())
        throw DataError("task '" + task_name + "': one region mask per grid");
    for (const auto& g : grids)
        if (g.grid_h() != grids.front().grid_h() || g.grid_w() != grids.front().grid_w() ||
            g.channels() != grids.front().channels())
            throw DataError("task '" + task_name + "': feature grids differ in shape");
    for (const auto& m : region_masks) check_mask(m);
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (sigma < 0.0) throw ConfigError("sigma must be nonnegative");
    if (alpha_fusion < 0.0 || alpha_fusion > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    if (!(k_sigmoid > 0.0)) throw ConfigError("k must be positive");
    if (delta_set.empty()) throw ConfigError("delta set must not be empty");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0)
        throw ConfigError("validation_fraction must lie in [0, 1)");
    if (key_budget < 1 || bank_budget < 1) throw ConfigError("sampling budgets must be positive");
    if (max_pairs < 1) throw ConfigError("max_pairs must be positive");
}

double loss_text(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw DataError("loss_text: scores and labels differ in length");
    if (scores.empty()) throw DataError("loss_text: empty batch");
    double s = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) s += (scores[i] - labels[i]) * (scores[i] - labels[i]);
    return s / static_cast<double>(scores.size());
}

VisualLoss loss_visual(const FeatureGrid& features, const RegionMask& regions, double lambda_alpha,
                       double lambda_beta, bool with_gradient, Rng* pair_rng, std::size_t max_pairs) {
    check_mask(regions);
    if (regions.height != features.grid_h() || regions.width != features.grid_w())
        throw DataError("loss_visual: region mask and feature grid differ in size");
    Vec norms;
    const Mat u = unit_rows(features.values(), norms);
    const auto n = static_cast<Eigen::Index>(features.patches());
    const auto& lab = regions.labels;

    VisualLoss out;
    Mat g_unit;
    if (with_gradient) g_unit = Mat::Zero(u.rows(), u.cols());

    if (features.patches() <= kAllPairsLimit) {
        const Mat cos = u * u.transpose();
        Mat w(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j)
                w(i, j) = i == j ? 0.0
                                 : (lab[static_cast<std::size_t>(i)] == lab[static_cast<std::size_t>(j)] ? -lambda_beta
                                                                                                         : lambda_alpha);
        // Every unordered pair appears twice in the symmetric sum.
        out.value = 0.5 * w.cwiseProduct(cos).sum();
        if (with_gradient) g_unit = w * u;
    } else {
        Rng fallback(0);
        Rng& rng = pair_rng ? *pair_rng : fallback;
        const auto np = static_cast<std::size_t>(n);
        for (std::size_t s = 0; s < max_pairs; ++s) {
            std::size_t i = rng.below(np), j = rng.below(np - 1);
            if (j >= i) ++j;
            const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
            const double w = lab[i] == lab[j] ? -lambda_beta : lambda_alpha;
            out.value += w * u.row(a).dot(u.row(b));
            if (with_gradient) {
                g_unit.row(a) += w * u.row(b);
                g_unit.row(b) += w * u.row(a);
            }
        }
    }
    if (with_gradient) out.d_features = through_normalization(g_unit, u, norms);
    return out;
}

Image add_noise(const Image& image, double sigma, Rng& rng) {
    Image out = image;
    const auto noise = gaussian_noise(out.pixels.size(), sigma, rng);
    for (std::size_t i = 0; i < noise.size(); ++i) out.pixels[i] += noise[i];
    return out;
}

FeatureGrid add_noise(const FeatureGrid& grid, double sigma, Rng& rng) {
    Mat v = grid.values();
    const auto noise = gaussian_noise(static_cast<std::size_t>(v.size()), sigma, rng);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += noise[static_cast<std::size_t>(i)];
    return FeatureGrid(grid.grid_h(), grid.grid_w(), std::move(v));
}

PseudoBatch pseudo_label_batch(const std::vector<Image>& images, double sigma, Rng& rng) {
    if (sigma < 0.0) throw ConfigError("sigma must be nonnegative");
    PseudoBatch b;
    for (const auto& img : images) {
        b.images.push_back(img);
        b.labels.push_back(0);
        b.images.push_back(add_noise(img, sigma, rng));
        b.labels.push_back(1);
    }
    return b;
}

TextScore text_image_score(const FeatureGrid& features, const Vec& embedding, const Mat& projection,
                           bool with_gradient) {
    const ScoreMap s = score_text(features, embedding, projection);
    const auto& v = s.values();
    const auto p = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    TextScore out;
    out.value = v[p];
    if (!with_gradient) return out;

    out.d_embedding = Vec::Zero(embedding.size());
    out.d_features = Mat::Zero(features.values().rows(), features.values().cols());
    const Vec z = (features.values().row(static_cast<Eigen::Index>(p)) * projection).transpose();
    const double zn = z.norm(), tn = embedding.norm();
    if (zn == 0.0) return out;  // constant score, no gradient
    const double c = z.dot(embedding) / (zn * tn);
    // score = 1 - cos(z, t)
    const Vec d_t = -(z / (zn * tn) - c * embedding / (tn * tn));
    const Vec d_z = -(embedding / (zn * tn) - c * z / (zn * zn));
    out.d_embedding = d_t;
    out.d_features.row(static_cast<Eigen::Index>(p)) = (projection * d_z).transpose();
    return out;
}

void write_training_log(std::ostream& out, const std::vector<EpochRecord>& epochs) {
    char buf[160];
    out << "epoch\tloss_text\tloss_visual\tb_v\tb_t\n";
    for (const auto& e : epochs) {
        const std::string lv = e.loss_visual ? [&] {
            char b[40];
            std::snprintf(b, sizeof b, "%.9g", *e.loss_visual);
            return std::string(b);
        }()
                                             : "n/a";
        std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%s\t%.9g\t%.9g\n", e.epoch, e.loss_text, lv.c_str(), e.b_v, e.b_t);
        out << buf;
    }
}

MemoryBank adapt_task(const TaskDataset& dataset, const MemoryBank& bank, const TrainConfig& config,
                      Backbone& backbone, AdaptReport* report) {
    dataset.validate();
    const auto& cfg = backbone.config();
    const auto& img = dataset.images.front();
    if (img.channels != cfg.image_channels || img.height != cfg.input_hw || img.width != cfg.input_hw)
        throw DataError("task '" + dataset.task_name + "': image size does not match the backbone input");
    for (const auto& m : dataset.region_masks)
        if (m.height != cfg.grid() || m.width != cfg.grid())
            throw DataError("task '" + dataset.task_name + "': region mask does not match the patch grid");
    return adapt(ImageSource(dataset, backbone), dataset.region_masks, dataset.task_name, bank, config, backbone,
                 report);
}

MemoryBank adapt_task_features(const FeatureDataset& dataset, const MemoryBank& bank, const TrainConfig& config,
                               Backbone& backbone, AdaptReport* report) {
    dataset.validate();
    return adapt(GridSource(dataset), dataset.region_masks, dataset.task_name, bank, config, backbone, report);
}

}  // namespace mpcad
