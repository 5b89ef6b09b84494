#include "mpcad/backbone.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

namespace mpcad {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kPositionScale = 0.1;

Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng rng) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
    return m;
}

RowVec random_row(Eigen::Index cols, double stddev, Rng rng) {
    RowVec r(cols);
    for (Eigen::Index i = 0; i < cols; ++i) r[i] = stddev * rng.normal();
    return r;
}

BlockWeights make_block(std::size_t dim, std::size_t hidden, Rng rng) {
    const auto c = static_cast<Eigen::Index>(dim);
    const auto h = static_cast<Eigen::Index>(hidden);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    BlockWeights b;
    // Sharp attention with a small output projection keeps deep patch features local;
    // near-uniform attention would add the same image-wide average to every token.
    b.attn.wq = random_normal(c, c, 2.0 * s, rng.split(1));
    b.attn.wk = random_normal(c, c, 2.0 * s, rng.split(2));
    b.attn.wv = random_normal(c, c, s, rng.split(3));
    b.attn.wo = random_normal(c, c, 0.25 * s, rng.split(4));
    b.attn.bq = random_row(c, 0.02, rng.split(5));
    b.attn.bk = random_row(c, 0.02, rng.split(6));
    b.attn.bv = random_row(c, 0.02, rng.split(7));
    b.attn.bo = random_row(c, 0.02, rng.split(8));
    b.w1 = random_normal(c, h, s, rng.split(9));
    b.b1 = random_row(h, 0.02, rng.split(10));
    b.w2 = random_normal(h, c, 0.5 / std::sqrt(static_cast<double>(hidden)), rng.split(11));
    b.b2 = random_row(c, 0.02, rng.split(12));
    return b;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename M>
std::uint64_t hash_matrix(const M& m, std::uint64_t h) {
    return fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
}

std::uint64_t hash_string(const std::string& s) { return fnv1a(s.data(), s.size(), 0xcbf29ce484222325ULL); }

Mat layer_norm(const Mat& x, LayerNormCache* cache) {
    const auto cols = static_cast<double>(x.cols());
    Mat out(x.rows(), x.cols());
    Vec inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).sum() / cols;
        const double var = (x.row(r).array() - mean).square().sum() / cols;
        inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
        out.row(r) = (x.row(r).array() - mean) * inv_std[r];
    }
    if (cache) {
        cache->normalized = out;
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

Mat layer_norm_backward(const LayerNormCache& cache, const Mat& d_out) {
    const auto cols = static_cast<double>(d_out.cols());
    Mat dx(d_out.rows(), d_out.cols());
    for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
        const double mean_d = d_out.row(r).sum() / cols;
        const double mean_dy = d_out.row(r).dot(cache.normalized.row(r)) / cols;
        dx.row(r) = cache.inv_std[r] *
                    (d_out.row(r).array() - mean_d - cache.normalized.row(r).array() * mean_dy);
    }
    return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double gelu_grad(double u) {
    const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

void softmax_rows(Mat& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
    }
}

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, const DropoutHook& hook) {
    Mat mask(rows, cols);
    const double keep = 1.0 / (1.0 - hook.p);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = hook.rng->uniform() >= hook.p ? keep : 0.0;
    return mask;
}

void check_attention_shapes(const Mat& x, const Mat& prompt, const AttentionWeights& w, std::size_t heads) {
    const auto c = x.cols();
    if (heads == 0 || c % static_cast<Eigen::Index>(heads) != 0)
        throw ConfigError("attention: channels not divisible by heads");
    if (w.wq.rows() != c || w.wq.cols() != c || w.wk.rows() != c || w.wv.rows() != c || w.wo.rows() != c ||
        w.wo.cols() != c)
        throw DataError("attention: dimension mismatch with weights");
    if (prompt.rows() > 0) {
        if (prompt.rows() % 2 != 0) throw ConfigError("attention: prompt length must be even");
        if (prompt.cols() != c) throw DataError("attention: prompt width does not match channels");
    }
}

}  // namespace

// ----------------------------------------------------------------------------

void BackboneConfig::validate() const {
    if (n_layers < 1 || dim < 1 || heads < 1 || patch_size < 1 || input_hw < 1 || image_channels < 1)
        throw ConfigError("backbone: sizes must be positive");
    if (dim % heads != 0) throw ConfigError("backbone: dim must be divisible by heads");
    if (input_hw % patch_size != 0) throw ConfigError("backbone: input_hw must be divisible by patch_size");
    if (tap_layer_key < 1 || tap_layer_key > n_layers || tap_layer_score < 1 || tap_layer_score > n_layers)
        throw ConfigError("backbone: tap layers must lie in [1, n_layers]");
    if (visual_prompt_len % 2 != 0) throw ConfigError("backbone: visual prompt length must be even");
    if (text_dim % text_heads != 0) throw ConfigError("backbone: text_dim must be divisible by text_heads");
    if (text_prompt_rows < 1) throw ConfigError("backbone: text prompt needs at least one row");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("backbone: dropout_p must lie in [0,1)");
}

VisualPrompt VisualPrompt::zeros(std::size_t n_layers, std::size_t length, std::size_t channels) {
    VisualPrompt p;
    p.layers.assign(n_layers, Mat::Zero(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(channels)));
    return p;
}

VisualPrompt VisualPrompt::uniform(std::size_t n_layers, std::size_t length, std::size_t channels, Rng& rng) {
    VisualPrompt p = zeros(n_layers, length, channels);
    for (auto& m : p.layers)
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
    return p;
}

TextPrompt TextPrompt::standard_normal(std::string class_name, std::size_t rows, std::size_t dim, Rng& rng) {
    TextPrompt p{std::move(class_name), Mat(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim))};
    for (Eigen::Index i = 0; i < p.learnable.size(); ++i) p.learnable.data()[i] = rng.normal();
    return p;
}

FrozenWeights FrozenWeights::generate(const BackboneConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    FrozenWeights w;
    const auto c = static_cast<Eigen::Index>(cfg.dim);
    w.patch_proj = random_normal(static_cast<Eigen::Index>(cfg.patch_dim()), c,
                                 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), root.split(1));
    w.patch_bias = random_row(c, 0.02, root.split(2));
    for (std::size_t i = 0; i < cfg.n_layers; ++i) w.vision.push_back(make_block(cfg.dim, cfg.mlp_hidden, root.split(100 + i)));
    for (std::size_t i = 0; i < cfg.text_layers; ++i)
        w.text.push_back(make_block(cfg.text_dim, cfg.text_mlp_hidden, root.split(200 + i)));
    w.visual_to_text = text_projection(cfg.seed, cfg.dim, cfg.text_dim);
    return w;
}

Mat text_projection(std::uint64_t seed, std::size_t channels, std::size_t text_dim) {
    return random_normal(static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(text_dim),
                         1.0 / std::sqrt(static_cast<double>(channels)), Rng(seed).split(3));
}

std::uint64_t FrozenWeights::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = hash_matrix(patch_proj, h);
    h = hash_matrix(patch_bias, h);
    for (const auto* stack : {&vision, &text}) {
        for (const auto& b : *stack) {
            for (const Mat* m : {&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo, &b.w1, &b.w2}) h = hash_matrix(*m, h);
            for (const RowVec* r : {&b.attn.bq, &b.attn.bk, &b.attn.bv, &b.attn.bo, &b.b1, &b.b2})
                h = hash_matrix(*r, h);
        }
    }
    return hash_matrix(visual_to_text, h);
}

Mat sinusoidal_positions(std::size_t count, std::size_t dim) {
    Mat pos(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
    for (std::size_t p = 0; p < count; ++p) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            const double a = static_cast<double>(p) * freq;
            pos(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = (i % 2 == 0) ? std::sin(a) : std::cos(a);
        }
    }
    return pos;
}

// ----------------------------------------------------------------------------
// Attention

Mat prompt_attention(const Mat& x, const Mat& prompt, const AttentionWeights& w, std::size_t heads,
                     AttentionCache* cache, DropoutHook dropout) {
    check_attention_shapes(x, prompt, w, heads);
    const Eigen::Index n = x.rows();
    const Eigen::Index c = x.cols();
    const Eigen::Index d = c / static_cast<Eigen::Index>(heads);
    const Eigen::Index lp = prompt.rows() / 2;
    const Eigen::Index m = lp + n;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Mat q = (x * w.wq).rowwise() + w.bq;
    Mat k = (x * w.wk).rowwise() + w.bk;
    Mat v = (x * w.wv).rowwise() + w.bv;

    Mat concat(n, c);
    if (cache) {
        cache->probs.clear();
        cache->probs_dropped.clear();
        cache->prob_mask.clear();
    }
    Mat k_full(m, d), v_full(m, d);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const Eigen::Index col = static_cast<Eigen::Index>(hd) * d;
        if (lp > 0) {
            k_full.topRows(lp) = prompt.block(0, col, lp, d);
            v_full.topRows(lp) = prompt.block(lp, col, lp, d);
        }
        k_full.bottomRows(n) = k.middleCols(col, d);
        v_full.bottomRows(n) = v.middleCols(col, d);

        Mat probs = (q.middleCols(col, d) * k_full.transpose()) * scale;
        softmax_rows(probs);
        Mat used = probs;
        Mat mask;
        if (dropout.active()) {
            mask = dropout_mask(used.rows(), used.cols(), dropout);
            used = used.cwiseProduct(mask);
        }
        concat.middleCols(col, d).noalias() = used * v_full;
        if (cache) {
            cache->probs.push_back(std::move(probs));
            cache->probs_dropped.push_back(std::move(used));
            cache->prob_mask.push_back(std::move(mask));
        }
    }

    Mat out = (concat * w.wo).rowwise() + w.bo;
    Mat out_mask;
    if (dropout.active()) {
        out_mask = dropout_mask(out.rows(), out.cols(), dropout);
        out = out.cwiseProduct(out_mask);
    }
    if (cache) {
        cache->input = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->concat = std::move(concat);
        cache->out_mask = std::move(out_mask);
        cache->prompt = prompt;
    }
    return out;
}

std::vector<Mat> prompt_attention(const std::vector<Mat>& batch, const std::vector<Mat>& prompts,
                                  const AttentionWeights& w, std::size_t heads) {
    if (!prompts.empty() && prompts.size() != batch.size())
        throw DataError("attention: one prompt per batch element expected");
    std::vector<Mat> out;
    out.reserve(batch.size());
    const Mat none;
    for (std::size_t b = 0; b < batch.size(); ++b)
        out.push_back(prompt_attention(batch[b], prompts.empty() ? none : prompts[b], w, heads));
    return out;
}

AttentionGrads prompt_attention_backward(const AttentionCache& cache, const AttentionWeights& w,
                                         std::size_t heads, const Mat& d_out) {
    const Eigen::Index n = cache.input.rows();
    const Eigen::Index c = cache.input.cols();
    const Eigen::Index d = c / static_cast<Eigen::Index>(heads);
    const Eigen::Index lp = cache.prompt.rows() / 2;
    const Eigen::Index m = lp + n;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Mat dy = cache.out_mask.size() ? Mat(d_out.cwiseProduct(cache.out_mask)) : d_out;
    Mat d_concat = dy * w.wo.transpose();

    Mat dq(n, c), dk(n, c), dv(n, c);
    Mat d_prompt = Mat::Zero(cache.prompt.rows(), cache.prompt.cols());
    Mat k_full(m, d), v_full(m, d);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const Eigen::Index col = static_cast<Eigen::Index>(hd) * d;
        if (lp > 0) {
            k_full.topRows(lp) = cache.prompt.block(0, col, lp, d);
            v_full.topRows(lp) = cache.prompt.block(lp, col, lp, d);
        }
        k_full.bottomRows(n) = cache.k.middleCols(col, d);
        v_full.bottomRows(n) = cache.v.middleCols(col, d);

        const Mat d_head = d_concat.middleCols(col, d);
        const Mat& probs = cache.probs[hd];
        Mat d_used = d_head * v_full.transpose();
        Mat dv_full = cache.probs_dropped[hd].transpose() * d_head;
        if (cache.prob_mask[hd].size()) d_used = d_used.cwiseProduct(cache.prob_mask[hd]);

        // softmax backward: dS = P * (dP - rowsum(dP * P))
        Eigen::VectorXd inner = d_used.cwiseProduct(probs).rowwise().sum();
        Mat ds = probs.cwiseProduct(d_used.colwise() - inner) * scale;

        dq.middleCols(col, d).noalias() = ds * k_full;
        Mat dk_full = ds.transpose() * cache.q.middleCols(col, d);

        dk.middleCols(col, d) = dk_full.bottomRows(n);
        dv.middleCols(col, d) = dv_full.bottomRows(n);
        if (lp > 0) {
            d_prompt.block(0, col, lp, d) = dk_full.topRows(lp);
            d_prompt.block(lp, col, lp, d) = dv_full.topRows(lp);
        }
    }

    AttentionGrads g;
    g.d_input = dq * w.wq.transpose();
    g.d_input.noalias() += dk * w.wk.transpose();
    g.d_input.noalias() += dv * w.wv.transpose();
    g.d_prompt = std::move(d_prompt);
    return g;
}

// ----------------------------------------------------------------------------
// Block

Mat transformer_block(const Mat& x, const Mat& prompt, const BlockWeights& w, std::size_t heads,
                      const BlockOptions& opts, BlockCache* cache, DropoutHook dropout) {
    const bool has_prompt = prompt.rows() > 0;
    if (has_prompt && prompt.cols() != x.cols()) throw DataError("block: prompt width does not match channels");

    Mat x_added = x;
    const bool additive = has_prompt && opts.additive_prompt;
    if (additive) x_added.rowwise() += prompt.colwise().mean();

    LayerNormCache* ln1 = cache ? &cache->ln1 : nullptr;
    const Mat h = layer_norm(x_added, ln1);
    static const Mat kNoPrompt;
    const Mat& spliced = (has_prompt && opts.splice_prompt) ? prompt : kNoPrompt;
    Mat x_mid = x_added + prompt_attention(h, spliced, w.attn, heads, cache ? &cache->attn : nullptr, dropout);

    LayerNormCache* ln2 = cache ? &cache->ln2 : nullptr;
    const Mat h2 = layer_norm(x_mid, ln2);
    Mat pre = (h2 * w.w1).rowwise() + w.b1;
    Mat hidden = pre.unaryExpr([](double u) { return gelu(u); });
    Mat out = x_mid + ((hidden * w.w2).rowwise() + w.b2);

    if (cache) {
        cache->x_added = std::move(x_added);
        cache->x_mid = std::move(x_mid);
        cache->pre_act = std::move(pre);
        cache->hidden = std::move(hidden);
        cache->prompt_rows = static_cast<std::size_t>(prompt.rows());
        cache->additive = additive;
    }
    return out;
}

BlockGrads transformer_block_backward(const BlockCache& cache, const BlockWeights& w, std::size_t heads,
                                      const Mat& d_out) {
    Mat d_hidden = d_out * w.w2.transpose();
    Mat d_pre = d_hidden.cwiseProduct(cache.pre_act.unaryExpr([](double u) { return gelu_grad(u); }));
    Mat d_mid = d_out + layer_norm_backward(cache.ln2, d_pre * w.w1.transpose());

    AttentionGrads ag = prompt_attention_backward(cache.attn, w.attn, heads, d_mid);
    Mat d_added = d_mid + layer_norm_backward(cache.ln1, ag.d_input);

    BlockGrads g;
    const auto rows = static_cast<Eigen::Index>(cache.prompt_rows);
    g.d_prompt = Mat::Zero(rows, d_out.cols());
    if (rows > 0) {
        if (ag.d_prompt.rows() == rows) g.d_prompt += ag.d_prompt;
        if (cache.additive) g.d_prompt.rowwise() += d_added.colwise().sum() / static_cast<double>(rows);
    }
    g.d_input = std::move(d_added);
    return g;
}

// ----------------------------------------------------------------------------
// Backbone

const std::vector<std::string>& base_vocabulary() {
    static const std::vector<std::string> words = {
        "a", "an", "the", "photo", "of", "with", "and", "without", "on", "in", "for", "object", "surface",
        "texture", "pattern", "normal", "clean", "flawless", "perfect", "good", "intact", "smooth", "regular",
        "damaged", "defect", "defective", "broken", "scratch", "crack", "hole", "stain", "spot", "contamination",
        "bent", "cut", "missing", "misplaced", "color", "fabric", "metal", "wood", "plastic", "glass", "stone",
        "industrial", "product", "part", "item", "image", "small", "large", "close", "up", "view", "top", "side",
        "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut", "nut", "pill",
        "screw", "tile", "toothbrush", "transistor", "zipper", "candle", "capsules", "cashew", "chewinggum",
        "fryum", "macaroni1", "macaroni2", "pcb1", "pcb2", "pcb3", "pcb4", "pipe_fryum", "stripes", "checker",
        "dots", "weave", "grain", "waves", "mesh", "rings", "speckle", "bricks", "diagonal", "lattice", "task",
        "synthetic", "sample", "one", "two", "three", "four", "five"};
    return words;
}

Backbone::Backbone(BackboneConfig cfg)
    : cfg_(cfg),
      weights_(FrozenWeights::generate(cfg)),
      positions_(sinusoidal_positions(cfg.seq_len(), cfg.dim) * kPositionScale),
      vocabulary_(base_vocabulary().begin(), base_vocabulary().end()) {}

void Backbone::check_prompt(const VisualPrompt& prompts) const {
    if (prompts.n_layers() != cfg_.n_layers)
        throw DataError("visual prompt has " + std::to_string(prompts.n_layers()) + " layers, backbone has " +
                        std::to_string(cfg_.n_layers));
    for (const auto& m : prompts.layers) {
        if (m.rows() % 2 != 0) throw ConfigError("visual prompt length must be even");
        if (static_cast<std::size_t>(m.cols()) != cfg_.dim) throw DataError("visual prompt width mismatch");
    }
}

Mat Backbone::patchify(const Image& image) const {
    if (image.channels != cfg_.image_channels || image.height != cfg_.input_hw || image.width != cfg_.input_hw)
        throw DataError("image dimensions do not match the backbone configuration");
    if (image.pixels.size() != image.channels * image.height * image.width)
        throw DataError("image pixel buffer has the wrong size");
    const std::size_t g = cfg_.grid();
    const std::size_t p = cfg_.patch_size;
    Mat patches(static_cast<Eigen::Index>(g * g), static_cast<Eigen::Index>(cfg_.patch_dim()));
    for (std::size_t gy = 0; gy < g; ++gy) {
        for (std::size_t gx = 0; gx < g; ++gx) {
            const auto row = static_cast<Eigen::Index>(gy * g + gx);
            Eigen::Index col = 0;
            for (std::size_t ch = 0; ch < image.channels; ++ch)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x) patches(row, col++) = image.at(ch, gy * p + y, gx * p + x);
        }
    }
    return patches;
}

VisionTape Backbone::encode_image_recorded(const Image& image, const VisualPrompt* prompts,
                                           const EncodeOptions& opts, Rng* dropout_rng) const {
    if (prompts) check_prompt(*prompts);
    const std::size_t depth = opts.depth ? opts.depth : cfg_.max_tap();
    if (depth > cfg_.n_layers) throw ConfigError("encode depth exceeds n_layers");

    Mat x = (patchify(image) * weights_.patch_proj).rowwise() + weights_.patch_bias;
    if (cfg_.positional) x += positions_;

    VisionTape tape;
    tape.weights_ = &weights_;
    tape.heads_ = cfg_.heads;
    tape.prompt_layers_ = prompts ? prompts->n_layers() : 0;
    tape.prompt_len_ = prompts ? prompts->length() : 0;
    tape.channels_ = cfg_.dim;
    tape.caches_.resize(depth);

    const BlockOptions block_opts{opts.additive_prompt, opts.splice_prompt};
    const DropoutHook hook{opts.train ? cfg_.dropout_p : 0.0, dropout_rng};
    static const Mat kNoPrompt;
    const std::size_t g = cfg_.grid();
    for (std::size_t i = 0; i < depth; ++i) {
        const Mat& p = prompts ? prompts->layers[i] : kNoPrompt;
        x = transformer_block(x, p, weights_.vision[i], cfg_.heads, block_opts, &tape.caches_[i], hook);
        tape.layers_.emplace_back(g, g, x);
    }
    return tape;
}

std::vector<FeatureGrid> Backbone::encode_image(const Image& image, const VisualPrompt* prompts,
                                                const EncodeOptions& opts) const {
    if (prompts) check_prompt(*prompts);
    const std::size_t depth = opts.depth ? opts.depth : cfg_.max_tap();
    if (depth > cfg_.n_layers) throw ConfigError("encode depth exceeds n_layers");

    Mat x = (patchify(image) * weights_.patch_proj).rowwise() + weights_.patch_bias;
    if (cfg_.positional) x += positions_;

    const BlockOptions block_opts{opts.additive_prompt, opts.splice_prompt};
    static const Mat kNoPrompt;
    const std::size_t g = cfg_.grid();
    std::vector<FeatureGrid> layers;
    layers.reserve(depth);
    for (std::size_t i = 0; i < depth; ++i) {
        const Mat& p = prompts ? prompts->layers[i] : kNoPrompt;
        x = transformer_block(x, p, weights_.vision[i], cfg_.heads, block_opts);
        layers.emplace_back(g, g, x);
    }
    return layers;
}

std::vector<std::vector<FeatureGrid>> Backbone::encode_batch(const std::vector<Image>& images,
                                                             const VisualPrompt* prompts,
                                                             const EncodeOptions& opts) const {
    std::vector<std::vector<FeatureGrid>> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(encode_image(img, prompts, opts));
    return out;
}

FeatureGrid Backbone::key_features(const Image& image) const {
    EncodeOptions opts;
    opts.depth = cfg_.tap_layer_key;
    return encode_image(image, nullptr, opts).back();
}

FeatureGrid Backbone::score_features(const Image& image, const VisualPrompt* prompts) const {
    EncodeOptions opts;
    opts.depth = cfg_.tap_layer_score;
    return encode_image(image, prompts, opts).back();
}

std::vector<Mat> VisionTape::backward(const std::vector<Mat>& d_layers) const {
    const std::size_t depth = caches_.size();
    if (d_layers.size() > depth) throw DataError("backward: more layer gradients than recorded layers");
    std::vector<Mat> grads(prompt_layers_, Mat::Zero(static_cast<Eigen::Index>(prompt_len_),
                                                     static_cast<Eigen::Index>(channels_)));
    Mat dx;
    for (std::size_t i = depth; i-- > 0;) {
        if (i < d_layers.size() && d_layers[i].size()) {
            if (dx.size())
                dx += d_layers[i];
            else
                dx = d_layers[i];
        }
        if (!dx.size()) continue;
        BlockGrads g = transformer_block_backward(caches_[i], weights_->vision[i], heads_, dx);
        if (i < prompt_layers_) grads[i] = std::move(g.d_prompt);
        dx = std::move(g.d_input);
    }
    return grads;
}

// ----------------------------------------------------------------------------
// Text

void Backbone::register_words(const std::string& phrase) {
    std::istringstream in(phrase);
    std::string w;
    while (in >> w) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char ch) { return std::tolower(ch); });
        vocabulary_.insert(w);
    }
}

bool Backbone::knows(const std::string& word) const { return vocabulary_.count(word) > 0; }

std::vector<std::string> Backbone::tokenize(const std::string& text) const {
    std::istringstream in(text);
    std::vector<std::string> tokens;
    std::string w;
    while (in >> w) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (!knows(w)) throw DataError("unknown token '" + w + "'");
        tokens.push_back(w);
    }
    return tokens;
}

Mat Backbone::token_embedding(const std::string& word) const {
    Rng rng = Rng(cfg_.seed).split(hash_string(word));
    return random_normal(1, static_cast<Eigen::Index>(cfg_.text_dim), 1.0, rng);
}

Mat Backbone::embed_tokens(const std::vector<std::string>& tokens) const {
    Mat e(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(cfg_.text_dim));
    for (std::size_t i = 0; i < tokens.size(); ++i) e.row(static_cast<Eigen::Index>(i)) = token_embedding(tokens[i]);
    return e;
}

Mat Backbone::text_input(const TextPrompt& prompt, std::size_t* prompt_offset) const {
    if (prompt.class_name.find_first_not_of(" \t\n") == std::string::npos)
        throw DataError("text prompt class name is empty");
    if (static_cast<std::size_t>(prompt.learnable.cols()) != cfg_.text_dim || prompt.learnable.rows() < 1)
        throw DataError("text prompt shape does not match the text encoder");
    if (!prompt.learnable.allFinite()) throw NumericalError("text prompt contains non-finite values");
    auto tokens = tokenize("a photo of a " + prompt.class_name + " with");
    const Mat fixed = embed_tokens(tokens);
    const Eigen::Index total = fixed.rows() + prompt.learnable.rows();
    Mat x(total, fixed.cols());
    x.topRows(fixed.rows()) = fixed;
    x.bottomRows(prompt.learnable.rows()) = prompt.learnable;
    x += sinusoidal_positions(static_cast<std::size_t>(total), cfg_.text_dim) * kPositionScale;
    *prompt_offset = static_cast<std::size_t>(fixed.rows());
    return x;
}

TextTape Backbone::encode_text_recorded(const TextPrompt& prompt) const {
    TextTape tape;
    tape.weights_ = &weights_;
    tape.heads_ = cfg_.text_heads;
    tape.prompt_rows_ = static_cast<std::size_t>(prompt.learnable.rows());
    Mat x = text_input(prompt, &tape.prompt_offset_);
    tape.caches_.resize(weights_.text.size());
    static const Mat kNoPrompt;
    for (std::size_t i = 0; i < weights_.text.size(); ++i)
        x = transformer_block(x, kNoPrompt, weights_.text[i], cfg_.text_heads, {}, &tape.caches_[i]);
    tape.final_input = x;
    const Mat normed = layer_norm(x, &tape.final_ln);
    tape.embedding_ = normed.row(normed.rows() - 1).transpose();
    return tape;
}

Vec Backbone::encode_text(const TextPrompt& prompt) const { return encode_text_recorded(prompt).embedding(); }

Mat TextTape::backward(const Vec& d_embedding) const {
    Mat d_final = Mat::Zero(final_input.rows(), final_input.cols());
    d_final.row(d_final.rows() - 1) = d_embedding.transpose();
    Mat dx = layer_norm_backward(final_ln, d_final);
    for (std::size_t i = caches_.size(); i-- > 0;)
        dx = transformer_block_backward(caches_[i], weights_->text[i], heads_, dx).d_input;
    return dx.middleRows(static_cast<Eigen::Index>(prompt_offset_), static_cast<Eigen::Index>(prompt_rows_));
}

// ----------------------------------------------------------------------------

PromptGradients prompt_gradients(const Backbone& backbone, const Image& image, const VisualPrompt& visual,
                                 const TextPrompt& text, const LossTailFn& tail, const EncodeOptions& opts) {
    const VisionTape vt = backbone.encode_image_recorded(image, &visual, opts);
    const TextTape tt = backbone.encode_text_recorded(text);
    const LossTail lt = tail(vt.layers(), tt.embedding());
    if (!std::isfinite(lt.value)) throw NumericalError("diverged forward pass");

    PromptGradients out;
    out.loss = lt.value;
    out.visual = vt.backward(lt.d_layers);
    out.text = lt.d_text.size() ? tt.backward(lt.d_text) : Mat::Zero(text.learnable.rows(), text.learnable.cols());
    return out;
}

}  // namespace mpcad
