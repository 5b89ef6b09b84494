#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mpcad/core.hpp"

namespace mpcad {

/// Planar image, channels x height x width.
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
    bool operator==(const Image&) const = default;
};

struct BackboneConfig {
    std::size_t n_layers = 6;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t patch_size = 16;
    std::size_t input_hw = 224;
    std::size_t image_channels = 3;
    std::size_t mlp_hidden = 128;
    std::size_t tap_layer_key = 5;
    std::size_t tap_layer_score = 5;
    double dropout_p = 0.0;
    bool positional = true;

    std::size_t visual_prompt_len = 2;  // l, must be even
    std::size_t text_prompt_rows = 5;   // N_l
    std::size_t text_dim = 32;
    std::size_t text_layers = 2;
    std::size_t text_heads = 2;
    std::size_t text_mlp_hidden = 64;

    std::uint64_t seed = 20240531;

    std::size_t grid() const { return input_hw / patch_size; }
    std::size_t seq_len() const { return grid() * grid(); }
    std::size_t head_dim() const { return dim / heads; }
    std::size_t patch_dim() const { return patch_size * patch_size * image_channels; }
    std::size_t max_tap() const { return std::max(tap_layer_key, tap_layer_score); }

    /// Throws ConfigError on any broken invariant.
    void validate() const;
};

// ============================================================================
// Prompts
// ============================================================================

/// One l x C matrix per backbone layer.
struct VisualPrompt {
    std::vector<Mat> layers;

    std::size_t n_layers() const { return layers.size(); }
    std::size_t length() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().rows()); }
    std::size_t channels() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().cols()); }
    bool empty() const { return layers.empty(); }

    static VisualPrompt zeros(std::size_t n_layers, std::size_t length, std::size_t channels);
    static VisualPrompt uniform(std::size_t n_layers, std::size_t length, std::size_t channels, Rng& rng);

    bool operator==(const VisualPrompt& o) const { return layers == o.layers; }
};

/// Learnable rows spliced into "a photo of a [class] with [P]".
struct TextPrompt {
    std::string class_name;
    Mat learnable;  // N_l x C_t

    static TextPrompt standard_normal(std::string class_name, std::size_t rows, std::size_t dim, Rng& rng);

    bool operator==(const TextPrompt& o) const {
        return class_name == o.class_name && learnable == o.learnable;
    }
};

// ============================================================================
// Frozen weights
// ============================================================================

struct AttentionWeights {
    Mat wq, wk, wv, wo;  // C x C, applied as x * W
    RowVec bq, bk, bv, bo;
};

struct BlockWeights {
    AttentionWeights attn;
    Mat w1;  // C x hidden
    RowVec b1;
    Mat w2;  // hidden x C
    RowVec b2;
};

struct FrozenWeights {
    Mat patch_proj;  // patch_dim x C
    RowVec patch_bias;
    std::vector<BlockWeights> vision;
    std::vector<BlockWeights> text;
    Mat visual_to_text;  // C x C_t bridge for cross-modal scoring

    static FrozenWeights generate(const BackboneConfig& cfg);
    std::uint64_t checksum() const;
};

Mat sinusoidal_positions(std::size_t count, std::size_t dim);

/// channels x text_dim frozen map from visual features into the text space. Depends only
/// on (seed, shape), so feature files of any width get a reproducible bridge.
Mat text_projection(std::uint64_t seed, std::size_t channels, std::size_t text_dim);

// ============================================================================
// Attention
// ============================================================================

/// Optional dropout hook. Inactive when p == 0 or no generator is attached.
struct DropoutHook {
    double p = 0.0;
    Rng* rng = nullptr;
    bool active() const { return p > 0.0 && rng != nullptr; }
};

struct AttentionCache {
    Mat input;
    Mat q, k, v;                    // N x C projections
    std::vector<Mat> probs;         // per head, N x (l/2 + N), before dropout
    std::vector<Mat> probs_dropped; // per head, after dropout
    std::vector<Mat> prob_mask;     // dropout keep-scale, empty when inactive
    Mat concat;                     // N x C, heads merged
    Mat out_mask;                   // dropout keep-scale on the projection, empty when inactive
    Mat prompt;                     // l x C or empty
};

/// Multi-head self-attention over one sequence (N x C). When `prompt` has rows, its
/// first l/2 rows become extra keys and its last l/2 rows extra values, split across
/// heads by columns and prepended along the sequence axis.
Mat prompt_attention(const Mat& x, const Mat& prompt, const AttentionWeights& w, std::size_t heads,
                     AttentionCache* cache = nullptr, DropoutHook dropout = {});

/// Batched form: B sequences share the weights and (optionally) one prompt per sequence.
std::vector<Mat> prompt_attention(const std::vector<Mat>& batch, const std::vector<Mat>& prompts,
                                  const AttentionWeights& w, std::size_t heads);

struct AttentionGrads {
    Mat d_input;
    Mat d_prompt;  // l x C or empty
};

AttentionGrads prompt_attention_backward(const AttentionCache& cache, const AttentionWeights& w,
                                         std::size_t heads, const Mat& d_out);

// ============================================================================
// Transformer block
// ============================================================================

struct LayerNormCache {
    Mat normalized;
    Vec inv_std;
};

struct BlockCache {
    Mat x_added;  // x + mean(prompt rows)
    LayerNormCache ln1;
    AttentionCache attn;
    Mat x_mid;
    LayerNormCache ln2;
    Mat pre_act;
    Mat hidden;
    std::size_t prompt_rows = 0;
    bool additive = false;
};

struct BlockOptions {
    bool additive_prompt = true;
    bool splice_prompt = true;
};

Mat transformer_block(const Mat& x, const Mat& prompt, const BlockWeights& w, std::size_t heads,
                      const BlockOptions& opts, BlockCache* cache = nullptr, DropoutHook dropout = {});

struct BlockGrads {
    Mat d_input;
    Mat d_prompt;  // l x C or empty
};

BlockGrads transformer_block_backward(const BlockCache& cache, const BlockWeights& w, std::size_t heads,
                                      const Mat& d_out);

// ============================================================================
// Backbone
// ============================================================================

struct EncodeOptions {
    bool additive_prompt = true;
    bool splice_prompt = true;
    std::size_t depth = 0;  // 0 means the deepest tap layer
    bool train = false;     // enables dropout when dropout_p > 0
};

/// Forward pass of the vision encoder with everything needed to backpropagate into prompts.
class VisionTape {
public:
    /// Outputs of layers 1..depth.
    const std::vector<FeatureGrid>& layers() const { return layers_; }
    const FeatureGrid& layer(std::size_t one_based) const { return layers_.at(one_based - 1); }

    /// d_layers[i] is dLoss/d(output of layer i+1); empty matrices count as zero.
    /// Returns one gradient matrix per prompt layer (zero for layers beyond depth).
    std::vector<Mat> backward(const std::vector<Mat>& d_layers) const;

private:
    friend class Backbone;
    const FrozenWeights* weights_ = nullptr;
    std::size_t heads_ = 0;
    std::size_t prompt_layers_ = 0;
    std::size_t prompt_len_ = 0;
    std::size_t channels_ = 0;
    std::vector<BlockCache> caches_;
    std::vector<FeatureGrid> layers_;
};

class TextTape {
public:
    const Vec& embedding() const { return embedding_; }
    /// Gradient with respect to the learnable prompt rows.
    Mat backward(const Vec& d_embedding) const;

private:
    friend class Backbone;
    const FrozenWeights* weights_ = nullptr;
    std::size_t heads_ = 0;
    std::size_t prompt_offset_ = 0;
    std::size_t prompt_rows_ = 0;
    std::vector<BlockCache> caches_;
    Mat final_input;
    LayerNormCache final_ln;
    Vec embedding_;
};

class Backbone {
public:
    explicit Backbone(BackboneConfig cfg);

    const BackboneConfig& config() const { return cfg_; }
    const FrozenWeights& weights() const { return weights_; }
    std::uint64_t checksum() const { return weights_.checksum(); }

    /// N x patch_dim matrix of flattened patches in raster order.
    Mat patchify(const Image& image) const;

    /// Outputs of layers 1..depth for one image. `prompts` may be null.
    std::vector<FeatureGrid> encode_image(const Image& image, const VisualPrompt* prompts,
                                          const EncodeOptions& opts = {}) const;
    std::vector<std::vector<FeatureGrid>> encode_batch(const std::vector<Image>& images,
                                                       const VisualPrompt* prompts,
                                                       const EncodeOptions& opts = {}) const;
    VisionTape encode_image_recorded(const Image& image, const VisualPrompt* prompts,
                                     const EncodeOptions& opts = {}, Rng* dropout_rng = nullptr) const;

    FeatureGrid key_features(const Image& image) const;
    FeatureGrid score_features(const Image& image, const VisualPrompt* prompts) const;

    Vec encode_text(const TextPrompt& prompt) const;
    TextTape encode_text_recorded(const TextPrompt& prompt) const;

    /// Visual patch features (rows, C) mapped into the text space (rows, C_t).
    Mat project_to_text(const Mat& features) const { return features * weights_.visual_to_text; }

    /// Makes every whitespace-separated word of `phrase` a known token.
    void register_words(const std::string& phrase);
    bool knows(const std::string& word) const;
    /// Lowercased whitespace split; throws DataError naming the first unknown token.
    std::vector<std::string> tokenize(const std::string& text) const;

    void check_prompt(const VisualPrompt& prompts) const;

private:
    Mat embed_tokens(const std::vector<std::string>& tokens) const;
    Mat text_input(const TextPrompt& prompt, std::size_t* prompt_offset) const;
    Mat token_embedding(const std::string& word) const;

    BackboneConfig cfg_;
    FrozenWeights weights_;
    Mat positions_;
    std::set<std::string> vocabulary_;
};

/// The fixed text-encoder vocabulary (before any class names are registered).
const std::vector<std::string>& base_vocabulary();

// ============================================================================
// Gradients
// ============================================================================

struct LossTail {
    double value = 0.0;
    std::vector<Mat> d_layers;  // per vision layer output, empty = zero
    Vec d_text;                 // empty = zero
};

using LossTailFn = std::function<LossTail(const std::vector<FeatureGrid>& layers, const Vec& text_embedding)>;

struct PromptGradients {
    double loss = 0.0;
    std::vector<Mat> visual;
    Mat text;
};

/// Reverse-mode gradients of a scalar loss over (vision layers, text embedding) with
/// respect to both prompt types. Frozen weights receive nothing.
PromptGradients prompt_gradients(const Backbone& backbone, const Image& image, const VisualPrompt& visual,
                                 const TextPrompt& text, const LossTailFn& tail,
                                 const EncodeOptions& opts = {});

}  // namespace mpcad
