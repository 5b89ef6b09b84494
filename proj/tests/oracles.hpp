// Independent brute-force reference implementations used only by tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "mpcad/backbone.hpp"

namespace oracle {

using mpcad::Mat;

inline Mat random_mat(std::size_t rows, std::size_t cols, mpcad::Rng& rng) {
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

inline mpcad::AttentionWeights random_attention(std::size_t c, mpcad::Rng& rng) {
    mpcad::AttentionWeights w;
    const double s = 1.0 / std::sqrt(static_cast<double>(c));
    w.wq = random_mat(c, c, rng) * s;
    w.wk = random_mat(c, c, rng) * s;
    w.wv = random_mat(c, c, rng) * s;
    w.wo = random_mat(c, c, rng) * s;
    w.bq = random_mat(1, c, rng);
    w.bk = random_mat(1, c, rng);
    w.bv = random_mat(1, c, rng);
    w.bo = random_mat(1, c, rng);
    return w;
}

/// Small backbone: 2x2 patches (N=4), C=8, 2 heads, 2 layers.
inline mpcad::BackboneConfig toy_config() {
    mpcad::BackboneConfig cfg;
    cfg.n_layers = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.patch_size = 4;
    cfg.input_hw = 8;
    cfg.image_channels = 1;
    cfg.mlp_hidden = 16;
    cfg.tap_layer_key = 1;
    cfg.tap_layer_score = 2;
    cfg.text_dim = 8;
    cfg.text_heads = 2;
    cfg.text_layers = 2;
    cfg.text_mlp_hidden = 16;
    cfg.seed = 99;
    return cfg;
}

/// Scalar-loop multi-head self-attention without prompts.
inline Mat vanilla_attention(const Mat& x, const mpcad::AttentionWeights& w, std::size_t heads) {
    const auto n = static_cast<std::size_t>(x.rows());
    const auto c = static_cast<std::size_t>(x.cols());
    const std::size_t d = c / heads;
    auto lin = [&](const Mat& W, const mpcad::RowVec& b) {
        Mat out(x.rows(), x.cols());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                double s = b[j];
                for (std::size_t k = 0; k < c; ++k) s += x(i, k) * W(k, j);
                out(i, j) = s;
            }
        return out;
    };
    const Mat q = lin(w.wq, w.bq), k = lin(w.wk, w.bk), v = lin(w.wv, w.bv);
    Mat merged(x.rows(), x.cols());
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> s(n);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                double dot = 0.0;
                for (std::size_t t = 0; t < d; ++t) dot += q(i, h * d + t) * k(j, h * d + t);
                s[j] = dot / std::sqrt(static_cast<double>(d));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (auto& e : s) z += (e = std::exp(e - mx));
            for (std::size_t t = 0; t < d; ++t) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += s[j] / z * v(j, h * d + t);
                merged(i, h * d + t) = acc;
            }
        }
    }
    Mat y(x.rows(), x.cols());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double s = w.bo[j];
            for (std::size_t k2 = 0; k2 < c; ++k2) s += merged(i, k2) * w.wo(k2, j);
            y(i, j) = s;
        }
    return y;
}

inline double dist(const Mat& a, Eigen::Index i, const Mat& b, Eigen::Index j) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) s += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
    return std::sqrt(s);
}

inline double cosine(const Mat& a, Eigen::Index i, const Mat& b, Eigen::Index j) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        dot += a(i, c) * b(j, c);
        na += a(i, c) * a(i, c);
        nb += b(j, c) * b(j, c);
    }
    return dot / std::sqrt(na * nb);
}

/// Max-min selection recomputed from scratch each round (no incremental distances).
inline std::vector<std::size_t> fps_indices(const Mat& pts, std::size_t k) {
    std::vector<std::size_t> chosen{0};
    while (chosen.size() < k) {
        double best = -1.0;
        std::size_t best_i = 0;
        for (Eigen::Index i = 0; i < pts.rows(); ++i) {
            double md = std::numeric_limits<double>::infinity();
            for (auto s : chosen) md = std::min(md, dist(pts, i, pts, static_cast<Eigen::Index>(s)));
            if (md > best) {
                best = md;
                best_i = static_cast<std::size_t>(i);
            }
        }
        chosen.push_back(best_i);
    }
    return chosen;
}

inline double covering_radius(const Mat& selected, const Mat& all) {
    double worst = 0.0;
    for (Eigen::Index j = 0; j < all.rows(); ++j) {
        double md = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < selected.rows(); ++i) md = std::min(md, dist(all, j, selected, i));
        worst = std::max(worst, md);
    }
    return worst;
}

/// Exact k-center optimum over every k-subset.
inline double optimal_covering_radius(const Mat& pts, std::size_t k) {
    const auto n = static_cast<std::size_t>(pts.rows());
    std::vector<int> pick(n, 0);
    std::fill(pick.end() - static_cast<long>(k), pick.end(), 1);
    double best = std::numeric_limits<double>::infinity();
    do {
        Mat sel(static_cast<Eigen::Index>(k), pts.cols());
        Eigen::Index r = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (pick[i]) sel.row(r++) = pts.row(static_cast<Eigen::Index>(i));
        best = std::min(best, covering_radius(sel, pts));
    } while (std::next_permutation(pick.begin(), pick.end()));
    return best;
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted half.
inline double auroc(const std::vector<double>& s, const std::vector<int>& y) {
    double good = 0.0, total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] == 1 && y[j] == 0) {
                total += 1.0;
                good += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return good / total;
}

/// Average precision by sweeping every distinct threshold from the top.
inline double aupr(const std::vector<double>& s, const std::vector<int>& y) {
    std::set<double, std::greater<>> thresholds(s.begin(), s.end());
    double positives = 0.0;
    for (int l : y) positives += l;
    double ap = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        double tp = 0.0, fp = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] >= t) (y[i] ? tp : fp) += 1.0;
        const double recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    return ap;
}

inline double mse(const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return s / static_cast<double>(x.size());
}

/// Structured contrastive loss by enumerating every unordered patch pair.
inline double loss_visual(const Mat& f, const std::vector<int>& regions, double la, double lb) {
    double neg = 0.0, pos = 0.0;
    for (Eigen::Index i = 0; i < f.rows(); ++i)
        for (Eigen::Index j = i + 1; j < f.rows(); ++j) {
            const double c = cosine(f, i, f, j);
            if (regions[static_cast<std::size_t>(i)] == regions[static_cast<std::size_t>(j)])
                pos += c;
            else
                neg += c;
        }
    return la * neg - lb * pos;
}

/// Nearest-bank-row distance for every patch.
inline std::vector<double> knn_scores(const Mat& patches, const Mat& bank) {
    std::vector<double> out;
    for (Eigen::Index i = 0; i < patches.rows(); ++i) {
        double md = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < bank.rows(); ++j) md = std::min(md, dist(patches, i, bank, j));
        out.push_back(md);
    }
    return out;
}

}  // namespace oracle
