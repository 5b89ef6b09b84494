#include "mpcad/core.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>

namespace mpcad {

namespace {
WarningSink& current_sink() {
    static WarningSink sink;
    return sink;
}
}  // namespace

void warn(const std::string& message) {
    if (const auto& sink = current_sink()) sink(message);
    else std::cerr << "warning: " << message << '\n';
}

WarningSink set_warning_sink(WarningSink sink) {
    auto previous = std::move(current_sink());
    current_sink() = std::move(sink);
    return previous;
}

PatchSet::PatchSet(Mat rows) : rows_(std::move(rows)) {
    if (rows_.rows() < 1 || rows_.cols() < 1) throw DataError("patch set must have at least one row and channel");
    if (!rows_.allFinite()) throw DataError("patch set contains non-finite values");
}

FeatureGrid::FeatureGrid(std::size_t grid_h, std::size_t grid_w, Mat values)
    : grid_h_(grid_h), grid_w_(grid_w), values_(std::move(values)) {
    if (grid_h_ < 1 || grid_w_ < 1 || values_.cols() < 1)
        throw DataError("feature grid dimensions must be positive");
    if (static_cast<std::size_t>(values_.rows()) != grid_h_ * grid_w_)
        throw DataError("feature grid row count does not match grid_h * grid_w");
    if (!values_.allFinite()) throw DataError("feature grid contains non-finite values");
}

PatchSet concat(std::span<const PatchSet> sets) {
    if (sets.empty()) throw DataError("concat of zero patch sets");
    Eigen::Index total = 0;
    const auto channels = sets.front().rows().cols();
    for (const auto& s : sets) {
        if (s.rows().cols() != channels) throw DataError("concat: channel mismatch");
        total += s.rows().rows();
    }
    Mat out(total, channels);
    Eigen::Index at = 0;
    for (const auto& s : sets) {
        out.middleRows(at, s.rows().rows()) = s.rows();
        at += s.rows().rows();
    }
    return PatchSet(std::move(out));
}

ScoreMap::ScoreMap(std::size_t height, std::size_t width, std::vector<double> values, bool normalized)
    : height_(height), width_(width), values_(std::move(values)), normalized_(normalized) {
    if (height_ < 1 || width_ < 1) throw DataError("score map dimensions must be positive");
    if (values_.size() != height_ * width_) throw DataError("score map value count mismatch");
    if (!all_finite(values_)) throw NumericalError("score map contains non-finite values");
    if (normalized_) {
        for (double v : values_)
            if (v < 0.0 || v > 1.0) throw NumericalError("normalized score map value outside [0,1]");
    }
}

ScoreMap ScoreMap::filled(std::size_t height, std::size_t width, double value) {
    return ScoreMap(height, width, std::vector<double>(height * width, value));
}

double ScoreMap::max() const { return *std::max_element(values_.begin(), values_.end()); }
double ScoreMap::min() const { return *std::min_element(values_.begin(), values_.end()); }

// ----------------------------------------------------------------------------

std::uint64_t Rng::mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t c = counter_++;
    return mix(key_ ^ mix(c * 0xd1b54a32d192ed03ULL + 0x8cb92ba72f3d8dd7ULL));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) {
    if (n == 0) throw ConfigError("Rng::below(0)");
    // Lemire's multiply-shift with rejection.
    std::uint64_t x = next_u64();
    unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
        const std::uint64_t threshold = (0 - static_cast<std::uint64_t>(n)) % n;
        while (low < threshold) {
            x = next_u64();
            m = static_cast<unsigned __int128>(x) * n;
            low = static_cast<std::uint64_t>(m);
        }
    }
    return static_cast<std::size_t>(m >> 64);
}

Rng Rng::split(std::uint64_t stream) const {
    return Rng(mix(key_ ^ mix(stream + 0x243f6a8885a308d3ULL)), 0);
}

// ----------------------------------------------------------------------------

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw DataError("cosine_sim: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw DataError("degenerate vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double l2_dist(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DataError("l2_dist: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

ScoreMap bilinear_upsample(const ScoreMap& map, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0) throw DataError("bilinear_upsample: zero-size target");
    const std::size_t in_h = map.height();
    const std::size_t in_w = map.width();
    if (out_h < in_h || out_w < in_w) throw DataError("bilinear_upsample: target smaller than source");

    // Integer numerators keep the last output coordinate exactly on the last source sample.
    auto source_coord = [](std::size_t i, std::size_t in, std::size_t out) {
        if (out <= 1) return 0.0;
        return static_cast<double>(i * (in - 1)) / static_cast<double>(out - 1);
    };
    const double lo = map.min();
    const double hi = map.max();

    // Per-column source indices and weights are shared by every output row.
    std::vector<std::size_t> x0(out_w), x1(out_w);
    std::vector<double> wx(out_w);
    for (std::size_t x = 0; x < out_w; ++x) {
        const double src = source_coord(x, in_w, out_w);
        x0[x] = std::min(static_cast<std::size_t>(src), in_w - 1);
        x1[x] = std::min(x0[x] + 1, in_w - 1);
        wx[x] = src - static_cast<double>(x0[x]);
    }

    const auto& in = map.values();
    std::vector<double> out(out_h * out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double src = source_coord(y, in_h, out_h);
        const std::size_t y0 = std::min(static_cast<std::size_t>(src), in_h - 1);
        const std::size_t y1 = std::min(y0 + 1, in_h - 1);
        const double wy = src - static_cast<double>(y0);
        const double* r0 = &in[y0 * in_w];
        const double* r1 = &in[y1 * in_w];
        double* o = &out[y * out_w];
        for (std::size_t x = 0; x < out_w; ++x) {
            const double top = r0[x0[x]] + (r0[x1[x]] - r0[x0[x]]) * wx[x];
            const double bot = r1[x0[x]] + (r1[x1[x]] - r1[x0[x]]) * wx[x];
            o[x] = std::clamp(top + (bot - top) * wy, lo, hi);
        }
    }
    return ScoreMap(out_h, out_w, std::move(out), map.normalized());
}

std::vector<double> gaussian_noise(std::size_t count, double sigma, Rng& rng) {
    if (!(sigma >= 0.0)) throw ConfigError("gaussian_noise: negative sigma");
    std::vector<double> out(count);
    for (auto& v : out) v = sigma * rng.normal();
    return out;
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace mpcad
