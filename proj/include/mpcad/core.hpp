#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mpcad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// ============================================================================
// Errors
// ============================================================================

enum class ErrorKind { config, data, numerical };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct DataError : Error {
    explicit DataError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct NumericalError : Error {
    explicit NumericalError(const std::string& w) : Error(ErrorKind::numerical, w) {}
};

/// Non-fatal diagnostics go through one replaceable sink (stderr by default).
using WarningSink = std::function<void(const std::string&)>;
void warn(const std::string& message);
/// Installs `sink` and returns the previous one; an empty function restores stderr.
WarningSink set_warning_sink(WarningSink sink);

// ============================================================================
// Containers
// ============================================================================

/// N x C set of patch vectors (one row per patch).
class PatchSet {
public:
    PatchSet() = default;
    explicit PatchSet(Mat rows);

    std::size_t count() const { return static_cast<std::size_t>(rows_.rows()); }
    std::size_t channels() const { return static_cast<std::size_t>(rows_.cols()); }
    const Mat& rows() const { return rows_; }
    auto row(std::size_t i) const { return rows_.row(static_cast<Eigen::Index>(i)); }

    bool operator==(const PatchSet& o) const { return rows_ == o.rows_; }

private:
    Mat rows_;
};

/// grid_h x grid_w grid of C-dimensional patch features, stored row-major by patch.
class FeatureGrid {
public:
    FeatureGrid() = default;
    FeatureGrid(std::size_t grid_h, std::size_t grid_w, Mat values);

    std::size_t grid_h() const { return grid_h_; }
    std::size_t grid_w() const { return grid_w_; }
    std::size_t channels() const { return static_cast<std::size_t>(values_.cols()); }
    std::size_t patches() const { return grid_h_ * grid_w_; }
    const Mat& values() const { return values_; }
    auto at(std::size_t r, std::size_t c) const {
        return values_.row(static_cast<Eigen::Index>(r * grid_w_ + c));
    }

    PatchSet flatten() const { return PatchSet(values_); }

    bool operator==(const FeatureGrid& o) const {
        return grid_h_ == o.grid_h_ && grid_w_ == o.grid_w_ && values_ == o.values_;
    }

private:
    std::size_t grid_h_ = 0;
    std::size_t grid_w_ = 0;
    Mat values_;
};

/// Stacks the rows of several patch sets (all must share a channel count).
PatchSet concat(std::span<const PatchSet> sets);

/// Dense height x width anomaly map.
class ScoreMap {
public:
    ScoreMap() = default;
    ScoreMap(std::size_t height, std::size_t width, std::vector<double> values, bool normalized = false);
    static ScoreMap filled(std::size_t height, std::size_t width, double value);

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    bool normalized() const { return normalized_; }
    const std::vector<double>& values() const { return values_; }
    double at(std::size_t r, std::size_t c) const { return values_[r * width_ + c]; }
    double max() const;
    double min() const;

    bool operator==(const ScoreMap& o) const = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<double> values_;
    bool normalized_ = false;
};

// ============================================================================
// Rng
// ============================================================================

/// Counter-based generator: every draw is a pure function of (key, counter), so
/// streams are reproducible across platforms and can be split without state sharing.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc908ULL)) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal (Box-Muller, paired draws).
    double normal();
    std::size_t below(std::size_t n);

    /// Independent child stream; does not advance this generator.
    Rng split(std::uint64_t stream) const;

    static std::uint64_t mix(std::uint64_t x);

private:
    Rng(std::uint64_t key, int) : key_(key) {}

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ============================================================================
// Kernels
// ============================================================================

/// dot(a,b)/(|a||b|) clamped to [-1,1]; throws DataError("degenerate vector") on a zero norm.
double cosine_sim(std::span<const double> a, std::span<const double> b);
double l2_dist(std::span<const double> a, std::span<const double> b);

template <typename A, typename B>
double cosine_sim(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
    const auto ea = a.derived().eval();
    const auto eb = b.derived().eval();
    return cosine_sim(std::span<const double>(ea.data(), static_cast<std::size_t>(ea.size())),
                      std::span<const double>(eb.data(), static_cast<std::size_t>(eb.size())));
}

template <typename A, typename B>
double l2_dist(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
    const auto ea = a.derived().eval();
    const auto eb = b.derived().eval();
    return l2_dist(std::span<const double>(ea.data(), static_cast<std::size_t>(ea.size())),
                   std::span<const double>(eb.data(), static_cast<std::size_t>(eb.size())));
}

/// Align-corners bilinear resampling to a target size no smaller than the source.
ScoreMap bilinear_upsample(const ScoreMap& map, std::size_t out_h, std::size_t out_w);

/// i.i.d. N(0, sigma^2) draws.
std::vector<double> gaussian_noise(std::size_t count, double sigma, Rng& rng);

bool all_finite(std::span<const double> values);
inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace mpcad
