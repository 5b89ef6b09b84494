#include "mpcad/sampling.hpp"

#include <cmath>
#include <limits>

namespace mpcad {

std::vector<std::size_t> farthest_point_indices(const Mat& points, std::size_t target_count) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (n == 0) throw DataError("fps: empty point set");
    if (target_count < 1 || target_count > n)
        throw ConfigError("fps: target_count " + std::to_string(target_count) + " outside [1, " +
                          std::to_string(n) + "]");

    // Squared distances compare identically to distances and avoid n sqrt calls per round.
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> chosen;
    chosen.reserve(target_count);
    std::size_t next = 0;
    while (true) {
        chosen.push_back(next);
        min_d2[next] = -1.0;  // never selected twice, even among duplicate rows
        if (chosen.size() == target_count) break;
        const auto pivot = points.row(static_cast<Eigen::Index>(next));
        double best = -1.0;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (min_d2[i] < 0.0) continue;
            const double d2 = (points.row(static_cast<Eigen::Index>(i)) - pivot).squaredNorm();
            if (d2 < min_d2[i]) min_d2[i] = d2;
            if (min_d2[i] > best) {
                best = min_d2[i];
                best_i = i;
            }
        }
        next = best_i;
    }
    return chosen;
}

namespace {

PatchSet gather(const PatchSet& points, const std::vector<std::size_t>& idx) {
    Mat out(static_cast<Eigen::Index>(idx.size()), points.rows().cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
        out.row(static_cast<Eigen::Index>(r)) = points.rows().row(static_cast<Eigen::Index>(idx[r]));
    return PatchSet(std::move(out));
}

}  // namespace

PatchSet fps(const PatchSet& points, SamplingBudget budget) {
    return gather(points, farthest_point_indices(points.rows(), budget.target_count));
}

PatchSet coreset_select(const PatchSet& points, SamplingBudget budget) {
    return gather(points, farthest_point_indices(points.rows(), budget.target_count));
}

double covering_radius(const PatchSet& selected, const PatchSet& all_points) {
    if (selected.count() == 0) throw DataError("covering_radius: empty selection");
    if (selected.channels() != all_points.channels()) throw DataError("covering_radius: channel mismatch");
    double worst = 0.0;
    for (Eigen::Index j = 0; j < all_points.rows().rows(); ++j) {
        const double d2 = (selected.rows().rowwise() - all_points.rows().row(j)).rowwise().squaredNorm().minCoeff();
        worst = std::max(worst, d2);
    }
    return std::sqrt(worst);
}

}  // namespace mpcad
