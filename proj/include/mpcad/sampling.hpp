#pragma once

#include <cstddef>
#include <vector>

#include "mpcad/core.hpp"

namespace mpcad {

/// Number of rows to keep. Selection always starts from row 0.
struct SamplingBudget {
    std::size_t target_count = 196;
};

/// Indices chosen by greedy max-min selection, in selection order. Ties go to the lowest index.
std::vector<std::size_t> farthest_point_indices(const Mat& points, std::size_t target_count);

/// Farthest point sampling: rows of `points` in selection order.
PatchSet fps(const PatchSet& points, SamplingBudget budget);

/// Greedy k-center coreset. Same iteration as fps; its covering radius is within a
/// factor of two of the optimal same-size subset.
PatchSet coreset_select(const PatchSet& points, SamplingBudget budget);

/// max over all_points of the distance to the nearest selected row.
double covering_radius(const PatchSet& selected, const PatchSet& all_points);

}  // namespace mpcad
