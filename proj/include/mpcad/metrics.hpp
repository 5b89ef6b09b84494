#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mpcad {

/// Mann-Whitney AUROC with half credit for ties. Throws DataError("undefined AUROC")
/// when only one class is present.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Average precision with step interpolation over distinct score thresholds.
/// Throws DataError when there are no positives.
double aupr(std::span<const double> scores, std::span<const int> labels);

/// aupr for scores already in non-increasing order (same arithmetic, no sort).
double aupr_presorted(std::span<const double> scores, std::span<const int> labels);

/// k x k lower-triangular matrix; entry (stage, task) is the metric for `task`
/// measured after training stage `stage`. Indices are zero-based.
class EvalMatrix {
public:
    explicit EvalMatrix(std::size_t k = 0);

    std::size_t k() const { return cells_.size(); }
    void set(std::size_t stage, std::size_t task, double value);
    std::optional<double> get(std::size_t stage, std::size_t task) const;
    /// Grows to k+1 stages, keeping existing entries.
    void add_stage();

    bool operator==(const EvalMatrix&) const = default;

private:
    std::vector<std::vector<std::optional<double>>> cells_;
};

/// Mean over tasks j < k of (best earlier-or-final value of task j) - (final value of task j).
/// Needs k >= 2 and every lower-triangular entry.
double forgetting_measure(const EvalMatrix& t);

struct TaskResult {
    std::string task;
    double image_auroc = 0.0;
    double pixel_aupr = 0.0;
};

/// Tab-separated table: header, one row per task, then "average" and "avg_fm" rows.
/// FM values are printed as n/a when absent.
void write_results_table(std::ostream& out, const std::vector<TaskResult>& rows, std::optional<double> fm_auroc,
                         std::optional<double> fm_aupr);

}  // namespace mpcad
