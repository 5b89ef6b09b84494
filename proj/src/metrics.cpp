#include "mpcad/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <utility>

#include "mpcad/core.hpp"

namespace mpcad {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DataError("metric: scores and labels differ in length");
    for (int l : labels)
        if (l != 0 && l != 1) throw DataError("metric: labels must be 0 or 1");
}

std::vector<std::size_t> order_descending(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    const double neg = static_cast<double>(labels.size()) - pos;
    if (pos == 0 || neg == 0) throw DataError("undefined AUROC");

    // Ascending ranks with ties averaged.
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t)
            if (labels[idx[t]] == 1) rank_sum += avg_rank;
        i = j + 1;
    }
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

namespace {

template <class At>
double average_precision(std::size_t n, double pos, At at) {
    double tp = 0.0, seen = 0.0, ap = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        double group_tp = 0.0;
        const double s = at(i).first;
        while (j < n && at(j).first == s) {
            group_tp += at(j).second;
            ++j;
        }
        tp += group_tp;
        seen += static_cast<double>(j - i);
        if (group_tp > 0) ap += (group_tp / pos) * (tp / seen);
        i = j;
    }
    return ap;
}

double count_positives(std::span<const int> labels) {
    const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    if (pos == 0) throw DataError("undefined AUPR: no positive labels");
    return pos;
}

}  // namespace

double aupr(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    const double pos = count_positives(labels);
    const auto idx = order_descending(scores);
    return average_precision(idx.size(), pos, [&](std::size_t i) {
        return std::pair<double, int>{scores[idx[i]], labels[idx[i]]};
    });
}

double aupr_presorted(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[i - 1]) throw DataError("aupr_presorted: scores are not in non-increasing order");
    const double pos = count_positives(labels);
    return average_precision(scores.size(), pos, [&](std::size_t i) {
        return std::pair<double, int>{scores[i], labels[i]};
    });
}

EvalMatrix::EvalMatrix(std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) add_stage();
}

void EvalMatrix::add_stage() { cells_.emplace_back(cells_.size() + 1); }

void EvalMatrix::set(std::size_t stage, std::size_t task, double value) {
    if (stage >= k() || task > stage) throw DataError("EvalMatrix: entry outside the lower triangle");
    if (!(value >= 0.0 && value <= 1.0)) throw DataError("EvalMatrix: entries must lie in [0,1]");
    cells_[stage][task] = value;
}

std::optional<double> EvalMatrix::get(std::size_t stage, std::size_t task) const {
    if (stage >= k() || task > stage) return std::nullopt;
    return cells_[stage][task];
}

double forgetting_measure(const EvalMatrix& t) {
    const std::size_t k = t.k();
    if (k < 2) throw DataError("forgetting measure needs at least two stages");
    double total = 0.0;
    for (std::size_t j = 0; j + 1 < k; ++j) {
        const auto final_value = t.get(k - 1, j);
        if (!final_value) throw DataError("forgetting measure: missing entry for final stage");
        double best = *final_value;
        for (std::size_t l = j; l + 1 < k; ++l) {
            const auto v = t.get(l, j);
            if (!v) throw DataError("forgetting measure: missing entry (" + std::to_string(l) + "," +
                                    std::to_string(j) + ")");
            best = std::max(best, *v);
        }
        total += best - *final_value;
    }
    return total / static_cast<double>(k - 1);
}

void write_results_table(std::ostream& out, const std::vector<TaskResult>& rows, std::optional<double> fm_auroc,
                         std::optional<double> fm_aupr) {
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    out << "task\timage_auroc\tpixel_aupr\n";
    double sa = 0.0, sp = 0.0;
    for (const auto& r : rows) {
        out << r.task << '\t' << fmt(r.image_auroc) << '\t' << fmt(r.pixel_aupr) << '\n';
        sa += r.image_auroc;
        sp += r.pixel_aupr;
    }
    const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
    out << "average\t" << fmt(sa / n) << '\t' << fmt(sp / n) << '\n';
    out << "avg_fm\t" << (fm_auroc ? fmt(*fm_auroc) : "n/a") << '\t' << (fm_aupr ? fmt(*fm_aupr) : "n/a") << '\n';
}

}  // namespace mpcad
