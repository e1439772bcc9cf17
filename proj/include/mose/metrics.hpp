#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mose/adapters.hpp"
#include "mose/bitmask.hpp"

namespace mose {

// Accuracy grid: rows are "after training task i", columns are "evaluated on
// task j". Sequential runs fill the lower triangle; a joint run fills one row.
// Absent cells are kept as -1.
struct AccuracyMatrix {
    int tasks = 0;
    std::vector<std::vector<double>> rows;

    explicit AccuracyMatrix(int n_tasks = 0) : tasks(n_tasks) {}

    int n_rows() const { return static_cast<int>(rows.size()); }
    void ensure_rows(int n);
    void set(int i, int j, double v);
    bool present(int i, int j) const;
    double at(int i, int j) const;

    bool operator==(const AccuracyMatrix&) const = default;
};

// Mean of the final row; every column must be filled.
double average_performance(const AccuracyMatrix& m);

// 100/(T-1) * sum_{j<T-1} (A[last][j] - A[j][j]). Needs a square run with
// the diagonal and the final row complete, T >= 2.
double backward_transfer(const AccuracyMatrix& m);

// Mask-parameter reuse accounting across a task sequence. Linear components
// (prompts, keys, heads) are added by the report layer, not here.
struct GrowthReport {
    std::vector<long long> per_task;    // popcount of each task's combined mask
    std::vector<long long> union_curve; // cumulative union popcount
    std::vector<double> overlap;        // 1 - new_bits_t / per_task_t
};

// One combined bitset per task, all the same length (0-length allowed for
// maskless adapter families).
GrowthReport parameter_growth(const std::vector<BitMask>& per_task_masks);

// Tab-separated grid, two decimals rounded half away from zero, absent cells
// empty.
void transfer_matrix_export(const AccuracyMatrix& m, const std::string& path);

struct MetricsReport {
    AccuracyMatrix matrix;
    GrowthReport growth;
    TrainableCount per_task_params;
    std::string config_echo;
    std::uint64_t seed = 0;
    std::vector<double> match_accuracy;  // per task, only for key-matched runs
};

// run_id is a content hash, so re-emitting the same report is byte-stable.
std::string report_run_id(const MetricsReport& r);

// Writes exactly three files into dir: transfer_matrix.txt, summary.json,
// evaluations.tsv.
void emit_report(const MetricsReport& r, const std::string& dir);

// Rebuilds a report from a directory written by emit_report.
MetricsReport load_report(const std::string& dir);

} // namespace mose
