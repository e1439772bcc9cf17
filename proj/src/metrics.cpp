#include "mose/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mose/error.hpp"
#include "mose/rng.hpp"

namespace mose {

void AccuracyMatrix::ensure_rows(int n) {
    if (tasks <= 0) throw ContractError("accuracy matrix has no task count");
    while (n_rows() < n) rows.emplace_back(tasks, -1.0);
}

void AccuracyMatrix::set(int i, int j, double v) {
    if (i < 0 || j < 0 || j >= tasks)
        throw ContractError("accuracy cell (" + std::to_string(i) + ", " +
                            std::to_string(j) + ") out of range");
    if (v < 0.0 || v > 1.0)
        throw ContractError("accuracy " + std::to_string(v) + " outside [0, 1]");
    ensure_rows(i + 1);
    rows[i][j] = v;
}

bool AccuracyMatrix::present(int i, int j) const {
    return i >= 0 && i < n_rows() && j >= 0 && j < tasks && rows[i][j] >= 0.0;
}

double AccuracyMatrix::at(int i, int j) const {
    if (!present(i, j))
        throw ContractError("accuracy cell (" + std::to_string(i) + ", " +
                            std::to_string(j) + ") is absent");
    return rows[i][j];
}

double average_performance(const AccuracyMatrix& m) {
    if (m.n_rows() == 0) throw ContractError("empty accuracy matrix");
    const int last = m.n_rows() - 1;
    double sum = 0.0;
    for (int j = 0; j < m.tasks; ++j) sum += m.at(last, j);
    return sum / m.tasks;
}

double backward_transfer(const AccuracyMatrix& m) {
    const int T = m.tasks;
    if (T < 2 || m.n_rows() != T)
        throw ContractError("backward transfer needs a completed run over >= 2 tasks");
    double sum = 0.0;
    for (int j = 0; j < T - 1; ++j) sum += m.at(T - 1, j) - m.at(j, j);
    return 100.0 * sum / (T - 1);
}

GrowthReport parameter_growth(const std::vector<BitMask>& per_task_masks) {
    if (per_task_masks.empty()) throw ContractError("no mask snapshots to account");
    const std::size_t len = per_task_masks.front().size();
    GrowthReport g;
    BitMask acc(len);
    for (const BitMask& m : per_task_masks) {
        if (m.size() != len)
            throw ContractError("mask snapshots have inconsistent lengths: " +
                                std::to_string(m.size()) + " vs " + std::to_string(len));
        const long long before = static_cast<long long>(acc.popcount());
        acc.union_with(m);
        const long long pc = static_cast<long long>(m.popcount());
        const long long fresh = static_cast<long long>(acc.popcount()) - before;
        g.per_task.push_back(pc);
        g.union_curve.push_back(static_cast<long long>(acc.popcount()));
        g.overlap.push_back(pc == 0 ? 0.0 : 1.0 - static_cast<double>(fresh) / pc);
    }
    return g;
}

namespace {

// Two decimals, half away from zero; accuracies are nonnegative.
std::string cents(double v) {
    const long long c = std::llround(v * 100.0);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%lld.%02lld", c / 100, c % 100);
    return buf;
}

std::string full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void transfer_matrix_export(const AccuracyMatrix& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "after\\eval";
    for (int j = 0; j < m.tasks; ++j) f << '\t' << j;
    f << '\n';
    for (int i = 0; i < m.n_rows(); ++i) {
        f << i;
        for (int j = 0; j < m.tasks; ++j) {
            f << '\t';
            if (m.present(i, j)) f << cents(m.at(i, j));
        }
        f << '\n';
    }
    if (!f) throw IoError("write failed for " + path);
}

std::string report_run_id(const MetricsReport& r) {
    std::uint64_t h = fnv1a64(r.config_echo);
    h = fnv1a64(&r.seed, sizeof r.seed, h);
    for (const auto& row : r.matrix.rows)
        for (double v : row) h = fnv1a64(&v, sizeof v, h);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void emit_report(const MetricsReport& r, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

    transfer_matrix_export(r.matrix, dir + "/transfer_matrix.txt");

    const std::string run_id = report_run_id(r);
    nlohmann::json j;
    j["run_id"] = run_id;
    j["seed"] = r.seed;
    j["tasks"] = r.matrix.tasks;
    j["avg"] = average_performance(r.matrix);
    if (r.matrix.tasks >= 2 && r.matrix.n_rows() == r.matrix.tasks)
        j["bwt"] = backward_transfer(r.matrix);
    j["params"] = {{"adapter_per_task", r.per_task_params.adapter},
                   {"prompt_per_task", r.per_task_params.prompt},
                   {"key_per_task", r.per_task_params.key},
                   {"total_per_task", r.per_task_params.total()}};
    j["mask_per_task"] = r.growth.per_task;
    j["mask_union_curve"] = r.growth.union_curve;
    j["overlap"] = r.growth.overlap;
    // mask union plus the linearly growing prompt/key parameters
    std::vector<long long> total_curve;
    for (std::size_t t = 0; t < r.growth.union_curve.size(); ++t)
        total_curve.push_back(r.growth.union_curve[t] +
                              static_cast<long long>(t + 1) *
                                  (r.per_task_params.prompt + r.per_task_params.key));
    j["total_curve"] = total_curve;
    if (!r.match_accuracy.empty()) j["match_accuracy"] = r.match_accuracy;
    j["matrix"] = r.matrix.rows;
    j["config"] = r.config_echo;

    std::ofstream sf(dir + "/summary.json");
    if (!sf) throw IoError("cannot open " + dir + "/summary.json for writing");
    sf << j.dump(2) << '\n';
    if (!sf) throw IoError("write failed for " + dir + "/summary.json");

    std::ofstream ef(dir + "/evaluations.tsv");
    if (!ef) throw IoError("cannot open " + dir + "/evaluations.tsv for writing");
    ef << "run_id\ttrained_through\teval_task\taccuracy\n";
    for (int i = 0; i < r.matrix.n_rows(); ++i)
        for (int jx = 0; jx < r.matrix.tasks; ++jx)
            if (r.matrix.present(i, jx))
                ef << run_id << '\t' << i << '\t' << jx << '\t'
                   << full(r.matrix.at(i, jx)) << '\n';
    if (!ef) throw IoError("write failed for " + dir + "/evaluations.tsv");
}

MetricsReport load_report(const std::string& dir) {
    std::ifstream sf(dir + "/summary.json");
    if (!sf) throw IoError("cannot open " + dir + "/summary.json");
    nlohmann::json j;
    try {
        sf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(dir + "/summary.json: " + e.what());
    }
    try {
        MetricsReport r;
        r.seed = j.at("seed").get<std::uint64_t>();
        r.config_echo = j.at("config").get<std::string>();
        r.matrix = AccuracyMatrix(j.at("tasks").get<int>());
        r.matrix.rows = j.at("matrix").get<std::vector<std::vector<double>>>();
        const auto& p = j.at("params");
        r.per_task_params.adapter = p.at("adapter_per_task").get<long long>();
        r.per_task_params.prompt = p.at("prompt_per_task").get<long long>();
        r.per_task_params.key = p.at("key_per_task").get<long long>();
        r.growth.per_task = j.at("mask_per_task").get<std::vector<long long>>();
        r.growth.union_curve = j.at("mask_union_curve").get<std::vector<long long>>();
        r.growth.overlap = j.at("overlap").get<std::vector<double>>();
        if (j.contains("match_accuracy"))
            r.match_accuracy = j.at("match_accuracy").get<std::vector<double>>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(dir + "/summary.json: missing or mistyped field: " + e.what());
    }
}

} // namespace mose
