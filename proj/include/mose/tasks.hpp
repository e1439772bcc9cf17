#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mose {

struct Example {
    std::vector<int> tokens;
    int label = 0;
    bool operator==(const Example&) const = default;
};

// One sequence-classification task over a small token vocabulary. Marker
// tokens carry the label signal; everything else is filler.
struct SyntheticTask {
    int id = 0;
    int n_classes = 0;
    int rule = 0;  // 0 parity-of-count, 1 majority sub-class, 2 first-marker bucket
    int marker_lo = 0, marker_hi = 0;  // this task's private marker block [lo, hi)
    std::vector<Example> train, test;
    bool operator==(const SyntheticTask&) const = default;
};

struct SuiteConfig {
    int n_tasks = 5;
    int train_per_task = 500;
    int test_per_task = 100;
    int seq_len = 16;
    double sigma = 0.2;  // chance a marker draw comes from the shared pool
    int vocab_size = 64;
    std::uint64_t seed = 0;
};

// Vocabulary layout: [0, 6) shared markers, then 6 private markers per task,
// then at least 8 filler tokens.
inline constexpr int kSharedMarkers = 6;
inline constexpr int kMarkersPerTask = 6;
inline constexpr int kMinFillers = 8;

inline int marker_block_lo(int task) { return kSharedMarkers + kMarkersPerTask * task; }
inline int filler_lo(int n_tasks) { return kSharedMarkers + kMarkersPerTask * n_tasks; }

int rule_for_task(int task);       // cycles parity, majority, bucket
int classes_for_rule(int rule);    // 2, 3, 4

void validate_suite_config(const SuiteConfig& cfg);

// Deterministic in cfg; splits are disjoint and class-balanced within one.
std::vector<SyntheticTask> generate_suite(const SuiteConfig& cfg);

// One text file per task ("task<N>.txt"): a header "id C n_train n_test rule",
// then one example per line as space-separated token ids, a tab, the label.
void export_suite(const std::vector<SyntheticTask>& tasks, const std::string& dir);
std::vector<SyntheticTask> import_suite(const std::string& dir);

} // namespace mose
