#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mose/metrics.hpp"
#include "mose/model.hpp"
#include "mose/rng.hpp"

namespace mose {

enum class OptimizerKind { Adam, Sgd };
enum class TrainMode { Sequential, Joint };
enum class EvalMode { TIL, TaIL };

const char* optimizer_kind_name(OptimizerKind k);
const char* train_mode_name(TrainMode m);
const char* eval_mode_name(EvalMode m);

struct TrainConfig {
    AdapterConfig adapter;
    double lambda_pull = 0.1;
    int epochs = 4;
    int batch_size = 16;
    double lr = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double clip_norm = 1.0;  // global gradient norm; 0 disables clipping
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::Sequential;
    EvalMode eval = EvalMode::TIL;
};

void validate_train_config(const TrainConfig& cfg);

// Per-entry first/second-moment optimizer (or plain SGD) with optional
// activity masks. An inactive entry is not stepped and its moments and step
// count stay put; without this, moments earned while an entry was selected
// would keep moving it after it drops out of the mask, breaking isolation.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr, double clip_norm);

    // mask() is polled every step; an empty function means always dense.
    void add(Tensor p, std::function<BitMask()> mask = {});
    void zero_grad();
    void step();

private:
    struct Slot {
        Tensor p;
        std::function<BitMask()> mask;
        std::vector<double> m1, m2;
        std::vector<long long> k;
    };
    OptimizerKind kind_;
    double lr_, clip_;
    std::vector<Slot> slots_;
};

struct StepLog {
    int task = 0, epoch = 0, step = 0;
    double l_task = 0.0, l_pull = 0.0, l_total = 0.0;
};

// Test instrumentation for isolation and growth experiments.
struct TrainHooks {
    // Runs before the task's first batch; may overwrite score tensors (masks
    // are re-derived right after).
    std::function<void(ContinualModel&, int)> after_reinit;
    bool freeze_scores = false;    // keep scores (hence masks) fixed all task
    bool verify_isolation = false; // assert masked-out entries never move
};

// Invoked after each task finishes and its accuracy row is recorded; the
// matrix argument holds every row filled so far. Used for boundary
// checkpointing.
using TaskCallback = std::function<void(int task, const AccuracyMatrix&)>;

struct RunResult {
    AccuracyMatrix matrix;
    std::vector<StepLog> logs;
    std::vector<double> match_accuracy;  // per task, after the final task
    GrowthReport growth;                 // masked families only
};

// Redraws every score tensor at the site from the stream: experts in index
// order (A then B), then router rows. Masks are left stale on purpose; the
// caller re-derives.
void reinit_site_scores(MoSELayerState& site, Rng stream);

// Per-task accuracy of a jointly trained model: the single combined head is
// evaluated with the argmax restricted to each task's label slice.
AccuracyMatrix joint_eval(ContinualModel& m, const std::vector<SyntheticTask>& suite);

// Drives one model through a task sequence: fresh scores, prompts, key and
// head per task, per-batch mask derivation, masked optimizer steps, and a
// frozen snapshot at each task boundary.
class Trainer {
public:
    Trainer(ContinualModel& m, const TrainConfig& cfg);

    // Once before each task, never mid-task. Also resets optimizer moments
    // (each task gets a fresh optimizer).
    void reinit_scores(int task);

    TaskSnapshot& train_task(const SyntheticTask& task, const TrainHooks* hooks = nullptr);

    // Sequential mode: trains every task in order and fills the lower
    // triangle of the accuracy matrix in the configured eval mode.
    RunResult run_sequence(const std::vector<SyntheticTask>& suite,
                           const TrainHooks* hooks = nullptr,
                           const TaskCallback& after_task = {});

    // Joint mode: one combined head over the label union, single shuffled
    // training pass, one matrix row. Task identity is used at evaluation to
    // select the label slice.
    RunResult run_joint(const std::vector<SyntheticTask>& suite);

    // Continues a restored run: tasks [first_task, T) only, reusing matrix
    // rows already filled.
    RunResult resume_sequence(const std::vector<SyntheticTask>& suite, int first_task,
                              AccuracyMatrix done_rows,
                              const TaskCallback& after_task = {});

    const std::vector<StepLog>& logs() const { return logs_; }

private:
    RunResult finish_sequence(const std::vector<SyntheticTask>& suite,
                              AccuracyMatrix matrix, int first_task,
                              const TrainHooks* hooks, const TaskCallback& after_task);

    ContinualModel& m_;
    TrainConfig cfg_;
    Rng root_;
    std::vector<StepLog> logs_;
    int last_reinit_ = -1;
    bool in_task_ = false;
    int next_task_ = 0;
};

} // namespace mose
