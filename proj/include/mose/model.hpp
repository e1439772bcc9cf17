#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "mose/adapters.hpp"
#include "mose/backbone.hpp"
#include "mose/prompt.hpp"
#include "mose/tasks.hpp"

namespace mose {

// Frozen record of one finished task. Masks live in each site's frozen map,
// prompts and the key stay in the pool/key set and are simply never trained
// again; what must survive here is the head (the live one is rebuilt per
// task) and the bookkeeping stamps.
struct TaskSnapshot {
    int task = -1;
    int n_classes = 0;
    ClassifierHead head;
    double final_loss = 0.0;     // mean total loss over the last epoch
    double self_accuracy = -1.0; // own-test accuracy right after training
};

// Everything the continual learner owns: a frozen backbone, one adapter site
// per (adapted layer, Q/V), per-task prompts and keys, and per-task snapshots.
// Shared adapter tensors keep evolving across tasks; evaluation of a finished
// task applies that task's frozen masks over the live values.
struct ContinualModel {
    BackboneConfig bcfg;
    AdapterConfig acfg;
    std::uint64_t seed = 0;

    FrozenBackbone backbone;
    std::vector<MoSELayerState> sites;  // layer-major, Q before V
    PromptPool pool;
    TaskKeySet keys;
    std::map<int, TaskSnapshot> snapshots;
};

// prompt_end = -1 means the last layer. Layers excluded from adapters are
// excluded from prompting too; the surviving prompt range must stay
// contiguous.
ContinualModel build_model(const BackboneConfig& bc, const AdapterConfig& ac,
                           int prompt_len, int prompt_start, int prompt_end,
                           std::uint64_t seed);

std::vector<SiteShape> model_site_shapes(const ContinualModel& m);
int prompted_layer_count(const ContinualModel& m);
TrainableCount model_trainable_count(const ContinualModel& m);

// Delta and prompt attachments for one task. frozen_masks selects the task's
// stored bitsets (finished-task evaluation) instead of the live score-derived
// masks (training). The hooks borrow the model; keep it alive and unmoved.
LayerHooks make_hooks(ContinualModel& m, int task, bool frozen_masks);

ForwardResult adapted_forward(ContinualModel& m, const std::vector<int>& tokens,
                              int task, const ClassifierHead* head,
                              bool frozen_masks);

struct InferenceResult {
    int predicted = -1;
    int task = -1;  // the id routed to (given in TIL, matched in TaIL)
    std::vector<double> logits;
};

// til_task >= 0: task-aware path, must name a finished task. til_task = -1:
// task-agnostic path, the query feature picks the nearest stored key. Runs
// without gradient tracking.
InferenceResult infer(ContinualModel& m, const std::vector<int>& tokens,
                      int til_task = -1);

// Fraction of the task's test split classified correctly.
double evaluate_task(ContinualModel& m, const SyntheticTask& t, bool tail);

// Fraction of the task's test split whose query matches the right key.
double match_accuracy(const ContinualModel& m, const SyntheticTask& t);

// All of one task's frozen site masks glued end to end, for growth
// accounting. Maskless adapter families yield an empty bitset.
BitMask task_combined_mask(const ContinualModel& m, int task);

} // namespace mose
