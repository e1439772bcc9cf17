#pragma once

#include <map>
#include <utility>
#include <vector>

#include "mose/rng.hpp"
#include "mose/tensor.hpp"

namespace mose {

// Per-task prompt rows, one tensor per (task, layer) in the prompted range.
// A task's prompts are only ever optimized while that task trains; afterwards
// they are left untouched, which is what freezes them.
struct PromptPool {
    std::map<std::pair<int, int>, Tensor> prompts;  // (task, layer) -> [L_e x D]
    int prompt_len = 1;   // L_e; 0 disables prompting entirely
    int start_layer = 0;  // prompted layers [start_layer, end_layer], inclusive
    int end_layer = 0;

    bool enabled() const { return prompt_len > 0; }
    bool layer_prompted(int layer) const {
        return enabled() && layer >= start_layer && layer <= end_layer;
    }
};

PromptPool make_prompt_pool(int prompt_len, int start_layer, int end_layer,
                            int n_layers);

// Creates trainable [L_e x D] rows for every prompted layer of task t.
void ensure_task_prompts(PromptPool& pool, int task, int d_model, Rng stream);

// The task's prompt tensors in layer order, for the optimizer.
std::vector<Tensor> task_prompt_params(const PromptPool& pool, int task);

// Prompt rows prepended to x; [L x D] -> [(L_e + L) x D].
Tensor attach_prompt(const PromptPool& pool, int task, int layer, Tensor x);

// One learnable unit-norm key per finished or in-progress task.
struct TaskKeySet {
    std::map<int, Tensor> keys;  // task -> [D]
    int count() const { return static_cast<int>(keys.size()); }
};

// Installs k_t as the normalized mean of the given query rows [B x D].
void init_key_from_queries(TaskKeySet& keys, int task, const Tensor& queries);

// Rescales k_t to unit norm in place (call after every optimizer step).
void renormalize_key(TaskKeySet& keys, int task);

// -(1/B) sum_i cos(q_i, k_t), using only the current task's key. Bounded in
// [-1, 1]; differentiable with respect to the key and the queries.
Tensor pull_loss(const TaskKeySet& keys, int task, Tensor queries);

// task_loss + lambda * pull.
Tensor total_loss(Tensor task_loss, Tensor pull, double lambda_pull);

// argmin over stored keys of (1 - cos(q, k_t)); ties go to the lowest task id.
int match_task(const TaskKeySet& keys, const Tensor& q);

} // namespace mose
