#pragma once

#include <map>
#include <utility>
#include <vector>

#include "mose/bitmask.hpp"
#include "mose/ops.hpp"
#include "mose/rng.hpp"
#include "mose/tensor.hpp"

namespace mose {

enum class AdapterKind { MoSE, LoRA, MoE };

const char* adapter_kind_name(AdapterKind k);

// Which layers carry adapters is "all except [exclude_lo, exclude_hi]"
// (inclusive); -1/-1 means no exclusion.
struct AdapterConfig {
    AdapterKind kind = AdapterKind::MoSE;
    int n_experts = 2;     // N
    int top_k = 2;         // K
    double density = 0.3;  // c, fraction of entries kept by each mask
    int rank = 2;          // r
    double alpha = 8.0;
    int exclude_lo = -1;
    int exclude_hi = -1;
};

void validate_adapter_config(const AdapterConfig& cfg, int n_layers);
bool layer_adapted(const AdapterConfig& cfg, int layer);

// Number of mask bits kept for a tensor of n entries at density c.
long long mask_quota(double density, long long n);

// Learnable score tensor plus the binary mask currently derived from it.
// The mask is a pure function of the scores; consumers must re-derive after
// any score mutation or masked_linear refuses to run.
struct ScoreMask {
    Tensor scores;               // same shape as the masked target
    double density = 1.0;        // c
    BitMask mask;
    std::size_t target_len = 0;
    std::uint64_t derived_version = 0;
    bool derived = false;
};

ScoreMask make_score_mask(const Tensor& target, double density, Rng stream);

// Selects the max(1, round(c*n)) highest-scoring entries, ties to the lowest
// index. Stores and returns the mask.
const BitMask& derive_mask(ScoreMask& sm);

// y = x * (w elementwise-masked)^T with w stored [d_out x d_in]. Weight grads
// are zero at masked-out entries; score grads follow the straight-through
// rule (g * w everywhere) so dropped entries can climb back into the mask.
Tensor masked_linear(Tensor x, Tensor w, const ScoreMask& sm);

struct LowRankSubExpert {
    Tensor A;  // [r x d_in]
    Tensor B;  // [d_out x r], zero at creation so the initial delta vanishes
    int rank = 0;
    ScoreMask mask_a, mask_b;  // present only under MoSE
};

struct SparseRouter {
    Tensor W_r;                        // [N x d_in]
    std::vector<ScoreMask> row_masks;  // one mask per expert row under MoSE
    int top_k = 1;
};

// Frozen copy of one site's masks at a task boundary.
struct SiteMaskSet {
    std::vector<BitMask> a, b, router_rows;

    std::size_t popcount() const;
    // All bitsets glued end to end (a..., b..., router rows...) in a fixed
    // order, for cross-task union accounting.
    BitMask flattened() const;
};

// One adapted projection site. All three adapter families share this record:
// LoRA uses a single expert and no router, MoE skips the masks.
struct MoSELayerState {
    AdapterKind kind = AdapterKind::MoSE;
    std::vector<LowRankSubExpert> experts;
    SparseRouter router;
    double alpha = 1.0;
    double beta = 1.0;  // always alpha / rank
    int layer = 0;
    int proj = 0;  // 0 = Q, 1 = V
    std::map<int, SiteMaskSet> frozen;
};

MoSELayerState make_adapter_state(const AdapterConfig& cfg, int layer, int proj,
                                  int d_in, int d_out, Rng stream);

// Derives every live mask at the site (no-op for LoRA/MoE).
void derive_all_masks(MoSELayerState& st);

// Masked routing for one input row: p = softmax((W_r masked) x) over all N,
// then the top-K of p with gates renormalized to sum to 1. Ties go to the
// lowest expert index. Rows without masks route densely.
std::pair<std::vector<int>, std::vector<double>> route(const SparseRouter& router,
                                                       const Tensor& x);

// beta * sum over each row's selected experts of gate_j * (B_j masked)(A_j masked) x.
// Only selected experts are evaluated. When `frozen` is given its bitsets
// replace the live masks and scores drop out of the graph.
Tensor mose_forward(MoSELayerState& st, Tensor x, const SiteMaskSet* frozen = nullptr);

Tensor lora_forward(Tensor A, Tensor B, double beta, Tensor x);

// Dense top-K routed sum over unmasked experts; same routing conventions as
// route().
Tensor moe_forward(std::vector<LowRankSubExpert>& experts, Tensor w_r, int top_k,
                   Tensor x, double beta = 1.0);

// Dispatches to the site's family. `frozen` only applies to MoSE.
Tensor site_forward(MoSELayerState& st, Tensor x, const SiteMaskSet* frozen = nullptr);

// Copies the current masks into the per-task frozen map. The stored bitsets
// never change afterwards.
const SiteMaskSet& snapshot_masks(MoSELayerState& st, int task_id);

// Concatenation of the per-row router masks in row order, as an optimizer
// activity mask over the whole W_r tensor.
BitMask router_combined_mask(const MoSELayerState& st);

struct SiteShape {
    int d_in = 0, d_out = 0;
};

struct TrainableCount {
    long long adapter = 0;  // per-task adapter parameters (mask bits for MoSE)
    long long prompt = 0;
    long long key = 0;
    long long total() const { return adapter + prompt + key; }
};

// Per-task trainable-parameter arithmetic over the adapted sites (already
// filtered by any layer exclusion). Counts only; no tensors are touched.
TrainableCount count_trainable(const AdapterConfig& cfg,
                               const std::vector<SiteShape>& sites,
                               int prompt_len, int d_model, int prompted_layers);

} // namespace mose
