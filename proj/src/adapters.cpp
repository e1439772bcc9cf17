#include "mose/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mose {

const char* adapter_kind_name(AdapterKind k) {
    switch (k) {
        case AdapterKind::MoSE: return "mose";
        case AdapterKind::LoRA: return "lora";
        case AdapterKind::MoE:  return "moe";
    }
    return "?";
}

void validate_adapter_config(const AdapterConfig& cfg, int n_layers) {
    if (cfg.rank < 1)
        throw ConfigError("adapter.rank must be >= 1, got " + std::to_string(cfg.rank));
    if (cfg.kind != AdapterKind::LoRA) {
        if (cfg.n_experts < 1)
            throw ConfigError("adapter.experts must be >= 1, got " +
                              std::to_string(cfg.n_experts));
        if (cfg.top_k < 1 || cfg.top_k > cfg.n_experts)
            throw ConfigError("adapter.top_k must lie in [1, experts], got " +
                              std::to_string(cfg.top_k));
    }
    if (cfg.kind == AdapterKind::MoSE) {
        if (cfg.density <= 0.0 || cfg.density > 1.0)
            throw ConfigError("adapter.density must lie in (0, 1], got " +
                              std::to_string(cfg.density));
    }
    const bool has_excl = cfg.exclude_lo >= 0 || cfg.exclude_hi >= 0;
    if (has_excl) {
        if (cfg.exclude_lo < 0 || cfg.exclude_hi < cfg.exclude_lo ||
            cfg.exclude_hi >= n_layers)
            throw ConfigError("adapter.exclude range [" + std::to_string(cfg.exclude_lo) +
                              ", " + std::to_string(cfg.exclude_hi) +
                              "] must lie within [0, " + std::to_string(n_layers) + ")");
        if (cfg.exclude_lo == 0 && cfg.exclude_hi == n_layers - 1)
            throw ConfigError("adapter.exclude removes every layer");
    }
}

bool layer_adapted(const AdapterConfig& cfg, int layer) {
    if (cfg.exclude_lo < 0) return true;
    return layer < cfg.exclude_lo || layer > cfg.exclude_hi;
}

long long mask_quota(double density, long long n) {
    return std::max(1ll, std::llround(density * static_cast<double>(n)));
}

ScoreMask make_score_mask(const Tensor& target, double density, Rng stream) {
    if (density <= 0.0 || density > 1.0)
        throw ConfigError("mask density must lie in (0, 1], got " + std::to_string(density));
    std::vector<double> s(target.size());
    for (auto& v : s) v = stream.uniform();
    ScoreMask sm;
    sm.scores = Tensor::from(target.shape(), std::move(s), true);
    sm.density = density;
    sm.target_len = target.size();
    return sm;
}

const BitMask& derive_mask(ScoreMask& sm) {
    if (sm.density <= 0.0 || sm.density > 1.0)
        throw ConfigError("mask density must lie in (0, 1], got " + std::to_string(sm.density));
    if (sm.target_len < 1 || sm.scores.size() != sm.target_len)
        throw ContractError("derive_mask: score tensor does not match target length");
    const long long k = mask_quota(sm.density, static_cast<long long>(sm.target_len));
    std::vector<int> top = topk_indices(sm.scores.data(), static_cast<int>(k));
    BitMask m(sm.target_len);
    for (int i : top) m.set(static_cast<std::size_t>(i), true);
    sm.mask = std::move(m);
    sm.derived = true;
    sm.derived_version = sm.scores.version();
    return sm.mask;
}

Tensor masked_linear(Tensor x, Tensor w, const ScoreMask& sm) {
    if (!sm.derived)
        throw ContractError("masked_linear: mask has not been derived");
    if (sm.scores.version() != sm.derived_version)
        throw ContractError("masked_linear: mask is stale, scores changed since derive");
    if (sm.mask.size() != w.size())
        throw DimensionError("masked_linear: mask covers " + std::to_string(sm.mask.size()) +
                             " entries, weight has " + std::to_string(w.size()));
    return matmul(x, transpose(masked_weight(w, sm.scores, sm.mask)));
}

namespace {

Tensor expert_path(LowRankSubExpert& ex, Tensor x, bool masked,
                   const BitMask* frozen_a, const BitMask* frozen_b) {
    Tensor h;
    if (frozen_a) {
        h = matmul(x, transpose(masked_weight(ex.A, *frozen_a)));
        h = matmul(h, transpose(masked_weight(ex.B, *frozen_b)));
    } else if (masked) {
        h = masked_linear(x, ex.A, ex.mask_a);
        h = masked_linear(h, ex.B, ex.mask_b);
    } else {
        h = matmul(x, transpose(ex.A));
        h = matmul(h, transpose(ex.B));
    }
    return h;
}

// Shared routed-sum skeleton. `logits` is [n x N]; selection happens on the
// softmax values per row with ties to the lowest index.
Tensor routed_sum(std::vector<LowRankSubExpert>& experts, Tensor x, Tensor logits,
                  int top_k, double beta, bool masked,
                  const SiteMaskSet* frozen) {
    const int n = x.rows();
    const int n_experts = static_cast<int>(experts.size());
    if (top_k < 1 || top_k > n_experts)
        throw ConfigError("router top_k must lie in [1, " + std::to_string(n_experts) +
                          "], got " + std::to_string(top_k));

    Tensor p = softmax(logits);
    std::vector<std::vector<int>> sel(n);
    {
        std::vector<double> row(n_experts);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n_experts; ++j) row[j] = p.at(i, j);
            sel[i] = topk_indices(row, top_k);
        }
    }
    Tensor gates = topk_renorm(p, sel);  // [n x top_k]

    const int d_out = experts[0].B.rows();
    Tensor acc;
    for (int j = 0; j < n_experts; ++j) {
        std::vector<int> rows;
        std::vector<std::pair<int, int>> gate_at;
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < top_k; ++k)
                if (sel[i][k] == j) {
                    rows.push_back(i);
                    gate_at.emplace_back(i, k);
                }
        if (rows.empty()) continue;
        Tensor sub = gather_rows(x, rows);
        const BitMask* fa = frozen ? &frozen->a[j] : nullptr;
        const BitMask* fb = frozen ? &frozen->b[j] : nullptr;
        Tensor y = expert_path(experts[j], sub, masked, fa, fb);
        y = row_scale(y, gather_entries(gates, gate_at));
        Tensor placed = scatter_rows(y, rows, n);
        acc = acc.valid() ? add(acc, placed) : placed;
    }
    if (!acc.valid()) acc = Tensor::zeros({n, d_out});
    return scale(acc, beta);
}

} // namespace

MoSELayerState make_adapter_state(const AdapterConfig& cfg, int layer, int proj,
                                  int d_in, int d_out, Rng stream) {
    MoSELayerState st;
    st.kind = cfg.kind;
    st.alpha = cfg.alpha;
    st.beta = cfg.alpha / cfg.rank;
    st.layer = layer;
    st.proj = proj;

    const int n = (cfg.kind == AdapterKind::LoRA) ? 1 : cfg.n_experts;
    const double a_std = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (int j = 0; j < n; ++j) {
        LowRankSubExpert ex;
        ex.rank = cfg.rank;
        Rng ar = stream.stream("expert" + std::to_string(j) + "/A");
        std::vector<double> a(static_cast<std::size_t>(cfg.rank) * d_in);
        for (auto& v : a) v = ar.normal(0.0, a_std);
        ex.A = Tensor::from({cfg.rank, d_in}, std::move(a), true);
        ex.B = Tensor::zeros({d_out, cfg.rank}, true);
        if (cfg.kind == AdapterKind::MoSE) {
            ex.mask_a = make_score_mask(ex.A, cfg.density,
                                        stream.stream("scores/A" + std::to_string(j)));
            ex.mask_b = make_score_mask(ex.B, cfg.density,
                                        stream.stream("scores/B" + std::to_string(j)));
        }
        st.experts.push_back(std::move(ex));
    }

    if (cfg.kind != AdapterKind::LoRA) {
        Rng rr = stream.stream("router");
        std::vector<double> w(static_cast<std::size_t>(n) * d_in);
        for (auto& v : w) v = rr.normal(0.0, a_std);
        st.router.W_r = Tensor::from({n, d_in}, std::move(w), true);
        st.router.top_k = cfg.top_k;
        if (cfg.kind == AdapterKind::MoSE) {
            Tensor row_like = Tensor::zeros({1, d_in});
            for (int j = 0; j < n; ++j)
                st.router.row_masks.push_back(make_score_mask(
                    row_like, cfg.density, stream.stream("scores/router" + std::to_string(j))));
        }
    }
    return st;
}

void derive_all_masks(MoSELayerState& st) {
    if (st.kind != AdapterKind::MoSE) return;
    for (auto& ex : st.experts) {
        derive_mask(ex.mask_a);
        derive_mask(ex.mask_b);
    }
    for (auto& rm : st.router.row_masks) derive_mask(rm);
}

namespace {

// Router weight with per-row masks applied; plain W_r when no masks exist.
Tensor effective_router(const SparseRouter& router, const SiteMaskSet* frozen) {
    if (router.row_masks.empty() && !frozen) return router.W_r;
    const int n = router.W_r.rows();
    std::vector<Tensor> rows;
    rows.reserve(n);
    Tensor w = router.W_r;
    for (int j = 0; j < n; ++j) {
        Tensor row = slice_rows(w, j, j + 1);
        if (frozen) {
            rows.push_back(masked_weight(row, frozen->router_rows[j]));
        } else {
            const ScoreMask& sm = router.row_masks[j];
            if (!sm.derived)
                throw ContractError("route: router mask has not been derived");
            if (sm.scores.version() != sm.derived_version)
                throw ContractError("route: router mask is stale");
            rows.push_back(masked_weight(row, sm.scores, sm.mask));
        }
    }
    return concat_rows(rows);
}

} // namespace

std::pair<std::vector<int>, std::vector<double>> route(const SparseRouter& router,
                                                       const Tensor& x) {
    if (!router.W_r.valid())
        throw ContractError("route: router has no weights");
    const int n = router.W_r.rows();
    if (router.top_k < 1 || router.top_k > n)
        throw ConfigError("router top_k must lie in [1, " + std::to_string(n) + "], got " +
                          std::to_string(router.top_k));
    NoGradGuard ng;
    Tensor xr = (x.rank() == 2) ? x : concat_rows({x});
    if (xr.rows() != 1)
        throw DimensionError("route: expected a single input row, got " +
                             shape_str(x.shape()));
    Tensor w_eff = effective_router(router, nullptr);
    Tensor p = softmax(matmul(xr, transpose(w_eff)));
    std::vector<int> sel = topk_indices(p.data(), router.top_k);
    double s = 0.0;
    for (int j : sel) s += p.data()[j];
    std::vector<double> gates;
    gates.reserve(sel.size());
    for (int j : sel) gates.push_back(p.data()[j] / s);
    return {std::move(sel), std::move(gates)};
}

Tensor mose_forward(MoSELayerState& st, Tensor x, const SiteMaskSet* frozen) {
    if (st.experts.empty() || !st.router.W_r.valid())
        throw ContractError("mose_forward: site has no experts or router");
    if (!frozen && st.router.row_masks.empty())
        throw ContractError("mose_forward: site has no masks; use moe_forward");
    Tensor w_eff = effective_router(st.router, frozen);
    Tensor logits = matmul(x, transpose(w_eff));
    return routed_sum(st.experts, x, logits, st.router.top_k, st.beta,
                      /*masked=*/frozen == nullptr, frozen);
}

Tensor lora_forward(Tensor A, Tensor B, double beta, Tensor x) {
    return scale(matmul(matmul(x, transpose(A)), transpose(B)), beta);
}

Tensor moe_forward(std::vector<LowRankSubExpert>& experts, Tensor w_r, int top_k,
                   Tensor x, double beta) {
    if (experts.empty() || !w_r.valid())
        throw ContractError("moe_forward: missing experts or router");
    Tensor logits = matmul(x, transpose(w_r));
    return routed_sum(experts, x, logits, top_k, beta, /*masked=*/false, nullptr);
}

Tensor site_forward(MoSELayerState& st, Tensor x, const SiteMaskSet* frozen) {
    switch (st.kind) {
        case AdapterKind::LoRA:
            return lora_forward(st.experts[0].A, st.experts[0].B, st.beta, x);
        case AdapterKind::MoE:
            return moe_forward(st.experts, st.router.W_r, st.router.top_k, x, st.beta);
        case AdapterKind::MoSE:
            return mose_forward(st, x, frozen);
    }
    throw ContractError("site_forward: unknown adapter kind");
}

const SiteMaskSet& snapshot_masks(MoSELayerState& st, int task_id) {
    if (st.kind != AdapterKind::MoSE)
        throw ContractError("snapshot_masks: site carries no masks");
    if (st.frozen.count(task_id))
        throw ContractError("snapshot_masks: task " + std::to_string(task_id) +
                            " already has a stored mask set");
    SiteMaskSet set;
    for (auto& ex : st.experts) {
        if (!ex.mask_a.derived || !ex.mask_b.derived)
            throw ContractError("snapshot_masks: masks have not been derived");
        set.a.push_back(ex.mask_a.mask);
        set.b.push_back(ex.mask_b.mask);
    }
    for (auto& rm : st.router.row_masks) {
        if (!rm.derived)
            throw ContractError("snapshot_masks: router mask has not been derived");
        set.router_rows.push_back(rm.mask);
    }
    return st.frozen.emplace(task_id, std::move(set)).first->second;
}

BitMask router_combined_mask(const MoSELayerState& st) {
    const int n = st.router.W_r.rows();
    const int d = st.router.W_r.cols();
    BitMask out(static_cast<std::size_t>(n) * d);
    for (int j = 0; j < n; ++j) {
        const BitMask& row = st.router.row_masks[j].mask;
        for (int i = 0; i < d; ++i)
            if (row.get(static_cast<std::size_t>(i)))
                out.set(static_cast<std::size_t>(j) * d + i, true);
    }
    return out;
}

std::size_t SiteMaskSet::popcount() const {
    std::size_t s = 0;
    for (const auto& m : a) s += m.popcount();
    for (const auto& m : b) s += m.popcount();
    for (const auto& m : router_rows) s += m.popcount();
    return s;
}

BitMask SiteMaskSet::flattened() const {
    std::size_t total = 0;
    for (const auto& m : a) total += m.size();
    for (const auto& m : b) total += m.size();
    for (const auto& m : router_rows) total += m.size();
    BitMask out(total);
    std::size_t off = 0;
    auto emit = [&](const BitMask& m) {
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m.get(i)) out.set(off + i, true);
        off += m.size();
    };
    for (const auto& m : a) emit(m);
    for (const auto& m : b) emit(m);
    for (const auto& m : router_rows) emit(m);
    return out;
}

TrainableCount count_trainable(const AdapterConfig& cfg,
                               const std::vector<SiteShape>& sites,
                               int prompt_len, int d_model, int prompted_layers) {
    TrainableCount out;
    for (const SiteShape& s : sites) {
        const long long din = s.d_in, dout = s.d_out, r = cfg.rank;
        switch (cfg.kind) {
            case AdapterKind::LoRA:
                out.adapter += r * (din + dout);
                break;
            case AdapterKind::MoE:
                out.adapter += cfg.n_experts * r * (din + dout) + cfg.n_experts * din;
                break;
            case AdapterKind::MoSE: {
                const long long per_expert = mask_quota(cfg.density, r * din) +
                                             mask_quota(cfg.density, dout * r);
                out.adapter += cfg.n_experts * per_expert +
                               cfg.n_experts * mask_quota(cfg.density, din);
                break;
            }
        }
    }
    out.prompt = static_cast<long long>(prompt_len) * d_model * prompted_layers;
    out.key = d_model;
    return out;
}

} // namespace mose
