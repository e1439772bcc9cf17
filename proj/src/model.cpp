#include "mose/model.hpp"

#include <string>

#include "mose/error.hpp"
#include "mose/ops.hpp"

namespace mose {

namespace {

bool excluded(const AdapterConfig& ac, int layer) {
    return ac.exclude_lo >= 0 && layer >= ac.exclude_lo && layer <= ac.exclude_hi;
}

} // namespace

ContinualModel build_model(const BackboneConfig& bc, const AdapterConfig& ac,
                           int prompt_len, int prompt_start, int prompt_end,
                           std::uint64_t seed) {
    validate_adapter_config(ac, bc.n_layers);
    ContinualModel m;
    m.bcfg = bc;
    m.acfg = ac;
    m.seed = seed;
    m.backbone = build_backbone(bc, seed);

    Rng root(seed);
    Rng sites_rng = root.stream("adapters");
    for (int l = 0; l < bc.n_layers; ++l) {
        if (!layer_adapted(ac, l)) continue;
        Rng lr = sites_rng.stream("layer" + std::to_string(l));
        for (int proj = 0; proj < 2; ++proj) {
            m.sites.push_back(make_adapter_state(ac, l, proj, bc.d_model, bc.d_model,
                                                 lr.stream(proj == 0 ? "q" : "v")));
            derive_all_masks(m.sites.back());
        }
    }

    if (prompt_len <= 0) {
        m.pool = make_prompt_pool(0, 0, 0, bc.n_layers);
        return m;
    }
    if (prompt_end < 0) prompt_end = bc.n_layers - 1;
    // prompting follows the adapter exclusion; a hole in the middle would
    // leave a split range, which the pool cannot represent
    if (ac.exclude_lo >= 0 && ac.exclude_lo > prompt_start && ac.exclude_hi < prompt_end)
        throw ConfigError("layer exclusion [" + std::to_string(ac.exclude_lo) + ", " +
                          std::to_string(ac.exclude_hi) +
                          "] splits the prompt range in two");
    while (prompt_start <= prompt_end && excluded(ac, prompt_start)) ++prompt_start;
    while (prompt_end >= prompt_start && excluded(ac, prompt_end)) --prompt_end;
    if (prompt_start > prompt_end)
        throw ConfigError("every prompted layer is excluded; set prompt.len = 0 instead");
    m.pool = make_prompt_pool(prompt_len, prompt_start, prompt_end, bc.n_layers);
    return m;
}

std::vector<SiteShape> model_site_shapes(const ContinualModel& m) {
    return std::vector<SiteShape>(m.sites.size(),
                                  SiteShape{m.bcfg.d_model, m.bcfg.d_model});
}

int prompted_layer_count(const ContinualModel& m) {
    if (!m.pool.enabled()) return 0;
    return m.pool.end_layer - m.pool.start_layer + 1;
}

TrainableCount model_trainable_count(const ContinualModel& m) {
    return count_trainable(m.acfg, model_site_shapes(m), m.pool.prompt_len,
                           m.bcfg.d_model, prompted_layer_count(m));
}

LayerHooks make_hooks(ContinualModel& m, int task, bool frozen_masks) {
    LayerHooks hooks;
    for (MoSELayerState& site : m.sites) {
        const SiteMaskSet* frozen = nullptr;
        if (frozen_masks && site.kind == AdapterKind::MoSE) {
            auto it = site.frozen.find(task);
            if (it == site.frozen.end())
                throw ContractError("no frozen masks for task " + std::to_string(task) +
                                    " at layer " + std::to_string(site.layer));
            frozen = &it->second;
        }
        MoSELayerState* sp = &site;
        hooks.delta[{site.layer, site.proj}] = [sp, frozen](Tensor u) {
            return site_forward(*sp, u, frozen);
        };
    }
    if (m.pool.enabled())
        for (int l = m.pool.start_layer; l <= m.pool.end_layer; ++l) {
            auto it = m.pool.prompts.find({task, l});
            if (it == m.pool.prompts.end())
                throw ContractError("no prompt for task " + std::to_string(task) +
                                    " at layer " + std::to_string(l));
            hooks.prompts[l] = it->second;
        }
    return hooks;
}

ForwardResult adapted_forward(ContinualModel& m, const std::vector<int>& tokens,
                              int task, const ClassifierHead* head,
                              bool frozen_masks) {
    LayerHooks hooks = make_hooks(m, task, frozen_masks);
    return forward(m.backbone, tokens, head, &hooks);
}

InferenceResult infer(ContinualModel& m, const std::vector<int>& tokens,
                      int til_task) {
    NoGradGuard ng;
    if (m.snapshots.empty()) throw ContractError("no finished task to infer with");
    int t = til_task;
    if (t >= 0) {
        if (!m.snapshots.count(t))
            throw InputError("unknown task id " + std::to_string(t));
    } else {
        t = match_task(m.keys, query_feature(m.backbone, tokens));
    }
    const TaskSnapshot& snap = m.snapshots.at(t);
    ForwardResult fwd = adapted_forward(m, tokens, t, &snap.head, true);

    InferenceResult res;
    res.task = t;
    res.logits.assign(fwd.logits.data().begin(), fwd.logits.data().end());
    res.predicted = 0;
    for (std::size_t c = 1; c < res.logits.size(); ++c)
        if (res.logits[c] > res.logits[res.predicted]) res.predicted = static_cast<int>(c);
    return res;
}

double evaluate_task(ContinualModel& m, const SyntheticTask& t, bool tail) {
    if (t.test.empty()) throw EvalError("task " + std::to_string(t.id) + " has no test split");
    int hits = 0;
    for (const Example& e : t.test) {
        InferenceResult r = infer(m, e.tokens, tail ? -1 : t.id);
        hits += r.predicted == e.label;
    }
    return static_cast<double>(hits) / t.test.size();
}

double match_accuracy(const ContinualModel& m, const SyntheticTask& t) {
    if (t.test.empty()) throw EvalError("task " + std::to_string(t.id) + " has no test split");
    NoGradGuard ng;
    int hits = 0;
    for (const Example& e : t.test)
        hits += match_task(m.keys, query_feature(m.backbone, e.tokens)) == t.id;
    return static_cast<double>(hits) / t.test.size();
}

BitMask task_combined_mask(const ContinualModel& m, int task) {
    std::size_t total = 0;
    std::vector<const SiteMaskSet*> sets;
    for (const MoSELayerState& site : m.sites) {
        if (site.kind != AdapterKind::MoSE) continue;
        auto it = site.frozen.find(task);
        if (it == site.frozen.end())
            throw ContractError("no frozen masks for task " + std::to_string(task));
        sets.push_back(&it->second);
        total += it->second.flattened().size();
    }
    BitMask out(total);
    std::size_t off = 0;
    for (const SiteMaskSet* s : sets) {
        BitMask flat = s->flattened();
        for (std::size_t i = 0; i < flat.size(); ++i)
            if (flat.get(i)) out.set(off + i, true);
        off += flat.size();
    }
    return out;
}

} // namespace mose
