#include "mose/prompt.hpp"

#include <cmath>
#include <string>

#include "mose/error.hpp"
#include "mose/ops.hpp"

namespace mose {

PromptPool make_prompt_pool(int prompt_len, int start_layer, int end_layer,
                            int n_layers) {
    if (prompt_len < 0)
        throw ConfigError("prompt length must be >= 0, got " + std::to_string(prompt_len));
    PromptPool pool;
    pool.prompt_len = prompt_len;
    if (prompt_len > 0) {
        if (start_layer < 0 || end_layer < start_layer || end_layer >= n_layers)
            throw ConfigError("prompted layer range [" + std::to_string(start_layer) +
                              ", " + std::to_string(end_layer) + "] must lie within [0, " +
                              std::to_string(n_layers) + ")");
    }
    pool.start_layer = start_layer;
    pool.end_layer = end_layer;
    return pool;
}

void ensure_task_prompts(PromptPool& pool, int task, int d_model, Rng stream) {
    if (!pool.enabled()) return;
    const double std = 1.0 / std::sqrt(static_cast<double>(d_model));
    for (int l = pool.start_layer; l <= pool.end_layer; ++l) {
        auto key = std::make_pair(task, l);
        if (pool.prompts.count(key)) continue;
        Rng lr = stream.stream("layer" + std::to_string(l));
        std::vector<double> d(static_cast<std::size_t>(pool.prompt_len) * d_model);
        for (auto& v : d) v = lr.normal(0.0, std);
        pool.prompts.emplace(key, Tensor::from({pool.prompt_len, d_model}, std::move(d), true));
    }
}

std::vector<Tensor> task_prompt_params(const PromptPool& pool, int task) {
    std::vector<Tensor> out;
    if (!pool.enabled()) return out;
    for (int l = pool.start_layer; l <= pool.end_layer; ++l) {
        auto it = pool.prompts.find({task, l});
        if (it == pool.prompts.end())
            throw ContractError("task " + std::to_string(task) +
                                " is missing its prompt for layer " + std::to_string(l));
        out.push_back(it->second);
    }
    return out;
}

Tensor attach_prompt(const PromptPool& pool, int task, int layer, Tensor x) {
    if (!pool.layer_prompted(layer))
        throw ContractError("layer " + std::to_string(layer) +
                            " is outside the prompted range [" +
                            std::to_string(pool.start_layer) + ", " +
                            std::to_string(pool.end_layer) + "]");
    auto it = pool.prompts.find({task, layer});
    if (it == pool.prompts.end())
        throw ContractError("no prompt stored for task " + std::to_string(task) +
                            " layer " + std::to_string(layer));
    return concat_rows({it->second, x});
}

void init_key_from_queries(TaskKeySet& keys, int task, const Tensor& queries) {
    const int d = queries.cols();
    Tensor mean;
    {
        NoGradGuard ng;
        mean = mean_rows(queries);
    }
    double nsq = 0.0;
    for (double v : mean.data()) nsq += v * v;
    if (nsq == 0.0)
        throw DegenerateInputError("key init: query mean has zero norm");
    const double inv = 1.0 / std::sqrt(nsq);
    std::vector<double> k(d);
    for (int i = 0; i < d; ++i) k[i] = mean.data()[i] * inv;
    keys.keys[task] = Tensor::from({d}, std::move(k), true);
}

void renormalize_key(TaskKeySet& keys, int task) {
    auto it = keys.keys.find(task);
    if (it == keys.keys.end())
        throw ContractError("renormalize_key: no key for task " + std::to_string(task));
    Tensor& k = it->second;
    double nsq = 0.0;
    for (double v : k.data()) nsq += v * v;
    if (nsq == 0.0)
        throw DegenerateInputError("renormalize_key: key collapsed to zero");
    const double inv = 1.0 / std::sqrt(nsq);
    for (double& v : k.data()) v *= inv;
    k.bump_version();
}

Tensor pull_loss(const TaskKeySet& keys, int task, Tensor queries) {
    auto it = keys.keys.find(task);
    if (it == keys.keys.end())
        throw ContractError("pull_loss: no key for task " + std::to_string(task));
    const int b = queries.rows();
    if (b < 1) throw InputError("pull_loss: empty query batch");
    Tensor acc;
    for (int i = 0; i < b; ++i) {
        Tensor c = cosine_similarity(slice_rows(queries, i, i + 1), it->second);
        acc = acc.valid() ? add(acc, c) : c;
    }
    return scale(acc, -1.0 / b);
}

Tensor total_loss(Tensor task_loss, Tensor pull, double lambda_pull) {
    return add(task_loss, scale(pull, lambda_pull));
}

int match_task(const TaskKeySet& keys, const Tensor& q) {
    if (keys.keys.empty())
        throw ContractError("match_task: no trained keys");
    double qn = 0.0;
    for (double v : q.data()) qn += v * v;
    if (qn == 0.0) throw DegenerateInputError("match_task: zero-norm query");
    qn = std::sqrt(qn);

    int best = -1;
    double best_dist = 0.0;
    for (const auto& [t, k] : keys.keys) {
        if (k.size() != q.size())
            throw DimensionError("match_task: key width " + std::to_string(k.size()) +
                                 " does not match query width " + std::to_string(q.size()));
        double kn = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < k.size(); ++i) {
            kn += k.data()[i] * k.data()[i];
            dot += k.data()[i] * q.data()[i];
        }
        if (kn == 0.0) throw DegenerateInputError("match_task: zero-norm key");
        const double dist = 1.0 - dot / (qn * std::sqrt(kn));
        if (best < 0 || dist < best_dist) {  // strict: ties keep the lowest id
            best = t;
            best_dist = dist;
        }
    }
    return best;
}

} // namespace mose
