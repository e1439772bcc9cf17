#include "mose/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>

#include "mose/error.hpp"
#include "mose/ops.hpp"

namespace mose {

const char* optimizer_kind_name(OptimizerKind k) {
    return k == OptimizerKind::Adam ? "adam" : "sgd";
}
const char* train_mode_name(TrainMode m) {
    return m == TrainMode::Sequential ? "sequential" : "joint";
}
const char* eval_mode_name(EvalMode m) { return m == EvalMode::TIL ? "til" : "tail"; }

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.lambda_pull < 0.0)
        throw ConfigError("trainer.lambda_pull must be >= 0, got " +
                          std::to_string(cfg.lambda_pull));
    if (cfg.epochs < 1)
        throw ConfigError("trainer.epochs must be >= 1, got " + std::to_string(cfg.epochs));
    if (cfg.batch_size < 1)
        throw ConfigError("trainer.batch must be >= 1, got " +
                          std::to_string(cfg.batch_size));
    if (!(cfg.lr > 0.0))
        throw ConfigError("trainer.lr must be > 0, got " + std::to_string(cfg.lr));
    if (cfg.clip_norm < 0.0)
        throw ConfigError("trainer.clip must be >= 0, got " + std::to_string(cfg.clip_norm));
}

Optimizer::Optimizer(OptimizerKind kind, double lr, double clip_norm)
    : kind_(kind), lr_(lr), clip_(clip_norm) {}

void Optimizer::add(Tensor p, std::function<BitMask()> mask) {
    if (!p.valid() || !p.requires_grad())
        throw ContractError("optimizer: parameter is missing or not trainable");
    Slot s;
    s.p = p;
    s.mask = std::move(mask);
    s.m1.assign(p.size(), 0.0);
    s.m2.assign(p.size(), 0.0);
    s.k.assign(p.size(), 0);
    slots_.push_back(std::move(s));
}

void Optimizer::zero_grad() {
    for (auto& s : slots_) s.p.zero_grad();
}

void Optimizer::step() {
    double sq = 0.0;
    for (const auto& s : slots_) {
        const auto& g = s.p.grad_view();
        if (g.empty()) continue;
        if (s.mask) {
            const BitMask bm = s.mask();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (bm.get(i)) sq += g[i] * g[i];
        } else {
            for (double v : g) sq += v * v;
        }
    }
    double scale = 1.0;
    if (clip_ > 0.0) {
        const double norm = std::sqrt(sq);
        if (norm > clip_) scale = clip_ / norm;
    }

    for (auto& s : slots_) {
        const auto& g = s.p.grad_view();
        if (g.empty()) continue;
        const bool dense = !s.mask;
        const BitMask bm = dense ? BitMask(0) : s.mask();
        auto& x = s.p.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!dense && !bm.get(i)) continue;
            const double gi = g[i] * scale;
            if (kind_ == OptimizerKind::Adam) {
                s.m1[i] = 0.9 * s.m1[i] + 0.1 * gi;
                s.m2[i] = 0.999 * s.m2[i] + 0.001 * gi * gi;
                ++s.k[i];
                const double mh = s.m1[i] / (1.0 - std::pow(0.9, static_cast<double>(s.k[i])));
                const double vh = s.m2[i] / (1.0 - std::pow(0.999, static_cast<double>(s.k[i])));
                x[i] -= lr_ * mh / (std::sqrt(vh) + 1e-8);
            } else {
                x[i] -= lr_ * gi;
            }
        }
        s.p.bump_version();
    }
}

namespace {

void refill_scores(Tensor scores, Rng rng) {
    for (double& v : scores.data()) v = rng.uniform();
    scores.bump_version();
    scores.zero_grad();
}

} // namespace

void reinit_site_scores(MoSELayerState& site, Rng stream) {
    if (site.kind != AdapterKind::MoSE) return;
    int j = 0;
    for (auto& ex : site.experts) {
        Rng er = stream.stream("expert" + std::to_string(j++));
        refill_scores(ex.mask_a.scores, er.stream("A"));
        refill_scores(ex.mask_b.scores, er.stream("B"));
    }
    int r = 0;
    for (auto& rm : site.router.row_masks)
        refill_scores(rm.scores, stream.stream("router" + std::to_string(r++)));
}

Trainer::Trainer(ContinualModel& m, const TrainConfig& cfg)
    : m_(m), cfg_(cfg), root_(cfg.seed) {
    validate_train_config(cfg);
    next_task_ = static_cast<int>(m.snapshots.size());
}

void Trainer::reinit_scores(int task) {
    if (in_task_) throw ContractError("reinit_scores called mid-task");
    if (task != next_task_)
        throw ContractError("reinit_scores: expected task " + std::to_string(next_task_) +
                            ", got " + std::to_string(task));
    Rng tr = root_.stream("reinit").stream("task" + std::to_string(task));
    for (auto& site : m_.sites) {
        if (site.kind != AdapterKind::MoSE) continue;
        reinit_site_scores(site, tr.stream("layer" + std::to_string(site.layer) +
                                           (site.proj == 0 ? "/q" : "/v")));
        derive_all_masks(site);
    }
    last_reinit_ = task;
}

namespace {

struct MaskedParam {
    Tensor p;
    std::function<BitMask()> mask;
};

// Values of every masked-out entry, in declaration order, for the isolation
// assertion.
std::vector<double> masked_out_values(const std::vector<MaskedParam>& params) {
    std::vector<double> out;
    for (const auto& mp : params) {
        const BitMask bm = mp.mask();
        const auto& x = mp.p.data();
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!bm.get(i)) out.push_back(x[i]);
    }
    return out;
}

Tensor deep_copy(const Tensor& t) {
    return Tensor::from(t.shape(), t.data(), false);
}

} // namespace

TaskSnapshot& Trainer::train_task(const SyntheticTask& task, const TrainHooks* hooks) {
    const int t = task.id;
    if (in_task_) throw ContractError("train_task called while another task is open");
    if (t != next_task_)
        throw ContractError("tasks must be trained in id order; expected " +
                            std::to_string(next_task_) + ", got " + std::to_string(t));
    if (last_reinit_ != t)
        throw ContractError("train_task: reinit_scores(" + std::to_string(t) +
                            ") must run first");
    if (task.train.empty())
        throw TrainError("task " + std::to_string(t) + " has no training examples");
    in_task_ = true;

    if (hooks && hooks->after_reinit) hooks->after_reinit(m_, t);
    for (auto& site : m_.sites) derive_all_masks(site);

    const int D = m_.bcfg.d_model;
    const std::string tlabel = "task" + std::to_string(t);
    if (m_.pool.enabled())
        ensure_task_prompts(m_.pool, t, D, root_.stream("prompt").stream(tlabel));
    ClassifierHead head = make_head(task.n_classes, D, root_.stream("head").stream(tlabel));

    // Queries depend only on the frozen backbone, so one pass per task is
    // enough for both key seeding and the pull term.
    std::vector<Tensor> qcache;
    qcache.reserve(task.train.size());
    for (const Example& e : task.train) qcache.push_back(query_feature(m_.backbone, e.tokens));

    const std::size_t n = task.train.size();
    const std::size_t B = static_cast<std::size_t>(cfg_.batch_size);
    auto epoch_order = [&](int e) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        root_.stream("shuffle").stream(tlabel).stream("epoch" + std::to_string(e))
            .shuffle(idx);
        return idx;
    };

    if (!m_.keys.keys.count(t)) {
        const std::vector<std::size_t> first = epoch_order(0);
        std::vector<Tensor> rows;
        for (std::size_t i = 0; i < std::min(B, n); ++i) rows.push_back(qcache[first[i]]);
        init_key_from_queries(m_.keys, t, concat_rows(rows));
    }

    const bool train_scores = !(hooks && hooks->freeze_scores);
    Optimizer opt(cfg_.optimizer, cfg_.lr, cfg_.clip_norm);
    std::vector<Tensor> frozen_scores;  // still need their grads cleared
    std::vector<MaskedParam> masked;
    for (auto& site : m_.sites) {
        if (site.kind == AdapterKind::MoSE) {
            for (auto& ex : site.experts) {
                auto ma = [&ex] { return ex.mask_a.mask; };
                auto mb = [&ex] { return ex.mask_b.mask; };
                opt.add(ex.A, ma);
                opt.add(ex.B, mb);
                masked.push_back({ex.A, ma});
                masked.push_back({ex.B, mb});
                if (train_scores) {
                    opt.add(ex.mask_a.scores);
                    opt.add(ex.mask_b.scores);
                } else {
                    frozen_scores.push_back(ex.mask_a.scores);
                    frozen_scores.push_back(ex.mask_b.scores);
                }
            }
            MoSELayerState* sp = &site;
            auto mr = [sp] { return router_combined_mask(*sp); };
            opt.add(site.router.W_r, mr);
            masked.push_back({site.router.W_r, mr});
            for (auto& rm : site.router.row_masks) {
                if (train_scores)
                    opt.add(rm.scores);
                else
                    frozen_scores.push_back(rm.scores);
            }
        } else {
            for (auto& ex : site.experts) {
                opt.add(ex.A);
                opt.add(ex.B);
            }
            if (site.kind == AdapterKind::MoE) opt.add(site.router.W_r);
        }
    }
    if (m_.pool.enabled())
        for (Tensor& p : task_prompt_params(m_.pool, t)) opt.add(p);
    opt.add(m_.keys.keys.at(t));
    opt.add(head.W);
    opt.add(head.bias);

    int step_no = 0;
    double last_epoch_loss = 0.0;
    for (int e = 0; e < cfg_.epochs; ++e) {
        const std::vector<std::size_t> order = epoch_order(e);
        double epoch_sum = 0.0;
        int batches = 0;
        for (std::size_t b0 = 0; b0 < n; b0 += B) {
            const std::size_t b1 = std::min(n, b0 + B);
            for (auto& site : m_.sites) derive_all_masks(site);

            std::vector<double> iso;
            if (hooks && hooks->verify_isolation) iso = masked_out_values(masked);

            opt.zero_grad();
            for (Tensor& s : frozen_scores) s.zero_grad();

            Tensor l_task, l_pull, total;
            try {
                std::vector<Tensor> logit_rows, qrows;
                std::vector<int> labels;
                for (std::size_t i = b0; i < b1; ++i) {
                    const Example& ex = task.train[order[i]];
                    logit_rows.push_back(adapted_forward(m_, ex.tokens, t, &head, false).logits);
                    labels.push_back(ex.label);
                    qrows.push_back(qcache[order[i]]);
                }
                l_task = cross_entropy(concat_rows(logit_rows), labels);
                l_pull = pull_loss(m_.keys, t, concat_rows(qrows));
                total = total_loss(l_task, l_pull, cfg_.lambda_pull);
            } catch (const EvalError&) {
                // an op tripped its own finite check somewhere in this batch
                total = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
            }
            if (!std::isfinite(total.data()[0]))
                throw TrainError("non-finite loss at task " + std::to_string(t) +
                                 " epoch " + std::to_string(e) + " batch " +
                                 std::to_string(batches));
            total.backward();
            opt.step();
            renormalize_key(m_.keys, t);

            if (hooks && hooks->verify_isolation) {
                const std::vector<double> after = masked_out_values(masked);
                if (after.size() != iso.size() ||
                    std::memcmp(after.data(), iso.data(), iso.size() * sizeof(double)) != 0)
                    throw ContractError("isolation violated: a masked-out entry moved at "
                                        "task " + std::to_string(t) + " step " +
                                        std::to_string(step_no));
            }

            logs_.push_back({t, e, step_no, l_task.data()[0], l_pull.data()[0],
                             total.data()[0]});
            ++step_no;
            epoch_sum += total.data()[0];
            ++batches;
        }
        last_epoch_loss = epoch_sum / batches;
    }

    for (auto& site : m_.sites) {
        derive_all_masks(site);
        if (site.kind == AdapterKind::MoSE) snapshot_masks(site, t);
    }
    TaskSnapshot snap;
    snap.task = t;
    snap.n_classes = task.n_classes;
    snap.head.W = deep_copy(head.W);
    snap.head.bias = deep_copy(head.bias);
    snap.final_loss = last_epoch_loss;
    TaskSnapshot& stored = m_.snapshots[t] = std::move(snap);

    in_task_ = false;
    last_reinit_ = -1;
    next_task_ = t + 1;
    return stored;
}

namespace {

void check_ordered(const std::vector<SyntheticTask>& suite) {
    if (suite.empty()) throw InputError("task suite is empty");
    for (std::size_t i = 0; i < suite.size(); ++i)
        if (suite[i].id != static_cast<int>(i))
            throw ContractError("suite tasks must be ordered by id starting at 0");
}

} // namespace

RunResult Trainer::finish_sequence(const std::vector<SyntheticTask>& suite,
                                   AccuracyMatrix matrix, int first_task,
                                   const TrainHooks* hooks,
                                   const TaskCallback& after_task) {
    const int T = static_cast<int>(suite.size());
    for (int i = first_task; i < T; ++i) {
        reinit_scores(i);
        train_task(suite[i], hooks);
        for (int j = 0; j <= i; ++j)
            matrix.set(i, j, evaluate_task(m_, suite[j], cfg_.eval == EvalMode::TaIL));
        m_.snapshots.at(i).self_accuracy = matrix.at(i, i);
        if (after_task) after_task(i, matrix);
    }
    RunResult res;
    res.matrix = std::move(matrix);
    res.logs = logs_;
    for (const SyntheticTask& task : suite)
        res.match_accuracy.push_back(match_accuracy(m_, task));
    if (m_.acfg.kind == AdapterKind::MoSE && !m_.sites.empty()) {
        std::vector<BitMask> per;
        for (int ti = 0; ti < T; ++ti) per.push_back(task_combined_mask(m_, ti));
        res.growth = parameter_growth(per);
    }
    return res;
}

RunResult Trainer::run_sequence(const std::vector<SyntheticTask>& suite,
                                const TrainHooks* hooks,
                                const TaskCallback& after_task) {
    if (cfg_.mode != TrainMode::Sequential)
        throw ContractError("run_sequence requires sequential mode");
    check_ordered(suite);
    if (next_task_ != 0)
        throw ContractError("run_sequence on a model that already trained tasks; "
                            "use resume_sequence");
    return finish_sequence(suite, AccuracyMatrix(static_cast<int>(suite.size())), 0,
                           hooks, after_task);
}

RunResult Trainer::resume_sequence(const std::vector<SyntheticTask>& suite,
                                   int first_task, AccuracyMatrix done_rows,
                                   const TaskCallback& after_task) {
    if (cfg_.mode != TrainMode::Sequential)
        throw ContractError("resume_sequence requires sequential mode");
    check_ordered(suite);
    if (first_task != static_cast<int>(m_.snapshots.size()))
        throw ContractError("resume point " + std::to_string(first_task) +
                            " does not match " + std::to_string(m_.snapshots.size()) +
                            " restored snapshots");
    if (done_rows.tasks != static_cast<int>(suite.size()) ||
        done_rows.n_rows() != first_task)
        throw ContractError("restored accuracy rows do not match the resume point");
    next_task_ = first_task;
    return finish_sequence(suite, std::move(done_rows), first_task, nullptr, after_task);
}

AccuracyMatrix joint_eval(ContinualModel& m, const std::vector<SyntheticTask>& suite) {
    if (suite.empty()) throw ContractError("joint_eval needs at least one task");
    auto it = m.snapshots.find(0);
    if (it == m.snapshots.end() || m.snapshots.size() != 1)
        throw ContractError("joint_eval needs exactly the combined snapshot");
    const TaskSnapshot& snap = it->second;

    const int T = static_cast<int>(suite.size());
    std::vector<int> offset(T, 0);
    for (int i = 1; i < T; ++i) offset[i] = offset[i - 1] + suite[i - 1].n_classes;
    if (offset[T - 1] + suite[T - 1].n_classes != snap.n_classes)
        throw ContractError("suite label union does not match the combined head");

    AccuracyMatrix matrix(T);
    for (int i = 0; i < T; ++i) {
        if (suite[i].test.empty())
            throw EvalError("task " + std::to_string(i) + " has no test split");
        NoGradGuard ng;
        int hits = 0;
        for (const Example& e : suite[i].test) {
            ForwardResult fwd = adapted_forward(m, e.tokens, 0, &snap.head, true);
            int best = 0;
            for (int c = 1; c < suite[i].n_classes; ++c)
                if (fwd.logits.data()[offset[i] + c] >
                    fwd.logits.data()[offset[i] + best])
                    best = c;
            hits += best == e.label;
        }
        matrix.set(0, i, static_cast<double>(hits) / suite[i].test.size());
    }
    return matrix;
}

RunResult Trainer::run_joint(const std::vector<SyntheticTask>& suite) {
    if (cfg_.mode != TrainMode::Joint) throw ContractError("run_joint requires joint mode");
    check_ordered(suite);
    if (next_task_ != 0) throw ContractError("run_joint needs an untrained model");

    const int T = static_cast<int>(suite.size());
    std::vector<int> offset(T, 0);
    for (int i = 1; i < T; ++i) offset[i] = offset[i - 1] + suite[i - 1].n_classes;
    const int total_classes = offset[T - 1] + suite[T - 1].n_classes;

    SyntheticTask joint;
    joint.id = 0;
    joint.n_classes = total_classes;
    joint.rule = -1;
    for (int i = 0; i < T; ++i)
        for (const Example& e : suite[i].train)
            joint.train.push_back({e.tokens, offset[i] + e.label});

    reinit_scores(0);
    train_task(joint);

    RunResult res;
    res.matrix = joint_eval(m_, suite);
    res.logs = logs_;
    if (m_.acfg.kind == AdapterKind::MoSE && !m_.sites.empty())
        res.growth = parameter_growth({task_combined_mask(m_, 0)});
    return res;
}

} // namespace mose
