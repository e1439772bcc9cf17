#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "mose/error.hpp"
#include "mose/model.hpp"
#include "mose/ops.hpp"
#include "mose/rng.hpp"
#include "mose/tasks.hpp"
#include "mose/trainer.hpp"

using namespace mose;

namespace {

BackboneConfig tiny_backbone() {
    BackboneConfig bc;
    bc.vocab_size = 48;
    bc.d_model = 16;
    bc.n_layers = 2;
    bc.n_heads = 2;
    bc.max_seq = 8;
    return bc;
}

AdapterConfig tiny_adapter(AdapterKind kind = AdapterKind::MoSE) {
    AdapterConfig ac;
    ac.kind = kind;
    ac.n_experts = 2;
    ac.top_k = 1;
    ac.density = 0.25;
    ac.rank = 2;
    ac.alpha = 4.0;
    return ac;
}

SuiteConfig tiny_suite(int tasks = 2) {
    SuiteConfig sc;
    sc.n_tasks = tasks;
    sc.train_per_task = 32;
    sc.test_per_task = 8;
    sc.seq_len = 8;
    sc.vocab_size = 48;
    sc.seed = 5;
    return sc;
}

TrainConfig tiny_train() {
    TrainConfig tc;
    tc.adapter = tiny_adapter();
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.lr = 3e-3;
    tc.seed = 17;
    return tc;
}

ContinualModel tiny_model(const AdapterConfig& ac, std::uint64_t seed = 17) {
    return build_model(tiny_backbone(), ac, 1, 0, -1, seed);
}

// Every score tensor at every site gets 1.0 on its task-th quota-sized slice
// and 0.0 elsewhere, making per-task masks mutually disjoint.
void force_disjoint_scores(ContinualModel& m, int task) {
    for (auto& site : m.sites) {
        auto stamp = [&](ScoreMask& sm) {
            const long long q = mask_quota(sm.density, static_cast<long long>(sm.target_len));
            auto& s = sm.scores.data();
            for (std::size_t i = 0; i < s.size(); ++i)
                s[i] = (static_cast<long long>(i) >= task * q &&
                        static_cast<long long>(i) < (task + 1) * q)
                           ? 1.0
                           : 0.0;
            sm.scores.bump_version();
        };
        for (auto& ex : site.experts) {
            stamp(ex.mask_a);
            stamp(ex.mask_b);
        }
        for (auto& rm : site.router.row_masks) stamp(rm);
    }
}

void force_fixed_scores(ContinualModel& m, int) {
    for (auto& site : m.sites) {
        auto stamp = [&](ScoreMask& sm) {
            auto& s = sm.scores.data();
            for (std::size_t i = 0; i < s.size(); ++i)
                s[i] = static_cast<double>(s.size() - i);
            sm.scores.bump_version();
        };
        for (auto& ex : site.experts) {
            stamp(ex.mask_a);
            stamp(ex.mask_b);
        }
        for (auto& rm : site.router.row_masks) stamp(rm);
    }
}

} // namespace

TEST_SUITE("trainer") {

TEST_CASE("train config validation") {
    TrainConfig tc = tiny_train();
    CHECK_NOTHROW(validate_train_config(tc));
    tc.lambda_pull = -0.1;
    CHECK_THROWS_AS(validate_train_config(tc), ConfigError);
    tc = tiny_train();
    tc.epochs = 0;
    CHECK_THROWS_AS(validate_train_config(tc), ConfigError);
    tc = tiny_train();
    tc.batch_size = 0;
    CHECK_THROWS_AS(validate_train_config(tc), ConfigError);
    tc = tiny_train();
    tc.lr = 0.0;
    CHECK_THROWS_AS(validate_train_config(tc), ConfigError);
    tc = tiny_train();
    tc.clip_norm = -1.0;
    CHECK_THROWS_AS(validate_train_config(tc), ConfigError);
}

TEST_CASE("sgd step moves along the clipped gradient") {
    Tensor p = Tensor::from({2}, {1.0, 2.0}, true);
    Optimizer opt(OptimizerKind::Sgd, 1.0, 1.0);
    opt.add(p);
    opt.zero_grad();
    p.grad()[0] = 3.0;  // norm 5 clips to unit: (0.6, 0.8)
    p.grad()[1] = 4.0;
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.6).epsilon(1e-12));
    CHECK(p.data()[1] == doctest::Approx(2.0 - 0.8).epsilon(1e-12));

    Tensor q = Tensor::from({1}, {1.0}, true);
    Optimizer small(OptimizerKind::Sgd, 0.5, 1.0);
    small.add(q);
    small.zero_grad();
    q.grad()[0] = 0.6;  // under the clip: untouched
    small.step();
    CHECK(q.data()[0] == doctest::Approx(1.0 - 0.5 * 0.6).epsilon(1e-12));
}

TEST_CASE("first adaptive step is a bias-corrected unit move") {
    Tensor p = Tensor::from({1}, {0.0}, true);
    Optimizer opt(OptimizerKind::Adam, 0.1, 0.0);
    opt.add(p);
    opt.zero_grad();
    p.grad()[0] = 2.0;
    opt.step();
    // corrected moments equal g and g^2, so the move is lr * g/|g|
    CHECK(p.data()[0] == doctest::Approx(-0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("inactive entries neither move nor accrue moments") {
    Tensor p = Tensor::from({2}, {1.0, 1.0}, true);
    BitMask active(2);
    active.set(0, true);
    active.set(1, true);
    Optimizer opt(OptimizerKind::Adam, 0.1, 0.0);
    opt.add(p, [&active] { return active; });

    opt.zero_grad();
    p.grad()[0] = 1.0;
    p.grad()[1] = 1.0;
    opt.step();
    const double moved = p.data()[1];

    // drop entry 1 from the mask: despite stored moments it must freeze
    active.set(1, false);
    opt.zero_grad();
    p.grad()[0] = 1.0;
    p.grad()[1] = 1.0;  // gradient present but entry inactive
    opt.step();
    CHECK(p.data()[1] == moved);

    // re-admitted entry steps with its own count, not the global one: a
    // shadow entry fed only the two active gradients must land on the same
    // value (the changed gradient makes bias correction count-sensitive)
    active.set(1, true);
    opt.zero_grad();
    p.grad()[1] = 0.5;
    opt.step();
    Tensor fresh = Tensor::from({1}, {1.0}, true);
    Optimizer opt2(OptimizerKind::Adam, 0.1, 0.0);
    opt2.add(fresh);
    for (double g : {1.0, 0.5}) {
        opt2.zero_grad();
        fresh.grad()[0] = g;
        opt2.step();
    }
    CHECK(p.data()[1] == doctest::Approx(fresh.data()[0]).epsilon(1e-12));
}

TEST_CASE("score reinitialization is a pure function of its stream") {
    AdapterConfig ac = tiny_adapter();
    ac.density = 0.3;
    MoSELayerState site = make_adapter_state(ac, 0, 0, 4096, 8, Rng(3).stream("s"));
    reinit_site_scores(site, Rng(9).stream("r"));
    std::vector<double> first = site.experts[0].mask_a.scores.data();
    reinit_site_scores(site, Rng(9).stream("r"));
    CHECK(site.experts[0].mask_a.scores.data() == first);

    // different tasks draw different scores; D=4096 masks overlap partially
    derive_all_masks(site);
    BitMask m0 = site.experts[0].mask_a.mask;
    reinit_site_scores(site, Rng(9).stream("r2"));
    derive_all_masks(site);
    BitMask m1 = site.experts[0].mask_a.mask;
    CHECK(m0.popcount() == m1.popcount());
    std::size_t common = 0;
    for (std::size_t i = 0; i < m0.size(); ++i)
        if (m0.get(i) && m1.get(i)) ++common;
    CHECK(common < m0.popcount());
    CHECK(common > 0);
}

TEST_CASE("task order and reinitialization contracts are enforced") {
    auto suite = generate_suite(tiny_suite());
    ContinualModel m = tiny_model(tiny_adapter());
    Trainer tr(m, tiny_train());
    CHECK_THROWS_AS(tr.train_task(suite[0]), ContractError);  // no reinit yet
    CHECK_THROWS_AS(tr.reinit_scores(1), ContractError);      // wrong task
    tr.reinit_scores(0);
    CHECK_THROWS_AS(tr.train_task(suite[1]), ContractError);  // out of order
    tr.train_task(suite[0]);
    CHECK_THROWS_AS(tr.train_task(suite[0]), ContractError);  // needs fresh reinit
}

TEST_CASE("a broken task leaves the trainer mid-task") {
    auto suite = generate_suite(tiny_suite());
    ContinualModel m = tiny_model(tiny_adapter());
    Trainer tr(m, tiny_train());
    TrainHooks poison;
    poison.after_reinit = [](ContinualModel& mm, int) {
        for (auto& ex : mm.sites[0].experts) {
            for (double& v : ex.A.data()) v = std::numeric_limits<double>::quiet_NaN();
            ex.A.bump_version();
        }
    };
    tr.reinit_scores(0);
    try {
        tr.train_task(suite[0], &poison);
        FAIL("expected TrainError");
    } catch (const TrainError& e) {
        CHECK(std::string(e.what()).find("batch 0") != std::string::npos);
    }
    CHECK_THROWS_AS(tr.reinit_scores(0), ContractError);  // still mid-task
}

TEST_CASE("one task trains: loss drops, snapshot freezes the final masks") {
    auto suite = generate_suite(tiny_suite());
    ContinualModel m = tiny_model(tiny_adapter());
    Trainer tr(m, tiny_train());
    TrainHooks hooks;
    hooks.verify_isolation = true;  // masked-out entries must hold still
    tr.reinit_scores(0);
    TaskSnapshot& snap = tr.train_task(suite[0], &hooks);

    CHECK(snap.task == 0);
    CHECK(snap.n_classes == suite[0].n_classes);
    CHECK(snap.head.W.rows() == suite[0].n_classes);
    CHECK_FALSE(snap.head.W.requires_grad());

    const auto& logs = tr.logs();
    const int steps_per_epoch = 32 / 8;
    CHECK(static_cast<int>(logs.size()) == 3 * steps_per_epoch);
    double first_epoch = 0.0, last_epoch = 0.0;
    for (const StepLog& l : logs) {
        if (l.epoch == 0) first_epoch += l.l_total;
        if (l.epoch == 2) last_epoch += l.l_total;
    }
    CHECK(last_epoch < first_epoch);

    // snapshot equals what derive would produce from the final scores
    for (auto& site : m.sites) {
        derive_all_masks(site);
        const SiteMaskSet& frozen = site.frozen.at(0);
        for (std::size_t j = 0; j < site.experts.size(); ++j) {
            CHECK(frozen.a[j] == site.experts[j].mask_a.mask);
            CHECK(frozen.b[j] == site.experts[j].mask_b.mask);
        }
        for (std::size_t j = 0; j < site.router.row_masks.size(); ++j)
            CHECK(frozen.router_rows[j] == site.router.row_masks[j].mask);
    }

    // key is stored unit-norm
    const Tensor& k = m.keys.keys.at(0);
    double n2 = 0.0;
    for (double v : k.data()) n2 += v * v;
    CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("sequences are reproducible from the seed") {
    auto suite = generate_suite(tiny_suite());
    ContinualModel m1 = tiny_model(tiny_adapter());
    ContinualModel m2 = tiny_model(tiny_adapter());
    RunResult r1 = Trainer(m1, tiny_train()).run_sequence(suite);
    RunResult r2 = Trainer(m2, tiny_train()).run_sequence(suite);
    CHECK(r1.matrix == r2.matrix);
    CHECK(r1.match_accuracy == r2.match_accuracy);
    CHECK(m1.sites[0].experts[0].A.data() == m2.sites[0].experts[0].A.data());
    CHECK(r1.growth.union_curve == r2.growth.union_curve);

    // a different seed changes the trajectory
    TrainConfig other = tiny_train();
    other.seed = 18;
    ContinualModel m3 = tiny_model(tiny_adapter());
    Trainer(m3, other).run_sequence(suite);
    CHECK_FALSE(m3.sites[0].experts[0].A.data() == m1.sites[0].experts[0].A.data());
}

TEST_CASE("forced disjoint masks isolate earlier tasks exactly") {
    auto suite = generate_suite(tiny_suite());
    ContinualModel m = tiny_model(tiny_adapter());
    TrainHooks hooks;
    hooks.after_reinit = force_disjoint_scores;
    hooks.freeze_scores = true;
    hooks.verify_isolation = true;
    RunResult r = Trainer(m, tiny_train()).run_sequence(suite, &hooks);

    CHECK(r.matrix.at(1, 0) == r.matrix.at(0, 0));  // bit-exact retention
    CHECK(backward_transfer(r.matrix) == 0.0);
    CHECK(r.growth.overlap[1] == 0.0);  // no shared bits at all
    CHECK(r.growth.union_curve[1] == r.growth.per_task[0] + r.growth.per_task[1]);
}

TEST_CASE("forced identical scores keep the union flat") {
    auto suite = generate_suite(tiny_suite());
    ContinualModel m = tiny_model(tiny_adapter());
    TrainHooks hooks;
    hooks.after_reinit = force_fixed_scores;
    hooks.freeze_scores = true;
    RunResult r = Trainer(m, tiny_train()).run_sequence(suite, &hooks);
    CHECK(r.growth.union_curve[1] == r.growth.union_curve[0]);
    CHECK(r.growth.overlap[1] == 1.0);
}

TEST_CASE("task-agnostic evaluation fills the matrix too") {
    TrainConfig tc = tiny_train();
    tc.eval = EvalMode::TaIL;
    auto suite = generate_suite(tiny_suite());
    ContinualModel m = tiny_model(tiny_adapter());
    RunResult r = Trainer(m, tc).run_sequence(suite);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j <= i; ++j) {
            CHECK(r.matrix.at(i, j) >= 0.0);
            CHECK(r.matrix.at(i, j) <= 1.0);
        }
    REQUIRE(r.match_accuracy.size() == 2);
}

TEST_CASE("baseline adapter families train through the same loop") {
    auto suite = generate_suite(tiny_suite());
    for (AdapterKind kind : {AdapterKind::LoRA, AdapterKind::MoE}) {
        AdapterConfig ac = tiny_adapter(kind);
        TrainConfig tc = tiny_train();
        tc.adapter = ac;
        ContinualModel m = tiny_model(ac);
        RunResult r = Trainer(m, tc).run_sequence(suite);
        CHECK(r.matrix.n_rows() == 2);
        CHECK(r.growth.union_curve.empty());  // nothing masked to account
    }
}

TEST_CASE("joint training over one task equals the sequential run") {
    auto suite = generate_suite(tiny_suite());
    std::vector<SyntheticTask> single = {suite[0]};

    ContinualModel ms = tiny_model(tiny_adapter());
    RunResult rs = Trainer(ms, tiny_train()).run_sequence(single);

    TrainConfig jc = tiny_train();
    jc.mode = TrainMode::Joint;
    ContinualModel mj = tiny_model(tiny_adapter());
    RunResult rj = Trainer(mj, jc).run_joint(single);

    CHECK(rj.matrix.at(0, 0) == rs.matrix.at(0, 0));
    CHECK(ms.sites[0].experts[0].A.data() == mj.sites[0].experts[0].A.data());
}

TEST_CASE("joint mode trains one combined head over the label union") {
    auto suite = generate_suite(tiny_suite());
    TrainConfig jc = tiny_train();
    jc.mode = TrainMode::Joint;
    ContinualModel m = tiny_model(tiny_adapter());
    RunResult r = Trainer(m, jc).run_joint(suite);
    CHECK(r.matrix.n_rows() == 1);
    CHECK(r.matrix.present(0, 0));
    CHECK(r.matrix.present(0, 1));
    CHECK(m.snapshots.at(0).n_classes == suite[0].n_classes + suite[1].n_classes);

    ContinualModel m2 = tiny_model(tiny_adapter());
    CHECK_THROWS_AS(Trainer(m2, tiny_train()).run_joint(suite), ContractError);
    ContinualModel m3 = tiny_model(tiny_adapter());
    Trainer t3(m3, jc);
    CHECK_THROWS_AS(t3.run_sequence(suite), ContractError);
}

TEST_CASE("resume guards its restore point") {
    auto suite = generate_suite(tiny_suite());
    ContinualModel m = tiny_model(tiny_adapter());
    Trainer tr(m, tiny_train());
    AccuracyMatrix rows(2);
    CHECK_THROWS_AS(tr.resume_sequence(suite, 1, rows), ContractError);  // no snapshots
    rows.set(0, 0, 0.5);
    CHECK_THROWS_AS(tr.resume_sequence(suite, 0, rows), ContractError);  // row surplus
}

} // TEST_SUITE
