#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mose/checkpoint.hpp"
#include "mose/error.hpp"
#include "mose/rng.hpp"
#include "mose/trainer.hpp"

using namespace mose;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig =
    "[backbone]\n"
    "vocab_size = 48\nd_model = 16\nn_layers = 2\nn_heads = 2\nmax_seq = 8\n"
    "[adapter]\n"
    "kind = mose\nexperts = 2\ntop_k = 1\nc = 0.25\nrank = 2\nalpha = 4\n"
    "[prompt]\n"
    "len = 1\n"
    "[trainer]\n"
    "epochs = 2\nbatch_size = 8\nlr = 0.003\nseed = 17\n"
    "[suite]\n"
    "tasks = 2\ntrain_per_task = 24\ntest_per_task = 8\nseq_len = 8\n"
    "vocab_size = 48\nseed = 5\n";

fs::path scratch_dir(const std::string& leaf) {
    fs::path p = fs::temp_directory_path() / leaf;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ContinualModel model_for(const RunConfig& cfg) {
    return build_model(cfg.backbone, cfg.adapter, cfg.prompt_len, cfg.prompt_start,
                       cfg.prompt_end, cfg.trainer.seed);
}

struct TrainedRun {
    RunConfig cfg;
    std::vector<SyntheticTask> suite;
    ContinualModel model;
    RunResult result;
};

TrainedRun small_run(const char* text = kSmallConfig) {
    TrainedRun r;
    r.cfg = parse_run_config(text);
    r.suite = generate_suite(r.cfg.suite);
    r.model = model_for(r.cfg);
    r.result = Trainer(r.model, r.cfg.trainer).run_sequence(r.suite);
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// rewrites the trailing integrity hash after a deliberate patch
void refresh_sum(std::string& bytes) {
    const std::uint64_t sum = fnv1a64(bytes.data(), bytes.size() - 8);
    std::memcpy(bytes.data() + bytes.size() - 8, &sum, 8);
}

} // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("save and load round-trip the whole trained state") {
    TrainedRun run = small_run();
    fs::path dir = scratch_dir("mose_ckpt_round");
    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(run.model, run.cfg, run.result.matrix, path);

    LoadedCheckpoint lc = load_checkpoint(path);
    CHECK(lc.config_text == render_config(run.cfg));
    CHECK(lc.config_hash == config_hash(run.cfg));
    CHECK(lc.backbone_seed == run.cfg.trainer.seed);
    CHECK(lc.trained_through == 2);
    CHECK(lc.matrix == run.result.matrix);
    CHECK(lc.model.snapshots.size() == 2);

    for (int t = 0; t < 2; ++t) {
        const TaskSnapshot& a = run.model.snapshots.at(t);
        const TaskSnapshot& b = lc.model.snapshots.at(t);
        CHECK(a.n_classes == b.n_classes);
        CHECK(a.final_loss == b.final_loss);
        CHECK(a.self_accuracy == b.self_accuracy);
        CHECK(a.head.W.data() == b.head.W.data());
        CHECK(a.head.bias.data() == b.head.bias.data());
        CHECK(run.model.keys.keys.at(t).data() == lc.model.keys.keys.at(t).data());
    }
    CHECK(lc.model.pool.prompts.size() == run.model.pool.prompts.size());
    for (const auto& [key, p] : run.model.pool.prompts)
        CHECK(lc.model.pool.prompts.at(key).data() == p.data());
    for (std::size_t s = 0; s < run.model.sites.size(); ++s) {
        for (int t = 0; t < 2; ++t) {
            const SiteMaskSet& a = run.model.sites[s].frozen.at(t);
            const SiteMaskSet& b = lc.model.sites[s].frozen.at(t);
            for (std::size_t j = 0; j < a.a.size(); ++j) {
                CHECK(a.a[j] == b.a[j]);
                CHECK(a.b[j] == b.b[j]);
            }
            for (std::size_t j = 0; j < a.router_rows.size(); ++j)
                CHECK(a.router_rows[j] == b.router_rows[j]);
        }
    }

    // evaluation is bit-identical through both inference modes
    for (const SyntheticTask& task : run.suite)
        for (const Example& e : {task.test.front(), task.test.back()}) {
            CHECK(infer(run.model, e.tokens, task.id).logits ==
                  infer(lc.model, e.tokens, task.id).logits);
            CHECK(infer(run.model, e.tokens).logits == infer(lc.model, e.tokens).logits);
        }
}

TEST_CASE("checkpoint bytes are deterministic and stable across a reload") {
    TrainedRun run = small_run();
    fs::path dir = scratch_dir("mose_ckpt_bytes");
    const std::string p1 = (dir / "a.ckpt").string();
    const std::string p2 = (dir / "b.ckpt").string();
    save_checkpoint(run.model, run.cfg, run.result.matrix, p1);
    save_checkpoint(run.model, run.cfg, run.result.matrix, p2);
    CHECK(slurp(p1) == slurp(p2));

    LoadedCheckpoint lc = load_checkpoint(p1);
    const std::string p3 = (dir / "c.ckpt").string();
    save_checkpoint(lc.model, lc.config, lc.matrix, p3);
    CHECK(slurp(p1) == slurp(p3));
}

TEST_CASE("resuming mid-sequence matches the uninterrupted run bit for bit") {
    fs::path dir = scratch_dir("mose_ckpt_resume");
    const std::string p_half = (dir / "half.ckpt").string();
    const std::string p_full = (dir / "full.ckpt").string();

    // one uninterrupted run, checkpointing at every task boundary
    RunConfig cfg = parse_run_config(kSmallConfig);
    auto suite = generate_suite(cfg.suite);
    ContinualModel full = model_for(cfg);
    RunResult fr = Trainer(full, cfg.trainer)
                       .run_sequence(suite, nullptr,
                                     [&](int task, const AccuracyMatrix& rows) {
                                         if (task == 0)
                                             save_checkpoint(full, cfg, rows, p_half);
                                     });
    save_checkpoint(full, cfg, fr.matrix, p_full);

    // pick the run back up from the boundary file
    LoadedCheckpoint lc = load_checkpoint(p_half);
    CHECK(lc.trained_through == 1);
    CHECK(lc.matrix.n_rows() == 1);
    Trainer rest(lc.model, lc.config.trainer);
    RunResult rr = rest.resume_sequence(suite, lc.trained_through, lc.matrix);
    CHECK(rr.matrix == fr.matrix);

    const std::string p_res = (dir / "resumed.ckpt").string();
    save_checkpoint(lc.model, lc.config, rr.matrix, p_res);
    CHECK(slurp(p_full) == slurp(p_res));

    // restored evaluation agrees with the live model everywhere
    for (const SyntheticTask& task : suite) {
        const Example& e = task.test.front();
        CHECK(infer(full, e.tokens, task.id).logits ==
              infer(lc.model, e.tokens, task.id).logits);
    }

    // resuming at the wrong point is refused
    LoadedCheckpoint again = load_checkpoint(p_half);
    Trainer bad(again.model, again.config.trainer);
    CHECK_THROWS_AS(bad.resume_sequence(suite, 0, AccuracyMatrix(2)), ContractError);
}

TEST_CASE("every corrupted byte is detected") {
    TrainedRun run = small_run();
    fs::path dir = scratch_dir("mose_ckpt_flip");
    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(run.model, run.cfg, run.result.matrix, path);
    const std::string clean = slurp(path);
    REQUIRE(clean.size() > 64);

    std::vector<std::size_t> positions = {0, 5, 9, 13, 19, 24, 40,
                                          clean.size() / 2, clean.size() - 9,
                                          clean.size() - 1};
    for (std::size_t pos = 50; pos < clean.size(); pos += 487) positions.push_back(pos);

    const std::string tmp = (dir / "flip.ckpt").string();
    for (std::size_t pos : positions) {
        std::string bad = clean;
        bad[pos] = static_cast<char>(bad[pos] ^ 0x41);
        spit(tmp, bad);
        CHECK_THROWS_AS((void)load_checkpoint(tmp), CheckpointError);
    }

    // flips outside the header land on the integrity hash specifically
    std::string bad = clean;
    bad[clean.size() / 2] = static_cast<char>(bad[clean.size() / 2] ^ 1);
    spit(tmp, bad);
    CHECK_THROWS_AS((void)load_checkpoint(tmp), ChecksumError);
}

TEST_CASE("truncation and size mismatches are their own error") {
    TrainedRun run = small_run();
    fs::path dir = scratch_dir("mose_ckpt_trunc");
    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(run.model, run.cfg, run.result.matrix, path);
    const std::string clean = slurp(path);
    const std::string tmp = (dir / "cut.ckpt").string();

    for (std::size_t cut : {std::size_t{1}, std::size_t{8}, clean.size() / 2}) {
        spit(tmp, clean.substr(0, clean.size() - cut));
        CHECK_THROWS_AS((void)load_checkpoint(tmp), TruncationError);
    }
    spit(tmp, clean + "x");
    CHECK_THROWS_AS((void)load_checkpoint(tmp), TruncationError);
    spit(tmp, "MO");
    CHECK_THROWS_AS((void)load_checkpoint(tmp), TruncationError);
}

TEST_CASE("foreign files and future versions are refused") {
    TrainedRun run = small_run();
    fs::path dir = scratch_dir("mose_ckpt_ver");
    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(run.model, run.cfg, run.result.matrix, path);
    std::string bytes = slurp(path);

    std::string foreign = bytes;
    foreign.replace(0, 8, "NOTMINE!");
    refresh_sum(foreign);
    const std::string tmp = (dir / "bad.ckpt").string();
    spit(tmp, foreign);
    CHECK_THROWS_AS((void)load_checkpoint(tmp), VersionError);

    std::string future = bytes;
    const std::uint32_t v2 = 2;
    std::memcpy(future.data() + 8, &v2, 4);
    refresh_sum(future);
    spit(tmp, future);
    CHECK_THROWS_AS((void)load_checkpoint(tmp), VersionError);

    CHECK_THROWS_AS((void)load_checkpoint((dir / "absent.ckpt").string()), IoError);
}

TEST_CASE("baseline families round-trip as well") {
    std::string text = kSmallConfig;
    text.replace(text.find("kind = mose"), 11, "kind = lora");
    TrainedRun run = small_run(text.c_str());
    fs::path dir = scratch_dir("mose_ckpt_lora");
    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(run.model, run.cfg, run.result.matrix, path);
    LoadedCheckpoint lc = load_checkpoint(path);
    CHECK(lc.model.snapshots.size() == 2);
    for (const SyntheticTask& task : run.suite) {
        const Example& e = task.test.front();
        CHECK(infer(run.model, e.tokens, task.id).logits ==
              infer(lc.model, e.tokens, task.id).logits);
    }
}

} // TEST_SUITE
