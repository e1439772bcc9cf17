#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mose/checkpoint.hpp"
#include "mose/config.hpp"
#include "mose/error.hpp"
#include "mose/metrics.hpp"
#include "mose/model.hpp"
#include "mose/tasks.hpp"
#include "mose/trainer.hpp"

namespace fs = std::filesystem;
using namespace mose;

namespace {

RunConfig config_from(const std::string& path) {
    RunConfig cfg = load_run_config(path);
    apply_env_seed(cfg);
    return cfg;
}

void write_steps(const std::vector<StepLog>& logs, const std::string& path, bool append) {
    const bool fresh = !append || !fs::exists(path);
    std::ofstream f(path, fresh ? std::ios::trunc : std::ios::app);
    if (!f) throw IoError("cannot open " + path + " for writing");
    if (fresh) f << "step\ttask\tepoch\tl_task\tl_pull\tl_total\n";
    char buf[128];
    for (const StepLog& l : logs) {
        std::snprintf(buf, sizeof buf, "%d\t%d\t%d\t%.17g\t%.17g\t%.17g\n", l.step,
                      l.task, l.epoch, l.l_task, l.l_pull, l.l_total);
        f << buf;
    }
}

void print_summary(const RunConfig& cfg, const RunResult& r) {
    std::printf("tasks          %d\n", r.matrix.tasks);
    std::printf("final average  %.4f\n", average_performance(r.matrix));
    if (r.matrix.n_rows() == r.matrix.tasks && r.matrix.tasks >= 2 &&
        cfg.trainer.mode == TrainMode::Sequential)
        std::printf("bwt            %+.2f%%\n", backward_transfer(r.matrix));
    if (!r.growth.union_curve.empty()) {
        std::printf("mask union     %lld", r.growth.union_curve.back());
        std::printf(" (per task");
        for (long long p : r.growth.per_task) std::printf(" %lld", p);
        std::printf(")\n");
    }
    if (!r.match_accuracy.empty()) {
        double s = 0.0;
        for (double v : r.match_accuracy) s += v;
        std::printf("task matching  %.4f\n", s / static_cast<double>(r.match_accuracy.size()));
    }
}

// One full training run into out_dir: suite export, boundary checkpoints,
// loss log, and the metric reports.
RunResult run_training(const RunConfig& cfg, const std::string& out_dir,
                       const std::string& resume_path) {
    fs::create_directories(out_dir);
    const std::string ckpt = (fs::path(out_dir) / "model.ckpt").string();

    std::vector<SyntheticTask> suite = generate_suite(cfg.suite);
    export_suite(suite, (fs::path(out_dir) / "suite").string());

    RunResult result;
    if (cfg.trainer.mode == TrainMode::Joint) {
        if (!resume_path.empty())
            throw ConfigError("joint runs train in one pass and do not support --resume");
        ContinualModel m = build_model(cfg.backbone, cfg.adapter, cfg.prompt_len,
                                       cfg.prompt_start, cfg.prompt_end, cfg.trainer.seed);
        Trainer trainer(m, cfg.trainer);
        result = trainer.run_joint(suite);
        save_checkpoint(m, cfg, result.matrix, ckpt);
        write_steps(result.logs, (fs::path(out_dir) / "steps.tsv").string(), false);
        MetricsReport rep{result.matrix, result.growth, model_trainable_count(m),
                          render_config(cfg), cfg.trainer.seed, result.match_accuracy};
        emit_report(rep, out_dir);
        return result;
    }

    if (resume_path.empty()) {
        ContinualModel m = build_model(cfg.backbone, cfg.adapter, cfg.prompt_len,
                                       cfg.prompt_start, cfg.prompt_end, cfg.trainer.seed);
        Trainer trainer(m, cfg.trainer);
        result = trainer.run_sequence(suite, nullptr,
                                      [&](int, const AccuracyMatrix& rows) {
                                          save_checkpoint(m, cfg, rows, ckpt);
                                      });
        write_steps(result.logs, (fs::path(out_dir) / "steps.tsv").string(), false);
        MetricsReport rep{result.matrix, result.growth, model_trainable_count(m),
                          render_config(cfg), cfg.trainer.seed, result.match_accuracy};
        emit_report(rep, out_dir);
        return result;
    }

    LoadedCheckpoint lc = load_checkpoint(resume_path);
    if (lc.config_hash != config_hash(cfg))
        throw ConfigError("--resume checkpoint was written with a different "
                          "configuration; refusing to mix runs");
    Trainer trainer(lc.model, cfg.trainer);
    result = trainer.resume_sequence(suite, lc.trained_through, lc.matrix,
                                     [&](int, const AccuracyMatrix& rows) {
                                         save_checkpoint(lc.model, cfg, rows, ckpt);
                                     });
    if (lc.trained_through == static_cast<int>(suite.size()))
        save_checkpoint(lc.model, cfg, result.matrix, ckpt);  // nothing left to train
    write_steps(result.logs, (fs::path(out_dir) / "steps.tsv").string(), true);
    MetricsReport rep{result.matrix, result.growth, model_trainable_count(lc.model),
                      render_config(cfg), cfg.trainer.seed, result.match_accuracy};
    emit_report(rep, out_dir);
    return result;
}

int cmd_gen_suite(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = config_from(config_path);
    std::vector<SyntheticTask> suite = generate_suite(cfg.suite);
    export_suite(suite, out_dir);
    std::printf("wrote %zu tasks to %s\n", suite.size(), out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume_path) {
    RunConfig cfg = config_from(config_path);
    cfg.out_dir = out_dir;
    RunResult r = run_training(cfg, out_dir, resume_path);
    print_summary(cfg, r);
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& suite_dir,
             const std::string& mode) {
    LoadedCheckpoint lc = load_checkpoint(ckpt_path);
    std::vector<SyntheticTask> suite = import_suite(suite_dir);

    std::printf("task\taccuracy\n");
    if (lc.config.trainer.mode == TrainMode::Joint) {
        AccuracyMatrix row = joint_eval(lc.model, suite);
        for (int j = 0; j < row.tasks; ++j)
            std::printf("%d\t%.17g\n", j, row.at(0, j));
        std::printf("average\t%.17g\n", average_performance(row));
        return 0;
    }

    if (static_cast<int>(suite.size()) < lc.trained_through)
        throw EvalError("suite has " + std::to_string(suite.size()) +
                        " tasks but the checkpoint trained " +
                        std::to_string(lc.trained_through));
    double sum = 0.0;
    for (int j = 0; j < lc.trained_through; ++j) {
        const int want = lc.model.snapshots.at(j).n_classes;
        if (suite[j].n_classes != want)
            throw EvalError("task " + std::to_string(j) + " has " +
                            std::to_string(suite[j].n_classes) +
                            " classes but the checkpoint trained " +
                            std::to_string(want));
        const double acc = evaluate_task(lc.model, suite[j], mode == "tail");
        sum += acc;
        std::printf("%d\t%.17g\n", j, acc);
    }
    std::printf("average\t%.17g\n", sum / lc.trained_through);
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& sweep,
               const std::string& out_dir) {
    const std::size_t eq = sweep.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 >= sweep.size())
        throw ConfigError("--sweep expects KEY=V1,V2,..., got '" + sweep + "'");
    const std::string key = sweep.substr(0, eq);
    std::vector<std::string> values;
    std::string rest = sweep.substr(eq + 1);
    std::size_t pos = 0;
    while (pos <= rest.size()) {
        const std::size_t comma = rest.find(',', pos);
        const std::string v = rest.substr(pos, comma == std::string::npos
                                                   ? std::string::npos
                                                   : comma - pos);
        if (v.empty()) throw ConfigError("--sweep has an empty value in '" + sweep + "'");
        values.push_back(v);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }

    const RunConfig base = config_from(config_path);
    struct Line {
        std::string value;
        double avg;
        double bwt;
        bool has_bwt;
    };
    std::vector<Line> table;
    for (const std::string& v : values) {
        RunConfig cfg = base;
        set_config_key(cfg, key, v);
        validate_run_config(cfg);
        std::string leaf = key + "=" + v;
        for (char& c : leaf)
            if (c == '/') c = '_';
        const std::string dir = (fs::path(out_dir) / leaf).string();
        std::printf("== %s ==\n", leaf.c_str());
        RunResult r = run_training(cfg, dir, "");
        Line line{v, average_performance(r.matrix), 0.0, false};
        if (r.matrix.n_rows() == r.matrix.tasks && r.matrix.tasks >= 2 &&
            cfg.trainer.mode == TrainMode::Sequential) {
            line.bwt = backward_transfer(r.matrix);
            line.has_bwt = true;
        }
        table.push_back(line);
    }

    std::printf("%s\tavg\tbwt\n", key.c_str());
    for (const Line& l : table) {
        if (l.has_bwt)
            std::printf("%s\t%.4f\t%+.2f%%\n", l.value.c_str(), l.avg, l.bwt);
        else
            std::printf("%s\t%.4f\t-\n", l.value.c_str(), l.avg);
    }
    return 0;
}

int cmd_report(const std::string& run_dir) {
    MetricsReport rep = load_report(run_dir);
    emit_report(rep, run_dir);
    std::printf("run %s\n", report_run_id(rep).c_str());
    std::printf("final average  %.4f\n", average_performance(rep.matrix));
    if (rep.matrix.n_rows() == rep.matrix.tasks && rep.matrix.tasks >= 2)
        std::printf("bwt            %+.2f%%\n", backward_transfer(rep.matrix));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual-learning lab: masked low-rank sub-experts on a frozen "
                 "transformer"};
    app.require_subcommand(1);

    std::string config_path, out_dir, resume_path, ckpt_path, suite_dir, mode, sweep,
        run_dir;

    CLI::App* gen = app.add_subcommand("gen-suite", "generate and export a task suite");
    gen->add_option("--config", config_path, "run configuration file")->required();
    gen->add_option("--out", out_dir, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "train a task sequence");
    train->add_option("--config", config_path, "run configuration file")->required();
    train->add_option("--out", out_dir, "run directory")->required();
    train->add_option("--resume", resume_path, "checkpoint to continue from");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a suite");
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--suite", suite_dir, "exported suite directory")->required();
    eval->add_option("--mode", mode, "til (task ids given) or tail (inferred)")
        ->required()
        ->check(CLI::IsMember({"til", "tail"}));

    CLI::App* ablate = app.add_subcommand("ablate", "run one training per swept value");
    ablate->add_option("--config", config_path, "run configuration file")->required();
    ablate->add_option("--sweep", sweep, "KEY=V1,V2,... (config key to vary)")->required();
    ablate->add_option("--out", out_dir, "parent directory for the runs")->required();

    CLI::App* report = app.add_subcommand("report", "re-emit metrics for a run directory");
    report->add_option("--run", run_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_suite(config_path, out_dir);
        if (train->parsed()) return cmd_train(config_path, out_dir, resume_path);
        if (eval->parsed()) return cmd_eval(ckpt_path, suite_dir, mode);
        if (ablate->parsed()) return cmd_ablate(config_path, sweep, out_dir);
        if (report->parsed()) return cmd_report(run_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;  // unreachable given require_subcommand
}
