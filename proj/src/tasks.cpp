#include "mose/tasks.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mose/error.hpp"
#include "mose/rng.hpp"

namespace fs = std::filesystem;

namespace mose {

int rule_for_task(int task) { return task % 3; }

int classes_for_rule(int rule) {
    switch (rule) {
        case 0: return 2;
        case 1: return 3;
        case 2: return 4;
    }
    throw ContractError("unknown label rule " + std::to_string(rule));
}

void validate_suite_config(const SuiteConfig& cfg) {
    if (cfg.n_tasks < 2)
        throw ConfigError("suite.tasks must be >= 2, got " + std::to_string(cfg.n_tasks));
    if (cfg.seq_len < 4)
        throw ConfigError("suite.seq_len must be >= 4, got " + std::to_string(cfg.seq_len));
    if (cfg.train_per_task < 1 || cfg.test_per_task < 1)
        throw ConfigError("suite split sizes must be >= 1");
    if (cfg.sigma < 0.0 || cfg.sigma > 1.0)
        throw ConfigError("suite.sigma must lie in [0, 1], got " + std::to_string(cfg.sigma));
    const int needed = filler_lo(cfg.n_tasks) + kMinFillers;
    if (cfg.vocab_size < needed)
        throw ConfigError("suite.vocab_size " + std::to_string(cfg.vocab_size) +
                          " is too small for " + std::to_string(cfg.n_tasks) +
                          " disjoint marker blocks (need >= " + std::to_string(needed) + ")");
}

namespace {

// Marker from the task's block, or from the shared pool with probability
// sigma. sub >= 0 restricts the draw to a two-token sub-block.
int pick_marker(Rng& rng, const SuiteConfig& cfg, int task, int sub) {
    const bool shared = rng.uniform() < cfg.sigma;
    const int base = shared ? 0 : marker_block_lo(task);
    if (sub >= 0) return base + 2 * sub + rng.uniform_int(0, 2);
    return base + rng.uniform_int(0, kMarkersPerTask);
}

// Filler pool width is a per-rule signal-to-noise decision: the count and
// position rules carry signals of one token-embedding unit or less, which a
// desk-sized backbone can only see once filler variation is nearly removed.
// Those rules use a constant filler and recover example entropy from a
// single salted slot instead. The majority rule rides a large count gap and
// keeps the full pool.
int pick_filler(Rng& rng, const SuiteConfig& cfg, int rule) {
    const int lo = filler_lo(cfg.n_tasks);
    if (rule == 0 || rule == 2) return lo;
    return rng.uniform_int(lo, cfg.vocab_size);
}

// Random non-marker token in the last position, unless a marker run already
// claimed it. Restores sequence diversity that constant fillers remove.
void salt_last_slot(Rng& rng, const SuiteConfig& cfg, std::vector<int>& toks,
                    int run_end) {
    const int last = static_cast<int>(toks.size()) - 1;
    if (run_end <= last)
        toks[last] = rng.uniform_int(filler_lo(cfg.n_tasks), cfg.vocab_size);
}

void salt_second_last_slot(Rng& rng, const SuiteConfig& cfg, std::vector<int>& toks,
                           int run_end) {
    const int slot = static_cast<int>(toks.size()) - 2;
    if (slot >= 0 && run_end <= slot)
        toks[slot] = rng.uniform_int(filler_lo(cfg.n_tasks), cfg.vocab_size);
}

// Distinct positions, ascending.
std::vector<int> pick_positions(Rng& rng, int seq_len, int count, int min_pos) {
    std::vector<int> all;
    for (int i = min_pos; i < seq_len; ++i) all.push_back(i);
    rng.shuffle(all);
    all.resize(std::min<std::size_t>(count, all.size()));
    std::sort(all.begin(), all.end());
    return all;
}

std::vector<int> make_tokens(Rng& rng, const SuiteConfig& cfg, int task, int rule,
                             int label) {
    const int L = cfg.seq_len;
    std::vector<int> toks(L);
    for (int& t : toks) t = pick_filler(rng, cfg, rule);

    switch (rule) {
        case 0: {  // parity of marker count: even -> class 0, odd -> class 1
            // Counts {2, 4} vs 3 keep the class centroids identical, so
            // frequency alone stays near chance. The markers form a leading
            // run of one repeated token (the sigma blend is drawn once);
            // scattering them instead spreads the count across position
            // noise a desk-sized frozen backbone cannot average away. Two
            // salted slots restore sequence diversity.
            const int base = rng.uniform() < cfg.sigma ? 0 : marker_block_lo(task);
            const int m = base + rng.uniform_int(0, 2);
            const int count = (label == 0) ? (rng.uniform() < 0.5 ? 2 : 4) : 3;
            for (int p = 0; p < count; ++p)
                toks[p] = m;
            salt_last_slot(rng, cfg, toks, count);
            salt_second_last_slot(rng, cfg, toks, count);
            break;
        }
        case 1: {  // majority: the winning sub-class places more markers
            const int loser = (L >= 9) ? 2 : 1;
            const int winner = 2 * loser + 1;
            std::vector<int> subs;
            for (int s = 0; s < 3; ++s) {
                const int n = (s == label) ? winner : loser;
                for (int i = 0; i < n; ++i) subs.push_back(s);
            }
            rng.shuffle(subs);
            std::vector<int> pos = pick_positions(rng, L, static_cast<int>(subs.size()), 0);
            for (std::size_t i = 0; i < pos.size(); ++i)
                toks[pos[i]] = pick_marker(rng, cfg, task, subs[i]);
            break;
        }
        case 2: {  // bucket of the first marker position
            // A run of three markers starting at p makes the leading
            // position carry roughly a fifth of the pooled embedding, which
            // is enough to survive the frozen mixing layers.
            const int lo = label * L / 4;
            const int hi = (label + 1) * L / 4;
            const int p = rng.uniform_int(lo, hi);
            for (int q = p; q < std::min(L, p + 3); ++q)
                toks[q] = pick_marker(rng, cfg, task, 0);
            salt_last_slot(rng, cfg, toks, p + 3);
            break;
        }
        default:
            throw ContractError("unknown label rule " + std::to_string(rule));
    }
    return toks;
}

std::vector<int> balanced_labels(Rng rng, int n, int n_classes) {
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = i % n_classes;
    rng.shuffle(labels);
    return labels;
}

std::vector<Example> make_split(Rng rng, const SuiteConfig& cfg, int task, int rule,
                                int n, int n_classes,
                                std::set<std::vector<int>>& seen) {
    std::vector<int> labels = balanced_labels(rng.stream("labels"), n, n_classes);
    Rng gen = rng.stream("tokens");
    std::vector<Example> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        std::vector<int> toks;
        int attempts = 0;
        do {
            if (++attempts > 1000)
                throw ConfigError("suite: cannot draw enough distinct sequences; "
                                  "increase seq_len or vocab_size");
            toks = make_tokens(gen, cfg, task, rule, labels[i]);
        } while (!seen.insert(toks).second);
        out.push_back({std::move(toks), labels[i]});
    }
    return out;
}

} // namespace

std::vector<SyntheticTask> generate_suite(const SuiteConfig& cfg) {
    validate_suite_config(cfg);
    Rng root = Rng(cfg.seed).stream("suite");
    std::vector<SyntheticTask> tasks;
    for (int t = 0; t < cfg.n_tasks; ++t) {
        SyntheticTask task;
        task.id = t;
        task.rule = rule_for_task(t);
        task.n_classes = classes_for_rule(task.rule);
        task.marker_lo = marker_block_lo(t);
        task.marker_hi = task.marker_lo + kMarkersPerTask;

        Rng tr = root.stream("task" + std::to_string(t));
        std::set<std::vector<int>> seen;  // shared across splits keeps them disjoint
        task.test = make_split(tr.stream("test"), cfg, t, task.rule,
                               cfg.test_per_task, task.n_classes, seen);
        task.train = make_split(tr.stream("train"), cfg, t, task.rule,
                                cfg.train_per_task, task.n_classes, seen);
        tasks.push_back(std::move(task));
    }
    return tasks;
}

namespace {

void write_examples(std::ofstream& f, const std::vector<Example>& xs) {
    for (const Example& e : xs) {
        for (std::size_t i = 0; i < e.tokens.size(); ++i) {
            if (i) f << ' ';
            f << e.tokens[i];
        }
        f << '\t' << e.label << '\n';
    }
}

Example parse_example(const std::string& line, const std::string& file, int lineno,
                      int n_classes) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
        throw ParseError(file + ":" + std::to_string(lineno) + ": missing tab before label");
    Example e;
    std::istringstream ts(line.substr(0, tab));
    int v;
    while (ts >> v) e.tokens.push_back(v);
    if (!ts.eof() || e.tokens.empty())
        throw ParseError(file + ":" + std::to_string(lineno) + ": bad token list");
    std::istringstream ls(line.substr(tab + 1));
    if (!(ls >> e.label) || !(ls >> std::ws).eof())
        throw ParseError(file + ":" + std::to_string(lineno) + ": bad label");
    if (e.label < 0 || e.label >= n_classes)
        throw ParseError(file + ":" + std::to_string(lineno) + ": label " +
                         std::to_string(e.label) + " outside [0, " +
                         std::to_string(n_classes) + ")");
    return e;
}

} // namespace

void export_suite(const std::vector<SyntheticTask>& tasks, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
    for (const SyntheticTask& t : tasks) {
        const std::string path = dir + "/task" + std::to_string(t.id) + ".txt";
        std::ofstream f(path);
        if (!f) throw IoError("cannot open " + path + " for writing");
        f << t.id << ' ' << t.n_classes << ' ' << t.train.size() << ' '
          << t.test.size() << ' ' << t.rule << '\n';
        write_examples(f, t.train);
        write_examples(f, t.test);
        if (!f) throw IoError("write failed for " + path);
    }
}

std::vector<SyntheticTask> import_suite(const std::string& dir) {
    std::vector<SyntheticTask> tasks;
    for (int n = 0;; ++n) {
        const std::string path = dir + "/task" + std::to_string(n) + ".txt";
        std::ifstream f(path);
        if (!f) break;

        std::string line;
        if (!std::getline(f, line))
            throw ParseError(path + ":1: missing header");
        SyntheticTask t;
        int n_train = 0, n_test = 0;
        {
            std::istringstream hs(line);
            if (!(hs >> t.id >> t.n_classes >> n_train >> n_test >> t.rule) ||
                !(hs >> std::ws).eof())
                throw ParseError(path + ":1: bad header, expected "
                                 "'id classes n_train n_test rule'");
        }
        if (t.n_classes < 2 || n_train < 0 || n_test < 0 || t.rule < 0 || t.rule > 2)
            throw ParseError(path + ":1: header values out of range");
        t.marker_lo = marker_block_lo(t.id);
        t.marker_hi = t.marker_lo + kMarkersPerTask;

        int lineno = 1;
        auto read_block = [&](int count, std::vector<Example>& dst) {
            for (int i = 0; i < count; ++i) {
                ++lineno;
                if (!std::getline(f, line))
                    throw ParseError(path + ":" + std::to_string(lineno) +
                                     ": file truncated, expected " + std::to_string(count) +
                                     " examples in this block");
                dst.push_back(parse_example(line, path, lineno, t.n_classes));
            }
        };
        read_block(n_train, t.train);
        read_block(n_test, t.test);
        tasks.push_back(std::move(t));
    }
    if (tasks.empty())
        throw IoError("no task files found under " + dir +
                      " (expected task0.txt, task1.txt, ...)");
    return tasks;
}

} // namespace mose
