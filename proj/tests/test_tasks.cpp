#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mose/backbone.hpp"
#include "mose/error.hpp"
#include "mose/tasks.hpp"
#include "mose/tensor.hpp"

using namespace mose;
namespace fs = std::filesystem;

namespace {

SuiteConfig small_cfg() {
    SuiteConfig cfg;
    cfg.n_tasks = 3;
    cfg.train_per_task = 60;
    cfg.test_per_task = 30;
    cfg.seq_len = 16;
    cfg.vocab_size = 64;
    cfg.seed = 11;
    return cfg;
}

// Marker positions of an example, classified by token range alone. Shared
// markers live in [0, kSharedMarkers); task t's private block right after.
bool is_marker(int tok, const SyntheticTask& t) {
    return tok < kSharedMarkers || (tok >= t.marker_lo && tok < t.marker_hi);
}

// Re-derives the label from the tokens using only the published rule
// definitions, independent of generator internals.
int oracle_label(const Example& e, const SyntheticTask& t, int seq_len) {
    std::vector<int> marker_pos;
    for (std::size_t i = 0; i < e.tokens.size(); ++i)
        if (is_marker(e.tokens[i], t)) marker_pos.push_back(static_cast<int>(i));

    if (t.rule == 0) return static_cast<int>(marker_pos.size()) % 2;

    if (t.rule == 1) {
        int votes[3] = {0, 0, 0};
        for (int p : marker_pos) {
            const int tok = e.tokens[p];
            const int base = tok < kSharedMarkers ? 0 : t.marker_lo;
            votes[(tok - base) / 2]++;
        }
        return static_cast<int>(std::max_element(votes, votes + 3) - votes);
    }

    // rule 2: bucket of the first marker position
    REQUIRE(!marker_pos.empty());
    const int p = marker_pos.front();
    for (int y = 0; y < 4; ++y)
        if (p >= y * seq_len / 4 && p < (y + 1) * seq_len / 4) return y;
    return -1;
}

std::set<std::vector<int>> sequences(const std::vector<Example>& xs) {
    std::set<std::vector<int>> s;
    for (const Example& e : xs) s.insert(e.tokens);
    return s;
}

fs::path scratch_dir(const std::string& leaf) {
    fs::path p = fs::temp_directory_path() / leaf;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_SUITE("tasks") {

TEST_CASE("config validation rejects degenerate suites") {
    SuiteConfig cfg = small_cfg();
    CHECK_NOTHROW(validate_suite_config(cfg));

    SuiteConfig bad = cfg;
    bad.n_tasks = 1;
    CHECK_THROWS_AS(validate_suite_config(bad), ConfigError);
    bad = cfg;
    bad.seq_len = 3;
    CHECK_THROWS_AS(validate_suite_config(bad), ConfigError);
    bad = cfg;
    bad.sigma = 1.5;
    CHECK_THROWS_AS(validate_suite_config(bad), ConfigError);
    bad = cfg;
    bad.test_per_task = 0;
    CHECK_THROWS_AS(validate_suite_config(bad), ConfigError);

    // five tasks need 6 + 30 marker slots plus 8 fillers
    bad = cfg;
    bad.n_tasks = 5;
    bad.vocab_size = 43;
    CHECK_THROWS_AS(validate_suite_config(bad), ConfigError);
    bad.vocab_size = 44;
    CHECK_NOTHROW(validate_suite_config(bad));
}

TEST_CASE("same config generates byte-identical suites") {
    auto a = generate_suite(small_cfg());
    auto b = generate_suite(small_cfg());
    CHECK(a == b);

    SuiteConfig other = small_cfg();
    other.seed = 12;
    CHECK_FALSE(generate_suite(other) == a);
}

TEST_CASE("rules cycle and class counts follow them") {
    CHECK(rule_for_task(0) == 0);
    CHECK(rule_for_task(1) == 1);
    CHECK(rule_for_task(2) == 2);
    CHECK(rule_for_task(3) == 0);
    CHECK(classes_for_rule(0) == 2);
    CHECK(classes_for_rule(1) == 3);
    CHECK(classes_for_rule(2) == 4);

    auto suite = generate_suite(small_cfg());
    for (const SyntheticTask& t : suite) {
        CHECK(t.rule == rule_for_task(t.id));
        CHECK(t.n_classes == classes_for_rule(t.rule));
        CHECK(t.marker_lo == kSharedMarkers + kMarkersPerTask * t.id);
    }
}

TEST_CASE("sigma zero keeps marker vocabularies pairwise disjoint") {
    SuiteConfig cfg = small_cfg();
    cfg.n_tasks = 5;
    cfg.sigma = 0.0;
    cfg.vocab_size = 64;
    auto suite = generate_suite(cfg);

    // With no shared draws, every non-filler token of task t sits in its
    // own block, so the observed marker sets cannot intersect.
    std::vector<std::set<int>> used(suite.size());
    const int fillers = filler_lo(cfg.n_tasks);
    for (const SyntheticTask& t : suite) {
        auto scan = [&](const std::vector<Example>& xs) {
            for (const Example& e : xs)
                for (int tok : e.tokens)
                    if (tok < fillers) {
                        CHECK(tok >= t.marker_lo);
                        CHECK(tok < t.marker_hi);
                        used[t.id].insert(tok);
                    }
        };
        scan(t.train);
        scan(t.test);
    }
    for (std::size_t i = 0; i < used.size(); ++i)
        for (std::size_t j = i + 1; j < used.size(); ++j) {
            std::vector<int> both;
            std::set_intersection(used[i].begin(), used[i].end(), used[j].begin(),
                                  used[j].end(), std::back_inserter(both));
            CHECK(both.empty());
        }
}

TEST_CASE("splits are balanced within one example and mutually disjoint") {
    auto suite = generate_suite(small_cfg());
    for (const SyntheticTask& t : suite) {
        for (const auto* split : {&t.train, &t.test}) {
            std::map<int, int> counts;
            for (const Example& e : *split) {
                CHECK(e.label >= 0);
                CHECK(e.label < t.n_classes);
                counts[e.label]++;
            }
            CHECK(static_cast<int>(counts.size()) == t.n_classes);
            int lo = static_cast<int>(split->size()), hi = 0;
            for (auto& [_, c] : counts) {
                lo = std::min(lo, c);
                hi = std::max(hi, c);
            }
            CHECK(hi - lo <= 1);
        }
        auto tr = sequences(t.train), te = sequences(t.test);
        CHECK(tr.size() == t.train.size());  // no duplicate sequences
        CHECK(te.size() == t.test.size());
        std::vector<std::vector<int>> both;
        std::set_intersection(tr.begin(), tr.end(), te.begin(), te.end(),
                              std::back_inserter(both));
        CHECK(both.empty());
    }
}

TEST_CASE("every label is re-derivable from the tokens alone") {
    for (double sigma : {0.0, 0.2, 0.5}) {
        SuiteConfig cfg = small_cfg();
        cfg.sigma = sigma;
        auto suite = generate_suite(cfg);
        for (const SyntheticTask& t : suite) {
            for (const Example& e : t.train)
                CHECK(oracle_label(e, t, cfg.seq_len) == e.label);
            for (const Example& e : t.test)
                CHECK(oracle_label(e, t, cfg.seq_len) == e.label);
        }
    }
}

TEST_CASE("token frequencies separate the majority task but not parity") {
    SuiteConfig cfg;  // full default sizing
    auto suite = generate_suite(cfg);

    // Nearest-centroid over raw token histograms.
    auto freq_acc = [&](const SyntheticTask& t) {
        std::vector<std::vector<double>> centroid(
            t.n_classes, std::vector<double>(cfg.vocab_size, 0.0));
        std::vector<int> n(t.n_classes, 0);
        for (const Example& e : t.train) {
            for (int tok : e.tokens) centroid[e.label][tok] += 1.0;
            n[e.label]++;
        }
        for (int c = 0; c < t.n_classes; ++c)
            for (double& v : centroid[c]) v /= n[c];
        int hits = 0;
        for (const Example& e : t.test) {
            std::vector<double> h(cfg.vocab_size, 0.0);
            for (int tok : e.tokens) h[tok] += 1.0;
            int best = 0;
            double best_d = 1e300;
            for (int c = 0; c < t.n_classes; ++c) {
                double d = 0.0;
                for (int v = 0; v < cfg.vocab_size; ++v)
                    d += (h[v] - centroid[c][v]) * (h[v] - centroid[c][v]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            hits += best == e.label;
        }
        return static_cast<double>(hits) / t.test.size();
    };

    CHECK(freq_acc(suite[1]) >= 0.95);  // majority rule is pure frequency
    const double parity = freq_acc(suite[0]);  // equal mean counts per class
    CHECK(parity >= 0.30);
    CHECK(parity <= 0.70);
}

TEST_CASE("export then import reproduces the suite exactly") {
    fs::path dir = scratch_dir("mose_suite_roundtrip");
    auto suite = generate_suite(small_cfg());
    export_suite(suite, dir.string());
    auto back = import_suite(dir.string());
    CHECK(back == suite);
    fs::remove_all(dir);
}

TEST_CASE("hand-written file imports to the expected examples") {
    fs::path dir = scratch_dir("mose_suite_fixture");
    {
        std::ofstream f(dir / "task0.txt");
        f << "0 2 1 1 0\n"
          << "1 2 3\t0\n"
          << "7 8 9\t1\n";
    }
    auto suite = import_suite(dir.string());
    REQUIRE(suite.size() == 1);
    const SyntheticTask& t = suite[0];
    CHECK(t.id == 0);
    CHECK(t.n_classes == 2);
    CHECK(t.rule == 0);
    REQUIRE(t.train.size() == 1);
    REQUIRE(t.test.size() == 1);
    CHECK(t.train[0] == Example{{1, 2, 3}, 0});
    CHECK(t.test[0] == Example{{7, 8, 9}, 1});
    fs::remove_all(dir);
}

TEST_CASE("truncated and malformed files raise parse errors naming the line") {
    fs::path dir = scratch_dir("mose_suite_bad");

    auto write0 = [&](const std::string& body) {
        std::ofstream f(dir / "task0.txt", std::ios::trunc);
        f << body;
    };

    write0("0 2 2 1 0\n1 2\t0\n");  // header promises 2 train + 1 test
    try {
        import_suite(dir.string());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find(":3:") != std::string::npos);
        CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }

    write0("0 2 1 1 0\n1 2 0\n7\t1\n");  // no tab on line 2
    try {
        import_suite(dir.string());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }

    write0("0 2 1 1 0\n1 2\tx\n7\t1\n");  // non-numeric label
    CHECK_THROWS_AS(import_suite(dir.string()), ParseError);

    write0("0 2 1 1 0\n1 2\t5\n7\t1\n");  // label outside [0, C)
    CHECK_THROWS_AS(import_suite(dir.string()), ParseError);

    write0("oops\n");
    CHECK_THROWS_AS(import_suite(dir.string()), ParseError);

    fs::remove_all(dir);
    fs::create_directories(dir);
    CHECK_THROWS_AS(import_suite(dir.string()), IoError);  // nothing to read
    fs::remove_all(dir);
}

TEST_CASE("disjoint tasks produce separable query features") {
    SuiteConfig cfg = small_cfg();
    cfg.sigma = 0.0;
    auto suite = generate_suite(cfg);

    BackboneConfig bc;
    bc.vocab_size = cfg.vocab_size;
    bc.d_model = 32;
    bc.n_layers = 2;
    bc.n_heads = 4;
    bc.max_seq = cfg.seq_len;
    FrozenBackbone b = build_backbone(bc, 5);

    const int per_task = 12;
    std::vector<std::vector<Tensor>> q(suite.size());
    for (const SyntheticTask& t : suite)
        for (int i = 0; i < per_task; ++i)
            q[t.id].push_back(query_feature(b, t.test[i].tokens));

    auto cos = [](const Tensor& a, const Tensor& b2) {
        double s = 0.0;  // both are unit-norm already
        for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b2.data()[i];
        return s;
    };

    double within = 0.0, across = 0.0;
    int nw = 0, na = 0;
    for (std::size_t t1 = 0; t1 < q.size(); ++t1)
        for (std::size_t t2 = t1; t2 < q.size(); ++t2)
            for (int i = 0; i < per_task; ++i)
                for (int j = (t1 == t2 ? i + 1 : 0); j < per_task; ++j) {
                    const double c = cos(q[t1][i], q[t2][j]);
                    if (t1 == t2) {
                        within += c;
                        ++nw;
                    } else {
                        across += c;
                        ++na;
                    }
                }
    CHECK(within / nw > across / na);
}

} // TEST_SUITE

