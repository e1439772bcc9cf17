#include "mose/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mose/error.hpp"
#include "mose/rng.hpp"

namespace mose {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const char* want, const std::string& got) {
    throw ConfigError("'" + key + "' expects " + want + ", got '" + got + "'");
}

int parse_int(const std::string& key, const std::string& v) {
    int out = 0;
    const char* b = v.data();
    const char* e = b + v.size();
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e) bad_value(key, "an integer", v);
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const char* b = v.data();
    const char* e = b + v.size();
    if (!v.empty() && v[0] == '-') bad_value(key, "an unsigned integer", v);
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e) bad_value(key, "an unsigned integer", v);
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    const char* b = v.data();
    const char* e = b + v.size();
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e || !std::isfinite(out)) bad_value(key, "a number", v);
    return out;
}

void parse_exclude(const std::string& v, int& lo, int& hi) {
    if (v == "none") {
        lo = hi = -1;
        return;
    }
    const std::size_t dash = v.find('-');
    if (dash == std::string::npos) {
        lo = hi = parse_int("adapter.exclude", v);
    } else {
        lo = parse_int("adapter.exclude", v.substr(0, dash));
        hi = parse_int("adapter.exclude", v.substr(dash + 1));
    }
    if (lo < 0 || hi < lo)
        bad_value("adapter.exclude", "'none', a layer, or 'lo-hi'", v);
}

std::string render_exclude(int lo, int hi) {
    if (lo < 0) return "none";
    if (lo == hi) return std::to_string(lo);
    return std::to_string(lo) + "-" + std::to_string(hi);
}

} // namespace

std::string repr_double(double v) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

void set_config_key(RunConfig& cfg, const std::string& dotted, const std::string& value) {
    BackboneConfig& b = cfg.backbone;
    AdapterConfig& a = cfg.adapter;
    TrainConfig& t = cfg.trainer;
    SuiteConfig& s = cfg.suite;

    if (dotted == "backbone.vocab_size") b.vocab_size = parse_int(dotted, value);
    else if (dotted == "backbone.d_model") b.d_model = parse_int(dotted, value);
    else if (dotted == "backbone.n_layers") b.n_layers = parse_int(dotted, value);
    else if (dotted == "backbone.n_heads") b.n_heads = parse_int(dotted, value);
    else if (dotted == "backbone.max_seq") b.max_seq = parse_int(dotted, value);
    else if (dotted == "adapter.kind") {
        if (value == "mose") a.kind = AdapterKind::MoSE;
        else if (value == "lora") a.kind = AdapterKind::LoRA;
        else if (value == "moe") a.kind = AdapterKind::MoE;
        else bad_value(dotted, "one of mose|lora|moe", value);
    }
    else if (dotted == "adapter.experts") a.n_experts = parse_int(dotted, value);
    else if (dotted == "adapter.top_k") a.top_k = parse_int(dotted, value);
    else if (dotted == "adapter.c") a.density = parse_real(dotted, value);
    else if (dotted == "adapter.rank") a.rank = parse_int(dotted, value);
    else if (dotted == "adapter.alpha") a.alpha = parse_real(dotted, value);
    else if (dotted == "adapter.exclude") parse_exclude(value, a.exclude_lo, a.exclude_hi);
    else if (dotted == "prompt.len") cfg.prompt_len = parse_int(dotted, value);
    else if (dotted == "prompt.start") cfg.prompt_start = parse_int(dotted, value);
    else if (dotted == "prompt.end") cfg.prompt_end = parse_int(dotted, value);
    else if (dotted == "trainer.lambda_pull") t.lambda_pull = parse_real(dotted, value);
    else if (dotted == "trainer.epochs") t.epochs = parse_int(dotted, value);
    else if (dotted == "trainer.batch_size") t.batch_size = parse_int(dotted, value);
    else if (dotted == "trainer.lr") t.lr = parse_real(dotted, value);
    else if (dotted == "trainer.optimizer") {
        if (value == "adam") t.optimizer = OptimizerKind::Adam;
        else if (value == "sgd") t.optimizer = OptimizerKind::Sgd;
        else bad_value(dotted, "one of adam|sgd", value);
    }
    else if (dotted == "trainer.clip_norm") t.clip_norm = parse_real(dotted, value);
    else if (dotted == "trainer.seed") t.seed = parse_u64(dotted, value);
    else if (dotted == "trainer.mode") {
        if (value == "sequential") t.mode = TrainMode::Sequential;
        else if (value == "joint") t.mode = TrainMode::Joint;
        else bad_value(dotted, "one of sequential|joint", value);
    }
    else if (dotted == "trainer.eval") {
        if (value == "til") t.eval = EvalMode::TIL;
        else if (value == "tail") t.eval = EvalMode::TaIL;
        else bad_value(dotted, "one of til|tail", value);
    }
    else if (dotted == "suite.tasks") s.n_tasks = parse_int(dotted, value);
    else if (dotted == "suite.train_per_task") s.train_per_task = parse_int(dotted, value);
    else if (dotted == "suite.test_per_task") s.test_per_task = parse_int(dotted, value);
    else if (dotted == "suite.seq_len") s.seq_len = parse_int(dotted, value);
    else if (dotted == "suite.sigma") s.sigma = parse_real(dotted, value);
    else if (dotted == "suite.vocab_size") s.vocab_size = parse_int(dotted, value);
    else if (dotted == "suite.seed") s.seed = parse_u64(dotted, value);
    else throw ConfigError("unknown key '" + dotted + "'");

    cfg.trainer.adapter = cfg.adapter;
}

void validate_run_config(const RunConfig& cfg) {
    const BackboneConfig& b = cfg.backbone;
    if (b.vocab_size < 2)
        throw ConfigError("backbone.vocab_size must be >= 2, got " +
                          std::to_string(b.vocab_size));
    if (b.n_layers < 1)
        throw ConfigError("backbone.n_layers must be >= 1, got " +
                          std::to_string(b.n_layers));
    if (b.n_heads < 1)
        throw ConfigError("backbone.n_heads must be >= 1, got " + std::to_string(b.n_heads));
    if (b.d_model < 1 || b.d_model % b.n_heads != 0)
        throw ConfigError("backbone.d_model must be a positive multiple of "
                          "backbone.n_heads, got " + std::to_string(b.d_model));
    if (b.max_seq < 1)
        throw ConfigError("backbone.max_seq must be >= 1, got " + std::to_string(b.max_seq));

    if (!(cfg.adapter.density > 0.0) || cfg.adapter.density > 1.0)
        throw ConfigError("adapter.c must lie in (0, 1], got " +
                          repr_double(cfg.adapter.density));
    if (!(cfg.adapter.alpha > 0.0))
        throw ConfigError("adapter.alpha must be > 0, got " + repr_double(cfg.adapter.alpha));
    validate_adapter_config(cfg.adapter, b.n_layers);

    if (cfg.prompt_len < 0)
        throw ConfigError("prompt.len must be >= 0, got " + std::to_string(cfg.prompt_len));
    if (cfg.prompt_len > 0) {
        if (cfg.prompt_start < 0 || cfg.prompt_start >= b.n_layers)
            throw ConfigError("prompt.start must lie in [0, " +
                              std::to_string(b.n_layers - 1) + "], got " +
                              std::to_string(cfg.prompt_start));
        if (cfg.prompt_end < -1 || cfg.prompt_end >= b.n_layers)
            throw ConfigError("prompt.end must be -1 or lie in [0, " +
                              std::to_string(b.n_layers - 1) + "], got " +
                              std::to_string(cfg.prompt_end));
        const int pe = cfg.prompt_end < 0 ? b.n_layers - 1 : cfg.prompt_end;
        if (pe < cfg.prompt_start)
            throw ConfigError("prompt.end " + std::to_string(pe) +
                              " precedes prompt.start " + std::to_string(cfg.prompt_start));
        const int xlo = cfg.adapter.exclude_lo, xhi = cfg.adapter.exclude_hi;
        if (xlo >= 0) {
            if (xlo > cfg.prompt_start && xhi < pe)
                throw ConfigError("adapter.exclude [" + std::to_string(xlo) + ", " +
                                  std::to_string(xhi) + "] splits the prompt range [" +
                                  std::to_string(cfg.prompt_start) + ", " +
                                  std::to_string(pe) + "]");
            if (xlo <= cfg.prompt_start && xhi >= pe)
                throw ConfigError("prompt range [" + std::to_string(cfg.prompt_start) +
                                  ", " + std::to_string(pe) +
                                  "] is fully excluded; set prompt.len = 0 instead");
        }
    }

    if (cfg.trainer.batch_size < 1)
        throw ConfigError("trainer.batch_size must be >= 1, got " +
                          std::to_string(cfg.trainer.batch_size));
    if (cfg.trainer.clip_norm < 0.0)
        throw ConfigError("trainer.clip_norm must be >= 0, got " +
                          repr_double(cfg.trainer.clip_norm));
    validate_train_config(cfg.trainer);

    validate_suite_config(cfg.suite);
    if (cfg.suite.vocab_size > b.vocab_size)
        throw ConfigError("suite.vocab_size " + std::to_string(cfg.suite.vocab_size) +
                          " exceeds backbone.vocab_size " + std::to_string(b.vocab_size));
    if (cfg.suite.seq_len > b.max_seq)
        throw ConfigError("suite.seq_len " + std::to_string(cfg.suite.seq_len) +
                          " exceeds backbone.max_seq " + std::to_string(b.max_seq));
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string raw, section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        const std::string at = "line " + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(at + "unterminated section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "backbone" && section != "adapter" && section != "prompt" &&
                section != "trainer" && section != "suite")
                throw ConfigError(at + "unknown section '" + section + "'");
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(at + "expected key = value, got '" + line + "'");
        if (section.empty())
            throw ConfigError(at + "assignment outside any [section]");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(at + "empty key");
        try {
            set_config_key(cfg, section + "." + key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(at + e.what());
        }
    }
    validate_run_config(cfg);
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::string render_config(const RunConfig& cfg) {
    std::ostringstream o;
    o << "[backbone]\n"
      << "vocab_size = " << cfg.backbone.vocab_size << "\n"
      << "d_model = " << cfg.backbone.d_model << "\n"
      << "n_layers = " << cfg.backbone.n_layers << "\n"
      << "n_heads = " << cfg.backbone.n_heads << "\n"
      << "max_seq = " << cfg.backbone.max_seq << "\n"
      << "\n[adapter]\n"
      << "kind = " << adapter_kind_name(cfg.adapter.kind) << "\n"
      << "experts = " << cfg.adapter.n_experts << "\n"
      << "top_k = " << cfg.adapter.top_k << "\n"
      << "c = " << repr_double(cfg.adapter.density) << "\n"
      << "rank = " << cfg.adapter.rank << "\n"
      << "alpha = " << repr_double(cfg.adapter.alpha) << "\n"
      << "exclude = " << render_exclude(cfg.adapter.exclude_lo, cfg.adapter.exclude_hi)
      << "\n"
      << "\n[prompt]\n"
      << "len = " << cfg.prompt_len << "\n"
      << "start = " << cfg.prompt_start << "\n"
      << "end = " << cfg.prompt_end << "\n"
      << "\n[trainer]\n"
      << "lambda_pull = " << repr_double(cfg.trainer.lambda_pull) << "\n"
      << "epochs = " << cfg.trainer.epochs << "\n"
      << "batch_size = " << cfg.trainer.batch_size << "\n"
      << "lr = " << repr_double(cfg.trainer.lr) << "\n"
      << "optimizer = " << optimizer_kind_name(cfg.trainer.optimizer) << "\n"
      << "clip_norm = " << repr_double(cfg.trainer.clip_norm) << "\n"
      << "seed = " << cfg.trainer.seed << "\n"
      << "mode = " << train_mode_name(cfg.trainer.mode) << "\n"
      << "eval = " << eval_mode_name(cfg.trainer.eval) << "\n"
      << "\n[suite]\n"
      << "tasks = " << cfg.suite.n_tasks << "\n"
      << "train_per_task = " << cfg.suite.train_per_task << "\n"
      << "test_per_task = " << cfg.suite.test_per_task << "\n"
      << "seq_len = " << cfg.suite.seq_len << "\n"
      << "sigma = " << repr_double(cfg.suite.sigma) << "\n"
      << "vocab_size = " << cfg.suite.vocab_size << "\n"
      << "seed = " << cfg.suite.seed << "\n";
    return o.str();
}

std::uint64_t config_hash(const RunConfig& cfg) {
    const std::string text = render_config(cfg);
    return fnv1a64(text.data(), text.size());
}

void apply_env_seed(RunConfig& cfg) {
    const char* v = std::getenv("MOSE_SEED");
    if (v == nullptr || *v == '\0') return;
    cfg.trainer.seed = parse_u64("MOSE_SEED", v);
}

} // namespace mose
