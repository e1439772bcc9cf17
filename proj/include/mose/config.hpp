#pragma once

#include <cstdint>
#include <string>

#include "mose/adapters.hpp"
#include "mose/backbone.hpp"
#include "mose/tasks.hpp"
#include "mose/trainer.hpp"

namespace mose {

// Whole-run configuration: one sectioned key-value file drives suite
// generation, model construction, and training. Every key has a default, so
// an empty file is valid. Unknown keys are rejected so a sweep typo cannot
// silently fall back to a default.
struct RunConfig {
    BackboneConfig backbone;
    AdapterConfig adapter;
    int prompt_len = 4;
    int prompt_start = 0;
    int prompt_end = -1;  // -1 means the last layer
    TrainConfig trainer;  // trainer.adapter mirrors .adapter after parsing
    SuiteConfig suite;
    std::string out_dir;  // set by the caller, never read from the file
};

// Parses sectioned key-value text ([section] headers, key = value lines,
// '#' or ';' comments). Errors name the offending section.key, with a line
// prefix for syntax and type problems. The result is already validated.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// One assignment using the file names ("adapter.c" = "0.4"). Performs the
// same typed parse as the file reader but no cross-field checks; callers
// run validate_run_config once their edits are complete.
void set_config_key(RunConfig& cfg, const std::string& dotted, const std::string& value);

// Field and cross-field checks; throws ConfigError naming the first
// offending key.
void validate_run_config(const RunConfig& cfg);

// Canonical echo with every key in a fixed order. parse(render(c)) recovers
// c and render(parse(t)) is a fixed point, so the hash identifies the setup.
std::string render_config(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);

// Replaces trainer.seed when the MOSE_SEED variable is set and non-empty.
void apply_env_seed(RunConfig& cfg);

// Shortest decimal text that strtod parses back to exactly v.
std::string repr_double(double v);

} // namespace mose
