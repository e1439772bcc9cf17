#pragma once

#include <cstdint>
#include <string>

#include "mose/config.hpp"
#include "mose/metrics.hpp"
#include "mose/model.hpp"

namespace mose {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
    RunConfig config;  // parsed back from the embedded text
    std::string config_text;
    std::uint64_t config_hash = 0;
    std::uint64_t backbone_seed = 0;
    int trained_through = 0;
    AccuracyMatrix matrix;   // rows filled when the checkpoint was written
    ContinualModel model;    // rebuilt from the config, then restored
};

// Binary, little-endian. Layout: magic, format version, total byte count,
// config hash, the canonical config text, backbone seed, live site tensors
// (weights and score tensors), the most recent head, one record per finished
// task (head, key, prompts, bit-packed masks), the accuracy rows, and a
// trailing 64-bit hash over everything before it. Live scores are saved even
// though inference only needs the frozen masks: they keep a resumed sequence
// byte-identical to an uninterrupted one.
void save_checkpoint(const ContinualModel& m, const RunConfig& cfg,
                     const AccuracyMatrix& matrix, const std::string& path);

// Validation order: minimum length, magic and version, recorded size,
// trailing hash, then structure. Each failure class has its own error type
// (VersionError, TruncationError, ChecksumError).
LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace mose
