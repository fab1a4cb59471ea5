#pragma once

#include <string>

#include "dpnet/model.hpp"

namespace dpnet {

struct CheckpointMeta {
    std::uint32_t version = 1;
    std::uint64_t config_hash = 0;
    std::string config_echo;  // canonical model config
    std::uint32_t epoch = 0;
};

// Versioned binary format: magic, version, config hash, config echo, epoch,
// then one record per tensor (name-length, name, rank, dims, little-endian
// f64 payload). Parameter values and momentum buffers are separate records;
// momentum records carry a "#momentum" name suffix. A human-readable text
// manifest is written alongside at <path>.txt. A save/load/save round trip is
// byte-identical. Writes are atomic (temp file + rename).
void save_checkpoint(const std::string& path, const ParamSet& params, const ModelConfig& config,
                     int epoch);

// Metadata only; used to rebuild the model from the config echo.
CheckpointMeta peek_checkpoint(const std::string& path);

// Fills an existing ParamSet (built from the echoed config); rejects version
// mismatches, hash/echo mismatches, and missing or mis-shaped tensors.
CheckpointMeta load_checkpoint(const std::string& path, ParamSet& params);

// Convenience: rebuild the model a checkpoint was saved from and load into it.
struct LoadedModel {
    Model model;
    CheckpointMeta meta;
};
LoadedModel load_model(const std::string& path);

}  // namespace dpnet
