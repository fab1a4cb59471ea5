#pragma once

#include <map>
#include <string>
#include <vector>

#include "dpnet/model.hpp"

namespace dpnet {

// Flat key = value configuration; file lines plus --key value overrides.
class KeyValues {
public:
    static KeyValues from_file(const std::string& path);

    void set(const std::string& key, const std::string& value) { map_[key] = value; }
    bool has(const std::string& key) const { return map_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;

    const std::map<std::string, std::string>& entries() const { return map_; }

private:
    std::map<std::string, std::string> map_;
};

struct TrainConfig {
    std::string train_root;
    std::string val_root;
    std::string out_dir = "runs/default";
    int epochs = 20;
    int batch_size = 8;
    int threads = 0;  // 0 => hardware concurrency
    double lr_backbone_max = 0.005;
    double lr_other_max = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double warmup_fraction = 0.1;
    std::uint64_t seed = 1;
    bool augment = true;
    ModelConfig model;

    void validate() const;
};

// Presets: "desk" is the CI default; "paper" preserves the published recipe
// (352x352 inputs, batch 32, 32 epochs).
TrainConfig preset_config(const std::string& preset);

// Builds a TrainConfig from a preset plus overrides; rejects unknown keys.
TrainConfig train_config_from(const KeyValues& kv);

}  // namespace dpnet
