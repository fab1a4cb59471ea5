#include "dpnet/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace dpnet {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys{
        "preset",        "seed",          "epochs",          "batch_size",
        "threads",       "lr_backbone_max", "lr_other_max",  "momentum",
        "weight_decay",  "warmup_fraction", "train_root",    "val_root",
        "out_dir",       "augment",       "image_hw",        "stem_channels",
        "stage_channels", "blocks_per_stage", "kernel_sizes", "groups",
        "reference_k",   "mlp_hidden",    "softmax_axis",    "static_baseline",
        "decoder_width", "bicfm_blocks",  "dwf_target_level",
    };
    return keys;
}

}  // namespace

KeyValues KeyValues::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    KeyValues kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string body = trim(line);
        if (body.empty() || body[0] == '#') continue;
        auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config '" + path + "' line " + std::to_string(line_no) +
                              ": expected key = value");
        }
        kv.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    }
    return kv;
}

std::string KeyValues::get(const std::string& key, const std::string& fallback) const {
    auto it = map_.find(key);
    return it == map_.end() ? fallback : it->second;
}

int KeyValues::get_int(const std::string& key, int fallback) const {
    auto it = map_.find(key);
    if (it == map_.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + it->second + "'");
    }
}

double KeyValues::get_double(const std::string& key, double fallback) const {
    auto it = map_.find(key);
    if (it == map_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + it->second + "'");
    }
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
    auto it = map_.find(key);
    if (it == map_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = map_.find(key);
    if (it == map_.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected unsigned integer, got '" +
                          it->second + "'");
    }
}

std::vector<int> KeyValues::get_ints(const std::string& key,
                                     const std::vector<int>& fallback) const {
    auto it = map_.find(key);
    if (it == map_.end()) return fallback;
    std::vector<int> out;
    std::istringstream is(it->second);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected integer list, got '" +
                              it->second + "'");
        }
    }
    return out;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (threads < 0) throw ConfigError("TrainConfig: threads must be >= 0");
    if (lr_backbone_max <= 0.0 || lr_other_max <= 0.0) {
        throw ConfigError("TrainConfig: learning rates must be > 0");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("TrainConfig: momentum must be in [0,1)");
    }
    if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
        throw ConfigError("TrainConfig: warmup_fraction must be in [0,1)");
    }
    model.validate();
}

TrainConfig preset_config(const std::string& preset) {
    TrainConfig cfg;
    if (preset == "desk" || preset.empty()) {
        return cfg;
    }
    if (preset == "paper") {
        cfg.model.image_hw = 352;
        cfg.batch_size = 32;
        cfg.epochs = 32;
        return cfg;
    }
    throw ConfigError("unknown preset '" + preset + "' (expected desk or paper)");
}

TrainConfig train_config_from(const KeyValues& kv) {
    for (const auto& [key, value] : kv.entries()) {
        if (!known_keys().count(key)) {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    TrainConfig cfg = preset_config(kv.get("preset", "desk"));
    cfg.seed = kv.get_u64("seed", cfg.seed);
    cfg.epochs = kv.get_int("epochs", cfg.epochs);
    cfg.batch_size = kv.get_int("batch_size", cfg.batch_size);
    cfg.threads = kv.get_int("threads", cfg.threads);
    cfg.lr_backbone_max = kv.get_double("lr_backbone_max", cfg.lr_backbone_max);
    cfg.lr_other_max = kv.get_double("lr_other_max", cfg.lr_other_max);
    cfg.momentum = kv.get_double("momentum", cfg.momentum);
    cfg.weight_decay = kv.get_double("weight_decay", cfg.weight_decay);
    cfg.warmup_fraction = kv.get_double("warmup_fraction", cfg.warmup_fraction);
    cfg.train_root = kv.get("train_root", cfg.train_root);
    cfg.val_root = kv.get("val_root", cfg.val_root);
    cfg.out_dir = kv.get("out_dir", cfg.out_dir);
    cfg.augment = kv.get_bool("augment", cfg.augment);

    ModelConfig& m = cfg.model;
    m.image_hw = kv.get_int("image_hw", m.image_hw);
    m.encoder.stem_channels = kv.get_int("stem_channels", m.encoder.stem_channels);
    auto stages = kv.get_ints("stage_channels",
                              {m.encoder.stage_channels.begin(), m.encoder.stage_channels.end()});
    if (stages.size() != 4) throw ConfigError("stage_channels needs exactly 4 entries");
    std::copy(stages.begin(), stages.end(), m.encoder.stage_channels.begin());
    auto blocks = kv.get_ints("blocks_per_stage", {m.encoder.blocks_per_stage.begin(),
                                                   m.encoder.blocks_per_stage.end()});
    if (blocks.size() != 4) throw ConfigError("blocks_per_stage needs exactly 4 entries");
    std::copy(blocks.begin(), blocks.end(), m.encoder.blocks_per_stage.begin());
    m.encoder.kernel_sizes = kv.get_ints("kernel_sizes", m.encoder.kernel_sizes);
    if (kv.has("groups") && kv.get("groups", "") != "auto") {
        m.encoder.groups = kv.get_ints("groups", {});
    }
    m.encoder.reference_k = kv.get_int("reference_k", m.encoder.reference_k);
    m.encoder.mlp_hidden = kv.get_int("mlp_hidden", m.encoder.mlp_hidden);
    const std::string axis = kv.get("softmax_axis", "slot");
    if (axis != "slot" && axis != "vector") {
        throw ConfigError("softmax_axis must be 'slot' or 'vector'");
    }
    m.encoder.softmax_axis = axis == "slot" ? SoftmaxAxis::kPerSlot : SoftmaxAxis::kWholeVector;
    m.decoder.softmax_axis = m.encoder.softmax_axis;
    m.encoder.static_baseline = kv.get_bool("static_baseline", m.encoder.static_baseline);
    m.decoder.width = kv.get_int("decoder_width", m.decoder.width);
    m.decoder.bicfm_blocks = kv.get_int("bicfm_blocks", m.decoder.bicfm_blocks);
    m.decoder.dwf_target_level = kv.get_int("dwf_target_level", m.decoder.dwf_target_level);

    cfg.validate();
    return cfg;
}

}  // namespace dpnet
