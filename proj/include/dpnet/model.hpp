#pragma once

#include <memory>
#include <string>

#include "dpnet/decoder.hpp"

namespace dpnet {

struct ModelConfig {
    int image_hw = 64;
    EncoderConfig encoder;
    DecoderConfig decoder;

    void validate() const;
    // Canonical architecture string; its hash guards checkpoint compatibility.
    std::string canonical() const;
    std::uint64_t hash() const;
    static ModelConfig from_canonical(const std::string& text);
};

// The full network: DPResNet-mini encoder plus BiCFM/DWF decoder.
class DPNet {
public:
    DPNet(ParamSet& params, Rng& rng, const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const Encoder& encoder() const { return *encoder_; }
    const Decoder& decoder() const { return *decoder_; }

    struct ForwardResult {
        std::vector<Value> final_maps;  // N logits maps at input resolution
        std::array<Value, 4> aux_maps;  // levels 2..5
        std::array<std::vector<Value>, 4> stage_alphas;
    };
    ForwardResult forward(Tape& tape, Value image) const;

private:
    ModelConfig config_;
    std::unique_ptr<Encoder> encoder_;
    std::unique_ptr<Decoder> decoder_;
};

// Builds the model with deterministic parameter initialization.
struct Model {
    ParamSet params;
    std::unique_ptr<DPNet> net;
};

Model build_model(const ModelConfig& config, std::uint64_t seed);

std::uint64_t fnv1a64(const std::string& text);

}  // namespace dpnet
