#include "dpnet/model.hpp"

#include <sstream>

namespace dpnet {

namespace {

std::string join_ints(const int* v, std::size_t count) {
    std::ostringstream os;
    for (std::size_t i = 0; i < count; ++i) {
        if (i) os << ",";
        os << v[i];
    }
    return os.str();
}

std::vector<int> split_ints(const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stoi(tok));
    }
    return out;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void ModelConfig::validate() const {
    if (image_hw < 32 || image_hw % 32 != 0) {
        throw ConfigError("ModelConfig: image_hw must be a positive multiple of 32");
    }
    encoder.validate();
    decoder.validate();
}

std::string ModelConfig::canonical() const {
    std::ostringstream os;
    os << "image_hw=" << image_hw;
    os << ";stem=" << encoder.stem_channels;
    os << ";stages=" << join_ints(encoder.stage_channels.data(), 4);
    os << ";blocks=" << join_ints(encoder.blocks_per_stage.data(), 4);
    os << ";kernels=" << join_ints(encoder.kernel_sizes.data(), encoder.kernel_sizes.size());
    os << ";groups=";
    if (encoder.groups.empty()) {
        os << "auto";
    } else {
        os << join_ints(encoder.groups.data(), encoder.groups.size());
    }
    os << ";ref_k=" << encoder.reference_k;
    os << ";mlp_hidden=" << encoder.mlp_hidden;
    os << ";softmax=" << (encoder.softmax_axis == SoftmaxAxis::kPerSlot ? "slot" : "vector");
    os << ";static=" << (encoder.static_baseline ? 1 : 0);
    os << ";d=" << decoder.width;
    os << ";n_bicfm=" << decoder.bicfm_blocks;
    os << ";dwf_level=" << decoder.dwf_target_level;
    return os.str();
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(canonical()); }

ModelConfig ModelConfig::from_canonical(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ';')) {
        auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw ValidationError("ModelConfig: malformed canonical entry '" + item + "'");
        }
        const std::string key = item.substr(0, eq);
        const std::string value = item.substr(eq + 1);
        if (key == "image_hw") {
            cfg.image_hw = std::stoi(value);
        } else if (key == "stem") {
            cfg.encoder.stem_channels = std::stoi(value);
        } else if (key == "stages") {
            auto v = split_ints(value);
            if (v.size() != 4) throw ValidationError("ModelConfig: stages needs 4 entries");
            std::copy(v.begin(), v.end(), cfg.encoder.stage_channels.begin());
        } else if (key == "blocks") {
            auto v = split_ints(value);
            if (v.size() != 4) throw ValidationError("ModelConfig: blocks needs 4 entries");
            std::copy(v.begin(), v.end(), cfg.encoder.blocks_per_stage.begin());
        } else if (key == "kernels") {
            cfg.encoder.kernel_sizes = split_ints(value);
        } else if (key == "groups") {
            cfg.encoder.groups = value == "auto" ? std::vector<int>{} : split_ints(value);
        } else if (key == "ref_k") {
            cfg.encoder.reference_k = std::stoi(value);
        } else if (key == "mlp_hidden") {
            cfg.encoder.mlp_hidden = std::stoi(value);
        } else if (key == "softmax") {
            cfg.encoder.softmax_axis =
                value == "vector" ? SoftmaxAxis::kWholeVector : SoftmaxAxis::kPerSlot;
            cfg.decoder.softmax_axis = cfg.encoder.softmax_axis;
        } else if (key == "static") {
            cfg.encoder.static_baseline = value == "1";
        } else if (key == "d") {
            cfg.decoder.width = std::stoi(value);
        } else if (key == "n_bicfm") {
            cfg.decoder.bicfm_blocks = std::stoi(value);
        } else if (key == "dwf_level") {
            cfg.decoder.dwf_target_level = std::stoi(value);
        } else {
            throw ValidationError("ModelConfig: unknown canonical key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

DPNet::DPNet(ParamSet& params, Rng& rng, const ModelConfig& config) : config_(config) {
    config_.validate();
    encoder_ = std::make_unique<Encoder>(params, rng, config_.encoder);
    decoder_ = std::make_unique<Decoder>(params, rng, config_.decoder,
                                         config_.encoder.stage_channels);
}

DPNet::ForwardResult DPNet::forward(Tape& tape, Value image) const {
    Encoder::ForwardDetail enc = encoder_->forward(tape, image);
    const Dims4 d = image.dims();
    Decoder::Out dec = decoder_->forward(tape, enc.pyramid, d.h, d.w);
    ForwardResult out;
    out.final_maps = std::move(dec.final_maps);
    out.aux_maps = dec.aux_maps;
    out.stage_alphas = std::move(enc.stage_alphas);
    return out;
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    Model m;
    Rng rng = Rng::keyed(seed, 0x6d6f64656cULL);
    m.net = std::make_unique<DPNet>(m.params, rng, config);
    return m;
}

}  // namespace dpnet
