#pragma once

#include <array>
#include <string>
#include <vector>

#include "dpnet/backbone.hpp"

namespace dpnet {

// Learned 3x3 same-size conv + bias + ReLU; the basic decoder unit.
class ConvUnit {
public:
    ConvUnit() = default;
    ConvUnit(ParamSet& params, Rng& rng, const std::string& prefix, int c_in, int c_out,
             int stride = 1);
    Value forward(Tape& tape, Value x) const;

private:
    Parameter* w_ = nullptr;
    Parameter* b_ = nullptr;
    int stride_ = 1;
};

// Cross fusion of a lateral and a vertical feature of equal dims: each side
// is modulated by a conv of the other, then the sum is fused by a third conv.
class CfmFuse {
public:
    CfmFuse() = default;
    CfmFuse(ParamSet& params, Rng& rng, const std::string& prefix, int width);
    Value forward(Tape& tape, Value lateral, Value vertical) const;

private:
    ConvUnit cross_v_;  // applied to the vertical, gates the lateral
    ConvUnit cross_l_;  // applied to the lateral, gates the vertical
    ConvUnit out_;
};

// One bidirectional pass: top-down CFM sweep from level 5 to 2, bottom-up
// sweep from level 2 to 5, then input shortcuts added onto every level.
class BiCfm {
public:
    BiCfm() = default;
    BiCfm(ParamSet& params, Rng& rng, const std::string& prefix, int width);

    struct Out {
        PyramidV out;    // shortcut-added lateral outputs V_i
        PyramidV fused;  // top-down fused features (the auxiliary taps)
    };
    Out forward(Tape& tape, const PyramidV& in) const;

private:
    ConvUnit top_;                  // level-5 entry conv
    std::array<CfmFuse, 3> td_;     // top-down fusions at levels 4,3,2
    std::array<CfmFuse, 3> bu_;     // bottom-up fusions at levels 3,4,5
    std::array<ConvUnit, 3> down_;  // learned stride-2 downsampling convs
};

// Dynamic weighted fusion toward one target level: resize all levels to the
// target, derive per-channel simplex weights across the 4 source levels from
// GAP statistics, and take the convex combination. The module also owns a
// post-fusion conv used by the model head path (dwf_fuse itself stays the
// pure weighted sum).
class Dwf {
public:
    Dwf() = default;
    Dwf(ParamSet& params, Rng& rng, const std::string& prefix, int width, int target_level,
        SoftmaxAxis axis = SoftmaxAxis::kPerSlot);

    int target_level() const { return target_level_; }

    // omega, (n, 4*width, 1, 1), slot-major across the 4 source levels.
    Value fusion_weights(Tape& tape, const PyramidV& pyramid) const;
    // Pure dynamic weighted fusion at the target level.
    Value fuse(Tape& tape, const PyramidV& pyramid) const;
    // fuse + post-fusion conv.
    Value forward(Tape& tape, const PyramidV& pyramid) const;

private:
    std::array<Value, 4> resized(Tape& tape, const PyramidV& pyramid) const;

    Parameter* fc1_w_ = nullptr;
    Parameter* fc1_b_ = nullptr;
    Parameter* fc2_w_ = nullptr;
    Parameter* fc2_b_ = nullptr;
    ConvUnit fuse_conv_;
    int width_ = 0;
    int target_level_ = 2;
    SoftmaxAxis axis_ = SoftmaxAxis::kPerSlot;
};

// 3x3 conv to a single-channel saliency logit map, resized to the requested
// resolution. Sigmoid is applied only in losses/metrics.
class PredictHead {
public:
    PredictHead() = default;
    PredictHead(ParamSet& params, Rng& rng, const std::string& prefix, int c_in);
    Value forward(Tape& tape, Value feature, int out_h, int out_w) const;

private:
    Parameter* w_ = nullptr;
    Parameter* b_ = nullptr;
};

struct DecoderConfig {
    int width = 32;        // shared decoder channel width d
    int bicfm_blocks = 2;  // N
    SoftmaxAxis softmax_axis = SoftmaxAxis::kPerSlot;
    int dwf_target_level = 2;

    void validate() const;
};

// Projection to the decoder width, N stacked BiCFM blocks each followed by
// its own DWF + head (the N supervised final maps), plus auxiliary heads on
// the final block's top-down features (levels 2..5).
class Decoder {
public:
    Decoder(ParamSet& params, Rng& rng, const DecoderConfig& config,
            const std::array<int, 4>& level_channels);

    const DecoderConfig& config() const { return config_; }

    struct Out {
        std::vector<Value> final_maps;     // index 0 = deepest BiCFM block
        std::array<Value, 4> aux_maps;     // levels 2..5
    };
    Out forward(Tape& tape, const PyramidV& encoder_pyramid, int out_h, int out_w) const;

private:
    DecoderConfig config_;
    std::array<Parameter*, 4> proj_w_{};
    std::array<Parameter*, 4> proj_b_{};
    std::vector<BiCfm> blocks_;
    std::vector<Dwf> dwf_;
    std::vector<PredictHead> final_heads_;
    std::array<PredictHead, 4> aux_heads_;
};

}  // namespace dpnet
