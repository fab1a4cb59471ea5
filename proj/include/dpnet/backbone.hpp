#pragma once

#include <array>
#include <memory>
#include <vector>

#include "dpnet/dpconv.hpp"

namespace dpnet {

// Multi-level features X_2..X_5; level i has spatial dims input/2^i.
struct FeaturePyramid {
    std::array<Tensor4, 4> levels;

    Tensor4& level(int i) { return levels[static_cast<std::size_t>(i - 2)]; }
    const Tensor4& level(int i) const { return levels[static_cast<std::size_t>(i - 2)]; }
};

// Same pyramid as tape values during a differentiable forward pass.
struct PyramidV {
    std::array<Value, 4> levels;

    Value& level(int i) { return levels[static_cast<std::size_t>(i - 2)]; }
    const Value& level(int i) const { return levels[static_cast<std::size_t>(i - 2)]; }
};

struct EncoderConfig {
    int stem_channels = 16;
    std::array<int, 4> stage_channels{16, 32, 64, 64};
    std::array<int, 4> blocks_per_stage{1, 1, 1, 1};
    std::vector<int> kernel_sizes{3, 5, 7, 9};
    std::vector<int> groups;  // empty => per-stage default rule
    int reference_k = 3;
    int mlp_hidden = 0;
    SoftmaxAxis softmax_axis = SoftmaxAxis::kPerSlot;
    bool static_baseline = false;  // plain 3x3 residual bodies instead of DPConv

    void validate() const;
    // Resolved DPConv spec for one stage.
    DPConvSpec stage_spec(int c_in, int c_out, int stride) const;
};

// DPResNet-mini: a 3x3 stride-2 stem conv, then four stages of residual
// DPConv blocks (the first block of each stage strided), emitting levels 2-5.
class Encoder {
public:
    Encoder(ParamSet& params, Rng& rng, const EncoderConfig& config);

    const EncoderConfig& config() const { return config_; }

    struct ForwardDetail {
        PyramidV pyramid;
        // One routing-weight node per DPConv block, grouped by stage (2..5).
        std::array<std::vector<Value>, 4> stage_alphas;
    };
    ForwardDetail forward(Tape& tape, Value image) const;

    // No-grad convenience wrapper.
    FeaturePyramid encode(const Tensor4& image) const;

    const std::array<std::vector<std::unique_ptr<DPConvBlock>>, 4>& dpconv_stages() const {
        return dpconv_stages_;
    }

    // Body parameter count of stage blocks for the static baseline comparison.
    struct BlockCounts {
        std::string name;
        long long body_analytic = 0;
        long long body_enumerated = 0;
        long long mlp = 0;
        long long shortcut = 0;
        bool lightweight = false;
        double margin_min = 0.0;
    };
    std::vector<BlockCounts> block_counts() const;

private:
    struct StaticBlock {
        Parameter* body_w = nullptr;
        Parameter* shortcut_w = nullptr;
        int stride = 1;
    };

    EncoderConfig config_;
    Parameter* stem_w_ = nullptr;
    Parameter* stem_b_ = nullptr;
    std::array<std::vector<std::unique_ptr<DPConvBlock>>, 4> dpconv_stages_;
    std::array<std::vector<StaticBlock>, 4> static_stages_;
};

}  // namespace dpnet
