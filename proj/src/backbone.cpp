#include "dpnet/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace dpnet {

void EncoderConfig::validate() const {
    if (stem_channels < 1) throw ConfigError("EncoderConfig: stem_channels must be >= 1");
    const int m = static_cast<int>(kernel_sizes.size());
    if (m < 1) throw ConfigError("EncoderConfig: need at least one kernel size");
    if (!groups.empty() && groups.size() != kernel_sizes.size()) {
        throw ConfigError("EncoderConfig: groups must be empty or match kernel_sizes length");
    }
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
        if (stage_channels[i] < 1) throw ConfigError("EncoderConfig: stage channels must be >= 1");
        if (stage_channels[i] % m != 0) {
            throw ConfigError("EncoderConfig: stage channel width " +
                              std::to_string(stage_channels[i]) + " not divisible by branch count " +
                              std::to_string(m));
        }
        if (blocks_per_stage[i] < 1) {
            throw ConfigError("EncoderConfig: blocks_per_stage must be >= 1");
        }
    }
}

DPConvSpec EncoderConfig::stage_spec(int c_in, int c_out, int stride) const {
    DPConvSpec spec;
    spec.c_in = c_in;
    spec.c_out = c_out;
    spec.kernel_sizes = kernel_sizes;
    spec.reference_k = reference_k;
    spec.mlp_hidden = mlp_hidden;
    spec.stride = stride;
    spec.softmax_axis = softmax_axis;
    const int bc = c_out / spec.branch_count();
    if (groups.empty()) {
        spec.groups = default_groups(kernel_sizes, reference_k, c_in, bc);
    } else {
        spec.groups = groups;
        // Clamp explicit groups to keep divisibility valid at narrow stages.
        for (auto& g : spec.groups) {
            while (g > 1 && (c_in % g != 0 || bc % g != 0)) g /= 2;
        }
    }
    return spec;
}

Encoder::Encoder(ParamSet& params, Rng& rng, const EncoderConfig& config) : config_(config) {
    config_.validate();

    Tensor4 stem(Dims4{config_.stem_channels, 3, 3, 3});
    stem.init_uniform(rng, std::sqrt(6.0 / (3.0 * 9.0)));
    stem_w_ = &params.add("encoder.stem.w", std::move(stem), /*backbone=*/true);
    stem_b_ = &params.add("encoder.stem.b",
                          Tensor4(Dims4{1, config_.stem_channels, 1, 1}, 0.01),
                          /*backbone=*/true);

    int c_in = config_.stem_channels;
    for (int s = 0; s < 4; ++s) {
        const int c_out = config_.stage_channels[static_cast<std::size_t>(s)];
        const int blocks = config_.blocks_per_stage[static_cast<std::size_t>(s)];
        for (int b = 0; b < blocks; ++b) {
            const int stride = b == 0 ? 2 : 1;
            const int block_cin = b == 0 ? c_in : c_out;
            const std::string name = "encoder.stage" + std::to_string(s + 2) + ".block" +
                                     std::to_string(b);
            if (config_.static_baseline) {
                StaticBlock blk;
                blk.stride = stride;
                Tensor4 w(Dims4{c_out, block_cin, 3, 3});
                w.init_uniform(rng, std::sqrt(6.0 / (9.0 * block_cin)));
                blk.body_w = &params.add(name + ".body.w", std::move(w), true);
                if (block_cin != c_out || stride != 1) {
                    Tensor4 sw(Dims4{c_out, block_cin, 1, 1});
                    sw.init_uniform(rng, std::sqrt(6.0 / block_cin));
                    blk.shortcut_w = &params.add(name + ".shortcut.w", std::move(sw), true);
                }
                static_stages_[static_cast<std::size_t>(s)].push_back(blk);
            } else {
                auto spec = config_.stage_spec(block_cin, c_out, stride);
                dpconv_stages_[static_cast<std::size_t>(s)].push_back(
                    std::make_unique<DPConvBlock>(params, rng, name, spec, /*backbone=*/true));
            }
        }
        c_in = c_out;
    }
}

Encoder::ForwardDetail Encoder::forward(Tape& tape, Value image) const {
    const Dims4 d = image.dims();
    if (d.c != 3) {
        throw ShapeError("encode: expected 3-channel image, got " + d.str());
    }
    if (d.h % 32 != 0 || d.w % 32 != 0 || d.h < 32 || d.w < 32) {
        throw ConfigError("encode: image dims " + d.str() +
                          " must be positive multiples of 32 (five halvings)");
    }

    ForwardDetail out;
    Value x = relu(bias_channels(conv2d(image, tape.param(*stem_w_), Conv2dGeom{2, 1, 1}),
                                 tape.param(*stem_b_)));
    for (int s = 0; s < 4; ++s) {
        if (config_.static_baseline) {
            for (const StaticBlock& blk : static_stages_[static_cast<std::size_t>(s)]) {
                Value body = conv2d(x, tape.param(*blk.body_w), Conv2dGeom{blk.stride, 1, 1});
                Value sc = blk.shortcut_w
                               ? conv2d(x, tape.param(*blk.shortcut_w), Conv2dGeom{blk.stride, 0, 1})
                               : x;
                x = add(sc, body);
            }
        } else {
            for (const auto& blk : dpconv_stages_[static_cast<std::size_t>(s)]) {
                DPConvBlock::Detail det = blk->forward_detail(tape, x);
                x = det.y;
                out.stage_alphas[static_cast<std::size_t>(s)].push_back(det.alpha);
            }
        }
        out.pyramid.levels[static_cast<std::size_t>(s)] = x;
    }
    return out;
}

FeaturePyramid Encoder::encode(const Tensor4& image) const {
    Tape tape;
    Value v = tape.leaf(image);
    ForwardDetail det = forward(tape, v);
    FeaturePyramid pyr;
    for (int i = 0; i < 4; ++i) {
        pyr.levels[static_cast<std::size_t>(i)] = det.pyramid.levels[static_cast<std::size_t>(i)].val();
    }
    return pyr;
}

std::vector<Encoder::BlockCounts> Encoder::block_counts() const {
    std::vector<BlockCounts> rows;
    for (int s = 0; s < 4; ++s) {
        int b = 0;
        for (const auto& blk : dpconv_stages_[static_cast<std::size_t>(s)]) {
            BlockCounts row;
            row.name = "stage" + std::to_string(s + 2) + ".block" + std::to_string(b++);
            row.body_analytic = count_params_pyramid(blk->spec());
            row.body_enumerated = blk->enumerated_branch_params();
            row.mlp = blk->mlp_params();
            row.shortcut = blk->shortcut_params();
            LightweightReport lw = check_lightweight(blk->spec());
            row.lightweight = lw.lightweight;
            row.margin_min = lw.margins.empty() ? 0.0
                                                : *std::min_element(lw.margins.begin(),
                                                                    lw.margins.end());
            rows.push_back(row);
        }
        b = 0;
        for (const StaticBlock& blk : static_stages_[static_cast<std::size_t>(s)]) {
            BlockCounts row;
            row.name = "stage" + std::to_string(s + 2) + ".block" + std::to_string(b++);
            row.body_analytic = blk.body_w->value.size();
            row.body_enumerated = blk.body_w->value.size();
            row.shortcut = blk.shortcut_w ? blk.shortcut_w->value.size() : 0;
            rows.push_back(row);
        }
    }
    return rows;
}

}  // namespace dpnet
