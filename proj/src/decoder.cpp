#include "dpnet/decoder.hpp"

#include <cmath>

namespace dpnet {

// Decoder convs start at half He gain: the multiplicative CFM crossings
// compound magnitudes quadratically, and without normalization layers a unit
// gain makes the stacked decoder blow up at initialization.
constexpr double kDecoderInitGain = 0.5;

ConvUnit::ConvUnit(ParamSet& params, Rng& rng, const std::string& prefix, int c_in, int c_out,
                   int stride)
    : stride_(stride) {
    Tensor4 w(Dims4{c_out, c_in, 3, 3});
    w.init_uniform(rng, kDecoderInitGain * std::sqrt(6.0 / (9.0 * c_in)));
    w_ = &params.add(prefix + ".w", std::move(w));
    b_ = &params.add(prefix + ".b", Tensor4(Dims4{1, c_out, 1, 1}, 0.01));
}

Value ConvUnit::forward(Tape& tape, Value x) const {
    Value y = conv2d(x, tape.param(*w_), Conv2dGeom{stride_, 1, 1});
    return relu(bias_channels(y, tape.param(*b_)));
}

CfmFuse::CfmFuse(ParamSet& params, Rng& rng, const std::string& prefix, int width)
    : cross_v_(params, rng, prefix + ".cross_v", width, width),
      cross_l_(params, rng, prefix + ".cross_l", width, width),
      out_(params, rng, prefix + ".out", width, width) {}

Value CfmFuse::forward(Tape& tape, Value lateral, Value vertical) const {
    require_same_dims(lateral.val(), vertical.val(), "cfm_fuse");
    Value l2 = add(lateral, mul(lateral, cross_v_.forward(tape, vertical)));
    Value v2 = add(vertical, mul(vertical, cross_l_.forward(tape, lateral)));
    return out_.forward(tape, add(l2, v2));
}

BiCfm::BiCfm(ParamSet& params, Rng& rng, const std::string& prefix, int width)
    : top_(params, rng, prefix + ".top", width, width) {
    for (int i = 0; i < 3; ++i) {
        // Top-down fusions serve levels 4,3,2; bottom-up fusions levels 3,4,5.
        td_[static_cast<std::size_t>(i)] =
            CfmFuse(params, rng, prefix + ".td" + std::to_string(4 - i), width);
        bu_[static_cast<std::size_t>(i)] =
            CfmFuse(params, rng, prefix + ".bu" + std::to_string(3 + i), width);
        down_[static_cast<std::size_t>(i)] =
            ConvUnit(params, rng, prefix + ".down" + std::to_string(3 + i), width, width, 2);
    }
}

BiCfm::Out BiCfm::forward(Tape& tape, const PyramidV& in) const {
    Out res;
    // Top-down path.
    res.fused.level(5) = top_.forward(tape, in.level(5));
    for (int lv = 4; lv >= 2; --lv) {
        const Dims4 d = in.level(lv).dims();
        Value q = resize_bilinear(res.fused.level(lv + 1), d.h, d.w);
        res.fused.level(lv) = td_[static_cast<std::size_t>(4 - lv)].forward(tape, in.level(lv), q);
    }
    // Bottom-up path starts from the penultimate lowest level.
    res.out.level(2) = res.fused.level(2);
    for (int lv = 3; lv <= 5; ++lv) {
        Value down = down_[static_cast<std::size_t>(lv - 3)].forward(tape, res.out.level(lv - 1));
        res.out.level(lv) =
            bu_[static_cast<std::size_t>(lv - 3)].forward(tape, res.fused.level(lv), down);
    }
    // Input shortcuts, plain addition (widths already match).
    for (int lv = 2; lv <= 5; ++lv) {
        res.out.level(lv) = add(res.out.level(lv), in.level(lv));
    }
    return res;
}

Dwf::Dwf(ParamSet& params, Rng& rng, const std::string& prefix, int width, int target_level,
         SoftmaxAxis axis)
    : fuse_conv_(params, rng, prefix + ".fuse", width, width),
      width_(width),
      target_level_(target_level),
      axis_(axis) {
    if (target_level < 2 || target_level > 5) {
        throw ConfigError("Dwf: target level must be in [2,5]");
    }
    const int in = 4 * width;
    const int hidden = std::max(in / 4, 4);
    Tensor4 w1(Dims4{hidden, in, 1, 1});
    w1.init_uniform(rng, std::sqrt(6.0 / in));
    fc1_w_ = &params.add(prefix + ".fc1.w", std::move(w1));
    fc1_b_ = &params.add(prefix + ".fc1.b", Tensor4(Dims4{1, hidden, 1, 1}, 0.01));
    Tensor4 w2(Dims4{in, hidden, 1, 1});
    w2.init_uniform(rng, std::sqrt(6.0 / hidden));
    fc2_w_ = &params.add(prefix + ".fc2.w", std::move(w2));
    fc2_b_ = &params.add(prefix + ".fc2.b", Tensor4(Dims4{1, in, 1, 1}));
}

std::array<Value, 4> Dwf::resized(Tape& tape, const PyramidV& pyramid) const {
    const Dims4 target = pyramid.level(target_level_).dims();
    std::array<Value, 4> out;
    for (int lv = 2; lv <= 5; ++lv) {
        out[static_cast<std::size_t>(lv - 2)] =
            lv == target_level_ ? pyramid.level(lv)
                                : resize_bilinear(pyramid.level(lv), target.h, target.w);
    }
    return out;
}

Value Dwf::fusion_weights(Tape& tape, const PyramidV& pyramid) const {
    std::array<Value, 4> vs = resized(tape, pyramid);
    Value p = global_avg_pool(concat_channels({vs[0], vs[1], vs[2], vs[3]}));
    Value h = relu(linear(p, tape.param(*fc1_w_), tape.param(*fc1_b_)));
    Value logits = linear(h, tape.param(*fc2_w_), tape.param(*fc2_b_));
    const int segment = axis_ == SoftmaxAxis::kPerSlot ? 4 : 4 * width_;
    return softmax_segments(logits, segment);
}

Value Dwf::fuse(Tape& tape, const PyramidV& pyramid) const {
    std::array<Value, 4> vs = resized(tape, pyramid);
    Value omega = fusion_weights(tape, pyramid);
    Value acc;
    for (int i = 0; i < 4; ++i) {
        Value weights = stride_slice_channels(omega, i, 4);
        Value term = scale_channels(vs[static_cast<std::size_t>(i)], weights);
        acc = i == 0 ? term : add(acc, term);
    }
    return acc;
}

Value Dwf::forward(Tape& tape, const PyramidV& pyramid) const {
    return fuse_conv_.forward(tape, fuse(tape, pyramid));
}

PredictHead::PredictHead(ParamSet& params, Rng& rng, const std::string& prefix, int c_in) {
    Tensor4 w(Dims4{1, c_in, 3, 3});
    w.init_uniform(rng, kDecoderInitGain * std::sqrt(6.0 / (9.0 * c_in)));
    w_ = &params.add(prefix + ".w", std::move(w));
    b_ = &params.add(prefix + ".b", Tensor4(Dims4{1, 1, 1, 1}));
}

Value PredictHead::forward(Tape& tape, Value feature, int out_h, int out_w) const {
    Value y = bias_channels(conv2d(feature, tape.param(*w_), Conv2dGeom{1, 1, 1}),
                            tape.param(*b_));
    return resize_bilinear(y, out_h, out_w);
}

void DecoderConfig::validate() const {
    if (width < 1) throw ConfigError("DecoderConfig: width must be >= 1");
    if (bicfm_blocks < 1) throw ConfigError("DecoderConfig: need N >= 1 BiCFM blocks");
    if (dwf_target_level < 2 || dwf_target_level > 5) {
        throw ConfigError("DecoderConfig: dwf_target_level must be in [2,5]");
    }
}

Decoder::Decoder(ParamSet& params, Rng& rng, const DecoderConfig& config,
                 const std::array<int, 4>& level_channels)
    : config_(config) {
    config_.validate();
    const int d = config_.width;
    for (int i = 0; i < 4; ++i) {
        Tensor4 w(Dims4{d, level_channels[static_cast<std::size_t>(i)], 1, 1});
        w.init_uniform(rng,
                       kDecoderInitGain * std::sqrt(6.0 / level_channels[static_cast<std::size_t>(i)]));
        const std::string name = "decoder.proj" + std::to_string(i + 2);
        proj_w_[static_cast<std::size_t>(i)] = &params.add(name + ".w", std::move(w));
        proj_b_[static_cast<std::size_t>(i)] = &params.add(name + ".b", Tensor4(Dims4{1, d, 1, 1}));
    }
    for (int u = 0; u < config_.bicfm_blocks; ++u) {
        const std::string prefix = "decoder.bicfm" + std::to_string(u);
        blocks_.emplace_back(params, rng, prefix, d);
        dwf_.emplace_back(params, rng, prefix + ".dwf", d, config_.dwf_target_level,
                          config_.softmax_axis);
        final_heads_.emplace_back(params, rng, prefix + ".head", d);
    }
    for (int lv = 2; lv <= 5; ++lv) {
        aux_heads_[static_cast<std::size_t>(lv - 2)] =
            PredictHead(params, rng, "decoder.aux" + std::to_string(lv) + ".head", d);
    }
}

Decoder::Out Decoder::forward(Tape& tape, const PyramidV& encoder_pyramid, int out_h,
                              int out_w) const {
    PyramidV x;
    for (int lv = 2; lv <= 5; ++lv) {
        Value y = conv2d(encoder_pyramid.level(lv),
                         tape.param(*proj_w_[static_cast<std::size_t>(lv - 2)]),
                         Conv2dGeom{1, 0, 1});
        x.level(lv) = bias_channels(y, tape.param(*proj_b_[static_cast<std::size_t>(lv - 2)]));
    }

    Out out;
    PyramidV last_fused;
    std::vector<Value> maps;
    for (std::size_t u = 0; u < blocks_.size(); ++u) {
        BiCfm::Out res = blocks_[u].forward(tape, x);
        x = res.out;
        last_fused = res.fused;
        Value fused = dwf_[u].forward(tape, res.out);
        maps.push_back(final_heads_[u].forward(tape, fused, out_h, out_w));
    }
    // Most refined prediction first.
    out.final_maps.assign(maps.rbegin(), maps.rend());
    for (int lv = 2; lv <= 5; ++lv) {
        out.aux_maps[static_cast<std::size_t>(lv - 2)] =
            aux_heads_[static_cast<std::size_t>(lv - 2)].forward(tape, last_fused.level(lv), out_h,
                                                                 out_w);
    }
    return out;
}

}  // namespace dpnet
