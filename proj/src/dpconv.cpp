#include "dpnet/dpconv.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dpnet {

void DPConvSpec::validate() const {
    if (c_in < 1 || c_out < 1) throw ConfigError("DPConvSpec: channels must be >= 1");
    if (stride < 1) throw ConfigError("DPConvSpec: stride must be >= 1");
    if (kernel_sizes.empty()) throw ConfigError("DPConvSpec: need at least one kernel");
    if (groups.size() != kernel_sizes.size()) {
        throw ConfigError("DPConvSpec: kernel_sizes and groups must have equal length");
    }
    if (reference_k < 1 || reference_k % 2 == 0) {
        throw ConfigError("DPConvSpec: reference_k must be odd and >= 1");
    }
    const int m = branch_count();
    if (c_out % m != 0) {
        throw ConfigError("DPConvSpec: branch count " + std::to_string(m) +
                          " must divide c_out " + std::to_string(c_out));
    }
    const int bc = branch_channels();
    for (int i = 0; i < m; ++i) {
        const int k = kernel_sizes[i];
        if (k < 1 || k % 2 == 0) {
            throw ConfigError("DPConvSpec: kernel sizes must be odd, got " + std::to_string(k));
        }
        if (i > 0 && kernel_sizes[i] <= kernel_sizes[i - 1]) {
            throw ConfigError("DPConvSpec: kernel sizes must be strictly increasing");
        }
        const int g = groups[i];
        if (g < 1 || c_in % g != 0 || bc % g != 0) {
            throw ConfigError("DPConvSpec: group " + std::to_string(g) +
                              " must divide c_in " + std::to_string(c_in) +
                              " and branch channels " + std::to_string(bc));
        }
    }
    if (mlp_hidden < 0) throw ConfigError("DPConvSpec: mlp_hidden must be >= 0");
}

std::vector<int> default_groups(const std::vector<int>& kernel_sizes, int reference_k, int c_in,
                                int branch_channels) {
    auto largest_pow2_divisor = [](int v) {
        int p = 1;
        while (v % (p * 2) == 0) p *= 2;
        return p;
    };
    const int cap = std::min(largest_pow2_divisor(c_in), largest_pow2_divisor(branch_channels));
    std::vector<int> gs;
    gs.reserve(kernel_sizes.size());
    for (int k : kernel_sizes) {
        const double ratio = static_cast<double>(k) / reference_k;
        const double need = ratio * ratio;
        int g = 1;
        while (static_cast<double>(g) <= need) g *= 2;
        gs.push_back(std::min(g, cap));
    }
    return gs;
}

long long count_params_standard(int c_in, int c_out, int k) {
    if (c_in < 1 || c_out < 1 || k < 1) {
        throw ConfigError("count_params_standard: arguments must be positive");
    }
    return static_cast<long long>(c_out) * c_in * k * k;
}

long long count_params_pyramid(const DPConvSpec& spec) {
    spec.validate();
    const int m = spec.branch_count();
    long long total = 0;
    for (int i = 0; i < m; ++i) {
        total += static_cast<long long>(spec.c_out / m) * (spec.c_in / spec.groups[i]) *
                 spec.kernel_sizes[i] * spec.kernel_sizes[i];
    }
    return total;
}

LightweightReport check_lightweight(const DPConvSpec& spec) {
    spec.validate();
    LightweightReport report;
    report.lightweight = true;
    const double k2 = static_cast<double>(spec.reference_k) * spec.reference_k;
    for (int i = 0; i < spec.branch_count(); ++i) {
        const long long ki2 = static_cast<long long>(spec.kernel_sizes[i]) * spec.kernel_sizes[i];
        // Exact integer form of g_i > (K_i / K)^2.
        const bool pass = static_cast<long long>(spec.groups[i]) * spec.reference_k *
                              spec.reference_k > ki2;
        report.lightweight = report.lightweight && pass;
        report.margins.push_back(spec.groups[i] - static_cast<double>(ki2) / k2);
    }
    return report;
}

DPConvBlock::DPConvBlock(ParamSet& params, Rng& rng, const std::string& prefix, DPConvSpec spec,
                         bool backbone)
    : spec_(std::move(spec)) {
    spec_.validate();
    const int m = spec_.branch_count();
    const int bc = spec_.branch_channels();

    for (int i = 0; i < m; ++i) {
        const int k = spec_.kernel_sizes[i];
        const int cin_g = spec_.c_in / spec_.groups[i];
        Tensor4 w(Dims4{bc, cin_g, k, k});
        w.init_uniform(rng, std::sqrt(6.0 / (static_cast<double>(cin_g) * k * k)));
        branch_w_.push_back(&params.add(prefix + ".branch" + std::to_string(i) + ".w",
                                        std::move(w), backbone));
    }

    const int hidden = spec_.hidden_width();
    Tensor4 w1(Dims4{hidden, spec_.c_in, 1, 1});
    w1.init_uniform(rng, std::sqrt(6.0 / spec_.c_in));
    fc1_w_ = &params.add(prefix + ".mlp.fc1.w", std::move(w1), backbone);
    fc1_b_ = &params.add(prefix + ".mlp.fc1.b", Tensor4(Dims4{1, hidden, 1, 1}, 0.01), backbone);
    Tensor4 w2(Dims4{spec_.c_out, hidden, 1, 1});
    w2.init_uniform(rng, std::sqrt(6.0 / hidden));
    fc2_w_ = &params.add(prefix + ".mlp.fc2.w", std::move(w2), backbone);
    fc2_b_ = &params.add(prefix + ".mlp.fc2.b", Tensor4(Dims4{1, spec_.c_out, 1, 1}), backbone);

    if (spec_.c_in != spec_.c_out || spec_.stride != 1) {
        Tensor4 w(Dims4{spec_.c_out, spec_.c_in, 1, 1});
        w.init_uniform(rng, std::sqrt(6.0 / spec_.c_in));
        shortcut_w_ = &params.add(prefix + ".shortcut.w", std::move(w), backbone);
    }
}

std::vector<Value> DPConvBlock::pyramid_forward(Tape& tape, Value x) const {
    if (x.dims().c != spec_.c_in) {
        throw ShapeError("DPConvBlock: input " + x.dims().str() + " expected c_in " +
                         std::to_string(spec_.c_in));
    }
    std::vector<Value> ys;
    ys.reserve(branch_w_.size());
    for (std::size_t i = 0; i < branch_w_.size(); ++i) {
        const int k = spec_.kernel_sizes[i];
        Conv2dGeom geom{spec_.stride, (k - 1) / 2, spec_.groups[i]};
        ys.push_back(conv2d(x, tape.param(*branch_w_[i]), geom));
    }
    return ys;
}

Value DPConvBlock::routing_weights_node(Tape& tape, Value x) const {
    Value z = global_avg_pool(x);
    Value h = relu(linear(z, tape.param(*fc1_w_), tape.param(*fc1_b_)));
    Value logits = linear(h, tape.param(*fc2_w_), tape.param(*fc2_b_));
    const int segment = spec_.softmax_axis == SoftmaxAxis::kPerSlot ? spec_.branch_count()
                                                                    : spec_.c_out;
    return softmax_segments(logits, segment);
}

RoutingWeights DPConvBlock::routing_weights(const Tensor4& x) const {
    Tape tape;
    Value vx = tape.leaf(x);
    Value alpha = routing_weights_node(tape, vx);
    return RoutingWeights{alpha.val(), spec_.branch_count()};
}

DPConvBlock::Detail DPConvBlock::forward_detail(Tape& tape, Value x) const {
    std::vector<Value> ys = pyramid_forward(tape, x);
    Value alpha = routing_weights_node(tape, x);
    const int m = spec_.branch_count();
    std::vector<Value> scaled;
    scaled.reserve(ys.size());
    for (int i = 0; i < m; ++i) {
        Value slot_weights = stride_slice_channels(alpha, i, m);
        scaled.push_back(scale_channels(ys[i], slot_weights));
    }
    Value routed = concat_channels(scaled);
    Value sc = shortcut_w_
                   ? conv2d(x, tape.param(*shortcut_w_), Conv2dGeom{spec_.stride, 0, 1})
                   : x;
    return Detail{add(sc, routed), alpha};
}

long long DPConvBlock::enumerated_branch_params() const {
    long long total = 0;
    for (const Parameter* p : branch_w_) total += p->value.size();
    return total;
}

long long DPConvBlock::mlp_params() const {
    return fc1_w_->value.size() + fc1_b_->value.size() + fc2_w_->value.size() +
           fc2_b_->value.size();
}

long long DPConvBlock::shortcut_params() const {
    return shortcut_w_ ? shortcut_w_->value.size() : 0;
}

}  // namespace dpnet
