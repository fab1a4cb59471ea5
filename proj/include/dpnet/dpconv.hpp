#pragma once

#include <string>
#include <vector>

#include "dpnet/ops.hpp"
#include "dpnet/rng.hpp"
#include "dpnet/tape.hpp"

namespace dpnet {

// Normalization axis for the routing softmax. Per-slot normalizes each group
// of m entries (one weight per kernel branch for every channel position), so
// routing is a convex combination across kernel scales; whole-vector applies
// one softmax over the full weight vector and exists for comparison.
enum class SoftmaxAxis { kPerSlot, kWholeVector };

// Configuration of one dynamic pyramid convolution block: m parallel grouped
// convolutions with strictly increasing odd kernel sizes, mixed by
// input-dependent weights.
struct DPConvSpec {
    int c_in = 0;
    int c_out = 0;
    std::vector<int> kernel_sizes{3, 5, 7, 9};
    std::vector<int> groups;  // one per kernel
    int reference_k = 3;      // kernel of the standard conv being compared against
    int mlp_hidden = 0;       // 0 => max(c_in/4, m)
    int stride = 1;
    SoftmaxAxis softmax_axis = SoftmaxAxis::kPerSlot;

    int branch_count() const { return static_cast<int>(kernel_sizes.size()); }
    int branch_channels() const { return c_out / branch_count(); }
    int hidden_width() const {
        return mlp_hidden > 0 ? mlp_hidden : std::max(c_in / 4, branch_count());
    }
    void validate() const;
};

// Default group sizes: the smallest power of two strictly greater than
// (K_i / reference_k)^2, clamped down to the largest power of two dividing
// both c_in and the per-branch channel count so the grouped convs stay valid.
std::vector<int> default_groups(const std::vector<int>& kernel_sizes, int reference_k, int c_in,
                                int branch_channels);

// Parameter count of a standard convolution: c_out * c_in * k^2.
long long count_params_standard(int c_in, int c_out, int k);

// Parameter count of the pyramid: sum_i (c_out/m) * (c_in/g_i) * K_i^2.
long long count_params_pyramid(const DPConvSpec& spec);

struct LightweightReport {
    bool lightweight = false;        // g_i > (K_i/K)^2 for all branches
    std::vector<double> margins;     // g_i - (K_i/K)^2 per branch
};

LightweightReport check_lightweight(const DPConvSpec& spec);

// alpha is (n, c_out, 1, 1) in slot-major order: entry s*m + j is the weight
// of branch j at channel position s; with per-slot softmax every m-slot is a
// probability simplex.
struct RoutingWeights {
    Tensor4 alpha;
    int branches = 1;

    int slots() const { return alpha.dims().c / branches; }
    double at(int n, int slot, int branch) const {
        return alpha.at(n, slot * branches + branch, 0, 0);
    }
};

class DPConvBlock {
public:
    DPConvBlock(ParamSet& params, Rng& rng, const std::string& prefix, DPConvSpec spec,
                bool backbone = true);

    const DPConvSpec& spec() const { return spec_; }
    bool has_shortcut() const { return shortcut_w_ != nullptr; }

    // Branch outputs y_i = W_i * x, same spatial dims across branches.
    std::vector<Value> pyramid_forward(Tape& tape, Value x) const;

    // GAP -> FC -> ReLU -> FC -> segmented softmax.
    Value routing_weights_node(Tape& tape, Value x) const;
    RoutingWeights routing_weights(const Tensor4& x) const;

    struct Detail {
        Value y;
        Value alpha;
    };
    Detail forward_detail(Tape& tape, Value x) const;
    Value forward(Tape& tape, Value x) const { return forward_detail(tape, x).y; }

    // Actual stored weight-buffer lengths, for checking the analytic counts.
    long long enumerated_branch_params() const;
    long long mlp_params() const;
    long long shortcut_params() const;

private:
    DPConvSpec spec_;
    std::vector<Parameter*> branch_w_;
    Parameter* fc1_w_ = nullptr;
    Parameter* fc1_b_ = nullptr;
    Parameter* fc2_w_ = nullptr;
    Parameter* fc2_b_ = nullptr;
    Parameter* shortcut_w_ = nullptr;
};

}  // namespace dpnet
