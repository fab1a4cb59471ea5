#pragma once

#include <vector>

#include "dpnet/tape.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

struct Conv2dGeom {
    int stride = 1;
    int pad = 0;
    int groups = 1;
};

// Full configuration of one learned convolution: weights are laid out
// (c_out, c_in/groups, k, k). Kernels are square and odd-sized.
struct ConvParams {
    Tensor4 weights;
    int stride = 1;
    int padding = 0;
    int groups = 1;

    int kernel() const { return weights.dims().h; }
    int c_out() const { return weights.dims().n; }
    int c_in() const { return weights.dims().c * groups; }
    Conv2dGeom geom() const { return Conv2dGeom{stride, padding, groups}; }

    // Enforces the type invariants (odd square kernel, groups dividing both
    // channel counts, stride/padding validity).
    void validate() const;
};

Dims4 conv2d_output_dims(Dims4 x, Dims4 w, const Conv2dGeom& g);

// Raw kernels on plain tensors. The tape ops below are thin wrappers; the
// kernels are also reused by inference paths that do not need gradients.
Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& w, const Conv2dGeom& g);
Tensor4 conv2d_backward_input(const Tensor4& gy, const Tensor4& w, const Conv2dGeom& g,
                              Dims4 x_dims);
Tensor4 conv2d_backward_weight(const Tensor4& gy, const Tensor4& x, const Conv2dGeom& g,
                               Dims4 w_dims);
Tensor4 resize_bilinear_forward(const Tensor4& x, int out_h, int out_w);

// Tape ops (forward + registered backward).
Value add(Value a, Value b);
Value mul(Value a, Value b);
Value scale_const(Value x, double k);
Value conv2d(Value x, Value w, const Conv2dGeom& geom);
Value bias_channels(Value x, Value b);    // b: (1,c,1,1), broadcast over n,h,w
Value scale_channels(Value x, Value s);   // s: (n,c,1,1), broadcast over h,w
Value linear(Value x, Value w);           // x: (n,in,1,1), w: (out,in,1,1)
Value linear(Value x, Value w, Value b);  // b: (1,out,1,1)
Value relu(Value x);
Value sigmoid(Value x);
Value softmax_segments(Value x, int segment_length);  // x: (n,c,1,1), segment | c
Value global_avg_pool(Value x);
Value resize_bilinear(Value x, int out_h, int out_w);
Value slice_channels(Value x, int c0, int count);
Value stride_slice_channels(Value x, int start, int stride);
Value concat_channels(const std::vector<Value>& xs);
Value sum_all(Value x);  // -> 1x1x1x1

}  // namespace dpnet
