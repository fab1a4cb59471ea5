#pragma once

#include <vector>

#include "dpnet/ops.hpp"

namespace dpnet {

// Boundary-emphasis pixel weights: w = 1 + gain * |boxmean(gt) - gt|, where
// boxmean is a same-size window average with counts compensated at borders.
// w = 1 wherever the ground truth is locally constant. gt must be a binary
// (n,1,h,w) mask.
Tensor4 pixel_weights(const Tensor4& gt, int window = 15, double gain = 5.0);

// Weighted binary cross entropy on logits, per image normalized by the weight
// mass and then averaged over the batch. Evaluated in log-sum-exp form.
Value weighted_bce(Value logits, const Tensor4& gt, const Tensor4& weights);

// Weighted soft-IoU loss on sigmoid probabilities, per image then batch mean.
// A doubly-empty image (zero intersection and union) contributes loss 0.
Value weighted_iou(Value logits, const Tensor4& gt, const Tensor4& weights);

struct TotalLoss {
    Value total;
    // Component sums for logging, evaluated at build time.
    double final_bce = 0.0;
    double final_iou = 0.0;
    double aux_bce = 0.0;
    double aux_iou = 0.0;
};

// (1/N) sum over final maps of (wBCE + wIoU) plus sum_{j=2..M} 2^{1-j} of the
// same pair on the auxiliary maps, M = 5.
TotalLoss total_loss(const std::vector<Value>& final_maps, const std::vector<Value>& aux_maps,
                     const Tensor4& gt, const Tensor4& weights);

}  // namespace dpnet
