#pragma once

#include <array>
#include <ostream>

#include "dpnet/tensor.hpp"

namespace dpnet {

inline constexpr int kThresholds = 256;
inline constexpr double kFBetaSquared = 0.3;

// Mean absolute error, per image then averaged over the batch.
double mae(const Tensor4& pred_prob, const Tensor4& gt);

struct MetricReport {
    double mae = 0.0;
    std::array<double, kThresholds> precision{};
    std::array<double, kThresholds> recall{};
    std::array<double, kThresholds> f{};
    double max_f = 0.0;
    double mean_f = 0.0;
    int images_total = 0;
    int images_in_pr = 0;  // images with foreground ground truth
};

// Streams (pred, gt) image pairs and aggregates MAE plus the 256-threshold
// precision/recall/F curves. Per-image precision/recall are averaged across
// images before F is computed; images with empty ground truth are excluded
// from the P/R aggregation but still count toward MAE. Precision of an empty
// prediction is defined as 1.
class MetricAccumulator {
public:
    void add(const Tensor4& pred_prob, const Tensor4& gt);
    MetricReport finalize() const;

private:
    double mae_sum_ = 0.0;
    int images_total_ = 0;
    int images_in_pr_ = 0;
    std::array<double, kThresholds> precision_sum_{};
    std::array<double, kThresholds> recall_sum_{};
};

// CSV: threshold,precision,recall,f rows plus a trailing summary row.
void write_metric_csv(std::ostream& os, const MetricReport& report);

}  // namespace dpnet
