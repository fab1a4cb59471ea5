#include "dpnet/metrics.hpp"

#include <cmath>
#include <string>

namespace dpnet {

double mae(const Tensor4& pred_prob, const Tensor4& gt) {
    require_same_dims(pred_prob, gt, "mae");
    const Dims4 d = pred_prob.dims();
    const std::int64_t per_image = static_cast<std::int64_t>(d.c) * d.h * d.w;
    double total = 0.0;
    for (int n = 0; n < d.n; ++n) {
        const double* p = pred_prob.data() + per_image * n;
        const double* t = gt.data() + per_image * n;
        double s = 0.0;
        for (std::int64_t i = 0; i < per_image; ++i) s += std::abs(p[i] - t[i]);
        total += s / static_cast<double>(per_image);
    }
    return total / d.n;
}

void MetricAccumulator::add(const Tensor4& pred_prob, const Tensor4& gt) {
    require_same_dims(pred_prob, gt, "MetricAccumulator::add");
    const Dims4 d = pred_prob.dims();
    if (d.n != 1 || d.c != 1) {
        throw ShapeError("MetricAccumulator::add expects (1,1,h,w) maps, got " + d.str());
    }
    mae_sum_ += mae(pred_prob, gt);
    ++images_total_;

    // Histogram of predictions split by ground-truth label; cumulative sums
    // give TP/FP for every threshold t = k/255 (binarize at pred >= t).
    std::array<std::int64_t, kThresholds> pos_hist{}, neg_hist{};
    std::int64_t gt_pos = 0;
    for (std::int64_t i = 0; i < pred_prob.size(); ++i) {
        double p = pred_prob.flat(i);
        if (!(p >= 0.0 && p <= 1.0)) {
            throw ValidationError("MetricAccumulator: prediction outside [0,1]: " +
                                  std::to_string(p));
        }
        // bin = largest k with p >= k/255, so predictions in bin b pass every
        // threshold k <= b. The floor estimate is corrected so the semantics
        // match the double comparison exactly.
        int bin = static_cast<int>(p * 255.0);
        if (bin > 255) bin = 255;
        while (bin < 255 && p >= (bin + 1) / 255.0) ++bin;
        while (bin > 0 && p < bin / 255.0) --bin;
        if (gt.flat(i) != 0.0) {
            ++pos_hist[static_cast<std::size_t>(bin)];
            ++gt_pos;
        } else {
            ++neg_hist[static_cast<std::size_t>(bin)];
        }
    }
    if (gt_pos == 0) return;  // excluded from P/R aggregation

    ++images_in_pr_;
    std::int64_t tp = 0, fp = 0;
    for (int k = kThresholds - 1; k >= 0; --k) {
        tp += pos_hist[static_cast<std::size_t>(k)];
        fp += neg_hist[static_cast<std::size_t>(k)];
        const double prec = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp);
        const double rec = static_cast<double>(tp) / gt_pos;
        precision_sum_[static_cast<std::size_t>(k)] += prec;
        recall_sum_[static_cast<std::size_t>(k)] += rec;
    }
}

MetricReport MetricAccumulator::finalize() const {
    MetricReport report;
    report.images_total = images_total_;
    report.images_in_pr = images_in_pr_;
    report.mae = images_total_ > 0 ? mae_sum_ / images_total_ : 0.0;
    double fsum = 0.0;
    for (int k = 0; k < kThresholds; ++k) {
        double p = 0.0, r = 0.0;
        if (images_in_pr_ > 0) {
            p = precision_sum_[static_cast<std::size_t>(k)] / images_in_pr_;
            r = recall_sum_[static_cast<std::size_t>(k)] / images_in_pr_;
        }
        report.precision[static_cast<std::size_t>(k)] = p;
        report.recall[static_cast<std::size_t>(k)] = r;
        const double denom = kFBetaSquared * p + r;
        const double f = denom > 0.0 ? (1.0 + kFBetaSquared) * p * r / denom : 0.0;
        report.f[static_cast<std::size_t>(k)] = f;
        report.max_f = std::max(report.max_f, f);
        fsum += f;
    }
    report.mean_f = fsum / kThresholds;
    return report;
}

void write_metric_csv(std::ostream& os, const MetricReport& report) {
    os << "threshold,precision,recall,f\n";
    char buf[160];
    for (int k = 0; k < kThresholds; ++k) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.9f,%.9f,%.9f\n", k / 255.0,
                      report.precision[static_cast<std::size_t>(k)],
                      report.recall[static_cast<std::size_t>(k)],
                      report.f[static_cast<std::size_t>(k)]);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "summary,mae=%.9f,max_f=%.9f,mean_f=%.9f\n", report.mae,
                  report.max_f, report.mean_f);
    os << buf;
}

}  // namespace dpnet
