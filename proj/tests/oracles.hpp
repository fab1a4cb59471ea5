// Test-only reference implementations, kept independent of the library's
// computation paths.
#pragma once

#include <cmath>

#include "dpnet/ops.hpp"

namespace dpnet::testing {

// Naive direct convolution: six nested loops over output and kernel
// coordinates, zero padding, contiguous channel groups.
inline Tensor4 conv2d_naive(const Tensor4& x, const Tensor4& w, const Conv2dGeom& g) {
    const Dims4 xd = x.dims(), wd = w.dims();
    const Dims4 yd = conv2d_output_dims(xd, wd, g);
    const int cin_g = wd.c, cout_g = wd.n / g.groups;
    Tensor4 y(yd);
    for (int n = 0; n < yd.n; ++n) {
        for (int oc = 0; oc < yd.c; ++oc) {
            const int grp = oc / cout_g;
            for (int oh = 0; oh < yd.h; ++oh) {
                for (int ow = 0; ow < yd.w; ++ow) {
                    double acc = 0.0;
                    for (int ic = 0; ic < cin_g; ++ic) {
                        for (int kh = 0; kh < wd.h; ++kh) {
                            for (int kw = 0; kw < wd.w; ++kw) {
                                const int ih = oh * g.stride + kh - g.pad;
                                const int iw = ow * g.stride + kw - g.pad;
                                if (ih < 0 || ih >= xd.h || iw < 0 || iw >= xd.w) continue;
                                acc += x.at(n, grp * cin_g + ic, ih, iw) * w.at(oc, ic, kh, kw);
                            }
                        }
                    }
                    y.at(n, oc, oh, ow) = acc;
                }
            }
        }
    }
    return y;
}

// Window box mean with border-clipped counts, direct double loop.
inline Tensor4 box_mean_naive(const Tensor4& m, int window) {
    const Dims4 d = m.dims();
    const int r = window / 2;
    Tensor4 out(d);
    for (int n = 0; n < d.n; ++n)
        for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x) {
                double sum = 0.0;
                int count = 0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= d.h || xx < 0 || xx >= d.w) continue;
                        sum += m.at(n, 0, yy, xx);
                        ++count;
                    }
                out.at(n, 0, y, x) = sum / count;
            }
    return out;
}

// Per-pixel weighted BCE, plain loops, per image then batch mean.
inline double weighted_bce_naive(const Tensor4& logits, const Tensor4& gt, const Tensor4& w) {
    const Dims4 d = logits.dims();
    double batch = 0.0;
    for (int n = 0; n < d.n; ++n) {
        double num = 0.0, den = 0.0;
        for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x) {
                const double z = logits.at(n, 0, y, x);
                const double t = gt.at(n, 0, y, x);
                const double p = 1.0 / (1.0 + std::exp(-z));
                const double term = -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
                num += w.at(n, 0, y, x) * term;
                den += w.at(n, 0, y, x);
            }
        batch += num / den;
    }
    return batch / d.n;
}

inline double weighted_iou_naive(const Tensor4& logits, const Tensor4& gt, const Tensor4& w) {
    const Dims4 d = logits.dims();
    double batch = 0.0;
    for (int n = 0; n < d.n; ++n) {
        double inter = 0.0, uni = 0.0;
        for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x) {
                const double p = 1.0 / (1.0 + std::exp(-logits.at(n, 0, y, x)));
                const double t = gt.at(n, 0, y, x);
                inter += w.at(n, 0, y, x) * p * t;
                uni += w.at(n, 0, y, x) * (p + t - p * t);
            }
        batch += uni > 0.0 ? 1.0 - inter / uni : 0.0;
    }
    return batch / d.n;
}

// Threshold sweep with direct comparisons, one image.
struct PrPoint {
    double precision = 1.0;
    double recall = 0.0;
};

inline PrPoint pr_at_threshold_naive(const Tensor4& pred, const Tensor4& gt, double threshold) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.flat(i) >= threshold;
        const bool t = gt.flat(i) != 0.0;
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
    }
    PrPoint out;
    out.precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp);
    out.recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
    return out;
}

}  // namespace dpnet::testing
