#include "dpnet/loss.hpp"

#include <cmath>
#include <string>

namespace dpnet {

namespace {

void check_mask_dims(const Tensor4& t, const char* what) {
    const Dims4 d = t.dims();
    if (d.c != 1) {
        throw ShapeError(std::string(what) + ": expected single-channel map, got " + d.str());
    }
}

inline double sigma(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor4 pixel_weights(const Tensor4& gt, int window, double gain) {
    check_mask_dims(gt, "pixel_weights");
    if (window < 1 || window % 2 == 0) {
        throw ConfigError("pixel_weights: window must be odd and >= 1");
    }
    for (std::int64_t i = 0; i < gt.size(); ++i) {
        const double v = gt.flat(i);
        if (v != 0.0 && v != 1.0) {
            throw ValidationError("pixel_weights: ground truth must be binary, found " +
                                  std::to_string(v));
        }
    }
    const Dims4 d = gt.dims();
    const int r = window / 2;
    Tensor4 w(d);
    std::vector<double> integral(static_cast<std::size_t>((d.h + 1) * (d.w + 1)));
    for (int n = 0; n < d.n; ++n) {
        // Summed-area table; mask sums are exact small integers in double.
        for (int y = 0; y < d.h; ++y) {
            for (int x = 0; x < d.w; ++x) {
                integral[static_cast<std::size_t>((y + 1) * (d.w + 1) + x + 1)] =
                    gt.at(n, 0, y, x) +
                    integral[static_cast<std::size_t>(y * (d.w + 1) + x + 1)] +
                    integral[static_cast<std::size_t>((y + 1) * (d.w + 1) + x)] -
                    integral[static_cast<std::size_t>(y * (d.w + 1) + x)];
            }
        }
        for (int y = 0; y < d.h; ++y) {
            const int y0 = std::max(0, y - r), y1 = std::min(d.h - 1, y + r);
            for (int x = 0; x < d.w; ++x) {
                const int x0 = std::max(0, x - r), x1 = std::min(d.w - 1, x + r);
                const double sum =
                    integral[static_cast<std::size_t>((y1 + 1) * (d.w + 1) + x1 + 1)] -
                    integral[static_cast<std::size_t>(y0 * (d.w + 1) + x1 + 1)] -
                    integral[static_cast<std::size_t>((y1 + 1) * (d.w + 1) + x0)] +
                    integral[static_cast<std::size_t>(y0 * (d.w + 1) + x0)];
                const double count = static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
                w.at(n, 0, y, x) = 1.0 + gain * std::abs(sum / count - gt.at(n, 0, y, x));
            }
        }
    }
    return w;
}

Value weighted_bce(Value logits, const Tensor4& gt, const Tensor4& weights) {
    require_same_dims(logits.val(), gt, "weighted_bce");
    require_same_dims(logits.val(), weights, "weighted_bce weights");
    check_mask_dims(gt, "weighted_bce");

    const Dims4 d = gt.dims();
    const std::int64_t plane = static_cast<std::int64_t>(d.h) * d.w;
    Tensor4 out(Dims4{1, 1, 1, 1});
    std::vector<double> weight_mass(static_cast<std::size_t>(d.n));
    double batch = 0.0;
    for (int n = 0; n < d.n; ++n) {
        const double* x = logits.val().data() + plane * n;
        const double* t = gt.data() + plane * n;
        const double* wv = weights.data() + plane * n;
        double sw = 0.0, s = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) {
            // -t*log(sigma(x)) - (1-t)*log(1-sigma(x)) in stable form.
            const double term = std::max(x[i], 0.0) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
            s += wv[i] * term;
            sw += wv[i];
        }
        weight_mass[static_cast<std::size_t>(n)] = sw;
        batch += s / sw;
    }
    out.flat(0) = batch / d.n;

    Tensor4 gt_copy = gt, w_copy = weights;
    return logits.tape->make_node(
        std::move(out), {logits},
        [d, plane, gt_copy, w_copy, weight_mass](const BackwardCtx& ctx) {
            Tensor4* g = ctx.in_grads[0];
            if (!g) return;
            const double upstream = ctx.out_grad.flat(0);
            const Tensor4& xv = *ctx.in_vals[0];
            for (int n = 0; n < d.n; ++n) {
                const double* x = xv.data() + plane * n;
                const double* t = gt_copy.data() + plane * n;
                const double* wv = w_copy.data() + plane * n;
                double* gp = g->data() + plane * n;
                const double scale = upstream / (d.n * weight_mass[static_cast<std::size_t>(n)]);
                for (std::int64_t i = 0; i < plane; ++i) {
                    gp[i] += scale * wv[i] * (sigma(x[i]) - t[i]);
                }
            }
        });
}

Value weighted_iou(Value logits, const Tensor4& gt, const Tensor4& weights) {
    require_same_dims(logits.val(), gt, "weighted_iou");
    require_same_dims(logits.val(), weights, "weighted_iou weights");
    check_mask_dims(gt, "weighted_iou");

    const Dims4 d = gt.dims();
    const std::int64_t plane = static_cast<std::int64_t>(d.h) * d.w;
    Tensor4 out(Dims4{1, 1, 1, 1});
    std::vector<double> inters(static_cast<std::size_t>(d.n));
    std::vector<double> unions(static_cast<std::size_t>(d.n));
    double batch = 0.0;
    for (int n = 0; n < d.n; ++n) {
        const double* x = logits.val().data() + plane * n;
        const double* t = gt.data() + plane * n;
        const double* wv = weights.data() + plane * n;
        double inter = 0.0, uni = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) {
            const double p = sigma(x[i]);
            inter += wv[i] * p * t[i];
            uni += wv[i] * (p + t[i] - p * t[i]);
        }
        inters[static_cast<std::size_t>(n)] = inter;
        unions[static_cast<std::size_t>(n)] = uni;
        batch += uni > 0.0 ? 1.0 - inter / uni : 0.0;
    }
    out.flat(0) = batch / d.n;

    Tensor4 gt_copy = gt, w_copy = weights;
    return logits.tape->make_node(
        std::move(out), {logits},
        [d, plane, gt_copy, w_copy, inters, unions](const BackwardCtx& ctx) {
            Tensor4* g = ctx.in_grads[0];
            if (!g) return;
            const double upstream = ctx.out_grad.flat(0);
            const Tensor4& xv = *ctx.in_vals[0];
            for (int n = 0; n < d.n; ++n) {
                const double uni = unions[static_cast<std::size_t>(n)];
                if (uni <= 0.0) continue;
                const double inter = inters[static_cast<std::size_t>(n)];
                const double* x = xv.data() + plane * n;
                const double* t = gt_copy.data() + plane * n;
                const double* wv = w_copy.data() + plane * n;
                double* gp = g->data() + plane * n;
                const double scale = upstream / d.n;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double p = sigma(x[i]);
                    // d(1 - I/U)/dp, with dI/dp = w*t and dU/dp = w*(1-t).
                    const double dldp = -(wv[i] * t[i] * uni - inter * wv[i] * (1.0 - t[i])) /
                                        (uni * uni);
                    gp[i] += scale * dldp * p * (1.0 - p);
                }
            }
        });
}

TotalLoss total_loss(const std::vector<Value>& final_maps, const std::vector<Value>& aux_maps,
                     const Tensor4& gt, const Tensor4& weights) {
    if (final_maps.empty()) throw ConfigError("total_loss: need at least one final map (N >= 1)");
    if (aux_maps.size() != 4) {
        throw ConfigError("total_loss: expected 4 auxiliary maps (levels 2..5), got " +
                          std::to_string(aux_maps.size()));
    }
    TotalLoss result;
    const double inv_n = 1.0 / static_cast<double>(final_maps.size());
    Value acc;
    for (const Value& map : final_maps) {
        Value bce = weighted_bce(map, gt, weights);
        Value iou = weighted_iou(map, gt, weights);
        result.final_bce += bce.val().flat(0);
        result.final_iou += iou.val().flat(0);
        Value term = scale_const(add(bce, iou), inv_n);
        acc = acc.valid() ? add(acc, term) : term;
    }
    for (std::size_t j = 0; j < aux_maps.size(); ++j) {
        // Level j+2 carries coefficient 1/2^(j+1): 1/2, 1/4, 1/8, 1/16.
        const double coeff = std::ldexp(1.0, -static_cast<int>(j + 1));
        Value bce = weighted_bce(aux_maps[j], gt, weights);
        Value iou = weighted_iou(aux_maps[j], gt, weights);
        result.aux_bce += bce.val().flat(0);
        result.aux_iou += iou.val().flat(0);
        acc = add(acc, scale_const(add(bce, iou), coeff));
    }
    result.total = acc;
    return result;
}

}  // namespace dpnet
