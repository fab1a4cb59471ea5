#include "dpnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dpnet/rng.hpp"

namespace dpnet {

namespace {

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

std::vector<std::int64_t> pick_coords(std::int64_t size, int max_coords, Rng& rng) {
    std::vector<std::int64_t> coords;
    if (max_coords <= 0 || max_coords >= size) {
        coords.resize(static_cast<std::size_t>(size));
        for (std::int64_t i = 0; i < size; ++i) coords[static_cast<std::size_t>(i)] = i;
        return coords;
    }
    // Sample without replacement, then sort for a fixed evaluation order.
    std::vector<std::int64_t> all(static_cast<std::size_t>(size));
    for (std::int64_t i = 0; i < size; ++i) all[static_cast<std::size_t>(i)] = i;
    rng.shuffle(all.begin(), all.end());
    coords.assign(all.begin(), all.begin() + max_coords);
    std::sort(coords.begin(), coords.end());
    return coords;
}

}  // namespace

double grad_check(const ScalarFn& fn, const Tensor4& x, double eps) {
    Tensor4 analytic;
    {
        Tape tape;
        Value vx = tape.leaf(x, /*needs_grad=*/true);
        Value loss = fn(tape, vx);
        tape.backward(loss);
        analytic = vx.grad();
    }
    auto eval = [&fn](const Tensor4& point) {
        Tape tape;
        Value vx = tape.leaf(point, /*needs_grad=*/false);
        return fn(tape, vx).val().flat(0);
    };

    Tensor4 probe = x;
    double worst = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double orig = probe.flat(i);
        probe.flat(i) = orig + eps;
        const double fp = eval(probe);
        probe.flat(i) = orig - eps;
        const double fm = eval(probe);
        probe.flat(i) = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, rel_err(analytic.flat(i), numeric));
    }
    return worst;
}

GradCheckReport grad_check_params(const std::function<Value(Tape&)>& build_loss,
                                  std::span<Parameter* const> params, double eps,
                                  int max_coords_per_tensor, std::uint64_t seed) {
    for (Parameter* p : params) p->grad.fill(0.0);
    {
        Tape tape;
        Value loss = build_loss(tape);
        tape.backward(loss);
        tape.accumulate_param_grads();
    }
    auto eval = [&build_loss]() {
        Tape tape;
        return build_loss(tape).val().flat(0);
    };
    const double f_base = eval();

    GradCheckReport report;
    Rng rng(seed ^ 0x6772616463686bULL);
    for (Parameter* p : params) {
        const auto coords = pick_coords(p->value.size(), max_coords_per_tensor, rng);
        for (std::int64_t i : coords) {
            const double orig = p->value.flat(i);
            auto central = [&](double step) {
                p->value.flat(i) = orig + step;
                const double fp = eval();
                p->value.flat(i) = orig - step;
                const double fm = eval();
                p->value.flat(i) = orig;
                return (fp - fm) / (2.0 * step);
            };
            // The usable step size is coordinate-dependent: large steps can
            // straddle a ReLU kink (and then agree with each other on the
            // averaged slope, not the derivative), small steps hit the
            // cancellation floor on tiny gradients. Walk the ladder from the
            // smallest step up and accept the first value whose neighbour
            // agrees and whose step is large enough that roundoff cannot
            // explain a gate-level discrepancy. Coordinates with no such
            // scale verify nothing and are skipped; a wrong backward rule is
            // still caught because its numeric estimates are consistent and
            // disagree with the analytic value.
            double steps[5] = {eps / 27.0, eps / 9.0, eps / 3.0, eps, 3.0 * eps};
            double d[5];
            for (int r = 0; r < 5; ++r) d[r] = central(steps[r]);
            bool accepted = false;
            double numeric = 0.0;
            for (int r = 0; r < 4 && !accepted; ++r) {
                if (rel_err(d[r], d[r + 1]) > 1e-3) continue;
                const double noise_rel = 8.0 * std::abs(f_base) * 0x1.0p-53 /
                                         (steps[r] * std::max(std::abs(d[r]), 1e-8));
                if (noise_rel > 3e-5) continue;
                numeric = d[r];
                accepted = true;
            }
            if (!accepted) {
                ++report.skipped;
                continue;
            }
            const double err = rel_err(p->grad.flat(i), numeric);
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = p->name + "[" + std::to_string(i) + "]";
            }
            ++report.checked;
        }
    }
    return report;
}

}  // namespace dpnet
