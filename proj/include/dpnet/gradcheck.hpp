#pragma once

#include <functional>
#include <span>
#include <string>

#include "dpnet/tape.hpp"

namespace dpnet {

// Builds a scalar loss node from a differentiable input leaf.
using ScalarFn = std::function<Value(Tape&, Value)>;

// Central-difference gradient verification for a function of one tensor:
// compares (f(x+eps) - f(x-eps)) / (2 eps) against the analytic gradient at
// every coordinate and returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8).
double grad_check(const ScalarFn& fn, const Tensor4& x, double eps = 1e-5);

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;  // "param_name[flat_index]"
    std::int64_t checked = 0;
    std::int64_t skipped = 0;  // coordinates whose numeric estimate was unusable
};

// Same check against the gradients accumulated into a set of parameters.
// build_loss constructs the forward pass reading params' current values.
// max_coords_per_tensor == 0 checks every coordinate; otherwise a seeded
// random subset of that size per tensor (used where exhaustive sweeps are
// infeasible, e.g. whole-model checks). Central differences are evaluated at
// two step sizes; coordinates where the two estimates disagree (a ReLU kink
// inside the probe interval) are skipped because the numeric value itself is
// unreliable there.
GradCheckReport grad_check_params(const std::function<Value(Tape&)>& build_loss,
                                  std::span<Parameter* const> params, double eps = 1e-5,
                                  int max_coords_per_tensor = 0, std::uint64_t seed = 0);

}  // namespace dpnet
