#pragma once

// Central-difference gradient checking. The function under test is rebuilt
// from the same leaf tensors on every call, evaluated twice at the base point
// to prove it is deterministic, then each input element is perturbed by +/-h
// and the numeric slope is compared against the reverse-mode gradient.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kags/errors.hpp"
#include "kags/tensor.hpp"

namespace kags {

struct GradCheckReport {
    std::string op_name;
    double max_rel_error = 0.0;
    std::size_t element_count = 0;
    bool passed = false;
};

namespace detail {

// The denominator floor absorbs central-difference cancellation noise on
// elements whose true gradient is zero (a bias feeding batch normalization,
// an embedding row the readout never touches). One ulp of jitter in a scalar
// near 1.0 is ~1e-16, so at h = 1e-5 the numeric side can read ~1e-11 where
// the analytic side is exactly 0; a 1e-6 floor keeps that an order of
// magnitude below the tolerances used here, while genuine backward bugs show
// up on O(0.1) gradients and are unaffected by the floor.
inline double rel_error(double analytic, double numeric) {
    double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
    return std::fabs(analytic - numeric) / denom;
}

} // namespace detail

// f must map the given leaves to a scalar tensor. All inputs must require
// gradients. step is the half-width h of the central difference.
template <typename S>
GradCheckReport grad_check(const std::string& op_name,
                           const std::function<Tensor<S>()>& f,
                           std::vector<Tensor<S>> inputs,
                           double step, double tolerance) {
    if (step <= 0.0)
        throw ValidationError("grad_check: step must be positive");
    if (tolerance <= 0.0)
        throw ValidationError("grad_check: tolerance must be positive");
    if (inputs.empty())
        throw ValidationError("grad_check: no inputs to perturb");
    for (const auto& in : inputs)
        if (!in.requires_grad())
            throw ContractError("grad_check: input tensor does not require gradients");

    Tensor<S> first = f();
    if (first.numel() != 1)
        throw ContractError("grad_check: function output is not a scalar");
    Tensor<S> second = f();
    if (first.values() != second.values())
        throw OracleError("grad_check: " + op_name +
                          " is not deterministic at the base point");

    for (auto& in : inputs) in.zero_grad();
    backward(second);

    GradCheckReport report;
    report.op_name = op_name;
    const S h = static_cast<S>(step);
    for (auto& in : inputs) {
        const std::vector<S> analytic = in.grad();
        std::vector<S>& vals = in.values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const S saved = vals[i];
            vals[i] = saved + h;
            double up = static_cast<double>(f().item());
            vals[i] = saved - h;
            double down = static_cast<double>(f().item());
            vals[i] = saved;
            double numeric = (up - down) / (2.0 * static_cast<double>(h));
            double err = detail::rel_error(static_cast<double>(analytic[i]), numeric);
            report.max_rel_error = std::max(report.max_rel_error, err);
            ++report.element_count;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

} // namespace kags
