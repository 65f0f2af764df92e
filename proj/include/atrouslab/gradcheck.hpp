// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "atrouslab/tensor.hpp"

namespace atrouslab {

struct GradcheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::size_t checked_elements = 0;
};

// Compares the tape gradient of f against central finite differences,
// element by element, over every tensor in `inputs`. F64 only: the default
// step h = 1e-6 * max(1, |x_i|) is far above double noise and far below any
// curvature scale a single layer produces. Deep composites attenuate
// per-parameter gradients to ~1e-6 of the loss scale, where the subtraction
// noise eps*|f|/h dominates a 1e-6 step; callers check those with a larger
// h_base (1e-4 keeps noise near 1e-12 absolute).
//
// five_point switches the numeric side to the O(h^4) Richardson stencil
// (8(f(h)-f(-h)) - (f(2h)-f(-2h))) / 12h, which tolerates the larger h that
// deep models need without paying the h^2 truncation penalty.
//
// f must be deterministic; this is verified by running the forward pass
// twice and requiring bit-identical results.
inline GradcheckReport gradcheck(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                                 std::vector<Tensor<double>> inputs, double tol,
                                 double h_base = 1e-6, bool five_point = false) {
    for (auto& in : inputs) in.set_requires_grad(true);

    const double y0 = f(inputs).item();
    const double y1 = f(inputs).item();
    if (std::memcmp(&y0, &y1, sizeof(double)) != 0) {
        throw ContractError("gradcheck requires a deterministic function; two forward passes disagree");
    }

    // analytic gradients
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        Tensor<double> loss = f(inputs);
        tape.backward(loss);
        for (const auto& in : inputs) {
            analytic.push_back(in.grad_engaged() ? in.grad() : std::vector<double>(in.numel(), 0.0));
        }
    }

    GradcheckReport report;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto& x = inputs[t].data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            const double h = h_base * std::max(1.0, std::abs(orig));
            auto eval = [&](double delta) {
                x[i] = orig + delta;
                const double y = f(inputs).item();
                x[i] = orig;
                return y;
            };
            double numeric;
            if (five_point) {
                numeric = (8.0 * (eval(h) - eval(-h)) - (eval(2 * h) - eval(-2 * h))) / (12.0 * h);
            } else {
                numeric = (eval(h) - eval(-h)) / (2.0 * h);
            }
            const double a = analytic[t][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            report.max_rel_err = std::max(report.max_rel_err, rel);
            ++report.checked_elements;
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace atrouslab
