#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "histovit/rng.hpp"
#include "histovit/tensor.hpp"

namespace testutil {

inline histovit::Tensor random_tensor(std::vector<std::size_t> shape, histovit::rng::Stream& s,
                                      double lo = -1.0, double hi = 1.0,
                                      bool requires_grad = false) {
    histovit::Tensor t = histovit::Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.mutable_values()) v = s.uniform(lo, hi);
    return t;
}

struct GradCheck {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

// Central-difference gradient check. fn must rebuild the loss from the
// current parameter values; it gets a tape for the analytic pass and nullptr
// during the finite-difference probes.
inline GradCheck grad_check(const std::function<histovit::Tensor(histovit::Tape*)>& fn,
                            std::span<histovit::Tensor> params, double step = 1e-5) {
    using histovit::Tape;
    using histovit::Tensor;

    for (Tensor& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tape tape;
    Tensor loss = fn(&tape);
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Tensor& p : params) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
    }

    GradCheck result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        auto values = p.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            values[i] = original + step;
            const double plus = fn(nullptr).item();
            values[i] = original - step;
            const double minus = fn(nullptr).item();
            values[i] = original;
            const double numeric = (plus - minus) / (2.0 * step);
            const double a = analytic[pi][i];
            const double abs_err = std::fabs(a - numeric);
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            result.max_abs_err = std::max(result.max_abs_err, abs_err);
            result.max_rel_err = std::max(result.max_rel_err, abs_err / denom);
        }
    }
    return result;
}

}  // namespace testutil
