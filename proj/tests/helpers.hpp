// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "hivt5/rng.hpp"
#include "hivt5/tensor.hpp"

namespace testutil {

// Central finite differences on one coordinate of `leaf`, evaluating `loss_fn`
// twice. Independent of the autodiff path under test.
inline double fd_grad(hivt5::Tensor& leaf, std::size_t coord, const std::function<double()>& loss_fn,
                      double step = 1e-5) {
    double saved = leaf.values()[coord];
    leaf.values()[coord] = saved + step;
    double up = loss_fn();
    leaf.values()[coord] = saved - step;
    double down = loss_fn();
    leaf.values()[coord] = saved;
    return (up - down) / (2.0 * step);
}

inline double rel_err(double a, double b) {
    double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / denom;
}

// Checks analytic vs finite-difference gradients on every coordinate of the
// listed leaves. `loss_fn` must rebuild the graph from current leaf values.
// Returns the fraction of coordinates within `tol` relative error.
struct GradCheckResult {
    std::size_t checked = 0;
    std::size_t ok = 0;
    double worst = 0.0;
    double pass_fraction() const { return checked == 0 ? 1.0 : static_cast<double>(ok) / checked; }
};

inline GradCheckResult grad_check(std::vector<hivt5::Tensor> leaves,
                                  const std::function<hivt5::Tensor()>& forward, double tol = 1e-6,
                                  double step = 1e-5) {
    for (auto& l : leaves) l.zero_grad();
    hivt5::Tensor loss = forward();
    hivt5::backward(loss);
    auto loss_value = [&]() { return forward().item(); };
    GradCheckResult res;
    for (auto& leaf : leaves) {
        for (std::size_t c = 0; c < leaf.size(); ++c) {
            double fd = fd_grad(leaf, c, loss_value, step);
            double an = leaf.grad()[c];
            double e = rel_err(an, fd);
            // Both effectively zero: agreement.
            if (std::fabs(an) < 1e-10 && std::fabs(fd) < 1e-10) e = 0.0;
            res.checked++;
            if (e <= tol) res.ok++;
            res.worst = std::max(res.worst, e);
        }
    }
    return res;
}

inline hivt5::Tensor random_tensor(hivt5::Shape shape, hivt5::Rng& rng, bool requires_grad = true,
                                   double scale = 1.0) {
    std::vector<double> v(hivt5::numel(shape));
    for (auto& x : v) x = rng.normal(0.0, scale);
    return hivt5::Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

}  // namespace testutil
