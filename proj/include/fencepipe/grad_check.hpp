#pragma once

#include <cstddef>
#include <functional>

#include "fencepipe/tensor.hpp"

namespace fencepipe {

using ScalarFn = std::function<Tensor(const Tensor&)>;

struct GradCheckOptions {
    double step = 1e-5;
    // Check at most this many coordinates (spread evenly); 0 checks all.
    std::size_t max_coords = 0;
};

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// `f` must map x to a scalar; x itself is not modified.
double grad_check(const ScalarFn& f, const Tensor& x, GradCheckOptions options = {});

inline double grad_check(const ScalarFn& f, const Tensor& x, double step) {
    return grad_check(f, x, GradCheckOptions{step, 0});
}

}  // namespace fencepipe
