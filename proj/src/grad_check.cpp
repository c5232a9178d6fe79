#include "fencepipe/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "fencepipe/error.hpp"

namespace fencepipe {

double grad_check(const ScalarFn& f, const Tensor& x, GradCheckOptions options) {
    Tensor probe = x.detach();
    probe.set_requires_grad(true);
    const Tensor out = f(probe);
    if (out.numel() != 1) {
        throw ContractError("grad_check: function must return a scalar");
    }
    std::vector<double> analytic(probe.numel(), 0.0);
    if (out.requires_grad()) {
        backward(out);
        if (probe.has_grad()) {
            std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());
        }
    }

    const std::size_t n = probe.numel();
    const std::size_t stride =
        options.max_coords == 0 || options.max_coords >= n ? 1 : n / options.max_coords;
    const double h = options.step;
    double worst = 0.0;
    for (std::size_t i = 0; i < n; i += stride) {
        Tensor plus = x.detach();
        plus.mutable_data()[i] += h;
        Tensor minus = x.detach();
        minus.mutable_data()[i] -= h;
        const double numeric = (f(plus).item() - f(minus).item()) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace fencepipe
