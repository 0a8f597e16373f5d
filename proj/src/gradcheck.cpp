#include "jemb/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "jemb/error.hpp"

namespace jemb {

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
    if (!(step > 0.0)) throw DomainError("finite_difference_check: step must be positive");

    Tensor probe = x.detach();
    probe.set_requires_grad(true);
    const Tensor loss = f(probe);
    std::vector<double> analytic(probe.numel(), 0.0);
    if (loss.node()) {
        backward(loss);
        if (probe.has_grad()) analytic.assign(probe.grad().begin(), probe.grad().end());
    }

    Tensor shifted = x.detach();
    auto values = shifted.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double original = values[i];
        values[i] = original + step;
        const double up = f(shifted).item();
        values[i] = original - step;
        const double down = f(shifted).item();
        values[i] = original;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace jemb
