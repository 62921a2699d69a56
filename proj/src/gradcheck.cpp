#include "tsflow/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tsflow/rng.hpp"

namespace tsflow {

GradCheckResult finite_difference_check(const std::function<Var<double>()>& objective,
                                        std::vector<Var<double>>& params, double h,
                                        std::optional<std::size_t> max_coords_per_param, std::uint64_t seed) {
    const Var<double> loss = objective();
    const auto analytic = grad<double>(loss, params);

    GradCheckResult res;
    Rng rng(seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& value = params[pi].mutable_value();
        std::vector<std::size_t> coords(value.numel());
        std::iota(coords.begin(), coords.end(), 0);
        if (max_coords_per_param && coords.size() > *max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng.engine());
            coords.resize(*max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        for (auto i : coords) {
            const double saved = value[i];
            value[i] = saved + h;
            double fp, fm;
            {
                NoGradGuard guard;
                fp = objective().value().item();
                value[i] = saved - h;
                fm = objective().value().item();
            }
            value[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) throw NonFiniteError(pi, i);
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double err = std::abs(a - numeric) / (std::abs(a) + 1e-8);
            ++res.coordinates_checked;
            if (err > res.max_rel_error || res.coordinates_checked == 1) {
                res.max_rel_error = std::max(res.max_rel_error, err);
                res.worst_param = pi;
                res.worst_index = i;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

GradCheckResult finite_difference_check(const std::function<Var<double>(const Var<double>&)>& f,
                                        const Tensor<double>& p, double h) {
    std::vector<Var<double>> params{Var<double>(p, true)};
    return finite_difference_check([&] { return f(params[0]); }, params, h);
}

}  // namespace tsflow
