// Fit a warped spatial model to skewed synthetic data and predict at new sites.

#include <cmath>
#include <iostream>
#include <random>

#include "camm/model.hpp"

int main() {
    using namespace camm;
    std::mt19937_64 rng(42);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.0, 1.0);

    // Slope of x1 drifts from west to east; the response is log-normal-ish.
    const int n = 300;
    model::Dataset data;
    data.x.resize(n, 2);
    data.coords = Eigen::MatrixXd(n, 2);
    data.y.resize(n);
    for (int i = 0; i < n; ++i) {
        const double sx = ud(rng), sy = ud(rng);
        data.coords->row(i) << sx, sy;
        data.x(i, 0) = nd(rng);
        data.x(i, 1) = nd(rng);
        const double mu = 1.0 + (0.5 + sx) * data.x(i, 0) - 0.3 * data.x(i, 1) + std::sin(4.0 * sy);
        data.y(i) = std::exp(0.5 * (mu + 0.4 * nd(rng)));
    }
    data.covariate_names = {"x1", "x2"};

    model::ModelSpec spec;
    spec.tr_num.reset();  // choose the number of SAL steps by BIC
    spec.d_candidates = {0, 1, 2};
    spec.tr_nonneg = true;
    spec.max_eigenvectors = 40;

    const auto fit = model::fit_camm(data, spec);

    std::cout << "BIC by number of SAL steps:\n";
    for (const auto& c : fit.d_report) std::cout << "  D=" << c.d << "  " << c.bic << "\n";
    std::cout << "chosen D = " << fit.stack().d_count() << (fit.converged() ? "" : " (not converged)") << "\n\n";

    std::cout << "coefficient types:";
    for (std::size_t k = 0; k < fit.coef_type.size(); ++k)
        std::cout << "  " << (k == 0 ? "(intercept)" : fit.covariate_names[k - 1]) << "="
                  << model::to_string(fit.coef_type[k]);
    std::cout << "\n";

    const auto me = model::marginal_effects(fit, data);
    for (std::size_t k = 0; k < fit.covariate_names.size(); ++k)
        std::cout << "median marginal effect of " << fit.covariate_names[k] << " on y: " << me.median[k] << "\n";

    model::Dataset fresh;
    fresh.x = Eigen::MatrixXd::Zero(2, 2);
    fresh.x(1, 0) = 1.0;
    fresh.coords = Eigen::MatrixXd(2, 2);
    *fresh.coords << 0.1, 0.5, 0.9, 0.5;
    fresh.covariate_names = data.covariate_names;
    const auto pred = model::predict(fit, fresh);
    std::cout << "\npredicted y at (0.1, 0.5) with x = 0: " << pred.response(0)
              << "\npredicted y at (0.9, 0.5) with x1 = 1: " << pred.response(1) << "\n";
    return 0;
}
