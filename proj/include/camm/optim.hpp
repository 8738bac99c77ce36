#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace camm::optim {

struct SimplexOptions {
    int max_evals = 200;
    double x_tol = 1e-4;    // max vertex distance from the best vertex (inf-norm)
    double f_tol = 1e-9;    // spread of objective values across the simplex
    double initial_step = 0.25;
};

struct SimplexResult {
    Eigen::VectorXd x;
    double value = std::numeric_limits<double>::infinity();
    int evals = 0;
    bool converged = false;
};

/// Derivative-free Nelder-Mead minimization. Non-finite objective values are
/// treated as +inf, so infeasible trial points are simply rejected. The returned
/// value is never worse than f(x0).
inline SimplexResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& x0, const SimplexOptions& opt = {}) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    const Eigen::Index n = x0.size();
    SimplexResult res;

    int evals = 0;
    auto eval = [&](const Eigen::VectorXd& x) {
        ++evals;
        const double v = f(x);
        return std::isfinite(v) ? v : kInf;
    };

    if (n == 0) {
        res.x = x0;
        res.value = eval(x0);
        res.evals = evals;
        res.converged = true;
        return res;
    }

    // Standard coefficients, shrunk slightly in higher dimension (Gao & Han).
    const double dn = static_cast<double>(n);
    const double rho = 1.0;
    const double chi = n > 2 ? 1.0 + 2.0 / dn : 2.0;
    const double psi = n > 2 ? 0.75 - 1.0 / (2.0 * dn) : 0.5;
    const double sigma = n > 2 ? 1.0 - 1.0 / dn : 0.5;

    std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
    std::vector<double> vals(static_cast<std::size_t>(n + 1));
    vals[0] = eval(x0);
    for (Eigen::Index i = 0; i < n; ++i) {
        auto& p = pts[static_cast<std::size_t>(i + 1)];
        p(i) += opt.initial_step;
        vals[static_cast<std::size_t>(i + 1)] = eval(p);
    }

    std::vector<std::size_t> order(pts.size());
    auto sort_simplex = [&] {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
        std::vector<Eigen::VectorXd> p2;
        std::vector<double> v2;
        p2.reserve(pts.size());
        v2.reserve(pts.size());
        for (auto i : order) {
            p2.push_back(std::move(pts[i]));
            v2.push_back(vals[i]);
        }
        pts = std::move(p2);
        vals = std::move(v2);
    };

    sort_simplex();
    while (evals < opt.max_evals) {
        double spread_x = 0.0;
        for (std::size_t i = 1; i < pts.size(); ++i)
            spread_x = std::max(spread_x, (pts[i] - pts[0]).cwiseAbs().maxCoeff());
        const double spread_f = std::abs(vals.back() - vals.front());
        if (spread_x <= opt.x_tol || (std::isfinite(spread_f) && spread_f <= opt.f_tol)) {
            res.converged = true;
            break;
        }

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) centroid += pts[i];
        centroid /= dn;
        const auto& worst = pts.back();

        Eigen::VectorXd xr = centroid + rho * (centroid - worst);
        const double fr = eval(xr);
        if (fr < vals.front()) {
            Eigen::VectorXd xe = centroid + chi * (xr - centroid);
            const double fe = eval(xe);
            if (fe < fr) {
                pts.back() = std::move(xe);
                vals.back() = fe;
            } else {
                pts.back() = std::move(xr);
                vals.back() = fr;
            }
        } else if (fr < vals[vals.size() - 2]) {
            pts.back() = std::move(xr);
            vals.back() = fr;
        } else {
            const bool outside = fr < vals.back();
            Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + psi * (xr - centroid))
                                         : Eigen::VectorXd(centroid - psi * (centroid - worst));
            const double fc = eval(xc);
            if ((outside && fc <= fr) || (!outside && fc < vals.back())) {
                pts.back() = std::move(xc);
                vals.back() = fc;
            } else {
                for (std::size_t i = 1; i < pts.size(); ++i) {
                    pts[i] = pts[0] + sigma * (pts[i] - pts[0]);
                    vals[i] = eval(pts[i]);
                }
            }
        }
        sort_simplex();
    }

    res.x = pts.front();
    res.value = vals.front();
    res.evals = evals;
    return res;
}

}  // namespace camm::optim
