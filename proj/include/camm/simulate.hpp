#pragma once

// Monte Carlo harness: the spatially varying coefficient generator, Tukey
// g-and-h warping, distribution fixtures, accuracy metrics and the
// experiment grid runner.

#include <Eigen/Dense>

#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "error.hpp"
#include "model.hpp"

namespace camm::simulate {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct SimulationConfig {
    int n = 500;
    double g = 0.0;
    double h = 0.0;
    int replicates = 20;
    std::uint64_t seed = 1;
    double kernel_range_dgp = 0.5;
    double noise_sd = 2.0;
    std::array<double, 3> svc_variances{1.0, 9.0, 1.0};
    std::array<double, 3> svc_means{1.0, -2.0, 0.5};

    void validate() const {
        if (n < 3) throw InputError("simulation needs n >= 3");
        if (replicates < 1) throw InputError("replicates must be >= 1");
        if (!(h >= 0.0)) throw InputError("h must be non-negative");
        if (!(kernel_range_dgp > 0.0) || !(noise_sd >= 0.0)) throw InputError("invalid generator constants");
    }
};

/// ((exp(g z) - 1) / g) exp(h z^2 / 2), with the g -> 0 limit z exp(h z^2 / 2).
inline double tukey_gh_one(double z, double g, double h) {
    if (!(h >= 0.0)) throw InputError("h must be non-negative");
    const double base = g == 0.0 ? z : std::expm1(g * z) / g;
    return base * std::exp(0.5 * h * z * z);
}

inline VectorXd tukey_gh(const VectorXd& z, double g, double h) {
    VectorXd out(z.size());
    for (Index i = 0; i < z.size(); ++i) out(i) = tukey_gh_one(z(i), g, h);
    return out;
}

struct GeneratedData {
    model::Dataset data;
    MatrixXd truth;  // N x 3: beta0, beta1, beta2 per sample
    VectorXd y0;     // before warping
};

inline GeneratedData generate_svc_data(const SimulationConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const int n = cfg.n;
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    GeneratedData out;
    MatrixXd coords(n, 2);
    for (int i = 0; i < n; ++i) {
        coords(i, 0) = nd(rng);
        coords(i, 1) = nd(rng);
    }
    MatrixXd x(n, 2);
    for (int i = 0; i < n; ++i) {
        x(i, 0) = ud(rng);
        x(i, 1) = ud(rng);
    }

    // Row-standardized exp(-d / r) weights, zero diagonal.
    MatrixXd w(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j)
            w(i, j) = i == j ? 0.0 : std::exp(-(coords.row(i) - coords.row(j)).norm() / cfg.kernel_range_dgp);
        const double s = w.row(i).sum();
        if (s > 0.0) w.row(i) /= s;
    }
    out.truth.resize(n, 3);
    for (int k = 0; k < 3; ++k) {
        VectorXd u(n);
        for (int j = 0; j < n; ++j) u(j) = std::sqrt(cfg.svc_variances[static_cast<std::size_t>(k)]) * nd(rng);
        out.truth.col(k) = (w * u).array() + cfg.svc_means[static_cast<std::size_t>(k)];
    }
    out.y0.resize(n);
    for (int i = 0; i < n; ++i)
        out.y0(i) = out.truth(i, 0) + x(i, 0) * out.truth(i, 1) + x(i, 1) * out.truth(i, 2) + cfg.noise_sd * nd(rng);

    out.data.x = x;
    out.data.covariate_names = {"x1", "x2"};
    out.data.coords = coords;
    out.data.y = tukey_gh(out.y0, cfg.g, cfg.h);
    return out;
}

/// sqrt(mean over replicates and samples of (estimate - truth)^2).
inline double rmse(const MatrixXd& estimates, const MatrixXd& truth) {
    if (estimates.rows() != truth.rows() || estimates.cols() != truth.cols())
        throw InputError("rmse: shape mismatch");
    if (estimates.size() == 0) throw InputError("rmse: empty input");
    return std::sqrt((estimates - truth).squaredNorm() / static_cast<double>(estimates.size()));
}

inline double mean_estimate(const MatrixXd& estimates) {
    if (estimates.size() == 0) throw InputError("mean_estimate: empty input");
    return estimates.mean();
}

struct Fixtures {
    std::vector<double> beta;
    std::vector<double> skew_t;
    std::vector<double> mixture;
};

inline constexpr double kSkewTScale = 6.0;
inline constexpr double kSkewTSlant = 3.0;
inline constexpr double kSkewTDf = 10.0;

/// Three 1000-sample fixtures: beta(2,2); Azzalini skew-t (location 0,
/// scale 6, slant 3, 10 df); Gaussian mixture of 250 at -2, 250 at 5 and
/// 500 at 10, unit variances.
inline Fixtures gaussianization_fixtures(std::uint64_t seed) {
    std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 3u};
    std::mt19937_64 rng(ss);
    std::normal_distribution<double> nd;
    std::gamma_distribution<double> g2(2.0, 1.0);
    std::chi_squared_distribution<double> chi(kSkewTDf);
    Fixtures f;
    for (int i = 0; i < 1000; ++i) {
        const double a = g2(rng), b = g2(rng);
        f.beta.push_back(a / (a + b));
    }
    const double delta = kSkewTSlant / std::sqrt(1.0 + kSkewTSlant * kSkewTSlant);
    for (int i = 0; i < 1000; ++i) {
        const double z0 = nd(rng), z1 = nd(rng);
        const double sn = delta * std::abs(z0) + std::sqrt(1.0 - delta * delta) * z1;
        f.skew_t.push_back(kSkewTScale * sn / std::sqrt(chi(rng) / kSkewTDf));
    }
    for (int i = 0; i < 250; ++i) f.mixture.push_back(-2.0 + nd(rng));
    for (int i = 0; i < 250; ++i) f.mixture.push_back(5.0 + nd(rng));
    for (int i = 0; i < 500; ++i) f.mixture.push_back(10.0 + nd(rng));
    return f;
}

enum class ModelKind { LM, AMM, CAMM };

inline std::string_view to_string(ModelKind m) {
    switch (m) {
        case ModelKind::LM: return "LM";
        case ModelKind::AMM: return "AMM";
        case ModelKind::CAMM: return "CAMM";
    }
    return "?";
}

inline ModelKind model_kind_from_string(std::string_view s) {
    for (auto m : {ModelKind::LM, ModelKind::AMM, ModelKind::CAMM})
        if (to_string(m) == s) return m;
    throw InputError("unknown model '" + std::string(s) + "' (expected LM, AMM or CAMM)");
}

struct ExperimentCell {
    double g = 0.0;
    double h = 0.0;
    int n = 500;
    ModelKind model = ModelKind::CAMM;
    int d = 2;
};

struct ExperimentOptions {
    int replicates = 20;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    Index max_eigenvectors = 60;
    std::vector<int> coefficients{0, 1, 2};  // which of beta0..beta2 to report
    bool record_timing = true;               // false: seconds column is 0, CSV is byte-reproducible
    reml::FitOptions fit_options;
    SimulationConfig base;                   // generator constants
};

struct ExperimentRecord {
    ExperimentCell cell;
    std::array<double, 3> rmse{};
    std::array<double, 3> mean{};
    double seconds = 0.0;            // mean wall-clock per fit
    double converged = 0.0;          // fraction of replicates that fitted and converged
    int failures = 0;
    std::vector<std::vector<double>> traces;
};

/// Per-sample coefficient estimates on the response scale. Warped-scale
/// coefficients are divided by phi'(median y), the marginal effect at the
/// median response; with the D = 0 stack this is the plain y-scale estimate.
inline MatrixXd response_scale_coefficients(const model::FitResult& fit, const model::Dataset& data) {
    const auto vc = model::varying_coefficients(fit, data);
    std::vector<double> yv(data.y.data(), data.y.data() + data.y.size());
    const double slope = std::exp(warp::log_derivative_one(fit.stack(), stats::median(yv)));
    return vc.total / slope;
}

inline model::ModelSpec spec_for(const ExperimentCell& cell, const ExperimentOptions& opt) {
    model::ModelSpec s;
    s.tr_num = cell.model == ModelKind::CAMM ? cell.d : 0;
    s.select_types = false;
    s.max_eigenvectors = opt.max_eigenvectors;
    s.fit_options = opt.fit_options;
    if (cell.model == ModelKind::LM) s.allow_svc = {false, false, false};
    else s.allow_svc = {true, true, true};
    return s;
}

/// Replicate stream from (seed, data cell, replicate); models sharing g, h and
/// N see identical data.
inline std::mt19937_64 replicate_rng(std::uint64_t seed, const ExperimentCell& c, int replicate) {
    const auto gb = std::bit_cast<std::uint64_t>(c.g), hb = std::bit_cast<std::uint64_t>(c.h);
    std::seed_seq ss{static_cast<std::uint32_t>(seed),       static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(gb),         static_cast<std::uint32_t>(gb >> 32),
                     static_cast<std::uint32_t>(hb),         static_cast<std::uint32_t>(hb >> 32),
                     static_cast<std::uint32_t>(c.n),        static_cast<std::uint32_t>(replicate)};
    return std::mt19937_64(ss);
}

inline std::vector<ExperimentRecord> run_experiment(const std::vector<ExperimentCell>& grid,
                                                    const ExperimentOptions& opt) {
    if (opt.replicates < 1) throw InputError("replicates must be >= 1");
    for (int c : opt.coefficients)
        if (c < 0 || c > 2) throw InputError("coefficient index must be 0, 1 or 2");
    std::vector<ExperimentRecord> out;
    for (const auto& cell : grid) {
        SimulationConfig cfg = opt.base;
        cfg.g = cell.g;
        cfg.h = cell.h;
        cfg.n = cell.n;
        cfg.validate();
        struct Rep {
            MatrixXd est, truth;
            double seconds = 0.0;
            bool converged = false;
            std::vector<double> trace;
        };
        auto [reps, errors] = model::detail::parallel_map(
            static_cast<std::size_t>(opt.replicates), opt.threads, [&](std::size_t r) {
                auto rng = replicate_rng(opt.seed, cell, static_cast<int>(r));
                auto gen = generate_svc_data(cfg, rng);
                auto data = gen.data;
                if (cell.model == ModelKind::LM) data.coords.reset();
                const auto t0 = std::chrono::steady_clock::now();
                const auto fit = model::fit_camm(data, spec_for(cell, opt));
                const auto t1 = std::chrono::steady_clock::now();
                Rep rep;
                rep.est = response_scale_coefficients(fit, data);
                rep.truth = gen.truth;
                rep.seconds = std::chrono::duration<double>(t1 - t0).count();
                rep.converged = fit.converged();
                rep.trace = fit.core.trace;
                return rep;
            });

        ExperimentRecord rec;
        rec.cell = cell;
        std::array<double, 3> sq{}, sum{};
        double count = 0.0;
        int ok = 0, conv = 0;
        for (auto& r : reps) {
            if (!r) {
                ++rec.failures;
                continue;
            }
            ++ok;
            conv += r->converged;
            rec.seconds += r->seconds;
            for (int k = 0; k < 3; ++k) {
                sq[static_cast<std::size_t>(k)] += (r->est.col(k) - r->truth.col(k)).squaredNorm();
                sum[static_cast<std::size_t>(k)] += r->est.col(k).sum();
            }
            count += static_cast<double>(r->est.rows());
            rec.traces.push_back(std::move(r->trace));
        }
        for (std::size_t k = 0; k < 3; ++k) {
            rec.rmse[k] = ok ? std::sqrt(sq[k] / count) : std::numeric_limits<double>::quiet_NaN();
            rec.mean[k] = ok ? sum[k] / count : std::numeric_limits<double>::quiet_NaN();
        }
        rec.seconds = ok && opt.record_timing ? rec.seconds / ok : 0.0;
        rec.converged = static_cast<double>(conv) / opt.replicates;
        out.push_back(std::move(rec));
    }
    return out;
}

inline void write_experiment_csv(std::ostream& os, const std::vector<ExperimentRecord>& records,
                                 const std::vector<int>& coefficients = {0, 1, 2}) {
    os << "g,h,N,model,D,coefficient,rmse,mean,seconds,converged\n";
    os.precision(10);
    for (const auto& r : records) {
        for (int k : coefficients) {
            const int d = r.cell.model == ModelKind::CAMM ? r.cell.d : 0;
            os << r.cell.g << ',' << r.cell.h << ',' << r.cell.n << ',' << to_string(r.cell.model) << ',' << d
               << ",beta" << k << ',' << r.rmse[static_cast<std::size_t>(k)] << ','
               << r.mean[static_cast<std::size_t>(k)] << ',' << r.seconds << ',' << r.converged << '\n';
        }
    }
}

}  // namespace camm::simulate
