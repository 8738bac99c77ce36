// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <malloc.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <new>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

#include "camm/model.hpp"
#include "camm/reml.hpp"
#include "camm/simulate.hpp"
#include "camm/stats.hpp"
#include "test_support.hpp"

// ---- allocation instrumentation ----
namespace alloc_probe {
std::atomic<bool> armed{false};
std::atomic<std::size_t> live{0}, base{0}, peak_extra{0}, largest{0}, count{0};

inline void on_alloc(std::size_t bytes) {
    const std::size_t now = live.fetch_add(bytes) + bytes;
    if (!armed.load(std::memory_order_relaxed)) return;
    count.fetch_add(1);
    if (bytes > largest.load()) largest.store(bytes);
    const std::size_t b = base.load();
    if (now > b && now - b > peak_extra.load()) peak_extra.store(now - b);
}

void arm(bool on) {
    if (on) base.store(live.load());
    armed.store(on);
}

void reset() {
    peak_extra = 0;
    largest = 0;
    count = 0;
}
}  // namespace alloc_probe

void* operator new(std::size_t n) {
    void* p = std::malloc(n ? n : 1);
    if (!p) throw std::bad_alloc();
    alloc_probe::on_alloc(malloc_usable_size(p));
    return p;
}
void* operator new[](std::size_t n) { return ::operator new(n); }
void operator delete(void* p) noexcept {
    if (!p) return;
    alloc_probe::live.fetch_sub(malloc_usable_size(p));
    std::free(p);
}
void operator delete[](void* p) noexcept { ::operator delete(p); }
void operator delete(void* p, std::size_t) noexcept { ::operator delete(p); }
void operator delete[](void* p, std::size_t) noexcept { ::operator delete(p); }

using namespace camm;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
std::vector<std::vector<double>> all_traces;  // criterion 9

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(int id, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << "CRITERION " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

void keep_trace(const std::vector<double>& t) { all_traces.push_back(t); }

// ---- 1: warp round trip and log-Jacobian ----
void criterion1() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1);
    double worst_rt = 0.0, worst_jac = 0.0;
    for (int s = 0; s < 1000; ++s) {
        const bool nonneg = s % 2 == 1;
        const auto y = nonneg ? fixtures::uniform_sample(rng, 40, 0.05, 20.0)
                              : fixtures::uniform_sample(rng, 40, -10.0, 10.0);
        const auto stack = nonneg ? fixtures::random_nonneg_stack(rng, y) : fixtures::random_default_stack(rng, y);
        for (double v : y) {
            const double back = warp::inverse_one(stack, warp::forward_one(stack, v));
            worst_rt = std::max(worst_rt, std::abs(back - v));
            const double analytic = std::exp(warp::log_derivative_one(stack, v));
            const double h = 1e-6 * std::max(1.0, std::abs(v));  // truncation error ~h^2 near Box-Cox curvature
            const double fd = fixtures::fd_derivative(stack, v, h);
            worst_jac = std::max(worst_jac, std::abs(analytic - fd) / std::abs(analytic));
        }
    }
    const double secs = seconds_since(t0);
    report(1, worst_rt < 1e-8 && worst_jac < 1e-5 && secs < 10.0,
           "1000 stacks x 40 points: max round-trip error " + fmt(worst_rt) + " (< 1e-8), max Jacobian rel. error " +
               fmt(worst_jac) + " (< 1e-5), " + fmt(secs) + " s (< 10)");
}

// ---- 2: REML against the dense oracle ----
double dense_reml(const MatrixXd& X, const MatrixXd& E, const VectorXd& v, const VectorXd& z) {
    const Eigen::Index n = X.rows(), j = X.cols();
    const MatrixXd h = MatrixXd::Identity(n, n) + E * v.array().square().matrix().asDiagonal() * E.transpose();
    Eigen::LDLT<MatrixXd> hf(h);
    const MatrixXd hx = hf.solve(X);
    const MatrixXd xhx = X.transpose() * hx;
    const VectorXd beta = xhx.ldlt().solve(hx.transpose() * z);
    const VectorXd r = z - X * beta;
    const double d = r.dot(hf.solve(r));
    const double dof = static_cast<double>(n - j);
    return -0.5 * (hf.vectorD().array().log().sum() + xhx.ldlt().vectorD().array().log().sum() +
                   dof * (1.0 + std::log(2.0 * std::numbers::pi * d / dof)));
}

double ols_reml(const MatrixXd& X, const VectorXd& z) {
    const VectorXd b = X.colPivHouseholderQr().solve(z);
    const double rss = (z - X * b).squaredNorm();
    const double dof = static_cast<double>(X.rows() - X.cols());
    return -0.5 * std::log((X.transpose() * X).determinant()) -
           0.5 * dof * (1.0 + std::log(2.0 * std::numbers::pi * rss / dof));
}

void criterion2() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    double worst = 0.0, worst_ols = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const int n = 20 + static_cast<int>(ud(rng) * 31);  // 20..50
        const int j = 1 + inst % 3, k = 1 + (inst / 3) % 2;
        MatrixXd X(n, j);
        for (int i = 0; i < n; ++i) {
            X(i, 0) = 1.0;
            for (int c = 1; c < j; ++c) X(i, c) = nd(rng);
        }
        std::vector<basis::EffectBlock> blocks;
        reml::VarianceSpec th;
        for (int b = 0; b < k; ++b) {
            const int l = 2 + static_cast<int>(ud(rng) * 6);
            MatrixXd e(n, l);
            for (int i = 0; i < n; ++i)
                for (int c = 0; c < l; ++c) e(i, c) = nd(rng);
            VectorXd ev(l);
            for (int c = 0; c < l; ++c) ev(c) = 0.1 + 2.0 * ud(rng);
            std::sort(ev.data(), ev.data() + l, std::greater<>());
            blocks.push_back(basis::make_spatial_intercept(e, ev));
            th.blocks.push_back({4.0 * ud(rng), -2.0 + 4.0 * ud(rng)});
        }
        VectorXd z(n);
        for (int i = 0; i < n; ++i) z(i) = nd(rng) * 2.0 + 1.0;
        const auto layout = reml::BlockLayout::from_blocks(blocks);
        const MatrixXd E = reml::stack_blocks(blocks, n);
        const auto ip = reml::compute_inner_products(X, E, z);
        const double ours = reml::profiled_restricted_loglik(ip, th, layout).log_restricted_lik;
        worst = std::max(worst, std::abs(ours - dense_reml(X, E, layout.scaling(th), z)));

        for (auto& b : th.blocks) b.tau_sq = 0.0;
        const double zero = reml::profiled_restricted_loglik(ip, th, layout).log_restricted_lik;
        worst_ols = std::max(worst_ols, std::abs(zero - ols_reml(X, z)));
    }
    const double secs = seconds_since(t0);
    report(2, worst < 1e-6 && worst_ols < 1e-10 && secs < 60.0,
           "100 instances: max |dense - ours| " + fmt(worst) + " (< 1e-6), tau=0 vs OLS " + fmt(worst_ols) +
               " (< 1e-10), " + fmt(secs) + " s");
}

// ---- 3: warp-only Gaussianization of the fixtures ----
void criterion3() {
    const auto t0 = Clock::now();
    const auto f = simulate::gaussianization_fixtures(3);
    bool pass = true;
    std::string detail;
    const std::vector<std::pair<std::string, const std::vector<double>*>> sets{
        {"beta", &f.beta}, {"skew-t", &f.skew_t}, {"mixture", &f.mixture}};
    for (const auto& [name, y] : sets) {
        const MatrixXd X = MatrixXd::Ones(static_cast<Eigen::Index>(y->size()), 1);
        const auto fit = reml::fit(X, {}, std::span<const double>(*y), warp::WarpStack::make_default(2));
        keep_trace(fit.trace);
        const std::vector<double> w(fit.warped.data(), fit.warped.data() + fit.warped.size());
        const double sk = stats::skewness(w), ku = stats::excess_kurtosis(w);
        pass = pass && std::abs(sk) < 0.3 && std::abs(ku) < 0.5;
        detail += name + " skew " + fmt(stats::skewness(*y)) + "->" + fmt(sk) + " kurt " +
                  fmt(stats::excess_kurtosis(*y)) + "->" + fmt(ku) + "; ";
    }
    const double secs = seconds_since(t0);
    report(3, pass && secs < 120.0, detail + fmt(secs) + " s (< 120)");
}

// ---- 4 and 5: desk-scale simulation ----
void criteria4and5() {
    const auto t0 = Clock::now();
    simulate::ExperimentOptions opt;
    opt.replicates = 20;
    opt.seed = 2024;
    opt.record_timing = false;
    const std::vector<simulate::ExperimentCell> grid{
        {0.0, 0.0, 500, simulate::ModelKind::AMM, 0},  {0.0, 0.0, 500, simulate::ModelKind::CAMM, 2},
        {0.5, 0.25, 500, simulate::ModelKind::AMM, 0}, {0.5, 0.25, 500, simulate::ModelKind::CAMM, 2}};
    const auto recs = simulate::run_experiment(grid, opt);
    const double secs = seconds_since(t0);
    for (const auto& r : recs)
        for (const auto& t : r.traces) keep_trace(t);
    const auto& amm0 = recs[0];
    const auto& camm0 = recs[1];
    const auto& amm1 = recs[2];
    const auto& camm1 = recs[3];
    int fails = 0;
    for (const auto& r : recs) fails += r.failures;

    const bool skewed = camm1.rmse[1] < amm1.rmse[1] && camm1.rmse[2] < amm1.rmse[2];
    bool gaussian = true;
    for (int k = 0; k < 3; ++k) gaussian = gaussian && camm0.rmse[k] <= 1.1 * amm0.rmse[k];
    std::string d4 = "g=.5,h=.25 RMSE b1 CAMM " + fmt(camm1.rmse[1]) + " vs AMM " + fmt(amm1.rmse[1]) + ", b2 " +
                     fmt(camm1.rmse[2]) + " vs " + fmt(amm1.rmse[2]) + "; g=h=0 CAMM/AMM ratios";
    for (int k = 0; k < 3; ++k) d4 += " b" + std::to_string(k) + " " + fmt(camm0.rmse[k] / amm0.rmse[k]);
    d4 += " (<= 1.1); fit failures " + std::to_string(fails) + "; " + fmt(secs) + " s (< 1200)";
    report(4, skewed && gaussian && fails == 0 && secs < 1200.0, d4);

    const bool closer = std::abs(camm1.mean[1] + 2.0) < std::abs(amm1.mean[1] + 2.0);
    const bool under = std::abs(amm1.mean[1]) < 2.0;
    report(5, closer && under,
           "g=.5,h=.25 mean b1: CAMM " + fmt(camm1.mean[1]) + ", AMM " + fmt(amm1.mean[1]) +
               "; CAMM closer to -2: " + (closer ? "yes" : "no") + ", AMM closer to zero than -2: " +
               (under ? "yes" : "no"));
}

// ---- 6: BIC picks the warp that generated the data ----
void criterion6() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd;
    const int n = 400;
    model::Dataset d;
    d.x.resize(n, 2);
    VectorXd z(n);
    for (int i = 0; i < n; ++i) {
        d.x(i, 0) = nd(rng);
        d.x(i, 1) = nd(rng);
        z(i) = 0.8 * d.x(i, 0) - 0.5 * d.x(i, 1) + 0.6 * nd(rng);
    }
    d.covariate_names = {"x1", "x2"};
    // 2-SAL generating warp: y = phi^-1(z), strongly skewed and heavy tailed
    const auto gen = warp::WarpStack({warp::WarpStep::sal(0.8, 1.6, 0.6, 0.3), warp::WarpStep::sal(-0.4, 0.8, 1.3, 0.1)});
    d.y.resize(n);
    for (int i = 0; i < n; ++i) d.y(i) = warp::inverse_one(gen, z(i));

    model::ModelSpec spec;
    spec.select_types = false;
    spec.tr_num = 0;
    const auto f0 = model::fit_camm(d, spec);
    spec.tr_num = 2;
    const auto f2 = model::fit_camm(d, spec);
    keep_trace(f0.core.trace);
    keep_trace(f2.core.trace);

    const auto longer = f2.core.stack.with_inserted(1, warp::WarpStep::sal());
    const auto g = reml::evaluate_at(model::fixed_rows(d), {}, d.y, f2.core.theta, longer);
    const double step = reml::bic(g) - reml::bic(f2.core);
    const double expect = 4.0 * std::log(static_cast<double>(n));
    const double secs = seconds_since(t0);
    report(6, f2.bic < f0.bic && std::abs(step - expect) < 1e-6 && secs < 300.0,
           "BIC D=2 " + fmt(f2.bic) + " < D=0 " + fmt(f0.bic) + "; identity SAL adds " + fmt(step) + " vs 4 log N " +
               fmt(expect) + "; " + fmt(secs) + " s");
}

// ---- 7: scaling in N ----
model::Dataset scaling_data(int n, int sites, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    MatrixXd site(sites, 2);
    VectorXd field(sites);
    for (int s = 0; s < sites; ++s) {
        site.row(s) << ud(rng), ud(rng);
        field(s) = std::sin(6.0 * site(s, 0)) + std::cos(4.0 * site(s, 1));
    }
    model::Dataset d;
    d.x.resize(n, 2);
    d.coords = MatrixXd(n, 2);
    d.y.resize(n);
    d.location_ids.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int s = i % sites;
        d.coords->row(i) = site.row(s);
        d.location_ids[static_cast<std::size_t>(i)] = "s" + std::to_string(s);
        d.x(i, 0) = nd(rng);
        d.x(i, 1) = nd(rng);
        d.y(i) = std::exp(0.4 * (1.0 + d.x(i, 0) - 0.5 * d.x(i, 1) + field(s) + 0.5 * nd(rng)));
    }
    d.covariate_names = {"x1", "x2"};
    return d;
}

struct ScalingRun {
    double median_seconds;
    std::size_t theta_peak, theta_largest, theta_allocs;
};

ScalingRun time_fits(int n) {
    std::mt19937_64 rng(7);
    const auto d = scaling_data(n, 400, rng);
    model::ModelSpec spec;
    spec.select_types = false;
    spec.allow_svc = {true, false, false};
    spec.tr_num = 2;
    spec.max_eigenvectors = 100;
    spec.fit_options.on_phase = [](reml::Phase p, bool entering) {
        if (p == reml::Phase::ThetaUpdate) alloc_probe::arm(entering);
    };
    std::vector<double> times;
    alloc_probe::reset();
    for (int rep = 0; rep < 3; ++rep) {
        const auto t0 = Clock::now();
        const auto f = model::fit_camm(d, spec);
        times.push_back(seconds_since(t0));
        keep_trace(f.core.trace);
    }
    std::sort(times.begin(), times.end());
    return {times[1], alloc_probe::peak_extra.load(), alloc_probe::largest.load(), alloc_probe::count.load()};
}

void criterion7() {
    const auto t0 = Clock::now();
    const auto small = time_fits(1000);
    const auto large = time_fits(10000);
    const double ratio = large.median_seconds / small.median_seconds;
    const std::size_t n_bytes = 10000 * sizeof(double);
    const bool no_n_alloc = large.theta_largest < n_bytes;
    const bool sublinear = static_cast<double>(large.theta_peak) < 10.0 * static_cast<double>(small.theta_peak);
    const double secs = seconds_since(t0);
    report(7, ratio < 15.0 && no_n_alloc && sublinear && secs < 900.0,
           "median fit N=1k " + fmt(small.median_seconds) + " s, N=10k " + fmt(large.median_seconds) +
               " s, ratio " + fmt(ratio) + " (< 15); theta-update peak extra bytes " +
               std::to_string(small.theta_peak) + " -> " + std::to_string(large.theta_peak) +
               ", largest block " + std::to_string(large.theta_largest) + " B (< N doubles = " +
               std::to_string(n_bytes) + " B); " + fmt(secs) + " s");
}

// ---- 8: held-out prediction against a log-transformed baseline ----
void criterion8() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    const int n = 800;
    MatrixXd coords(n, 2), x(n, 2);
    VectorXd latent(n);
    for (int i = 0; i < n; ++i) {
        coords.row(i) << ud(rng), ud(rng);
        x(i, 0) = nd(rng);
        x(i, 1) = ud(rng) * 4.0 - 2.0;
        const double b1 = 1.0 + std::sin(3.0 * coords(i, 0));
        latent(i) = std::cos(5.0 * coords(i, 1)) + b1 * x(i, 0) + std::sin(1.5 * x(i, 1)) + 0.5 * nd(rng);
    }
    // right-skewed, heavy-tailed warp of the standardized latent variable, shifted positive
    const double m = latent.mean(), s = std::sqrt((latent.array() - m).square().mean());
    VectorXd y(n);
    for (int i = 0; i < n; ++i) y(i) = 10.0 + simulate::tukey_gh_one((latent(i) - m) / s, 0.5, 0.125);
    if (y.minCoeff() <= 0.0) {
        report(8, false, "generated response not positive; log baseline undefined");
        return;
    }

    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const int n_test = n / 4;
    auto subset = [&](int from, int to) {
        model::Dataset d;
        const int m_rows = to - from;
        d.x.resize(m_rows, 2);
        d.coords = MatrixXd(m_rows, 2);
        d.y.resize(m_rows);
        for (int r = 0; r < m_rows; ++r) {
            const int i = idx[static_cast<std::size_t>(from + r)];
            d.x.row(r) = x.row(i);
            d.coords->row(r) = coords.row(i);
            d.y(r) = y(i);
        }
        d.covariate_names = {"x1", "x2"};
        return d;
    };
    const auto test = subset(0, n_test);
    const auto train = subset(n_test, n);

    model::ModelSpec spec;
    spec.select_types = false;
    spec.allow_svc = {true, true, false};
    spec.allow_nvc = {false, false, true};
    spec.tr_num = 2;
    const auto camm_fit = model::fit_camm(train, spec);
    auto log_spec = spec;
    log_spec.custom_stack = warp::WarpStack({warp::WarpStep::log(), warp::WarpStep::standardize()});
    const auto amm_fit = model::fit_camm(train, log_spec);
    keep_trace(camm_fit.core.trace);
    keep_trace(amm_fit.core.trace);

    auto rmspe = [&](const model::FitResult& f) {
        const auto p = model::predict(f, test);
        double sq = 0.0;
        int used = 0;
        for (Eigen::Index i = 0; i < test.rows(); ++i)
            if (p.ok[static_cast<std::size_t>(i)]) {
                sq += (p.response(i) - test.y(i)) * (p.response(i) - test.y(i));
                ++used;
            }
        return used == test.rows() ? std::sqrt(sq / used) : std::numeric_limits<double>::infinity();
    };
    const double rc = rmspe(camm_fit), ra = rmspe(amm_fit);
    const double secs = seconds_since(t0);
    report(8, rc < ra && secs < 600.0,
           "held-out " + std::to_string(n_test) + " rows: RMSPE CAMM D=2 " + fmt(rc) + " vs log-AMM " + fmt(ra) +
               "; " + fmt(secs) + " s");
}

// ---- 9: monotone traces ----
void criterion9() {
    double worst = 0.0;
    std::size_t points = 0;
    for (const auto& t : all_traces) {
        points += t.size();
        for (std::size_t i = 1; i < t.size(); ++i) worst = std::min(worst, t[i] - t[i - 1]);
    }
    report(9, worst >= -1e-8 && !all_traces.empty(),
           std::to_string(all_traces.size()) + " fits, " + std::to_string(points) +
               " trace points, largest decrease " + fmt(-worst) + " (<= 1e-8)");
}

}  // namespace

int main(int argc, char** argv) {
    // optional subset, e.g. "acceptance 1 2 9"
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
    auto want = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
    auto guarded = [&](int id, auto fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            report(id, false, std::string("threw: ") + e.what());
        }
    };
    if (want(1)) guarded(1, criterion1);
    if (want(2)) guarded(2, criterion2);
    if (want(3)) guarded(3, criterion3);
    if (want(4) || want(5)) guarded(4, criteria4and5);
    if (want(6)) guarded(6, criterion6);
    if (want(7)) guarded(7, criterion7);
    if (want(8)) guarded(8, criterion8);
    if (want(9)) guarded(9, criterion9);
    std::cout << (failures == 0 ? "ACCEPTANCE: ALL PASS" : "ACCEPTANCE: " + std::to_string(failures) + " FAILED")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
