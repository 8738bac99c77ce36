#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "camm/reml.hpp"
#include "test_support.hpp"

using namespace camm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Dense N x N restricted likelihood with sigma^2 profiled out:
// H = I + E G E', G = diag(v^2), GLS for b, d = r' H^-1 r.
struct DenseReml {
    double loglik;
    VectorXd beta;
    double sigma_sq;
};

DenseReml dense_reml(const MatrixXd& X, const MatrixXd& E, const VectorXd& v, const VectorXd& z) {
    const Eigen::Index n = X.rows(), j = X.cols();
    MatrixXd h = MatrixXd::Identity(n, n) + E * v.array().square().matrix().asDiagonal() * E.transpose();
    Eigen::LDLT<MatrixXd> hf(h);
    const MatrixXd hx = hf.solve(X);
    const MatrixXd xhx = X.transpose() * hx;
    const VectorXd beta = xhx.ldlt().solve(hx.transpose() * z);
    const VectorXd r = z - X * beta;
    const double d = r.dot(hf.solve(r));
    const double logdet_h = hf.vectorD().array().log().sum();
    const double logdet_xhx = xhx.ldlt().vectorD().array().log().sum();
    const double dof = static_cast<double>(n - j);
    DenseReml out;
    out.loglik = -0.5 * (logdet_h + logdet_xhx + dof * (1.0 + std::log(2.0 * std::numbers::pi * d / dof)));
    out.beta = beta;
    out.sigma_sq = d / dof;
    return out;
}

struct Problem {
    MatrixXd X, coords;
    std::vector<basis::EffectBlock> blocks;
    VectorXd y;
};

Problem small_problem(unsigned seed, int n = 60) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0, 1);
    Problem p;
    p.coords.resize(n, 2);
    for (int i = 0; i < n; ++i) p.coords.row(i) << ud(rng), ud(rng);
    p.X.resize(n, 2);
    for (int i = 0; i < n; ++i) p.X.row(i) << 1.0, nd(rng);
    auto sb = basis::moran_eigenvectors(p.coords, 0.0, 12);
    p.blocks.push_back(basis::make_spatial_intercept(sb.vectors, sb.eigenvalues));
    p.blocks.push_back(basis::make_spatial_vc(sb.vectors, sb.eigenvalues, p.X.col(1), 1));
    p.y.resize(n);
    for (int i = 0; i < n; ++i)
        p.y(i) = 1.0 + 2.0 * p.X(i, 1) + 3.0 * sb.vectors(i, 0) + 0.5 * nd(rng);
    return p;
}

}  // namespace

TEST(RemlOracle, ProfiledLikelihoodMatchesDenseForm) {
    auto p = small_problem(7);
    const auto layout = reml::BlockLayout::from_blocks(p.blocks);
    const MatrixXd E = reml::stack_blocks(p.blocks, p.X.rows());
    const auto ip = reml::compute_inner_products(p.X, E, p.y);
    for (auto [t1, a1, t2, a2] : std::vector<std::array<double, 4>>{
             {0.5, 1.0, 0.2, 0.0}, {2.0, -1.5, 0.01, 2.0}, {0.0, 0.0, 1.0, 1.0}, {0.0, 0.0, 0.0, 0.0}}) {
        reml::VarianceSpec th{{{t1, a1}, {t2, a2}}};
        const VectorXd v = layout.scaling(th);
        const auto oracle = dense_reml(p.X, E, v, p.y);
        const auto pf = reml::profiled_restricted_loglik(ip, th, layout);
        EXPECT_NEAR(pf.log_restricted_lik, oracle.loglik, 1e-8 * std::abs(oracle.loglik));
        EXPECT_NEAR(pf.sigma_sq_hat, oracle.sigma_sq, 1e-9 * oracle.sigma_sq);
        EXPECT_LT((pf.beta_hat - oracle.beta).norm(), 1e-8);
    }
}

TEST(RemlOracle, ZeroVarianceReducesToOls) {
    auto p = small_problem(11);
    const auto layout = reml::BlockLayout::from_blocks(p.blocks);
    const MatrixXd E = reml::stack_blocks(p.blocks, p.X.rows());
    const auto ip = reml::compute_inner_products(p.X, E, p.y);
    reml::VarianceSpec th{{{0.0, 1.0}, {0.0, 1.0}}};
    const auto pf = reml::profiled_restricted_loglik(ip, th, layout);

    const VectorXd b = (p.X.transpose() * p.X).ldlt().solve(p.X.transpose() * p.y);
    const double rss = (p.y - p.X * b).squaredNorm();
    const double n = p.X.rows(), j = p.X.cols();
    const double logdet = std::log((p.X.transpose() * p.X).determinant());
    const double expected = -0.5 * logdet - 0.5 * (n - j) * (1.0 + std::log(2.0 * std::numbers::pi * rss / (n - j)));
    EXPECT_LT((pf.beta_hat - b).norm(), 1e-10);
    EXPECT_NEAR(pf.d_value, rss, 1e-9 * rss);
    EXPECT_NEAR(pf.log_restricted_lik, expected, 1e-9 * std::abs(expected));
    EXPECT_TRUE(pf.u_hat.isZero(0.0));
}

TEST(RemlOracle, FullLikelihoodMatchesDenseGaussian) {
    auto p = small_problem(3);
    const auto layout = reml::BlockLayout::from_blocks(p.blocks);
    const MatrixXd E = reml::stack_blocks(p.blocks, p.X.rows());
    const auto ip = reml::compute_inner_products(p.X, E, p.y);
    reml::VarianceSpec th{{{0.7, 0.5}, {0.3, 1.2}}};
    const VectorXd v = layout.scaling(th);
    const auto pf = reml::profiled_restricted_loglik(ip, th, layout);
    const double ll = reml::gaussian_loglik(ip, v, pf);

    const Eigen::Index n = p.X.rows();
    MatrixXd cov = pf.sigma_sq_hat *
                   (MatrixXd::Identity(n, n) + E * v.array().square().matrix().asDiagonal() * E.transpose());
    Eigen::LLT<MatrixXd> c(cov);
    const VectorXd r = p.y - p.X * pf.beta_hat;
    const double logdet = 2.0 * MatrixXd(c.matrixL()).diagonal().array().log().sum();
    const double expected = -0.5 * (logdet + r.dot(c.solve(r)) + n * std::log(2.0 * std::numbers::pi));
    EXPECT_NEAR(ll, expected, 1e-8 * std::abs(expected));
}

TEST(RemlOracle, WarpedLikelihoodAddsJacobian) {
    auto p = small_problem(5);
    const auto layout = reml::BlockLayout::from_blocks(p.blocks);
    const MatrixXd E = reml::stack_blocks(p.blocks, p.X.rows());
    std::mt19937_64 rng(9);
    std::vector<double> yv(p.y.data(), p.y.data() + p.y.size());
    auto stack = fixtures::random_default_stack(rng, yv);
    const VectorXd z = warp::forward(stack, yv);
    const auto ip = reml::compute_inner_products(p.X, E, z);
    reml::VarianceSpec th{{{0.4, 1.0}, {0.1, 0.0}}};
    double jac = 0.0;
    for (double y : yv) jac += std::log(fixtures::fd_derivative(stack, y));
    const double expected = dense_reml(p.X, E, layout.scaling(th), z).loglik + jac;
    EXPECT_NEAR(reml::camm_restricted_loglik(ip, th, layout, stack, yv), expected, 1e-5);
}

TEST(RemlInputs, RejectsCollinearFixedEffects) {
    auto p = small_problem(1);
    MatrixXd X(p.X.rows(), 3);
    X << p.X, 2.0 * p.X.col(1);
    const MatrixXd E = reml::stack_blocks(p.blocks, p.X.rows());
    EXPECT_THROW(reml::compute_inner_products(X, E, p.y), InputError);
}

TEST(RemlInputs, RejectsTooFewSamples) {
    MatrixXd X = MatrixXd::Ones(2, 1);
    VectorXd y(2);
    y << 1, 2;
    EXPECT_THROW(reml::fit(X, {}, y, warp::WarpStack::make_default(0)), InputError);
}

TEST(RemlFit, TraceIsMonotoneAndConverges) {
    auto p = small_problem(21, 120);
    std::vector<double> yv(p.y.data(), p.y.data() + p.y.size());
    for (auto& v : yv) v = std::exp(0.4 * v);
    const auto f = reml::fit(p.X, p.blocks, yv, warp::WarpStack::make_default(2));
    ASSERT_GE(f.trace.size(), 2u);
    for (std::size_t i = 1; i < f.trace.size(); ++i) EXPECT_GE(f.trace[i], f.trace[i - 1] - 1e-9);
    EXPECT_TRUE(f.converged);
    EXPECT_NEAR(f.trace.back(), f.log_restricted_lik, 1e-8);
}

TEST(RemlFit, RecoversCoefficientsWithoutWarp) {
    auto p = small_problem(4, 200);
    const auto f = reml::fit(p.X, p.blocks, p.y, warp::WarpStack::make_default(0));
    // Default D=0 stack standardizes the response; undo that to compare.
    const auto& st = f.stack.steps();
    const double scale = st[0].params[1], loc = st[0].params[0];
    EXPECT_NEAR(f.beta(1) * scale, 2.0, 0.2);
    EXPECT_NEAR(f.beta(0) * scale + loc, 1.0, 0.8);
    EXPECT_GT(f.theta.blocks[0].tau_sq, f.theta.blocks[1].tau_sq);
}

TEST(RemlFit, PhaseHookBracketsUpdates) {
    auto p = small_problem(8);
    int depth = 0, theta_calls = 0, warp_calls = 0;
    reml::FitOptions opt;
    opt.on_phase = [&](reml::Phase ph, bool enter) {
        depth += enter ? 1 : -1;
        EXPECT_LE(depth, 1);
        if (enter) (ph == reml::Phase::ThetaUpdate ? theta_calls : warp_calls)++;
    };
    const auto f = reml::fit(p.X, p.blocks, p.y, warp::WarpStack::make_default(1), opt);
    EXPECT_EQ(depth, 0);
    EXPECT_EQ(theta_calls, f.cycles);
    EXPECT_EQ(warp_calls, f.cycles);
}

TEST(RemlBic, IdentityStepCostsFourLogN) {
    auto p = small_problem(13, 100);
    const auto f = reml::fit(p.X, p.blocks, p.y, warp::WarpStack::make_default(1));
    // Insert an identity SAL right after the first standardization.
    const auto longer = f.stack.with_inserted(1, warp::WarpStep::sal());
    const auto g = reml::evaluate_at(p.X, p.blocks, p.y, f.theta, longer);
    EXPECT_NEAR(g.log_lik, f.log_lik, 1e-8);
    EXPECT_NEAR(reml::bic(g) - reml::bic(f), 4.0 * std::log(100.0), 1e-6);
}

TEST(RemlBic, ParameterCount) {
    auto p = small_problem(2);
    const auto f = reml::evaluate_at(p.X, p.blocks, p.y, {{{0.3, 1.0}, {0.3, 1.0}}}, warp::WarpStack::make_default(2));
    EXPECT_EQ(f.parameter_count, 2 + 4 + 8 + 1);
}
