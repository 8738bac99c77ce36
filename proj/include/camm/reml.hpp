#pragma once

// Fast restricted maximum likelihood for the warped additive mixed model.
//
// Model: phi(y) = X b + E gamma + eps, gamma_k ~ N(0, sigma^2 tau_k^2 Lambda_k^alpha_k),
// eps ~ N(0, sigma^2 I). With the diagonal scaling v = sqrt(tau^2 Lambda^alpha)
// and gamma = v o u, everything needed by the likelihood is carried by the
// six inner products X'X, E'X, E'E, X'z, E'z, z'z.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "basis.hpp"
#include "error.hpp"
#include "optim.hpp"
#include "stats.hpp"
#include "warp.hpp"

namespace camm::reml {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kAlphaBound = 2.0;

/// Variance parameters of one effect block. tau_sq is the process variance
/// relative to sigma^2; alpha only applies to spatial blocks.
struct BlockVariance {
    double tau_sq = 0.0;
    double alpha = 0.0;
};

struct VarianceSpec {
    std::vector<BlockVariance> blocks;
};

/// Column layout of the stacked random-effect design.
struct BlockLayout {
    std::vector<Index> offsets;
    std::vector<Index> sizes;
    std::vector<std::optional<VectorXd>> eigenvalues;  // set for spatial blocks

    Index total() const { return offsets.empty() ? 0 : offsets.back() + sizes.back(); }
    std::size_t count() const { return sizes.size(); }
    bool spatial(std::size_t k) const { return eigenvalues[k].has_value(); }

    static BlockLayout from_blocks(const std::vector<basis::EffectBlock>& blocks) {
        BlockLayout out;
        Index off = 0;
        for (const auto& b : blocks) {
            out.offsets.push_back(off);
            out.sizes.push_back(b.size());
            out.eigenvalues.push_back(b.spatial() ? b.eigenvalues : std::nullopt);
            off += b.size();
        }
        return out;
    }

    /// Number of free variance parameters (2 per spatial block, 1 otherwise).
    Index variance_parameter_count() const {
        Index p = 0;
        for (std::size_t k = 0; k < count(); ++k) p += spatial(k) ? 2 : 1;
        return p;
    }

    /// Diagonal of V(theta): sqrt(tau_k^2) * lambda^(alpha_k / 2) per column.
    VectorXd scaling(const VarianceSpec& theta) const {
        if (theta.blocks.size() != count()) throw InputError("variance spec does not match block count");
        VectorXd v(total());
        for (std::size_t k = 0; k < count(); ++k) {
            const auto& t = theta.blocks[k];
            if (!(t.tau_sq >= 0.0)) throw InputError("tau^2 must be non-negative");
            const double tau = std::sqrt(t.tau_sq);
            auto seg = v.segment(offsets[k], sizes[k]);
            if (spatial(k))
                seg = tau * eigenvalues[k]->array().pow(0.5 * t.alpha).matrix();
            else
                seg.setConstant(tau);
        }
        return v;
    }
};

inline MatrixXd stack_blocks(const std::vector<basis::EffectBlock>& blocks, Index rows) {
    Index cols = 0;
    for (const auto& b : blocks) cols += b.size();
    MatrixXd e(rows, cols);
    Index off = 0;
    for (const auto& b : blocks) {
        if (b.basis.rows() != rows) throw InputError("effect block row count does not match data");
        e.middleCols(off, b.size()) = b.basis;
        off += b.size();
    }
    return e;
}

struct InnerProducts {
    MatrixXd M_XX;  // J x J
    MatrixXd M_EX;  // L x J
    MatrixXd M_EE;  // L x L
    VectorXd m_Xy;  // J
    VectorXd m_Ey;  // L
    double m_yy = 0.0;
    Index n = 0;

    Index j() const { return M_XX.rows(); }
    Index l() const { return M_EE.rows(); }
};

/// Replace the response-dependent products (m_Xy, m_Ey, m_yy) in place.
inline void refresh_response(InnerProducts& ip, const MatrixXd& X, const MatrixXd& E, const VectorXd& z) {
    if (z.size() != X.rows()) throw InputError("response length does not match design rows");
    ip.m_Xy.noalias() = X.transpose() * z;
    ip.m_Ey.noalias() = E.transpose() * z;
    ip.m_yy = z.squaredNorm();
}

inline InnerProducts compute_inner_products(const MatrixXd& X, const MatrixXd& E, const VectorXd& z) {
    if (X.rows() != E.rows() || X.rows() != z.size()) throw InputError("inconsistent row counts");
    if (X.cols() == 0) throw InputError("fixed-effect design has no columns");
    InnerProducts ip;
    ip.n = X.rows();
    ip.M_XX.noalias() = X.transpose() * X;
    ip.M_EX.noalias() = E.transpose() * X;
    ip.M_EE.noalias() = E.transpose() * E;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(ip.M_XX, Eigen::EigenvaluesOnly);
    const VectorXd& ev = es.eigenvalues();
    if (!(ev(0) > 1e-10 * std::max(1.0, ev(ev.size() - 1))))
        throw InputError("fixed-effect columns are collinear (X'X is rank deficient)");
    refresh_response(ip, X, E, z);
    return ip;
}

struct ProfiledFit {
    VectorXd beta_hat;
    VectorXd u_hat;
    double sigma_sq_hat = 0.0;
    double d_value = 0.0;
    double log_restricted_lik = 0.0;
};

/// The (J + L) coefficient matrix of the penalized normal equations, factored
/// once per theta. Only response products change between evaluations, so a
/// warp update costs one triangular solve.
class RemlSystem {
public:
    RemlSystem(const InnerProducts& ip, VectorXd v) : v_(std::move(v)), j_(ip.j()), n_(ip.n) {
        const Index l = ip.l();
        if (v_.size() != l) throw InputError("scaling vector does not match random-effect columns");
        a_.resize(j_ + l, j_ + l);
        a_.topLeftCorner(j_, j_) = ip.M_XX;
        a_.bottomLeftCorner(l, j_) = v_.asDiagonal() * ip.M_EX;
        a_.topRightCorner(j_, l) = a_.bottomLeftCorner(l, j_).transpose();
        a_.bottomRightCorner(l, l) = v_.asDiagonal() * ip.M_EE * v_.asDiagonal();
        a_.bottomRightCorner(l, l).diagonal().array() += 1.0;
        llt_.compute(a_);
        if (llt_.info() != Eigen::Success) throw NumericError("restricted likelihood system is singular");
        const auto& lm = llt_.matrixLLT();
        log_det_ = 2.0 * lm.diagonal().array().log().sum();
        if (!std::isfinite(log_det_)) throw NumericError("restricted likelihood system is singular");
    }

    ProfiledFit evaluate(const VectorXd& m_Xy, const VectorXd& m_Ey, double m_yy) const {
        const Index l = v_.size();
        VectorXd rhs(j_ + l);
        rhs.head(j_) = m_Xy;
        rhs.tail(l) = v_.cwiseProduct(m_Ey);
        const VectorXd sol = llt_.solve(rhs);

        ProfiledFit pf;
        pf.beta_hat = sol.head(j_);
        pf.u_hat = sol.tail(l);
        // |z - Xb - EVu|^2 + |u|^2 collapses to m_yy - s'r because A s = r.
        double d = m_yy - sol.dot(rhs);
        if (d < -1e-8 * std::max(1.0, m_yy)) throw NumericError("negative residual quadratic form");
        d = std::max(d, 0.0);
        const double dof = static_cast<double>(n_ - j_);
        pf.d_value = d;
        pf.sigma_sq_hat = d / dof;
        pf.log_restricted_lik = -0.5 * log_det_ - 0.5 * dof * (1.0 + std::log(2.0 * std::numbers::pi * d / dof));
        return pf;
    }

    ProfiledFit evaluate(const InnerProducts& ip) const { return evaluate(ip.m_Xy, ip.m_Ey, ip.m_yy); }

    double log_det() const { return log_det_; }
    const VectorXd& scaling() const { return v_; }
    const MatrixXd& matrix() const { return a_; }
    MatrixXd inverse() const { return llt_.solve(MatrixXd::Identity(a_.rows(), a_.cols())); }

private:
    VectorXd v_;
    Index j_;
    Index n_;
    MatrixXd a_;
    Eigen::LLT<MatrixXd> llt_;
    double log_det_ = 0.0;
};

inline ProfiledFit profiled_restricted_loglik(const InnerProducts& ip, const VarianceSpec& theta,
                                              const BlockLayout& layout) {
    if (ip.n <= ip.j()) throw InputError("need more samples than fixed-effect columns");
    return RemlSystem(ip, layout.scaling(theta)).evaluate(ip);
}

/// AMM restricted log-likelihood on the warped scale plus the Jacobian term.
inline double camm_restricted_loglik(const InnerProducts& ip, const VarianceSpec& theta, const BlockLayout& layout,
                                     const warp::WarpStack& stack, std::span<const double> y) {
    return profiled_restricted_loglik(ip, theta, layout).log_restricted_lik + warp::log_jacobian(stack, y);
}

/// Full (not restricted) log-likelihood at (b-hat, theta, sigma^2-hat), warped
/// scale, without the Jacobian.
inline double gaussian_loglik(const InnerProducts& ip, const VectorXd& v, const ProfiledFit& pf) {
    MatrixXd h = v.asDiagonal() * ip.M_EE * v.asDiagonal();
    h.diagonal().array() += 1.0;
    Eigen::LLT<MatrixXd> llt(h);
    const double log_det_h = h.size() == 0 ? 0.0 : 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    const double n = static_cast<double>(ip.n);
    const double s2 = pf.sigma_sq_hat;
    return -0.5 * (log_det_h + n * std::log(2.0 * std::numbers::pi * s2) + pf.d_value / s2);
}

enum class Phase { ThetaUpdate, WarpUpdate };

struct FitOptions {
    double tol_outer = 1e-5;
    int max_outer = 30;
    int inner_max_evals = 200;
    int warp_evals_per_param = 200;  // warp budget scales with dimension
    double inner_x_tol = 1e-4;
    bool warp_restart = true;
    /// Box on packed SAL coordinates (shifts and log-scales). Their affine parts
    /// are partly absorbed by the trailing standardization, and without a box the
    /// simplex drifts along those flat directions.
    double sal_param_bound = 8.0;
    /// Called with (phase, true) on entry and (phase, false) on exit.
    std::function<void(Phase, bool)> on_phase;
};

struct RemlFit {
    VectorXd beta;
    VectorXd u;       // scaled random coefficients
    VectorXd gamma;   // v o u
    VarianceSpec theta;
    warp::WarpStack stack;
    BlockLayout layout;
    double sigma_sq = 0.0;
    double d_value = 0.0;
    double log_restricted_lik = 0.0;  // includes the Jacobian term
    double log_jacobian = 0.0;
    double log_lik = 0.0;             // full log-likelihood incl. Jacobian, for BIC
    Index n = 0;
    Index j = 0;
    Index parameter_count = 0;
    std::vector<double> trace;        // restricted log-likelihood after init and each cycle
    int cycles = 0;
    bool converged = false;
    MatrixXd coef_covariance;         // sigma^2 A^-1 over [b; u]
    VectorXd warped;                  // phi(y)
    VectorXd fitted;                  // warped-scale linear predictor X b + E gamma
};

/// -2 log L + P log N.
inline double bic(const RemlFit& fit) {
    return -2.0 * fit.log_lik + static_cast<double>(fit.parameter_count) * std::log(static_cast<double>(fit.n));
}

namespace detail {

inline RemlFit assemble(const MatrixXd& X, const MatrixXd& E, std::span<const double> y, const BlockLayout& layout,
                        const VarianceSpec& theta, const warp::WarpStack& stack) {
    RemlFit out;
    out.stack = stack;
    out.theta = theta;
    out.layout = layout;
    out.warped = warp::forward(stack, y);
    const InnerProducts ip = compute_inner_products(X, E, out.warped);
    const RemlSystem sys(ip, layout.scaling(theta));
    const ProfiledFit pf = sys.evaluate(ip);
    out.beta = pf.beta_hat;
    out.u = pf.u_hat;
    out.gamma = sys.scaling().cwiseProduct(pf.u_hat);
    out.sigma_sq = pf.sigma_sq_hat;
    out.d_value = pf.d_value;
    out.log_jacobian = warp::log_jacobian(stack, y);
    out.log_restricted_lik = pf.log_restricted_lik + out.log_jacobian;
    out.log_lik = gaussian_loglik(ip, sys.scaling(), pf) + out.log_jacobian;
    out.n = X.rows();
    out.j = X.cols();
    out.parameter_count = out.j + layout.variance_parameter_count() +
                          static_cast<Index>(stack.trainable_count()) + 1;
    out.coef_covariance = pf.sigma_sq_hat * sys.inverse();
    out.fitted = X * out.beta + E * out.gamma;
    return out;
}

struct PhaseGuard {
    const std::function<void(Phase, bool)>& hook;
    Phase phase;
    PhaseGuard(const std::function<void(Phase, bool)>& h, Phase p) : hook(h), phase(p) {
        if (hook) hook(phase, true);
    }
    ~PhaseGuard() {
        if (hook) hook(phase, false);
    }
};

}  // namespace detail

/// Evaluate the model at fixed (theta, stack) without optimizing. The stack's
/// data-derived parameters are refitted to y.
inline RemlFit evaluate_at(const MatrixXd& X, const std::vector<basis::EffectBlock>& blocks, std::span<const double> y,
                           const VarianceSpec& theta, const warp::WarpStack& stack) {
    const auto layout = BlockLayout::from_blocks(blocks);
    const MatrixXd E = stack_blocks(blocks, X.rows());
    auto out = detail::assemble(X, E, y, layout, theta, warp::fit_standardize(stack, y));
    out.trace = {out.log_restricted_lik};
    out.converged = true;
    return out;
}

inline RemlFit evaluate_at(const MatrixXd& X, const std::vector<basis::EffectBlock>& blocks, const VectorXd& y,
                           const VarianceSpec& theta, const warp::WarpStack& stack) {
    return evaluate_at(X, blocks, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())), theta, stack);
}

/// Alternating REML: theta_k updates on the inner products, then warp updates
/// that refresh only the response products and the Jacobian, until the
/// restricted log-likelihood gain drops below tol_outer.
inline RemlFit fit(const MatrixXd& X, const std::vector<basis::EffectBlock>& blocks, std::span<const double> y,
                   const warp::WarpStack& initial_stack, const FitOptions& opt = {}) {
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    const Index n = X.rows();
    if (static_cast<Index>(y.size()) != n) throw InputError("response length does not match design rows");
    if (n <= X.cols() + 1) throw InputError("need N > J + 1 samples");
    for (double v : y)
        if (!std::isfinite(v)) throw InputError("response contains non-finite values");

    const auto layout = BlockLayout::from_blocks(blocks);
    const MatrixXd E = stack_blocks(blocks, n);
    const std::size_t kcount = layout.count();

    warp::WarpStack stack = warp::fit_standardize(initial_stack, y);
    const warp::WarpStack start_stack = stack;
    VectorXd z = warp::forward(stack, y);
    InnerProducts ip = compute_inner_products(X, E, z);
    double log_jac = warp::log_jacobian(stack, y);

    VarianceSpec theta;
    {
        std::vector<double> zz(z.data(), z.data() + z.size());
        const double var_z = stats::variance(zz);
        for (std::size_t k = 0; k < kcount; ++k)
            theta.blocks.push_back({0.5 * var_z / static_cast<double>(kcount), layout.spatial(k) ? 1.0 : 0.0});
    }

    auto amm_loglik = [&](const VarianceSpec& th) {
        try {
            const double v = profiled_restricted_loglik(ip, th, layout).log_restricted_lik;
            return std::isfinite(v) ? v : kNegInf;
        } catch (const Error&) {
            return kNegInf;
        }
    };

    double current = amm_loglik(theta) + log_jac;
    if (!std::isfinite(current)) throw NumericError("initial restricted likelihood is not finite");

    RemlFit result;
    result.trace.push_back(current);

    optim::SimplexOptions sopt;
    sopt.max_evals = opt.inner_max_evals;
    sopt.x_tol = opt.inner_x_tol;

    const std::size_t n_warp = stack.trainable_count();
    const bool anything_to_fit = kcount > 0 || n_warp > 0;
    bool converged = !anything_to_fit;
    int cycle = 0;

    while (anything_to_fit && cycle < opt.max_outer) {
        ++cycle;
        const double before = current;

        // (3) theta_k updates; the Jacobian is constant in theta.
        {
            detail::PhaseGuard guard(opt.on_phase, Phase::ThetaUpdate);
            for (std::size_t k = 0; k < kcount; ++k) {
                const bool sp = layout.spatial(k);
                Eigen::VectorXd x0(sp ? 2 : 1);
                x0(0) = std::sqrt(theta.blocks[k].tau_sq);
                if (sp) x0(1) = theta.blocks[k].alpha;
                auto decode = [&](const Eigen::VectorXd& x) {
                    VarianceSpec th = theta;
                    th.blocks[k].tau_sq = x(0) * x(0);
                    if (sp) th.blocks[k].alpha = std::clamp(x(1), -kAlphaBound, kAlphaBound);
                    return th;
                };
                const double base = amm_loglik(theta);
                const auto r = optim::nelder_mead([&](const Eigen::VectorXd& x) { return -amm_loglik(decode(x)); },
                                                  x0, sopt);
                if (-r.value > base) theta = decode(r.x);
            }
        }
        current = amm_loglik(theta) + log_jac;

        // (4) warp update with theta fixed: one factorization, then each trial
        // point refreshes (m_Xy, m_Ey, m_yy) and the Jacobian.
        if (n_warp > 0) {
            detail::PhaseGuard guard(opt.on_phase, Phase::WarpUpdate);
            const RemlSystem sys(ip, layout.scaling(theta));
            std::vector<bool> sal_mask;
            // A Standardize step right after a SAL absorbs its w1 and w2
            // exactly; those directions are flat, so the simplex skips them.
            std::vector<Index> active;
            {
                const auto& steps = stack.steps();
                for (std::size_t s = 0; s < steps.size(); ++s) {
                    const bool absorbed = steps[s].kind == warp::StepKind::SAL && s + 1 < steps.size() &&
                                          steps[s + 1].kind == warp::StepKind::Standardize;
                    for (std::size_t p = 0; p < steps[s].trainable.size(); ++p) {
                        if (!steps[s].trainable[p]) continue;
                        if (!(absorbed && p < 2)) active.push_back(static_cast<Index>(sal_mask.size()));
                        sal_mask.push_back(steps[s].kind == warp::StepKind::SAL);
                    }
                }
            }
            const VectorXd w_full = warp::pack_params(stack);
            auto expand = [&](const Eigen::VectorXd& a) {
                VectorXd w = w_full;
                for (std::size_t i = 0; i < active.size(); ++i) w(active[i]) = a(static_cast<Index>(i));
                return w;
            };
            auto reduce = [&](const Eigen::VectorXd& w) {
                VectorXd a(static_cast<Index>(active.size()));
                for (std::size_t i = 0; i < active.size(); ++i) a(static_cast<Index>(i)) = w(active[i]);
                return a;
            };
            auto full_objective = [&](const Eigen::VectorXd& w) {
                for (Index i = 0; i < w.size(); ++i)
                    if (sal_mask[static_cast<std::size_t>(i)] && std::abs(w(i)) > opt.sal_param_bound)
                        return std::numeric_limits<double>::infinity();
                try {
                    const auto s = warp::fit_standardize(warp::unpack_params(stack, w), y);
                    const VectorXd zt = warp::forward(s, y);
                    const VectorXd mx = X.transpose() * zt;
                    const VectorXd me = E.transpose() * zt;
                    const double v = sys.evaluate(mx, me, zt.squaredNorm()).log_restricted_lik +
                                     warp::log_jacobian(s, y);
                    return std::isfinite(v) ? -v : std::numeric_limits<double>::infinity();
                } catch (const Error&) {
                    return std::numeric_limits<double>::infinity();
                }
            };
            auto objective = [&](const Eigen::VectorXd& a) { return full_objective(expand(a)); };
            auto wopt = sopt;
            wopt.max_evals =
                std::max(opt.inner_max_evals, opt.warp_evals_per_param * static_cast<int>(active.size()));
            auto best = optim::nelder_mead(objective, reduce(w_full), wopt);
            if (opt.warp_restart) {
                auto again = optim::nelder_mead(objective, reduce(warp::pack_params(start_stack)), wopt);
                if (again.value < best.value) best = std::move(again);
            }
            if (-best.value > current) {
                stack = warp::fit_standardize(warp::unpack_params(stack, expand(best.x)), y);
                z = warp::forward(stack, y);
                refresh_response(ip, X, E, z);
                log_jac = warp::log_jacobian(stack, y);
                current = amm_loglik(theta) + log_jac;
            }
        }

        result.trace.push_back(current);
        if (std::abs(current - before) < opt.tol_outer) {
            converged = true;
            break;
        }
    }

    auto trace = std::move(result.trace);
    result = detail::assemble(X, E, y, layout, theta, stack);
    result.trace = std::move(trace);
    result.cycles = cycle;
    result.converged = converged;
    return result;
}

inline RemlFit fit(const MatrixXd& X, const std::vector<basis::EffectBlock>& blocks, const VectorXd& y,
                   const warp::WarpStack& initial_stack, const FitOptions& opt = {}) {
    return fit(X, blocks, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())), initial_stack, opt);
}

}  // namespace camm::reml
