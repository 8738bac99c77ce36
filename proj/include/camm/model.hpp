#pragma once

// User-facing estimator: builds effect blocks from a dataset, picks
// coefficient types and warp depth by BIC, and turns a fit into predictions,
// varying coefficients, marginal effects and significance summaries.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include "basis.hpp"
#include "error.hpp"
#include "reml.hpp"
#include "stats.hpp"
#include "warp.hpp"

namespace camm::model {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Dataset {
    VectorXd y;                                     // empty when only predicting
    MatrixXd x;                                     // N x K covariates, no intercept column
    std::vector<std::string> covariate_names;
    std::optional<MatrixXd> coords;                 // N x 2
    std::vector<std::string> location_ids;          // optional, one per row
    std::vector<std::vector<std::string>> groups;   // one id vector per group column
    std::vector<std::string> group_names;
    std::vector<bool> group_temporal;               // true: TemporalIntercept

    Index rows() const { return x.rows(); }
    Index covariates() const { return x.cols(); }

    void validate(bool need_response) const {
        const Index n = rows();
        if (static_cast<Index>(covariate_names.size()) != x.cols())
            throw InputError("covariate name count does not match covariate columns");
        if (!x.allFinite()) throw InputError("covariates contain non-finite values");
        if (need_response) {
            if (y.size() != n) throw InputError("response length does not match covariate rows");
            if (!y.allFinite()) throw InputError("response contains non-finite values");
        }
        if (coords) {
            if (coords->rows() != n || coords->cols() != 2) throw InputError("coordinates must be N x 2");
            if (!coords->allFinite()) throw InputError("coordinates contain non-finite values");
        }
        if (!location_ids.empty() && static_cast<Index>(location_ids.size()) != n)
            throw InputError("location id count does not match rows");
        if (groups.size() != group_names.size()) throw InputError("group names do not match group columns");
        for (const auto& g : groups)
            if (static_cast<Index>(g.size()) != n) throw InputError("group id count does not match rows");
    }
};

enum class CoefType { Const, SVC, NVC, SNVC };

inline std::string_view to_string(CoefType t) {
    switch (t) {
        case CoefType::Const: return "Const";
        case CoefType::SVC: return "SVC";
        case CoefType::NVC: return "NVC";
        case CoefType::SNVC: return "SNVC";
    }
    return "?";
}

inline CoefType coef_type_from_string(std::string_view s) {
    for (auto t : {CoefType::Const, CoefType::SVC, CoefType::NVC, CoefType::SNVC})
        if (to_string(t) == s) return t;
    throw InputError("unknown coefficient type '" + std::string(s) + "'");
}

inline bool has_svc(CoefType t) { return t == CoefType::SVC || t == CoefType::SNVC; }
inline bool has_nvc(CoefType t) { return t == CoefType::NVC || t == CoefType::SNVC; }
inline CoefType make_type(bool svc, bool nvc) {
    return svc ? (nvc ? CoefType::SNVC : CoefType::SVC) : (nvc ? CoefType::NVC : CoefType::Const);
}

struct ModelSpec {
    std::vector<bool> allow_svc;       // per coefficient incl. intercept at 0; empty = all, if coords given
    std::vector<bool> allow_nvc;       // per coefficient incl. intercept (ignored); empty = none
    bool spatial_intercept = true;
    std::optional<int> tr_num = 0;     // nullopt: select over d_candidates
    bool tr_nonneg = false;
    std::vector<int> d_candidates{0, 1, 2, 3, 4};
    bool select_types = true;          // false: use every allowed type without BIC screening
    std::optional<warp::WarpStack> custom_stack;  // replaces the template when set
    int knot_count = basis::kDefaultKnotCount;
    Index max_eigenvectors = basis::kDefaultMaxEigenvectors;
    double kernel_range = 0.0;         // 0: automatic
    reml::FitOptions fit_options;
    unsigned threads = 1;
};

/// Where a random-effect block came from, enough to rebuild its rows on new data.
struct BlockInfo {
    basis::EffectKind kind = basis::EffectKind::GroupIntercept;
    int coef = -1;    // coefficient index (0 = intercept) for varying kinds
    int group = -1;   // group column for intercept kinds
    Index offset = 0;
    Index size = 0;
};

struct DCandidate {
    int d = 0;
    double bic = 0.0;
    double log_restricted_lik = 0.0;
    bool converged = false;
};

struct FitResult {
    std::vector<std::string> covariate_names;
    std::vector<CoefType> coef_type;     // K + 1, intercept first
    std::vector<BlockInfo> blocks;
    std::optional<basis::SpatialBasis> spatial;
    std::vector<std::optional<basis::SplineBasis>> splines;  // K + 1
    std::vector<std::string> group_names;
    std::vector<bool> group_temporal;
    std::vector<std::vector<std::string>> group_labels;
    reml::RemlFit core;
    double bic = 0.0;
    VectorXd se_beta;
    std::vector<DCandidate> d_report;
    std::vector<std::string> notes;

    const VectorXd& beta() const { return core.beta; }
    const warp::WarpStack& stack() const { return core.stack; }
    bool converged() const { return core.converged; }
    Index coefficients() const { return static_cast<Index>(coef_type.size()); }
};

namespace detail {

template <class F>
auto parallel_map(std::size_t count, unsigned threads, F&& f) {
    using R = decltype(f(std::size_t{0}));
    std::vector<std::optional<R>> out(count);
    std::vector<std::exception_ptr> errors(count);
    auto run = [&](std::size_t i) {
        try {
            out[i].emplace(f(i));
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const std::size_t width = std::max<std::size_t>(1, threads);
    for (std::size_t start = 0; start < count; start += width) {
        std::vector<std::future<void>> batch;
        const std::size_t stop = std::min(count, start + width);
        if (width == 1) {
            run(start);
            continue;
        }
        for (std::size_t i = start; i < stop; ++i) batch.push_back(std::async(std::launch::async, run, i));
        for (auto& b : batch) b.get();
    }
    return std::pair{std::move(out), std::move(errors)};
}

/// Bases shared across all candidate fits of one dataset.
struct Components {
    MatrixXd X;  // N x (K + 1), intercept first
    std::optional<basis::SpatialBasis> spatial;
    MatrixXd spatial_rows;
    std::vector<std::optional<basis::SplineBasis>> splines;
    std::vector<MatrixXd> spline_rows;
    std::vector<basis::GroupBasis> groups;
};

inline Components build_components(const Dataset& data, const ModelSpec& spec, bool want_spatial,
                                   const std::vector<bool>& nvc_allowed) {
    Components c;
    const Index n = data.rows(), k = data.covariates();
    c.X.resize(n, k + 1);
    c.X.col(0).setOnes();
    c.X.rightCols(k) = data.x;
    if (want_spatial) {
        const auto sites = data.location_ids.empty() ? basis::index_sites(*data.coords)
                                                     : basis::index_sites(*data.coords, data.location_ids);
        c.spatial = basis::moran_eigenvectors(sites.coords, spec.kernel_range, spec.max_eigenvectors);
        c.spatial_rows = basis::expand_by_location(*c.spatial, sites.location);
    }
    c.splines.resize(static_cast<std::size_t>(k + 1));
    c.spline_rows.resize(static_cast<std::size_t>(k + 1));
    for (Index j = 1; j <= k; ++j) {
        if (!nvc_allowed[static_cast<std::size_t>(j)]) continue;
        try {
            auto sb = basis::fit_spline_basis(data.x.col(j - 1), spec.knot_count);
            c.spline_rows[static_cast<std::size_t>(j)] = sb.evaluate(data.x.col(j - 1));
            c.splines[static_cast<std::size_t>(j)] = std::move(sb);
        } catch (const InputError&) {
            // too few distinct values for a spline: treat as not allowed
        }
    }
    for (const auto& g : data.groups) c.groups.push_back(basis::group_basis(g));
    return c;
}

inline std::pair<std::vector<basis::EffectBlock>, std::vector<BlockInfo>> build_blocks(
    const Components& c, const std::vector<CoefType>& types, const std::vector<bool>& group_temporal) {
    std::vector<basis::EffectBlock> blocks;
    std::vector<BlockInfo> info;
    Index off = 0;
    auto push = [&](basis::EffectBlock b, int coef, int group) {
        info.push_back({b.kind, coef, group, off, b.size()});
        off += b.size();
        blocks.push_back(std::move(b));
    };
    for (std::size_t j = 0; j < types.size(); ++j) {
        if (has_svc(types[j])) {
            if (j == 0)
                push(basis::make_spatial_intercept(c.spatial_rows, c.spatial->eigenvalues), 0, -1);
            else
                push(basis::make_spatial_vc(c.spatial_rows, c.spatial->eigenvalues, c.X.col(static_cast<Index>(j)),
                                            static_cast<Index>(j)),
                     static_cast<int>(j), -1);
        }
        if (has_nvc(types[j]))
            push(basis::make_nonspatial_vc(c.spline_rows[j], c.X.col(static_cast<Index>(j)), static_cast<Index>(j)),
                 static_cast<int>(j), -1);
    }
    for (std::size_t g = 0; g < c.groups.size(); ++g) {
        const auto kind = group_temporal.size() > g && group_temporal[g] ? basis::EffectKind::TemporalIntercept
                                                                         : basis::EffectKind::GroupIntercept;
        push(basis::make_group_intercept(c.groups[g].indicators, kind), -1, static_cast<int>(g));
    }
    return {std::move(blocks), std::move(info)};
}

inline warp::WarpStack template_stack(const ModelSpec& spec, int d, const VectorXd& y) {
    if (spec.custom_stack) return *spec.custom_stack;
    if (spec.tr_nonneg)
        return warp::WarpStack::make_nonnegative(d, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())));
    return warp::WarpStack::make_default(d);
}

struct Trial {
    reml::RemlFit fit;
    std::vector<BlockInfo> info;
    double bic;
};

inline Trial run_trial(const Components& c, const Dataset& data, const ModelSpec& spec,
                       const std::vector<CoefType>& types, int d) {
    auto [blocks, info] = build_blocks(c, types, data.group_temporal);
    auto f = reml::fit(c.X, blocks, data.y, template_stack(spec, d, data.y), spec.fit_options);
    const double b = reml::bic(f);
    return {std::move(f), std::move(info), b};
}

}  // namespace detail

/// Fit the compositionally warped additive mixed model.
inline FitResult fit_camm(const Dataset& data, const ModelSpec& spec) {
    data.validate(true);
    const Index n = data.rows(), k = data.covariates();
    if (n <= k + 1 + 10) throw InputError("need N > J + 10 samples");
    if ((data.y.array() == data.y.array().round()).all())
        throw InputError("response looks discrete (all values are integers); convert counts to densities first");
    if (spec.tr_nonneg && !spec.custom_stack && data.y.minCoeff() < 0.0)
        throw InputError("tr_nonneg requires a non-negative response");
    if (!spec.tr_num && spec.d_candidates.empty()) throw InputError("d_candidates must not be empty");

    const auto kk = static_cast<std::size_t>(k + 1);
    auto flags = [&](const std::vector<bool>& in, bool dflt, const char* what) {
        if (in.empty()) return std::vector<bool>(kk, dflt);
        if (in.size() != kk) throw InputError(std::string(what) + " needs one flag per coefficient incl. intercept");
        return in;
    };
    auto svc_allowed = flags(spec.allow_svc, data.coords.has_value(), "allow_svc");
    svc_allowed[0] = svc_allowed[0] && spec.spatial_intercept;
    auto nvc_allowed = flags(spec.allow_nvc, false, "allow_nvc");
    nvc_allowed[0] = false;
    const bool want_spatial = std::any_of(svc_allowed.begin(), svc_allowed.end(), [](bool b) { return b; });
    if (want_spatial && !data.coords) throw InputError("spatially varying terms requested but no coordinates given");

    const auto comp = detail::build_components(data, spec, want_spatial, nvc_allowed);
    for (std::size_t j = 1; j < kk; ++j)
        if (nvc_allowed[j] && !comp.splines[j]) nvc_allowed[j] = false;

    FitResult out;
    const int d_select = spec.tr_num ? *spec.tr_num : 0;

    // Coefficient types: forward stepwise per coefficient, or everything allowed.
    std::vector<CoefType> types(kk, CoefType::Const);
    std::optional<detail::Trial> incumbent;
    if (spec.select_types) {
        incumbent = detail::run_trial(comp, data, spec, types, d_select);
        for (std::size_t j = 0; j < kk; ++j) {
            for (int step = 0; step < 2; ++step) {
                const bool svc_step = step == 0;
                if (svc_step ? !svc_allowed[j] : !nvc_allowed[j]) continue;
                auto cand = types;
                cand[j] = svc_step ? make_type(true, has_nvc(types[j])) : make_type(has_svc(types[j]), true);
                try {
                    auto t = detail::run_trial(comp, data, spec, cand, d_select);
                    if (t.bic < incumbent->bic) {
                        types = cand;
                        incumbent = std::move(t);
                    }
                } catch (const Error& e) {
                    out.notes.push_back("type trial for coefficient " + std::to_string(j) + " failed: " + e.what());
                }
            }
        }
    } else {
        for (std::size_t j = 0; j < kk; ++j) types[j] = make_type(svc_allowed[j], nvc_allowed[j]);
    }

    std::optional<detail::Trial> best;
    if (spec.tr_num) {
        best = incumbent ? std::move(incumbent) : detail::run_trial(comp, data, spec, types, *spec.tr_num);
        out.d_report.push_back({*spec.tr_num, best->bic, best->fit.log_restricted_lik, best->fit.converged});
    } else {
        auto [trials, errors] = detail::parallel_map(spec.d_candidates.size(), spec.threads, [&](std::size_t i) {
            const int d = spec.d_candidates[i];
            if (incumbent && d == d_select) return *incumbent;
            return detail::run_trial(comp, data, spec, types, d);
        });
        for (std::size_t i = 0; i < trials.size(); ++i) {
            const int d = spec.d_candidates[i];
            if (!trials[i]) {
                try {
                    std::rethrow_exception(errors[i]);
                } catch (const std::exception& e) {
                    out.notes.push_back("D=" + std::to_string(d) + " fit failed: " + e.what());
                }
                continue;
            }
            auto& t = *trials[i];
            out.d_report.push_back({d, t.bic, t.fit.log_restricted_lik, t.fit.converged});
            if (!best || t.bic < best->bic) best = std::move(t);
        }
        if (!best) throw NumericError("every candidate warp depth failed to fit");
    }

    out.covariate_names = data.covariate_names;
    out.coef_type = types;
    out.blocks = std::move(best->info);
    out.spatial = comp.spatial;
    out.splines = comp.splines;
    out.group_names = data.group_names;
    out.group_temporal = data.group_temporal;
    for (const auto& g : comp.groups) out.group_labels.push_back(g.labels);
    out.bic = best->bic;
    out.core = std::move(best->fit);
    out.se_beta = out.core.coef_covariance.diagonal().head(out.core.j).cwiseSqrt();
    return out;
}

/// Random-effect design rows of `data` for each stored block, concatenated.
inline MatrixXd effect_rows(const FitResult& fit, const Dataset& data) {
    const Index n = data.rows();
    Index total = 0;
    for (const auto& b : fit.blocks) total += b.size;
    MatrixXd e(n, total);
    std::optional<MatrixXd> sp;
    for (const auto& b : fit.blocks) {
        auto seg = e.middleCols(b.offset, b.size);
        const VectorXd xcol = b.coef > 0 ? VectorXd(data.x.col(b.coef - 1)) : VectorXd::Ones(n);
        switch (b.kind) {
            case basis::EffectKind::SpatialVC:
            case basis::EffectKind::SpatialIntercept:
                if (!data.coords) throw InputError("prediction data needs coordinates for spatial terms");
                if (!sp) sp = basis::project_sites(*fit.spatial, *data.coords);
                seg = basis::hadamard_columns(xcol, *sp);
                break;
            case basis::EffectKind::NonSpatialVC:
                seg = basis::hadamard_columns(xcol, fit.splines[static_cast<std::size_t>(b.coef)]->evaluate(xcol));
                break;
            case basis::EffectKind::GroupIntercept:
            case basis::EffectKind::TemporalIntercept: {
                const auto g = static_cast<std::size_t>(b.group);
                if (g >= data.groups.size()) throw InputError("prediction data is missing group column '" +
                                                              fit.group_names[g] + "'");
                seg = basis::group_rows(fit.group_labels[g], data.groups[g]);
                break;
            }
        }
    }
    return e;
}

inline MatrixXd fixed_rows(const Dataset& data) {
    MatrixXd X(data.rows(), data.covariates() + 1);
    X.col(0).setOnes();
    X.rightCols(data.covariates()) = data.x;
    return X;
}

struct Prediction {
    VectorXd warped;      // linear predictor on the warped scale
    VectorXd response;    // inverse warp; NaN where the inverse is undefined
    std::vector<bool> ok;
};

inline Prediction predict(const FitResult& fit, const Dataset& data) {
    data.validate(false);
    if (data.covariates() != static_cast<Index>(fit.covariate_names.size()))
        throw InputError("prediction data has " + std::to_string(data.covariates()) + " covariates, fit has " +
                         std::to_string(fit.covariate_names.size()));
    Prediction p;
    p.warped = fixed_rows(data) * fit.core.beta;
    if (!fit.blocks.empty()) p.warped += effect_rows(fit, data) * fit.core.gamma;
    p.response.resize(p.warped.size());
    p.ok.assign(static_cast<std::size_t>(p.warped.size()), true);
    for (Index i = 0; i < p.warped.size(); ++i) {
        try {
            p.response(i) = warp::inverse_one(fit.core.stack, p.warped(i));
            if (!std::isfinite(p.response(i))) throw DomainError("non-finite inverse", static_cast<std::size_t>(i));
        } catch (const Error&) {
            p.response(i) = std::numeric_limits<double>::quiet_NaN();
            p.ok[static_cast<std::size_t>(i)] = false;
        }
    }
    return p;
}

/// Per-sample coefficient decomposition beta_total = beta + svc part + nvc part.
struct VaryingCoefficients {
    MatrixXd total;   // N x (K + 1)
    MatrixXd svc;
    MatrixXd nvc;
    MatrixXd se;
};

inline VaryingCoefficients varying_coefficients(const FitResult& fit, const Dataset& data) {
    const Index n = data.rows(), kk = fit.coefficients();
    const auto& core = fit.core;
    VaryingCoefficients vc;
    vc.svc = MatrixXd::Zero(n, kk);
    vc.nvc = MatrixXd::Zero(n, kk);
    vc.se.resize(n, kk);
    std::optional<MatrixXd> sp;
    // raw (not covariate-multiplied) basis rows per block
    std::vector<MatrixXd> raw(fit.blocks.size());
    for (std::size_t b = 0; b < fit.blocks.size(); ++b) {
        const auto& bi = fit.blocks[b];
        if (bi.coef < 0) continue;
        if (bi.kind == basis::EffectKind::NonSpatialVC) {
            raw[b] = fit.splines[static_cast<std::size_t>(bi.coef)]->evaluate(data.x.col(bi.coef - 1));
            vc.nvc.col(bi.coef) = raw[b] * core.gamma.segment(bi.offset, bi.size);
        } else {
            if (!data.coords) throw InputError("data needs coordinates for spatially varying terms");
            if (!sp) sp = basis::project_sites(*fit.spatial, *data.coords);
            raw[b] = *sp;
            vc.svc.col(bi.coef) = raw[b] * core.gamma.segment(bi.offset, bi.size);
        }
    }
    vc.total = vc.svc + vc.nvc;
    vc.total.rowwise() += core.beta.transpose();

    // se of beta_j + e_i'(v o u) over the [b; u] covariance
    const Index j = core.j;
    const VectorXd v = core.layout.scaling(core.theta);
    for (Index c = 0; c < kk; ++c) {
        std::vector<std::size_t> mine;
        for (std::size_t b = 0; b < fit.blocks.size(); ++b)
            if (fit.blocks[b].coef == c) mine.push_back(b);
        if (mine.empty()) {
            vc.se.col(c).setConstant(std::sqrt(core.coef_covariance(c, c)));
            continue;
        }
        for (Index i = 0; i < n; ++i) {
            VectorXd g = VectorXd::Zero(core.coef_covariance.rows());
            g(c) = 1.0;
            for (auto b : mine) {
                const auto& bi = fit.blocks[b];
                g.segment(j + bi.offset, bi.size) = raw[b].row(i).transpose().cwiseProduct(v.segment(bi.offset, bi.size));
            }
            vc.se(i, c) = std::sqrt(std::max(0.0, g.dot(core.coef_covariance * g)));
        }
    }
    return vc;
}

struct MarginalEffects {
    MatrixXd effects;             // N x K, covariates only
    std::vector<double> median;   // K
};

/// dy/dx_k = beta_total_k / phi'(y) evaluated at the observed response.
inline MarginalEffects marginal_effects(const FitResult& fit, const Dataset& data) {
    data.validate(true);
    const auto vc = varying_coefficients(fit, data);
    const VectorXd logd = warp::log_derivatives(
        fit.core.stack, std::span<const double>(data.y.data(), static_cast<std::size_t>(data.y.size())));
    MarginalEffects me;
    const Index k = data.covariates();
    me.effects.resize(data.rows(), k);
    for (Index i = 0; i < data.rows(); ++i) {
        if (!std::isfinite(logd(i))) throw DomainError("warp derivative is zero or undefined", static_cast<std::size_t>(i));
        me.effects.row(i) = vc.total.row(i).tail(k) * std::exp(-logd(i));
    }
    for (Index c = 0; c < k; ++c) {
        std::vector<double> col(me.effects.col(c).data(), me.effects.col(c).data() + data.rows());
        me.median.push_back(stats::median(col));
    }
    return me;
}

struct CoefficientSummary {
    std::string name;
    double estimate = 0.0;
    double se = 0.0;
    double t = 0.0;
    double p = 0.0;
};

inline std::vector<CoefficientSummary> coefficient_inference(const FitResult& fit) {
    std::vector<CoefficientSummary> out;
    for (Index c = 0; c < fit.coefficients(); ++c) {
        CoefficientSummary s;
        s.name = c == 0 ? "(Intercept)" : fit.covariate_names[static_cast<std::size_t>(c - 1)];
        s.estimate = fit.core.beta(c);
        s.se = fit.se_beta(c);
        if (!(s.se > 0.0) || !std::isfinite(s.se)) throw NumericError("standard error unavailable for " + s.name);
        s.t = s.estimate / s.se;
        s.p = stats::two_sided_p(s.t);
        out.push_back(s);
    }
    return out;
}

}  // namespace camm::model
