#pragma once

// Basis matrices for random-effect terms: Moran eigenvectors, natural cubic
// splines and group indicators.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "stats.hpp"

namespace camm::basis {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Hard cap on the number of retained Moran eigenvectors.
inline constexpr Index kDefaultMaxEigenvectors = 200;
/// Relative eigenvalue cutoff (round-off guard for "strictly positive").
inline constexpr double kEigenTolerance = 1e-12;

struct SpatialBasis {
    MatrixXd coords;           // N_u x 2 unique locations
    MatrixXd vectors;          // N_u x L, orthonormal, orthogonal to 1
    VectorXd eigenvalues;      // L, strictly decreasing, positive
    double kernel_range = 0.0;

    Index locations() const { return vectors.rows(); }
    Index size() const { return vectors.cols(); }
};

namespace detail {

inline double distance(const MatrixXd& a, Index i, const MatrixXd& b, Index j) {
    const double dx = a(i, 0) - b(j, 0), dy = a(i, 1) - b(j, 1);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

/// Largest nearest-neighbour distance over the locations.
inline double default_kernel_range(const MatrixXd& coords) {
    const Index n = coords.rows();
    double worst = 0.0;
    for (Index i = 0; i < n; ++i) {
        double nn = std::numeric_limits<double>::infinity();
        for (Index j = 0; j < n; ++j)
            if (j != i) nn = std::min(nn, detail::distance(coords, i, coords, j));
        worst = std::max(worst, nn);
    }
    return worst;
}

/// Zero-diagonal exponential proximity matrix exp(-d_ij / r).
inline MatrixXd proximity_matrix(const MatrixXd& coords, double range) {
    const Index n = coords.rows();
    MatrixXd c = MatrixXd::Zero(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = i + 1; j < n; ++j) c(i, j) = c(j, i) = std::exp(-detail::distance(coords, i, coords, j) / range);
    return c;
}

/// (I - 11'/n) C (I - 11'/n).
inline MatrixXd double_center(const MatrixXd& c) {
    const VectorXd row = c.rowwise().mean();
    const VectorXd col = c.colwise().mean().transpose();
    const double grand = c.mean();
    MatrixXd out = c;
    out.colwise() -= row;
    out.rowwise() -= col.transpose();
    out.array() += grand;
    return out;
}

/// Full symmetric eigendecomposition (ascending) of the doubly-centred
/// proximity matrix.
inline Eigen::SelfAdjointEigenSolver<MatrixXd> centred_eigen(const MatrixXd& coords, double range) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(double_center(proximity_matrix(coords, range)));
    if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    return es;
}

/// Moran eigenvectors with positive eigenvalues of the doubly-centred
/// exponential proximity matrix. `range <= 0` selects the default range.
inline SpatialBasis moran_eigenvectors(const MatrixXd& coords, double range = 0.0,
                                       Index max_vectors = kDefaultMaxEigenvectors) {
    if (coords.cols() != 2) throw InputError("coordinates must have two columns");
    const Index n = coords.rows();
    if (!coords.allFinite()) throw InputError("coordinates must be finite");
    std::vector<std::pair<double, double>> pts;
    pts.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) pts.emplace_back(coords(i, 0), coords(i, 1));
    std::sort(pts.begin(), pts.end());
    const auto distinct = std::unique(pts.begin(), pts.end()) - pts.begin();
    if (distinct < 3) throw InputError("at least 3 distinct coordinate pairs are required");
    if (distinct != n) throw InputError("coordinates must be unique; map repeated sites with location ids");
    if (max_vectors < 1) throw InputError("max_vectors must be positive");

    SpatialBasis sb;
    sb.coords = coords;
    sb.kernel_range = range > 0.0 ? range : default_kernel_range(coords);

    const auto es = centred_eigen(coords, sb.kernel_range);
    const VectorXd& ev = es.eigenvalues();  // ascending
    const double top = ev(n - 1);
    if (!(top > kEigenTolerance * ev.cwiseAbs().maxCoeff()))
        throw InputError("proximity matrix has no positive eigenvalues");

    std::vector<Index> keep;
    for (Index i = n - 1; i >= 0 && static_cast<Index>(keep.size()) < max_vectors; --i)
        if (ev(i) > kEigenTolerance * top) keep.push_back(i);

    sb.vectors.resize(n, static_cast<Index>(keep.size()));
    sb.eigenvalues.resize(static_cast<Index>(keep.size()));
    for (std::size_t l = 0; l < keep.size(); ++l) {
        VectorXd v = es.eigenvectors().col(keep[l]);
        Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0.0) v = -v;
        sb.vectors.col(static_cast<Index>(l)) = v;
        sb.eigenvalues(static_cast<Index>(l)) = ev(keep[l]);
    }
    return sb;
}

/// Moran coefficient (n / 1'C1) e'Ce of a map pattern e.
inline double moran_coefficient(const MatrixXd& proximity, const VectorXd& e) {
    const double n = static_cast<double>(proximity.rows());
    const VectorXd centred = e.array() - e.mean();
    return n / proximity.sum() * centred.dot(proximity * centred) / centred.squaredNorm();
}

/// Sample-level eigenvector matrix: row i is the row of location `location[i]`.
inline MatrixXd expand_by_location(const SpatialBasis& sb, const std::vector<Index>& location) {
    MatrixXd out(static_cast<Index>(location.size()), sb.size());
    for (std::size_t i = 0; i < location.size(); ++i) {
        const Index id = location[i];
        if (id < 0 || id >= sb.locations())
            throw InputError("unknown location id " + std::to_string(id) + " at row " + std::to_string(i));
        out.row(static_cast<Index>(i)) = sb.vectors.row(id);
    }
    return out;
}

/// Eigenvector rows at arbitrary sites. Known sites reuse their stored row;
/// new sites use the Nystrom extension e_l(s) = c(s)'E_l / lambda_l, which
/// decays to zero away from the data.
inline MatrixXd project_sites(const SpatialBasis& sb, const MatrixXd& sites) {
    MatrixXd out(sites.rows(), sb.size());
    VectorXd c(sb.locations());
    for (Index i = 0; i < sites.rows(); ++i) {
        Index hit = -1;
        for (Index j = 0; j < sb.locations(); ++j) {
            if (sites(i, 0) == sb.coords(j, 0) && sites(i, 1) == sb.coords(j, 1)) {
                hit = j;
                break;
            }
        }
        if (hit >= 0) {
            out.row(i) = sb.vectors.row(hit);
            continue;
        }
        for (Index j = 0; j < sb.locations(); ++j)
            c(j) = std::exp(-detail::distance(sites, i, sb.coords, j) / sb.kernel_range);
        out.row(i) = (sb.vectors.transpose() * c).cwiseQuotient(sb.eigenvalues).transpose();
    }
    return out;
}

/// Unique sites of an N x 2 coordinate matrix (first-appearance order) and
/// the row -> site index.
struct SiteIndex {
    MatrixXd coords;
    std::vector<Index> location;
};

inline SiteIndex index_sites(const MatrixXd& coords) {
    std::map<std::pair<double, double>, Index> seen;
    SiteIndex out;
    std::vector<std::pair<double, double>> uniq;
    out.location.reserve(static_cast<std::size_t>(coords.rows()));
    for (Index i = 0; i < coords.rows(); ++i) {
        const std::pair<double, double> key{coords(i, 0), coords(i, 1)};
        auto [it, fresh] = seen.emplace(key, static_cast<Index>(uniq.size()));
        if (fresh) uniq.push_back(key);
        out.location.push_back(it->second);
    }
    out.coords.resize(static_cast<Index>(uniq.size()), 2);
    for (std::size_t j = 0; j < uniq.size(); ++j) {
        out.coords(static_cast<Index>(j), 0) = uniq[j].first;
        out.coords(static_cast<Index>(j), 1) = uniq[j].second;
    }
    return out;
}

/// Same as above but keyed by explicit location ids; each id takes the
/// coordinates of its first row.
inline SiteIndex index_sites(const MatrixXd& coords, const std::vector<std::string>& ids) {
    if (static_cast<Index>(ids.size()) != coords.rows()) throw InputError("location id count does not match rows");
    std::map<std::string, Index> seen;
    std::vector<Index> first;
    SiteIndex out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto [it, fresh] = seen.emplace(ids[i], static_cast<Index>(first.size()));
        if (fresh) first.push_back(static_cast<Index>(i));
        out.location.push_back(it->second);
    }
    out.coords.resize(static_cast<Index>(first.size()), 2);
    for (std::size_t j = 0; j < first.size(); ++j) out.coords.row(static_cast<Index>(j)) = coords.row(first[j]);
    return out;
}

/// Centred, unit-scaled natural cubic spline basis in one covariate.
/// knot_count + 1 knots (boundary knots at min/max, interior knots at equally
/// spaced quantiles) give knot_count columns; the basis is linear outside the
/// boundary knots.
struct SplineBasis {
    std::vector<double> knots;  // on the scaled axis t = (x - lo) / (hi - lo)
    double lo = 0.0;
    double hi = 1.0;
    VectorXd column_means;
    VectorXd column_scales;

    Index size() const { return column_means.size(); }

    /// Raw (uncentred) basis at x.
    MatrixXd raw(const VectorXd& x) const {
        const Index k = static_cast<Index>(knots.size());
        MatrixXd out(x.size(), k - 1);
        const double last = knots.back();
        auto d = [&](Index j, double t) {
            auto cube = [](double v) { return v > 0.0 ? v * v * v : 0.0; };
            return (cube(t - knots[static_cast<std::size_t>(j)]) - cube(t - last)) /
                   (last - knots[static_cast<std::size_t>(j)]);
        };
        for (Index i = 0; i < x.size(); ++i) {
            const double t = (x(i) - lo) / (hi - lo);
            out(i, 0) = t;
            for (Index j = 0; j + 2 < k; ++j) out(i, j + 1) = d(j, t) - d(k - 2, t);
        }
        return out;
    }

    MatrixXd evaluate(const VectorXd& x) const {
        MatrixXd b = raw(x);
        b.rowwise() -= column_means.transpose();
        b.array().rowwise() /= column_scales.transpose().array();
        return b;
    }
};

inline constexpr int kDefaultKnotCount = 5;

inline SplineBasis fit_spline_basis(const VectorXd& x, int knot_count = kDefaultKnotCount) {
    if (knot_count < 1) throw InputError("knot_count must be positive");
    if (!x.allFinite()) throw InputError("spline covariate must be finite");
    std::vector<double> v(x.data(), x.data() + x.size());
    std::sort(v.begin(), v.end());
    const auto distinct = std::unique(v.begin(), v.end()) - v.begin();
    if (distinct <= knot_count)
        throw InputError("spline covariate needs more than " + std::to_string(knot_count) + " distinct values");

    SplineBasis sb;
    sb.lo = v.front();
    sb.hi = v[static_cast<std::size_t>(distinct - 1)];
    std::vector<double> all(x.data(), x.data() + x.size());
    for (int j = 0; j <= knot_count; ++j) {
        const double q = stats::quantile(all, static_cast<double>(j) / knot_count);
        sb.knots.push_back((q - sb.lo) / (sb.hi - sb.lo));
    }
    for (std::size_t j = 1; j < sb.knots.size(); ++j)
        if (!(sb.knots[j] > sb.knots[j - 1]))
            throw InputError("spline covariate has tied quantiles; reduce knot_count");

    const MatrixXd raw = sb.raw(x);
    sb.column_means = raw.colwise().mean().transpose();
    sb.column_scales.resize(raw.cols());
    for (Index c = 0; c < raw.cols(); ++c) {
        const double s = std::sqrt((raw.col(c).array() - sb.column_means(c)).square().mean());
        sb.column_scales(c) = s > 0.0 ? s : 1.0;
    }
    return sb;
}

/// N x knot_count centred natural spline basis matrix.
inline MatrixXd spline_basis(const VectorXd& x, int knot_count = kDefaultKnotCount) {
    return fit_spline_basis(x, knot_count).evaluate(x);
}

struct GroupBasis {
    std::vector<std::string> labels;  // sorted
    MatrixXd indicators;              // N x G
};

/// Indicator columns for group ids; columns follow sorted label order.
inline GroupBasis group_basis(const std::vector<std::string>& ids) {
    std::map<std::string, Index> col;
    for (const auto& id : ids) col.emplace(id, 0);
    if (col.size() < 2) throw InputError("group basis needs at least two groups");
    GroupBasis gb;
    Index c = 0;
    for (auto& [label, idx] : col) {
        idx = c++;
        gb.labels.push_back(label);
    }
    gb.indicators = MatrixXd::Zero(static_cast<Index>(ids.size()), c);
    for (std::size_t i = 0; i < ids.size(); ++i) gb.indicators(static_cast<Index>(i), col.at(ids[i])) = 1.0;
    return gb;
}

/// Indicator rows for (possibly unseen) labels; unseen labels map to a zero row.
inline MatrixXd group_rows(const std::vector<std::string>& labels, const std::vector<std::string>& ids) {
    MatrixXd out = MatrixXd::Zero(static_cast<Index>(ids.size()), static_cast<Index>(labels.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = std::lower_bound(labels.begin(), labels.end(), ids[i]);
        if (it != labels.end() && *it == ids[i]) out(static_cast<Index>(i), it - labels.begin()) = 1.0;
    }
    return out;
}

enum class EffectKind { SpatialVC, NonSpatialVC, GroupIntercept, SpatialIntercept, TemporalIntercept };

inline std::string_view to_string(EffectKind k) {
    switch (k) {
        case EffectKind::SpatialVC: return "spatial_vc";
        case EffectKind::NonSpatialVC: return "nonspatial_vc";
        case EffectKind::GroupIntercept: return "group_intercept";
        case EffectKind::SpatialIntercept: return "spatial_intercept";
        case EffectKind::TemporalIntercept: return "temporal_intercept";
    }
    return "?";
}

inline EffectKind effect_kind_from_string(std::string_view s) {
    for (auto k : {EffectKind::SpatialVC, EffectKind::NonSpatialVC, EffectKind::GroupIntercept,
                   EffectKind::SpatialIntercept, EffectKind::TemporalIntercept})
        if (to_string(k) == s) return k;
    throw InputError("unknown effect kind '" + std::string(s) + "'");
}

/// One random-effect term: an N x L_k design block (already multiplied by
/// its covariate for varying-coefficient kinds).
struct EffectBlock {
    EffectKind kind = EffectKind::GroupIntercept;
    MatrixXd basis;
    std::optional<VectorXd> eigenvalues;  // spatial kinds only
    std::optional<Index> covariate_index;

    bool spatial() const { return kind == EffectKind::SpatialVC || kind == EffectKind::SpatialIntercept; }
    Index size() const { return basis.cols(); }

    void validate() const {
        if (basis.cols() == 0) throw InputError("effect block has no columns");
        if (!basis.allFinite()) throw InputError("effect block basis must be finite");
        if (spatial()) {
            if (!eigenvalues || eigenvalues->size() != basis.cols())
                throw InputError("spatial effect block needs one eigenvalue per column");
            if ((eigenvalues->array() <= 0.0).any()) throw InputError("eigenvalues must be positive");
        }
        Eigen::ColPivHouseholderQR<MatrixXd> qr(basis);
        if (qr.rank() < basis.cols())
            throw InputError("effect block '" + std::string(to_string(kind)) + "' basis is rank deficient");
    }
};

/// x_k o E per column (Hadamard construction of a varying-coefficient block).
inline MatrixXd hadamard_columns(const VectorXd& x, const MatrixXd& e) {
    if (x.size() != e.rows()) throw InputError("covariate length does not match basis rows");
    return e.array().colwise() * x.array();
}

inline EffectBlock make_spatial_vc(const MatrixXd& expanded, const VectorXd& eigenvalues, const VectorXd& x,
                                   Index covariate) {
    EffectBlock b{EffectKind::SpatialVC, hadamard_columns(x, expanded), eigenvalues, covariate};
    b.validate();
    return b;
}

inline EffectBlock make_spatial_intercept(const MatrixXd& expanded, const VectorXd& eigenvalues) {
    EffectBlock b{EffectKind::SpatialIntercept, expanded, eigenvalues, std::nullopt};
    b.validate();
    return b;
}

inline EffectBlock make_nonspatial_vc(const MatrixXd& spline, const VectorXd& x, Index covariate) {
    EffectBlock b{EffectKind::NonSpatialVC, hadamard_columns(x, spline), std::nullopt, covariate};
    b.validate();
    return b;
}

inline EffectBlock make_group_intercept(const MatrixXd& indicators, EffectKind kind = EffectKind::GroupIntercept) {
    EffectBlock b{kind, indicators, std::nullopt, std::nullopt};
    b.validate();
    return b;
}

}  // namespace camm::basis
