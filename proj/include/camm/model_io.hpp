#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "model.hpp"
#include "warp_json.hpp"

namespace camm::model {

inline constexpr int kSchemaVersion = 1;

namespace io_detail {

using nlohmann::json;

inline json vec(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline VectorXd vec_from(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

// Row-major nested arrays.
inline json mat(const MatrixXd& m) {
    json rows = json::array();
    for (Index r = 0; r < m.rows(); ++r) rows.push_back(vec(m.row(r).transpose()));
    return rows;
}

inline MatrixXd mat_from(const json& j, Index cols_if_empty = 0) {
    const Index r = static_cast<Index>(j.size());
    const Index c = r ? static_cast<Index>(j.at(0).size()) : cols_if_empty;
    MatrixXd m(r, c);
    for (Index i = 0; i < r; ++i) {
        if (static_cast<Index>(j.at(i).size()) != c) throw InputError("ragged matrix in fit JSON");
        m.row(i) = vec_from(j.at(i)).transpose();
    }
    return m;
}

}  // namespace io_detail

inline nlohmann::json to_json(const FitResult& f) {
    using namespace io_detail;
    json j;
    j["schema_version"] = kSchemaVersion;
    j["covariates"] = f.covariate_names;
    std::vector<std::string> types;
    for (auto t : f.coef_type) types.emplace_back(to_string(t));
    j["coef_type"] = types;

    json blocks = json::array();
    for (const auto& b : f.blocks)
        blocks.push_back({{"kind", basis::to_string(b.kind)}, {"coef", b.coef}, {"group", b.group},
                          {"offset", b.offset}, {"size", b.size}});
    j["blocks"] = blocks;

    json theta = json::array();
    for (const auto& t : f.core.theta.blocks) theta.push_back({{"tau_sq", t.tau_sq}, {"alpha", t.alpha}});
    j["theta"] = theta;

    j["beta"] = vec(f.core.beta);
    j["se_beta"] = vec(f.se_beta);
    j["u"] = vec(f.core.u);
    j["gamma"] = vec(f.core.gamma);
    j["stack"] = warp::to_json(f.core.stack);
    j["sigma_sq"] = f.core.sigma_sq;
    j["d_value"] = f.core.d_value;
    j["log_restricted_lik"] = f.core.log_restricted_lik;
    j["log_jacobian"] = f.core.log_jacobian;
    j["log_lik"] = f.core.log_lik;
    j["bic"] = f.bic;
    j["n"] = f.core.n;
    j["parameter_count"] = f.core.parameter_count;
    j["converged"] = f.core.converged;
    j["cycles"] = f.core.cycles;
    j["trace"] = f.core.trace;
    j["coef_covariance"] = mat(f.core.coef_covariance);

    json dr = json::array();
    for (const auto& d : f.d_report)
        dr.push_back({{"D", d.d}, {"bic", d.bic}, {"log_restricted_lik", d.log_restricted_lik},
                      {"converged", d.converged}});
    j["d_report"] = dr;

    if (f.spatial) {
        j["spatial"] = {{"coords", mat(f.spatial->coords)},
                        {"vectors", mat(f.spatial->vectors)},
                        {"eigenvalues", vec(f.spatial->eigenvalues)},
                        {"kernel_range", f.spatial->kernel_range}};
    }
    json splines = json::array();
    for (const auto& s : f.splines) {
        if (!s) {
            splines.push_back(nullptr);
            continue;
        }
        splines.push_back({{"knots", s->knots},
                           {"lo", s->lo},
                           {"hi", s->hi},
                           {"column_means", vec(s->column_means)},
                           {"column_scales", vec(s->column_scales)}});
    }
    j["splines"] = splines;
    json groups = json::array();
    for (std::size_t g = 0; g < f.group_names.size(); ++g)
        groups.push_back({{"name", f.group_names[g]},
                          {"temporal", g < f.group_temporal.size() && f.group_temporal[g]},
                          {"labels", f.group_labels[g]}});
    j["groups"] = groups;
    j["notes"] = f.notes;
    return j;
}

inline FitResult fit_from_json(const nlohmann::json& j) {
    using namespace io_detail;
    try {
        const int version = j.at("schema_version").get<int>();
        if (version != kSchemaVersion)
            throw InputError("unsupported fit schema_version " + std::to_string(version));
        FitResult f;
        f.covariate_names = j.at("covariates").get<std::vector<std::string>>();
        for (const auto& t : j.at("coef_type")) f.coef_type.push_back(coef_type_from_string(t.get<std::string>()));
        if (f.coef_type.size() != f.covariate_names.size() + 1)
            throw InputError("coef_type length does not match covariates");

        if (j.contains("spatial")) {
            const auto& s = j.at("spatial");
            basis::SpatialBasis sb;
            sb.coords = mat_from(s.at("coords"), 2);
            sb.eigenvalues = vec_from(s.at("eigenvalues"));
            sb.vectors = mat_from(s.at("vectors"), sb.eigenvalues.size());
            sb.kernel_range = s.at("kernel_range").get<double>();
            f.spatial = std::move(sb);
        }
        for (const auto& s : j.at("splines")) {
            if (s.is_null()) {
                f.splines.emplace_back();
                continue;
            }
            basis::SplineBasis sb;
            sb.knots = s.at("knots").get<std::vector<double>>();
            sb.lo = s.at("lo").get<double>();
            sb.hi = s.at("hi").get<double>();
            sb.column_means = vec_from(s.at("column_means"));
            sb.column_scales = vec_from(s.at("column_scales"));
            f.splines.emplace_back(std::move(sb));
        }
        for (const auto& g : j.at("groups")) {
            f.group_names.push_back(g.at("name").get<std::string>());
            f.group_temporal.push_back(g.at("temporal").get<bool>());
            f.group_labels.push_back(g.at("labels").get<std::vector<std::string>>());
        }

        for (const auto& b : j.at("blocks")) {
            BlockInfo bi;
            bi.kind = basis::effect_kind_from_string(b.at("kind").get<std::string>());
            bi.coef = b.at("coef").get<int>();
            bi.group = b.at("group").get<int>();
            bi.offset = b.at("offset").get<Index>();
            bi.size = b.at("size").get<Index>();
            const bool spatial = bi.kind == basis::EffectKind::SpatialVC || bi.kind == basis::EffectKind::SpatialIntercept;
            if (spatial && (!f.spatial || f.spatial->size() != bi.size))
                throw InputError("spatial block without a matching spatial basis");
            if (bi.kind == basis::EffectKind::NonSpatialVC &&
                (bi.coef <= 0 || static_cast<std::size_t>(bi.coef) >= f.splines.size() ||
                 !f.splines[static_cast<std::size_t>(bi.coef)]))
                throw InputError("spline block without a matching spline basis");
            if (bi.group >= 0 && static_cast<std::size_t>(bi.group) >= f.group_labels.size())
                throw InputError("group block refers to an unknown group column");
            f.blocks.push_back(bi);
            f.core.layout.offsets.push_back(bi.offset);
            f.core.layout.sizes.push_back(bi.size);
            if (spatial)
                f.core.layout.eigenvalues.emplace_back(f.spatial->eigenvalues);
            else
                f.core.layout.eigenvalues.emplace_back(std::nullopt);
        }
        for (const auto& t : j.at("theta"))
            f.core.theta.blocks.push_back({t.at("tau_sq").get<double>(), t.at("alpha").get<double>()});
        if (f.core.theta.blocks.size() != f.blocks.size()) throw InputError("theta does not match blocks");

        f.core.beta = vec_from(j.at("beta"));
        f.se_beta = vec_from(j.at("se_beta"));
        f.core.u = vec_from(j.at("u"));
        f.core.gamma = vec_from(j.at("gamma"));
        if (f.core.beta.size() != static_cast<Index>(f.coef_type.size()))
            throw InputError("beta length does not match coefficients");
        if (f.core.gamma.size() != f.core.layout.total()) throw InputError("gamma length does not match blocks");
        f.core.stack = warp::stack_from_json(j.at("stack"));
        f.core.sigma_sq = j.at("sigma_sq").get<double>();
        f.core.d_value = j.at("d_value").get<double>();
        f.core.log_restricted_lik = j.at("log_restricted_lik").get<double>();
        f.core.log_jacobian = j.at("log_jacobian").get<double>();
        f.core.log_lik = j.at("log_lik").get<double>();
        f.bic = j.at("bic").get<double>();
        f.core.n = j.at("n").get<Index>();
        f.core.j = f.core.beta.size();
        f.core.parameter_count = j.at("parameter_count").get<Index>();
        f.core.converged = j.at("converged").get<bool>();
        f.core.cycles = j.at("cycles").get<int>();
        f.core.trace = j.at("trace").get<std::vector<double>>();
        f.core.coef_covariance = mat_from(j.at("coef_covariance"));
        for (const auto& d : j.at("d_report"))
            f.d_report.push_back({d.at("D").get<int>(), d.at("bic").get<double>(),
                                  d.at("log_restricted_lik").get<double>(), d.at("converged").get<bool>()});
        f.notes = j.value("notes", std::vector<std::string>{});
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed fit JSON: ") + e.what());
    }
}

}  // namespace camm::model
