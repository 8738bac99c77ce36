#pragma once

// Command-line front end. `run` is the whole program so tests can drive it
// in-process; tools/camm_cli.cpp only forwards main() here.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "csv.hpp"
#include "error.hpp"
#include "model.hpp"
#include "model_io.hpp"
#include "reml.hpp"
#include "simulate.hpp"
#include "stats.hpp"

namespace camm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNotConverged = 3;
inline constexpr int kExitNumeric = 4;

namespace fs = std::filesystem;

struct DataOptions {
    std::string input;
    std::string response;
    std::vector<std::string> covariates;
    std::vector<std::string> coords;
    std::string location_id;
    std::vector<std::string> group_ids;
    std::string time_id;
};

struct FitOptions {
    DataOptions data;
    std::string output_dir = ".";
    std::string tr_num = "0";
    bool tr_nonneg = false;
    bool x_nvc = false;
    std::vector<std::string> svc_covariates;  // empty: all covariates may be SVC
    bool no_svc = false;
    bool no_spatial_intercept = false;
    std::vector<int> d_candidates{0, 1, 2, 3, 4};
    long long max_eigenvectors = basis::kDefaultMaxEigenvectors;
    unsigned threads = 1;
};

struct PredictOptions {
    DataOptions data;
    std::string fit_path;
    std::string truth;
    std::string output_dir = ".";
};

struct SimulateOptions {
    std::vector<double> g{0.0, 0.5};
    std::vector<double> h{0.0, 0.125, 0.25};
    std::vector<int> n{500};
    std::vector<std::string> models{"LM", "AMM", "CAMM"};
    std::vector<int> d{2};
    std::vector<int> coefficients{0, 1, 2};
    int replicates = 20;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    long long max_eigenvectors = 60;
    bool no_timing = false;
    std::string output_dir = ".";
};

struct WarpCheckOptions {
    std::string input;
    std::string response;
    int d = 2;
    bool tr_nonneg = false;
    int bins = 20;
    std::string output_dir = ".";
};

namespace detail {

inline std::vector<std::string> split_list(const std::vector<std::string>& in) {
    std::vector<std::string> out;
    for (const auto& item : in) {
        std::stringstream ss(item);
        std::string part;
        while (std::getline(ss, part, ','))
            if (!part.empty()) out.push_back(part);
    }
    return out;
}

inline Eigen::VectorXd to_vec(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Dataset from a CSV table. The response is optional for prediction.
inline model::Dataset load_dataset(const csv::Table& t, const DataOptions& o, bool need_response,
                                   bool need_coords) {
    model::Dataset d;
    const auto covs = split_list(o.covariates);
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    d.x.resize(n, static_cast<Eigen::Index>(covs.size()));
    for (std::size_t k = 0; k < covs.size(); ++k)
        d.x.col(static_cast<Eigen::Index>(k)) = to_vec(t.numeric(covs[k]));
    d.covariate_names = covs;
    if (need_response) {
        if (o.response.empty()) throw InputError("--response is required");
        d.y = to_vec(t.numeric(o.response));
    }
    const auto coords = split_list(o.coords);
    if (!coords.empty()) {
        if (coords.size() != 2) throw InputError("--coords takes exactly two column names");
        if (!t.has(coords[0])) throw InputError("missing coordinate column '" + coords[0] + "'");
        if (!t.has(coords[1])) throw InputError("missing coordinate column '" + coords[1] + "'");
        Eigen::MatrixXd c(n, 2);
        c.col(0) = to_vec(t.numeric(coords[0]));
        c.col(1) = to_vec(t.numeric(coords[1]));
        d.coords = c;
    } else if (need_coords) {
        throw InputError("spatial terms requested but --coords was not given (columns for x and y coordinates)");
    }
    if (!o.location_id.empty()) d.location_ids = t.text(o.location_id);
    for (const auto& g : split_list(o.group_ids)) {
        d.groups.push_back(t.text(g));
        d.group_names.push_back(g);
        d.group_temporal.push_back(false);
    }
    if (!o.time_id.empty()) {
        d.groups.push_back(t.text(o.time_id));
        d.group_names.push_back(o.time_id);
        d.group_temporal.push_back(true);
    }
    return d;
}

inline void add_data_options(CLI::App* app, DataOptions& o, bool response_required) {
    app->add_option("--input", o.input, "input CSV")->required();
    auto* r = app->add_option("--response", o.response, "response column");
    if (response_required) r->required();
    app->add_option("--covariates", o.covariates, "covariate columns (comma separated)")->delimiter(',');
    app->add_option("--coords", o.coords, "coordinate columns x,y")->delimiter(',');
    app->add_option("--location-id", o.location_id, "location id column (rows sharing an id share a site)");
    app->add_option("--group-ids", o.group_ids, "group id columns for random intercepts")->delimiter(',');
    app->add_option("--time-id", o.time_id, "time-period id column (temporal random intercept)");
}

inline std::string bic_report(const model::FitResult& f) {
    std::ostringstream os;
    os << "D,bic,log_restricted_lik,converged,selected\n";
    for (const auto& r : f.d_report)
        os << r.d << ',' << csv::number(r.bic) << ',' << csv::number(r.log_restricted_lik) << ','
           << (r.converged ? 1 : 0) << ',' << (r.d == f.stack().d_count() ? 1 : 0) << '\n';
    return os.str();
}

inline int cmd_fit(const FitOptions& o, std::ostream& out) {
    const auto table = csv::read_file(o.data.input);
    const auto covs = split_list(o.data.covariates);
    const bool spatial = !o.no_svc;
    const bool want_coords = spatial && !split_list(o.data.coords).empty();
    auto data = load_dataset(table, o.data, true, spatial && !o.svc_covariates.empty());

    model::ModelSpec spec;
    if (o.tr_num == "select") {
        spec.tr_num.reset();
    } else {
        try {
            std::size_t used = 0;
            spec.tr_num = std::stoi(o.tr_num, &used);
            if (used != o.tr_num.size() || *spec.tr_num < 0) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw InputError("--tr-num must be a non-negative integer or 'select'");
        }
    }
    spec.tr_nonneg = o.tr_nonneg;
    spec.d_candidates = o.d_candidates;
    spec.max_eigenvectors = o.max_eigenvectors;
    spec.threads = o.threads;
    spec.spatial_intercept = !o.no_spatial_intercept;
    const std::size_t kk = covs.size() + 1;
    spec.allow_svc.assign(kk, want_coords);
    if (want_coords && !o.svc_covariates.empty()) {
        const auto chosen = split_list(o.svc_covariates);
        for (std::size_t k = 0; k < covs.size(); ++k)
            spec.allow_svc[k + 1] = std::find(chosen.begin(), chosen.end(), covs[k]) != chosen.end();
        for (const auto& c : chosen)
            if (std::find(covs.begin(), covs.end(), c) == covs.end())
                throw InputError("--svc names '" + c + "', which is not a covariate");
    }
    spec.allow_nvc.assign(kk, o.x_nvc);

    const auto fit = model::fit_camm(data, spec);

    fs::create_directories(o.output_dir);
    const fs::path dir(o.output_dir);
    csv::write_atomic(dir / "fit.json", model::to_json(fit).dump(1) + "\n");

    const auto vc = model::varying_coefficients(fit, data);
    std::ostringstream co;
    co << "row_id,covariate,beta_total,beta_svc_part,beta_nvc_part,se,p\n";
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
        for (Eigen::Index c = 0; c < fit.coefficients(); ++c) {
            const std::string name = c == 0 ? "(Intercept)" : covs[static_cast<std::size_t>(c - 1)];
            const double se = vc.se(i, c);
            const double p = se > 0 ? stats::two_sided_p(vc.total(i, c) / se) : std::nan("");
            co << i + 1 << ',' << csv::quote(name) << ',' << csv::number(vc.total(i, c)) << ','
               << csv::number(vc.svc(i, c)) << ',' << csv::number(vc.nvc(i, c)) << ',' << csv::number(se) << ','
               << csv::number(p) << '\n';
        }
    }
    csv::write_atomic(dir / "coefficients.csv", co.str());

    const auto me = model::marginal_effects(fit, data);
    std::ostringstream mo;
    mo << "covariate,median_marginal_effect,coef_type\n";
    for (std::size_t k = 0; k < covs.size(); ++k)
        mo << csv::quote(covs[k]) << ',' << csv::number(me.median[k]) << ',' << model::to_string(fit.coef_type[k + 1])
           << '\n';
    csv::write_atomic(dir / "marginal_effects.csv", mo.str());
    csv::write_atomic(dir / "bic_report.csv", bic_report(fit));

    out << "N=" << data.rows() << " D=" << fit.stack().d_count() << " BIC=" << csv::number(fit.bic)
        << " logRL=" << csv::number(fit.core.log_restricted_lik) << " converged=" << (fit.converged() ? "yes" : "no")
        << "\n";
    for (Eigen::Index c = 0; c < fit.coefficients(); ++c)
        out << "  " << (c == 0 ? "(Intercept)" : covs[static_cast<std::size_t>(c - 1)]) << ": "
            << model::to_string(fit.coef_type[static_cast<std::size_t>(c)]) << "\n";
    for (const auto& n : fit.notes) out << "  note: " << n << "\n";
    return fit.converged() ? kExitOk : kExitNotConverged;
}

inline int cmd_predict(const PredictOptions& o, std::ostream& out) {
    std::ifstream in(o.fit_path);
    if (!in) throw InputError("cannot open fit file '" + o.fit_path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("fit file is not valid JSON: ") + e.what());
    }
    const auto fit = model::fit_from_json(j);
    auto opts = o.data;
    if (opts.covariates.empty()) opts.covariates = fit.covariate_names;
    if (split_list(opts.covariates) != fit.covariate_names)
        throw InputError("covariates must match the fitted model's covariates in order");
    if (opts.group_ids.empty() && opts.time_id.empty()) {
        for (std::size_t g = 0; g < fit.group_names.size(); ++g) {
            if (fit.group_temporal[g]) opts.time_id = fit.group_names[g];
            else opts.group_ids.push_back(fit.group_names[g]);
        }
    }
    const auto table = csv::read_file(o.data.input);
    auto data = load_dataset(table, opts, false, fit.spatial.has_value());
    // group columns must line up with the fit's order
    for (std::size_t g = 0; g < fit.group_names.size(); ++g)
        if (g >= data.group_names.size() || data.group_names[g] != fit.group_names[g])
            throw InputError("group columns must match the fitted model: expected '" + fit.group_names[g] + "'");

    const auto pred = model::predict(fit, data);
    std::vector<double> truth;
    if (!o.truth.empty()) truth = table.numeric(o.truth);

    std::ostringstream po;
    po << "row_id,prediction,warped_linear_predictor,ok\n";
    double sq = 0.0;
    std::size_t used = 0, failed = 0;
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
        const bool ok = pred.ok[static_cast<std::size_t>(i)];
        po << i + 1 << ',' << csv::number(pred.response(i)) << ',' << csv::number(pred.warped(i)) << ','
           << (ok ? 1 : 0) << '\n';
        if (!ok) ++failed;
        if (ok && !truth.empty()) {
            const double e = pred.response(i) - truth[static_cast<std::size_t>(i)];
            sq += e * e;
            ++used;
        }
    }
    fs::create_directories(o.output_dir);
    csv::write_atomic(fs::path(o.output_dir) / "predictions.csv", po.str());
    out << "predicted " << data.rows() << " rows";
    if (failed) out << " (" << failed << " flagged: inverse warp undefined)";
    out << "\n";
    if (!truth.empty() && used) out << "RMSPE=" << csv::number(std::sqrt(sq / static_cast<double>(used))) << "\n";
    return kExitOk;
}

inline int cmd_simulate(const SimulateOptions& o, std::ostream& out) {
    std::vector<simulate::ExperimentCell> grid;
    for (double g : o.g)
        for (double h : o.h)
            for (int n : o.n)
                for (const auto& m : o.models) {
                    const auto kind = simulate::model_kind_from_string(m);
                    if (kind == simulate::ModelKind::CAMM)
                        for (int d : o.d) grid.push_back({g, h, n, kind, d});
                    else
                        grid.push_back({g, h, n, kind, 0});
                }
    simulate::ExperimentOptions eo;
    eo.replicates = o.replicates;
    eo.seed = o.seed;
    eo.threads = o.threads;
    eo.max_eigenvectors = o.max_eigenvectors;
    eo.coefficients = o.coefficients;
    eo.record_timing = !o.no_timing;
    const auto records = simulate::run_experiment(grid, eo);
    std::ostringstream so;
    simulate::write_experiment_csv(so, records, o.coefficients);
    fs::create_directories(o.output_dir);
    csv::write_atomic(fs::path(o.output_dir) / "experiment.csv", so.str());
    int failures = 0;
    for (const auto& r : records) failures += r.failures;
    out << "cells=" << records.size() << " replicates=" << o.replicates << " failed_fits=" << failures << "\n";
    return kExitOk;
}

inline int cmd_warp_check(const WarpCheckOptions& o, std::ostream& out) {
    const auto table = csv::read_file(o.input);
    const auto y = table.numeric(o.response);
    if (y.size() < 3) throw InputError("warp-check needs at least 3 values");
    if (o.d < 0) throw InputError("--tr-num must be non-negative");
    if (o.bins < 1) throw InputError("--bins must be positive");
    const Eigen::MatrixXd X = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(y.size()), 1);
    const auto stack = o.tr_nonneg ? warp::WarpStack::make_nonnegative(o.d, y) : warp::WarpStack::make_default(o.d);
    const auto fit = reml::fit(X, {}, y, stack);

    const double m = stats::mean(y), s = stats::sd(y);
    std::vector<double> pre(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) pre[i] = (y[i] - m) / s;
    std::vector<double> post(fit.warped.data(), fit.warped.data() + fit.warped.size());

    const double lo = std::min(*std::min_element(pre.begin(), pre.end()), *std::min_element(post.begin(), post.end()));
    const double hi = std::max(*std::max_element(pre.begin(), pre.end()), *std::max_element(post.begin(), post.end()));
    const auto hpre = stats::histogram_range(pre, static_cast<std::size_t>(o.bins), lo, hi);
    const auto hpost = stats::histogram_range(post, static_cast<std::size_t>(o.bins), lo, hi);

    std::ostringstream ho;
    ho << "bin,lo,hi,count_before,count_after\n";
    const double w = (hi - lo) / o.bins;
    for (int b = 0; b < o.bins; ++b)
        ho << b + 1 << ',' << csv::number(lo + b * w) << ',' << csv::number(lo + (b + 1) * w) << ','
           << hpre[static_cast<std::size_t>(b)] << ',' << hpost[static_cast<std::size_t>(b)] << '\n';
    std::ostringstream so;
    so << "stage,skewness,excess_kurtosis\n"
       << "before," << csv::number(stats::skewness(pre)) << ',' << csv::number(stats::excess_kurtosis(pre)) << '\n'
       << "after," << csv::number(stats::skewness(post)) << ',' << csv::number(stats::excess_kurtosis(post)) << '\n';
    fs::create_directories(o.output_dir);
    csv::write_atomic(fs::path(o.output_dir) / "warp_check_histogram.csv", ho.str());
    csv::write_atomic(fs::path(o.output_dir) / "warp_check_summary.csv", so.str());
    csv::write_atomic(fs::path(o.output_dir) / "warp_stack.json", warp::to_json(fit.stack).dump(1) + "\n");

    out << "D=" << o.d << " skewness " << csv::number(stats::skewness(pre)) << " -> "
        << csv::number(stats::skewness(post)) << ", excess kurtosis " << csv::number(stats::excess_kurtosis(pre))
        << " -> " << csv::number(stats::excess_kurtosis(post)) << "\n";
    return fit.converged ? kExitOk : kExitNotConverged;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"camm: compositionally warped additive mixed models"};
    app.set_config("--config", "", "key = value config file; command-line flags take precedence");
    app.require_subcommand(1);
    std::uint64_t seed = 1;
    unsigned threads = 1;
    app.add_option("--seed", seed, "random seed")->capture_default_str();
    app.add_option("--threads", threads, "worker threads for independent fits")->capture_default_str();

    FitOptions fo;
    auto* fit = app.add_subcommand("fit", "fit a model and write fit.json and coefficient tables");
    detail::add_data_options(fit, fo.data, true);
    fit->add_option("--output-dir", fo.output_dir, "directory for artifacts")->capture_default_str();
    fit->add_option("--tr-num", fo.tr_num, "number of SAL steps D, or 'select'")->capture_default_str();
    fit->add_flag("--tr-nonneg", fo.tr_nonneg, "non-negative template (add value, Box-Cox, SALs)");
    fit->add_flag("--x-nvc", fo.x_nvc, "allow non-spatially varying coefficients");
    fit->add_option("--svc", fo.svc_covariates, "restrict SVC candidates to these covariates")->delimiter(',');
    fit->add_flag("--no-svc", fo.no_svc, "no spatially varying terms");
    fit->add_flag("--no-spatial-intercept", fo.no_spatial_intercept, "no spatial random intercept");
    fit->add_option("--d-candidates", fo.d_candidates, "D grid for --tr-num select")->delimiter(',');
    fit->add_option("--max-eigenvectors", fo.max_eigenvectors, "cap on Moran eigenvectors")->capture_default_str();

    PredictOptions po;
    auto* pred = app.add_subcommand("predict", "predict from fit.json on new data");
    detail::add_data_options(pred, po.data, false);
    pred->add_option("--fit", po.fit_path, "fit.json from the fit command")->required();
    pred->add_option("--truth", po.truth, "observed response column; prints RMSPE");
    pred->add_option("--output-dir", po.output_dir, "directory for predictions.csv")->capture_default_str();

    SimulateOptions so;
    auto* sim = app.add_subcommand("simulate", "Monte Carlo accuracy experiment");
    sim->add_option("--g-values", so.g, "g values")->delimiter(',');
    sim->add_option("--h-values", so.h, "h values")->delimiter(',');
    sim->add_option("--sizes", so.n, "sample sizes N")->delimiter(',');
    sim->add_option("--models", so.models, "LM, AMM, CAMM")->delimiter(',');
    sim->add_option("--d", so.d, "D values for CAMM")->delimiter(',');
    sim->add_option("--coefficients", so.coefficients, "coefficient indices to report (0-2)")->delimiter(',');
    sim->add_option("--replicates", so.replicates, "replicates per cell")->capture_default_str();
    sim->add_option("--max-eigenvectors", so.max_eigenvectors, "cap on Moran eigenvectors")->capture_default_str();
    sim->add_flag("--no-timing", so.no_timing, "write 0 in the seconds column (byte-reproducible output)");
    sim->add_option("--output-dir", so.output_dir, "directory for experiment.csv")->capture_default_str();

    WarpCheckOptions wo;
    auto* wc = app.add_subcommand("warp-check", "fit a warp-only model and report Gaussianization diagnostics");
    wc->add_option("--input", wo.input, "input CSV")->required();
    wc->add_option("--response", wo.response, "column to transform")->required();
    wc->add_option("--tr-num", wo.d, "number of SAL steps D")->capture_default_str();
    wc->add_flag("--tr-nonneg", wo.tr_nonneg, "non-negative template");
    wc->add_option("--bins", wo.bins, "histogram bins")->capture_default_str();
    wc->add_option("--output-dir", wo.output_dir, "directory for diagnostics")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitInput;
    }

    try {
        if (*fit) {
            fo.threads = threads;
            return detail::cmd_fit(fo, out);
        }
        if (*pred) return detail::cmd_predict(po, out);
        if (*sim) {
            so.seed = seed;
            so.threads = threads;
            return detail::cmd_simulate(so, out);
        }
        if (*wc) return detail::cmd_warp_check(wo, out);
    } catch (const InputError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const DomainError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitInput;
}

}  // namespace camm::cli
