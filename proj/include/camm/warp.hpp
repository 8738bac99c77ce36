#pragma once

// Compositional response transformation: an ordered stack of monotone steps
// phi(y) = phi_D(...phi_1(y)), with per-step inverse and derivative.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "stats.hpp"

namespace camm::warp {

enum class StepKind { SAL, BoxCox, Log, Standardize, AddValue };

/// Pipeline layout. Default: Standardize, SAL x D, Standardize.
/// NonNegative: AddValue, BoxCox, Standardize, SAL x D, Standardize.
enum class Template { Default, NonNegative, Custom };

inline std::string_view to_string(StepKind k) {
    switch (k) {
        case StepKind::SAL: return "sal";
        case StepKind::BoxCox: return "box_cox";
        case StepKind::Log: return "log";
        case StepKind::Standardize: return "standardize";
        case StepKind::AddValue: return "add_value";
    }
    return "?";
}

inline StepKind step_kind_from_string(std::string_view s) {
    if (s == "sal") return StepKind::SAL;
    if (s == "box_cox") return StepKind::BoxCox;
    if (s == "log") return StepKind::Log;
    if (s == "standardize") return StepKind::Standardize;
    if (s == "add_value") return StepKind::AddValue;
    throw InputError("unknown warp step kind '" + std::string(s) + "'");
}

inline std::string_view to_string(Template t) {
    switch (t) {
        case Template::Default: return "default";
        case Template::NonNegative: return "nonnegative";
        case Template::Custom: return "custom";
    }
    return "?";
}

inline Template template_from_string(std::string_view s) {
    if (s == "default") return Template::Default;
    if (s == "nonnegative") return Template::NonNegative;
    if (s == "custom") return Template::Custom;
    throw InputError("unknown warp template '" + std::string(s) + "'");
}

/// Smallest admissible shifted value min(y) + c for the AddValue step.
inline constexpr double kAddValueFloor = 1e-8;

namespace detail {

inline double log_cosh(double a) {
    const double x = std::abs(a);
    return x + std::log1p(std::exp(-2.0 * x)) - std::log(2.0);
}

}  // namespace detail

/// One elementary transformation.
///
/// Parameter layout per kind:
///   SAL          {w1, w2, w3, w4}: w1 + w2 sinh(w3 asinh(y) - w4), w2 > 0, w3 > 0
///   BoxCox       {lambda}
///   Log          {}
///   Standardize  {location, scale}, data-derived
///   AddValue     {c, c_min}: y + c with c > c_min; c_min is data-derived
struct WarpStep {
    StepKind kind = StepKind::SAL;
    std::vector<double> params;
    std::vector<bool> trainable;

    static WarpStep sal(double w1 = 0.0, double w2 = 1.0, double w3 = 1.0, double w4 = 0.0) {
        return {StepKind::SAL, {w1, w2, w3, w4}, {true, true, true, true}};
    }
    static WarpStep box_cox(double lambda = 1.0) { return {StepKind::BoxCox, {lambda}, {true}}; }
    static WarpStep log() { return {StepKind::Log, {}, {}}; }
    static WarpStep standardize(double location = 0.0, double scale = 1.0) {
        return {StepKind::Standardize, {location, scale}, {false, false}};
    }
    static WarpStep add_value(double c, double c_min = -std::numeric_limits<double>::infinity()) {
        return {StepKind::AddValue, {c, c_min}, {true, false}};
    }

    /// Throws InputError when the parameters break the step's constraints.
    void validate() const {
        const std::size_t expected = [&]() -> std::size_t {
            switch (kind) {
                case StepKind::SAL: return 4;
                case StepKind::BoxCox: return 1;
                case StepKind::Log: return 0;
                case StepKind::Standardize: return 2;
                case StepKind::AddValue: return 2;
            }
            return 0;
        }();
        if (params.size() != expected || trainable.size() != expected)
            throw InputError("warp step '" + std::string(to_string(kind)) + "' expects " +
                             std::to_string(expected) + " parameters");
        for (std::size_t i = 0; i < params.size(); ++i) {
            const bool floor_slot = kind == StepKind::AddValue && i == 1;
            if (!floor_slot && !std::isfinite(params[i]))
                throw InputError("non-finite warp parameter");
        }
        if (kind == StepKind::SAL && !(params[1] > 0.0 && params[2] > 0.0))
            throw InputError("SAL step requires w2 > 0 and w3 > 0");
        if (kind == StepKind::Standardize && !(params[1] > 0.0))
            throw InputError("standardize step requires a positive scale");
        if (kind == StepKind::AddValue && !(params[0] > params[1]))
            throw InputError("add-value constant must exceed its data-derived floor");
    }

    /// Forward map; NaN or +-inf outside the step's domain.
    double apply(double y) const {
        switch (kind) {
            case StepKind::SAL:
                return params[0] + params[1] * std::sinh(params[2] * std::asinh(y) - params[3]);
            case StepKind::BoxCox: {
                if (!(y > 0.0)) return y == 0.0 ? -std::numeric_limits<double>::infinity()
                                                : std::numeric_limits<double>::quiet_NaN();
                const double lam = params[0];
                const double ly = std::log(y);
                return lam == 0.0 ? ly : std::expm1(lam * ly) / lam;
            }
            case StepKind::Log:
                if (!(y > 0.0)) return y == 0.0 ? -std::numeric_limits<double>::infinity()
                                                : std::numeric_limits<double>::quiet_NaN();
                return std::log(y);
            case StepKind::Standardize: return (y - params[0]) / params[1];
            case StepKind::AddValue: return y + params[0];
        }
        return std::numeric_limits<double>::quiet_NaN();
    }

    double invert(double z) const {
        switch (kind) {
            case StepKind::SAL:
                return std::sinh((std::asinh((z - params[0]) / params[1]) + params[3]) / params[2]);
            case StepKind::BoxCox: {
                const double lam = params[0];
                if (lam == 0.0) return std::exp(z);
                const double base = lam * z + 1.0;
                if (!(base > 0.0)) return std::numeric_limits<double>::quiet_NaN();
                return std::exp(std::log1p(lam * z) / lam);
            }
            case StepKind::Log: return std::exp(z);
            case StepKind::Standardize: return params[1] * z + params[0];
            case StepKind::AddValue: return z - params[0];
        }
        return std::numeric_limits<double>::quiet_NaN();
    }

    /// log of d apply / dy at y.
    double log_derivative(double y) const {
        switch (kind) {
            case StepKind::SAL:
                return std::log(params[1]) + std::log(params[2]) +
                       detail::log_cosh(params[2] * std::asinh(y) - params[3]) -
                       0.5 * std::log1p(y * y);
            case StepKind::BoxCox:
                if (!(y > 0.0)) return std::numeric_limits<double>::quiet_NaN();
                return (params[0] - 1.0) * std::log(y);
            case StepKind::Log:
                if (!(y > 0.0)) return std::numeric_limits<double>::quiet_NaN();
                return -std::log(y);
            case StepKind::Standardize: return -std::log(params[1]);
            case StepKind::AddValue: return 0.0;
        }
        return std::numeric_limits<double>::quiet_NaN();
    }

    std::size_t trainable_count() const {
        return static_cast<std::size_t>(std::count(trainable.begin(), trainable.end(), true));
    }

    bool operator==(const WarpStep&) const = default;
};

/// Immutable ordered sequence of steps.
class WarpStack {
public:
    WarpStack() = default;

    explicit WarpStack(std::vector<WarpStep> steps, Template layout = Template::Custom)
        : steps_(std::move(steps)), layout_(layout) {
        for (const auto& s : steps_) s.validate();
        check_layout();
    }

    /// Identity-initialized Default pipeline with `d` SAL steps.
    static WarpStack make_default(int d) {
        if (d < 0) throw InputError("number of SAL steps must be non-negative");
        std::vector<WarpStep> steps;
        steps.push_back(WarpStep::standardize());
        for (int i = 0; i < d; ++i) steps.push_back(WarpStep::sal());
        steps.push_back(WarpStep::standardize());
        return WarpStack(std::move(steps), Template::Default);
    }

    /// NonNegative pipeline; c starts at max(0, 1e-6 - min(y)), lambda at 1.
    static WarpStack make_nonnegative(int d, std::span<const double> y) {
        if (d < 0) throw InputError("number of SAL steps must be non-negative");
        if (y.empty()) throw InputError("empty response");
        const double ymin = *std::min_element(y.begin(), y.end());
        std::vector<WarpStep> steps;
        steps.push_back(WarpStep::add_value(std::max(0.0, 1e-6 - ymin), kAddValueFloor - ymin));
        steps.push_back(WarpStep::box_cox(1.0));
        steps.push_back(WarpStep::standardize());
        for (int i = 0; i < d; ++i) steps.push_back(WarpStep::sal());
        steps.push_back(WarpStep::standardize());
        return WarpStack(std::move(steps), Template::NonNegative);
    }

    const std::vector<WarpStep>& steps() const noexcept { return steps_; }
    Template layout() const noexcept { return layout_; }
    std::size_t size() const noexcept { return steps_.size(); }

    int d_count() const noexcept {
        return static_cast<int>(std::count_if(steps_.begin(), steps_.end(),
                                              [](const WarpStep& s) { return s.kind == StepKind::SAL; }));
    }

    std::size_t trainable_count() const noexcept {
        std::size_t n = 0;
        for (const auto& s : steps_) n += s.trainable_count();
        return n;
    }

    /// Copy with step `i` replaced.
    WarpStack with_step(std::size_t i, WarpStep step) const {
        auto steps = steps_;
        steps.at(i) = std::move(step);
        return WarpStack(std::move(steps), layout_);
    }

    /// Copy with a SAL step inserted at position `pos` (layout becomes Custom
    /// unless the insert keeps the template's shape).
    WarpStack with_inserted(std::size_t pos, WarpStep step) const {
        auto steps = steps_;
        steps.insert(steps.begin() + static_cast<std::ptrdiff_t>(pos), std::move(step));
        WarpStack out;
        out.steps_ = std::move(steps);
        out.layout_ = layout_;
        for (const auto& s : out.steps_) s.validate();
        try {
            out.check_layout();
        } catch (const InputError&) {
            out.layout_ = Template::Custom;
        }
        return out;
    }

    bool operator==(const WarpStack&) const = default;

private:
    void check_layout() const {
        auto fail = [&] {
            throw InputError("warp steps do not follow the '" + std::string(to_string(layout_)) +
                             "' template order");
        };
        auto sal_run_then_standardize = [&](std::size_t from) {
            if (steps_.size() < from + 1) fail();
            for (std::size_t i = from; i + 1 < steps_.size(); ++i)
                if (steps_[i].kind != StepKind::SAL) fail();
            if (steps_.back().kind != StepKind::Standardize) fail();
        };
        switch (layout_) {
            case Template::Custom: return;
            case Template::Default:
                if (steps_.size() < 2 || steps_.front().kind != StepKind::Standardize) fail();
                sal_run_then_standardize(1);
                return;
            case Template::NonNegative:
                if (steps_.size() < 4 || steps_[0].kind != StepKind::AddValue ||
                    steps_[1].kind != StepKind::BoxCox || steps_[2].kind != StepKind::Standardize)
                    fail();
                sal_run_then_standardize(3);
                return;
        }
    }

    std::vector<WarpStep> steps_;
    Template layout_ = Template::Custom;
};

/// phi(y) for one value; NaN/inf signal a domain violation.
inline double forward_one(const WarpStack& stack, double y) {
    for (const auto& s : stack.steps()) y = s.apply(y);
    return y;
}

inline double inverse_one(const WarpStack& stack, double z) {
    const auto& steps = stack.steps();
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) z = it->invert(z);
    return z;
}

/// log d phi / dy at one value.
inline double log_derivative_one(const WarpStack& stack, double y) {
    double acc = 0.0;
    for (const auto& s : stack.steps()) {
        acc += s.log_derivative(y);
        y = s.apply(y);
    }
    return acc;
}

/// Element-wise phi(y); throws DomainError naming the first offending sample.
inline Eigen::VectorXd forward(const WarpStack& stack, std::span<const double> y) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(y.size()));
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double z = forward_one(stack, y[i]);
        if (!std::isfinite(z)) throw DomainError("warp forward left the domain", i);
        out(static_cast<Eigen::Index>(i)) = z;
    }
    return out;
}

inline Eigen::VectorXd forward(const WarpStack& stack, const Eigen::VectorXd& y) {
    return forward(stack, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())));
}

/// Element-wise phi^-1(z), steps undone in reverse order.
inline Eigen::VectorXd inverse(const WarpStack& stack, std::span<const double> z) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(z.size()));
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (!std::isfinite(z[i])) throw InputError("inverse warp needs finite input");
        const double y = inverse_one(stack, z[i]);
        if (!std::isfinite(y)) throw DomainError("warp inverse left the domain", i);
        out(static_cast<Eigen::Index>(i)) = y;
    }
    return out;
}

inline Eigen::VectorXd inverse(const WarpStack& stack, const Eigen::VectorXd& z) {
    return inverse(stack, std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
}

/// Per-sample log derivatives log d phi(y_i)/dy_i.
inline Eigen::VectorXd log_derivatives(const WarpStack& stack, std::span<const double> y) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(y.size()));
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double v = log_derivative_one(stack, y[i]);
        if (!std::isfinite(v)) throw DomainError("warp derivative is not positive and finite", i);
        out(static_cast<Eigen::Index>(i)) = v;
    }
    return out;
}

/// Sum of log derivatives (the Jacobian term of the likelihood).
inline double log_jacobian(const WarpStack& stack, std::span<const double> y) {
    return log_derivatives(stack, y).sum();
}

inline double log_jacobian(const WarpStack& stack, const Eigen::VectorXd& y) {
    return log_jacobian(stack, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())));
}

/// Unconstrained optimizer vector from the trainable parameters. Positive
/// quantities (SAL w2, w3 and the AddValue margin c - c_min) go through log.
inline Eigen::VectorXd pack_params(const WarpStack& stack) {
    std::vector<double> v;
    for (const auto& s : stack.steps()) {
        switch (s.kind) {
            case StepKind::SAL:
                v.insert(v.end(), {s.params[0], std::log(s.params[1]), std::log(s.params[2]), s.params[3]});
                break;
            case StepKind::BoxCox: v.push_back(s.params[0]); break;
            case StepKind::AddValue: v.push_back(std::log(s.params[0] - s.params[1])); break;
            case StepKind::Log:
            case StepKind::Standardize: break;
        }
    }
    return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline WarpStack unpack_params(const WarpStack& stack, const Eigen::VectorXd& v) {
    if (static_cast<std::size_t>(v.size()) != stack.trainable_count())
        throw InputError("warp parameter vector has length " + std::to_string(v.size()) + ", expected " +
                         std::to_string(stack.trainable_count()));
    auto steps = stack.steps();
    Eigen::Index k = 0;
    for (auto& s : steps) {
        switch (s.kind) {
            case StepKind::SAL:
                s.params = {v(k), std::exp(v(k + 1)), std::exp(v(k + 2)), v(k + 3)};
                k += 4;
                break;
            case StepKind::BoxCox: s.params[0] = v(k++); break;
            case StepKind::AddValue: s.params[0] = s.params[1] + std::exp(v(k++)); break;
            case StepKind::Log:
            case StepKind::Standardize: break;
        }
    }
    return WarpStack(std::move(steps), stack.layout());
}

/// Re-derive the data-dependent parameters: each Standardize step gets the
/// mean and population sd of the stream entering it; each AddValue floor
/// becomes 1e-8 - min(stream).
inline WarpStack fit_standardize(const WarpStack& stack, std::span<const double> y) {
    std::vector<double> stream(y.begin(), y.end());
    auto steps = stack.steps();
    for (auto& s : steps) {
        if (s.kind == StepKind::Standardize) {
            const double m = stats::mean(stream);
            const double sd = stats::sd(stream);
            if (!(sd > 0.0) || !std::isfinite(sd) || sd <= 1e-12 * std::max(1.0, std::abs(m)))
                throw InputError("cannot standardize a constant stream");
            s.params = {m, sd};
        } else if (s.kind == StepKind::AddValue) {
            const double floor = kAddValueFloor - *std::min_element(stream.begin(), stream.end());
            s.params[1] = floor;
            if (!(s.params[0] > floor)) s.params[0] = std::max(0.0, floor + 1e-6);
        }
        for (std::size_t i = 0; i < stream.size(); ++i) {
            stream[i] = s.apply(stream[i]);
            if (!std::isfinite(stream[i])) throw DomainError("warp forward left the domain", i);
        }
    }
    return WarpStack(std::move(steps), stack.layout());
}

inline WarpStack fit_standardize(const WarpStack& stack, const Eigen::VectorXd& y) {
    return fit_standardize(stack, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())));
}

}  // namespace camm::warp
