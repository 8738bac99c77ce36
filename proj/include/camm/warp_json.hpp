#pragma once

#include "json.hpp"
#include "warp.hpp"

namespace camm::warp {

/// {"template": "...", "steps": [{"kind", "params", "trainable"}, ...]}
inline nlohmann::json to_json(const WarpStack& stack) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : stack.steps()) {
        nlohmann::json params = nlohmann::json::array();
        for (double p : s.params) {
            if (std::isfinite(p)) params.push_back(p);
            else params.push_back(p > 0 ? "inf" : "-inf");
        }
        steps.push_back({{"kind", to_string(s.kind)},
                         {"params", std::move(params)},
                         {"trainable", std::vector<bool>(s.trainable.begin(), s.trainable.end())}});
    }
    return {{"template", to_string(stack.layout())}, {"steps", std::move(steps)}};
}

inline WarpStack stack_from_json(const nlohmann::json& j) {
    try {
        std::vector<WarpStep> steps;
        for (const auto& js : j.at("steps")) {
            WarpStep s;
            s.kind = step_kind_from_string(js.at("kind").get<std::string>());
            for (const auto& p : js.at("params")) {
                if (p.is_string()) {
                    const auto str = p.get<std::string>();
                    if (str != "inf" && str != "-inf") throw InputError("bad warp parameter '" + str + "'");
                    s.params.push_back(str == "inf" ? std::numeric_limits<double>::infinity()
                                                    : -std::numeric_limits<double>::infinity());
                } else {
                    s.params.push_back(p.get<double>());
                }
            }
            for (const auto& t : js.at("trainable")) s.trainable.push_back(t.get<bool>());
            steps.push_back(std::move(s));
        }
        return WarpStack(std::move(steps), template_from_string(j.value("template", "custom")));
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed warp stack JSON: ") + e.what());
    }
}

}  // namespace camm::warp
