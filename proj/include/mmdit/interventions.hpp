#pragma once

// Per-block intervention plans and their application to the text stream at a
// block boundary. Remove and Skip share one execution path (the block is
// bypassed for both streams); DisableText zeroes the text stream and
// EnhanceText scales it, optionally only on masked token rows. Both text
// mutations persist into the following blocks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdit/config.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/numerics.hpp"

namespace mmdit {

enum class ActionKind { remove, disable_text, enhance_text, skip };

inline constexpr float kMaxLambda = 4.f;

struct Action {
    ActionKind kind = ActionKind::skip;
    float lambda = 1.f;                             // enhance_text only
    std::optional<std::vector<std::size_t>> mask;   // nullopt: every text token

    static Action remove() { return {ActionKind::remove, 1.f, std::nullopt}; }
    static Action skip() { return {ActionKind::skip, 1.f, std::nullopt}; }
    static Action disable_text() { return {ActionKind::disable_text, 1.f, std::nullopt}; }
    static Action enhance(float lambda, std::optional<std::vector<std::size_t>> mask = std::nullopt) {
        return {ActionKind::enhance_text, lambda, std::move(mask)};
    }

    bool bypasses_block() const noexcept {
        return kind == ActionKind::remove || kind == ActionKind::skip;
    }

    friend bool operator==(const Action&, const Action&) = default;
};

struct BlockAction {
    std::size_t block = 0;
    Action action;
    friend bool operator==(const BlockAction&, const BlockAction&) = default;
};

struct InterventionSpec {
    std::vector<BlockAction> actions;

    bool empty() const noexcept { return actions.empty(); }

    InterventionSpec& add(std::size_t block, Action a) {
        actions.push_back({block, std::move(a)});
        return *this;
    }

    static InterventionSpec skip_set(const std::vector<std::size_t>& blocks) {
        InterventionSpec p;
        for (auto b : blocks) p.add(b, Action::skip());
        return p;
    }

    static InterventionSpec enhance_blocks(const std::vector<std::size_t>& blocks, float lambda,
                                           std::optional<std::vector<std::size_t>> mask = std::nullopt) {
        InterventionSpec p;
        for (auto b : blocks) p.add(b, Action::enhance(lambda, mask));
        return p;
    }

    friend bool operator==(const InterventionSpec&, const InterventionSpec&) = default;
};

inline std::string action_name(ActionKind k) {
    switch (k) {
        case ActionKind::remove: return "remove";
        case ActionKind::disable_text: return "disable";
        case ActionKind::enhance_text: return "enhance";
        case ActionKind::skip: return "skip";
    }
    return "?";
}

inline void validate(const InterventionSpec& plan, const ModelConfig& cfg) {
    std::set<std::size_t> seen;
    for (const auto& [block, a] : plan.actions) {
        const std::string where = "block " + std::to_string(block) + ": ";
        if (block >= cfg.depth) {
            throw PlanError(where + "index out of range (depth " + std::to_string(cfg.depth) + ")");
        }
        if (!seen.insert(block).second) throw PlanError(where + "more than one action");
        if (a.kind == ActionKind::enhance_text) {
            if (!std::isfinite(a.lambda) || a.lambda <= 0.f || a.lambda > kMaxLambda) {
                throw PlanError(where + "lambda " + std::to_string(a.lambda) + " outside (0, 4]");
            }
            if (a.mask) {
                for (auto m : *a.mask) {
                    if (m >= cfg.text_len) {
                        throw PlanError(where + "mask index " + std::to_string(m) + " >= text length " +
                                        std::to_string(cfg.text_len));
                    }
                }
            }
        }
    }
}

// Dense per-block lookup of a validated plan.
inline std::vector<const Action*> plan_by_block(const InterventionSpec& plan, const ModelConfig& cfg) {
    validate(plan, cfg);
    std::vector<const Action*> by_block(cfg.depth, nullptr);
    for (const auto& ba : plan.actions) by_block[ba.block] = &ba.action;
    return by_block;
}

namespace detail {
inline bool in_mask(const std::optional<std::vector<std::size_t>>& mask, std::size_t token) {
    return !mask || std::find(mask->begin(), mask->end(), token) != mask->end();
}
}  // namespace detail

// Scales rows of a batched text stream (text_len rows per item).
template <class T>
void enhance_rows(BasicMatrix<T>& c, std::size_t text_len, T lambda,
                  const std::optional<std::vector<std::size_t>>& mask) {
    for (std::size_t r = 0; r < c.rows(); ++r) {
        if (!detail::in_mask(mask, r % text_len)) continue;
        for (auto& v : c.row(r)) v *= lambda;
    }
}

// c_enh = (1 - M) ⊙ c + λ · M ⊙ c; without a mask every row is scaled.
template <class T>
BasicMatrix<T> apply_enhance(BasicMatrix<T> c, T lambda,
                             const std::optional<std::vector<std::size_t>>& mask = std::nullopt) {
    if (mask) {
        for (auto m : *mask)
            if (m >= c.rows()) throw PlanError("enhance mask index " + std::to_string(m) + " out of range");
    }
    enhance_rows(c, c.rows(), lambda, mask);
    return c;
}

template <class T>
BasicMatrix<T> apply_disable(const BasicMatrix<T>& c) {
    return BasicMatrix<T>(c.rows(), c.cols(), T(0));
}

// Plan document: {"actions": [{"block": 3, "op": "enhance", "lambda": 1.5, "mask": [1]}, ...]}
inline InterventionSpec plan_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw PlanError("plan document must be an object");
    for (const auto& [k, _] : j.items())
        if (k != "actions") throw PlanError("plan: unknown key '" + k + "'");
    InterventionSpec plan;
    if (!j.contains("actions")) return plan;
    const auto& arr = j.at("actions");
    if (!arr.is_array()) throw PlanError("plan: 'actions' must be an array");
    for (const auto& e : arr) {
        if (!e.is_object() || !e.contains("block") || !e.contains("op")) {
            throw PlanError("plan: each action needs 'block' and 'op'");
        }
        for (const auto& [k, _] : e.items())
            if (k != "block" && k != "op" && k != "lambda" && k != "mask")
                throw PlanError("plan: unknown action key '" + k + "'");
        if (!e["block"].is_number_integer() || e["block"].get<long long>() < 0)
            throw PlanError("plan: 'block' must be a non-negative integer");
        const auto block = e["block"].get<std::size_t>();
        const std::string op = e["op"].is_string() ? e["op"].get<std::string>() : "";
        Action a;
        if (op == "remove") a = Action::remove();
        else if (op == "skip") a = Action::skip();
        else if (op == "disable") a = Action::disable_text();
        else if (op == "enhance") {
            if (!e.contains("lambda") || !e["lambda"].is_number())
                throw PlanError("plan: block " + std::to_string(block) + ": enhance needs numeric 'lambda'");
            std::optional<std::vector<std::size_t>> mask;
            if (e.contains("mask")) {
                if (!e["mask"].is_array()) throw PlanError("plan: 'mask' must be an array");
                mask.emplace();
                for (const auto& m : e["mask"]) {
                    if (!m.is_number_integer() || m.get<long long>() < 0)
                        throw PlanError("plan: mask entries must be non-negative integers");
                    mask->push_back(m.get<std::size_t>());
                }
            }
            a = Action::enhance(e["lambda"].get<float>(), std::move(mask));
        } else {
            throw PlanError("plan: block " + std::to_string(block) + ": unknown op '" + op + "'");
        }
        if (a.kind != ActionKind::enhance_text && (e.contains("lambda") || e.contains("mask")))
            throw PlanError("plan: block " + std::to_string(block) + ": '" + op + "' takes no lambda/mask");
        plan.add(block, std::move(a));
    }
    return plan;
}

inline nlohmann::json plan_to_json(const InterventionSpec& plan) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [block, a] : plan.actions) {
        nlohmann::json e{{"block", block}, {"op", action_name(a.kind)}};
        if (a.kind == ActionKind::enhance_text) {
            e["lambda"] = a.lambda;
            if (a.mask) e["mask"] = *a.mask;
        }
        arr.push_back(std::move(e));
    }
    return nlohmann::json{{"actions", arr}};
}

}  // namespace mmdit
