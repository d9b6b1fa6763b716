#pragma once

#include <set>

#include "mmdit/probe.hpp"

namespace mmdit::testing {

// Report whose color enhance rows sit `spike` above baseline at the given
// blocks and level with it elsewhere.
inline ProbeReport spike_report(std::size_t depth, const std::set<std::size_t>& spikes, double spike = 0.2) {
    ProbeReport r;
    r.rows.push_back({"fixture", "color", "none", std::nullopt, std::nullopt, 5, 0.5, 0, 1});
    for (std::size_t l = 0; l < depth; ++l)
        r.rows.push_back({"fixture", "color", "enhance", l, 2.0, 5, 0.5 + (spikes.count(l) ? spike : 0.0), 0.01, 0.9});
    return r;
}

}  // namespace mmdit::testing
