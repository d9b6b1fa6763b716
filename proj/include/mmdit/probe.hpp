#pragma once

// Block-wise probing: attribute prompt sets, one-block-at-a-time
// remove / disable / enhance sweeps over fixed seeds, report CSV and SVG
// output, and pivotal-block selection from enhance responses.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mmdit/checker.hpp"
#include "mmdit/diffusion.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/grammar.hpp"
#include "mmdit/interventions.hpp"
#include "mmdit/parallel.hpp"

namespace mmdit {

enum class Attribute { color, spatial, amount, other };
enum class ProbeOp { none, remove, disable, enhance };

inline constexpr Attribute kProbeAttributes[] = {Attribute::color, Attribute::spatial, Attribute::amount};

inline std::string attribute_name(Attribute a) {
    switch (a) {
        case Attribute::color: return "color";
        case Attribute::spatial: return "spatial";
        case Attribute::amount: return "amount";
        case Attribute::other: return "other";
    }
    return "?";
}

inline Attribute attribute_from_name(const std::string& s) {
    for (auto a : {Attribute::color, Attribute::spatial, Attribute::amount, Attribute::other})
        if (attribute_name(a) == s) return a;
    throw InputError("unknown attribute '" + s + "' (expected color, spatial, amount or other)");
}

inline std::string op_name(ProbeOp op) {
    switch (op) {
        case ProbeOp::none: return "none";
        case ProbeOp::remove: return "remove";
        case ProbeOp::disable: return "disable";
        case ProbeOp::enhance: return "enhance";
    }
    return "?";
}

inline ProbeOp op_from_name(const std::string& s) {
    for (auto op : {ProbeOp::none, ProbeOp::remove, ProbeOp::disable, ProbeOp::enhance})
        if (op_name(op) == s) return op;
    throw InputError("unknown probe op '" + s + "'");
}

// Token positions enhanced for an attribute: the COUNT slot for amount,
// every token otherwise.
inline std::optional<std::vector<std::size_t>> attribute_mask(Attribute a) {
    if (a == Attribute::amount) return std::vector<std::size_t>{0};
    return std::nullopt;
}

struct ProbePrompt {
    TokenIds tokens;
    Attribute attribute = Attribute::color;
};

// Single-object prompts for color, counts 1-4 for amount, two-object
// relation prompts for spatial. `salt` separates probe sets from held-out
// evaluation sets.
inline std::vector<ProbePrompt> attribute_prompts(Attribute a, std::size_t n, std::uint64_t salt = 0) {
    Rng rng(derive_seed(salt, 100 + static_cast<std::uint64_t>(a)));
    std::vector<ProbePrompt> out;
    for (std::size_t i = 0; i < n; ++i) {
        Prompt p;
        p.color = static_cast<Color>(rng.next_below(4));
        p.shape = static_cast<Shape>(rng.next_below(2));
        switch (a) {
            case Attribute::amount: p.count = 1 + rng.next_below(4); break;
            case Attribute::spatial:
                p.rel = static_cast<Relation>(1 + rng.next_below(4));
                p.color2 = static_cast<Color>(rng.next_below(4));
                p.shape2 = static_cast<Shape>(rng.next_below(2));
                break;
            case Attribute::other: p = random_prompt(rng); break;
            case Attribute::color: break;
        }
        out.push_back({tokenize(p), a});
    }
    return out;
}

inline std::vector<ProbePrompt> probe_prompts(std::size_t per_attribute, std::uint64_t salt = 0) {
    std::vector<ProbePrompt> out;
    for (auto a : kProbeAttributes) {
        auto part = attribute_prompts(a, per_attribute, salt);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

inline bool attribute_correct(Attribute a, const CheckResult& r) {
    switch (a) {
        case Attribute::color: return r.color_ok;
        case Attribute::spatial: return r.spatial_ok;
        case Attribute::amount: return r.count_ok;
        case Attribute::other: return r.object_ok;
    }
    return false;
}

// Noise seed of prompt i under probe seed s.
inline std::uint64_t prompt_seed(std::uint64_t seed, std::size_t index) { return derive_seed(seed, 1000 + index); }

// Per-prompt plan for an op at a block (enhance masks depend on the attribute).
inline InterventionSpec probe_plan(ProbeOp op, std::optional<std::size_t> block, float lambda, Attribute a) {
    InterventionSpec p;
    if (op == ProbeOp::none || !block) return p;
    switch (op) {
        case ProbeOp::remove: p.add(*block, Action::remove()); break;
        case ProbeOp::disable: p.add(*block, Action::disable_text()); break;
        case ProbeOp::enhance: p.add(*block, Action::enhance(lambda, attribute_mask(a))); break;
        case ProbeOp::none: break;
    }
    return p;
}

// Samples every prompt under `plan_for(attribute)` with per-prompt seeds;
// prompts sharing a plan go through one batch.
template <class PlanFor>
std::vector<Image> sample_prompts(const ModelWeights& w, const std::vector<ProbePrompt>& prompts, std::uint64_t seed,
                                  const SamplerConfig& sc, PlanFor&& plan_for) {
    std::vector<Image> images(prompts.size());
    std::map<Attribute, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < prompts.size(); ++i) groups[prompts[i].attribute].push_back(i);
    std::vector<std::pair<InterventionSpec, std::vector<std::size_t>>> batches;
    for (const auto& [attr, idx] : groups) {
        InterventionSpec plan = plan_for(attr);
        auto it = std::find_if(batches.begin(), batches.end(), [&](const auto& b) { return b.first == plan; });
        if (it == batches.end()) batches.push_back({plan, idx});
        else it->second.insert(it->second.end(), idx.begin(), idx.end());
    }
    for (auto& [plan, idx] : batches) {
        std::sort(idx.begin(), idx.end());
        std::vector<TokenIds> toks;
        std::vector<std::uint64_t> seeds;
        for (auto i : idx) {
            toks.push_back(prompts[i].tokens);
            seeds.push_back(prompt_seed(seed, i));
        }
        auto imgs = sample_batch(w, toks, seeds, sc, plan);
        for (std::size_t j = 0; j < idx.size(); ++j) images[idx[j]] = std::move(imgs[j]);
    }
    return images;
}

struct ProbeSettings {
    std::vector<ProbeOp> ops{ProbeOp::remove, ProbeOp::disable, ProbeOp::enhance};
    float lambda = 2.f;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::size_t prompts_per_attribute = 30;
    std::vector<std::size_t> blocks;  // empty: every block
    std::string model = "model";
};

// One (attribute, op, block, seed) measurement.
struct ProbeCell {
    Attribute attribute = Attribute::color;
    ProbeOp op = ProbeOp::none;
    std::optional<std::size_t> block;
    std::optional<float> lambda;
    std::uint64_t seed = 0;
    std::size_t prompts = 0;
    double accuracy = 0;
    double mse = 0;
    double cosine = 0;
};

// One aggregated CSV row (mean over seeds).
struct ReportRow {
    std::string model;
    std::string attribute;
    std::string op;
    std::optional<std::size_t> block;  // empty for baseline rows
    std::optional<double> lambda;      // enhance rows only
    std::size_t seed_count = 0;
    double accuracy = 0;
    double mse_vs_base = 0;
    double cos_vs_base = 0;

    friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct ProbeReport {
    std::vector<ReportRow> rows;
    std::vector<ProbeCell> cells;  // per seed; empty for reports read from disk
};

// Mean over seeds per (attribute, op, block, λ) in the order the cells
// first appear.
inline std::vector<ReportRow> aggregate_cells(const std::vector<ProbeCell>& cells, const std::string& model) {
    using Key = std::tuple<int, int, long long, float>;
    std::vector<Key> order;
    std::map<Key, std::vector<const ProbeCell*>> by_key;
    for (const auto& c : cells) {
        Key k{int(c.attribute), int(c.op), c.block ? (long long)*c.block : -1LL, c.lambda.value_or(0.f)};
        if (!by_key.count(k)) order.push_back(k);
        by_key[k].push_back(&c);
    }
    std::vector<ReportRow> rows;
    for (const auto& k : order) {
        const auto& group = by_key[k];
        ReportRow r;
        r.model = model;
        r.attribute = attribute_name(group.front()->attribute);
        r.op = op_name(group.front()->op);
        r.block = group.front()->block;
        if (group.front()->lambda) r.lambda = *group.front()->lambda;
        r.seed_count = group.size();
        for (const auto* c : group) {
            r.accuracy += c->accuracy;
            r.mse_vs_base += c->mse;
            r.cos_vs_base += c->cosine;
        }
        r.accuracy /= double(group.size());
        r.mse_vs_base /= double(group.size());
        r.cos_vs_base /= double(group.size());
        rows.push_back(r);
    }
    return rows;
}

// Scores images against prompts and per-prompt baselines, one cell per attribute.
inline std::vector<ProbeCell> score_cells(const std::vector<ProbePrompt>& prompts, const std::vector<Image>& images,
                                          const std::vector<Image>& baseline, ProbeOp op,
                                          std::optional<std::size_t> block, std::optional<float> lambda,
                                          std::uint64_t seed) {
    std::vector<ProbeCell> cells;
    for (auto a : {Attribute::color, Attribute::spatial, Attribute::amount, Attribute::other}) {
        ProbeCell c{a, op, block, lambda, seed, 0, 0, 0, 0};
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            if (prompts[i].attribute != a) continue;
            ++c.prompts;
            c.accuracy += attribute_correct(a, check_image(images[i], prompts[i].tokens)) ? 1.0 : 0.0;
            const Similarity s = similarity(images[i], baseline[i]);
            c.mse += s.mse;
            c.cosine += s.cosine;
        }
        if (!c.prompts) continue;
        c.accuracy /= double(c.prompts);
        c.mse /= double(c.prompts);
        c.cosine /= double(c.prompts);
        cells.push_back(c);
    }
    return cells;
}

// Full sweep. Work units are (seed) baselines followed by (op, block, seed)
// cells; each unit writes its own slot so the report is independent of the
// worker schedule.
inline ProbeReport sweep(const ModelWeights& w, const std::vector<ProbePrompt>& prompts, const ProbeSettings& st,
                         const SamplerConfig& sc, std::size_t jobs = 1,
                         const std::function<void(const std::string&)>& log = {}) {
    if (st.seeds.empty()) throw InputError("probe sweep needs at least one seed");
    if (prompts.empty()) throw InputError("probe sweep needs at least one prompt");
    check_sampler(sc);
    std::vector<std::size_t> blocks = st.blocks;
    if (blocks.empty())
        for (std::size_t l = 0; l < w.config.depth; ++l) blocks.push_back(l);
    for (auto op : st.ops) {
        if (op == ProbeOp::none) throw InputError("'none' is implied by the baseline, not a sweep op");
        for (auto b : blocks) for (auto a : kProbeAttributes) validate(probe_plan(op, b, st.lambda, a), w.config);
    }

    const std::size_t S = st.seeds.size();
    std::vector<std::vector<Image>> base(S);
    parallel_for(S, jobs, [&](std::size_t s) {
        base[s] = sample_prompts(w, prompts, st.seeds[s], sc, [](Attribute) { return InterventionSpec{}; });
    });
    if (log) log("baselines done for " + std::to_string(S) + " seed(s)");

    struct Unit {
        ProbeOp op;
        std::size_t block;
        std::size_t seed_index;
    };
    std::vector<Unit> units;
    for (auto op : st.ops)
        for (auto b : blocks)
            for (std::size_t s = 0; s < S; ++s) units.push_back({op, b, s});
    std::vector<std::vector<ProbeCell>> results(units.size());
    std::atomic<std::size_t> done{0};
    parallel_for(units.size(), jobs, [&](std::size_t u) {
        const Unit& un = units[u];
        const auto images = sample_prompts(w, prompts, st.seeds[un.seed_index], sc,
                                           [&](Attribute a) { return probe_plan(un.op, un.block, st.lambda, a); });
        const auto lambda = un.op == ProbeOp::enhance ? std::optional<float>(st.lambda) : std::nullopt;
        results[u] = score_cells(prompts, images, base[un.seed_index], un.op, un.block, lambda,
                                 st.seeds[un.seed_index]);
        const std::size_t n = ++done;
        if (log && (n % 10 == 0 || n == units.size()))
            log(std::to_string(n) + "/" + std::to_string(units.size()) + " cells");
    });

    ProbeReport report;
    for (std::size_t s = 0; s < S; ++s) {
        auto cells = score_cells(prompts, base[s], base[s], ProbeOp::none, std::nullopt, std::nullopt, st.seeds[s]);
        report.cells.insert(report.cells.end(), cells.begin(), cells.end());
    }
    for (auto& r : results) report.cells.insert(report.cells.end(), r.begin(), r.end());
    // Canonical order: attribute, then baseline, then ops / blocks as swept.
    std::stable_sort(report.cells.begin(), report.cells.end(),
                     [](const ProbeCell& a, const ProbeCell& b) { return int(a.attribute) < int(b.attribute); });
    report.rows = aggregate_cells(report.cells, st.model);
    return report;
}

// ---------------------------------------------------------------------------
// report CSV

inline constexpr const char* kReportHeader =
    "model,attribute,op,block,lambda,seed_count,accuracy,mse_vs_base,cos_vs_base";

inline std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string report_csv(const ProbeReport& r) {
    std::string out = std::string(kReportHeader) + "\n";
    for (const auto& row : r.rows) {
        if (row.model.find_first_of(",\"\n") != std::string::npos)
            throw InputError("model name '" + row.model + "' cannot contain commas, quotes or newlines");
        out += row.model + "," + row.attribute + "," + row.op + ",";
        out += (row.block ? std::to_string(*row.block) : "") + ",";
        out += (row.lambda ? format_number(*row.lambda) : "") + ",";
        out += std::to_string(row.seed_count) + "," + format_number(row.accuracy) + "," +
               format_number(row.mse_vs_base) + "," + format_number(row.cos_vs_base) + "\n";
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw InputError("failed writing '" + path + "'");
}

inline void write_report(const ProbeReport& r, const std::string& path) { write_text_file(path, report_csv(r)); }

inline ProbeReport parse_report(const std::string& text, const std::string& source = "report") {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) {
        return ParseError(source + ": line " + std::to_string(lineno) + ": " + why);
    };
    ++lineno;
    if (!std::getline(in, line)) throw fail("missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kReportHeader) throw fail("unexpected header '" + line + "'");
    ProbeReport r;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (std::size_t p; (p = line.find(',', start)) != std::string::npos; start = p + 1)
            f.push_back(line.substr(start, p - start));
        f.push_back(line.substr(start));
        if (f.size() != 9) throw fail("expected 9 fields, got " + std::to_string(f.size()));
        auto number = [&](const std::string& s, const char* what) {
            std::size_t used = 0;
            double v = 0;
            try {
                v = std::stod(s, &used);
            } catch (const std::exception&) {
                throw fail(std::string("bad ") + what + " '" + s + "'");
            }
            if (used != s.size() || !std::isfinite(v)) throw fail(std::string("bad ") + what + " '" + s + "'");
            return v;
        };
        auto count = [&](const std::string& s, const char* what) {
            if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
                throw fail(std::string("bad ") + what + " '" + s + "'");
            return static_cast<std::size_t>(std::stoull(s));
        };
        ReportRow row;
        row.model = f[0];
        row.attribute = f[1];
        row.op = f[2];
        try {
            attribute_from_name(row.attribute);
            op_from_name(row.op);
        } catch (const InputError& e) {
            throw fail(e.what());
        }
        if (!f[3].empty()) row.block = count(f[3], "block");
        if (!f[4].empty()) row.lambda = number(f[4], "lambda");
        row.seed_count = count(f[5], "seed_count");
        row.accuracy = number(f[6], "accuracy");
        row.mse_vs_base = number(f[7], "mse_vs_base");
        row.cos_vs_base = number(f[8], "cos_vs_base");
        if (row.op == "none" && row.block) throw fail("baseline rows take no block");
        if (row.op != "none" && !row.block) throw fail("op '" + row.op + "' needs a block");
        r.rows.push_back(row);
    }
    return r;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline ProbeReport read_report(const std::string& path) { return parse_report(read_text_file(path), path); }

// ---------------------------------------------------------------------------
// block selection

struct BlockSelection {
    Attribute attribute = Attribute::color;
    std::vector<std::size_t> blocks;
};

// Enhance-minus-baseline accuracy per block for one attribute (nullopt where
// no enhance row exists).
inline std::vector<std::optional<double>> enhance_deltas(const ProbeReport& report, Attribute attribute,
                                                         std::size_t depth, std::optional<double> lambda = {}) {
    const std::string name = attribute_name(attribute);
    std::optional<double> base;
    std::set<double> lambdas;
    for (const auto& r : report.rows) {
        if (r.attribute != name) continue;
        if (r.op == "none") base = r.accuracy;
        if (r.op == "enhance" && r.lambda) lambdas.insert(*r.lambda);
    }
    if (!base) throw SelectionError("report has no baseline row for attribute '" + name + "'");
    if (lambdas.empty()) throw SelectionError("report has no enhance rows for attribute '" + name + "'");
    if (!lambda) {
        if (lambdas.size() > 1) throw SelectionError("report mixes several enhance lambdas; pick one");
        lambda = *lambdas.begin();
    }
    std::vector<std::optional<double>> delta(depth);
    for (const auto& r : report.rows) {
        if (r.attribute != name || r.op != "enhance" || !r.lambda || *r.lambda != *lambda) continue;
        if (*r.block >= depth)
            throw SelectionError("report block " + std::to_string(*r.block) + " >= depth " + std::to_string(depth));
        delta[*r.block] = r.accuracy - *base;
    }
    return delta;
}

// θ = max(0, max Δ / 2); candidates Δ > θ. One pick per equal-width stratum
// (max Δ, ties to the lower index); pairs closer than min_gap lose their
// lower-Δ member, which is replaced by the next-best candidate of its
// stratum when one fits. Free slots are then filled from the remaining
// candidates by descending Δ, again respecting min_gap.
inline std::vector<std::size_t> select_from_deltas(const std::vector<std::optional<double>>& delta, std::size_t k,
                                                   std::size_t min_gap) {
    if (k < 1) throw InputError("select_blocks: k must be >= 1");
    const std::size_t L = delta.size();
    double max_delta = -1e300;
    for (const auto& d : delta)
        if (d) max_delta = std::max(max_delta, *d);
    if (!(max_delta > 0)) throw SelectionError("attribute shows no enhanceable blocks");
    const double theta = std::max(0.0, 0.5 * max_delta);
    auto better = [&](std::size_t a, std::size_t b) {
        return *delta[a] != *delta[b] ? *delta[a] > *delta[b] : a < b;
    };
    std::vector<std::size_t> ranked;
    for (std::size_t l = 0; l < L; ++l)
        if (delta[l] && *delta[l] > theta) ranked.push_back(l);
    std::sort(ranked.begin(), ranked.end(), better);

    auto stratum_of = [&](std::size_t l) {
        for (std::size_t s = 0; s < k; ++s)
            if (l < (s + 1) * L / k) return s;
        return k - 1;
    };
    std::vector<std::vector<std::size_t>> queue(k);  // per stratum, best first
    for (auto l : ranked) queue[stratum_of(l)].push_back(l);
    std::vector<std::optional<std::size_t>> pick(k);
    std::vector<std::size_t> next(k, 0);
    for (std::size_t s = 0; s < k; ++s)
        if (!queue[s].empty()) pick[s] = queue[s][next[s]++];

    auto gap_ok = [&](std::size_t l, std::optional<std::size_t> skip_stratum) {
        for (std::size_t s = 0; s < k; ++s) {
            if (!pick[s] || (skip_stratum && s == *skip_stratum)) continue;
            const std::size_t o = *pick[s];
            if ((l > o ? l - o : o - l) < min_gap) return false;
        }
        return true;
    };
    for (bool changed = true; changed;) {
        changed = false;
        // closest violating pair, leftmost first
        std::optional<std::pair<std::size_t, std::size_t>> worst;
        std::size_t worst_gap = min_gap;
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = a + 1; b < k; ++b) {
                if (!pick[a] || !pick[b]) continue;
                const std::size_t g = *pick[a] > *pick[b] ? *pick[a] - *pick[b] : *pick[b] - *pick[a];
                if (g < worst_gap) {
                    worst_gap = g;
                    worst = {a, b};
                }
            }
        if (!worst) break;
        const auto [a, b] = *worst;
        const std::size_t drop = better(*pick[a], *pick[b]) ? b : a;
        pick[drop].reset();
        while (next[drop] < queue[drop].size()) {
            const std::size_t cand = queue[drop][next[drop]++];
            if (gap_ok(cand, drop)) {
                pick[drop] = cand;
                break;
            }
        }
        changed = true;
    }
    std::vector<std::size_t> chosen;
    for (const auto& p : pick)
        if (p) chosen.push_back(*p);
    for (auto l : ranked) {
        if (chosen.size() >= k) break;
        if (std::find(chosen.begin(), chosen.end(), l) != chosen.end()) continue;
        bool fits = true;
        for (auto c : chosen) fits = fits && (l > c ? l - c : c - l) >= min_gap;
        if (fits) chosen.push_back(l);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

inline BlockSelection select_blocks(const ProbeReport& report, Attribute attribute, std::size_t k, std::size_t min_gap,
                                    std::size_t depth, std::optional<double> lambda = {}) {
    return {attribute, select_from_deltas(enhance_deltas(report, attribute, depth, lambda), k, min_gap)};
}

// ---------------------------------------------------------------------------
// SVG plot

struct PlotFrame {
    static constexpr double width = 800, height = 400;
    static constexpr double left = 60, right = 780, top = 20, bottom = 350;

    std::size_t max_block = 1;

    double x(double block) const { return left + (right - left) * block / double(std::max<std::size_t>(max_block, 1)); }
    double y(double accuracy) const { return bottom - (bottom - top) * accuracy; }
};

inline std::string plot_svg(const ProbeReport& report) {
    if (report.rows.empty()) throw InputError("cannot plot an empty report");
    PlotFrame fr;
    fr.max_block = 0;
    for (const auto& r : report.rows)
        if (r.block) fr.max_block = std::max(fr.max_block, *r.block);
    auto num = [](double v) { return format_number(std::round(v * 100.0) / 100.0); };
    static const std::map<std::string, std::string> colors = {
        {"remove", "#1f77b4"}, {"disable", "#d62728"}, {"enhance", "#2ca02c"}, {"none", "#555555"}};
    std::vector<std::string> attrs;
    for (const auto& r : report.rows)
        if (std::find(attrs.begin(), attrs.end(), r.attribute) == attrs.end()) attrs.push_back(r.attribute);

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"400\" viewBox=\"0 0 800 400\">\n";
    s << "<rect x=\"0\" y=\"0\" width=\"800\" height=\"400\" fill=\"white\"/>\n";
    s << "<line class=\"axis\" x1=\"" << num(fr.left) << "\" y1=\"" << num(fr.bottom) << "\" x2=\"" << num(fr.right)
      << "\" y2=\"" << num(fr.bottom) << "\" stroke=\"black\"/>\n";
    s << "<line class=\"axis\" x1=\"" << num(fr.left) << "\" y1=\"" << num(fr.top) << "\" x2=\"" << num(fr.left)
      << "\" y2=\"" << num(fr.bottom) << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double acc = i / 4.0;
        s << "<text x=\"" << num(fr.left - 8) << "\" y=\"" << num(fr.y(acc) + 4)
          << "\" font-size=\"11\" text-anchor=\"end\">" << format_number(acc) << "</text>\n";
    }
    for (std::size_t b = 0; b <= fr.max_block; ++b)
        s << "<text x=\"" << num(fr.x(double(b))) << "\" y=\"" << num(fr.bottom + 16)
          << "\" font-size=\"11\" text-anchor=\"middle\">" << b << "</text>\n";
    s << "<text class=\"xlabel\" x=\"420\" y=\"392\" font-size=\"13\" text-anchor=\"middle\">block</text>\n";
    s << "<text class=\"ylabel\" x=\"16\" y=\"185\" font-size=\"13\" text-anchor=\"middle\" "
         "transform=\"rotate(-90 16 185)\">accuracy</text>\n";

    int legend = 0;
    for (std::size_t ai = 0; ai < attrs.size(); ++ai) {
        const std::string& attr = attrs[ai];
        const std::string dash = ai == 0 ? "" : (ai == 1 ? " stroke-dasharray=\"6 3\"" : " stroke-dasharray=\"2 3\"");
        for (const auto& r : report.rows) {
            if (r.attribute != attr || r.op != "none") continue;
            s << "<line class=\"baseline\" data-attribute=\"" << attr << "\" x1=\"" << num(fr.left) << "\" y1=\""
              << num(fr.y(r.accuracy)) << "\" x2=\"" << num(fr.right) << "\" y2=\"" << num(fr.y(r.accuracy))
              << "\" stroke=\"#555555\"" << dash << "/>\n";
        }
        std::vector<std::string> ops;
        for (const auto& r : report.rows)
            if (r.attribute == attr && r.op != "none" && std::find(ops.begin(), ops.end(), r.op) == ops.end())
                ops.push_back(r.op);
        for (const auto& op : ops) {
            std::vector<const ReportRow*> pts;
            for (const auto& r : report.rows)
                if (r.attribute == attr && r.op == op) pts.push_back(&r);
            std::stable_sort(pts.begin(), pts.end(), [](auto* a, auto* b) { return *a->block < *b->block; });
            s << "<polyline class=\"series\" data-attribute=\"" << attr << "\" data-op=\"" << op
              << "\" fill=\"none\" stroke=\"" << colors.at(op) << "\"" << dash << " points=\"";
            for (std::size_t i = 0; i < pts.size(); ++i)
                s << (i ? " " : "") << num(fr.x(double(*pts[i]->block))) << "," << num(fr.y(pts[i]->accuracy));
            s << "\"/>\n";
            s << "<text x=\"690\" y=\"" << 34 + 14 * legend++ << "\" font-size=\"11\" fill=\"" << colors.at(op)
              << "\">" << attr << " " << op << "</text>\n";
        }
    }
    s << "</svg>\n";
    return s.str();
}

inline void plot_report(const ProbeReport& report, const std::string& path) {
    write_text_file(path, plot_svg(report));
}

}  // namespace mmdit
