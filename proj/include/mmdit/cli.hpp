#pragma once

// Command-line driver: train / generate / probe / select-blocks / edit /
// bench / plot over one JSON run configuration.
//
// Exit status: 0 success, 1 input or configuration error, 2 runtime or
// numeric failure. Log lines go to stderr prefixed with the subcommand.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmdit/bench.hpp"
#include "mmdit/checkpoint.hpp"
#include "mmdit/editing.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/grammar.hpp"
#include "mmdit/parallel.hpp"
#include "mmdit/probe.hpp"
#include "mmdit/trainer.hpp"

namespace mmdit {

namespace fs = std::filesystem;

struct RunConfig {
    ModelConfig model;
    std::string model_name = "model";
    fs::path checkpoint = "model.mmdp";
    fs::path out_dir = "out";
    fs::path report;  // empty: <out_dir>/report.csv
    SamplerConfig sampler;
    TrainConfig train;
    EvalSettings eval;
    ProbeSettings probe;
    float deploy_lambda = 1.5f;
    float tau = 1.f;
    std::size_t select_k = 3;
    std::size_t select_min_gap = 2;
    std::size_t bench_reps = 3;
    std::size_t bench_prompts = 4;  // per attribute
    std::map<Attribute, std::vector<std::size_t>> blocks;  // selection overrides

    fs::path report_path() const { return report.empty() ? out_dir / "report.csv" : report; }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw InputError(where + " must be an object");
    for (const auto& [k, _] : j.items()) {
        bool ok = false;
        for (const char* name : keys) ok |= (k == name);
        if (!ok) throw InputError(where + ": unknown key '" + k + "'");
    }
}

template <class T>
T get_as(const nlohmann::json& j, const std::string& where) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw InputError(where + ": wrong value type");
    }
}

inline std::size_t get_count(const nlohmann::json& j, const std::string& where) {
    if (!j.is_number_integer() || j.get<long long>() < 0) throw InputError(where + " must be a non-negative integer");
    return j.get<std::size_t>();
}

inline double get_real(const nlohmann::json& j, const std::string& where) {
    if (!j.is_number()) throw InputError(where + " must be a number");
    return j.get<double>();
}

inline std::vector<std::size_t> get_blocks(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array()) throw InputError(where + " must be an array");
    std::vector<std::size_t> out;
    for (const auto& v : j) out.push_back(get_count(v, where));
    return out;
}

}  // namespace detail

// Relative paths in the document resolve against `base` (the config's directory).
inline RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base = {}) {
    using namespace detail;
    check_keys(j, "config", {"model", "model_name", "checkpoint", "out_dir", "report", "sampler", "train", "probe",
                             "deploy_lambda", "tau", "select", "bench", "blocks"});
    RunConfig rc;
    auto path = [&](const nlohmann::json& v, const char* what) {
        if (!v.is_string()) throw InputError(std::string("config: '") + what + "' must be a string");
        fs::path p = v.get<std::string>();
        return p.is_absolute() ? p : base / p;
    };
    if (j.contains("model")) rc.model = config_from_json(j["model"]);
    if (j.contains("model_name")) rc.model_name = get_as<std::string>(j["model_name"], "config: model_name");
    if (j.contains("checkpoint")) rc.checkpoint = path(j["checkpoint"], "checkpoint");
    else rc.checkpoint = base / rc.checkpoint;
    if (j.contains("out_dir")) rc.out_dir = path(j["out_dir"], "out_dir");
    else rc.out_dir = base / rc.out_dir;
    if (j.contains("report")) rc.report = path(j["report"], "report");
    if (j.contains("sampler")) {
        const auto& s = j["sampler"];
        check_keys(s, "sampler", {"steps", "cfg"});
        if (s.contains("steps")) rc.sampler.steps = get_count(s["steps"], "sampler.steps");
        if (s.contains("cfg")) rc.sampler.cfg_scale = float(get_real(s["cfg"], "sampler.cfg"));
    }
    check_sampler(rc.sampler);
    if (j.contains("train")) {
        const auto& t = j["train"];
        check_keys(t, "train", {"steps", "batch", "lr", "cond_drop", "eval_every", "eval_prompts", "target_accuracy"});
        if (t.contains("steps")) rc.train.steps = get_count(t["steps"], "train.steps");
        if (t.contains("batch")) rc.train.batch = get_count(t["batch"], "train.batch");
        if (t.contains("lr")) rc.train.lr = get_real(t["lr"], "train.lr");
        if (t.contains("cond_drop")) rc.train.cond_drop = get_real(t["cond_drop"], "train.cond_drop");
        if (t.contains("eval_every")) rc.eval.every = get_count(t["eval_every"], "train.eval_every");
        if (t.contains("eval_prompts")) rc.eval.prompts = get_count(t["eval_prompts"], "train.eval_prompts");
        if (t.contains("target_accuracy")) rc.eval.target = get_real(t["target_accuracy"], "train.target_accuracy");
    }
    if (!(rc.train.lr > 0)) throw InputError("train.lr must be positive");
    if (!(rc.train.cond_drop >= 0 && rc.train.cond_drop < 1)) throw InputError("train.cond_drop must be in [0, 1)");
    if (rc.train.batch < 1) throw InputError("train.batch must be >= 1");
    if (rc.eval.every && rc.eval.prompts < 1) throw InputError("train.eval_prompts must be >= 1");
    if (j.contains("probe")) {
        const auto& p = j["probe"];
        check_keys(p, "probe", {"ops", "lambda", "seeds", "prompts_per_attribute", "blocks"});
        if (p.contains("ops")) {
            if (!p["ops"].is_array()) throw InputError("probe.ops must be an array");
            rc.probe.ops.clear();
            for (const auto& o : p["ops"]) {
                const ProbeOp op = op_from_name(get_as<std::string>(o, "probe.ops"));
                if (op == ProbeOp::none) throw InputError("probe.ops: 'none' is implied by the baseline");
                rc.probe.ops.push_back(op);
            }
        }
        if (p.contains("lambda")) rc.probe.lambda = float(get_real(p["lambda"], "probe.lambda"));
        if (p.contains("seeds")) {
            if (!p["seeds"].is_array() || p["seeds"].empty()) throw InputError("probe.seeds must be a non-empty array");
            rc.probe.seeds.clear();
            for (const auto& s : p["seeds"]) rc.probe.seeds.push_back(get_count(s, "probe.seeds"));
        }
        if (p.contains("prompts_per_attribute"))
            rc.probe.prompts_per_attribute = get_count(p["prompts_per_attribute"], "probe.prompts_per_attribute");
        if (p.contains("blocks")) rc.probe.blocks = get_blocks(p["blocks"], "probe.blocks");
    }
    if (rc.probe.prompts_per_attribute < 1) throw InputError("probe.prompts_per_attribute must be >= 1");
    rc.probe.model = rc.model_name;
    if (j.contains("deploy_lambda")) rc.deploy_lambda = float(get_real(j["deploy_lambda"], "deploy_lambda"));
    if (j.contains("tau")) rc.tau = float(get_real(j["tau"], "tau"));
    if (j.contains("select")) {
        const auto& s = j["select"];
        check_keys(s, "select", {"k", "min_gap"});
        if (s.contains("k")) rc.select_k = get_count(s["k"], "select.k");
        if (s.contains("min_gap")) rc.select_min_gap = get_count(s["min_gap"], "select.min_gap");
    }
    if (j.contains("bench")) {
        const auto& b = j["bench"];
        check_keys(b, "bench", {"reps", "prompts_per_attribute"});
        if (b.contains("reps")) rc.bench_reps = get_count(b["reps"], "bench.reps");
        if (b.contains("prompts_per_attribute"))
            rc.bench_prompts = get_count(b["prompts_per_attribute"], "bench.prompts_per_attribute");
    }
    if (j.contains("blocks")) {
        if (!j["blocks"].is_object()) throw InputError("blocks must be an object");
        for (const auto& [name, v] : j["blocks"].items()) {
            const Attribute a = attribute_from_name(name);
            auto bl = get_blocks(v, "blocks." + name);
            for (std::size_t i = 0; i < bl.size(); ++i) {
                if (bl[i] >= rc.model.depth)
                    throw InputError("blocks." + name + ": block " + std::to_string(bl[i]) + " >= depth " +
                                     std::to_string(rc.model.depth));
                if (i && bl[i] <= bl[i - 1]) throw InputError("blocks." + name + " must be strictly increasing");
            }
            rc.blocks[a] = bl;
        }
    }
    rc.eval.sampler = rc.sampler;
    return rc;
}

inline RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("config '" + path.string() + "': " + e.what());
    }
    return run_config_from_json(j, path.parent_path());
}

// "3,9,15" or "3 9 15".
inline std::vector<std::size_t> parse_index_list(const std::string& s, const std::string& what) {
    std::vector<std::size_t> out;
    std::string tok;
    std::istringstream in(s);
    for (char c; in.get(c);) {
        if (c == ',' || c == ' ') {
            if (!tok.empty()) out.push_back(std::stoull(tok)), tok.clear();
        } else if (c >= '0' && c <= '9') {
            tok += c;
        } else {
            throw InputError(what + ": expected comma-separated indices, got '" + s + "'");
        }
    }
    if (!tok.empty()) out.push_back(std::stoull(tok));
    return out;
}

inline std::string join_indices(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

struct EditSpec {
    std::string src, tgt;
    Attribute attribute = Attribute::color;
    std::optional<float> lambda;
    std::optional<float> tau;
    std::optional<std::uint64_t> seed;
};

inline EditSpec edit_spec_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "edit spec", {"src", "tgt", "attribute", "lambda", "tau", "seed"});
    if (!j.contains("src") || !j.contains("tgt")) throw InputError("edit spec needs 'src' and 'tgt'");
    EditSpec e;
    e.src = detail::get_as<std::string>(j["src"], "edit spec: src");
    e.tgt = detail::get_as<std::string>(j["tgt"], "edit spec: tgt");
    if (j.contains("attribute")) e.attribute = attribute_from_name(detail::get_as<std::string>(j["attribute"], "edit spec: attribute"));
    if (j.contains("lambda")) e.lambda = float(detail::get_real(j["lambda"], "edit spec: lambda"));
    if (j.contains("tau")) e.tau = float(detail::get_real(j["tau"], "edit spec: tau"));
    if (j.contains("seed")) e.seed = detail::get_count(j["seed"], "edit spec: seed");
    return e;
}

namespace detail {

struct Cli {
    std::string config_path;
    std::uint64_t seed = 0;
    std::size_t jobs = default_jobs();
    std::string out;
    std::string prompt;
    std::string attribute;
    double lambda = 0;
    std::string mask;
    std::string skip;
    std::size_t k = 0;
    std::size_t min_gap = 0;
    std::size_t steps = 0;
    double cfg = 0;
    double tau = 0;
    std::string edit_spec;
};

class Runner {
public:
    Runner(const std::string& sub, const Cli& cli, const CLI::App& app, std::ostream& out, std::ostream& err)
        : sub_(sub), cli_(cli), app_(app), out_(out), err_(err) {
        rc_ = load_run_config(cli.config_path);
        if (given("--out")) rc_.out_dir = cli.out;
        if (given("--steps") && sub != "train") rc_.sampler.steps = cli.steps;
        if (given("--cfg")) rc_.sampler.cfg_scale = float(cli.cfg);
        check_sampler(rc_.sampler);
        rc_.eval.sampler = rc_.sampler;
    }

    void log(const std::string& msg) const { err_ << sub_ << ": " << msg << "\n"; }

    int dispatch() {
        if (sub_ == "train") return train();
        if (sub_ == "generate") return generate();
        if (sub_ == "probe") return probe();
        if (sub_ == "select-blocks") return select();
        if (sub_ == "edit") return edit_cmd();
        if (sub_ == "bench") return bench_cmd();
        if (sub_ == "plot") return plot();
        throw InputError("unknown subcommand '" + sub_ + "'");
    }

private:
    bool given(const std::string& flag) const {
        const CLI::App* s = app_.get_subcommand(sub_);
        const CLI::Option* o = s->get_option_no_throw(flag);
        return o != nullptr && o->count() > 0;
    }

    void ensure_out_dir() const { fs::create_directories(rc_.out_dir); }

    ModelWeights load_model() const {
        ModelWeights w = read_checkpoint(rc_.checkpoint.string());
        if (!(w.config == rc_.model))
            throw InputError("checkpoint '" + rc_.checkpoint.string() + "' was trained with a different model config");
        return w;
    }

    // Injection / enhancement blocks for an attribute: config override, else
    // selection from the probe report.
    std::vector<std::size_t> blocks_for(Attribute a) const {
        if (auto it = rc_.blocks.find(a); it != rc_.blocks.end()) return it->second;
        const ProbeReport report = read_report(rc_.report_path().string());
        return select_blocks(report, a, rc_.select_k, rc_.select_min_gap, rc_.model.depth).blocks;
    }

    std::optional<std::vector<std::size_t>> mask_for(std::optional<Attribute> a) const {
        if (given("--mask")) return parse_index_list(cli_.mask, "--mask");
        if (a) return attribute_mask(*a);
        return std::nullopt;
    }

    int train() {
        TrainConfig tc = rc_.train;
        tc.seed = cli_.seed;
        if (given("--steps")) tc.steps = cli_.steps;
        ModelWeights w = init_weights(rc_.model, cli_.seed);
        ensure_out_dir();
        if (rc_.checkpoint.has_parent_path()) fs::create_directories(rc_.checkpoint.parent_path());
        log("training " + std::to_string(parameter_count(w)) + " parameters for up to " + std::to_string(tc.steps) +
            " steps");
        const TrainLog tl = train_on_grammar(w, tc, rc_.eval, [&](const std::string& m) { log(m); });
        write_checkpoint(w, rc_.checkpoint.string());
        write_text_file((rc_.out_dir / "loss.csv").string(), loss_csv(tl.losses));
        log("wrote " + rc_.checkpoint.string() + " after " + std::to_string(tl.steps) + " steps");
        return 0;
    }

    int generate() {
        if (!given("--prompt")) throw InputError("generate needs --prompt");
        const TokenIds tokens = tokenize_text(cli_.prompt);
        ModelWeights w = load_model();
        InterventionSpec plan;
        std::optional<Attribute> attr;
        if (given("--attribute")) attr = attribute_from_name(cli_.attribute);
        const float lambda = given("--lambda") ? float(cli_.lambda) : rc_.deploy_lambda;
        if (attr) plan = InterventionSpec::enhance_blocks(blocks_for(*attr), lambda, mask_for(attr));
        if (given("--skip"))
            for (auto b : parse_index_list(cli_.skip, "--skip")) plan.add(b, Action::skip());
        validate(plan, w.config);
        SamplerConfig sc = rc_.sampler;
        sc.seed = cli_.seed;
        const Image img = sample(w, tokens, sc, plan);
        ensure_out_dir();
        std::string name;
        for (char c : prompt_text(tokens)) name += c == ' ' ? '_' : c;
        const fs::path path = rc_.out_dir / (name + "_s" + std::to_string(cli_.seed) + ".ppm");
        write_ppm(img, path.string());
        log("wrote " + path.string() + (plan.empty() ? "" : " with plan " + plan_to_json(plan).dump()));
        return 0;
    }

    int probe() {
        ModelWeights w = load_model();
        ProbeSettings st = rc_.probe;
        for (auto b : st.blocks)
            if (b >= w.config.depth) throw InputError("probe.blocks: block " + std::to_string(b) + " out of range");
        const auto prompts = probe_prompts(st.prompts_per_attribute, cli_.seed);
        log("sweeping " + std::to_string(prompts.size()) + " prompts x " + std::to_string(st.seeds.size()) +
            " seeds on " + std::to_string(cli_.jobs) + " worker(s)");
        const ProbeReport r = sweep(w, prompts, st, rc_.sampler, cli_.jobs, [&](const std::string& m) { log(m); });
        ensure_out_dir();
        const fs::path path = rc_.report_path();
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        write_report(r, path.string());
        log("wrote " + path.string() + " (" + std::to_string(r.rows.size()) + " rows)");
        return 0;
    }

    int select() {
        if (!given("--attribute")) throw InputError("select-blocks needs --attribute");
        const Attribute a = attribute_from_name(cli_.attribute);
        const std::size_t k = given("--k") ? cli_.k : rc_.select_k;
        const std::size_t gap = given("--min-gap") ? cli_.min_gap : rc_.select_min_gap;
        const ProbeReport report = read_report(rc_.report_path().string());
        const BlockSelection sel = select_blocks(report, a, k, gap, rc_.model.depth);
        out_ << join_indices(sel.blocks) << "\n";
        return 0;
    }

    int edit_cmd() {
        if (cli_.edit_spec.empty()) throw InputError("edit needs an edit spec file");
        nlohmann::json j;
        {
            std::ifstream in(cli_.edit_spec);
            if (!in) throw InputError("cannot open edit spec '" + cli_.edit_spec + "'");
            try {
                j = nlohmann::json::parse(in);
            } catch (const nlohmann::json::exception& e) {
                throw InputError("edit spec: " + std::string(e.what()));
            }
        }
        const EditSpec spec = edit_spec_from_json(j);
        ModelWeights w = load_model();
        EditSession s;
        s.src_tokens = tokenize_text(spec.src);
        s.tgt_tokens = tokenize_text(spec.tgt);
        s.injection_blocks = blocks_for(spec.attribute);
        s.lambda = given("--lambda") ? float(cli_.lambda) : spec.lambda.value_or(rc_.deploy_lambda);
        s.mask = mask_for(spec.attribute);
        s.tau = given("--tau") ? float(cli_.tau) : spec.tau.value_or(rc_.tau);
        s.seed = given("--seed") ? cli_.seed : spec.seed.value_or(0);
        validate(s, w.config);
        const EditResult r = edit(w, s, rc_.sampler);
        ensure_out_dir();
        write_ppm(r.source, (rc_.out_dir / "edit_source.ppm").string());
        write_ppm(r.edited, (rc_.out_dir / "edit_target.ppm").string());
        const CheckResult c = check_image(r.edited, s.tgt_tokens);
        log("blocks " + join_indices(s.injection_blocks) + "; edited image " +
            (attribute_correct(spec.attribute, c) ? "passes" : "fails") + " the " + attribute_name(spec.attribute) +
            " check; mse vs source " + format_number(similarity(r.source, r.edited).mse));
        return 0;
    }

    int bench_cmd() {
        ModelWeights w = load_model();
        const std::vector<std::size_t> skip =
            given("--skip") ? parse_index_list(cli_.skip, "--skip") : middle_third(w.config.depth);
        check_skip(skip, w.config);
        BenchPrompts bp{probe_prompts(rc_.bench_prompts, cli_.seed), cli_.seed};
        const auto results = bench(w, bp, {skip}, rc_.sampler, rc_.bench_reps);
        ensure_out_dir();
        const fs::path path = rc_.out_dir / "bench.csv";
        append_bench_csv(path.string(), results);
        for (const auto& r : results)
            log("skip {" + join_indices(r.skip) + "}: " + std::to_string(r.flops) + " FLOPs/image, mean " +
                format_number(r.mean_s) + " s, mse " + format_number(r.mse) + ", accuracy " + format_number(r.accuracy));
        return 0;
    }

    int plot() {
        const ProbeReport report = read_report(rc_.report_path().string());
        const std::string svg = plot_svg(report);
        ensure_out_dir();
        const fs::path path = rc_.out_dir / "report.svg";
        write_text_file(path.string(), svg);
        log("wrote " + path.string());
        return 0;
    }

    std::string sub_;
    const Cli& cli_;
    const CLI::App& app_;
    std::ostream& out_;
    std::ostream& err_;
    RunConfig rc_;
};

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Toy multimodal diffusion transformer: training, probing, editing and block skipping", "mmdit"};
    detail::Cli cli;
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all");
    auto global = [&](CLI::App* s) {
        s->add_option("--config", cli.config_path, "run configuration (JSON)")->required();
        s->add_option("--seed", cli.seed, "seed (default 0)");
        s->add_option("--jobs", cli.jobs, "worker threads")->check(CLI::PositiveNumber);
        s->add_option("--out", cli.out, "output directory (overrides the config)");
        s->add_option("--steps", cli.steps, "sampling steps (training steps for train)")->check(CLI::PositiveNumber);
        s->add_option("--cfg", cli.cfg, "guidance scale")->check(CLI::NonNegativeNumber);
    };
    std::map<std::string, CLI::App*> subs;
    for (const char* name : {"train", "generate", "probe", "select-blocks", "edit", "bench", "plot"}) {
        subs[name] = app.add_subcommand(name);
        global(subs[name]);
    }
    subs["train"]->description("train a model on the synthetic grammar");
    subs["generate"]->description("sample one image");
    subs["probe"]->description("block-wise remove/disable/enhance sweep");
    subs["select-blocks"]->description("pick enhancement blocks from a probe report");
    subs["edit"]->description("paired source/target generation with K/V injection");
    subs["bench"]->description("time and score a block-skipping set");
    subs["plot"]->description("render a probe report as SVG");
    for (auto* s : {subs["generate"]}) {
        s->add_option("--prompt", cli.prompt, "prompt text, e.g. \"two red square\"");
        s->add_option("--skip", cli.skip, "blocks to skip, comma separated");
    }
    for (auto* s : {subs["generate"], subs["select-blocks"]})
        s->add_option("--attribute", cli.attribute, "color | spatial | amount | other");
    for (auto* s : {subs["generate"], subs["edit"]}) {
        s->add_option("--lambda", cli.lambda, "enhancement factor")->check(CLI::PositiveNumber);
        s->add_option("--mask", cli.mask, "text token positions to enhance, comma separated");
    }
    subs["select-blocks"]->add_option("-k,--k", cli.k, "blocks to select")->check(CLI::PositiveNumber);
    subs["select-blocks"]->add_option("--min-gap", cli.min_gap, "minimum distance between selected blocks");
    subs["edit"]->add_option("--tau", cli.tau, "fraction of steps with injection");
    subs["edit"]->add_option("spec", cli.edit_spec, "edit spec (JSON)")->required();
    subs["bench"]->add_option("--skip", cli.skip, "blocks to skip (default: middle third)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 1;
    }
    const std::string sub = app.get_subcommands().front()->get_name();
    try {
        detail::Runner r(sub, cli, app, out, err);
        return r.dispatch();
    } catch (const NumericError& e) {
        err << sub << ": error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        err << sub << ": error: " << e.what() << "\n";
        return 1;
    } catch (const fs::filesystem_error& e) {
        err << sub << ": error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << sub << ": error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace mmdit
