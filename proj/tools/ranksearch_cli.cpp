// ranksearch: rank-selection search for SVD-compressed layered models.
//
// Subcommands wire the library together behind a single JSON config:
//   sweep     single-layer sensitivity sweep -> CSV
//   search    policy-gradient rank search -> JSONL log + checkpoint + explored set
//   condense  proxy-dataset selection -> manifest JSON
//   topk      extract top-k from a log and pick the best on the holdout split
//   compress  apply a scheme and write the compressed weight file
//   eval      evaluate a weight file on a split
//   report    convert a search log to scatter CSV
//
// Exit codes: 0 ok, 2 config validation, 3 evaluator failure, 4 numerical
// failure, 5 empty result.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ranksearch/condense.hpp"
#include "ranksearch/controller.hpp"
#include "ranksearch/evaluator.hpp"
#include "ranksearch/lowrank.hpp"
#include "ranksearch/netmodel.hpp"
#include "ranksearch/reward.hpp"
#include "ranksearch/search.hpp"
#include "ranksearch/space.hpp"

namespace {

using nlohmann::json;
using namespace ranksearch;

void require_keys(const json& obj, const std::string& where,
                  const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "': " + e.what());
    }
}

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<int> steps;
    std::optional<double> target_speedup;
    std::optional<double> correl_min;
    std::optional<int> top_k;
    std::optional<std::string> log;
    std::optional<std::string> out;
    std::optional<std::string> split;
    std::optional<std::string> model;
    std::optional<std::string> scheme;
};

// Everything a command needs, resolved from config + flag overrides.
struct Run {
    std::string mode;
    std::uint64_t seed = 1;
    std::string out_dir = "out";

    std::string evaluator_kind = "builtin-toy";
    std::uint64_t profile_seed = 1;
    std::string external_command;
    double external_timeout_s = 3600.0;
    std::string condensed_manifest;

    std::string model_path;

    std::vector<double> default_energies = {0.999, 0.9, 0.8, 0.6, 0.4};
    std::map<std::string, std::vector<double>> layer_energies;

    // search
    double target_speedup = 0.0;
    bool have_target_speedup = false;
    std::string reward_mode = "conservative";
    int max_steps = 500;
    double learning_rate = 1e-3;
    int hidden = 100;
    int embed = 100;
    int top_k_n = 5;
    std::string proxy_split = "dev";
    std::string holdout_split = "test";
    bool use_reward_baseline = false;
    double baseline_decay = 0.9;
    double baseline_error_override = -1.0;

    // sweep
    std::vector<double> sweep_energies = {0.3, 0.5, 0.7, 0.9, 1.0};
    std::string sweep_split = "dev";

    // condense
    double correl_min = 0.95;
    int min_length = 0;
    int num_cohorts = 8;
    std::string statistic = "pearson";

    // compress / eval / report / topk
    Scheme compress_scheme;
    std::string artifact_out;
    std::string eval_split = "test";
    std::string log_path;
};

Scheme parse_scheme_string(const std::string& text) {
    Scheme scheme;
    std::string token;
    for (char c : text + ",") {
        if (c == ',') {
            if (!token.empty()) {
                try {
                    scheme.push_back(std::stoi(token));
                } catch (...) {
                    throw ConfigError("bad rank '" + token + "' in scheme");
                }
                token.clear();
            }
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            token += c;
        }
    }
    if (scheme.empty()) throw ConfigError("scheme must list at least one rank");
    return scheme;
}

Run resolve(const std::string& mode, const json& cfg, const Overrides& flags) {
    require_keys(cfg, "config",
                 {"mode", "seed", "out_dir", "evaluator", "model_path", "space", "search",
                  "sweep", "condense", "compress", "eval", "report", "topk"});
    Run run;
    run.mode = mode;
    if (cfg.contains("mode") && cfg.at("mode").get<std::string>() != mode)
        throw ConfigError("config mode '" + cfg.at("mode").get<std::string>() +
                          "' does not match subcommand '" + mode + "'");
    run.seed = get_or<std::uint64_t>(cfg, "seed", run.seed);
    run.out_dir = get_or<std::string>(cfg, "out_dir", run.out_dir);
    run.model_path = get_or<std::string>(cfg, "model_path", "");

    if (cfg.contains("evaluator")) {
        const json& ev = cfg.at("evaluator");
        require_keys(ev, "evaluator",
                     {"kind", "profile_seed", "command", "timeout_s", "condensed_manifest"});
        run.evaluator_kind = get_or<std::string>(ev, "kind", run.evaluator_kind);
        if (run.evaluator_kind != "builtin-toy" && run.evaluator_kind != "external")
            throw ConfigError("evaluator.kind must be builtin-toy or external");
        run.profile_seed = get_or<std::uint64_t>(ev, "profile_seed", run.profile_seed);
        run.external_command = get_or<std::string>(ev, "command", "");
        run.external_timeout_s = get_or<double>(ev, "timeout_s", run.external_timeout_s);
        run.condensed_manifest = get_or<std::string>(ev, "condensed_manifest", "");
        if (run.evaluator_kind == "external" && run.external_command.empty())
            throw ConfigError("external evaluator requires evaluator.command");
    }

    if (cfg.contains("space")) {
        const json& sp = cfg.at("space");
        require_keys(sp, "space", {"default_energies", "layer_energies"});
        run.default_energies =
            get_or<std::vector<double>>(sp, "default_energies", run.default_energies);
        if (sp.contains("layer_energies")) {
            if (!sp.at("layer_energies").is_object())
                throw ConfigError("space.layer_energies must map layer name -> energies");
            for (const auto& [name, energies] : sp.at("layer_energies").items())
                run.layer_energies[name] = energies.get<std::vector<double>>();
        }
    }

    if (cfg.contains("search")) {
        const json& se = cfg.at("search");
        require_keys(se, "search",
                     {"target_speedup", "reward_mode", "max_steps", "learning_rate", "hidden",
                      "embed", "top_k", "proxy_split", "holdout_split", "use_reward_baseline",
                      "baseline_decay", "baseline_error"});
        if (se.contains("target_speedup")) {
            run.target_speedup = se.at("target_speedup").get<double>();
            run.have_target_speedup = true;
        }
        run.reward_mode = get_or<std::string>(se, "reward_mode", run.reward_mode);
        run.max_steps = get_or<int>(se, "max_steps", run.max_steps);
        run.learning_rate = get_or<double>(se, "learning_rate", run.learning_rate);
        run.hidden = get_or<int>(se, "hidden", run.hidden);
        run.embed = get_or<int>(se, "embed", run.embed);
        run.top_k_n = get_or<int>(se, "top_k", run.top_k_n);
        run.proxy_split = get_or<std::string>(se, "proxy_split", run.proxy_split);
        run.holdout_split = get_or<std::string>(se, "holdout_split", run.holdout_split);
        run.use_reward_baseline = get_or<bool>(se, "use_reward_baseline", false);
        run.baseline_decay = get_or<double>(se, "baseline_decay", run.baseline_decay);
        run.baseline_error_override = get_or<double>(se, "baseline_error", -1.0);
    }

    if (cfg.contains("sweep")) {
        const json& sw = cfg.at("sweep");
        require_keys(sw, "sweep", {"energies", "split"});
        run.sweep_energies = get_or<std::vector<double>>(sw, "energies", run.sweep_energies);
        run.sweep_split = get_or<std::string>(sw, "split", run.sweep_split);
    }

    if (cfg.contains("condense")) {
        const json& co = cfg.at("condense");
        require_keys(co, "condense", {"correl_min", "min_length", "num_cohorts", "statistic"});
        run.correl_min = get_or<double>(co, "correl_min", run.correl_min);
        run.min_length = get_or<int>(co, "min_length", run.min_length);
        run.num_cohorts = get_or<int>(co, "num_cohorts", run.num_cohorts);
        run.statistic = get_or<std::string>(co, "statistic", run.statistic);
        if (run.statistic != "pearson" && run.statistic != "spearman")
            throw ConfigError("condense.statistic must be pearson or spearman");
    }

    if (cfg.contains("compress")) {
        const json& cm = cfg.at("compress");
        require_keys(cm, "compress", {"scheme", "out"});
        if (cm.contains("scheme")) run.compress_scheme = cm.at("scheme").get<Scheme>();
        run.artifact_out = get_or<std::string>(cm, "out", "");
    }

    if (cfg.contains("eval")) {
        const json& ev = cfg.at("eval");
        require_keys(ev, "eval", {"split", "model"});
        run.eval_split = get_or<std::string>(ev, "split", run.eval_split);
        if (ev.contains("model")) run.model_path = ev.at("model").get<std::string>();
    }

    if (cfg.contains("report")) {
        const json& re = cfg.at("report");
        require_keys(re, "report", {"log", "out"});
        run.log_path = get_or<std::string>(re, "log", run.log_path);
        if (re.contains("out")) run.artifact_out = re.at("out").get<std::string>();
    }

    if (cfg.contains("topk")) {
        const json& tk = cfg.at("topk");
        require_keys(tk, "topk", {"log", "k"});
        if (tk.contains("log")) run.log_path = tk.at("log").get<std::string>();
        run.top_k_n = get_or<int>(tk, "k", run.top_k_n);
    }

    // Flags override scalars; the resolved config is logged afterwards.
    if (flags.seed) run.seed = *flags.seed;
    if (flags.out_dir) run.out_dir = *flags.out_dir;
    if (flags.steps) run.max_steps = *flags.steps;
    if (flags.target_speedup) {
        run.target_speedup = *flags.target_speedup;
        run.have_target_speedup = true;
    }
    if (flags.correl_min) run.correl_min = *flags.correl_min;
    if (flags.top_k) run.top_k_n = *flags.top_k;
    if (flags.log) run.log_path = *flags.log;
    if (flags.out) run.artifact_out = *flags.out;
    if (flags.split) {
        run.sweep_split = *flags.split;
        run.eval_split = *flags.split;
        run.proxy_split = *flags.split;
    }
    if (flags.model) run.model_path = *flags.model;
    if (flags.scheme) run.compress_scheme = parse_scheme_string(*flags.scheme);
    return run;
}

nlohmann::ordered_json resolved_json(const Run& run) {
    nlohmann::ordered_json j;
    j["mode"] = run.mode;
    j["seed"] = run.seed;
    j["out_dir"] = run.out_dir;
    j["evaluator"] = {{"kind", run.evaluator_kind},
                      {"profile_seed", run.profile_seed},
                      {"command", run.external_command},
                      {"timeout_s", run.external_timeout_s},
                      {"condensed_manifest", run.condensed_manifest}};
    j["model_path"] = run.model_path;
    if (run.mode == "search") {
        j["search"] = {{"target_speedup", run.target_speedup},
                       {"reward_mode", run.reward_mode},
                       {"max_steps", run.max_steps},
                       {"learning_rate", run.learning_rate},
                       {"hidden", run.hidden},
                       {"embed", run.embed},
                       {"top_k", run.top_k_n},
                       {"proxy_split", run.proxy_split},
                       {"holdout_split", run.holdout_split},
                       {"use_reward_baseline", run.use_reward_baseline},
                       {"baseline_decay", run.baseline_decay}};
    } else if (run.mode == "sweep") {
        j["sweep"] = {{"energies", run.sweep_energies}, {"split", run.sweep_split}};
    } else if (run.mode == "condense") {
        j["condense"] = {{"correl_min", run.correl_min},
                         {"min_length", run.min_length},
                         {"num_cohorts", run.num_cohorts},
                         {"statistic", run.statistic}};
    }
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << text;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return text;
}

// Holds whichever evaluator the config asked for, plus the toy profile when
// the builtin one is in play.
struct EvaluatorBinding {
    std::optional<ToyProfile> profile;
    std::unique_ptr<ErrorEvaluator> evaluator;
    LayeredModel model;
};

EvaluatorBinding bind_evaluator(const Run& run, bool need_model = true) {
    EvaluatorBinding binding;
    if (run.evaluator_kind == "builtin-toy") {
        binding.profile = build_toy_profile(run.profile_seed);
        if (!run.condensed_manifest.empty()) {
            const json manifest = json::parse(read_text(run.condensed_manifest));
            binding.profile->set_condensed(manifest.at("selected").get<std::vector<int>>());
        }
        binding.evaluator = std::make_unique<ToyEvaluator>(*binding.profile);
        binding.model = run.model_path.empty() ? binding.profile->model
                                               : load_model(run.model_path);
    } else {
        std::filesystem::create_directories(run.out_dir);
        binding.evaluator = std::make_unique<ExternalEvaluator>(
            run.external_command, run.out_dir, run.external_timeout_s);
        if (need_model) {
            if (run.model_path.empty())
                throw ConfigError("external evaluator requires model_path");
            binding.model = load_model(run.model_path);
        }
    }
    return binding;
}

std::vector<std::vector<double>> energies_for(const Run& run, const LayeredModel& model) {
    std::set<std::string> searchable;
    for (std::size_t idx : model.searchable_indices())
        searchable.insert(model.layers[idx].name);
    for (const auto& [name, energies] : run.layer_energies)
        if (!searchable.count(name))
            throw ConfigError("space.layer_energies names unknown layer '" + name + "'");
    std::vector<std::vector<double>> rows;
    for (std::size_t idx : model.searchable_indices()) {
        auto it = run.layer_energies.find(model.layers[idx].name);
        rows.push_back(it == run.layer_energies.end() ? run.default_energies : it->second);
    }
    return rows;
}

int cmd_sweep(const Run& run) {
    EvaluatorBinding binding = bind_evaluator(run);
    SensitivityReport report = sensitivity_sweep(binding.model, *binding.evaluator,
                                                 run.sweep_split, run.sweep_energies);
    const std::string path = run.out_dir + "/sweep.csv";
    write_text(path, sensitivity_csv(report));
    std::cout << "baseline error: " << report.baseline_error << "\n";
    std::cout << "wrote " << path << " (" << report.entries.size() << " cells)\n";
    return 0;
}

int cmd_search(const Run& run) {
    if (!run.have_target_speedup)
        throw ConfigError("search.target_speedup is required (no default)");
    EvaluatorBinding binding = bind_evaluator(run);

    SearchConfig cfg;
    cfg.space = build_space(binding.model, energies_for(run, binding.model));
    cfg.reward.mode = reward_mode_from_string(run.reward_mode);
    cfg.reward.target_speedup = run.target_speedup;
    // The reward baseline is the model.s reference error on dev, whatever split the
    // search evaluates candidates on; search.baseline_error overrides it.
    cfg.reward.baseline_error =
        run.baseline_error_override > 0.0
            ? run.baseline_error_override
            : binding.evaluator->evaluate(as_uncompressed(binding.model), "dev", false)
                  .aggregate;
    cfg.max_steps = run.max_steps;
    cfg.seed = run.seed;
    cfg.top_k = run.top_k_n;
    cfg.proxy_split = run.proxy_split;
    cfg.holdout_split = run.holdout_split;
    cfg.hidden = run.hidden;
    cfg.embed = run.embed;
    cfg.learning_rate = run.learning_rate;
    cfg.use_reward_baseline = run.use_reward_baseline;
    cfg.baseline_decay = run.baseline_decay;
    cfg.validate();

    SearchState state(binding.model, cfg, binding.evaluator.get());
    const int report_every = std::max(1, cfg.max_steps / 10);
    for (int i = 0; i < cfg.max_steps; ++i) {
        StepRecord rec = state.step();
        if ((i + 1) % report_every == 0)
            std::cout << "step " << (i + 1) << "/" << cfg.max_steps << "  speedup "
                      << rec.speedup << (rec.rejected ? "  rejected" : "") << "  reward "
                      << rec.reward << "\n";
    }

    write_text(run.out_dir + "/search.jsonl", log_to_jsonl(state.records()));
    std::filesystem::create_directories(run.out_dir);
    save_controller(state.controller(), run.out_dir + "/controller.lrcp");
    write_text(run.out_dir + "/explored.json", explored_to_json(state.explored()).dump(2) + "\n");

    std::cout << "explored " << state.explored().size() << " of " << state.records().size()
              << " steps\n";
    if (!state.explored().empty()) {
        auto best = top_k(state.explored(), 1);
        std::cout << "best proxy error " << best[0].error << " at speedup " << best[0].speedup
                  << " (step " << best[0].step << ")\n";
    }
    std::cout << "wrote " << run.out_dir << "/search.jsonl, controller.lrcp, explored.json\n";
    return 0;
}

int cmd_condense(const Run& run) {
    if (run.evaluator_kind != "builtin-toy")
        throw ConfigError("condense needs the builtin-toy evaluator (cohorts are built from "
                          "the toy profile)");
    EvaluatorBinding binding = bind_evaluator(run);
    const ToyProfile& profile = *binding.profile;

    auto cohorts = toy_cohort_models(profile, run.num_cohorts, run.seed);
    CohortErrors ce = cohort_errors(profile.dev, cohorts, *binding.evaluator, "dev");
    CondenseConfig cfg;
    cfg.correl_min = run.correl_min;
    cfg.min_length = run.min_length;
    cfg.statistic = run.statistic == "pearson" ? CorrelationStatistic::pearson
                                               : CorrelationStatistic::spearman;
    std::vector<int> selected = condense_select(ce, cfg);
    const std::string path = run.out_dir + "/condensed.json";
    write_text(path, condense_manifest(cfg, ce, selected).dump(2) + "\n");
    std::cout << "selected " << selected.size() << " of " << ce.num_samples() << " samples\n";
    std::cout << "wrote " << path << "\n";
    return 0;
}

int cmd_topk(const Run& run) {
    if (run.log_path.empty()) throw ConfigError("topk needs a log (topk.log or --log)");
    EvaluatorBinding binding = bind_evaluator(run);

    std::vector<StepRecord> records = log_from_jsonl(read_text(run.log_path));
    std::vector<ExploredPoint> explored;
    for (const StepRecord& rec : records)
        if (!rec.rejected && rec.error)
            explored.push_back({rec.scheme, *rec.error, rec.speedup, rec.step, rec.reward});

    auto candidates = top_k(explored, static_cast<std::size_t>(run.top_k_n));
    BestSelection best =
        select_best(binding.model, candidates, *binding.evaluator, run.holdout_split);

    nlohmann::ordered_json out;
    out["holdout_split"] = run.holdout_split;
    out["candidates"] = nlohmann::ordered_json::array();
    for (const CandidateReport& c : best.candidates) {
        nlohmann::ordered_json j;
        j["scheme"] = c.scheme;
        j["proxy_error"] = c.proxy_error;
        j["speedup"] = c.speedup;
        if (c.holdout_error) {
            j["holdout_error"] = *c.holdout_error;
        } else {
            j["holdout_error"] = nullptr;
            j["failure"] = c.failure;
        }
        out["candidates"].push_back(std::move(j));
    }
    out["best"] = {{"scheme", best.scheme}, {"holdout_error", best.holdout_error}};
    const std::string path = run.out_dir + "/topk.json";
    write_text(path, out.dump(2) + "\n");

    std::cout << "candidates (proxy -> holdout):\n";
    for (const CandidateReport& c : best.candidates) {
        std::cout << "  proxy " << c.proxy_error << "  speedup " << c.speedup << "  holdout ";
        if (c.holdout_error) {
            std::cout << *c.holdout_error << "\n";
        } else {
            std::cout << "FAILED (" << c.failure << ")\n";
        }
    }
    std::cout << "best holdout error " << best.holdout_error << "\n";
    std::cout << "wrote " << path << "\n";
    return 0;
}

int cmd_compress(const Run& run) {
    EvaluatorBinding binding = bind_evaluator(run);
    if (run.compress_scheme.empty())
        throw ConfigError("compress needs a scheme (compress.scheme or --scheme)");
    const std::string out_path =
        run.artifact_out.empty() ? run.out_dir + "/compressed.lrfm" : run.artifact_out;
    CompressedModel cm = apply_scheme(binding.model, run.compress_scheme);
    std::filesystem::path p(out_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    save_compressed(cm, out_path);
    std::cout << "parameters " << param_count(binding.model) << " -> " << param_count(cm)
              << " (speedup " << scheme_speedup(binding.model, run.compress_scheme) << ")\n";
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_eval(const Run& run) {
    EvaluatorBinding binding = bind_evaluator(run, /*need_model=*/false);
    EvalResult result;
    if (run.model_path.empty()) {
        result = binding.evaluator->evaluate(as_uncompressed(binding.model), run.eval_split,
                                             false);
    } else {
        result = binding.evaluator->evaluate(load_compressed(run.model_path), run.eval_split,
                                             false);
    }
    std::cout << "error " << result.aggregate << " on " << run.eval_split << "\n";
    return 0;
}

int cmd_report(const Run& run) {
    if (run.log_path.empty()) throw ConfigError("report needs a log (report.log or --log)");
    std::vector<StepRecord> records = log_from_jsonl(read_text(run.log_path));
    const std::string path =
        run.artifact_out.empty() ? run.out_dir + "/points.csv" : run.artifact_out;
    write_text(path, log_to_csv(records));
    std::cout << "wrote " << path << " (" << records.size() << " rows)\n";
    return 0;
}

int exit_code_for(const Error& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UnknownLayer*>(&e) ||
        dynamic_cast<const SpaceShapeError*>(&e) || dynamic_cast<const InvalidEnergy*>(&e) ||
        dynamic_cast<const InvalidScheme*>(&e) || dynamic_cast<const FormatError*>(&e))
        return 2;
    if (dynamic_cast<const EvaluatorError*>(&e) || dynamic_cast<const ProtocolError*>(&e) ||
        dynamic_cast<const EvalTimeout*>(&e) || dynamic_cast<const ProfileBuildError*>(&e) ||
        dynamic_cast<const ModelShapeError*>(&e) || dynamic_cast<const DivergenceError*>(&e))
        return 3;
    if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const InvalidMatrix*>(&e) ||
        dynamic_cast<const DegenerateSpectrum*>(&e) || dynamic_cast<const InvalidRank*>(&e) ||
        dynamic_cast<const StaleCache*>(&e))
        return 4;
    if (dynamic_cast<const EmptyCondensedSet*>(&e) || dynamic_cast<const NoFeasiblePoint*>(&e) ||
        dynamic_cast<const DegenerateFullset*>(&e) || dynamic_cast<const InvalidSize*>(&e))
        return 5;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rank-selection search for SVD-compressed layered models"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides flags;
    std::string mode;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "JSON config file");
        sub->add_option("--seed", [&](const std::vector<std::string>& v) {
            flags.seed = std::stoull(v[0]);
            return true;
        }, "override config seed");
        sub->add_option("--out-dir", [&](const std::vector<std::string>& v) {
            flags.out_dir = v[0];
            return true;
        }, "override output directory");
        sub->callback([&, sub] { mode = sub->get_name(); });
        return sub;
    };

    CLI::App* sweep = add_common(app.add_subcommand("sweep", "single-layer sensitivity sweep"));
    CLI::App* search = add_common(app.add_subcommand("search", "run the rank search"));
    search->add_option("--steps", [&](const std::vector<std::string>& v) {
        flags.steps = std::stoi(v[0]);
        return true;
    }, "override max_steps");
    search->add_option("--target-speedup", [&](const std::vector<std::string>& v) {
        flags.target_speedup = std::stod(v[0]);
        return true;
    }, "override target speedup");

    CLI::App* condense = add_common(app.add_subcommand("condense", "build a condensed subset"));
    condense->add_option("--correl-min", [&](const std::vector<std::string>& v) {
        flags.correl_min = std::stod(v[0]);
        return true;
    }, "override correlation threshold");

    CLI::App* topk = add_common(app.add_subcommand("topk", "extract and select the best scheme"));
    topk->add_option("--log", [&](const std::vector<std::string>& v) {
        flags.log = v[0];
        return true;
    }, "search log to read");
    topk->add_option("-k", [&](const std::vector<std::string>& v) {
        flags.top_k = std::stoi(v[0]);
        return true;
    }, "number of candidates");

    CLI::App* compress = add_common(app.add_subcommand("compress", "apply a scheme to a model"));
    compress->add_option("--scheme", [&](const std::vector<std::string>& v) {
        flags.scheme = v[0];
        return true;
    }, "comma-separated ranks, 0 = uncompressed");
    compress->add_option("--out", [&](const std::vector<std::string>& v) {
        flags.out = v[0];
        return true;
    }, "output weight file");

    CLI::App* eval = add_common(app.add_subcommand("eval", "evaluate a weight file"));
    eval->add_option("--model", [&](const std::vector<std::string>& v) {
        flags.model = v[0];
        return true;
    }, "weight file to evaluate (defaults to the builtin baseline)");
    eval->add_option("--split", [&](const std::vector<std::string>& v) {
        flags.split = v[0];
        return true;
    }, "dataset split");

    CLI::App* report = add_common(app.add_subcommand("report", "search log to scatter CSV"));
    report->add_option("--log", [&](const std::vector<std::string>& v) {
        flags.log = v[0];
        return true;
    }, "search log to read");
    report->add_option("--out", [&](const std::vector<std::string>& v) {
        flags.out = v[0];
        return true;
    }, "output CSV path");

    (void)sweep;
    CLI11_PARSE(app, argc, argv);

    try {
        json cfg = config_path.empty() ? json::object() : load_config_file(config_path);
        Run run = resolve(mode, cfg, flags);
        std::cout << "resolved config: " << resolved_json(run).dump() << "\n";
        if (mode == "sweep") return cmd_sweep(run);
        if (mode == "search") return cmd_search(run);
        if (mode == "condense") return cmd_condense(run);
        if (mode == "topk") return cmd_topk(run);
        if (mode == "compress") return cmd_compress(run);
        if (mode == "eval") return cmd_eval(run);
        if (mode == "report") return cmd_report(run);
        std::cerr << "unknown mode " << mode << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
