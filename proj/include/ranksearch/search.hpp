#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ranksearch/controller.hpp"
#include "ranksearch/errors.hpp"
#include "ranksearch/evaluator.hpp"
#include "ranksearch/netmodel.hpp"
#include "ranksearch/reward.hpp"
#include "ranksearch/rng.hpp"
#include "ranksearch/space.hpp"

namespace ranksearch {

// A point that passed the speedup gate and was fully evaluated; the set of
// these is the explored set the final model is extracted from.
struct ExploredPoint {
    Scheme scheme;
    double error = 0.0;    // proxy error w
    double speedup = 0.0;  // estimated speedup a
    int step = 0;
    double reward = 0.0;
};

struct StepRecord {
    int step = 0;
    Scheme scheme;
    std::vector<int> indices;
    std::vector<double> probs;
    double speedup = 0.0;
    bool rejected = false;
    std::optional<double> error;  // absent when rejected
    double reward = 0.0;
    std::int64_t wall_ms = 0;  // evaluation wall clock; masked in determinism checks
};

struct SearchConfig {
    SearchSpace space;
    RewardConfig reward;
    int max_steps = 500;
    std::uint64_t seed = 1;
    int top_k = 5;
    std::string proxy_split = "dev";
    std::string holdout_split = "test";
    int hidden = 100;
    int embed = 100;
    double learning_rate = 1e-3;
    bool use_reward_baseline = false;  // off by default: updates use the raw reward
    double baseline_decay = 0.9;

    void validate() const {
        if (space.num_layers() == 0 || space.num_options() < 2)
            throw ConfigError("search space must have >= 1 layer and >= 2 options");
        if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
        if (top_k < 1) throw ConfigError("top_k must be >= 1");
        reward.validate();
    }
};

// ---------------------------------------------------------------------------
// JSONL log codec
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json record_to_json(const StepRecord& rec) {
    nlohmann::ordered_json j;
    j["step"] = rec.step;
    j["scheme"] = rec.scheme;
    j["indices"] = rec.indices;
    j["probs"] = rec.probs;
    j["speedup"] = rec.speedup;
    j["rejected"] = rec.rejected;
    if (rec.error) {
        j["error"] = *rec.error;
    } else {
        j["error"] = nullptr;
    }
    j["reward"] = rec.reward;
    j["wall_ms"] = rec.wall_ms;
    return j;
}

inline StepRecord record_from_json(const nlohmann::json& j) {
    StepRecord rec;
    rec.step = j.at("step").get<int>();
    rec.scheme = j.at("scheme").get<Scheme>();
    rec.indices = j.at("indices").get<std::vector<int>>();
    rec.probs = j.at("probs").get<std::vector<double>>();
    rec.speedup = j.at("speedup").get<double>();
    rec.rejected = j.at("rejected").get<bool>();
    if (!j.at("error").is_null()) rec.error = j.at("error").get<double>();
    rec.reward = j.at("reward").get<double>();
    rec.wall_ms = j.at("wall_ms").get<std::int64_t>();
    return rec;
}

inline std::string log_to_jsonl(const std::vector<StepRecord>& records) {
    std::string out;
    for (const StepRecord& rec : records) {
        out += record_to_json(rec).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<StepRecord> log_from_jsonl(const std::string& text) {
    std::vector<StepRecord> records;
    std::size_t begin = 0;
    while (begin < text.size()) {
        std::size_t end = text.find('\n', begin);
        if (end == std::string::npos) end = text.size();
        if (end > begin) {
            try {
                records.push_back(record_from_json(nlohmann::json::parse(
                    text.substr(begin, end - begin))));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(std::string("bad search log line: ") + e.what(), begin);
            }
        }
        begin = end + 1;
    }
    return records;
}

// CSV projection of a log for speedup-vs-error scatter plots.
inline std::string log_to_csv(const std::vector<StepRecord>& records) {
    std::string out = "step,speedup,error,rejected\n";
    char buf[128];
    for (const StepRecord& rec : records) {
        if (rec.error) {
            std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,%d\n", rec.step, rec.speedup,
                          *rec.error, rec.rejected ? 1 : 0);
        } else {
            std::snprintf(buf, sizeof(buf), "%d,%.12g,,%d\n", rec.step, rec.speedup,
                          rec.rejected ? 1 : 0);
        }
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// The search driver
// ---------------------------------------------------------------------------

class SearchState {
public:
    SearchState(const LayeredModel& model, SearchConfig config, ErrorEvaluator* evaluator)
        : model_(&model), config_(std::move(config)), evaluator_(evaluator), cache_(model) {
        config_.validate();
        Rng root(config_.seed);
        const std::uint64_t controller_seed = root.fork(1).next_u64();
        sample_seed_ = root.fork(2).next_u64();
        params_ = init_controller(static_cast<int>(config_.space.num_layers()),
                                  static_cast<int>(config_.space.num_options()),
                                  config_.hidden, config_.embed, controller_seed);
    }

    // One step of the search: sample a scheme, gate on estimated speedup,
    // punish or evaluate, then update the policy. Sampling randomness is
    // keyed on (seed, step index), so an aborted step leaves no trace and a
    // resumed run continues the exact trajectory.
    StepRecord step() {
        if (evaluator_ == nullptr) throw ConfigError("search state has no evaluator bound");

        PolicyOutput out = forward(params_);
        Rng step_rng(sample_seed_ ^
                     (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(step_count_ + 1)));
        SampledScheme sampled = sample(out, step_rng);

        StepRecord rec;
        rec.step = step_count_;
        rec.indices = sampled.indices;
        rec.probs = sampled.probs;
        rec.scheme = scheme_from_indices(config_.space, sampled.indices);
        rec.speedup = scheme_speedup(*model_, rec.scheme);

        if (rec.speedup < config_.reward.target_speedup) {
            rec.rejected = true;
            rec.reward = punish(config_.reward.target_speedup - rec.speedup,
                                config_.reward.punish_slope, config_.reward.punish_offset);
        } else {
            double error;
            const auto memo = memo_.find(rec.scheme);
            if (memo != memo_.end()) {
                error = memo->second;
            } else {
                const auto start = std::chrono::steady_clock::now();
                try {
                    error = evaluator_
                                ->evaluate(apply_scheme(*model_, rec.scheme, &cache_),
                                           config_.proxy_split, false)
                                .aggregate;
                } catch (const Error& e) {
                    // Step aborted; controller, explored set and step count
                    // are untouched.
                    throw EvaluatorError("evaluation failed at step " +
                                         std::to_string(step_count_) + ": " + e.what());
                }
                rec.wall_ms = detail::elapsed_ms(start);
                memo_.emplace(rec.scheme, error);
            }
            rec.error = error;
            rec.reward = reward(config_.reward, error);
            explored_.push_back({rec.scheme, error, rec.speedup, rec.step, rec.reward});
        }

        update_policy(out, sampled, rec.reward);
        records_.push_back(rec);
        ++step_count_;
        return rec;
    }

    // Re-applies a logged step: the sampled indices and reward come from the
    // record, so no evaluator is needed and the parameter trajectory is
    // reproduced bit-exactly.
    void apply_logged_step(const StepRecord& rec) {
        PolicyOutput out = forward(params_);
        SampledScheme sampled;
        sampled.indices = rec.indices;
        sampled.probs.resize(rec.indices.size());
        for (std::size_t i = 0; i < rec.indices.size(); ++i)
            sampled.probs[i] = out.dist(i, rec.indices[i]);
        update_policy(out, sampled, rec.reward);

        if (!rec.rejected && rec.error) {
            explored_.push_back({rec.scheme, *rec.error, rec.speedup, rec.step, rec.reward});
            memo_.emplace(rec.scheme, *rec.error);
        }
        records_.push_back(rec);
        ++step_count_;
    }

    const std::vector<ExploredPoint>& explored() const { return explored_; }
    const std::vector<StepRecord>& records() const { return records_; }
    const ControllerParams& controller() const { return params_; }
    const SearchConfig& config() const { return config_; }
    FactorCache& factor_cache() { return cache_; }
    int steps_done() const { return step_count_; }

private:
    void update_policy(const PolicyOutput& out, const SampledScheme& sampled, double raw_reward) {
        double effective = raw_reward;
        if (config_.use_reward_baseline) {
            effective -= reward_ema_;
            reward_ema_ = config_.baseline_decay * reward_ema_ +
                          (1.0 - config_.baseline_decay) * raw_reward;
        }
        apply_update(params_, policy_gradient(params_, out, sampled, effective),
                     config_.learning_rate);
    }

    const LayeredModel* model_;
    SearchConfig config_;
    ErrorEvaluator* evaluator_;
    FactorCache cache_;
    std::uint64_t sample_seed_ = 0;
    ControllerParams params_;
    std::map<Scheme, double> memo_;
    std::vector<ExploredPoint> explored_;
    std::vector<StepRecord> records_;
    int step_count_ = 0;
    double reward_ema_ = 0.0;
};

struct SearchResult {
    std::vector<StepRecord> records;
    std::vector<ExploredPoint> explored;
    ControllerParams controller;
};

inline SearchResult run_search(const LayeredModel& model, const SearchConfig& config,
                               ErrorEvaluator& evaluator) {
    SearchState state(model, config, &evaluator);
    for (int i = 0; i < config.max_steps; ++i) state.step();
    return SearchResult{state.records(), state.explored(), state.controller()};
}

// Rebuilds the controller trajectory from a log alone.
inline SearchState replay_search(const LayeredModel& model, const SearchConfig& config,
                                 const std::vector<StepRecord>& records) {
    SearchState state(model, config, nullptr);
    for (const StepRecord& rec : records) state.apply_logged_step(rec);
    return state;
}

// Continues a crashed or stopped search from its log.
inline SearchResult resume_search(const LayeredModel& model, const SearchConfig& config,
                                  ErrorEvaluator& evaluator,
                                  const std::vector<StepRecord>& existing) {
    SearchState state(model, config, &evaluator);
    for (const StepRecord& rec : existing) state.apply_logged_step(rec);
    while (state.steps_done() < config.max_steps) state.step();
    return SearchResult{state.records(), state.explored(), state.controller()};
}

// ---------------------------------------------------------------------------
// Extraction: top-k by proxy error, then holdout re-evaluation.
// ---------------------------------------------------------------------------

// The k distinct schemes with the lowest proxy error; ties broken by higher
// speedup, then by earlier step.
inline std::vector<ExploredPoint> top_k(const std::vector<ExploredPoint>& explored,
                                        std::size_t k) {
    if (explored.empty()) throw NoFeasiblePoint("explored set is empty");
    std::map<Scheme, ExploredPoint> distinct;
    for (const ExploredPoint& p : explored) {
        auto it = distinct.find(p.scheme);
        if (it == distinct.end() || p.step < it->second.step) distinct[p.scheme] = p;
    }
    std::vector<ExploredPoint> points;
    for (auto& [scheme, p] : distinct) points.push_back(p);
    std::sort(points.begin(), points.end(), [](const ExploredPoint& a, const ExploredPoint& b) {
        if (a.error != b.error) return a.error < b.error;
        if (a.speedup != b.speedup) return a.speedup > b.speedup;
        return a.step < b.step;
    });
    if (points.size() > k) points.resize(k);
    return points;
}

struct CandidateReport {
    Scheme scheme;
    double proxy_error = 0.0;
    double speedup = 0.0;
    std::optional<double> holdout_error;  // absent if evaluation failed
    std::string failure;
};

struct BestSelection {
    Scheme scheme;
    double holdout_error = 0.0;
    std::vector<CandidateReport> candidates;
};

// Re-evaluates each candidate on the holdout split and returns the argmin.
// Individual failures are recorded; only all-fail is fatal.
inline BestSelection select_best(const LayeredModel& model,
                                 const std::vector<ExploredPoint>& candidates,
                                 ErrorEvaluator& holdout_evaluator,
                                 const std::string& holdout_split,
                                 FactorCache* cache = nullptr) {
    if (candidates.empty()) throw NoFeasiblePoint("no candidates to select from");
    FactorCache local(model);
    FactorCache& factors = cache ? *cache : local;

    BestSelection best;
    bool have_best = false;
    for (const ExploredPoint& p : candidates) {
        CandidateReport report;
        report.scheme = p.scheme;
        report.proxy_error = p.error;
        report.speedup = p.speedup;
        try {
            report.holdout_error =
                holdout_evaluator
                    .evaluate(apply_scheme(model, p.scheme, &factors), holdout_split, false)
                    .aggregate;
        } catch (const Error& e) {
            report.failure = e.what();
        }
        if (report.holdout_error &&
            (!have_best || *report.holdout_error < best.holdout_error)) {
            best.scheme = p.scheme;
            best.holdout_error = *report.holdout_error;
            have_best = true;
        }
        best.candidates.push_back(std::move(report));
    }
    if (!have_best) throw NoFeasiblePoint("every candidate failed holdout evaluation");
    return best;
}

inline nlohmann::ordered_json explored_to_json(const std::vector<ExploredPoint>& explored) {
    nlohmann::ordered_json points = nlohmann::ordered_json::array();
    for (const ExploredPoint& p : explored) {
        nlohmann::ordered_json j;
        j["scheme"] = p.scheme;
        j["error"] = p.error;
        j["speedup"] = p.speedup;
        j["step"] = p.step;
        j["reward"] = p.reward;
        points.push_back(std::move(j));
    }
    nlohmann::ordered_json out;
    out["points"] = std::move(points);
    return out;
}

}  // namespace ranksearch
