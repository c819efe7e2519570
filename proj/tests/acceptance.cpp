// Acceptance suite: end-to-end checks of the numerical contracts and the
// search/condense/retrain workflows on the bundled toy profile. Each
// criterion prints one PASS/FAIL line; the exit code is the failure count.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "ranksearch/condense.hpp"
#include "ranksearch/controller.hpp"
#include "ranksearch/evaluator.hpp"
#include "ranksearch/lowrank.hpp"
#include "ranksearch/netmodel.hpp"
#include "ranksearch/reward.hpp"
#include "ranksearch/search.hpp"
#include "ranksearch/space.hpp"

#include "fdiff_oracle.hpp"
#include "toy_fixtures.hpp"

using namespace ranksearch;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

struct Check {
    Outcome outcome;
    void expect(bool ok, const std::string& what) {
        if (!ok) {
            outcome.pass = false;
            if (!outcome.detail.empty()) outcome.detail += "; ";
            outcome.detail += what;
        }
    }
    void note(const std::string& info) {
        if (outcome.pass && outcome.detail.empty()) outcome.detail = info;
    }
};

constexpr std::uint64_t kProfileSeed = 1;

std::vector<std::vector<double>> toy_guided_energies() {
    // Sensitive layers (first and output) keep conservative options; the
    // middle layers get the widest ranges.
    const std::vector<double> conservative = {0.999, 0.98, 0.95, 0.9, 0.85};
    const std::vector<double> wide = {0.999, 0.9, 0.7, 0.5, 0.3};
    return {conservative, wide, wide, wide, wide, conservative};
}

SearchConfig toy_search_config(const ToyProfile& p, double target_speedup, int steps,
                               std::uint64_t seed) {
    SearchConfig cfg;
    cfg.space = build_space(p.model, toy_guided_energies());
    cfg.reward.mode = RewardMode::conservative;
    cfg.reward.baseline_error = p.baseline_error;
    cfg.reward.target_speedup = target_speedup;
    cfg.max_steps = steps;
    cfg.seed = seed;
    cfg.hidden = 64;
    cfg.embed = 64;
    cfg.learning_rate = 2e-3;
    return cfg;
}

// ---------------------------------------------------------------------------

Outcome criterion_1_svd_suite() {
    Check c;
    Rng rng(20240101);
    double worst_ey = 0.0, worst_gram = 0.0;
    for (int trial = 0; trial < 200 && c.outcome.pass; ++trial) {
        const std::size_t m = 1 + rng.index(128);
        const std::size_t n = 1 + rng.index(96);
        Matrix a = random_uniform_matrix(m, n, rng, -1.0, 1.0);
        Factorization f = svd(a);
        const std::size_t r = f.sigma.size();

        // Orthonormal columns of both factors.
        for (const Matrix* q : {&f.u, &f.v}) {
            Matrix gram = matmul(transpose(*q), *q);
            for (std::size_t i = 0; i < gram.rows(); ++i)
                for (std::size_t j = 0; j < gram.cols(); ++j) {
                    const double want = (i == j) ? 1.0 : 0.0;
                    worst_gram = std::max(worst_gram, std::abs(gram(i, j) - want));
                }
        }
        c.expect(worst_gram < 1e-8, "orthonormality off by " + std::to_string(worst_gram));

        // Eckart-Young at a spread of ranks.
        std::set<std::size_t> ks = {1, std::max<std::size_t>(1, r / 4),
                                    std::max<std::size_t>(1, r / 2),
                                    std::max<std::size_t>(1, (3 * r) / 4), r};
        for (std::size_t k : ks) {
            TruncatedPair t = truncate(f, static_cast<int>(k));
            double tail = 0.0;
            for (std::size_t i = k; i < r; ++i) tail += f.sigma[i] * f.sigma[i];
            const double err = frobenius_distance(matmul(t.u_trunc, t.v_star), a);
            worst_ey = std::max(worst_ey, std::abs(err - std::sqrt(tail)));
        }
        c.expect(worst_ey < 1e-8, "Eckart-Young off by " + std::to_string(worst_ey));

        // Energy-to-rank agrees with a brute-force scan.
        for (double energy : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0}) {
            if (!(f.sigma[0] > 0.0)) continue;
            const int got = rank_for_energy(f.sigma, energy);
            double total = 0.0;
            for (double s : f.sigma) total += s;
            int want = static_cast<int>(r);
            double cum = 0.0;
            for (std::size_t k = 0; k < r; ++k) {
                cum += f.sigma[k];
                if (cum / total >= energy) {
                    want = static_cast<int>(k + 1);
                    break;
                }
            }
            c.expect(got == want, "rank_for_energy disagrees with scan");
        }
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "worst Eckart-Young %.2e, worst Gram %.2e over 200 matrices",
                  worst_ey, worst_gram);
    c.note(buf);
    return c.outcome;
}

Outcome criterion_2_formula_exactness() {
    Check c;
    c.expect(layer_speedup(1024, 1024, 256) == 2.0, "layer_speedup(1024,1024,256) != 2");
    c.expect(reward_conservative(8.29, 8.29) == -1.0, "reward_conservative(wb,wb) != -1");
    c.expect(reward_aggressive(0.0, 8.29) == -1.0, "reward_aggressive(0,wb) != -1");
    c.expect(punish(0.0) == -10.0, "punish(0) != -10");
    c.expect(punish(0.2) == -30.0, "punish(0.2) != -30");
    c.note("all five identities exact in 64-bit");
    return c.outcome;
}

Outcome criterion_3_separation() {
    Check c;
    const double wb = 8.0;
    for (double delta = 0.0; delta <= 10.0; delta += 0.01)
        c.expect(punish(delta) <= -10.0, "punish rose above -10");
    const double ln10 = std::log(10.0);
    for (double gap = -5.0; gap < ln10 - 1e-9; gap += 0.005)
        c.expect(reward_conservative(wb + gap, wb) > -10.0,
                 "conservative reward crossed -10 inside its band");
    for (double ratio = 0.0; ratio < ln10 * ln10 - 1e-9; ratio += 0.005)
        c.expect(reward_aggressive(ratio * wb, wb) > -10.0,
                 "aggressive reward crossed -10 inside its band");
    c.note("punishment stays below every in-band reward");
    return c.outcome;
}

Outcome criterion_4_gradient_check() {
    Check c;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ControllerParams params = init_controller(3, 4, 8, 8, seed);
        Rng rng(seed * 31 + 7);
        PolicyOutput out = forward(params);
        SampledScheme sampled = sample(out, rng);
        const double reward_value = (seed % 2 == 0) ? 1.7 : -2.3;
        const std::vector<double> grad = policy_gradient(params, out, sampled, reward_value);
        worst = std::max(worst, fdiff::max_rel_error(params, sampled.indices, reward_value,
                                                     grad, 1e-6));
    }
    c.expect(worst < 1e-5, "finite-difference mismatch " + std::to_string(worst));
    char buf[96];
    std::snprintf(buf, sizeof(buf), "worst per-coordinate relative error %.2e over 10 seeds",
                  worst);
    c.note(buf);
    return c.outcome;
}

Outcome criterion_5_oracle_optimality() {
    Check c;
    int problems_checked = 0;
    for (const auto& [problem_seed, options] :
         std::vector<std::pair<std::uint64_t, int>>{{1, 3}, {2, 4}, {3, 3}}) {
        fixtures::MiniProblem mini = fixtures::make_mini_problem(problem_seed, options);
        fixtures::MiniEvaluator evaluator(mini);

        SearchConfig cfg;
        cfg.space = mini.space;
        cfg.reward = mini.reward_cfg;
        cfg.max_steps = 500;
        cfg.hidden = 32;
        cfg.embed = 32;
        cfg.learning_rate = 5e-3;

        // Exhaustive enumeration over the whole space.
        std::size_t total = 1;
        for (std::size_t i = 0; i < cfg.space.num_layers(); ++i)
            total *= cfg.space.num_options();
        FactorCache cache(mini.model);
        double oracle = -1e300;
        for (std::size_t code = 0; code < total; ++code) {
            std::vector<int> indices(cfg.space.num_layers());
            std::size_t rest = code;
            for (std::size_t i = 0; i < indices.size(); ++i) {
                indices[i] = static_cast<int>(rest % cfg.space.num_options());
                rest /= cfg.space.num_options();
            }
            Scheme scheme = scheme_from_indices(cfg.space, indices);
            if (scheme_speedup(mini.model, scheme) < cfg.reward.target_speedup) continue;
            const double w =
                evaluate(apply_scheme(mini.model, scheme, &cache), mini.dev).aggregate;
            oracle = std::max(oracle, reward(cfg.reward, w));
        }
        c.expect(oracle > -1e300, "mini problem has no feasible scheme");

        int hits = 0;
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            cfg.seed = seed;
            SearchResult result = run_search(mini.model, cfg, evaluator);
            double best = -1e300;
            for (const ExploredPoint& p : result.explored) best = std::max(best, p.reward);
            if (std::abs(best - oracle) <= 1e-9 * std::max(1.0, std::abs(oracle))) ++hits;
        }
        c.expect(hits >= 9, "problem " + std::to_string(problem_seed) + " found optimum in " +
                                std::to_string(hits) + "/10 seeds");
        ++problems_checked;
    }
    c.expect(problems_checked == 3, "expected 3 problems");
    c.note("3 spaces of <= 64 schemes, optimum found in >= 9/10 seeds each");
    return c.outcome;
}

Outcome criterion_6_constraint_shaping() {
    Check c;
    const ToyProfile& p = toy_profile(kProfileSeed);
    ToyEvaluator evaluator(p);
    FactorCache cache(p.model);

    SearchConfig cfg = toy_search_config(p, 1.2, 1500, 42);
    SearchResult result = run_search(p.model, cfg, evaluator);

    int final_ok = 0;
    for (std::size_t i = result.records.size() - 100; i < result.records.size(); ++i)
        if (result.records[i].speedup >= cfg.reward.target_speedup) ++final_ok;
    c.expect(final_ok >= 80, "only " + std::to_string(final_ok) +
                                 "% of the final 100 proposals meet the speedup target");

    // Guided manual baseline: equal energy on all but the sensitive layers,
    // at the first energy whose speedup clears the target.
    const std::set<std::string> excluded = {p.sensitive_layer, "fc6"};
    Scheme guided;
    double guided_speedup = 0.0;
    for (double energy : {0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5}) {
        Scheme candidate = guided_manual_scheme(p.model, energy, excluded, &cache);
        const double a = scheme_speedup(p.model, candidate);
        if (a >= cfg.reward.target_speedup) {
            guided = candidate;
            guided_speedup = a;
            break;
        }
    }
    c.expect(!guided.empty(), "no guided-manual scheme clears the target");
    const double guided_error =
        evaluate(apply_scheme(p.model, guided, &cache), p.dev).aggregate;

    double best_error = 1e300;
    for (const ExploredPoint& point : result.explored)
        if (point.speedup >= guided_speedup) best_error = std::min(best_error, point.error);
    c.expect(best_error <= guided_error,
             "search best " + std::to_string(best_error) + " worse than guided manual " +
                 std::to_string(guided_error));
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "final-100 gate rate %d%%; best %.2f%% vs guided manual %.2f%% at >= %.2fx",
                  final_ok, best_error, guided_error, guided_speedup);
    c.note(buf);
    return c.outcome;
}

Outcome criterion_7_condense_fidelity() {
    Check c;
    const ToyProfile& p = toy_profile(kProfileSeed);
    ToyEvaluator evaluator(p);

    auto cohorts = toy_cohort_models(p, 8, 99);
    CohortErrors ce = cohort_errors(p.dev, cohorts, evaluator, "dev");
    auto probes = fixtures::toy_probe_models(p, 12, 555);

    std::vector<int> all_ids;
    for (const Sample& s : p.dev.samples) all_ids.push_back(s.id);

    std::string detail;
    for (std::size_t size : {8ul, 16ul, 32ul}) {
        const double condensed =
            subset_fidelity(p.dev, top_by_correlation(ce, size), probes, evaluator, "dev");
        double random_sum = 0.0;
        for (int rep = 0; rep < 20; ++rep)
            random_sum += subset_fidelity(p.dev, random_select(all_ids, size, 1000 + rep),
                                          probes, evaluator, "dev");
        const double random_mean = random_sum / 20.0;
        c.expect(condensed >= random_mean,
                 "size " + std::to_string(size) + ": condensed " + std::to_string(condensed) +
                     " < random mean " + std::to_string(random_mean));
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%zu: %.3f vs %.3f  ", size, condensed, random_mean);
        detail += buf;
    }
    c.note("condensed vs random-mean fidelity  " + detail);
    return c.outcome;
}

Outcome criterion_8_fast_vs_slow() {
    Check c;
    ToyProfile p = build_toy_profile(kProfileSeed);
    ToyEvaluator evaluator(p);

    auto cohorts = toy_cohort_models(p, 8, 99);
    CohortErrors ce = cohort_errors(p.dev, cohorts, evaluator, "dev");
    // Binary per-sample errors are coarser than word-level ones, so the
    // condensed split needs 64 samples to resolve near-baseline schemes.
    p.set_condensed(top_by_correlation(ce, 64));

    SearchConfig cfg = toy_search_config(p, 1.2, 700, 42);

    cfg.proxy_split = "dev";
    SearchResult slow = run_search(p.model, cfg, evaluator);

    cfg.proxy_split = "condensed";
    // The reward baseline stays the dev-split reference error of the model.
    SearchResult fast = run_search(p.model, cfg, evaluator);

    auto eval_wall = [](const SearchResult& r) {
        std::int64_t total = 0;
        for (const StepRecord& rec : r.records) total += rec.wall_ms;
        return total;
    };
    const std::int64_t slow_wall = eval_wall(slow);
    const std::int64_t fast_wall = eval_wall(fast);
    c.expect(fast_wall * 3 < slow_wall, "evaluation wall " + std::to_string(fast_wall) +
                                            "ms not under a third of " +
                                            std::to_string(slow_wall) + "ms");

    BestSelection slow_best =
        select_best(p.model, top_k(slow.explored, 5), evaluator, "test");
    BestSelection fast_best =
        select_best(p.model, top_k(fast.explored, 5), evaluator, "test");
    c.expect(fast_best.holdout_error <= slow_best.holdout_error + 0.5,
             "fast best " + std::to_string(fast_best.holdout_error) + " not within 0.5 of slow " +
                 std::to_string(slow_best.holdout_error));
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "holdout %.2f%% (fast) vs %.2f%% (slow); eval wall %lld ms vs %lld ms",
                  fast_best.holdout_error, slow_best.holdout_error,
                  static_cast<long long>(fast_wall), static_cast<long long>(slow_wall));
    c.note(buf);
    return c.outcome;
}

Outcome criterion_9_aggressive_seed() {
    Check c;
    ToyProfile p = build_toy_profile(kProfileSeed);
    ToyEvaluator evaluator(p);
    FactorCache cache(p.model);

    // Pick the aggressive target: the smallest candidate whose matched
    // equal-energy manual scheme degrades dev error by at least 15 points.
    double target = 0.0;
    Scheme manual;
    double manual_error = 0.0, manual_speedup = 0.0;
    for (double candidate : {2.0, 2.2, 2.5, 2.8, 3.0}) {
        Scheme matched;
        double matched_a = 0.0;
        for (double energy = 0.95; energy > 0.05; energy -= 0.05) {
            Scheme s = manual_scheme(p.model, energy, &cache);
            const double a = scheme_speedup(p.model, s);
            if (a >= candidate) {
                matched = s;
                matched_a = a;
                break;
            }
        }
        if (matched.empty()) continue;
        const double err = evaluate(apply_scheme(p.model, matched, &cache), p.dev).aggregate;
        if (err >= p.baseline_error + 15.0) {
            target = candidate;
            manual = matched;
            manual_error = err;
            manual_speedup = matched_a;
            break;
        }
    }
    c.expect(target > 0.0, "no aggressive target makes manual compression degrade >= 15 pts");
    if (!c.outcome.pass) return c.outcome;

    // Fast aggressive search on the condensed split.
    auto cohorts = toy_cohort_models(p, 8, 99);
    CohortErrors ce = cohort_errors(p.dev, cohorts, evaluator, "dev");
    p.set_condensed(top_by_correlation(ce, 32));

    SearchConfig cfg = toy_search_config(p, target, 800, 7);
    cfg.reward.mode = RewardMode::aggressive;
    cfg.proxy_split = "condensed";
    // The reward baseline stays the dev-split reference error of the model.
    SearchResult result = run_search(p.model, cfg, evaluator);
    c.expect(!result.explored.empty(), "aggressive search explored nothing");
    if (!c.outcome.pass) return c.outcome;

    // Best-found seed judged on dev, like the manual one.
    BestSelection best = select_best(p.model, top_k(result.explored, 5), evaluator, "dev");
    const Scheme automl = best.scheme;
    const double automl_error = best.holdout_error;
    const double automl_speedup = scheme_speedup(p.model, automl);
    c.expect(automl_speedup >= target, "automl seed misses the speedup target");
    c.expect(automl_error < manual_error,
             "automl seed " + std::to_string(automl_error) + " not below manual seed " +
                 std::to_string(manual_error));

    RetrainResult automl_tuned =
        retrain(apply_scheme(p.model, automl, &cache), p.train, 20, 77);
    RetrainResult manual_tuned =
        retrain(apply_scheme(p.model, manual, &cache), p.train, 20, 77);
    const double automl_final = evaluate(automl_tuned.model, p.dev).aggregate;
    const double manual_final = evaluate(manual_tuned.model, p.dev).aggregate;
    c.expect(automl_final <= manual_final,
             "after retraining automl " + std::to_string(automl_final) + " worse than manual " +
                 std::to_string(manual_final));
    c.expect(automl_final <= p.baseline_error + 1.0,
             "retrained automl " + std::to_string(automl_final) + " not within 1 pt of baseline " +
                 std::to_string(p.baseline_error));
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "target %.1fx: seeds %.1f%% (automl %.2fx) vs %.1f%% (manual %.2fx); retrained "
                  "%.1f%% vs %.1f%% (baseline %.1f%%)",
                  target, automl_error, automl_speedup, manual_error, manual_speedup,
                  automl_final, manual_final, p.baseline_error);
    c.note(buf);
    return c.outcome;
}

Outcome criterion_10_determinism_replay() {
    Check c;
    const ToyProfile& p = toy_profile(kProfileSeed);
    ToyEvaluator evaluator(p);

    SearchConfig cfg = toy_search_config(p, 1.2, 150, 11);
    SearchResult a = run_search(p.model, cfg, evaluator);
    SearchResult b = run_search(p.model, cfg, evaluator);

    auto masked = [](const SearchResult& r) {
        std::vector<StepRecord> records = r.records;
        for (StepRecord& rec : records) rec.wall_ms = 0;
        return log_to_jsonl(records);
    };
    c.expect(masked(a) == masked(b), "logs differ for identical config and seed");
    c.expect(serialize_controller(a.controller) == serialize_controller(b.controller),
             "checkpoints differ for identical config and seed");

    // A log written to JSONL and parsed back replays to the same checkpoint.
    std::vector<StepRecord> parsed = log_from_jsonl(log_to_jsonl(a.records));
    SearchState replayed = replay_search(p.model, cfg, parsed);
    c.expect(serialize_controller(replayed.controller()) ==
                 serialize_controller(a.controller),
             "replayed checkpoint differs");
    c.expect(replayed.explored().size() == a.explored.size(), "replayed explored set differs");
    c.note("two runs byte-identical (wall clock masked); replay rebuilds the checkpoint");
    return c.outcome;
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int number;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "SVD suite (Eckart-Young, orthonormality, energy ranks)", criterion_1_svd_suite},
        {2, "formula exactness", criterion_2_formula_exactness},
        {3, "reward/punishment separation", criterion_3_separation},
        {4, "controller gradient check", criterion_4_gradient_check},
        {5, "oracle optimality on small spaces", criterion_5_oracle_optimality},
        {6, "constraint shaping vs guided manual", criterion_6_constraint_shaping},
        {7, "condense fidelity vs random subsets", criterion_7_condense_fidelity},
        {8, "fast vs slow search workflow", criterion_8_fast_vs_slow},
        {9, "aggressive seed selection and retraining", criterion_9_aggressive_seed},
        {10, "determinism and log replay", criterion_10_determinism_replay},
    };

    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const Criterion& criterion : criteria) {
        if (!wanted.empty() && !wanted.count(criterion.number)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = criterion.run();
        } catch (const std::exception& e) {
            outcome.pass = false;
            outcome.detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("[%s] criterion %d: %s (%.1fs)%s%s\n", outcome.pass ? "PASS" : "FAIL",
                    criterion.number, criterion.name, secs,
                    outcome.detail.empty() ? "" : " -- ", outcome.detail.c_str());
        std::fflush(stdout);
        if (!outcome.pass) ++failures;
    }
    return failures;
}
