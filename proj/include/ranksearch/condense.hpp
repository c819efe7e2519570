#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "ranksearch/errors.hpp"
#include "ranksearch/evaluator.hpp"
#include "ranksearch/matrix.hpp"
#include "ranksearch/netmodel.hpp"
#include "ranksearch/rng.hpp"

namespace ranksearch {

// Per-sample errors under a family of cohort models, plus each cohort's
// whole-set error. Rows of sample_errors are what get correlated against
// fullset_errors.
struct CohortErrors {
    Matrix sample_errors;               // num_samples x num_cohorts
    std::vector<double> fullset_errors;  // num_cohorts
    std::vector<int> sample_ids;
    std::vector<int> sample_lengths;

    std::size_t num_samples() const { return sample_errors.rows(); }
    std::size_t num_cohorts() const { return sample_errors.cols(); }
};

enum class CorrelationStatistic { pearson, spearman };

struct CondenseConfig {
    double correl_min = 0.95;
    int min_length = 0;
    CorrelationStatistic statistic = CorrelationStatistic::pearson;
};

namespace detail {

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Average ranks, ties sharing their mean rank.
inline std::vector<double> rank_transform(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size(), 0.0);
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double mean_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

inline double correlation(const std::vector<double>& x, const std::vector<double>& y,
                          CorrelationStatistic stat) {
    if (stat == CorrelationStatistic::spearman)
        return pearson(rank_transform(x), rank_transform(y));
    return pearson(x, y);
}

inline double weighted_error(const std::vector<double>& per_sample,
                             const std::vector<int>& lengths,
                             const std::vector<std::size_t>& subset) {
    double weighted = 0.0, total = 0.0;
    for (std::size_t i : subset) {
        weighted += per_sample[i] * lengths[i];
        total += lengths[i];
    }
    return weighted / total;
}

}  // namespace detail

// E[s][c] = error of sample s under cohort c; g[c] = whole-set error under
// cohort c. The evaluator must support per-sample errors.
inline CohortErrors cohort_errors(const Dataset& dataset,
                                  const std::vector<CompressedModel>& cohorts,
                                  ErrorEvaluator& evaluator, const std::string& dataset_id) {
    if (cohorts.size() < 2)
        throw EvaluatorError("need at least 2 cohort models, got " +
                             std::to_string(cohorts.size()));
    CohortErrors ce;
    ce.sample_errors = Matrix(dataset.samples.size(), cohorts.size());
    ce.fullset_errors.resize(cohorts.size());
    for (const Sample& s : dataset.samples) {
        ce.sample_ids.push_back(s.id);
        ce.sample_lengths.push_back(s.length);
    }
    for (std::size_t c = 0; c < cohorts.size(); ++c) {
        EvalResult result;
        try {
            result = evaluator.evaluate(cohorts[c], dataset_id, true);
        } catch (const Error& e) {
            throw EvaluatorError("cohort " + std::to_string(c) + " failed on " + dataset_id +
                                 ": " + e.what());
        }
        if (!result.per_sample || result.per_sample->size() != dataset.samples.size())
            throw EvaluatorError("cohort " + std::to_string(c) +
                                 " returned no (or mis-sized) per-sample errors");
        for (std::size_t s = 0; s < dataset.samples.size(); ++s)
            ce.sample_errors(s, c) = (*result.per_sample)[s];
        ce.fullset_errors[c] = result.aggregate;
    }
    return ce;
}

// Correlation of each sample's error profile with the full set's. Rows with
// zero variance get NaN, which marks them excluded from selection.
inline std::vector<double> sample_correlations(
    const CohortErrors& ce, CorrelationStatistic stat = CorrelationStatistic::pearson) {
    double g_min = ce.fullset_errors[0], g_max = ce.fullset_errors[0];
    for (double g : ce.fullset_errors) {
        g_min = std::min(g_min, g);
        g_max = std::max(g_max, g);
    }
    if (g_min == g_max)
        throw DegenerateFullset("all cohorts have identical whole-set error; nothing to rank");

    std::vector<double> correlations(ce.num_samples());
    std::vector<double> row(ce.num_cohorts());
    for (std::size_t s = 0; s < ce.num_samples(); ++s) {
        for (std::size_t c = 0; c < ce.num_cohorts(); ++c) row[c] = ce.sample_errors(s, c);
        correlations[s] = detail::correlation(row, ce.fullset_errors, stat);
    }
    return correlations;
}

// Keep samples correlating strictly above the threshold and at least
// min_length tokens long, in original order.
inline std::vector<int> condense_select(const CohortErrors& ce, const CondenseConfig& config) {
    const std::vector<double> correlations = sample_correlations(ce, config.statistic);
    std::vector<int> selected;
    for (std::size_t s = 0; s < ce.num_samples(); ++s) {
        if (std::isnan(correlations[s])) continue;
        if (correlations[s] > config.correl_min && ce.sample_lengths[s] >= config.min_length)
            selected.push_back(ce.sample_ids[s]);
    }
    if (selected.empty())
        throw EmptyCondensedSet("no sample correlates above " +
                                std::to_string(config.correl_min));
    return selected;
}

// The best `size` samples by correlation; used to build fixed-size condensed
// sets for fidelity comparisons. Ties and order resolve to the earlier sample.
inline std::vector<int> top_by_correlation(const CohortErrors& ce, std::size_t size,
                                           int min_length = 0,
                                           CorrelationStatistic stat =
                                               CorrelationStatistic::pearson) {
    const std::vector<double> correlations = sample_correlations(ce, stat);
    std::vector<std::size_t> eligible;
    for (std::size_t s = 0; s < ce.num_samples(); ++s)
        if (!std::isnan(correlations[s]) && ce.sample_lengths[s] >= min_length)
            eligible.push_back(s);
    if (size > eligible.size())
        throw InvalidSize("requested " + std::to_string(size) + " samples, only " +
                          std::to_string(eligible.size()) + " eligible");
    std::stable_sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
        return correlations[a] > correlations[b];
    });
    eligible.resize(size);
    std::sort(eligible.begin(), eligible.end());
    std::vector<int> ids;
    for (std::size_t s : eligible) ids.push_back(ce.sample_ids[s]);
    return ids;
}

// Uniform subset without replacement; the baseline the condensed sets are
// judged against.
inline std::vector<int> random_select(const std::vector<int>& sample_ids, std::size_t size,
                                      std::uint64_t seed) {
    if (size > sample_ids.size())
        throw InvalidSize("subset size " + std::to_string(size) + " exceeds population " +
                          std::to_string(sample_ids.size()));
    std::vector<int> pool = sample_ids;
    Rng rng(seed);
    rng.shuffle(pool);
    pool.resize(size);
    return pool;
}

// Correlation between subset-aggregate and fullset-aggregate errors across a
// family of probe models: how faithfully the subset ranks models.
inline double subset_fidelity(const Dataset& dataset, const std::vector<int>& subset_ids,
                              const std::vector<CompressedModel>& probes,
                              ErrorEvaluator& evaluator, const std::string& dataset_id,
                              CorrelationStatistic stat = CorrelationStatistic::pearson) {
    if (probes.size() < 2) throw EvaluatorError("need at least 2 probe models");
    std::vector<std::size_t> subset;
    for (int id : subset_ids) {
        bool found = false;
        for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
            if (dataset.samples[i].id == id) {
                subset.push_back(i);
                found = true;
                break;
            }
        }
        if (!found) throw InvalidSize("subset id " + std::to_string(id) + " not in dataset");
    }
    if (subset.empty()) throw InvalidSize("empty subset");

    std::vector<int> lengths;
    for (const Sample& s : dataset.samples) lengths.push_back(s.length);

    std::vector<std::size_t> everything(dataset.samples.size());
    for (std::size_t i = 0; i < everything.size(); ++i) everything[i] = i;

    std::vector<double> subset_errors, full_errors;
    for (const CompressedModel& probe : probes) {
        EvalResult r = evaluator.evaluate(probe, dataset_id, true);
        if (!r.per_sample || r.per_sample->size() != dataset.samples.size())
            throw EvaluatorError("probe returned no (or mis-sized) per-sample errors");
        subset_errors.push_back(detail::weighted_error(*r.per_sample, lengths, subset));
        full_errors.push_back(detail::weighted_error(*r.per_sample, lengths, everything));
    }
    const double fidelity = detail::correlation(subset_errors, full_errors, stat);
    if (std::isnan(fidelity))
        throw DegenerateFullset("probe errors have zero variance on the subset or full set");
    return fidelity;
}

// Manifest for a condensed-set selection.
inline nlohmann::ordered_json condense_manifest(const CondenseConfig& config,
                                                const CohortErrors& ce,
                                                const std::vector<int>& selected) {
    const std::vector<double> correlations = sample_correlations(ce, config.statistic);
    nlohmann::ordered_json manifest;
    manifest["correl_min"] = config.correl_min;
    manifest["min_length"] = config.min_length;
    manifest["statistic"] =
        config.statistic == CorrelationStatistic::pearson ? "pearson" : "spearman";
    nlohmann::ordered_json cohort_ids = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < ce.num_cohorts(); ++c) cohort_ids.push_back(c);
    manifest["cohort_ids"] = cohort_ids;
    manifest["selected"] = selected;
    nlohmann::ordered_json corr = nlohmann::ordered_json::object();
    for (std::size_t s = 0; s < ce.num_samples(); ++s) {
        if (std::isnan(correlations[s])) continue;
        corr[std::to_string(ce.sample_ids[s])] = correlations[s];
    }
    manifest["correlations"] = corr;
    return manifest;
}

}  // namespace ranksearch
