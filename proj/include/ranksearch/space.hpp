#pragma once

#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ranksearch/errors.hpp"
#include "ranksearch/evaluator.hpp"
#include "ranksearch/lowrank.hpp"
#include "ranksearch/netmodel.hpp"

namespace ranksearch {

// The discrete search space S: one row of d candidate ranks per searchable
// layer. 0 is the "leave uncompressed" sentinel.
struct SearchSpace {
    std::vector<std::string> layer_names;
    std::vector<std::vector<int>> options;       // l x d
    std::vector<std::vector<double>> energy_grid;  // the energies that produced S

    std::size_t num_layers() const { return options.size(); }
    std::size_t num_options() const { return options.empty() ? 0 : options[0].size(); }
};

struct SensitivityEntry {
    std::string layer;
    double energy = 0.0;
    int rank = 0;
    double error = 0.0;
    double delta = 0.0;  // error - baseline
};

struct SensitivityReport {
    double baseline_error = 0.0;
    std::vector<SensitivityEntry> entries;  // layers x energy levels
};

// Replaces ranks whose factored cost meets or exceeds the dense cost with the
// uncompressed sentinel, so a factorization never increases cost.
inline int cost_guarded_rank(std::size_t m, std::size_t n, int k) {
    if (k <= 0) return 0;
    return (static_cast<double>(k) * (static_cast<double>(m) + static_cast<double>(n)) <
            static_cast<double>(m) * static_cast<double>(n))
               ? k
               : 0;
}

// Compresses one layer at a time at each energy level and records the error.
// No cost guard here: the sweep is a measurement, not a deployment.
inline SensitivityReport sensitivity_sweep(const LayeredModel& model, ErrorEvaluator& evaluator,
                                           const std::string& dataset_id,
                                           const std::vector<double>& energy_levels,
                                           FactorCache* cache = nullptr) {
    for (double e : energy_levels)
        if (!(e > 0.0) || e > 1.0) throw InvalidEnergy("sweep energy must be in (0, 1]");
    const auto searchable = model.searchable_indices();
    if (searchable.empty()) throw SpaceShapeError("model has no searchable layers");

    FactorCache local(model);
    FactorCache& factors = cache ? *cache : local;

    SensitivityReport report;
    report.baseline_error =
        evaluator.evaluate(as_uncompressed(model), dataset_id, false).aggregate;

    const Scheme zeros(searchable.size(), 0);
    for (std::size_t pos = 0; pos < searchable.size(); ++pos) {
        const LayerSpec& layer = model.layers[searchable[pos]];
        for (double energy : energy_levels) {
            SensitivityEntry entry;
            entry.layer = layer.name;
            entry.energy = energy;
            entry.rank = rank_for_energy(factors.factorization(searchable[pos]).sigma, energy);
            Scheme scheme = zeros;
            scheme[pos] = entry.rank;
            try {
                entry.error =
                    evaluator.evaluate(apply_scheme(model, scheme, &factors), dataset_id, false)
                        .aggregate;
            } catch (const Error& e) {
                throw EvaluatorError("sensitivity sweep failed at layer " + layer.name +
                                     ", energy " + std::to_string(energy) + ": " + e.what());
            }
            entry.delta = entry.error - report.baseline_error;
            report.entries.push_back(std::move(entry));
        }
    }
    return report;
}

inline std::string sensitivity_csv(const SensitivityReport& report) {
    std::ostringstream out;
    out << "layer,energy,rank,error,delta_vs_baseline\n";
    char buf[128];
    for (const SensitivityEntry& e : report.entries) {
        std::snprintf(buf, sizeof(buf), "%s,%.12g,%d,%.12g,%.12g\n", e.layer.c_str(), e.energy,
                      e.rank, e.error, e.delta);
        out << buf;
    }
    return out.str();
}

// S[i][j] = rank_for_energy(sigma_i, e_ij), then the cost guard maps
// uneconomical ranks to the 0 sentinel. Row width stays exactly d.
inline SearchSpace build_space(const LayeredModel& model,
                               const std::vector<std::vector<double>>& per_layer_energies,
                               FactorCache* cache = nullptr) {
    const auto searchable = model.searchable_indices();
    if (per_layer_energies.size() != searchable.size())
        throw SpaceShapeError("expected " + std::to_string(searchable.size()) +
                              " energy lists, got " + std::to_string(per_layer_energies.size()));
    FactorCache local(model);
    FactorCache& factors = cache ? *cache : local;

    SearchSpace space;
    const std::size_t width = per_layer_energies.empty() ? 0 : per_layer_energies[0].size();
    if (width < 2) throw SpaceShapeError("every layer needs at least 2 options");
    for (std::size_t pos = 0; pos < searchable.size(); ++pos) {
        if (per_layer_energies[pos].size() != width)
            throw SpaceShapeError("ragged energy lists (row " + std::to_string(pos) + ")");
        const LayerSpec& layer = model.layers[searchable[pos]];
        std::vector<int> row;
        for (double energy : per_layer_energies[pos]) {
            const int k = rank_for_energy(factors.factorization(searchable[pos]).sigma, energy);
            row.push_back(cost_guarded_rank(layer.weights.rows(), layer.weights.cols(), k));
        }
        space.layer_names.push_back(layer.name);
        space.options.push_back(std::move(row));
        space.energy_grid.push_back(per_layer_energies[pos]);
    }
    return space;
}

// Naive manual baseline: equal-energy compression of every searchable layer;
// the cost guard applies.
inline Scheme manual_scheme(const LayeredModel& model, double energy,
                            FactorCache* cache = nullptr) {
    if (!(energy > 0.0) || energy > 1.0) throw InvalidEnergy("energy must be in (0, 1]");
    FactorCache local(model);
    FactorCache& factors = cache ? *cache : local;
    Scheme scheme;
    for (std::size_t idx : model.searchable_indices()) {
        const LayerSpec& layer = model.layers[idx];
        const int k = rank_for_energy(factors.factorization(idx).sigma, energy);
        scheme.push_back(cost_guarded_rank(layer.weights.rows(), layer.weights.cols(), k));
    }
    return scheme;
}

// Manual compression that exempts the named (sensitive) layers.
inline Scheme guided_manual_scheme(const LayeredModel& model, double energy,
                                   const std::set<std::string>& excluded,
                                   FactorCache* cache = nullptr) {
    const auto searchable = model.searchable_indices();
    std::set<std::string> names;
    for (std::size_t idx : searchable) names.insert(model.layers[idx].name);
    for (const std::string& name : excluded)
        if (!names.count(name)) throw UnknownLayer("unknown excluded layer " + name);

    Scheme scheme = manual_scheme(model, energy, cache);
    for (std::size_t pos = 0; pos < searchable.size(); ++pos)
        if (excluded.count(model.layers[searchable[pos]].name)) scheme[pos] = 0;
    return scheme;
}

// Materializes one scheme from sampled option indices.
inline Scheme scheme_from_indices(const SearchSpace& space, const std::vector<int>& indices) {
    if (indices.size() != space.num_layers())
        throw SpaceShapeError("index vector does not match space height");
    Scheme scheme(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= space.options[i].size())
            throw SpaceShapeError("option index out of range");
        scheme[i] = space.options[i][indices[i]];
    }
    return scheme;
}

}  // namespace ranksearch
