#pragma once

#include <cmath>
#include <string>

#include "ranksearch/errors.hpp"

namespace ranksearch {

enum class RewardMode { conservative, aggressive };

inline std::string to_string(RewardMode mode) {
    return mode == RewardMode::conservative ? "conservative" : "aggressive";
}

inline RewardMode reward_mode_from_string(const std::string& s) {
    if (s == "conservative") return RewardMode::conservative;
    if (s == "aggressive") return RewardMode::aggressive;
    throw ConfigError("unknown reward mode: " + s);
}

// Errors are percentages on a 0-100 scale; both reward functions are
// scale-sensitive, so that convention is part of the contract.
struct RewardConfig {
    RewardMode mode = RewardMode::conservative;
    double baseline_error = 0.0;  // percent, > 0
    double target_speedup = 1.2;  // > 1
    double punish_slope = 100.0;
    double punish_offset = 10.0;

    void validate() const {
        if (!(baseline_error > 0.0)) throw InvalidBaseline("baseline error must be > 0");
        if (!(target_speedup > 1.0)) throw ConfigError("target speedup must be > 1");
    }
};

// Conservative regime: small error differences around the baseline get
// exponential emphasis.
inline double reward_conservative(double error, double baseline_error) {
    return -std::exp(error - baseline_error);
}

// Aggressive regime: errors can be many times the baseline, so the ratio is
// square-rooted to tame the range.
inline double reward_aggressive(double error, double baseline_error) {
    if (!(baseline_error > 0.0)) throw InvalidBaseline("baseline error must be > 0");
    return -std::exp(std::sqrt(error / baseline_error));
}

// Linear penalty for schemes that miss the speedup target by delta_a.
inline double punish(double delta_a, double slope = 100.0, double offset = 10.0) {
    if (delta_a < 0.0) throw ContractViolation("punish called with negative speedup deficit");
    return -slope * delta_a - offset;
}

inline double reward(const RewardConfig& cfg, double error) {
    return cfg.mode == RewardMode::conservative
               ? reward_conservative(error, cfg.baseline_error)
               : reward_aggressive(error, cfg.baseline_error);
}

}  // namespace ranksearch
