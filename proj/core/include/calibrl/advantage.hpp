#pragma once

#include "calibrl/types.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace calibrl {

/// Group-relative advantages of G rewards.
///
/// mean_centered:  A_i = R_i - mean(R)
/// std_normalized: A_i = (R_i - mean(R)) / std(R), population std; a zero-variance
///                 group yields all zeros.
///
/// The trajectory advantage applies unchanged to every token of the trajectory.
/// Throws InputError for fewer than two rewards.
std::vector<double> group_advantages(std::span<const double> rewards, AdvantageMode mode);

struct RarityPoint {
    int k = 0;                   ///< number of hi-reward members
    double minority_abs_adv = 0; ///< |A| of the smaller class (hi class when k == G - k)
    double majority_abs_adv = 0;
};

/// Mean-centered |A| of each class for k = 1..G-1 hi-reward members in a binary group.
std::vector<RarityPoint> rarity_curve(int G, double reward_hi = 1.0, double reward_lo = 0.0);

/// CSV with header k,minority_abs_adv,majority_abs_adv.
void write_rarity_csv(std::span<const RarityPoint> curve, std::ostream& out);

} // namespace calibrl
