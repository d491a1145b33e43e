#include "calibrl/advantage.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace calibrl {

std::vector<double> group_advantages(std::span<const double> rewards, AdvantageMode mode) {
    if (rewards.size() < 2) throw InputError("group_advantages requires at least two rewards");
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;

    std::vector<double> adv(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - mean;
    if (mode == AdvantageMode::mean_centered) return adv;

    double var = 0.0;
    for (double a : adv) var += a * a;
    var /= n;
    const double sd = std::sqrt(var);
    if (sd == 0.0) return std::vector<double>(rewards.size(), 0.0);
    for (double& a : adv) a /= sd;
    return adv;
}

std::vector<RarityPoint> rarity_curve(int G, double reward_hi, double reward_lo) {
    if (G < 2) throw InputError("rarity_curve requires G >= 2");
    std::vector<RarityPoint> curve;
    for (int k = 1; k < G; ++k) {
        // Mean-centered |A| is invariant under swapping the two reward levels, so
        // the row for k equals the row for G - k; evaluating the mirrored group
        // with the minority on the hi level makes that hold bit for bit too.
        const int minority = std::min(k, G - k);
        std::vector<double> rewards(static_cast<std::size_t>(G), reward_lo);
        for (int i = 0; i < minority; ++i) rewards[static_cast<std::size_t>(i)] = reward_hi;
        const auto adv = group_advantages(rewards, AdvantageMode::mean_centered);
        curve.push_back(RarityPoint{k, std::abs(adv.front()), std::abs(adv.back())});
    }
    return curve;
}

void write_rarity_csv(std::span<const RarityPoint> curve, std::ostream& out) {
    out << "k,minority_abs_adv,majority_abs_adv\n";
    char buf[96];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof buf, "%d,%.15g,%.15g\n", p.k, p.minority_abs_adv, p.majority_abs_adv);
        out << buf;
    }
}

} // namespace calibrl
