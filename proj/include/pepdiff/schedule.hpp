#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pepdiff/common.hpp"

namespace pepdiff::schedule {

/// Precomputed diffusion coefficients for a T-step cosine variance schedule.
///
/// alpha_bar has T+1 entries indexed by t = 0..T with alpha_bar[0] = 1.
/// alpha / beta / sigma are indexed by t = 1..T through the accessors below.
/// Coefficients are accumulated in double and immutable after construction.
struct NoiseSchedule {
    int T = 0;
    double s = 0.0;
    std::vector<double> alpha_bar;  // size T+1
    std::vector<double> alpha_;     // size T, [t-1] holds alpha_t
    std::vector<double> beta_;      // size T
    std::vector<double> sigma_;     // size T, posterior stddev, sigma_1 = 0

    double alpha(int t) const { return alpha_[check(t)]; }
    double beta(int t) const { return beta_[check(t)]; }
    double sigma(int t) const { return sigma_[check(t)]; }

private:
    std::size_t check(int t) const {
        if (t < 1 || t > T)
            throw InvalidArgument("schedule: t=" + std::to_string(t) + " outside [1, " +
                                  std::to_string(T) + "]");
        return static_cast<std::size_t>(t - 1);
    }
};

constexpr double kBetaMax = 0.999;

/// Squared-cosine decay, normalized so the value at t = 0 is 1. The raw value
/// reaches 0 at t = T; the clipping in build_schedule keeps the stored
/// cumulative product positive.
inline double cosine_alpha_bar(int t, int T, double s) {
    const double pi_half = 3.14159265358979323846 / 2.0;
    const double num = std::cos((static_cast<double>(t) / T + s) / (1.0 + s) * pi_half);
    const double den = std::cos(s / (1.0 + s) * pi_half);
    const double v = num / den;
    return v * v;
}

inline NoiseSchedule build_schedule(int T, double s) {
    if (T < 1) throw InvalidArgument("build_schedule: T must be >= 1");
    if (!(s > 0.0)) throw InvalidArgument("build_schedule: s must be > 0");

    NoiseSchedule out;
    out.T = T;
    out.s = s;
    out.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 0.0);
    out.alpha_.resize(T);
    out.beta_.resize(T);
    out.sigma_.resize(T);

    out.alpha_bar[0] = 1.0;
    double running = 1.0;
    double prev_raw = cosine_alpha_bar(0, T, s);  // == 1
    for (int t = 1; t <= T; ++t) {
        const double raw = cosine_alpha_bar(t, T, s);
        double beta = 1.0 - raw / prev_raw;
        if (beta > kBetaMax) beta = kBetaMax;
        const double alpha = 1.0 - beta;
        running *= alpha;
        out.alpha_[t - 1] = alpha;
        out.beta_[t - 1] = beta;
        out.alpha_bar[t] = running;
        prev_raw = raw;
    }
    // Posterior variance of q(x_{t-1} | x_t, x_0). Zero at t = 1, so the final
    // reverse step is deterministic.
    out.sigma_[0] = 0.0;
    for (int t = 2; t <= T; ++t) {
        const double var =
            (1.0 - out.alpha_bar[t - 1]) / (1.0 - out.alpha_bar[t]) * out.beta_[t - 1];
        out.sigma_[t - 1] = std::sqrt(var);
    }
    return out;
}

/// (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) for the closed-form noising step.
inline std::pair<double, double> marginal_coeffs(const NoiseSchedule& sched, int t) {
    if (t < 1 || t > sched.T)
        throw InvalidArgument("marginal_coeffs: t=" + std::to_string(t) + " outside [1, " +
                              std::to_string(sched.T) + "]");
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    return {std::sqrt(ab), std::sqrt(1.0 - ab)};
}

// ---------------------------------------------------------------------------
// Learning-rate warmup
// ---------------------------------------------------------------------------

struct WarmupSpec {
    double base_lr = 5e-5;
    long total_steps = 0;
    double warmup_fraction = 0.1;
};

/// Linear ramp from 0 to base_lr over the first warmup_fraction of all steps,
/// constant base_lr afterwards.
inline double warmup_lr(const WarmupSpec& spec, long step) {
    if (!(spec.base_lr > 0.0)) throw InvalidArgument("warmup_lr: base_lr must be > 0");
    if (!(spec.warmup_fraction > 0.0 && spec.warmup_fraction < 1.0))
        throw InvalidArgument("warmup_lr: warmup_fraction must be in (0, 1)");
    if (step < 0 || step > spec.total_steps)
        throw InvalidArgument("warmup_lr: step " + std::to_string(step) + " outside [0, " +
                              std::to_string(spec.total_steps) + "]");
    const double warm = spec.warmup_fraction * static_cast<double>(spec.total_steps);
    if (warm <= 0.0) return spec.base_lr;
    const double frac = static_cast<double>(step) / warm;
    return frac >= 1.0 ? spec.base_lr : spec.base_lr * frac;
}

}  // namespace pepdiff::schedule
