#pragma once

#include <cmath>
#include <cstdint>

#include "pepdiff/common.hpp"
#include "pepdiff/denoiser.hpp"
#include "pepdiff/schedule.hpp"

namespace pepdiff::diffusion {

using schedule::NoiseSchedule;

/// Closed-form forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline EmbeddingMatrix q_sample(const EmbeddingMatrix& x0, int t, const EmbeddingMatrix& eps,
                                const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "q_sample");
    const auto [a, b] = schedule::marginal_coeffs(sched, t);
    EmbeddingMatrix out(x0.rows, x0.cols);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = static_cast<float>(a * x0.data[i] + b * eps.data[i]);
    return out;
}

/// Reverse-step mean: (x_t - (1 - alpha_t)/sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t).
inline EmbeddingMatrix posterior_mean(const EmbeddingMatrix& x_t,
                                      const EmbeddingMatrix& eps_pred, int t,
                                      const NoiseSchedule& sched) {
    require_same_shape(x_t, eps_pred, "posterior_mean");
    const double alpha = sched.alpha(t);
    const double abar = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    const double coeff = (1.0 - alpha) / std::sqrt(1.0 - abar);
    EmbeddingMatrix out(x_t.rows, x_t.cols);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] =
            static_cast<float>(inv_sqrt_alpha * (double(x_t.data[i]) - coeff * eps_pred.data[i]));
    return out;
}

/// One reverse transition: mean + sigma_t * noise. sigma_1 is zero, so the
/// final step is deterministic and the noise argument is ignored there.
inline EmbeddingMatrix reverse_step(const EmbeddingMatrix& x_t, const EmbeddingMatrix& eps_pred,
                                    int t, const NoiseSchedule& sched,
                                    const EmbeddingMatrix& noise) {
    require_same_shape(x_t, noise, "reverse_step");
    EmbeddingMatrix out = posterior_mean(x_t, eps_pred, t, sched);
    const double sigma = sched.sigma(t);
    if (sigma > 0.0)
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] = static_cast<float>(double(out.data[i]) + sigma * noise.data[i]);
    return out;
}

/// Full reverse chain around an arbitrary noise predictor; the conditioned
/// model path wraps this. Draw order is pinned: x_T first, then per-step
/// noise for t = T..2 (none at t = 1). The result is de-normalized with
/// `stats` before returning.
template <typename EpsFn>
EmbeddingMatrix generate_with(EpsFn&& eps_fn, std::size_t length, std::size_t d_emb,
                              const NoiseSchedule& sched, std::uint64_t seed,
                              const denoise::NormStats& stats) {
    if (length < 1 || d_emb < 1) throw InvalidArgument("generate: length and d_emb must be >= 1");
    Rng rng(mix_seed(seed, 0x5A3D1EULL));
    EmbeddingMatrix x(length, d_emb);
    rng.fill_normal(x);

    EmbeddingMatrix noise(length, d_emb);
    for (int t = sched.T; t >= 1; --t) {
        const EmbeddingMatrix eps_pred = eps_fn(x, t);
        require_same_shape(x, eps_pred, "generate: eps prediction");
        if (t >= 2)
            rng.fill_normal(noise);
        else
            noise = EmbeddingMatrix(length, d_emb, 0.0f);
        x = reverse_step(x, eps_pred, t, sched, noise);
    }
    if (!x.all_finite())
        throw DivergenceError("generate: non-finite values in the sampled embedding");
    return denoise::denormalize(x, stats);
}

/// Receptor-conditioned sampling. `z_normalized` must already be in the
/// model's normalized feature space; the output is de-normalized back to
/// embedding space.
inline EmbeddingMatrix generate(const denoise::DenoiserModel& model,
                                const EmbeddingMatrix& z_normalized,
                                const denoise::PocketMask& mask, std::size_t length,
                                const NoiseSchedule& sched, std::uint64_t seed) {
    if (sched.T != model.config.T)
        throw ConfigError("generate: schedule has T=" + std::to_string(sched.T) +
                          " but the model was configured with T=" +
                          std::to_string(model.config.T));
    return generate_with(
        [&](const EmbeddingMatrix& x_t, int t) {
            return denoise::predict_noise(model, x_t, z_normalized, mask, t, false);
        },
        length, model.config.d_emb, sched, seed, model.norm_stats);
}

}  // namespace pepdiff::diffusion
