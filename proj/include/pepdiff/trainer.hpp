#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "pepdiff/autodiff.hpp"
#include "pepdiff/common.hpp"
#include "pepdiff/denoiser.hpp"
#include "pepdiff/diffusion.hpp"
#include "pepdiff/schedule.hpp"

namespace pepdiff::train {

using denoise::DenoiserModel;
using denoise::NormStats;
using denoise::PocketMask;
using schedule::NoiseSchedule;

enum class MseReduction { Mean, Sum };

struct TrainConfig {
    std::size_t batch_size = 8;
    long epochs = 500;
    double base_lr = 5e-5;
    double lambda_mse = 0.9;
    double lambda_cos = 0.1;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double warmup_fraction = 0.1;
    MseReduction mse_reduction = MseReduction::Mean;

    /// Returns a warning string instead of failing when the lambda weights do
    /// not form a convex combination.
    std::string validate() const {
        if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("train config: epochs must be >= 0");
        if (!(base_lr > 0.0)) throw ConfigError("train config: base_lr must be > 0");
        if (lambda_mse < 0.0 || lambda_cos < 0.0)
            throw ConfigError("train config: lambda weights must be non-negative");
        if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
            throw ConfigError("train config: warmup_fraction must be in (0, 1)");
        if (std::abs(lambda_mse + lambda_cos - 1.0) > 1e-9)
            return "lambda_mse + lambda_cos = " + std::to_string(lambda_mse + lambda_cos) +
                   " (not 1); proceeding as given";
        return {};
    }
};

// ---------------------------------------------------------------------------
// Losses (double-precision scalar forms)
// ---------------------------------------------------------------------------

inline double mse_loss(const EmbeddingMatrix& pred, const EmbeddingMatrix& eps,
                       MseReduction reduction = MseReduction::Mean) {
    require_same_shape(pred, eps, "mse_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = double(pred.data[i]) - double(eps.data[i]);
        acc += d * d;
    }
    return reduction == MseReduction::Mean ? acc / double(pred.size()) : acc;
}

/// 1 - mean over rows of cos(pred_row, eps_row); rows with zero norm on
/// either side contribute similarity 0. Always in [0, 2].
inline double cosine_loss(const EmbeddingMatrix& pred, const EmbeddingMatrix& eps) {
    require_same_shape(pred, eps, "cosine_loss");
    double acc = 0.0;
    for (std::size_t r = 0; r < pred.rows; ++r) {
        double dot = 0.0, np = 0.0, ne = 0.0;
        for (std::size_t c = 0; c < pred.cols; ++c) {
            dot += double(pred.at(r, c)) * double(eps.at(r, c));
            np += double(pred.at(r, c)) * double(pred.at(r, c));
            ne += double(eps.at(r, c)) * double(eps.at(r, c));
        }
        acc += (np == 0.0 || ne == 0.0) ? 0.0 : dot / (std::sqrt(np) * std::sqrt(ne));
    }
    return 1.0 - acc / double(pred.rows);
}

inline double total_loss(const EmbeddingMatrix& pred, const EmbeddingMatrix& eps,
                         const TrainConfig& cfg) {
    return cfg.lambda_mse * mse_loss(pred, eps, cfg.mse_reduction) +
           cfg.lambda_cos * cosine_loss(pred, eps);
}

// ---------------------------------------------------------------------------
// Losses (tape forms, differentiable)
// ---------------------------------------------------------------------------

template <typename S>
typename ad::Tape<S>::NodeId mse_loss_node(ad::Tape<S>& t, typename ad::Tape<S>::NodeId pred,
                                           typename ad::Tape<S>::NodeId eps,
                                           MseReduction reduction = MseReduction::Mean) {
    const auto diff = t.add(pred, t.scale(eps, -1.0));
    auto loss = t.mean_all(t.mul(diff, diff));
    if (reduction == MseReduction::Sum)
        loss = t.scale(loss, double(t.value(pred).size()));
    return loss;
}

template <typename S>
typename ad::Tape<S>::NodeId cosine_loss_node(ad::Tape<S>& t, typename ad::Tape<S>::NodeId pred,
                                              typename ad::Tape<S>::NodeId eps) {
    // row cosines via an epsilon floor inside the inverse square roots; the
    // floor only matters on measure-zero degenerate rows
    const auto dots = t.row_sum(t.mul(pred, eps));
    const auto inv_p = t.rsqrt_shift(t.row_sum(t.mul(pred, pred)), 1e-12);
    const auto inv_e = t.rsqrt_shift(t.row_sum(t.mul(eps, eps)), 1e-12);
    const auto cos_rows = t.mul(dots, t.mul(inv_p, inv_e));
    return t.add(t.scalar(S(1)), t.scale(t.mean_all(cos_rows), -1.0));
}

template <typename S>
typename ad::Tape<S>::NodeId total_loss_node(ad::Tape<S>& t, typename ad::Tape<S>::NodeId pred,
                                             typename ad::Tape<S>::NodeId eps,
                                             const TrainConfig& cfg) {
    return t.add(t.scale(mse_loss_node(t, pred, eps, cfg.mse_reduction), cfg.lambda_mse),
                 t.scale(cosine_loss_node(t, pred, eps), cfg.lambda_cos));
}

// ---------------------------------------------------------------------------
// Feature normalization
// ---------------------------------------------------------------------------

/// Per-dimension mean/std pooled over every residue row of the given binder
/// embeddings (training set only); std floored at 1e-8.
inline NormStats fit_norm_stats(const std::vector<EmbeddingMatrix>& binders) {
    if (binders.empty()) throw InvalidArgument("fit_norm_stats: no embeddings");
    const std::size_t d = binders.front().cols;
    std::vector<double> sum(d, 0.0), sum2(d, 0.0);
    std::size_t rows = 0;
    for (const auto& b : binders) {
        if (b.cols != d) throw ShapeError("fit_norm_stats: embedding dimensions differ");
        for (std::size_t r = 0; r < b.rows; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                sum[c] += b.at(r, c);
                sum2[c] += double(b.at(r, c)) * b.at(r, c);
            }
        rows += b.rows;
    }
    NormStats s;
    s.mean.resize(d);
    s.std.resize(d);
    for (std::size_t c = 0; c < d; ++c) {
        const double mean = sum[c] / double(rows);
        const double var = std::max(0.0, sum2[c] / double(rows) - mean * mean);
        s.mean[c] = static_cast<float>(mean);
        s.std[c] = std::max(static_cast<float>(std::sqrt(var)), 1e-8f);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::map<std::string, Matrix<float>> m;
    std::map<std::string, Matrix<float>> v;
    long step = 0;
};

inline void adam_step(denoise::ParamMap& params,
                      const std::map<std::string, Matrix<float>>& grads, AdamState& state,
                      double lr, const TrainConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(state.step));
    for (const auto& [name, g] : grads) {
        auto& theta = params.at(name);
        auto& m = state.m.try_emplace(name, Matrix<float>(g.rows, g.cols)).first->second;
        auto& v = state.v.try_emplace(name, Matrix<float>(g.rows, g.cols)).first->second;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double gi = g.data[i];
            const double mi = cfg.adam_beta1 * m.data[i] + (1.0 - cfg.adam_beta1) * gi;
            const double vi = cfg.adam_beta2 * v.data[i] + (1.0 - cfg.adam_beta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            theta.data[i] = static_cast<float>(
                double(theta.data[i]) - lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainExample {
    EmbeddingMatrix receptor;  // L x d_emb, raw (unnormalized)
    PocketMask mask;
    EmbeddingMatrix binder;  // L' x d_emb, raw
};

struct EpochStats {
    long epoch = 0;  // 1-based, includes any resumed offset
    double mean_loss = 0.0;
    double mse_component = 0.0;
    double cos_component = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    long global_step = 0;
};

/// One denoising-objective run: per step, draw a batch, per example draw t
/// and noise, predict in train mode, average the combined loss over the
/// batch, and apply one Adam update under the warmup schedule. Deterministic
/// given cfg.seed. model.norm_stats must already be fitted (see
/// fit_norm_stats); both binder and receptor features pass through it.
inline TrainResult train(DenoiserModel& model, const std::vector<TrainExample>& dataset,
                         const NoiseSchedule& sched, const TrainConfig& cfg,
                         long start_epoch = 0, long start_step = 0,
                         std::ostream* warn_stream = nullptr) {
    const std::string warning = cfg.validate();
    if (!warning.empty() && warn_stream) *warn_stream << "warning: " << warning << "\n";
    if (dataset.empty()) throw InvalidArgument("train: dataset is empty");
    if (sched.T != model.config.T)
        throw ConfigError("train: schedule T and model T differ");
    model.norm_stats.validate();

    const std::size_t binder_rows = dataset.front().binder.rows;
    for (const auto& ex : dataset) {
        if (ex.binder.cols != model.config.d_emb || ex.receptor.cols != model.config.d_emb)
            throw ShapeError("train: embedding dimension differs from model d_emb");
        if (ex.binder.rows != binder_rows)
            throw InvalidArgument("train: binder lengths differ; runs are fixed-length");
        ex.mask.validate(ex.receptor.rows);
    }

    // normalize once up front
    std::vector<EmbeddingMatrix> x0(dataset.size()), z(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        x0[i] = denoise::normalize(dataset[i].binder, model.norm_stats);
        z[i] = denoise::normalize(dataset[i].receptor, model.norm_stats);
    }

    const long steps_per_epoch =
        static_cast<long>((dataset.size() + cfg.batch_size - 1) / cfg.batch_size);
    const schedule::WarmupSpec warmup{cfg.base_lr, (start_epoch + cfg.epochs) * steps_per_epoch,
                                      cfg.warmup_fraction};

    TrainResult result;
    result.global_step = start_step;
    AdamState adam;
    adam.step = start_step;
    Rng rng(mix_seed(cfg.seed, 0x7247ULL));
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    EmbeddingMatrix eps(binder_rows, model.config.d_emb);
    for (long e = 0; e < cfg.epochs; ++e) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0, epoch_mse = 0.0, epoch_cos = 0.0;
        double last_lr = 0.0;
        long batches = 0;

        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            const double inv_batch = 1.0 / double(end - begin);

            std::map<std::string, Matrix<float>> grads;
            double batch_loss = 0.0, batch_mse = 0.0, batch_cos = 0.0;

            for (std::size_t bi = begin; bi < end; ++bi) {
                const std::size_t idx = order[bi];
                const int t = 1 + static_cast<int>(rng.uniform_index(sched.T));
                rng.fill_normal(eps);
                const EmbeddingMatrix x_t = diffusion::q_sample(x0[idx], t, eps, sched);

                ad::Tape<float> tape;
                const auto ids = denoise::register_params(tape, model.params, true);
                const auto fwd = denoise::build_forward<float>(
                    tape, ids, model.config, x_t, z[idx], dataset[idx].mask, t,
                    /*train_mode=*/true,
                    mix_seed(cfg.seed, 0xD0D0ULL + std::uint64_t(result.global_step) * 131 + bi));
                const auto eps_node = tape.constant(eps);
                const auto mse_node = mse_loss_node(tape, fwd.out, eps_node, cfg.mse_reduction);
                const auto cos_node = cosine_loss_node(tape, fwd.out, eps_node);
                const auto loss = t.add
                    ? 0
                    : 0;  // placeholder, replaced below
                (void)loss;
                const auto total =
                    tape.add(tape.scale(mse_node, cfg.lambda_mse),
                             tape.scale(cos_node, cfg.lambda_cos));
                tape.backward(total);

                const double loss_v = tape.value(total).at(0, 0);
                if (!std::isfinite(loss_v))
                    throw DivergenceError("train: non-finite loss at step " +
                                          std::to_string(result.global_step));
                batch_loss += loss_v * inv_batch;
                batch_mse += tape.value(mse_node).at(0, 0) * inv_batch;
                batch_cos += tape.value(cos_node).at(0, 0) * inv_batch;

                for (const auto& [name, id] : ids) {
                    if (!DenoiserModel::trainable(name) || !tape.has_grad(id)) continue;
                    const auto& g = tape.grad(id);
                    auto [it, fresh] = grads.try_emplace(name, Matrix<float>(g.rows, g.cols));
                    for (std::size_t k = 0; k < g.size(); ++k)
                        it->second.data[k] += static_cast<float>(g.data[k] * inv_batch);
                    (void)fresh;
                }
            }

            const double lr =
                schedule::warmup_lr(warmup, std::min(result.global_step, warmup.total_steps));
            adam_step(model.params, grads, adam, lr, cfg);
            ++result.global_step;
            last_lr = lr;
            epoch_loss += batch_loss;
            epoch_mse += batch_mse;
            epoch_cos += batch_cos;
            ++batches;
        }

        EpochStats stats;
        stats.epoch = start_epoch + e + 1;
        stats.mean_loss = epoch_loss / double(batches);
        stats.mse_component = epoch_mse / double(batches);
        stats.cos_component = epoch_cos / double(batches);
        stats.lr = last_lr;
        result.history.push_back(stats);
    }
    return result;
}

/// CSV with one row per epoch: epoch, mean_loss, mse_component,
/// cos_component, lr.
inline void write_loss_history(std::ostream& os, const std::vector<EpochStats>& history) {
    os << "epoch,mean_loss,mse_component,cos_component,lr\n";
    os.precision(10);
    for (const auto& e : history)
        os << e.epoch << ',' << e.mean_loss << ',' << e.mse_component << ','
           << e.cos_component << ',' << e.lr << '\n';
}

}  // namespace pepdiff::train
