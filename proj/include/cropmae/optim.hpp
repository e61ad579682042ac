#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cropmae/error.hpp"
#include "cropmae/tensor.hpp"

namespace cropmae::optim {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

template <class T>
struct AdamWState {
    std::vector<Tensor<T>> m, v;
    std::uint64_t step = 0;

    static AdamWState zeros_like(std::span<const Tensor<T>> params) {
        AdamWState s;
        for (const auto& p : params) {
            s.m.push_back(Tensor<T>::zeros(p.shape()));
            s.v.push_back(Tensor<T>::zeros(p.shape()));
        }
        return s;
    }
};

/// One AdamW update with decoupled decay:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p   (wd only where decay[i])
/// Rejects the whole step, leaving everything untouched, if any gradient is non-finite.
template <class T>
void adamw_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, std::span<const bool> decay,
                AdamWState<T>& state, double lr, const AdamWConfig& cfg) {
    if (grads.size() != params.size() || decay.size() != params.size()) {
        throw DimensionError("adamw_step: parameter/gradient/decay lists differ in length");
    }
    if (state.m.empty() && !params.empty()) state = AdamWState<T>::zeros_like(params);
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DimensionError("adamw_step: optimizer state does not match parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape()) {
            throw DimensionError("adamw_step: shape mismatch for parameter " + std::to_string(i));
        }
        if (!grads[i].all_finite()) {
            throw NumericError("non-finite gradient for parameter " + std::to_string(i) + "; step rejected");
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data();
        auto g = grads[i].data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        const double wd = decay[i] ? cfg.weight_decay : 0.0;
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
            const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
            const double pj = static_cast<double>(p[j]);
            p[j] = static_cast<T>(pj - lr * update - lr * wd * pj);
        }
    }
}

/// Warmup + cosine schedule. Epoch counts may be fractional.
struct ScheduleConfig {
    double base_lr = 1.5e-4;
    double effective_batch = 2048;  // batch used by the linear scaling rule
    bool scale_with_batch = true;   // peak = base_lr * effective_batch / 256
    double warmup_epochs = 10;
    double total_epochs = 400;
    double min_lr = 0;

    double peak_lr() const { return scale_with_batch ? base_lr * effective_batch / 256.0 : base_lr; }

    void validate() const {
        if (!(warmup_epochs >= 0 && warmup_epochs <= total_epochs)) throw ParameterError("warmup_epochs must lie in [0, total_epochs]");
        if (!(base_lr >= 0 && min_lr >= 0)) throw ParameterError("learning rates must be nonnegative");
        if (effective_batch <= 0) throw ParameterError("effective batch must be positive");
    }
};

inline double lr_at(std::uint64_t step, std::uint64_t steps_per_epoch, const ScheduleConfig& cfg) {
    const double peak = cfg.peak_lr();
    const double warmup = cfg.warmup_epochs * static_cast<double>(steps_per_epoch);
    const double total = cfg.total_epochs * static_cast<double>(steps_per_epoch);
    const double s = static_cast<double>(step);
    if (s < warmup) return peak * s / warmup;
    if (total <= warmup) return s >= total ? cfg.min_lr : peak;
    const double progress = std::min(1.0, (s - warmup) / (total - warmup));
    return cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace cropmae::optim
