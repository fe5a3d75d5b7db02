#pragma once

#include <cmath>
#include <vector>

#include "ddl/tensor.hpp"

namespace ddl {

struct AdamWConfig {
    real lr = real{1e-3};
    real beta1 = real{0.9};
    real beta2 = real{0.999};
    real eps = real{1e-8};
    real weight_decay = real{0};
};

// Decoupled-weight-decay Adam with bias correction. Moments are
// zero-initialized; the step counter advances once per applied step.
class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<Tensor> params, AdamWConfig cfg) : cfg_(cfg), params_(std::move(params)) {
        for (const auto& p : params_) {
            m_.emplace_back(p.data().size(), real{0});
            v_.emplace_back(p.data().size(), real{0});
        }
    }

    struct StepResult {
        bool applied = true; // false when a non-finite gradient aborted the step
    };

    // One update over all registered parameters. If any gradient is NaN or
    // infinite the step is aborted: parameters, moments and the counter are
    // left untouched and the result is flagged.
    StepResult step() {
        for (const auto& p : params_)
            for (real g : p.grad())
                if (!std::isfinite(g)) return {false};

        ++t_;
        real bc1 = real{1} - std::pow(cfg_.beta1, static_cast<real>(t_));
        real bc2 = real{1} - std::pow(cfg_.beta2, static_cast<real>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].data();
            const auto& g = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (real{1} - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (real{1} - cfg_.beta2) * g[j] * g[j];
                real mhat = m[j] / bc1;
                real vhat = v[j] / bc2;
                p[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[j]);
            }
        }
        return {true};
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    i64 step_count() const { return t_; }
    void set_lr(real lr) { cfg_.lr = lr; }
    real lr() const { return cfg_.lr; }
    const std::vector<Tensor>& params() const { return params_; }

    // Moment access for checkpointing.
    std::vector<std::vector<real>>& moment1() { return m_; }
    std::vector<std::vector<real>>& moment2() { return v_; }
    void set_step_count(i64 t) { t_ = t; }

private:
    AdamWConfig cfg_;
    std::vector<Tensor> params_;
    std::vector<std::vector<real>> m_;
    std::vector<std::vector<real>> v_;
    i64 t_ = 0;
};

} // namespace ddl
