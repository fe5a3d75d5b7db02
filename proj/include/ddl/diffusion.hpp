#pragma once

#include <iostream>
#include <optional>

#include "ddl/denoiser.hpp"
#include "ddl/optim.hpp"
#include "ddl/scenegen.hpp"

namespace ddl {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

// Timestep coefficients of the variance-preserving forward process
//   x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.
// Arrays are 0-indexed by t-1 for t in [1, T]; abar(0) == 1 by convention.
struct NoiseSchedule {
    i64 T = 0;
    std::vector<real> beta;
    std::vector<real> alpha;
    std::vector<real> alpha_bar;

    real abar(i64 t) const {
        check(t >= 0 && t <= T, "schedule: t out of range");
        return t == 0 ? real{1} : alpha_bar[static_cast<std::size_t>(t - 1)];
    }
    real beta_at(i64 t) const {
        check(t >= 1 && t <= T, "schedule: t out of range");
        return beta[static_cast<std::size_t>(t - 1)];
    }
    real alpha_at(i64 t) const {
        check(t >= 1 && t <= T, "schedule: t out of range");
        return alpha[static_cast<std::size_t>(t - 1)];
    }
};

inline NoiseSchedule make_schedule(i64 T, real beta1, real betaT) {
    check(T >= 1 && T <= 10000, "schedule: T must be in [1, 10^4]");
    check(beta1 > 0 && beta1 <= betaT && betaT < 1, "schedule: need 0 < beta_1 <= beta_T < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    real prod = 1;
    for (i64 t = 1; t <= T; ++t) {
        real frac = T > 1 ? static_cast<real>(t - 1) / static_cast<real>(T - 1) : real{0};
        real b = beta1 + frac * (betaT - beta1);
        s.beta[static_cast<std::size_t>(t - 1)] = b;
        s.alpha[static_cast<std::size_t>(t - 1)] = real{1} - b;
        prod *= real{1} - b;
        s.alpha_bar[static_cast<std::size_t>(t - 1)] = prod;
    }
    return s;
}

struct ScheduleConfig {
    i64 T = 200;
    real beta1 = 1e-4;
    real betaT = 0.02;
};

inline NoiseSchedule make_schedule(const ScheduleConfig& c) { return make_schedule(c.T, c.beta1, c.betaT); }

// Closed-form forward diffusion. Pure array math: targets never need
// gradients.
inline Tensor forward_diffuse(const Tensor& x0, i64 t, const Tensor& eps, const NoiseSchedule& s) {
    check(t >= 0 && t <= s.T, "forward_diffuse: t out of range");
    check_dims(eps.shape() == x0.shape(), "forward_diffuse: noise shape mismatch");
    real ab = s.abar(t);
    real a = std::sqrt(ab);
    real b = std::sqrt(real{1} - ab);
    std::vector<real> out(x0.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0.data()[i] + b * eps.data()[i];
    return Tensor::from_data(x0.shape(), std::move(out));
}

// Batch variant with one timestep per sample.
inline Tensor forward_diffuse_batch(const Tensor& x0, const std::vector<i64>& ts, const Tensor& eps,
                                    const NoiseSchedule& s) {
    check_dims(x0.shape().size() == 4, "forward_diffuse_batch: expected [N,C,H,W]");
    check_dims(static_cast<i64>(ts.size()) == x0.dim(0), "forward_diffuse_batch: one t per sample");
    check_dims(eps.shape() == x0.shape(), "forward_diffuse_batch: noise shape mismatch");
    i64 per = x0.numel() / x0.dim(0);
    std::vector<real> out(x0.data().size());
    for (i64 n = 0; n < x0.dim(0); ++n) {
        real ab = s.abar(ts[static_cast<std::size_t>(n)]);
        real a = std::sqrt(ab);
        real b = std::sqrt(real{1} - ab);
        for (i64 i = 0; i < per; ++i) {
            std::size_t idx = static_cast<std::size_t>(n * per + i);
            out[idx] = a * x0.data()[idx] + b * eps.data()[idx];
        }
    }
    return Tensor::from_data(x0.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Training steps
// ---------------------------------------------------------------------------

struct TrainStepResult {
    real loss = 0;
    bool applied = true; // false: non-finite loss or gradients, step skipped
};

// Generic noise-prediction step: draws per-sample timesteps and noise from
// `rng` (timesteps first, then the noise tensor), forms x_t, and minimizes
// the prediction MSE through `forward`.
template <typename Forward>
inline TrainStepResult noise_prediction_step(const Tensor& x0, const NoiseSchedule& sched, AdamW& opt,
                                             Rng& rng, Forward&& forward) {
    i64 N = x0.dim(0);
    std::vector<i64> ts(static_cast<std::size_t>(N));
    for (auto& t : ts) t = rng.uniform_int(1, sched.T);
    Tensor eps = Tensor::randn(x0.shape(), rng);
    Tensor xt = forward_diffuse_batch(x0, ts, eps, sched);
    Tensor pred = forward(xt, ts);
    Tensor loss = mse(pred, eps);
    real value = loss.item();
    if (!std::isfinite(value)) {
        opt.zero_grad();
        return {value, false};
    }
    backward(loss);
    auto applied = opt.step().applied;
    opt.zero_grad();
    return {value, applied};
}

// One unconditional noise-prediction step: MSE between predicted and
// injected noise, timesteps uniform in [1, T].
inline TrainStepResult train_denoiser_step(Denoiser& model, const Tensor& x0, const NoiseSchedule& sched,
                                           AdamW& opt, Rng& rng) {
    return noise_prediction_step(x0, sched, opt, rng, [&](const Tensor& xt, const std::vector<i64>& ts) {
        return model.forward(xt, ts);
    });
}

// One conditional step on hard targets; only the parameters the optimizer
// holds (the control branch) move.
inline TrainStepResult train_control_step(ControlledDenoiser& model, const Tensor& hard_x0, const Tensor& cond,
                                          const NoiseSchedule& sched, AdamW& opt, Rng& rng) {
    return noise_prediction_step(hard_x0, sched, opt, rng, [&](const Tensor& xt, const std::vector<i64>& ts) {
        return model.forward(xt, ts, cond);
    });
}

// Held-out noise-prediction MSE on a fixed evaluation set: one deterministic
// (t, eps) draw per image derived from `seed`, so different models are
// compared on identical probes.
template <typename Predict>
inline real heldout_noise_mse(const std::vector<Image>& images, const NoiseSchedule& sched, u64 seed,
                              Predict&& predict) {
    check(!images.empty(), "heldout_noise_mse: empty evaluation set");
    NoGradGuard ng;
    real total = 0;
    i64 count = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Rng rng(mix_seed(seed, i, 0xe7a1));
        const Image& img = images[i];
        Tensor x0 = Tensor::from_data({1, 3, img.height, img.width}, img.data);
        i64 t = rng.uniform_int(1, sched.T);
        Tensor eps = Tensor::randn(x0.shape(), rng);
        Tensor xt = forward_diffuse(x0, t, eps, sched);
        Tensor pred = predict(xt, std::vector<i64>{t}, i);
        Tensor diff = sub(pred, eps);
        for (real v : diff.data()) total += v * v;
        count += diff.numel();
    }
    return total / static_cast<real>(count);
}

// ---------------------------------------------------------------------------
// Ancestral sampling
// ---------------------------------------------------------------------------

// Noise-prediction callback used by the sampler; stub models in tests use
// the same surface.
using EpsFn = std::function<Tensor(const Tensor& xt, i64 t)>;

// Standard ancestral reverse pass from x_T ~ N(0, I), posterior variance
// beta_tilde. Deterministic in `seed`; the draw order is x_T first, then
// one z per step down to t = 2. Output clamped to [0,1] only at the end.
inline Image reverse_sample(const EpsFn& eps_fn, i64 height, i64 width, const NoiseSchedule& sched, u64 seed) {
    NoGradGuard ng;
    Rng rng(seed);
    Tensor x = Tensor::randn({1, 3, height, width}, rng);
    for (i64 t = sched.T; t >= 1; --t) {
        Tensor eps_hat = eps_fn(x, t);
        check_dims(eps_hat.shape() == x.shape(), "reverse_sample: model output shape mismatch");
        real ab = sched.abar(t);
        real ab_prev = sched.abar(t - 1);
        real a = sched.alpha_at(t);
        real b = sched.beta_at(t);
        real coef = b / std::sqrt(real{1} - ab);
        real inv_sqrt_a = real{1} / std::sqrt(a);
        std::vector<real> next(x.data().size());
        for (std::size_t i = 0; i < next.size(); ++i)
            next[i] = inv_sqrt_a * (x.data()[i] - coef * eps_hat.data()[i]);
        if (t > 1) {
            real sigma = std::sqrt((real{1} - ab_prev) / (real{1} - ab) * b);
            for (auto& v : next) v += sigma * rng.normal();
        }
        x = Tensor::from_data(x.shape(), std::move(next));
    }
    Image out(width, height);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::min(real{1}, std::max(real{0}, x.data()[i]));
    return out;
}

inline Image reverse_sample(const Denoiser& model, i64 height, i64 width, const NoiseSchedule& sched, u64 seed) {
    return reverse_sample([&](const Tensor& xt, i64 t) { return model.forward(xt, {t}); }, height, width,
                          sched, seed);
}

// Conditioning planes: normalized inverse depth + one-hot tag planes, in
// the order of `condition_set`.
inline Tensor conditioning_planes(const DepthMap& depth, const std::vector<Condition>& condition_set,
                                  const std::string& active_name) {
    i64 H = depth.height, W = depth.width;
    i64 planes = 1 + static_cast<i64>(condition_set.size());
    std::vector<real> data(static_cast<std::size_t>(planes * H * W), real{0});
    auto inv = normalized_inverse_depth(depth);
    std::copy(inv.begin(), inv.end(), data.begin());
    bool found = false;
    for (std::size_t c = 0; c < condition_set.size(); ++c) {
        if (condition_set[c].name != active_name) continue;
        found = true;
        std::fill(data.begin() + static_cast<std::ptrdiff_t>((1 + c) * static_cast<std::size_t>(H * W)),
                  data.begin() + static_cast<std::ptrdiff_t>((2 + c) * static_cast<std::size_t>(H * W)), real{1});
    }
    check(found, "conditioning_planes: condition not in configured set: " + active_name);
    return Tensor::from_data({1, planes, H, W}, std::move(data));
}

inline Image reverse_sample(const ControlledDenoiser& model, const Tensor& cond, const NoiseSchedule& sched,
                            u64 seed) {
    check(cond.defined(), "reverse_sample: controlled model requires conditioning");
    return reverse_sample([&](const Tensor& xt, i64 t) { return model.forward(xt, {t}, cond); }, cond.dim(2),
                          cond.dim(3), sched, seed);
}

// The challenging counterpart h_i^c of a scene: reverse diffusion guided by
// the scene's inverse depth and the condition tag.
inline Image generate_hard(const Scene& scene, const Condition& c, const std::vector<Condition>& condition_set,
                           const ControlledDenoiser& model, const NoiseSchedule& sched, u64 seed) {
    if (model.control_is_noop())
        std::cerr << "[ddl] warning: control branch is all-zero; generation ignores conditioning\n";
    Tensor cond = conditioning_planes(scene.depth, condition_set, c.name);
    return reverse_sample(model, cond, sched, mix_seed(scene.seed, static_cast<u64>(c.tag), seed, 0x9e4d));
}

} // namespace ddl
