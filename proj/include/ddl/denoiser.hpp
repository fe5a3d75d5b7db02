#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ddl/ops.hpp"

namespace ddl {

// ---------------------------------------------------------------------------
// Layer building blocks
// ---------------------------------------------------------------------------

struct ConvLayer {
    Tensor w, b;
    i64 stride = 1;
    i64 pad = 0;

    static ConvLayer make(i64 in, i64 out, i64 k, i64 stride, i64 pad, Rng& rng, bool zero_init = false) {
        ConvLayer l;
        l.stride = stride;
        l.pad = pad;
        if (zero_init) {
            l.w = Tensor::zeros({out, in, k, k}, true);
        } else {
            real std = std::sqrt(real{2} / static_cast<real>(in * k * k));
            l.w = Tensor::randn({out, in, k, k}, rng, std, true);
        }
        l.b = Tensor::zeros({out}, true);
        return l;
    }

    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct NormLayer {
    Tensor gamma, beta;
    i64 groups = 1;

    static NormLayer make(i64 channels) {
        NormLayer l;
        l.gamma = Tensor::full({channels}, real{1}, true);
        l.beta = Tensor::zeros({channels}, true);
        l.groups = channels % 8 == 0 ? channels / 8 : 1;
        return l;
    }

    Tensor operator()(const Tensor& x) const { return group_norm(x, gamma, beta, groups); }
};

struct LinearLayer {
    Tensor w, b;

    static LinearLayer make(i64 in, i64 out, Rng& rng) {
        LinearLayer l;
        l.w = Tensor::randn({in, out}, rng, std::sqrt(real{2} / static_cast<real>(in)), true);
        l.b = Tensor::zeros({out}, true);
        return l;
    }

    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

using ParamMap = std::map<std::string, Tensor>;

namespace detail {

inline void reg(ParamMap& m, const std::string& prefix, const ConvLayer& l) {
    m.emplace(prefix + ".w", l.w);
    m.emplace(prefix + ".b", l.b);
}
inline void reg(ParamMap& m, const std::string& prefix, const NormLayer& l) {
    m.emplace(prefix + ".g", l.gamma);
    m.emplace(prefix + ".b", l.beta);
}
inline void reg(ParamMap& m, const std::string& prefix, const LinearLayer& l) {
    m.emplace(prefix + ".w", l.w);
    m.emplace(prefix + ".b", l.b);
}

inline std::vector<Tensor> values(const ParamMap& m) {
    std::vector<Tensor> out;
    out.reserve(m.size());
    for (const auto& [k, v] : m) out.push_back(v);
    return out;
}

// Sinusoidal features for integer timesteps, shape [N, dim].
inline Tensor time_features(const std::vector<i64>& ts, i64 dim) {
    i64 half = dim / 2;
    std::vector<real> data(ts.size() * static_cast<std::size_t>(dim));
    for (std::size_t n = 0; n < ts.size(); ++n) {
        for (i64 i = 0; i < half; ++i) {
            real freq = std::exp(-std::log(real{10000}) * static_cast<real>(i) / static_cast<real>(half - 1));
            real arg = static_cast<real>(ts[n]) * freq;
            data[n * static_cast<std::size_t>(dim) + static_cast<std::size_t>(i)] = std::sin(arg);
            data[n * static_cast<std::size_t>(dim) + static_cast<std::size_t>(half + i)] = std::cos(arg);
        }
    }
    return Tensor::from_data({static_cast<i64>(ts.size()), dim}, std::move(data));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Denoiser: small two-level UNet predicting the injected noise
// ---------------------------------------------------------------------------

struct DenoiserConfig {
    i64 image_channels = 3;
    i64 base_channels = 16;
    i64 time_dim = 32;
    bool zero_init_head = true; // standard init; off in tests probing gradients
};

// Feature maps exposed to the control branch, in locked-forward order.
struct DenoiserTaps {
    Tensor h0;  // [N, C, H, W]
    Tensor h1;  // [N, 2C, H/2, W/2]
    Tensor mid; // [N, 2C, H/2, W/2]
};

class Denoiser {
public:
    Denoiser() = default;
    Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
        i64 C = cfg.base_channels;
        time_trunk_ = LinearLayer::make(cfg.time_dim, cfg.time_dim, rng);
        time_head0_ = LinearLayer::make(cfg.time_dim, C, rng);
        time_head1_ = LinearLayer::make(cfg.time_dim, 2 * C, rng);
        enc0a_ = ConvLayer::make(cfg.image_channels, C, 3, 1, 1, rng);
        gn0a_ = NormLayer::make(C);
        enc0b_ = ConvLayer::make(C, C, 3, 1, 1, rng);
        gn0b_ = NormLayer::make(C);
        down1_ = ConvLayer::make(C, 2 * C, 3, 2, 1, rng);
        gn1a_ = NormLayer::make(2 * C);
        enc1b_ = ConvLayer::make(2 * C, 2 * C, 3, 1, 1, rng);
        gn1b_ = NormLayer::make(2 * C);
        mid_ = ConvLayer::make(2 * C, 2 * C, 3, 1, 1, rng);
        gnm_ = NormLayer::make(2 * C);
        dec0a_ = ConvLayer::make(2 * C, C, 3, 1, 1, rng);
        gnd_ = NormLayer::make(C);
        dec0b_ = ConvLayer::make(C, C, 3, 1, 1, rng);
        gnd2_ = NormLayer::make(C);
        out_ = ConvLayer::make(C, cfg.image_channels, 3, 1, 1, rng, cfg.zero_init_head);
    }

    const DenoiserConfig& config() const { return cfg_; }

    // Time embedding shared by the backbone and any attached branch copy.
    Tensor embed_time(const std::vector<i64>& ts) const {
        return silu(time_trunk_(detail::time_features(ts, cfg_.time_dim)));
    }

    // Encoder pass; optional additive injections modulate the tapped
    // feature maps (zero tensors leave the pass unchanged).
    DenoiserTaps encode(const Tensor& x, const Tensor& temb, const DenoiserTaps* inject = nullptr) const {
        Tensor h0 = silu(gn0a_(enc0a_(x)));
        h0 = add_sample_channel(h0, time_head0_(temb));
        h0 = silu(gn0b_(enc0b_(h0)));
        if (inject && inject->h0.defined()) h0 = add(h0, inject->h0);
        Tensor h1 = silu(gn1a_(down1_(h0)));
        h1 = add_sample_channel(h1, time_head1_(temb));
        h1 = silu(gn1b_(enc1b_(h1)));
        if (inject && inject->h1.defined()) h1 = add(h1, inject->h1);
        Tensor m = silu(gnm_(mid_(h1)));
        if (inject && inject->mid.defined()) m = add(m, inject->mid);
        return {h0, h1, m};
    }

    Tensor decode(const DenoiserTaps& taps) const {
        Tensor u = silu(gnd_(dec0a_(upsample_nearest2x(taps.mid))));
        u = add(u, taps.h0);
        u = silu(gnd2_(dec0b_(u)));
        return out_(u);
    }

    Tensor forward(const Tensor& x, const std::vector<i64>& ts, const DenoiserTaps* inject = nullptr) const {
        check_dims(x.shape().size() == 4 && x.dim(1) == cfg_.image_channels, "denoiser: bad input shape");
        check_dims(static_cast<i64>(ts.size()) == x.dim(0), "denoiser: one timestep per sample required");
        Tensor temb = embed_time(ts);
        return decode(encode(x, temb, inject));
    }

    ParamMap named_params(const std::string& prefix = "d") const {
        ParamMap m;
        detail::reg(m, prefix + "/time_trunk", time_trunk_);
        detail::reg(m, prefix + "/time_head0", time_head0_);
        detail::reg(m, prefix + "/time_head1", time_head1_);
        detail::reg(m, prefix + "/enc0a", enc0a_);
        detail::reg(m, prefix + "/gn0a", gn0a_);
        detail::reg(m, prefix + "/enc0b", enc0b_);
        detail::reg(m, prefix + "/gn0b", gn0b_);
        detail::reg(m, prefix + "/down1", down1_);
        detail::reg(m, prefix + "/gn1a", gn1a_);
        detail::reg(m, prefix + "/enc1b", enc1b_);
        detail::reg(m, prefix + "/gn1b", gn1b_);
        detail::reg(m, prefix + "/mid", mid_);
        detail::reg(m, prefix + "/gnm", gnm_);
        detail::reg(m, prefix + "/dec0a", dec0a_);
        detail::reg(m, prefix + "/gnd", gnd_);
        detail::reg(m, prefix + "/dec0b", dec0b_);
        detail::reg(m, prefix + "/gnd2", gnd2_);
        detail::reg(m, prefix + "/out", out_);
        return m;
    }

    std::vector<Tensor> params() const { return detail::values(named_params()); }

    void set_requires_grad(bool on) {
        for (auto& [name, t] : named_params()) t.node()->requires_grad = on;
    }

    // Encoder-side layers, copied by the control branch.
    friend class ControlledDenoiser;

private:
    DenoiserConfig cfg_;
    LinearLayer time_trunk_, time_head0_, time_head1_;
    ConvLayer enc0a_, enc0b_, down1_, enc1b_, mid_, dec0a_, dec0b_, out_;
    NormLayer gn0a_, gn0b_, gn1a_, gn1b_, gnm_, gnd_, gnd2_;
};

// ---------------------------------------------------------------------------
// Control branch: trainable encoder copy + condition encoder + zero convs
// ---------------------------------------------------------------------------

// Depth- and tag-conditioned wrapper around a frozen denoiser. The branch
// output enters the locked backbone through 1x1 convolutions initialized to
// exact zeros, so at attach time the controlled model reproduces the
// unconditional one.
class ControlledDenoiser {
public:
    ControlledDenoiser() = default;

    // `cond_channels` = 1 inverse-depth plane + one plane per condition tag.
    ControlledDenoiser(std::shared_ptr<Denoiser> locked, i64 cond_channels, Rng& rng)
        : locked_(std::move(locked)), cond_channels_(cond_channels) {
        const auto& cfg = locked_->config();
        i64 C = cfg.base_channels;
        locked_->set_requires_grad(false);

        // Deep-copy encoder-side parameters so the copy trains independently
        // of the frozen backbone it was instantiated from.
        copy_ = *locked_;
        auto clone = [](ConvLayer& l) {
            l.w = l.w.detach_copy(true);
            l.b = l.b.detach_copy(true);
        };
        auto clone_n = [](NormLayer& l) {
            l.gamma = l.gamma.detach_copy(true);
            l.beta = l.beta.detach_copy(true);
        };
        auto clone_l = [](LinearLayer& l) {
            l.w = l.w.detach_copy(true);
            l.b = l.b.detach_copy(true);
        };
        clone_l(copy_.time_trunk_);
        clone_l(copy_.time_head0_);
        clone_l(copy_.time_head1_);
        clone(copy_.enc0a_);
        clone_n(copy_.gn0a_);
        clone(copy_.enc0b_);
        clone_n(copy_.gn0b_);
        clone(copy_.down1_);
        clone_n(copy_.gn1a_);
        clone(copy_.enc1b_);
        clone_n(copy_.gn1b_);
        clone(copy_.mid_);
        clone_n(copy_.gnm_);

        cond_in_ = ConvLayer::make(cond_channels, C, 3, 1, 1, rng);
        cond_gn_ = NormLayer::make(C);
        zero0_ = ConvLayer::make(C, C, 1, 1, 0, rng, /*zero_init=*/true);
        zero1_ = ConvLayer::make(2 * C, 2 * C, 1, 1, 0, rng, true);
        zero2_ = ConvLayer::make(2 * C, 2 * C, 1, 1, 0, rng, true);
    }

    const Denoiser& locked() const { return *locked_; }
    i64 cond_channels() const { return cond_channels_; }

    bool control_is_noop() const {
        for (const auto& l : {&zero0_, &zero1_, &zero2_}) {
            for (real v : l->w.data())
                if (v != real{0}) return false;
            for (real v : l->b.data())
                if (v != real{0}) return false;
        }
        return true;
    }

    // Controlled forward: locked backbone plus zero-conv modulated control
    // features computed from (x, cond).
    Tensor forward(const Tensor& x, const std::vector<i64>& ts, const Tensor& cond) const {
        check_dims(cond.shape().size() == 4 && cond.dim(0) == x.dim(0) && cond.dim(1) == cond_channels_ &&
                       cond.dim(2) == x.dim(2) && cond.dim(3) == x.dim(3),
                   "controlled denoiser: conditioning shape mismatch");
        Tensor temb_c = copy_.embed_time(ts);

        // trainable copy of the encoder, with the condition features added
        // after the first stage
        Tensor g = silu(copy_.gn0a_(copy_.enc0a_(x)));
        g = add_sample_channel(g, copy_.time_head0_(temb_c));
        g = add(g, silu(cond_gn_(cond_in_(cond))));
        g = silu(copy_.gn0b_(copy_.enc0b_(g)));
        Tensor inj0 = zero0_(g);
        Tensor g1 = silu(copy_.gn1a_(copy_.down1_(g)));
        g1 = add_sample_channel(g1, copy_.time_head1_(temb_c));
        g1 = silu(copy_.gn1b_(copy_.enc1b_(g1)));
        Tensor inj1 = zero1_(g1);
        Tensor gm = silu(copy_.gnm_(copy_.mid_(g1)));
        Tensor inj2 = zero2_(gm);

        DenoiserTaps inject{inj0, inj1, inj2};
        Tensor temb = locked_->embed_time(ts);
        return locked_->decode(locked_->encode(x, temb, &inject));
    }

    // Only the control branch trains: the encoder copy, the condition
    // encoder and the zero convolutions.
    ParamMap named_params(const std::string& prefix = "c") const {
        ParamMap m;
        detail::reg(m, prefix + "/time_trunk", copy_.time_trunk_);
        detail::reg(m, prefix + "/time_head0", copy_.time_head0_);
        detail::reg(m, prefix + "/time_head1", copy_.time_head1_);
        detail::reg(m, prefix + "/enc0a", copy_.enc0a_);
        detail::reg(m, prefix + "/gn0a", copy_.gn0a_);
        detail::reg(m, prefix + "/enc0b", copy_.enc0b_);
        detail::reg(m, prefix + "/gn0b", copy_.gn0b_);
        detail::reg(m, prefix + "/down1", copy_.down1_);
        detail::reg(m, prefix + "/gn1a", copy_.gn1a_);
        detail::reg(m, prefix + "/enc1b", copy_.enc1b_);
        detail::reg(m, prefix + "/gn1b", copy_.gn1b_);
        detail::reg(m, prefix + "/mid", copy_.mid_);
        detail::reg(m, prefix + "/gnm", copy_.gnm_);
        detail::reg(m, prefix + "/cond_in", cond_in_);
        detail::reg(m, prefix + "/cond_gn", cond_gn_);
        detail::reg(m, prefix + "/zero0", zero0_);
        detail::reg(m, prefix + "/zero1", zero1_);
        detail::reg(m, prefix + "/zero2", zero2_);
        return m;
    }

    std::vector<Tensor> params() const { return detail::values(named_params()); }

private:
    std::shared_ptr<Denoiser> locked_;
    Denoiser copy_;
    ConvLayer cond_in_;
    NormLayer cond_gn_;
    ConvLayer zero0_, zero1_, zero2_;
    i64 cond_channels_ = 0;
};

// Pretrained-denoiser precondition for control training: freezes the
// backbone and wires a zero-initialized control branch around it.
inline ControlledDenoiser attach_control(std::shared_ptr<Denoiser> denoiser, i64 cond_channels, Rng& rng) {
    check(cond_channels >= 1, "attach_control: need at least the inverse-depth plane");
    return ControlledDenoiser(std::move(denoiser), cond_channels, rng);
}

} // namespace ddl
