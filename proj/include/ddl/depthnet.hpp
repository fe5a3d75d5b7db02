#pragma once

#include "ddl/denoiser.hpp"
#include "ddl/optim.hpp"
#include "ddl/scenegen.hpp"
#include "ddl/ssi.hpp"

namespace ddl {

struct DepthNetConfig {
    i64 base_channels = 16;
    i64 resolution = 32; // expected square input side
};

// Monocular inverse-depth estimator: three-scale encoder-decoder with skip
// connections, softplus output so predictions stay non-negative. Scale and
// shift of the output are ambiguous by convention; consumers align before
// comparing against metric ground truth.
class DepthNetwork {
public:
    DepthNetwork() = default;
    DepthNetwork(const DepthNetConfig& cfg, Rng& rng, std::string role = "teacher")
        : cfg_(cfg), role_(std::move(role)) {
        i64 C = cfg.base_channels;
        e0a_ = ConvLayer::make(3, C, 3, 1, 1, rng);
        n0a_ = NormLayer::make(C);
        e0b_ = ConvLayer::make(C, C, 3, 1, 1, rng);
        n0b_ = NormLayer::make(C);
        e1a_ = ConvLayer::make(C, 2 * C, 3, 2, 1, rng);
        n1a_ = NormLayer::make(2 * C);
        e1b_ = ConvLayer::make(2 * C, 2 * C, 3, 1, 1, rng);
        n1b_ = NormLayer::make(2 * C);
        e2a_ = ConvLayer::make(2 * C, 4 * C, 3, 2, 1, rng);
        n2a_ = NormLayer::make(4 * C);
        e2b_ = ConvLayer::make(4 * C, 4 * C, 3, 1, 1, rng);
        n2b_ = NormLayer::make(4 * C);
        u1a_ = ConvLayer::make(4 * C, 2 * C, 3, 1, 1, rng);
        m1a_ = NormLayer::make(2 * C);
        u1b_ = ConvLayer::make(2 * C, 2 * C, 3, 1, 1, rng);
        m1b_ = NormLayer::make(2 * C);
        u0a_ = ConvLayer::make(2 * C, C, 3, 1, 1, rng);
        m0a_ = NormLayer::make(C);
        u0b_ = ConvLayer::make(C, C, 3, 1, 1, rng);
        m0b_ = NormLayer::make(C);
        out_ = ConvLayer::make(C, 1, 3, 1, 1, rng);
    }

    const DepthNetConfig& config() const { return cfg_; }
    const std::string& role() const { return role_; }
    void set_role(std::string role) { role_ = std::move(role); }

    Tensor forward(const Tensor& x) const {
        check_dims(x.shape().size() == 4 && x.dim(1) == 3, "depthnet: input must be [N,3,H,W]");
        check_dims(x.dim(2) == cfg_.resolution && x.dim(3) == cfg_.resolution,
                   "depthnet: resolution mismatch with configured input size");
        Tensor h0 = silu(n0a_(e0a_(x)));
        h0 = silu(n0b_(e0b_(h0)));
        Tensor h1 = silu(n1a_(e1a_(h0)));
        h1 = silu(n1b_(e1b_(h1)));
        Tensor h2 = silu(n2a_(e2a_(h1)));
        h2 = silu(n2b_(e2b_(h2)));
        Tensor u1 = silu(m1a_(u1a_(upsample_nearest2x(h2))));
        u1 = add(u1, h1);
        u1 = silu(m1b_(u1b_(u1)));
        Tensor u0 = silu(m0a_(u0a_(upsample_nearest2x(u1))));
        u0 = add(u0, h0);
        u0 = silu(m0b_(u0b_(u0)));
        return softplus(out_(u0));
    }

    ParamMap named_params(const std::string& prefix = "depth") const {
        ParamMap m;
        detail::reg(m, prefix + "/e0a", e0a_);
        detail::reg(m, prefix + "/n0a", n0a_);
        detail::reg(m, prefix + "/e0b", e0b_);
        detail::reg(m, prefix + "/n0b", n0b_);
        detail::reg(m, prefix + "/e1a", e1a_);
        detail::reg(m, prefix + "/n1a", n1a_);
        detail::reg(m, prefix + "/e1b", e1b_);
        detail::reg(m, prefix + "/n1b", n1b_);
        detail::reg(m, prefix + "/e2a", e2a_);
        detail::reg(m, prefix + "/n2a", n2a_);
        detail::reg(m, prefix + "/e2b", e2b_);
        detail::reg(m, prefix + "/n2b", n2b_);
        detail::reg(m, prefix + "/u1a", u1a_);
        detail::reg(m, prefix + "/m1a", m1a_);
        detail::reg(m, prefix + "/u1b", u1b_);
        detail::reg(m, prefix + "/m1b", m1b_);
        detail::reg(m, prefix + "/u0a", u0a_);
        detail::reg(m, prefix + "/m0a", m0a_);
        detail::reg(m, prefix + "/u0b", u0b_);
        detail::reg(m, prefix + "/m0b", m0b_);
        detail::reg(m, prefix + "/out", out_);
        return m;
    }

    std::vector<Tensor> params() const { return detail::values(named_params()); }

    i64 param_count() const {
        i64 n = 0;
        for (const auto& [name, t] : named_params()) n += t.numel();
        return n;
    }

    // Exact parameter copy; the student starts as its teacher.
    DepthNetwork clone(std::string role) const {
        DepthNetwork c = *this;
        c.role_ = std::move(role);
        auto src = named_params();
        auto clone_conv = [](ConvLayer& l) {
            l.w = l.w.detach_copy(true);
            l.b = l.b.detach_copy(true);
        };
        auto clone_norm = [](NormLayer& l) {
            l.gamma = l.gamma.detach_copy(true);
            l.beta = l.beta.detach_copy(true);
        };
        clone_conv(c.e0a_); clone_norm(c.n0a_);
        clone_conv(c.e0b_); clone_norm(c.n0b_);
        clone_conv(c.e1a_); clone_norm(c.n1a_);
        clone_conv(c.e1b_); clone_norm(c.n1b_);
        clone_conv(c.e2a_); clone_norm(c.n2a_);
        clone_conv(c.e2b_); clone_norm(c.n2b_);
        clone_conv(c.u1a_); clone_norm(c.m1a_);
        clone_conv(c.u1b_); clone_norm(c.m1b_);
        clone_conv(c.u0a_); clone_norm(c.m0a_);
        clone_conv(c.u0b_); clone_norm(c.m0b_);
        clone_conv(c.out_);
        return c;
    }

    u64 param_hash() const {
        u64 h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : named_params()) {
            h = fnv1a(name.data(), name.size(), h);
            h = fnv1a(t.data().data(), t.data().size() * sizeof(real), h);
        }
        return h;
    }

private:
    DepthNetConfig cfg_;
    std::string role_;
    ConvLayer e0a_, e0b_, e1a_, e1b_, e2a_, e2b_, u1a_, u1b_, u0a_, u0b_, out_;
    NormLayer n0a_, n0b_, n1a_, n1b_, n2a_, n2b_, m1a_, m1b_, m0a_, m0b_;
};

inline Tensor image_to_tensor(const Image& img) {
    return Tensor::from_data({1, 3, img.height, img.width}, img.data);
}

inline Tensor images_to_batch(const std::vector<Image>& imgs) {
    check(!imgs.empty(), "images_to_batch: empty batch");
    i64 H = imgs[0].height, W = imgs[0].width;
    std::vector<real> data;
    data.reserve(imgs.size() * static_cast<std::size_t>(3 * H * W));
    for (const auto& img : imgs) {
        check_dims(img.height == H && img.width == W, "images_to_batch: mixed resolutions");
        data.insert(data.end(), img.data.begin(), img.data.end());
    }
    return Tensor::from_data({static_cast<i64>(imgs.size()), 3, H, W}, std::move(data));
}

// Deterministic forward pass to an inverse-depth map.
inline InverseDepthMap predict_inverse_depth(const DepthNetwork& net, const Image& image) {
    NoGradGuard ng;
    Tensor y = net.forward(image_to_tensor(image));
    InverseDepthMap out(image.width, image.height);
    out.values = y.data();
    return out;
}

inline InverseDepthMap ground_truth_inverse(const DepthMap& depth) {
    InverseDepthMap out(depth.width, depth.height);
    for (std::size_t i = 0; i < depth.values.size(); ++i) {
        out.values[i] = depth.valid[i] ? real{1} / depth.values[i] : real{0};
        out.valid[i] = depth.valid[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Supervised pretraining on easy scenes (the desk-scale "pre-trained
// teacher"): SSI loss against ground-truth inverse depth.
// ---------------------------------------------------------------------------

struct PretrainConfig {
    i64 iterations = 1200;
    i64 batch = 8;
    real lr = 3e-4;
    u64 seed = 1;
};

struct TrainLogRow {
    i64 iteration = 0;
    real lr = 0;
    real loss = 0;
};

struct PretrainResult {
    std::vector<TrainLogRow> log;
    bool aborted = false;
};

inline real batch_ssi_loss_and_step(DepthNetwork& net, const std::vector<const Image*>& images,
                                    const std::vector<const InverseDepthMap*>& labels, AdamW& opt,
                                    bool* applied = nullptr) {
    Tensor batch;
    {
        std::vector<Image> imgs;
        imgs.reserve(images.size());
        for (const auto* im : images) imgs.push_back(*im);
        batch = images_to_batch(imgs);
    }
    Tensor pred = net.forward(batch);
    Tensor total;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& label = *labels[i];
        Tensor pi = select_sample(pred, static_cast<i64>(i));
        auto [loss_i, ap] = ssi_loss_tensor(pi, label.values, label.valid);
        total = total.defined() ? add(total, loss_i) : loss_i;
    }
    Tensor loss = scale(total, real{1} / static_cast<real>(images.size()));
    real value = loss.item();
    if (!std::isfinite(value)) {
        opt.zero_grad();
        if (applied) *applied = false;
        return value;
    }
    backward(loss);
    bool ok = opt.step().applied;
    opt.zero_grad();
    if (applied) *applied = ok;
    return value;
}

inline PretrainResult pretrain_teacher(DepthNetwork& net, const std::vector<Scene>& scenes,
                                       const PretrainConfig& cfg) {
    check(!scenes.empty(), "pretrain_teacher: empty training split");
    std::vector<InverseDepthMap> labels;
    labels.reserve(scenes.size());
    for (const auto& s : scenes) labels.push_back(ground_truth_inverse(s.depth));

    AdamW opt(net.params(), {.lr = cfg.lr, .weight_decay = 1e-4});
    PretrainResult res;
    for (i64 iter = 0; iter < cfg.iterations; ++iter) {
        Rng rng(mix_seed(cfg.seed, static_cast<u64>(iter), 0x7eac4e));
        std::vector<const Image*> images;
        std::vector<const InverseDepthMap*> lbls;
        for (i64 b = 0; b < cfg.batch; ++b) {
            auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<i64>(scenes.size()) - 1));
            images.push_back(&scenes[idx].easy_image);
            lbls.push_back(&labels[idx]);
        }
        bool applied = true;
        real loss = batch_ssi_loss_and_step(net, images, lbls, opt, &applied);
        res.log.push_back({iter, cfg.lr, loss});
        if (!applied) {
            res.aborted = true;
            break;
        }
    }
    return res;
}

} // namespace ddl
