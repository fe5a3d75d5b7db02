#pragma once

#include <functional>

#include "ddl/depthnet.hpp"
#include "ddl/diffusion.hpp"

namespace ddl {

// The (e_i, h_i^c, d_i) triple plus provenance. The pseudo-label is the
// teacher's prediction on the easy image, never on the hard one; easy-only
// records reuse the easy image as the training input.
struct TrainingPair {
    std::string scene_id;
    std::string condition; // "easy" for the easy-only record
    bool is_hard = false;
    Image easy;
    Image hard;
    InverseDepthMap pseudo_label;
    u64 gen_seed = 0;
    std::string generator = "none"; // diffusion | oracle | none

    const Image& training_image() const { return is_hard ? hard : easy; }
};

// Source of challenging counterparts: the controlled diffusion model, or
// (in the ablation) the condition oracle itself.
using HardImageSource = std::function<Image(const Scene&, const Condition&, u64 seed)>;

inline HardImageSource oracle_hard_source() {
    return [](const Scene& s, const Condition& c, u64 seed) { return apply_condition_oracle(s, c, seed); };
}

inline HardImageSource diffusion_hard_source(const ControlledDenoiser& model, const NoiseSchedule& sched,
                                             const std::vector<Condition>& condition_set) {
    return [&model, &sched, condition_set](const Scene& s, const Condition& c, u64 seed) {
        return generate_hard(s, c, condition_set, model, sched, seed);
    };
}

// For each scene: one easy record plus one hard record per condition, all
// sharing the teacher's pseudo-label on the easy image. N scenes and |C|
// conditions yield N * (|C| + 1) samples.
inline std::vector<TrainingPair> build_pairs(const std::vector<Scene>& scenes,
                                             const std::vector<Condition>& conditions,
                                             const DepthNetwork& teacher, const HardImageSource& hard_source,
                                             u64 seed, const std::string& generator_name) {
    check(!scenes.empty(), "build_pairs: no scenes");
    check(!conditions.empty(), "build_pairs: empty condition set");
    check(static_cast<bool>(hard_source), "build_pairs: missing hard-image source");
    std::vector<TrainingPair> out;
    out.reserve(scenes.size() * (conditions.size() + 1));
    for (const auto& scene : scenes) {
        InverseDepthMap label = predict_inverse_depth(teacher, scene.easy_image);
        TrainingPair easy_rec;
        easy_rec.scene_id = scene.id;
        easy_rec.condition = "easy";
        easy_rec.is_hard = false;
        easy_rec.easy = scene.easy_image;
        easy_rec.hard = scene.easy_image;
        easy_rec.pseudo_label = label;
        out.push_back(easy_rec);
        for (const auto& c : conditions) {
            TrainingPair rec;
            rec.scene_id = scene.id;
            rec.condition = c.name;
            rec.is_hard = true;
            rec.easy = scene.easy_image;
            rec.gen_seed = mix_seed(seed, scene.seed, static_cast<u64>(c.tag));
            rec.hard = hard_source(scene, c, rec.gen_seed);
            rec.pseudo_label = label;
            rec.generator = generator_name;
            out.push_back(std::move(rec));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation: photometric jitter + RGB shift on images, horizontal flip
// applied jointly to images and pseudo-label.
// ---------------------------------------------------------------------------

struct AugmentConfig {
    real jitter = 0.05;
    real rgb_shift = 0.03;
    bool flip = true;
};

inline Image flip_horizontal(const Image& img) {
    Image out(img.width, img.height);
    for (i64 c = 0; c < 3; ++c)
        for (i64 y = 0; y < img.height; ++y)
            for (i64 x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

inline InverseDepthMap flip_horizontal(const InverseDepthMap& m) {
    InverseDepthMap out(m.width, m.height);
    for (i64 y = 0; y < m.height; ++y)
        for (i64 x = 0; x < m.width; ++x) {
            out.at(y, x) = m.at(y, m.width - 1 - x);
            out.valid[static_cast<std::size_t>(y * m.width + x)] =
                m.valid[static_cast<std::size_t>(y * m.width + m.width - 1 - x)];
        }
    return out;
}

inline TrainingPair flip_pair(const TrainingPair& p) {
    TrainingPair out = p;
    out.easy = flip_horizontal(p.easy);
    out.hard = flip_horizontal(p.hard);
    out.pseudo_label = flip_horizontal(p.pseudo_label);
    return out;
}

inline TrainingPair augment(const TrainingPair& pair, const AugmentConfig& cfg, u64 seed) {
    Rng rng(mix_seed(seed, 0xa09));
    TrainingPair out = pair;
    real js[3], ss[3];
    for (auto& j : js) j = real{1} - cfg.jitter + real{2} * cfg.jitter * rng.uniform();
    for (auto& s : ss) s = -cfg.rgb_shift + real{2} * cfg.rgb_shift * rng.uniform();
    auto photometric = [&](Image& img) {
        i64 hw = img.width * img.height;
        for (i64 c = 0; c < 3; ++c) {
            real* plane = img.data.data() + c * hw;
            for (i64 i = 0; i < hw; ++i) plane[i] = plane[i] * js[c] + ss[c];
        }
        img.clamp01();
    };
    photometric(out.easy);
    photometric(out.hard);
    if (cfg.flip && rng.bernoulli(0.5)) out = flip_pair(out);
    return out;
}

// ---------------------------------------------------------------------------
// Student fine-tuning under the scaled 30K/25K recipe
// ---------------------------------------------------------------------------

struct DistillConfig {
    i64 iterations = 3000;
    i64 decay_at = 2500;     // preserves the 25K-of-30K decay point ratio
    real lr = 1e-4;
    real decayed_lr = 1e-5;  // 10x drop
    real weight_decay = 1e-5;
    i64 batch = 8;
    AugmentConfig augment;
    bool augment_enabled = true;
    std::string rho = "abs"; // loss robustness function identifier
    i64 val_interval = 250;
    u64 seed = 2;

    void validate() const {
        check(iterations >= 0, "distill: negative iteration budget");
        check(iterations == 0 || decay_at < iterations, "distill: decay point must precede the budget");
        check(decayed_lr < lr, "distill: decayed LR must be below the initial LR");
        check(batch >= 1, "distill: batch must be positive");
        check(rho == "abs", "distill: unsupported rho (only \"abs\")");
    }
};

struct FinetuneResult {
    std::vector<TrainLogRow> log;
    std::vector<std::pair<i64, real>> val_log; // (iteration, validation loss)
    real best_val = 0;
    i64 best_iter = -1;
    bool aborted = false;
};

inline real mean_ssi_over_pairs(const DepthNetwork& net, const std::vector<TrainingPair>& pairs) {
    check(!pairs.empty(), "mean_ssi_over_pairs: empty set");
    NoGradGuard ng;
    real total = 0;
    for (const auto& p : pairs) {
        InverseDepthMap pred = predict_inverse_depth(net, p.training_image());
        total += ssi_loss(pred.values, p.pseudo_label.values, p.pseudo_label.valid).value;
    }
    return total / static_cast<real>(pairs.size());
}

// Minimizes the SSI loss between student predictions and the frozen
// pseudo-labels over shuffled batches of easy and hard records. LR decays
// once at `decay_at`; the best-on-validation parameters are restored at the
// end. A non-finite loss aborts, keeping the last good checkpoint.
inline FinetuneResult finetune_student(DepthNetwork& student, const std::vector<TrainingPair>& pairs,
                                       const std::vector<TrainingPair>& val_pairs, const DistillConfig& cfg) {
    cfg.validate();
    check(!pairs.empty(), "finetune_student: no training pairs");
    FinetuneResult res;
    if (cfg.iterations == 0) return res;

    AdamW opt(student.params(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    auto params = student.params();
    std::vector<std::vector<real>> best_params;
    auto snapshot = [&]() {
        best_params.clear();
        for (const auto& p : params) best_params.push_back(p.data());
    };
    auto restore = [&]() {
        if (best_params.empty()) return;
        for (std::size_t i = 0; i < params.size(); ++i) params[i].data() = best_params[i];
    };

    auto validate_now = [&](i64 iter) {
        if (val_pairs.empty()) return;
        real v = mean_ssi_over_pairs(student, val_pairs);
        res.val_log.emplace_back(iter, v);
        if (res.best_iter < 0 || v < res.best_val) {
            res.best_val = v;
            res.best_iter = iter;
            snapshot();
        }
    };

    for (i64 iter = 0; iter < cfg.iterations; ++iter) {
        real lr = iter >= cfg.decay_at ? cfg.decayed_lr : cfg.lr;
        opt.set_lr(lr);
        Rng rng(mix_seed(cfg.seed, static_cast<u64>(iter), 0xd157));
        std::vector<TrainingPair> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch));
        std::vector<const Image*> images;
        std::vector<const InverseDepthMap*> labels;
        for (i64 b = 0; b < cfg.batch; ++b) {
            auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<i64>(pairs.size()) - 1));
            TrainingPair rec = cfg.augment_enabled
                                   ? augment(pairs[idx], cfg.augment, mix_seed(cfg.seed, iter, b, 0xa06))
                                   : pairs[idx];
            batch.push_back(std::move(rec));
        }
        for (const auto& rec : batch) {
            images.push_back(&rec.training_image());
            labels.push_back(&rec.pseudo_label);
        }
        bool applied = true;
        real loss = batch_ssi_loss_and_step(student, images, labels, opt, &applied);
        res.log.push_back({iter, lr, loss});
        if (!applied) {
            res.aborted = true;
            restore();
            return res;
        }
        if (cfg.val_interval > 0 && (iter + 1) % cfg.val_interval == 0) validate_now(iter + 1);
    }
    if (res.val_log.empty() || res.val_log.back().first != cfg.iterations) validate_now(cfg.iterations);
    restore();
    return res;
}

} // namespace ddl
