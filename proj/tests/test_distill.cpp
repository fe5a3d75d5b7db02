#include <catch2/catch_amalgamated.hpp>

#include "ddl/distill.hpp"
#include "support/gradcheck.hpp"

using namespace ddl;

namespace {

std::vector<std::uint8_t> ones(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

} // namespace

TEST_CASE("affine_align: identity, exact affine relation, hand-solved case") {
    std::vector<real> p1{1, 2, 3};
    auto r1 = affine_align(p1, p1, ones(3));
    REQUIRE(r1.s == 1.0);
    REQUIRE(r1.b == 0.0);
    REQUIRE_FALSE(r1.degenerate);

    auto r2 = affine_align({1, 2, 3}, {3, 5, 7}, ones(3));
    REQUIRE(r2.s == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(r2.b == Catch::Approx(1.0).margin(1e-12));

    auto r3 = affine_align({0, 1, 1}, {0, 1, 2}, ones(3));
    REQUIRE(r3.s == Catch::Approx(1.5).margin(1e-12));
    REQUIRE(r3.b == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("affine_align: constant prediction falls back to shift-only") {
    auto r = affine_align({2, 2, 2, 2}, {1, 2, 3, 4}, ones(4));
    REQUIRE(r.degenerate);
    REQUIRE(r.s == 1.0);
    REQUIRE(r.b == Catch::Approx(0.5).margin(1e-12)); // mean(target) - mean(pred)
}

TEST_CASE("affine_align: fewer than 2 valid pixels rejected") {
    std::vector<std::uint8_t> mask{1, 0, 0};
    REQUIRE_THROWS_AS(affine_align({1, 2, 3}, {1, 2, 3}, mask), value_error);
}

TEST_CASE("affine_align is the least-squares minimizer") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 40));
        std::vector<real> pred(n), target(n);
        for (auto& v : pred) v = rng.uniform(-2, 2);
        for (auto& v : target) v = rng.uniform(-2, 2);
        auto mask = ones(n);
        auto ap = affine_align(pred, target, mask);
        if (ap.degenerate) continue;
        auto sse = [&](real s, real b) {
            real acc = 0;
            for (std::size_t i = 0; i < n; ++i) {
                real r = s * pred[i] + b - target[i];
                acc += r * r;
            }
            return acc;
        };
        real base = sse(ap.s, ap.b);
        for (real ds : {-1e-3, 1e-3})
            for (real db : {-1e-3, 0.0, 1e-3})
                REQUIRE(sse(ap.s + ds, ap.b + db) >= base - 1e-12);
        for (real db : {-1e-3, 1e-3}) REQUIRE(sse(ap.s, ap.b + db) >= base - 1e-12);
    }
}

TEST_CASE("ssi_loss: zero for identical and affine-equivalent inputs") {
    std::vector<real> same{0.3, 0.7, 0.2};
    auto r1 = ssi_loss(same, same, ones(3));
    REQUIRE(r1.value == 0.0);
    auto r2 = ssi_loss(std::vector<real>{0, 1}, std::vector<real>{0, 2}, ones(2));
    REQUIRE(r2.value == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(r2.align.s == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("ssi_loss: hand-computed residual case") {
    auto r = ssi_loss({0, 1, 1}, {0, 1, 2}, ones(3));
    REQUIRE(r.value == Catch::Approx(1.0 / 6.0).margin(1e-12));
}

TEST_CASE("ssi_loss is invariant to affine transforms of the prediction") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t n = 64;
        std::vector<real> pred(n), label(n);
        for (auto& v : pred) v = rng.uniform(0.1, 1.0);
        for (auto& v : label) v = rng.uniform(0.1, 1.0);
        auto mask = ones(n);
        real base = ssi_loss(pred, label, mask).value;
        real a = rng.uniform(0.2, 5.0);
        real b = rng.uniform(-1.0, 1.0);
        std::vector<real> transformed(n);
        for (std::size_t i = 0; i < n; ++i) transformed[i] = a * pred[i] + b;
        real moved = ssi_loss(transformed, label, mask).value;
        REQUIRE(std::fabs(moved - base) / base < 1e-6);
    }
}

TEST_CASE("ssi_loss_tensor gradient matches finite differences under frozen alignment") {
    Rng rng(7);
    Tensor pred = Tensor::randn({1, 1, 6, 6}, rng, 0.5, true);
    for (auto& v : pred.data()) v = std::fabs(v) + 0.05;
    std::vector<real> label(36);
    for (auto& v : label) v = rng.uniform(0.1, 1.0);
    auto mask = ones(36);

    // freeze alignment at the unperturbed values, as the training path does
    AffineParams ap = affine_align(pred.data(), label, mask);
    auto forward = [&]() {
        Tensor label_t = Tensor::from_data(pred.shape(), std::vector<real>(label));
        Tensor resid = sub(add_scalar(scale(pred, ap.s), ap.b), label_t);
        return scale(sum_all(abs(resid)), 1.0 / 72.0);
    };
    Rng probe(8);
    auto res = testsupport::grad_check(forward, {pred}, probe, 12);
    INFO(res.worst);
    REQUIRE(res.ok(1e-4));

    // and the public entry point agrees with the frozen-alignment value
    auto [loss, align] = ssi_loss_tensor(pred, label, mask);
    REQUIRE(loss.item() == Catch::Approx(forward().item()).margin(1e-12));
}

TEST_CASE("build_pairs: counting, pseudo-label definition, ablation swap") {
    SceneSpec spec;
    spec.width = 16;
    spec.height = 16;
    std::vector<Scene> scenes;
    for (u64 s = 0; s < 5; ++s) scenes.push_back(generate_scene(s, spec, "scene_" + std::to_string(s)));
    std::vector<Condition> conds{Condition::defaults(ConditionTag::night), Condition::defaults(ConditionTag::rain),
                                 Condition::defaults(ConditionTag::tom)};
    Rng rng(9);
    DepthNetwork teacher(DepthNetConfig{.base_channels = 4, .resolution = 16}, rng);

    auto pairs = build_pairs(scenes, conds, teacher, oracle_hard_source(), 11, "oracle");
    REQUIRE(pairs.size() == 5 * 4); // N * (|C| + 1)

    i64 easy_records = 0;
    for (const auto& p : pairs)
        if (!p.is_hard) ++easy_records;
    REQUIRE(easy_records == 5);

    // pseudo-labels equal the teacher's prediction on the easy image
    for (std::size_t i = 0; i < 10; ++i) {
        const auto& p = pairs[i];
        const Scene& sc = scenes[i / 4];
        auto expect = predict_inverse_depth(teacher, sc.easy_image);
        REQUIRE(p.pseudo_label.values == expect.values);
    }

    // swapping the generator changes hard images but not pseudo-labels
    auto noisy_source = [](const Scene& s, const Condition& c, u64 seed) {
        Image img = apply_condition_oracle(s, c, seed);
        for (auto& v : img.data) v = std::min(1.0, v + 0.5);
        return img;
    };
    auto pairs2 = build_pairs(scenes, conds, teacher, noisy_source, 11, "stub");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        REQUIRE(pairs2[i].pseudo_label.values == pairs[i].pseudo_label.values);
        if (pairs[i].is_hard) REQUIRE(pairs2[i].hard.data != pairs[i].hard.data);
    }

    REQUIRE_THROWS_AS(build_pairs({}, conds, teacher, oracle_hard_source(), 1, "oracle"), value_error);
}

TEST_CASE("augment: flip involution and zero-magnitude identity") {
    SceneSpec spec;
    spec.width = 16;
    spec.height = 16;
    Scene sc = generate_scene(13, spec);
    Rng rng(14);
    DepthNetwork teacher(DepthNetConfig{.base_channels = 4, .resolution = 16}, rng);
    auto pairs = build_pairs({sc}, {Condition::defaults(ConditionTag::night)}, teacher, oracle_hard_source(),
                             3, "oracle");
    const TrainingPair& p = pairs[1];

    TrainingPair flipped = flip_pair(flip_pair(p));
    REQUIRE(flipped.easy.data == p.easy.data);
    REQUIRE(flipped.hard.data == p.hard.data);
    REQUIRE(flipped.pseudo_label.values == p.pseudo_label.values);

    AugmentConfig zero{.jitter = 0, .rgb_shift = 0, .flip = false};
    TrainingPair same = augment(p, zero, 99);
    REQUIRE(same.easy.data == p.easy.data);
    REQUIRE(same.hard.data == p.hard.data);
    REQUIRE(same.pseudo_label.values == p.pseudo_label.values);

    AugmentConfig full;
    TrainingPair a1 = augment(p, full, 42);
    TrainingPair a2 = augment(p, full, 42);
    REQUIRE(a1.easy.data == a2.easy.data); // deterministic in seed
}

TEST_CASE("flip consistency: loss is flip-invariant for an equivariant predictor") {
    SceneSpec spec;
    spec.width = 16;
    spec.height = 16;
    Scene sc = generate_scene(17, spec);
    Rng rng(18);
    DepthNetwork teacher(DepthNetConfig{.base_channels = 4, .resolution = 16}, rng);
    auto pairs = build_pairs({sc}, {Condition::defaults(ConditionTag::night)}, teacher, oracle_hard_source(),
                             5, "oracle");
    const TrainingPair& p = pairs[1];
    TrainingPair q = flip_pair(p);

    // pointwise (hence flip-equivariant) stub: inverse depth = mean channel
    auto stub_predict = [](const Image& img) {
        InverseDepthMap out(img.width, img.height);
        i64 hw = img.width * img.height;
        for (i64 i = 0; i < hw; ++i)
            out.values[static_cast<std::size_t>(i)] =
                (img.data[static_cast<std::size_t>(i)] + img.data[static_cast<std::size_t>(hw + i)] +
                 img.data[static_cast<std::size_t>(2 * hw + i)]) /
                3.0;
        return out;
    };
    real lp = ssi_loss(stub_predict(p.training_image()).values, p.pseudo_label.values, p.pseudo_label.valid).value;
    real lq = ssi_loss(stub_predict(q.training_image()).values, q.pseudo_label.values, q.pseudo_label.valid).value;
    REQUIRE(lp == Catch::Approx(lq).margin(1e-12));
}

TEST_CASE("finetune_student: zero budget leaves the student identical") {
    SceneSpec spec;
    spec.width = 16;
    spec.height = 16;
    Scene sc = generate_scene(19, spec);
    Rng rng(20);
    DepthNetwork teacher(DepthNetConfig{.base_channels = 4, .resolution = 16}, rng);
    DepthNetwork student = teacher.clone("student");
    REQUIRE(student.param_hash() == teacher.param_hash());

    auto pairs = build_pairs({sc}, {Condition::defaults(ConditionTag::night)}, teacher, oracle_hard_source(),
                             7, "oracle");
    DistillConfig cfg;
    cfg.iterations = 0;
    auto res = finetune_student(student, pairs, {}, cfg);
    REQUIRE(res.log.empty());
    REQUIRE(student.param_hash() == teacher.param_hash());

    // student predictions equal the teacher's bitwise before any tuning
    auto pt = predict_inverse_depth(teacher, sc.easy_image);
    auto ps = predict_inverse_depth(student, sc.easy_image);
    REQUIRE(pt.values == ps.values);
}

TEST_CASE("finetune_student: overfits four pairs and never touches pseudo-labels or teacher") {
    SceneSpec spec;
    spec.width = 16;
    spec.height = 16;
    std::vector<Scene> scenes;
    for (u64 s = 40; s < 44; ++s) scenes.push_back(generate_scene(s, spec, "s" + std::to_string(s)));
    Rng rng(21);
    DepthNetwork teacher(DepthNetConfig{.base_channels = 8, .resolution = 16}, rng);
    auto records = build_pairs(scenes, {Condition::defaults(ConditionTag::night)}, teacher, oracle_hard_source(),
                               9, "oracle");
    std::vector<TrainingPair> pairs; // the four (e_i, h_i^c, d_i) triples
    for (const auto& r : records)
        if (r.is_hard) pairs.push_back(r);
    REQUIRE(pairs.size() == 4);
    u64 teacher_hash = teacher.param_hash();
    u64 label_hash = 0;
    for (const auto& p : pairs) label_hash = fnv1a(p.pseudo_label.values.data(),
                                                   p.pseudo_label.values.size() * sizeof(real), label_hash);

    DepthNetwork student = teacher.clone("student");
    DistillConfig cfg;
    cfg.iterations = 500;
    cfg.decay_at = 480;
    cfg.lr = 2e-3;
    cfg.decayed_lr = 2e-4;
    cfg.weight_decay = 0;
    cfg.batch = 4;
    cfg.augment_enabled = false;
    cfg.val_interval = 0;
    auto res = finetune_student(student, pairs, {}, cfg);
    REQUIRE_FALSE(res.aborted);

    real initial = res.log.front().loss;
    real final_avg = 0;
    for (std::size_t i = res.log.size() - 20; i < res.log.size(); ++i) final_avg += res.log[i].loss;
    final_avg /= 20;
    INFO("initial " << initial << " final " << final_avg);
    REQUIRE(final_avg < 0.1 * initial);

    REQUIRE(teacher.param_hash() == teacher_hash);
    u64 label_hash_after = 0;
    for (const auto& p : pairs) label_hash_after = fnv1a(p.pseudo_label.values.data(),
                                                         p.pseudo_label.values.size() * sizeof(real), label_hash_after);
    REQUIRE(label_hash_after == label_hash);
}

TEST_CASE("distill config validation") {
    DistillConfig bad;
    bad.decay_at = 4000;
    REQUIRE_THROWS_AS(bad.validate(), value_error);
    DistillConfig bad2;
    bad2.decayed_lr = bad2.lr;
    REQUIRE_THROWS_AS(bad2.validate(), value_error);
    DistillConfig bad3;
    bad3.rho = "trimmed";
    REQUIRE_THROWS_AS(bad3.validate(), value_error);
}
