#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "ddl/checkpoint.hpp"
#include "ddl/ops.hpp"
#include "ddl/optim.hpp"
#include "support/gradcheck.hpp"

using namespace ddl;

TEST_CASE("conv2d identity kernel passes input through") {
    Rng rng(7);
    Tensor x = Tensor::randn({2, 3, 5, 4}, rng);
    Tensor w = Tensor::zeros({3, 3, 1, 1});
    for (i64 f = 0; f < 3; ++f) w.data()[static_cast<std::size_t>(f * 3 + f)] = 1.0;
    Tensor b = Tensor::zeros({3});
    Tensor y = conv2d(x, w, b, 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.data().size(); ++i) REQUIRE(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches direct summation on 2x2 case") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from_data({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(x, w, b, 1, 0);
    REQUIRE(y.shape() == std::vector<i64>{1, 1, 1, 1});
    REQUIRE(y.item() == 5.0);
}

TEST_CASE("conv2d all-zero kernel annihilates") {
    Rng rng(9);
    Tensor x = Tensor::randn({1, 2, 6, 6}, rng);
    Tensor w = Tensor::zeros({4, 2, 3, 3});
    Tensor b = Tensor::zeros({4});
    Tensor y = conv2d(x, w, b, 1, 1);
    for (real v : y.data()) REQUIRE(v == 0.0);
}

TEST_CASE("conv2d rejects kernel/input channel mismatch") {
    Tensor x = Tensor::zeros({1, 3, 4, 4});
    Tensor w = Tensor::zeros({2, 4, 3, 3});
    Tensor b = Tensor::zeros({2});
    REQUIRE_THROWS_AS(conv2d(x, w, b, 1, 1), dim_error);
}

TEST_CASE("conv2d output geometry follows stride and padding") {
    Tensor x = Tensor::zeros({1, 1, 7, 5});
    Tensor w = Tensor::zeros({1, 1, 3, 3});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(x, w, b, 2, 1);
    REQUIRE(y.shape() == std::vector<i64>{1, 1, 4, 3});
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Tensor p = Tensor::from_data({3}, {0.5, -1.0, 2.0}, true);
    backward(sum_all(p));
    for (real g : p.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("backward of sum of squares gives 2p") {
    Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
    backward(sum_all(mul(p, p)));
    REQUIRE(p.grad()[0] == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(p.grad()[1] == Catch::Approx(-4.0).margin(1e-12));
}

TEST_CASE("backward rejects non-scalar roots") {
    Tensor p = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor y = mul(p, p);
    REQUIRE_THROWS_AS(backward(y), dim_error);
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
    Tensor p = Tensor::from_data({2}, {3.0, 4.0}, true);
    backward(sum_all(p));
    backward(sum_all(p));
    REQUIRE(p.grad()[0] == 2.0);
    p.zero_grad();
    backward(sum_all(p));
    REQUIRE(p.grad()[0] == 1.0);
}

TEST_CASE("two-layer conv net gradient matches finite differences") {
    Rng rng(42);
    Tensor x = Tensor::randn({2, 2, 6, 6}, rng, 0.7);
    Tensor w1 = Tensor::randn({4, 2, 3, 3}, rng, 0.4, true);
    Tensor b1 = Tensor::randn({4}, rng, 0.1, true);
    Tensor w2 = Tensor::randn({3, 4, 3, 3}, rng, 0.4, true);
    Tensor b2 = Tensor::randn({3}, rng, 0.1, true);
    Tensor weights = Tensor::randn({2 * 3 * 6 * 6}, rng, 1.0);

    auto forward = [&]() {
        Tensor h = silu(conv2d(x, w1, b1, 1, 1));
        Tensor y = conv2d(h, w2, b2, 1, 1);
        Tensor flat = Tensor(y.node()); // same storage, reshaped below
        Tensor wsum = mul(y, Tensor::from_data(y.shape(), weights.data()));
        return sum_all(wsum);
    };
    Rng probe_rng(5);
    auto res = testsupport::grad_check(forward, {w1, b1, w2, b2}, probe_rng, 6);
    INFO(res.worst);
    REQUIRE(res.ok(1e-4));
}

TEST_CASE("backward is linear in the loss") {
    Rng rng(11);
    Tensor p = Tensor::randn({8}, rng, 1.0, true);
    Tensor q = Tensor::from_data(p.shape(), p.data(), true);
    real a = 2.25, b = -0.75;

    auto f = [](const Tensor& t) { return sum_all(mul(t, t)); };
    auto g = [](const Tensor& t) { return sum_all(silu(t)); };

    backward(add(scale(f(p), a), scale(g(p), b)));
    backward(f(q));
    std::vector<real> gf = q.grad();
    q.zero_grad();
    backward(g(q));
    std::vector<real> gg = q.grad();

    for (std::size_t i = 0; i < gf.size(); ++i) {
        real combined = a * gf[i] + b * gg[i];
        REQUIRE(std::fabs(p.grad()[i] - combined) < 1e-10);
    }
}

TEST_CASE("forward and backward are deterministic given a seed") {
    auto run = [](u64 seed) {
        Rng rng(seed);
        Tensor x = Tensor::randn({1, 3, 8, 8}, rng);
        Tensor w = Tensor::randn({5, 3, 3, 3}, rng, 0.3, true);
        Tensor b = Tensor::randn({5}, rng, 0.1, true);
        Tensor loss = mean_all(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1)));
        backward(loss);
        std::pair<std::vector<real>, real> out{w.grad(), loss.item()};
        return out;
    };
    auto r1 = run(123);
    auto r2 = run(123);
    REQUIRE(r1.second == r2.second);
    REQUIRE(r1.first == r2.first);
}

TEST_CASE("group_norm normalizes groups and matches finite differences") {
    Rng rng(3);
    Tensor x = Tensor::randn({2, 4, 3, 3}, rng, 1.5, true);
    Tensor gamma = Tensor::randn({4}, rng, 0.5, true);
    for (auto& v : gamma.data()) v += 1.0;
    Tensor beta = Tensor::randn({4}, rng, 0.2, true);
    Tensor weights = Tensor::randn({2 * 4 * 3 * 3}, rng);

    auto forward = [&]() {
        Tensor y = group_norm(x, gamma, beta, 2);
        return sum_all(mul(y, Tensor::from_data(y.shape(), weights.data())));
    };
    Rng probe_rng(17);
    auto res = testsupport::grad_check(forward, {x, gamma, beta}, probe_rng, 8);
    INFO(res.worst);
    REQUIRE(res.ok(1e-4));
}

TEST_CASE("matmul, linear, upsample, concat gradients match finite differences") {
    Rng rng(21);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({4, 5}, rng, 0.5, true);
    Tensor b = Tensor::randn({5}, rng, 0.3, true);
    Tensor x4 = Tensor::randn({1, 2, 3, 3}, rng, 1.0, true);
    Tensor y4 = Tensor::randn({1, 3, 6, 6}, rng, 1.0, true);
    Tensor wl = Tensor::randn({3 * 5}, rng);
    Tensor wu = Tensor::randn({1 * 5 * 6 * 6}, rng);

    auto f1 = [&]() {
        Tensor y = linear(a, w, b);
        return sum_all(mul(y, Tensor::from_data(y.shape(), wl.data())));
    };
    Rng pr1(31);
    auto r1 = testsupport::grad_check(f1, {a, w, b}, pr1, 6);
    INFO(r1.worst);
    REQUIRE(r1.ok(1e-4));

    auto f2 = [&]() {
        Tensor up = upsample_nearest2x(x4);
        Tensor cat = concat_channels(up, y4);
        return sum_all(mul(cat, Tensor::from_data(cat.shape(), wu.data())));
    };
    Rng pr2(32);
    auto r2 = testsupport::grad_check(f2, {x4, y4}, pr2, 6);
    INFO(r2.worst);
    REQUIRE(r2.ok(1e-4));
}

TEST_CASE("adamw leaves parameters alone with zero gradient and no decay") {
    Tensor p = Tensor::from_data({2}, {1.5, -0.5}, true);
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.0});
    p.zero_grad();
    auto r = opt.step();
    REQUIRE(r.applied);
    REQUIRE(p.data()[0] == 1.5);
    REQUIRE(p.data()[1] == -0.5);
}

TEST_CASE("adamw reproduces the reference single-step update") {
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    AdamW opt({p}, {.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0});
    p.zero_grad();
    const_cast<std::vector<real>&>(p.grad())[0] = 1.0;
    opt.step();
    REQUIRE(opt.step_count() == 1);
    REQUIRE(opt.moment1()[0][0] == Catch::Approx(0.1).epsilon(1e-12));
    REQUIRE(opt.moment2()[0][0] == Catch::Approx(0.001).epsilon(1e-12));
    // p' = 1 - 0.1 * 1 / (1 + 1e-8)
    REQUIRE(p.data()[0] == Catch::Approx(0.9).margin(1e-8));
}

TEST_CASE("adamw decoupled decay acts with zero gradient") {
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.1});
    p.zero_grad();
    opt.step();
    REQUIRE(p.data()[0] == Catch::Approx(0.99).margin(1e-15));
}

TEST_CASE("adamw aborts on NaN gradients leaving state untouched") {
    Tensor p = Tensor::from_data({2}, {1.0, 2.0}, true);
    AdamW opt({p}, {.lr = 0.1});
    p.zero_grad();
    const_cast<std::vector<real>&>(p.grad())[1] = std::nan("");
    auto r = opt.step();
    REQUIRE_FALSE(r.applied);
    REQUIRE(opt.step_count() == 0);
    REQUIRE(p.data()[0] == 1.0);
    REQUIRE(p.data()[1] == 2.0);
}

TEST_CASE("checkpoint container round-trips bit-exactly") {
    Rng rng(77);
    std::map<std::string, Tensor> tensors;
    tensors.emplace("enc/w0", Tensor::randn({4, 3, 3, 3}, rng));
    tensors.emplace("enc/b0", Tensor::randn({4}, rng));
    tensors.emplace("meta/iter", Tensor::from_data({1}, {1234.0}));

    auto path = std::filesystem::temp_directory_path() / "ddl_ckpt_test.ddl";
    save_checkpoint(path.string(), tensors);
    auto loaded = load_checkpoint(path.string());
    REQUIRE(loaded.size() == tensors.size());
    for (const auto& [name, t] : tensors) {
        REQUIRE(loaded.count(name) == 1);
        REQUIRE(loaded.at(name).shape() == t.shape());
        REQUIRE(loaded.at(name).data() == t.data());
    }
    std::filesystem::remove(path);
}

TEST_CASE("no-grad guard suppresses taping") {
    Tensor p = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor y;
    {
        NoGradGuard ng;
        y = sum_all(p);
    }
    REQUIRE_FALSE(y.requires_grad());
}
