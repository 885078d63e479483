#include <catch2/catch_amalgamated.hpp>

#include "deskvis/grad_check.hpp"
#include "deskvis/tensor.hpp"

#include <random>

using namespace deskvis;

TEST_CASE("linear identity and permutation") {
    Tensor x = Tensor::from({1, 2}, {1.0, 2.0});
    Tensor w_id = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor b = Tensor::zeros({2});
    Tensor y = linear(x, w_id, b);
    CHECK(y[0] == 1.0);
    CHECK(y[1] == 2.0);

    Tensor x2 = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor w_perm = Tensor::from({2, 2}, {0.0, 1.0, 1.0, 0.0});
    Tensor y2 = linear(x2, w_perm, b);
    CHECK(y2[0] == 0.0);
    CHECK(y2[1] == 1.0);
}

TEST_CASE("linear rejects mismatched shapes") {
    Tensor x = Tensor::zeros({3, 4});
    Tensor w = Tensor::zeros({2, 5});
    CHECK_THROWS_WITH(linear(x, w), Catch::Matchers::ContainsSubstring("[3,4]") &&
                                        Catch::Matchers::ContainsSubstring("[2,5]"));
}

TEST_CASE("linear gradient matches finite differences") {
    std::mt19937_64 rng(7);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor w = Tensor::randn({2, 4}, rng);
    Tensor b = Tensor::randn({2}, rng);
    auto f = [](const std::vector<Tensor>& in) { return sum(linear(in[0], in[1], in[2])); };
    auto report = grad_check(f, {x, w, b}, 1e-6, 1e-6, {"x", "w", "b"});
    INFO(report.summary());
    CHECK(report.passed);
}

TEST_CASE("softmax symmetry and stabilization") {
    Tensor a = softmax(Tensor::from({2}, {0.0, 0.0}), 0);
    CHECK(a[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(a[1] == Catch::Approx(0.5).margin(1e-15));

    Tensor big = softmax(Tensor::from({2}, {1000.0, 1000.0}), 0);
    CHECK(big.all_finite());
    CHECK(big[0] == Catch::Approx(0.5).margin(1e-15));

    CHECK_THROWS_AS(softmax(Tensor::zeros({2, 3}), 2), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one within 1e-12") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = Tensor::randn({4, 7}, rng, 20.0);
        Tensor s = softmax(x, 1);
        for (std::size_t i = 0; i < 4; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                total += s.at(i, j);
                CHECK(s.at(i, j) > 0.0);
            }
            CHECK(std::fabs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax jacobian matches finite differences") {
    std::mt19937_64 rng(13);
    Tensor x = Tensor::randn({5}, rng);
    // check every output component against central differences
    for (std::int64_t comp = 0; comp < 5; ++comp) {
        auto f = [comp](const std::vector<Tensor>& in) {
            Tensor s = softmax(in[0], 0);
            return gather(s, std::vector<std::int64_t>{comp}, Shape{});
        };
        auto report = grad_check(f, {x}, 1e-6, 1e-6);
        INFO("component " << comp << "\n" << report.summary());
        CHECK(report.passed);
    }
}

TEST_CASE("backward on sum gives ones") {
    Tensor x = Tensor::from({3}, {1.0, 2.0, 3.0}).set_requires_grad(true);
    Tape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
    Tensor g = tape.grad(x);
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 1.0);
}

TEST_CASE("backward accumulates fan-out") {
    Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
    Tape tape;
    Tensor loss = add(x, x);
    tape.backward(loss);
    CHECK(tape.grad(x)[0] == 2.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("gradients flow through shared subexpressions") {
    // y = (x*x) + (x*x) reuses the same intermediate twice
    Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
    Tape tape;
    Tensor sq = mul(x, x);
    Tensor loss = add(sq, sq);
    tape.backward(loss);
    CHECK(tape.grad(x)[0] == Catch::Approx(8.0));
}

TEST_CASE("bilinear sample hits integer pixels exactly") {
    std::mt19937_64 rng(17);
    Tensor map = Tensor::randn({2, 6, 7}, rng);
    Tensor pts = Tensor::from({1, 2}, {3.0, 5.0});
    Tensor out = bilinear_sample(map, pts);
    CHECK(out.at(0, 0) == map.at(0, 3, 5));
    CHECK(out.at(0, 1) == map.at(1, 3, 5));
}

TEST_CASE("bilinear sample interpolates midpoints") {
    Tensor map = Tensor::zeros({1, 2, 2});
    map.at(0, 0, 1) = 1.0;  // neighbors (0,0)=0 and (0,1)=1
    Tensor pts = Tensor::from({1, 2}, {0.0, 0.5});
    Tensor out = bilinear_sample(map, pts);
    CHECK(out[0] == Catch::Approx(0.5));
}

TEST_CASE("bilinear sample zero-pads outside the map") {
    Tensor map = Tensor::full({1, 2, 2}, 1.0);
    Tensor pts = Tensor::from({3, 2}, {-0.5, -0.5, 1.5, 1.5, -10.0, 0.0});
    Tensor out = bilinear_sample(map, pts);
    CHECK(out[0] == Catch::Approx(0.25));
    CHECK(out[1] == Catch::Approx(0.25));
    CHECK(out[2] == 0.0);
}

TEST_CASE("bilinear sample is linear in the map") {
    std::mt19937_64 rng(19);
    Tensor a = Tensor::randn({2, 4, 4}, rng);
    Tensor b = Tensor::randn({2, 4, 4}, rng);
    Tensor pts = Tensor::uniform({5, 2}, rng, -0.8, 3.8);
    const double alpha = 0.37, beta = -1.25;

    Tensor mix{a.shape()};
    for (std::size_t i = 0; i < a.size(); ++i) mix[i] = alpha * a[i] + beta * b[i];

    Tensor lhs = bilinear_sample(mix, pts);
    Tensor sa = bilinear_sample(a, pts);
    Tensor sb = bilinear_sample(b, pts);
    for (std::size_t i = 0; i < lhs.size(); ++i)
        CHECK(std::fabs(lhs[i] - (alpha * sa[i] + beta * sb[i])) < 1e-12);
}

TEST_CASE("bilinear sample point gradient matches finite differences") {
    std::mt19937_64 rng(23);
    Tensor map = Tensor::randn({1, 4, 4}, rng);
    // interior, jittered off lattice points
    Tensor pts = Tensor::from({2, 2}, {1.37, 2.11, 0.63, 1.79});
    auto f = [&map](const std::vector<Tensor>& in) { return sum(bilinear_sample(map, in[0])); };
    auto report = grad_check(f, {pts}, 1e-6, 1e-5, {"points"});
    INFO(report.summary());
    CHECK(report.passed);
}

TEST_CASE("bilinear sample map gradient matches finite differences") {
    std::mt19937_64 rng(29);
    Tensor map = Tensor::randn({2, 3, 5}, rng);
    Tensor pts = Tensor::from({3, 2}, {0.4, 3.3, 1.9, 0.2, -0.3, 4.6});
    auto f = [&pts](const std::vector<Tensor>& in) { return sum(bilinear_sample(in[0], pts)); };
    auto report = grad_check(f, {map}, 1e-6, 1e-5, {"map"});
    INFO(report.summary());
    CHECK(report.passed);
}

TEST_CASE("elementwise and reduction gradients at random inputs") {
    std::mt19937_64 rng(31);
    Tensor a = Tensor::uniform({6}, rng, 0.3, 2.0);
    Tensor b = Tensor::uniform({6}, rng, 0.3, 2.0);

    auto check1 = [&](const char* name, ScalarFn f, const std::vector<Tensor>& ins) {
        auto report = grad_check(f, ins, 1e-6, 1e-5);
        INFO(name << "\n" << report.summary());
        CHECK(report.passed);
    };

    check1("mul", [](const std::vector<Tensor>& in) { return sum(mul(in[0], in[1])); }, {a, b});
    check1("div", [](const std::vector<Tensor>& in) { return sum(div(in[0], in[1])); }, {a, b});
    check1("exp", [](const std::vector<Tensor>& in) { return sum(deskvis::exp(in[0])); }, {a});
    check1("log", [](const std::vector<Tensor>& in) { return sum(deskvis::log(in[0])); }, {a});
    check1("sigmoid", [](const std::vector<Tensor>& in) { return sum(sigmoid(in[0])); }, {a});
    check1("relu", [](const std::vector<Tensor>& in) { return sum(relu(in[0] - 1.0)); }, {a});
    check1("abs", [](const std::vector<Tensor>& in) { return sum(deskvis::abs(in[0] - 1.0)); }, {a});
    check1("minmax", [](const std::vector<Tensor>& in) {
        return sum(minimum(in[0], in[1]) + maximum(in[0], in[1]));
    }, {a, b});
    check1("mean", [](const std::vector<Tensor>& in) { return mean(mul(in[0], in[0])); }, {a});
}

TEST_CASE("matmul and layout op gradients") {
    std::mt19937_64 rng(37);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4, 2}, rng);
    Tensor s = Tensor::randn({3}, rng);
    Tensor v = Tensor::randn({4}, rng);

    auto check1 = [&](const char* name, ScalarFn f, const std::vector<Tensor>& ins) {
        auto report = grad_check(f, ins, 1e-6, 1e-5);
        INFO(name << "\n" << report.summary());
        CHECK(report.passed);
    };

    check1("matmul", [](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); }, {a, b});
    check1("transpose", [](const std::vector<Tensor>& in) { return sum(mul(transpose(in[0]), transpose(in[0]))); }, {a});
    check1("scale_rows", [](const std::vector<Tensor>& in) { return sum(scale_rows(in[0], in[1])); }, {a, s});
    check1("add_rowvec", [](const std::vector<Tensor>& in) { return sum(mul(add_rowvec(in[0], in[1]), add_rowvec(in[0], in[1]))); }, {a, v});
    check1("mul_rowvec", [](const std::vector<Tensor>& in) { return sum(mul_rowvec(in[0], in[1])); }, {a, v});
    check1("repeat_rows", [](const std::vector<Tensor>& in) { return sum(mul(repeat_rows(in[0], 3), repeat_rows(in[0], 3))); }, {a});
    check1("sum_row_groups", [](const std::vector<Tensor>& in) {
        Tensor g = sum_row_groups(repeat_rows(in[0], 2), 3);
        return sum(mul(g, g));
    }, {a});
    check1("concat0", [](const std::vector<Tensor>& in) {
        Tensor c = concat({in[0], mul(in[0], in[0])}, 0);
        return sum(mul(c, c));
    }, {a});
    check1("concat1", [](const std::vector<Tensor>& in) {
        Tensor c = concat({in[0], mul(in[0], in[0])}, 1);
        return sum(mul(c, c));
    }, {a});
    check1("gather", [](const std::vector<Tensor>& in) {
        Tensor g = gather(in[0], std::vector<std::int64_t>{0, 5, 5, -1, 2}, Shape{5});
        return sum(mul(g, g));
    }, {a});
    check1("reshape", [](const std::vector<Tensor>& in) {
        Tensor r = reshape(in[0], {2, 6});
        return sum(mul(r, r));
    }, {a});
}

TEST_CASE("layer_norm gradient matches finite differences") {
    std::mt19937_64 rng(41);
    Tensor x = Tensor::randn({4, 6}, rng);
    Tensor gamma = Tensor::uniform({6}, rng, 0.5, 1.5);
    Tensor beta = Tensor::randn({6}, rng, 0.1);
    auto f = [](const std::vector<Tensor>& in) {
        Tensor y = layer_norm(in[0], in[1], in[2]);
        return sum(mul(y, y));
    };
    auto report = grad_check(f, {x, gamma, beta}, 1e-6, 1e-5, {"x", "gamma", "beta"});
    INFO(report.summary());
    CHECK(report.passed);
}

TEST_CASE("loss op gradients") {
    std::mt19937_64 rng(43);
    Tensor logits = Tensor::randn({5, 4}, rng);
    std::vector<std::size_t> targets = {0, 3, 1, 3, 2};
    std::vector<double> weights = {1.0, 1.0, 1.0, 0.1};
    auto f = [&](const std::vector<Tensor>& in) { return cross_entropy(in[0], targets, weights); };
    auto report = grad_check(f, {logits}, 1e-6, 1e-5, {"logits"});
    INFO(report.summary());
    CHECK(report.passed);

    Tensor ml = Tensor::randn({3, 3}, rng);
    Tensor tgt = Tensor::from({3, 3}, {1, 0, 1, 0, 1, 0, 0.5, 0.25, 1});
    auto g = [&](const std::vector<Tensor>& in) { return bce_with_logits(in[0], tgt); };
    auto report2 = grad_check(g, {ml}, 1e-6, 1e-5, {"mask_logits"});
    INFO(report2.summary());
    CHECK(report2.passed);
}

TEST_CASE("cross entropy of a perfect prediction is near zero") {
    Tensor logits = Tensor::from({1, 3}, {50.0, 0.0, 0.0});
    Tensor l = cross_entropy(logits, {0}, {1.0, 1.0, 1.0});
    CHECK(l.value() < 1e-12);
}

TEST_CASE("tensors detached from the tape take no gradient") {
    Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
    Tape tape;
    Tensor y = mul(x.detach(), x);  // d/dx = 2 (detached factor is constant)
    tape.backward(y);
    CHECK(tape.grad(x)[0] == Catch::Approx(2.0));
}

TEST_CASE("tensor from rejects wrong data length") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("sample counter tracks bilinear lookups") {
    std::mt19937_64 rng(47);
    Tensor map = Tensor::randn({1, 4, 4}, rng);
    Tensor pts = Tensor::uniform({9, 2}, rng, 0.0, 3.0);
    SampleCounter::reset();
    bilinear_sample(map, pts);
    CHECK(SampleCounter::count() == 9);
}
