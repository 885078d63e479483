#include <catch2/catch_amalgamated.hpp>

#include "deskvis/grad_check.hpp"
#include "deskvis/matching.hpp"

#include <algorithm>
#include <random>

using namespace deskvis;

namespace {

// brute force over all injections via permutations of the padded square
double brute_force_min_cost(const Tensor& cost) {
    const std::size_t r = cost.dim(0), s = cost.dim(1);
    const std::size_t n = std::max(r, s);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (i < r && perm[i] < s) total += cost.at(i, perm[i]);
        }
        best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

GroundTruthClip two_instance_clip() {
    GroundTruthClip gt;
    gt.frames = 2;
    for (std::size_t i = 0; i < 2; ++i) {
        GroundTruthInstance inst;
        inst.identity = i;
        inst.class_id = i;
        inst.present = {true, true};
        inst.boxes = {{{0.2 + 0.4 * i, 0.3, 0.1, 0.2}}, {{0.25 + 0.4 * i, 0.35, 0.1, 0.2}}};
        Tensor m = Tensor::zeros({4, 4});
        m.at(i, i) = 1.0;
        m.at(i + 1, i) = 1.0;
        inst.masks = {m, m.clone()};
        gt.instances.push_back(inst);
    }
    return gt;
}

}  // namespace

TEST_CASE("hungarian on an identity-like cost") {
    Tensor cost = Tensor::full({3, 3}, 1.0);
    for (std::size_t i = 0; i < 3; ++i) cost.at(i, i) = 0.0;
    auto a = hungarian(cost);
    REQUIRE(a.pairs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a.pairs[i].first == i);
        CHECK(a.pairs[i].second == i);
    }
    CHECK(a.total_cost == 0.0);
}

TEST_CASE("hungarian on a single entry") {
    Tensor cost = Tensor::from({1, 1}, {4.2});
    auto a = hungarian(cost);
    REQUIRE(a.pairs.size() == 1);
    CHECK(a.total_cost == Catch::Approx(4.2));
}

TEST_CASE("hungarian equals brute force on random matrices") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> dim(1, 6);
    std::uniform_int_distribution<int> val(-9, 9);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t r = dim(rng), s = dim(rng);
        Tensor cost{Shape{r, s}};
        for (std::size_t i = 0; i < cost.size(); ++i) cost[i] = val(rng);
        auto a = hungarian(cost);
        CHECK(a.pairs.size() == std::min(r, s));
        CHECK(a.total_cost == Catch::Approx(brute_force_min_cost(cost)));
    }
}

TEST_CASE("hungarian rejects NaN costs") {
    Tensor cost = Tensor::from({2, 2}, {1.0, std::nan(""), 0.0, 2.0});
    CHECK_THROWS_AS(hungarian(cost), std::invalid_argument);
}

TEST_CASE("assignment is invariant to positive scaling of the cost") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor cost = Tensor::randn({5, 5}, rng);
        auto a = hungarian(cost);
        Tensor scaled{cost.shape()};
        for (std::size_t i = 0; i < cost.size(); ++i) scaled[i] = 3.7 * cost[i];
        auto b = hungarian(scaled);
        CHECK(a.pairs == b.pairs);
    }
}

TEST_CASE("giou basic values") {
    std::array<double, 4> b1{0.5, 0.5, 0.2, 0.2};
    CHECK(giou(b1, b1) == Catch::Approx(1.0));

    // unit boxes touching on one axis
    std::array<double, 4> u1{0.5, 0.5, 1.0, 1.0}, u2{1.5, 0.5, 1.0, 1.0};
    CHECK(giou(u1, u2) == Catch::Approx(0.0).margin(1e-12));

    // far apart approaches -1
    std::array<double, 4> f1{0.0, 0.0, 0.01, 0.01}, f2{1000.0, 0.0, 0.01, 0.01};
    CHECK(giou(f1, f2) < -0.99);

    // degenerate boxes are clamped, not NaN
    std::array<double, 4> z{0.5, 0.5, 0.0, 0.0};
    CHECK(std::isfinite(giou(z, z)));
    CHECK(giou(z, z) == Catch::Approx(1.0));
}

TEST_CASE("giou gradient matches finite differences") {
    std::mt19937_64 rng(7);
    Tensor a = Tensor::uniform({3, 4}, rng, 0.2, 0.8);
    Tensor b = Tensor::uniform({3, 4}, rng, 0.2, 0.8);
    auto f = [&](const std::vector<Tensor>& in) { return sum(giou_batch(in[0], in[1])); };
    auto report = grad_check(f, {a, b}, 1e-6, 1e-5, {"a", "b"});
    INFO(report.summary());
    CHECK(report.passed);
}

TEST_CASE("trajectory cost of a perfect prediction") {
    GroundTruthClip gt = two_instance_clip();
    LossWeights w;
    SlotPredictions preds;
    preds.probs.assign(2, std::vector<std::vector<double>>(2, std::vector<double>(3, 0.0)));
    preds.boxes.assign(2, std::vector<std::array<double, 4>>(2));
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t t = 0; t < 2; ++t) {
            preds.probs[s][t][gt.instances[s].class_id] = 1.0;
            preds.boxes[s][t] = gt.instances[s].boxes[t];
        }
    Tensor cost = trajectory_match_cost(preds, gt, w);
    // perfect: -lambda_class * #present, with zero box terms on the diagonal
    CHECK(cost.at(0, 0) == Catch::Approx(-2.0));
    CHECK(cost.at(1, 1) == Catch::Approx(-2.0));
    auto a = hungarian(cost);
    CHECK(a.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});
}

TEST_CASE("trajectory cost matches a hand computation") {
    GroundTruthClip gt;
    gt.frames = 1;
    GroundTruthInstance inst;
    inst.identity = 0;
    inst.class_id = 1;
    inst.present = {true};
    inst.boxes = {{{0.5, 0.5, 0.2, 0.2}}};
    inst.masks = {Tensor::zeros({2, 2})};
    gt.instances.push_back(inst);
    GroundTruthInstance inst2 = inst;
    inst2.class_id = 0;
    inst2.boxes = {{{0.3, 0.5, 0.2, 0.2}}};
    gt.instances.push_back(inst2);

    SlotPredictions preds;
    preds.probs = {{{0.6, 0.3, 0.1}}, {{0.2, 0.7, 0.1}}};
    preds.boxes = {{{0.5, 0.5, 0.2, 0.2}}, {{0.4, 0.5, 0.2, 0.2}}};
    LossWeights w;
    Tensor cost = trajectory_match_cost(preds, gt, w);

    // slot 0 vs instance 0: identical boxes, class prob 0.3
    CHECK(cost.at(0, 0) == Catch::Approx(-0.3));
    // slot 1 vs instance 1: l1 = 4*|0.4-0.3|/... = 0.1; giou of shifted boxes
    const double g = giou({0.4, 0.5, 0.2, 0.2}, {0.3, 0.5, 0.2, 0.2});
    CHECK(cost.at(1, 1) == Catch::Approx(-0.2 + 5.0 * 0.1 + 2.0 * (1.0 - g)));
}

TEST_CASE("default aux schedule matches the cascaded weighting") {
    auto s6 = LossWeights::default_schedule(6);
    REQUIRE(s6.size() == 6);
    CHECK(s6[0] == Catch::Approx(1.0 / 30.0));
    CHECK(s6[1] == Catch::Approx(2.0 / 30.0));
    CHECK(s6[2] == Catch::Approx(3.0 / 30.0));
    CHECK(s6[3] == Catch::Approx(4.0 / 30.0));
    CHECK(s6[4] == Catch::Approx(5.0 / 30.0));
    CHECK(s6[5] == Catch::Approx(0.5));
    for (std::size_t d : {2, 3, 4, 6, 8}) {
        auto s = LossWeights::default_schedule(d);
        double total = 0.0;
        for (double v : s) total += v;
        CHECK(total == Catch::Approx(1.0));
        LossWeights::check_schedule(s);
    }
    CHECK_THROWS_AS(LossWeights::check_schedule({0.3, 0.3}), std::invalid_argument);
}

TEST_CASE("mask loss layers are the final plus the third") {
    CHECK(mask_loss_layers(3) == std::vector<std::size_t>{2});
    CHECK(mask_loss_layers(6) == std::vector<std::size_t>{2, 5});
    CHECK(mask_loss_layers(2) == std::vector<std::size_t>{1});
    CHECK(mask_loss_layers(4) == std::vector<std::size_t>{2, 3});
}

TEST_CASE("perfect predictions give zero box and mask losses") {
    GroundTruthClip gt = two_instance_clip();
    const std::size_t per_frame = 3, n = per_frame * gt.frames;
    LossWeights w;

    std::vector<DecoderLayerOutput> outs(1);
    outs[0].class_logits = Tensor::zeros({n, 3});
    outs[0].boxes = Tensor::full({n, 4}, 0.9);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t s = 0; s < 2; ++s) {
            const std::size_t q = t * per_frame + s;
            for (std::size_t j = 0; j < 4; ++j) outs[0].boxes.at(q, j) = gt.instances[s].boxes[t][j];
            for (std::size_t j = 0; j < 3; ++j)
                outs[0].class_logits.at(q, j) = (j == gt.instances[s].class_id) ? 60.0 : 0.0;
        }
    // unmatched queries confidently predict no-object
    for (std::size_t t = 0; t < 2; ++t) outs[0].class_logits.at(t * per_frame + 2, 2) = 60.0;

    Assignment assign;
    assign.pairs = {{0, 0}, {1, 1}};
    MatchedTargets matched = matched_targets(assign, gt, per_frame);
    Tensor mask_logits{Shape{matched.query_rows.size(), 4, 4}};
    for (std::size_t i = 0; i < mask_logits.size(); ++i)
        mask_logits[i] = matched.masks[i] > 0.5 ? 500.0 : -500.0;

    LossReport rep;
    Tensor total = compute_losses(outs, assign, gt, w, per_frame, {{0, mask_logits}}, &rep);
    CHECK(rep.l1_term == Catch::Approx(0.0).margin(1e-12));
    CHECK(rep.giou_term == Catch::Approx(0.0).margin(1e-12));
    CHECK(rep.class_term < 1e-9);
    CHECK(rep.bce_term < 1e-9);
    CHECK(rep.dice_term < 1e-9);
    CHECK(total.value() < 1e-8);
}

TEST_CASE("dice of identical saturated masks is zero") {
    Tensor target = Tensor::zeros({1, 3, 3});
    target[0] = target[4] = target[8] = 1.0;
    Tensor logits{Shape{1, 3, 3}};
    for (std::size_t i = 0; i < 9; ++i) logits[i] = target[i] > 0.5 ? 500.0 : -500.0;
    CHECK(dice_loss(logits, target).value() < 1e-12);
}

TEST_CASE("dice and bce are symmetric at saturation") {
    std::mt19937_64 rng(11);
    Tensor a = Tensor::zeros({1, 4, 4});
    Tensor b = Tensor::zeros({1, 4, 4});
    std::uniform_int_distribution<int> bit(0, 1);
    for (std::size_t i = 0; i < 16; ++i) {
        a[i] = bit(rng);
        b[i] = bit(rng);
    }
    auto saturate = [](const Tensor& m) {
        Tensor l{m.shape()};
        for (std::size_t i = 0; i < m.size(); ++i) l[i] = m[i] > 0.5 ? 500.0 : -500.0;
        return l;
    };
    CHECK(dice_loss(saturate(a), b).value() == Catch::Approx(dice_loss(saturate(b), a).value()).margin(1e-9));
    CHECK(bce_with_logits(saturate(a), b).value() ==
          Catch::Approx(bce_with_logits(saturate(b), a).value()).margin(1e-9));
}

TEST_CASE("empty ground truth reduces to no-object cross entropy") {
    GroundTruthClip gt;
    gt.frames = 2;
    const std::size_t per_frame = 2, n = 4;
    std::vector<DecoderLayerOutput> outs(1);
    std::mt19937_64 rng(13);
    outs[0].class_logits = Tensor::randn({n, 3}, rng);
    outs[0].boxes = Tensor::full({n, 4}, 0.5);

    LossWeights w;
    Assignment assign;  // empty
    LossReport rep;
    Tensor total = compute_losses(outs, assign, gt, w, per_frame, {}, &rep);
    CHECK(rep.l1_term == 0.0);
    CHECK(rep.giou_term == 0.0);
    CHECK(rep.bce_term == 0.0);
    CHECK(rep.dice_term == 0.0);

    std::vector<std::size_t> targets(n, 2);
    Tensor expect = cross_entropy(outs[0].class_logits, targets, {1.0, 1.0, 0.1});
    CHECK(total.value() == Catch::Approx(expect.value()));
}

TEST_CASE("filtered mask loss equals zero-weighted full loss") {
    std::mt19937_64 rng(17);
    const std::size_t n = 6, hw = 9;
    Tensor all_logits = Tensor::randn({n, hw}, rng);
    Tensor all_targets = Tensor::zeros({n, hw});
    for (std::size_t i = 0; i < all_targets.size(); ++i)
        all_targets[i] = (i % 3 == 0) ? 1.0 : 0.0;
    std::vector<std::size_t> matched_rows{1, 3, 4};

    Tensor filtered = bce_with_logits(take_rows(all_logits, matched_rows),
                                      take_rows(all_targets, matched_rows));

    // zero-weighted: per-row mean bce, weights 1 for matched rows, 0 otherwise
    double acc = 0.0;
    for (std::size_t r : matched_rows) {
        Tensor row_loss = bce_with_logits(slice_rows(all_logits, r, 1), slice_rows(all_targets, r, 1));
        acc += row_loss.value();
    }
    acc /= static_cast<double>(matched_rows.size());
    CHECK(std::fabs(filtered.value() - acc) < 1e-12);
}

TEST_CASE("loss gradient flows through boxes logits and masks") {
    GroundTruthClip gt = two_instance_clip();
    const std::size_t per_frame = 2, n = 4;
    std::mt19937_64 rng(19);
    Tensor emb_logits = Tensor::randn({n, 3}, rng);
    Tensor box_raw = Tensor::uniform({n, 4}, rng, -1.0, 1.0);
    Assignment assign;
    assign.pairs = {{0, 0}, {1, 1}};
    MatchedTargets matched = matched_targets(assign, gt, per_frame);
    Tensor mask_raw = Tensor::randn({matched.query_rows.size(), 4, 4}, rng);

    LossWeights w;
    auto f = [&](const std::vector<Tensor>& in) {
        std::vector<DecoderLayerOutput> outs(2);
        for (auto& o : outs) {
            o.class_logits = in[0];
            o.boxes = sigmoid(in[1]);
        }
        std::map<std::size_t, Tensor> masks{{1, in[2]}};
        return compute_losses(outs, assign, gt, w, per_frame, masks);
    };
    auto report = grad_check(f, {emb_logits, box_raw, mask_raw}, 1e-6, 1e-4,
                             {"class_logits", "box_raw", "mask_logits"});
    INFO(report.summary());
    CHECK(report.passed);
}
