#include <catch2/catch_amalgamated.hpp>

#include "deskvis/grad_check.hpp"
#include "deskvis/mask_head.hpp"
#include "naive_ref.hpp"

#include <random>

using namespace deskvis;

namespace {

void jitter(Tensor& t, std::mt19937_64& rng, double span) {
    std::uniform_real_distribution<double> d(-span, span);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
}

}  // namespace

TEST_CASE("filter_positive keeps matched rows only") {
    std::mt19937_64 rng(3);
    Tensor emb = Tensor::randn({100, 4}, rng);
    Tensor kept = filter_positive(emb, {7, 42, 99});
    REQUIRE(kept.shape() == Shape{3, 4});
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(kept.at(0, j) == emb.at(7, j));
        CHECK(kept.at(1, j) == emb.at(42, j));
        CHECK(kept.at(2, j) == emb.at(99, j));
    }

    std::vector<std::size_t> all(100);
    for (std::size_t i = 0; i < 100; ++i) all[i] = i;
    Tensor identity = filter_positive(emb, all);
    for (std::size_t i = 0; i < emb.size(); ++i) CHECK(identity[i] == emb[i]);

    Tensor empty = filter_positive(emb, {});
    CHECK(empty.shape() == Shape{0, 4});
}

TEST_CASE("attention maps are uniform on constant features") {
    std::mt19937_64 rng(5);
    MaskHeadParams p = MaskHeadParams::init(8, 2, 2, 4, rng);
    TokenLayout layout(2, {{4, 4}, {2, 2}});
    Tensor memory = Tensor::full({layout.token_count(), 8}, 0.7);
    Tensor emb = Tensor::randn({2, 8}, rng);
    auto maps = compute_attention_maps(emb, {0, 1}, memory, layout, p);
    REQUIRE(maps.levels.size() == 2);
    CHECK(maps.levels[0].shape() == Shape{2, 2, 4, 4});
    for (std::size_t i = 0; i < maps.levels[0].size(); ++i)
        CHECK(maps.levels[0][i] == Catch::Approx(1.0 / 16.0));
    for (std::size_t i = 0; i < maps.levels[1].size(); ++i)
        CHECK(maps.levels[1][i] == Catch::Approx(1.0 / 4.0));
}

TEST_CASE("attention maps saturate on a dominating key") {
    std::mt19937_64 rng(7);
    MaskHeadParams p = MaskHeadParams::init(4, 1, 1, 4, rng);
    // identity projections
    p.attn[0].wq = Tensor::zeros({4, 4});
    p.attn[0].wk = Tensor::zeros({4, 4});
    for (std::size_t i = 0; i < 4; ++i) {
        p.attn[0].wq.at(i, i) = 1.0;
        p.attn[0].wk.at(i, i) = 1.0;
    }
    TokenLayout layout(1, {{4, 4}});
    Tensor memory = Tensor::zeros({16, 4});
    memory.at(5, 0) = 40.0;  // logit 40/sqrt(4) = 20 for the matching query
    Tensor emb = Tensor::zeros({1, 4});
    emb.at(0, 0) = 1.0;
    auto maps = compute_attention_maps(emb, {0}, memory, layout, p);
    CHECK(maps.levels[0][5] > 0.99);
}

TEST_CASE("attention maps match a naive per-pixel dot product") {
    std::mt19937_64 rng(11);
    const std::size_t c = 8, m = 2;
    MaskHeadParams p = MaskHeadParams::init(c, 1, m, 4, rng);
    TokenLayout layout(2, {{3, 5}});
    Tensor memory = Tensor::randn({layout.token_count(), c}, rng);
    Tensor emb = Tensor::randn({2, c}, rng);
    std::vector<std::size_t> frames{1, 0};
    auto maps = compute_attention_maps(emb, frames, memory, layout, p);

    const std::size_t hw = 15, cv = c / m;
    for (std::size_t q = 0; q < 2; ++q) {
        std::vector<double> e(c);
        for (std::size_t j = 0; j < c; ++j) e[j] = emb.at(q, j);
        auto qp = naive::mat_vec(p.attn[0].wq, p.attn[0].bq, e);
        for (std::size_t h = 0; h < m; ++h) {
            std::vector<double> logits(hw);
            for (std::size_t pix = 0; pix < hw; ++pix) {
                std::vector<double> key(c);
                for (std::size_t j = 0; j < c; ++j)
                    key[j] = memory.at(layout.block_offset(frames[q], 0) + pix, j);
                auto kp = naive::mat_vec(p.attn[0].wk, p.attn[0].bk, key);
                double dot = 0.0;
                for (std::size_t j = 0; j < cv; ++j) dot += qp[h * cv + j] * kp[h * cv + j];
                logits[pix] = dot / std::sqrt(double(cv));
            }
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            double z = 0.0;
            for (double v : logits) z += std::exp(v - mx);
            for (std::size_t pix = 0; pix < hw; ++pix) {
                const double expect = std::exp(logits[pix] - mx) / z;
                CHECK(std::fabs(maps.levels[0][(q * m + h) * hw + pix] - expect) < 1e-12);
            }
        }
    }
}

TEST_CASE("attention maps sum to one per query head and level") {
    std::mt19937_64 rng(13);
    MaskHeadParams p = MaskHeadParams::init(8, 2, 4, 8, rng);
    TokenLayout layout(3, {{6, 6}, {3, 3}});
    Tensor memory = Tensor::randn({layout.token_count(), 8}, rng, 2.0);
    Tensor emb = Tensor::randn({4, 8}, rng, 2.0);
    auto maps = compute_attention_maps(emb, {0, 1, 2, 0}, memory, layout, p);
    for (std::size_t l = 0; l < 2; ++l) {
        const auto [lh, lw] = layout.level_dims[l];
        for (std::size_t q = 0; q < 4; ++q)
            for (std::size_t h = 0; h < 4; ++h) {
                double total = 0.0;
                for (std::size_t pix = 0; pix < lh * lw; ++pix)
                    total += maps.levels[l][(q * 4 + h) * lh * lw + pix];
                CHECK(std::fabs(total - 1.0) < 1e-9);
            }
    }
}

TEST_CASE("mdc with zero branches is exactly half a plain convolution") {
    std::mt19937_64 rng(17);
    MDCParams mdc = MDCParams::init(3, 2, 3, rng);
    Tensor x = Tensor::randn({2, 6, 7}, rng);

    ConvParams plain;
    plain.k = 3;
    plain.c_in = 2;
    plain.c_out = 3;
    plain.w = mdc.w;
    plain.b = Tensor::zeros({3});

    Tensor got = modulated_deform_conv(x, mdc);
    Tensor ref = conv2d(x, plain);
    REQUIRE(got.shape() == ref.shape());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == 0.5 * ref[i]);
}

TEST_CASE("mdc on a constant field gives half the kernel sum at interior pixels") {
    std::mt19937_64 rng(19);
    const double v = 0.6;
    MDCParams mdc = MDCParams::init(3, 1, 1, rng);
    Tensor x = Tensor::full({1, 5, 5}, v);
    Tensor out = modulated_deform_conv(x, mdc);
    double kernel_sum = 0.0;
    for (std::size_t i = 0; i < mdc.w.size(); ++i) kernel_sum += mdc.w[i];
    CHECK(out.at(0, 2, 2) == Catch::Approx(0.5 * kernel_sum * v));
}

TEST_CASE("mdc gradient check across all branches") {
    std::mt19937_64 rng(23);
    MDCParams proto = MDCParams::init(3, 1, 1, rng);
    // jitter branches so offsets are off-lattice and modulation is non-trivial
    jitter(proto.offset_branch.w, rng, 0.15);
    jitter(proto.offset_branch.b, rng, 0.35);
    jitter(proto.modulation_branch.w, rng, 0.3);
    jitter(proto.modulation_branch.b, rng, 0.3);
    Tensor x = Tensor::randn({1, 5, 5}, rng);

    auto f = [&](const std::vector<Tensor>& in) {
        MDCParams p = proto;
        p.w = in[1];
        p.offset_branch.w = in[2];
        p.offset_branch.b = in[3];
        p.modulation_branch.w = in[4];
        p.modulation_branch.b = in[5];
        Tensor y = modulated_deform_conv(in[0], p);
        return sum(mul(y, y));
    };
    auto report = grad_check(f,
                             {x, proto.w, proto.offset_branch.w, proto.offset_branch.b,
                              proto.modulation_branch.w, proto.modulation_branch.b},
                             1e-6, 1e-4, {"x", "kernel", "off_w", "off_b", "mod_w", "mod_b"});
    INFO(report.summary());
    CHECK(report.passed);
}

TEST_CASE("mask head output size follows the finest level") {
    std::mt19937_64 rng(29);
    const std::size_t c = 8;
    for (std::size_t levels : {std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
        std::vector<std::pair<std::size_t, std::size_t>> dims;
        for (std::size_t l = 0; l < levels; ++l) dims.push_back({8 >> l, 8 >> l});
        MaskHeadParams p = MaskHeadParams::init(c, levels, 2, 4, rng);
        TokenLayout layout(2, dims);
        Tensor memory = Tensor::randn({layout.token_count(), c}, rng);
        Tensor raw = Tensor::randn({c, 2, 8, 8}, rng);
        Tensor emb = Tensor::randn({3, c}, rng);
        std::vector<std::size_t> frames{0, 1, 0};
        auto maps = compute_attention_maps(emb, frames, memory, layout, p);
        Tensor masks = mask_head_forward(memory, layout, raw, maps, frames, p);
        CHECK(masks.shape() == Shape{3, 8, 8});
        CHECK(masks.all_finite());
    }
}

TEST_CASE("mask head with no positive queries returns an empty mask tensor") {
    std::mt19937_64 rng(31);
    MaskHeadParams p = MaskHeadParams::init(8, 2, 2, 4, rng);
    TokenLayout layout(2, {{4, 4}, {2, 2}});
    Tensor memory = Tensor::randn({layout.token_count(), 8}, rng);
    Tensor raw = Tensor::randn({8, 2, 4, 4}, rng);
    Tensor emb = Tensor::zeros({0, 8});
    auto maps = compute_attention_maps(emb, {}, memory, layout, p);
    Tensor masks = mask_head_forward(memory, layout, raw, maps, {}, p);
    CHECK(masks.shape() == Shape{0, 4, 4});
}

TEST_CASE("mask head rejects a broken level chain") {
    std::mt19937_64 rng(37);
    MaskHeadParams p = MaskHeadParams::init(8, 2, 2, 4, rng);
    TokenLayout layout(1, {{6, 6}, {2, 2}});  // 6 != 2*2
    Tensor memory = Tensor::randn({layout.token_count(), 8}, rng);
    Tensor raw = Tensor::randn({8, 1, 6, 6}, rng);
    Tensor emb = Tensor::randn({1, 8}, rng);
    auto maps = compute_attention_maps(emb, {0}, memory, layout, p);
    CHECK_THROWS_AS(mask_head_forward(memory, layout, raw, maps, {0}, p), std::invalid_argument);
}

TEST_CASE("miniature mask head passes the gradient check") {
    std::mt19937_64 rng(41);
    const std::size_t c = 4;
    MaskHeadParams proto = MaskHeadParams::init(c, 2, 2, 3, rng);
    for (std::size_t l = 0; l < 2; ++l) {
        jitter(proto.stage[l].offset_branch.w, rng, 0.1);
        jitter(proto.stage[l].offset_branch.b, rng, 0.3);
        jitter(proto.stage[l].modulation_branch.b, rng, 0.3);
    }
    jitter(proto.fuse.offset_branch.b, rng, 0.3);
    TokenLayout layout(1, {{4, 4}, {2, 2}});
    Tensor memory = Tensor::randn({layout.token_count(), c}, rng);
    Tensor raw = Tensor::randn({c, 1, 4, 4}, rng);
    Tensor emb = Tensor::randn({1, c}, rng);
    std::vector<std::size_t> frames{0};

    std::vector<Tensor*> params;
    std::vector<std::string> names;
    auto collect = [&](const std::string& name, Tensor& t) {
        params.push_back(&t);
        names.push_back(name);
    };
    proto.visit("mask", collect);
    std::vector<Tensor> values;
    values.push_back(emb);
    values.push_back(memory);
    for (Tensor* p : params) values.push_back(*p);
    std::vector<std::string> all_names = {"embeddings", "memory"};
    all_names.insert(all_names.end(), names.begin(), names.end());

    auto f = [&](const std::vector<Tensor>& in) {
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] = in[i + 2];
        auto maps = compute_attention_maps(in[0], frames, in[1], layout, proto);
        Tensor masks = mask_head_forward(in[1], layout, raw, maps, frames, proto);
        return sum(mul(masks, masks));
    };
    auto report = grad_check(f, values, 1e-6, 1e-4, all_names);
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] = values[i + 2];
    INFO(report.summary());
    CHECK(report.passed);
}
