#pragma once

// Multi-scale deformable mask head: per-query spatial attention maps at every
// encoded level, a coarse-to-fine upsampling path over the encoded feature
// maps, modulated deformable convolutions, and a raw finest-scale skip.
//
// Feature grids are handled in row form [H*W, channels]. Convolutions are
// stride-1 with zero padding and accumulate tap by tap, so a modulated
// deformable convolution with zero offset/modulation branches reproduces
// exactly half of the plain convolution (modulation sigmoid(0) = 0.5 scales
// each tap, and no bias term exists to break the factor).

#include "deskvis/deform_attn.hpp"

#include <map>
#include <tuple>

namespace deskvis {

// Nearest-neighbor 2x upsampling of a row-form grid.
inline Tensor upsample2_rows(const Tensor& rows, std::size_t h, std::size_t w) {
    if (rows.rank() != 2 || rows.dim(0) != h * w)
        throw std::invalid_argument("upsample2_rows: rows must be [h*w, c]");
    const std::size_t c = rows.dim(1);
    std::vector<std::int64_t> idx(4 * h * w * c);
    for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t x = 0; x < 2 * w; ++x)
            for (std::size_t j = 0; j < c; ++j)
                idx[(y * 2 * w + x) * c + j] = static_cast<std::int64_t>(((y / 2) * w + x / 2) * c + j);
    return gather(rows, std::move(idx), Shape{4 * h * w, c});
}

// ---------------------------------------------------------------------------
// Plain convolution, tap-major weights.

struct ConvParams {
    std::size_t k = 3, c_in = 0, c_out = 0;
    Tensor w;  // [k*k*c_out, c_in]; tap j owns rows [j*c_out, (j+1)*c_out)
    Tensor b;  // [c_out]

    static ConvParams init(std::size_t k, std::size_t c_in, std::size_t c_out, std::mt19937_64& rng,
                           bool zero = false) {
        ConvParams p;
        p.k = k;
        p.c_in = c_in;
        p.c_out = c_out;
        if (zero) {
            p.w = Tensor::zeros({k * k * c_out, c_in}).set_requires_grad(true);
        } else {
            const double he = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
            p.w = Tensor::randn({k * k * c_out, c_in}, rng, he).set_requires_grad(true);
        }
        p.b = Tensor::zeros({c_out}).set_requires_grad(true);
        return p;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w", w);
        fn(prefix + ".b", b);
    }
};

namespace detail {

// indices that shift a [h*w, c] grid by (dy, dx), zero padding via -1;
// memoized since conv stages reuse the same small set every call
inline std::shared_ptr<const std::vector<std::int64_t>> shifted_grid(std::size_t h, std::size_t w,
                                                                     std::size_t c, int dy, int dx) {
    using Key = std::tuple<std::size_t, std::size_t, std::size_t, int, int>;
    static thread_local std::map<Key, std::shared_ptr<const std::vector<std::int64_t>>> cache;
    const Key key{h, w, c, dy, dx};
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    std::vector<std::int64_t> idx(h * w * c);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const long sy = static_cast<long>(y) + dy, sx = static_cast<long>(x) + dx;
            const bool in = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
            for (std::size_t j = 0; j < c; ++j)
                idx[(y * w + x) * c + j] = in ? static_cast<std::int64_t>((sy * w + sx) * c + j) : -1;
        }
    auto shared = std::make_shared<const std::vector<std::int64_t>>(std::move(idx));
    cache.emplace(key, shared);
    return shared;
}

}  // namespace detail

inline Tensor conv2d_rows(const Tensor& rows, std::size_t h, std::size_t w, const ConvParams& p) {
    if (rows.rank() != 2 || rows.dim(0) != h * w || rows.dim(1) != p.c_in)
        throw std::invalid_argument("conv2d_rows: input is " + shape_str(rows.shape()));
    const int r = static_cast<int>(p.k) / 2;
    Tensor acc;
    std::size_t j = 0;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx, ++j) {
            Tensor tap = gather(rows, detail::shifted_grid(h, w, p.c_in, dy, dx), Shape{h * w, p.c_in});
            Tensor wj = slice_rows(p.w, j * p.c_out, p.c_out);
            Tensor term = j == 0 ? linear(tap, wj, p.b) : linear(tap, wj);
            acc = acc.defined() ? add(acc, term) : term;
        }
    return acc;
}

// ---------------------------------------------------------------------------
// Modulated deformable convolution.

struct MDCParams {
    std::size_t k = 3, c_in = 0, c_out = 0;
    Tensor w;               // [k*k*c_out, c_in] tap-major kernel, no bias
    ConvParams offset_branch;      // c_in -> 2*k*k per pixel (dy, dx per tap), zero-init
    ConvParams modulation_branch;  // c_in -> k*k per pixel, sigmoid-activated, zero-init

    static MDCParams init(std::size_t k, std::size_t c_in, std::size_t c_out, std::mt19937_64& rng) {
        MDCParams p;
        p.k = k;
        p.c_in = c_in;
        p.c_out = c_out;
        const double he = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
        p.w = Tensor::randn({k * k * c_out, c_in}, rng, he).set_requires_grad(true);
        p.offset_branch = ConvParams::init(k, c_in, 2 * k * k, rng, /*zero=*/true);
        p.modulation_branch = ConvParams::init(k, c_in, k * k, rng, /*zero=*/true);
        return p;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w", w);
        offset_branch.visit(prefix + ".offset", fn);
        modulation_branch.visit(prefix + ".modulation", fn);
    }
};

inline Tensor modulated_deform_conv_rows(const Tensor& rows, std::size_t h, std::size_t w,
                                         const MDCParams& p) {
    if (rows.rank() != 2 || rows.dim(0) != h * w || rows.dim(1) != p.c_in)
        throw std::invalid_argument("modulated_deform_conv_rows: input is " + shape_str(rows.shape()));
    const int r = static_cast<int>(p.k) / 2;
    const std::size_t taps = p.k * p.k;

    Tensor offsets = conv2d_rows(rows, h, w, p.offset_branch);              // [hw, 2*taps]
    Tensor modulation = sigmoid(conv2d_rows(rows, h, w, p.modulation_branch));  // [hw, taps]

    Tensor acc;
    std::size_t j = 0;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx, ++j) {
            // base sampling grid for this tap
            Tensor base{Shape{h * w, 2}};
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    base[(y * w + x) * 2 + 0] = static_cast<double>(y) + dy;
                    base[(y * w + x) * 2 + 1] = static_cast<double>(x) + dx;
                }
            std::vector<std::int64_t> oidx(h * w * 2);
            for (std::size_t pix = 0; pix < h * w; ++pix) {
                oidx[pix * 2 + 0] = static_cast<std::int64_t>(pix * 2 * taps + 2 * j);      // dy
                oidx[pix * 2 + 1] = static_cast<std::int64_t>(pix * 2 * taps + 2 * j + 1);  // dx
            }
            Tensor pts = add(base, gather(offsets, std::move(oidx), Shape{h * w, 2}));
            Tensor sampled = bilinear_sample_rows(rows, h, w, pts);  // [hw, c_in]

            std::vector<std::int64_t> midx(h * w);
            for (std::size_t pix = 0; pix < h * w; ++pix)
                midx[pix] = static_cast<std::int64_t>(pix * taps + j);
            Tensor modded = scale_rows(sampled, gather(modulation, std::move(midx), Shape{h * w}));

            Tensor term = linear(modded, slice_rows(p.w, j * p.c_out, p.c_out));
            acc = acc.defined() ? add(acc, term) : term;
        }
    return acc;
}

// [C_in, H, W] convenience forms.
inline Tensor modulated_deform_conv(const Tensor& x, const MDCParams& p) {
    if (x.rank() != 3) throw std::invalid_argument("modulated_deform_conv: x must be [c, h, w]");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<std::int64_t> idx(h * w * c);
    for (std::size_t pix = 0; pix < h * w; ++pix)
        for (std::size_t j = 0; j < c; ++j) idx[pix * c + j] = static_cast<std::int64_t>(j * h * w + pix);
    Tensor rows = gather(x, std::move(idx), Shape{h * w, c});
    Tensor out_rows = modulated_deform_conv_rows(rows, h, w, p);  // [hw, c_out]
    std::vector<std::int64_t> back(p.c_out * h * w);
    for (std::size_t j = 0; j < p.c_out; ++j)
        for (std::size_t pix = 0; pix < h * w; ++pix)
            back[j * h * w + pix] = static_cast<std::int64_t>(pix * p.c_out + j);
    return gather(out_rows, std::move(back), Shape{p.c_out, h, w});
}

inline Tensor conv2d(const Tensor& x, const ConvParams& p) {
    if (x.rank() != 3) throw std::invalid_argument("conv2d: x must be [c, h, w]");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<std::int64_t> idx(h * w * c);
    for (std::size_t pix = 0; pix < h * w; ++pix)
        for (std::size_t j = 0; j < c; ++j) idx[pix * c + j] = static_cast<std::int64_t>(j * h * w + pix);
    Tensor rows = gather(x, std::move(idx), Shape{h * w, c});
    Tensor out_rows = conv2d_rows(rows, h, w, p);
    std::vector<std::int64_t> back(p.c_out * h * w);
    for (std::size_t j = 0; j < p.c_out; ++j)
        for (std::size_t pix = 0; pix < h * w; ++pix)
            back[j * h * w + pix] = static_cast<std::int64_t>(pix * p.c_out + j);
    return gather(out_rows, std::move(back), Shape{p.c_out, h, w});
}

// ---------------------------------------------------------------------------
// Positive-match filtering

// Keeps only the rows of matched queries; the gather is differentiable, so
// mask losses propagate into the decoder embeddings.
inline Tensor filter_positive(const Tensor& embeddings, const std::vector<std::size_t>& rows) {
    if (embeddings.rank() != 2) throw std::invalid_argument("filter_positive: embeddings must be [N, C]");
    return take_rows(embeddings, rows);
}

// ---------------------------------------------------------------------------
// Attention maps

struct MaskAttnParams {
    Tensor wq, bq, wk, bk;

    static MaskAttnParams init(std::size_t channels, std::mt19937_64& rng) {
        MaskAttnParams p;
        const double xavier = std::sqrt(6.0 / (2.0 * channels));
        p.wq = Tensor::uniform({channels, channels}, rng, -xavier, xavier).set_requires_grad(true);
        p.bq = Tensor::zeros({channels}).set_requires_grad(true);
        p.wk = Tensor::uniform({channels, channels}, rng, -xavier, xavier).set_requires_grad(true);
        p.bk = Tensor::zeros({channels}).set_requires_grad(true);
        return p;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".wq", wq);
        fn(prefix + ".bq", bq);
        fn(prefix + ".wk", wk);
        fn(prefix + ".bk", bk);
    }
};

struct MaskHeadParams {
    std::size_t channels = 0;    // encoder hidden size C
    std::size_t head_width = 32; // working channel count of the upsampling path
    std::size_t heads = 4;       // attention map heads M
    std::vector<MaskAttnParams> attn;   // per level
    std::vector<Tensor> proj_w, proj_b; // per level 1x1 projection C -> head_width
    Tensor raw_w, raw_b;                // raw finest projection
    std::vector<MDCParams> stage;       // per level: head_width + heads -> head_width
    MDCParams fuse;                     // head_width -> head_width after the raw skip
    Tensor out_w, out_b;                // 1x1 head to mask logits

    static MaskHeadParams init(std::size_t channels, std::size_t levels, std::size_t heads,
                               std::size_t head_width, std::mt19937_64& rng) {
        if (channels % heads != 0)
            throw std::invalid_argument("MaskHeadParams: C not divisible by attention heads");
        MaskHeadParams p;
        p.channels = channels;
        p.head_width = head_width;
        p.heads = heads;
        const double xavier = std::sqrt(6.0 / static_cast<double>(channels + head_width));
        for (std::size_t l = 0; l < levels; ++l) {
            p.attn.push_back(MaskAttnParams::init(channels, rng));
            p.proj_w.push_back(Tensor::uniform({head_width, channels}, rng, -xavier, xavier).set_requires_grad(true));
            p.proj_b.push_back(Tensor::zeros({head_width}).set_requires_grad(true));
            p.stage.push_back(MDCParams::init(3, head_width + heads, head_width, rng));
        }
        p.raw_w = Tensor::uniform({head_width, channels}, rng, -xavier, xavier).set_requires_grad(true);
        p.raw_b = Tensor::zeros({head_width}).set_requires_grad(true);
        p.fuse = MDCParams::init(3, head_width, head_width, rng);
        const double xo = std::sqrt(6.0 / static_cast<double>(head_width + 1));
        p.out_w = Tensor::uniform({1, head_width}, rng, -xo, xo).set_requires_grad(true);
        p.out_b = Tensor::zeros({1}).set_requires_grad(true);
        return p;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        for (std::size_t l = 0; l < attn.size(); ++l) {
            attn[l].visit(prefix + ".attn" + std::to_string(l), fn);
            fn(prefix + ".proj_w" + std::to_string(l), proj_w[l]);
            fn(prefix + ".proj_b" + std::to_string(l), proj_b[l]);
            stage[l].visit(prefix + ".stage" + std::to_string(l), fn);
        }
        fn(prefix + ".raw_w", raw_w);
        fn(prefix + ".raw_b", raw_b);
        fuse.visit(prefix + ".fuse", fn);
        fn(prefix + ".out_w", out_w);
        fn(prefix + ".out_b", out_b);
    }
};

// Per level l: [N*, M, H_l, W_l], each (query, head) map a softmax over the
// pixels of the query's own frame.
struct AttentionMapStack {
    std::vector<Tensor> levels;
};

inline AttentionMapStack compute_attention_maps(const Tensor& embeddings,
                                                const std::vector<std::size_t>& frame_of,
                                                const Tensor& memory, const TokenLayout& layout,
                                                const MaskHeadParams& params) {
    const std::size_t nq = embeddings.defined() ? embeddings.dim(0) : 0;
    if (nq != frame_of.size()) throw std::invalid_argument("compute_attention_maps: frame count mismatch");
    AttentionMapStack maps;
    for (std::size_t l = 0; l < params.attn.size(); ++l) {
        const auto [lh, lw] = layout.level_dims[l];
        std::vector<Tensor> rows;
        rows.reserve(nq);
        for (std::size_t q = 0; q < nq; ++q) {
            Tensor e = slice_rows(embeddings, q, 1);
            Tensor keys = slice_rows(memory, layout.block_offset(frame_of[q], l), lh * lw);
            auto logits = attention_logits(e, keys, params.attn[l].wq, params.attn[l].bq,
                                           params.attn[l].wk, params.attn[l].bk, params.heads);
            std::vector<Tensor> head_rows;
            for (Tensor& lg : logits) head_rows.push_back(lg);  // each [1, hw]
            Tensor per_query = softmax(head_rows.size() == 1 ? head_rows[0] : concat(head_rows, 0), 1);
            rows.push_back(reshape(per_query, {1, params.heads * lh * lw}));
        }
        Tensor lvl = nq == 0 ? Tensor::zeros({0, params.heads * lh * lw})
                             : (rows.size() == 1 ? rows[0] : concat(rows, 0));
        maps.levels.push_back(reshape(lvl, {nq, params.heads, lh, lw}));
    }
    return maps;
}

// ---------------------------------------------------------------------------
// Mask head forward

// memory: encoded tokens [P, C]; raw_finest: [C, tau, H0, W0] where (H0, W0)
// equals the finest encoded level. Returns [N*, H0, W0] logits.
inline Tensor mask_head_forward(const Tensor& memory, const TokenLayout& layout,
                                const Tensor& raw_finest, const AttentionMapStack& maps,
                                const std::vector<std::size_t>& frame_of, const MaskHeadParams& params) {
    const std::size_t levels = layout.level_dims.size();
    const auto [h0, w0] = layout.level_dims[0];
    if (raw_finest.rank() != 4 || raw_finest.dim(0) != params.channels || raw_finest.dim(2) != h0 ||
        raw_finest.dim(3) != w0)
        throw std::invalid_argument("mask_head_forward: raw_finest must be [C, tau, H0, W0]");
    for (std::size_t l = 0; l + 1 < levels; ++l) {
        const auto [ha, wa] = layout.level_dims[l];
        const auto [hb, wb] = layout.level_dims[l + 1];
        if (ha != 2 * hb || wa != 2 * wb)
            throw std::invalid_argument("mask_head_forward: level " + std::to_string(l + 1) + " (" +
                                        std::to_string(hb) + "x" + std::to_string(wb) +
                                        ") is not half of level " + std::to_string(l));
    }
    const std::size_t nq = frame_of.size();
    if (nq == 0) return Tensor::zeros({0, h0, w0});

    // frame-level projections shared between queries of the same frame
    std::map<std::pair<std::size_t, std::size_t>, Tensor> proj_cache;
    auto projected_level = [&](std::size_t t, std::size_t l) {
        auto key = std::make_pair(t, l);
        auto it = proj_cache.find(key);
        if (it != proj_cache.end()) return it->second;
        const auto [lh, lw] = layout.level_dims[l];
        Tensor rows = slice_rows(memory, layout.block_offset(t, l), lh * lw);
        Tensor proj = linear(rows, params.proj_w[l], params.proj_b[l]);
        proj_cache.emplace(key, proj);
        return proj;
    };
    std::map<std::size_t, Tensor> raw_cache;
    auto projected_raw = [&](std::size_t t) {
        auto it = raw_cache.find(t);
        if (it != raw_cache.end()) return it->second;
        const std::size_t tau = raw_finest.dim(1);
        std::vector<std::int64_t> idx(h0 * w0 * params.channels);
        for (std::size_t pix = 0; pix < h0 * w0; ++pix)
            for (std::size_t j = 0; j < params.channels; ++j)
                idx[pix * params.channels + j] = static_cast<std::int64_t>((j * tau + t) * h0 * w0 + pix);
        Tensor rows = gather(raw_finest, std::move(idx), Shape{h0 * w0, params.channels});
        Tensor proj = linear(rows, params.raw_w, params.raw_b);
        raw_cache.emplace(t, proj);
        return proj;
    };

    auto query_maps = [&](std::size_t q, std::size_t l) {
        const auto [lh, lw] = layout.level_dims[l];
        std::vector<std::int64_t> idx(lh * lw * params.heads);
        for (std::size_t pix = 0; pix < lh * lw; ++pix)
            for (std::size_t m = 0; m < params.heads; ++m)
                idx[pix * params.heads + m] =
                    static_cast<std::int64_t>(((q * params.heads) + m) * lh * lw + pix);
        return gather(maps.levels[l], std::move(idx), Shape{lh * lw, params.heads});
    };

    std::vector<Tensor> out_rows;
    out_rows.reserve(nq);
    for (std::size_t q = 0; q < nq; ++q) {
        const std::size_t t = frame_of[q];
        // coarsest encoded level first
        std::size_t l = levels - 1;
        auto [lh, lw] = layout.level_dims[l];
        Tensor x = concat({projected_level(t, l), query_maps(q, l)}, 1);
        x = relu(modulated_deform_conv_rows(x, lh, lw, params.stage[l]));
        while (l-- > 0) {
            x = upsample2_rows(x, lh, lw);
            lh = layout.level_dims[l].first;
            lw = layout.level_dims[l].second;
            x = add(x, projected_level(t, l));
            x = concat({x, query_maps(q, l)}, 1);
            x = relu(modulated_deform_conv_rows(x, lh, lw, params.stage[l]));
        }
        x = add(x, projected_raw(t));
        x = relu(modulated_deform_conv_rows(x, h0, w0, params.fuse));
        Tensor logits = linear(x, params.out_w, params.out_b);  // [h0*w0, 1]
        out_rows.push_back(reshape(logits, {1, h0 * w0}));
    }
    Tensor joined = out_rows.size() == 1 ? out_rows[0] : concat(out_rows, 0);
    return reshape(joined, {nq, h0, w0});
}

}  // namespace deskvis
