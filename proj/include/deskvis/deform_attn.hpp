#pragma once

// Attention kernels: full multi-head attention, single-level deformable
// attention, and temporal multi-scale deformable attention over a clip.
//
// Conventions, fixed across the library:
//   - Reference points are normalized (x, y) in [0,1]^2.
//   - scale_reference maps a normalized point to fractional pixel coordinates
//     of a level as (x*W - 0.5, y*H - 0.5); sample offsets are added in the
//     pixel units of the target level.
//   - Clip token rows are ordered frame-major: (t, level, y, x), so each
//     frame and each (frame, level) block is contiguous.
//   - Offset projections emit (dx, dy) pairs; weight entries for the current
//     and temporal heads are concatenated per attention head and normalized
//     by one joint softmax.

#include "deskvis/serial.hpp"
#include "deskvis/tensor.hpp"

#include <cstdio>
#include <fstream>
#include <optional>
#include <utility>
#include <vector>

namespace deskvis {

struct ReferencePoint {
    double x = 0.5;
    double y = 0.5;
    std::size_t frame = 0;
};

struct PixelCoord {
    double x = 0.0;
    double y = 0.0;
};

// Normalized [0,1]^2 point to fractional pixel coordinates of an h x w level.
inline PixelCoord scale_reference(double x, double y, std::size_t h, std::size_t w) {
    return {x * static_cast<double>(w) - 0.5, y * static_cast<double>(h) - 0.5};
}

inline PixelCoord scale_reference(const ReferencePoint& p, std::size_t h, std::size_t w) {
    return scale_reference(p.x, p.y, h, w);
}

// ---------------------------------------------------------------------------
// FeatureClip: L multi-scale feature maps over tau frames.

struct FeatureClip {
    std::vector<Tensor> levels;  // level l: [C, tau, H_l, W_l]
    std::size_t channels = 0;
    std::size_t frames = 0;
    std::vector<std::pair<std::size_t, std::size_t>> level_dims;  // (H_l, W_l)

    std::size_t level_count() const { return levels.size(); }

    std::size_t tokens_per_frame() const {
        std::size_t n = 0;
        for (auto [h, w] : level_dims) n += h * w;
        return n;
    }
    std::size_t token_count() const { return frames * tokens_per_frame(); }

    void validate() const {
        if (levels.empty()) throw std::invalid_argument("FeatureClip: no levels");
        for (std::size_t l = 0; l < levels.size(); ++l) {
            const Tensor& m = levels[l];
            if (m.rank() != 4 || m.dim(0) != channels || m.dim(1) != frames ||
                m.dim(2) != level_dims[l].first || m.dim(3) != level_dims[l].second)
                throw std::invalid_argument("FeatureClip: level " + std::to_string(l) +
                                            " has shape " + shape_str(m.shape()));
            if (level_dims[l].first == 0 || level_dims[l].second == 0)
                throw std::invalid_argument("FeatureClip: empty level");
            if (l > 0 && (level_dims[l].first >= level_dims[l - 1].first ||
                          level_dims[l].second >= level_dims[l - 1].second))
                throw std::invalid_argument("FeatureClip: levels must strictly decrease in size");
        }
    }

    static FeatureClip zeros(std::size_t channels, std::size_t frames,
                             std::vector<std::pair<std::size_t, std::size_t>> dims) {
        FeatureClip clip;
        clip.channels = channels;
        clip.frames = frames;
        clip.level_dims = std::move(dims);
        for (auto [h, w] : clip.level_dims)
            clip.levels.push_back(Tensor::zeros({channels, frames, h, w}));
        return clip;
    }
};

// Token geometry of a clip flattened to [P, C] rows in (t, l, y, x) order.
struct TokenLayout {
    std::size_t frames = 0;
    std::vector<std::pair<std::size_t, std::size_t>> level_dims;
    std::vector<std::size_t> level_offset;  // within a frame page
    std::size_t page = 0;                   // tokens per frame

    explicit TokenLayout(std::size_t tau, std::vector<std::pair<std::size_t, std::size_t>> dims)
        : frames(tau), level_dims(std::move(dims)) {
        level_offset.resize(level_dims.size());
        for (std::size_t l = 0; l < level_dims.size(); ++l) {
            level_offset[l] = page;
            page += level_dims[l].first * level_dims[l].second;
        }
    }

    std::size_t block_offset(std::size_t t, std::size_t l) const {
        return t * page + level_offset[l];
    }
    std::size_t token_count() const { return frames * page; }
};

// [C, tau, H, W] levels -> [P, C] token rows.
inline Tensor clip_to_tokens(const FeatureClip& clip) {
    clip.validate();
    const TokenLayout layout(clip.frames, clip.level_dims);
    const std::size_t c = clip.channels;
    std::vector<Tensor> parts;
    parts.reserve(clip.frames * clip.levels.size());
    for (std::size_t t = 0; t < clip.frames; ++t) {
        for (std::size_t l = 0; l < clip.levels.size(); ++l) {
            const auto [h, w] = clip.level_dims[l];
            std::vector<std::int64_t> idx(h * w * c);
            for (std::size_t pix = 0; pix < h * w; ++pix)
                for (std::size_t j = 0; j < c; ++j)
                    idx[pix * c + j] = static_cast<std::int64_t>(((j * clip.frames + t) * h * w) + pix);
            parts.push_back(gather(clip.levels[l], std::move(idx), Shape{h * w, c}));
        }
    }
    return concat(parts, 0);
}

// [P, C] token rows -> [C, tau, H, W] levels matching `like`.
inline FeatureClip tokens_to_clip(const Tensor& tokens, const FeatureClip& like) {
    const TokenLayout layout(like.frames, like.level_dims);
    const std::size_t c = like.channels;
    FeatureClip out;
    out.channels = c;
    out.frames = like.frames;
    out.level_dims = like.level_dims;
    for (std::size_t l = 0; l < like.level_dims.size(); ++l) {
        const auto [h, w] = like.level_dims[l];
        std::vector<std::int64_t> idx(c * like.frames * h * w);
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t t = 0; t < like.frames; ++t)
                for (std::size_t pix = 0; pix < h * w; ++pix)
                    idx[(j * like.frames + t) * h * w + pix] =
                        static_cast<std::int64_t>((layout.block_offset(t, l) + pix) * c + j);
        out.levels.push_back(gather(tokens, std::move(idx), Shape{c, like.frames, h, w}));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sampling schedule: K(t) and the temporal frame order.

struct SamplingSchedule {
    std::size_t frames = 1;  // tau
    std::size_t k_curr = 4;
    std::size_t k_temp = 4;

    std::size_t keys_for(std::size_t query_frame, std::size_t target_frame) const {
        return target_frame == query_frame ? k_curr : k_temp;
    }

    // Ascending list of the tau-1 frames other than t.
    std::vector<std::size_t> temporal_order(std::size_t t) const {
        std::vector<std::size_t> order;
        order.reserve(frames - 1);
        for (std::size_t f = 0; f < frames; ++f)
            if (f != t) order.push_back(f);
        return order;
    }

    // Temporal slot of target_frame for a query on query_frame.
    std::size_t temporal_slot(std::size_t query_frame, std::size_t target_frame) const {
        return target_frame < query_frame ? target_frame : target_frame - 1;
    }

    std::size_t samples_per_level() const { return k_curr + (frames - 1) * k_temp; }
};

// ---------------------------------------------------------------------------
// Parameters of one deformable attention block.

struct DeformAttnParams {
    std::size_t channels = 0;  // C
    std::size_t heads = 1;     // M
    std::size_t levels = 1;    // L
    std::size_t frames = 1;    // tau

    Tensor value_w, value_b;  // [C, C], [C]; head m owns output rows [m*Cv, (m+1)*Cv)
    Tensor out_w, out_b;      // [C, C], [C]

    // current-frame heads: offsets -> M*L*K_curr*2, weights -> M*L*K_curr
    Tensor off_curr_w, off_curr_b;
    Tensor wt_curr_w, wt_curr_b;
    // temporal heads: offsets -> M*L*K_temp*(tau-1)*2, weights -> M*L*K_temp*(tau-1)
    Tensor off_temp_w, off_temp_b;
    Tensor wt_temp_w, wt_temp_b;

    std::size_t head_dim() const { return channels / heads; }

    static DeformAttnParams init(std::size_t channels, std::size_t heads, std::size_t levels,
                                 std::size_t frames, const SamplingSchedule& schedule,
                                 std::mt19937_64& rng) {
        if (channels % heads != 0)
            throw std::invalid_argument("DeformAttnParams: C=" + std::to_string(channels) +
                                        " not divisible by M=" + std::to_string(heads));
        DeformAttnParams p;
        p.channels = channels;
        p.heads = heads;
        p.levels = levels;
        p.frames = frames;

        const double xavier = std::sqrt(6.0 / (2.0 * channels));
        p.value_w = Tensor::uniform({channels, channels}, rng, -xavier, xavier).set_requires_grad(true);
        p.value_b = Tensor::zeros({channels}).set_requires_grad(true);
        p.out_w = Tensor::uniform({channels, channels}, rng, -xavier, xavier).set_requires_grad(true);
        p.out_b = Tensor::zeros({channels}).set_requires_grad(true);

        const std::size_t kc = schedule.k_curr, kt = schedule.k_temp, tm = frames - 1;
        p.off_curr_w = Tensor::zeros({heads * levels * kc * 2, channels}).set_requires_grad(true);
        p.wt_curr_w = Tensor::zeros({heads * levels * kc, channels}).set_requires_grad(true);
        p.wt_curr_b = Tensor::zeros({heads * levels * kc}).set_requires_grad(true);
        p.off_temp_w = Tensor::zeros({heads * levels * kt * 2 * tm, channels}).set_requires_grad(true);
        p.wt_temp_w = Tensor::zeros({heads * levels * kt * tm, channels}).set_requires_grad(true);
        p.wt_temp_b = Tensor::zeros({heads * levels * kt * tm}).set_requires_grad(true);

        // Offset biases start as a radial pattern: head direction on the unit
        // circle, scaled by the sample index. Weight heads start at zero so
        // the initial attention is uniform.
        p.off_curr_b = Tensor::zeros({heads * levels * kc * 2}).set_requires_grad(true);
        p.off_temp_b = Tensor::zeros({heads * levels * kt * 2 * tm}).set_requires_grad(true);
        for (std::size_t m = 0; m < heads; ++m) {
            const double theta = 2.0 * M_PI * static_cast<double>(m) / static_cast<double>(heads);
            const double dx = std::cos(theta), dy = std::sin(theta);
            for (std::size_t l = 0; l < levels; ++l) {
                for (std::size_t k = 0; k < kc; ++k) {
                    const std::size_t base = (((m * levels) + l) * kc + k) * 2;
                    p.off_curr_b[base + 0] = dx * static_cast<double>(k + 1);
                    p.off_curr_b[base + 1] = dy * static_cast<double>(k + 1);
                }
                for (std::size_t k = 0; k < kt; ++k) {
                    for (std::size_t j = 0; j < tm; ++j) {
                        const std::size_t base = ((((m * levels) + l) * kt + k) * tm + j) * 2;
                        p.off_temp_b[base + 0] = dx * static_cast<double>(k + 1);
                        p.off_temp_b[base + 1] = dy * static_cast<double>(k + 1);
                    }
                }
            }
        }
        return p;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".value_w", value_w);
        fn(prefix + ".value_b", value_b);
        fn(prefix + ".out_w", out_w);
        fn(prefix + ".out_b", out_b);
        fn(prefix + ".off_curr_w", off_curr_w);
        fn(prefix + ".off_curr_b", off_curr_b);
        fn(prefix + ".wt_curr_w", wt_curr_w);
        fn(prefix + ".wt_curr_b", wt_curr_b);
        if (off_temp_w.size()) {
            fn(prefix + ".off_temp_w", off_temp_w);
            fn(prefix + ".off_temp_b", off_temp_b);
            fn(prefix + ".wt_temp_w", wt_temp_w);
            fn(prefix + ".wt_temp_b", wt_temp_b);
        }
    }

    void check_schedule(const SamplingSchedule& s) const {
        const std::size_t tm = frames - 1;
        if (s.frames != frames || off_curr_w.dim(0) != heads * levels * s.k_curr * 2 ||
            wt_curr_w.dim(0) != heads * levels * s.k_curr ||
            off_temp_w.dim(0) != heads * levels * s.k_temp * 2 * tm ||
            wt_temp_w.dim(0) != heads * levels * s.k_temp * tm)
            throw std::invalid_argument("DeformAttnParams: schedule does not match parameter dimensions");
    }
};

// Offsets and jointly normalized weights for a batch of queries.
struct ProjectedSampling {
    // raw offsets, Table layout (m, l, k[, slot], {dx, dy})
    Tensor off_curr;  // [N, M*L*K_curr*2]
    Tensor off_temp;  // [N, M*L*K_temp*(tau-1)*2]
    // softmax over each row: [N*M, S], S = L*(K_curr + K_temp*(tau-1));
    // row n*M + m holds the current entries (l-major) then the temporal
    // entries ((l, k, slot) nested)
    Tensor weights;
    std::size_t k_curr = 0, k_temp = 0, levels = 0, heads = 0, frames = 1;

    std::size_t curr_span() const { return levels * k_curr; }
    std::size_t span() const { return levels * (k_curr + k_temp * (frames - 1)); }

    // column of weight (l, k) on the query's own frame
    std::size_t curr_col(std::size_t l, std::size_t k) const { return l * k_curr + k; }
    // column of weight (l, k, temporal slot j)
    std::size_t temp_col(std::size_t l, std::size_t k, std::size_t j) const {
        return curr_span() + (l * k_temp + k) * (frames - 1) + j;
    }
};

// Linear projections of sample offsets and attention weights for queries
// z [N, C], with the current-frame and temporal weights normalized by a
// joint per-head softmax.
inline ProjectedSampling project_offsets_weights(const Tensor& z, const DeformAttnParams& params,
                                                 const SamplingSchedule& schedule) {
    params.check_schedule(schedule);
    if (z.rank() != 2 || z.dim(1) != params.channels) dim_error("project_offsets_weights", z.shape(), {params.channels});
    const std::size_t n = z.dim(0), m = params.heads, l = params.levels;
    const std::size_t kc = schedule.k_curr, kt = schedule.k_temp, tm = params.frames - 1;

    ProjectedSampling out;
    out.k_curr = kc;
    out.k_temp = kt;
    out.levels = l;
    out.heads = m;
    out.frames = params.frames;

    out.off_curr = linear(z, params.off_curr_w, params.off_curr_b);
    Tensor wc = linear(z, params.wt_curr_w, params.wt_curr_b);  // [N, M*L*Kc]
    Tensor wt;
    if (kt > 0 && tm > 0) {
        out.off_temp = linear(z, params.off_temp_w, params.off_temp_b);
        wt = linear(z, params.wt_temp_w, params.wt_temp_b);  // [N, M*L*Kt*tm]
    } else {
        out.off_temp = Tensor::zeros({n, 0});
        wt = Tensor::zeros({n, 0});
    }

    // the head dimension is already outermost in both weight tensors, so the
    // per-head rows come from plain reshapes; one concat joins curr | temp
    const std::size_t s_curr = l * kc, s = s_curr + l * kt * tm;
    Tensor logits;
    if (kt > 0 && tm > 0) {
        Tensor rc = reshape(wc, {n * m, s_curr});
        Tensor rt = reshape(wt, {n * m, l * kt * tm});
        logits = concat({rc, rt}, 1);
    } else {
        logits = reshape(wc, {n * m, s_curr});
    }
    out.weights = softmax(logits, 1);
    return out;
}

// ---------------------------------------------------------------------------
// Batched temporal multi-scale deformable attention.

// Queries must be grouped contiguously by frame. refs: [N, tau, 2] normalized
// (x, y) sampling centers per target frame; broadcast the query's own
// reference over all frames when no per-frame alignment is available.
struct QueryGroup {
    std::size_t frame = 0;
    std::size_t begin = 0;  // first query row
    std::size_t count = 0;
};

namespace detail {

// Precomputed index arrays for one attention geometry. Rebuilt only when the
// query grouping, schedule, or level dims change.
struct SamplePlan {
    struct Block {
        std::size_t total = 0;  // sample rows in this (head, frame, level) block
        std::shared_ptr<const std::vector<std::int64_t>> ref_idx;   // [total*2] into refs
        std::shared_ptr<const std::vector<std::int64_t>> off_idx;   // [total*2] into joined offsets
        std::shared_ptr<const std::vector<std::int64_t>> wt_idx;    // [total] into weights
        std::shared_ptr<const std::vector<std::size_t>> seg_sizes;  // per query
    };
    std::vector<Block> blocks;  // (h * tau + t) * levels + l
    std::vector<std::shared_ptr<const std::vector<std::int64_t>>> value_idx;  // same layout
};

inline std::shared_ptr<const SamplePlan> sample_plan(const std::vector<QueryGroup>& groups,
                                                     const TokenLayout& layout,
                                                     const SamplingSchedule& schedule, std::size_t heads,
                                                     std::size_t channels, std::size_t levels,
                                                     std::size_t off_curr_cols, std::size_t off_temp_cols,
                                                     std::size_t weight_span) {
    std::ostringstream key;
    key << heads << ":" << channels << ":" << levels << ":" << schedule.frames << ":" << schedule.k_curr
        << ":" << schedule.k_temp << ":" << off_curr_cols << ":" << off_temp_cols << ":" << weight_span;
    for (const auto& [lh, lw] : layout.level_dims) key << ":" << lh << "x" << lw;
    for (const QueryGroup& g : groups) key << ":" << g.frame << "," << g.begin << "," << g.count;
    static thread_local std::map<std::string, std::shared_ptr<const SamplePlan>> cache;
    auto it = cache.find(key.str());
    if (it != cache.end()) return it->second;

    const std::size_t tau = schedule.frames, cv = channels / heads, tm = tau - 1;
    std::size_t n = 0;
    for (const QueryGroup& g : groups) n = std::max(n, g.begin + g.count);

    auto plan = std::make_shared<SamplePlan>();
    plan->blocks.resize(heads * tau * levels);
    plan->value_idx.resize(heads * tau * levels);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < tau; ++t) {
            for (std::size_t l = 0; l < levels; ++l) {
                const auto [lh, lw] = layout.level_dims[l];
                const std::size_t grid_off = layout.block_offset(t, l);
                auto vidx = std::make_shared<std::vector<std::int64_t>>(lh * lw * cv);
                for (std::size_t pix = 0; pix < lh * lw; ++pix)
                    for (std::size_t j = 0; j < cv; ++j)
                        (*vidx)[pix * cv + j] =
                            static_cast<std::int64_t>((grid_off + pix) * channels + h * cv + j);
                plan->value_idx[(h * tau + t) * levels + l] = std::move(vidx);

                SamplePlan::Block blk;
                auto ref_idx = std::make_shared<std::vector<std::int64_t>>();
                auto off_idx = std::make_shared<std::vector<std::int64_t>>();
                auto wt_idx = std::make_shared<std::vector<std::int64_t>>();
                auto segs = std::make_shared<std::vector<std::size_t>>(n, 0);
                for (const QueryGroup& grp : groups) {
                    const std::size_t keys = schedule.keys_for(grp.frame, t);
                    const bool current = t == grp.frame;
                    const std::size_t slot = current ? 0 : schedule.temporal_slot(grp.frame, t);
                    for (std::size_t q = grp.begin; q < grp.begin + grp.count; ++q) {
                        (*segs)[q] = keys;
                        for (std::size_t k = 0; k < keys; ++k) {
                            ref_idx->push_back(static_cast<std::int64_t>((q * tau + t) * 2 + 1));  // y
                            ref_idx->push_back(static_cast<std::int64_t>((q * tau + t) * 2 + 0));  // x
                            std::size_t elem, col;
                            if (current) {
                                elem = ((h * levels + l) * schedule.k_curr + k) * 2;
                                col = l * schedule.k_curr + k;
                            } else {
                                elem = off_curr_cols + (((h * levels + l) * schedule.k_temp + k) * tm + slot) * 2;
                                col = levels * schedule.k_curr + (l * schedule.k_temp + k) * tm + slot;
                            }
                            const std::size_t row = q * (off_curr_cols + off_temp_cols);
                            off_idx->push_back(static_cast<std::int64_t>(row + elem + 1));  // dy
                            off_idx->push_back(static_cast<std::int64_t>(row + elem + 0));  // dx
                            wt_idx->push_back(static_cast<std::int64_t>((q * heads + h) * weight_span + col));
                        }
                    }
                }
                blk.total = wt_idx->size();
                blk.ref_idx = std::move(ref_idx);
                blk.off_idx = std::move(off_idx);
                blk.wt_idx = std::move(wt_idx);
                blk.seg_sizes = std::move(segs);
                plan->blocks[(h * tau + t) * levels + l] = std::move(blk);
            }
        }
    }
    std::shared_ptr<const SamplePlan> out = plan;
    cache.emplace(key.str(), out);
    return out;
}

}  // namespace detail

inline Tensor temporal_deform_attention(const Tensor& queries, const std::vector<QueryGroup>& groups,
                                        const Tensor& refs, const Tensor& value_tokens,
                                        const TokenLayout& layout, const DeformAttnParams& params,
                                        const SamplingSchedule& schedule) {
    params.check_schedule(schedule);
    if (layout.frames != params.frames)
        throw std::invalid_argument("temporal_deform_attention: clip has " + std::to_string(layout.frames) +
                                    " frames, params expect " + std::to_string(params.frames));
    if (refs.rank() != 3 || refs.dim(0) != queries.dim(0) || refs.dim(1) != layout.frames || refs.dim(2) != 2)
        throw std::invalid_argument("temporal_deform_attention: refs must be [N, tau, 2]");
    const std::size_t m = params.heads, levels = params.levels;
    const std::size_t tau = layout.frames;

    Tensor values = linear(value_tokens, params.value_w, params.value_b);  // [P, C]
    ProjectedSampling proj = project_offsets_weights(queries, params, schedule);
    const bool has_temp = proj.off_temp.dim(1) > 0;
    Tensor joined_off = has_temp ? concat({proj.off_curr, proj.off_temp}, 1) : proj.off_curr;

    auto plan = detail::sample_plan(groups, layout, schedule, m, params.channels, levels,
                                    proj.off_curr.dim(1), has_temp ? proj.off_temp.dim(1) : 0,
                                    proj.span());

    const std::size_t cv = params.head_dim();
    std::vector<Tensor> head_cols;
    head_cols.reserve(m);
    for (std::size_t h = 0; h < m; ++h) {
        Tensor acc;
        bool sampled_any = false;
        for (std::size_t t = 0; t < tau; ++t) {
            for (std::size_t l = 0; l < levels; ++l) {
                const detail::SamplePlan::Block& blk = plan->blocks[(h * tau + t) * levels + l];
                if (blk.total == 0) continue;
                sampled_any = true;
                const auto [lh, lw] = layout.level_dims[l];

                Tensor grid = gather(values, plan->value_idx[(h * tau + t) * levels + l],
                                     Shape{lh * lw, cv});
                Tensor base = gather(refs, blk.ref_idx, Shape{blk.total, 2});
                Tensor dims = Tensor::from({2}, {static_cast<double>(lh), static_cast<double>(lw)});
                Tensor points = add(add_scalar(mul_rowvec(base, dims), -0.5),
                                    gather(joined_off, blk.off_idx, Shape{blk.total, 2}));
                Tensor sampled = bilinear_sample_rows(grid, lh, lw, points);
                Tensor w = gather(proj.weights, blk.wt_idx, Shape{blk.total});
                Tensor contrib = segment_sum_rows(scale_rows(sampled, w), blk.seg_sizes);
                acc = acc.defined() ? add(acc, contrib) : contrib;
            }
        }
        if (!sampled_any) throw std::invalid_argument("temporal_deform_attention: no keys sampled");
        head_cols.push_back(std::move(acc));
    }
    Tensor heads_joined = head_cols.size() == 1 ? head_cols[0] : concat(head_cols, 1);  // [N, C]
    return linear(heads_joined, params.out_w, params.out_b);
}

// Single-query temporal multi-scale deformable attention over a clip.
// per_frame_refs, when present, centers frame t's samples on that frame's own
// reference; otherwise every frame samples around p_hat.
inline Tensor tmsda(const Tensor& z_q, const ReferencePoint& p_hat, const FeatureClip& clip,
                    const std::optional<std::vector<ReferencePoint>>& per_frame_refs,
                    const DeformAttnParams& params, const SamplingSchedule& schedule) {
    clip.validate();
    if (schedule.frames != clip.frames)
        throw std::invalid_argument("tmsda: schedule covers " + std::to_string(schedule.frames) +
                                    " frames but clip has " + std::to_string(clip.frames));
    if (per_frame_refs && per_frame_refs->size() != clip.frames)
        throw std::invalid_argument("tmsda: per-frame reference count mismatch");

    Tensor tokens = clip_to_tokens(clip);
    const TokenLayout layout(clip.frames, clip.level_dims);
    Tensor q = reshape(z_q, {1, params.channels});

    Tensor refs{Shape{1, clip.frames, 2}};
    for (std::size_t t = 0; t < clip.frames; ++t) {
        const ReferencePoint& r = per_frame_refs ? (*per_frame_refs)[t] : p_hat;
        refs[t * 2 + 0] = r.x;
        refs[t * 2 + 1] = r.y;
    }

    std::vector<QueryGroup> groups{{p_hat.frame, 0, 1}};
    Tensor out = temporal_deform_attention(q, groups, refs, tokens, layout, params, schedule);
    return reshape(out, {params.channels});
}

// Single-head, single-frame, single-level deformable attention. The feature
// map is [C, H, W]; K keys are sampled around p_q.
inline Tensor deformable_attention(const Tensor& z_q, const ReferencePoint& p_q, const Tensor& map,
                                   const DeformAttnParams& params, std::size_t k) {
    if (k == 0) throw std::invalid_argument("deformable_attention: K must be at least 1");
    if (map.rank() != 3) throw std::invalid_argument("deformable_attention: map must be [C, H, W]");
    if (params.levels != 1 || params.frames != 1)
        throw std::invalid_argument("deformable_attention: params must be single-frame single-level");

    FeatureClip clip;
    clip.channels = map.dim(0);
    clip.frames = 1;
    clip.level_dims = {{map.dim(1), map.dim(2)}};
    clip.levels = {reshape(map, {map.dim(0), 1, map.dim(1), map.dim(2)})};

    SamplingSchedule sched{1, k, 0};
    return tmsda(z_q, ReferencePoint{p_q.x, p_q.y, 0}, clip, std::nullopt, params, sched);
}

// ---------------------------------------------------------------------------
// Full multi-head attention (Eq.-style dense attention over explicit keys).

struct MhaParams {
    std::size_t channels = 0, heads = 1;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

    static MhaParams init(std::size_t channels, std::size_t heads, std::mt19937_64& rng) {
        if (channels % heads != 0)
            throw std::invalid_argument("MhaParams: C=" + std::to_string(channels) +
                                        " not divisible by M=" + std::to_string(heads));
        MhaParams p;
        p.channels = channels;
        p.heads = heads;
        const double xavier = std::sqrt(6.0 / (2.0 * channels));
        for (Tensor* w : {&p.wq, &p.wk, &p.wv, &p.wo})
            *w = Tensor::uniform({channels, channels}, rng, -xavier, xavier).set_requires_grad(true);
        for (Tensor* b : {&p.bq, &p.bk, &p.bv, &p.bo})
            *b = Tensor::zeros({channels}).set_requires_grad(true);
        return p;
    }

    std::size_t head_dim() const { return channels / heads; }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".wq", wq);
        fn(prefix + ".bq", bq);
        fn(prefix + ".wk", wk);
        fn(prefix + ".bk", bk);
        fn(prefix + ".wv", wv);
        fn(prefix + ".bv", bv);
        fn(prefix + ".wo", wo);
        fn(prefix + ".bo", bo);
    }
};

struct MhaResult {
    Tensor output;  // [N, C]
    Tensor attn;    // [M, N, K]
};

// Scaled dot-product logits between projected queries/keys: [M, N, K].
inline std::vector<Tensor> attention_logits(const Tensor& queries, const Tensor& keys,
                                            const Tensor& wq, const Tensor& bq, const Tensor& wk,
                                            const Tensor& bk, std::size_t heads) {
    const std::size_t c = wq.dim(1), cv = c / heads;
    Tensor q = linear(queries, wq, bq);
    Tensor k = linear(keys, wk, bk);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cv));
    std::vector<Tensor> logits;
    logits.reserve(heads);
    for (std::size_t m = 0; m < heads; ++m) {
        std::vector<std::int64_t> qidx(q.dim(0) * cv), kidx(k.dim(0) * cv);
        for (std::size_t i = 0; i < q.dim(0); ++i)
            for (std::size_t j = 0; j < cv; ++j) qidx[i * cv + j] = static_cast<std::int64_t>(i * c + m * cv + j);
        for (std::size_t i = 0; i < k.dim(0); ++i)
            for (std::size_t j = 0; j < cv; ++j) kidx[i * cv + j] = static_cast<std::int64_t>(i * c + m * cv + j);
        Tensor qm = gather(q, std::move(qidx), Shape{q.dim(0), cv});
        Tensor km = gather(k, std::move(kidx), Shape{k.dim(0), cv});
        logits.push_back(mul_scalar(matmul(qm, transpose(km)), scale));
    }
    return logits;
}

// Attention between queries and keys with values projected from a separate
// tensor (pass keys == values for the common case).
inline MhaResult multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                      const MhaParams& params) {
    if (queries.rank() != 2 || keys.rank() != 2 || queries.dim(1) != params.channels ||
        keys.dim(1) != params.channels)
        dim_error("multi_head_attention", queries.shape(), keys.shape());
    if (keys.dim(0) == 0) throw std::invalid_argument("multi_head_attention: no keys");
    if (values.dim(0) != keys.dim(0)) dim_error("multi_head_attention values", values.shape(), keys.shape());
    const std::size_t n = queries.dim(0), kn = keys.dim(0);
    const std::size_t m = params.heads, cv = params.head_dim(), c = params.channels;

    std::vector<Tensor> logits =
        attention_logits(queries, keys, params.wq, params.bq, params.wk, params.bk, m);
    Tensor v = linear(values, params.wv, params.bv);

    std::vector<Tensor> head_outs, attn_rows;
    head_outs.reserve(m);
    attn_rows.reserve(m);
    for (std::size_t h = 0; h < m; ++h) {
        Tensor a = softmax(logits[h], 1);  // [N, K]
        std::vector<std::int64_t> vidx(kn * cv);
        for (std::size_t i = 0; i < kn; ++i)
            for (std::size_t j = 0; j < cv; ++j) vidx[i * cv + j] = static_cast<std::int64_t>(i * c + h * cv + j);
        Tensor vm = gather(v, std::move(vidx), Shape{kn, cv});
        head_outs.push_back(matmul(a, vm));
        attn_rows.push_back(reshape(a, {1, n * kn}));
    }
    MhaResult res;
    res.output = linear(head_outs.size() == 1 ? head_outs[0] : concat(head_outs, 1), params.wo, params.bo);
    res.attn = reshape(attn_rows.size() == 1 ? attn_rows[0] : concat(attn_rows, 0), {m, n, kn});
    return res;
}

inline MhaResult multi_head_attention(const Tensor& queries, const Tensor& keys_values,
                                      const MhaParams& params) {
    return multi_head_attention(queries, keys_values, keys_values, params);
}

// ---------------------------------------------------------------------------
// Attention map dump (sampling locations and weights per query).

struct AttentionRecord {
    std::size_t query = 0, frame = 0, level = 0;
    Tensor locations;  // [K, 2] pixel (y, x)
    Tensor weights;    // [K]
};

// Writes the locations/weights of each record as consecutive TSR1 blobs into
// <base>.bin and a text index into <base>.idx.
inline void write_attention_dump(const std::string& base, const std::vector<AttentionRecord>& records) {
    std::ofstream bin(base + ".bin", std::ios::binary);
    std::ofstream idx(base + ".idx");
    if (!bin || !idx) throw std::runtime_error("write_attention_dump: cannot open " + base);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const AttentionRecord& r = records[i];
        idx << "record=" << i << " query=" << r.query << " frame=" << r.frame << " level=" << r.level
            << " keys=" << r.weights.size() << " offset=" << bin.tellp() << "\n";
        write_tensor(bin, r.locations);
        write_tensor(bin, r.weights);
    }
}

// Sampling records of one query from projected offsets/weights.
inline std::vector<AttentionRecord> attention_records(const ProjectedSampling& proj, std::size_t query_row,
                                                      std::size_t query_frame, const ReferencePoint& ref,
                                                      const TokenLayout& layout,
                                                      const SamplingSchedule& schedule) {
    std::vector<AttentionRecord> records;
    const std::size_t m = proj.heads, tau = layout.frames;
    for (std::size_t h = 0; h < m; ++h) {
        for (std::size_t t = 0; t < tau; ++t) {
            const std::size_t keys = schedule.keys_for(query_frame, t);
            if (keys == 0) continue;
            const bool current = t == query_frame;
            const std::size_t slot = current ? 0 : schedule.temporal_slot(query_frame, t);
            for (std::size_t l = 0; l < layout.level_dims.size(); ++l) {
                const auto [lh, lw] = layout.level_dims[l];
                const PixelCoord base = scale_reference(ref, lh, lw);
                AttentionRecord rec;
                rec.query = query_row;
                rec.frame = t;
                rec.level = l;
                rec.locations = Tensor{Shape{keys, 2}};
                rec.weights = Tensor{Shape{keys}};
                const Tensor& off_src = current ? proj.off_curr : proj.off_temp;
                const std::size_t kdim = current ? proj.k_curr : proj.k_temp;
                for (std::size_t k = 0; k < keys; ++k) {
                    std::size_t elem = current ? ((h * proj.levels + l) * kdim + k) * 2
                                               : (((h * proj.levels + l) * kdim + k) * (tau - 1) + slot) * 2;
                    const double dx = off_src[query_row * off_src.dim(1) + elem];
                    const double dy = off_src[query_row * off_src.dim(1) + elem + 1];
                    rec.locations[k * 2 + 0] = base.y + dy;
                    rec.locations[k * 2 + 1] = base.x + dx;
                    const std::size_t col = current ? proj.curr_col(l, k) : proj.temp_col(l, k, slot);
                    rec.weights[k] = proj.weights[(query_row * m + h) * proj.span() + col];
                }
                records.push_back(std::move(rec));
            }
        }
    }
    return records;
}

}  // namespace deskvis
