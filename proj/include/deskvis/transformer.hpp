#pragma once

// Clip-level Transformer: encoder layers with temporal multi-scale deformable
// self-attention over all pixels/scales/frames, and decoder layers with full
// query self-attention, temporal deformable cross-attention, per-layer box
// refinement and instance-aware reference alignment.
//
// Layers are pre-norm; the feed-forward hidden size is 4C. Decoder queries
// are frame-major: query i lives on frame i / queries_per_frame and owns
// identity slot i % queries_per_frame.

#include "deskvis/deform_attn.hpp"

#include <array>

namespace deskvis {

// ---------------------------------------------------------------------------
// Object query bookkeeping

struct ObjectQuery {
    std::size_t index = 0;
    std::size_t frame = 0;
    std::size_t identity_slot = 0;
    ReferencePoint reference;
};

inline std::vector<ObjectQuery> make_query_set(std::size_t total, std::size_t frames) {
    if (frames == 0 || total % frames != 0)
        throw std::invalid_argument("make_query_set: " + std::to_string(total) +
                                    " queries cannot be split over " + std::to_string(frames) + " frames");
    const std::size_t per_frame = total / frames;
    std::vector<ObjectQuery> qs(total);
    for (std::size_t i = 0; i < total; ++i) {
        qs[i].index = i;
        qs[i].frame = i / per_frame;
        qs[i].identity_slot = i % per_frame;
        qs[i].reference.frame = qs[i].frame;
    }
    return qs;
}

// ---------------------------------------------------------------------------
// Positional encoding: fixed spatial sines plus learned temporal and scale
// embeddings, all additive.

struct PositionalEncoding {
    std::vector<Tensor> spatial;  // per level: [H*W, C] constant
    Tensor temporal;              // [tau, C] learned, zero-init
    Tensor scale;                 // [L, C] learned, zero-init

    static PositionalEncoding init(std::size_t channels, std::size_t frames,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& dims) {
        if (channels % 4 != 0) throw std::invalid_argument("PositionalEncoding: C must be divisible by 4");
        PositionalEncoding enc;
        for (auto [h, w] : dims) enc.spatial.push_back(sine_table(channels, h, w));
        enc.temporal = Tensor::zeros({frames, channels}).set_requires_grad(true);
        enc.scale = Tensor::zeros({dims.size(), channels}).set_requires_grad(true);
        return enc;
    }

    // 2-D sine table: first C/2 channels encode y, the rest x.
    static Tensor sine_table(std::size_t channels, std::size_t h, std::size_t w) {
        const std::size_t half = channels / 2;
        Tensor table{Shape{h * w, channels}};
        const double two_pi = 2.0 * M_PI;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double yn = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * two_pi;
                const double xn = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * two_pi;
                double* row = table.data() + (y * w + x) * channels;
                for (std::size_t i = 0; i < half; ++i) {
                    const double t = std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(half));
                    const double vy = yn / t, vx = xn / t;
                    row[i] = (i % 2 == 0) ? std::sin(vy) : std::cos(vy);
                    row[half + i] = (i % 2 == 0) ? std::sin(vx) : std::cos(vx);
                }
            }
        }
        return table;
    }

    // [P, C] additive encoding for every token of the layout.
    Tensor tokens(const TokenLayout& layout) const {
        const std::size_t c = temporal.dim(1);
        std::vector<Tensor> frame_parts;
        for (std::size_t t = 0; t < layout.frames; ++t) {
            std::vector<Tensor> level_parts;
            for (std::size_t l = 0; l < layout.level_dims.size(); ++l) level_parts.push_back(spatial[l]);
            frame_parts.push_back(level_parts.size() == 1 ? level_parts[0] : concat(level_parts, 0));
        }
        Tensor spat = frame_parts.size() == 1 ? frame_parts[0] : concat(frame_parts, 0);

        // broadcast learned tables to token rows
        std::vector<std::int64_t> tidx(layout.token_count() * c), lidx(layout.token_count() * c);
        for (std::size_t t = 0; t < layout.frames; ++t)
            for (std::size_t l = 0; l < layout.level_dims.size(); ++l) {
                const auto [lh, lw] = layout.level_dims[l];
                const std::size_t off = layout.block_offset(t, l);
                for (std::size_t pix = 0; pix < lh * lw; ++pix)
                    for (std::size_t j = 0; j < c; ++j) {
                        tidx[(off + pix) * c + j] = static_cast<std::int64_t>(t * c + j);
                        lidx[(off + pix) * c + j] = static_cast<std::int64_t>(l * c + j);
                    }
            }
        const Shape out{layout.token_count(), c};
        return add(spat, add(gather(temporal, std::move(tidx), out), gather(scale, std::move(lidx), out)));
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".temporal", temporal);
        fn(prefix + ".scale", scale);
    }
};

// ---------------------------------------------------------------------------
// Feed-forward block and shared layer pieces

struct FfnParams {
    Tensor w1, b1, w2, b2;

    static FfnParams init(std::size_t channels, std::mt19937_64& rng) {
        FfnParams f;
        const std::size_t hidden = 4 * channels;
        const double x1 = std::sqrt(6.0 / static_cast<double>(channels + hidden));
        f.w1 = Tensor::uniform({hidden, channels}, rng, -x1, x1).set_requires_grad(true);
        f.b1 = Tensor::zeros({hidden}).set_requires_grad(true);
        f.w2 = Tensor::uniform({channels, hidden}, rng, -x1, x1).set_requires_grad(true);
        f.b2 = Tensor::zeros({channels}).set_requires_grad(true);
        return f;
    }

    Tensor operator()(const Tensor& x) const { return linear(relu(linear(x, w1, b1)), w2, b2); }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w1", w1);
        fn(prefix + ".b1", b1);
        fn(prefix + ".w2", w2);
        fn(prefix + ".b2", b2);
    }
};

struct LayerNormParams {
    Tensor gamma, beta;

    static LayerNormParams init(std::size_t channels) {
        LayerNormParams n;
        n.gamma = Tensor::full({channels}, 1.0).set_requires_grad(true);
        n.beta = Tensor::zeros({channels}).set_requires_grad(true);
        return n;
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".gamma", gamma);
        fn(prefix + ".beta", beta);
    }
};

// ---------------------------------------------------------------------------
// Encoder

struct EncoderLayerParams {
    DeformAttnParams attn;
    LayerNormParams norm_attn, norm_ffn;
    FfnParams ffn;

    static EncoderLayerParams init(std::size_t channels, std::size_t heads, std::size_t levels,
                                   std::size_t frames, const SamplingSchedule& schedule,
                                   std::mt19937_64& rng) {
        EncoderLayerParams p;
        p.attn = DeformAttnParams::init(channels, heads, levels, frames, schedule, rng);
        p.norm_attn = LayerNormParams::init(channels);
        p.norm_ffn = LayerNormParams::init(channels);
        p.ffn = FfnParams::init(channels, rng);
        return p;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        attn.visit(prefix + ".attn", fn);
        norm_attn.visit(prefix + ".norm_attn", fn);
        norm_ffn.visit(prefix + ".norm_ffn", fn);
        ffn.visit(prefix + ".ffn", fn);
    }
};

// Every pixel token's reference: its own normalized center, on every frame.
inline Tensor encoder_reference_points(const TokenLayout& layout) {
    Tensor refs{Shape{layout.token_count(), layout.frames, 2}};
    for (std::size_t t = 0; t < layout.frames; ++t)
        for (std::size_t l = 0; l < layout.level_dims.size(); ++l) {
            const auto [lh, lw] = layout.level_dims[l];
            const std::size_t off = layout.block_offset(t, l);
            for (std::size_t y = 0; y < lh; ++y)
                for (std::size_t x = 0; x < lw; ++x) {
                    const std::size_t p = off + y * lw + x;
                    for (std::size_t tf = 0; tf < layout.frames; ++tf) {
                        refs[(p * layout.frames + tf) * 2 + 0] = (static_cast<double>(x) + 0.5) / lw;
                        refs[(p * layout.frames + tf) * 2 + 1] = (static_cast<double>(y) + 0.5) / lh;
                    }
                }
        }
    return refs;
}

inline std::vector<QueryGroup> frame_groups(const TokenLayout& layout) {
    std::vector<QueryGroup> groups;
    for (std::size_t t = 0; t < layout.frames; ++t) groups.push_back({t, t * layout.page, layout.page});
    return groups;
}

// Token-level encoder stack; `pos` is added to the attention query path only.
inline Tensor encode_tokens(Tensor tokens, const Tensor& pos, const TokenLayout& layout,
                            const std::vector<EncoderLayerParams>& layers,
                            const SamplingSchedule& schedule) {
    const Tensor refs = encoder_reference_points(layout);
    const std::vector<QueryGroup> groups = frame_groups(layout);
    for (const EncoderLayerParams& layer : layers) {
        Tensor a = layer.norm_attn(tokens);
        Tensor attn = temporal_deform_attention(add(a, pos), groups, refs, a, layout, layer.attn, schedule);
        tokens = add(tokens, attn);
        Tensor b = layer.norm_ffn(tokens);
        tokens = add(tokens, layer.ffn(b));
    }
    return tokens;
}

inline FeatureClip encode_clip(const FeatureClip& clip, const PositionalEncoding& enc,
                               const std::vector<EncoderLayerParams>& layers,
                               const SamplingSchedule& schedule) {
    clip.validate();
    const TokenLayout layout(clip.frames, clip.level_dims);
    Tensor tokens = clip_to_tokens(clip);
    if (!layers.empty()) tokens = encode_tokens(std::move(tokens), enc.tokens(layout), layout, layers, schedule);
    return tokens_to_clip(tokens, clip);
}

// ---------------------------------------------------------------------------
// Box refinement

// prev_box rows are (cx, cy, w, h) constants from the previous layer; deltas
// are differentiable head outputs. Gradient is blocked at the inverse sigmoid
// of the previous box.
inline Tensor refine_boxes_batch(const Tensor& prev_boxes, const Tensor& deltas) {
    if (prev_boxes.shape() != deltas.shape() || prev_boxes.rank() != 2 || prev_boxes.dim(1) != 4)
        dim_error("refine_boxes_batch", prev_boxes.shape(), deltas.shape());
    Tensor inv{prev_boxes.shape()};
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = inverse_sigmoid(prev_boxes[i]);
    return sigmoid(add(deltas, inv));
}

struct BoxRefinement {
    Tensor box;  // [4] (cx, cy, w, h)
    ReferencePoint reference;
};

// Single-query form: the previous box is (reference, prev_wh).
inline BoxRefinement refine_boxes(const ReferencePoint& reference, const std::array<double, 2>& prev_wh,
                                  const Tensor& box_delta) {
    if (box_delta.size() != 4) throw std::invalid_argument("refine_boxes: delta must have 4 entries");
    Tensor prev = Tensor::from({1, 4}, {reference.x, reference.y, prev_wh[0], prev_wh[1]});
    Tensor box = reshape(refine_boxes_batch(prev, reshape(box_delta, {1, 4})), {4});
    BoxRefinement out;
    out.reference.x = clamp(box[0], 0.0, 1.0);
    out.reference.y = clamp(box[1], 0.0, 1.0);
    out.reference.frame = reference.frame;
    out.box = std::move(box);
    return out;
}

// ---------------------------------------------------------------------------
// Instance-aware reference alignment

// boxes: plain [N, 4] predictions of the previous layer; own_refs: plain
// [N, 2] refined own-frame references. For query (slot s, frame t), the
// sampling reference on frame t' != t becomes the box center predicted by
// query (slot s, frame t').
inline Tensor align_instance_references(const Tensor& boxes, const Tensor& own_refs,
                                        std::size_t frames, std::size_t per_frame) {
    const std::size_t n = frames * per_frame;
    if (boxes.rank() != 2 || boxes.dim(0) != n || boxes.dim(1) != 4)
        throw std::invalid_argument("align_instance_references: boxes must be [N, 4]");
    Tensor refs{Shape{n, frames, 2}};
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t s = 0; s < per_frame; ++s) {
            const std::size_t q = t * per_frame + s;
            for (std::size_t tf = 0; tf < frames; ++tf) {
                double x, y;
                if (tf == t) {
                    x = own_refs.at(q, 0);
                    y = own_refs.at(q, 1);
                } else {
                    const std::size_t peer = tf * per_frame + s;
                    x = boxes.at(peer, 0);
                    y = boxes.at(peer, 1);
                }
                refs[(q * frames + tf) * 2 + 0] = clamp(x, 0.0, 1.0);
                refs[(q * frames + tf) * 2 + 1] = clamp(y, 0.0, 1.0);
            }
        }
    return refs;
}

// ---------------------------------------------------------------------------
// Prediction heads (shared across decoder layers)

struct PredictionHeads {
    Tensor class_w, class_b;                  // single linear layer
    Tensor box_w1, box_b1, box_w2, box_b2;    // 3-layer MLP
    Tensor box_w3, box_b3;                    // final layer zero-init

    static PredictionHeads init(std::size_t channels, std::size_t num_classes, std::mt19937_64& rng) {
        PredictionHeads h;
        const double xc = std::sqrt(6.0 / static_cast<double>(channels + num_classes + 1));
        h.class_w = Tensor::uniform({num_classes + 1, channels}, rng, -xc, xc).set_requires_grad(true);
        h.class_b = Tensor::zeros({num_classes + 1}).set_requires_grad(true);
        const double xb = std::sqrt(6.0 / static_cast<double>(2 * channels));
        h.box_w1 = Tensor::uniform({channels, channels}, rng, -xb, xb).set_requires_grad(true);
        h.box_b1 = Tensor::zeros({channels}).set_requires_grad(true);
        h.box_w2 = Tensor::uniform({channels, channels}, rng, -xb, xb).set_requires_grad(true);
        h.box_b2 = Tensor::zeros({channels}).set_requires_grad(true);
        h.box_w3 = Tensor::zeros({4, channels}).set_requires_grad(true);
        h.box_b3 = Tensor::zeros({4}).set_requires_grad(true);
        return h;
    }

    std::pair<Tensor, Tensor> operator()(const Tensor& embeddings) const {
        Tensor logits = linear(embeddings, class_w, class_b);
        Tensor hidden = relu(linear(relu(linear(embeddings, box_w1, box_b1)), box_w2, box_b2));
        Tensor deltas = linear(hidden, box_w3, box_b3);
        return {std::move(logits), std::move(deltas)};
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".class_w", class_w);
        fn(prefix + ".class_b", class_b);
        fn(prefix + ".box_w1", box_w1);
        fn(prefix + ".box_b1", box_b1);
        fn(prefix + ".box_w2", box_w2);
        fn(prefix + ".box_b2", box_b2);
        fn(prefix + ".box_w3", box_w3);
        fn(prefix + ".box_b3", box_b3);
    }
};

// ---------------------------------------------------------------------------
// Decoder

struct DecoderLayerParams {
    MhaParams self_attn;
    DeformAttnParams cross_attn;
    LayerNormParams norm_self, norm_cross, norm_ffn;
    FfnParams ffn;

    static DecoderLayerParams init(std::size_t channels, std::size_t heads, std::size_t levels,
                                   std::size_t frames, const SamplingSchedule& schedule,
                                   std::mt19937_64& rng) {
        DecoderLayerParams p;
        p.self_attn = MhaParams::init(channels, heads, rng);
        p.cross_attn = DeformAttnParams::init(channels, heads, levels, frames, schedule, rng);
        p.norm_self = LayerNormParams::init(channels);
        p.norm_cross = LayerNormParams::init(channels);
        p.norm_ffn = LayerNormParams::init(channels);
        p.ffn = FfnParams::init(channels, rng);
        return p;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        self_attn.visit(prefix + ".self", fn);
        cross_attn.visit(prefix + ".cross", fn);
        norm_self.visit(prefix + ".norm_self", fn);
        norm_cross.visit(prefix + ".norm_cross", fn);
        norm_ffn.visit(prefix + ".norm_ffn", fn);
        ffn.visit(prefix + ".ffn", fn);
    }
};

struct DecoderParams {
    std::size_t frames = 1, per_frame = 1;
    Tensor query_pos;  // [N, C] learned
    Tensor ref_embed;  // [N, 2] learned logits of the initial references
    std::vector<DecoderLayerParams> layers;
    LayerNormParams final_norm;
    PredictionHeads heads;

    std::size_t total_queries() const { return frames * per_frame; }

    static DecoderParams init(std::size_t channels, std::size_t heads, std::size_t levels,
                              std::size_t frames, std::size_t per_frame, std::size_t dec_layers,
                              std::size_t num_classes, const SamplingSchedule& schedule,
                              std::mt19937_64& rng) {
        DecoderParams d;
        d.frames = frames;
        d.per_frame = per_frame;
        const std::size_t n = frames * per_frame;
        d.query_pos = Tensor::randn({n, channels}, rng, 1.0).set_requires_grad(true);
        d.ref_embed = Tensor::randn({n, 2}, rng, 1.0).set_requires_grad(true);
        for (std::size_t i = 0; i < dec_layers; ++i)
            d.layers.push_back(DecoderLayerParams::init(channels, heads, levels, frames, schedule, rng));
        d.final_norm = LayerNormParams::init(channels);
        d.heads = PredictionHeads::init(channels, num_classes, rng);
        return d;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".query_pos", query_pos);
        fn(prefix + ".ref_embed", ref_embed);
        for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layer" + std::to_string(i), fn);
        final_norm.visit(prefix + ".final_norm", fn);
        heads.visit(prefix + ".heads", fn);
    }
};

struct DecoderLayerOutput {
    Tensor embeddings;   // [N, C], final-normed
    Tensor boxes;        // [N, 4] (cx, cy, w, h) in [0,1]
    Tensor class_logits; // [N, num_classes + 1]
};

// The values the decoder deliberately detaches between layers: previous-layer
// boxes for refinement and the aligned reference points. Capturing them from
// one pass and replaying them in another pins the stop-gradient points, which
// makes finite differences comparable with the tape gradient.
struct DecodeTrace {
    std::vector<Tensor> prev_boxes;  // per layer: [N, 4] constants fed to refinement
    std::vector<Tensor> refs;        // per layer >= 1: [N, tau, 2] aligned references
};

inline std::vector<DecoderLayerOutput> decode(const DecoderParams& dec, const Tensor& memory_tokens,
                                              const TokenLayout& layout, const SamplingSchedule& schedule,
                                              const DecodeTrace* replay = nullptr,
                                              DecodeTrace* capture = nullptr) {
    const std::size_t n = dec.total_queries(), tau = dec.frames, per_frame = dec.per_frame;
    if (layout.frames != tau)
        throw std::invalid_argument("decode: decoder frames do not match the clip");
    const std::size_t c = dec.query_pos.dim(1);

    std::vector<QueryGroup> groups;
    for (std::size_t t = 0; t < tau; ++t) groups.push_back({t, t * per_frame, per_frame});

    Tensor tgt = Tensor::zeros({n, c});
    Tensor init_ref = sigmoid(dec.ref_embed);  // differentiable into ref_embed at layer 0

    // broadcast the own reference over all frames for the first layer
    std::vector<std::int64_t> bidx(n * tau * 2);
    for (std::size_t q = 0; q < n; ++q)
        for (std::size_t t = 0; t < tau; ++t)
            for (std::size_t d = 0; d < 2; ++d)
                bidx[(q * tau + t) * 2 + d] = static_cast<std::int64_t>(q * 2 + d);
    Tensor refs = gather(init_ref, std::move(bidx), Shape{n, tau, 2});

    // previous boxes for refinement: centers at the initial references,
    // width/height prior at sigmoid(0)
    Tensor prev_boxes{Shape{n, 4}};
    for (std::size_t q = 0; q < n; ++q) {
        prev_boxes.at(q, 0) = clamp(init_ref[q * 2 + 0], 0.0, 1.0);
        prev_boxes.at(q, 1) = clamp(init_ref[q * 2 + 1], 0.0, 1.0);
        prev_boxes.at(q, 2) = 0.5;
        prev_boxes.at(q, 3) = 0.5;
    }

    std::vector<DecoderLayerOutput> outputs;
    outputs.reserve(dec.layers.size());
    for (std::size_t li = 0; li < dec.layers.size(); ++li) {
        const DecoderLayerParams& layer = dec.layers[li];
        if (replay) {
            prev_boxes = replay->prev_boxes.at(li);
            if (li >= 1) refs = replay->refs.at(li - 1);
        }
        if (capture) capture->prev_boxes.push_back(prev_boxes);

        Tensor a = layer.norm_self(tgt);
        Tensor qk = add(a, dec.query_pos);
        tgt = add(tgt, multi_head_attention(qk, qk, a, layer.self_attn).output);

        Tensor b = layer.norm_cross(tgt);
        Tensor cross = temporal_deform_attention(add(b, dec.query_pos), groups, refs, memory_tokens,
                                                 layout, layer.cross_attn, schedule);
        tgt = add(tgt, cross);

        Tensor f = layer.norm_ffn(tgt);
        tgt = add(tgt, layer.ffn(f));

        DecoderLayerOutput out;
        out.embeddings = dec.final_norm(tgt);
        auto [logits, deltas] = dec.heads(out.embeddings);
        out.class_logits = std::move(logits);
        out.boxes = refine_boxes_batch(prev_boxes, deltas);
        outputs.push_back(out);

        // next layer state: detached boxes, aligned references
        prev_boxes = out.boxes.detach().clone();
        Tensor own_refs{Shape{n, 2}};
        for (std::size_t q = 0; q < n; ++q) {
            own_refs.at(q, 0) = clamp(prev_boxes.at(q, 0), 0.0, 1.0);
            own_refs.at(q, 1) = clamp(prev_boxes.at(q, 1), 0.0, 1.0);
        }
        refs = align_instance_references(prev_boxes, own_refs, tau, per_frame);
        if (capture && li + 1 < dec.layers.size()) capture->refs.push_back(refs);
    }
    return outputs;
}

}  // namespace deskvis
