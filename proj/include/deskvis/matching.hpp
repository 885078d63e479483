#pragma once

// Set matching and the training loss stack: Hungarian assignment between
// identity slots and ground-truth instances, class/box/mask losses with the
// cascaded per-layer auxiliary weighting.

#include "deskvis/transformer.hpp"

#include <array>
#include <limits>
#include <map>

namespace deskvis {

// ---------------------------------------------------------------------------
// Ground truth

struct GroundTruthInstance {
    std::size_t identity = 0;
    std::size_t class_id = 0;  // constant over the clip
    std::vector<bool> present;                  // per frame
    std::vector<std::array<double, 4>> boxes;   // per frame (cx, cy, w, h), valid when present
    std::vector<Tensor> masks;                  // per frame [H, W] binary, valid when present

    std::size_t present_count() const {
        std::size_t n = 0;
        for (bool p : present) n += p ? 1 : 0;
        return n;
    }
};

struct GroundTruthClip {
    std::size_t frames = 0;
    std::vector<GroundTruthInstance> instances;
};

// ---------------------------------------------------------------------------
// Assignment

struct Assignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row/slot, col/instance)
    double total_cost = 0.0;
};

// Minimum-cost injective assignment of min(R, S) rows to columns via the
// shortest augmenting path algorithm with potentials; exact for finite costs.
inline Assignment hungarian(const Tensor& cost) {
    if (cost.rank() != 2) throw std::invalid_argument("hungarian: cost must be a matrix");
    const std::size_t rows = cost.dim(0), cols = cost.dim(1);
    for (std::size_t i = 0; i < cost.size(); ++i)
        if (std::isnan(cost[i])) throw std::invalid_argument("hungarian: NaN in cost matrix");
    Assignment out;
    if (rows == 0 || cols == 0) return out;

    const bool transposed = rows > cols;
    const std::size_t n = transposed ? cols : rows;
    const std::size_t m = transposed ? rows : cols;
    auto at = [&](std::size_t i, std::size_t j) {
        return transposed ? cost.at(j, i) : cost.at(i, j);
    };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::vector<bool> used(m + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        const std::size_t r = p[j] - 1, c = j - 1;
        if (transposed)
            out.pairs.emplace_back(c, r);
        else
            out.pairs.emplace_back(r, c);
        out.total_cost += transposed ? cost.at(c, r) : cost.at(r, c);
    }
    std::sort(out.pairs.begin(), out.pairs.end());
    return out;
}

// ---------------------------------------------------------------------------
// Generalized IoU

// Differentiable per-row gIoU of two [N, 4] (cx, cy, w, h) tensors.
// Degenerate boxes are clamped to a tiny positive area.
inline Tensor giou_batch(const Tensor& a, const Tensor& b, double eps = 1e-7) {
    if (a.shape() != b.shape() || a.rank() != 2 || a.dim(1) != 4) dim_error("giou_batch", a.shape(), b.shape());
    const std::size_t n = a.dim(0);
    auto col = [n](const Tensor& t, std::size_t c) {
        std::vector<std::int64_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::int64_t>(i * 4 + c);
        return gather(t, std::move(idx), Shape{n});
    };
    Tensor epsv = Tensor::full({n}, eps);
    Tensor wa = maximum(col(a, 2), epsv), ha = maximum(col(a, 3), epsv);
    Tensor wb = maximum(col(b, 2), epsv), hb = maximum(col(b, 3), epsv);
    Tensor ax1 = col(a, 0) - mul_scalar(wa, 0.5), ax2 = col(a, 0) + mul_scalar(wa, 0.5);
    Tensor ay1 = col(a, 1) - mul_scalar(ha, 0.5), ay2 = col(a, 1) + mul_scalar(ha, 0.5);
    Tensor bx1 = col(b, 0) - mul_scalar(wb, 0.5), bx2 = col(b, 0) + mul_scalar(wb, 0.5);
    Tensor by1 = col(b, 1) - mul_scalar(hb, 0.5), by2 = col(b, 1) + mul_scalar(hb, 0.5);

    Tensor iw = relu(minimum(ax2, bx2) - maximum(ax1, bx1));
    Tensor ih = relu(minimum(ay2, by2) - maximum(ay1, by1));
    Tensor inter = mul(iw, ih);
    Tensor uni = mul(wa, ha) + mul(wb, hb) - inter;
    Tensor hull = mul(maximum(ax2, bx2) - minimum(ax1, bx1), maximum(ay2, by2) - minimum(ay1, by1));
    return div(inter, uni) - div(hull - uni, hull);
}

inline double giou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    Tensor ta = Tensor::from({1, 4}, {a[0], a[1], a[2], a[3]});
    Tensor tb = Tensor::from({1, 4}, {b[0], b[1], b[2], b[3]});
    return giou_batch(ta, tb)[0];
}

// ---------------------------------------------------------------------------
// Loss weights

struct LossWeights {
    double lambda_class = 1.0;
    double lambda_l1 = 5.0;
    double lambda_giou = 2.0;
    double lambda_dice = 1.0;
    double lambda_mask = 1.0;
    double no_object_weight = 0.1;
    std::vector<double> aux_schedule;  // first..final decoder layer

    // Cascaded weighting: the final layer takes 1/2, earlier layer i (1-based)
    // takes i / (D*(D-1)); the whole schedule sums to 1.
    static std::vector<double> default_schedule(std::size_t layers) {
        std::vector<double> s;
        if (layers == 0) return s;
        if (layers == 1) return {1.0};
        for (std::size_t i = 1; i < layers; ++i)
            s.push_back(static_cast<double>(i) / static_cast<double>(layers * (layers - 1)));
        s.push_back(0.5);
        return s;
    }

    static void check_schedule(const std::vector<double>& s) {
        double total = 0.0;
        for (double v : s) total += v;
        if (s.size() > 1 && std::fabs(total - 1.0) > 1e-9)
            throw std::invalid_argument("aux schedule sums to " + std::to_string(total) + ", expected 1");
    }
};

// ---------------------------------------------------------------------------
// Trajectory matching

// Per-slot per-frame predictions in plain form, used for the no-grad cost.
struct SlotPredictions {
    // probs[slot][frame]: softmax probabilities over classes + trailing no-object
    std::vector<std::vector<std::vector<double>>> probs;
    std::vector<std::vector<std::array<double, 4>>> boxes;  // [slot][frame]

    std::size_t slots() const { return probs.size(); }
};

inline SlotPredictions slot_predictions(const DecoderLayerOutput& out, std::size_t frames,
                                        std::size_t per_frame) {
    SlotPredictions sp;
    const std::size_t classes = out.class_logits.dim(1);
    Tensor probs = softmax_values(out.class_logits, 1);
    sp.probs.assign(per_frame, std::vector<std::vector<double>>(frames, std::vector<double>(classes)));
    sp.boxes.assign(per_frame, std::vector<std::array<double, 4>>(frames));
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t s = 0; s < per_frame; ++s) {
            const std::size_t q = t * per_frame + s;
            for (std::size_t j = 0; j < classes; ++j) sp.probs[s][t][j] = probs.at(q, j);
            for (std::size_t j = 0; j < 4; ++j) sp.boxes[s][t][j] = out.boxes.at(q, j);
        }
    return sp;
}

// cost(slot, instance) summed over the instance's present frames:
//   -lambda_class * p(class) + lambda_l1 * |b - gt|_1 + lambda_giou * (1 - gIoU)
inline Tensor trajectory_match_cost(const SlotPredictions& preds, const GroundTruthClip& gt,
                                    const LossWeights& w) {
    const std::size_t slots = preds.slots(), insts = gt.instances.size();
    Tensor cost{Shape{slots, insts}};
    for (std::size_t s = 0; s < slots; ++s) {
        for (std::size_t i = 0; i < insts; ++i) {
            const GroundTruthInstance& inst = gt.instances[i];
            double c = 0.0;
            for (std::size_t t = 0; t < gt.frames; ++t) {
                if (!inst.present[t]) continue;
                c -= w.lambda_class * preds.probs[s][t][inst.class_id];
                double l1 = 0.0;
                for (std::size_t j = 0; j < 4; ++j) l1 += std::fabs(preds.boxes[s][t][j] - inst.boxes[t][j]);
                c += w.lambda_l1 * l1;
                c += w.lambda_giou * (1.0 - giou(preds.boxes[s][t], inst.boxes[t]));
            }
            cost.at(s, i) = c;
        }
    }
    return cost;
}

// ---------------------------------------------------------------------------
// Losses

struct LossReport {
    double total = 0.0;
    double class_term = 0.0, l1_term = 0.0, giou_term = 0.0, bce_term = 0.0, dice_term = 0.0;

    std::string line(std::size_t iter) const {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "iter=%zu total=%.17g class=%.17g l1=%.17g giou=%.17g bce=%.17g dice=%.17g", iter,
                      total, class_term, l1_term, giou_term, bce_term, dice_term);
        return buf;
    }
};

// Soft dice loss averaged over masks; logits [K, H, W], binary targets alike.
inline Tensor dice_loss(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape()) dim_error("dice_loss", logits.shape(), targets.shape());
    const std::size_t k = logits.dim(0), hw = logits.size() / std::max<std::size_t>(k, 1);
    if (k == 0) return Tensor::scalar(0.0);
    Tensor probs = sigmoid(reshape(logits, {k, hw}));
    Tensor tgt = reshape(targets.detach(), {k, hw});
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < k; ++i) {
        Tensor p = slice_rows(probs, i, 1);
        Tensor g = slice_rows(tgt, i, 1);
        Tensor num = add_scalar(mul_scalar(sum(mul(p, g)), 2.0), 1.0);
        Tensor den = add_scalar(add(sum(p), sum(g)), 1.0);
        acc = add(acc, add_scalar(neg(div(num, den)), 1.0));
    }
    return mul_scalar(acc, 1.0 / static_cast<double>(k));
}

// Rows of matched (slot, present-frame) queries in assignment order, and the
// matching ground-truth boxes/masks/classes.
struct MatchedTargets {
    std::vector<std::size_t> query_rows;        // t * per_frame + slot
    std::vector<std::size_t> frames;            // frame of each row
    Tensor boxes;                               // [K, 4]
    Tensor masks;                               // [K, H, W]
    std::vector<std::size_t> classes;           // per row
};

inline MatchedTargets matched_targets(const Assignment& assign, const GroundTruthClip& gt,
                                      std::size_t per_frame) {
    MatchedTargets m;
    std::vector<double> box_data;
    std::vector<Tensor> mask_list;
    for (auto [slot, inst_id] : assign.pairs) {
        if (inst_id >= gt.instances.size())
            throw std::invalid_argument("matched_targets: assignment references instance " +
                                        std::to_string(inst_id));
        const GroundTruthInstance& inst = gt.instances[inst_id];
        for (std::size_t t = 0; t < gt.frames; ++t) {
            if (!inst.present[t]) continue;
            m.query_rows.push_back(t * per_frame + slot);
            m.frames.push_back(t);
            for (double v : inst.boxes[t]) box_data.push_back(v);
            mask_list.push_back(inst.masks[t]);
            m.classes.push_back(inst.class_id);
        }
    }
    const std::size_t k = m.query_rows.size();
    m.boxes = Tensor::from({k, 4}, std::move(box_data));
    if (k > 0) {
        const std::size_t h = mask_list[0].dim(0), w = mask_list[0].dim(1);
        m.masks = Tensor{Shape{k, h, w}};
        for (std::size_t i = 0; i < k; ++i)
            std::memcpy(m.masks.data() + i * h * w, mask_list[i].data(), h * w * sizeof(double));
    } else {
        m.masks = Tensor::zeros({0, 0, 0});
    }
    return m;
}

// Total training loss over all decoder layers. mask_logits_by_layer maps a
// decoder layer index to [K, H, W] mask logits for the matched rows of
// matched_targets (same order); these layers receive unweighted mask terms.
inline Tensor compute_losses(const std::vector<DecoderLayerOutput>& outs, const Assignment& assign,
                             const GroundTruthClip& gt, const LossWeights& w, std::size_t per_frame,
                             const std::map<std::size_t, Tensor>& mask_logits_by_layer,
                             LossReport* report = nullptr) {
    if (outs.empty()) throw std::invalid_argument("compute_losses: no decoder outputs");
    const std::size_t n = outs.back().class_logits.dim(0);
    const std::size_t classes = outs.back().class_logits.dim(1) - 1;  // trailing no-object
    std::vector<double> schedule = w.aux_schedule.empty() ? LossWeights::default_schedule(outs.size())
                                                          : w.aux_schedule;
    if (schedule.size() != outs.size())
        throw std::invalid_argument("compute_losses: aux schedule length mismatch");
    LossWeights::check_schedule(schedule);

    MatchedTargets matched = matched_targets(assign, gt, per_frame);
    const std::size_t k = matched.query_rows.size();

    // per-query class targets: matched present rows take the instance class,
    // everything else is no-object
    std::vector<std::size_t> targets(n, classes);
    for (std::size_t i = 0; i < k; ++i) targets[matched.query_rows[i]] = matched.classes[i];
    std::vector<double> class_weights(classes + 1, 1.0);
    class_weights[classes] = w.no_object_weight;

    Tensor total = Tensor::scalar(0.0);
    LossReport rep;
    for (std::size_t li = 0; li < outs.size(); ++li) {
        const DecoderLayerOutput& out = outs[li];
        Tensor cls = cross_entropy(out.class_logits, targets, class_weights);
        Tensor layer_loss = mul_scalar(cls, w.lambda_class);
        rep.class_term += schedule[li] * w.lambda_class * cls.value();
        if (k > 0) {
            Tensor pred = take_rows(out.boxes, matched.query_rows);
            Tensor l1 = mul_scalar(sum(deskvis::abs(sub(pred, matched.boxes))), 1.0 / static_cast<double>(k));
            Tensor gi = mul_scalar(sum(add_scalar(neg(giou_batch(pred, matched.boxes)), 1.0)),
                                   1.0 / static_cast<double>(k));
            rep.l1_term += schedule[li] * w.lambda_l1 * l1.value();
            rep.giou_term += schedule[li] * w.lambda_giou * gi.value();
            layer_loss = add(layer_loss, add(mul_scalar(l1, w.lambda_l1), mul_scalar(gi, w.lambda_giou)));
        }
        total = add(total, mul_scalar(layer_loss, schedule[li]));
    }

    for (const auto& [layer, logits] : mask_logits_by_layer) {
        if (layer >= outs.size()) throw std::invalid_argument("compute_losses: mask layer out of range");
        if (logits.dim(0) != k)
            throw std::invalid_argument("compute_losses: mask logits cover " + std::to_string(logits.dim(0)) +
                                        " rows, expected " + std::to_string(k));
        if (k == 0) continue;
        Tensor bce = bce_with_logits(logits, matched.masks);
        Tensor dice = dice_loss(logits, matched.masks);
        rep.bce_term += w.lambda_mask * bce.value();
        rep.dice_term += w.lambda_dice * dice.value();
        total = add(total, add(mul_scalar(bce, w.lambda_mask), mul_scalar(dice, w.lambda_dice)));
    }

    rep.total = total.value();
    if (report) *report = rep;
    return total;
}

// Decoder layers that carry mask losses: the final layer plus the 3rd.
inline std::vector<std::size_t> mask_loss_layers(std::size_t decoder_layers) {
    std::vector<std::size_t> layers;
    if (decoder_layers == 0) return layers;
    layers.push_back(decoder_layers - 1);
    if (decoder_layers > 3) layers.insert(layers.begin(), 2);
    return layers;
}

}  // namespace deskvis
