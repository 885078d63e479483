#pragma once

// Inference and evaluation: slide clips at stride S over a sequence, select
// top-k trajectories per clip, run the mask head for the selected queries,
// stitch clips into tracks, and score tracks against ground truth.

#include "deskvis/model.hpp"
#include "deskvis/tracker.hpp"

namespace deskvis {

// Clip window start offsets covering a sequence of length T.
inline std::vector<std::size_t> clip_offsets(std::size_t total_frames, std::size_t tau, std::size_t stride) {
    if (total_frames < tau)
        throw std::invalid_argument("clip_offsets: sequence of " + std::to_string(total_frames) +
                                    " frames is shorter than the clip size " + std::to_string(tau));
    std::vector<std::size_t> offsets;
    std::size_t t0 = 0;
    while (true) {
        offsets.push_back(t0);
        if (t0 + tau >= total_frames) break;
        t0 = std::min(t0 + stride, total_frames - tau);
    }
    return offsets;
}

struct InferenceResult {
    std::vector<ClipResult> clips;
    TrackStore store;
};

// Runs the model on one clip window and packages the top-k trajectories.
inline ClipResult infer_clip(const VisModel& model, const SyntheticSequence& seq, std::size_t t0) {
    const RunConfig& cfg = model.cfg;
    FeatureClip clip = clip_window(seq, t0, cfg.frames);
    Tensor raw = raw_window(seq, t0, cfg.frames);

    ClipForward fwd = model.forward_clip(clip);
    const DecoderLayerOutput& final_out = fwd.outputs.back();
    auto picks = select_trajectories(final_out.class_logits, cfg.topk, cfg.queries_per_frame);
    Tensor probs = softmax_values(final_out.class_logits, 1);

    // one mask pass per distinct slot
    std::map<std::size_t, Tensor> slot_masks;
    for (const TrajectoryPick& pick : picks) {
        if (slot_masks.count(pick.slot)) continue;
        std::vector<std::size_t> rows;
        for (std::size_t t = 0; t < cfg.frames; ++t) rows.push_back(t * cfg.queries_per_frame + pick.slot);
        Tensor logits = model.predict_masks(fwd, raw, rows, fwd.outputs.size() - 1);
        slot_masks.emplace(pick.slot, sigmoid(logits));  // [tau, H0, W0]
    }

    ClipResult result;
    result.first_frame = t0;
    result.last_frame = t0 + cfg.frames - 1;
    const auto [h0, w0] = model.level_dims()[0];
    for (std::size_t pi = 0; pi < picks.size(); ++pi) {
        const TrajectoryPick& pick = picks[pi];
        ClipInstance inst;
        inst.local_id = pi;
        inst.class_id = pick.class_id;
        inst.score = pick.score;
        const Tensor& masks = slot_masks.at(pick.slot);
        for (std::size_t t = 0; t < cfg.frames; ++t) {
            const std::size_t q = t * cfg.queries_per_frame + pick.slot;
            Tensor frame_mask{Shape{h0, w0}};
            std::memcpy(frame_mask.data(), masks.data() + t * h0 * w0, h0 * w0 * sizeof(double));
            inst.masks.push_back(std::move(frame_mask));
            inst.frame_scores.push_back(probs.at(q, pick.class_id));
            std::vector<double> cp(cfg.num_classes);
            for (std::size_t c = 0; c < cfg.num_classes; ++c) cp[c] = probs.at(q, c);
            inst.class_probs.push_back(std::move(cp));
            inst.boxes.push_back({final_out.boxes.at(q, 0), final_out.boxes.at(q, 1),
                                  final_out.boxes.at(q, 2), final_out.boxes.at(q, 3)});
        }
        result.instances.push_back(std::move(inst));
    }
    return result;
}

inline InferenceResult infer(const VisModel& model, const SyntheticSequence& seq) {
    const RunConfig& cfg = model.cfg;
    InferenceResult out;
    StitchWeights weights{cfg.sigma_mask, cfg.sigma_class, cfg.sigma_score, std::nullopt};
    for (std::size_t t0 : clip_offsets(seq.frames(), cfg.frames, cfg.stride)) {
        ClipResult clip = infer_clip(model, seq, t0);
        stitch(out.store, clip, weights);
        out.clips.push_back(std::move(clip));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalMetrics {
    double mean_soft_iou = 0.0;           // over ground-truth instances
    double association_accuracy = 0.0;    // fraction of present (instance, frame) pairs
    double ap50 = 0.0;
    std::size_t gt_instances = 0;
    std::size_t tracks = 0;
    std::vector<double> track_ious;       // per matched ground-truth instance
};

namespace detail {

// Per-sequence mask stacks aligned on [0, T): absent frames hold zero masks.
inline std::vector<Tensor> aligned_track_masks(const Track& t, std::size_t total_frames, std::size_t h,
                                               std::size_t w) {
    std::vector<Tensor> masks(total_frames, Tensor::zeros({h, w}));
    for (std::size_t i = 0; i < t.records.size(); ++i)
        if (t.first_frame + i < total_frames) masks[t.first_frame + i] = t.records[i].mask;
    return masks;
}

inline std::vector<Tensor> aligned_gt_masks(const GroundTruthInstance& inst, std::size_t total_frames,
                                            std::size_t h, std::size_t w) {
    std::vector<Tensor> masks(total_frames, Tensor::zeros({h, w}));
    for (std::size_t t = 0; t < total_frames; ++t)
        if (inst.present[t]) masks[t] = inst.masks[t];
    return masks;
}

}  // namespace detail

// Scores stitched tracks against a sequence-level ground truth at the mask
// resolution. A track owns an (instance, frame) pair when it has the highest
// per-frame soft IoU there; association accuracy asks the owner to be the
// track globally matched to that instance.
inline EvalMetrics evaluate(const TrackStore& store, const GroundTruthClip& gt) {
    EvalMetrics metrics;
    metrics.gt_instances = gt.instances.size();
    metrics.tracks = store.tracks.size();
    if (gt.instances.empty()) {
        metrics.mean_soft_iou = store.tracks.empty() ? 1.0 : 0.0;
        metrics.association_accuracy = store.tracks.empty() ? 1.0 : 0.0;
        metrics.ap50 = 0.0;
        return metrics;
    }
    std::size_t h = 0, w = 0;
    for (const auto& inst : gt.instances)
        for (std::size_t t = 0; t < gt.frames; ++t)
            if (inst.present[t]) {
                h = inst.masks[t].dim(0);
                w = inst.masks[t].dim(1);
            }
    for (const auto& trk : store.tracks)
        if (!trk.records.empty() && trk.records[0].mask.defined() &&
            (trk.records[0].mask.dim(0) != h || trk.records[0].mask.dim(1) != w))
            throw std::invalid_argument("evaluate: track masks are " +
                                        shape_str(trk.records[0].mask.shape()) + ", ground truth is [" +
                                        std::to_string(h) + "," + std::to_string(w) + "]");

    const std::size_t nt = store.tracks.size(), ni = gt.instances.size();
    // volumetric IoU per (track, instance) over the whole sequence
    std::vector<std::vector<double>> vol(nt, std::vector<double>(ni, 0.0));
    for (std::size_t r = 0; r < nt; ++r) {
        auto tm = detail::aligned_track_masks(store.tracks[r], gt.frames, h, w);
        for (std::size_t c = 0; c < ni; ++c)
            vol[r][c] = volumetric_soft_iou(tm, detail::aligned_gt_masks(gt.instances[c], gt.frames, h, w));
    }

    // global matching maximizes total volumetric IoU
    std::vector<long> match_of_instance(ni, -1);
    if (nt > 0) {
        Tensor cost{Shape{nt, ni}};
        for (std::size_t r = 0; r < nt; ++r)
            for (std::size_t c = 0; c < ni; ++c) cost.at(r, c) = -vol[r][c];
        for (auto [r, c] : hungarian(cost).pairs) match_of_instance[c] = static_cast<long>(r);
    }

    double iou_sum = 0.0;
    for (std::size_t c = 0; c < ni; ++c) {
        const double iou = match_of_instance[c] < 0 ? 0.0 : vol[match_of_instance[c]][c];
        metrics.track_ious.push_back(iou);
        iou_sum += iou;
    }
    metrics.mean_soft_iou = iou_sum / static_cast<double>(ni);

    // association accuracy via per-frame ownership
    std::size_t present_pairs = 0, correct = 0;
    for (std::size_t c = 0; c < ni; ++c) {
        const GroundTruthInstance& inst = gt.instances[c];
        for (std::size_t t = 0; t < gt.frames; ++t) {
            if (!inst.present[t]) continue;
            ++present_pairs;
            long owner = -1;
            double best = 0.0;
            for (std::size_t r = 0; r < nt; ++r) {
                const Track& trk = store.tracks[r];
                if (t < trk.first_frame || t >= trk.frames_end()) continue;
                const double f = volumetric_soft_iou({trk.records[t - trk.first_frame].mask},
                                                     {inst.masks[t]});
                if (f > best) {
                    best = f;
                    owner = static_cast<long>(r);
                }
            }
            if (owner >= 0 && owner == match_of_instance[c]) ++correct;
        }
    }
    metrics.association_accuracy =
        present_pairs == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(present_pairs);

    // toy AP@0.5: score-ranked tracks, each ground truth matchable once
    std::vector<std::size_t> order(nt);
    for (std::size_t i = 0; i < nt; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = store.tracks[a].mean_score(), sb = store.tracks[b].mean_score();
        if (sa != sb) return sa > sb;
        return store.tracks[a].identity < store.tracks[b].identity;
    });
    std::vector<bool> taken(ni, false);
    std::size_t tp = 0;
    double ap = 0.0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        const std::size_t r = order[rank];
        long best_c = -1;
        double best_iou = 0.5;
        for (std::size_t c = 0; c < ni; ++c) {
            if (taken[c]) continue;
            if (vol[r][c] >= best_iou) {
                best_iou = vol[r][c];
                best_c = static_cast<long>(c);
            }
        }
        if (best_c >= 0) {
            taken[best_c] = true;
            ++tp;
            ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
        }
    }
    metrics.ap50 = ap / static_cast<double>(ni);
    return metrics;
}

}  // namespace deskvis
