#pragma once

// Multi-cue clip tracking: consecutive overlapping clips are stitched by a
// Hungarian assignment over a cost built from volumetric soft mask IoU, class
// consistency, and score similarity. Instances without a match open new
// identities; tracks that miss a match stay in the store but can no longer
// extend.

#include "deskvis/matching.hpp"
#include "deskvis/serial.hpp"

#include <fstream>
#include <optional>
#include <sstream>

namespace deskvis {

// ---------------------------------------------------------------------------
// Clip-level predictions

struct ClipInstance {
    std::size_t local_id = 0;
    std::size_t class_id = 0;
    double score = 0.0;                             // clip-level confidence
    std::vector<Tensor> masks;                      // per clip frame, [H, W] soft
    std::vector<std::vector<double>> class_probs;   // per clip frame, real classes
    std::vector<double> frame_scores;               // per clip frame
    std::vector<std::array<double, 4>> boxes;       // per clip frame
};

struct ClipResult {
    std::size_t first_frame = 0;
    std::size_t last_frame = 0;  // inclusive
    std::vector<ClipInstance> instances;

    std::size_t frame_count() const { return last_frame - first_frame + 1; }
};

// ---------------------------------------------------------------------------
// Track store

struct TrackRecord {
    Tensor mask;
    double score = 0.0;
    std::array<double, 4> box{};
    std::vector<double> class_probs;
};

struct Track {
    std::size_t identity = 0;
    std::size_t class_id = 0;
    std::size_t first_frame = 0;
    std::vector<TrackRecord> records;  // consecutive frames from first_frame
    bool active = true;

    std::size_t frames_end() const { return first_frame + records.size(); }  // exclusive

    double mean_score() const {
        if (records.empty()) return 0.0;
        double s = 0.0;
        for (const auto& r : records) s += r.score;
        return s / static_cast<double>(records.size());
    }
};

struct TrackStore {
    std::vector<Track> tracks;
    std::size_t next_identity = 0;
    std::size_t frontier_end = 0;  // frames [0, frontier_end) are covered
};

struct StitchWeights {
    double sigma_mask = 1.0;
    double sigma_class = 1.0;
    double sigma_score = 1.0;
    std::optional<double> max_cost;  // optional acceptance gate, disabled by default
};

// ---------------------------------------------------------------------------
// Cost terms

// sum(min) / sum(max) over aligned soft masks; 0 when both stacks are empty
// of mass. Cost usage negates the value.
inline double volumetric_soft_iou(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("volumetric_soft_iou: frame count mismatch");
    double inter = 0.0, uni = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) {
        if (a[t].shape() != b[t].shape()) dim_error("volumetric_soft_iou", a[t].shape(), b[t].shape());
        for (std::size_t i = 0; i < a[t].size(); ++i) {
            inter += std::min(a[t][i], b[t][i]);
            uni += std::max(a[t][i], b[t][i]);
        }
    }
    return uni == 0.0 ? 0.0 : inter / uni;
}

// sigma_mask * (-softIoU) + sigma_class * (-1 if same class) + sigma_score * |si - sj|
inline double stitch_cost(const std::vector<Tensor>& track_masks, std::size_t track_class,
                          double track_score, const std::vector<Tensor>& inst_masks,
                          std::size_t inst_class, double inst_score, const StitchWeights& w) {
    if (track_masks.empty()) throw std::invalid_argument("stitch_cost: empty overlap");
    const double mask_term = -volumetric_soft_iou(track_masks, inst_masks);
    const double class_term = track_class == inst_class ? -1.0 : 0.0;
    const double score_term = std::fabs(track_score - inst_score);
    return w.sigma_mask * mask_term + w.sigma_class * class_term + w.sigma_score * score_term;
}

// ---------------------------------------------------------------------------
// Stitching

inline void start_track(TrackStore& store, const ClipInstance& inst, std::size_t first_frame) {
    Track t;
    t.identity = store.next_identity++;
    t.class_id = inst.class_id;
    t.first_frame = first_frame;
    for (std::size_t i = 0; i < inst.masks.size(); ++i) {
        TrackRecord r;
        r.mask = inst.masks[i];
        r.score = inst.frame_scores[i];
        r.box = inst.boxes[i];
        r.class_probs = inst.class_probs[i];
        t.records.push_back(std::move(r));
    }
    store.tracks.push_back(std::move(t));
}

// Merges the next clip into the store. Matched tracks keep their records on
// the overlap frames and extend with the clip's predictions beyond the
// frontier; unmatched instances open fresh identities.
inline void stitch(TrackStore& store, const ClipResult& next, const StitchWeights& weights) {
    if (store.frontier_end == 0) {
        for (const ClipInstance& inst : next.instances) start_track(store, inst, next.first_frame);
        store.frontier_end = next.last_frame + 1;
        return;
    }
    if (next.first_frame >= store.frontier_end || next.last_frame + 1 <= store.frontier_end)
        throw std::invalid_argument("stitch: clip [" + std::to_string(next.first_frame) + "," +
                                    std::to_string(next.last_frame) +
                                    "] does not overlap and extend the frontier at " +
                                    std::to_string(store.frontier_end));
    const std::size_t overlap_begin = next.first_frame;
    const std::size_t overlap_end = store.frontier_end;

    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < store.tracks.size(); ++i)
        if (store.tracks[i].active && store.tracks[i].frames_end() == store.frontier_end)
            active.push_back(i);

    std::vector<bool> inst_matched(next.instances.size(), false);
    if (!active.empty() && !next.instances.empty()) {
        Tensor cost{Shape{active.size(), next.instances.size()}};
        for (std::size_t r = 0; r < active.size(); ++r) {
            const Track& trk = store.tracks[active[r]];
            std::vector<Tensor> track_masks;
            for (std::size_t t = overlap_begin; t < overlap_end; ++t)
                track_masks.push_back(trk.records[t - trk.first_frame].mask);
            for (std::size_t c = 0; c < next.instances.size(); ++c) {
                const ClipInstance& inst = next.instances[c];
                std::vector<Tensor> inst_masks;
                for (std::size_t t = overlap_begin; t < overlap_end; ++t)
                    inst_masks.push_back(inst.masks[t - next.first_frame]);
                cost.at(r, c) = stitch_cost(track_masks, trk.class_id, trk.mean_score(), inst_masks,
                                            inst.class_id, inst.score, weights);
            }
        }
        Assignment assign = hungarian(cost);
        for (auto [r, c] : assign.pairs) {
            if (weights.max_cost && cost.at(r, c) > *weights.max_cost) continue;
            Track& trk = store.tracks[active[r]];
            for (std::size_t t = overlap_end; t <= next.last_frame; ++t) {
                const ClipInstance& inst = next.instances[c];
                TrackRecord rec;
                rec.mask = inst.masks[t - next.first_frame];
                rec.score = inst.frame_scores[t - next.first_frame];
                rec.box = inst.boxes[t - next.first_frame];
                rec.class_probs = inst.class_probs[t - next.first_frame];
                trk.records.push_back(std::move(rec));
            }
            inst_matched[c] = true;
        }
    }

    // tracks that did not extend can no longer match
    for (std::size_t i : active)
        if (store.tracks[i].frames_end() != next.last_frame + 1) store.tracks[i].active = false;

    for (std::size_t c = 0; c < next.instances.size(); ++c)
        if (!inst_matched[c]) start_track(store, next.instances[c], next.first_frame);

    store.frontier_end = next.last_frame + 1;
}

// ---------------------------------------------------------------------------
// Trajectory selection

struct TrajectoryPick {
    std::size_t slot = 0;
    std::size_t class_id = 0;
    double score = 0.0;
};

// Mean per-class score over the clip's frames for every identity slot, then
// top-k over all (slot, class) candidates. When k exceeds the slot count, a
// slot is associated with multiple labels.
inline std::vector<TrajectoryPick> select_trajectories(const Tensor& class_logits, std::size_t k,
                                                       std::size_t queries_per_frame) {
    if (k == 0) throw std::invalid_argument("select_trajectories: k must be at least 1");
    if (class_logits.rank() != 2 || class_logits.dim(0) % queries_per_frame != 0)
        throw std::invalid_argument("select_trajectories: logits must be [tau*n, classes+1]");
    const std::size_t frames = class_logits.dim(0) / queries_per_frame;
    const std::size_t classes = class_logits.dim(1) - 1;  // exclude no-object
    Tensor probs = softmax_values(class_logits, 1);

    std::vector<TrajectoryPick> picks;
    picks.reserve(queries_per_frame * classes);
    for (std::size_t s = 0; s < queries_per_frame; ++s) {
        for (std::size_t c = 0; c < classes; ++c) {
            double mean_score = 0.0;
            for (std::size_t t = 0; t < frames; ++t)
                mean_score += probs.at(t * queries_per_frame + s, c);
            picks.push_back({s, c, mean_score / static_cast<double>(frames)});
        }
    }
    std::sort(picks.begin(), picks.end(), [](const TrajectoryPick& a, const TrajectoryPick& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.slot != b.slot) return a.slot < b.slot;
        return a.class_id < b.class_id;
    });
    if (picks.size() > k) picks.resize(k);
    return picks;
}

// ---------------------------------------------------------------------------
// Clip manifest and track file formats (structured text + MSK1 masks)

// Clip manifest line format:
//   clip first=<f> last=<f> masks=<file> instances=<n>
//   inst id=<local> class=<c> score=<s>
//   rec t=<frame> score=<s> mask=<index into masks file> box=<cx>,<cy>,<w>,<h> probs=<p0>,<p1>,...
inline void write_clip_manifest(std::ostream& os, const std::vector<ClipResult>& clips,
                                const std::vector<std::string>& mask_files) {
    if (clips.size() != mask_files.size())
        throw std::invalid_argument("write_clip_manifest: one mask file per clip required");
    for (std::size_t ci = 0; ci < clips.size(); ++ci) {
        const ClipResult& clip = clips[ci];
        os << "clip first=" << clip.first_frame << " last=" << clip.last_frame
           << " masks=" << mask_files[ci] << " instances=" << clip.instances.size() << "\n";
        std::size_t mask_index = 0;
        for (const ClipInstance& inst : clip.instances) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", inst.score);
            os << "inst id=" << inst.local_id << " class=" << inst.class_id << " score=" << buf << "\n";
            for (std::size_t t = 0; t < clip.frame_count(); ++t) {
                os << "rec t=" << clip.first_frame + t;
                std::snprintf(buf, sizeof(buf), "%.17g", inst.frame_scores[t]);
                os << " score=" << buf << " mask=" << mask_index++ << " box=";
                for (std::size_t j = 0; j < 4; ++j) {
                    std::snprintf(buf, sizeof(buf), "%.17g", inst.boxes[t][j]);
                    os << (j ? "," : "") << buf;
                }
                os << " probs=";
                for (std::size_t j = 0; j < inst.class_probs[t].size(); ++j) {
                    std::snprintf(buf, sizeof(buf), "%.17g", inst.class_probs[t][j]);
                    os << (j ? "," : "") << buf;
                }
                os << "\n";
            }
        }
    }
}

// Reads a manifest; mask files are resolved relative to `dir` and drawn from
// the referenced MSK1 files by index.
inline std::vector<ClipResult> read_clip_manifest(const std::string& manifest_path, const std::string& dir) {
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("read_clip_manifest: cannot open " + manifest_path);
    std::vector<ClipResult> clips;
    std::vector<Tensor> masks;
    ClipInstance* inst = nullptr;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::string tag;
        auto kv = detail::parse_kv_line(line, &tag);
        if (tag == "clip") {
            ClipResult clip;
            clip.first_frame = std::stoul(kv.at("first"));
            clip.last_frame = std::stoul(kv.at("last"));
            masks = load_masks(dir + "/" + kv.at("masks"));
            clips.push_back(std::move(clip));
            inst = nullptr;
        } else if (tag == "inst") {
            if (clips.empty()) throw std::runtime_error("manifest: inst before clip");
            ClipInstance ci;
            ci.local_id = std::stoul(kv.at("id"));
            ci.class_id = std::stoul(kv.at("class"));
            ci.score = std::stod(kv.at("score"));
            clips.back().instances.push_back(std::move(ci));
            inst = &clips.back().instances.back();
        } else if (tag == "rec") {
            if (!inst) throw std::runtime_error("manifest: rec before inst");
            inst->frame_scores.push_back(std::stod(kv.at("score")));
            inst->masks.push_back(masks.at(std::stoul(kv.at("mask"))));
            auto box = detail::parse_csv(kv.at("box"));
            inst->boxes.push_back({box.at(0), box.at(1), box.at(2), box.at(3)});
            inst->class_probs.push_back(detail::parse_csv(kv.at("probs")));
        } else {
            throw std::runtime_error("manifest: unknown tag '" + tag + "'");
        }
    }
    return clips;
}

// Track file: one "track" line per identity followed by one "frame" line per
// record; masks go to a sibling MSK1 file in record order.
inline void write_tracks(const std::string& base_path, const TrackStore& store) {
    std::ofstream os(base_path + ".txt");
    if (!os) throw std::runtime_error("write_tracks: cannot open " + base_path + ".txt");
    std::vector<Tensor> all_masks;
    char buf[64];
    for (const Track& t : store.tracks) {
        os << "track id=" << t.identity << " class=" << t.class_id << " first=" << t.first_frame
           << " count=" << t.records.size() << "\n";
        for (std::size_t i = 0; i < t.records.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", t.records[i].score);
            os << "frame t=" << t.first_frame + i << " score=" << buf << " mask=" << all_masks.size()
               << " box=";
            for (std::size_t j = 0; j < 4; ++j) {
                std::snprintf(buf, sizeof(buf), "%.17g", t.records[i].box[j]);
                os << (j ? "," : "") << buf;
            }
            os << "\n";
            all_masks.push_back(t.records[i].mask);
        }
    }
    save_masks(base_path + ".msk", all_masks);
}

inline TrackStore read_tracks(const std::string& base_path) {
    std::ifstream is(base_path + ".txt");
    if (!is) throw std::runtime_error("read_tracks: cannot open " + base_path + ".txt");
    std::vector<Tensor> masks = load_masks(base_path + ".msk");
    TrackStore store;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::string tag;
        auto kv = detail::parse_kv_line(line, &tag);
        if (tag == "track") {
            Track t;
            t.identity = std::stoul(kv.at("id"));
            t.class_id = std::stoul(kv.at("class"));
            t.first_frame = std::stoul(kv.at("first"));
            store.tracks.push_back(std::move(t));
            store.next_identity = std::max(store.next_identity, store.tracks.back().identity + 1);
        } else if (tag == "frame") {
            if (store.tracks.empty()) throw std::runtime_error("tracks: frame before track");
            TrackRecord r;
            r.score = std::stod(kv.at("score"));
            r.mask = masks.at(std::stoul(kv.at("mask")));
            auto box = detail::parse_csv(kv.at("box"));
            r.box = {box.at(0), box.at(1), box.at(2), box.at(3)};
            store.tracks.back().records.push_back(std::move(r));
        }
    }
    for (const Track& t : store.tracks)
        store.frontier_end = std::max(store.frontier_end, t.frames_end());
    return store;
}

}  // namespace deskvis
