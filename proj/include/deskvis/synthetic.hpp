#pragma once

// Synthetic moving-shape sequences: rasterized circles, squares, and
// triangles on a grayscale canvas, occluding each other by z-order, with
// ground-truth boxes and quarter-resolution masks derived from the visible
// coverage. Features come from a fixed seeded random projection of local
// patches of the image pyramid, standing in for a backbone.

#include "deskvis/deform_attn.hpp"
#include "deskvis/matching.hpp"
#include "deskvis/serial.hpp"

#include <filesystem>
#include <fstream>

namespace deskvis {

enum class ShapeClass : std::size_t { circle = 0, square = 1, triangle = 2 };

inline const char* shape_name(ShapeClass c) {
    switch (c) {
        case ShapeClass::circle: return "circle";
        case ShapeClass::square: return "square";
        default: return "triangle";
    }
}

struct ObjectSpec {
    std::size_t identity = 0;
    ShapeClass cls = ShapeClass::circle;
    double x0 = 0.5, y0 = 0.5;  // initial center, canvas-normalized
    double vx = 0.0, vy = 0.0;  // per-frame velocity, normalized units
    double size = 0.12;         // circumradius / half-extent, normalized

    double x_at(std::size_t t) const { return x0 + vx * static_cast<double>(t); }
    double y_at(std::size_t t) const { return y0 + vy * static_cast<double>(t); }
};

struct SequenceSpec {
    std::size_t frames = 6;
    std::size_t canvas = 64;
    std::size_t levels = 3;  // encoded pyramid levels; level 0 is canvas/4
    double visibility_threshold = 0.1;
    std::vector<ObjectSpec> objects;
};

// Canvas-normalized point-in-shape test; later identities render on top.
inline bool shape_contains(const ObjectSpec& obj, std::size_t t, double x, double y) {
    const double dx = x - obj.x_at(t), dy = y - obj.y_at(t), r = obj.size;
    switch (obj.cls) {
        case ShapeClass::circle:
            return dx * dx + dy * dy <= r * r;
        case ShapeClass::square:
            return std::max(std::fabs(dx), std::fabs(dy)) <= r;
        case ShapeClass::triangle: {
            // equilateral, apex up, inscribed in the circumradius
            const double ax = 0.0, ay = -r;
            const double bx = -0.8660254037844386 * r, by = 0.5 * r;
            const double cx = 0.8660254037844386 * r, cy = 0.5 * r;
            auto side = [&](double x1, double y1, double x2, double y2) {
                return (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
            };
            const double s1 = side(ax, ay, bx, by), s2 = side(bx, by, cx, cy), s3 = side(cx, cy, ax, ay);
            const bool neg = s1 < 0 || s2 < 0 || s3 < 0, pos = s1 > 0 || s2 > 0 || s3 > 0;
            return !(neg && pos);
        }
    }
    return false;
}

inline double shape_intensity(ShapeClass c) {
    switch (c) {
        case ShapeClass::circle: return 0.40;
        case ShapeClass::square: return 0.65;
        default: return 0.90;
    }
}

// ---------------------------------------------------------------------------
// Ground truth + rendering

struct SyntheticSequence {
    SequenceSpec spec;
    std::vector<Tensor> images;          // per frame [canvas, canvas]
    std::vector<Tensor> feature_levels;  // level l: [C, T, H_l, W_l]
    Tensor raw_finest;                   // [C, T, H0, W0]
    GroundTruthClip gt;                  // frames = T, masks at canvas/4

    std::size_t frames() const { return spec.frames; }

    std::vector<std::pair<std::size_t, std::size_t>> level_dims() const {
        std::vector<std::pair<std::size_t, std::size_t>> dims;
        for (std::size_t l = 0; l < spec.levels; ++l) {
            const std::size_t d = spec.canvas >> (2 + l);
            dims.push_back({d, d});
        }
        return dims;
    }
};

// Fixed random projection of 3x3 image patches into C channels, one
// projection per pyramid level plus one for the unencoded finest scale.
struct ToyBackbone {
    std::size_t channels = 64;
    std::size_t levels = 3;
    std::vector<Tensor> proj;  // levels entries + raw at the back, each [C, 10]

    static ToyBackbone init(std::size_t channels, std::size_t levels, std::uint64_t seed,
                            bool learnable = false) {
        ToyBackbone b;
        b.channels = channels;
        b.levels = levels;
        std::mt19937_64 rng(seed);
        for (std::size_t l = 0; l <= levels; ++l) {
            Tensor p = Tensor::randn({channels, 10}, rng, 1.0 / std::sqrt(10.0));
            if (learnable) p.set_requires_grad(true);
            b.proj.push_back(std::move(p));
        }
        return b;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        for (std::size_t l = 0; l < levels; ++l) fn(prefix + ".proj" + std::to_string(l), proj[l]);
        fn(prefix + ".proj_raw", proj[levels]);
    }

    // [h, w] image -> [C, h, w] features via the level's patch projection.
    Tensor features(const Tensor& level_image, std::size_t proj_index) const {
        const std::size_t h = level_image.dim(0), w = level_image.dim(1);
        Tensor patches{Shape{h * w, 10}};
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double* row = patches.data() + (y * w + x) * 10;
                std::size_t i = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx, ++i) {
                        const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                        row[i] = (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w))
                                     ? 0.0
                                     : level_image.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                    }
                row[9] = 1.0;
            }
        Tensor rows = linear(patches, proj[proj_index]);  // [h*w, C]
        std::vector<std::int64_t> idx(channels * h * w);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t pix = 0; pix < h * w; ++pix)
                idx[c * h * w + pix] = static_cast<std::int64_t>(pix * channels + c);
        return gather(rows, std::move(idx), Shape{channels, h, w});
    }
};

inline Tensor average_pool(const Tensor& image, std::size_t factor) {
    const std::size_t h = image.dim(0) / factor, w = image.dim(1) / factor;
    Tensor out{Shape{h, w}};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::size_t dy = 0; dy < factor; ++dy)
                for (std::size_t dx = 0; dx < factor; ++dx)
                    acc += image.at(y * factor + dy, x * factor + dx);
            out.at(y, x) = acc / static_cast<double>(factor * factor);
        }
    return out;
}

// Rasterizes one frame and the per-object visibility at sub-pixel resolution.
// Returns the image; fills per-object visible/total sample counts and the
// visible coverage per quarter-resolution mask cell.
inline Tensor rasterize_frame(const SequenceSpec& spec, std::size_t t,
                              std::vector<std::size_t>* visible_count,
                              std::vector<std::size_t>* total_count,
                              std::vector<Tensor>* mask_coverage,
                              std::vector<std::array<double, 4>>* visible_bounds) {
    const std::size_t canvas = spec.canvas, sub = 4;
    const std::size_t mask_dim = canvas / 4, cell = 4 * sub;  // subsamples per mask cell edge
    const std::size_t n = spec.objects.size();
    Tensor image = Tensor::zeros({canvas, canvas});
    visible_count->assign(n, 0);
    total_count->assign(n, 0);
    mask_coverage->assign(n, Tensor::zeros({mask_dim, mask_dim}));
    visible_bounds->assign(n, {2.0, 2.0, -1.0, -1.0});  // (min x, min y, max x, max y)

    for (std::size_t py = 0; py < canvas * sub; ++py) {
        for (std::size_t px = 0; px < canvas * sub; ++px) {
            const double x = (static_cast<double>(px) + 0.5) / static_cast<double>(canvas * sub);
            const double y = (static_cast<double>(py) + 0.5) / static_cast<double>(canvas * sub);
            // topmost object wins; later identities are in front
            long top = -1;
            for (std::size_t i = 0; i < n; ++i) {
                if (shape_contains(spec.objects[i], t, x, y)) {
                    (*total_count)[i]++;
                    top = static_cast<long>(i);
                }
            }
            if (top < 0) continue;
            const std::size_t i = static_cast<std::size_t>(top);
            (*visible_count)[i]++;
            image[(py / sub) * canvas + px / sub] += shape_intensity(spec.objects[i].cls);
            (*mask_coverage)[i][(py / cell) * mask_dim + px / cell] += 1.0;
            auto& b = (*visible_bounds)[i];
            b[0] = std::min(b[0], x);
            b[1] = std::min(b[1], y);
            b[2] = std::max(b[2], x);
            b[3] = std::max(b[3], y);
        }
    }
    const double inv_sub2 = 1.0 / static_cast<double>(sub * sub);
    for (std::size_t i = 0; i < image.size(); ++i) image[i] *= inv_sub2;
    const double inv_cell2 = 1.0 / static_cast<double>(cell * cell);
    for (Tensor& m : *mask_coverage)
        for (std::size_t i = 0; i < m.size(); ++i) m[i] *= inv_cell2;
    return image;
}

inline void validate_sequence_spec(const SequenceSpec& spec) {
    for (const ObjectSpec& obj : spec.objects) {
        for (std::size_t t = 0; t < spec.frames; ++t) {
            const double x = obj.x_at(t), y = obj.y_at(t);
            if (x - obj.size < 0.0 || x + obj.size > 1.0 || y - obj.size < 0.0 || y + obj.size > 1.0)
                throw std::invalid_argument("sequence spec: object " + std::to_string(obj.identity) +
                                            " leaves the canvas at frame " + std::to_string(t));
        }
    }
}

// Renders a fully specified sequence: images, ground truth, features.
inline SyntheticSequence render_sequence(const SequenceSpec& spec, const ToyBackbone& backbone) {
    validate_sequence_spec(spec);
    SyntheticSequence seq;
    seq.spec = spec;
    seq.gt.frames = spec.frames;
    const std::size_t n = spec.objects.size();
    for (std::size_t i = 0; i < n; ++i) {
        GroundTruthInstance inst;
        inst.identity = spec.objects[i].identity;
        inst.class_id = static_cast<std::size_t>(spec.objects[i].cls);
        inst.present.assign(spec.frames, false);
        inst.boxes.assign(spec.frames, {0, 0, 0, 0});
        inst.masks.assign(spec.frames, Tensor{});
        seq.gt.instances.push_back(std::move(inst));
    }

    const auto dims = seq.level_dims();
    for (std::size_t l = 0; l < spec.levels; ++l)
        seq.feature_levels.push_back(Tensor::zeros({backbone.channels, spec.frames, dims[l].first, dims[l].second}));
    seq.raw_finest = Tensor::zeros({backbone.channels, spec.frames, dims[0].first, dims[0].second});

    for (std::size_t t = 0; t < spec.frames; ++t) {
        std::vector<std::size_t> visible, total;
        std::vector<Tensor> coverage;
        std::vector<std::array<double, 4>> bounds;
        Tensor image = rasterize_frame(spec, t, &visible, &total, &coverage, &bounds);
        seq.images.push_back(image);

        for (std::size_t i = 0; i < n; ++i) {
            GroundTruthInstance& inst = seq.gt.instances[i];
            const double vis_frac = total[i] == 0 ? 0.0
                                                  : static_cast<double>(visible[i]) / static_cast<double>(total[i]);
            if (vis_frac < spec.visibility_threshold) continue;
            inst.present[t] = true;
            Tensor mask{coverage[i].shape()};
            for (std::size_t j = 0; j < mask.size(); ++j) mask[j] = coverage[i][j] >= 0.5 ? 1.0 : 0.0;
            inst.masks[t] = std::move(mask);
            const auto& b = bounds[i];
            inst.boxes[t] = {0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]), b[2] - b[0], b[3] - b[1]};
        }

        for (std::size_t l = 0; l < spec.levels; ++l) {
            Tensor level_image = average_pool(image, 4u << l);
            Tensor feat = backbone.features(level_image, l);
            const auto [lh, lw] = dims[l];
            for (std::size_t c = 0; c < backbone.channels; ++c)
                std::memcpy(seq.feature_levels[l].data() + (c * spec.frames + t) * lh * lw,
                            feat.data() + c * lh * lw, lh * lw * sizeof(double));
        }
        Tensor raw_feat = backbone.features(average_pool(image, 4), spec.levels);
        const auto [h0, w0] = dims[0];
        for (std::size_t c = 0; c < backbone.channels; ++c)
            std::memcpy(seq.raw_finest.data() + (c * spec.frames + t) * h0 * w0,
                        raw_feat.data() + c * h0 * w0, h0 * w0 * sizeof(double));
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Random sequence generation

struct SequenceDistribution {
    std::size_t frames = 6;
    std::size_t canvas = 64;
    std::size_t levels = 3;
    std::size_t min_objects = 2, max_objects = 3;
    double min_size = 0.10, max_size = 0.15;
    double max_speed = 0.04;        // per frame, normalized
    bool force_crossing = false;    // route trajectories through a shared point mid-sequence
    bool same_class = false;        // all objects share one class
    double visibility_threshold = 0.1;
    std::size_t num_classes = 3;
};

inline SyntheticSequence generate_sequence(std::uint64_t seed, const SequenceDistribution& dist,
                                           const ToyBackbone& backbone) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + 0x5851f42d4c957f2dull);
    std::uniform_int_distribution<std::size_t> count(dist.min_objects, dist.max_objects);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    SequenceSpec spec;
    spec.frames = dist.frames;
    spec.canvas = dist.canvas;
    spec.levels = dist.levels;
    spec.visibility_threshold = dist.visibility_threshold;

    const std::size_t n = count(rng);
    const std::size_t shared_class = std::uniform_int_distribution<std::size_t>(0, dist.num_classes - 1)(rng);
    const double tmid = 0.5 * static_cast<double>(dist.frames - 1);
    const double cross_x = 0.35 + 0.3 * unit(rng), cross_y = 0.35 + 0.3 * unit(rng);

    for (std::size_t i = 0; i < n; ++i) {
        ObjectSpec obj;
        obj.identity = i;
        obj.cls = static_cast<ShapeClass>(
            dist.same_class ? shared_class
                            : std::uniform_int_distribution<std::size_t>(0, dist.num_classes - 1)(rng));
        obj.size = dist.min_size + (dist.max_size - dist.min_size) * unit(rng);

        // rejection-sample a trajectory that stays within the margins
        for (int attempt = 0; attempt < 200; ++attempt) {
            const double speed = dist.max_speed * (0.5 + 0.5 * unit(rng));
            const double angle = 2.0 * M_PI * unit(rng);
            obj.vx = speed * std::cos(angle);
            obj.vy = speed * std::sin(angle);
            if (dist.force_crossing) {
                // pass through the shared point at mid-sequence
                obj.x0 = cross_x - obj.vx * tmid;
                obj.y0 = cross_y - obj.vy * tmid;
            } else {
                const double m = obj.size + 0.02;
                obj.x0 = m + (1.0 - 2.0 * m) * unit(rng);
                obj.y0 = m + (1.0 - 2.0 * m) * unit(rng);
            }
            bool ok = true;
            for (std::size_t t = 0; t < spec.frames && ok; ++t) {
                const double x = obj.x_at(t), y = obj.y_at(t);
                ok = x - obj.size >= 0.0 && x + obj.size <= 1.0 && y - obj.size >= 0.0 &&
                     y + obj.size <= 1.0;
            }
            if (ok) break;
            if (attempt == 199)
                throw std::runtime_error("generate_sequence: could not place object within the canvas");
        }
        spec.objects.push_back(obj);
    }
    return render_sequence(spec, backbone);
}

// Window views over a sequence.
inline FeatureClip clip_window(const SyntheticSequence& seq, std::size_t t0, std::size_t tau) {
    if (t0 + tau > seq.frames()) throw std::invalid_argument("clip_window: window out of range");
    FeatureClip clip;
    clip.channels = seq.feature_levels[0].dim(0);
    clip.frames = tau;
    clip.level_dims = seq.level_dims();
    for (std::size_t l = 0; l < seq.feature_levels.size(); ++l) {
        const auto [lh, lw] = clip.level_dims[l];
        Tensor lvl{Shape{clip.channels, tau, lh, lw}};
        for (std::size_t c = 0; c < clip.channels; ++c)
            for (std::size_t t = 0; t < tau; ++t)
                std::memcpy(lvl.data() + (c * tau + t) * lh * lw,
                            seq.feature_levels[l].data() + (c * seq.frames() + t0 + t) * lh * lw,
                            lh * lw * sizeof(double));
        clip.levels.push_back(std::move(lvl));
    }
    return clip;
}

inline Tensor raw_window(const SyntheticSequence& seq, std::size_t t0, std::size_t tau) {
    const std::size_t c = seq.raw_finest.dim(0), h = seq.raw_finest.dim(2), w = seq.raw_finest.dim(3);
    Tensor out{Shape{c, tau, h, w}};
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t t = 0; t < tau; ++t)
            std::memcpy(out.data() + (ch * tau + t) * h * w,
                        seq.raw_finest.data() + (ch * seq.frames() + t0 + t) * h * w,
                        h * w * sizeof(double));
    return out;
}

inline GroundTruthClip gt_window(const SyntheticSequence& seq, std::size_t t0, std::size_t tau) {
    GroundTruthClip gt;
    gt.frames = tau;
    for (const GroundTruthInstance& inst : seq.gt.instances) {
        GroundTruthInstance w;
        w.identity = inst.identity;
        w.class_id = inst.class_id;
        bool any = false;
        for (std::size_t t = 0; t < tau; ++t) {
            w.present.push_back(inst.present[t0 + t]);
            w.boxes.push_back(inst.boxes[t0 + t]);
            w.masks.push_back(inst.masks[t0 + t]);
            any = any || inst.present[t0 + t];
        }
        if (any) gt.instances.push_back(std::move(w));
    }
    return gt;
}

// ---------------------------------------------------------------------------
// On-disk form: spec + ground truth + images (PGM) + features (TSR1)

inline void save_pgm(const std::string& path, const Tensor& image) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_pgm: cannot open " + path);
    os << "P5\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
    for (std::size_t i = 0; i < image.size(); ++i)
        os.put(static_cast<char>(static_cast<unsigned char>(clamp(image[i], 0.0, 1.0) * 255.0 + 0.5)));
}

inline void save_sequence(const std::string& dir, const SyntheticSequence& seq) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream os(dir + "/spec.txt");
        os << "frames " << seq.spec.frames << "\ncanvas " << seq.spec.canvas << "\nlevels "
           << seq.spec.levels << "\nvisibility_threshold " << seq.spec.visibility_threshold << "\n";
        for (const ObjectSpec& o : seq.spec.objects) {
            char buf[256];
            std::snprintf(buf, sizeof(buf), "object %zu %zu %.17g %.17g %.17g %.17g %.17g\n", o.identity,
                          static_cast<std::size_t>(o.cls), o.x0, o.y0, o.vx, o.vy, o.size);
            os << buf;
        }
    }
    for (std::size_t t = 0; t < seq.images.size(); ++t) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s/frame_%03zu.pgm", dir.c_str(), t);
        save_pgm(name, seq.images[t]);
    }
    for (std::size_t l = 0; l < seq.feature_levels.size(); ++l)
        save_tensor(dir + "/features_l" + std::to_string(l) + ".tsr", seq.feature_levels[l]);
    save_tensor(dir + "/features_raw.tsr", seq.raw_finest);

    std::ofstream gt(dir + "/gt.txt");
    std::vector<Tensor> gt_masks;
    for (const GroundTruthInstance& inst : seq.gt.instances) {
        gt << "instance id=" << inst.identity << " class=" << inst.class_id << "\n";
        for (std::size_t t = 0; t < seq.gt.frames; ++t) {
            if (!inst.present[t]) continue;
            char buf[256];
            std::snprintf(buf, sizeof(buf), "present t=%zu box=%.17g,%.17g,%.17g,%.17g mask=%zu\n", t,
                          inst.boxes[t][0], inst.boxes[t][1], inst.boxes[t][2], inst.boxes[t][3],
                          gt_masks.size());
            gt << buf;
            gt_masks.push_back(inst.masks[t]);
        }
    }
    save_masks(dir + "/gt_masks.msk", gt_masks);
}

inline SyntheticSequence load_sequence(const std::string& dir) {
    SyntheticSequence seq;
    {
        std::ifstream is(dir + "/spec.txt");
        if (!is) throw std::runtime_error("load_sequence: cannot open " + dir + "/spec.txt");
        std::string key;
        while (is >> key) {
            if (key == "frames")
                is >> seq.spec.frames;
            else if (key == "canvas")
                is >> seq.spec.canvas;
            else if (key == "levels")
                is >> seq.spec.levels;
            else if (key == "visibility_threshold")
                is >> seq.spec.visibility_threshold;
            else if (key == "object") {
                ObjectSpec o;
                std::size_t cls;
                is >> o.identity >> cls >> o.x0 >> o.y0 >> o.vx >> o.vy >> o.size;
                o.cls = static_cast<ShapeClass>(cls);
                seq.spec.objects.push_back(o);
            }
        }
    }
    for (std::size_t l = 0; l < seq.spec.levels; ++l)
        seq.feature_levels.push_back(load_tensor(dir + "/features_l" + std::to_string(l) + ".tsr"));
    seq.raw_finest = load_tensor(dir + "/features_raw.tsr");

    seq.gt.frames = seq.spec.frames;
    auto gt_masks = load_masks(dir + "/gt_masks.msk");
    std::ifstream gt(dir + "/gt.txt");
    std::string line;
    GroundTruthInstance* inst = nullptr;
    while (std::getline(gt, line)) {
        if (line.empty()) continue;
        std::string tag;
        auto kv = detail::parse_kv_line(line, &tag);
        if (tag == "instance") {
            GroundTruthInstance gi;
            gi.identity = std::stoul(kv.at("id"));
            gi.class_id = std::stoul(kv.at("class"));
            gi.present.assign(seq.spec.frames, false);
            gi.boxes.assign(seq.spec.frames, {0, 0, 0, 0});
            gi.masks.assign(seq.spec.frames, Tensor{});
            seq.gt.instances.push_back(std::move(gi));
            inst = &seq.gt.instances.back();
        } else if (tag == "present") {
            if (!inst) throw std::runtime_error("gt.txt: present before instance");
            const std::size_t t = std::stoul(kv.at("t"));
            inst->present[t] = true;
            auto box = detail::parse_csv(kv.at("box"));
            inst->boxes[t] = std::array<double, 4>{box.at(0), box.at(1), box.at(2), box.at(3)};
            inst->masks[t] = gt_masks.at(std::stoul(kv.at("mask")));
        }
    }
    return seq;
}

}  // namespace deskvis
