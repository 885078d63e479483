#include <catch2/catch_amalgamated.hpp>

#include "deskvis/tracker.hpp"

#include <filesystem>
#include <random>

using namespace deskvis;

namespace {

Tensor blob(std::size_t h, std::size_t w, std::size_t cy, std::size_t cx, double v = 1.0) {
    Tensor m = Tensor::zeros({h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            if (std::max<double>(std::llabs(long(y) - long(cy)), std::llabs(long(x) - long(cx))) <= 1)
                m.at(y, x) = v;
    return m;
}

ClipInstance make_instance(std::size_t id, std::size_t cls, double score, std::vector<Tensor> masks) {
    ClipInstance inst;
    inst.local_id = id;
    inst.class_id = cls;
    inst.score = score;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        inst.frame_scores.push_back(score);
        inst.class_probs.push_back({0.1, 0.1, 0.1});
        inst.boxes.push_back({0.5, 0.5, 0.2, 0.2});
    }
    inst.masks = std::move(masks);
    return inst;
}

}  // namespace

TEST_CASE("volumetric soft iou basics") {
    Tensor a = blob(6, 6, 2, 2);
    Tensor b = blob(6, 6, 2, 2);
    CHECK(volumetric_soft_iou({a}, {b}) == Catch::Approx(1.0));

    Tensor c = blob(6, 6, 4, 4);
    Tensor far = Tensor::zeros({6, 6});
    far.at(0, 5) = 1.0;
    CHECK(volumetric_soft_iou({blob(6, 6, 0, 0)}, {far}) == Catch::Approx(0.0));

    Tensor half = Tensor::full({2, 2}, 0.5);
    Tensor full = Tensor::full({2, 2}, 1.0);
    CHECK(volumetric_soft_iou({half}, {full}) == Catch::Approx(0.5));

    // both empty -> 0 by convention
    CHECK(volumetric_soft_iou({Tensor::zeros({3, 3})}, {Tensor::zeros({3, 3})}) == 0.0);

    CHECK_THROWS_AS(volumetric_soft_iou({Tensor::zeros({2, 2})}, {Tensor::zeros({3, 3})}),
                    std::invalid_argument);
}

TEST_CASE("volumetric soft iou properties") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Tensor> a, b;
        for (int t = 0; t < 2; ++t) {
            a.push_back(Tensor::uniform({5, 5}, rng, 0.0, 1.0));
            b.push_back(Tensor::uniform({5, 5}, rng, 0.0, 1.0));
        }
        const double ab = volumetric_soft_iou(a, b);
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
        CHECK(ab == Catch::Approx(volumetric_soft_iou(b, a)));

        // shrinking a mask that sits inside the other only drains the
        // intersection, so the overlap cannot grow
        std::vector<Tensor> sub, shrunk;
        for (const Tensor& m : b) {
            Tensor s = m.clone();
            for (std::size_t i = 0; i < s.size(); ++i) s[i] *= 0.9;
            sub.push_back(s);
            Tensor s2 = s.clone();
            for (std::size_t i = 0; i < s2.size(); ++i) s2[i] *= 0.8;
            shrunk.push_back(s2);
        }
        const double sub_iou = volumetric_soft_iou(sub, b);
        CHECK(volumetric_soft_iou(shrunk, b) <= sub_iou + 1e-12);
    }
    // identical masks give exactly 1
    std::vector<Tensor> same{Tensor::uniform({4, 4}, rng, 0.1, 0.9)};
    CHECK(std::fabs(volumetric_soft_iou(same, same) - 1.0) < 1e-12);
}

TEST_CASE("stitch cost composes the three cues") {
    StitchWeights w;
    Tensor m = blob(6, 6, 2, 2);
    // same class, identical masks, equal scores
    CHECK(stitch_cost({m}, 1, 0.8, {m}, 1, 0.8, w) == Catch::Approx(-2.0));
    // different class, disjoint masks, scores 0.9 vs 0.7
    Tensor far = Tensor::zeros({6, 6});
    far.at(5, 5) = 1.0;
    CHECK(stitch_cost({blob(6, 6, 0, 0)}, 0, 0.9, {far}, 1, 0.7, w) == Catch::Approx(0.2));
    // mask-only reduction
    StitchWeights mask_only{1.0, 0.0, 0.0, std::nullopt};
    CHECK(stitch_cost({m}, 0, 0.9, {m}, 1, 0.1, mask_only) == Catch::Approx(-1.0));

    CHECK_THROWS_AS(stitch_cost({}, 0, 0.5, {}, 0, 0.5, w), std::invalid_argument);
}

TEST_CASE("first clip opens an identity per instance") {
    TrackStore store;
    ClipResult clip;
    clip.first_frame = 0;
    clip.last_frame = 2;
    clip.instances.push_back(make_instance(0, 0, 0.9, {blob(6, 6, 1, 1), blob(6, 6, 1, 2), blob(6, 6, 1, 3)}));
    clip.instances.push_back(make_instance(1, 1, 0.8, {blob(6, 6, 4, 4), blob(6, 6, 4, 3), blob(6, 6, 4, 2)}));
    stitch(store, clip, {});
    CHECK(store.tracks.size() == 2);
    CHECK(store.next_identity == 2);
    CHECK(store.frontier_end == 3);
}

TEST_CASE("identical instances keep one identity across clips") {
    TrackStore store;
    ClipResult a;
    a.first_frame = 0;
    a.last_frame = 2;
    a.instances.push_back(make_instance(0, 2, 0.9, {blob(8, 8, 2, 2), blob(8, 8, 2, 3), blob(8, 8, 2, 4)}));
    stitch(store, a, {});

    ClipResult b;
    b.first_frame = 2;
    b.last_frame = 4;
    b.instances.push_back(make_instance(0, 2, 0.9, {blob(8, 8, 2, 4), blob(8, 8, 2, 5), blob(8, 8, 2, 6)}));
    stitch(store, b, {});

    REQUIRE(store.tracks.size() == 1);
    CHECK(store.tracks[0].records.size() == 5);
    CHECK(store.frontier_end == 5);
    // overlap frame keeps the first clip's record
    CHECK(store.tracks[0].records[2].mask.at(2, 4) == 1.0);
}

TEST_CASE("crossing instances with distinct masks keep identities via the mask cue") {
    TrackStore store;
    ClipResult a;
    a.first_frame = 0;
    a.last_frame = 1;
    a.instances.push_back(make_instance(0, 0, 0.9, {blob(8, 8, 2, 2), blob(8, 8, 2, 4)}));
    a.instances.push_back(make_instance(1, 0, 0.9, {blob(8, 8, 6, 6), blob(8, 8, 6, 4)}));
    stitch(store, a, {});

    // second clip: instance order swapped; masks continue the trajectories
    ClipResult b;
    b.first_frame = 1;
    b.last_frame = 2;
    b.instances.push_back(make_instance(0, 0, 0.9, {blob(8, 8, 6, 4), blob(8, 8, 6, 2)}));
    b.instances.push_back(make_instance(1, 0, 0.9, {blob(8, 8, 2, 4), blob(8, 8, 2, 6)}));
    stitch(store, b, {});

    REQUIRE(store.tracks.size() == 2);
    // identity 0 continued by the spatially matching instance (local id 1)
    CHECK(store.tracks[0].records[2].mask.at(2, 6) == 1.0);
    CHECK(store.tracks[1].records[2].mask.at(6, 2) == 1.0);
}

TEST_CASE("identity count grows only by unmatched instances") {
    TrackStore store;
    ClipResult a;
    a.first_frame = 0;
    a.last_frame = 1;
    a.instances.push_back(make_instance(0, 0, 0.9, {blob(8, 8, 2, 2), blob(8, 8, 2, 3)}));
    stitch(store, a, {});
    CHECK(store.next_identity == 1);

    ClipResult b;
    b.first_frame = 1;
    b.last_frame = 2;
    b.instances.push_back(make_instance(0, 0, 0.9, {blob(8, 8, 2, 3), blob(8, 8, 2, 4)}));
    b.instances.push_back(make_instance(1, 1, 0.7, {blob(8, 8, 6, 6), blob(8, 8, 6, 5)}));
    stitch(store, b, {});
    CHECK(store.next_identity == 2);  // one match, one new
    CHECK(store.tracks.size() == 2);
}

TEST_CASE("stitch rejects non-overlapping spans") {
    TrackStore store;
    ClipResult a;
    a.first_frame = 0;
    a.last_frame = 1;
    a.instances.push_back(make_instance(0, 0, 0.9, {blob(4, 4, 1, 1), blob(4, 4, 1, 2)}));
    stitch(store, a, {});

    ClipResult gap;
    gap.first_frame = 3;
    gap.last_frame = 4;
    CHECK_THROWS_AS(stitch(store, gap, {}), std::invalid_argument);
}

TEST_CASE("stitch assignment is invariant to common sigma scaling") {
    auto build_store = [](const StitchWeights& w) {
        TrackStore store;
        ClipResult a;
        a.first_frame = 0;
        a.last_frame = 1;
        a.instances.push_back(make_instance(0, 0, 0.9, {blob(8, 8, 2, 2), blob(8, 8, 2, 3)}));
        a.instances.push_back(make_instance(1, 1, 0.6, {blob(8, 8, 5, 5), blob(8, 8, 5, 4)}));
        stitch(store, a, w);
        ClipResult b;
        b.first_frame = 1;
        b.last_frame = 2;
        b.instances.push_back(make_instance(0, 1, 0.65, {blob(8, 8, 5, 4), blob(8, 8, 5, 3)}));
        b.instances.push_back(make_instance(1, 0, 0.88, {blob(8, 8, 2, 3), blob(8, 8, 2, 4)}));
        stitch(store, b, w);
        std::vector<std::size_t> sizes;
        for (const auto& t : store.tracks) sizes.push_back(t.records.size());
        return sizes;
    };
    StitchWeights unit{1.0, 1.0, 1.0, std::nullopt};
    StitchWeights scaled{2.5, 2.5, 2.5, std::nullopt};
    CHECK(build_store(unit) == build_store(scaled));
}

TEST_CASE("select_trajectories ranks by per-class mean score") {
    // 1 slot, 2 classes + no-object, constant probabilities
    Tensor logits{Shape{2, 3}};
    for (std::size_t t = 0; t < 2; ++t) {
        logits.at(t, 0) = std::log(0.8);
        logits.at(t, 1) = std::log(0.1);
        logits.at(t, 2) = std::log(0.1);
    }
    auto picks = select_trajectories(logits, 1, 1);
    REQUIRE(picks.size() == 1);
    CHECK(picks[0].slot == 0);
    CHECK(picks[0].class_id == 0);
    CHECK(picks[0].score == Catch::Approx(0.8));
}

TEST_CASE("select_trajectories assigns multiple labels when k exceeds slots") {
    std::mt19937_64 rng(5);
    Tensor logits = Tensor::randn({4, 4}, rng);  // 2 frames x 2 slots, 3 classes + no-object
    auto picks = select_trajectories(logits, 4, 2);
    REQUIRE(picks.size() == 4);
    std::map<std::size_t, int> count;
    for (const auto& p : picks) count[p.slot]++;
    bool multi = false;
    for (auto [slot, n] : count) multi = multi || n > 1;
    CHECK(multi);  // k=4 > 2 slots forces a slot to carry two labels

    // output size is min(k, slots * classes)
    CHECK(select_trajectories(logits, 100, 2).size() == 6);
}

TEST_CASE("select_trajectories matches hand-computed means") {
    // 3 slots, 1 frame, 2 classes
    Tensor logits{Shape{3, 3}};
    const double table[3][3] = {{2.0, 0.0, 0.0}, {0.0, 1.5, 0.0}, {0.5, 0.5, 0.5}};
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t c = 0; c < 3; ++c) logits.at(s, c) = table[s][c];
    auto picks = select_trajectories(logits, 6, 3);
    Tensor probs = softmax_values(logits, 1);
    CHECK(picks[0].slot == 0);
    CHECK(picks[0].class_id == 0);
    CHECK(picks[0].score == Catch::Approx(probs.at(0, 0)));
    CHECK(picks[1].slot == 1);
    CHECK(picks[1].class_id == 1);
}

TEST_CASE("clip manifest and track files round trip") {
    namespace fs = std::filesystem;
    const std::string dir = fs::temp_directory_path() / "deskvis_tracker_test";
    fs::create_directories(dir);

    ClipResult clip;
    clip.first_frame = 0;
    clip.last_frame = 1;
    clip.instances.push_back(make_instance(0, 2, 0.75, {blob(4, 4, 1, 1), blob(4, 4, 1, 2)}));
    std::vector<Tensor> flat;
    for (const auto& m : clip.instances[0].masks) flat.push_back(m);
    save_masks(dir + "/clip0.msk", flat);
    {
        std::ofstream os(dir + "/clips.txt");
        write_clip_manifest(os, {clip}, {"clip0.msk"});
    }
    auto clips = read_clip_manifest(dir + "/clips.txt", dir);
    REQUIRE(clips.size() == 1);
    REQUIRE(clips[0].instances.size() == 1);
    CHECK(clips[0].instances[0].class_id == 2);
    CHECK(clips[0].instances[0].score == 0.75);
    CHECK(clips[0].instances[0].masks[1].at(1, 2) == 1.0);

    TrackStore store;
    stitch(store, clip, {});
    write_tracks(dir + "/tracks", store);
    TrackStore back = read_tracks(dir + "/tracks");
    REQUIRE(back.tracks.size() == 1);
    CHECK(back.tracks[0].class_id == 2);
    CHECK(back.tracks[0].records.size() == 2);
    CHECK(back.frontier_end == 2);
    fs::remove_all(dir);
}
