#include <catch2/catch_amalgamated.hpp>

#include "deskvis/serial.hpp"

#include <random>
#include <sstream>

using namespace deskvis;

TEST_CASE("tensor files round-trip bit-exactly") {
    std::mt19937_64 rng(3);
    for (const Shape& shape : {Shape{}, Shape{4}, Shape{2, 3, 5}}) {
        Tensor t = Tensor::randn(shape, rng);
        std::stringstream ss;
        write_tensor(ss, t);
        Tensor back = read_tensor(ss);
        REQUIRE(back.shape() == t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t a, b;
            std::memcpy(&a, &t[i], 8);
            std::memcpy(&b, &back[i], 8);
            CHECK(a == b);
        }
    }
}

TEST_CASE("tensor reader rejects bad magic") {
    std::stringstream ss;
    ss << "NOPE1234";
    CHECK_THROWS_AS(read_tensor(ss), std::runtime_error);
}

TEST_CASE("soft mask files round-trip") {
    std::mt19937_64 rng(5);
    std::vector<Tensor> masks;
    masks.push_back(Tensor::uniform({4, 6}, rng, 0.0, 1.0));
    masks.push_back(Tensor::uniform({3, 3}, rng, 0.0, 1.0));
    std::stringstream ss;
    write_masks(ss, masks);
    auto back = read_masks(ss);
    REQUIRE(back.size() == 2);
    for (std::size_t k = 0; k < 2; ++k) {
        REQUIRE(back[k].shape() == masks[k].shape());
        for (std::size_t i = 0; i < masks[k].size(); ++i) {
            // stored as f32: round-trip must preserve the f32 value exactly
            const float f = static_cast<float>(masks[k][i]);
            CHECK(back[k][i] == static_cast<double>(f));
        }
    }
}

TEST_CASE("thresholded mask files round-trip") {
    std::mt19937_64 rng(9);
    std::vector<Tensor> masks = {Tensor::uniform({5, 7}, rng, 0.0, 1.0)};
    std::stringstream ss;
    write_masks_binary(ss, masks);
    auto back = read_masks_binary(ss);
    REQUIRE(back.size() == 1);
    for (std::size_t i = 0; i < masks[0].size(); ++i)
        CHECK(back[0][i] == (masks[0][i] >= 0.5 ? 1.0 : 0.0));
}
