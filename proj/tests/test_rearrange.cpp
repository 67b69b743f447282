#include <algorithm>

#include "doctest.h"
#include "oracle.hpp"
#include "sml/rearrange.hpp"

using namespace sml;

TEST_CASE("pixel_shuffle index mapping on a 2x2 cell") {
    Tensor x = Tensor::zeros({1, 4, 1, 1});
    x.data() = {1.0f, 2.0f, 3.0f, 4.0f};
    Tensor y = pixel_shuffle(x, 2);
    CHECK(y.dims() == Dims4{1, 1, 2, 2});
    CHECK(y.at(0, 0, 0, 0) == 1.0f);
    CHECK(y.at(0, 0, 0, 1) == 2.0f);
    CHECK(y.at(0, 0, 1, 0) == 3.0f);
    CHECK(y.at(0, 0, 1, 1) == 4.0f);

    Tensor back = pixel_unshuffle(y, 2);
    CHECK(oracle::bit_equal(back, x));
}

TEST_CASE("factor 1 is the identity") {
    Rng rng(91);
    Tensor x = oracle::random_tensor({2, 3, 4, 5}, rng);
    CHECK(oracle::bit_equal(pixel_shuffle(x, 1), x));
    CHECK(oracle::bit_equal(pixel_unshuffle(x, 1), x));
}

TEST_CASE("shuffle preserves the multiset of values") {
    Rng rng(93);
    Tensor x = oracle::random_tensor({2, 16, 3, 5}, rng);
    Tensor y = pixel_shuffle(x, 4);
    std::vector<float> a = x.data(), b = y.data();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
}

TEST_CASE("round trips are bit-exact both ways") {
    Rng rng(97);
    for (int r : {2, 4}) {
        Tensor x = oracle::random_tensor({2, r * r * 3, 4, 3}, rng);
        CHECK(oracle::bit_equal(pixel_unshuffle(pixel_shuffle(x, r), r), x));
        Tensor y = oracle::random_tensor({2, 3, 4 * r, 3 * r}, rng);
        CHECK(oracle::bit_equal(pixel_shuffle(pixel_unshuffle(y, r), r), y));
    }
}

TEST_CASE("rearrangements are norm preserving") {
    Rng rng(101);
    Tensor x = oracle::random_tensor({1, 16, 4, 4}, rng);
    auto sumsq = [](const Tensor& t) {
        double s = 0.0;
        for (float v : t.data()) s += double(v) * v;
        return s;
    };
    CHECK(sumsq(pixel_shuffle(x, 4)) == doctest::Approx(sumsq(x)).epsilon(1e-12));
    CHECK(sumsq(pixel_unshuffle(x, 2)) == doctest::Approx(sumsq(x)).epsilon(1e-12));
}

TEST_CASE("divisibility violations are rejected") {
    Tensor x = Tensor::zeros({1, 3, 4, 4});
    CHECK_THROWS_AS(pixel_shuffle(x, 2), ConfigError);
    Tensor y = Tensor::zeros({1, 3, 5, 4});
    CHECK_THROWS_AS(pixel_unshuffle(y, 2), ConfigError);
}
