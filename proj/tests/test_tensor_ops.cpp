#include <cstring>

#include "doctest.h"
#include "oracle.hpp"
#include "sml/init.hpp"
#include "sml/ops.hpp"

using namespace sml;

namespace {

ConvParams ones_kernel3(int pad, int dil) {
    ConvParams p;
    p.weight = Tensor::full({1, 1, 3, 3}, 1.0f);
    p.pad_h = p.pad_w = pad;
    p.dil_h = p.dil_w = dil;
    return p;
}

}  // namespace

TEST_CASE("conv2d counts overlapped ones") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor y = conv2d(x, ones_kernel3(1, 1));
    CHECK(y.dims() == Dims4{1, 1, 3, 3});
    CHECK(y.at(0, 0, 1, 1) == doctest::Approx(9.0f));
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(4.0f));
    CHECK(y.at(0, 0, 2, 2) == doctest::Approx(4.0f));
}

TEST_CASE("conv2d dilation (2,2) covers a 5x5 input from the center") {
    Tensor x = Tensor::full({1, 1, 5, 5}, 1.0f);
    Tensor y = conv2d(x, ones_kernel3(2, 2));
    CHECK(y.dims() == Dims4{1, 1, 5, 5});
    CHECK(y.at(0, 0, 2, 2) == doctest::Approx(9.0f));
}

TEST_CASE("conv2d matches the loop oracle on random instances") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        ConvParams p;
        const int groups = trial % 3 == 0 ? 2 : 1;
        const int cin = groups * rng.uniform_int(1, 3);
        const int cout = groups * rng.uniform_int(1, 3);
        const int kh = rng.uniform_int(1, 3), kw = rng.uniform_int(1, 3);
        p.weight = Tensor::uniform({cout, cin / groups, kh, kw}, -1.0f, 1.0f, rng);
        if (trial % 2 == 0) p.bias = Tensor::uniform({1, cout, 1, 1}, -1.0f, 1.0f, rng);
        p.groups = groups;
        p.stride_h = rng.uniform_int(1, 2);
        p.stride_w = rng.uniform_int(1, 2);
        p.dil_h = rng.uniform_int(1, 3);
        p.dil_w = rng.uniform_int(1, 3);
        p.pad_h = (kh - 1) * p.dil_h;
        p.pad_w = (kw - 1) * p.dil_w;
        Tensor x = oracle::random_tensor({2, cin, rng.uniform_int(4, 8), rng.uniform_int(4, 8)},
                                         rng);
        CHECK(oracle::max_abs_diff(conv2d(x, p), oracle::conv2d_reference(x, p)) < 1e-5);
    }
}

TEST_CASE("conv2d anisotropic dilation (3,1) matches the oracle") {
    Rng rng(11);
    ConvParams p;
    p.weight = Tensor::uniform({2, 3, 3, 3}, -1.0f, 1.0f, rng);
    p.dil_h = 3;
    p.dil_w = 1;
    p.pad_h = 3;
    p.pad_w = 1;
    Tensor x = oracle::random_tensor({2, 3, 8, 8}, rng);
    CHECK(oracle::max_abs_diff(conv2d(x, p), oracle::conv2d_reference(x, p)) < 1e-5);
}

TEST_CASE("conv2d 1x1 identity weights with groups=C is the identity map") {
    Rng rng(3);
    const int c = 4;
    ConvParams p;
    p.weight = Tensor::full({c, 1, 1, 1}, 1.0f);
    p.groups = c;
    Tensor x = oracle::random_tensor({2, c, 5, 6}, rng);
    CHECK(oracle::bit_equal(conv2d(x, p), x));
}

TEST_CASE("conv2d forward is bit-deterministic across calls") {
    Rng rng(5);
    ConvParams p;
    p.weight = Tensor::uniform({4, 3, 3, 3}, -1.0f, 1.0f, rng);
    p.pad_h = p.pad_w = 1;
    Tensor x = oracle::random_tensor({2, 3, 9, 9}, rng);
    CHECK(oracle::bit_equal(conv2d(x, p), conv2d(x, p)));
}

TEST_CASE("conv2d rejects bad geometry") {
    Rng rng(1);
    ConvParams p;
    p.weight = Tensor::uniform({2, 3, 3, 3}, -1.0f, 1.0f, rng);
    Tensor wrong_c = Tensor::zeros({1, 2, 8, 8});
    CHECK_THROWS_AS(conv2d(wrong_c, p), ConfigError);
    Tensor tiny = Tensor::zeros({1, 3, 2, 2});
    CHECK_THROWS_AS(conv2d(tiny, p), ConfigError);  // non-positive output dims
}

TEST_CASE("batch_norm collapses a constant channel to beta") {
    BatchNormParams p = make_batch_norm(2);
    p.beta.data()[0] = 0.7f;
    p.beta.data()[1] = -0.2f;
    Tensor x = Tensor::full({3, 2, 4, 4}, 5.0f);
    Tensor y = batch_norm(x, p, true);
    for (int n = 0; n < 3; ++n) {
        CHECK(y.at(n, 0, 1, 1) == doctest::Approx(0.7f).epsilon(1e-4));
        CHECK(y.at(n, 1, 2, 2) == doctest::Approx(-0.2f).epsilon(1e-4));
    }
}

TEST_CASE("batch_norm is near identity on zero-mean unit-var input") {
    // build a channel that is exactly zero-mean unit-var
    Tensor x = Tensor::zeros({1, 1, 2, 2});
    x.data() = {1.0f, -1.0f, 1.0f, -1.0f};
    BatchNormParams p = make_batch_norm(1);
    Tensor y = batch_norm(x, p, true);
    for (int i = 0; i < 4; ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-4));
}

TEST_CASE("batch_norm output has zero mean and unit variance per channel") {
    Rng rng(13);
    Tensor x = oracle::random_tensor({4, 3, 8, 8}, rng, -2.0f, 3.0f);
    BatchNormParams p = make_batch_norm(3);
    Tensor y = batch_norm(x, p, true);
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sumsq = 0.0;
        int64_t cnt = 0;
        for (int n = 0; n < 4; ++n)
            for (int h = 0; h < 8; ++h)
                for (int w = 0; w < 8; ++w) {
                    sum += y.at(n, c, h, w);
                    sumsq += double(y.at(n, c, h, w)) * y.at(n, c, h, w);
                    ++cnt;
                }
        const double mean = sum / cnt;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(sumsq / cnt - mean * mean == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("batch_norm eval mode uses running stats and never mutates them") {
    Rng rng(17);
    BatchNormParams p = make_batch_norm(2);
    Tensor x1 = oracle::random_tensor({2, 2, 4, 4}, rng);
    batch_norm(x1, p, true);
    const std::vector<float> rm = p.running_mean.data();
    const std::vector<float> rv = p.running_var.data();
    Tensor x2 = oracle::random_tensor({2, 2, 4, 4}, rng);
    batch_norm(x2, p, false);
    CHECK(p.running_mean.data() == rm);
    CHECK(p.running_var.data() == rv);
}

TEST_CASE("relu and sigmoid basics") {
    Tensor x = Tensor::zeros({1, 1, 1, 3});
    x.data() = {-1.0f, 0.0f, 2.0f};
    Tensor r = relu(x);
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[1] == 0.0f);
    CHECK(r.data()[2] == 2.0f);

    Tensor z = Tensor::zeros({1, 1, 1, 1});
    CHECK(sigmoid(z).scalar() == doctest::Approx(0.5f));

    Rng rng(19);
    Tensor u = oracle::random_tensor({1, 1, 4, 4}, rng, -5.0f, 5.0f);
    Tensor su = sigmoid(u);
    Tensor nu = scale(u, -1.0f);
    Tensor snu = sigmoid(nu);
    for (int i = 0; i < 16; ++i)
        CHECK(su.data()[i] + snu.data()[i] == doctest::Approx(1.0f).epsilon(1e-6));
}

TEST_CASE("pool examples") {
    Tensor ones = Tensor::full({1, 3, 4, 4}, 1.0f);
    Tensor g = avg_pool_spatial(ones);
    CHECK(g.dims() == Dims4{1, 3, 1, 1});
    for (int c = 0; c < 3; ++c) CHECK(g.at(0, c, 0, 0) == doctest::Approx(1.0f));

    Tensor x = Tensor::zeros({1, 3, 1, 1});
    x.data() = {1.0f, 5.0f, 3.0f};
    CHECK(max_pool_channels(x, 1).at(0, 0, 0, 0) == doctest::Approx(5.0f));

    Tensor q = Tensor::zeros({1, 4, 1, 1});
    q.data() = {1.0f, 3.0f, 5.0f, 7.0f};
    Tensor pg = avg_pool_channels(q, 2);
    CHECK(pg.at(0, 0, 0, 0) == doctest::Approx(2.0f));
    CHECK(pg.at(0, 1, 0, 0) == doctest::Approx(6.0f));

    CHECK_THROWS_AS(avg_pool_channels(q, 3), ConfigError);
}

TEST_CASE("bilinear_resize half-pixel example and identities") {
    Tensor x = Tensor::zeros({1, 1, 1, 2});
    x.data() = {0.0f, 2.0f};
    Tensor y = bilinear_resize(x, 1, 4, false);
    CHECK(y.data()[0] == doctest::Approx(0.0f));
    CHECK(y.data()[1] == doctest::Approx(0.5f));
    CHECK(y.data()[2] == doctest::Approx(1.5f));
    CHECK(y.data()[3] == doctest::Approx(2.0f));

    Rng rng(23);
    Tensor r = oracle::random_tensor({2, 3, 5, 7}, rng);
    CHECK(oracle::bit_equal(bilinear_resize(r, 5, 7), r));

    Tensor c = Tensor::full({1, 2, 4, 4}, 3.25f);
    Tensor up = bilinear_resize(c, 16, 16);
    Tensor down = bilinear_resize(up, 4, 4);
    CHECK(oracle::bit_equal(down, c));
}

TEST_CASE("concat_channels shape, identity, and slice recovery") {
    Rng rng(29);
    Tensor a = oracle::random_tensor({1, 2, 4, 4}, rng);
    Tensor b = oracle::random_tensor({1, 3, 4, 4}, rng);
    Tensor cat = concat_channels({a, b});
    CHECK(cat.dims() == Dims4{1, 5, 4, 4});
    CHECK(oracle::bit_equal(concat_channels({a}), a));
    CHECK(oracle::bit_equal(slice_channels(cat, 0, 2), a));
    CHECK(oracle::bit_equal(slice_channels(cat, 2, 3), b));

    Tensor bad = Tensor::zeros({1, 2, 3, 4});
    CHECK_THROWS_AS(concat_channels({a, bad}), ConfigError);
}

TEST_CASE("cross_entropy frozen values") {
    Tensor logits = Tensor::zeros({1, 2, 1, 1});
    LabelMap lab(1, 1, 1, 0);
    CHECK(cross_entropy(logits, lab).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    LabelMap ignored(1, 1, 1, 255);
    CHECK(cross_entropy(logits, ignored).scalar() == 0.0f);

    Tensor l3 = Tensor::zeros({1, 3, 1, 1});
    l3.data() = {2.0f, 0.0f, 0.0f};
    LabelMap lab3(1, 1, 1, 0);
    const double expected = oracle::cross_entropy_reference({2.0, 0.0, 0.0}, 0);
    CHECK(expected == doctest::Approx(0.2395).epsilon(1e-3));
    CHECK(cross_entropy(l3, lab3).scalar() == doctest::Approx(expected).epsilon(1e-5));

    LabelMap bad(1, 1, 1, 7);
    CHECK_THROWS_AS(cross_entropy(l3, bad), DataError);
}

TEST_CASE("all forward ops preserve finiteness on random inputs") {
    Rng rng(31);
    Tensor x = oracle::random_tensor({2, 4, 8, 8}, rng, -3.0f, 3.0f);
    ConvParams cp = make_conv(4, 6, 3, 1, 2, rng, true);
    BatchNormParams bn = make_batch_norm(6);
    Tensor y = relu(batch_norm(conv2d(x, cp), bn, true));
    CHECK(y.all_finite());
    CHECK(sigmoid(y).all_finite());
    CHECK(bilinear_resize(y, 13, 3).all_finite());
}
