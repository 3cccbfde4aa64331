#include "doctest.h"

#include <vector>

#include "mnad/conv.hpp"
#include "mnad/gradcheck.hpp"

using namespace mnad;

namespace {

// Direct-definition references, deliberately structured unlike the kernels.
std::vector<double> conv_ref(const Tensor<double>& x, const Tensor<double>& w,
                             const Tensor<double>& b, int64_t s, int64_t p) {
    const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), iw = x.dim(3);
    const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = (h + 2 * p - kh) / s + 1, wo = (iw + 2 * p - kw) / s + 1;
    std::vector<double> out(static_cast<size_t>(n * co * ho * wo));
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t c = 0; c < co; ++c)
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox) {
                    double acc = b.data()[static_cast<size_t>(c)];
                    for (int64_t ic = 0; ic < ci; ++ic)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t iy = oy * s - p + ky, ix = ox * s - p + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= iw)
                                    continue;
                                acc += w.data()[static_cast<size_t>(((c * ci + ic) * kh + ky) * kw + kx)] *
                                       x.data()[static_cast<size_t>(((ni * ci + ic) * h + iy) * iw + ix)];
                            }
                    out[static_cast<size_t>(((ni * co + c) * ho + oy) * wo + ox)] = acc;
                }
    return out;
}

std::vector<double> tconv_ref(const Tensor<double>& x, const Tensor<double>& w,
                              const Tensor<double>& b, int64_t s, int64_t p) {
    const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), iw = x.dim(3);
    const int64_t co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = (h - 1) * s - 2 * p + kh, wo = (iw - 1) * s - 2 * p + kw;
    std::vector<double> out(static_cast<size_t>(n * co * ho * wo));
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t c = 0; c < co; ++c)
            for (size_t i = 0; i < static_cast<size_t>(ho * wo); ++i)
                out[static_cast<size_t>((ni * co + c) * ho * wo) + i] =
                    b.data()[static_cast<size_t>(c)];
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t iy = 0; iy < h; ++iy)
                for (int64_t ix = 0; ix < iw; ++ix) {
                    const double v =
                        x.data()[static_cast<size_t>(((ni * ci + ic) * h + iy) * iw + ix)];
                    for (int64_t c = 0; c < co; ++c)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t oy = iy * s - p + ky, ox = ix * s - p + kx;
                                if (oy < 0 || oy >= ho || ox < 0 || ox >= wo)
                                    continue;
                                out[static_cast<size_t>(((ni * co + c) * ho + oy) * wo + ox)] +=
                                    v * w.data()[static_cast<size_t>(
                                            ((ic * co + c) * kh + ky) * kw + kx)];
                            }
                }
    return out;
}

void check_close(const std::vector<double>& got, const std::vector<double>& want,
                 double tol = 1e-12) {
    REQUIRE(got.size() == want.size());
    double worst = 0;
    for (size_t i = 0; i < got.size(); ++i)
        worst = std::max(worst, std::abs(got[i] - want[i]));
    CHECK_MESSAGE(worst <= tol, "max abs deviation ", worst);
}

struct Rand {
    SplitMix64 rng{77};
    Tensor<double> operator()(Shape s) {
        return Tensor<double>::uniform(std::move(s), rng, -1.0, 1.0);
    }
};

} // namespace

TEST_CASE("convolution of all-ones is the tap count") {
    // 4x4 ones, 3x3 ones kernel, no padding: every window sums 9 entries
    Tensor<double> x(Shape{1, 1, 4, 4}, 1.0);
    Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
    Tensor<double> b(Shape{1}, 0.0);
    Tensor<double> out = conv2d(x, w, b, 1, 0);
    CHECK(out.shape() == Shape{1, 1, 2, 2});
    for (double v : out.data())
        CHECK(v == 9.0);
}

TEST_CASE("convolution matches the direct definition on every code path") {
    Rand rnd;
    struct Case {
        Shape xs, ws;
        int64_t s, p;
    };
    const Case cases[] = {
        {{2, 3, 6, 7}, {4, 3, 3, 3}, 1, 1},    // fused 3x3 path
        {{1, 1, 5, 2}, {2, 1, 3, 3}, 1, 1},    // narrow output, edge columns touch
        {{1, 2, 5, 1}, {2, 2, 3, 3}, 1, 1},    // single output column
        {{1, 2, 7, 9}, {3, 2, 3, 3}, 2, 1},    // stride-2 split
        {{1, 2, 8, 8}, {3, 2, 4, 4}, 2, 1},    // stride-2, even kernel
        {{1, 2, 11, 13}, {2, 2, 5, 5}, 3, 2},  // generic stride
        {{2, 1, 4, 4}, {1, 1, 1, 1}, 1, 0},    // pointwise
    };
    for (const auto& c : cases) {
        CAPTURE(shape_str(c.xs));
        Tensor<double> x = rnd(c.xs), w = rnd(c.ws);
        Tensor<double> b = rnd(Shape{c.ws[0]});
        check_close(conv2d(x, w, b, c.s, c.p).data(), conv_ref(x, w, b, c.s, c.p));
    }
}

TEST_CASE("transposed convolution matches the direct definition") {
    Rand rnd;
    struct Case {
        Shape xs, ws;
        int64_t s, p;
    };
    const Case cases[] = {
        {{2, 3, 4, 5}, {3, 2, 4, 4}, 2, 1},   // parity-split path
        {{1, 2, 5, 3}, {2, 3, 3, 3}, 2, 1},
        {{1, 2, 6, 6}, {2, 2, 3, 3}, 1, 1},   // stride 1
        {{1, 1, 3, 4}, {1, 2, 5, 5}, 3, 2},   // generic stride
    };
    for (const auto& c : cases) {
        CAPTURE(shape_str(c.xs));
        Tensor<double> x = rnd(c.xs), w = rnd(c.ws);
        Tensor<double> b = rnd(Shape{c.ws[1]});
        check_close(transposed_conv2d(x, w, b, c.s, c.p).data(), tconv_ref(x, w, b, c.s, c.p));
    }
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
    // <conv(x), y> == <x, tconv(y)> with the same weight buffer, zero bias
    Rand rnd;
    Tensor<double> x = rnd(Shape{1, 2, 8, 8});
    Tensor<double> w = rnd(Shape{3, 2, 4, 4});   // conv [Co,Ci,kh,kw] == tconv [Ci_t,Co_t,kh,kw]
    Tensor<double> zb3(Shape{3}, 0.0), zb2(Shape{2}, 0.0);
    Tensor<double> fwd = conv2d(x, w, zb3, 2, 1);      // [1,3,4,4]
    Tensor<double> y = rnd(Shape{1, 3, 4, 4});
    Tensor<double> back = transposed_conv2d(y, w, zb2, 2, 1);   // [1,2,8,8]
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < fwd.size(); ++i)
        lhs += fwd.data()[static_cast<size_t>(i)] * y.data()[static_cast<size_t>(i)];
    for (int64_t i = 0; i < x.size(); ++i)
        rhs += x.data()[static_cast<size_t>(i)] * back.data()[static_cast<size_t>(i)];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("convolution rejects incompatible shapes") {
    Tensor<double> x(Shape{1, 2, 4, 4}, 0.0);
    Tensor<double> w(Shape{1, 3, 3, 3}, 0.0);
    Tensor<double> b(Shape{1}, 0.0);
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), ShapeError);
    Tensor<double> w2(Shape{2, 2, 3, 3}, 0.0);
    CHECK_THROWS_AS(conv2d(x, w2, b, 1, 1), ShapeError);   // bias 1 != 2 channels
    Tensor<double> wbig(Shape{1, 2, 9, 9}, 0.0);
    Tensor<double> b1(Shape{1}, 0.0);
    CHECK_THROWS_AS(conv2d(x, wbig, b1, 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(x, w2, Tensor<double>(Shape{2}, 0.0), 0, 1), ShapeError);
}

TEST_CASE("convolution gradients pass finite differences on every path") {
    Rand rnd;
    struct Case {
        Shape xs, ws;
        int64_t s, p;
    };
    const Case cases[] = {
        {{1, 2, 5, 6}, {2, 2, 3, 3}, 1, 1},
        {{1, 2, 6, 6}, {2, 2, 3, 3}, 2, 1},
        {{1, 1, 6, 6}, {2, 1, 4, 4}, 2, 1},
        {{1, 1, 7, 7}, {1, 1, 5, 5}, 3, 2},
    };
    for (const auto& c : cases) {
        CAPTURE(shape_str(c.xs));
        auto res = finite_diff_check<double>(
            [&](const std::vector<Tensor<double>>& in) {
                Tensor<double> o = conv2d(in[0], in[1], in[2], c.s, c.p);
                return sum(mul(o, o));
            },
            {rnd(c.xs), rnd(c.ws), rnd(Shape{c.ws[0]})}, 1e-5, 1e-7);
        CHECK_MESSAGE(res.ok, "max relative gradient error ", res.max_abs_err);
    }
}

TEST_CASE("transposed convolution gradients pass finite differences") {
    Rand rnd;
    struct Case {
        Shape xs, ws;
        int64_t s, p;
    };
    const Case cases[] = {
        {{1, 2, 4, 4}, {2, 2, 4, 4}, 2, 1},
        {{1, 2, 5, 5}, {2, 1, 3, 3}, 1, 1},
        {{1, 1, 3, 3}, {1, 2, 5, 5}, 3, 2},
    };
    for (const auto& c : cases) {
        CAPTURE(shape_str(c.xs));
        auto res = finite_diff_check<double>(
            [&](const std::vector<Tensor<double>>& in) {
                Tensor<double> o = transposed_conv2d(in[0], in[1], in[2], c.s, c.p);
                return sum(mul(o, o));
            },
            {rnd(c.xs), rnd(c.ws), rnd(Shape{c.ws[1]})}, 1e-5, 1e-7);
        CHECK_MESSAGE(res.ok, "max relative gradient error ", res.max_abs_err);
    }
}

TEST_CASE("batchnorm standardizes per channel in training mode") {
    Rand rnd;
    Tensor<double> x = rnd(Shape{2, 3, 4, 4});
    Tensor<double> gamma(Shape{3}, 1.0), beta(Shape{3}, 0.0);
    Tensor<double> rm(Shape{3}, 0.0), rv(Shape{3}, 1.0);
    Tensor<double> y = batchnorm2d(x, gamma, beta, rm, rv, true);
    const int64_t per = 2 * 16;
    for (int64_t c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t i = 0; i < 16; ++i)
                m += y.data()[static_cast<size_t>((n * 3 + c) * 16 + i)];
        m /= static_cast<double>(per);
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t i = 0; i < 16; ++i) {
                const double d = y.data()[static_cast<size_t>((n * 3 + c) * 16 + i)] - m;
                v += d * d;
            }
        v /= static_cast<double>(per);
        CHECK(m == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(v == doctest::Approx(1.0).epsilon(1e-3));   // eps shrinks variance slightly
    }
}

TEST_CASE("batchnorm running buffers follow the momentum rule") {
    Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1.0, 2.0, 3.0, 6.0});
    Tensor<double> gamma(Shape{1}, 1.0), beta(Shape{1}, 0.0);
    Tensor<double> rm(Shape{1}, 0.0), rv(Shape{1}, 1.0);
    batchnorm2d(x, gamma, beta, rm, rv, true, 0.1);
    // batch mean 3, batch var mean((x-3)^2) = (4+1+0+9)/4 = 3.5
    CHECK(rm.data()[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(rv.data()[0] == doctest::Approx(0.9 + 0.35).epsilon(1e-12));

    Tensor<double> rm2(Shape{1}, 0.0), rv2(Shape{1}, 1.0);
    batchnorm2d(x, gamma, beta, rm2, rv2, true, 0.1, 1e-5, false);
    CHECK(rm2.data()[0] == 0.0);
    CHECK(rv2.data()[0] == 1.0);
}

TEST_CASE("batchnorm evaluation mode uses the running buffers") {
    Tensor<double> x(Shape{1, 1, 1, 2}, std::vector<double>{5.0, 9.0});
    Tensor<double> gamma(Shape{1}, 2.0), beta(Shape{1}, 1.0);
    Tensor<double> rm(Shape{1}, 5.0), rv(Shape{1}, 4.0);
    Tensor<double> y = batchnorm2d(x, gamma, beta, rm, rv, false);
    const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
    CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(2.0 * 4.0 * inv + 1.0).epsilon(1e-12));
    // buffers untouched by evaluation
    CHECK(rm.data()[0] == 5.0);
    CHECK(rv.data()[0] == 4.0);
}

TEST_CASE("batchnorm gradients pass finite differences in both modes") {
    Rand rnd;
    for (const bool train : {true, false}) {
        CAPTURE(train);
        auto res = finite_diff_check<double>(
            [train](const std::vector<Tensor<double>>& in) {
                Tensor<double> rm(Shape{2}, std::vector<double>{0.2, -0.1});
                Tensor<double> rv(Shape{2}, std::vector<double>{0.8, 1.3});
                Tensor<double> o = batchnorm2d(in[0], in[1], in[2], rm, rv, train, 0.1, 1e-5,
                                               false);
                return sum(mul(o, o));
            },
            {rnd(Shape{2, 2, 3, 3}), rnd(Shape{2}), rnd(Shape{2})}, 1e-5, 1e-6);
        CHECK_MESSAGE(res.ok, "max relative gradient error ", res.max_abs_err);
    }
}
