// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "atrouslab/gradcheck.hpp"
#include "atrouslab/layers.hpp"

using namespace atrouslab;

namespace {

Tensor<double> rand_t(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor<double>::uniform(std::move(shape), lo, hi, rng);
}

// independent five-loop convolution oracle, explicit zero padding
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                           const std::vector<double>& bias, std::size_t dil, std::size_t pad,
                           std::size_t stride) {
    const std::size_t B = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::size_t Co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    const std::size_t Ho = (H + 2 * pad - (dil * (kh - 1) + 1)) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - (dil * (kw - 1) + 1)) / stride + 1;
    Tensor<double> out = Tensor<double>::zeros({B, Co, Ho, Wo});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[co];
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky * dil) -
                                                static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx * dil) -
                                                static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) ||
                                    ix >= static_cast<long>(W))
                                    continue;
                                acc += x.at({b, ci, static_cast<std::size_t>(iy),
                                             static_cast<std::size_t>(ix)}) *
                                       w.at({co, ci, ky, kx});
                            }
                    out.at({b, co, oy, ox}) = acc;
                }
    return out;
}

Conv2dParams<double> make_conv(std::size_t co, std::size_t ci, std::size_t k, Rng& rng,
                               std::size_t dil, std::size_t pad, std::size_t stride,
                               bool with_bias = true) {
    Conv2dParams<double> p = Conv2dParams<double>::init(co, ci, k, rng, dil, pad, stride, with_bias);
    if (with_bias) {
        for (auto& v : p.bias->data()) v = rng.uniform(-0.5, 0.5);
    }
    return p;
}

double dot_all(const Tensor<double>& a, const Tensor<double>& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
    return acc;
}

}  // namespace

TEST_CASE("dilated conv counting-taps cases") {
    Tensor<double> x = Tensor<double>::full({1, 1, 5, 5}, 1.0);
    Conv2dParams<double> p;
    p.weight = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    p.dilation = 1;
    p.padding = 1;
    Tensor<double> y = dilated_conv2d(x, p);
    REQUIRE(y.shape() == Shape{1, 1, 5, 5});
    CHECK(y.at({0, 0, 2, 2}) == 9.0);
    CHECK(y.at({0, 0, 0, 0}) == 4.0);

    p.dilation = 2;
    p.padding = 2;
    Tensor<double> y2 = dilated_conv2d(x, p);
    REQUIRE(y2.shape() == Shape{1, 1, 5, 5});
    CHECK(y2.at({0, 0, 2, 2}) == 9.0);
}

TEST_CASE("dilated conv matches the five-loop oracle at rates 1/6/12/18") {
    Rng rng(3);
    for (std::size_t dil : {std::size_t{1}, std::size_t{6}, std::size_t{12}, std::size_t{18}}) {
        Tensor<double> x = rand_t({2, 3, 9, 9}, rng);
        Conv2dParams<double> p = make_conv(4, 3, 3, rng, dil, dil, 1);
        Tensor<double> got = dilated_conv2d(x, p);
        Tensor<double> expect = conv_oracle(x, p.weight, p.bias->data(), dil, dil, 1);
        REQUIRE(got.shape() == expect.shape());
        CHECK(max_abs_diff(got, expect) <= 1e-6);
    }
}

TEST_CASE("conv rejects shapes that do not fit") {
    Rng rng(5);
    Tensor<double> x = rand_t({1, 2, 4, 4}, rng);
    Conv2dParams<double> p = make_conv(1, 2, 3, rng, 6, 0, 1);
    CHECK_THROWS_AS(dilated_conv2d(x, p), ShapeError);  // effective kernel too large

    Conv2dParams<double> q = make_conv(1, 2, 3, rng, 1, 0, 2);
    Tensor<double> x2 = rand_t({1, 2, 6, 6}, rng);
    CHECK_THROWS_AS(dilated_conv2d(x2, q), ShapeError);  // non-integral output extent
}

TEST_CASE("global average pool") {
    Rng rng(7);
    CHECK(global_avg_pool(Tensor<double>::full({2, 3, 4, 5}, 2.5)).at({1, 2, 0, 0}) == 2.5);
    Tensor<double> x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(global_avg_pool(x).at({0, 0, 0, 0}) == 2.5);

    Tensor<double> r = rand_t({2, 4, 5, 3}, rng);
    Tensor<double> pooled = global_avg_pool(r);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 4; ++c) {
            double acc = 0;
            for (std::size_t y = 0; y < 5; ++y)
                for (std::size_t x2 = 0; x2 < 3; ++x2) acc += r.at({b, c, y, x2});
            CHECK(pooled.at({b, c, 0, 0}) == Catch::Approx(acc / 15.0).margin(1e-7));
        }
}

TEST_CASE("batch norm trivial and statistical cases") {
    // inference: rm=0, rv=1, gamma=2, beta=1, x=0 -> 1
    BatchNormParams<double> p = BatchNormParams<double>::init(2);
    p.gamma = Tensor<double>::full({2}, 2.0, true);
    p.beta = Tensor<double>::full({2}, 1.0, true);
    p.training = false;
    Tensor<double> x0 = Tensor<double>::zeros({1, 2, 2, 2});
    Tensor<double> y0 = batch_norm(x0, p);
    for (double v : y0.data()) CHECK(v == Catch::Approx(1.0).margin(1e-9));

    // training-mode statistics against a direct oracle
    Rng rng(11);
    BatchNormParams<double> q = BatchNormParams<double>::init(3);
    Tensor<double> x = rand_t({4, 3, 5, 5}, rng, -2, 3);
    Tensor<double> y = batch_norm(x, q);  // gamma=1, beta=0: output is the normalized value
    const std::size_t n = 4 * 5 * 5;
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 25; ++i) mean += y.at({b, c, i / 5, i % 5});
        mean /= n;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 25; ++i) {
                const double d = y.at({b, c, i / 5, i % 5}) - mean;
                var += d * d;
            }
        var /= n;
        CHECK(std::abs(mean) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-4);
    }

    // degenerate batch
    BatchNormParams<double> r = BatchNormParams<double>::init(1);
    CHECK_THROWS_AS(batch_norm(Tensor<double>::zeros({1, 1, 1, 1}), r), ValidationError);
}

TEST_CASE("batch norm updates running statistics with momentum") {
    Rng rng(13);
    BatchNormParams<double> p = BatchNormParams<double>::init(1);
    Tensor<double> x = rand_t({2, 1, 3, 3}, rng, 1.0, 2.0);
    double mean = 0;
    for (double v : x.data()) mean += v;
    mean /= 18.0;
    double var = 0;
    for (double v : x.data()) var += (v - mean) * (v - mean);
    const double unbiased = var / 17.0;
    batch_norm(x, p);
    CHECK(p.running_mean.at({0}) == Catch::Approx(0.1 * mean).margin(1e-12));
    CHECK(p.running_var.at({0}) == Catch::Approx(0.9 + 0.1 * unbiased).margin(1e-12));
}

TEST_CASE("bilinear resize identity, constants and the 2x2 oracle") {
    Rng rng(17);
    Tensor<double> x = rand_t({1, 2, 4, 4}, rng);
    CHECK(bit_identical(bilinear_resize(x, 4, 4), x));

    Tensor<double> c = Tensor<double>::full({1, 1, 1, 1}, 0.7);
    Tensor<double> up = bilinear_resize(c, 4, 4);
    for (double v : up.data()) CHECK(v == 0.7);

    // direct align-corners=false formula for 2x2 -> 4x4
    Tensor<double> s = rand_t({1, 1, 2, 2}, rng);
    Tensor<double> got = bilinear_resize(s, 4, 4);
    for (std::size_t oy = 0; oy < 4; ++oy)
        for (std::size_t ox = 0; ox < 4; ++ox) {
            auto tap = [](double o) { return std::clamp((o + 0.5) * 0.5 - 0.5, 0.0, 1.0); };
            const double sy = tap(static_cast<double>(oy)), sx = tap(static_cast<double>(ox));
            const std::size_t y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
            const std::size_t y1 = std::min<std::size_t>(y0 + 1, 1), x1 = std::min<std::size_t>(x0 + 1, 1);
            const double wy = sy - y0, wx = sx - x0;
            const double expect = (1 - wy) * ((1 - wx) * s.at({0, 0, y0, x0}) + wx * s.at({0, 0, y0, x1})) +
                                  wy * ((1 - wx) * s.at({0, 0, y1, x0}) + wx * s.at({0, 0, y1, x1}));
            CHECK(got.at({0, 0, oy, ox}) == Catch::Approx(expect).margin(1e-6));
        }
}

TEST_CASE("transposed conv trivial cases and the adjoint identity") {
    Conv2dParams<double> p;
    p.weight = Tensor<double>::full({1, 1, 2, 2}, 1.0);
    p.stride = 2;
    Tensor<double> one = Tensor<double>::full({1, 1, 1, 1}, 1.0);
    Tensor<double> up = transposed_conv2d(one, p);
    REQUIRE(up.shape() == Shape{1, 1, 2, 2});
    for (double v : up.data()) CHECK(v == 1.0);

    // zero input -> bias only
    Conv2dParams<double> pb = p;
    pb.bias = Tensor<double>::full({1}, 0.25);
    Tensor<double> z = transposed_conv2d(Tensor<double>::zeros({1, 1, 3, 3}), pb);
    for (double v : z.data()) CHECK(v == 0.25);

    // <conv(x), y> == <x, conv_T(y)> across strides/dilations/paddings
    Rng rng(19);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t stride = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
        const std::size_t pad = static_cast<std::size_t>(rng.uniform_int(0, 1));
        const std::size_t dil = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
        const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_int(0, 1));
        Conv2dParams<double> w = make_conv(3, 2, k, rng, dil, pad, stride, false);
        const std::size_t H = 7 + static_cast<std::size_t>(rng.uniform_int(0, 2));
        // keep the output extent integral for the forward conv
        const std::size_t eff = dil * (k - 1) + 1;
        const std::size_t Hfit = ((H + 2 * pad - eff) / stride) * stride + eff - 2 * pad;
        Tensor<double> x = rand_t({2, 2, Hfit, Hfit}, rng);
        Tensor<double> cx = dilated_conv2d(x, w);
        Tensor<double> y = rand_t(cx.shape(), rng);
        Tensor<double> ty = transposed_conv2d(y, w);
        REQUIRE(ty.shape() == x.shape());
        CHECK(std::abs(dot_all(cx, y) - dot_all(x, ty)) <= 1e-6);
    }
}

TEST_CASE("softmax attention trivial cases and explicit oracle") {
    Rng rng(23);
    // single key: softmax over one logit is 1, output equals v
    Tensor<double> q = rand_t({1, 2, 3, 4}, rng);
    Tensor<double> k1 = rand_t({1, 2, 1, 4}, rng);
    Tensor<double> v1 = rand_t({1, 2, 1, 4}, rng);
    Tensor<double> o1 = softmax_attention(q, k1, v1);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t d = 0; d < 4; ++d) {
                CHECK(o1.at({0, h, n, d}) == Catch::Approx(v1.at({0, h, 0, d})).margin(1e-12));
            }

    // identical keys: uniform weights, output is the mean of v rows
    Tensor<double> krow = rand_t({1, 1, 1, 4}, rng);
    Tensor<double> k_same = Tensor<double>::zeros({1, 1, 5, 4});
    for (std::size_t n = 0; n < 5; ++n)
        for (std::size_t d = 0; d < 4; ++d) k_same.at({0, 0, n, d}) = krow.at({0, 0, 0, d});
    Tensor<double> v = rand_t({1, 1, 5, 4}, rng);
    Tensor<double> o2 = softmax_attention(rand_t({1, 1, 2, 4}, rng), k_same, v);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t d = 0; d < 4; ++d) {
            double mean = 0;
            for (std::size_t r = 0; r < 5; ++r) mean += v.at({0, 0, r, d});
            mean /= 5.0;
            CHECK(o2.at({0, 0, n, d}) == Catch::Approx(mean).margin(1e-9));
        }

    // random case against an explicit loop oracle
    Tensor<double> qq = rand_t({2, 2, 3, 5}, rng), kk = rand_t({2, 2, 4, 5}, rng),
                   vv = rand_t({2, 2, 4, 5}, rng);
    Tensor<double> got = softmax_attention(qq, kk, vv);
    const double scale = 1.0 / std::sqrt(5.0);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t n = 0; n < 3; ++n) {
                double logits[4];
                double mx = -1e30;
                for (std::size_t m = 0; m < 4; ++m) {
                    double acc = 0;
                    for (std::size_t d = 0; d < 5; ++d) acc += qq.at({b, h, n, d}) * kk.at({b, h, m, d});
                    logits[m] = acc * scale;
                    mx = std::max(mx, logits[m]);
                }
                double denom = 0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    denom += l;
                }
                for (std::size_t d = 0; d < 5; ++d) {
                    double acc = 0;
                    for (std::size_t m = 0; m < 4; ++m) acc += (logits[m] / denom) * vv.at({b, h, m, d});
                    CHECK(got.at({b, h, n, d}) == Catch::Approx(acc).margin(1e-6));
                }
            }
}

TEST_CASE("layer norm normalizes per token") {
    Rng rng(27);
    LayerNormParams<double> p = LayerNormParams<double>::init(6);
    Tensor<double> x = rand_t({2, 3, 6}, rng, -2, 2);
    Tensor<double> y = layer_norm(x, p);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t n = 0; n < 3; ++n) {
            double mean = 0, var = 0;
            for (std::size_t c = 0; c < 6; ++c) mean += y.at({b, n, c});
            mean /= 6.0;
            for (std::size_t c = 0; c < 6; ++c) {
                const double d = y.at({b, n, c}) - mean;
                var += d * d;
            }
            var /= 6.0;
            CHECK(std::abs(mean) <= 1e-9);
            CHECK(std::abs(var - 1.0) <= 1e-4);
        }
}

TEST_CASE("concat along channels is additive and differentiable") {
    Rng rng(29);
    Tensor<double> a = rand_t({2, 2, 3, 3}, rng), b = rand_t({2, 5, 3, 3}, rng);
    Tensor<double> c = concat_channels({a, b});
    REQUIRE(c.shape() == Shape{2, 7, 3, 3});
    CHECK(c.at({1, 1, 2, 2}) == a.at({1, 1, 2, 2}));
    CHECK(c.at({1, 4, 0, 1}) == b.at({1, 2, 0, 1}));

    auto f = [](const std::vector<Tensor<double>>& in) {
        Tensor<double> cc = concat_channels({in[0], in[1]});
        return sum_all(mul(cc, cc));
    };
    CHECK(gradcheck(f, {rand_t({1, 2, 2, 2}, rng), rand_t({1, 3, 2, 2}, rng)}, 1e-5).pass);
}

TEST_CASE("dilation 1 equals the plain convolution oracle") {
    Rng rng(30);
    Tensor<double> x = rand_t({1, 2, 7, 7}, rng);
    Conv2dParams<double> p = make_conv(3, 2, 3, rng, 1, 1, 1);
    CHECK(max_abs_diff(dilated_conv2d(x, p), conv_oracle(x, p.weight, p.bias->data(), 1, 1, 1)) <=
          1e-7);
}

TEST_CASE("every layer passes gradcheck across 50 random configurations") {
    Rng rng(31);

    SECTION("dilated_conv2d") {
        for (int rep = 0; rep < 50; ++rep) {
            const std::size_t ci = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
            const std::size_t co = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
            const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
            const std::size_t dil = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
            const std::size_t pad = static_cast<std::size_t>(rng.uniform_int(0, 2));
            const std::size_t H = dil * (k - 1) + 1 + static_cast<std::size_t>(rng.uniform_int(0, 3));
            Tensor<double> x = rand_t({1, ci, H, H}, rng);
            auto f = [&](const std::vector<Tensor<double>>& in) {
                Conv2dParams<double> p;
                p.weight = in[1];
                p.bias = in[2];
                p.dilation = dil;
                p.padding = pad;
                p.stride = 1;
                Tensor<double> y = dilated_conv2d(in[0], p);
                return sum_all(mul(y, y));
            };
            GradcheckReport r = gradcheck(f, {x, rand_t({co, ci, k, k}, rng), rand_t({co}, rng)}, 1e-5);
            INFO("conv rep " << rep);
            CHECK(r.pass);
        }
    }

    SECTION("transposed_conv2d") {
        for (int rep = 0; rep < 50; ++rep) {
            const std::size_t ca = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
            const std::size_t cb = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
            const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_int(0, 1));
            const std::size_t stride = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
            Tensor<double> x = rand_t({1, ca, 3, 3}, rng);
            auto f = [&](const std::vector<Tensor<double>>& in) {
                Conv2dParams<double> p;
                p.weight = in[1];
                p.bias = in[2];
                p.stride = stride;
                Tensor<double> y = transposed_conv2d(in[0], p);
                return sum_all(mul(y, y));
            };
            GradcheckReport r = gradcheck(f, {x, rand_t({ca, cb, k, k}, rng), rand_t({cb}, rng)}, 1e-5);
            INFO("transposed rep " << rep);
            CHECK(r.pass);
        }
    }

    SECTION("batch_norm") {
        for (int rep = 0; rep < 50; ++rep) {
            const std::size_t C = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
            const bool training = rep % 2 == 0;
            Tensor<double> x = rand_t({2, C, 3, 3}, rng);
            // contract with a fixed random tensor: sum(y^2) of a normalized
            // output is nearly constant in x and starves finite differences
            Tensor<double> w = rand_t({2, C, 3, 3}, rng);
            auto f = [&](const std::vector<Tensor<double>>& in) {
                BatchNormParams<double> p = BatchNormParams<double>::init(C);
                p.gamma = in[1];
                p.beta = in[2];
                p.training = training;
                Tensor<double> y = batch_norm(in[0], p);
                return sum_all(mul(y, w));
            };
            GradcheckReport r = gradcheck(f, {x, rand_t({C}, rng, 0.5, 1.5), rand_t({C}, rng)}, 1e-5);
            INFO("bn rep " << rep << " training " << training);
            CHECK(r.pass);
        }
    }

    SECTION("layer_norm") {
        for (int rep = 0; rep < 50; ++rep) {
            // C == 2 saturates the normalization (xhat is ~always +-1) and
            // the true gradient degenerates to O(eps); stay above it
            const std::size_t C = 3 + static_cast<std::size_t>(rng.uniform_int(0, 4));
            Tensor<double> x = rand_t({2, 3, C}, rng);
            Tensor<double> w = rand_t({2, 3, C}, rng);
            auto f = [&](const std::vector<Tensor<double>>& in) {
                LayerNormParams<double> p = LayerNormParams<double>::init(C);
                p.gamma = in[1];
                p.beta = in[2];
                Tensor<double> y = layer_norm(in[0], p);
                return sum_all(mul(y, w));
            };
            CHECK(gradcheck(f, {x, rand_t({C}, rng, 0.5, 1.5), rand_t({C}, rng)}, 1e-5).pass);
        }
    }

    SECTION("linear") {
        for (int rep = 0; rep < 50; ++rep) {
            const std::size_t ci = 1 + static_cast<std::size_t>(rng.uniform_int(0, 3));
            const std::size_t co = 1 + static_cast<std::size_t>(rng.uniform_int(0, 3));
            auto f = [](const std::vector<Tensor<double>>& in) {
                LinearParams<double> p;
                p.weight = in[1];
                p.bias = in[2];
                Tensor<double> y = linear(in[0], p);
                return sum_all(mul(y, y));
            };
            CHECK(gradcheck(f, {rand_t({2, 3, ci}, rng), rand_t({co, ci}, rng), rand_t({co}, rng)},
                            1e-5)
                      .pass);
        }
    }

    SECTION("pool, resize, attention") {
        for (int rep = 0; rep < 50; ++rep) {
            auto fp = [](const std::vector<Tensor<double>>& in) {
                Tensor<double> y = global_avg_pool(in[0]);
                return sum_all(mul(y, y));
            };
            CHECK(gradcheck(fp, {rand_t({2, 2, 3, 3}, rng)}, 1e-5).pass);

            const std::size_t oh = 1 + static_cast<std::size_t>(rng.uniform_int(0, 5));
            auto fr = [&](const std::vector<Tensor<double>>& in) {
                Tensor<double> y = bilinear_resize(in[0], oh, oh);
                return sum_all(mul(y, y));
            };
            CHECK(gradcheck(fr, {rand_t({1, 2, 3, 3}, rng)}, 1e-5).pass);

            auto fa = [](const std::vector<Tensor<double>>& in) {
                Tensor<double> y = softmax_attention(in[0], in[1], in[2]);
                return sum_all(mul(y, y));
            };
            CHECK(gradcheck(fa,
                            {rand_t({1, 2, 2, 3}, rng), rand_t({1, 2, 3, 3}, rng),
                             rand_t({1, 2, 3, 3}, rng)},
                            1e-5)
                      .pass);
        }
    }
}

TEST_CASE("gradcheck covers the dilated conv composite from the tensor module") {
    Rng rng(37);
    Conv2dParams<double> p = make_conv(2, 2, 3, rng, 2, 2, 1);
    auto f = [&](const std::vector<Tensor<double>>& in) {
        return mean_all(relu(dilated_conv2d(in[0], p)));
    };
    CHECK(gradcheck(f, {rand_t({1, 2, 6, 6}, rng)}, 1e-5).pass);
}
