// SPDX-License-Identifier: Apache-2.0
//
// Neural building blocks on top of the tensor/tape core: dilated and
// transposed 2-D convolution, batch/layer normalization, linear projection,
// bilinear interpolation, global average pooling, channel concatenation and
// softmax attention. Each fused layer carries its own hand-written VJP and is
// covered by the finite-difference suite.

#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "atrouslab/rng.hpp"
#include "atrouslab/serialize.hpp"
#include "atrouslab/tensor.hpp"

namespace atrouslab {

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

template <typename T>
struct LinearParams {
    Tensor<T> weight;                // [C_out, C_in]
    std::optional<Tensor<T>> bias;   // [C_out]
    bool frozen = false;

    static LinearParams init(std::size_t c_in, std::size_t c_out, Rng& rng, bool with_bias = true,
                             bool frozen = false) {
        LinearParams p;
        const double scale = 1.0 / std::sqrt(static_cast<double>(c_in));
        p.weight = Tensor<T>::uniform({c_out, c_in}, -scale, scale, rng, !frozen);
        if (with_bias) p.bias = Tensor<T>::uniform({c_out}, -scale, scale, rng, !frozen);
        p.frozen = frozen;
        return p;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".weight", weight});
        if (bias) out.push_back({prefix + ".bias", *bias});
    }
};

// weight is stored in convolution orientation [C_out, C_in, k_h, k_w];
// transposed_conv2d reads the same layout as its adjoint, i.e. it maps
// weight.shape[0] input channels onto weight.shape[1] output channels.
template <typename T>
struct Conv2dParams {
    Tensor<T> weight;
    std::optional<Tensor<T>> bias;
    std::size_t dilation = 1;
    std::size_t padding = 0;
    std::size_t stride = 1;

    static Conv2dParams init(std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng,
                             std::size_t dilation = 1, std::size_t padding = 0, std::size_t stride = 1,
                             bool with_bias = true) {
        Conv2dParams p;
        const double scale = 1.0 / std::sqrt(static_cast<double>(c_in * k * k));
        p.weight = Tensor<T>::uniform({c_out, c_in, k, k}, -scale, scale, rng, true);
        if (with_bias) p.bias = Tensor<T>::zeros({c_out}, true);
        p.dilation = dilation;
        p.padding = padding;
        p.stride = stride;
        return p;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".weight", weight});
        if (bias) out.push_back({prefix + ".bias", *bias});
    }
};

template <typename T>
struct BatchNormParams {
    Tensor<T> gamma, beta;               // trainable
    Tensor<T> running_mean, running_var; // state, never trainable
    T eps = T(1e-5);
    T momentum = T(0.1);
    bool training = true;

    static BatchNormParams init(std::size_t channels) {
        BatchNormParams p;
        p.gamma = Tensor<T>::full({channels}, T(1), true);
        p.beta = Tensor<T>::zeros({channels}, true);
        p.running_mean = Tensor<T>::zeros({channels}, false);
        p.running_var = Tensor<T>::full({channels}, T(1), false);
        return p;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
        out.push_back({prefix + ".running_mean", running_mean});
        out.push_back({prefix + ".running_var", running_var});
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma, beta;  // [C]
    T eps = T(1e-5);

    static LayerNormParams init(std::size_t channels) {
        LayerNormParams p;
        p.gamma = Tensor<T>::full({channels}, T(1), true);
        p.beta = Tensor<T>::zeros({channels}, true);
        return p;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

// ---------------------------------------------------------------------------
// Linear: y = x W^T + b over the last dimension
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
    const Shape& s = x.shape();
    const Shape& ws = p.weight.shape();
    if (s.empty() || s.back() != ws[1]) {
        throw ShapeError("linear: input " + shape_str(s) + " incompatible with weight " + shape_str(ws));
    }
    const std::size_t c_in = ws[1], c_out = ws[0];
    const std::size_t rows = x.numel() / c_in;
    Shape out_shape(s.begin(), s.end() - 1);
    out_shape.push_back(c_out);
    Tensor<T> out = Tensor<T>::zeros(out_shape);

    const T* px = x.data().data();
    const T* pw = p.weight.data().data();
    T* po = out.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * c_in;
        T* yr = po + r * c_out;
        for (std::size_t co = 0; co < c_out; ++co) {
            const T* wr = pw + co * c_in;
            T acc = 0;
            for (std::size_t ci = 0; ci < c_in; ++ci) acc += xr[ci] * wr[ci];
            yr[co] = acc;
        }
    }
    if (p.bias) {
        const T* pb = p.bias->data().data();
        for (std::size_t r = 0; r < rows; ++r) {
            T* yr = po + r * c_out;
            for (std::size_t co = 0; co < c_out; ++co) yr[co] += pb[co];
        }
    }

    const Tensor<T> bias_t = p.bias ? *p.bias : Tensor<T>();
    const bool has_bias = p.bias.has_value();
    bool rec = has_bias ? detail::tape_should_record<T>({&x, &p.weight, &bias_t}, out)
                        : detail::tape_should_record<T>({&x, &p.weight}, out);
    if (rec) {
        const bool gx = x.participates(), gw = p.weight.participates();
        const bool gb = has_bias && bias_t.participates();
        Tape<T>::current()->record([xi = x.impl(), wi = p.weight.impl(),
                                    bi = has_bias ? bias_t.impl() : nullptr, oi = out.impl(), rows, c_in,
                                    c_out, gx, gw, gb] {
            const T* g = oi->grad.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g + r * c_out;
                for (std::size_t co = 0; co < c_out; ++co) {
                    const T gv = gr[co];
                    if (gv == T(0)) continue;
                    if (gx) {
                        const T* wr = wi->data.data() + co * c_in;
                        T* gxr = xi->grad.data() + r * c_in;
                        for (std::size_t ci = 0; ci < c_in; ++ci) gxr[ci] += gv * wr[ci];
                    }
                    if (gw) {
                        const T* xr = xi->data.data() + r * c_in;
                        T* gwr = wi->grad.data() + co * c_in;
                        for (std::size_t ci = 0; ci < c_in; ++ci) gwr[ci] += gv * xr[ci];
                    }
                    if (gb) bi->grad[co] += gv;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dilated 2-D convolution
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dilated_conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
    const Shape& xs = x.shape();
    const Shape& ws = p.weight.shape();
    if (xs.size() != 4 || ws.size() != 4) {
        throw ShapeError("conv2d expects x[B,C,H,W] and weight[Co,Ci,kh,kw], got " + shape_str(xs) +
                         " and " + shape_str(ws));
    }
    if (xs[1] != ws[1]) {
        throw ShapeError("conv2d channel mismatch: x " + shape_str(xs) + " vs weight " + shape_str(ws));
    }
    const std::size_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
    const std::size_t Co = ws[0], kh = ws[2], kw = ws[3];
    const std::size_t d = p.dilation, pad = p.padding, s = p.stride;
    const std::size_t eff_h = d * (kh - 1) + 1, eff_w = d * (kw - 1) + 1;
    if (eff_h > H + 2 * pad || eff_w > W + 2 * pad) {
        throw ShapeError("conv2d effective kernel " + std::to_string(eff_h) + "x" + std::to_string(eff_w) +
                         " exceeds padded input for " + shape_str(xs));
    }
    const std::size_t num_h = H + 2 * pad - eff_h, num_w = W + 2 * pad - eff_w;
    if (num_h % s != 0 || num_w % s != 0) {
        throw ShapeError("conv2d non-integral output extent for " + shape_str(xs) + " with stride " +
                         std::to_string(s));
    }
    const std::size_t Ho = num_h / s + 1, Wo = num_w / s + 1;
    if (p.bias && p.bias->numel() != Co) {
        throw ShapeError("conv2d bias length " + std::to_string(p.bias->numel()) + " != C_out " +
                         std::to_string(Co));
    }

    Tensor<T> out = Tensor<T>::zeros({B, Co, Ho, Wo});
    const T* px = x.data().data();
    const T* pw = p.weight.data().data();
    const T* pb = p.bias ? p.bias->data().data() : nullptr;
    T* po = out.data().data();
    const std::ptrdiff_t ipad = static_cast<std::ptrdiff_t>(pad);

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t co = 0; co < Co; ++co) {
            T* oplane = po + ((b * Co + co) * Ho) * Wo;
            const T bias_v = pb ? pb[co] : T(0);
            for (std::size_t oy = 0; oy < Ho; ++oy) {
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    T acc = bias_v;
                    for (std::size_t ci = 0; ci < Ci; ++ci) {
                        const T* xplane = px + ((b * Ci + ci) * H) * W;
                        const T* wplane = pw + ((co * Ci + ci) * kh) * kw;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * s + ky * d) - ipad;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * s + kx * d) - ipad;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += xplane[iy * static_cast<std::ptrdiff_t>(W) + ix] *
                                       wplane[ky * kw + kx];
                            }
                        }
                    }
                    oplane[oy * Wo + ox] = acc;
                }
            }
        }
    }

    const Tensor<T> bias_t = p.bias ? *p.bias : Tensor<T>();
    const bool has_bias = p.bias.has_value();
    bool rec = has_bias ? detail::tape_should_record<T>({&x, &p.weight, &bias_t}, out)
                        : detail::tape_should_record<T>({&x, &p.weight}, out);
    if (rec) {
        const bool gx = x.participates(), gw = p.weight.participates();
        const bool gb = has_bias && bias_t.participates();
        Tape<T>::current()->record([xi = x.impl(), wi = p.weight.impl(),
                                    bi = has_bias ? bias_t.impl() : nullptr, oi = out.impl(), B, Ci, H, W,
                                    Co, kh, kw, Ho, Wo, d, s, ipad, gx, gw, gb] {
            const T* g = oi->grad.data();
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t co = 0; co < Co; ++co) {
                    const T* gplane = g + ((b * Co + co) * Ho) * Wo;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const T gv = gplane[oy * Wo + ox];
                            if (gv == T(0)) continue;
                            if (gb) bi->grad[co] += gv;
                            if (!gx && !gw) continue;
                            for (std::size_t ci = 0; ci < Ci; ++ci) {
                                const std::size_t xoff = ((b * Ci + ci) * H) * W;
                                const std::size_t woff = ((co * Ci + ci) * kh) * kw;
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const std::ptrdiff_t iy =
                                        static_cast<std::ptrdiff_t>(oy * s + ky * d) - ipad;
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        const std::ptrdiff_t ix =
                                            static_cast<std::ptrdiff_t>(ox * s + kx * d) - ipad;
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                        const std::size_t xidx =
                                            xoff + static_cast<std::size_t>(iy) * W +
                                            static_cast<std::size_t>(ix);
                                        const std::size_t widx = woff + ky * kw + kx;
                                        if (gx) xi->grad[xidx] += gv * wi->data[widx];
                                        if (gw) wi->grad[widx] += gv * xi->data[xidx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Transposed convolution (adjoint of dilated_conv2d in x for the same params)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
    const Shape& xs = x.shape();
    const Shape& ws = p.weight.shape();
    if (xs.size() != 4 || ws.size() != 4) {
        throw ShapeError("transposed_conv2d expects x[B,C,H,W] and weight[Co,Ci,kh,kw], got " +
                         shape_str(xs) + " and " + shape_str(ws));
    }
    if (xs[1] != ws[0]) {
        throw ShapeError("transposed_conv2d channel mismatch: x " + shape_str(xs) + " vs weight " +
                         shape_str(ws));
    }
    const std::size_t B = xs[0], Ca = xs[1], H = xs[2], W = xs[3];
    const std::size_t Cb = ws[1], kh = ws[2], kw = ws[3];
    const std::size_t d = p.dilation, pad = p.padding, s = p.stride;
    const std::ptrdiff_t Ho =
        static_cast<std::ptrdiff_t>((H - 1) * s + d * (kh - 1) + 1) - 2 * static_cast<std::ptrdiff_t>(pad);
    const std::ptrdiff_t Wo =
        static_cast<std::ptrdiff_t>((W - 1) * s + d * (kw - 1) + 1) - 2 * static_cast<std::ptrdiff_t>(pad);
    if (Ho <= 0 || Wo <= 0) {
        throw ShapeError("transposed_conv2d non-positive output extent for " + shape_str(xs));
    }
    if (p.bias && p.bias->numel() != Cb) {
        throw ShapeError("transposed_conv2d bias length " + std::to_string(p.bias->numel()) +
                         " != output channels " + std::to_string(Cb));
    }
    const std::size_t uHo = static_cast<std::size_t>(Ho), uWo = static_cast<std::size_t>(Wo);

    Tensor<T> out = Tensor<T>::zeros({B, Cb, uHo, uWo});
    T* po = out.data().data();
    if (p.bias) {
        const T* pb = p.bias->data().data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t cb = 0; cb < Cb; ++cb) {
                T* plane = po + ((b * Cb + cb) * uHo) * uWo;
                for (std::size_t i = 0; i < uHo * uWo; ++i) plane[i] = pb[cb];
            }
    }
    const T* px = x.data().data();
    const T* pw = p.weight.data().data();
    const std::ptrdiff_t ipad = static_cast<std::ptrdiff_t>(pad);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t ca = 0; ca < Ca; ++ca) {
            const T* xplane = px + ((b * Ca + ca) * H) * W;
            for (std::size_t iy = 0; iy < H; ++iy) {
                for (std::size_t ix = 0; ix < W; ++ix) {
                    const T xv = xplane[iy * W + ix];
                    if (xv == T(0)) continue;
                    for (std::size_t cb = 0; cb < Cb; ++cb) {
                        T* oplane = po + ((b * Cb + cb) * uHo) * uWo;
                        const T* wplane = pw + ((ca * Cb + cb) * kh) * kw;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const std::ptrdiff_t oy =
                                static_cast<std::ptrdiff_t>(iy * s + ky * d) - ipad;
                            if (oy < 0 || oy >= Ho) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const std::ptrdiff_t ox =
                                    static_cast<std::ptrdiff_t>(ix * s + kx * d) - ipad;
                                if (ox < 0 || ox >= Wo) continue;
                                oplane[oy * Wo + ox] += xv * wplane[ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }

    const Tensor<T> bias_t = p.bias ? *p.bias : Tensor<T>();
    const bool has_bias = p.bias.has_value();
    bool rec = has_bias ? detail::tape_should_record<T>({&x, &p.weight, &bias_t}, out)
                        : detail::tape_should_record<T>({&x, &p.weight}, out);
    if (rec) {
        const bool gx = x.participates(), gw = p.weight.participates();
        const bool gb = has_bias && bias_t.participates();
        Tape<T>::current()->record([xi = x.impl(), wi = p.weight.impl(),
                                    bi = has_bias ? bias_t.impl() : nullptr, oi = out.impl(), B, Ca, H, W,
                                    Cb, kh, kw, uHo, uWo, d, s, ipad, gx, gw, gb] {
            const T* g = oi->grad.data();
            if (gb) {
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t cb = 0; cb < Cb; ++cb) {
                        const T* plane = g + ((b * Cb + cb) * uHo) * uWo;
                        T acc = 0;
                        for (std::size_t i = 0; i < uHo * uWo; ++i) acc += plane[i];
                        bi->grad[cb] += acc;
                    }
            }
            if (!gx && !gw) return;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t ca = 0; ca < Ca; ++ca) {
                    const std::size_t xoff = ((b * Ca + ca) * H) * W;
                    for (std::size_t iy = 0; iy < H; ++iy) {
                        for (std::size_t ix = 0; ix < W; ++ix) {
                            const std::size_t xidx = xoff + iy * W + ix;
                            T gx_acc = 0;
                            for (std::size_t cb = 0; cb < Cb; ++cb) {
                                const T* gplane = g + ((b * Cb + cb) * uHo) * uWo;
                                const std::size_t woff = ((ca * Cb + cb) * kh) * kw;
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const std::ptrdiff_t oy =
                                        static_cast<std::ptrdiff_t>(iy * s + ky * d) - ipad;
                                    if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(uHo)) continue;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        const std::ptrdiff_t ox =
                                            static_cast<std::ptrdiff_t>(ix * s + kx * d) - ipad;
                                        if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(uWo)) continue;
                                        const T gv = gplane[oy * static_cast<std::ptrdiff_t>(uWo) + ox];
                                        if (gv == T(0)) continue;
                                        const std::size_t widx = woff + ky * kw + kx;
                                        if (gx) gx_acc += gv * wi->data[widx];
                                        if (gw) wi->grad[widx] += gv * xi->data[xidx];
                                    }
                                }
                            }
                            if (gx) xi->grad[xidx] += gx_acc;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over [B,C,H,W]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const BatchNormParams<T>& p) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("batch_norm expects [B,C,H,W], got " + shape_str(s));
    const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (p.gamma.numel() != C) {
        throw ShapeError("batch_norm channel mismatch: x " + shape_str(s) + " vs gamma " +
                         shape_str(p.gamma.shape()));
    }
    const std::size_t N = B * H * W;  // elements per channel
    const std::size_t plane = H * W;

    Tensor<T> out = Tensor<T>::zeros(s);
    const T* px = x.data().data();
    T* po = out.data().data();
    const T* pg = p.gamma.data().data();
    const T* pbeta = p.beta.data().data();

    std::vector<T> mean(C, T(0)), invstd(C, T(0));
    if (p.training) {
        if (N < 2) throw ValidationError("batch_norm: degenerate batch, B*H*W must be >= 2 per channel");
        for (std::size_t c = 0; c < C; ++c) {
            T m = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const T* xp = px + ((b * C + c) * plane);
                for (std::size_t i = 0; i < plane; ++i) m += xp[i];
            }
            m /= static_cast<T>(N);
            T v = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const T* xp = px + ((b * C + c) * plane);
                for (std::size_t i = 0; i < plane; ++i) {
                    const T dlt = xp[i] - m;
                    v += dlt * dlt;
                }
            }
            v /= static_cast<T>(N);
            mean[c] = m;
            invstd[c] = T(1) / std::sqrt(v + p.eps);
            // running statistics use the unbiased variance
            Tensor<T> rm = p.running_mean, rv = p.running_var;
            rm.data()[c] = (T(1) - p.momentum) * rm.data()[c] + p.momentum * m;
            const T unbiased = v * static_cast<T>(N) / static_cast<T>(N - 1);
            rv.data()[c] = (T(1) - p.momentum) * rv.data()[c] + p.momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = p.running_mean.data()[c];
            invstd[c] = T(1) / std::sqrt(p.running_var.data()[c] + p.eps);
        }
    }

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* xp = px + ((b * C + c) * plane);
            T* op = po + ((b * C + c) * plane);
            const T m = mean[c], is = invstd[c], g = pg[c], bt = pbeta[c];
            for (std::size_t i = 0; i < plane; ++i) op[i] = g * (xp[i] - m) * is + bt;
        }
    }

    if (detail::tape_should_record<T>({&x, &p.gamma, &p.beta}, out)) {
        const bool gx = x.participates(), gg = p.gamma.participates(), gb = p.beta.participates();
        const bool train = p.training;
        Tape<T>::current()->record([xi = x.impl(), gi = p.gamma.impl(), bti = p.beta.impl(),
                                    oi = out.impl(), mean, invstd, B, C, plane, N, gx, gg, gb, train] {
            for (std::size_t c = 0; c < C; ++c) {
                const T m = mean[c], is = invstd[c], gam = gi->data[c];
                T sum_g = 0, sum_gx = 0;
                for (std::size_t b = 0; b < B; ++b) {
                    const T* gp = oi->grad.data() + ((b * C + c) * plane);
                    const T* xp = xi->data.data() + ((b * C + c) * plane);
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_g += gp[i];
                        sum_gx += gp[i] * (xp[i] - m) * is;
                    }
                }
                if (gg) gi->grad[c] += sum_gx;
                if (gb) bti->grad[c] += sum_g;
                if (gx) {
                    const T inv_n = T(1) / static_cast<T>(N);
                    for (std::size_t b = 0; b < B; ++b) {
                        const T* gp = oi->grad.data() + ((b * C + c) * plane);
                        const T* xp = xi->data.data() + ((b * C + c) * plane);
                        T* gxp = xi->grad.data() + ((b * C + c) * plane);
                        for (std::size_t i = 0; i < plane; ++i) {
                            const T xhat = (xp[i] - m) * is;
                            if (train) {
                                gxp[i] += gam * is * (gp[i] - inv_n * sum_g - xhat * inv_n * sum_gx);
                            } else {
                                gxp[i] += gam * is * gp[i];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
    const Shape& s = x.shape();
    const std::size_t C = s.back();
    if (p.gamma.numel() != C) {
        throw ShapeError("layer_norm channel mismatch: x " + shape_str(s) + " vs gamma " +
                         shape_str(p.gamma.shape()));
    }
    const std::size_t rows = x.numel() / C;
    Tensor<T> out = Tensor<T>::zeros(s);
    const T* px = x.data().data();
    T* po = out.data().data();
    const T* pg = p.gamma.data().data();
    const T* pb = p.beta.data().data();

    std::vector<T> mean(rows), invstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * C;
        T m = 0;
        for (std::size_t c = 0; c < C; ++c) m += xr[c];
        m /= static_cast<T>(C);
        T v = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const T dlt = xr[c] - m;
            v += dlt * dlt;
        }
        v /= static_cast<T>(C);
        mean[r] = m;
        invstd[r] = T(1) / std::sqrt(v + p.eps);
        T* orow = po + r * C;
        for (std::size_t c = 0; c < C; ++c) orow[c] = pg[c] * (xr[c] - m) * invstd[r] + pb[c];
    }

    if (detail::tape_should_record<T>({&x, &p.gamma, &p.beta}, out)) {
        const bool gx = x.participates(), gg = p.gamma.participates(), gb = p.beta.participates();
        Tape<T>::current()->record([xi = x.impl(), gi = p.gamma.impl(), bi = p.beta.impl(),
                                    oi = out.impl(), mean, invstd, rows, C, gx, gg, gb] {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = xi->data.data() + r * C;
                const T* gr = oi->grad.data() + r * C;
                const T m = mean[r], is = invstd[r];
                T sum_gg = 0, sum_ggx = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    const T xhat = (xr[c] - m) * is;
                    const T ggam = gr[c] * gi->data[c];
                    sum_gg += ggam;
                    sum_ggx += ggam * xhat;
                    if (gg) gi->grad[c] += gr[c] * xhat;
                    if (gb) bi->grad[c] += gr[c];
                }
                if (gx) {
                    const T inv_c = T(1) / static_cast<T>(C);
                    T* gxr = xi->grad.data() + r * C;
                    for (std::size_t c = 0; c < C; ++c) {
                        const T xhat = (xr[c] - m) * is;
                        const T ggam = gr[c] * gi->data[c];
                        gxr[c] += is * (ggam - inv_c * sum_gg - xhat * inv_c * sum_ggx);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Global average pooling [B,C,H,W] -> [B,C,1,1]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("global_avg_pool expects [B,C,H,W], got " + shape_str(s));
    const std::size_t BC = s[0] * s[1], plane = s[2] * s[3];
    Tensor<T> out = Tensor<T>::zeros({s[0], s[1], 1, 1});
    const T* px = x.data().data();
    T* po = out.data().data();
    const T inv = T(1) / static_cast<T>(plane);
    for (std::size_t bc = 0; bc < BC; ++bc) {
        T acc = 0;
        const T* xp = px + bc * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += xp[i];
        po[bc] = acc * inv;
    }
    if (detail::tape_should_record<T>({&x}, out)) {
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), BC, plane, inv] {
            for (std::size_t bc = 0; bc < BC; ++bc) {
                const T g = oi->grad[bc] * inv;
                T* gp = xi->grad.data() + bc * plane;
                for (std::size_t i = 0; i < plane; ++i) gp[i] += g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bilinear interpolation, align-corners = false
// ---------------------------------------------------------------------------

namespace detail {

struct ResizeTap {
    std::size_t i0, i1;
    double w1;  // weight of i1; i0 gets (1 - w1)
};

inline std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out) {
    std::vector<ResizeTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        const double limit = static_cast<double>(in - 1);
        if (src > limit) src = limit;
        const std::size_t i0 = static_cast<std::size_t>(src);
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("bilinear_resize expects [B,C,H,W], got " + shape_str(s));
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize output extents must be >= 1");
    const std::size_t BC = s[0] * s[1], H = s[2], W = s[3];
    if (out_h == H && out_w == W) {
        // identity resize is exact by contract
        Tensor<T> out = Tensor<T>::from_data(s, x.data());
        if (detail::tape_should_record<T>({&x}, out)) {
            const std::size_t n = x.numel();
            Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), n] {
                for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
            });
        }
        return out;
    }
    const auto ty = detail::resize_taps(H, out_h);
    const auto tx = detail::resize_taps(W, out_w);
    Tensor<T> out = Tensor<T>::zeros({s[0], s[1], out_h, out_w});
    const T* px = x.data().data();
    T* po = out.data().data();
    for (std::size_t bc = 0; bc < BC; ++bc) {
        const T* xp = px + bc * H * W;
        T* op = po + bc * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& y = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto& xt = tx[ox];
                const double v00 = xp[y.i0 * W + xt.i0], v01 = xp[y.i0 * W + xt.i1];
                const double v10 = xp[y.i1 * W + xt.i0], v11 = xp[y.i1 * W + xt.i1];
                const double top = v00 + (v01 - v00) * xt.w1;
                const double bot = v10 + (v11 - v10) * xt.w1;
                op[oy * out_w + ox] = static_cast<T>(top + (bot - top) * y.w1);
            }
        }
    }
    if (detail::tape_should_record<T>({&x}, out)) {
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), ty, tx, BC, H, W, out_h, out_w] {
            for (std::size_t bc = 0; bc < BC; ++bc) {
                T* gx = xi->grad.data() + bc * H * W;
                const T* go = oi->grad.data() + bc * out_h * out_w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto& y = ty[oy];
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto& xt = tx[ox];
                        const double g = go[oy * out_w + ox];
                        gx[y.i0 * W + xt.i0] += static_cast<T>(g * (1 - y.w1) * (1 - xt.w1));
                        gx[y.i0 * W + xt.i1] += static_cast<T>(g * (1 - y.w1) * xt.w1);
                        gx[y.i1 * W + xt.i0] += static_cast<T>(g * y.w1 * (1 - xt.w1));
                        gx[y.i1 * W + xt.i1] += static_cast<T>(g * y.w1 * xt.w1);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel concatenation for [B,C_i,H,W]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> parts) {
    return concat_channels(std::vector<Tensor<T>>(parts));
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const Shape& s0 = parts[0].shape();
    if (s0.size() != 4) throw ShapeError("concat_channels expects [B,C,H,W], got " + shape_str(s0));
    std::size_t total_c = 0;
    for (const auto& t : parts) {
        const Shape& s = t.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
            throw ShapeError("concat_channels extent mismatch: " + shape_str(s) + " vs " + shape_str(s0));
        }
        total_c += s[1];
    }
    const std::size_t B = s0[0], plane = s0[2] * s0[3];
    Tensor<T> out = Tensor<T>::zeros({B, total_c, s0[2], s0[3]});
    T* po = out.data().data();
    std::size_t c_off = 0;
    for (const auto& t : parts) {
        const std::size_t C = t.shape()[1];
        const T* pt = t.data().data();
        for (std::size_t b = 0; b < B; ++b) {
            std::copy(pt + b * C * plane, pt + (b + 1) * C * plane,
                      po + (b * total_c + c_off) * plane);
        }
        c_off += C;
    }

    std::vector<const Tensor<T>*> ptrs;
    for (const auto& t : parts) ptrs.push_back(&t);
    Tape<T>* tape = Tape<T>::current();
    bool any = false;
    if (tape) {
        for (const auto* t : ptrs) {
            if (t->participates()) {
                t->engage_grad();
                any = true;
            }
        }
    }
    if (any) {
        out.engage_grad();
        std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
        std::vector<bool> want;
        std::vector<std::size_t> chans;
        for (const auto* t : ptrs) {
            impls.push_back(t->impl());
            want.push_back(t->participates());
            chans.push_back(t->shape()[1]);
        }
        tape->record([impls, want, chans, oi = out.impl(), B, total_c, plane] {
            std::size_t off = 0;
            for (std::size_t k = 0; k < impls.size(); ++k) {
                const std::size_t C = chans[k];
                if (want[k]) {
                    for (std::size_t b = 0; b < B; ++b) {
                        const T* go = oi->grad.data() + (b * total_c + off) * plane;
                        T* gi = impls[k]->grad.data() + b * C * plane;
                        for (std::size_t i = 0; i < C * plane; ++i) gi[i] += go[i];
                    }
                }
                off += C;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v
// q [B,h,Nq,d], k/v [B,h,Nk,d] -> [B,h,Nq,d]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    const std::size_t d = q.shape().back();
    Tensor<T> scores = matmul(q, transpose_last(k));
    scores = mul_scalar(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    Tensor<T> attn = softmax_lastdim(scores);
    return matmul(attn, v);
}

// [B,N,C] -> [B,h,N,C/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[2] % heads != 0) {
        throw ShapeError("split_heads: " + shape_str(s) + " not divisible into " + std::to_string(heads) +
                         " heads");
    }
    Tensor<T> r = reshape(x, {s[0], s[1], heads, s[2] / heads});
    return permute(r, {0, 2, 1, 3});
}

// [B,h,N,dh] -> [B,N,h*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    const Shape& s = x.shape();
    Tensor<T> r = permute(x, {0, 2, 1, 3});
    return reshape(r, {s[0], s[2], s[1] * s[3]});
}

}  // namespace atrouslab
