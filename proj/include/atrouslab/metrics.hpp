// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics on binary masks: Dice similarity coefficient and the
// exact (not percentile) Hausdorff distance between mask boundaries.
//
// Boundary definition: a foreground pixel lies on the boundary if it touches
// the image border or has at least one background 4-neighbor. Directed
// distances are computed with an exact squared Euclidean distance transform
// (Felzenszwalb-Huttenlocher lower envelopes), so results match an all-pairs
// scan bit for bit.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "atrouslab/tensor.hpp"

namespace atrouslab {

template <typename T>
void validate_binary_mask(const Tensor<T>& m) {
    if (m.dim() != 2) throw ValidationError("mask must be 2-D, got " + shape_str(m.shape()));
    for (T v : m.data()) {
        if (v != T(0) && v != T(1)) throw ValidationError("mask must be strictly binary");
    }
}

template <typename T>
Tensor<T> binarize(const Tensor<T>& prob, double threshold = 0.5) {
    Tensor<T> out = Tensor<T>::zeros(prob.shape());
    for (std::size_t i = 0; i < prob.numel(); ++i) {
        out.data()[i] = static_cast<double>(prob.data()[i]) >= threshold ? T(1) : T(0);
    }
    return out;
}

// 2|P n T| / (|P| + |T|); both empty counts as perfect agreement (1)
template <typename T>
double dsc(const Tensor<T>& pred, const Tensor<T>& gt) {
    validate_binary_mask(pred);
    validate_binary_mask(gt);
    if (pred.shape() != gt.shape()) {
        throw ValidationError("dsc shapes differ: " + shape_str(pred.shape()) + " vs " +
                              shape_str(gt.shape()));
    }
    std::size_t inter = 0, p_count = 0, t_count = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const bool a = pred.data()[i] == T(1), b = gt.data()[i] == T(1);
        inter += a && b;
        p_count += a;
        t_count += b;
    }
    if (p_count + t_count == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p_count + t_count);
}

template <typename T>
std::vector<std::pair<std::size_t, std::size_t>> boundary_pixels(const Tensor<T>& mask) {
    validate_binary_mask(mask);
    const std::size_t H = mask.shape()[0], W = mask.shape()[1];
    const auto& m = mask.data();
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            if (m[y * W + x] != T(1)) continue;
            const bool border = y == 0 || x == 0 || y == H - 1 || x == W - 1;
            const bool bg = (y > 0 && m[(y - 1) * W + x] == T(0)) ||
                            (y + 1 < H && m[(y + 1) * W + x] == T(0)) ||
                            (x > 0 && m[y * W + x - 1] == T(0)) ||
                            (x + 1 < W && m[y * W + x + 1] == T(0));
            if (border || bg) out.emplace_back(y, x);
        }
    }
    return out;
}

namespace detail {

inline constexpr double kEdtInf = 1e20;

// 1-D squared distance transform, lower envelope of parabolas
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                   std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    int k = 0;
    v[0] = 0;
    z[0] = -kEdtInf;
    z[1] = kEdtInf;
    for (int q = 1; q < n; ++q) {
        double s = ((f[q] + q * static_cast<double>(q)) - (f[v[k]] + v[k] * static_cast<double>(v[k]))) /
                   (2.0 * q - 2.0 * v[k]);
        while (s <= z[k]) {
            --k;
            s = ((f[q] + q * static_cast<double>(q)) - (f[v[k]] + v[k] * static_cast<double>(v[k]))) /
                (2.0 * q - 2.0 * v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kEdtInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - static_cast<double>(v[k]);
        d[q] = dq * dq + f[v[k]];
    }
}

// exact squared EDT of a seed set on an H x W grid
inline std::vector<double> edt_2d(std::size_t H, std::size_t W,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& seeds) {
    std::vector<double> grid(H * W, kEdtInf);
    for (const auto& [y, x] : seeds) grid[y * W + x] = 0.0;

    const std::size_t n = std::max(H, W);
    std::vector<double> z(n + 1);
    std::vector<int> v(n);
    // columns first
    {
        std::vector<double> f(H), d(H);
        for (std::size_t x = 0; x < W; ++x) {
            for (std::size_t y = 0; y < H; ++y) f[y] = grid[y * W + x];
            edt_1d(f, d, v, z);
            for (std::size_t y = 0; y < H; ++y) grid[y * W + x] = d[y];
        }
    }
    // then rows
    {
        std::vector<double> f(W), d(W);
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) f[x] = grid[y * W + x];
            edt_1d(f, d, v, z);
            for (std::size_t x = 0; x < W; ++x) grid[y * W + x] = d[x];
        }
    }
    return grid;
}

}  // namespace detail

struct HausdorffResult {
    double distance = 0.0;
    bool sentinel = false;  // true when a boundary was empty
};

// max of the two directed sup-inf Euclidean boundary distances. An empty
// boundary on either side yields the image diagonal as a flagged sentinel.
template <typename T>
HausdorffResult hausdorff(const Tensor<T>& pred, const Tensor<T>& gt) {
    validate_binary_mask(pred);
    validate_binary_mask(gt);
    if (pred.shape() != gt.shape()) {
        throw ValidationError("hausdorff shapes differ: " + shape_str(pred.shape()) + " vs " +
                              shape_str(gt.shape()));
    }
    const std::size_t H = pred.shape()[0], W = pred.shape()[1];
    const auto bp = boundary_pixels(pred);
    const auto bt = boundary_pixels(gt);
    if (bp.empty() || bt.empty()) {
        return {std::sqrt(static_cast<double>(H * H + W * W)), true};
    }
    const auto dt_t = detail::edt_2d(H, W, bt);
    const auto dt_p = detail::edt_2d(H, W, bp);
    double worst = 0.0;
    for (const auto& [y, x] : bp) worst = std::max(worst, dt_t[y * W + x]);
    for (const auto& [y, x] : bt) worst = std::max(worst, dt_p[y * W + x]);
    return {std::sqrt(worst), false};
}

}  // namespace atrouslab
