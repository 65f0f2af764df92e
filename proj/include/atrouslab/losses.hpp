// SPDX-License-Identifier: Apache-2.0
//
// Training objective: binary cross-entropy plus Dice loss, unweighted sum.
// Probabilities are clamped to [kLogClampEps, 1 - kLogClampEps] before any
// log. The Dice ratio is smoothed in numerator and denominator by
// kDiceSmooth, which makes the all-empty case come out as exactly zero loss.

#pragma once

#include "atrouslab/tensor.hpp"

namespace atrouslab {

inline constexpr double kLogClampEps = 1e-7;
inline constexpr double kDiceSmooth = 1e-9;

template <typename T>
void validate_pred_pair(const Tensor<T>& p, const Tensor<T>& t) {
    if (p.shape() != t.shape()) {
        throw ValidationError("prediction " + shape_str(p.shape()) + " and target " +
                              shape_str(t.shape()) + " differ");
    }
    for (T v : t.data()) {
        if (v != T(0) && v != T(1)) {
            throw ValidationError("target must be strictly binary");
        }
    }
}

// -(1/M) sum [t log p + (1-t) log(1-p)]
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& t) {
    validate_pred_pair(p, t);
    Tensor<T> pc = clamp(p, static_cast<T>(kLogClampEps), static_cast<T>(1.0 - kLogClampEps));
    Tensor<T> one = Tensor<T>::full(p.shape(), T(1));
    Tensor<T> pos = mul(t, log_op(pc));
    Tensor<T> negv = mul(sub(one, t), log_op(sub(one, pc)));
    return neg(mean_all(add(pos, negv)));
}

// 1 - (2 sum(t p) + s) / (sum(t^2) + sum(p^2) + s)
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& t) {
    validate_pred_pair(p, t);
    Tensor<T> num = sum_all(mul(t, p));
    Tensor<T> den = add(sum_all(mul(t, t)), sum_all(mul(p, p)));
    Tensor<T> ratio = div(add_scalar(mul_scalar(num, T(2)), static_cast<T>(kDiceSmooth)),
                          add_scalar(den, static_cast<T>(kDiceSmooth)));
    return add_scalar(neg(ratio), T(1));
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& p, const Tensor<T>& t) {
    return add(dice_loss(p, t), bce_loss(p, t));
}

// Batch objective: BCE over every pixel plus the batch mean of per-sample
// Dice losses. p and t are [B, ...]; Dice statistics are taken per sample.
template <typename T>
Tensor<T> segmentation_loss(const Tensor<T>& p, const Tensor<T>& t) {
    validate_pred_pair(p, t);
    const std::size_t B = p.shape()[0];
    const std::size_t M = p.numel() / B;
    Tensor<T> pf = reshape(p, {B, M});
    Tensor<T> tf = reshape(t, {B, M});
    Tensor<T> num = sum_tail(mul(tf, pf), 1);                              // [B]
    Tensor<T> den = add(sum_tail(mul(tf, tf), 1), sum_tail(mul(pf, pf), 1));
    Tensor<T> ratio = div(add_scalar(mul_scalar(num, T(2)), static_cast<T>(kDiceSmooth)),
                          add_scalar(den, static_cast<T>(kDiceSmooth)));
    Tensor<T> dice = add_scalar(neg(mean_all(ratio)), T(1));
    return add(dice, bce_loss(pf, tf));
}

}  // namespace atrouslab
