// SPDX-License-Identifier: Apache-2.0
//
// Parameter-efficient adapters: plain low-rank adapters, atrous spatial
// pyramid pooling, the sigmoid-gated atrous attention module, and the
// composed adapter that routes the low-rank bottleneck through atrous
// attention on the token grid before up-projection.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "atrouslab/layers.hpp"

namespace atrouslab {

// ---------------------------------------------------------------------------
// LoRA: y = W_O x + W_b W_a x with frozen W_O
// ---------------------------------------------------------------------------

template <typename T>
struct LoraAdapter {
    Tensor<T> w_a;  // [r, C_in], trainable
    Tensor<T> w_b;  // [C_out, r], trainable, zero-initialized
    std::size_t rank = 0;

    // w_a ~ U(-1/sqrt(C_in), 1/sqrt(C_in)), w_b = 0, so training starts at
    // exactly the frozen forward.
    static LoraAdapter init(std::size_t rank, std::size_t c_in, std::size_t c_out, Rng& rng) {
        if (rank < 1 || rank >= std::min(c_in, c_out)) {
            throw ConfigError("lora rank " + std::to_string(rank) + " must satisfy 1 <= r < min(" +
                              std::to_string(c_in) + ", " + std::to_string(c_out) + ")");
        }
        LoraAdapter a;
        const double scale = 1.0 / std::sqrt(static_cast<double>(c_in));
        a.w_a = Tensor<T>::uniform({rank, c_in}, -scale, scale, rng, true);
        a.w_b = Tensor<T>::zeros({c_out, rank}, true);
        a.rank = rank;
        return a;
    }

    std::size_t trainable_count() const { return w_a.numel() + w_b.numel(); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".w_a", w_a});
        out.push_back({prefix + ".w_b", w_b});
    }
};

template <typename T>
Tensor<T> lora_forward(const Tensor<T>& x, const LinearParams<T>& base, const LoraAdapter<T>& a) {
    if (base.weight.requires_grad()) {
        throw ConfigError("lora_forward requires a frozen base projection");
    }
    Tensor<T> y = linear(x, base);
    Tensor<T> h = matmul(x, transpose_last(a.w_a));
    Tensor<T> update = matmul(h, transpose_last(a.w_b));
    return add(y, update);
}

// ---------------------------------------------------------------------------
// ASPP: parallel dilated 3x3 branches + projected global-pool branch,
// concatenated, fused by a 1x1 convolution, then BN and ReLU
// ---------------------------------------------------------------------------

template <typename T>
struct AsppModule {
    std::vector<Conv2dParams<T>> branches;  // 3x3, dilation d_i, padding d_i
    Conv2dParams<T> pool_proj;              // 1x1 after global pooling
    Conv2dParams<T> fuse_proj;              // 1x1 over the concatenation
    BatchNormParams<T> fuse_bn;
    std::vector<std::size_t> rates;

    static AsppModule init(std::size_t c_in, std::size_t c_branch, std::size_t c_out,
                           std::vector<std::size_t> rates, Rng& rng) {
        if (rates.empty()) throw ConfigError("aspp requires at least one dilation rate");
        AsppModule m;
        for (std::size_t d : rates) {
            // padding = d keeps every branch at the input's H x W for k = 3
            m.branches.push_back(Conv2dParams<T>::init(c_branch, c_in, 3, rng, d, d, 1));
        }
        m.pool_proj = Conv2dParams<T>::init(c_branch, c_in, 1, rng);
        m.fuse_proj = Conv2dParams<T>::init(c_out, (rates.size() + 1) * c_branch, 1, rng);
        m.fuse_bn = BatchNormParams<T>::init(c_out);
        m.rates = std::move(rates);
        return m;
    }

    std::size_t out_channels() const { return fuse_proj.weight.shape()[0]; }

    void set_training(bool training) { fuse_bn.training = training; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        for (std::size_t i = 0; i < branches.size(); ++i) {
            branches[i].collect(prefix + ".branch" + std::to_string(i), out);
        }
        pool_proj.collect(prefix + ".pool_proj", out);
        fuse_proj.collect(prefix + ".fuse_proj", out);
        fuse_bn.collect(prefix + ".fuse_bn", out);
    }
};

template <typename T>
Tensor<T> aspp_forward(const Tensor<T>& x, const AsppModule<T>& m) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("aspp_forward expects [B,C,H,W], got " + shape_str(s));
    std::vector<Tensor<T>> parts;
    parts.reserve(m.branches.size() + 1);
    for (const auto& branch : m.branches) parts.push_back(dilated_conv2d(x, branch));
    Tensor<T> pooled = dilated_conv2d(global_avg_pool(x), m.pool_proj);
    parts.push_back(bilinear_resize(pooled, s[2], s[3]));
    Tensor<T> fused = dilated_conv2d(concat_channels(parts), m.fuse_proj);
    return relu(batch_norm(fused, m.fuse_bn));
}

// ---------------------------------------------------------------------------
// Atrous attention: gate the ASPP output with a sigmoid map derived from it
// ---------------------------------------------------------------------------

template <typename T>
struct AtrousAttentionModule {
    AsppModule<T> aspp;
    Conv2dParams<T> attn_proj;  // 1x1, C' -> 1

    static AtrousAttentionModule init(std::size_t c_in, std::size_t c_branch, std::size_t c_out,
                                      std::vector<std::size_t> rates, Rng& rng) {
        AtrousAttentionModule m;
        m.aspp = AsppModule<T>::init(c_in, c_branch, c_out, std::move(rates), rng);
        m.attn_proj = Conv2dParams<T>::init(1, c_out, 1, rng);
        return m;
    }

    void set_training(bool training) { aspp.set_training(training); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        aspp.collect(prefix + ".aspp", out);
        attn_proj.collect(prefix + ".attn_proj", out);
    }
};

template <typename T>
Tensor<T> atrous_attention_forward(const Tensor<T>& x, const AtrousAttentionModule<T>& m) {
    Tensor<T> y = aspp_forward(x, m.aspp);
    Tensor<T> gate = sigmoid(dilated_conv2d(y, m.attn_proj));  // [B,1,H,W] in (0,1)
    return mul(y, gate);
}

// ---------------------------------------------------------------------------
// AtrousLoRA: y = W_O x + W_b * AtrousAttention(W_a x), bottleneck activations
// reshaped onto the patch grid for the spatial attention pass
// ---------------------------------------------------------------------------

template <typename T>
struct AtrousLoraAdapter {
    LinearParams<T> base;  // frozen; may share storage with the host projection
    Tensor<T> w_a;         // [r, C_in]
    Tensor<T> w_b;         // [C_out, r]
    std::size_t rank = 0;
    std::optional<AtrousAttentionModule<T>> attention;  // nullopt = plain LoRA bottleneck
    std::size_t grid_h = 0, grid_w = 0;

    static AtrousLoraAdapter init(LinearParams<T> base, std::size_t rank,
                                  const std::vector<std::size_t>& rates, std::size_t grid_h,
                                  std::size_t grid_w, Rng& rng, bool with_attention = true) {
        if (base.weight.requires_grad() || (base.bias && base.bias->requires_grad())) {
            throw ConfigError("atrous-lora base projection must be frozen");
        }
        const std::size_t c_out = base.weight.shape()[0], c_in = base.weight.shape()[1];
        if (rank < 1 || rank >= std::min(c_in, c_out)) {
            throw ConfigError("lora rank " + std::to_string(rank) + " must satisfy 1 <= r < min(" +
                              std::to_string(c_in) + ", " + std::to_string(c_out) + ")");
        }
        AtrousLoraAdapter a;
        a.base = std::move(base);
        const double scale = 1.0 / std::sqrt(static_cast<double>(c_in));
        a.w_a = Tensor<T>::uniform({rank, c_in}, -scale, scale, rng, true);
        a.w_b = Tensor<T>::zeros({c_out, rank}, true);
        a.rank = rank;
        a.grid_h = grid_h;
        a.grid_w = grid_w;
        if (with_attention) {
            a.attention = AtrousAttentionModule<T>::init(rank, rank, rank, rates, rng);
        }
        return a;
    }

    void set_training(bool training) {
        if (attention) attention->set_training(training);
    }

    // base excluded by default: inside a model the host projection owns it
    void collect(const std::string& prefix, ParamList<T>& out, bool include_base = false) const {
        if (include_base) base.collect(prefix + ".base", out);
        out.push_back({prefix + ".w_a", w_a});
        out.push_back({prefix + ".w_b", w_b});
        if (attention) attention->collect(prefix + ".attention", out);
    }
};

template <typename T>
Tensor<T> atrous_lora_forward(const Tensor<T>& x, const AtrousLoraAdapter<T>& a) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ShapeError("atrous_lora_forward expects [B,N,C], got " + shape_str(s));
    Tensor<T> y = linear(x, a.base);
    Tensor<T> h = matmul(x, transpose_last(a.w_a));  // [B,N,r]
    Tensor<T> g = h;
    if (a.attention) {
        const std::size_t B = s[0], N = s[1];
        if (N != a.grid_h * a.grid_w) {
            throw ShapeError("token count " + std::to_string(N) + " does not match grid " +
                             std::to_string(a.grid_h) + "x" + std::to_string(a.grid_w));
        }
        Tensor<T> grid = permute(reshape(h, {B, a.grid_h, a.grid_w, a.rank}), {0, 3, 1, 2});
        Tensor<T> attended = atrous_attention_forward(grid, *a.attention);
        g = reshape(permute(attended, {0, 2, 3, 1}), {B, N, a.rank});
    }
    Tensor<T> update = matmul(g, transpose_last(a.w_b));
    return add(y, update);
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamCount {
    std::size_t total = 0;
    std::size_t trainable = 0;
    double ratio() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total); }
};

template <typename T>
ParamCount count_parameters(const ParamList<T>& params) {
    ParamCount c;
    for (const auto& p : params) {
        c.total += p.tensor.numel();
        if (p.tensor.requires_grad()) c.trainable += p.tensor.numel();
    }
    return c;
}

}  // namespace atrouslab
