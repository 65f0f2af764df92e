// SPDX-License-Identifier: Apache-2.0
//
// Promptable segmentation model at desk scale: a frozen patch-embedding ViT
// encoder whose attention q/v projections carry optional AtrousLoRA adapters,
// a frozen bounding-box prompt encoder (sinusoidal corner encoding plus
// learned corner-type embeddings), and a trainable two-layer cross-attention
// mask decoder with transposed-convolution upsampling.

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "atrouslab/peft.hpp"

namespace atrouslab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct MiniVitConfig {
    std::size_t img_size = 64;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 96;
    std::size_t depth = 4;
    std::size_t heads = 4;
    double mlp_ratio = 4.0;

    void validate() const {
        if (img_size == 0 || patch_size == 0 || img_size % patch_size != 0) {
            throw ConfigError("img_size must be a positive multiple of patch_size");
        }
        if (heads == 0 || embed_dim % heads != 0) {
            throw ConfigError("embed_dim must be divisible by heads");
        }
    }
    std::size_t grid() const { return img_size / patch_size; }
    std::size_t tokens() const { return grid() * grid(); }
};

struct ModelConfig {
    MiniVitConfig vit;
    std::size_t corner_embed_dim = 96;
    std::size_t decoder_dim = 32;
    std::size_t decoder_heads = 2;
    double decoder_mlp_ratio = 4.0;
    std::size_t lora_rank = 4;  // 0 disables adapters entirely
    std::vector<std::size_t> rates = {1, 6, 12, 18};
    bool adapter_attention = true;  // false: plain LoRA bottleneck

    void validate() const {
        vit.validate();
        if (corner_embed_dim % 4 != 0) throw ConfigError("corner_embed_dim must be divisible by 4");
        if (decoder_dim % 4 != 0 || decoder_dim % decoder_heads != 0) {
            throw ConfigError("decoder_dim must be divisible by 4 and by decoder_heads");
        }
        if (lora_rank >= vit.embed_dim) throw ConfigError("lora_rank must be < embed_dim");
    }
    std::size_t decoder_native() const { return vit.grid() * 4; }
};

inline void to_json(json& j, const MiniVitConfig& c) {
    j = json{{"img_size", c.img_size},   {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
             {"depth", c.depth},         {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio}};
}
inline void from_json(const json& j, MiniVitConfig& c) {
    c.img_size = j.value("img_size", c.img_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}
inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"vit", c.vit},
             {"corner_embed_dim", c.corner_embed_dim},
             {"decoder_dim", c.decoder_dim},
             {"decoder_heads", c.decoder_heads},
             {"decoder_mlp_ratio", c.decoder_mlp_ratio},
             {"lora_rank", c.lora_rank},
             {"rates", c.rates},
             {"adapter_attention", c.adapter_attention}};
}
inline void from_json(const json& j, ModelConfig& c) {
    if (j.contains("vit")) c.vit = j.at("vit").get<MiniVitConfig>();
    c.corner_embed_dim = j.value("corner_embed_dim", c.corner_embed_dim);
    c.decoder_dim = j.value("decoder_dim", c.decoder_dim);
    c.decoder_heads = j.value("decoder_heads", c.decoder_heads);
    c.decoder_mlp_ratio = j.value("decoder_mlp_ratio", c.decoder_mlp_ratio);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.rates = j.value("rates", c.rates);
    c.adapter_attention = j.value("adapter_attention", c.adapter_attention);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <typename T>
struct VitBlock {
    LayerNormParams<T> ln1, ln2;
    LinearParams<T> q, k, v, o;
    LinearParams<T> fc1, fc2;

    static VitBlock init(std::size_t dim, std::size_t hidden, Rng& rng) {
        VitBlock b;
        b.ln1 = LayerNormParams<T>::init(dim);
        b.ln2 = LayerNormParams<T>::init(dim);
        b.q = LinearParams<T>::init(dim, dim, rng, true, true);
        b.k = LinearParams<T>::init(dim, dim, rng, true, true);
        b.v = LinearParams<T>::init(dim, dim, rng, true, true);
        b.o = LinearParams<T>::init(dim, dim, rng, true, true);
        b.fc1 = LinearParams<T>::init(dim, hidden, rng, true, true);
        b.fc2 = LinearParams<T>::init(hidden, dim, rng, true, true);
        // the backbone is entirely frozen, layer norms included
        b.ln1.gamma.set_requires_grad(false);
        b.ln1.beta.set_requires_grad(false);
        b.ln2.gamma.set_requires_grad(false);
        b.ln2.beta.set_requires_grad(false);
        return b;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        ln1.collect(prefix + ".ln1", out);
        ln2.collect(prefix + ".ln2", out);
        q.collect(prefix + ".q", out);
        k.collect(prefix + ".k", out);
        v.collect(prefix + ".v", out);
        o.collect(prefix + ".o", out);
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

template <typename T>
struct MiniVit {
    MiniVitConfig cfg;
    LinearParams<T> patch_embed;  // [embed, 3*p*p], frozen
    Tensor<T> pos_embed;          // [N, embed], frozen
    std::vector<VitBlock<T>> blocks;

    static MiniVit init(const MiniVitConfig& cfg, Rng& rng) {
        cfg.validate();
        MiniVit m;
        m.cfg = cfg;
        const std::size_t pp = 3 * cfg.patch_size * cfg.patch_size;
        m.patch_embed = LinearParams<T>::init(pp, cfg.embed_dim, rng, true, true);
        m.pos_embed = Tensor<T>::uniform({cfg.tokens(), cfg.embed_dim}, -0.1, 0.1, rng, false);
        const std::size_t hidden = static_cast<std::size_t>(cfg.mlp_ratio * cfg.embed_dim);
        for (std::size_t i = 0; i < cfg.depth; ++i) {
            m.blocks.push_back(VitBlock<T>::init(cfg.embed_dim, hidden, rng));
        }
        return m;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        patch_embed.collect(prefix + ".patch_embed", out);
        out.push_back({prefix + ".pos_embed", pos_embed});
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].collect(prefix + ".block" + std::to_string(i), out);
        }
    }
};

// [B,3,S,S] -> [B,N,3*p*p], row-major within a patch
template <typename T>
Tensor<T> patchify(const Tensor<T>& img, std::size_t patch) {
    const Shape& s = img.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != s[3] || s[2] % patch != 0) {
        throw ShapeError("patchify expects [B,3,S,S] with S divisible by patch, got " + shape_str(s));
    }
    const std::size_t B = s[0], S = s[2], g = S / patch;
    Tensor<T> r = reshape(img, {B, 3, g, patch, g, patch});
    Tensor<T> p = permute(r, {0, 2, 4, 1, 3, 5});  // [B,gy,gx,3,py,px]
    return reshape(p, {B, g * g, 3 * patch * patch});
}

// Adapters are indexed 2*block for the query projection and 2*block + 1 for
// the value projection; entries may be empty (frozen projection only).
template <typename T>
Tensor<T> encode_image(const Tensor<T>& img, const MiniVit<T>& vit,
                       const std::vector<std::optional<AtrousLoraAdapter<T>>>& adapters) {
    const Shape& s = img.shape();
    if (s.size() != 4 || s[2] != vit.cfg.img_size || s[3] != vit.cfg.img_size) {
        throw ShapeError("encode_image expects [B,3," + std::to_string(vit.cfg.img_size) + "," +
                         std::to_string(vit.cfg.img_size) + "], got " + shape_str(s));
    }
    if (!adapters.empty() && adapters.size() != 2 * vit.blocks.size()) {
        throw ConfigError("adapter list must hold q and v entries for every block");
    }
    Tensor<T> x = linear(patchify(img, vit.cfg.patch_size), vit.patch_embed);
    x = add(x, vit.pos_embed);  // [N,embed] broadcasts over the batch
    const std::size_t heads = vit.cfg.heads;
    for (std::size_t i = 0; i < vit.blocks.size(); ++i) {
        const VitBlock<T>& blk = vit.blocks[i];
        Tensor<T> h = layer_norm(x, blk.ln1);
        const auto& ad_q = adapters.empty() ? std::optional<AtrousLoraAdapter<T>>{} : adapters[2 * i];
        const auto& ad_v = adapters.empty() ? std::optional<AtrousLoraAdapter<T>>{} : adapters[2 * i + 1];
        Tensor<T> qt = ad_q ? atrous_lora_forward(h, *ad_q) : linear(h, blk.q);
        Tensor<T> kt = linear(h, blk.k);
        Tensor<T> vt = ad_v ? atrous_lora_forward(h, *ad_v) : linear(h, blk.v);
        Tensor<T> attn = softmax_attention(split_heads(qt, heads), split_heads(kt, heads),
                                           split_heads(vt, heads));
        x = add(x, linear(merge_heads(attn), blk.o));
        Tensor<T> h2 = layer_norm(x, blk.ln2);
        x = add(x, linear(gelu(linear(h2, blk.fc1)), blk.fc2));
    }
    return x;
}

// ---------------------------------------------------------------------------
// Prompt encoder
// ---------------------------------------------------------------------------

struct BBoxPrompt {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    void validate(double img_size) const {
        if (!(0 <= x0 && x0 < x1 && x1 <= img_size) || !(0 <= y0 && y0 < y1 && y1 <= img_size)) {
            throw ValidationError("degenerate or out-of-range box [" + std::to_string(x0) + "," +
                                  std::to_string(y0) + "," + std::to_string(x1) + "," +
                                  std::to_string(y1) + "] for image size " + std::to_string(img_size));
        }
    }
};

template <typename T>
struct PromptEncoderParams {
    std::size_t embed_dim = 96;
    Tensor<T> corner_embed;  // [2, embed_dim], frozen corner-type embeddings

    static PromptEncoderParams init(std::size_t embed_dim, Rng& rng) {
        if (embed_dim % 4 != 0) throw ConfigError("prompt embed_dim must be divisible by 4");
        PromptEncoderParams p;
        p.embed_dim = embed_dim;
        p.corner_embed = Tensor<T>::uniform({2, embed_dim}, -1.0, 1.0, rng, false);
        return p;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".corner_embed", corner_embed});
    }
};

// Transformer sinusoid over one normalized coordinate, d dims:
// pe[2j] = sin(c / 10000^(2j/d)), pe[2j+1] = cos(same).
inline void sinusoid_encode(double coord, std::size_t d, double* out) {
    for (std::size_t j = 0; 2 * j < d; ++j) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
        out[2 * j] = std::sin(coord * freq);
        out[2 * j + 1] = std::cos(coord * freq);
    }
}

// [2, embed_dim]: x-sinusoid in the first half, y-sinusoid in the second,
// plus the corner-type embedding. Deterministic and frozen.
template <typename T>
Tensor<T> encode_prompt(const BBoxPrompt& box, const PromptEncoderParams<T>& p, double img_size) {
    box.validate(img_size);
    const std::size_t C = p.embed_dim, half = C / 2;
    Tensor<T> out = Tensor<T>::zeros({2, C});
    const double corners[2][2] = {{box.x0 / img_size, box.y0 / img_size},
                                  {box.x1 / img_size, box.y1 / img_size}};
    std::vector<double> buf(half);
    for (std::size_t i = 0; i < 2; ++i) {
        sinusoid_encode(corners[i][0], half, buf.data());
        for (std::size_t j = 0; j < half; ++j) {
            out.data()[i * C + j] = static_cast<T>(buf[j]) + p.corner_embed.data()[i * C + j];
        }
        sinusoid_encode(corners[i][1], half, buf.data());
        for (std::size_t j = 0; j < half; ++j) {
            out.data()[i * C + half + j] =
                static_cast<T>(buf[j]) + p.corner_embed.data()[i * C + half + j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mask decoder
// ---------------------------------------------------------------------------

template <typename T>
struct DecoderLayer {
    LayerNormParams<T> ln_t1, ln_t2, ln_i;
    LinearParams<T> t2i_q, t2i_k, t2i_v, t2i_o;  // prompt tokens attend to image
    LinearParams<T> fc1, fc2;                    // MLP on prompt tokens
    LinearParams<T> i2t_q, i2t_k, i2t_v, i2t_o;  // image tokens attend to prompt

    static DecoderLayer init(std::size_t dim, std::size_t hidden, Rng& rng) {
        DecoderLayer l;
        l.ln_t1 = LayerNormParams<T>::init(dim);
        l.ln_t2 = LayerNormParams<T>::init(dim);
        l.ln_i = LayerNormParams<T>::init(dim);
        l.t2i_q = LinearParams<T>::init(dim, dim, rng);
        l.t2i_k = LinearParams<T>::init(dim, dim, rng);
        l.t2i_v = LinearParams<T>::init(dim, dim, rng);
        l.t2i_o = LinearParams<T>::init(dim, dim, rng);
        l.fc1 = LinearParams<T>::init(dim, hidden, rng);
        l.fc2 = LinearParams<T>::init(hidden, dim, rng);
        l.i2t_q = LinearParams<T>::init(dim, dim, rng);
        l.i2t_k = LinearParams<T>::init(dim, dim, rng);
        l.i2t_v = LinearParams<T>::init(dim, dim, rng);
        l.i2t_o = LinearParams<T>::init(dim, dim, rng);
        return l;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        ln_t1.collect(prefix + ".ln_t1", out);
        ln_t2.collect(prefix + ".ln_t2", out);
        ln_i.collect(prefix + ".ln_i", out);
        t2i_q.collect(prefix + ".t2i_q", out);
        t2i_k.collect(prefix + ".t2i_k", out);
        t2i_v.collect(prefix + ".t2i_v", out);
        t2i_o.collect(prefix + ".t2i_o", out);
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
        i2t_q.collect(prefix + ".i2t_q", out);
        i2t_k.collect(prefix + ".i2t_k", out);
        i2t_v.collect(prefix + ".i2t_v", out);
        i2t_o.collect(prefix + ".i2t_o", out);
    }
};

template <typename T>
struct MaskDecoderParams {
    std::size_t dim = 32, heads = 2, grid = 8;
    LinearParams<T> img_proj;  // embed_dim -> dim
    LinearParams<T> tok_proj;  // corner_embed_dim -> dim
    std::vector<DecoderLayer<T>> layers;
    Conv2dParams<T> up1, up2;   // transposed, kernel 4 stride 2 pad 1
    LinearParams<T> head1, head2;  // token MLP down to dim/4
    Tensor<T> logit_bias;          // [1]

    static MaskDecoderParams init(std::size_t embed_dim, std::size_t corner_dim, std::size_t dim,
                                  std::size_t heads, double mlp_ratio, std::size_t grid, Rng& rng) {
        MaskDecoderParams d;
        d.dim = dim;
        d.heads = heads;
        d.grid = grid;
        d.img_proj = LinearParams<T>::init(embed_dim, dim, rng);
        d.tok_proj = LinearParams<T>::init(corner_dim, dim, rng);
        const std::size_t hidden = static_cast<std::size_t>(mlp_ratio * dim);
        d.layers.push_back(DecoderLayer<T>::init(dim, hidden, rng));
        d.layers.push_back(DecoderLayer<T>::init(dim, hidden, rng));
        d.up1 = make_up(dim, dim / 2, rng);
        d.up2 = make_up(dim / 2, dim / 4, rng);
        d.head1 = LinearParams<T>::init(dim, dim / 2, rng);
        d.head2 = LinearParams<T>::init(dim / 2, dim / 4, rng);
        d.logit_bias = Tensor<T>::zeros({1}, true);
        return d;
    }

    std::size_t native() const { return grid * 4; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        img_proj.collect(prefix + ".img_proj", out);
        tok_proj.collect(prefix + ".tok_proj", out);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].collect(prefix + ".layer" + std::to_string(i), out);
        }
        up1.collect(prefix + ".up1", out);
        up2.collect(prefix + ".up2", out);
        head1.collect(prefix + ".head1", out);
        head2.collect(prefix + ".head2", out);
        out.push_back({prefix + ".logit_bias", logit_bias});
    }

  private:
    static Conv2dParams<T> make_up(std::size_t c_in, std::size_t c_out, Rng& rng) {
        Conv2dParams<T> p;
        const double scale = 1.0 / std::sqrt(static_cast<double>(c_in * 16));
        // transposed orientation: [in, out, kh, kw], bias sized for the output
        p.weight = Tensor<T>::uniform({c_in, c_out, 4, 4}, -scale, scale, rng, true);
        p.bias = Tensor<T>::zeros({c_out}, true);
        p.stride = 2;
        p.padding = 1;
        return p;
    }
};

// prompt_emb is [2, C] (applied to the whole batch) or [B, 2, C]
template <typename T>
Tensor<T> decode_mask(const Tensor<T>& img_emb, const Tensor<T>& prompt_emb,
                      const MaskDecoderParams<T>& d, std::size_t out_size) {
    const Shape& es = img_emb.shape();
    if (es.size() != 3) throw ShapeError("decode_mask expects image embedding [B,N,C], got " + shape_str(es));
    const std::size_t B = es[0], N = es[1];
    if (N != d.grid * d.grid) {
        throw ShapeError("token count " + std::to_string(N) + " does not match decoder grid " +
                         std::to_string(d.grid));
    }
    Tensor<T> prompt_b;
    if (prompt_emb.dim() == 2) {
        Tensor<T> tiled = Tensor<T>::zeros({B, prompt_emb.shape()[0], prompt_emb.shape()[1]});
        for (std::size_t b = 0; b < B; ++b) {
            std::copy(prompt_emb.data().begin(), prompt_emb.data().end(),
                      tiled.data().begin() + b * prompt_emb.numel());
        }
        prompt_b = tiled;
    } else if (prompt_emb.dim() == 3 && prompt_emb.shape()[0] == B) {
        prompt_b = prompt_emb;
    } else {
        throw ShapeError("prompt embedding must be [2,C] or [B,2,C], got " + shape_str(prompt_emb.shape()));
    }

    Tensor<T> x = linear(img_emb, d.img_proj);    // [B,N,dim]
    Tensor<T> tok = linear(prompt_b, d.tok_proj); // [B,2,dim]
    for (const DecoderLayer<T>& l : d.layers) {
        Tensor<T> tq = split_heads(linear(layer_norm(tok, l.ln_t1), l.t2i_q), d.heads);
        Tensor<T> ik = split_heads(linear(x, l.t2i_k), d.heads);
        Tensor<T> iv = split_heads(linear(x, l.t2i_v), d.heads);
        tok = add(tok, linear(merge_heads(softmax_attention(tq, ik, iv)), l.t2i_o));
        tok = add(tok, linear(gelu(linear(layer_norm(tok, l.ln_t2), l.fc1)), l.fc2));
        Tensor<T> iq = split_heads(linear(layer_norm(x, l.ln_i), l.i2t_q), d.heads);
        Tensor<T> tk = split_heads(linear(tok, l.i2t_k), d.heads);
        Tensor<T> tv = split_heads(linear(tok, l.i2t_v), d.heads);
        x = add(x, linear(merge_heads(softmax_attention(iq, tk, tv)), l.i2t_o));
    }

    Tensor<T> gridmap = permute(reshape(x, {B, d.grid, d.grid, d.dim}), {0, 3, 1, 2});
    Tensor<T> u = relu(transposed_conv2d(gridmap, d.up1));
    u = relu(transposed_conv2d(u, d.up2));  // [B, dim/4, native, native]

    Tensor<T> tvec = linear(gelu(linear(select_axis1(tok, 0), d.head1)), d.head2);  // [B, dim/4]
    const std::size_t c4 = d.dim / 4, native = d.native();
    Tensor<T> flat = permute(reshape(u, {B, c4, native * native}), {0, 2, 1});
    Tensor<T> logits = matmul(flat, reshape(tvec, {B, c4, 1}));  // [B, native^2, 1]
    logits = add(reshape(logits, {B, std::size_t{1}, native, native}), d.logit_bias);
    return bilinear_resize(sigmoid(logits), out_size, out_size);
}

// ---------------------------------------------------------------------------
// Composed model
// ---------------------------------------------------------------------------

template <typename T>
struct VesselModel {
    ModelConfig cfg;
    MiniVit<T> encoder;
    PromptEncoderParams<T> prompt;
    MaskDecoderParams<T> decoder;
    std::vector<std::optional<AtrousLoraAdapter<T>>> adapters;  // 2*depth, q/v per block

    void set_training(bool training) {
        for (auto& a : adapters) {
            if (a) a->set_training(training);
        }
    }

    void collect(ParamList<T>& out) const {
        encoder.collect("encoder", out);
        prompt.collect("prompt", out);
        decoder.collect("decoder", out);
        for (std::size_t i = 0; i < adapters.size(); ++i) {
            if (adapters[i]) {
                const std::string site = (i % 2 == 0) ? "q" : "v";
                adapters[i]->collect("adapters.block" + std::to_string(i / 2) + "." + site, out);
            }
        }
    }

    ParamList<T> params() const {
        ParamList<T> out;
        collect(out);
        return out;
    }
};

// Frozen backbone and prompt encoder are drawn first, so two builds with the
// same seed share them regardless of adapter settings.
template <typename T>
VesselModel<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    VesselModel<T> m;
    m.cfg = cfg;
    Rng rng(seed);
    m.encoder = MiniVit<T>::init(cfg.vit, rng);
    m.prompt = PromptEncoderParams<T>::init(cfg.corner_embed_dim, rng);
    m.decoder = MaskDecoderParams<T>::init(cfg.vit.embed_dim, cfg.corner_embed_dim, cfg.decoder_dim,
                                           cfg.decoder_heads, cfg.decoder_mlp_ratio, cfg.vit.grid(), rng);
    if (cfg.lora_rank > 0) {
        const std::size_t g = cfg.vit.grid();
        for (std::size_t i = 0; i < cfg.vit.depth; ++i) {
            const VitBlock<T>& blk = m.encoder.blocks[i];
            m.adapters.push_back(AtrousLoraAdapter<T>::init(blk.q, cfg.lora_rank, cfg.rates, g, g, rng,
                                                            cfg.adapter_attention));
            m.adapters.push_back(AtrousLoraAdapter<T>::init(blk.v, cfg.lora_rank, cfg.rates, g, g, rng,
                                                            cfg.adapter_attention));
        }
    }
    return m;
}

template <typename T>
Tensor<T> encode_image(const VesselModel<T>& m, const Tensor<T>& img) {
    return encode_image(img, m.encoder, m.adapters);
}

// Full pipeline on a batch: one box prompt per sample.
template <typename T>
Tensor<T> forward_segment(const VesselModel<T>& m, const Tensor<T>& img,
                          const std::vector<BBoxPrompt>& boxes) {
    const std::size_t B = img.shape()[0];
    if (boxes.size() != B) {
        throw ShapeError("expected " + std::to_string(B) + " box prompts, got " +
                         std::to_string(boxes.size()));
    }
    Tensor<T> emb = encode_image(m, img);
    Tensor<T> prompts = Tensor<T>::zeros({B, 2, m.cfg.corner_embed_dim});
    for (std::size_t b = 0; b < B; ++b) {
        Tensor<T> pe = encode_prompt(boxes[b], m.prompt, static_cast<double>(m.cfg.vit.img_size));
        std::copy(pe.data().begin(), pe.data().end(), prompts.data().begin() + b * pe.numel());
    }
    return decode_mask(emb, prompts, m.decoder, m.cfg.vit.img_size);
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + one TSR1 file per named parameter
// ---------------------------------------------------------------------------

template <typename T>
void save_params(const std::filesystem::path& dir, const ParamList<T>& params, json manifest) {
    std::filesystem::create_directories(dir);
    json plist = json::array();
    for (const auto& p : params) {
        const std::string file = p.name + ".tsr";
        write_tsr(dir / file, p.tensor);
        plist.push_back({{"name", p.name},
                         {"shape", p.tensor.shape()},
                         {"trainable", p.tensor.requires_grad()},
                         {"file", file}});
    }
    manifest["params"] = plist;
    std::ofstream f(dir / "manifest.json");
    if (!f) throw FormatError("cannot write manifest in " + dir.string());
    f << manifest.dump(2) << "\n";
}

inline json read_manifest(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw FormatError("missing manifest.json in " + dir.string());
    json j;
    f >> j;
    return j;
}

// Loads every listed tensor into an already-built registry, by name.
template <typename T>
void load_params(const std::filesystem::path& dir, ParamList<T>& params) {
    const json manifest = read_manifest(dir);
    std::map<std::string, std::string> files;
    for (const auto& e : manifest.at("params")) {
        files[e.at("name").get<std::string>()] = e.at("file").get<std::string>();
    }
    for (auto& p : params) {
        auto it = files.find(p.name);
        if (it == files.end()) throw FormatError("checkpoint is missing parameter " + p.name);
        Tensor<T> loaded = read_tsr<T>(dir / it->second);
        if (loaded.shape() != p.tensor.shape()) {
            throw FormatError("checkpoint shape mismatch for " + p.name + ": " +
                              shape_str(loaded.shape()) + " vs " + shape_str(p.tensor.shape()));
        }
        p.tensor.data() = loaded.data();
    }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const VesselModel<T>& m,
                     json extra = json::object()) {
    json manifest = extra;
    manifest["schema_version"] = 1;
    manifest["format"] = "atrouslab-checkpoint";
    manifest["model"] = m.cfg;
    save_params(dir, m.params(), manifest);
}

template <typename T>
VesselModel<T> load_checkpoint(const std::filesystem::path& dir) {
    const json manifest = read_manifest(dir);
    ModelConfig cfg = manifest.at("model").get<ModelConfig>();
    VesselModel<T> m = build_model<T>(cfg, 0);  // weights are overwritten below
    ParamList<T> params = m.params();
    load_params(dir, params);
    return m;
}

}  // namespace atrouslab
