// SPDX-License-Identifier: Apache-2.0
//
// Synthetic vessel slices: smooth random-walk centerlines rasterized as
// tubes over a noisy background, pushed through the CT-style preprocessing
// pipeline (window normalization, small-object removal, resize, channel
// triplication). Samples are written as shards of TSR1 files plus a JSON
// index and round-trip losslessly.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "atrouslab/layers.hpp"
#include "atrouslab/metrics.hpp"
#include "atrouslab/model.hpp"

namespace atrouslab {

struct WindowSpec {
    double width = 400.0;  // HU
    double level = 40.0;   // HU
};

struct SynthConfig {
    std::size_t size = 64;
    std::size_t count_min = 1, count_max = 2;
    double walk_step_std = 0.18;   // radians per step
    double radius_min = 3.0, radius_max = 6.0;
    double contrast = 0.45;
    double background = 0.3;
    double noise_std = 0.08;
    double branch_prob = 0.02;     // per step
    WindowSpec window;
    std::size_t min_object_pixels = 8;

    void validate() const {
        if (size < 8) throw ConfigError("synth size must be >= 8");
        if (radius_min < 1.0 || radius_max < radius_min) {
            throw ConfigError("radius range must satisfy 1 <= min <= max");
        }
        if (radius_max * 2.0 >= static_cast<double>(size)) {
            throw GenerationError("vessel cannot fit: radius " + std::to_string(radius_max) +
                                  " too large for size " + std::to_string(size));
        }
        if (count_min < 1 || count_max < count_min) throw ConfigError("bad vessel count range");
        if (window.width <= 0) throw ConfigError("window width must be positive");
    }

    json to_json() const {
        return json{{"size", size},
                    {"count_min", count_min},
                    {"count_max", count_max},
                    {"walk_step_std", walk_step_std},
                    {"radius_min", radius_min},
                    {"radius_max", radius_max},
                    {"contrast", contrast},
                    {"background", background},
                    {"noise_std", noise_std},
                    {"branch_prob", branch_prob},
                    {"window_width", window.width},
                    {"window_level", window.level},
                    {"min_object_pixels", min_object_pixels}};
    }
    static SynthConfig from_json(const json& j) {
        SynthConfig c;
        c.size = j.value("size", c.size);
        c.count_min = j.value("count_min", c.count_min);
        c.count_max = j.value("count_max", c.count_max);
        c.walk_step_std = j.value("walk_step_std", c.walk_step_std);
        c.radius_min = j.value("radius_min", c.radius_min);
        c.radius_max = j.value("radius_max", c.radius_max);
        c.contrast = j.value("contrast", c.contrast);
        c.background = j.value("background", c.background);
        c.noise_std = j.value("noise_std", c.noise_std);
        c.branch_prob = j.value("branch_prob", c.branch_prob);
        c.window.width = j.value("window_width", c.window.width);
        c.window.level = j.value("window_level", c.window.level);
        c.min_object_pixels = j.value("min_object_pixels", c.min_object_pixels);
        return c;
    }
};

template <typename T>
struct SegSample {
    Tensor<T> image;  // [3,S,S] in [0,1], all channels identical
    Tensor<T> mask;   // [S,S] binary
    BBoxPrompt bbox;  // tight box around the mask
    std::string id;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Preprocessing ops (the 2-D slice path)
// ---------------------------------------------------------------------------

// linear map of [level - width/2, level + width/2] onto [0,1], clipped
template <typename T>
Tensor<T> window_normalize(const Tensor<T>& hu, const WindowSpec& w) {
    if (w.width <= 0) throw ConfigError("window width must be positive");
    const double lo = w.level - w.width / 2.0;
    Tensor<T> out = Tensor<T>::zeros(hu.shape());
    for (std::size_t i = 0; i < hu.numel(); ++i) {
        double v = (static_cast<double>(hu.data()[i]) - lo) / w.width;
        out.data()[i] = static_cast<T>(v < 0 ? 0 : (v > 1 ? 1 : v));
    }
    return out;
}

// drops 8-connected components with area < min_pixels (union-find labeling)
template <typename T>
Tensor<T> remove_small_objects(const Tensor<T>& mask, std::size_t min_pixels) {
    validate_binary_mask(mask);
    const std::size_t H = mask.shape()[0], W = mask.shape()[1];
    const auto& m = mask.data();
    std::vector<std::size_t> parent(H * W);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    std::function<std::size_t(std::size_t)> find = [&](std::size_t i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    };
    auto unite = [&](std::size_t a, std::size_t b) { parent[find(a)] = find(b); };

    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            if (m[y * W + x] != T(1)) continue;
            // connect to already-visited neighbors (W, NW, N, NE)
            if (x > 0 && m[y * W + x - 1] == T(1)) unite(y * W + x, y * W + x - 1);
            if (y > 0) {
                if (x > 0 && m[(y - 1) * W + x - 1] == T(1)) unite(y * W + x, (y - 1) * W + x - 1);
                if (m[(y - 1) * W + x] == T(1)) unite(y * W + x, (y - 1) * W + x);
                if (x + 1 < W && m[(y - 1) * W + x + 1] == T(1)) unite(y * W + x, (y - 1) * W + x + 1);
            }
        }
    }
    std::vector<std::size_t> area(H * W, 0);
    for (std::size_t i = 0; i < H * W; ++i) {
        if (m[i] == T(1)) ++area[find(i)];
    }
    Tensor<T> out = Tensor<T>::zeros(mask.shape());
    for (std::size_t i = 0; i < H * W; ++i) {
        if (m[i] == T(1) && area[find(i)] >= min_pixels) out.data()[i] = T(1);
    }
    return out;
}

// bilinear resize to target x target, then triplicate the channel
template <typename T>
Tensor<T> to_model_input(const Tensor<T>& slice, std::size_t target) {
    if (slice.dim() != 2) throw ShapeError("to_model_input expects [S,S], got " + shape_str(slice.shape()));
    if (target < 1) throw ConfigError("target must be >= 1");
    const std::size_t S = slice.shape()[0];
    Tensor<T> plane = reshape(slice, {std::size_t{1}, std::size_t{1}, S, slice.shape()[1]});
    Tensor<T> resized = bilinear_resize(plane, target, target);
    Tensor<T> out = Tensor<T>::zeros({3, target, target});
    for (std::size_t c = 0; c < 3; ++c) {
        std::copy(resized.data().begin(), resized.data().end(),
                  out.data().begin() + c * target * target);
    }
    return out;
}

inline BBoxPrompt tight_bbox(const std::vector<float>& mask, std::size_t H, std::size_t W) {
    std::size_t x0 = W, y0 = H, x1 = 0, y1 = 0;
    bool any = false;
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            if (mask[y * W + x] == 1.0f) {
                any = true;
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
        }
    }
    if (!any) throw GenerationError("cannot bound an empty mask");
    return {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 + 1),
            static_cast<double>(y1 + 1)};
}

// each coordinate shifted by a uniform integer in [-max_shift, max_shift],
// clipped to the image; degenerate results are retried, then given up on
inline BBoxPrompt perturb_bbox(const BBoxPrompt& box, int max_shift, double img_size, Rng& rng) {
    if (max_shift < 0) throw ConfigError("max_shift must be >= 0");
    if (max_shift == 0) return box;
    for (int attempt = 0; attempt < 10; ++attempt) {
        BBoxPrompt p;
        p.x0 = std::clamp(box.x0 + static_cast<double>(rng.uniform_int(-max_shift, max_shift)), 0.0, img_size);
        p.y0 = std::clamp(box.y0 + static_cast<double>(rng.uniform_int(-max_shift, max_shift)), 0.0, img_size);
        p.x1 = std::clamp(box.x1 + static_cast<double>(rng.uniform_int(-max_shift, max_shift)), 0.0, img_size);
        p.y1 = std::clamp(box.y1 + static_cast<double>(rng.uniform_int(-max_shift, max_shift)), 0.0, img_size);
        if (p.x0 < p.x1 && p.y0 < p.y1) return p;
    }
    return box;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

namespace detail {

// stamps a disk with a half-pixel antialiased rim into the intensity field
// and a hard disk into the mask
inline void stamp(std::vector<double>& field, std::vector<float>& mask, std::size_t S, double cy,
                  double cx, double radius) {
    const int lo_y = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
    const int hi_y = std::min(static_cast<int>(S) - 1, static_cast<int>(std::ceil(cy + radius + 1)));
    const int lo_x = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
    const int hi_x = std::min(static_cast<int>(S) - 1, static_cast<int>(std::ceil(cx + radius + 1)));
    for (int y = lo_y; y <= hi_y; ++y) {
        for (int x = lo_x; x <= hi_x; ++x) {
            const double d = std::hypot(y - cy, x - cx);
            const double cover = std::clamp(radius + 0.5 - d, 0.0, 1.0);
            if (cover > 0) {
                double& cell = field[static_cast<std::size_t>(y) * S + x];
                cell = std::max(cell, cover);
                if (d <= radius) mask[static_cast<std::size_t>(y) * S + x] = 1.0f;
            }
        }
    }
}

inline void draw_vessel(std::vector<double>& field, std::vector<float>& mask, const SynthConfig& cfg,
                        Rng& rng, double y, double x, double angle, double radius, std::size_t steps,
                        int branch_depth) {
    const double S = static_cast<double>(cfg.size);
    for (std::size_t t = 0; t < steps; ++t) {
        stamp(field, mask, cfg.size, y, x, radius);
        angle += rng.normal(0.0, cfg.walk_step_std);
        y += std::sin(angle);
        x += std::cos(angle);
        if (y < -radius || y > S + radius || x < -radius || x > S + radius) break;
        if (branch_depth > 0 && rng.uniform() < cfg.branch_prob) {
            const double split = angle + (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(0.5, 1.1);
            draw_vessel(field, mask, cfg, rng, y, x, split, std::max(1.0, radius * 0.7), steps / 2,
                        branch_depth - 1);
        }
    }
}

}  // namespace detail

// Deterministic per (config, seed). The raw slice is mapped into HU space and
// recovered through window_normalize so the full preprocessing path runs on
// every sample.
template <typename T>
SegSample<T> generate_sample(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t S = cfg.size;
    for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
        Rng rng(seed + attempt * 0x51ed270b0741d668ull);
        std::vector<double> field(S * S, 0.0);
        std::vector<float> mask(S * S, 0.0f);
        const std::size_t vessels = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(cfg.count_min), static_cast<std::int64_t>(cfg.count_max)));
        for (std::size_t v = 0; v < vessels; ++v) {
            const double margin = cfg.radius_max + 2.0;
            const double y = rng.uniform(margin, static_cast<double>(S) - margin);
            const double x = rng.uniform(margin, static_cast<double>(S) - margin);
            const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            const double radius = rng.uniform(cfg.radius_min, cfg.radius_max);
            const std::size_t steps = static_cast<std::size_t>(
                rng.uniform(0.6 * static_cast<double>(S), 1.3 * static_cast<double>(S)));
            detail::draw_vessel(field, mask, cfg, rng, y, x, angle, radius, steps, 1);
        }

        // compose the slice, then round-trip through HU windowing
        Tensor<T> hu = Tensor<T>::zeros({S, S});
        const double lo = cfg.window.level - cfg.window.width / 2.0;
        for (std::size_t i = 0; i < S * S; ++i) {
            double v = cfg.background + cfg.contrast * field[i] + rng.normal(0.0, cfg.noise_std);
            v = std::clamp(v, 0.0, 1.0);
            hu.data()[i] = static_cast<T>(lo + v * cfg.window.width);
        }
        Tensor<T> slice = window_normalize(hu, cfg.window);

        Tensor<T> mask_t = Tensor<T>::zeros({S, S});
        for (std::size_t i = 0; i < S * S; ++i) mask_t.data()[i] = static_cast<T>(mask[i]);
        mask_t = remove_small_objects(mask_t, cfg.min_object_pixels);

        bool empty = true;
        for (T v : mask_t.data()) {
            if (v == T(1)) {
                empty = false;
                break;
            }
        }
        if (empty) continue;  // deterministic retry chain

        std::vector<float> mf(S * S);
        for (std::size_t i = 0; i < S * S; ++i) mf[i] = static_cast<float>(mask_t.data()[i]);

        SegSample<T> sample;
        sample.image = to_model_input(slice, S);
        sample.mask = mask_t;
        sample.bbox = tight_bbox(mf, S, S);
        sample.seed = seed;
        sample.id = "s" + std::to_string(seed);
        return sample;
    }
    throw GenerationError("synthetic mask stayed empty after retries for seed " + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Shards: shard.json + img_<id>.tsr / mask_<id>.tsr
// ---------------------------------------------------------------------------

template <typename T>
void write_shard(const std::vector<SegSample<T>>& samples, const std::filesystem::path& dir,
                 const SynthConfig& cfg) {
    std::filesystem::create_directories(dir);
    json index;
    index["schema_version"] = 1;
    index["format"] = "atrouslab-shard";
    index["count"] = samples.size();
    index["size"] = cfg.size;
    index["generator"] = cfg.to_json();
    index["generator_hash"] = fnv1a64(cfg.to_json().dump());
    json list = json::array();
    for (const auto& s : samples) {
        write_tsr(dir / ("img_" + s.id + ".tsr"), s.image);
        write_tsr(dir / ("mask_" + s.id + ".tsr"), s.mask);
        list.push_back({{"id", s.id},
                        {"seed", s.seed},
                        {"bbox", {s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1}}});
    }
    index["samples"] = list;
    std::ofstream f(dir / "shard.json");
    if (!f) throw FormatError("cannot write shard index in " + dir.string());
    f << index.dump(2) << "\n";
}

template <typename T>
std::vector<SegSample<T>> read_shard(const std::filesystem::path& dir) {
    std::ifstream f(dir / "shard.json");
    if (!f) throw FormatError("missing shard.json in " + dir.string());
    json index;
    f >> index;
    std::vector<SegSample<T>> out;
    for (const auto& e : index.at("samples")) {
        SegSample<T> s;
        s.id = e.at("id").get<std::string>();
        s.seed = e.at("seed").get<std::uint64_t>();
        const auto& bb = e.at("bbox");
        s.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
        s.image = read_tsr<T>(dir / ("img_" + s.id + ".tsr"));
        s.mask = read_tsr<T>(dir / ("mask_" + s.id + ".tsr"));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace atrouslab
