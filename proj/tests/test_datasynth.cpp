// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "atrouslab/datasynth.hpp"

using namespace atrouslab;

namespace {

// independent flood-fill labeling oracle (explicit stack, 8-connectivity)
Tensor<float> remove_small_oracle(const Tensor<float>& mask, std::size_t min_pixels) {
    const std::size_t H = mask.shape()[0], W = mask.shape()[1];
    std::vector<int> label(H * W, -1);
    int next = 0;
    std::vector<std::size_t> areas;
    for (std::size_t start = 0; start < H * W; ++start) {
        if (mask.data()[start] != 1.0f || label[start] != -1) continue;
        std::vector<std::size_t> stack = {start};
        label[start] = next;
        std::size_t area = 0;
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            ++area;
            const long y = static_cast<long>(cur / W), x = static_cast<long>(cur % W);
            for (long dy = -1; dy <= 1; ++dy)
                for (long dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const long ny = y + dy, nx = x + dx;
                    if (ny < 0 || nx < 0 || ny >= static_cast<long>(H) || nx >= static_cast<long>(W))
                        continue;
                    const std::size_t ni = static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx);
                    if (mask.data()[ni] == 1.0f && label[ni] == -1) {
                        label[ni] = next;
                        stack.push_back(ni);
                    }
                }
        }
        areas.push_back(area);
        ++next;
    }
    Tensor<float> out = Tensor<float>::zeros(mask.shape());
    for (std::size_t i = 0; i < H * W; ++i) {
        if (mask.data()[i] == 1.0f && areas[static_cast<std::size_t>(label[i])] >= min_pixels) {
            out.data()[i] = 1.0f;
        }
    }
    return out;
}

Tensor<float> random_mask(std::size_t h, std::size_t w, Rng& rng, double p_one) {
    Tensor<float> m = Tensor<float>::zeros({h, w});
    for (auto& v : m.data()) v = rng.uniform() < p_one ? 1.0f : 0.0f;
    return m;
}

}  // namespace

TEST_CASE("window normalization: center, clipping, oracle, monotonicity") {
    WindowSpec w{400.0, 40.0};
    Tensor<float> hu = Tensor<float>::from_data({5}, {40.0f, -160.0f, -500.0f, 240.0f, 1000.0f});
    Tensor<float> out = window_normalize(hu, w);
    CHECK(out.data()[0] == 0.5f);
    CHECK(out.data()[1] == 0.0f);
    CHECK(out.data()[2] == 0.0f);
    CHECK(out.data()[3] == 1.0f);
    CHECK(out.data()[4] == 1.0f);

    Rng rng(3);
    Tensor<float> grid = Tensor<float>::uniform({12, 12}, -400, 600, rng);
    Tensor<float> got = window_normalize(grid, w);
    std::vector<std::pair<float, float>> pairs;
    for (std::size_t i = 0; i < grid.numel(); ++i) {
        const double expect = std::clamp((grid.data()[i] - (-160.0)) / 400.0, 0.0, 1.0);
        CHECK(std::abs(got.data()[i] - expect) <= 1e-7);
        pairs.emplace_back(grid.data()[i], got.data()[i]);
    }
    std::sort(pairs.begin(), pairs.end());
    double prev_out = 0;
    for (const auto& [in, outv] : pairs) {
        CHECK(outv >= prev_out);
        prev_out = outv;
    }

    CHECK_THROWS_AS(window_normalize(hu, WindowSpec{0.0, 40.0}), ConfigError);
}

TEST_CASE("remove_small_objects: retention convention and flood-fill oracle") {
    // a component of exactly min_pixels is retained
    Tensor<float> m = Tensor<float>::zeros({5, 5});
    m.at({1, 1}) = m.at({1, 2}) = m.at({2, 1}) = 1.0f;  // area 3
    Tensor<float> kept = remove_small_objects(m, 3);
    CHECK(bit_identical(kept, m));
    Tensor<float> dropped = remove_small_objects(m, 4);
    for (float v : dropped.data()) CHECK(v == 0.0f);

    // empty mask passes through
    Tensor<float> empty = Tensor<float>::zeros({4, 4});
    CHECK(bit_identical(remove_small_objects(empty, 5), empty));

    Rng rng(7);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t h = 3 + static_cast<std::size_t>(rng.uniform_int(0, 12));
        const std::size_t w = 3 + static_cast<std::size_t>(rng.uniform_int(0, 12));
        Tensor<float> mask = random_mask(h, w, rng, rng.uniform(0.2, 0.6));
        const std::size_t min_px = 1 + static_cast<std::size_t>(rng.uniform_int(0, 6));
        Tensor<float> got = remove_small_objects(mask, min_px);
        Tensor<float> expect = remove_small_oracle(mask, min_px);
        CHECK(bit_identical(got, expect));
        // idempotence
        CHECK(bit_identical(remove_small_objects(got, min_px), got));
    }
}

TEST_CASE("to_model_input: identity resize and channel triplication") {
    Rng rng(11);
    Tensor<float> slice = Tensor<float>::uniform({16, 16}, 0, 1, rng);
    Tensor<float> out = to_model_input(slice, 16);
    REQUIRE(out.shape() == Shape{3, 16, 16});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 256; ++i) CHECK(out.data()[c * 256 + i] == slice.data()[i]);

    Tensor<float> constant = Tensor<float>::full({8, 8}, 0.42f);
    Tensor<float> up = to_model_input(constant, 20);
    REQUIRE(up.shape() == Shape{3, 20, 20});
    for (float v : up.data()) CHECK(v == Catch::Approx(0.42f).margin(1e-6));
}

TEST_CASE("perturb_bbox: identity, invariants over 1000 draws, reproducibility") {
    BBoxPrompt box{10, 12, 30, 28};
    Rng rng(13);
    BBoxPrompt same = perturb_bbox(box, 0, 64, rng);
    CHECK(same.x0 == box.x0);
    CHECK(same.y1 == box.y1);

    for (int rep = 0; rep < 1000; ++rep) {
        BBoxPrompt p = perturb_bbox(box, 5, 64, rng);
        p.validate(64.0);  // throws on violation
        CHECK(std::abs(p.x0 - box.x0) <= 5);
        CHECK(std::abs(p.y1 - box.y1) <= 5);
    }

    Rng a(17), b(17);
    for (int rep = 0; rep < 50; ++rep) {
        BBoxPrompt pa = perturb_bbox(box, 5, 64, a);
        BBoxPrompt pb = perturb_bbox(box, 5, 64, b);
        CHECK(pa.x0 == pb.x0);
        CHECK(pa.y0 == pb.y0);
        CHECK(pa.x1 == pb.x1);
        CHECK(pa.y1 == pb.y1);
    }
}

TEST_CASE("generate_sample: determinism and invariants over many seeds") {
    SynthConfig cfg;
    cfg.size = 64;

    SegSample<float> a = generate_sample<float>(cfg, 12345);
    SegSample<float> b = generate_sample<float>(cfg, 12345);
    CHECK(bit_identical(a.image, b.image));
    CHECK(bit_identical(a.mask, b.mask));
    CHECK(a.bbox.x0 == b.bbox.x0);

    std::size_t fg_total = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        SegSample<float> s = generate_sample<float>(cfg, seed);
        REQUIRE(s.image.shape() == Shape{3, 64, 64});
        REQUIRE(s.mask.shape() == Shape{64, 64});
        // channels identical
        for (std::size_t i = 0; i < 64 * 64; ++i) {
            CHECK(s.image.data()[i] == s.image.data()[4096 + i]);
            CHECK(s.image.data()[i] == s.image.data()[2 * 4096 + i]);
        }
        // image values in [0,1]
        for (float v : s.image.data()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
        // tight box contains every foreground pixel and is non-degenerate
        s.bbox.validate(64.0);
        std::size_t fg = 0;
        for (std::size_t y = 0; y < 64; ++y)
            for (std::size_t x = 0; x < 64; ++x) {
                if (s.mask.at({y, x}) == 1.0f) {
                    ++fg;
                    CHECK(static_cast<double>(x) >= s.bbox.x0);
                    CHECK(static_cast<double>(x) < s.bbox.x1);
                    CHECK(static_cast<double>(y) >= s.bbox.y0);
                    CHECK(static_cast<double>(y) < s.bbox.y1);
                }
            }
        // the cleanup pass enforces the minimum object size
        CHECK(fg >= cfg.min_object_pixels);
        fg_total += fg;
    }
    // analytic bounds: at most count_max tubes of length 1.3*S and width
    // 2*radius_max + 1 fit in the frame
    const double mean_fraction = static_cast<double>(fg_total) / (100.0 * 64 * 64);
    CHECK(mean_fraction > 0.01);
    CHECK(mean_fraction < cfg.count_max * (1.3 * 64.0) * (2 * cfg.radius_max + 1) / (64.0 * 64.0));
}

TEST_CASE("zero contrast hides the vessel in the image but not the mask") {
    SynthConfig cfg;
    cfg.size = 32;
    cfg.contrast = 0.0;
    cfg.radius_min = 3.0;
    cfg.radius_max = 5.0;
    SegSample<float> s = generate_sample<float>(cfg, 7);
    std::size_t fg = 0;
    double in_sum = 0, out_sum = 0;
    for (std::size_t i = 0; i < 32 * 32; ++i) {
        if (s.mask.data()[i] == 1.0f) {
            ++fg;
            in_sum += s.image.data()[i];
        } else {
            out_sum += s.image.data()[i];
        }
    }
    REQUIRE(fg > 0);
    const double in_mean = in_sum / static_cast<double>(fg);
    const double out_mean = out_sum / static_cast<double>(32 * 32 - fg);
    CHECK(std::abs(in_mean - out_mean) < 0.05);  // indistinguishable from noise
}

TEST_CASE("oversized vessels are rejected") {
    SynthConfig cfg;
    cfg.size = 16;
    cfg.radius_min = 7.0;
    cfg.radius_max = 9.0;
    CHECK_THROWS_AS(generate_sample<float>(cfg, 1), GenerationError);
}

TEST_CASE("shard round trip is bit identical") {
    const auto dir = std::filesystem::temp_directory_path() / "atrouslab_shard_test";
    std::filesystem::remove_all(dir);
    SynthConfig cfg;
    cfg.size = 32;

    std::vector<SegSample<float>> samples;
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        samples.push_back(generate_sample<float>(cfg, seed));
    }
    write_shard(samples, dir, cfg);
    std::vector<SegSample<float>> loaded = read_shard<float>(dir);
    REQUIRE(loaded.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].id == samples[i].id);
        CHECK(loaded[i].seed == samples[i].seed);
        CHECK(bit_identical(loaded[i].image, samples[i].image));
        CHECK(bit_identical(loaded[i].mask, samples[i].mask));
        CHECK(loaded[i].bbox.x0 == samples[i].bbox.x0);
        CHECK(loaded[i].bbox.y1 == samples[i].bbox.y1);
    }

    // truncating a tensor file surfaces a format error, not partial data
    const auto victim = dir / ("img_" + samples[0].id + ".tsr");
    const auto size = std::filesystem::file_size(victim);
    std::filesystem::resize_file(victim, size / 2);
    CHECK_THROWS_AS(read_shard<float>(dir), FormatError);
    std::filesystem::remove_all(dir);
}
