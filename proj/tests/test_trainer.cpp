// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "atrouslab/trainer.hpp"

using namespace atrouslab;

namespace {

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.seed = 5;
    cfg.model.vit = {32, 8, 32, 2, 2, 2.0};
    cfg.model.corner_embed_dim = 32;
    cfg.model.decoder_dim = 8;
    cfg.model.decoder_heads = 2;
    cfg.model.lora_rank = 2;
    cfg.model.rates = {1, 2, 3};
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.eval_cadence = 0;
    cfg.train.bbox_perturb = 2;
    return cfg;
}

std::vector<SegSample<float>> tiny_samples(std::size_t count, std::uint64_t base_seed) {
    SynthConfig gen;
    gen.size = 32;
    gen.radius_min = 2.5;
    gen.radius_max = 5.0;
    std::vector<SegSample<float>> out;
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(generate_sample<float>(gen, base_seed + i));
    }
    return out;
}

}  // namespace

TEST_CASE("adamw single-step oracle and decoupled decay") {
    // zero grad, zero decay: untouched
    {
        Tensor<float> w = Tensor<float>::from_data({2}, {1.0f, -2.0f}, true);
        w.engage_grad();
        ParamList<float> params = {{"w", w}};
        OptimConfig oc;
        oc.weight_decay = 0.0;
        AdamW<float> opt(oc);
        opt.step(params);
        CHECK(w.data() == std::vector<float>{1.0f, -2.0f});
    }
    // hand-computed single step: w=1, g=1, lr=0.1, wd=0 -> w = 1 - 0.1/(1+eps')
    {
        Tensor<double> w = Tensor<double>::from_data({1}, {1.0}, true);
        w.engage_grad();
        w.grad()[0] = 1.0;
        ParamList<double> params = {{"w", w}};
        OptimConfig oc;
        oc.lr = 0.1;
        oc.weight_decay = 0.0;
        AdamW<double> opt(oc);
        opt.step(params);
        // m_hat = 1, v_hat = 1: update = lr / (1 + eps)
        CHECK(w.data()[0] == Catch::Approx(1.0 - 0.1 / (1.0 + 1e-8)).margin(1e-12));
    }
    // decoupled decay shrinks a zero-grad parameter by (1 - lr*wd)
    {
        Tensor<double> w = Tensor<double>::from_data({1}, {2.0}, true);
        w.engage_grad();
        ParamList<double> params = {{"w", w}};
        OptimConfig oc;
        oc.lr = 0.5;
        oc.weight_decay = 0.01;
        AdamW<double> opt(oc);
        opt.step(params);
        CHECK(w.data()[0] == Catch::Approx(2.0 * (1.0 - 0.5 * 0.01)).margin(1e-15));
        opt.step(params);
        CHECK(w.data()[0] == Catch::Approx(2.0 * (1.0 - 0.5 * 0.01) * (1.0 - 0.5 * 0.01)).margin(1e-15));
    }
    // missing gradient on a trainable parameter is a contract violation
    {
        Tensor<float> w = Tensor<float>::from_data({1}, {1.0f}, true);
        ParamList<float> params = {{"w", w}};
        AdamW<float> opt(OptimConfig{});
        CHECK_THROWS_AS(opt.step(params), ContractError);
    }
}

TEST_CASE("lr = 0 leaves parameters and the loss trajectory constant") {
    RunConfig cfg = tiny_run_config();
    cfg.optim.lr = 0.0;
    cfg.train.bbox_perturb = 0;  // augmentation would vary the loss across epochs
    auto samples = tiny_samples(4, 100);

    VesselModel<float> reference = build_model<float>(cfg.model, cfg.seed);
    ParamList<float> ref_params = reference.params();

    TrainOutcome<float> out = train_run(cfg, samples, {});
    ParamList<float> after = out.model.params();
    REQUIRE(after.size() == ref_params.size());
    for (std::size_t i = 0; i < after.size(); ++i) {
        // running statistics are forward-pass state and move even at lr 0
        if (after[i].name.find("running_") != std::string::npos) continue;
        INFO(after[i].name);
        CHECK(bit_identical(after[i].tensor, ref_params[i].tensor));
    }
    const auto& epochs = out.history.at("epochs");
    REQUIRE(epochs.size() == 2);
    CHECK(epochs[0].at("loss").get<double>() == epochs[1].at("loss").get<double>());
}

TEST_CASE("training is byte-for-byte reproducible per seed") {
    RunConfig cfg = tiny_run_config();
    cfg.optim.lr = 1e-3;
    auto samples = tiny_samples(6, 300);
    auto eval = tiny_samples(3, 900);
    cfg.train.eval_cadence = 1;

    TrainOutcome<float> a = train_run(cfg, samples, eval);
    TrainOutcome<float> b = train_run(cfg, samples, eval);
    CHECK(a.history.dump() == b.history.dump());

    ParamList<float> pa = a.model.params(), pb = b.model.params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(bit_identical(pa[i].tensor, pb[i].tensor));
    }

    cfg.seed = 6;
    TrainOutcome<float> c = train_run(cfg, samples, eval);
    CHECK(c.history.dump() != a.history.dump());
}

TEST_CASE("frozen set is bit-identical after a real training run") {
    RunConfig cfg = tiny_run_config();
    cfg.optim.lr = 1e-3;
    cfg.train.epochs = 3;
    auto samples = tiny_samples(6, 500);

    VesselModel<float> reference = build_model<float>(cfg.model, cfg.seed);
    ParamList<float> ref_params = reference.params();

    TrainOutcome<float> out = train_run(cfg, samples, {});
    ParamList<float> after = out.model.params();
    bool anything_moved = false;
    for (std::size_t i = 0; i < after.size(); ++i) {
        if (!after[i].tensor.requires_grad()) {
            // running statistics are state, not frozen weights
            const bool is_bn_state = after[i].name.find("running_") != std::string::npos;
            if (!is_bn_state) {
                INFO(after[i].name);
                CHECK(bit_identical(after[i].tensor, ref_params[i].tensor));
            }
        } else if (!bit_identical(after[i].tensor, ref_params[i].tensor)) {
            anything_moved = true;
        }
    }
    CHECK(anything_moved);
}

TEST_CASE("grad-flow partition after optimizer steps") {
    RunConfig cfg = tiny_run_config();
    cfg.optim.lr = 1e-3;
    cfg.train.epochs = 2;
    auto samples = tiny_samples(4, 700);
    TrainOutcome<float> out = train_run(cfg, samples, {});

    // after two epochs of steps, every trainable parameter has been engaged
    // and carries gradient from the last backward
    ParamList<float> params = out.model.params();
    for (const auto& p : params) {
        if (p.tensor.requires_grad()) {
            INFO(p.name);
            CHECK(p.tensor.grad_engaged());
        } else {
            INFO(p.name);
            CHECK_FALSE(p.tensor.grad_engaged());
        }
    }
    double adapter_norm = 0, decoder_norm = 0;
    for (const auto& p : params) {
        if (!p.tensor.grad_engaged()) continue;
        double norm = 0;
        for (float g : p.tensor.grad()) norm += static_cast<double>(g) * g;
        if (p.name.rfind("adapters.", 0) == 0) adapter_norm += norm;
        if (p.name.rfind("decoder.", 0) == 0) decoder_norm += norm;
    }
    CHECK(adapter_norm > 0.0);
    CHECK(decoder_norm > 0.0);
}

TEST_CASE("injected predictions: perfect oracle and empty masks") {
    auto samples = tiny_samples(4, 1100);
    std::vector<Tensor<float>> perfect, empty;
    for (const auto& s : samples) {
        perfect.push_back(s.mask.clone());
        empty.push_back(Tensor<float>::zeros(s.mask.shape()));
    }
    EvalResult good = summarize_predictions(perfect, samples);
    CHECK(good.mean_dsc == 1.0);
    CHECK(good.mean_hd == 0.0);
    CHECK(good.report.at("hd_sentinel_count").get<std::size_t>() == 0);

    EvalResult bad = summarize_predictions(empty, samples);
    CHECK(bad.mean_dsc == 0.0);
    CHECK(bad.report.at("hd_sentinel_count").get<std::size_t>() == samples.size());
    for (const auto& e : bad.report.at("per_sample")) {
        CHECK(e.at("hd_sentinel_flag").get<bool>());
    }
}

TEST_CASE("runaway learning rate aborts with the offending batch id") {
    RunConfig cfg = tiny_run_config();
    cfg.optim.lr = 1e8;
    cfg.train.epochs = 4;
    auto samples = tiny_samples(4, 1300);
    try {
        train_run(cfg, samples, {});
        FAIL("expected TrainNanError");
    } catch (const TrainNanError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("batch") != std::string::npos);
        CHECK(msg.find('s') != std::string::npos);  // sample ids present
    }
}

TEST_CASE("rank sweep: ratio strictly increases with rank") {
    RunConfig cfg = tiny_run_config();
    cfg.optim.lr = 1e-3;
    cfg.train.epochs = 1;
    auto samples = tiny_samples(4, 1500);
    auto eval = tiny_samples(2, 1700);

    const std::string csv = rank_sweep(cfg, {2, 4, 8}, samples, eval);
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    CHECK(line == "rank,trainable_ratio,final_dsc");
    double prev_ratio = -1;
    int rows = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::size_t c1 = line.find(','), c2 = line.rfind(',');
        REQUIRE(c1 != std::string::npos);
        const double ratio = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
        CHECK(ratio > prev_ratio);
        prev_ratio = ratio;
        ++rows;
    }
    CHECK(rows == 3);
}

TEST_CASE("run config round-trips through json") {
    RunConfig cfg = tiny_run_config();
    cfg.train_shard = "data/train";
    cfg.eval_shard = "data/eval";
    cfg.spacing = 0.5;
    json j = cfg;
    RunConfig back = j.get<RunConfig>();
    CHECK(back.seed == cfg.seed);
    CHECK(back.model.vit.embed_dim == cfg.model.vit.embed_dim);
    CHECK(back.model.rates == cfg.model.rates);
    CHECK(back.optim.lr == cfg.optim.lr);
    CHECK(back.train.epochs == cfg.train.epochs);
    CHECK(back.train_shard == cfg.train_shard);
    CHECK(back.spacing == cfg.spacing);

    json bad = j;
    bad["schema_version"] = 99;
    CHECK_THROWS_AS(bad.get<RunConfig>(), ConfigError);
}
