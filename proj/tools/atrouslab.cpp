// SPDX-License-Identifier: Apache-2.0
//
// atrouslab CLI: synthetic data generation, adapter training, evaluation,
// finite-difference verification, parameter accounting and the LoRA rank
// sweep. Machine-readable output goes to stdout, logs to stderr. Exit codes:
// 0 success, 1 validation/config error, 2 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "atrouslab/datasynth.hpp"
#include "atrouslab/trainer.hpp"
#include "atrouslab/verify.hpp"

namespace fs = std::filesystem;
using namespace atrouslab;

namespace {

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return j.get<RunConfig>();
}

std::vector<SegSample<float>> load_shard_checked(const fs::path& dir) {
    if (!fs::exists(dir / "shard.json")) {
        throw ConfigError("no shard found at " + dir.string());
    }
    return read_shard<float>(dir);
}

// resolves the shards named by the config, optionally re-rooted at data_dir
std::pair<std::vector<SegSample<float>>, std::vector<SegSample<float>>> load_data(
    const RunConfig& cfg, const std::string& data_dir) {
    fs::path train_path, eval_path;
    if (!data_dir.empty()) {
        train_path = fs::path(data_dir) / (cfg.train_shard.empty() ? "train" : cfg.train_shard);
        eval_path = fs::path(data_dir) / (cfg.eval_shard.empty() ? "eval" : cfg.eval_shard);
    } else {
        if (cfg.train_shard.empty()) throw ConfigError("config names no train_shard and no --data given");
        train_path = cfg.train_shard;
        eval_path = cfg.eval_shard;
    }
    std::vector<SegSample<float>> eval_set;
    if (!eval_path.empty() && fs::exists(eval_path / "shard.json")) {
        eval_set = load_shard_checked(eval_path);
    }
    return {load_shard_checked(train_path), std::move(eval_set)};
}

int cmd_gen_data(const std::string& out_dir, std::size_t count, std::size_t size,
                 std::uint64_t seed, const std::string& preset) {
    SynthConfig cfg;
    if (preset == "paper") {
        cfg.size = 1024;
        cfg.min_object_pixels = 100;
        cfg.radius_min = 16.0;
        cfg.radius_max = 48.0;
    }
    if (size > 0) cfg.size = size;
    cfg.validate();

    std::vector<SegSample<float>> samples;
    samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        samples.push_back(generate_sample<float>(cfg, seed + i));
    }
    write_shard(samples, out_dir, cfg);
    json summary = {{"shard", out_dir},
                    {"count", count},
                    {"size", cfg.size},
                    {"seed", seed},
                    {"generator_hash", fnv1a64(cfg.to_json().dump())}};
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
    RunConfig cfg = load_run_config(config_path);
    auto [train_set, eval_set] = load_data(cfg, data_dir);
    std::cerr << "training on " << train_set.size() << " samples, evaluating on "
              << eval_set.size() << "\n";

    TrainOutcome<float> outcome = train_run(cfg, train_set, eval_set);

    fs::create_directories(out_dir);
    {
        std::ofstream h(fs::path(out_dir) / "history.json");
        h << outcome.history.dump(2) << "\n";
    }
    save_checkpoint(fs::path(out_dir) / "checkpoint", outcome.model, json{{"run", cfg}});
    if (!eval_set.empty()) {
        EvalResult ev = evaluate(outcome.model, eval_set, cfg.spacing);
        std::ofstream r(fs::path(out_dir) / "eval_report.json");
        r << ev.report.dump(2) << "\n";
    }
    json final_line = {{"final_eval_dsc", outcome.final_eval_dsc},
                       {"final_eval_hd", outcome.final_eval_hd},
                       {"checkpoint", (fs::path(out_dir) / "checkpoint").string()}};
    std::cout << final_line.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_dir, const std::string& data_dir, double spacing) {
    VesselModel<float> model = load_checkpoint<float>(ckpt_dir);
    model.set_training(false);
    std::vector<SegSample<float>> samples = load_shard_checked(data_dir);
    EvalResult ev = evaluate(model, samples, spacing);
    std::cout << ev.report.dump(2) << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& module, std::optional<double> tol) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<VerifyCheck> checks = run_gradcheck_suite(module, tol);
    json report = gradcheck_report(checks);
    report["runtime_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << report.dump(2) << "\n";
    return report.at("all_pass").get<bool>() ? 0 : 2;
}

int cmd_params(const std::string& config_path) {
    RunConfig cfg = load_run_config(config_path);
    VesselModel<float> model = build_model<float>(cfg.model, cfg.seed);
    ParamList<float> params = model.params();

    std::map<std::string, ParamCount> by_component;
    for (const auto& p : params) {
        const std::string component = p.name.substr(0, p.name.find('.'));
        by_component[component].total += p.tensor.numel();
        if (p.tensor.requires_grad()) by_component[component].trainable += p.tensor.numel();
    }
    const ParamCount total = count_parameters(params);
    json components = json::array();
    for (const auto& [name, c] : by_component) {
        components.push_back(
            {{"component", name}, {"total", c.total}, {"trainable", c.trainable}, {"ratio", c.ratio()}});
    }
    json out = {{"schema_version", 1},
                {"components", components},
                {"total", total.total},
                {"trainable", total.trainable},
                {"ratio", total.ratio()}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_rank_sweep(const std::string& config_path, const std::string& data_dir,
                   const std::string& out_file, const std::vector<std::size_t>& ranks) {
    RunConfig cfg = load_run_config(config_path);
    auto [train_set, eval_set] = load_data(cfg, data_dir);
    const std::string csv = rank_sweep(cfg, ranks, train_set, eval_set);
    if (!out_file.empty()) {
        std::ofstream f(out_file);
        f << csv;
    }
    std::cout << csv;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"atrouslab: frozen mini-ViT segmentation with atrous low-rank adapters"};
    app.require_subcommand(1);

    std::string out_dir, config_path, data_dir, ckpt_dir, out_file;
    std::size_t count = 100, size = 0;
    std::uint64_t seed = 1;
    std::string preset = "desk";
    std::string module = "all";
    double tol_value = 0.0;
    double spacing = 1.0;
    std::vector<std::size_t> ranks = {2, 4, 16, 32, 64};

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic vessel shard");
    gen->add_option("--out", out_dir, "output shard directory")->required();
    gen->add_option("--count", count, "number of samples");
    gen->add_option("--size", size, "image size (overrides preset)");
    gen->add_option("--seed", seed, "base seed");
    gen->add_option("--preset", preset, "desk|paper")->check(CLI::IsMember({"desk", "paper"}));

    auto* train = app.add_subcommand("train", "train from a run config");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--data", data_dir, "directory holding train/ and eval/ shards");
    train->add_option("--out", out_dir, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a shard");
    eval->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();
    eval->add_option("--data", data_dir, "shard directory")->required();
    eval->add_option("--spacing", spacing, "HD unit multiplier (px by default)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification suite");
    gc->add_option("--module", module, "all|tensor|layers|peft|model|loss");
    auto* tol_opt = gc->add_option("--tol", tol_value, "tolerance override");

    auto* par = app.add_subcommand("params", "parameter accounting for a config");
    par->add_option("--config", config_path, "run config JSON")->required();

    auto* sweep = app.add_subcommand("rank-sweep", "train once per LoRA rank");
    sweep->add_option("--config", config_path, "run config JSON")->required();
    sweep->add_option("--data", data_dir, "directory holding train/ and eval/ shards");
    sweep->add_option("--out", out_file, "CSV output path");
    sweep->add_option("--ranks", ranks, "ranks to sweep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(out_dir, count, size, seed, preset);
        if (train->parsed()) return cmd_train(config_path, data_dir, out_dir);
        if (eval->parsed()) return cmd_eval(ckpt_dir, data_dir, spacing);
        if (gc->parsed()) {
            return cmd_gradcheck(module,
                                 tol_opt->count() ? std::optional<double>(tol_value) : std::nullopt);
        }
        if (par->parsed()) return cmd_params(config_path);
        if (sweep->parsed()) return cmd_rank_sweep(config_path, data_dir, out_file, ranks);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const TrainNanError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }
    return 1;
}
