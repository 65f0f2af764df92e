// SPDX-License-Identifier: Apache-2.0
//
// The finite-difference verification suite behind `gradcheck`: seeded F64
// fixtures for every differentiable operation, grouped by module. Each check
// carries its own default tolerance (1e-5, and 1e-4 for the end-to-end toy
// model); an explicit tolerance override replaces all of them.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "atrouslab/gradcheck.hpp"
#include "atrouslab/losses.hpp"
#include "atrouslab/model.hpp"

namespace atrouslab {

struct VerifyCheck {
    std::string module;
    std::string name;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
};

namespace detail {

inline Tensor<double> vrand(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor<double>::uniform(std::move(shape), lo, hi, rng);
}

inline void run_check(std::vector<VerifyCheck>& out, const std::string& module,
                      const std::string& name,
                      const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                      std::vector<Tensor<double>> inputs, double default_tol,
                      std::optional<double> tol_override, double h_base = 1e-6) {
    const double tol = tol_override.value_or(default_tol);
    GradcheckReport r = gradcheck(f, std::move(inputs), tol, h_base);
    out.push_back({module, name, r.max_rel_err, tol, r.pass});
}

inline void tensor_checks(std::vector<VerifyCheck>& out, std::optional<double> tol) {
    Rng rng(101);
    run_check(out, "tensor", "add_broadcast",
              [](const std::vector<Tensor<double>>& in) { return sum_all(mul(add(in[0], in[1]), in[2])); },
              {vrand({2, 3, 4}, rng), vrand({3, 4}, rng), vrand({2, 3, 4}, rng)}, 1e-5, tol);
    run_check(out, "tensor", "mul_div",
              [](const std::vector<Tensor<double>>& in) {
                  return sum_all(div(mul(in[0], in[1]), add_scalar(sigmoid(in[2]), 1.0)));
              },
              {vrand({3, 5}, rng), vrand({3, 5}, rng), vrand({3, 5}, rng)}, 1e-5, tol);
    run_check(out, "tensor", "matmul",
              [](const std::vector<Tensor<double>>& in) { return sum_all(mul(matmul(in[0], in[1]), in[2])); },
              {vrand({2, 3, 4}, rng), vrand({2, 4, 5}, rng), vrand({2, 3, 5}, rng)}, 1e-5, tol);
    run_check(out, "tensor", "activations",
              [](const std::vector<Tensor<double>>& in) {
                  return mean_all(add(relu(in[0]), add(gelu(in[0]), sigmoid(in[0]))));
              },
              {vrand({4, 7}, rng, -2, 2)}, 1e-5, tol);
    run_check(out, "tensor", "log_clamp",
              [](const std::vector<Tensor<double>>& in) {
                  return mean_all(log_op(clamp(in[0], 0.05, 0.95)));
              },
              {vrand({24}, rng, 0.1, 0.9)}, 1e-5, tol);
    run_check(out, "tensor", "softmax",
              [](const std::vector<Tensor<double>>& in) {
                  return sum_all(mul(softmax_lastdim(in[0]), in[1]));
              },
              {vrand({4, 6}, rng, -3, 3), vrand({4, 6}, rng)}, 1e-5, tol);
    run_check(out, "tensor", "shape_ops",
              [](const std::vector<Tensor<double>>& in) {
                  Tensor<double> p = permute(reshape(in[0], {3, 2, 4}), {1, 2, 0});
                  return sum_all(mul(select_axis1(p, 1), select_axis1(p, 2)));
              },
              {vrand({2, 3, 4}, rng)}, 1e-5, tol);
    run_check(out, "tensor", "reductions",
              [](const std::vector<Tensor<double>>& in) {
                  return sum_all(mul(sum_tail(in[0], 2), in[1]));
              },
              {vrand({3, 4, 5}, rng), vrand({3}, rng)}, 1e-5, tol);
}

inline void layer_checks(std::vector<VerifyCheck>& out, std::optional<double> tol) {
    Rng rng(211);
    for (std::size_t d : {std::size_t{1}, std::size_t{6}, std::size_t{12}, std::size_t{18}}) {
        run_check(out, "layers", "dilated_conv2d_rate" + std::to_string(d),
                  [d](const std::vector<Tensor<double>>& in) {
                      Conv2dParams<double> p;
                      p.weight = in[1];
                      p.bias = in[2];
                      p.dilation = d;
                      p.padding = d;
                      Tensor<double> y = dilated_conv2d(in[0], p);
                      return sum_all(mul(y, y));
                  },
                  {vrand({1, 2, 8, 8}, rng), vrand({2, 2, 3, 3}, rng), vrand({2}, rng)}, 1e-5, tol);
    }
    run_check(out, "layers", "transposed_conv2d",
              [](const std::vector<Tensor<double>>& in) {
                  Conv2dParams<double> p;
                  p.weight = in[1];
                  p.bias = in[2];
                  p.stride = 2;
                  p.padding = 1;
                  Tensor<double> y = transposed_conv2d(in[0], p);
                  return sum_all(mul(y, y));
              },
              {vrand({1, 2, 3, 3}, rng), vrand({2, 3, 4, 4}, rng), vrand({3}, rng)}, 1e-5, tol);
    {
        Tensor<double> w = vrand({2, 3, 4, 4}, rng);
        run_check(out, "layers", "batch_norm_training",
                  [w](const std::vector<Tensor<double>>& in) {
                      BatchNormParams<double> p = BatchNormParams<double>::init(3);
                      p.gamma = in[1];
                      p.beta = in[2];
                      Tensor<double> y = batch_norm(in[0], p);
                      return sum_all(mul(y, w));
                  },
                  {vrand({2, 3, 4, 4}, rng), vrand({3}, rng, 0.5, 1.5), vrand({3}, rng)}, 1e-5, tol);
        run_check(out, "layers", "batch_norm_inference",
                  [w](const std::vector<Tensor<double>>& in) {
                      BatchNormParams<double> p = BatchNormParams<double>::init(3);
                      p.gamma = in[1];
                      p.beta = in[2];
                      p.training = false;
                      Tensor<double> y = batch_norm(in[0], p);
                      return sum_all(mul(y, w));
                  },
                  {vrand({2, 3, 4, 4}, rng), vrand({3}, rng, 0.5, 1.5), vrand({3}, rng)}, 1e-5, tol);
    }
    {
        Tensor<double> w = vrand({2, 5, 6}, rng);
        run_check(out, "layers", "layer_norm",
                  [w](const std::vector<Tensor<double>>& in) {
                      LayerNormParams<double> p = LayerNormParams<double>::init(6);
                      p.gamma = in[1];
                      p.beta = in[2];
                      return sum_all(mul(layer_norm(in[0], p), w));
                  },
                  {vrand({2, 5, 6}, rng), vrand({6}, rng, 0.5, 1.5), vrand({6}, rng)}, 1e-5, tol);
    }
    run_check(out, "layers", "linear",
              [](const std::vector<Tensor<double>>& in) {
                  LinearParams<double> p;
                  p.weight = in[1];
                  p.bias = in[2];
                  Tensor<double> y = linear(in[0], p);
                  return sum_all(mul(y, y));
              },
              {vrand({2, 4, 5}, rng), vrand({3, 5}, rng), vrand({3}, rng)}, 1e-5, tol);
    run_check(out, "layers", "global_avg_pool",
              [](const std::vector<Tensor<double>>& in) {
                  Tensor<double> y = global_avg_pool(in[0]);
                  return sum_all(mul(y, y));
              },
              {vrand({2, 3, 4, 4}, rng)}, 1e-5, tol);
    run_check(out, "layers", "bilinear_resize",
              [](const std::vector<Tensor<double>>& in) {
                  Tensor<double> y = bilinear_resize(in[0], 7, 5);
                  return sum_all(mul(y, y));
              },
              {vrand({1, 2, 4, 4}, rng)}, 1e-5, tol);
    run_check(out, "layers", "softmax_attention",
              [](const std::vector<Tensor<double>>& in) {
                  Tensor<double> y = softmax_attention(in[0], in[1], in[2]);
                  return sum_all(mul(y, y));
              },
              {vrand({1, 2, 3, 4}, rng), vrand({1, 2, 5, 4}, rng), vrand({1, 2, 5, 4}, rng)}, 1e-5,
              tol);
    run_check(out, "layers", "concat_channels",
              [](const std::vector<Tensor<double>>& in) {
                  Tensor<double> y = concat_channels({in[0], in[1]});
                  return sum_all(mul(y, y));
              },
              {vrand({1, 2, 3, 3}, rng), vrand({1, 3, 3, 3}, rng)}, 1e-5, tol);
}

inline void peft_checks(std::vector<VerifyCheck>& out, std::optional<double> tol) {
    Rng rng(307);
    {
        LinearParams<double> base = LinearParams<double>::init(6, 5, rng, true, true);
        LoraAdapter<double> a = LoraAdapter<double>::init(2, 6, 5, rng);
        for (auto& v : a.w_b.data()) v = rng.uniform(-0.5, 0.5);
        Tensor<double> x = vrand({1, 4, 6}, rng);
        run_check(out, "peft", "lora_forward",
                  [&](const std::vector<Tensor<double>>& in) {
                      LoraAdapter<double> local = a;
                      local.w_a = in[0];
                      local.w_b = in[1];
                      Tensor<double> y = lora_forward(x, base, local);
                      return sum_all(mul(y, y));
                  },
                  {a.w_a, a.w_b}, 1e-5, tol);
    }
    {
        AsppModule<double> m = AsppModule<double>::init(2, 2, 2, {1, 6, 12, 18}, rng);
        Tensor<double> x = vrand({1, 2, 8, 8}, rng);
        Tensor<double> w = vrand({1, 2, 8, 8}, rng);
        ParamList<double> params;
        m.collect("aspp", params);
        std::vector<Tensor<double>> inputs;
        for (auto& p : params) {
            if (p.tensor.requires_grad()) inputs.push_back(p.tensor);
        }
        run_check(out, "peft", "aspp_forward",
                  [&](const std::vector<Tensor<double>>&) {
                      return sum_all(mul(aspp_forward(x, m), w));
                  },
                  inputs, 1e-5, tol);
    }
    {
        AtrousAttentionModule<double> m = AtrousAttentionModule<double>::init(2, 2, 2, {1, 2, 3}, rng);
        Tensor<double> x = vrand({1, 2, 6, 6}, rng);
        Tensor<double> w = vrand({1, 2, 6, 6}, rng);
        ParamList<double> params;
        m.collect("aam", params);
        std::vector<Tensor<double>> inputs;
        for (auto& p : params) {
            if (p.tensor.requires_grad()) inputs.push_back(p.tensor);
        }
        run_check(out, "peft", "atrous_attention_forward",
                  [&](const std::vector<Tensor<double>>&) {
                      return sum_all(mul(atrous_attention_forward(x, m), w));
                  },
                  inputs, 1e-5, tol);
    }
    {
        LinearParams<double> base = LinearParams<double>::init(8, 8, rng, true, true);
        AtrousLoraAdapter<double> a = AtrousLoraAdapter<double>::init(base, 2, {1, 2}, 2, 3, rng);
        for (auto& v : a.w_b.data()) v = rng.uniform(-0.4, 0.4);
        Tensor<double> x = vrand({1, 6, 8}, rng);
        Tensor<double> w = vrand({1, 6, 8}, rng);
        ParamList<double> params;
        a.collect("ala", params);
        std::vector<Tensor<double>> inputs;
        for (auto& p : params) {
            if (p.tensor.requires_grad()) inputs.push_back(p.tensor);
        }
        run_check(out, "peft", "atrous_lora_forward",
                  [&](const std::vector<Tensor<double>>&) {
                      return sum_all(mul(atrous_lora_forward(x, a), w));
                  },
                  inputs, 1e-5, tol);
    }
}

inline void loss_checks(std::vector<VerifyCheck>& out, std::optional<double> tol) {
    Rng rng(401);
    Tensor<double> t = Tensor<double>::zeros({20});
    for (auto& v : t.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    run_check(out, "loss", "bce_loss",
              [&](const std::vector<Tensor<double>>& in) { return bce_loss(in[0], t); },
              {vrand({20}, rng, 0.1, 0.9)}, 1e-5, tol);
    run_check(out, "loss", "dice_loss",
              [&](const std::vector<Tensor<double>>& in) { return dice_loss(in[0], t); },
              {vrand({20}, rng, 0.1, 0.9)}, 1e-5, tol);
    run_check(out, "loss", "combined_loss",
              [&](const std::vector<Tensor<double>>& in) { return combined_loss(in[0], t); },
              {vrand({20}, rng, 0.1, 0.9)}, 1e-5, tol);
    {
        Tensor<double> tb = Tensor<double>::zeros({2, 1, 4, 4});
        for (auto& v : tb.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
        run_check(out, "loss", "segmentation_loss",
                  [&](const std::vector<Tensor<double>>& in) { return segmentation_loss(in[0], tb); },
                  {vrand({2, 1, 4, 4}, rng, 0.1, 0.9)}, 1e-5, tol);
    }
}

inline void model_checks(std::vector<VerifyCheck>& out, std::optional<double> tol) {
    Rng rng(503);
    ModelConfig cfg;
    cfg.vit = {16, 8, 16, 1, 2, 2.0};
    cfg.corner_embed_dim = 16;
    cfg.decoder_dim = 4;
    cfg.decoder_heads = 2;
    cfg.lora_rank = 2;
    cfg.rates = {1, 2};
    VesselModel<double> m = build_model<double>(cfg, 601);
    ParamList<double> params = m.params();
    for (auto& p : params) {
        if (p.name.find(".w_b") != std::string::npos) {
            for (auto& v : p.tensor.data()) v = rng.uniform(-0.2, 0.2);
        }
    }
    Tensor<double> img = vrand({1, 3, 16, 16}, rng, 0, 1);
    std::vector<BBoxPrompt> boxes = {{2, 2, 14, 13}};
    Tensor<double> w = vrand({1, 1, 16, 16}, rng);
    std::vector<Tensor<double>> inputs;
    for (auto& p : params) {
        if (p.tensor.requires_grad()) inputs.push_back(p.tensor);
    }
    run_check(out, "model", "end_to_end_toy",
              [&](const std::vector<Tensor<double>>&) {
                  return mean_all(mul(forward_segment(m, img, boxes), w));
              },
              inputs, 1e-4, tol, 1e-4);
}

}  // namespace detail

// module: all | tensor | layers | peft | model | loss
inline std::vector<VerifyCheck> run_gradcheck_suite(const std::string& module,
                                                    std::optional<double> tol = std::nullopt) {
    std::vector<VerifyCheck> checks;
    const bool all = module == "all";
    if (all || module == "tensor") detail::tensor_checks(checks, tol);
    if (all || module == "layers") detail::layer_checks(checks, tol);
    if (all || module == "peft") detail::peft_checks(checks, tol);
    if (all || module == "loss") detail::loss_checks(checks, tol);
    if (all || module == "model") detail::model_checks(checks, tol);
    if (checks.empty()) {
        throw ConfigError("unknown gradcheck module '" + module +
                          "' (expected all|tensor|layers|peft|model|loss)");
    }
    return checks;
}

inline json gradcheck_report(const std::vector<VerifyCheck>& checks) {
    json items = json::array();
    bool all_pass = true;
    for (const auto& c : checks) {
        items.push_back({{"module", c.module},
                         {"name", c.name},
                         {"max_rel_err", c.max_rel_err},
                         {"tol", c.tol},
                         {"pass", c.pass}});
        all_pass &= c.pass;
    }
    return json{{"schema_version", 1}, {"all_pass", all_pass}, {"checks", items}};
}

}  // namespace atrouslab
