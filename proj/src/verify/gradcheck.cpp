#include "hmar/gradcheck.hpp"

#include <algorithm>
#include <random>

#include "hmar/autograd.hpp"
#include "hmar/kan.hpp"
#include "hmar/losses.hpp"
#include "hmar/model.hpp"
#include "hmar/seed.hpp"

namespace hmar {

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

ModelConfig check_model() {
    ModelConfig c;
    c.backbone.input_size = 16;
    c.backbone.shallow_channels = 4;
    c.backbone.deep_channels = 4;
    c.backbone.num_classes = 3;
    c.bits = 4;
    return c;
}

/// Model tensors under `prefix`, freshly drawn from `seed`.
TensorMap model_tensors(const std::string& prefix, std::uint64_t seed) {
    TensorMap out;
    for (const auto& [name, shape] : parameter_shapes(check_model()))
        if (name.starts_with(prefix)) out.emplace(name, init_tensor(name, shape, seed));
    return out;
}

Tensor similarity_for(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor sim({n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) sim[i * n + j] = sim[j * n + i] = u(rng);
    return sim;
}

bool trainable_param(std::string_view name) { return !is_buffer_name(name); }

} // namespace

std::vector<GradCheckReport> gradient_suite(std::size_t seeds) {
    std::vector<GradCheckReport> reports;
    auto run = [&](const std::string& component, std::size_t trials, auto&& one_trial) {
        GradCheckReport r{component, 0.0, trials};
        for (std::size_t t = 0; t < trials; ++t) {
            std::mt19937_64 rng(derive_seed(t, component));
            r.max_error = std::max(r.max_error, one_trial(rng, t));
        }
        reports.push_back(r);
    };
    const KanGrid grid{};
    const std::vector<int> labels{0, 1, 0, 2, 1};

    run("kan_layer", seeds, [&](std::mt19937_64& rng, std::size_t) {
        TensorMap p{{"x", uniform({3, 4}, rng, -2.2, 2.2)}, {"c", uniform({5, 4, 11}, rng, -1.0, 1.0)}};
        return finite_difference_check([&](ParamScope& s) { return sum(kan_forward(s("x"), s("c"), grid)); }, p,
                                       kGradCheckStep);
    });

    run("channel_attention", seeds, [&](std::mt19937_64& rng, std::size_t t) {
        const std::string prefix = shallow_prefix(0, 1) + ".ca";
        TensorMap p = model_tensors(prefix, t);
        p.emplace("pooled", uniform({2, 4}, rng, -1.0, 1.0));
        const Tensor w = uniform({2, 4}, rng, -1.0, 1.0);
        return finite_difference_check(
            [&](ParamScope& s) { return sum(mul(channel_attention(s, s("pooled"), prefix), s.tape().constant(w))); }, p,
            kGradCheckStep);
    });

    run("conv_block", seeds, [&](std::mt19937_64& rng, std::size_t t) {
        TensorMap p = model_tensors("shallow.0.", t);
        p.emplace("fmap", uniform({2, 4, 5, 5}, rng, -1.0, 1.0));
        const Tensor w = uniform({2, 4, 5, 5}, rng, -1.0, 1.0);
        const double w0 = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        return finite_difference_check(
            [&](ParamScope& s) { return sum(mul(moe_block_forward(s, s("fmap"), 0, w0), s.tape().constant(w))); }, p,
            kGradCheckStep, {trainable_param, true});
    });

    const std::size_t model_trials = std::max<std::size_t>(1, seeds / 10);
    run("backbone_global", model_trials, [&](std::mt19937_64& rng, std::size_t t) {
        const ModelConfig c = check_model();
        const ModelParams m = ModelParams::init(c, t);
        const Tensor x = uniform({3, 1, 16, 16}, rng, 0.0, 1.0);
        return finite_difference_check(
            [&](ParamScope& s) {
                Var emb = global_embedding(s, s.tape().constant(x));
                return add(sum(global_hash(s, emb, c.kan)), cross_entropy(class_logits(s, emb), {0, 1, 2}));
            },
            m.tensors, kGradCheckStep, {trainable_param, true});
    });

    run("backbone_local", model_trials, [&](std::mt19937_64& rng, std::size_t t) {
        const ModelConfig c = check_model();
        const ModelParams m = ModelParams::init(c, t);
        const Tensor x = uniform({3, 1, 16, 16}, rng, 0.0, 1.0);
        return finite_difference_check(
            [&](ParamScope& s) {
                Var fmap = forward_shallow(s, s.tape().constant(x), 0.3);
                return sum(local_hash(s, pool_window(s, fmap, {1, 3, 0, 4}), c.kan));
            },
            m.tensors, kGradCheckStep, {trainable_param, true});
    });

    auto codes = [](std::mt19937_64& rng) {
        return TensorMap{{"h", uniform({5, 6}, rng, -0.9, 0.9)},
                         {"t", uniform({5, 6}, rng, -0.9, 0.9)},
                         {"z", uniform({5, 3}, rng, -2.0, 2.0)}};
    };
    run("loss_contrastive", seeds, [&](std::mt19937_64& rng, std::size_t) {
        const TensorMap p = codes(rng);
        const Tensor sim = similarity_for(5, rng);
        return finite_difference_check([&](ParamScope& s) { return contrastive_loss(s("h"), sim, labels); }, p,
                                       kGradCheckStep);
    });
    run("loss_quantization", seeds, [&](std::mt19937_64& rng, std::size_t) {
        return finite_difference_check([](ParamScope& s) { return quantization_loss(s("h")); }, codes(rng),
                                       kGradCheckStep);
    });
    run("loss_cross_entropy", seeds, [&](std::mt19937_64& rng, std::size_t) {
        return finite_difference_check([&](ParamScope& s) { return cross_entropy(s("z"), labels); }, codes(rng),
                                       kGradCheckStep);
    });
    run("loss_consistency", seeds, [&](std::mt19937_64& rng, std::size_t) {
        return finite_difference_check([](ParamScope& s) { return consistency_loss(s("h"), s("t")); }, codes(rng),
                                       kGradCheckStep);
    });
    run("loss_diversity", seeds, [&](std::mt19937_64& rng, std::size_t) {
        return finite_difference_check([](ParamScope& s) { return diversity_regularizer(s("h")); }, codes(rng),
                                       kGradCheckStep);
    });
    run("loss_stage1_total", seeds, [&](std::mt19937_64& rng, std::size_t) {
        const TensorMap p = codes(rng);
        const Tensor sim = similarity_for(5, rng);
        return finite_difference_check(
            [&](ParamScope& s) {
                return stage1_total(contrastive_loss(s("h"), sim, labels), quantization_loss(s("h")),
                                    cross_entropy(s("z"), labels));
            },
            p, kGradCheckStep);
    });
    run("loss_stage2_total", seeds, [&](std::mt19937_64& rng, std::size_t) {
        return finite_difference_check(
            [](ParamScope& s) { return stage2_total(consistency_loss(s("h"), s("t")), diversity_regularizer(s("h"))); },
            codes(rng), kGradCheckStep);
    });
    return reports;
}

} // namespace hmar
