#include <doctest.h>

#include <cmath>
#include <set>

#include "hmar/checkpoint.hpp"
#include "hmar/errors.hpp"
#include "hmar/losses.hpp"
#include "hmar/seed.hpp"
#include "hmar/trainer.hpp"
#include "unit/support.hpp"

using namespace hmar;
using hmar::testing::random_tensor;

namespace {

ModelConfig tiny_model(std::size_t bits = 8) {
    ModelConfig c;
    c.backbone.input_size = 32;
    c.backbone.shallow_channels = 8;
    c.backbone.deep_channels = 8;
    c.backbone.num_classes = 4;
    c.bits = bits;
    return c;
}

ImageSet tiny_set(std::size_t n, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.image_size = 32;
    spec.min_motif = 8;
    spec.max_motif = 14;
    ImageSet set;
    std::vector<double> data;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 4);
        const SyntheticImage img = render_synthetic(spec, label, derive_seed(seed, i));
        data.insert(data.end(), img.pixels.data().begin(), img.pixels.data().end());
        set.labels.push_back(label);
        set.ids.push_back(i);
        set.boxes.push_back(img.box);
    }
    set.images = Tensor({n, 1, 32, 32}, std::move(data));
    return set;
}

TrainConfig tiny_train(std::size_t epochs = 1, double lr = 1e-3) {
    TrainConfig c;
    c.bits = 8;
    c.epochs_per_stage = epochs;
    c.batch_size = 16;
    c.lr = lr;
    c.seed = 3;
    c.eval_each_epoch = false;
    return c;
}

/// Stage-1 objective on a fixed batch, batch statistics, no state change.
double stage1_objective(const ModelParams& p, const ImageSet& set) {
    std::vector<std::size_t> idx(set.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::vector<double>> thumbs;
    for (std::size_t i : idx) {
        const Tensor img = set.image(i);
        thumbs.push_back(similarity_thumbnail(img.reshaped({img.dim(1), img.dim(2), img.dim(3)})));
    }
    Tape tape;
    ParamScope s(tape, p.tensors, all_trainable, true);
    Var e = global_embedding(s, tape.constant(set.images));
    Var h = global_hash(s, e, p.config.kan);
    return stage1_total(contrastive_loss(h, similarity_matrix(thumbs), set.labels), quantization_loss(h),
                        cross_entropy(class_logits(s, e), set.labels))
        .value()
        .item();
}

double mean_consistency(const ModelParams& p, const ImageSet& set) {
    const Tensor a = encode_local_full(p, set.images);
    const Tensor b = encode_local_full(p, apply_augment(set.images, Augment::FlipH));
    double total = 0.0;
    const std::size_t q = a.dim(1);
    for (std::size_t i = 0; i < set.size(); ++i)
        total += soft_distance(std::span<const double>(a.data().data() + i * q, q), std::span<const double>(b.data().data() + i * q, q));
    return total / static_cast<double>(set.size());
}

bool is_stage2_layer(const std::string& name) {
    return name.find("expert1") != std::string::npos || name.starts_with("kan_local.");
}

// Captured from the reference run: ModelParams::init(tiny_model(), 11), sum of checksums of
// the shallow.0.expert1.ca tensors.
constexpr double kGoldenCaChecksum = 17.019948658535924;

} // namespace

TEST_CASE("augmentations are exact pixel permutations") {
    std::mt19937_64 rng(1);
    const Tensor img = random_tensor({2, 6, 6}, rng);
    CHECK(apply_augment(apply_augment(img, Augment::FlipH), Augment::FlipH) == img);
    CHECK(apply_augment(apply_augment(img, Augment::FlipV), Augment::FlipV) == img);
    CHECK(apply_augment(img, Augment::Rot180) == apply_augment(apply_augment(img, Augment::FlipV), Augment::FlipH));
    Tensor r = img;
    for (int k = 0; k < 3; ++k) r = apply_augment(r, Augment::Rot90);
    CHECK(r == apply_augment(img, Augment::Rot270));
    CHECK(apply_augment(r, Augment::Rot90) == img);
    for (Augment a : {Augment::Rot90, Augment::Rot180, Augment::Rot270, Augment::FlipH, Augment::FlipV}) {
        auto x = img.vector(), y = apply_augment(img, a).vector();
        std::sort(x.begin(), x.end());
        std::sort(y.begin(), y.end());
        CHECK(x == y);
    }
    CHECK_THROWS_AS(apply_augment(Tensor({1, 4, 6}), Augment::Rot90), ShapeError);
    CHECK_NOTHROW(apply_augment(Tensor({1, 4, 6}), Augment::FlipH));
}

TEST_CASE("rot90 of a marked 2x2 image turns counter-clockwise") {
    // [a b; c d] -> [b d; a c]
    const Tensor img({1, 2, 2}, {1, 2, 3, 4});
    CHECK(apply_augment(img, Augment::Rot90) == Tensor({1, 2, 2}, {2, 4, 1, 3}));
    CHECK(apply_augment(img, Augment::FlipH) == Tensor({1, 2, 2}, {2, 1, 4, 3}));
    CHECK(apply_augment(img, Augment::FlipV) == Tensor({1, 2, 2}, {3, 4, 1, 2}));
    // Batched form applies the same permutation to each image.
    const Tensor two({2, 1, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    CHECK(apply_augment(two, Augment::Rot90) == Tensor({2, 1, 2, 2}, {2, 4, 1, 3, 6, 8, 5, 7}));
}

TEST_CASE("augment sampling covers the operation set") {
    std::mt19937_64 rng(2);
    std::map<Augment, int> counts;
    for (int i = 0; i < 9000; ++i) ++counts[sample_augment(rng)];
    REQUIRE(counts.size() == 5);
    CHECK(std::abs(counts[Augment::FlipH] - 3000) < 200);
    CHECK(std::abs(counts[Augment::FlipV] - 3000) < 200);
    for (Augment a : {Augment::Rot90, Augment::Rot180, Augment::Rot270}) CHECK(std::abs(counts[a] - 1000) < 120);
}

TEST_CASE("cosine schedule endpoints") {
    CHECK(cosine_lr(1e-4, 0, 10) == 1e-4);
    CHECK(cosine_lr(1e-4, 9, 10) <= 0.01 * 1e-4 + 1e-20);
    CHECK(cosine_lr(1e-4, 9, 10) == doctest::Approx(1e-6));
    CHECK(cosine_lr(2.0, 0, 1) == 2.0);
    for (std::size_t e = 1; e < 10; ++e) CHECK(cosine_lr(1.0, e, 10) < cosine_lr(1.0, e - 1, 10));
    // Midpoint of the cosine is the mean of the endpoints.
    CHECK(cosine_lr(1.0, 2, 5) == doctest::Approx(0.505));
}

TEST_CASE("AdamW first step") {
    TensorMap p{{"w", Tensor({2}, {1.0, -2.0})}};
    const TensorMap g{{"w", Tensor({2}, {0.5, -0.25})}};
    AdamW opt(0.9, 0.999, 1e-8, 0.01);
    opt.step(p, g, 0.1);
    // Bias-corrected first step moves each entry by lr * (sign(g) + wd * p).
    CHECK(p.at("w")[0] == doctest::Approx(1.0 - 0.1 * (1.0 + 0.01 * 1.0)).epsilon(1e-7));
    CHECK(p.at("w")[1] == doctest::Approx(-2.0 - 0.1 * (-1.0 + 0.01 * -2.0)).epsilon(1e-7));
    TensorMap q{{"w", Tensor({2}, {1.0, -2.0})}};
    AdamW idle;
    idle.step(q, g, 0.0);
    CHECK(q.at("w") == Tensor({2}, {1.0, -2.0}));
}

TEST_CASE("epoch batches partition the indices deterministically") {
    const auto a = epoch_batches(37, 8, 5), b = epoch_batches(37, 8, 5), c = epoch_batches(37, 8, 6);
    CHECK(a == b);
    CHECK(a != c);
    std::set<std::size_t> seen;
    for (const auto& batch : a)
        for (std::size_t i : batch) CHECK(seen.insert(i).second);
    CHECK(seen.size() == 37);
    // 33 = 4 * 8 + 1: the lone last index is dropped.
    CHECK(epoch_batches(33, 8, 1).size() == 4);
}

TEST_CASE("training log lines carry eight tab-separated fields") {
    TrainLog log;
    log.epochs.push_back({0, 1, 1.0, 0.5, 2.0, 0.0, 0.0, 0.25, 3.0});
    const std::string line = log.tsv();
    CHECK(std::count(line.begin(), line.end(), '\t') == 7);
    CHECK(line.starts_with("0\t1\t"));
}

TEST_CASE("stage 1: one epoch lowers the loss, lr 0 changes nothing, runs are deterministic") {
    const ImageSet set = tiny_set(64, 1);
    const ModelParams init = ModelParams::init(tiny_model(), 2);
    TrainLog log;
    const ModelParams trained = stage1_train(tiny_train(1), set, nullptr, init, &log);
    CHECK(stage1_objective(trained, set) < stage1_objective(init, set));
    REQUIRE(log.epochs.size() == 1);
    CHECK(std::isfinite(log.initial_loss));
    CHECK(std::isnan(log.epochs[0].val_map));

    const ModelParams idle = stage1_train(tiny_train(1, 0.0), set, nullptr, init);
    for (const auto& [name, t] : init.tensors)
        if (!is_buffer_name(name)) CHECK_MESSAGE(idle.tensors.at(name) == t, name);

    const ModelParams again = stage1_train(tiny_train(1), set, nullptr, init);
    CHECK(again.tensors == trained.tensors);
}

TEST_CASE("stage 1 leaves the stage-2 tensors alone") {
    const ImageSet set = tiny_set(32, 4);
    const ModelParams init = ModelParams::init(tiny_model(), 5);
    const ModelParams trained = stage1_train(tiny_train(1), set, nullptr, init);
    for (const auto& [name, t] : init.tensors)
        if (is_stage2_layer(name)) CHECK_MESSAGE(trained.tensors.at(name) == t, name);
}

TEST_CASE("a non-finite loss aborts with its coordinates") {
    const ImageSet set = tiny_set(32, 6);
    ModelParams p = ModelParams::init(tiny_model(), 7);
    p.tensors.at("classifier.b")[0] = std::nan("");
    try {
        stage1_train(tiny_train(1), set, nullptr, p);
        FAIL("expected a NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("stage 1, epoch 0, batch 0") != std::string::npos);
    }
}

TEST_CASE("clone copies expert0 into expert1 and nothing else") {
    const ModelParams init = ModelParams::init(tiny_model(), 11);
    const ModelParams cloned = clone_expert0_to_expert1(init);
    std::size_t copied = 0;
    double ca = 0.0;
    for (const auto& [name, t] : init.tensors) {
        const auto pos = name.find(".expert1.");
        if (pos != std::string::npos && name.find(".ca.") == std::string::npos) {
            std::string src = name;
            src.replace(pos, 9, ".expert0.");
            CHECK_MESSAGE(cloned.tensors.at(name) == init.tensors.at(src), name);
            ++copied;
        } else {
            CHECK_MESSAGE(cloned.tensors.at(name) == t, name);
        }
        if (name.starts_with("shallow.0.expert1.ca.")) ca += checksum(t);
    }
    // Two conv + norm branches per block: 2 weights and 2 x 4 normalization tensors.
    CHECK(copied == tiny_model().backbone.blocks_shallow * 10);
    CHECK(ca == doctest::Approx(kGoldenCaChecksum).epsilon(1e-12));
}

TEST_CASE("local head calibration matches the feature statistics") {
    const ImageSet set = tiny_set(20, 8);
    const ModelParams p = calibrate_local_head(ModelParams::init(tiny_model(), 9), set, 7);
    Tape tape;
    ParamScope s(tape, p.tensors);
    Var fmap = forward_shallow(s, tape.constant(set.images), 0.0);
    const Tensor pooled = pool_window(s, fmap, {0, fmap.shape()[2], 0, fmap.shape()[3]}).value();
    const std::size_t c = pooled.dim(1);
    for (std::size_t k = 0; k < c; ++k) {
        double m = 0.0, v = 0.0;
        for (std::size_t i = 0; i < 20; ++i) m += pooled[i * c + k] / 20.0;
        for (std::size_t i = 0; i < 20; ++i) v += (pooled[i * c + k] - m) * (pooled[i * c + k] - m) / 19.0;
        CHECK(p.at("kan_local.bn.running_mean")[k] == doctest::Approx(m).epsilon(1e-10));
        CHECK(p.at("kan_local.bn.running_var")[k] == doctest::Approx(v).epsilon(1e-10));
    }
}

TEST_CASE("stage 2: frozen tensors unchanged, consistency improves, deterministic") {
    const ImageSet set = tiny_set(32, 10);
    const ImageSet held = tiny_set(16, 12);
    const ModelParams s1 = calibrate_local_head(clone_expert0_to_expert1(ModelParams::init(tiny_model(), 13)), set);
    TrainLog log;
    const ModelParams s2 = stage2_train(tiny_train(3), set, s1, &log);
    std::size_t changed = 0;
    for (const auto& [name, t] : s1.tensors) {
        if (!is_stage2_layer(name)) CHECK_MESSAGE(s2.tensors.at(name) == t, name);
        if (stage2_trainable(name)) changed += s2.tensors.at(name) != t;
    }
    CHECK(changed > 0);
    REQUIRE(log.epochs.size() == 3);
    CHECK(log.epochs[0].stage == 2);
    CHECK(mean_consistency(s2, held) < mean_consistency(s1, held));
    CHECK(stage2_train(tiny_train(3), set, s1).tensors == s2.tensors);
}

TEST_CASE("progressive bit run warm-starts the backbone and resets the heads") {
    const ImageSet set = tiny_set(16, 14);
    const ModelParams eight = ModelParams::init(tiny_model(8), 15);
    const ModelParams sixteen = warm_start(eight, tiny_model(16), 16);
    for (const auto& [name, t] : sixteen.tensors) {
        if (name.starts_with("kan_global.") || name.starts_with("kan_local.")) {
            if (name.ends_with(".coef")) CHECK(t.shape() != eight.tensors.at(name).shape());
        } else {
            CHECK_MESSAGE(checksum(t) == checksum(eight.tensors.at(name)), name);
        }
    }
    testing::TempDir dir("progressive");
    CHECK_THROWS_AS(progressive_bit_run({}, tiny_train(1), tiny_model(), set, nullptr, dir.path()), DomainError);
    const auto one = progressive_bit_run({8}, tiny_train(1), tiny_model(), set, nullptr, dir.path());
    REQUIRE(one.size() == 1);
    CHECK(load_checkpoint(one.at(8)).config.bits == 8);
}
