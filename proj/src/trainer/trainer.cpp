#include "hmar/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "hmar/checkpoint.hpp"
#include "hmar/errors.hpp"
#include "hmar/losses.hpp"
#include "hmar/retrieval.hpp"
#include "hmar/seed.hpp"

namespace hmar {

namespace {

bool stage1_trainable(std::string_view name) { return !is_buffer_name(name) && !stage2_trainable(name); }

bool is_hash_head(std::string_view name) { return name.starts_with("kan_global.") || name.starts_with("kan_local."); }

Window full_window(const Shape& fmap_shape) { return {0, fmap_shape[2], 0, fmap_shape[3]}; }

void apply_stats(TensorMap& tensors, const ParamScope& s) {
    for (const auto& [name, t] : s.stat_updates()) tensors.at(name) = t;
}

std::string where(int stage, std::size_t epoch, std::size_t batch) {
    return "stage " + std::to_string(stage) + ", epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch);
}

void require_finite(double v, int stage, std::size_t epoch, std::size_t batch) {
    if (!std::isfinite(v)) throw NumericError("non-finite loss at " + where(stage, epoch, batch));
}

template <typename F>
Tensor batched_rows(const Tensor& images, std::size_t batch_size, F&& run) {
    const std::size_t n = images.dim(0), per = images.size() / n;
    std::vector<double> out;
    std::size_t cols = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += batch_size) {
        const std::size_t b1 = std::min(n, b0 + batch_size);
        Shape shape = images.shape();
        shape[0] = b1 - b0;
        const auto src = images.data().subspan(b0 * per, (b1 - b0) * per);
        const Tensor codes = run(Tensor(std::move(shape), std::vector<double>(src.begin(), src.end())));
        cols = codes.dim(1);
        out.insert(out.end(), codes.data().begin(), codes.data().end());
    }
    return Tensor({n, cols}, std::move(out));
}

std::vector<std::vector<double>> thumbnails_of(const ImageSet& set) {
    std::vector<std::vector<double>> thumbs;
    const std::size_t per = set.images.size() / set.size();
    const Shape one{set.images.dim(1), set.images.dim(2), set.images.dim(3)};
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto src = set.images.data().subspan(i * per, per);
        thumbs.push_back(similarity_thumbnail(Tensor(one, std::vector<double>(src.begin(), src.end()))));
    }
    return thumbs;
}

} // namespace

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw DomainError("lr must be a finite non-negative number");
    if (batch_size < 2) throw DomainError("batch_size must be at least 2");
    if (epochs_per_stage == 0) throw DomainError("epochs_per_stage must be positive");
    if (bits == 0) throw DomainError("bits must be positive");
    if (!(weight_decay >= 0.0)) throw DomainError("weight_decay must be non-negative");
}

const char* augment_name(Augment a) {
    switch (a) {
    case Augment::Rot90: return "rot90";
    case Augment::Rot180: return "rot180";
    case Augment::Rot270: return "rot270";
    case Augment::FlipH: return "fliph";
    case Augment::FlipV: return "flipv";
    }
    return "?";
}

Augment sample_augment(std::mt19937_64& rng) {
    // One of the three operations, then the angle for a rotation.
    switch (rng() % 3) {
    case 0: {
        static constexpr Augment rots[3] = {Augment::Rot90, Augment::Rot180, Augment::Rot270};
        return rots[rng() % 3];
    }
    case 1: return Augment::FlipH;
    default: return Augment::FlipV;
    }
}

Tensor apply_augment(const Tensor& images, Augment a) {
    if (images.rank() != 3 && images.rank() != 4)
        throw ShapeError("apply_augment: expected [C,H,W] or [N,C,H,W], got " + shape_string(images.shape()));
    const std::size_t h = images.dim(images.rank() - 2), w = images.dim(images.rank() - 1);
    const bool rotation = a == Augment::Rot90 || a == Augment::Rot180 || a == Augment::Rot270;
    if (rotation && h != w) throw ShapeError("apply_augment: rotations need square images, got " + shape_string(images.shape()));
    const std::size_t planes = images.size() / (h * w);
    Tensor out(images.shape());
    for (std::size_t p = 0; p < planes; ++p) {
        const std::size_t base = p * h * w;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                std::size_t sy = y, sx = x;
                switch (a) {
                case Augment::Rot90: sy = x, sx = w - 1 - y; break;
                case Augment::Rot180: sy = h - 1 - y, sx = w - 1 - x; break;
                case Augment::Rot270: sy = h - 1 - x, sx = y; break;
                case Augment::FlipH: sx = w - 1 - x; break;
                case Augment::FlipV: sy = h - 1 - y; break;
                }
                out[base + y * w + x] = images[base + sy * w + sx];
            }
    }
    return out;
}

double cosine_lr(double lr0, std::size_t epoch, std::size_t epochs) {
    if (epochs <= 1) return lr0;
    const double lr_min = 0.01 * lr0;
    const double t = static_cast<double>(std::min(epoch, epochs - 1)) / static_cast<double>(epochs - 1);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

void AdamW::step(TensorMap& params, const TensorMap& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        Tensor& p = params.at(name);
        if (p.shape() != g.shape()) throw ShapeError("AdamW: gradient shape mismatch for " + name);
        auto [mit, fresh_m] = m_.try_emplace(name, p.shape());
        auto [vit, fresh_v] = v_.try_emplace(name, p.shape());
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + weight_decay_ * p[i];
            p[i] -= lr * update;
        }
    }
}

std::string TrainLog::tsv() const {
    std::ostringstream out;
    out.precision(6);
    for (const auto& e : epochs)
        out << e.epoch << '\t' << e.stage << '\t' << e.contrast << '\t' << e.quant << '\t' << e.ce << '\t' << e.consist
            << '\t' << e.reg << '\t' << e.val_map << '\n';
    return out.str();
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t b0 = 0; b0 < n; b0 += batch_size) {
        const std::size_t b1 = std::min(n, b0 + batch_size);
        if (b1 - b0 < 2) break;
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b0), order.begin() + static_cast<std::ptrdiff_t>(b1));
    }
    return batches;
}

Tensor encode_global_batched(const ModelParams& params, const Tensor& images, std::size_t batch_size) {
    return batched_rows(images, batch_size, [&](const Tensor& x) { return encode_global(params, x); });
}

Tensor encode_local_full(const ModelParams& params, const Tensor& images, std::size_t batch_size) {
    return batched_rows(images, batch_size, [&](const Tensor& x) {
        Tape tape;
        ParamScope s(tape, params.tensors, [](std::string_view) { return false; }, false);
        Var fmap = forward_shallow(s, tape.constant(x), 0.0);
        return local_hash(s, pool_window(s, fmap, full_window(fmap.shape())), params.config.kan).value();
    });
}

double global_map(const ModelParams& params, const ImageSet& queries, const ImageSet& db) {
    const PackedCodeSet q = PackedCodeSet::from_continuous(encode_global_batched(params, queries.images), queries.ids);
    const PackedCodeSet d = PackedCodeSet::from_continuous(encode_global_batched(params, db.images), db.ids);
    return compute_map(q, queries.labels, d, db.labels);
}

ModelParams stage1_train(const TrainConfig& config, const ImageSet& train, const ImageSet* val, ModelParams params,
                         TrainLog* log, const EpochCallback& on_epoch) {
    config.validate();
    if (train.size() < 2) throw DomainError("stage 1 needs at least two training images");
    const auto thumbs = thumbnails_of(train);
    AdamW opt(config.beta1, config.beta2, config.adam_eps, config.weight_decay);
    bool first = true;
    for (std::size_t epoch = 0; epoch < config.epochs_per_stage; ++epoch) {
        const double lr = cosine_lr(config.lr, epoch, config.epochs_per_stage);
        const auto batches = epoch_batches(train.size(), config.batch_size, derive_seed(config.seed, "stage1/epoch/" + std::to_string(epoch)));
        EpochMetrics m;
        m.epoch = epoch;
        m.stage = 1;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            std::vector<int> labels;
            std::vector<std::vector<double>> batch_thumbs;
            for (std::size_t i : idx) {
                labels.push_back(train.labels[i]);
                batch_thumbs.push_back(thumbs[i]);
            }
            const Tensor sim = similarity_matrix(batch_thumbs);
            Tape tape;
            ParamScope s(tape, params.tensors, stage1_trainable, true);
            Var lc, lq, lce, total;
            try {
                Var e = global_embedding(s, tape.constant(train.batch(idx)));
                Var h = global_hash(s, e, params.config.kan);
                lc = contrastive_loss(h, sim, labels);
                lq = quantization_loss(h);
                lce = cross_entropy(class_logits(s, e), labels);
                total = stage1_total(lc, lq, lce);
                require_finite(total.value().item(), 1, epoch, b);
                tape.backward(total);
            } catch (const NumericError& err) {
                throw NumericError(std::string(err.what()) + " (" + where(1, epoch, b) + ")");
            }
            if (first && log) log->initial_loss = total.value().item();
            first = false;
            opt.step(params.tensors, s.gradients(), lr);
            apply_stats(params.tensors, s);
            m.contrast += lc.value().item();
            m.quant += lq.value().item();
            m.ce += lce.value().item();
            m.total += total.value().item();
        }
        const double nb = static_cast<double>(std::max<std::size_t>(batches.size(), 1));
        m.contrast /= nb;
        m.quant /= nb;
        m.ce /= nb;
        m.total /= nb;
        m.val_map = (val && val->size() > 0 && config.eval_each_epoch) ? global_map(params, *val, train)
                                                                        : std::numeric_limits<double>::quiet_NaN();
        if (log) log->epochs.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    return params;
}

ModelParams clone_expert0_to_expert1(ModelParams params) {
    for (auto& [name, t] : params.tensors) {
        const auto pos = name.find(".expert1.");
        if (pos == std::string::npos) continue;
        std::string source = name;
        source.replace(pos, 9, ".expert0.");
        const auto it = params.tensors.find(source);
        if (it != params.tensors.end() && it->second.shape() == t.shape()) t = it->second;
    }
    return params;
}

ModelParams calibrate_local_head(ModelParams params, const ImageSet& images, std::size_t batch_size) {
    if (images.size() < 2) throw DomainError("calibrate_local_head: need at least two images");
    const Tensor pooled = batched_rows(images.images, batch_size, [&](const Tensor& x) {
        Tape tape;
        ParamScope s(tape, params.tensors, [](std::string_view) { return false; }, false);
        Var fmap = forward_shallow(s, tape.constant(x), 0.0);
        return pool_window(s, fmap, full_window(fmap.shape())).value();
    });
    const std::size_t n = pooled.dim(0), c = pooled.dim(1);
    Tensor mean({c}, 0.0), var({c}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) mean[k] += pooled[i * c + k];
    for (std::size_t k = 0; k < c; ++k) mean[k] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) var[k] += (pooled[i * c + k] - mean[k]) * (pooled[i * c + k] - mean[k]);
    for (std::size_t k = 0; k < c; ++k) var[k] /= static_cast<double>(n - 1);
    params.tensors.at("kan_local.bn.running_mean") = mean;
    params.tensors.at("kan_local.bn.running_var") = var;
    return params;
}

ModelParams stage2_train(const TrainConfig& config, const ImageSet& train, ModelParams params, TrainLog* log,
                         const EpochCallback& on_epoch) {
    config.validate();
    if (train.size() < 2) throw DomainError("stage 2 needs at least two training images");
    AdamW opt(config.beta1, config.beta2, config.adam_eps, config.weight_decay);
    for (std::size_t epoch = 0; epoch < config.epochs_per_stage; ++epoch) {
        const double lr = cosine_lr(config.lr, epoch, config.epochs_per_stage);
        const std::string tag = std::to_string(epoch);
        const auto batches = epoch_batches(train.size(), config.batch_size, derive_seed(config.seed, "stage2/epoch/" + tag));
        std::mt19937_64 aug_rng(derive_seed(config.seed, "stage2/augment/" + tag));
        EpochMetrics m;
        m.epoch = epoch;
        m.stage = 2;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            const std::size_t n = idx.size();
            const Tensor x = train.batch(idx);
            std::vector<double> both(x.data().begin(), x.data().end());
            const std::size_t per = x.size() / n;
            for (std::size_t i = 0; i < n; ++i) {
                const Augment a = sample_augment(aug_rng);
                const auto src = x.data().subspan(i * per, per);
                const Tensor img({x.dim(1), x.dim(2), x.dim(3)}, std::vector<double>(src.begin(), src.end()));
                const Tensor t = apply_augment(img, a);
                both.insert(both.end(), t.data().begin(), t.data().end());
            }
            Shape shape = x.shape();
            shape[0] = 2 * n;
            Tape tape;
            ParamScope s(tape, params.tensors, stage2_trainable, true);
            Var lcons, lreg, total;
            try {
                Var fmap = forward_shallow(s, tape.constant(Tensor(std::move(shape), std::move(both))), 0.0);
                Var h = local_hash(s, pool_window(s, fmap, full_window(fmap.shape())), params.config.kan);
                Var ho = slice_rows(h, 0, n), ht = slice_rows(h, n, 2 * n);
                lcons = consistency_loss(ho, ht);
                lreg = diversity_regularizer(ho);
                total = add(lcons, scale(lreg, config.lambda_reg));
                require_finite(total.value().item(), 2, epoch, b);
                tape.backward(total);
            } catch (const NumericError& err) {
                throw NumericError(std::string(err.what()) + " (" + where(2, epoch, b) + ")");
            }
            if (epoch == 0 && b == 0 && log) log->initial_loss = total.value().item();
            opt.step(params.tensors, s.gradients(), lr);
            apply_stats(params.tensors, s);
            m.consist += lcons.value().item();
            m.reg += lreg.value().item();
            m.total += total.value().item();
        }
        const double nb = static_cast<double>(std::max<std::size_t>(batches.size(), 1));
        m.consist /= nb;
        m.reg /= nb;
        m.total /= nb;
        m.val_map = std::numeric_limits<double>::quiet_NaN();
        if (log) log->epochs.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    return params;
}

ModelParams train_both_stages(const TrainConfig& config, const ImageSet& train, const ImageSet* val, ModelParams params,
                              TrainLog* log, const EpochCallback& on_epoch) {
    params = stage1_train(config, train, val, std::move(params), log, on_epoch);
    params = calibrate_local_head(clone_expert0_to_expert1(std::move(params)), train);
    TrainLog stage2_log;
    params = stage2_train(config, train, std::move(params), log ? &stage2_log : nullptr, on_epoch);
    if (log) log->epochs.insert(log->epochs.end(), stage2_log.epochs.begin(), stage2_log.epochs.end());
    return params;
}

ModelParams warm_start(const ModelParams& from, const ModelConfig& config, std::uint64_t seed) {
    ModelParams p = ModelParams::init(config, seed);
    for (auto& [name, t] : p.tensors) {
        if (is_hash_head(name)) continue;
        const auto it = from.tensors.find(name);
        if (it != from.tensors.end() && it->second.shape() == t.shape()) t = it->second;
    }
    return p;
}

std::map<std::size_t, std::filesystem::path> progressive_bit_run(std::vector<std::size_t> bits, const TrainConfig& base,
                                                                const ModelConfig& model, const ImageSet& train,
                                                                const ImageSet* val, const std::filesystem::path& out_dir,
                                                                const EpochCallback& on_epoch) {
    if (bits.empty()) throw DomainError("progressive_bit_run: empty bit list");
    std::sort(bits.begin(), bits.end());
    if (std::adjacent_find(bits.begin(), bits.end()) != bits.end()) throw DomainError("progressive_bit_run: repeated bit length");
    std::map<std::size_t, std::filesystem::path> out;
    std::optional<ModelParams> previous;
    for (std::size_t b : bits) {
        TrainConfig tc = base;
        tc.bits = b;
        ModelConfig mc = model;
        mc.bits = b;
        const std::uint64_t seed = derive_seed(base.seed, "init/" + std::to_string(b));
        ModelParams init = previous ? warm_start(*previous, mc, seed) : ModelParams::init(mc, seed);
        ModelParams trained = round_to_fp32(train_both_stages(tc, train, val, std::move(init), nullptr, on_epoch));
        const auto path = out_dir / ("hmar_" + std::to_string(b) + "bit.ckpt");
        save_checkpoint(path, trained);
        out.emplace(b, path);
        previous = std::move(trained);
    }
    return out;
}

} // namespace hmar
