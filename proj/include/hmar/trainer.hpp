#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hmar/dataset.hpp"
#include "hmar/model.hpp"

namespace hmar {

struct TrainConfig {
    std::size_t bits = 16;
    std::size_t epochs_per_stage = 10;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double lambda_reg = 0.1;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Validation mAP after every epoch; off saves one encoding pass per epoch.
    bool eval_each_epoch = true;

    void validate() const;
};

enum class Augment { Rot90, Rot180, Rot270, FlipH, FlipV };
const char* augment_name(Augment a);

/// Rot(theta) with theta uniform over the right angles, or one of the flips.
Augment sample_augment(std::mt19937_64& rng);

/// Lossless pixel permutation of [C,H,W] or [N,C,H,W] images (square for rotations).
/// Rotations are counter-clockwise.
Tensor apply_augment(const Tensor& images, Augment a);

/// Cosine annealing from lr0 at epoch 0 to 0.01 * lr0 at the final epoch.
double cosine_lr(double lr0, std::size_t epoch, std::size_t epochs);

/// Adam with decoupled weight decay over the tensors named in `trainable`.
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-4)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(TensorMap& params, const TensorMap& grads, double lr);
    std::size_t steps() const { return t_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    std::size_t t_ = 0;
    TensorMap m_, v_;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    int stage = 1;
    double contrast = 0.0;
    double quant = 0.0;
    double ce = 0.0;
    double consist = 0.0;
    double reg = 0.0;
    double val_map = 0.0; // NaN when not evaluated
    double total = 0.0;
};

struct TrainLog {
    std::vector<EpochMetrics> epochs;
    double initial_loss = 0.0; // loss of the first batch before any update
    /// One tab-separated line per epoch: epoch, stage, L_contrast, L_quant, L_CE, L_consist, L_reg, val_mAP.
    std::string tsv() const;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Shuffled mini-batches of one epoch; a final batch with fewer than two images is dropped.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed);

/// Stage 1: global path (gate at Expert0), contrastive + 0.5 quantization + 0.5 cross-entropy.
/// Trains every parameter outside the Stage-2 set.
ModelParams stage1_train(const TrainConfig& config, const ImageSet& train, const ImageSet* val, ModelParams params,
                         TrainLog* log = nullptr, const EpochCallback& on_epoch = {});

/// Copies every Expert1 tensor that has a same-shape Expert0 counterpart; nothing else changes.
ModelParams clone_expert0_to_expert1(ModelParams params);

/// Sets the running statistics of the local hash head's normalization to the exact mean and
/// unbiased variance of full-map window features over `images`.
ModelParams calibrate_local_head(ModelParams params, const ImageSet& images, std::size_t batch_size = 64);

/// Stage 2: local path (gate at Expert1), consistency between x and T(x) plus lambda * diversity.
/// Only Stage-2 trainable tensors change.
ModelParams stage2_train(const TrainConfig& config, const ImageSet& train, ModelParams params, TrainLog* log = nullptr,
                         const EpochCallback& on_epoch = {});

/// Stage 1, expert cloning, local head calibration, Stage 2.
ModelParams train_both_stages(const TrainConfig& config, const ImageSet& train, const ImageSet* val, ModelParams params,
                              TrainLog* log = nullptr, const EpochCallback& on_epoch = {});

/// Continuous local codes of full-map windows [N,bits], in batches.
Tensor encode_local_full(const ModelParams& params, const Tensor& images, std::size_t batch_size = 64);
/// Continuous global codes [N,bits], in batches.
Tensor encode_global_batched(const ModelParams& params, const Tensor& images, std::size_t batch_size = 64);

/// Mean mAP of `queries` against `db` with global codes over the whole database.
double global_map(const ModelParams& params, const ImageSet& queries, const ImageSet& db);

/// One model per bit length, ascending. Each later model starts from the previous one's
/// final weights except the hash heads, which are freshly initialized. Checkpoints go to
/// out_dir/hmar_{bits}bit.ckpt.
std::map<std::size_t, std::filesystem::path> progressive_bit_run(std::vector<std::size_t> bits, const TrainConfig& base,
                                                                const ModelConfig& model, const ImageSet& train,
                                                                const ImageSet* val, const std::filesystem::path& out_dir,
                                                                const EpochCallback& on_epoch = {});

/// Fresh parameters for `config` with every tensor of `from` copied over except the hash heads.
ModelParams warm_start(const ModelParams& from, const ModelConfig& config, std::uint64_t seed);

} // namespace hmar
