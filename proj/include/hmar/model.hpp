#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hmar/autograd.hpp"
#include "hmar/box.hpp"
#include "hmar/kan.hpp"
#include "hmar/ops.hpp"

namespace hmar {

struct BackboneConfig {
    std::size_t input_size = 64;
    std::size_t in_channels = 1;
    std::size_t shallow_channels = 32;
    std::size_t deep_channels = 64;
    std::size_t blocks_shallow = 2;
    std::size_t blocks_deep = 2;
    std::size_t downsample_factor_shallow = 4;
    std::size_t num_classes = 8;

    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

struct ModelConfig {
    BackboneConfig backbone;
    KanGrid kan;
    std::size_t bits = 16;

    void validate() const;
};

enum class Mode { Global, Local };

struct RetrievalMode {
    Mode mode = Mode::Global;
    double alpha = 0.0;
    std::optional<BoundingBox> bbox;

    static RetrievalMode global() { return {}; }
    static RetrievalMode local(BoundingBox box, double alpha = 0.0) { return {Mode::Local, alpha, box}; }
};

/// Expert0 weight for a retrieval mode: 1 for global, alpha for local.
double mode_gate(const RetrievalMode& mode);

struct ModelParams {
    ModelConfig config;
    TensorMap tensors;

    /// Fresh parameters; every tensor draws from its own name-derived seed.
    static ModelParams init(const ModelConfig& config, std::uint64_t seed);
    const Tensor& at(const std::string& name) const;
};

/// Every tensor of a model (parameters and normalization buffers) with its shape, in a fixed order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config);

/// Seeded initial value of the tensor `name`.
Tensor init_tensor(const std::string& name, const Shape& shape, std::uint64_t seed);

/// Names trained in Stage 2: the Expert1 branches, the window attention and the local hash head.
bool stage2_trainable(std::string_view name);

// Graph builders. All take the parameter scope so the same code serves training and inference.

/// Batch normalization `prefix`; batch statistics when the scope trains this layer, running
/// statistics otherwise. Batch mode records momentum-0.9 running-stat updates on the scope.
Var norm(ParamScope& s, Var x, const std::string& prefix);

/// pooled [N,C] -> pooled * sigmoid(fc2(relu(fc1(pooled)))).
Var channel_attention(ParamScope& s, Var pooled, const std::string& prefix);

/// CA(avg_pool(F) + max_pool(F)) -> [N,C,1,1].
Var expert1_forward(ParamScope& s, Var fmap, const std::string& ca_prefix);

/// F + w0 * Expert0(F) + (1 - w0) * Expert1(F), Expert1 broadcast over space. An expert
/// with zero weight is not evaluated.
Var moe_block_forward(ParamScope& s, Var fmap, std::size_t layer, double w0);

/// [N,C_in,H,W] -> [N,shallow_channels,H/4,W/4].
Var forward_shallow(ParamScope& s, Var images, double w0);
/// [N,shallow_channels,h,w] -> [N,deep_channels,h/4,w/4].
Var forward_deep(ParamScope& s, Var shallow);

/// Global path embedding [N,deep_channels].
Var global_embedding(ParamScope& s, Var images);
Var class_logits(ParamScope& s, Var embedding);
/// Continuous global codes [N,bits] in [-1,1].
Var global_hash(ParamScope& s, Var embedding, const KanGrid& grid);

/// Expert1 recipe restricted to a window of the local map: [N,C,h,w] -> [N,C].
Var pool_window(ParamScope& s, Var fmap, Window window);
/// Continuous local codes [N,bits] from pooled window features [N,C].
Var local_hash(ParamScope& s, Var pooled, const KanGrid& grid);

// Inference helpers (running statistics, no gradients).

Tensor extract_global_embedding(const ModelParams& params, const Tensor& images);
Tensor extract_local_feature_map(const ModelParams& params, const Tensor& images, double alpha = 0.0);
/// Continuous global codes [N,bits].
Tensor encode_global(const ModelParams& params, const Tensor& images);
/// Continuous local codes [windows,bits] for windows of a single map [1,C,h,w].
Tensor encode_local_windows(const ModelParams& params, const Tensor& fmap, const std::vector<Window>& windows);

/// Parameter-name prefixes shared by model and trainer.
inline constexpr std::string_view kWindowCa = "expert1.window_ca";
std::string shallow_prefix(std::size_t layer, int expert);

} // namespace hmar
