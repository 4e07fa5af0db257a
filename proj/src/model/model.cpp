#include "hmar/model.hpp"

#include <cmath>
#include <random>

#include "hmar/errors.hpp"
#include "hmar/seed.hpp"

namespace hmar {

namespace {

constexpr double kBnMomentum = 0.9;
constexpr std::size_t kCaReduction = 4;

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void add_bn(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix, std::size_t c) {
    for (const char* f : {".gamma", ".beta", ".running_mean", ".running_var"}) out.emplace_back(prefix + f, Shape{c});
}

void add_ca(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix, std::size_t c) {
    const std::size_t r = std::max<std::size_t>(1, c / kCaReduction);
    out.emplace_back(prefix + ".fc1.w", Shape{r, c});
    out.emplace_back(prefix + ".fc1.b", Shape{r});
    out.emplace_back(prefix + ".fc2.w", Shape{c, r});
    out.emplace_back(prefix + ".fc2.b", Shape{c});
}

void add_branch(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix, std::size_t c) {
    out.emplace_back(prefix + ".conv1.w", Shape{c, c, 3, 3});
    add_bn(out, prefix + ".bn1", c);
    out.emplace_back(prefix + ".conv2.w", Shape{c, c, 3, 3});
    add_bn(out, prefix + ".bn2", c);
}

Var conv_bn(ParamScope& s, Var x, const std::string& conv, const std::string& bn, Conv2dSpec spec) {
    return norm(s, conv2d(x, s(conv + ".w"), spec), bn);
}

/// conv-bn-relu-conv-bn residual branch used by both experts.
Var conv_branch(ParamScope& s, Var x, const std::string& prefix) {
    Var y = relu(conv_bn(s, x, prefix + ".conv1", prefix + ".bn1", {1, 1}));
    return conv_bn(s, y, prefix + ".conv2", prefix + ".bn2", {1, 1});
}

Tensor run_inference(const ModelParams& params, const std::function<Var(ParamScope&)>& graph) {
    Tape tape;
    ParamScope scope(tape, params.tensors, [](std::string_view) { return false; }, false);
    return graph(scope).value();
}

} // namespace

void BackboneConfig::validate() const {
    if (downsample_factor_shallow != 4)
        throw DomainError("downsample_factor_shallow must be 4 (stem stride 2 followed by pool stride 2)");
    if (input_size == 0 || input_size % 16 != 0) throw DomainError("input_size must be a positive multiple of 16");
    if (in_channels == 0 || shallow_channels == 0 || deep_channels == 0)
        throw DomainError("channel counts must be positive");
    if (blocks_shallow == 0) throw DomainError("blocks_shallow must be >= 1");
    if (blocks_deep < 2) throw DomainError("blocks_deep must be >= 2 (two stride-2 blocks give the /16 deep map)");
    if (num_classes < 2) throw DomainError("num_classes must be >= 2");
}

void ModelConfig::validate() const {
    backbone.validate();
    kan.validate();
    if (bits == 0 || bits > 65535) throw DomainError("bits must be in [1, 65535]");
}

double mode_gate(const RetrievalMode& mode) {
    if (mode.mode == Mode::Global) return 1.0;
    if (!mode.bbox) throw DomainError("local retrieval mode requires a bounding box");
    if (!(mode.alpha >= 0.0 && mode.alpha <= 1.0)) throw DomainError("alpha must lie in [0,1]");
    return mode.alpha;
}

std::string shallow_prefix(std::size_t layer, int expert) {
    return "shallow." + std::to_string(layer) + ".expert" + std::to_string(expert);
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config) {
    const BackboneConfig& b = config.backbone;
    const std::size_t cs = b.shallow_channels, cd = b.deep_channels, nb = config.kan.num_basis();
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("stem.conv.w", Shape{cs, b.in_channels, 3, 3});
    add_bn(out, "stem.bn", cs);
    for (std::size_t l = 0; l < b.blocks_shallow; ++l) {
        add_branch(out, shallow_prefix(l, 0), cs);
        add_branch(out, shallow_prefix(l, 1), cs);
        add_ca(out, shallow_prefix(l, 1) + ".ca", cs);
    }
    add_ca(out, std::string(kWindowCa), cs);
    for (std::size_t l = 0; l < b.blocks_deep; ++l) {
        const std::string p = "deep." + std::to_string(l);
        const std::size_t cin = l == 0 ? cs : cd;
        out.emplace_back(p + ".conv1.w", Shape{cd, cin, 3, 3});
        add_bn(out, p + ".bn1", cd);
        out.emplace_back(p + ".conv2.w", Shape{cd, cd, 3, 3});
        add_bn(out, p + ".bn2", cd);
        if (l < 2) {
            out.emplace_back(p + ".proj.w", Shape{cd, cin, 1, 1});
            add_bn(out, p + ".proj_bn", cd);
        }
    }
    add_bn(out, "kan_global.bn", cd);
    out.emplace_back("kan_global.coef", Shape{config.bits, cd, nb});
    add_bn(out, "kan_local.bn", cs);
    out.emplace_back("kan_local.coef", Shape{config.bits, cs, nb});
    out.emplace_back("classifier.w", Shape{b.num_classes, cd});
    out.emplace_back("classifier.b", Shape{b.num_classes});
    return out;
}

Tensor init_tensor(const std::string& name, const Shape& shape, std::uint64_t seed) {
    if (ends_with(name, ".gamma") || ends_with(name, ".running_var")) return Tensor(shape, 1.0);
    if (ends_with(name, ".beta") || ends_with(name, ".running_mean") || ends_with(name, ".b")) return Tensor(shape, 0.0);
    double stddev = 0.0;
    if (ends_with(name, ".coef"))
        stddev = kan_init_stddev(shape[1]);
    else if (shape.size() == 4)
        stddev = std::sqrt(2.0 / static_cast<double>(shape[1] * shape[2] * shape[3]));
    else if (shape.size() == 2)
        stddev = std::sqrt(1.0 / static_cast<double>(shape[1]));
    else
        throw DomainError("no initializer for tensor '" + name + "'");
    Tensor t(shape);
    std::mt19937_64 rng(derive_seed(seed, name));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p{config, {}};
    for (const auto& [name, shape] : parameter_shapes(config)) p.tensors.emplace(name, init_tensor(name, shape, seed));
    return p;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DomainError("model has no tensor '" + name + "'");
    return it->second;
}

bool stage2_trainable(std::string_view name) {
    if (is_buffer_name(name)) return false;
    return name.find("expert1") != std::string_view::npos || name.substr(0, 10) == "kan_local.";
}

Var norm(ParamScope& s, Var x, const std::string& prefix) {
    Var gamma = s(prefix + ".gamma"), beta = s(prefix + ".beta");
    const Tensor& rm = s.tensor(prefix + ".running_mean");
    const Tensor& rv = s.tensor(prefix + ".running_var");
    if (!s.batch_stats(prefix)) return batch_norm_eval(x, gamma, beta, rm, rv);
    BatchNormResult r = batch_norm_train(x, gamma, beta);
    Tensor m = rm, v = rv;
    for (std::size_t c = 0; c < m.size(); ++c) {
        m[c] = kBnMomentum * m[c] + (1.0 - kBnMomentum) * r.batch_mean[c];
        v[c] = kBnMomentum * v[c] + (1.0 - kBnMomentum) * r.batch_var[c];
    }
    s.record_stat(prefix + ".running_mean", std::move(m));
    s.record_stat(prefix + ".running_var", std::move(v));
    return r.out;
}

Var channel_attention(ParamScope& s, Var pooled, const std::string& prefix) {
    Var h = relu(dense(pooled, s(prefix + ".fc1.w"), s(prefix + ".fc1.b")));
    Var a = sigmoid(dense(h, s(prefix + ".fc2.w"), s(prefix + ".fc2.b")));
    return mul(pooled, a);
}

Var expert1_forward(ParamScope& s, Var fmap, const std::string& ca_prefix) {
    if (fmap.shape().size() != 4) throw ShapeError("expert1_forward: expected NCHW map, got " + shape_string(fmap.shape()));
    const std::size_t n = fmap.shape()[0], c = fmap.shape()[1];
    Var pooled = reshape(add(global_avg_pool(fmap), global_max_pool(fmap)), {n, c});
    return reshape(channel_attention(s, pooled, ca_prefix), {n, c, 1, 1});
}

Var moe_block_forward(ParamScope& s, Var fmap, std::size_t layer, double w0) {
    if (!(w0 >= 0.0 && w0 <= 1.0)) throw DomainError("moe_block_forward: gate weight must lie in [0,1]");
    if (w0 == 1.0) return add(fmap, conv_branch(s, fmap, shallow_prefix(layer, 0)));
    const std::string e1 = shallow_prefix(layer, 1);
    Var expert1 = expert1_forward(s, conv_branch(s, fmap, e1), e1 + ".ca");
    if (w0 == 0.0) return add_spatial_broadcast(fmap, expert1);
    Var mixed = add(fmap, scale(conv_branch(s, fmap, shallow_prefix(layer, 0)), w0));
    return add_spatial_broadcast(mixed, scale(expert1, 1.0 - w0));
}

Var forward_shallow(ParamScope& s, Var images, double w0) {
    const Shape& sh = images.shape();
    if (sh.size() != 4 || sh[2] % 4 != 0 || sh[3] % 4 != 0 || sh[2] == 0 || sh[3] == 0)
        throw ShapeError("forward_shallow: input " + shape_string(sh) + " must be NCHW with H, W divisible by 4");
    Var x = relu(conv_bn(s, images, "stem.conv", "stem.bn", {2, 1}));
    x = max_pool2d(x, 3, 2, 1);
    for (std::size_t l = 0; s.has(shallow_prefix(l, 0) + ".conv1.w"); ++l) x = moe_block_forward(s, x, l, w0);
    return x;
}

Var forward_deep(ParamScope& s, Var shallow) {
    const Shape& sh = shallow.shape();
    const Shape& w = s.tensor("deep.0.conv1.w").shape();
    if (sh.size() != 4 || sh[1] != w[1])
        throw ShapeError("forward_deep: input " + shape_string(sh) + " does not match first deep conv " + shape_string(w));
    Var x = shallow;
    for (std::size_t l = 0; s.has("deep." + std::to_string(l) + ".conv1.w"); ++l) {
        const std::string p = "deep." + std::to_string(l);
        const std::size_t stride = l < 2 ? 2 : 1;
        Var y = relu(conv_bn(s, x, p + ".conv1", p + ".bn1", {stride, 1}));
        y = conv_bn(s, y, p + ".conv2", p + ".bn2", {1, 1});
        Var skip = s.has(p + ".proj.w") ? conv_bn(s, x, p + ".proj", p + ".proj_bn", {stride, 0}) : x;
        x = relu(add(y, skip));
    }
    return x;
}

Var global_embedding(ParamScope& s, Var images) {
    Var deep = forward_deep(s, forward_shallow(s, images, 1.0));
    return reshape(global_avg_pool(deep), {deep.shape()[0], deep.shape()[1]});
}

Var class_logits(ParamScope& s, Var embedding) { return dense(embedding, s("classifier.w"), s("classifier.b")); }

Var global_hash(ParamScope& s, Var embedding, const KanGrid& grid) {
    return kan_forward(norm(s, embedding, "kan_global.bn"), s("kan_global.coef"), grid);
}

Var pool_window(ParamScope& s, Var fmap, Window window) {
    if (fmap.shape().size() != 4) throw ShapeError("pool_window: expected NCHW map, got " + shape_string(fmap.shape()));
    const std::size_t n = fmap.shape()[0], c = fmap.shape()[1];
    Var pooled = reshape(add(window_avg_pool(fmap, window), window_max_pool(fmap, window)), {n, c});
    return channel_attention(s, pooled, std::string(kWindowCa));
}

Var local_hash(ParamScope& s, Var pooled, const KanGrid& grid) {
    return kan_forward(norm(s, pooled, "kan_local.bn"), s("kan_local.coef"), grid);
}

Tensor extract_global_embedding(const ModelParams& params, const Tensor& images) {
    return run_inference(params, [&](ParamScope& s) { return global_embedding(s, s.tape().constant(images)); });
}

Tensor extract_local_feature_map(const ModelParams& params, const Tensor& images, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("alpha must lie in [0,1]");
    return run_inference(params, [&](ParamScope& s) { return forward_shallow(s, s.tape().constant(images), alpha); });
}

Tensor encode_global(const ModelParams& params, const Tensor& images) {
    return run_inference(params, [&](ParamScope& s) {
        return global_hash(s, global_embedding(s, s.tape().constant(images)), params.config.kan);
    });
}

Tensor encode_local_windows(const ModelParams& params, const Tensor& fmap, const std::vector<Window>& windows) {
    if (fmap.rank() != 4 || fmap.dim(0) != 1)
        throw ShapeError("encode_local_windows: expected a single map [1,C,h,w], got " + shape_string(fmap.shape()));
    if (windows.empty()) throw DomainError("encode_local_windows: no windows");
    return run_inference(params, [&](ParamScope& s) {
        Var m = s.tape().constant(fmap);
        const std::size_t c = fmap.dim(1);
        std::vector<double> pooled;
        pooled.reserve(windows.size() * c);
        for (const Window& w : windows) {
            Var p = add(window_avg_pool(m, w), window_max_pool(m, w));
            pooled.insert(pooled.end(), p.value().data().begin(), p.value().data().end());
        }
        Var batch = s.tape().constant(Tensor({windows.size(), c}, std::move(pooled)));
        return local_hash(s, channel_attention(s, batch, std::string(kWindowCa)), params.config.kan);
    });
}

} // namespace hmar
