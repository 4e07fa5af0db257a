#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "hmar/tensor.hpp"

namespace hmar {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool needs_grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode recording of a fixed operation set.
///
/// Each recorded node keeps its forward value and an optional backward closure that
/// reads the node's output gradient and accumulates into its inputs. Nodes that do not
/// depend on any parameter carry no closure and are skipped by backward().
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_value, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var parameter(std::string name, Tensor value);

    /// Records an op. `fn` is dropped when no input needs a gradient.
    Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    /// Gradient accumulator of `v`, zero-allocated on first use.
    Tensor& grad_buffer(Var v);

    /// Runs the backward pass from a scalar root; all gradients are reset first.
    void backward(Var root);

    /// Gradient of `v` from the last backward pass (zeros if `v` was unreachable).
    Tensor grad(Var v) const;

    struct ParameterEntry {
        std::string name;
        Var var;
    };
    const std::vector<ParameterEntry>& parameters() const { return parameters_; }

    std::size_t size() const { return nodes_.size(); }
    const std::string& op_name(std::size_t id) const { return nodes_[id].op; }

private:
    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        BackwardFn backward;
    };

    Var push(Node node);

    std::deque<Node> nodes_; // stable references across pushes
    std::vector<ParameterEntry> parameters_;
};

bool is_buffer_name(std::string_view name);

using TrainablePredicate = std::function<bool(std::string_view)>;

/// Predicate accepting every name that is not a running-statistics buffer.
bool all_trainable(std::string_view name);

/// Binds named tensors onto a tape on first use: trainable names become parameters,
/// everything else becomes a constant. Normalization layers consult `batch_stats()` to
/// pick batch vs running statistics and stash running-stat updates here.
class ParamScope {
public:
    ParamScope(Tape& tape, const TensorMap& tensors, TrainablePredicate trainable = all_trainable,
               bool training = false);

    Tape& tape() const { return *tape_; }
    Var operator()(const std::string& name);
    const Tensor& tensor(const std::string& name) const;
    bool has(const std::string& name) const { return tensors_->contains(name); }

    bool training() const { return training_; }
    bool trainable(std::string_view name) const { return trainable_(name); }
    /// True when the normalization layer `prefix` normalizes with batch statistics.
    bool batch_stats(const std::string& prefix) const { return training_ && trainable_(prefix + ".gamma"); }

    void record_stat(const std::string& name, Tensor value);
    const TensorMap& stat_updates() const { return stat_updates_; }

    /// Gradients for every trainable tensor; names never bound get zero tensors.
    TensorMap gradients() const;

private:
    Tape* tape_;
    const TensorMap* tensors_;
    TrainablePredicate trainable_;
    bool training_;
    std::map<std::string, Var> bound_;
    TensorMap stat_updates_;
};

using GraphFn = std::function<Var(ParamScope&)>;

struct GradCheckOptions {
    TrainablePredicate trainable = all_trainable;
    bool training = false;
};

struct ForwardBackwardResult {
    double loss = 0.0;
    TensorMap grads;
};

/// Builds the graph, checks it is scalar and finite, and back-propagates.
ForwardBackwardResult forward_backward(const GraphFn& graph, const TensorMap& params,
                                       const GradCheckOptions& options = {});

/// Max over all trainable entries of |analytic - numeric| / max(1, |analytic|, |numeric|),
/// numeric gradients by central differences.
double finite_difference_check(const GraphFn& graph, const TensorMap& params, double step,
                               const GradCheckOptions& options = {});

} // namespace hmar
