#include "hmar/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "hmar/errors.hpp"

namespace hmar {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::needs_grad() const { return tape_->needs_grad(id_); }

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::parameter(std::string name, Tensor value) {
    Node n;
    n.op = "parameter:" + name;
    n.value = std::move(value);
    n.needs_grad = true;
    Var v = push(std::move(n));
    parameters_.push_back({std::move(name), v});
    return v;
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node n;
    n.op = std::string(op);
    n.value = std::move(value);
    n.needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.needs_grad(); });
    if (n.needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    Node n;
    n.op = std::string(op);
    n.value = std::move(value);
    n.needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.needs_grad(); });
    if (n.needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

Tensor& Tape::grad_buffer(Var v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
}

void Tape::backward(Var root) {
    const Tensor& rv = value(root.id());
    if (rv.size() != 1) throw ShapeError("backward root must be scalar, got shape " + shape_string(rv.shape()));
    if (!std::isfinite(rv[0])) {
        for (std::size_t i = 0; i <= root.id(); ++i) {
            if (!nodes_[i].value.all_finite())
                throw NumericError("non-finite value first produced by op '" + nodes_[i].op + "' (node " +
                                   std::to_string(i) + ")");
        }
        throw NumericError("non-finite loss");
    }
    for (auto& n : nodes_) n.grad = Tensor();
    if (!nodes_[root.id()].needs_grad) return;
    grad_buffer(root)[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        // The closure may grow other nodes' gradients but never this node's.
        const Tensor g = std::move(n.grad);
        n.backward(*this, n.value, g);
        n.grad = g;
    }
}

Tensor Tape::grad(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
}

bool is_buffer_name(std::string_view name) {
    return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

bool all_trainable(std::string_view name) { return !is_buffer_name(name); }

ParamScope::ParamScope(Tape& tape, const TensorMap& tensors, TrainablePredicate trainable, bool training)
    : tape_(&tape), tensors_(&tensors), trainable_(std::move(trainable)), training_(training) {}

Var ParamScope::operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    const Tensor& t = tensor(name);
    Var v = (trainable_(name) && !is_buffer_name(name)) ? tape_->parameter(name, t) : tape_->constant(t);
    bound_.emplace(name, v);
    return v;
}

const Tensor& ParamScope::tensor(const std::string& name) const {
    auto it = tensors_->find(name);
    if (it == tensors_->end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
}

void ParamScope::record_stat(const std::string& name, Tensor value) { stat_updates_[name] = std::move(value); }

TensorMap ParamScope::gradients() const {
    TensorMap out;
    for (const auto& [name, t] : *tensors_) {
        if (!trainable_(name) || is_buffer_name(name)) continue;
        auto it = bound_.find(name);
        out.emplace(name, it == bound_.end() ? Tensor(t.shape(), 0.0) : tape_->grad(it->second));
    }
    return out;
}

ForwardBackwardResult forward_backward(const GraphFn& graph, const TensorMap& params,
                                       const GradCheckOptions& options) {
    Tape tape;
    ParamScope scope(tape, params, options.trainable, options.training);
    Var root = graph(scope);
    tape.backward(root);
    return {root.value().item(), scope.gradients()};
}

namespace {

double evaluate(const GraphFn& graph, const TensorMap& params, const GradCheckOptions& options) {
    Tape tape;
    ParamScope scope(tape, params, options.trainable, options.training);
    double v = graph(scope).value().item();
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: function returned a non-finite value");
    return v;
}

} // namespace

double finite_difference_check(const GraphFn& graph, const TensorMap& params, double step,
                               const GradCheckOptions& options) {
    if (!(step > 0.0)) throw DomainError("finite difference step must be positive");
    const auto analytic = forward_backward(graph, params, options).grads;
    TensorMap probe = params;
    double worst = 0.0;
    for (const auto& [name, g] : analytic) {
        Tensor& p = probe.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p[i];
            p[i] = orig + step;
            const double up = evaluate(graph, probe, options);
            p[i] = orig - step;
            const double down = evaluate(graph, probe, options);
            p[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double a = g[i];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace hmar
