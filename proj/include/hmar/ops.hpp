#pragma once

#include <cstddef>
#include <vector>

#include "hmar/autograd.hpp"

namespace hmar {

// Elementwise, same-shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);
/// x * c with `c` a constant tensor of x's shape.
Var mul_const(Var x, const Tensor& c);

Var relu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var exp(Var x);
Var log(Var x);
Var abs(Var x);
/// Gradient passes where lo <= x <= hi.
Var clamp(Var x, double lo, double hi);

/// Forward sign with sign(0) = +1; backward is the identity (straight-through).
Var sign_ste(Var x);

Var sum(Var x);
Var mean(Var x);
/// [N, D] -> [N], summed / averaged over the last axis.
Var sum_rows(Var x);
Var mean_rows(Var x);

Var reshape(Var x, Shape shape);
/// Concatenates along axis 0; trailing dims must agree.
Var concat_rows(Var a, Var b);
/// Rows [begin, end) along axis 0.
Var slice_rows(Var x, std::size_t begin, std::size_t end);

/// a [M,K] times b [N,K] transposed -> [M,N].
Var matmul_nt(Var a, Var b);
/// x [N,in] -> x w^T + b with w [out,in], b [out].
Var dense(Var x, Var w, Var b);

struct Conv2dSpec {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// x [N,C,H,W], w [O,C,kh,kw] -> [N,O,Ho,Wo]. No bias.
Var conv2d(Var x, Var w, Conv2dSpec spec);

/// Max pooling with -inf padding.
Var max_pool2d(Var x, std::size_t kernel, std::size_t stride, std::size_t padding);

/// Rectangular region [y0,y1) x [x0,x1) of an NCHW map.
struct Window {
    std::size_t y0, y1, x0, x1;
};

/// Average over a spatial window -> [N,C,1,1]. The sum is taken over sorted values so the
/// result does not depend on the order of positions inside the window.
Var window_avg_pool(Var x, Window w);
/// Max over a spatial window -> [N,C,1,1]; gradient goes to the first maximal position.
Var window_max_pool(Var x, Window w);
Var global_avg_pool(Var x);
Var global_max_pool(Var x);

/// x [N,C,H,W] + y [N,C,1,1] broadcast over H, W.
Var add_spatial_broadcast(Var x, Var y);

struct BatchNormResult {
    Var out;
    Tensor batch_mean;
    Tensor batch_var; // unbiased
};

/// Normalizes per channel (axis 1) over all other axes using batch statistics.
BatchNormResult batch_norm_train(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Normalizes with fixed statistics.
Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double eps = 1e-5);

/// Mean over the batch of -log softmax(logits)[label]; logits [N,C].
Var cross_entropy(Var logits, const std::vector<int>& labels);

} // namespace hmar
