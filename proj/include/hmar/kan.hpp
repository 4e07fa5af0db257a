#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "hmar/autograd.hpp"

namespace hmar {

/// Uniform knot grid over [-range, range] with `grid_size` intervals, extended by
/// `degree` knots on each side so every point of the range has full basis support.
struct KanGrid {
    int grid_size = 8;
    double range = 2.0;
    int degree = 3;

    std::vector<double> knots() const;
    std::size_t num_basis() const { return static_cast<std::size_t>(grid_size + degree); }
    void validate() const;
};

/// Values of all degree-`degree` B-spline basis functions at x (Cox-de Boor).
/// x is clamped into the spline domain [t_p, t_{m-p}] first.
std::vector<double> bspline_basis(double x, std::span<const double> knots, int degree);

/// Derivatives d/dx of the basis functions at x (zero outside the open domain).
std::vector<double> bspline_basis_derivative(double x, std::span<const double> knots, int degree);

/// Spline sum without squashing: out[n,o] = sum_i sum_j coef[o,i,j] * B_j(x[n,i]).
/// x [N,in], coef [out,in,num_basis] -> [N,out].
Var kan_spline(Var x, Var coef, const KanGrid& grid);

/// tanh(kan_spline(...)): continuous hash outputs in [-1,1].
Var kan_forward(Var x, Var coef, const KanGrid& grid);

/// A standalone KAN hash layer.
struct KanLayer {
    std::size_t in_dim = 0;
    std::size_t out_bits = 0;
    KanGrid grid;
    Tensor coefficients; // [out_bits, in_dim, num_basis]

    static KanLayer random(std::size_t in_dim, std::size_t out_bits, const KanGrid& grid, std::uint64_t seed);
    void validate() const;
};

/// Forward of a single input vector [in_dim] -> [out_bits].
Tensor kan_forward(const Tensor& x, const KanLayer& layer);

/// Standard deviation used to initialize spline coefficients for a layer with `in_dim` inputs.
double kan_init_stddev(std::size_t in_dim);

struct HashCode {
    std::vector<double> continuous;
    std::vector<std::int8_t> signs;
};

/// Elementwise sign with sign(0) = +1.
std::vector<std::int8_t> binarize(std::span<const double> continuous);
HashCode make_hash_code(std::span<const double> continuous);

} // namespace hmar
