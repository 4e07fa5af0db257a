#include "hmar/kan.hpp"

#include <algorithm>
#include <cmath>

#include "hmar/errors.hpp"
#include "hmar/ops.hpp"

namespace hmar {

namespace {

void validate_knots(std::span<const double> knots, int degree) {
    if (degree < 0) throw DomainError("B-spline degree must be non-negative");
    if (knots.size() < static_cast<std::size_t>(2 * degree + 2))
        throw DomainError("knot vector too short for degree " + std::to_string(degree));
    for (std::size_t i = 1; i < knots.size(); ++i)
        if (!(knots[i] > knots[i - 1])) throw DomainError("knot vector must be strictly increasing");
}

struct SpanBasis {
    double x;           // clamped input
    bool interior;      // input was inside the domain
    std::size_t span;   // t_span <= x < t_{span+1}
};

SpanBasis locate(double x, std::span<const double> knots, int degree) {
    const auto p = static_cast<std::size_t>(degree);
    const std::size_t m = knots.size() - 1;
    const double lo = knots[p], hi = knots[m - p];
    SpanBasis s{std::clamp(x, lo, hi), x >= lo && x <= hi, 0};
    if (s.x >= hi) {
        s.span = m - p - 1;
    } else {
        auto it = std::upper_bound(knots.begin() + static_cast<std::ptrdiff_t>(p),
                                   knots.begin() + static_cast<std::ptrdiff_t>(m - p + 1), s.x);
        s.span = static_cast<std::size_t>(it - knots.begin()) - 1;
    }
    return s;
}

/// The p+1 nonzero basis values N_{span-p..span, p}(x), triangular scheme.
void nonzero_basis(double x, std::size_t span, std::size_t p, std::span<const double> knots, double* out) {
    double left[8], right[8];
    out[0] = 1.0;
    for (std::size_t j = 1; j <= p; ++j) {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        double saved = 0.0;
        for (std::size_t r = 0; r < j; ++r) {
            const double temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// Derivatives of the p+1 nonzero basis functions on `span`.
void nonzero_derivative(double x, std::size_t span, std::size_t p, std::span<const double> knots, double* out) {
    std::fill(out, out + p + 1, 0.0);
    if (p == 0) return;
    double lower[8];
    // lower[r] = N_{span-p+1+r, p-1}, r = 0..p-1
    nonzero_basis(x, span, p - 1, knots, lower);
    const double pd = static_cast<double>(p);
    for (std::size_t r = 0; r <= p; ++r) {
        const std::size_t j = span - p + r;
        double d = 0.0;
        if (r >= 1) d += pd / (knots[j + p] - knots[j]) * lower[r - 1];
        if (r < p) d -= pd / (knots[j + p + 1] - knots[j + 1]) * lower[r];
        out[r] = d;
    }
}

constexpr int kMaxDegree = 6;

} // namespace

std::vector<double> KanGrid::knots() const {
    validate();
    const double h = 2.0 * range / grid_size;
    std::vector<double> t(static_cast<std::size_t>(grid_size + 2 * degree + 1));
    for (std::size_t m = 0; m < t.size(); ++m) t[m] = -range + (static_cast<double>(m) - degree) * h;
    return t;
}

void KanGrid::validate() const {
    if (grid_size < 1) throw DomainError("KAN grid_size must be >= 1");
    if (!(range > 0.0)) throw DomainError("KAN grid range must be positive");
    if (degree < 0 || degree > kMaxDegree) throw DomainError("KAN degree must be in [0, 6]");
}

std::vector<double> bspline_basis(double x, std::span<const double> knots, int degree) {
    validate_knots(knots, degree);
    if (degree > kMaxDegree) throw DomainError("B-spline degree too large");
    const auto p = static_cast<std::size_t>(degree);
    std::vector<double> out(knots.size() - p - 1, 0.0);
    const SpanBasis s = locate(x, knots, degree);
    double n[kMaxDegree + 1];
    nonzero_basis(s.x, s.span, p, knots, n);
    for (std::size_t r = 0; r <= p; ++r) out[s.span - p + r] = n[r];
    return out;
}

std::vector<double> bspline_basis_derivative(double x, std::span<const double> knots, int degree) {
    validate_knots(knots, degree);
    if (degree > kMaxDegree) throw DomainError("B-spline degree too large");
    const auto p = static_cast<std::size_t>(degree);
    std::vector<double> out(knots.size() - p - 1, 0.0);
    const SpanBasis s = locate(x, knots, degree);
    if (!s.interior) return out;
    double d[kMaxDegree + 1];
    nonzero_derivative(s.x, s.span, p, knots, d);
    for (std::size_t r = 0; r <= p; ++r) out[s.span - p + r] = d[r];
    return out;
}

Var kan_spline(Var x, Var coef, const KanGrid& grid) {
    const std::vector<double> knots = grid.knots();
    const auto p = static_cast<std::size_t>(grid.degree);
    const std::size_t nb = grid.num_basis();
    if (x.shape().size() != 2) throw ShapeError("kan_spline: input must be [N,in], got " + shape_string(x.shape()));
    const std::size_t n = x.shape()[0], in = x.shape()[1];
    if (coef.shape().size() != 3 || coef.shape()[1] != in || coef.shape()[2] != nb)
        throw ShapeError("kan_spline: coefficients " + shape_string(coef.shape()) + " do not match input " +
                         shape_string(x.shape()) + " with " + std::to_string(nb) + " basis functions");
    const std::size_t out_dim = coef.shape()[0];

    // Per (sample, input): span and the p+1 nonzero basis values / derivatives.
    const std::size_t k = p + 1;
    std::vector<std::size_t> spans(n * in);
    std::vector<double> basis(n * in * k), deriv(n * in * k);
    const Tensor& xv = x.value();
    for (std::size_t e = 0; e < n * in; ++e) {
        const SpanBasis s = locate(xv[e], knots, grid.degree);
        spans[e] = s.span - p;
        nonzero_basis(s.x, s.span, p, knots, &basis[e * k]);
        if (s.interior)
            nonzero_derivative(s.x, s.span, p, knots, &deriv[e * k]);
        else
            std::fill(&deriv[e * k], &deriv[e * k] + k, 0.0);
    }

    const Tensor& cv = coef.value();
    Tensor out({n, out_dim});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < in; ++i) {
                const std::size_t e = s * in + i;
                const double* c = cv.data().data() + (o * in + i) * nb + spans[e];
                for (std::size_t r = 0; r < k; ++r) acc += c[r] * basis[e * k + r];
            }
            out[s * out_dim + o] = acc;
        }

    return x.tape().record(
        "kan_spline", std::move(out), {x, coef},
        [x, coef, n, in, out_dim, nb, k, spans = std::move(spans), basis = std::move(basis),
         deriv = std::move(deriv)](Tape& t, const Tensor&, const Tensor& g) {
            const Tensor& cv = coef.value();
            Tensor* gc = coef.needs_grad() ? &t.grad_buffer(coef) : nullptr;
            Tensor* gx = x.needs_grad() ? &t.grad_buffer(x) : nullptr;
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const double go = g[s * out_dim + o];
                    if (go == 0.0) continue;
                    for (std::size_t i = 0; i < in; ++i) {
                        const std::size_t e = s * in + i;
                        const std::size_t base = (o * in + i) * nb + spans[e];
                        for (std::size_t r = 0; r < k; ++r) {
                            if (gc) (*gc)[base + r] += go * basis[e * k + r];
                            if (gx) (*gx)[e] += go * cv[base + r] * deriv[e * k + r];
                        }
                    }
                }
        });
}

Var kan_forward(Var x, Var coef, const KanGrid& grid) { return tanh(kan_spline(x, coef, grid)); }

double kan_init_stddev(std::size_t in_dim) { return 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, in_dim))); }

KanLayer KanLayer::random(std::size_t in_dim, std::size_t out_bits, const KanGrid& grid, std::uint64_t seed) {
    KanLayer layer{in_dim, out_bits, grid, Tensor({out_bits, in_dim, grid.num_basis()})};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, kan_init_stddev(in_dim));
    for (auto& c : layer.coefficients.data()) c = dist(rng);
    return layer;
}

void KanLayer::validate() const {
    grid.validate();
    if (coefficients.shape() != Shape{out_bits, in_dim, grid.num_basis()})
        throw ShapeError("KAN coefficients " + shape_string(coefficients.shape()) + " do not match layer " +
                         std::to_string(out_bits) + "x" + std::to_string(in_dim) + "x" +
                         std::to_string(grid.num_basis()));
}

Tensor kan_forward(const Tensor& x, const KanLayer& layer) {
    layer.validate();
    if (x.size() != layer.in_dim)
        throw ShapeError("kan_forward: input of " + std::to_string(x.size()) + " values for layer with in_dim " +
                         std::to_string(layer.in_dim));
    Tape tape;
    Var in = tape.constant(x.reshaped({1, layer.in_dim}));
    Var out = kan_forward(in, tape.constant(layer.coefficients), layer.grid);
    return out.value().reshaped({layer.out_bits});
}

std::vector<std::int8_t> binarize(std::span<const double> continuous) {
    std::vector<std::int8_t> s(continuous.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = continuous[i] >= 0.0 ? 1 : -1;
    return s;
}

HashCode make_hash_code(std::span<const double> continuous) {
    return {std::vector<double>(continuous.begin(), continuous.end()), binarize(continuous)};
}

} // namespace hmar
