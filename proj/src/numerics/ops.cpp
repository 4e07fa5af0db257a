#include "hmar/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "hmar/errors.hpp"

namespace hmar {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_same_shape(const char* op, const Var& a, const Var& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

void require_rank(const char* op, const Var& x, std::size_t rank) {
    if (x.shape().size() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
}

/// Elementwise op whose derivative is expressed through input x and output y.
template <class F, class DF>
Var unary(const char* op, Var x, F f, DF df) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return x.tape().record(op, std::move(out), {x}, [x, df](Tape& t, const Tensor& y, const Tensor& g) {
        const Tensor& xv = x.value();
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], y[i]);
    });
}

double sorted_sum(std::vector<double>& values) {
    std::sort(values.begin(), values.end());
    double s = 0.0;
    for (double v : values) s += v;
    return s;
}

} // namespace

Var add(Var a, Var b) {
    require_same_shape("add", a, b);
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
        for (Var v : {a, b}) {
            if (!v.needs_grad()) continue;
            Tensor& gv = t.grad_buffer(v);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    require_same_shape("sub", a, b);
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
        if (a.needs_grad()) {
            Tensor& ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.needs_grad()) {
            Tensor& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    require_same_shape("mul", a, b);
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
        if (a.needs_grad()) {
            Tensor& ga = t.grad_buffer(a);
            const Tensor& bv = b.value();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (b.needs_grad()) {
            Tensor& gb = t.grad_buffer(b);
            const Tensor& av = a.value();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var x, double factor) {
    return unary("scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double offset) {
    return unary("add_scalar", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Var mul_const(Var x, const Tensor& c) {
    if (x.shape() != c.shape())
        throw ShapeError("mul_const: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(c.shape()));
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
    return x.tape().record("mul_const", std::move(out), {x}, [x, c](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c[i];
    });
}

Var relu(Var x) {
    return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
    return unary("sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                 [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var x) {
    return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var x) {
    return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
    return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var abs(Var x) {
    return unary("abs", x, [](double v) { return std::abs(v); },
                 [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var clamp(Var x, double lo, double hi) {
    if (!(lo <= hi)) throw DomainError("clamp: lo > hi");
    return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                 [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var sign_ste(Var x) {
    return unary("sign_ste", x, [](double v) { return v >= 0.0 ? 1.0 : -1.0; }, [](double, double) { return 1.0; });
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return x.tape().record("sum", Tensor::scalar(s), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    });
}

Var mean(Var x) {
    const double n = static_cast<double>(x.value().size());
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return x.tape().record("mean", Tensor::scalar(s / n), {x}, [x, n](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] / n;
    });
}

namespace {

Var reduce_rows(const char* op, Var x, double factor) {
    require_rank(op, x, 2);
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    Tensor out({n});
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += x.value()[r * d + c];
        out[r] = s * factor;
    }
    return x.tape().record(op, std::move(out), {x}, [x, n, d, factor](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r] * factor;
    });
}

} // namespace

Var sum_rows(Var x) { return reduce_rows("sum_rows", x, 1.0); }

Var mean_rows(Var x) {
    require_rank("mean_rows", x, 2);
    return reduce_rows("mean_rows", x, 1.0 / static_cast<double>(x.shape()[1]));
}

Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return x.tape().record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Var concat_rows(Var a, Var b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
        throw ShapeError("concat_rows: trailing shapes differ " + shape_string(sa) + " vs " + shape_string(sb));
    Shape so = sa;
    so[0] += sb[0];
    std::vector<double> data(a.value().vector());
    data.insert(data.end(), b.value().vector().begin(), b.value().vector().end());
    const std::size_t na = a.value().size();
    return a.tape().record("concat_rows", Tensor(so, std::move(data)), {a, b},
                           [a, b, na](Tape& t, const Tensor&, const Tensor& g) {
                               if (a.needs_grad()) {
                                   Tensor& ga = t.grad_buffer(a);
                                   for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                               }
                               if (b.needs_grad()) {
                                   Tensor& gb = t.grad_buffer(b);
                                   for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
                               }
                           });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    if (s.empty() || begin >= end || end > s[0])
        throw ShapeError("slice_rows: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for " + shape_string(s));
    const std::size_t row = x.value().size() / s[0];
    Shape so = s;
    so[0] = end - begin;
    std::vector<double> data(x.value().vector().begin() + static_cast<std::ptrdiff_t>(begin * row),
                             x.value().vector().begin() + static_cast<std::ptrdiff_t>(end * row));
    return x.tape().record("slice_rows", Tensor(so, std::move(data)), {x},
                           [x, begin, row](Tape& t, const Tensor&, const Tensor& g) {
                               Tensor& gx = t.grad_buffer(x);
                               for (std::size_t i = 0; i < g.size(); ++i) gx[begin * row + i] += g[i];
                           });
}

Var matmul_nt(Var a, Var b) {
    require_rank("matmul_nt", a, 2);
    require_rank("matmul_nt", b, 2);
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (b.shape()[1] != k)
        throw ShapeError("matmul_nt: inner dims differ " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor out({m, n});
    MatMap(out.data().data(), m, n).noalias() =
        ConstMatMap(a.value().data().data(), m, k) * ConstMatMap(b.value().data().data(), n, k).transpose();
    return a.tape().record("matmul_nt", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor&, const Tensor& g) {
        ConstMatMap gm(g.data().data(), m, n);
        if (a.needs_grad())
            MatMap(t.grad_buffer(a).data().data(), m, k).noalias() += gm * ConstMatMap(b.value().data().data(), n, k);
        if (b.needs_grad())
            MatMap(t.grad_buffer(b).data().data(), n, k).noalias() +=
                gm.transpose() * ConstMatMap(a.value().data().data(), m, k);
    });
}

Var dense(Var x, Var w, Var b) {
    require_rank("dense", x, 2);
    require_rank("dense", w, 2);
    const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
    if (w.shape()[1] != in || b.shape() != Shape{out_dim})
        throw ShapeError("dense: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(w.shape()) + " / bias " + shape_string(b.shape()));
    // Plain loop: each output row depends only on its input row, whatever the batch size.
    Tensor out({n, out_dim});
    const double* xv = x.value().data().data();
    const double* wv = w.value().data().data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < out_dim; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < in; ++i) acc += xv[r * in + i] * wv[c * in + i];
            out[r * out_dim + c] = acc + b.value()[c];
        }
    return x.tape().record("dense", std::move(out), {x, w, b},
                           [x, w, b, n, in, out_dim](Tape& t, const Tensor&, const Tensor& g) {
                               ConstMatMap gm(g.data().data(), n, out_dim);
                               if (x.needs_grad())
                                   MatMap(t.grad_buffer(x).data().data(), n, in).noalias() +=
                                       gm * ConstMatMap(w.value().data().data(), out_dim, in);
                               if (w.needs_grad())
                                   MatMap(t.grad_buffer(w).data().data(), out_dim, in).noalias() +=
                                       gm.transpose() * ConstMatMap(x.value().data().data(), n, in);
                               if (b.needs_grad()) {
                                   Tensor& gb = t.grad_buffer(b);
                                   for (std::size_t r = 0; r < n; ++r)
                                       for (std::size_t c = 0; c < out_dim; ++c) gb[c] += gm(r, c);
                               }
                           });
}

namespace {

struct ConvGeometry {
    std::size_t n, c, h, w, o, kh, kw, ho, wo, stride, pad;
    std::size_t rows() const { return c * kh * kw; }
    std::size_t cols() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
    const std::size_t p = g.cols();
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * p;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                            ix < static_cast<std::ptrdiff_t>(g.w);
                        row[oy * g.wo + ox] =
                            inside ? img[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                                   : 0.0;
                    }
                }
            }
}

void col2im(const double* cols, const ConvGeometry& g, double* img) {
    const std::size_t p = g.cols();
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * p;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        img[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                            row[oy * g.wo + ox];
                    }
                }
            }
}

} // namespace

Var conv2d(Var x, Var w, Conv2dSpec spec) {
    require_rank("conv2d", x, 4);
    require_rank("conv2d", w, 4);
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (ws[1] != xs[1])
        throw ShapeError("conv2d: input " + shape_string(xs) + " has " + std::to_string(xs[1]) +
                         " channels but kernel " + shape_string(ws) + " expects " + std::to_string(ws[1]));
    if (spec.stride == 0) throw DomainError("conv2d: stride must be positive");
    if (xs[2] + 2 * spec.padding < ws[2] || xs[3] + 2 * spec.padding < ws[3])
        throw ShapeError("conv2d: kernel " + shape_string(ws) + " larger than padded input " + shape_string(xs));
    ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, spec.stride, spec.padding};
    g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
    g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

    Tensor out({g.n, g.o, g.ho, g.wo});
    std::vector<double> cols(g.rows() * g.cols());
    ConstMatMap wm(w.value().data().data(), g.o, g.rows());
    for (std::size_t n = 0; n < g.n; ++n) {
        im2col(x.value().data().data() + n * g.c * g.h * g.w, g, cols.data());
        MatMap(out.data().data() + n * g.o * g.cols(), g.o, g.cols()).noalias() =
            wm * ConstMatMap(cols.data(), g.rows(), g.cols());
    }
    return x.tape().record("conv2d", std::move(out), {x, w}, [x, w, g](Tape& t, const Tensor&, const Tensor& grad) {
        std::vector<double> cols(g.rows() * g.cols());
        ConstMatMap wm(w.value().data().data(), g.o, g.rows());
        for (std::size_t n = 0; n < g.n; ++n) {
            ConstMatMap gout(grad.data().data() + n * g.o * g.cols(), g.o, g.cols());
            if (w.needs_grad()) {
                im2col(x.value().data().data() + n * g.c * g.h * g.w, g, cols.data());
                MatMap(t.grad_buffer(w).data().data(), g.o, g.rows()).noalias() +=
                    gout * ConstMatMap(cols.data(), g.rows(), g.cols()).transpose();
            }
            if (x.needs_grad()) {
                MatMap(cols.data(), g.rows(), g.cols()).noalias() = wm.transpose() * gout;
                col2im(cols.data(), g, t.grad_buffer(x).data().data() + n * g.c * g.h * g.w);
            }
        }
    });
}

Var max_pool2d(Var x, std::size_t kernel, std::size_t stride, std::size_t padding) {
    require_rank("max_pool2d", x, 4);
    const Shape& s = x.shape();
    if (kernel == 0 || stride == 0) throw DomainError("max_pool2d: kernel and stride must be positive");
    if (s[2] + 2 * padding < kernel || s[3] + 2 * padding < kernel)
        throw ShapeError("max_pool2d: kernel larger than padded input " + shape_string(s));
    const std::size_t ho = (s[2] + 2 * padding - kernel) / stride + 1;
    const std::size_t wo = (s[3] + 2 * padding - kernel) / stride + 1;
    Tensor out({s[0], s[1], ho, wo});
    std::vector<std::size_t> argmax(out.size());
    const Tensor& xv = x.value();
    for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
        const std::size_t base = nc * s[2] * s[3];
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_i = base;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(s[2])) continue;
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(s[3])) continue;
                        const std::size_t i = base + static_cast<std::size_t>(iy) * s[3] + static_cast<std::size_t>(ix);
                        if (xv[i] > best) {
                            best = xv[i];
                            best_i = i;
                        }
                    }
                }
                const std::size_t o = (nc * ho + oy) * wo + ox;
                out[o] = best;
                argmax[o] = best_i;
            }
    }
    return x.tape().record("max_pool2d", std::move(out), {x},
                           [x, argmax = std::move(argmax)](Tape& t, const Tensor&, const Tensor& g) {
                               Tensor& gx = t.grad_buffer(x);
                               for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                           });
}

namespace {

void check_window(const char* op, const Var& x, Window w) {
    require_rank(op, x, 4);
    const Shape& s = x.shape();
    if (w.y0 >= w.y1 || w.x0 >= w.x1 || w.y1 > s[2] || w.x1 > s[3])
        throw DomainError(std::string(op) + ": window [" + std::to_string(w.x0) + "," + std::to_string(w.y0) + "," +
                          std::to_string(w.x1) + "," + std::to_string(w.y1) + ") invalid for map " + shape_string(s));
}

} // namespace

Var window_avg_pool(Var x, Window w) {
    check_window("window_avg_pool", x, w);
    const Shape& s = x.shape();
    const double area = static_cast<double>((w.y1 - w.y0) * (w.x1 - w.x0));
    Tensor out({s[0], s[1], 1, 1});
    std::vector<double> buf;
    for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
        buf.clear();
        const std::size_t base = nc * s[2] * s[3];
        for (std::size_t y = w.y0; y < w.y1; ++y)
            for (std::size_t xx = w.x0; xx < w.x1; ++xx) buf.push_back(x.value()[base + y * s[3] + xx]);
        out[nc] = sorted_sum(buf) / area;
    }
    return x.tape().record("window_avg_pool", std::move(out), {x}, [x, w, area](Tape& t, const Tensor&, const Tensor& g) {
        const Shape& s = x.shape();
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
            const std::size_t base = nc * s[2] * s[3];
            for (std::size_t y = w.y0; y < w.y1; ++y)
                for (std::size_t xx = w.x0; xx < w.x1; ++xx) gx[base + y * s[3] + xx] += g[nc] / area;
        }
    });
}

Var window_max_pool(Var x, Window w) {
    check_window("window_max_pool", x, w);
    const Shape& s = x.shape();
    Tensor out({s[0], s[1], 1, 1});
    std::vector<std::size_t> argmax(s[0] * s[1]);
    for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
        const std::size_t base = nc * s[2] * s[3];
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = base + w.y0 * s[3] + w.x0;
        for (std::size_t y = w.y0; y < w.y1; ++y)
            for (std::size_t xx = w.x0; xx < w.x1; ++xx) {
                const std::size_t i = base + y * s[3] + xx;
                if (x.value()[i] > best) {
                    best = x.value()[i];
                    best_i = i;
                }
            }
        out[nc] = best;
        argmax[nc] = best_i;
    }
    return x.tape().record("window_max_pool", std::move(out), {x},
                           [x, argmax = std::move(argmax)](Tape& t, const Tensor&, const Tensor& g) {
                               Tensor& gx = t.grad_buffer(x);
                               for (std::size_t nc = 0; nc < g.size(); ++nc) gx[argmax[nc]] += g[nc];
                           });
}

Var global_avg_pool(Var x) {
    require_rank("global_avg_pool", x, 4);
    return window_avg_pool(x, {0, x.shape()[2], 0, x.shape()[3]});
}

Var global_max_pool(Var x) {
    require_rank("global_max_pool", x, 4);
    return window_max_pool(x, {0, x.shape()[2], 0, x.shape()[3]});
}

Var add_spatial_broadcast(Var x, Var y) {
    require_rank("add_spatial_broadcast", x, 4);
    const Shape& s = x.shape();
    if (y.shape() != Shape{s[0], s[1], 1, 1})
        throw ShapeError("add_spatial_broadcast: " + shape_string(y.shape()) + " cannot broadcast onto " +
                         shape_string(s));
    const std::size_t hw = s[2] * s[3];
    Tensor out = x.value();
    for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
        for (std::size_t i = 0; i < hw; ++i) out[nc * hw + i] += y.value()[nc];
    return x.tape().record("add_spatial_broadcast", std::move(out), {x, y},
                           [x, y, hw](Tape& t, const Tensor&, const Tensor& g) {
                               if (x.needs_grad()) {
                                   Tensor& gx = t.grad_buffer(x);
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                               }
                               if (y.needs_grad()) {
                                   Tensor& gy = t.grad_buffer(y);
                                   for (std::size_t nc = 0; nc < gy.size(); ++nc)
                                       for (std::size_t i = 0; i < hw; ++i) gy[nc] += g[nc * hw + i];
                               }
                           });
}

namespace {

/// View of a [N,C,...] tensor as N x C x S.
struct ChannelLayout {
    std::size_t n, c, s;
};

ChannelLayout channel_layout(const char* op, const Var& x, const Var& gamma, const Var& beta) {
    const Shape& xs = x.shape();
    if (xs.size() < 2) throw ShapeError(std::string(op) + ": need rank >= 2, got " + shape_string(xs));
    const std::size_t c = xs[1];
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
        throw ShapeError(std::string(op) + ": affine params " + shape_string(gamma.shape()) + " do not match input " +
                         shape_string(xs));
    return {xs[0], c, x.value().size() / (xs[0] * c)};
}

} // namespace

BatchNormResult batch_norm_train(Var x, Var gamma, Var beta, double eps) {
    const ChannelLayout L = channel_layout("batch_norm_train", x, gamma, beta);
    const double m = static_cast<double>(L.n * L.s);
    if (L.n * L.s < 2) throw ShapeError("batch_norm_train: need at least two values per channel");
    const Tensor& xv = x.value();
    Tensor mu({L.c}), var({L.c}), inv_std({L.c});
    for (std::size_t c = 0; c < L.c; ++c) {
        double s = 0.0;
        for (std::size_t n = 0; n < L.n; ++n)
            for (std::size_t i = 0; i < L.s; ++i) s += xv[(n * L.c + c) * L.s + i];
        mu[c] = s / m;
        double ss = 0.0;
        for (std::size_t n = 0; n < L.n; ++n)
            for (std::size_t i = 0; i < L.s; ++i) {
                const double d = xv[(n * L.c + c) * L.s + i] - mu[c];
                ss += d * d;
            }
        var[c] = ss / m;
        inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    }
    Tensor out(xv.shape());
    for (std::size_t n = 0; n < L.n; ++n)
        for (std::size_t c = 0; c < L.c; ++c)
            for (std::size_t i = 0; i < L.s; ++i) {
                const std::size_t k = (n * L.c + c) * L.s + i;
                out[k] = gamma.value()[c] * (xv[k] - mu[c]) * inv_std[c] + beta.value()[c];
            }
    Tensor unbiased = var;
    for (std::size_t c = 0; c < L.c; ++c) unbiased[c] *= m / (m - 1.0);

    Var y = x.tape().record(
        "batch_norm_train", std::move(out), {x, gamma, beta},
        [x, gamma, beta, L, m, mu, inv_std](Tape& t, const Tensor&, const Tensor& g) {
            const Tensor& xv = x.value();
            for (std::size_t c = 0; c < L.c; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < L.n; ++n)
                    for (std::size_t i = 0; i < L.s; ++i) {
                        const std::size_t k = (n * L.c + c) * L.s + i;
                        const double xhat = (xv[k] - mu[c]) * inv_std[c];
                        sum_g += g[k];
                        sum_gx += g[k] * xhat;
                    }
                if (gamma.needs_grad()) t.grad_buffer(gamma)[c] += sum_gx;
                if (beta.needs_grad()) t.grad_buffer(beta)[c] += sum_g;
                if (x.needs_grad()) {
                    Tensor& gx = t.grad_buffer(x);
                    const double k0 = gamma.value()[c] * inv_std[c] / m;
                    for (std::size_t n = 0; n < L.n; ++n)
                        for (std::size_t i = 0; i < L.s; ++i) {
                            const std::size_t k = (n * L.c + c) * L.s + i;
                            const double xhat = (xv[k] - mu[c]) * inv_std[c];
                            gx[k] += k0 * (m * g[k] - sum_g - xhat * sum_gx);
                        }
                }
            }
        });
    return {y, std::move(mu), std::move(unbiased)};
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& mean_t, const Tensor& var_t, double eps) {
    const ChannelLayout L = channel_layout("batch_norm_eval", x, gamma, beta);
    if (mean_t.shape() != Shape{L.c} || var_t.shape() != Shape{L.c})
        throw ShapeError("batch_norm_eval: running statistics do not match channels " + std::to_string(L.c));
    Tensor inv_std({L.c});
    for (std::size_t c = 0; c < L.c; ++c) inv_std[c] = 1.0 / std::sqrt(var_t[c] + eps);
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t n = 0; n < L.n; ++n)
        for (std::size_t c = 0; c < L.c; ++c)
            for (std::size_t i = 0; i < L.s; ++i) {
                const std::size_t k = (n * L.c + c) * L.s + i;
                out[k] = gamma.value()[c] * (xv[k] - mean_t[c]) * inv_std[c] + beta.value()[c];
            }
    return x.tape().record("batch_norm_eval", std::move(out), {x, gamma, beta},
                           [x, gamma, beta, L, mean_t, inv_std](Tape& t, const Tensor&, const Tensor& g) {
                               const Tensor& xv = x.value();
                               for (std::size_t n = 0; n < L.n; ++n)
                                   for (std::size_t c = 0; c < L.c; ++c)
                                       for (std::size_t i = 0; i < L.s; ++i) {
                                           const std::size_t k = (n * L.c + c) * L.s + i;
                                           const double xhat = (xv[k] - mean_t[c]) * inv_std[c];
                                           if (x.needs_grad()) t.grad_buffer(x)[k] += g[k] * gamma.value()[c] * inv_std[c];
                                           if (gamma.needs_grad()) t.grad_buffer(gamma)[c] += g[k] * xhat;
                                           if (beta.needs_grad()) t.grad_buffer(beta)[c] += g[k];
                                       }
                           });
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
    require_rank("cross_entropy", logits, 2);
    const std::size_t n = logits.shape()[0], c = logits.shape()[1];
    if (c < 2) throw ShapeError("cross_entropy: need at least two classes");
    if (labels.size() != n)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= c)
            throw DomainError("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(c) + ")");
    Tensor probs({n, c});
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* z = logits.value().data().data() + r * c;
        const double zmax = *std::max_element(z, z + c);
        double se = 0.0;
        for (std::size_t k = 0; k < c; ++k) se += std::exp(z[k] - zmax);
        const double lse = zmax + std::log(se);
        for (std::size_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(z[k] - lse);
        total += lse - z[static_cast<std::size_t>(labels[r])];
    }
    return logits.tape().record("cross_entropy", Tensor::scalar(total / static_cast<double>(n)), {logits},
                                [logits, labels, probs, n, c](Tape& t, const Tensor&, const Tensor& g) {
                                    Tensor& gz = t.grad_buffer(logits);
                                    const double s = g[0] / static_cast<double>(n);
                                    for (std::size_t r = 0; r < n; ++r)
                                        for (std::size_t k = 0; k < c; ++k) {
                                            const double onehot =
                                                (static_cast<int>(k) == labels[r]) ? 1.0 : 0.0;
                                            gz[r * c + k] += s * (probs[r * c + k] - onehot);
                                        }
                                });
}

} // namespace hmar
