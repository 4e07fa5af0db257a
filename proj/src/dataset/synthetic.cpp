#include <cmath>
#include <numbers>
#include <random>

#include "hmar/dataset.hpp"
#include "hmar/errors.hpp"

namespace hmar {

namespace {

constexpr double kBlobThreshold = 0.15;

/// Motif intensity in [0,1] at normalized coordinates (u,v) in (-1,1)^2.
double motif_value(Motif m, double u, double v, int variant) {
    const double r = std::hypot(u, v);
    switch (m) {
    case Motif::Disk:
        return r <= 0.9 ? 1.0 : 0.0;
    case Motif::Ring:
        return (r >= 0.55 && r <= 0.95) ? 1.0 : 0.0;
    case Motif::Cross:
        return (std::abs(u) <= 0.25 || std::abs(v) <= 0.25) ? 1.0 : 0.0;
    case Motif::Bar:
        return std::abs(variant % 2 == 0 ? v : u) <= 0.3 ? 1.0 : 0.0;
    case Motif::Blob: {
        const double g = std::exp(-r * r / (2.0 * 0.4 * 0.4));
        return g >= kBlobThreshold ? g : 0.0;
    }
    case Motif::CornerWedge: {
        const double su = (variant & 1) ? -u : u, sv = (variant & 2) ? -v : v;
        return su + sv <= 0.0 ? 1.0 : 0.0;
    }
    case Motif::DoubleDot: {
        const double s = variant % 2 == 0 ? 1.0 : -1.0;
        return (std::hypot(u - 0.55, v - 0.55 * s) <= 0.4 || std::hypot(u + 0.55, v + 0.55 * s) <= 0.4) ? 1.0 : 0.0;
    }
    case Motif::GridPatch: {
        auto inner = [](double t) {
            const double cell = (t + 1.0) * 1.5; // three cells across
            const double f = cell - std::floor(cell);
            return f >= 0.2 && f <= 0.8;
        };
        return (inner(u) && inner(v)) ? 1.0 : 0.0;
    }
    }
    return 0.0;
}

} // namespace

const char* motif_name(Motif m) {
    static const char* names[] = {"disk", "ring", "cross", "bar", "blob", "corner-wedge", "double-dot", "grid-patch"};
    return names[static_cast<int>(m)];
}

void SyntheticSpec::validate() const {
    if (num_classes < 2 || num_classes > kMotifCount) throw DomainError("num_classes must be in [2, 8]");
    if (images_per_class == 0) throw DomainError("images_per_class must be positive");
    if (image_size < 16 || image_size % 16 != 0) throw DomainError("image_size must be a multiple of 16");
    if (min_motif < 8 || max_motif < min_motif || max_motif > static_cast<int>(image_size))
        throw DomainError("motif size range must satisfy 8 <= min <= max <= image_size");
    if (!(noise_sigma >= 0.0)) throw DomainError("noise_sigma must be non-negative");
}

SyntheticImage render_synthetic(const SyntheticSpec& spec, int label, std::uint64_t seed) {
    spec.validate();
    if (label < 0 || label >= static_cast<int>(spec.num_classes)) throw DomainError("label out of range");
    const int n = static_cast<int>(spec.image_size);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    // Smooth background: two low-frequency plane waves.
    const double two_pi = 2.0 * std::numbers::pi;
    const double f1x = uniform(0.3, 1.2), f1y = uniform(0.3, 1.2), p1 = uniform(0.0, two_pi);
    const double f2x = uniform(0.3, 1.2), f2y = uniform(0.3, 1.2), p2 = uniform(0.0, two_pi);
    const double base = uniform(0.22, 0.32);

    const int size = std::uniform_int_distribution<int>(spec.min_motif, spec.max_motif)(rng);
    const int ox = std::uniform_int_distribution<int>(0, n - size)(rng);
    const int oy = std::uniform_int_distribution<int>(0, n - size)(rng);
    const int variant = std::uniform_int_distribution<int>(0, 3)(rng);
    const auto motif = static_cast<Motif>(label);

    SyntheticImage out{Tensor({1, spec.image_size, spec.image_size}), BoundingBox{n, n, 0, 0}, label};
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double v = base + 0.08 * std::cos(two_pi * (f1x * x + f1y * y) / n + p1) +
                       0.05 * std::cos(two_pi * (f2x * x - f2y * y) / n + p2);
            if (x >= ox && x < ox + size && y >= oy && y < oy + size) {
                const double u = (x - ox + 0.5) / size * 2.0 - 1.0;
                const double w = (y - oy + 0.5) / size * 2.0 - 1.0;
                const double m = motif_value(motif, u, w, variant);
                if (m > 0.0) {
                    v += spec.motif_contrast * m;
                    out.box.x1 = std::min(out.box.x1, x);
                    out.box.y1 = std::min(out.box.y1, y);
                    out.box.x2 = std::max(out.box.x2, x + 1);
                    out.box.y2 = std::max(out.box.y2, y + 1);
                }
            }
            if (spec.noise_sigma > 0.0) v += noise(rng);
            out.pixels[static_cast<std::size_t>(y * n + x)] = std::clamp(v, 0.0, 1.0);
        }
    out.box.validate(n, n);
    return out;
}

} // namespace hmar
