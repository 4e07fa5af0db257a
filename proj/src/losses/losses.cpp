#include "hmar/losses.hpp"

#include <algorithm>
#include <cmath>

#include "hmar/errors.hpp"

namespace hmar {

namespace {

constexpr std::size_t kThumb = 8;
constexpr std::size_t kSsimWindow = 4;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

void require_codes(const char* op, const Var& v) {
    if (v.shape().size() != 2) throw ShapeError(std::string(op) + ": codes must be [N,q], got " + shape_string(v.shape()));
}

Var clamp_distance(Var d) { return clamp(d, kDistanceEps, 1.0 - kDistanceEps); }

double scalar_of(const std::function<Var(Tape&)>& graph) {
    Tape tape;
    return graph(tape).value().item();
}

Tensor row_tensor(std::span<const double> v) { return Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end())); }

} // namespace

double soft_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty())
        throw ShapeError("soft_distance: code lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    const double q = static_cast<double>(a.size());
    return std::clamp((q - dot) / (2.0 * q), kDistanceEps, 1.0 - kDistanceEps);
}

Var soft_distance_matrix(Var codes) {
    require_codes("soft_distance_matrix", codes);
    const double q = static_cast<double>(codes.shape()[1]);
    return clamp_distance(add_scalar(scale(matmul_nt(codes, codes), -1.0 / (2.0 * q)), 0.5));
}

Var soft_distance_rows(Var a, Var b) {
    require_codes("soft_distance_rows", a);
    if (a.shape() != b.shape())
        throw ShapeError("soft_distance_rows: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const double q = static_cast<double>(a.shape()[1]);
    return clamp_distance(add_scalar(scale(sum_rows(mul(a, b)), -1.0 / (2.0 * q)), 0.5));
}

Var pair_loss_terms(Var d, const Tensor& similarity, const Tensor& same_class, const Tensor& weight) {
    if (similarity.shape() != d.shape() || same_class.shape() != d.shape() || weight.shape() != d.shape())
        throw ShapeError("pair_loss_terms: pair tensors must match distances " + shape_string(d.shape()));
    Tensor a(d.shape()), b(d.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = weight[i] * similarity[i] * same_class[i];
        b[i] = weight[i] * std::exp(similarity[i]) * (1.0 - same_class[i]);
    }
    Var pos = scale(log(add_scalar(scale(d, -1.0), 1.0)), -1.0);
    return sub(mul_const(pos, a), mul_const(log(d), b));
}

Var contrastive_loss(Var codes, const Tensor& similarity, const std::vector<int>& labels, double weight) {
    require_codes("contrastive_loss", codes);
    const std::size_t n = codes.shape()[0];
    if (n < 2) throw DomainError("contrastive_loss: batch needs at least two codes");
    if (labels.size() != n || similarity.shape() != Shape{n, n})
        throw ShapeError("contrastive_loss: " + std::to_string(labels.size()) + " labels and similarity " +
                         shape_string(similarity.shape()) + " for " + std::to_string(n) + " codes");
    if (!(weight > 0.0)) throw DomainError("contrastive_loss: pair weight must be positive");
    Tensor y({n, n}, 0.0), w({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            y[i * n + j] = labels[i] == labels[j] ? 1.0 : 0.0;
            w[i * n + j] = weight;
        }
    const double pairs = static_cast<double>(n * (n - 1) / 2);
    return scale(sum(pair_loss_terms(soft_distance_matrix(codes), similarity, y, w)), 1.0 / pairs);
}

Var quantization_loss(Var u) {
    require_codes("quantization_loss", u);
    Var dev = mean_rows(abs(add_scalar(scale(abs(u), -1.0), 1.0)));
    return mean(log(add_scalar(dev, 1.0)));
}

Var consistency_loss(Var h_orig, Var h_trans) { return mean(soft_distance_rows(h_orig, h_trans)); }

Var diversity_regularizer(Var codes) {
    require_codes("diversity_regularizer", codes);
    const std::size_t n = codes.shape()[0];
    if (n < 2) throw DomainError("diversity_regularizer: batch needs at least two codes");
    Tensor off({n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i) off[i * n + i] = 0.0;
    return scale(sum(mul_const(soft_distance_matrix(codes), off)), -1.0 / static_cast<double>(n * n));
}

Var stage1_total(Var contrast, Var quant, Var ce) {
    return add(contrast, add(scale(quant, kQuantWeight), scale(ce, kCeWeight)));
}

Var stage2_total(Var consist, Var reg) { return add(consist, scale(reg, kLambdaReg)); }

double stage1_total(double contrast, double quant, double ce) { return contrast + kQuantWeight * quant + kCeWeight * ce; }

double stage2_total(double consist, double reg) { return consist + kLambdaReg * reg; }

double contrastive_pair_loss(std::span<const double> hi, std::span<const double> hj, double similarity, int same_class,
                             double weight) {
    const double d = soft_distance(hi, hj);
    return scalar_of([&](Tape& t) {
        Var dv = t.constant(Tensor({1}, d));
        return sum(pair_loss_terms(dv, Tensor({1}, similarity), Tensor({1}, same_class ? 1.0 : 0.0), Tensor({1}, weight)));
    });
}

double quantization_loss(std::span<const double> u) {
    return scalar_of([&](Tape& t) { return quantization_loss(t.constant(row_tensor(u))); });
}

double cross_entropy(std::span<const double> logits, int label) {
    return scalar_of([&](Tape& t) { return cross_entropy(t.constant(row_tensor(logits)), {label}); });
}

double consistency_loss(std::span<const double> h_orig, std::span<const double> h_trans) {
    if (h_orig.size() != h_trans.size())
        throw ShapeError("consistency_loss: code lengths " + std::to_string(h_orig.size()) + " and " +
                         std::to_string(h_trans.size()));
    return scalar_of([&](Tape& t) { return consistency_loss(t.constant(row_tensor(h_orig)), t.constant(row_tensor(h_trans))); });
}

double diversity_regularizer(const std::vector<std::vector<double>>& codes) {
    if (codes.size() < 2) throw DomainError("diversity_regularizer: batch needs at least two codes");
    const std::size_t q = codes[0].size();
    std::vector<double> flat;
    for (const auto& c : codes) {
        if (c.size() != q) throw ShapeError("diversity_regularizer: codes of different lengths");
        flat.insert(flat.end(), c.begin(), c.end());
    }
    return scalar_of([&](Tape& t) { return diversity_regularizer(t.constant(Tensor({codes.size(), q}, std::move(flat)))); });
}

std::vector<double> similarity_thumbnail(const Tensor& image) {
    std::size_t h = 0, w = 0;
    if (image.rank() == 2) {
        h = image.dim(0);
        w = image.dim(1);
    } else if (image.rank() == 3 && image.dim(0) == 1) {
        h = image.dim(1);
        w = image.dim(2);
    } else {
        throw ShapeError("visual_similarity: expected a [H,W] or [1,H,W] image, got " + shape_string(image.shape()));
    }
    if (h % kThumb != 0 || w % kThumb != 0)
        throw ShapeError("visual_similarity: image " + shape_string(image.shape()) + " not divisible into 8x8 blocks");
    const std::size_t bh = h / kThumb, bw = w / kThumb;
    std::vector<double> out(kThumb * kThumb, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out[(y / bh) * kThumb + x / bw] += image[y * w + x];
    for (double& v : out) v /= static_cast<double>(bh * bw);
    return out;
}

double thumbnail_ssim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != kThumb * kThumb || b.size() != kThumb * kThumb)
        throw ShapeError("thumbnail_ssim: thumbnails must have 64 values");
    const std::size_t positions = kThumb - kSsimWindow + 1;
    const double area = static_cast<double>(kSsimWindow * kSsimWindow);
    double total = 0.0;
    for (std::size_t oy = 0; oy < positions; ++oy)
        for (std::size_t ox = 0; ox < positions; ++ox) {
            double ma = 0.0, mb = 0.0;
            for (std::size_t y = oy; y < oy + kSsimWindow; ++y)
                for (std::size_t x = ox; x < ox + kSsimWindow; ++x) {
                    ma += a[y * kThumb + x];
                    mb += b[y * kThumb + x];
                }
            ma /= area;
            mb /= area;
            double va = 0.0, vb = 0.0, cov = 0.0;
            for (std::size_t y = oy; y < oy + kSsimWindow; ++y)
                for (std::size_t x = ox; x < ox + kSsimWindow; ++x) {
                    const double da = a[y * kThumb + x] - ma, db = b[y * kThumb + x] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= area;
            vb /= area;
            cov /= area;
            total += ((2.0 * ma * mb + kSsimC1) * (2.0 * cov + kSsimC2)) /
                     ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
        }
    return total / static_cast<double>(positions * positions);
}

double thumbnail_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != kThumb * kThumb || b.size() != kThumb * kThumb)
        throw ShapeError("thumbnail_similarity: thumbnails must have 64 values");
    std::vector<double> sa(kThumb * kThumb), sb(kThumb * kThumb);
    double best = -1.0;
    for (std::size_t dy = 0; dy < kThumb; ++dy)
        for (std::size_t dx = 0; dx < kThumb; ++dx) {
            for (std::size_t y = 0; y < kThumb; ++y)
                for (std::size_t x = 0; x < kThumb; ++x) {
                    const std::size_t src = ((y + dy) % kThumb) * kThumb + (x + dx) % kThumb;
                    sa[y * kThumb + x] = a[src];
                    sb[y * kThumb + x] = b[src];
                }
            best = std::max({best, thumbnail_ssim(a, sb), thumbnail_ssim(sa, b)});
        }
    return std::clamp((best + 1.0) / 2.0, 0.0, 1.0);
}

double visual_similarity(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("visual_similarity: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    return thumbnail_similarity(similarity_thumbnail(a), similarity_thumbnail(b));
}

Tensor similarity_matrix(const std::vector<std::vector<double>>& thumbnails) {
    const std::size_t n = thumbnails.size();
    Tensor s({n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) s[i * n + j] = s[j * n + i] = thumbnail_similarity(thumbnails[i], thumbnails[j]);
    return s;
}

} // namespace hmar
