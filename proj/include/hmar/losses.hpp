#pragma once

#include <span>
#include <vector>

#include "hmar/autograd.hpp"
#include "hmar/ops.hpp"

namespace hmar {

inline constexpr double kDistanceEps = 1e-6;
inline constexpr double kQuantWeight = 0.5;
inline constexpr double kCeWeight = 0.5;
inline constexpr double kLambdaReg = 0.1;

/// d = (q - a.b) / (2q) clamped to [eps, 1 - eps].
double soft_distance(std::span<const double> a, std::span<const double> b);

/// Pairwise soft distances of the rows of codes [N,q] -> [N,N].
Var soft_distance_matrix(Var codes);
/// Soft distance between matching rows of a and b [N,q] -> [N].
Var soft_distance_rows(Var a, Var b);

/// Elementwise w * (S*y*(-log(1-d)) - e^S*(1-y)*log(d)); all arguments share d's shape.
Var pair_loss_terms(Var d, const Tensor& similarity, const Tensor& same_class, const Tensor& weight);

/// Mean pair loss over all i<j pairs of the batch. similarity [N,N], weights all w.
Var contrastive_loss(Var codes, const Tensor& similarity, const std::vector<int>& labels, double weight = 1.0);

/// Batch mean of log(1 + mean_i |1 - |u_i||); u [N,q].
Var quantization_loss(Var u);

/// Batch mean of soft_distance(h_orig[n], h_trans[n]).
Var consistency_loss(Var h_orig, Var h_trans);

/// -(1/N^2) sum_{i != j} d(h_i, h_j); needs N >= 2.
Var diversity_regularizer(Var codes);

Var stage1_total(Var contrast, Var quant, Var ce);
Var stage2_total(Var consist, Var reg);
double stage1_total(double contrast, double quant, double ce);
double stage2_total(double consist, double reg);

// Single-example scalar forms.
double contrastive_pair_loss(std::span<const double> hi, std::span<const double> hj, double similarity, int same_class,
                             double weight = 1.0);
double quantization_loss(std::span<const double> u);
double cross_entropy(std::span<const double> logits, int label);
double consistency_loss(std::span<const double> h_orig, std::span<const double> h_trans);
double diversity_regularizer(const std::vector<std::vector<double>>& codes);

/// Structural similarity of two grayscale images, mapped to [0,1]. Images are [H,W] or
/// [1,H,W] with H, W multiples of 8; both are block-averaged to 8x8 and compared with
/// mean SSIM over all 4x4 windows, taking the best of the 64 cyclic shifts of either
/// thumbnail against the other.
double visual_similarity(const Tensor& a, const Tensor& b);

/// 8x8 block-mean thumbnail used by visual_similarity.
std::vector<double> similarity_thumbnail(const Tensor& image);
/// Mean SSIM over the 25 4x4 windows of two aligned thumbnails, in [-1,1].
double thumbnail_ssim(std::span<const double> a, std::span<const double> b);
/// Shift-aligned similarity of two thumbnails in [0,1].
double thumbnail_similarity(std::span<const double> a, std::span<const double> b);

/// Symmetric [N,N] similarity matrix with ones on the diagonal.
Tensor similarity_matrix(const std::vector<std::vector<double>>& thumbnails);

} // namespace hmar
