#pragma once

#include <cstddef>
#include <string>

#include "hmar/ops.hpp"

namespace hmar {

/// Pixel-space box [x1,x2) x [y1,y2).
struct BoundingBox {
    int x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    int width() const { return x2 - x1; }
    int height() const { return y2 - y1; }
    /// Throws DomainError unless 0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height.
    void validate(int image_width, int image_height) const;
    std::string str() const;

    bool operator==(const BoundingBox&) const = default;
};

double iou(const BoundingBox& a, const BoundingBox& b);

/// Floor the top-left and ceil the bottom-right corner by `factor`.
Window map_box_to_feature(const BoundingBox& box, int factor = 4);

} // namespace hmar
