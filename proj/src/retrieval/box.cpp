#include "hmar/box.hpp"

#include <algorithm>

#include "hmar/errors.hpp"

namespace hmar {

void BoundingBox::validate(int image_width, int image_height) const {
    if (x1 < 0 || y1 < 0 || x1 >= x2 || y1 >= y2 || x2 > image_width || y2 > image_height)
        throw DomainError("bounding box " + str() + " invalid for image " + std::to_string(image_width) + "x" +
                          std::to_string(image_height));
}

std::string BoundingBox::str() const {
    return "[" + std::to_string(x1) + "," + std::to_string(y1) + "," + std::to_string(x2) + "," + std::to_string(y2) +
           "]";
}

double iou(const BoundingBox& a, const BoundingBox& b) {
    const int ix = std::max(0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const int iy = std::max(0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = static_cast<double>(ix) * iy;
    const double uni = static_cast<double>(a.width()) * a.height() + static_cast<double>(b.width()) * b.height() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

Window map_box_to_feature(const BoundingBox& box, int factor) {
    if (factor < 1) throw DomainError("map_box_to_feature: factor must be positive");
    if (box.x1 < 0 || box.y1 < 0 || box.x1 >= box.x2 || box.y1 >= box.y2)
        throw DomainError("map_box_to_feature: invalid box " + box.str());
    auto ceil_div = [factor](int v) { return (v + factor - 1) / factor; };
    return Window{static_cast<std::size_t>(box.y1 / factor), static_cast<std::size_t>(ceil_div(box.y2)),
                  static_cast<std::size_t>(box.x1 / factor), static_cast<std::size_t>(ceil_div(box.x2))};
}

} // namespace hmar
