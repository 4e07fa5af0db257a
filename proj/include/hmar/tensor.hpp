#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace hmar {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major fp64 array. NCHW is the layout convention for images and maps.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& vector() const noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    /// Value of a single-element tensor.
    double item() const;

    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);

    Tensor reshaped(Shape shape) const;
    bool all_finite() const noexcept;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Ordered name -> tensor collection (parameters, gradients, running statistics).
using TensorMap = std::map<std::string, Tensor>;

/// Order-independent checksum used for golden-value tests: sum of x_i * (1 + (i mod 7)).
double checksum(const Tensor& t);

} // namespace hmar
