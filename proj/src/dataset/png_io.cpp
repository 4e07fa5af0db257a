#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "hmar/dataset.hpp"
#include "hmar/errors.hpp"

namespace hmar {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + path.string());
}

Tensor decode_png(const std::vector<std::uint8_t>& bytes) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw FormatError(std::string("not a readable PNG: ") + image.message);
    image.format = PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> gray(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, gray.data(), 0, nullptr)) {
        png_image_free(&image);
        throw FormatError(std::string("PNG decode failed: ") + image.message);
    }
    Tensor out({1, image.height, image.width});
    for (std::size_t i = 0; i < gray.size(); ++i) out[i] = gray[i] / 255.0;
    return out;
}

std::vector<std::uint8_t> encode_png(const Tensor& img) {
    std::size_t h = 0, w = 0;
    if (img.rank() == 2) {
        h = img.dim(0);
        w = img.dim(1);
    } else if (img.rank() == 3 && img.dim(0) == 1) {
        h = img.dim(1);
        w = img.dim(2);
    } else {
        throw ShapeError("encode_png: expected [H,W] or [1,H,W], got " + shape_string(img.shape()));
    }
    std::vector<std::uint8_t> gray(h * w);
    for (std::size_t i = 0; i < gray.size(); ++i)
        gray[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));

    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, gray.data(), 0, nullptr))
        throw FormatError(std::string("PNG encode failed: ") + image.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, gray.data(), 0, nullptr))
        throw FormatError(std::string("PNG encode failed: ") + image.message);
    out.resize(size);
    return out;
}

Tensor load_image(const std::filesystem::path& path) {
    try {
        return decode_png(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_image(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_png(image)); }

} // namespace hmar
