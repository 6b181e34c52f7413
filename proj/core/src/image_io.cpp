#include "coinseg/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include <fmt/format.h>
#include <png.h>

#include "coinseg/errors.hpp"

namespace coinseg {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw DataError(fmt::format("cannot open '{}'", path.string()));
    return f;
}

std::uint8_t to_byte(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace

Image read_png_rgb(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw DataError(fmt::format("cannot decode PNG '{}': {}", path.string(), img.message));
    }
    img.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&img);
        throw DataError(fmt::format("cannot decode PNG '{}': {}", path.string(), img.message));
    }
    const int h = static_cast<int>(img.height);
    const int w = static_cast<int>(img.width);
    Image out(3, h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                out(c, y, x) = buffer[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
            }
        }
    }
    return out;
}

LabelGrid read_png_labels(const std::filesystem::path& path) {
    auto file = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(fmt::format("cannot decode label PNG '{}'", path.string()));
    }
    png_init_io(png, file.get());
    png_read_png(png, info, PNG_TRANSFORM_PACKING | PNG_TRANSFORM_STRIP_16, nullptr);
    const auto w = static_cast<int>(png_get_image_width(png, info));
    const auto h = static_cast<int>(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    const int channels = png_get_channels(png, info);
    if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_PALETTE) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(fmt::format("label mask '{}' must be 8-bit grayscale or palette", path.string()));
    }
    png_bytepp rows = png_get_rows(png, info);
    LabelGrid out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) out(y, x) = rows[y][x * channels];
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png_rgb(const std::filesystem::path& path, const Image& image) {
    if (image.channels() != 3) throw DataError("write_png_rgb expects a 3-channel image");
    const int h = image.height();
    const int w = image.width();
    std::vector<png_byte> buffer(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) buffer[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image(c, y, x));
        }
    }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, buffer.data(), 0, nullptr)) {
        throw DataError(fmt::format("cannot write PNG '{}': {}", path.string(), img.message));
    }
}

void write_png_labels(const std::filesystem::path& path, const LabelGrid& labels) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(labels.width());
    img.height = static_cast<png_uint_32>(labels.height());
    img.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, labels.storage().data(), 0, nullptr)) {
        throw DataError(fmt::format("cannot write PNG '{}': {}", path.string(), img.message));
    }
}

}  // namespace coinseg
