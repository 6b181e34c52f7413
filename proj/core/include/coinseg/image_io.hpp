#pragma once

#include <filesystem>

#include "coinseg/tensor.hpp"

namespace coinseg {

/// Decodes any PNG to an RGB image in [0,1].
Image read_png_rgb(const std::filesystem::path& path);

/// Decodes an 8-bit grayscale or palette PNG as raw label values (palette
/// indices are returned untranslated, matching VOC SegmentationClass files).
LabelGrid read_png_labels(const std::filesystem::path& path);

void write_png_rgb(const std::filesystem::path& path, const Image& image);
void write_png_labels(const std::filesystem::path& path, const LabelGrid& labels);

}  // namespace coinseg
