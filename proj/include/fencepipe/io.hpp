#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "fencepipe/raster.hpp"

namespace fencepipe {

/// Writes to a sibling temp file, then renames over `path`, so readers never
/// see a partial file. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// 8-bit PNG. Gray, gray+alpha, RGB and RGBA inputs are accepted; alpha is
/// dropped. Values are normalized to [0, 1].
Image read_png(const std::filesystem::path& path);
/// Writes 8-bit gray (1 channel) or RGB (3 channels), rounding v * 255.
void write_png(const std::filesystem::path& path, const Image& img);

/// Binary P5/P6 with maxval 255.
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

/// Dispatches on the extension (.png, .ppm, .pgm).
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& img);

/// Masks are stored as gray images: 0 and 255.
BinaryMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);

BinaryMask mask_from_image(const Image& img);
Image image_from_mask(const BinaryMask& mask);

}  // namespace fencepipe
