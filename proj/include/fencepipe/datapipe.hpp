#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fencepipe/error.hpp"
#include "fencepipe/raster.hpp"

namespace fencepipe {

enum class Source { drone, still };
enum class FenceLabel { single, double_fence, unknown };

std::string to_string(Source s);
std::string to_string(FenceLabel f);
Source parse_source(const std::string& s);
FenceLabel parse_fence_label(const std::string& s);

struct SceneImage {
    Image pixels;
    Source source = Source::drone;
    FenceLabel fence = FenceLabel::unknown;
    std::string id;
};

// ---------------------------------------------------------------- tiling

struct TileGrid {
    std::size_t tile_size = 512;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t width = 0;   // original image
    std::size_t height = 0;
    std::size_t pad_right = 0;
    std::size_t pad_bottom = 0;

    std::size_t count() const { return rows * cols; }
    /// Global (x0, y0) of tile (r, c). Throws ContractError when out of range.
    std::pair<std::size_t, std::size_t> origin(std::size_t row, std::size_t col) const;
    std::pair<std::size_t, std::size_t> origin(std::size_t index) const;
};

TileGrid make_grid(std::size_t width, std::size_t height, std::size_t tile);

/// Edge-replicates the image up to tile multiples and cuts it into row-major
/// tile x tile pieces.
template <typename T>
std::pair<std::vector<Raster<T>>, TileGrid> slice_image(const Raster<T>& img, std::size_t tile) {
    if (tile == 0) {
        throw ConfigError("tile size must be >= 1");
    }
    if (img.width == 0 || img.height == 0) {
        throw DataError("cannot slice an empty image");
    }
    const TileGrid grid = make_grid(img.width, img.height, tile);
    std::vector<Raster<T>> tiles;
    tiles.reserve(grid.count());
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            Raster<T> t(tile, tile, img.channels);
            for (std::size_t y = 0; y < tile; ++y) {
                const std::size_t sy = std::min(r * tile + y, img.height - 1);
                for (std::size_t x = 0; x < tile; ++x) {
                    const std::size_t sx = std::min(c * tile + x, img.width - 1);
                    for (std::size_t k = 0; k < img.channels; ++k) {
                        t.at(x, y, k) = img.at(sx, sy, k);
                    }
                }
            }
            tiles.push_back(std::move(t));
        }
    }
    return {std::move(tiles), grid};
}

/// Inverse of slice_image: stitches tiles and crops the padding away.
template <typename T>
Raster<T> reassemble(const std::vector<Raster<T>>& tiles, const TileGrid& grid) {
    if (tiles.size() != grid.count()) {
        throw DataError("reassemble: expected " + std::to_string(grid.count()) + " tiles, got " +
                        std::to_string(tiles.size()));
    }
    if (tiles.empty()) {
        throw DataError("reassemble: empty grid");
    }
    const std::size_t channels = tiles.front().channels;
    for (const auto& t : tiles) {
        if (t.width != grid.tile_size || t.height != grid.tile_size || t.channels != channels) {
            throw DataError("reassemble: tile is " + std::to_string(t.width) + "x" + std::to_string(t.height) +
                            ", grid expects " + std::to_string(grid.tile_size));
        }
    }
    Raster<T> out(grid.width, grid.height, channels);
    const std::size_t tile = grid.tile_size;
    for (std::size_t y = 0; y < grid.height; ++y) {
        for (std::size_t x = 0; x < grid.width; ++x) {
            const auto& t = tiles[(y / tile) * grid.cols + x / tile];
            for (std::size_t k = 0; k < channels; ++k) {
                out.at(x, y, k) = t.at(x % tile, y % tile, k);
            }
        }
    }
    return out;
}

struct FilterResult {
    std::vector<std::size_t> kept;  // indices into the input lists
    std::size_t discarded = 0;
};

/// Keeps tile i iff masks[i] has at least `min_positive` positive pixels.
FilterResult filter_positive(const std::vector<BinaryMask>& masks, std::size_t min_positive = 1);

// ----------------------------------------------------------- annotations

struct Point {
    double x = 0.0;
    double y = 0.0;
};

struct Region {
    enum class Shape { polygon, rect };
    Shape shape = Shape::polygon;
    std::vector<Point> points;  // polygon
    double x = 0.0, y = 0.0, width = 0.0, height = 0.0;  // rect
    std::string label = "insulator";
};

/// Image id -> regions (VIA-style JSON subset).
struct AnnotationDoc {
    std::map<std::string, std::vector<Region>> images;
};

/// Throws ParseError with the 1-based line and a field path on bad input.
AnnotationDoc parse_annotations(const std::string& text);
nlohmann::json to_json(const AnnotationDoc& doc);

/// Pixel (x, y) is set iff its center (x + 0.5, y + 0.5) lies inside the
/// polygon (even-odd rule) or on its boundary.
void rasterize_polygon(BinaryMask& mask, const std::vector<Point>& points);
/// Pixel centers inside the closed box [x, x + w] x [y, y + h].
void rasterize_rect(BinaryMask& mask, double x, double y, double w, double h);

/// Union of all regions. Coordinates outside [0, width] x [0, height] are
/// clamped, with a message appended to `warnings` when given.
BinaryMask import_annotations(const std::vector<Region>& regions, std::size_t width, std::size_t height,
                              std::vector<std::string>* warnings = nullptr);

// ----------------------------------------------------------------- masks

/// Horizontal concatenation; shorter masks are zero-padded at the bottom.
/// A single mask is returned unchanged. Throws ContractError when empty.
BinaryMask concat_masks(const std::vector<BinaryMask>& masks);
/// Pixelwise maximum of same-size masks.
BinaryMask union_masks(const std::vector<BinaryMask>& masks);

// ---------------------------------------------------------- augmentation

struct AugmentOptions {
    double p_hflip = 0.5;
    double p_vflip = 0.5;
    double p_crop = 0.5;
    double crop_min_scale = 0.8;
    double p_blur = 0.5;
    double blur_sigma_max = 0.5;
    double p_noise = 0.5;
    double noise_std_max = 0.05;
    double p_brightness = 0.2;
    double brightness_min = 0.7;
    double brightness_max = 1.3;
    double p_affine = 1.0;
    double scale_min = 0.8;
    double scale_max = 1.2;
    double translate_frac = 0.1;
    double rotate_deg = 15.0;
    double shear_deg = 8.0;
};

struct Affine {
    double scale = 1.0;
    double tx = 0.0;  // pixels
    double ty = 0.0;
    double rotate_deg = 0.0;
    double shear_deg = 0.0;
};

struct CropBox {
    std::size_t x = 0, y = 0, width = 0, height = 0;
};

/// What augment() did; every random draw is recorded.
struct AugmentLog {
    bool hflip = false;
    bool vflip = false;
    std::optional<CropBox> crop;
    std::optional<double> blur_sigma;
    std::optional<double> noise_std;
    std::optional<std::vector<double>> brightness;  // per-channel multipliers
    std::optional<Affine> affine;
};

struct Augmented {
    Image image;
    std::optional<BinaryMask> mask;
    AugmentLog log;
};

/// Applies the augmentation suite with draws from `seed`. Geometric steps
/// (flips, crop, affine) use nearest-neighbour sampling with zero fill and
/// hit image and mask identically; photometric steps (blur, noise,
/// brightness) touch only the image. Output pixels are clamped to [0, 1].
/// The random stream does not depend on pixel values.
Augmented augment(const Image& img, const std::optional<BinaryMask>& mask, std::uint64_t seed,
                  const AugmentOptions& options = {});

template <typename T>
Raster<T> hflip(const Raster<T>& r) {
    Raster<T> out(r.width, r.height, r.channels);
    for (std::size_t y = 0; y < r.height; ++y)
        for (std::size_t x = 0; x < r.width; ++x)
            for (std::size_t k = 0; k < r.channels; ++k) out.at(x, y, k) = r.at(r.width - 1 - x, y, k);
    return out;
}

template <typename T>
Raster<T> vflip(const Raster<T>& r) {
    Raster<T> out(r.width, r.height, r.channels);
    for (std::size_t y = 0; y < r.height; ++y)
        for (std::size_t x = 0; x < r.width; ++x)
            for (std::size_t k = 0; k < r.channels; ++k) out.at(x, y, k) = r.at(x, r.height - 1 - y, k);
    return out;
}

/// Cuts `box` and scales it back to the original size (nearest neighbour).
template <typename T>
Raster<T> crop_resize(const Raster<T>& r, const CropBox& box) {
    Raster<T> out(r.width, r.height, r.channels);
    for (std::size_t y = 0; y < r.height; ++y) {
        const std::size_t sy = box.y + (y * box.height) / r.height;
        for (std::size_t x = 0; x < r.width; ++x) {
            const std::size_t sx = box.x + (x * box.width) / r.width;
            for (std::size_t k = 0; k < r.channels; ++k) out.at(x, y, k) = r.at(sx, sy, k);
        }
    }
    return out;
}

/// Affine warp about the image center, nearest neighbour, zero outside.
template <typename T>
Raster<T> affine_warp(const Raster<T>& r, const Affine& a);

Image gaussian_blur(const Image& img, double sigma);
Image adjust_brightness(const Image& img, const std::vector<double>& multipliers);

/// Bilinear resample with half-pixel centers and edge clamping.
Image resize_bilinear(const Image& img, std::size_t width, std::size_t height);
Image resize_for_classification(const Image& img, std::size_t size = 512);

// ------------------------------------------------------------ manifests

enum class Split { train, val, test, none };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
    std::string id;
    std::string path;
    Source source = Source::drone;
    FenceLabel fence = FenceLabel::unknown;
    Split split = Split::none;
    std::optional<std::string> mask_path;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);

/// Stratified by fence label. Overall counts are train = floor(f0 n),
/// val = floor(f1 n), test = the rest; each class gets the floor of its
/// share and leftovers go by largest remainder. Members are shuffled with
/// `seed` before assignment.
DatasetManifest split_dataset(const DatasetManifest& manifest, std::array<double, 3> fractions,
                              std::uint64_t seed);

}  // namespace fencepipe
