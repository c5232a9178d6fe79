#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fencepipe/datapipe.hpp"
#include "fencepipe/raster.hpp"

namespace fencepipe {

/// 1 where prob >= threshold. Threshold must lie in (0, 1).
BinaryMask binarize(const ProbabilityMask& prob, double threshold = 0.5);
/// 0/255 rendering of a binary mask.
Raster<std::uint8_t> render_255(const BinaryMask& mask);

struct PixelXY {
    std::size_t x = 0;
    std::size_t y = 0;
    friend bool operator==(const PixelXY&, const PixelXY&) = default;
};

/// Connected set of foreground pixels, listed in scan order.
struct Blob {
    std::vector<PixelXY> pixels;
    int connectivity = 8;

    std::size_t area() const { return pixels.size(); }
    friend bool operator==(const Blob& a, const Blob& b) { return a.pixels == b.pixels; }
};

/// Maximal 4- or 8-connected foreground sets, ordered by their first pixel
/// in scan order; blobs smaller than min_area are dropped.
std::vector<Blob> find_components(const BinaryMask& mask, int connectivity = 8, std::size_t min_area = 1);

struct BBox {
    long x = 0;
    long y = 0;
    long width = 0;
    long height = 0;
    long pad = 0;
    std::optional<double> score;

    friend bool operator==(const BBox& a, const BBox& b) {
        return a.x == b.x && a.y == b.y && a.width == b.width && a.height == b.height;
    }
};

/// Tight box grown by `pad` on every side and clamped to [0, width) x [0, height).
BBox bbox_of(const Blob& blob, long pad, std::size_t width, std::size_t height);

/// Boxes of one tile, in tile-local coordinates.
struct TileBoxes {
    std::size_t tile = 0;  // row-major tile index
    std::vector<BBox> boxes;
};

/// Offsets each box by its tile origin and clips it to the original image;
/// boxes that lie entirely in the padding are dropped. No merging: use the
/// mask overload when blobs may cross tile edges.
std::vector<BBox> map_to_global(const std::vector<TileBoxes>& boxes, const TileGrid& grid);

struct GlobalDetections {
    std::vector<Blob> blobs;  // global coordinates, find_components order
    std::vector<BBox> boxes;
};

/// Per-tile components (padding excluded) stitched across tile edges with a
/// union-find over neighbouring labels. The result equals running
/// find_components + bbox_of on the reassembled mask.
GlobalDetections map_to_global(const std::vector<BinaryMask>& tile_masks, const TileGrid& grid,
                               int connectivity = 8, long pad = 3, std::size_t min_area = 1);

struct Rgb {
    double r = 1.0, g = 0.0, b = 0.0;
};

/// Copy of `image` with rectangle outlines (stroke pixels inside each box).
Image render_overlay(const Image& image, const std::vector<BBox>& boxes, Rgb color = {}, int stroke = 1);

/// |gt - pred| per pixel.
BinaryMask residual_mask(const BinaryMask& gt, const BinaryMask& pred);

struct Detections {
    std::string image_id;
    std::vector<BBox> boxes;
    double threshold = 0.5;
    long pad = 3;
};

nlohmann::json to_json(const Detections& d);

}  // namespace fencepipe
