#include "fencepipe/detect.hpp"

#include <algorithm>
#include <numeric>

namespace fencepipe {

BinaryMask binarize(const ProbabilityMask& prob, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("threshold must lie in (0, 1)");
    }
    if (prob.channels != 1) {
        throw DimensionError("binarize expects a single-channel mask");
    }
    BinaryMask out(prob.width, prob.height, 1);
    for (std::size_t i = 0; i < prob.data.size(); ++i) {
        out.data[i] = prob.data[i] >= threshold ? 1 : 0;
    }
    return out;
}

Raster<std::uint8_t> render_255(const BinaryMask& mask) {
    Raster<std::uint8_t> out = mask;
    for (auto& v : out.data) {
        v = v != 0 ? 255 : 0;
    }
    return out;
}

namespace {

void check_connectivity(int connectivity) {
    if (connectivity != 4 && connectivity != 8) {
        throw ConfigError("connectivity must be 4 or 8");
    }
}

const int kDx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
const int kDy[8] = {0, 0, 1, -1, 1, -1, 1, -1};

bool scan_less(const PixelXY& a, const PixelXY& b) { return a.y != b.y ? a.y < b.y : a.x < b.x; }

struct UnionFind {
    std::vector<std::size_t> parent;
    explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
    std::size_t find(std::size_t i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) {
            parent[std::max(a, b)] = std::min(a, b);
        }
    }
};

}  // namespace

std::vector<Blob> find_components(const BinaryMask& mask, int connectivity, std::size_t min_area) {
    check_connectivity(connectivity);
    const std::size_t w = mask.width;
    const std::size_t h = mask.height;
    std::vector<std::uint8_t> seen(w * h, 0);
    std::vector<Blob> blobs;
    std::vector<PixelXY> stack;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (mask.at(x, y) == 0 || seen[y * w + x]) {
                continue;
            }
            Blob blob;
            blob.connectivity = connectivity;
            seen[y * w + x] = 1;
            stack.push_back({x, y});
            while (!stack.empty()) {
                const PixelXY p = stack.back();
                stack.pop_back();
                blob.pixels.push_back(p);
                for (int d = 0; d < connectivity; ++d) {
                    const long nx = static_cast<long>(p.x) + kDx[d];
                    const long ny = static_cast<long>(p.y) + kDy[d];
                    if (nx < 0 || ny < 0 || nx >= static_cast<long>(w) || ny >= static_cast<long>(h)) {
                        continue;
                    }
                    const auto ux = static_cast<std::size_t>(nx);
                    const auto uy = static_cast<std::size_t>(ny);
                    if (mask.at(ux, uy) != 0 && !seen[uy * w + ux]) {
                        seen[uy * w + ux] = 1;
                        stack.push_back({ux, uy});
                    }
                }
            }
            if (blob.area() >= min_area) {
                std::sort(blob.pixels.begin(), blob.pixels.end(), scan_less);
                blobs.push_back(std::move(blob));
            }
        }
    }
    return blobs;
}

BBox bbox_of(const Blob& blob, long pad, std::size_t width, std::size_t height) {
    if (blob.pixels.empty()) {
        throw ContractError("bbox_of: empty blob");
    }
    if (pad < 0) {
        throw ConfigError("pad must be >= 0");
    }
    std::size_t x0 = blob.pixels[0].x, x1 = x0, y0 = blob.pixels[0].y, y1 = y0;
    for (const auto& p : blob.pixels) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    const long left = std::max(0L, static_cast<long>(x0) - pad);
    const long top = std::max(0L, static_cast<long>(y0) - pad);
    const long right = std::min(static_cast<long>(width) - 1, static_cast<long>(x1) + pad);
    const long bottom = std::min(static_cast<long>(height) - 1, static_cast<long>(y1) + pad);
    BBox b;
    b.x = left;
    b.y = top;
    b.width = right - left + 1;
    b.height = bottom - top + 1;
    b.pad = pad;
    return b;
}

std::vector<BBox> map_to_global(const std::vector<TileBoxes>& boxes, const TileGrid& grid) {
    std::vector<BBox> out;
    const auto W = static_cast<long>(grid.width);
    const auto H = static_cast<long>(grid.height);
    for (const TileBoxes& tb : boxes) {
        const auto [ox, oy] = grid.origin(tb.tile);
        for (BBox b : tb.boxes) {
            b.x += static_cast<long>(ox);
            b.y += static_cast<long>(oy);
            if (b.x >= W || b.y >= H) {
                continue;  // entirely in the padding
            }
            b.width = std::min(b.width, W - b.x);
            b.height = std::min(b.height, H - b.y);
            out.push_back(b);
        }
    }
    return out;
}

GlobalDetections map_to_global(const std::vector<BinaryMask>& tile_masks, const TileGrid& grid, int connectivity,
                               long pad, std::size_t min_area) {
    check_connectivity(connectivity);
    if (tile_masks.size() != grid.count()) {
        throw ContractError("map_to_global: expected " + std::to_string(grid.count()) + " tile masks, got " +
                            std::to_string(tile_masks.size()));
    }
    const std::size_t W = grid.width;
    const std::size_t H = grid.height;
    const std::size_t T = grid.tile_size;
    constexpr std::size_t kNone = static_cast<std::size_t>(-1);
    // Global label image built from per-tile components.
    std::vector<std::size_t> label(W * H, kNone);
    std::vector<std::vector<PixelXY>> parts;
    for (std::size_t t = 0; t < tile_masks.size(); ++t) {
        const BinaryMask& m = tile_masks[t];
        if (m.width != T || m.height != T) {
            throw DataError("tile mask " + std::to_string(t) + " is not " + std::to_string(T) + "x" + std::to_string(T));
        }
        const auto [ox, oy] = grid.origin(t);
        // Crop away the padding before labelling.
        BinaryMask valid(std::min(T, W - ox), std::min(T, H - oy), 1);
        for (std::size_t y = 0; y < valid.height; ++y)
            for (std::size_t x = 0; x < valid.width; ++x) valid.at(x, y) = m.at(x, y);
        for (Blob& b : find_components(valid, connectivity, 1)) {
            std::vector<PixelXY> pts;
            pts.reserve(b.pixels.size());
            for (const auto& p : b.pixels) {
                const PixelXY g{p.x + ox, p.y + oy};
                label[g.y * W + g.x] = parts.size();
                pts.push_back(g);
            }
            parts.push_back(std::move(pts));
        }
    }
    // Link parts that touch across a tile edge (forward neighbours suffice).
    UnionFind uf(parts.size());
    const int fdx[4] = {1, 0, 1, -1};
    const int fdy[4] = {0, 1, 1, 1};
    const int nforward = connectivity == 8 ? 4 : 2;
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t a = label[y * W + x];
            if (a == kNone) continue;
            for (int d = 0; d < nforward; ++d) {
                const long nx = static_cast<long>(x) + fdx[d];
                const long ny = static_cast<long>(y) + fdy[d];
                if (nx < 0 || nx >= static_cast<long>(W) || ny >= static_cast<long>(H)) continue;
                const auto ux = static_cast<std::size_t>(nx);
                const auto uy = static_cast<std::size_t>(ny);
                const std::size_t b = label[uy * W + ux];
                if (b != kNone && (ux / T != x / T || uy / T != y / T)) {
                    uf.unite(a, b);
                }
            }
        }
    }
    std::vector<std::vector<PixelXY>> merged(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
        auto& dst = merged[uf.find(i)];
        dst.insert(dst.end(), parts[i].begin(), parts[i].end());
    }
    GlobalDetections out;
    for (auto& pts : merged) {
        if (pts.empty() || pts.size() < min_area) continue;
        std::sort(pts.begin(), pts.end(), scan_less);
        Blob b;
        b.connectivity = connectivity;
        b.pixels = std::move(pts);
        out.blobs.push_back(std::move(b));
    }
    std::sort(out.blobs.begin(), out.blobs.end(),
              [](const Blob& a, const Blob& b) { return scan_less(a.pixels.front(), b.pixels.front()); });
    for (const Blob& b : out.blobs) {
        out.boxes.push_back(bbox_of(b, pad, W, H));
    }
    return out;
}

Image render_overlay(const Image& image, const std::vector<BBox>& boxes, Rgb color, int stroke) {
    if (stroke < 1) {
        throw ConfigError("stroke width must be >= 1");
    }
    Image out = image;
    const double rgb[3] = {color.r, color.g, color.b};
    auto paint = [&](long x, long y) {
        if (x < 0 || y < 0 || x >= static_cast<long>(out.width) || y >= static_cast<long>(out.height)) return;
        for (std::size_t c = 0; c < out.channels; ++c) {
            out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = out.channels == 3 ? rgb[c] : rgb[0];
        }
    };
    for (const BBox& b : boxes) {
        if (b.width <= 0 || b.height <= 0) continue;
        for (long y = b.y; y < b.y + b.height; ++y) {
            for (long x = b.x; x < b.x + b.width; ++x) {
                const long d = std::min({x - b.x, y - b.y, b.x + b.width - 1 - x, b.y + b.height - 1 - y});
                if (d < stroke) paint(x, y);
            }
        }
    }
    return out;
}

BinaryMask residual_mask(const BinaryMask& gt, const BinaryMask& pred) {
    require_same_size(gt, pred, "residual_mask");
    BinaryMask out(gt.width, gt.height, 1);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = (gt.data[i] != 0) != (pred.data[i] != 0) ? 1 : 0;
    }
    return out;
}

nlohmann::json to_json(const Detections& d) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const BBox& b : d.boxes) {
        nlohmann::json j = {{"x", b.x}, {"y", b.y}, {"w", b.width}, {"h", b.height}};
        if (b.score) j["score"] = *b.score;
        boxes.push_back(std::move(j));
    }
    return {{"image_id", d.image_id}, {"boxes", boxes}, {"threshold", d.threshold}, {"pad", d.pad}};
}

}  // namespace fencepipe
