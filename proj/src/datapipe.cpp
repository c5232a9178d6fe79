#include "fencepipe/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "fencepipe/io.hpp"
#include "fencepipe/rng.hpp"

namespace fencepipe {

using nlohmann::json;

std::string to_string(Source s) { return s == Source::drone ? "drone" : "still"; }

std::string to_string(FenceLabel f) {
    switch (f) {
        case FenceLabel::single: return "single";
        case FenceLabel::double_fence: return "double";
        case FenceLabel::unknown: return "unknown";
    }
    return "unknown";
}

Source parse_source(const std::string& s) {
    if (s == "drone") return Source::drone;
    if (s == "still") return Source::still;
    throw DataError("unknown source '" + s + "' (drone|still)");
}

FenceLabel parse_fence_label(const std::string& s) {
    if (s == "single") return FenceLabel::single;
    if (s == "double") return FenceLabel::double_fence;
    if (s == "unknown") return FenceLabel::unknown;
    throw DataError("unknown fence label '" + s + "' (single|double|unknown)");
}

// ---------------------------------------------------------------- tiling

TileGrid make_grid(std::size_t width, std::size_t height, std::size_t tile) {
    if (tile == 0) {
        throw ConfigError("tile size must be >= 1");
    }
    TileGrid g;
    g.tile_size = tile;
    g.width = width;
    g.height = height;
    g.cols = (width + tile - 1) / tile;
    g.rows = (height + tile - 1) / tile;
    g.pad_right = g.cols * tile - width;
    g.pad_bottom = g.rows * tile - height;
    return g;
}

std::pair<std::size_t, std::size_t> TileGrid::origin(std::size_t row, std::size_t col) const {
    if (row >= rows || col >= cols) {
        throw ContractError("tile (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                            std::to_string(rows) + "x" + std::to_string(cols) + " grid");
    }
    return {col * tile_size, row * tile_size};
}

std::pair<std::size_t, std::size_t> TileGrid::origin(std::size_t index) const {
    if (index >= count()) {
        throw ContractError("tile index " + std::to_string(index) + " outside grid of " +
                            std::to_string(count()));
    }
    return origin(index / cols, index % cols);
}

FilterResult filter_positive(const std::vector<BinaryMask>& masks, std::size_t min_positive) {
    FilterResult r;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (count_positive(masks[i]) >= min_positive) {
            r.kept.push_back(i);
        } else {
            ++r.discarded;
        }
    }
    return r;
}

// ----------------------------------------------------------- annotations

namespace {

std::size_t line_at(const std::string& text, std::size_t byte) {
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(byte), '\n'));
}

// Best-effort source line for a field: the first occurrence of the quoted
// key at or after `from`.
std::size_t find_line(const std::string& text, const std::string& key, std::size_t& from) {
    const std::size_t pos = text.find('"' + key + '"', from);
    if (pos == std::string::npos) {
        return line_at(text, from);
    }
    from = pos;
    return line_at(text, pos);
}

template <typename Json>
double number_field(const Json& obj, const char* key, const std::string& path, const std::string& text,
                    std::size_t from) {
    if (!obj.contains(key)) {
        throw ParseError("missing field '" + std::string(key) + "'", find_line(text, key, from), path + "." + key);
    }
    const json& v = obj.at(key);
    if (!v.is_number()) {
        throw ParseError("field '" + std::string(key) + "' must be a number", find_line(text, key, from),
                         path + "." + key);
    }
    return v.get<double>();
}

}  // namespace

AnnotationDoc parse_annotations(const std::string& text) {
    // Ordered, so that the line search below walks the document in order.
    nlohmann::ordered_json root;
    try {
        root = nlohmann::ordered_json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed annotation JSON: ") + e.what(), line_at(text, e.byte), "<document>");
    }
    if (!root.is_object()) {
        throw ParseError("annotation document must be a JSON object keyed by image id", 1, "<document>");
    }
    AnnotationDoc doc;
    std::size_t cursor = 0;
    for (const auto& [id, entry] : root.items()) {
        const std::size_t entry_line = find_line(text, id, cursor);
        std::size_t from = cursor;
        if (!entry.is_object()) {
            throw ParseError("image entry must be an object", entry_line, id);
        }
        auto& regions = doc.images[id];
        if (!entry.contains("regions")) {
            continue;  // unannotated image
        }
        const json& list = entry.at("regions");
        if (!list.is_array() && !list.is_object()) {
            throw ParseError("'regions' must be an array", find_line(text, "regions", from), id + ".regions");
        }
        std::size_t index = 0;
        for (const auto& reg : list) {
            const std::string path = id + ".regions[" + std::to_string(index++) + "]";
            if (!reg.is_object() || !reg.contains("shape_attributes") || !reg.at("shape_attributes").is_object()) {
                throw ParseError("region needs a 'shape_attributes' object", find_line(text, "shape_attributes", from),
                                 path + ".shape_attributes");
            }
            const json& shape = reg.at("shape_attributes");
            const std::size_t shape_from = text.find("\"shape_attributes\"", from);
            from = shape_from == std::string::npos ? from : shape_from + 1;
            const std::string spath = path + ".shape_attributes";
            if (!shape.contains("name") || !shape.at("name").is_string()) {
                throw ParseError("shape needs a string 'name'", find_line(text, "name", from), spath + ".name");
            }
            Region r;
            const std::string name = shape.at("name").get<std::string>();
            if (name == "polygon" || name == "polyline") {
                r.shape = Region::Shape::polygon;
                for (const char* key : {"all_points_x", "all_points_y"}) {
                    if (!shape.contains(key) || !shape.at(key).is_array()) {
                        throw ParseError(std::string("polygon needs array '") + key + "'", find_line(text, key, from),
                                         spath + "." + key);
                    }
                    for (const auto& v : shape.at(key)) {
                        if (!v.is_number()) {
                            throw ParseError(std::string("non-numeric coordinate in '") + key + "'",
                                             find_line(text, key, from), spath + "." + key);
                        }
                    }
                }
                const auto& xs = shape.at("all_points_x");
                const auto& ys = shape.at("all_points_y");
                if (xs.size() != ys.size()) {
                    throw ParseError("all_points_x and all_points_y differ in length",
                                     find_line(text, "all_points_y", from), spath + ".all_points_y");
                }
                if (xs.size() < 3) {
                    throw ParseError("polygon needs at least 3 points", find_line(text, "all_points_x", from),
                                     spath + ".all_points_x");
                }
                for (std::size_t i = 0; i < xs.size(); ++i) {
                    r.points.push_back({xs[i].get<double>(), ys[i].get<double>()});
                }
            } else if (name == "rect") {
                r.shape = Region::Shape::rect;
                r.x = number_field(shape, "x", spath, text, from);
                r.y = number_field(shape, "y", spath, text, from);
                r.width = number_field(shape, "width", spath, text, from);
                r.height = number_field(shape, "height", spath, text, from);
                if (r.width < 0 || r.height < 0) {
                    throw ParseError("rect has negative size", find_line(text, "width", from), spath + ".width");
                }
            } else {
                throw ParseError("unsupported shape '" + name + "' (polygon|rect)", find_line(text, "name", from),
                                 spath + ".name");
            }
            if (reg.contains("region_attributes") && reg.at("region_attributes").is_object()) {
                const json& attrs = reg.at("region_attributes");
                if (attrs.contains("label") && attrs.at("label").is_string()) {
                    r.label = attrs.at("label").get<std::string>();
                }
            }
            regions.push_back(std::move(r));
        }
    }
    return doc;
}

json to_json(const AnnotationDoc& doc) {
    json root = json::object();
    for (const auto& [id, regions] : doc.images) {
        json list = json::array();
        for (const Region& r : regions) {
            json shape;
            if (r.shape == Region::Shape::polygon) {
                json xs = json::array();
                json ys = json::array();
                for (const Point& p : r.points) {
                    xs.push_back(p.x);
                    ys.push_back(p.y);
                }
                shape = {{"name", "polygon"}, {"all_points_x", xs}, {"all_points_y", ys}};
            } else {
                shape = {{"name", "rect"}, {"x", r.x}, {"y", r.y}, {"width", r.width}, {"height", r.height}};
            }
            list.push_back({{"shape_attributes", shape}, {"region_attributes", {{"label", r.label}}}});
        }
        root[id] = {{"filename", id}, {"regions", list}};
    }
    return root;
}

namespace {

bool on_segment(const Point& a, const Point& b, double px, double py) {
    const double cross = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
    const double scale = std::max({1.0, std::abs(b.x - a.x), std::abs(b.y - a.y)});
    if (std::abs(cross) > 1e-9 * scale) {
        return false;
    }
    return px >= std::min(a.x, b.x) - 1e-12 && px <= std::max(a.x, b.x) + 1e-12 &&
           py >= std::min(a.y, b.y) - 1e-12 && py <= std::max(a.y, b.y) + 1e-12;
}

bool inside_or_on(const std::vector<Point>& poly, double px, double py) {
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Point& a = poly[i];
        const Point& b = poly[j];
        if (on_segment(a, b, px, py)) {
            return true;
        }
        if ((a.y > py) != (b.y > py)) {
            const double xi = a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y);
            if (px < xi) {
                inside = !inside;
            }
        }
    }
    return inside;
}

// Pixel index range whose centers can lie in [lo, hi].
std::pair<std::size_t, std::size_t> center_span(double lo, double hi, std::size_t limit) {
    const double a = std::ceil(lo - 0.5);
    const double b = std::floor(hi - 0.5);
    const double first = std::max(0.0, a);
    const double last = std::min(static_cast<double>(limit) - 1.0, b);
    if (last < first) {
        return {1, 0};
    }
    return {static_cast<std::size_t>(first), static_cast<std::size_t>(last)};
}

}  // namespace

void rasterize_polygon(BinaryMask& mask, const std::vector<Point>& points) {
    if (points.size() < 3) {
        throw DataError("polygon needs at least 3 points");
    }
    double x0 = points[0].x, x1 = x0, y0 = points[0].y, y1 = y0;
    for (const Point& p : points) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    const auto [ya, yb] = center_span(y0, y1, mask.height);
    const auto [xa, xb] = center_span(x0, x1, mask.width);
    if (yb < ya || xb < xa) {
        return;
    }
    for (std::size_t y = ya; y <= yb; ++y) {
        for (std::size_t x = xa; x <= xb; ++x) {
            if (inside_or_on(points, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
                mask.at(x, y) = 1;
            }
        }
    }
}

void rasterize_rect(BinaryMask& mask, double x, double y, double w, double h) {
    const auto [ya, yb] = center_span(y, y + h, mask.height);
    const auto [xa, xb] = center_span(x, x + w, mask.width);
    if (yb < ya || xb < xa) {
        return;
    }
    for (std::size_t yy = ya; yy <= yb; ++yy) {
        for (std::size_t xx = xa; xx <= xb; ++xx) {
            mask.at(xx, yy) = 1;
        }
    }
}

BinaryMask import_annotations(const std::vector<Region>& regions, std::size_t width, std::size_t height,
                              std::vector<std::string>* warnings) {
    if (width == 0 || height == 0) {
        throw DataError("annotation target image is empty");
    }
    BinaryMask mask(width, height, 1);
    const double W = static_cast<double>(width);
    const double H = static_cast<double>(height);
    std::size_t index = 0;
    for (const Region& r : regions) {
        bool clamped = false;
        auto cx = [&](double v) {
            const double c = std::clamp(v, 0.0, W);
            clamped = clamped || c != v;
            return c;
        };
        auto cy = [&](double v) {
            const double c = std::clamp(v, 0.0, H);
            clamped = clamped || c != v;
            return c;
        };
        if (r.shape == Region::Shape::polygon) {
            std::vector<Point> pts;
            pts.reserve(r.points.size());
            for (const Point& p : r.points) {
                pts.push_back({cx(p.x), cy(p.y)});
            }
            rasterize_polygon(mask, pts);
        } else {
            const double x0 = cx(r.x), y0 = cy(r.y);
            const double x1 = cx(r.x + r.width), y1 = cy(r.y + r.height);
            rasterize_rect(mask, x0, y0, x1 - x0, y1 - y0);
        }
        if (clamped && warnings != nullptr) {
            warnings->push_back("region " + std::to_string(index) + " clamped to " + std::to_string(width) + "x" +
                                std::to_string(height) + " image bounds");
        }
        ++index;
    }
    return mask;
}

// ----------------------------------------------------------------- masks

BinaryMask concat_masks(const std::vector<BinaryMask>& masks) {
    if (masks.empty()) {
        throw ContractError("concat_masks needs at least one mask");
    }
    if (masks.size() == 1) {
        return masks.front();
    }
    std::size_t total_width = 0;
    std::size_t total_height = 0;
    for (const auto& m : masks) {
        total_width += m.width;
        total_height = std::max(total_height, m.height);
    }
    BinaryMask out(total_width, total_height, 1);
    std::size_t offset = 0;
    for (const auto& m : masks) {
        for (std::size_t y = 0; y < m.height; ++y) {
            for (std::size_t x = 0; x < m.width; ++x) {
                out.at(offset + x, y) = m.at(x, y);
            }
        }
        offset += m.width;
    }
    return out;
}

BinaryMask union_masks(const std::vector<BinaryMask>& masks) {
    if (masks.empty()) {
        throw ContractError("union_masks needs at least one mask");
    }
    BinaryMask out = masks.front();
    for (std::size_t i = 1; i < masks.size(); ++i) {
        require_same_size(out, masks[i], "union_masks");
        for (std::size_t p = 0; p < out.data.size(); ++p) {
            out.data[p] = std::max(out.data[p], masks[i].data[p]);
        }
    }
    return out;
}

// ---------------------------------------------------------- augmentation

template <typename T>
Raster<T> affine_warp(const Raster<T>& r, const Affine& a) {
    const double th = a.rotate_deg * std::numbers::pi / 180.0;
    const double sh = std::tan(a.shear_deg * std::numbers::pi / 180.0);
    // M = R * Shear * scale
    const double c = std::cos(th), s = std::sin(th);
    const double m00 = a.scale * c, m01 = a.scale * (c * sh - s);
    const double m10 = a.scale * s, m11 = a.scale * (s * sh + c);
    const double det = m00 * m11 - m01 * m10;
    const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;
    const double cx = static_cast<double>(r.width) / 2.0;
    const double cy = static_cast<double>(r.height) / 2.0;
    Raster<T> out(r.width, r.height, r.channels);
    for (std::size_t y = 0; y < r.height; ++y) {
        for (std::size_t x = 0; x < r.width; ++x) {
            const double px = static_cast<double>(x) + 0.5 - cx - a.tx;
            const double py = static_cast<double>(y) + 0.5 - cy - a.ty;
            const double sx = std::floor(i00 * px + i01 * py + cx);
            const double sy = std::floor(i10 * px + i11 * py + cy);
            if (sx < 0 || sy < 0 || sx >= static_cast<double>(r.width) || sy >= static_cast<double>(r.height)) {
                continue;
            }
            for (std::size_t k = 0; k < r.channels; ++k) {
                out.at(x, y, k) = r.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy), k);
            }
        }
    }
    return out;
}

template Raster<double> affine_warp(const Raster<double>&, const Affine&);
template Raster<std::uint8_t> affine_warp(const Raster<std::uint8_t>&, const Affine&);

Image gaussian_blur(const Image& img, double sigma) {
    if (!(sigma > 0.0)) {
        return img;
    }
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    }
    const double norm = std::accumulate(k.begin(), k.end(), 0.0);
    for (double& v : k) v /= norm;
    auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1)); };
    Image tmp(img.width, img.height, img.channels);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[static_cast<std::size_t>(i + radius)] * img.at(clampi(static_cast<long>(x) + i, img.width), y, c);
                tmp.at(x, y, c) = acc;
            }
    Image out(img.width, img.height, img.channels);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(x, clampi(static_cast<long>(y) + i, img.height), c);
                out.at(x, y, c) = acc;
            }
    return out;
}

Image adjust_brightness(const Image& img, const std::vector<double>& multipliers) {
    if (multipliers.size() != img.channels) {
        throw DataError("brightness needs one multiplier per channel");
    }
    Image out = img;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = std::clamp(out.data[i] * multipliers[i % img.channels], 0.0, 1.0);
    }
    return out;
}

Augmented augment(const Image& img, const std::optional<BinaryMask>& mask, std::uint64_t seed,
                  const AugmentOptions& o) {
    if (mask) {
        require_same_size(img, *mask, "augment");
    }
    Rng rng(seed);
    Augmented res{img, mask, {}};
    auto geometric = [&](auto&& fn) {
        res.image = fn(res.image);
        if (res.mask) {
            res.mask = fn(*res.mask);
        }
    };
    if (rng.bernoulli(o.p_hflip)) {
        res.log.hflip = true;
        geometric([](const auto& r) { return hflip(r); });
    }
    if (rng.bernoulli(o.p_vflip)) {
        res.log.vflip = true;
        geometric([](const auto& r) { return vflip(r); });
    }
    if (rng.bernoulli(o.p_crop)) {
        const double s = rng.uniform(o.crop_min_scale, 1.0);
        CropBox box;
        box.width = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(s * static_cast<double>(img.width))), 1, img.width);
        box.height = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(s * static_cast<double>(img.height))), 1, img.height);
        box.x = rng.below(img.width - box.width + 1);
        box.y = rng.below(img.height - box.height + 1);
        res.log.crop = box;
        geometric([&](const auto& r) { return crop_resize(r, box); });
    }
    if (rng.bernoulli(o.p_affine)) {
        Affine a;
        a.scale = rng.uniform(o.scale_min, o.scale_max);
        a.tx = rng.uniform(-o.translate_frac, o.translate_frac) * static_cast<double>(img.width);
        a.ty = rng.uniform(-o.translate_frac, o.translate_frac) * static_cast<double>(img.height);
        a.rotate_deg = rng.uniform(-o.rotate_deg, o.rotate_deg);
        a.shear_deg = rng.uniform(-o.shear_deg, o.shear_deg);
        res.log.affine = a;
        geometric([&](const auto& r) { return affine_warp(r, a); });
    }
    if (rng.bernoulli(o.p_blur)) {
        const double sigma = rng.uniform(0.0, o.blur_sigma_max);
        res.log.blur_sigma = sigma;
        res.image = gaussian_blur(res.image, sigma);
    }
    if (rng.bernoulli(o.p_noise)) {
        const double sd = rng.uniform(0.0, o.noise_std_max);
        res.log.noise_std = sd;
        for (double& v : res.image.data) {
            v += rng.normal(0.0, sd);
        }
    }
    if (rng.bernoulli(o.p_brightness)) {
        std::vector<double> mult(img.channels);
        for (double& m : mult) {
            m = rng.uniform(o.brightness_min, o.brightness_max);
        }
        res.log.brightness = mult;
        res.image = adjust_brightness(res.image, mult);
    }
    for (double& v : res.image.data) {
        v = std::clamp(v, 0.0, 1.0);
    }
    return res;
}

Image resize_bilinear(const Image& img, std::size_t width, std::size_t height) {
    if (img.empty()) {
        throw DataError("cannot resize an empty image");
    }
    if (width == 0 || height == 0) {
        throw ConfigError("resize target must be at least 1x1");
    }
    if (width == img.width && height == img.height) {
        return img;
    }
    Image out(width, height, img.channels);
    const double sx = static_cast<double>(img.width) / static_cast<double>(width);
    const double sy = static_cast<double>(img.height) / static_cast<double>(height);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
                const double bot = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
                out.at(x, y, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Image resize_for_classification(const Image& img, std::size_t size) { return resize_bilinear(img, size, size); }

// ------------------------------------------------------------ manifests

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::none: return "none";
    }
    return "none";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "none" || s.empty()) return Split::none;
    throw DataError("unknown split '" + s + "' (train|val|test)");
}

json to_json(const DatasetManifest& m) {
    json arr = json::array();
    for (const auto& e : m.entries) {
        json j = {{"id", e.id},
                  {"path", e.path},
                  {"source", to_string(e.source)},
                  {"fence", to_string(e.fence)},
                  {"split", to_string(e.split)}};
        if (e.mask_path) {
            j["mask_path"] = *e.mask_path;
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

DatasetManifest manifest_from_json(const json& j) {
    if (!j.is_array()) {
        throw DataError("manifest must be a JSON array");
    }
    DatasetManifest m;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const json& e = j[i];
        try {
            ManifestEntry entry;
            entry.id = e.at("id").get<std::string>();
            entry.path = e.at("path").get<std::string>();
            entry.source = parse_source(e.value("source", "drone"));
            entry.fence = parse_fence_label(e.value("fence", "unknown"));
            entry.split = parse_split(e.value("split", "none"));
            if (e.contains("mask_path") && !e.at("mask_path").is_null()) {
                entry.mask_path = e.at("mask_path").get<std::string>();
            }
            m.entries.push_back(std::move(entry));
        } catch (const json::exception& ex) {
            throw DataError("manifest entry " + std::to_string(i) + ": " + ex.what());
        }
    }
    return m;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed manifest: ") + e.what(), line_at(text, e.byte), "<document>");
    }
    DatasetManifest m = manifest_from_json(j);
    const auto base = path.parent_path();
    for (const auto& e : m.entries) {
        if (e.mask_path && !std::filesystem::exists(base / *e.mask_path) && !std::filesystem::exists(*e.mask_path)) {
            throw DataError("manifest entry '" + e.id + "' references missing mask " + *e.mask_path);
        }
    }
    return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    write_file_atomic(path, to_json(m).dump(2) + "\n");
}

namespace {

// Integer allocation of `total` across quotas: floors clamped into
// [lower, upper], then +1 (or -1) by largest (smallest) fractional part,
// ties to the lower index.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& quota,
                                   const std::vector<std::size_t>& lower, const std::vector<std::size_t>& upper) {
    const std::size_t n = quota.size();
    std::vector<std::size_t> out(n);
    std::size_t sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto f = static_cast<std::size_t>(std::floor(quota[i] + 1e-9));
        out[i] = std::clamp(f, lower[i], upper[i]);
        sum += out[i];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto frac = [&](std::size_t i) { return quota[i] - static_cast<double>(out[i]); };
    while (sum < total) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac(a) > frac(b) + 1e-12; });
        bool moved = false;
        for (std::size_t i : order) {
            if (out[i] < upper[i]) {
                ++out[i];
                ++sum;
                moved = true;
                break;
            }
        }
        if (!moved) break;
    }
    while (sum > total) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac(a) < frac(b) - 1e-12; });
        bool moved = false;
        for (std::size_t i : order) {
            if (out[i] > lower[i]) {
                --out[i];
                --sum;
                moved = true;
                break;
            }
        }
        if (!moved) break;
    }
    return out;
}

}  // namespace

DatasetManifest split_dataset(const DatasetManifest& manifest, std::array<double, 3> fractions, std::uint64_t seed) {
    if (manifest.entries.empty()) {
        throw DataError("cannot split an empty manifest");
    }
    for (double f : fractions) {
        if (!(f >= 0.0)) {
            throw ConfigError("split fractions must be non-negative");
        }
    }
    if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
        throw ConfigError("split fractions must sum to 1");
    }
    const std::size_t n = manifest.entries.size();
    // Classes in first-appearance order.
    std::vector<FenceLabel> labels;
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < n; ++i) {
        const FenceLabel f = manifest.entries[i].fence;
        auto it = std::find(labels.begin(), labels.end(), f);
        if (it == labels.end()) {
            labels.push_back(f);
            members.emplace_back();
            it = labels.end() - 1;
        }
        members[static_cast<std::size_t>(it - labels.begin())].push_back(i);
    }
    const std::size_t k = labels.size();
    const auto nd = static_cast<double>(n);
    const auto train_total = static_cast<std::size_t>(std::floor(fractions[0] * nd + 1e-9));
    const auto val_total = static_cast<std::size_t>(std::floor(fractions[1] * nd + 1e-9));

    // Allocate cumulative counts (train, then train + val) so that each class
    // stays close to its own share at both cut points.
    std::vector<double> q1(k), q2(k);
    std::vector<std::size_t> zero(k, 0), size(k);
    for (std::size_t c = 0; c < k; ++c) {
        size[c] = members[c].size();
        q1[c] = fractions[0] * static_cast<double>(size[c]);
        q2[c] = (fractions[0] + fractions[1]) * static_cast<double>(size[c]);
    }
    const auto cum1 = apportion(train_total, q1, zero, size);
    const auto cum2 = apportion(train_total + val_total, q2, cum1, size);

    DatasetManifest out = manifest;
    Rng rng(seed);
    for (std::size_t c = 0; c < k; ++c) {
        auto idx = members[c];
        rng.shuffle(idx.begin(), idx.end());
        for (std::size_t j = 0; j < idx.size(); ++j) {
            out.entries[idx[j]].split = j < cum1[c] ? Split::train : (j < cum2[c] ? Split::val : Split::test);
        }
    }
    return out;
}

}  // namespace fencepipe
