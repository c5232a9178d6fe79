#include "fencepipe/synthgen.hpp"

#include <algorithm>
#include <cmath>

#include <cstdio>

#include "fencepipe/io.hpp"

namespace fencepipe {

namespace {

struct Painter {
    Image& img;
    void fill_rect(long x0, long y0, long x1, long y1, const std::array<double, 3>& rgb) {
        x0 = std::max(0L, x0);
        y0 = std::max(0L, y0);
        x1 = std::min(static_cast<long>(img.width), x1);
        y1 = std::min(static_cast<long>(img.height), y1);
        for (long y = y0; y < y1; ++y)
            for (long x = x0; x < x1; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = rgb[c];
    }
};

Region region_of(const InsulatorSpec& s) {
    Region r;
    r.label = "insulator";
    if (s.shape == InsulatorSpec::Shape::rect) {
        r.shape = Region::Shape::rect;
        r.x = s.x;
        r.y = s.y;
        r.width = s.w;
        r.height = s.h;
        return r;
    }
    r.shape = Region::Shape::polygon;
    const int c = std::max(1, std::min(s.w, s.h) / 3);
    const double x = s.x, y = s.y, w = s.w, h = s.h;
    r.points = {{x + c, y},     {x + w - c, y},     {x + w, y + c}, {x + w, y + h - c},
                {x + w - c, y + h}, {x + c, y + h}, {x, y + h - c}, {x, y + c}};
    return r;
}

BBox tight_box(const BinaryMask& m) {
    long x0 = static_cast<long>(m.width), y0 = static_cast<long>(m.height), x1 = -1, y1 = -1;
    for (std::size_t y = 0; y < m.height; ++y)
        for (std::size_t x = 0; x < m.width; ++x)
            if (m.at(x, y)) {
                x0 = std::min(x0, static_cast<long>(x));
                y0 = std::min(y0, static_cast<long>(y));
                x1 = std::max(x1, static_cast<long>(x));
                y1 = std::max(y1, static_cast<long>(y));
            }
    BBox b;
    if (x1 >= 0) {
        b.x = x0;
        b.y = y0;
        b.width = x1 - x0 + 1;
        b.height = y1 - y0 + 1;
    }
    return b;
}

}  // namespace

Scene gen_scene(const SceneSpec& spec) {
    if (spec.width < 8 || spec.height < 8) {
        throw SpecError("scene must be at least 8x8");
    }
    if (spec.fence == FenceLabel::unknown) {
        throw SpecError("scene fence type must be single or double");
    }
    if (spec.wire_rows < 1 || spec.post_spacing < 2 || spec.insulator_count < 0) {
        throw SpecError("invalid fence geometry");
    }
    Rng rng(spec.seed);
    const int W = spec.width;
    const int H = spec.height;
    const bool still = spec.source == Source::still;

    Image img(static_cast<std::size_t>(W), static_cast<std::size_t>(H), 3);
    std::array<double, 3> bg{};
    if (spec.background) {
        bg = *spec.background;
    } else {
        bg = {0.25 + 0.2 * rng.uniform(), 0.35 + 0.2 * rng.uniform(), 0.15 + 0.15 * rng.uniform()};
    }
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        img.data[i] = bg[i % 3] + spec.texture * (rng.uniform() - 0.5);
    }

    // Fence lines: horizontal wire bands.
    const int ins_h = spec.insulator_h;
    const int spacing = std::max(ins_h + 2, H / (still ? 20 : 32));
    const int half_band = spacing * (spec.wire_rows - 1) / 2;
    std::vector<int> centers;
    if (spec.fence == FenceLabel::single) {
        centers.push_back(static_cast<int>(H * rng.uniform(0.35, 0.65)));
    } else {
        const int a = static_cast<int>(H * rng.uniform(0.22, 0.32));
        const int b = a + static_cast<int>(H * rng.uniform(0.35, 0.45));
        centers = {a, b};
    }
    const std::array<double, 3> wire{0.08, 0.08, 0.08};
    const std::array<double, 3> post{0.35, 0.24, 0.14};
    const int post_w = std::max(2, W / (still ? 64 : 96));
    const int margin = std::max(spec.insulator_w, post_w) + 1;
    std::vector<int> posts;
    for (int x = margin + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.post_spacing / 2 + 1)));
         x < W - margin; x += spec.post_spacing) {
        posts.push_back(x);
    }
    Painter paint{img};
    std::vector<std::pair<int, int>> crossings;
    for (int yc : centers) {
        const int top = yc - half_band - ins_h;
        const int bottom = yc + half_band + ins_h;
        for (int px : posts) {
            paint.fill_rect(px - post_w / 2, top, px - post_w / 2 + post_w, bottom + 1, post);
        }
        for (int r = 0; r < spec.wire_rows; ++r) {
            const int wy = yc - half_band + r * spacing;
            paint.fill_rect(0, wy, W, wy + 1, wire);
            for (int px : posts) {
                crossings.emplace_back(px, wy);
            }
        }
    }
    // Photometric jitter on everything but the insulators.
    std::array<double, 3> mult{};
    for (double& m : mult) {
        m = 1.0 + spec.jitter * (2.0 * rng.uniform() - 1.0);
    }
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        img.data[i] = std::clamp(img.data[i] * mult[i % 3], 0.0, 1.0);
    }

    std::vector<InsulatorSpec> insulators = spec.insulators;
    if (insulators.empty() && spec.insulator_count > 0) {
        if (static_cast<std::size_t>(spec.insulator_count) > crossings.size()) {
            throw SpecError("scene has " + std::to_string(crossings.size()) + " post/wire crossings, " +
                            std::to_string(spec.insulator_count) + " insulators requested");
        }
        rng.shuffle(crossings.begin(), crossings.end());
        for (int i = 0; i < spec.insulator_count; ++i) {
            InsulatorSpec s;
            s.shape = rng.bernoulli(0.5) ? InsulatorSpec::Shape::rect : InsulatorSpec::Shape::octagon;
            s.w = spec.insulator_w;
            s.h = ins_h;
            s.x = crossings[static_cast<std::size_t>(i)].first - s.w / 2;
            s.y = crossings[static_cast<std::size_t>(i)].second - s.h / 2;
            insulators.push_back(s);
        }
    }

    Scene scene;
    scene.image.pixels = std::move(img);
    scene.image.source = spec.source;
    scene.image.fence = spec.fence;
    scene.truth.fence = spec.fence;
    scene.truth.fence_rows = centers;
    scene.truth.mask = BinaryMask(static_cast<std::size_t>(W), static_cast<std::size_t>(H), 1);
    const std::array<double, 3> insulator_rgb{0.96, 0.95, 0.9};
    for (const InsulatorSpec& s : insulators) {
        if (s.w < 1 || s.h < 1 || s.x < 0 || s.y < 0 || s.x + s.w > W || s.y + s.h > H) {
            throw SpecError("insulator at (" + std::to_string(s.x) + "," + std::to_string(s.y) + ") size " +
                            std::to_string(s.w) + "x" + std::to_string(s.h) + " leaves the " + std::to_string(W) +
                            "x" + std::to_string(H) + " image");
        }
        Region r = region_of(s);
        BinaryMask m = import_annotations({r}, static_cast<std::size_t>(W), static_cast<std::size_t>(H));
        for (std::size_t p = 0; p < m.data.size(); ++p) {
            if (m.data[p]) {
                scene.truth.mask.data[p] = 1;
                for (std::size_t c = 0; c < 3; ++c) {
                    scene.image.pixels.data[p * 3 + c] = insulator_rgb[c];
                }
            }
        }
        scene.truth.boxes.push_back(tight_box(m));
        scene.truth.individual.push_back(std::move(m));
        scene.truth.regions.push_back(std::move(r));
    }
    // Quantize to 8 bits so the in-memory scene equals its PNG.
    for (double& v : scene.image.pixels.data) {
        v = std::round(v * 255.0) / 255.0;
    }
    return scene;
}

namespace {

std::pair<int, int> class_counts(const DatasetOptions& o) {
    if (o.n < 2) {
        throw ConfigError("dataset needs n >= 2");
    }
    if (o.balance) {
        const auto [s, d] = *o.balance;
        if (s < 0 || d < 0 || s + d != o.n) {
            throw ConfigError("balance " + std::to_string(s) + "," + std::to_string(d) + " does not add up to n=" +
                              std::to_string(o.n));
        }
        return *o.balance;
    }
    return {o.n - o.n / 2, o.n / 2};
}

std::string scene_id(const DatasetOptions& o, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%04d", to_string(o.source).c_str(), i);
    return buf;
}

}  // namespace

std::vector<Scene> gen_scenes(const DatasetOptions& options) {
    const auto [singles, doubles] = class_counts(options);
    (void)doubles;
    std::vector<Scene> out;
    out.reserve(static_cast<std::size_t>(options.n));
    for (int i = 0; i < options.n; ++i) {
        SceneSpec spec;
        spec.fence = i < singles ? FenceLabel::single : FenceLabel::double_fence;
        spec.source = options.source;
        spec.width = options.width;
        spec.height = options.height;
        // Narrow scenes need tighter posts to fit the insulators.
        spec.post_spacing = std::clamp(options.width / 5, 8, 48);
        spec.seed = Rng::derive(options.seed, static_cast<std::uint64_t>(i));
        Scene s = gen_scene(spec);
        s.image.id = scene_id(options, i);
        out.push_back(std::move(s));
    }
    return out;
}

DatasetManifest gen_dataset(const std::filesystem::path& out, const DatasetOptions& options) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out / "images", ec);
    if (!ec) fs::create_directories(out / "masks", ec);
    if (ec) {
        throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
    }
    DatasetManifest manifest;
    AnnotationDoc doc;
    for (const Scene& s : gen_scenes(options)) {
        const std::string img_rel = "images/" + s.image.id + ".png";
        const std::string mask_rel = "masks/" + s.image.id + ".png";
        write_png(out / img_rel, s.image.pixels);
        write_mask(out / mask_rel, s.truth.mask);
        doc.images[s.image.id] = s.truth.regions;
        manifest.entries.push_back({s.image.id, img_rel, s.image.source, s.image.fence, Split::none, mask_rel});
    }
    write_file_atomic(out / "annotations.json", to_json(doc).dump(2) + "\n");
    write_manifest(out / "manifest.json", manifest);
    return manifest;
}

BlobScene gen_blob_mask(Rng& rng, std::size_t width, std::size_t height, int count, int min_gap) {
    BlobScene out;
    out.mask = BinaryMask(width, height, 1);
    struct Box {
        long x0, y0, x1, y1;
    };
    std::vector<Box> placed;
    for (int i = 0; i < count; ++i) {
        for (int attempt = 0; attempt < 200; ++attempt) {
            const bool diamond = rng.bernoulli(0.4);
            const long w = diamond ? 2 * rng.range(1, 3) + 1 : rng.range(1, 7);
            const long h = diamond ? w : rng.range(1, 7);
            if (static_cast<std::size_t>(w) > width || static_cast<std::size_t>(h) > height) continue;
            const long x = static_cast<long>(rng.below(width - static_cast<std::size_t>(w) + 1));
            const long y = static_cast<long>(rng.below(height - static_cast<std::size_t>(h) + 1));
            const Box b{x, y, x + w - 1, y + h - 1};
            bool ok = true;
            for (const Box& o : placed) {
                const long gx = std::max(o.x0 - b.x1, b.x0 - o.x1) - 1;
                const long gy = std::max(o.y0 - b.y1, b.y0 - o.y1) - 1;
                if (std::max(gx, gy) <= min_gap) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            placed.push_back(b);
            BinaryMask m(width, height, 1);
            const long r = w / 2;
            for (long yy = b.y0; yy <= b.y1; ++yy)
                for (long xx = b.x0; xx <= b.x1; ++xx)
                    if (!diamond || std::abs(xx - (x + r)) + std::abs(yy - (y + r)) <= r)
                        m.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy)) = 1;
            for (std::size_t p = 0; p < m.data.size(); ++p) out.mask.data[p] |= m.data[p];
            out.blobs.push_back(std::move(m));
            break;
        }
    }
    return out;
}

MetaTask gen_meta_task(Rng& rng, const EpisodeSpec& spec) {
    if (spec.shots < 1 || spec.queries < 1 || spec.image_size < 4) {
        throw ConfigError("episode needs shots >= 1, queries >= 1, image_size >= 4");
    }
    // Shared look for the whole episode.
    const double level = rng.uniform(0.3, 0.8);
    const std::array<double, 3> bg{level, level * rng.uniform(0.8, 1.2), level * rng.uniform(0.8, 1.2)};
    const double texture = rng.uniform(0.05, 0.3);
    const bool swap = spec.permute_labels && rng.bernoulli(0.5);
    const int render = std::max(32, spec.image_size);

    auto make = [&](FenceLabel fence) {
        SceneSpec s;
        s.fence = fence;
        s.source = Source::drone;
        s.width = render;
        s.height = render;
        s.wire_rows = 2;
        s.post_spacing = render / 3;
        s.insulator_count = 0;
        s.insulator_h = 2;
        s.insulator_w = 2;
        s.background = bg;
        s.texture = texture;
        s.seed = rng.next_u64();
        const Scene scene = gen_scene(s);
        Image gray(scene.image.pixels.width, scene.image.pixels.height, 1);
        for (std::size_t p = 0; p < gray.data.size(); ++p) {
            gray.data[p] = (scene.image.pixels.data[p * 3] + scene.image.pixels.data[p * 3 + 1] +
                            scene.image.pixels.data[p * 3 + 2]) / 3.0;
        }
        const Image small = resize_bilinear(gray, static_cast<std::size_t>(spec.image_size),
                                            static_cast<std::size_t>(spec.image_size));
        const std::size_t cls = (fence == FenceLabel::double_fence) != swap ? 1 : 0;
        Tensor target(Shape{2}, 0.0);
        target.mutable_data()[cls] = 1.0;
        return Sample{to_tensor(small), target};
    };
    MetaTask task;
    for (int i = 0; i < spec.shots; ++i) {
        task.support.push_back(make(FenceLabel::single));
        task.support.push_back(make(FenceLabel::double_fence));
    }
    for (int i = 0; i < spec.queries; ++i) {
        task.query.push_back(make(FenceLabel::single));
        task.query.push_back(make(FenceLabel::double_fence));
    }
    return task;
}

}  // namespace fencepipe
