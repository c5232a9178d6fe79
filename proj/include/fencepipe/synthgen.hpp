#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "fencepipe/datapipe.hpp"
#include "fencepipe/detect.hpp"
#include "fencepipe/meta.hpp"

namespace fencepipe {

struct InsulatorSpec {
    enum class Shape { rect, octagon };
    Shape shape = Shape::rect;
    // Integer pixel box [x, x + w) x [y, y + h).
    int x = 0, y = 0, w = 6, h = 4;
};

struct SceneSpec {
    FenceLabel fence = FenceLabel::single;
    Source source = Source::drone;
    int width = 256;
    int height = 256;
    int wire_rows = 3;
    int post_spacing = 48;
    // Random layout: this many insulators at distinct post/wire crossings.
    int insulator_count = 4;
    int insulator_w = 6;
    int insulator_h = 4;
    // Explicit layout; when non-empty it replaces the random placement.
    std::vector<InsulatorSpec> insulators;
    double texture = 0.15;  // background noise amplitude
    // Background RGB; drawn from the seed when absent.
    std::optional<std::array<double, 3>> background;
    double jitter = 0.05;   // per-channel photometric multiplier spread
    std::uint64_t seed = 0;
};

struct GroundTruth {
    FenceLabel fence = FenceLabel::unknown;
    BinaryMask mask;
    std::vector<BinaryMask> individual;  // one mask per insulator
    std::vector<BBox> boxes;             // tight, pad 0
    std::vector<Region> regions;         // annotation form of each insulator
    std::vector<int> fence_rows;         // center row of each fence line
};

struct Scene {
    SceneImage image;
    GroundTruth truth;
};

/// Deterministic render. Throws SpecError when an insulator leaves the image
/// or the random layout has too few crossings.
Scene gen_scene(const SceneSpec& spec);

struct DatasetOptions {
    int n = 52;
    // Images per class {single, double}; empty means an even split (single
    // gets the odd one).
    std::optional<std::pair<int, int>> balance;
    std::uint64_t seed = 0;
    Source source = Source::drone;
    int width = 256;
    int height = 256;
};

/// Post spacing follows the width (width / 5, clamped to [8, 48]).
/// Writes images/*.png, masks/*.png, annotations.json and manifest.json
/// under `out`. Scene i is rendered from Rng::derive(seed, i).
DatasetManifest gen_dataset(const std::filesystem::path& out, const DatasetOptions& options);

/// In-memory counterpart of gen_dataset.
std::vector<Scene> gen_scenes(const DatasetOptions& options);

/// Random mask of `count` axis-aligned rectangles and diamonds whose pairwise
/// gap exceeds `min_gap` pixels.
struct BlobScene {
    BinaryMask mask;
    std::vector<BinaryMask> blobs;
};
BlobScene gen_blob_mask(Rng& rng, std::size_t width, std::size_t height, int count, int min_gap);

struct EpisodeSpec {
    int image_size = 16;
    int shots = 5;       // support samples per class
    int queries = 10;    // query samples per class
    bool permute_labels = false;
};

/// 2-way episode: single vs double fence scenes sharing one randomly drawn
/// texture/palette. With permute_labels the class-to-output assignment is
/// drawn per episode. Inputs are [size, size, 1] gray images.
MetaTask gen_meta_task(Rng& rng, const EpisodeSpec& spec);

}  // namespace fencepipe
