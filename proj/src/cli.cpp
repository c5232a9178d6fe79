#include "fencepipe/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fencepipe/datapipe.hpp"
#include "fencepipe/detect.hpp"
#include "fencepipe/error.hpp"
#include "fencepipe/io.hpp"
#include "fencepipe/metrics.hpp"
#include "fencepipe/models.hpp"
#include "fencepipe/optim.hpp"
#include "fencepipe/synthgen.hpp"
#include "fencepipe/weights.hpp"

namespace fencepipe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Classification outputs are indexed in this order everywhere.
const std::vector<std::string> kClassNames = {"double", "single"};

struct Outcome {
    json result;
    int code = kExitOk;
};

using Handler = std::function<Outcome()>;

std::optional<std::uint64_t> env_seed() {
    const char* raw = std::getenv("FENCEPIPE_SEED");
    if (raw == nullptr || *raw == '\0') {
        return std::nullopt;
    }
    const std::string s(raw);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw ConfigError("FENCEPIPE_SEED must be a non-negative integer, got '" + s + "'");
    }
    return v;
}

// Explicit --seed > FENCEPIPE_SEED > built-in default.
struct SeedOption {
    std::uint64_t value = 0;
    CLI::Option* opt = nullptr;

    void add(CLI::App* app, std::uint64_t fallback) {
        value = fallback;
        opt = app->add_option("--seed", value, "RNG seed (FENCEPIPE_SEED overrides the default)");
    }
    std::uint64_t resolve(const std::optional<std::uint64_t>& env) const {
        return opt->count() == 0 && env ? *env : value;
    }
};

std::string num(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

fs::path manifest_path(const std::string& data) {
    const fs::path p(data);
    return fs::is_directory(p) ? p / "manifest.json" : p;
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

Image to_channels(const Image& img, std::size_t channels) {
    if (img.channels == channels) {
        return img;
    }
    Image out(img.width, img.height, channels);
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        if (channels == 1) {
            double s = 0.0;
            for (std::size_t c = 0; c < img.channels; ++c) s += img.data[i * img.channels + c];
            out.data[i] = s / static_cast<double>(img.channels);
        } else if (img.channels == 1) {
            for (std::size_t c = 0; c < channels; ++c) out.data[i * channels + c] = img.data[i];
        } else {
            throw DataError("cannot convert a " + std::to_string(img.channels) + "-channel image to " +
                            std::to_string(channels) + " channels");
        }
    }
    return out;
}

json to_json(const LogRow& r) {
    return {{"epoch", r.epoch}, {"split", r.split}, {"loss", r.loss},
            {"miou", r.miou},   {"accuracy", r.accuracy}, {"dice", r.dice}};
}

json to_json(const AugmentLog& log) {
    json j = {{"hflip", log.hflip}, {"vflip", log.vflip}, {"crop", nullptr}, {"affine", nullptr},
              {"blur_sigma", nullptr}, {"noise_std", nullptr}, {"brightness", nullptr}};
    if (log.crop) {
        j["crop"] = {{"x", log.crop->x}, {"y", log.crop->y}, {"width", log.crop->width}, {"height", log.crop->height}};
    }
    if (log.affine) {
        const Affine& a = *log.affine;
        j["affine"] = {{"scale", a.scale}, {"tx", a.tx}, {"ty", a.ty}, {"rotate_deg", a.rotate_deg},
                       {"shear_deg", a.shear_deg}};
    }
    if (log.blur_sigma) j["blur_sigma"] = *log.blur_sigma;
    if (log.noise_std) j["noise_std"] = *log.noise_std;
    if (log.brightness) j["brightness"] = *log.brightness;
    return j;
}

// ------------------------------------------------------------ run configs

struct SegData {
    std::size_t tile = 64;
    bool keep_empty = false;
    std::size_t max_tiles = 0;  // 0 = no cap
};

// What a training run directory records about itself (config.json).
struct RunInfo {
    std::string task = "segmentation";
    std::string data;
    std::size_t batch_size = 8;
    LossKind loss = LossKind::dice;
    SegData seg;
    json config;
};

RunInfo read_run_info(const fs::path& dir) {
    RunInfo info;
    const fs::path path = dir / "config.json";
    if (!fs::exists(path)) {
        return info;
    }
    info.config = read_json(path);
    try {
        info.task = info.config.value("task", info.task);
        info.data = info.config.value("data", info.data);
        info.batch_size = info.config.value("batch_size", info.batch_size);
        info.loss = parse_loss_kind(info.config.value("loss", to_string(info.loss)));
        info.seg.tile = info.config.value("tile", info.seg.tile);
        info.seg.keep_empty = info.config.value("keep_empty", info.seg.keep_empty);
        info.seg.max_tiles = info.config.value("max_tiles", info.seg.max_tiles);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return info;
}

std::vector<ManifestEntry> split_entries(const DatasetManifest& m, Split split) {
    std::vector<ManifestEntry> out;
    for (const auto& e : m.entries) {
        if (e.split == split) out.push_back(e);
    }
    return out;
}

std::vector<Sample> load_seg_samples(const fs::path& manifest, Split split, const SegData& opts,
                                     std::size_t in_channels) {
    const DatasetManifest m = read_manifest(manifest);
    const fs::path base = manifest.parent_path();
    std::vector<Sample> samples;
    for (const auto& e : split_entries(m, split)) {
        if (!e.mask_path) {
            throw DataError("manifest entry '" + e.id + "' has no mask");
        }
        const Image img = to_channels(read_image(resolve(base, e.path)), in_channels);
        const BinaryMask mask = read_mask(resolve(base, *e.mask_path));
        if (img.width != mask.width || img.height != mask.height) {
            throw DataError("image and mask of '" + e.id + "' differ in size");
        }
        const auto [tiles, grid] = slice_image(img, opts.tile);
        const auto [masks, mgrid] = slice_image(mask, opts.tile);
        std::vector<std::size_t> keep;
        if (opts.keep_empty) {
            for (std::size_t i = 0; i < tiles.size(); ++i) keep.push_back(i);
        } else {
            keep = filter_positive(masks).kept;
        }
        for (std::size_t i : keep) {
            if (opts.max_tiles != 0 && samples.size() >= opts.max_tiles) {
                return samples;
            }
            samples.push_back({to_tensor(tiles[i]), to_tensor(masks[i])});
        }
    }
    return samples;
}

int class_index(FenceLabel f) {
    switch (f) {
        case FenceLabel::double_fence: return 0;
        case FenceLabel::single: return 1;
        default: return -1;
    }
}

std::vector<Sample> load_cls_samples(const fs::path& manifest, Split split, const ClassifierConfig& cfg) {
    const DatasetManifest m = read_manifest(manifest);
    const fs::path base = manifest.parent_path();
    std::vector<Sample> samples;
    const auto size = static_cast<std::size_t>(cfg.input_size);
    for (const auto& e : split_entries(m, split)) {
        const int k = class_index(e.fence);
        if (k < 0) {
            throw DataError("manifest entry '" + e.id + "' has no fence label");
        }
        const Image img = to_channels(read_image(resolve(base, e.path)), static_cast<std::size_t>(cfg.in_channels));
        std::vector<double> onehot(kClassNames.size(), 0.0);
        onehot[static_cast<std::size_t>(k)] = 1.0;
        samples.push_back({to_tensor(resize_bilinear(img, size, size)), Tensor(Shape{onehot.size()}, onehot)});
    }
    return samples;
}

std::vector<Sample> load_samples(const ModelGraph& model, const fs::path& manifest, Split split,
                                 const RunInfo& info) {
    if (const auto* u = std::get_if<UNetConfig>(&model.config)) {
        return load_seg_samples(manifest, split, info.seg, static_cast<std::size_t>(u->in_channels));
    }
    if (const auto* c = std::get_if<ClassifierConfig>(&model.config)) {
        return load_cls_samples(manifest, split, *c);
    }
    throw ConfigError("model has no recorded architecture");
}

void check_tile(const UNetConfig& cfg, std::size_t tile) {
    const std::size_t step = std::size_t{1} << cfg.depth;
    if (tile == 0 || tile % step != 0) {
        throw ConfigError("tile size " + std::to_string(tile) + " must be a positive multiple of " +
                          std::to_string(step) + " for a depth-" + std::to_string(cfg.depth) + " U-Net");
    }
}

// Per-tile binary predictions for a whole image.
std::vector<BinaryMask> predict_tiles(const ModelGraph& model, const Image& image, std::size_t tile, double threshold,
                                      TileGrid& grid) {
    const auto* u = std::get_if<UNetConfig>(&model.config);
    if (u == nullptr) {
        throw ConfigError("detection needs a segmentation (unet) model");
    }
    check_tile(*u, tile);
    const Image img = to_channels(image, static_cast<std::size_t>(u->in_channels));
    auto [tiles, g] = slice_image(img, tile);
    grid = g;
    NoGradGuard guard;
    std::vector<BinaryMask> masks;
    masks.reserve(tiles.size());
    for (const Image& t : tiles) {
        masks.push_back(binarize(image_from_tensor(forward(model, to_tensor(t))), threshold));
    }
    return masks;
}

// --------------------------------------------------------------- training

json train_and_save(ModelGraph& model, const SplitData& data, TrainOptions options, const fs::path& out,
                    const json& config) {
    const std::string header = "# " + config.dump() + "\n";
    const fs::path weights = out / "weights.bin";
    const fs::path log_path = out / "train_log.csv";
    std::vector<LogRow> rows;
    auto write_log = [&] {
        TrainingLog log{rows};
        write_file_atomic(log_path, header + log.to_csv());
    };
    options.on_epoch_end = [&](const ModelGraph& m, int, std::span<const LogRow> epoch_rows) {
        rows.insert(rows.end(), epoch_rows.begin(), epoch_rows.end());
        save_weights(weights, m);
        write_log();
    };
    save_weights(out / "init.bin", model);
    train(model, data, options);
    save_weights(weights, model);
    write_log();
    json last = json::array();
    for (const LogRow& r : rows) {
        if (r.epoch == model.epoch) last.push_back(to_json(r));
    }
    return {{"command", config.at("command")},
            {"status", "ok"},
            {"config", config},
            {"samples", {{"train", data.train.size()}, {"val", data.val.size()}}},
            {"epochs_run", model.epoch},
            {"final", last},
            {"artifacts",
             {(out / "config.json").string(), (out / "init.bin").string(), weights.string(), log_path.string()}}};
}

// --------------------------------------------------------------- commands

Handler add_gen_synth(CLI::App& app, const std::optional<std::uint64_t>& env) {
    auto* sub = app.add_subcommand("gen-synth", "Render a labelled synthetic fence dataset");
    struct Args {
        DatasetOptions opts;
        std::vector<int> balance;
        std::string source, out;
        SeedOption seed;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--n", a->opts.n, "number of scenes")->capture_default_str();
    sub->add_option("--balance", a->balance, "images per class: single,double")->delimiter(',')->expected(2);
    sub->add_option("--source", a->source, "drone|still")->check(CLI::IsMember({"drone", "still"}))->default_val("drone");
    sub->add_option("--width", a->opts.width)->capture_default_str();
    sub->add_option("--height", a->opts.height)->capture_default_str();
    sub->add_option("--out", a->out, "output directory")->required();
    a->seed.add(sub, 0);
    return [a, &env] {
        DatasetOptions opts = a->opts;
        const std::string& source = a->source;
        const std::string& out = a->out;
        opts.seed = a->seed.resolve(env);
        opts.source = parse_source(source);
        if (!a->balance.empty()) opts.balance = std::make_pair(a->balance[0], a->balance[1]);
        json config = {{"command", "gen-synth"}, {"n", opts.n},         {"seed", opts.seed},
                       {"source", source},       {"width", opts.width}, {"height", opts.height},
                       {"balance", opts.balance ? json{opts.balance->first, opts.balance->second} : json(nullptr)}};
        const DatasetManifest m = gen_dataset(out, opts);
        std::map<std::string, int> counts;
        for (const auto& e : m.entries) ++counts[to_string(e.fence)];
        json result = {{"command", "gen-synth"}, {"status", "ok"}, {"config", config},
                       {"images", m.entries.size()}, {"classes", counts}};
        write_json(fs::path(out) / "config.json", config);
        return Outcome{result};
    };
}

Handler add_slice(CLI::App& app) {
    auto* sub = app.add_subcommand("slice", "Cut an image (and mask) into square tiles");
    struct Args {
        std::string image, mask, out;
        std::size_t tile = 512, min_positive = 1;
        bool keep_all = false;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--image", a->image)->required();
    sub->add_option("--mask", a->mask, "mask; tiles without insulator pixels are dropped");
    sub->add_option("--tile", a->tile)->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--min-positive", a->min_positive)->capture_default_str();
    sub->add_flag("--keep-all", a->keep_all, "keep tiles without positives");
    sub->add_option("--out", a->out)->required();
    return [a] {
        const Image img = read_image(a->image);
        const std::string stem = fs::path(a->image).stem().string();
        auto [tiles, grid] = slice_image(img, a->tile);
        std::vector<BinaryMask> masks;
        std::vector<bool> keep(tiles.size(), true);
        std::size_t discarded = 0;
        if (!a->mask.empty()) {
            const BinaryMask mask = read_mask(a->mask);
            if (mask.width != img.width || mask.height != img.height) {
                throw DataError("image and mask differ in size");
            }
            masks = slice_image(mask, a->tile).first;
            if (!a->keep_all) {
                std::fill(keep.begin(), keep.end(), false);
                const FilterResult f = filter_positive(masks, a->min_positive);
                for (std::size_t i : f.kept) keep[i] = true;
                discarded = f.discarded;
            }
        }
        const json config = {{"command", "slice"}, {"image", a->image},        {"mask", a->mask},
                             {"tile", a->tile},    {"min_positive", a->min_positive}, {"keep_all", a->keep_all}};
        const fs::path out(a->out);
        json listing = json::array();
        for (std::size_t i = 0; i < tiles.size(); ++i) {
            const auto [x, y] = grid.origin(i);
            char name[64];
            std::snprintf(name, sizeof name, "_%04zu.png", i);
            json t = {{"index", i}, {"row", i / grid.cols}, {"col", i % grid.cols}, {"x", x}, {"y", y}, {"kept", static_cast<bool>(keep[i])}};
            if (!masks.empty()) t["positive"] = count_positive(masks[i]);
            if (keep[i]) {
                const fs::path tile_path = out / "tiles" / (stem + name);
                write_image(tile_path, tiles[i]);
                t["path"] = tile_path.string();
                if (!masks.empty()) {
                    const fs::path mask_path = out / "masks" / (stem + name);
                    write_mask(mask_path, masks[i]);
                    t["mask_path"] = mask_path.string();
                }
            }
            listing.push_back(std::move(t));
        }
        json grid_json = {{"tile_size", grid.tile_size}, {"rows", grid.rows},           {"cols", grid.cols},
                          {"width", grid.width},         {"height", grid.height},       {"pad_right", grid.pad_right},
                          {"pad_bottom", grid.pad_bottom}};
        json result = {{"command", "slice"}, {"status", "ok"},   {"config", config},
                       {"grid", grid_json},  {"tiles", listing}, {"kept", tiles.size() - discarded},
                       {"discarded", discarded}};
        write_json(out / "tiles.json", result);
        return Outcome{result};
    };
}

Handler add_import_annotations(CLI::App& app, std::ostream& err) {
    auto* sub = app.add_subcommand("import-annotations", "Rasterize VIA-style region annotations to a mask");
    struct Args {
        std::string annotations, id, image, out;
        std::size_t width = 0, height = 0;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--annotations", a->annotations)->required();
    sub->add_option("--id", a->id, "image key (optional when the file has one image)");
    auto* img_opt = sub->add_option("--image", a->image, "take the mask size from this image");
    auto* w_opt = sub->add_option("--width", a->width);
    auto* h_opt = sub->add_option("--height", a->height);
    img_opt->excludes(w_opt)->excludes(h_opt);
    w_opt->needs(h_opt);
    h_opt->needs(w_opt);
    sub->add_option("--out", a->out, "mask PNG")->required();
    return [a, &err] {
        const AnnotationDoc doc = parse_annotations(read_file(a->annotations));
        std::string id = a->id;
        if (id.empty()) {
            if (doc.images.size() != 1) {
                throw ConfigError("--id is required: the file annotates " + std::to_string(doc.images.size()) +
                                  " images");
            }
            id = doc.images.begin()->first;
        }
        const auto it = doc.images.find(id);
        if (it == doc.images.end()) {
            throw DataError("no annotations for image '" + id + "'");
        }
        std::size_t w = a->width, h = a->height;
        if (!a->image.empty()) {
            const Image img = read_image(a->image);
            w = img.width;
            h = img.height;
        }
        if (w == 0 || h == 0) {
            throw ConfigError("give --image or a positive --width/--height");
        }
        std::vector<std::string> warnings;
        const BinaryMask mask = import_annotations(it->second, w, h, &warnings);
        for (const auto& msg : warnings) err << "warning: " << msg << "\n";
        write_mask(a->out, mask);
        const json config = {{"command", "import-annotations"}, {"annotations", a->annotations}, {"id", id},
                             {"width", w}, {"height", h}};
        return Outcome{{{"command", "import-annotations"},
                        {"status", "ok"},
                        {"config", config},
                        {"regions", it->second.size()},
                        {"positive_pixels", count_positive(mask)},
                        {"warnings", warnings},
                        {"out", a->out}}};
    };
}

Handler add_augment(CLI::App& app, const std::optional<std::uint64_t>& env) {
    auto* sub = app.add_subcommand("augment", "Apply one seeded augmentation draw");
    struct Args {
        std::string image, mask, out_image, out_mask;
        AugmentOptions opts;
        SeedOption seed;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--image", a->image)->required();
    sub->add_option("--mask", a->mask);
    sub->add_option("--out-image", a->out_image)->required();
    sub->add_option("--out-mask", a->out_mask);
    sub->add_option("--p-hflip", a->opts.p_hflip)->capture_default_str();
    sub->add_option("--p-vflip", a->opts.p_vflip)->capture_default_str();
    sub->add_option("--p-crop", a->opts.p_crop)->capture_default_str();
    sub->add_option("--p-affine", a->opts.p_affine)->capture_default_str();
    sub->add_option("--p-blur", a->opts.p_blur)->capture_default_str();
    sub->add_option("--p-noise", a->opts.p_noise)->capture_default_str();
    sub->add_option("--p-brightness", a->opts.p_brightness)->capture_default_str();
    a->seed.add(sub, 0);
    return [a, &env] {
        if (a->mask.empty() != a->out_mask.empty()) {
            throw ConfigError("--mask and --out-mask go together");
        }
        const std::uint64_t seed = a->seed.resolve(env);
        const Image img = read_image(a->image);
        std::optional<BinaryMask> mask;
        if (!a->mask.empty()) mask = read_mask(a->mask);
        const Augmented r = augment(img, mask, seed, a->opts);
        write_image(a->out_image, r.image);
        if (r.mask) write_mask(a->out_mask, *r.mask);
        const AugmentOptions& o = a->opts;
        const json config = {{"command", "augment"}, {"image", a->image}, {"mask", a->mask}, {"seed", seed},
                             {"p_hflip", o.p_hflip}, {"p_vflip", o.p_vflip}, {"p_crop", o.p_crop},
                             {"p_affine", o.p_affine}, {"p_blur", o.p_blur}, {"p_noise", o.p_noise},
                             {"p_brightness", o.p_brightness}};
        return Outcome{{{"command", "augment"}, {"status", "ok"}, {"config", config}, {"log", to_json(r.log)}}};
    };
}

Handler add_split(CLI::App& app, const std::optional<std::uint64_t>& env) {
    auto* sub = app.add_subcommand("split", "Stratified train/val/test assignment");
    struct Args {
        std::string manifest, out;
        std::vector<double> frac = {0.8, 0.1, 0.1};
        SeedOption seed;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--manifest,--data", a->manifest, "manifest file or dataset directory")->required();
    sub->add_option("--frac", a->frac, "train,val,test fractions")->delimiter(',')->expected(3)->capture_default_str();
    sub->add_option("--out", a->out, "output manifest (default: overwrite the input)");
    a->seed.add(sub, 0);
    return [a, &env] {
        const std::uint64_t seed = a->seed.resolve(env);
        const fs::path in = manifest_path(a->manifest);
        const fs::path out = a->out.empty() ? in : fs::path(a->out);
        const DatasetManifest m = split_dataset(read_manifest(in), {a->frac[0], a->frac[1], a->frac[2]}, seed);
        if (out != in && fs::absolute(out.parent_path()) != fs::absolute(in.parent_path())) {
            throw ConfigError("--out must stay next to the input manifest (entry paths are relative)");
        }
        write_manifest(out, m);
        json counts = json::object();
        for (Split s : {Split::train, Split::val, Split::test}) {
            json per = {{"total", 0}};
            for (const auto& e : m.entries) {
                if (e.split != s) continue;
                per["total"] = per["total"].get<int>() + 1;
                const std::string k = to_string(e.fence);
                per[k] = per.value(k, 0) + 1;
            }
            counts[to_string(s)] = per;
        }
        const json config = {{"command", "split"}, {"manifest", in.string()}, {"frac", a->frac}, {"seed", seed}};
        json result = {{"command", "split"}, {"status", "ok"}, {"config", config}, {"counts", counts},
                       {"out", out.string()}};
        write_json(out.parent_path() / "split.json", result);
        return Outcome{result};
    };
}

struct TrainArgs {
    std::string data, out, loss, optimizer = "adam";
    int epochs = 10;
    std::size_t batch = 8;
    double lr = 1e-3;
    SeedOption seed;
};

void add_train_options(CLI::App* sub, TrainArgs& a, const char* default_loss) {
    a.loss = default_loss;
    sub->add_option("--data", a.data, "dataset directory or manifest")->required();
    sub->add_option("--out", a.out, "run directory")->required();
    sub->add_option("--epochs", a.epochs)->capture_default_str()->check(CLI::NonNegativeNumber);
    sub->add_option("--batch", a.batch, "batch size (8 or 16)")
        ->capture_default_str()
        ->check(CLI::IsMember(std::vector<std::size_t>{8, 16}));
    sub->add_option("--lr", a.lr)->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--loss", a.loss, "cross_entropy|bce|dice|bce_dice|mse")->capture_default_str();
    sub->add_option("--optimizer", a.optimizer)->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
    a.seed.add(sub, 0);
}

TrainOptions train_options(const TrainArgs& a, std::uint64_t seed) {
    TrainOptions o;
    o.loss = parse_loss_kind(a.loss);
    o.epochs = a.epochs;
    o.batch_size = a.batch;
    o.seed = seed;
    o.optimizer = a.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
    o.lr = a.lr;
    return o;
}

json train_config(const char* command, const char* task, const TrainArgs& a, std::uint64_t seed,
                  const ModelGraph& model) {
    return {{"command", command},      {"task", task},         {"data", a.data},       {"epochs", a.epochs},
            {"batch_size", a.batch},   {"lr", a.lr},           {"loss", a.loss},       {"optimizer", a.optimizer},
            {"seed", seed},            {"model", fencepipe::to_json(model.config)}};
}

Handler add_train_seg(CLI::App& app, const std::optional<std::uint64_t>& env) {
    auto* sub = app.add_subcommand("train-seg", "Train the U-Net on tiled image/mask pairs");
    struct Args {
        TrainArgs t;
        SegData seg;
        int depth = 3, filters = 8;
    };
    auto a = std::make_shared<Args>();
    add_train_options(sub, a->t, "dice");
    sub->add_option("--tile", a->seg.tile)->capture_default_str();
    sub->add_flag("--keep-empty", a->seg.keep_empty, "train on tiles without insulators too");
    sub->add_option("--max-tiles", a->seg.max_tiles, "cap per split (0 = all)")->capture_default_str();
    sub->add_option("--depth", a->depth)->capture_default_str()->check(CLI::Range(1, 6));
    sub->add_option("--filters", a->filters)->capture_default_str()->check(CLI::Range(1, 256));
    return [a, &env] {
        const std::uint64_t seed = a->t.seed.resolve(env);
        UNetConfig cfg;
        cfg.depth = a->depth;
        cfg.base_filters = a->filters;
        check_tile(cfg, a->seg.tile);
        const TrainOptions options = train_options(a->t, seed);
        ModelGraph model = build_unet(cfg, seed);
        json config = train_config("train-seg", "segmentation", a->t, seed, model);
        config["tile"] = a->seg.tile;
        config["keep_empty"] = a->seg.keep_empty;
        config["max_tiles"] = a->seg.max_tiles;
        const fs::path manifest = manifest_path(a->t.data);
        SplitData data;
        data.train = load_seg_samples(manifest, Split::train, a->seg, 3);
        data.val = load_seg_samples(manifest, Split::val, a->seg, 3);
        const fs::path out(a->t.out);
        write_json(out / "config.json", config);
        return Outcome{train_and_save(model, data, options, out, config)};
    };
}

Handler add_train_cls(CLI::App& app, const std::optional<std::uint64_t>& env) {
    auto* sub = app.add_subcommand("train-cls", "Train a single/double fence classifier");
    struct Args {
        TrainArgs t;
        std::string kind = "residual", init_weights;
        int size = 64, blocks = 3, filters = 8;
        bool freeze_backbone = false;
    };
    auto a = std::make_shared<Args>();
    add_train_options(sub, a->t, "cross_entropy");
    auto* kind = sub->add_option("--kind", a->kind)->check(CLI::IsMember({"cnn", "residual"}))->capture_default_str();
    auto* size = sub->add_option("--size", a->size, "input side length")->capture_default_str()->check(CLI::Range(4, 4096));
    auto* blocks = sub->add_option("--blocks", a->blocks)->capture_default_str()->check(CLI::Range(1, 8));
    auto* filters = sub->add_option("--filters", a->filters)->capture_default_str()->check(CLI::Range(1, 256));
    auto* init = sub->add_option("--init-weights", a->init_weights, "start from these weights (architecture included)");
    init->excludes(kind)->excludes(size)->excludes(blocks)->excludes(filters);
    sub->add_flag("--freeze-backbone", a->freeze_backbone, "train only the dense head");
    return [a, &env] {
        const std::uint64_t seed = a->t.seed.resolve(env);
        const TrainOptions options = train_options(a->t, seed);
        ModelGraph model;
        if (!a->init_weights.empty()) {
            model = load_weights(a->init_weights);
            if (!std::holds_alternative<ClassifierConfig>(model.config)) {
                throw ConfigError("--init-weights must hold a classifier");
            }
            model.epoch = 0;
        } else {
            ClassifierConfig cfg;
            cfg.kind = a->kind == "cnn" ? ClassifierKind::cnn : ClassifierKind::residual;
            cfg.input_size = a->size;
            cfg.blocks = a->blocks;
            cfg.base_filters = a->filters;
            model = build_classifier(cfg, seed);
        }
        if (a->freeze_backbone) model.freeze_all_except("head");
        json config = train_config("train-cls", "classification", a->t, seed, model);
        config["init_weights"] = a->init_weights;
        config["freeze_backbone"] = a->freeze_backbone;
        config["classes"] = kClassNames;
        const fs::path manifest = manifest_path(a->t.data);
        const auto& cfg = std::get<ClassifierConfig>(model.config);
        SplitData data;
        data.train = load_cls_samples(manifest, Split::train, cfg);
        data.val = load_cls_samples(manifest, Split::val, cfg);
        const fs::path out(a->t.out);
        write_json(out / "config.json", config);
        return Outcome{train_and_save(model, data, options, out, config)};
    };
}

json split_scores(const Evaluation& ev, bool rounded) {
    auto r = [&](double v) { return rounded ? round4(v) : v; };
    return {{"loss", r(ev.loss)}, {"mean_iou", r(ev.miou)}, {"accuracy", r(ev.accuracy)}, {"dice_coef", r(ev.dice)}};
}

Handler add_eval(CLI::App& app) {
    auto* sub = app.add_subcommand("eval", "Score a confusion matrix or a trained model");
    struct Args {
        std::vector<std::size_t> confusion;
        std::vector<std::string> classes;
        int decimals = 2;
        std::string weights, data, split = "test";
        double threshold = 0.5;
        std::optional<std::size_t> tile;
    };
    auto a = std::make_shared<Args>();
    auto* conf = sub->add_option("--confusion", a->confusion, "row-major counts, actual rows")->delimiter(',');
    sub->add_option("--classes", a->classes, "class names (default double,single for 2x2)")->delimiter(',');
    sub->add_option("--decimals", a->decimals)->capture_default_str()->check(CLI::Range(0, 12));
    auto* weights = sub->add_option("--weights", a->weights);
    sub->add_option("--data", a->data, "dataset (default: the run's data)");
    sub->add_option("--split", a->split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    sub->add_option("--threshold", a->threshold)->capture_default_str();
    sub->add_option("--tile", a->tile, "tile size (default: the run's)");
    conf->excludes(weights);
    return [a] {
        if (!a->confusion.empty()) {
            const auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(a->confusion.size()))));
            if (n * n != a->confusion.size() || n < 2) {
                throw ConfigError("--confusion needs n*n counts with n >= 2");
            }
            std::vector<std::string> names = a->classes;
            if (names.empty()) {
                if (n == 2) {
                    names = kClassNames;
                } else {
                    for (std::size_t i = 0; i < n; ++i) names.push_back("class" + std::to_string(i));
                }
            }
            if (names.size() != n) {
                throw ConfigError("--classes needs " + std::to_string(n) + " names");
            }
            const ConfusionMatrix cm = confusion_from_counts(a->confusion, names);
            const json config = {{"command", "eval"}, {"confusion", a->confusion}, {"classes", names},
                                 {"decimals", a->decimals}};
            return Outcome{{{"command", "eval"},
                            {"status", "ok"},
                            {"config", config},
                            {"confusion", fencepipe::to_json(cm)},
                            {"report", fencepipe::to_json(class_report(cm), a->decimals)}}};
        }
        if (a->weights.empty()) {
            throw ConfigError("give --confusion or --weights");
        }
        const ModelGraph model = load_weights(a->weights);
        RunInfo info = read_run_info(fs::path(a->weights).parent_path());
        if (a->tile) info.seg.tile = *a->tile;
        if (!a->data.empty()) info.data = a->data;
        if (info.data.empty()) {
            throw ConfigError("--data is required when the weights have no run config");
        }
        const bool seg = std::holds_alternative<UNetConfig>(model.config);
        const LossKind loss = seg ? info.loss : LossKind::cross_entropy;
        const Split split = parse_split(a->split);
        const std::vector<Sample> samples = load_samples(model, manifest_path(info.data), split, info);
        json config = {{"command", "eval"},  {"weights", a->weights}, {"data", info.data},
                       {"split", a->split},  {"threshold", a->threshold}, {"loss", to_string(loss)},
                       {"run", info.config}};
        if (seg) config["tile"] = info.seg.tile;
        json result = {{"command", "eval"}, {"config", config}, {"samples", samples.size()}};
        if (samples.empty()) {
            result["status"] = "no samples";
            return Outcome{result, kExitData};
        }
        const Evaluation ev = evaluate(model, samples, loss, a->threshold, 1.0, kClassNames);
        result["status"] = "ok";
        result["scores"] = split_scores(ev, false);
        if (ev.confusion) {
            result["confusion"] = fencepipe::to_json(*ev.confusion);
            result["report"] = fencepipe::to_json(class_report(*ev.confusion), a->decimals);
        }
        return Outcome{result};
    };
}

Handler add_detect(CLI::App& app) {
    auto* sub = app.add_subcommand("detect", "Segment an image and box the insulators");
    struct Args {
        std::string image, weights, prob_mask, truth, out, id;
        std::optional<std::size_t> tile;
        double threshold = 0.5;
        long pad = 3;
        int connectivity = 8;
        std::size_t min_area = 1;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--image", a->image)->required();
    auto* w = sub->add_option("--weights", a->weights, "U-Net weights");
    auto* p = sub->add_option("--prob-mask", a->prob_mask, "precomputed probability mask (gray image)");
    w->excludes(p);
    sub->add_option("--truth", a->truth, "ground-truth mask; adds scores and residual.png");
    sub->add_option("--tile", a->tile, "tile size (default: the run's, or 512)");
    sub->add_option("--threshold", a->threshold)->capture_default_str();
    sub->add_option("--pad", a->pad)->capture_default_str()->check(CLI::NonNegativeNumber);
    sub->add_option("--connectivity", a->connectivity)->check(CLI::IsMember({4, 8}))->capture_default_str();
    sub->add_option("--min-area", a->min_area)->capture_default_str();
    sub->add_option("--id", a->id, "image id (default: file stem)");
    sub->add_option("--out", a->out, "output directory")->required();
    return [a] {
        if (a->weights.empty() == a->prob_mask.empty()) {
            throw ConfigError("give exactly one of --weights and --prob-mask");
        }
        const Image image = read_image(a->image);
        std::size_t tile = 512;
        std::vector<BinaryMask> tiles;
        TileGrid grid;
        json run = nullptr;
        if (!a->weights.empty()) {
            const ModelGraph model = load_weights(a->weights);
            const RunInfo info = read_run_info(fs::path(a->weights).parent_path());
            tile = a->tile.value_or(info.config.is_null() ? tile : info.seg.tile);
            run = info.config;
            tiles = predict_tiles(model, image, tile, a->threshold, grid);
        } else {
            tile = a->tile.value_or(tile);
            Image prob = to_channels(read_image(a->prob_mask), 1);
            if (prob.width != image.width || prob.height != image.height) {
                throw DataError("probability mask and image differ in size");
            }
            auto [pt, g] = slice_image(prob, tile);
            grid = g;
            for (const Image& t : pt) tiles.push_back(binarize(t, a->threshold));
        }
        const GlobalDetections found = map_to_global(tiles, grid, a->connectivity, a->pad, a->min_area);
        const BinaryMask mask = reassemble(tiles, grid);
        Detections det;
        det.image_id = a->id.empty() ? fs::path(a->image).stem().string() : a->id;
        det.boxes = found.boxes;
        det.threshold = a->threshold;
        det.pad = a->pad;
        const json config = {{"command", "detect"},        {"image", a->image},
                             {"weights", a->weights},      {"prob_mask", a->prob_mask},
                             {"tile", tile},               {"threshold", a->threshold},
                             {"pad", a->pad},              {"connectivity", a->connectivity},
                             {"min_area", a->min_area},    {"run", run}};
        const fs::path out(a->out);
        json result = {{"command", "detect"}, {"status", "ok"}, {"config", config},
                       {"detections", fencepipe::to_json(det)}, {"blobs", found.blobs.size()}};
        std::vector<std::size_t> areas;
        for (const Blob& b : found.blobs) areas.push_back(b.area());
        result["areas"] = areas;
        if (!a->truth.empty()) {
            const BinaryMask truth = read_mask(a->truth);
            if (truth.width != mask.width || truth.height != mask.height) {
                throw DataError("truth mask and image differ in size");
            }
            result["scores"] = fencepipe::to_json(seg_scores(truth, mask), 0.0);
            result["scores"].erase("loss");
            write_mask(out / "residual.png", residual_mask(truth, mask));
        }
        write_mask(out / "mask.png", mask);
        write_image(out / "overlay.png", render_overlay(to_channels(image, 3), det.boxes));
        write_json(out / "detections.json", result);
        return Outcome{result};
    };
}

Handler add_report(CLI::App& app) {
    auto* sub = app.add_subcommand("report", "Tabulate train/val/test scores of one or more runs");
    struct Args {
        std::vector<std::string> runs;
        std::string data, out;
        double threshold = 0.5;
        bool overlays = false;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--run", a->runs, "run directory (repeatable)")->required();
    sub->add_option("--data", a->data, "dataset (default: each run's)");
    sub->add_option("--out", a->out)->required();
    sub->add_option("--threshold", a->threshold)->capture_default_str();
    sub->add_flag("--overlays", a->overlays, "write box overlays for test images of segmentation runs");
    return [a] {
        const fs::path out(a->out);
        json rows = json::array();
        json runs = json::array();
        json classification = json::array();
        json missing = json::array();
        std::string csv = "split,batch_size,loss,mean_iou,accuracy,dice_coef\n";
        std::string curves = "run,batch_size,epoch,split,loss,miou,accuracy,dice\n";
        struct Loaded {
            ModelGraph model;
            RunInfo info;
            fs::path manifest;
        };
        std::vector<Loaded> loaded;
        for (std::size_t r = 0; r < a->runs.size(); ++r) {
            const fs::path dir(a->runs[r]);
            RunInfo info = read_run_info(dir);
            if (info.config.is_null()) {
                throw DataError(dir.string() + " has no config.json");
            }
            if (!a->data.empty()) info.data = a->data;
            const TrainingLog log = TrainingLog::from_csv(read_file(dir / "train_log.csv"));
            for (const LogRow& row : log.rows) {
                curves += std::to_string(r) + "," + std::to_string(info.batch_size) + "," + std::to_string(row.epoch) +
                          "," + row.split + "," + num(row.loss) + "," + num(row.miou) + "," + num(row.accuracy) +
                          "," + num(row.dice) + "\n";
            }
            runs.push_back({{"dir", dir.string()}, {"config", info.config}});
            loaded.push_back({load_weights(dir / "weights.bin"), info, manifest_path(info.data)});
        }
        for (Split split : {Split::train, Split::val, Split::test}) {
            for (std::size_t r = 0; r < loaded.size(); ++r) {
                const Loaded& L = loaded[r];
                const bool seg = L.info.task == "segmentation";
                const LossKind loss = seg ? L.info.loss : LossKind::cross_entropy;
                const std::vector<Sample> samples = load_samples(L.model, L.manifest, split, L.info);
                json row = {{"split", to_string(split)}, {"batch_size", L.info.batch_size}};
                std::string line = to_string(split) + "," + std::to_string(L.info.batch_size) + ",";
                if (samples.empty()) {
                    row.update({{"loss", nullptr}, {"mean_iou", nullptr}, {"accuracy", nullptr}, {"dice_coef", nullptr}});
                    line += "no samples,no samples,no samples,no samples\n";
                    missing.push_back({{"run", r}, {"split", to_string(split)}});
                } else {
                    const Evaluation ev = evaluate(L.model, samples, loss, a->threshold, 1.0, kClassNames);
                    row.update(split_scores(ev, true));
                    line += num(round4(ev.loss)) + "," + num(round4(ev.miou)) + "," + num(round4(ev.accuracy)) + "," +
                            num(round4(ev.dice)) + "\n";
                    if (ev.confusion) {
                        classification.push_back({{"run", r},
                                                  {"split", to_string(split)},
                                                  {"confusion", fencepipe::to_json(*ev.confusion)},
                                                  {"report", fencepipe::to_json(class_report(*ev.confusion))}});
                    }
                }
                rows.push_back(row);
                csv += line;
            }
        }
        json overlays = json::array();
        if (a->overlays) {
            for (std::size_t r = 0; r < loaded.size(); ++r) {
                const Loaded& L = loaded[r];
                if (L.info.task != "segmentation") continue;
                const DatasetManifest m = read_manifest(L.manifest);
                for (const auto& e : split_entries(m, Split::test)) {
                    const Image image = read_image(resolve(L.manifest.parent_path(), e.path));
                    TileGrid grid;
                    const auto tiles = predict_tiles(L.model, image, L.info.seg.tile, a->threshold, grid);
                    const GlobalDetections found = map_to_global(tiles, grid);
                    const fs::path path = out / "overlays" / (std::to_string(r) + "_" + e.id + ".png");
                    write_image(path, render_overlay(to_channels(image, 3), found.boxes));
                    overlays.push_back(path.string());
                }
            }
        }
        const json config = {{"command", "report"}, {"runs", a->runs}, {"data", a->data},
                             {"threshold", a->threshold}, {"overlays", a->overlays}};
        json report = {{"command", "report"}, {"config", config}, {"runs", runs}, {"rows", rows}};
        if (!classification.empty()) report["classification"] = classification;
        if (!missing.empty()) report["no_samples"] = missing;
        write_json(out / "report.json", report);
        write_file_atomic(out / "report.csv", "# " + config.dump() + "\n" + csv);
        write_file_atomic(out / "curves.csv", "# " + config.dump() + "\n" + curves);
        json result = report;
        result["status"] = missing.empty() ? "ok" : "no samples";
        result["artifacts"] = {(out / "report.json").string(), (out / "report.csv").string(),
                               (out / "curves.csv").string()};
        if (!overlays.empty()) result["overlays"] = overlays;
        return Outcome{result, missing.empty() ? kExitOk : kExitData};
    };
}

json error_json(const char* kind, const std::exception& e) {
    json j = {{"status", "error"}, {"error", kind}, {"message", e.what()}};
    if (const auto* p = dynamic_cast<const ParseError*>(&e)) {
        j["line"] = p->line();
        j["field"] = p->field();
    }
    return j;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::optional<std::uint64_t> env;
    try {
        env = env_seed();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        out << error_json("config", e).dump(2) << "\n";
        return kExitUsage;
    }

    CLI::App app{"Fence insulator segmentation, classification and detection pipeline", "fencepipe"};
    app.require_subcommand(1, 1);
    app.fallthrough(false);
    std::map<const CLI::App*, Handler> handlers;
    auto reg = [&](const std::string& name, Handler h) { handlers[app.get_subcommand(name)] = std::move(h); };
    reg("gen-synth", add_gen_synth(app, env));
    reg("slice", add_slice(app));
    reg("import-annotations", add_import_annotations(app, err));
    reg("augment", add_augment(app, env));
    reg("split", add_split(app, env));
    reg("train-seg", add_train_seg(app, env));
    reg("train-cls", add_train_cls(app, env));
    reg("eval", add_eval(app));
    reg("detect", add_detect(app));
    reg("report", add_report(app));

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(std::move(reversed));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        const Outcome o = handlers.at(app.get_subcommands().front())();
        out << o.result.dump(2) << "\n";
        if (o.code != kExitOk) {
            err << "error: " << o.result.value("status", std::string("failed")) << "\n";
        }
        return o.code;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        out << error_json("config", e).dump(2) << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        err << "error: " << e.what() << "\n";
        out << error_json("data", e).dump(2) << "\n";
        return kExitData;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        out << error_json("runtime", e).dump(2) << "\n";
        return kExitData;
    }
}

}  // namespace fencepipe::cli
