#include "fencepipe/models.hpp"

#include <cmath>
#include <unordered_map>

#include "fencepipe/error.hpp"
#include "fencepipe/rng.hpp"

namespace fencepipe {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::conv3x3: return "conv";
        case LayerKind::conv1x1: return "conv1x1";
        case LayerKind::maxpool: return "pool";
        case LayerKind::upconv: return "upconv";
        case LayerKind::concat: return "concat";
        case LayerKind::add: return "add";
        case LayerKind::relu: return "relu";
        case LayerKind::flatten: return "flatten";
        case LayerKind::global_avg_pool: return "gap";
        case LayerKind::dense: return "dense";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::softmax: return "softmax";
    }
    return "?";
}

void ModelGraph::add_layer(LayerSpec layer) {
    for (const auto& existing : layers_) {
        if (existing.name == layer.name) {
            throw ContractError("duplicate layer name '" + layer.name + "'");
        }
    }
    for (const auto& in : layer.inputs) {
        bool found = in == kInputName;
        for (const auto& existing : layers_) {
            found = found || existing.name == in;
        }
        if (!found) {
            throw ContractError("layer '" + layer.name + "' reads unknown input '" + in + "'");
        }
    }
    for (const auto* w : {&layer.weight, &layer.bias}) {
        if (!w->empty() && !has_weight(*w)) {
            throw ContractError("layer '" + layer.name + "' reads unknown weight '" + *w + "'");
        }
    }
    layers_.push_back(std::move(layer));
}

Tensor& ModelGraph::add_weight(const std::string& name, Tensor value) {
    if (has_weight(name)) {
        throw ContractError("duplicate weight name '" + name + "'");
    }
    value.set_requires_grad(true);
    weight_order_.push_back(name);
    return weights_.emplace(name, std::move(value)).first->second;
}

Tensor& ModelGraph::weight(const std::string& name) {
    auto it = weights_.find(name);
    if (it == weights_.end()) {
        throw ContractError("unknown weight '" + name + "'");
    }
    return it->second;
}

const Tensor& ModelGraph::weight(const std::string& name) const {
    auto it = weights_.find(name);
    if (it == weights_.end()) {
        throw ContractError("unknown weight '" + name + "'");
    }
    return it->second;
}

void ModelGraph::freeze(const std::string& name) {
    weight(name).set_requires_grad(false);
    frozen_.insert(name);
}

void ModelGraph::unfreeze_all() {
    for (const auto& name : frozen_) {
        weight(name).set_requires_grad(true);
    }
    frozen_.clear();
}

void ModelGraph::freeze_all_except(const std::string& prefix) {
    for (const auto& name : weight_order_) {
        if (name.rfind(prefix, 0) != 0) {
            freeze(name);
        }
    }
}

void ModelGraph::zero_grad() {
    for (auto& [name, w] : weights_) {
        w.zero_grad();
    }
}

void ModelGraph::clear_grad() {
    for (auto& [name, w] : weights_) {
        w.clear_grad();
    }
}

ModelGraph ModelGraph::clone() const {
    ModelGraph copy = *this;
    for (auto& [name, w] : copy.weights_) {
        w = w.detach();
        w.set_requires_grad(copy.frozen_.count(name) == 0);
    }
    return copy;
}

std::size_t ModelGraph::param_count() const {
    std::size_t total = 0;
    for (const auto& [name, w] : weights_) {
        total += w.numel();
    }
    return total;
}

namespace {

class Builder {
public:
    Builder(ModelGraph& model, std::uint64_t seed) : model_(model), rng_(seed) {}

    void conv(const std::string& name, std::size_t in, std::size_t out, Activation act, Padding pad,
              std::vector<std::string> inputs = {}) {
        add_weights(name, {3, 3, in, out}, 9 * in);
        model_.add_layer({name, LayerKind::conv3x3, std::move(inputs), name + ".weight", name + ".bias", act, pad});
    }

    void conv1x1(const std::string& name, std::size_t in, std::size_t out,
                 std::vector<std::string> inputs = {}) {
        add_weights(name, {1, 1, in, out}, in);
        model_.add_layer({name, LayerKind::conv1x1, std::move(inputs), name + ".weight", name + ".bias",
                          Activation::none, Padding::same});
    }

    void upconv(const std::string& name, std::size_t in, std::size_t out) {
        add_weights(name, {2, 2, in, out}, in);
        model_.add_layer({name, LayerKind::upconv, {}, name + ".weight", name + ".bias", Activation::relu,
                          Padding::same});
    }

    void dense(const std::string& name, std::size_t in, std::size_t out) {
        add_weights(name, {in, out}, in);
        model_.add_layer({name, LayerKind::dense, {}, name + ".weight", name + ".bias", Activation::none,
                          Padding::same});
    }

    void plain(const std::string& name, LayerKind kind, std::vector<std::string> inputs = {},
               Padding pad = Padding::same) {
        model_.add_layer({name, kind, std::move(inputs), "", "", Activation::none, pad});
    }

private:
    void add_weights(const std::string& name, Shape shape, std::size_t fan_in) {
        const std::size_t out = shape.back();
        Tensor w(std::move(shape));
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (double& v : w.mutable_data()) {
            v = rng_.normal(0.0, stddev);
        }
        model_.add_weight(name + ".weight", std::move(w));
        model_.add_weight(name + ".bias", Tensor(Shape{out}));
    }

    ModelGraph& model_;
    Rng rng_;
};

void validate(const UNetConfig& cfg) {
    if (cfg.in_channels < 1 || cfg.out_channels < 1 || cfg.depth < 1 || cfg.base_filters < 1) {
        throw ConfigError("U-Net config needs positive channels, depth >= 1 and base_filters >= 1");
    }
}

void validate(const ClassifierConfig& cfg) {
    if (cfg.num_classes < 2) {
        throw ConfigError("classifier needs at least 2 classes");
    }
    if (cfg.in_channels < 1 || cfg.blocks < 1 || cfg.base_filters < 1 || cfg.input_size < 1) {
        throw ConfigError("classifier config needs positive channels, blocks, filters and input size");
    }
    if (cfg.input_size % (1 << cfg.blocks) != 0) {
        throw ConfigError("classifier input_size " + std::to_string(cfg.input_size) +
                          " is not divisible by 2^blocks");
    }
}

}  // namespace

ModelGraph build_unet(const UNetConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    ModelGraph model;
    model.kind = ModelKind::unet;
    model.config = cfg;
    model.seed = seed;
    Builder b(model, seed);
    const auto F = static_cast<std::size_t>(cfg.base_filters);
    const Padding pad = cfg.padding;
    std::size_t channels = static_cast<std::size_t>(cfg.in_channels);
    for (int s = 0; s < cfg.depth; ++s) {
        const std::string stage = "enc" + std::to_string(s);
        const std::size_t c = F << s;
        b.conv(stage + "_conv1", channels, c, Activation::relu, pad);
        b.conv(stage + "_conv2", c, c, Activation::relu, pad);
        b.plain(stage + "_pool", LayerKind::maxpool);
        channels = c;
    }
    const std::size_t cb = F << cfg.depth;
    b.conv("bottleneck_conv1", channels, cb, Activation::relu, pad);
    b.conv("bottleneck_conv2", cb, cb, Activation::relu, pad);
    channels = cb;
    for (int s = cfg.depth - 1; s >= 0; --s) {
        const std::string stage = "dec" + std::to_string(s);
        const std::size_t c = F << s;
        b.upconv(stage + "_up", channels, c);
        b.plain(stage + "_concat", LayerKind::concat,
                {"enc" + std::to_string(s) + "_conv2", stage + "_up"}, pad);
        b.conv(stage + "_conv1", 2 * c, c, Activation::relu, pad);
        b.conv(stage + "_conv2", c, c, Activation::relu, pad);
        channels = c;
    }
    b.conv1x1("head", channels, static_cast<std::size_t>(cfg.out_channels));
    b.plain("output", LayerKind::sigmoid);
    return model;
}

ModelGraph build_classifier(const ClassifierConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    ModelGraph model;
    model.kind = ModelKind::classifier;
    model.config = cfg;
    model.seed = seed;
    Builder b(model, seed);
    const auto F = static_cast<std::size_t>(cfg.base_filters);
    std::size_t channels = static_cast<std::size_t>(cfg.in_channels);
    const std::size_t final_side = static_cast<std::size_t>(cfg.input_size >> cfg.blocks);

    if (cfg.kind == ClassifierKind::cnn) {
        for (int i = 0; i < cfg.blocks; ++i) {
            const std::string block = "block" + std::to_string(i);
            const std::size_t c = F << i;
            b.conv(block + "_conv", channels, c, Activation::relu, Padding::same);
            b.plain(block + "_pool", LayerKind::maxpool);
            channels = c;
        }
        b.plain("flatten", LayerKind::flatten);
        b.dense("head", channels * final_side * final_side, static_cast<std::size_t>(cfg.num_classes));
    } else {
        b.conv("stem", channels, F, Activation::relu, Padding::same);
        channels = F;
        std::string previous = "stem";
        for (int i = 0; i < cfg.blocks; ++i) {
            const std::string block = "block" + std::to_string(i);
            const std::size_t c = F << i;
            b.conv(block + "_conv1", channels, c, Activation::relu, Padding::same, {previous});
            b.conv(block + "_conv2", c, c, Activation::none, Padding::same);
            std::string shortcut = previous;
            if (c != channels) {
                shortcut = block + "_proj";
                b.conv1x1(shortcut, channels, c, {previous});
            }
            b.plain(block + "_add", LayerKind::add, {block + "_conv2", shortcut});
            b.plain(block + "_relu", LayerKind::relu);
            b.plain(block + "_pool", LayerKind::maxpool);
            previous = block + "_pool";
            channels = c;
        }
        b.plain("gap", LayerKind::global_avg_pool);
        b.dense("head", channels, static_cast<std::size_t>(cfg.num_classes));
    }
    b.plain("output", LayerKind::softmax);
    return model;
}

ModelGraph build_model(const ModelConfig& config, std::uint64_t seed) {
    if (const auto* u = std::get_if<UNetConfig>(&config)) {
        return build_unet(*u, seed);
    }
    if (const auto* c = std::get_if<ClassifierConfig>(&config)) {
        return build_classifier(*c, seed);
    }
    throw ContractError("build_model: custom models cannot be rebuilt from config");
}

namespace {

template <typename T, typename Fn>
std::vector<T> run_layers(const ModelGraph& model, T input, Fn&& apply) {
    std::unordered_map<std::string, const T*> by_name;
    std::vector<T> outputs;
    outputs.reserve(model.layers().size());
    const T* previous = &input;
    for (const auto& layer : model.layers()) {
        std::vector<const T*> args;
        if (layer.inputs.empty()) {
            args.push_back(previous);
        }
        for (const auto& name : layer.inputs) {
            args.push_back(name == kInputName ? &input : by_name.at(name));
        }
        outputs.push_back(apply(layer, args));
        previous = &outputs.back();
        by_name[layer.name] = previous;
    }
    return outputs;
}

std::size_t arity(LayerKind kind) { return kind == LayerKind::concat || kind == LayerKind::add ? 2 : 1; }

void check_arity(const LayerSpec& layer, std::size_t got) {
    if (got != arity(layer.kind)) {
        throw ContractError("layer '" + layer.name + "' expects " + std::to_string(arity(layer.kind)) +
                            " inputs, got " + std::to_string(got));
    }
}

}  // namespace

Tensor forward(const ModelGraph& model, const Tensor& input) {
    if (model.layers().empty()) {
        return input;
    }
    auto apply = [&](const LayerSpec& layer, const std::vector<const Tensor*>& args) -> Tensor {
        check_arity(layer, args.size());
        const Tensor& x = *args[0];
        switch (layer.kind) {
            case LayerKind::conv3x3:
                return conv2d(x, model.weight(layer.weight), model.weight(layer.bias), layer.padding,
                              layer.activation);
            case LayerKind::conv1x1:
                return conv1x1(x, model.weight(layer.weight), model.weight(layer.bias));
            case LayerKind::maxpool: return maxpool2(x);
            case LayerKind::upconv:
                return upconv2(x, model.weight(layer.weight), model.weight(layer.bias), layer.activation);
            case LayerKind::concat: {
                const Tensor& up = *args[1];
                if (layer.padding == Padding::valid && x.rank() == 3 && up.rank() == 3) {
                    return concat_channels(center_crop(x, up.dim(0), up.dim(1)), up);
                }
                return concat_channels(x, up);
            }
            case LayerKind::add: return add(x, *args[1]);
            case LayerKind::relu: return relu(x);
            case LayerKind::flatten: return flatten(x);
            case LayerKind::global_avg_pool: return global_avg_pool(x);
            case LayerKind::dense:
                return dense(x, model.weight(layer.weight), model.weight(layer.bias), layer.activation);
            case LayerKind::sigmoid: return activate(x, ProbabilityMap::sigmoid);
            case LayerKind::softmax: return activate(x, ProbabilityMap::softmax);
        }
        throw ContractError("unhandled layer kind");
    };
    // Intermediate tensors stay alive through the tape, so only the final
    // output needs to be returned.
    return run_layers<Tensor>(model, input, apply).back();
}

std::vector<Shape> infer_shapes(const ModelGraph& model, const Shape& input) {
    auto fail = [](const LayerSpec& layer, const std::string& why) -> DimensionError {
        return DimensionError("layer '" + layer.name + "': " + why);
    };
    auto apply = [&](const LayerSpec& layer, const std::vector<const Shape*>& args) -> Shape {
        check_arity(layer, args.size());
        const Shape& x = *args[0];
        auto need_rank = [&](std::size_t r) {
            if (x.size() != r) {
                throw fail(layer, "expected rank " + std::to_string(r) + " input, got " + shape_str(x));
            }
        };
        auto weight_shape = [&](const std::string& name) -> const Shape& { return model.weight(name).shape(); };
        switch (layer.kind) {
            case LayerKind::conv3x3:
            case LayerKind::conv1x1:
            case LayerKind::upconv: {
                need_rank(3);
                const Shape& w = weight_shape(layer.weight);
                if (w[2] != x[2]) {
                    throw fail(layer, "input has " + std::to_string(x[2]) + " channels, weights expect " +
                                          std::to_string(w[2]));
                }
                if (layer.kind == LayerKind::upconv) {
                    return {2 * x[0], 2 * x[1], w[3]};
                }
                if (layer.kind == LayerKind::conv3x3 && layer.padding == Padding::valid) {
                    if (x[0] < 3 || x[1] < 3) {
                        throw fail(layer, "valid conv needs at least 3x3 input, got " + shape_str(x));
                    }
                    return {x[0] - 2, x[1] - 2, w[3]};
                }
                return {x[0], x[1], w[3]};
            }
            case LayerKind::maxpool:
                need_rank(3);
                if (x[0] % 2 != 0 || x[1] % 2 != 0) {
                    throw fail(layer, "pooling needs even height and width, got " + shape_str(x));
                }
                return {x[0] / 2, x[1] / 2, x[2]};
            case LayerKind::concat: {
                const Shape& up = *args[1];
                need_rank(3);
                if (up.size() != 3) {
                    throw fail(layer, "second input must be rank 3");
                }
                const bool crop = layer.padding == Padding::valid;
                if ((!crop && (x[0] != up[0] || x[1] != up[1])) || (crop && (x[0] < up[0] || x[1] < up[1]))) {
                    throw fail(layer, "spatial mismatch " + shape_str(x) + " vs " + shape_str(up));
                }
                return {up[0], up[1], x[2] + up[2]};
            }
            case LayerKind::add:
                if (x != *args[1]) {
                    throw fail(layer, "shape mismatch " + shape_str(x) + " vs " + shape_str(*args[1]));
                }
                return x;
            case LayerKind::relu:
            case LayerKind::sigmoid:
            case LayerKind::softmax: return x;
            case LayerKind::flatten: return {shape_numel(x)};
            case LayerKind::global_avg_pool: need_rank(3); return {x[2]};
            case LayerKind::dense: {
                need_rank(1);
                const Shape& w = weight_shape(layer.weight);
                if (w[0] != x[0]) {
                    throw fail(layer, "input size " + std::to_string(x[0]) + " but weights expect " +
                                          std::to_string(w[0]));
                }
                return {w[1]};
            }
        }
        throw ContractError("unhandled layer kind");
    };
    return run_layers<Shape>(model, input, apply);
}

}  // namespace fencepipe
