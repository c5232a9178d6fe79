#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "fencepipe/ops.hpp"
#include "fencepipe/tensor.hpp"

namespace fencepipe {

struct UNetConfig {
    int in_channels = 3;
    int out_channels = 1;
    int depth = 3;         // encoder stages
    int base_filters = 8;  // stage s uses base_filters * 2^s
    // valid padding shrinks every conv and center-crops skips before concat.
    Padding padding = Padding::same;
};

enum class ClassifierKind { cnn, residual };

struct ClassifierConfig {
    ClassifierKind kind = ClassifierKind::cnn;
    int in_channels = 3;
    int num_classes = 2;
    int blocks = 3;
    int base_filters = 8;
    int input_size = 512;
};

enum class ModelKind { unet, classifier, custom };

enum class LayerKind {
    conv3x3,
    conv1x1,
    maxpool,
    upconv,
    concat,
    add,
    relu,
    flatten,
    global_avg_pool,
    dense,
    sigmoid,
    softmax,
};

std::string to_string(LayerKind kind);

/// Name used for the network input in LayerSpec::inputs.
inline constexpr const char* kInputName = "input";

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::relu;
    // Producers of this layer's inputs; empty means the preceding layer (or
    // the network input for the first layer).
    std::vector<std::string> inputs;
    std::string weight;
    std::string bias;
    Activation activation = Activation::none;
    Padding padding = Padding::same;
};

using ModelConfig = std::variant<std::monostate, UNetConfig, ClassifierConfig>;

/// Ordered layer list plus the named weights it reads.
class ModelGraph {
public:
    ModelKind kind = ModelKind::custom;
    ModelConfig config;
    std::uint64_t seed = 0;
    int epoch = 0;

    void add_layer(LayerSpec layer);
    /// Registers a trainable weight. Names must be unique.
    Tensor& add_weight(const std::string& name, Tensor value);

    const std::vector<LayerSpec>& layers() const { return layers_; }
    const std::vector<std::string>& weight_names() const { return weight_order_; }
    bool has_weight(const std::string& name) const { return weights_.count(name) != 0; }
    Tensor& weight(const std::string& name);
    const Tensor& weight(const std::string& name) const;

    /// Frozen weights stop recording gradients and are skipped by optimizers.
    void freeze(const std::string& name);
    void unfreeze_all();
    bool is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }
    /// Freezes every weight whose name does not start with `prefix`.
    void freeze_all_except(const std::string& prefix);

    void zero_grad();
    void clear_grad();

    /// Deep copy: weights do not share storage with the original.
    ModelGraph clone() const;

    std::size_t param_count() const;

private:
    std::vector<LayerSpec> layers_;
    std::map<std::string, Tensor> weights_;
    std::vector<std::string> weight_order_;
    std::set<std::string> frozen_;
};

/// Encoder (two conv-relu + pool per stage), bottleneck, decoder (up-conv,
/// concat with the matching encoder output, two conv-relu), 1x1 head, sigmoid.
/// Weights are He-initialized from `seed`; biases start at zero.
ModelGraph build_unet(const UNetConfig& cfg, std::uint64_t seed);

/// cnn: [conv-relu, pool] x blocks, flatten, dense head, softmax.
/// residual: stem conv, [residual block, pool] x blocks, global average
/// pool, dense head, softmax. The dense head weights are named "head.*".
ModelGraph build_classifier(const ClassifierConfig& cfg, std::uint64_t seed);

/// Rebuilds the architecture recorded in `config` with fresh weights.
ModelGraph build_model(const ModelConfig& config, std::uint64_t seed);

Tensor forward(const ModelGraph& model, const Tensor& input);

/// Output shape of every layer for a given input shape. Throws
/// DimensionError at the first inconsistent layer.
std::vector<Shape> infer_shapes(const ModelGraph& model, const Shape& input);

inline std::size_t param_count(const ModelGraph& model) { return model.param_count(); }

}  // namespace fencepipe
