#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fencepipe/metrics.hpp"
#include "fencepipe/models.hpp"

namespace fencepipe {

/// w <- w - lr * grad for every trainable weight, then clears grads.
/// Throws ContractError if a trainable weight has no gradient.
void sgd_step(ModelGraph& model, double lr);

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

/// Bias-corrected Adam update; increments state.t and clears grads.
void adam_step(ModelGraph& model, AdamState& state);

enum class LossKind { cross_entropy, bce, dice, bce_dice, mse };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

/// One supervised example. Segmentation targets are [H, W, 1] masks,
/// classification targets are one-hot [classes].
struct Sample {
    Tensor input;
    Tensor target;
};

Tensor sample_loss(const Tensor& pred, const Tensor& target, LossKind kind, double dice_smooth = 1.0);

/// Mean per-sample loss over a set, recorded on the tape.
Tensor mean_loss(const ModelGraph& model, std::span<const Sample> samples, LossKind kind,
                 double dice_smooth = 1.0);

struct LogRow {
    int epoch = 0;
    std::string split;
    double loss = 0.0;
    double miou = 0.0;
    double accuracy = 0.0;
    double dice = 0.0;
};

struct TrainingLog {
    std::vector<LogRow> rows;

    /// epoch,split,loss,miou,accuracy,dice
    std::string to_csv() const;
    static TrainingLog from_csv(const std::string& text);
};

/// Scores for one split. Segmentation pools pixel counts over all samples;
/// classification uses the confusion matrix (dice is the mean per-class F1).
struct Evaluation {
    std::size_t samples = 0;
    double loss = 0.0;
    double miou = 0.0;
    double accuracy = 0.0;
    double dice = 0.0;
    std::optional<PixelCounts> pixels;
    std::optional<ConfusionMatrix> confusion;
};

Evaluation evaluate(const ModelGraph& model, std::span<const Sample> samples, LossKind kind,
                    double threshold = 0.5, double dice_smooth = 1.0,
                    const std::vector<std::string>& class_names = {});

enum class OptimizerKind { adam, sgd };

struct TrainOptions {
    LossKind loss = LossKind::dice;
    int epochs = 1;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::adam;
    double lr = 1e-3;
    double dice_smooth = 1.0;
    // Called after each epoch with the rows logged for it (checkpointing).
    std::function<void(const ModelGraph&, int, std::span<const LogRow>)> on_epoch_end;
};

struct SplitData {
    std::vector<Sample> train;
    std::vector<Sample> val;
};

/// Mini-batch training. Each epoch logs a "train" row (running loss and hard
/// metrics over that epoch's batches) and, when val is non-empty, a "val"
/// row evaluated with the epoch's final weights. The model keeps the
/// last-epoch weights.
TrainingLog train(ModelGraph& model, const SplitData& data, const TrainOptions& options);

}  // namespace fencepipe
