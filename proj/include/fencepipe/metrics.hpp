#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fencepipe/raster.hpp"

namespace fencepipe {

/// counts[actual][predicted].
struct ConfusionMatrix {
    std::vector<std::string> classes;
    std::vector<std::vector<std::size_t>> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::vector<std::string> names);

    std::size_t size() const { return classes.size(); }
    std::size_t total() const;
    std::size_t trace() const;
    std::size_t tp(std::size_t c) const { return counts[c][c]; }
    std::size_t fp(std::size_t c) const;
    std::size_t fn(std::size_t c) const;
    std::size_t tn(std::size_t c) const { return total() - tp(c) - fp(c) - fn(c); }
};

/// Classification labels are indices into `classes`.
ConfusionMatrix confusion_matrix(std::span<const int> actual, std::span<const int> predicted,
                                 std::vector<std::string> classes);

/// Builds a matrix from row-major counts (actual rows, predicted columns).
ConfusionMatrix confusion_from_counts(std::span<const std::size_t> row_major,
                                      std::vector<std::string> classes);

struct ClassScores {
    std::string name;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
    // Zero denominators are reported as 0 and flagged here.
    bool precision_undefined = false;
    bool recall_undefined = false;
};

struct AverageScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct ClassReport {
    std::vector<ClassScores> classes;
    double accuracy = 0.0;
    std::size_t total = 0;
    AverageScores macro_avg;
    AverageScores weighted_avg;
};

ClassReport class_report(const ConfusionMatrix& cm);

/// Table-style JSON; scores rounded to `decimals` places (negative: no rounding).
nlohmann::json to_json(const ClassReport& report, int decimals = 2);
nlohmann::json to_json(const ConfusionMatrix& cm);

/// Jaccard index tp / (tp + fp + fn); 1 when both masks are empty.
double iou(const BinaryMask& truth, const BinaryMask& pred);

/// Mean per-class IoU over label values 0..classes-1 (binary masks: 2).
double miou(const BinaryMask& truth, const BinaryMask& pred, std::size_t classes = 2);

/// 2 tp / (2 tp + fp + fn); 1 when both masks are empty.
double dice(const BinaryMask& truth, const BinaryMask& pred);

double pixel_accuracy(const BinaryMask& truth, const BinaryMask& pred);

/// Pooled binary pixel counts; lets a whole split be scored at once.
struct PixelCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t tn = 0;

    void add(const BinaryMask& truth, const BinaryMask& pred);
    /// Hard counts from soft values: a value counts as positive when >= threshold.
    void add(std::span<const double> truth, std::span<const double> prob, double threshold = 0.5);

    std::size_t total() const { return tp + fp + fn + tn; }
    double iou() const;
    double background_iou() const;
    double miou() const { return 0.5 * (iou() + background_iou()); }
    double dice() const;
    double accuracy() const;
};

struct SegScores {
    std::vector<double> iou_per_class;  // [background, foreground]
    double miou = 0.0;
    double dice = 0.0;
    double accuracy = 0.0;
};

SegScores seg_scores(const PixelCounts& counts);
SegScores seg_scores(const BinaryMask& truth, const BinaryMask& pred);

/// {loss, mean_iou, accuracy, dice_coef}, matching the segmentation table columns.
nlohmann::json to_json(const SegScores& scores, double loss);

}  // namespace fencepipe
