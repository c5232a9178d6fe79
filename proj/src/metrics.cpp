#include "fencepipe/metrics.hpp"

#include <cmath>

#include "fencepipe/error.hpp"

namespace fencepipe {

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> names)
    : classes(std::move(names)), counts(classes.size(), std::vector<std::size_t>(classes.size(), 0)) {}

std::size_t ConfusionMatrix::total() const {
    std::size_t n = 0;
    for (const auto& row : counts) {
        for (auto v : row) {
            n += v;
        }
    }
    return n;
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        n += counts[c][c];
    }
    return n;
}

std::size_t ConfusionMatrix::fp(std::size_t c) const {
    std::size_t n = 0;
    for (std::size_t a = 0; a < counts.size(); ++a) {
        n += a == c ? 0 : counts[a][c];
    }
    return n;
}

std::size_t ConfusionMatrix::fn(std::size_t c) const {
    std::size_t n = 0;
    for (std::size_t p = 0; p < counts.size(); ++p) {
        n += p == c ? 0 : counts[c][p];
    }
    return n;
}

ConfusionMatrix confusion_matrix(std::span<const int> actual, std::span<const int> predicted,
                                 std::vector<std::string> classes) {
    if (actual.size() != predicted.size()) {
        throw DataError("confusion_matrix: " + std::to_string(actual.size()) + " actual labels vs " +
                        std::to_string(predicted.size()) + " predicted");
    }
    ConfusionMatrix cm(std::move(classes));
    const auto c = static_cast<int>(cm.size());
    for (std::size_t i = 0; i < actual.size(); ++i) {
        if (actual[i] < 0 || actual[i] >= c || predicted[i] < 0 || predicted[i] >= c) {
            throw DataError("confusion_matrix: label out of range at index " + std::to_string(i));
        }
        ++cm.counts[static_cast<std::size_t>(actual[i])][static_cast<std::size_t>(predicted[i])];
    }
    return cm;
}

ConfusionMatrix confusion_from_counts(std::span<const std::size_t> row_major, std::vector<std::string> classes) {
    ConfusionMatrix cm(std::move(classes));
    const std::size_t c = cm.size();
    if (row_major.size() != c * c) {
        throw DataError("confusion counts: expected " + std::to_string(c * c) + " values, got " +
                        std::to_string(row_major.size()));
    }
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            cm.counts[i][j] = row_major[i * c + j];
        }
    }
    return cm;
}

ClassReport class_report(const ConfusionMatrix& cm) {
    const std::size_t total = cm.total();
    if (cm.size() == 0 || total == 0) {
        throw DataError("class_report: confusion matrix is empty");
    }
    ClassReport report;
    report.total = total;
    report.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
    for (std::size_t c = 0; c < cm.size(); ++c) {
        ClassScores s;
        s.name = cm.classes[c];
        const double tp = static_cast<double>(cm.tp(c));
        const std::size_t predicted = cm.tp(c) + cm.fp(c);
        const std::size_t actual = cm.tp(c) + cm.fn(c);
        s.support = actual;
        s.precision_undefined = predicted == 0;
        s.recall_undefined = actual == 0;
        s.precision = predicted == 0 ? 0.0 : tp / static_cast<double>(predicted);
        s.recall = actual == 0 ? 0.0 : tp / static_cast<double>(actual);
        const double pr = s.precision + s.recall;
        s.f1 = pr == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / pr;
        report.classes.push_back(s);
    }
    const double n = static_cast<double>(cm.size());
    for (const auto& s : report.classes) {
        const double w = static_cast<double>(s.support) / static_cast<double>(total);
        report.macro_avg.precision += s.precision / n;
        report.macro_avg.recall += s.recall / n;
        report.macro_avg.f1 += s.f1 / n;
        report.weighted_avg.precision += s.precision * w;
        report.weighted_avg.recall += s.recall * w;
        report.weighted_avg.f1 += s.f1 * w;
    }
    report.macro_avg.support = total;
    report.weighted_avg.support = total;
    return report;
}

namespace {

double round_to(double v, int decimals) {
    if (decimals < 0) {
        return v;
    }
    const double f = std::pow(10.0, decimals);
    return std::round(v * f) / f;
}

nlohmann::json average_json(const AverageScores& a, int decimals) {
    return {{"precision", round_to(a.precision, decimals)},
            {"recall", round_to(a.recall, decimals)},
            {"f1", round_to(a.f1, decimals)},
            {"support", a.support}};
}

}  // namespace

nlohmann::json to_json(const ClassReport& report, int decimals) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : report.classes) {
        nlohmann::json row = {{"class", s.name},
                              {"precision", round_to(s.precision, decimals)},
                              {"recall", round_to(s.recall, decimals)},
                              {"f1", round_to(s.f1, decimals)},
                              {"support", s.support}};
        if (s.precision_undefined) {
            row["precision_undefined"] = true;
        }
        if (s.recall_undefined) {
            row["recall_undefined"] = true;
        }
        rows.push_back(row);
    }
    return {{"classes", rows},
            {"accuracy", {{"f1", round_to(report.accuracy, decimals)}, {"support", report.total}}},
            {"macro_avg", average_json(report.macro_avg, decimals)},
            {"weighted_avg", average_json(report.weighted_avg, decimals)}};
}

nlohmann::json to_json(const ConfusionMatrix& cm) { return {{"classes", cm.classes}, {"counts", cm.counts}}; }

namespace {

PixelCounts count_pixels(const BinaryMask& truth, const BinaryMask& pred, const char* what) {
    require_same_size(truth, pred, what);
    PixelCounts c;
    c.add(truth, pred);
    return c;
}

double ratio_or_one(std::size_t num, std::size_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

void PixelCounts::add(const BinaryMask& truth, const BinaryMask& pred) {
    require_same_size(truth, pred, "pixel counts");
    for (std::size_t i = 0; i < truth.data.size(); ++i) {
        const bool g = truth.data[i] != 0;
        const bool p = pred.data[i] != 0;
        tp += g && p;
        fp += !g && p;
        fn += g && !p;
        tn += !g && !p;
    }
}

void PixelCounts::add(std::span<const double> truth, std::span<const double> prob, double threshold) {
    if (truth.size() != prob.size()) {
        throw DataError("pixel counts: size mismatch");
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool g = truth[i] >= 0.5;
        const bool p = prob[i] >= threshold;
        tp += g && p;
        fp += !g && p;
        fn += g && !p;
        tn += !g && !p;
    }
}

double PixelCounts::iou() const { return ratio_or_one(tp, tp + fp + fn); }
double PixelCounts::background_iou() const { return ratio_or_one(tn, tn + fn + fp); }
double PixelCounts::dice() const { return ratio_or_one(2 * tp, 2 * tp + fp + fn); }
double PixelCounts::accuracy() const { return ratio_or_one(tp + tn, total()); }

double iou(const BinaryMask& truth, const BinaryMask& pred) { return count_pixels(truth, pred, "iou").iou(); }

double dice(const BinaryMask& truth, const BinaryMask& pred) { return count_pixels(truth, pred, "dice").dice(); }

double pixel_accuracy(const BinaryMask& truth, const BinaryMask& pred) {
    return count_pixels(truth, pred, "pixel_accuracy").accuracy();
}

double miou(const BinaryMask& truth, const BinaryMask& pred, std::size_t classes) {
    require_same_size(truth, pred, "miou");
    if (classes == 0) {
        throw DataError("miou: needs at least one class");
    }
    std::vector<std::size_t> inter(classes, 0), uni(classes, 0);
    for (std::size_t i = 0; i < truth.data.size(); ++i) {
        const std::size_t g = truth.data[i], p = pred.data[i];
        if (g >= classes || p >= classes) {
            throw DataError("miou: label value outside 0.." + std::to_string(classes - 1));
        }
        if (g == p) {
            ++inter[g];
            ++uni[g];
        } else {
            ++uni[g];
            ++uni[p];
        }
    }
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        total += ratio_or_one(inter[c], uni[c]);
    }
    return total / static_cast<double>(classes);
}

SegScores seg_scores(const PixelCounts& counts) {
    SegScores s;
    s.iou_per_class = {counts.background_iou(), counts.iou()};
    s.miou = counts.miou();
    s.dice = counts.dice();
    s.accuracy = counts.accuracy();
    return s;
}

SegScores seg_scores(const BinaryMask& truth, const BinaryMask& pred) {
    return seg_scores(count_pixels(truth, pred, "seg_scores"));
}

nlohmann::json to_json(const SegScores& scores, double loss) {
    return {{"loss", loss}, {"mean_iou", scores.miou}, {"accuracy", scores.accuracy}, {"dice_coef", scores.dice}};
}

}  // namespace fencepipe
