#include "fencepipe/optim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fencepipe/error.hpp"
#include "fencepipe/rng.hpp"

namespace fencepipe {

namespace {

std::span<const double> require_grad(const Tensor& w, const std::string& name) {
    if (!w.has_grad()) {
        throw ContractError("weight '" + name + "' has no gradient; run backward() first");
    }
    return w.grad();
}

std::string fmt(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

bool is_segmentation(const Tensor& target) { return target.rank() == 3; }

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Hard-metric accumulator shared by train and evaluate.
struct Scorer {
    PixelCounts pixels;
    std::vector<int> actual;
    std::vector<int> predicted;
    bool seg = false;
    bool cls = false;
    double threshold = 0.5;

    void add(const Tensor& pred, const Tensor& target) {
        if (is_segmentation(target)) {
            seg = true;
            pixels.add(target.data(), pred.data(), threshold);
        } else {
            cls = true;
            actual.push_back(static_cast<int>(argmax(target.data())));
            predicted.push_back(static_cast<int>(argmax(pred.data())));
        }
    }
};

void finish(const Scorer& s, std::size_t classes, const std::vector<std::string>& names,
            Evaluation& out) {
    if (s.seg && s.cls) {
        throw DataError("split mixes segmentation and classification targets");
    }
    if (s.seg) {
        out.pixels = s.pixels;
        out.miou = s.pixels.miou();
        out.accuracy = s.pixels.accuracy();
        out.dice = s.pixels.dice();
        return;
    }
    if (!s.cls) {
        return;
    }
    std::vector<std::string> labels = names;
    if (labels.size() < classes) {
        labels.clear();
        for (std::size_t c = 0; c < classes; ++c) {
            labels.push_back(std::to_string(c));
        }
    }
    ConfusionMatrix cm = confusion_matrix(s.actual, s.predicted, labels);
    const ClassReport report = class_report(cm);
    double iou_sum = 0.0;
    for (std::size_t c = 0; c < cm.size(); ++c) {
        const std::size_t denom = cm.tp(c) + cm.fp(c) + cm.fn(c);
        iou_sum += denom == 0 ? 1.0 : static_cast<double>(cm.tp(c)) / static_cast<double>(denom);
    }
    out.miou = iou_sum / static_cast<double>(cm.size());
    out.accuracy = report.accuracy;
    out.dice = report.macro_avg.f1;
    out.confusion = std::move(cm);
}

}  // namespace

void sgd_step(ModelGraph& model, double lr) {
    for (const std::string& name : model.weight_names()) {
        if (model.is_frozen(name)) {
            continue;
        }
        Tensor& w = model.weight(name);
        const auto g = require_grad(w, name);
        auto d = w.mutable_data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] -= lr * g[i];
        }
    }
    model.clear_grad();
}

void adam_step(ModelGraph& model, AdamState& state) {
    // Validate everything before touching any weight.
    for (const std::string& name : model.weight_names()) {
        if (model.is_frozen(name)) {
            continue;
        }
        const Tensor& w = model.weight(name);
        require_grad(w, name);
        for (const auto* moments : {&state.m, &state.v}) {
            auto it = moments->find(name);
            if (it != moments->end() && it->second.size() != w.numel()) {
                throw ContractError("optimizer state for '" + name + "' has " +
                                    std::to_string(it->second.size()) + " entries, weight has " +
                                    std::to_string(w.numel()));
            }
        }
    }
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (const std::string& name : model.weight_names()) {
        if (model.is_frozen(name)) {
            continue;
        }
        Tensor& w = model.weight(name);
        const auto g = w.grad();
        auto& m = state.m[name];
        auto& v = state.v[name];
        m.resize(w.numel(), 0.0);
        v.resize(w.numel(), 0.0);
        auto d = w.mutable_data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            d[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
    model.clear_grad();
}

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::cross_entropy: return "cross_entropy";
        case LossKind::bce: return "bce";
        case LossKind::dice: return "dice";
        case LossKind::bce_dice: return "bce_dice";
        case LossKind::mse: return "mse";
    }
    return "?";
}

LossKind parse_loss_kind(const std::string& name) {
    for (LossKind k : {LossKind::cross_entropy, LossKind::bce, LossKind::dice, LossKind::bce_dice,
                       LossKind::mse}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw ConfigError("unknown loss '" + name + "' (cross_entropy|bce|dice|bce_dice|mse)");
}

Tensor sample_loss(const Tensor& pred, const Tensor& target, LossKind kind, double dice_smooth) {
    switch (kind) {
        case LossKind::cross_entropy: return cross_entropy_loss(pred, target);
        case LossKind::bce: return binary_cross_entropy(pred, target);
        case LossKind::dice: return soft_dice_loss(pred, target, dice_smooth);
        case LossKind::bce_dice:
            return add(binary_cross_entropy(pred, target), soft_dice_loss(pred, target, dice_smooth));
        case LossKind::mse: return mse_loss(pred, target);
    }
    throw ContractError("unhandled loss kind");
}

Tensor mean_loss(const ModelGraph& model, std::span<const Sample> samples, LossKind kind,
                 double dice_smooth) {
    if (samples.empty()) {
        throw DataError("cannot compute a loss over zero samples");
    }
    Tensor total;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        Tensor l = sample_loss(forward(model, samples[i].input), samples[i].target, kind, dice_smooth);
        total = i == 0 ? l : add(total, l);
    }
    return scale(total, 1.0 / static_cast<double>(samples.size()));
}

std::string TrainingLog::to_csv() const {
    std::string out = "epoch,split,loss,miou,accuracy,dice\n";
    for (const LogRow& r : rows) {
        out += std::to_string(r.epoch) + ',' + r.split + ',' + fmt(r.loss) + ',' + fmt(r.miou) + ',' +
               fmt(r.accuracy) + ',' + fmt(r.dice) + '\n';
    }
    return out;
}

TrainingLog TrainingLog::from_csv(const std::string& text) {
    TrainingLog log;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        if (!header_seen) {
            if (line != "epoch,split,loss,miou,accuracy,dice") {
                throw ParseError("unexpected training log header", line_no, "header");
            }
            header_seen = true;
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        if (cells.size() != 6) {
            throw ParseError("expected 6 columns, got " + std::to_string(cells.size()), line_no, "row");
        }
        static const char* const names[] = {"epoch", "split", "loss", "miou", "accuracy", "dice"};
        LogRow r;
        r.split = cells[1];
        double* targets[] = {&r.loss, &r.miou, &r.accuracy, &r.dice};
        auto parse_num = [&](std::size_t col, auto& dest) {
            const std::string& s = cells[col];
            auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), dest);
            if (ec != std::errc() || ptr != s.data() + s.size()) {
                throw ParseError("bad number '" + s + "'", line_no, names[col]);
            }
        };
        parse_num(0, r.epoch);
        for (std::size_t c = 0; c < 4; ++c) {
            parse_num(c + 2, *targets[c]);
        }
        log.rows.push_back(r);
    }
    return log;
}

Evaluation evaluate(const ModelGraph& model, std::span<const Sample> samples, LossKind kind,
                    double threshold, double dice_smooth, const std::vector<std::string>& class_names) {
    Evaluation out;
    out.samples = samples.size();
    if (samples.empty()) {
        return out;
    }
    NoGradGuard no_grad;
    Scorer scorer;
    scorer.threshold = threshold;
    double loss = 0.0;
    for (const Sample& s : samples) {
        const Tensor pred = forward(model, s.input);
        loss += sample_loss(pred, s.target, kind, dice_smooth).item();
        scorer.add(pred, s.target);
    }
    out.loss = loss / static_cast<double>(samples.size());
    finish(scorer, samples.front().target.numel(), class_names, out);
    return out;
}

TrainingLog train(ModelGraph& model, const SplitData& data, const TrainOptions& options) {
    TrainingLog log;
    if (data.train.empty()) {
        throw DataError("training split is empty");
    }
    if (options.epochs < 0) {
        throw ConfigError("epochs must be >= 0");
    }
    if (options.batch_size == 0) {
        throw ConfigError("batch size must be >= 1");
    }
    if (options.epochs == 0) {
        return log;
    }
    Rng rng(options.seed);
    AdamState adam;
    adam.lr = options.lr;
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    model.clear_grad();

    for (int epoch = 1; epoch <= options.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        Scorer scorer;
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const std::size_t end = std::min(order.size(), start + options.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            // Per-sample backward passes accumulate into the leaf gradients,
            // which keeps only one sample's tape alive at a time.
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = data.train[order[i]];
                const Tensor pred = forward(model, s.input);
                const Tensor l = sample_loss(pred, s.target, options.loss, options.dice_smooth);
                loss_sum += l.item();
                scorer.add(pred, s.target);
                backward(scale(l, inv));
            }
            if (options.optimizer == OptimizerKind::adam) {
                adam_step(model, adam);
            } else {
                sgd_step(model, options.lr);
            }
        }
        model.epoch = epoch;

        Evaluation tr;
        tr.loss = loss_sum / static_cast<double>(order.size());
        finish(scorer, data.train.front().target.numel(), {}, tr);
        const std::size_t first = log.rows.size();
        log.rows.push_back({epoch, "train", tr.loss, tr.miou, tr.accuracy, tr.dice});
        if (!data.val.empty()) {
            const Evaluation va = evaluate(model, data.val, options.loss, 0.5, options.dice_smooth);
            log.rows.push_back({epoch, "val", va.loss, va.miou, va.accuracy, va.dice});
        }
        if (options.on_epoch_end) {
            options.on_epoch_end(model, epoch,
                                 std::span<const LogRow>(log.rows).subspan(first));
        }
    }
    return log;
}

}  // namespace fencepipe
