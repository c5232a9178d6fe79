#include "fencepipe/meta.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "fencepipe/error.hpp"
#include "fencepipe/rng.hpp"

namespace fencepipe {

namespace {

using GradMap = std::map<std::string, std::vector<double>>;

std::vector<std::string> trainable(const ModelGraph& model) {
    std::vector<std::string> names;
    for (const auto& n : model.weight_names()) {
        if (!model.is_frozen(n)) {
            names.push_back(n);
        }
    }
    return names;
}

GradMap loss_grad(ModelGraph& model, std::span<const Sample> samples, LossKind kind) {
    model.clear_grad();
    backward(mean_loss(model, samples, kind));
    GradMap out;
    for (const auto& n : trainable(model)) {
        const Tensor& w = model.weight(n);
        if (!w.has_grad()) {
            throw ContractError("weight '" + n + "' received no gradient");
        }
        out[n].assign(w.grad().begin(), w.grad().end());
    }
    model.clear_grad();
    return out;
}

ModelGraph shifted(const ModelGraph& base, const GradMap& dir, double step) {
    ModelGraph m = base.clone();
    for (const auto& [name, v] : dir) {
        auto d = m.weight(name).mutable_data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] += step * v[i];
        }
    }
    return m;
}

double norm(const GradMap& g) {
    double s = 0.0;
    for (const auto& [name, v] : g) {
        for (double x : v) {
            s += x * x;
        }
    }
    return std::sqrt(s);
}

}  // namespace

void validate(const MetaConfig& cfg) {
    // Zero rates are accepted: they make the update a no-op, which is a
    // useful degenerate case.
    if (!(cfg.inner_lr >= 0.0) || !(cfg.outer_lr >= 0.0)) {
        throw ConfigError("meta learning rates must be non-negative");
    }
    if (cfg.inner_steps < 1) {
        throw ConfigError("inner_steps must be >= 1");
    }
    if (cfg.order == MetaOrder::second && !(cfg.hvp_step > 0.0)) {
        throw ConfigError("hvp_step must be positive");
    }
}

ModelGraph inner_adapt(const ModelGraph& model, const MetaTask& task, const MetaConfig& cfg) {
    validate(cfg);
    if (task.support.empty()) {
        throw DataError("meta task has an empty support set");
    }
    ModelGraph adapted = model.clone();
    adapted.clear_grad();
    for (int j = 0; j < cfg.inner_steps; ++j) {
        backward(mean_loss(adapted, task.support, cfg.loss));
        sgd_step(adapted, cfg.inner_lr);
    }
    return adapted;
}

void meta_outer_step(ModelGraph& model, const std::vector<MetaTask>& tasks, const MetaConfig& cfg) {
    validate(cfg);
    if (tasks.empty()) {
        throw ContractError("meta_outer_step needs at least one task");
    }
    const auto names = trainable(model);
    GradMap total;
    for (const auto& n : names) {
        total[n].assign(model.weight(n).numel(), 0.0);
    }
    // Tasks are reduced in list order so the sum is reproducible.
    for (const MetaTask& task : tasks) {
        if (task.query.empty()) {
            throw DataError("meta task has an empty query set");
        }
        if (task.support.empty()) {
            throw DataError("meta task has an empty support set");
        }
        std::vector<ModelGraph> path;  // theta^0 .. theta^{P-1}
        ModelGraph adapted = model.clone();
        adapted.clear_grad();
        for (int j = 0; j < cfg.inner_steps; ++j) {
            if (cfg.order == MetaOrder::second) {
                path.push_back(adapted.clone());
            }
            backward(mean_loss(adapted, task.support, cfg.loss));
            sgd_step(adapted, cfg.inner_lr);
        }
        GradMap v = loss_grad(adapted, task.query, cfg.loss);
        if (cfg.order == MetaOrder::second) {
            // v <- (I - alpha H_j) v for j = P-1 .. 0, with H_j v from central
            // differences of the support gradient.
            for (auto it = path.rbegin(); it != path.rend(); ++it) {
                const double vn = norm(v);
                if (vn == 0.0 || cfg.inner_lr == 0.0) {
                    continue;
                }
                const double eps = cfg.hvp_step / std::max(1.0, vn);
                ModelGraph plus = shifted(*it, v, eps);
                ModelGraph minus = shifted(*it, v, -eps);
                const GradMap gp = loss_grad(plus, task.support, cfg.loss);
                const GradMap gm = loss_grad(minus, task.support, cfg.loss);
                for (auto& [name, vec] : v) {
                    const auto& a = gp.at(name);
                    const auto& b = gm.at(name);
                    for (std::size_t i = 0; i < vec.size(); ++i) {
                        vec[i] -= cfg.inner_lr * (a[i] - b[i]) / (2.0 * eps);
                    }
                }
            }
        }
        for (auto& [name, vec] : total) {
            const auto& g = v.at(name);
            for (std::size_t i = 0; i < vec.size(); ++i) {
                vec[i] += g[i];
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(tasks.size());
    for (const auto& [name, vec] : total) {
        auto d = model.weight(name).mutable_data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] -= cfg.outer_lr * vec[i] * inv;
        }
    }
    model.clear_grad();
}

double query_accuracy(const ModelGraph& model, const MetaTask& task) {
    if (task.query.empty()) {
        throw DataError("meta task has an empty query set");
    }
    NoGradGuard no_grad;
    std::size_t correct = 0;
    for (const Sample& s : task.query) {
        const Tensor p = forward(model, s.input);
        const auto pd = p.data();
        const auto td = s.target.data();
        const auto pa = std::max_element(pd.begin(), pd.end()) - pd.begin();
        const auto ta = std::max_element(td.begin(), td.end()) - td.begin();
        correct += pa == ta ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(task.query.size());
}

void meta_train(ModelGraph& model, const std::function<MetaTask(Rng&)>& sample_task,
                const MetaConfig& cfg, int outer_steps, std::uint64_t seed) {
    validate(cfg);
    if (cfg.tasks_per_batch < 1) {
        throw ConfigError("tasks_per_batch must be >= 1");
    }
    Rng rng(seed);
    for (int step = 0; step < outer_steps; ++step) {
        std::vector<MetaTask> batch;
        batch.reserve(static_cast<std::size_t>(cfg.tasks_per_batch));
        for (int t = 0; t < cfg.tasks_per_batch; ++t) {
            batch.push_back(sample_task(rng));
        }
        meta_outer_step(model, batch, cfg);
    }
}

}  // namespace fencepipe
