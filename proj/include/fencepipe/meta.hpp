#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fencepipe/optim.hpp"
#include "fencepipe/rng.hpp"

namespace fencepipe {

/// Few-shot episode: adapt on the support set, score on the query set.
struct MetaTask {
    std::vector<Sample> support;
    std::vector<Sample> query;
};

enum class MetaOrder { first, second };

struct MetaConfig {
    double inner_lr = 0.01;  // alpha
    double outer_lr = 0.001; // beta
    int inner_steps = 1;     // P
    int shots = 1;           // N samples per class in each support set
    int tasks_per_batch = 4;
    MetaOrder order = MetaOrder::first;
    LossKind loss = LossKind::cross_entropy;
    // Step for the finite-difference Hessian-vector products of second order.
    double hvp_step = 1e-5;
};

/// Throws ConfigError for negative rates or inner_steps < 1.
void validate(const MetaConfig& cfg);

/// theta^j = theta^{j-1} - alpha * grad L_support(theta^{j-1}), j = 1..P,
/// on a copy of `model`. The model itself is never modified.
ModelGraph inner_adapt(const ModelGraph& model, const MetaTask& task, const MetaConfig& cfg);

/// theta <- theta - beta * mean_i dL_query(theta_i^P)/dtheta.
/// first: the gradient is taken at the adapted weights and passed straight
/// through; second: it is pulled back through the inner steps with
/// (I - alpha H_j) products, H_j the support-loss Hessian at theta^j.
void meta_outer_step(ModelGraph& model, const std::vector<MetaTask>& tasks, const MetaConfig& cfg);

/// Fraction of query samples whose argmax matches the one-hot target.
double query_accuracy(const ModelGraph& model, const MetaTask& task);

/// Runs `outer_steps` meta updates, each over cfg.tasks_per_batch tasks drawn
/// from `sample_task`.
void meta_train(ModelGraph& model, const std::function<MetaTask(Rng&)>& sample_task,
                const MetaConfig& cfg, int outer_steps, std::uint64_t seed);

}  // namespace fencepipe
