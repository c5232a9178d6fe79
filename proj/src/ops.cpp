#include "fencepipe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fencepipe/error.hpp"

namespace fencepipe {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;
using BackwardFn = std::function<void(const detail::Node&)>;

void check_finite(const std::vector<double>& values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

Tensor make_op(Shape shape, std::vector<double> values, const char* op,
               std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
    check_finite(values, op);
    Tensor out(std::move(shape), std::move(values));
    bool needs_grad = false;
    if (!NoGradGuard::grad_enabled()) {
        return out;
    }
    for (const Tensor* t : inputs) {
        needs_grad = needs_grad || t->requires_grad();
    }
    if (needs_grad) {
        auto& node = *out.node();
        node.requires_grad = true;
        node.op = op;
        for (const Tensor* t : inputs) {
            node.parents.push_back(t->node());
        }
        node.backward_fn = std::move(fn);
    }
    return out;
}

// Grad buffer of a parent, or nullptr when it does not take gradients.
double* grad_of(const NodePtr& n) { return n->requires_grad ? n->ensure_grad().data() : nullptr; }

void require_nonempty(const Tensor& t, const char* op) {
    if (t.empty()) {
        throw EmptyInputError(std::string(op) + ": empty input");
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                             std::to_string(rank) + ", got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

void check_bias(const Tensor& bias, std::size_t out_channels, const char* op) {
    if (bias.rank() != 1 || bias.dim(0) != out_channels) {
        throw DimensionError(std::string(op) + ": bias must be [" + std::to_string(out_channels) +
                             "], got " + shape_str(bias.shape()));
    }
}

// In-place relu on a forward result.
void apply_relu(std::vector<double>& values) {
    for (double& v : values) {
        v = v > 0.0 ? v : 0.0;
    }
}

// Upstream gradient gated by a fused relu (subgradient 0 at 0).
std::vector<double> gated_grad(const detail::Node& out, Activation act) {
    std::vector<double> g = out.grad;
    if (act == Activation::relu) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (out.data[i] <= 0.0) {
                g[i] = 0.0;
            }
        }
    }
    return g;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, Padding padding,
              Activation activation) {
    constexpr const char* op = "conv2d";
    require_nonempty(input, op);
    require_rank(input, 3, op, "input");
    require_rank(weights, 4, op, "weights");
    const std::size_t H = input.dim(0), W = input.dim(1), K = input.dim(2);
    if (weights.dim(0) != 3 || weights.dim(1) != 3 || weights.dim(2) != K) {
        throw DimensionError(std::string(op) + ": weights " + shape_str(weights.shape()) +
                             " incompatible with input " + shape_str(input.shape()));
    }
    const std::size_t L = weights.dim(3);
    check_bias(bias, L, op);
    const std::ptrdiff_t off = padding == Padding::same ? 1 : 0;
    if (padding == Padding::valid && (H < 3 || W < 3)) {
        throw DimensionError(std::string(op) + ": valid padding needs at least 3x3 input, got " +
                             shape_str(input.shape()));
    }
    const std::size_t Ho = padding == Padding::same ? H : H - 2;
    const std::size_t Wo = padding == Padding::same ? W : W - 2;

    const double* in = input.data().data();
    const double* w = weights.data().data();
    const double* b = bias.data().data();
    std::vector<double> out(Ho * Wo * L);
    for (std::size_t y = 0; y < Ho; ++y) {
        for (std::size_t x = 0; x < Wo; ++x) {
            double* o = out.data() + (y * Wo + x) * L;
            std::copy(b, b + L, o);
            for (std::ptrdiff_t dy = 0; dy < 3; ++dy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + dy - off;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
                    continue;
                }
                for (std::ptrdiff_t dx = 0; dx < 3; ++dx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x) + dx - off;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) {
                        continue;
                    }
                    const double* a = in + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * K;
                    const double* wt = w + static_cast<std::size_t>(dy * 3 + dx) * K * L;
                    for (std::size_t k = 0; k < K; ++k) {
                        const double av = a[k];
                        if (av == 0.0) {
                            continue;
                        }
                        const double* wk = wt + k * L;
                        for (std::size_t l = 0; l < L; ++l) {
                            o[l] += av * wk[l];
                        }
                    }
                }
            }
        }
    }
    if (activation == Activation::relu) {
        apply_relu(out);
    }

    NodePtr pin = input.node(), pw = weights.node(), pb = bias.node();
    return make_op(
        {Ho, Wo, L}, std::move(out), op, {&input, &weights, &bias},
        [=](const detail::Node& self) {
            const std::vector<double> g = gated_grad(self, activation);
            double* gin = grad_of(pin);
            double* gw = grad_of(pw);
            double* gb = grad_of(pb);
            const double* a_all = pin->data.data();
            const double* w_all = pw->data.data();
            for (std::size_t y = 0; y < Ho; ++y) {
                for (std::size_t x = 0; x < Wo; ++x) {
                    const double* go = g.data() + (y * Wo + x) * L;
                    if (gb != nullptr) {
                        for (std::size_t l = 0; l < L; ++l) {
                            gb[l] += go[l];
                        }
                    }
                    for (std::ptrdiff_t dy = 0; dy < 3; ++dy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + dy - off;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
                            continue;
                        }
                        for (std::ptrdiff_t dx = 0; dx < 3; ++dx) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x) + dx - off;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) {
                                continue;
                            }
                            const std::size_t pix =
                                (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * K;
                            const std::size_t tap = static_cast<std::size_t>(dy * 3 + dx) * K * L;
                            for (std::size_t k = 0; k < K; ++k) {
                                if (gin != nullptr) {
                                    const double* wk = w_all + tap + k * L;
                                    double s = 0.0;
                                    for (std::size_t l = 0; l < L; ++l) {
                                        s += wk[l] * go[l];
                                    }
                                    gin[pix + k] += s;
                                }
                                if (gw != nullptr) {
                                    const double av = a_all[pix + k];
                                    if (av != 0.0) {
                                        double* gwk = gw + tap + k * L;
                                        for (std::size_t l = 0; l < L; ++l) {
                                            gwk[l] += av * go[l];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor conv1x1(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    constexpr const char* op = "conv1x1";
    require_nonempty(input, op);
    require_rank(input, 3, op, "input");
    require_rank(weights, 4, op, "weights");
    const std::size_t H = input.dim(0), W = input.dim(1), K = input.dim(2);
    if (weights.dim(0) != 1 || weights.dim(1) != 1 || weights.dim(2) != K) {
        throw DimensionError(std::string(op) + ": weights " + shape_str(weights.shape()) +
                             " incompatible with input " + shape_str(input.shape()));
    }
    const std::size_t L = weights.dim(3);
    check_bias(bias, L, op);
    const std::size_t P = H * W;
    const double* in = input.data().data();
    const double* w = weights.data().data();
    const double* b = bias.data().data();
    std::vector<double> out(P * L);
    for (std::size_t p = 0; p < P; ++p) {
        double* o = out.data() + p * L;
        std::copy(b, b + L, o);
        for (std::size_t k = 0; k < K; ++k) {
            const double av = in[p * K + k];
            for (std::size_t l = 0; l < L; ++l) {
                o[l] += av * w[k * L + l];
            }
        }
    }
    NodePtr pin = input.node(), pw = weights.node(), pb = bias.node();
    return make_op({H, W, L}, std::move(out), op, {&input, &weights, &bias},
                   [=](const detail::Node& self) {
                       const double* g = self.grad.data();
                       double* gin = grad_of(pin);
                       double* gw = grad_of(pw);
                       double* gb = grad_of(pb);
                       for (std::size_t p = 0; p < P; ++p) {
                           const double* go = g + p * L;
                           if (gb != nullptr) {
                               for (std::size_t l = 0; l < L; ++l) {
                                   gb[l] += go[l];
                               }
                           }
                           for (std::size_t k = 0; k < K; ++k) {
                               if (gin != nullptr) {
                                   double s = 0.0;
                                   for (std::size_t l = 0; l < L; ++l) {
                                       s += pw->data[k * L + l] * go[l];
                                   }
                                   gin[p * K + k] += s;
                               }
                               if (gw != nullptr) {
                                   const double av = pin->data[p * K + k];
                                   for (std::size_t l = 0; l < L; ++l) {
                                       gw[k * L + l] += av * go[l];
                                   }
                               }
                           }
                       }
                   });
}

Tensor maxpool2(const Tensor& input) {
    constexpr const char* op = "maxpool2";
    require_nonempty(input, op);
    require_rank(input, 3, op, "input");
    const std::size_t H = input.dim(0), W = input.dim(1), K = input.dim(2);
    if (H % 2 != 0 || W % 2 != 0) {
        throw DimensionError(std::string(op) + ": height and width must be even, got " +
                             shape_str(input.shape()));
    }
    const std::size_t Ho = H / 2, Wo = W / 2;
    const double* in = input.data().data();
    std::vector<double> out(Ho * Wo * K);
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t y = 0; y < Ho; ++y) {
        for (std::size_t x = 0; x < Wo; ++x) {
            for (std::size_t k = 0; k < K; ++k) {
                std::size_t best = ((2 * y) * W + 2 * x) * K + k;
                for (std::size_t i = 0; i < 2; ++i) {
                    for (std::size_t j = 0; j < 2; ++j) {
                        const std::size_t idx = ((2 * y + i) * W + 2 * x + j) * K + k;
                        if (in[idx] > in[best]) {
                            best = idx;
                        }
                    }
                }
                const std::size_t o = (y * Wo + x) * K + k;
                out[o] = in[best];
                argmax[o] = best;
            }
        }
    }
    NodePtr pin = input.node();
    return make_op({Ho, Wo, K}, std::move(out), op, {&input},
                   [pin, argmax = std::move(argmax)](const detail::Node& self) {
                       double* gin = grad_of(pin);
                       for (std::size_t o = 0; o < argmax.size(); ++o) {
                           gin[argmax[o]] += self.grad[o];
                       }
                   });
}

Tensor upconv2(const Tensor& input, const Tensor& weights, const Tensor& bias, Activation activation) {
    constexpr const char* op = "upconv2";
    require_nonempty(input, op);
    require_rank(input, 3, op, "input");
    require_rank(weights, 4, op, "weights");
    const std::size_t H = input.dim(0), W = input.dim(1), K = input.dim(2);
    if (weights.dim(0) != 2 || weights.dim(1) != 2 || weights.dim(2) != K) {
        throw DimensionError(std::string(op) + ": weights " + shape_str(weights.shape()) +
                             " incompatible with input " + shape_str(input.shape()));
    }
    const std::size_t L = weights.dim(3);
    check_bias(bias, L, op);
    const std::size_t Ho = 2 * H, Wo = 2 * W;
    const double* in = input.data().data();
    const double* w = weights.data().data();
    const double* b = bias.data().data();
    std::vector<double> out(Ho * Wo * L);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const double* a = in + (y * W + x) * K;
            for (std::size_t i = 0; i < 2; ++i) {
                for (std::size_t j = 0; j < 2; ++j) {
                    double* o = out.data() + ((2 * y + i) * Wo + 2 * x + j) * L;
                    std::copy(b, b + L, o);
                    const double* wt = w + (i * 2 + j) * K * L;
                    for (std::size_t k = 0; k < K; ++k) {
                        const double av = a[k];
                        for (std::size_t l = 0; l < L; ++l) {
                            o[l] += av * wt[k * L + l];
                        }
                    }
                }
            }
        }
    }
    if (activation == Activation::relu) {
        apply_relu(out);
    }
    NodePtr pin = input.node(), pw = weights.node(), pb = bias.node();
    return make_op({Ho, Wo, L}, std::move(out), op, {&input, &weights, &bias},
                   [=](const detail::Node& self) {
                       const std::vector<double> g = gated_grad(self, activation);
                       double* gin = grad_of(pin);
                       double* gw = grad_of(pw);
                       double* gb = grad_of(pb);
                       for (std::size_t y = 0; y < H; ++y) {
                           for (std::size_t x = 0; x < W; ++x) {
                               const std::size_t pix = (y * W + x) * K;
                               for (std::size_t i = 0; i < 2; ++i) {
                                   for (std::size_t j = 0; j < 2; ++j) {
                                       const double* go = g.data() + ((2 * y + i) * Wo + 2 * x + j) * L;
                                       const std::size_t tap = (i * 2 + j) * K * L;
                                       if (gb != nullptr) {
                                           for (std::size_t l = 0; l < L; ++l) {
                                               gb[l] += go[l];
                                           }
                                       }
                                       for (std::size_t k = 0; k < K; ++k) {
                                           if (gin != nullptr) {
                                               double s = 0.0;
                                               for (std::size_t l = 0; l < L; ++l) {
                                                   s += pw->data[tap + k * L + l] * go[l];
                                               }
                                               gin[pix + k] += s;
                                           }
                                           if (gw != nullptr) {
                                               const double av = pin->data[pix + k];
                                               for (std::size_t l = 0; l < L; ++l) {
                                                   gw[tap + k * L + l] += av * go[l];
                                               }
                                           }
                                       }
                                   }
                               }
                           }
                       }
                   });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    constexpr const char* op = "concat_channels";
    require_rank(a, 3, op, "first input");
    require_rank(b, 3, op, "second input");
    if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
        throw DimensionError(std::string(op) + ": spatial mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    const std::size_t P = a.dim(0) * a.dim(1), K1 = a.dim(2), K2 = b.dim(2), K = K1 + K2;
    std::vector<double> out(P * K);
    for (std::size_t p = 0; p < P; ++p) {
        std::copy_n(a.data().data() + p * K1, K1, out.data() + p * K);
        std::copy_n(b.data().data() + p * K2, K2, out.data() + p * K + K1);
    }
    NodePtr pa = a.node(), pb = b.node();
    return make_op({a.dim(0), a.dim(1), K}, std::move(out), op, {&a, &b},
                   [=](const detail::Node& self) {
                       double* ga = grad_of(pa);
                       double* gb = grad_of(pb);
                       for (std::size_t p = 0; p < P; ++p) {
                           const double* g = self.grad.data() + p * K;
                           if (ga != nullptr) {
                               for (std::size_t k = 0; k < K1; ++k) {
                                   ga[p * K1 + k] += g[k];
                               }
                           }
                           if (gb != nullptr) {
                               for (std::size_t k = 0; k < K2; ++k) {
                                   gb[p * K2 + k] += g[K1 + k];
                               }
                           }
                       }
                   });
}

Tensor center_crop(const Tensor& input, std::size_t height, std::size_t width) {
    constexpr const char* op = "center_crop";
    require_rank(input, 3, op, "input");
    const std::size_t H = input.dim(0), W = input.dim(1), K = input.dim(2);
    if (height > H || width > W) {
        throw DimensionError(std::string(op) + ": cannot crop " + shape_str(input.shape()) + " to " +
                             std::to_string(height) + "x" + std::to_string(width));
    }
    const std::size_t oy = (H - height) / 2, ox = (W - width) / 2;
    std::vector<double> out(height * width * K);
    for (std::size_t y = 0; y < height; ++y) {
        std::copy_n(input.data().data() + ((y + oy) * W + ox) * K, width * K,
                    out.data() + y * width * K);
    }
    NodePtr pin = input.node();
    return make_op({height, width, K}, std::move(out), op, {&input},
                   [=](const detail::Node& self) {
                       double* gin = grad_of(pin);
                       for (std::size_t y = 0; y < height; ++y) {
                           for (std::size_t i = 0; i < width * K; ++i) {
                               gin[((y + oy) * W + ox) * K + i] += self.grad[y * width * K + i];
                           }
                       }
                   });
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias, Activation activation) {
    constexpr const char* op = "dense";
    require_nonempty(input, op);
    require_rank(input, 1, op, "input");
    require_rank(weights, 2, op, "weights");
    const std::size_t N = input.dim(0);
    if (weights.dim(0) != N) {
        throw DimensionError(std::string(op) + ": weights " + shape_str(weights.shape()) +
                             " incompatible with input " + shape_str(input.shape()));
    }
    const std::size_t M = weights.dim(1);
    check_bias(bias, M, op);
    std::vector<double> out(bias.data().begin(), bias.data().end());
    for (std::size_t n = 0; n < N; ++n) {
        const double av = input[n];
        for (std::size_t m = 0; m < M; ++m) {
            out[m] += av * weights[n * M + m];
        }
    }
    if (activation == Activation::relu) {
        apply_relu(out);
    }
    NodePtr pin = input.node(), pw = weights.node(), pb = bias.node();
    return make_op({M}, std::move(out), op, {&input, &weights, &bias},
                   [=](const detail::Node& self) {
                       const std::vector<double> g = gated_grad(self, activation);
                       double* gin = grad_of(pin);
                       double* gw = grad_of(pw);
                       double* gb = grad_of(pb);
                       for (std::size_t m = 0; m < M && gb != nullptr; ++m) {
                           gb[m] += g[m];
                       }
                       for (std::size_t n = 0; n < N; ++n) {
                           if (gin != nullptr) {
                               double s = 0.0;
                               for (std::size_t m = 0; m < M; ++m) {
                                   s += pw->data[n * M + m] * g[m];
                               }
                               gin[n] += s;
                           }
                           if (gw != nullptr) {
                               for (std::size_t m = 0; m < M; ++m) {
                                   gw[n * M + m] += pin->data[n] * g[m];
                               }
                           }
                       }
                   });
}

Tensor flatten(const Tensor& input) {
    NodePtr pin = input.node();
    std::vector<double> out(input.data().begin(), input.data().end());
    return make_op({input.numel()}, std::move(out), "flatten", {&input},
                   [pin](const detail::Node& self) {
                       double* gin = grad_of(pin);
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                           gin[i] += self.grad[i];
                       }
                   });
}

Tensor relu(const Tensor& input) {
    std::vector<double> out(input.data().begin(), input.data().end());
    apply_relu(out);
    NodePtr pin = input.node();
    return make_op(input.shape(), std::move(out), "relu", {&input},
                   [pin](const detail::Node& self) {
                       double* gin = grad_of(pin);
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                           if (self.data[i] > 0.0) {
                               gin[i] += self.grad[i];
                           }
                       }
                   });
}

Tensor global_avg_pool(const Tensor& input) {
    constexpr const char* op = "global_avg_pool";
    require_nonempty(input, op);
    require_rank(input, 3, op, "input");
    const std::size_t P = input.dim(0) * input.dim(1), K = input.dim(2);
    std::vector<double> out(K, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t k = 0; k < K; ++k) {
            out[k] += input[p * K + k];
        }
    }
    const double inv = 1.0 / static_cast<double>(P);
    for (double& v : out) {
        v *= inv;
    }
    NodePtr pin = input.node();
    return make_op({K}, std::move(out), op, {&input}, [=](const detail::Node& self) {
        double* gin = grad_of(pin);
        for (std::size_t p = 0; p < P; ++p) {
            for (std::size_t k = 0; k < K; ++k) {
                gin[p * K + k] += self.grad[k] * inv;
            }
        }
    });
}

Tensor activate(const Tensor& input, ProbabilityMap kind) {
    NodePtr pin = input.node();
    std::vector<double> out(input.numel());
    if (kind == ProbabilityMap::sigmoid) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double x = input[i];
            if (x >= 0.0) {
                out[i] = 1.0 / (1.0 + std::exp(-x));
            } else {
                const double e = std::exp(x);
                out[i] = e / (1.0 + e);
            }
        }
        return make_op(input.shape(), std::move(out), "sigmoid", {&input},
                       [pin](const detail::Node& self) {
                           double* gin = grad_of(pin);
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               const double s = self.data[i];
                               gin[i] += self.grad[i] * s * (1.0 - s);
                           }
                       });
    }

    if (input.rank() == 0) {
        throw DimensionError("softmax: needs at least one dimension");
    }
    const std::size_t C = input.shape().back();
    if (C == 0) {
        throw EmptyInputError("softmax: empty class dimension");
    }
    const std::size_t rows = input.numel() / C;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = input.data().data() + r * C;
        double* s = out.data() + r * C;
        const double mx = *std::max_element(x, x + C);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            s[c] = std::exp(x[c] - mx);
            z += s[c];
        }
        for (std::size_t c = 0; c < C; ++c) {
            s[c] /= z;
        }
    }
    return make_op(input.shape(), std::move(out), "softmax", {&input},
                   [pin, rows, C](const detail::Node& self) {
                       double* gin = grad_of(pin);
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* s = self.data.data() + r * C;
                           const double* g = self.grad.data() + r * C;
                           double dot = 0.0;
                           for (std::size_t c = 0; c < C; ++c) {
                               dot += g[c] * s[c];
                           }
                           for (std::size_t c = 0; c < C; ++c) {
                               gin[r * C + c] += s[c] * (g[c] - dot);
                           }
                       }
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] + b[i];
    }
    NodePtr pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), "add", {&a, &b}, [pa, pb](const detail::Node& self) {
        for (const NodePtr& p : {pa, pb}) {
            if (double* g = grad_of(p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * b[i];
    }
    NodePtr pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), "mul", {&a, &b}, [pa, pb](const detail::Node& self) {
        double* ga = grad_of(pa);
        double* gb = grad_of(pb);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (ga != nullptr) {
                ga[i] += self.grad[i] * pb->data[i];
            }
            if (gb != nullptr) {
                gb[i] += self.grad[i] * pa->data[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * factor;
    }
    NodePtr pa = a.node();
    return make_op(a.shape(), std::move(out), "scale", {&a}, [pa, factor](const detail::Node& self) {
        double* g = grad_of(pa);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[i] += self.grad[i] * factor;
        }
    });
}

Tensor square(const Tensor& a) { return mul(a, a); }

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) {
        total += v;
    }
    NodePtr pa = a.node();
    return make_op({}, {total}, "sum", {&a}, [pa](const detail::Node& self) {
        double* g = grad_of(pa);
        for (std::size_t i = 0; i < pa->data.size(); ++i) {
            g[i] += self.grad[0];
        }
    });
}

Tensor mean(const Tensor& a) {
    require_nonempty(a, "mean");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor cross_entropy_loss(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "cross_entropy_loss");
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        if (target[i] != 0.0) {
            loss -= target[i] * std::log(std::max(pred[i], kLogClamp));
        }
    }
    NodePtr pp = pred.node(), pt = target.node();
    return make_op({}, {loss}, "cross_entropy", {&pred, &target}, [pp, pt](const detail::Node& self) {
        const double g = self.grad[0];
        double* gp = grad_of(pp);
        double* gt = grad_of(pt);
        for (std::size_t i = 0; i < pp->data.size(); ++i) {
            const double p = pp->data[i];
            if (gp != nullptr && p > kLogClamp) {
                gp[i] -= g * pt->data[i] / p;
            }
            if (gt != nullptr) {
                gt[i] -= g * std::log(std::max(p, kLogClamp));
            }
        }
    });
}

Tensor binary_cross_entropy(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "binary_cross_entropy");
    require_nonempty(pred, "binary_cross_entropy");
    const double n = static_cast<double>(pred.numel());
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double p = pred[i], t = target[i];
        loss -= t * std::log(std::max(p, kLogClamp)) + (1.0 - t) * std::log(std::max(1.0 - p, kLogClamp));
    }
    loss /= n;
    NodePtr pp = pred.node(), pt = target.node();
    return make_op({}, {loss}, "binary_cross_entropy", {&pred, &target},
                   [pp, pt, n](const detail::Node& self) {
                       const double g = self.grad[0] / n;
                       double* gp = grad_of(pp);
                       double* gt = grad_of(pt);
                       for (std::size_t i = 0; i < pp->data.size(); ++i) {
                           const double p = pp->data[i], t = pt->data[i];
                           if (gp != nullptr) {
                               double d = 0.0;
                               if (p > kLogClamp) {
                                   d -= t / p;
                               }
                               if (1.0 - p > kLogClamp) {
                                   d += (1.0 - t) / (1.0 - p);
                               }
                               gp[i] += g * d;
                           }
                           if (gt != nullptr) {
                               gt[i] -= g * (std::log(std::max(p, kLogClamp)) -
                                             std::log(std::max(1.0 - p, kLogClamp)));
                           }
                       }
                   });
}

Tensor soft_dice_loss(const Tensor& pred, const Tensor& target, double smooth) {
    require_same_shape(pred, target, "soft_dice_loss");
    double inter = 0.0, total = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        inter += pred[i] * target[i];
        total += pred[i] + target[i];
    }
    const double num = 2.0 * inter + smooth;
    const double den = total + smooth;
    if (den == 0.0) {
        throw NumericError("soft_dice_loss: zero denominator (empty masks with smooth = 0)");
    }
    NodePtr pp = pred.node(), pt = target.node();
    return make_op({}, {-num / den}, "soft_dice", {&pred, &target},
                   [pp, pt, num, den](const detail::Node& self) {
                       const double g = self.grad[0];
                       const double den2 = den * den;
                       double* gp = grad_of(pp);
                       double* gt = grad_of(pt);
                       for (std::size_t i = 0; i < pp->data.size(); ++i) {
                           if (gp != nullptr) {
                               gp[i] -= g * (2.0 * pt->data[i] * den - num) / den2;
                           }
                           if (gt != nullptr) {
                               gt[i] -= g * (2.0 * pp->data[i] * den - num) / den2;
                           }
                       }
                   });
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse_loss");
    require_nonempty(pred, "mse_loss");
    const double n = static_cast<double>(pred.numel());
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = pred[i] - target[i];
        loss += d * d;
    }
    NodePtr pp = pred.node(), pt = target.node();
    return make_op({}, {loss / n}, "mse", {&pred, &target}, [pp, pt, n](const detail::Node& self) {
        const double g = 2.0 * self.grad[0] / n;
        double* gp = grad_of(pp);
        double* gt = grad_of(pt);
        for (std::size_t i = 0; i < pp->data.size(); ++i) {
            const double d = pp->data[i] - pt->data[i];
            if (gp != nullptr) {
                gp[i] += g * d;
            }
            if (gt != nullptr) {
                gt[i] -= g * d;
            }
        }
    });
}

}  // namespace fencepipe
