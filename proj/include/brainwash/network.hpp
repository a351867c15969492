#pragma once

// Forward and backward kernels for the multi-head network. Everything is a
// template over the scalar type so the same code runs on double (training,
// inference) and on Dual (Hessian-vector products for the unrolled attack).

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "brainwash/dual.hpp"
#include "brainwash/tensor.hpp"

namespace brainwash {

enum class Activation { relu, tanh, identity };

struct ArchConfig {
    // "convnet": per width a 3x3 conv (+BN) + activation + 2x2 average pool
    // while the map is at least 2x2, then global average pooling.
    // "mlp": per width a dense layer (+BN) + activation.
    std::string arch_id = "convnet";
    std::vector<int> widths = {16, 16, 16, 16};
    bool batch_norm = true;
    Activation activation = Activation::relu;
    ImageShape input{1, 8, 8};

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

enum class LayerKind { conv3x3, batch_norm, relu, tanh, avg_pool2, global_avg_pool, dense };

struct LayerSpec {
    LayerKind kind;
    ImageShape in;
    ImageShape out;
    std::size_t param_offset = 0;
    std::size_t param_count = 0;
    int bn_index = -1;
};

// ArchConfig compiled into a flat layer list with parameter offsets into θ.
struct Architecture {
    ArchConfig config;
    std::vector<LayerSpec> layers;
    std::size_t backbone_size = 0;
    int feature_dim = 0;
    std::vector<int> bn_channels;

    std::size_t head_size(int num_classes) const {
        return static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(feature_dim + 1);
    }
};

Architecture compile_architecture(const ArchConfig& config);
std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct BnLayerStats {
    std::vector<double> mean;
    std::vector<double> var;
    friend bool operator==(const BnLayerStats&, const BnLayerStats&) = default;
};

enum class Mode { train, eval };

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <class T>
struct ParamRefs {
    std::span<const T> backbone;
    std::span<const T> head;  // [K, F] weights then [K] bias
    int num_classes = 0;
};

template <class T>
struct BnCache {
    std::vector<T> mean;  // batch mean of the BN input per channel
    std::vector<T> var;   // biased batch variance per channel
    std::vector<T> inv_std;
    Tensor<T> normalized;
};

template <class T>
struct ForwardPass {
    std::vector<Tensor<T>> inputs;  // input of each backbone layer
    std::vector<BnCache<T>> bn;
    Tensor<T> features;             // [B, F, 1, 1]
    Tensor<T> logits;               // [B, K, 1, 1]
    Mode mode = Mode::eval;
    int bn_reference = 0;           // train-mode statistics come from samples [0, bn_reference)
};

template <class T>
struct Gradients {
    std::vector<T> backbone;
    std::vector<T> head;
    Tensor<T> input;
};

struct BackwardOptions {
    bool backbone = true;
    bool head = true;
    bool input = false;
    // Weight of the BN feature-statistics alignment term whose gradient is
    // injected at every BN input; needs `stats`.
    double feature_stat_weight = 0.0;
    const std::vector<BnLayerStats>* stats = nullptr;
};

namespace detail {

template <class T>
T relu(const T& x) {
    return x > T(0.0) ? x : T(0.0);
}

using std::exp;
using std::log;
using std::sqrt;
using std::tanh;

}  // namespace detail

// In train mode, `bn_reference` > 0 computes the batch statistics from the
// leading bn_reference samples only and applies them to the whole batch.
template <class T>
ForwardPass<T> forward_pass(const Architecture& arch, const ParamRefs<T>& p, const std::vector<BnLayerStats>& stats,
                            Tensor<T> input, Mode mode, int bn_reference = 0) {
    using namespace detail;
    BRAINWASH_REQUIRE(input.shape == arch.config.input, "forward: input shape does not match architecture");
    BRAINWASH_REQUIRE(p.backbone.size() == arch.backbone_size, "forward: backbone size mismatch");
    BRAINWASH_REQUIRE(p.head.size() == arch.head_size(p.num_classes), "forward: head size mismatch");
    const int B = input.n;
    BRAINWASH_REQUIRE(B >= 1, "forward: empty batch");
    BRAINWASH_REQUIRE(bn_reference >= 0 && bn_reference <= B, "forward: bad batch-norm reference count");
    const int R = bn_reference > 0 ? bn_reference : B;
    if (mode == Mode::train && !arch.bn_channels.empty()) {
        BRAINWASH_REQUIRE(R >= 2, "forward: train-mode batch norm needs batch size >= 2");
    }

    ForwardPass<T> fp;
    fp.mode = mode;
    fp.bn_reference = R;
    fp.inputs.reserve(arch.layers.size());
    fp.bn.resize(arch.bn_channels.size());
    Tensor<T> x = std::move(input);

    for (const auto& L : arch.layers) {
        Tensor<T> y(B, L.out);
        const T* w = p.backbone.data() + L.param_offset;
        switch (L.kind) {
            case LayerKind::conv3x3: {
                const int Ci = L.in.channels, Co = L.out.channels, H = L.in.height, W = L.in.width;
                const bool bias = L.param_count > static_cast<std::size_t>(Co * Ci * 9);
                for (int b = 0; b < B; ++b) {
                    for (int o = 0; o < Co; ++o) {
                        const T b0 = bias ? w[Co * Ci * 9 + o] : T(0.0);
                        for (int yy = 0; yy < H; ++yy) {
                            for (int xx = 0; xx < W; ++xx) {
                                T acc = b0;
                                for (int i = 0; i < Ci; ++i) {
                                    const T* k = w + (o * Ci + i) * 9;
                                    for (int ky = 0; ky < 3; ++ky) {
                                        const int sy = yy + ky - 1;
                                        if (sy < 0 || sy >= H) continue;
                                        for (int kx = 0; kx < 3; ++kx) {
                                            const int sx = xx + kx - 1;
                                            if (sx < 0 || sx >= W) continue;
                                            acc += k[ky * 3 + kx] * x.at(b, i, sy, sx);
                                        }
                                    }
                                }
                                y.at(b, o, yy, xx) = acc;
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::batch_norm: {
                const int C = L.in.channels;
                const int HW = L.in.height * L.in.width;
                const double count = static_cast<double>(R * HW);
                auto& cache = fp.bn[static_cast<std::size_t>(L.bn_index)];
                const auto& st = stats[static_cast<std::size_t>(L.bn_index)];
                cache.mean.assign(static_cast<std::size_t>(C), T(0.0));
                cache.var.assign(static_cast<std::size_t>(C), T(0.0));
                cache.inv_std.assign(static_cast<std::size_t>(C), T(0.0));
                cache.normalized = Tensor<T>(B, L.in);
                for (int c = 0; c < C; ++c) {
                    T mu(0.0);
                    for (int b = 0; b < R; ++b) {
                        const T* s = x.sample(b) + c * HW;
                        for (int k = 0; k < HW; ++k) mu += s[k];
                    }
                    mu /= T(count);
                    T var(0.0);
                    for (int b = 0; b < R; ++b) {
                        const T* s = x.sample(b) + c * HW;
                        for (int k = 0; k < HW; ++k) {
                            const T d = s[k] - mu;
                            var += d * d;
                        }
                    }
                    var /= T(count);
                    cache.mean[static_cast<std::size_t>(c)] = mu;
                    cache.var[static_cast<std::size_t>(c)] = var;
                    T center, inv;
                    if (mode == Mode::train) {
                        center = mu;
                        inv = T(1.0) / sqrt(var + T(kBnEpsilon));
                    } else {
                        center = T(st.mean[static_cast<std::size_t>(c)]);
                        inv = T(1.0 / std::sqrt(st.var[static_cast<std::size_t>(c)] + kBnEpsilon));
                    }
                    cache.inv_std[static_cast<std::size_t>(c)] = inv;
                    const T gamma = w[c];
                    const T beta = w[C + c];
                    for (int b = 0; b < B; ++b) {
                        const T* s = x.sample(b) + c * HW;
                        T* n = cache.normalized.sample(b) + c * HW;
                        T* o = y.sample(b) + c * HW;
                        for (int k = 0; k < HW; ++k) {
                            n[k] = (s[k] - center) * inv;
                            o[k] = gamma * n[k] + beta;
                        }
                    }
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = relu(x.data[i]);
                break;
            case LayerKind::tanh:
                for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = tanh(x.data[i]);
                break;
            case LayerKind::avg_pool2: {
                const int C = L.out.channels;
                for (int b = 0; b < B; ++b) {
                    for (int c = 0; c < C; ++c) {
                        for (int yy = 0; yy < L.out.height; ++yy) {
                            for (int xx = 0; xx < L.out.width; ++xx) {
                                y.at(b, c, yy, xx) = (x.at(b, c, 2 * yy, 2 * xx) + x.at(b, c, 2 * yy, 2 * xx + 1) +
                                                      x.at(b, c, 2 * yy + 1, 2 * xx) +
                                                      x.at(b, c, 2 * yy + 1, 2 * xx + 1)) *
                                                     T(0.25);
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::global_avg_pool: {
                const int C = L.in.channels;
                const int HW = L.in.height * L.in.width;
                const T scale(1.0 / HW);
                for (int b = 0; b < B; ++b) {
                    for (int c = 0; c < C; ++c) {
                        T acc(0.0);
                        const T* s = x.sample(b) + c * HW;
                        for (int k = 0; k < HW; ++k) acc += s[k];
                        y.at(b, c, 0, 0) = acc * scale;
                    }
                }
                break;
            }
            case LayerKind::dense: {
                const int in = static_cast<int>(L.in.size());
                const int out = L.out.channels;
                const T* bias = w + static_cast<std::size_t>(out) * in;
                for (int b = 0; b < B; ++b) {
                    const T* s = x.sample(b);
                    T* o = y.sample(b);
                    for (int j = 0; j < out; ++j) {
                        T acc = bias[j];
                        const T* row = w + static_cast<std::size_t>(j) * in;
                        for (int k = 0; k < in; ++k) acc += row[k] * s[k];
                        o[j] = acc;
                    }
                }
                break;
            }
        }
        fp.inputs.push_back(std::move(x));
        x = std::move(y);
    }

    fp.features = std::move(x);
    const int F = arch.feature_dim;
    const int K = p.num_classes;
    fp.logits = Tensor<T>(B, ImageShape{K, 1, 1});
    const T* hw = p.head.data();
    const T* hb = hw + static_cast<std::size_t>(K) * F;
    for (int b = 0; b < B; ++b) {
        const T* f = fp.features.sample(b);
        for (int k = 0; k < K; ++k) {
            T acc = hb[k];
            for (int j = 0; j < F; ++j) acc += hw[k * F + j] * f[j];
            fp.logits.data[static_cast<std::size_t>(b * K + k)] = acc;
        }
    }
    return fp;
}

template <class T>
Gradients<T> backward_pass(const Architecture& arch, const ParamRefs<T>& p, const ForwardPass<T>& fp,
                           const Tensor<T>& dlogits, const BackwardOptions& opt) {
    using namespace detail;
    const int B = fp.logits.n;
    const int F = arch.feature_dim;
    const int K = p.num_classes;
    Gradients<T> g;
    if (opt.head) g.head.assign(arch.head_size(K), T(0.0));
    if (opt.backbone) g.backbone.assign(arch.backbone_size, T(0.0));
    const bool need_backbone_chain = opt.backbone || opt.input || opt.feature_stat_weight != 0.0;

    const T* hw = p.head.data();
    Tensor<T> dx(B, fp.features.shape, T(0.0));
    for (int b = 0; b < B; ++b) {
        const T* f = fp.features.sample(b);
        T* df = dx.sample(b);
        for (int k = 0; k < K; ++k) {
            const T d = dlogits.data[static_cast<std::size_t>(b * K + k)];
            if (opt.head) {
                for (int j = 0; j < F; ++j) g.head[static_cast<std::size_t>(k * F + j)] += d * f[j];
                g.head[static_cast<std::size_t>(K * F + k)] += d;
            }
            if (need_backbone_chain) {
                for (int j = 0; j < F; ++j) df[j] += d * hw[k * F + j];
            }
        }
    }
    if (!need_backbone_chain) return g;

    for (std::size_t li = arch.layers.size(); li-- > 0;) {
        const auto& L = arch.layers[li];
        const Tensor<T>& x = fp.inputs[li];
        const T* w = p.backbone.data() + L.param_offset;
        T* gw = opt.backbone ? g.backbone.data() + L.param_offset : nullptr;
        Tensor<T> din(B, L.in, T(0.0));
        switch (L.kind) {
            case LayerKind::conv3x3: {
                const int Ci = L.in.channels, Co = L.out.channels, H = L.in.height, W = L.in.width;
                const bool bias = L.param_count > static_cast<std::size_t>(Co * Ci * 9);
                for (int b = 0; b < B; ++b) {
                    for (int o = 0; o < Co; ++o) {
                        for (int yy = 0; yy < H; ++yy) {
                            for (int xx = 0; xx < W; ++xx) {
                                const T d = dx.at(b, o, yy, xx);
                                if (gw && bias) gw[Co * Ci * 9 + o] += d;
                                for (int i = 0; i < Ci; ++i) {
                                    const T* k = w + (o * Ci + i) * 9;
                                    T* gk = gw ? gw + (o * Ci + i) * 9 : nullptr;
                                    for (int ky = 0; ky < 3; ++ky) {
                                        const int sy = yy + ky - 1;
                                        if (sy < 0 || sy >= H) continue;
                                        for (int kx = 0; kx < 3; ++kx) {
                                            const int sx = xx + kx - 1;
                                            if (sx < 0 || sx >= W) continue;
                                            if (gk) gk[ky * 3 + kx] += d * x.at(b, i, sy, sx);
                                            din.at(b, i, sy, sx) += d * k[ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::batch_norm: {
                const int C = L.in.channels;
                const int HW = L.in.height * L.in.width;
                const int R = fp.bn_reference > 0 ? fp.bn_reference : B;
                const double count = static_cast<double>(R * HW);
                const auto& cache = fp.bn[static_cast<std::size_t>(L.bn_index)];
                for (int c = 0; c < C; ++c) {
                    const T gamma = w[c];
                    const T inv = cache.inv_std[static_cast<std::size_t>(c)];
                    T sum_dy(0.0), sum_dy_xhat(0.0);
                    for (int b = 0; b < B; ++b) {
                        const T* dy = dx.sample(b) + c * HW;
                        const T* n = cache.normalized.sample(b) + c * HW;
                        for (int k = 0; k < HW; ++k) {
                            sum_dy += dy[k];
                            sum_dy_xhat += dy[k] * n[k];
                        }
                    }
                    if (gw) {
                        gw[c] += sum_dy_xhat;
                        gw[C + c] += sum_dy;
                    }
                    for (int b = 0; b < B; ++b) {
                        const T* dy = dx.sample(b) + c * HW;
                        const T* n = cache.normalized.sample(b) + c * HW;
                        T* di = din.sample(b) + c * HW;
                        for (int k = 0; k < HW; ++k) {
                            if (fp.mode == Mode::train && b < R) {
                                // dL/dxhat = dy * gamma; batch statistics depend on the input.
                                di[k] = gamma * inv *
                                        (dy[k] - sum_dy / T(count) - n[k] * sum_dy_xhat / T(count));
                            } else {
                                di[k] = gamma * inv * dy[k];
                            }
                        }
                    }
                    if (opt.feature_stat_weight != 0.0) {
                        const auto& st = (*opt.stats)[static_cast<std::size_t>(L.bn_index)];
                        const T mu = cache.mean[static_cast<std::size_t>(c)];
                        const T var = cache.var[static_cast<std::size_t>(c)];
                        const T dmu = T(2.0 * opt.feature_stat_weight / count) * (mu - T(st.mean[static_cast<std::size_t>(c)]));
                        const T dvar = T(4.0 * opt.feature_stat_weight / count) * (var - T(st.var[static_cast<std::size_t>(c)]));
                        for (int b = 0; b < R; ++b) {
                            const T* s = x.sample(b) + c * HW;
                            T* di = din.sample(b) + c * HW;
                            for (int k = 0; k < HW; ++k) di[k] += dmu + dvar * (s[k] - mu);
                        }
                    }
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t i = 0; i < x.size(); ++i) din.data[i] = x.data[i] > T(0.0) ? dx.data[i] : T(0.0);
                break;
            case LayerKind::tanh:
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const T t = tanh(x.data[i]);
                    din.data[i] = dx.data[i] * (T(1.0) - t * t);
                }
                break;
            case LayerKind::avg_pool2: {
                const int C = L.out.channels;
                for (int b = 0; b < B; ++b) {
                    for (int c = 0; c < C; ++c) {
                        for (int yy = 0; yy < L.out.height; ++yy) {
                            for (int xx = 0; xx < L.out.width; ++xx) {
                                const T d = dx.at(b, c, yy, xx) * T(0.25);
                                din.at(b, c, 2 * yy, 2 * xx) = d;
                                din.at(b, c, 2 * yy, 2 * xx + 1) = d;
                                din.at(b, c, 2 * yy + 1, 2 * xx) = d;
                                din.at(b, c, 2 * yy + 1, 2 * xx + 1) = d;
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::global_avg_pool: {
                const int C = L.in.channels;
                const int HW = L.in.height * L.in.width;
                const T scale(1.0 / HW);
                for (int b = 0; b < B; ++b) {
                    for (int c = 0; c < C; ++c) {
                        const T d = dx.at(b, c, 0, 0) * scale;
                        T* di = din.sample(b) + c * HW;
                        for (int k = 0; k < HW; ++k) di[k] = d;
                    }
                }
                break;
            }
            case LayerKind::dense: {
                const int in = static_cast<int>(L.in.size());
                const int out = L.out.channels;
                for (int b = 0; b < B; ++b) {
                    const T* s = x.sample(b);
                    const T* dy = dx.sample(b);
                    T* di = din.sample(b);
                    for (int j = 0; j < out; ++j) {
                        const T d = dy[j];
                        const T* row = w + static_cast<std::size_t>(j) * in;
                        if (gw) {
                            T* grow = gw + static_cast<std::size_t>(j) * in;
                            for (int k = 0; k < in; ++k) grow[k] += d * s[k];
                            gw[static_cast<std::size_t>(out) * in + j] += d;
                        }
                        for (int k = 0; k < in; ++k) di[k] += d * row[k];
                    }
                }
                break;
            }
        }
        dx = std::move(din);
    }
    if (opt.input) g.input = std::move(dx);
    return g;
}

// Mean cross-entropy over the batch; writes dL/dlogits.
template <class T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Tensor<T>* dlogits) {
    using namespace detail;
    const int B = logits.n;
    const int K = logits.shape.channels;
    BRAINWASH_REQUIRE(static_cast<int>(labels.size()) == B, "cross_entropy: label count mismatch");
    if (dlogits) *dlogits = Tensor<T>(B, logits.shape);
    T total(0.0);
    for (int b = 0; b < B; ++b) {
        const T* z = logits.data.data() + static_cast<std::size_t>(b) * K;
        const int y = labels[static_cast<std::size_t>(b)];
        BRAINWASH_REQUIRE(y >= 0 && y < K, "cross_entropy: label out of range");
        double zmax = value_of(z[0]);
        for (int k = 1; k < K; ++k) zmax = std::max(zmax, value_of(z[k]));
        T sum(0.0);
        for (int k = 0; k < K; ++k) sum += exp(z[k] - T(zmax));
        const T lse = log(sum) + T(zmax);
        total += lse - z[y];
        if (dlogits) {
            T* d = dlogits->data.data() + static_cast<std::size_t>(b) * K;
            for (int k = 0; k < K; ++k) d[k] = exp(z[k] - lse) / T(static_cast<double>(B));
            d[y] -= T(1.0 / B);
        }
    }
    return total / T(static_cast<double>(B));
}

template <class T>
struct LossGradients {
    T loss;
    Gradients<T> grads;
    ForwardPass<T> pass;
};

// Mean cross-entropy of head `p` on (input, labels) and its gradients.
template <class T>
LossGradients<T> classification_gradients(const Architecture& arch, const ParamRefs<T>& p,
                                          const std::vector<BnLayerStats>& stats, Tensor<T> input,
                                          std::span<const int> labels, Mode mode, const BackwardOptions& opt) {
    auto fp = forward_pass(arch, p, stats, std::move(input), mode);
    Tensor<T> dlogits;
    T loss = cross_entropy(fp.logits, labels, &dlogits);
    auto g = backward_pass(arch, p, fp, dlogits, opt);
    return {loss, std::move(g), std::move(fp)};
}

}  // namespace brainwash
