#include "brainwash/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "brainwash/archive.hpp"
#include "brainwash/rng.hpp"

namespace brainwash {

std::string to_string(AttackMode m) { return m == AttackMode::reckless ? "reckless" : "cautious"; }

AttackMode attack_mode_from_string(const std::string& s) {
    if (s == "reckless") return AttackMode::reckless;
    if (s == "cautious") return AttackMode::cautious;
    throw ValidationError("unknown attack mode '" + s + "'");
}

std::string to_string(OuterOptimizer o) {
    switch (o) {
        case OuterOptimizer::adam: return "adam";
        case OuterOptimizer::signed_gradient: return "signed";
        case OuterOptimizer::gradient: return "gradient";
    }
    return "adam";
}

OuterOptimizer outer_optimizer_from_string(const std::string& s) {
    if (s == "adam") return OuterOptimizer::adam;
    if (s == "signed") return OuterOptimizer::signed_gradient;
    if (s == "gradient") return OuterOptimizer::gradient;
    throw ValidationError("unknown outer optimizer '" + s + "'");
}

std::string to_string(UnrollGradient g) { return g == UnrollGradient::exact ? "exact" : "finite_difference"; }

UnrollGradient unroll_gradient_from_string(const std::string& s) {
    if (s == "exact") return UnrollGradient::exact;
    if (s == "finite_difference") return UnrollGradient::finite_difference;
    throw ValidationError("unknown unroll gradient mode '" + s + "'");
}

std::string to_string(BnStatsModel b) { return b == BnStatsModel::frozen ? "frozen" : "poisoned"; }

BnStatsModel bn_stats_model_from_string(const std::string& s) {
    if (s == "frozen") return BnStatsModel::frozen;
    if (s == "poisoned") return BnStatsModel::poisoned;
    throw ValidationError("unknown BN statistics model '" + s + "'");
}

void AttackConfig::validate() const {
    BRAINWASH_REQUIRE(epsilon > 0.0, "attack: ε must be > 0");
    BRAINWASH_REQUIRE(k >= 1, "attack: k must be >= 1");
    BRAINWASH_REQUIRE(eta >= 0.0, "attack: η must be >= 0");
    BRAINWASH_REQUIRE(outer_iterations >= 0, "attack: outer iterations must be >= 0");
    BRAINWASH_REQUIRE(outer_step > 0.0, "attack: outer step must be > 0");
    BRAINWASH_REQUIRE(inner_lr >= 0.0, "attack: inner learning rate must be >= 0");
    BRAINWASH_REQUIRE(proxy_batch >= 1, "attack: proxy batch must be >= 1");
    BRAINWASH_REQUIRE(task_batch >= 2, "attack: task batch must be >= 2");
    BRAINWASH_REQUIRE(max_retries >= 0, "attack: max retries must be >= 0");
}

nlohmann::json AttackConfig::to_json() const {
    return {{"epsilon", epsilon},
            {"mode", to_string(mode)},
            {"eta", mode == AttackMode::reckless ? 0.0 : eta},
            {"k", k},
            {"outer_iterations", outer_iterations},
            {"outer_step", outer_step},
            {"inner_lr", inner_lr},
            {"proxy_batch", proxy_batch},
            {"task_batch", task_batch},
            {"seed", seed},
            {"optimizer", to_string(optimizer)},
            {"gradient", to_string(gradient)},
            {"bn_stats", to_string(bn_stats)},
            {"max_retries", max_retries}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
    AttackConfig c;
    c.epsilon = j.value("epsilon", c.epsilon);
    c.mode = attack_mode_from_string(j.value("mode", std::string("reckless")));
    c.eta = j.value("eta", c.eta);
    c.k = j.value("k", c.k);
    c.outer_iterations = j.value("outer_iterations", c.outer_iterations);
    c.outer_step = j.value("outer_step", c.outer_step);
    c.inner_lr = j.value("inner_lr", c.inner_lr);
    c.proxy_batch = j.value("proxy_batch", c.proxy_batch);
    c.task_batch = j.value("task_batch", c.task_batch);
    c.seed = j.value("seed", c.seed);
    c.optimizer = outer_optimizer_from_string(j.value("optimizer", std::string("adam")));
    c.gradient = unroll_gradient_from_string(j.value("gradient", std::string("exact")));
    c.bn_stats = bn_stats_model_from_string(j.value("bn_stats", std::string("poisoned")));
    c.max_retries = j.value("max_retries", c.max_retries);
    c.validate();
    return c;
}

void NoisePack::validate() const {
    BRAINWASH_REQUIRE(epsilon > 0.0, "noise pack: ε must be > 0");
    BRAINWASH_REQUIRE(deltas.n == static_cast<int>(mask.selected.size()), "noise pack: mask length mismatch");
    BRAINWASH_REQUIRE(mode == AttackMode::cautious || eta == 0.0, "noise pack: reckless mode stores η = 0");
    const std::size_t s = deltas.sample_size();
    for (int i = 0; i < deltas.n; ++i) {
        const double* d = deltas.sample(i);
        for (std::size_t k = 0; k < s; ++k) {
            BRAINWASH_REQUIRE(std::abs(d[k]) <= epsilon, "noise pack: |δ| exceeds ε");
            BRAINWASH_REQUIRE(mask.selected[static_cast<std::size_t>(i)] || d[k] == 0.0,
                              "noise pack: non-zero δ outside the injection mask");
        }
    }
}

Tensor<double> project_linf(const Tensor<double>& delta, double epsilon) {
    Tensor<double> out = delta;
    project_linf_inplace(out.data, epsilon);
    return out;
}

void project_linf_inplace(std::span<double> delta, double epsilon) {
    BRAINWASH_REQUIRE(epsilon > 0.0, "project_linf: ε must be > 0");
    for (auto& d : delta) d = std::clamp(d, -epsilon, epsilon);
}

TaskDataset apply_noise(const TaskDataset& task, const NoisePack& pack) {
    BRAINWASH_REQUIRE(pack.task_id == task.task_id, "apply_noise: noise pack is for task " +
                                                        std::to_string(pack.task_id) + ", not " +
                                                        std::to_string(task.task_id));
    BRAINWASH_REQUIRE(pack.deltas.n == task.size() && pack.deltas.shape == task.images.shape,
                      "apply_noise: noise shape does not match the task");
    BRAINWASH_REQUIRE(static_cast<int>(pack.mask.selected.size()) == task.size(), "apply_noise: mask length mismatch");
    TaskDataset out = task;
    const std::size_t s = task.images.sample_size();
    for (int i = 0; i < task.size(); ++i) {
        if (!pack.mask.selected[static_cast<std::size_t>(i)]) continue;
        const double* x = task.images.sample(i);
        const double* d = pack.deltas.sample(i);
        double* o = out.images.sample(i);
        for (std::size_t k = 0; k < s; ++k) o[k] = std::clamp(x[k] + d[k], 0.0, 1.0);
    }
    return out;
}

NoisePack uniform_noise_baseline(const TaskDataset& task, double epsilon, const InjectionMask& mask,
                                 std::uint64_t seed) {
    BRAINWASH_REQUIRE(epsilon > 0.0, "uniform noise: ε must be > 0");
    BRAINWASH_REQUIRE(static_cast<int>(mask.selected.size()) == task.size(), "uniform noise: mask length mismatch");
    NoisePack pack;
    pack.task_id = task.task_id;
    pack.deltas = Tensor<double>(task.size(), task.images.shape, 0.0);
    pack.epsilon = epsilon;
    pack.mask = mask;
    pack.seed = seed;
    pack.k = 0;
    pack.source = "uniform";
    Rng rng(derive_seed(seed, {0x0f1}));
    const std::size_t s = task.images.sample_size();
    for (int i = 0; i < task.size(); ++i) {
        if (!mask.selected[static_cast<std::size_t>(i)]) continue;
        double* d = pack.deltas.sample(i);
        for (std::size_t k = 0; k < s; ++k) d[k] = rng.uniform(-epsilon, epsilon);
    }
    return pack;
}

// ---------------------------------------------------------------------------

FineTuneProblem::FineTuneProblem(Architecture arch, std::vector<BnLayerStats> stats, int num_classes,
                                 std::vector<int> labels)
    : arch_(std::move(arch)), stats_(std::move(stats)), num_classes_(num_classes), labels_(std::move(labels)) {}

template <class T>
T FineTuneProblem::gradients(std::span<const T> p, std::span<const T> x, std::vector<T>& dp,
                             std::vector<T>* dx) const {
    BRAINWASH_REQUIRE(p.size() == param_size(), "fine-tune problem: parameter size mismatch");
    const int n = static_cast<int>(labels_.size());
    Tensor<T> input(n, arch_.config.input);
    BRAINWASH_REQUIRE(x.size() == input.size(), "fine-tune problem: input size mismatch");
    std::copy(x.begin(), x.end(), input.data.begin());
    ParamRefs<T> refs{p.subspan(0, arch_.backbone_size), p.subspan(arch_.backbone_size), num_classes_};
    BackwardOptions opt;
    opt.input = dx != nullptr;
    auto lg = classification_gradients(arch_, refs, stats_, std::move(input), labels_, Mode::train, opt);
    dp.clear();
    dp.reserve(param_size());
    dp.insert(dp.end(), lg.grads.backbone.begin(), lg.grads.backbone.end());
    dp.insert(dp.end(), lg.grads.head.begin(), lg.grads.head.end());
    if (dx) *dx = std::move(lg.grads.input.data);
    return lg.loss;
}

template double FineTuneProblem::gradients<double>(std::span<const double>, std::span<const double>,
                                                   std::vector<double>&, std::vector<double>*) const;
template Dual FineTuneProblem::gradients<Dual>(std::span<const Dual>, std::span<const Dual>, std::vector<Dual>&,
                                               std::vector<Dual>*) const;

std::span<const double> UnrolledStep::theta() const {
    return std::span<const double>(trajectory.params.back()).subspan(0, problem.architecture().backbone_size);
}

std::span<const double> UnrolledStep::head() const {
    return std::span<const double>(trajectory.params.back()).subspan(problem.architecture().backbone_size);
}

Tensor<double> UnrolledStep::input_gradient(std::span<const double> d_theta, std::span<const double> d_head,
                                            UnrollGradient mode) const {
    BRAINWASH_REQUIRE(d_theta.size() == theta().size() && d_head.size() == head().size(),
                      "unrolled step: adjoint size mismatch");
    std::vector<double> v(d_theta.begin(), d_theta.end());
    v.insert(v.end(), d_head.begin(), d_head.end());
    Tensor<double> out(batch.n, batch.shape);
    out.data = unroll_backward(problem, trajectory, batch.data, inner_lr, std::move(v), mode);
    return out;
}

UnrolledStep unrolled_inner_step(const ModelSnapshot& model, const Tensor<double>& poisoned_batch,
                                 std::span<const int> labels, int num_classes, const AttackConfig& cfg,
                                 std::uint64_t iter_seed) {
    BRAINWASH_REQUIRE(poisoned_batch.n == static_cast<int>(labels.size()), "inner step: label count mismatch");
    BRAINWASH_REQUIRE(num_classes >= 2, "inner step: need at least 2 classes");
    const auto arch = model.architecture();
    std::vector<double> p0 = model.backbone;
    const auto head = init_head_params(arch, num_classes, iter_seed);
    p0.insert(p0.end(), head.begin(), head.end());
    UnrolledStep step{FineTuneProblem(arch, model.bn_stats, num_classes, {labels.begin(), labels.end()}),
                      poisoned_batch, cfg.inner_lr, {}};
    step.trajectory = unroll_forward(step.problem, std::move(p0), step.batch.data, cfg.inner_lr, cfg.k);
    return step;
}

// ---------------------------------------------------------------------------

namespace {

struct TermGradients {
    double loss = 0.0;
    std::vector<double> backbone;
    std::vector<double> head;
    Tensor<double> reference;  // ∂/∂ reference batch
};

// Mean CE of `images` under `refs`. With a reference batch, the network runs
// in train mode on [reference ‖ images] with the statistics of the reference
// part only; otherwise eval mode with the stored statistics.
TermGradients classification_term(const Architecture& arch, const ParamRefs<double>& refs,
                                  const std::vector<BnLayerStats>& stats, const Tensor<double>& images,
                                  std::span<const int> labels, const Tensor<double>* reference, bool want_head) {
    TermGradients out;
    BackwardOptions opt;
    opt.head = want_head;
    if (!reference) {
        auto lg = classification_gradients(arch, refs, stats, images, labels, Mode::eval, opt);
        out.loss = lg.loss;
        out.backbone = std::move(lg.grads.backbone);
        out.head = std::move(lg.grads.head);
        return out;
    }
    const int R = reference->n;
    const int n = images.n;
    Tensor<double> joint(R + n, images.shape);
    std::copy(reference->data.begin(), reference->data.end(), joint.data.begin());
    std::copy(images.data.begin(), images.data.end(), joint.data.begin() + static_cast<std::ptrdiff_t>(reference->size()));
    auto fp = forward_pass(arch, refs, stats, std::move(joint), Mode::train, R);

    // CE on the trailing n rows only.
    const int K = refs.num_classes;
    Tensor<double> dlogits(R + n, fp.logits.shape, 0.0);
    for (int b = 0; b < n; ++b) {
        const double* z = fp.logits.sample(R + b);
        double* d = dlogits.sample(R + b);
        const int y = labels[static_cast<std::size_t>(b)];
        BRAINWASH_REQUIRE(y >= 0 && y < K, "outer loss: label out of range");
        const double zmax = *std::max_element(z, z + K);
        double sum = 0.0;
        for (int k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
        const double lse = std::log(sum) + zmax;
        out.loss += (lse - z[y]) / n;
        for (int k = 0; k < K; ++k) d[k] = std::exp(z[k] - lse) / n;
        d[y] -= 1.0 / n;
    }
    opt.input = true;
    auto g = backward_pass(arch, refs, fp, dlogits, opt);
    out.backbone = std::move(g.backbone);
    out.head = std::move(g.head);
    out.reference = Tensor<double>(R, images.shape);
    std::copy(g.input.data.begin(), g.input.data.begin() + static_cast<std::ptrdiff_t>(out.reference.size()),
              out.reference.data.begin());
    return out;
}

}  // namespace

OuterValue outer_loss(const ModelSnapshot& model, std::span<const double> theta, std::span<const double> head,
                      int num_classes, std::span<const ProxyBatch> proxies, const Tensor<double>* clean_images,
                      std::span<const int> clean_labels, AttackMode mode, double eta,
                      const Tensor<double>* bn_reference, double clean_weight) {
    const auto arch = model.architecture();
    BRAINWASH_REQUIRE(theta.size() == arch.backbone_size, "outer loss: θ size mismatch");
    const int past = model.num_heads();
    std::vector<bool> covered(static_cast<std::size_t>(past), false);
    for (const auto& pb : proxies) {
        BRAINWASH_REQUIRE(pb.task_id >= 1 && pb.task_id <= past, "outer loss: proxy for unknown task " +
                                                                     std::to_string(pb.task_id));
        covered[static_cast<std::size_t>(pb.task_id - 1)] = true;
    }
    for (int t = 1; t <= past; ++t) {
        BRAINWASH_REQUIRE(covered[static_cast<std::size_t>(t - 1)], "outer loss: missing proxy for task " +
                                                                        std::to_string(t));
    }
    if (arch.bn_channels.empty()) bn_reference = nullptr;

    OuterValue out;
    out.d_theta.assign(arch.backbone_size, 0.0);
    out.d_head.assign(head.size(), 0.0);
    if (bn_reference) out.d_reference = Tensor<double>(bn_reference->n, bn_reference->shape, 0.0);
    auto accumulate = [&](const TermGradients& g, double w) {
        out.value += w * g.loss;
        for (std::size_t j = 0; j < out.d_theta.size(); ++j) out.d_theta[j] += w * g.backbone[j];
        for (std::size_t j = 0; j < g.head.size(); ++j) out.d_head[j] += w * g.head[j];
        for (std::size_t j = 0; j < g.reference.size(); ++j) out.d_reference.data[j] += w * g.reference.data[j];
    };
    for (const auto& pb : proxies) {
        const auto& h = model.head(pb.task_id);
        ParamRefs<double> refs{theta, h.params, h.num_classes};
        accumulate(classification_term(arch, refs, model.bn_stats, pb.images, pb.labels, bn_reference, false),
                   pb.weight);
    }
    if (mode == AttackMode::cautious && eta != 0.0) {
        BRAINWASH_REQUIRE(clean_images != nullptr, "outer loss: cautious mode needs clean current-task data");
        ParamRefs<double> refs{theta, head, num_classes};
        if (bn_reference) {
            accumulate(classification_term(arch, refs, model.bn_stats, *clean_images, clean_labels, bn_reference, true),
                       -eta * clean_weight);
        } else {
            // Without a reference the clean batch normalizes itself, as in fine-tuning.
            auto lg = classification_gradients(arch, refs, model.bn_stats, *clean_images, clean_labels, Mode::train,
                                               BackwardOptions{});
            accumulate({lg.loss, std::move(lg.grads.backbone), std::move(lg.grads.head), {}}, -eta * clean_weight);
        }
    }
    return out;
}

double outer_loss(const ModelSnapshot& model, std::span<const double> theta, std::span<const double> head,
                  std::span<const SyntheticDataset> proxies, const TaskDataset& clean_task, const AttackConfig& cfg,
                  const TaskDataset* poisoned_task) {
    std::vector<ProxyBatch> batches;
    for (const auto& p : proxies) batches.push_back({p.task_id, p.images, p.labels, static_cast<double>(p.images.n)});
    const Tensor<double>* reference = nullptr;
    if (cfg.bn_stats == BnStatsModel::poisoned) reference = poisoned_task ? &poisoned_task->images : &clean_task.images;
    const auto v = outer_loss(model, theta, head, clean_task.num_classes, batches, &clean_task.images,
                              clean_task.labels, cfg.mode, cfg.mode == AttackMode::cautious ? cfg.eta : 0.0,
                              reference, static_cast<double>(clean_task.size()));
    return v.value;
}

NoiseGradient noise_gradient(const ModelSnapshot& model, const TaskDataset& task, const Tensor<double>& delta_batch,
                             std::span<const int> batch_indices, std::span<const ProxyBatch> proxies,
                             const AttackConfig& cfg, std::uint64_t iter_seed) {
    const auto clean = gather(task.images, batch_indices);
    BRAINWASH_REQUIRE(delta_batch.n == clean.n && delta_batch.shape == clean.shape, "noise gradient: shape mismatch");
    std::vector<int> labels;
    for (int i : batch_indices) labels.push_back(task.labels[static_cast<std::size_t>(i)]);
    Tensor<double> poisoned = clean;
    for (std::size_t k = 0; k < poisoned.size(); ++k) {
        poisoned.data[k] = std::clamp(clean.data[k] + delta_batch.data[k], 0.0, 1.0);
    }
    const auto step = unrolled_inner_step(model, poisoned, labels, task.num_classes, cfg, iter_seed);
    const auto ov = outer_loss(model, step.theta(), step.head(), task.num_classes, proxies, &clean, labels, cfg.mode,
                               cfg.mode == AttackMode::cautious ? cfg.eta : 0.0,
                               cfg.bn_stats == BnStatsModel::poisoned ? &poisoned : nullptr,
                               static_cast<double>(task.size()));
    if (!std::isfinite(ov.value)) throw RuntimeFailure("attack: non-finite outer loss");
    NoiseGradient out;
    out.value = ov.value;
    out.d_delta = step.input_gradient(ov.d_theta, ov.d_head, cfg.gradient);
    for (std::size_t k = 0; k < ov.d_reference.size(); ++k) out.d_delta.data[k] += ov.d_reference.data[k];
    for (std::size_t k = 0; k < poisoned.size(); ++k) {
        const double raw = clean.data[k] + delta_batch.data[k];
        if (raw < 0.0 || raw > 1.0) out.d_delta.data[k] = 0.0;  // clamped pixel
        if (!std::isfinite(out.d_delta.data[k])) throw RuntimeFailure("attack: non-finite noise gradient");
    }
    return out;
}

namespace {

std::vector<int> sample_without_replacement(const std::vector<int>& pool, int count, Rng& rng) {
    std::vector<int> v = pool;
    const auto n = static_cast<int>(v.size());
    count = std::min(count, n);
    for (int i = 0; i < count; ++i) {
        const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(n - i));
        std::swap(v[static_cast<std::size_t>(i)], v[j]);
    }
    v.resize(static_cast<std::size_t>(count));
    return v;
}

struct OuterState {
    Tensor<double> delta;
    std::vector<double> m1, m2;
    std::vector<int> steps;  // Adam step count per sample
};

}  // namespace

NoisePack craft_noise(const ModelSnapshot& model, const TaskDataset& task, std::span<const SyntheticDataset> proxies,
                      const InjectionMask& mask, const AttackConfig& cfg) {
    cfg.validate();
    task.validate();
    const int T = task.task_id;
    BRAINWASH_REQUIRE(model.num_heads() == T - 1, "craft_noise: model must be trained through task " +
                                                      std::to_string(T - 1));
    BRAINWASH_REQUIRE(mask.task_id == T && static_cast<int>(mask.selected.size()) == task.size(),
                      "craft_noise: injection mask does not belong to this task");
    std::vector<const SyntheticDataset*> by_task(static_cast<std::size_t>(T - 1), nullptr);
    for (const auto& p : proxies) {
        BRAINWASH_REQUIRE(p.task_id >= 1 && p.task_id < T, "craft_noise: proxy for task " + std::to_string(p.task_id) +
                                                               " is not a past task");
        BRAINWASH_REQUIRE(p.images.shape == task.images.shape && p.images.n >= 1, "craft_noise: proxy shape mismatch");
        by_task[static_cast<std::size_t>(p.task_id - 1)] = &p;
    }
    for (int t = 1; t < T; ++t) {
        BRAINWASH_REQUIRE(by_task[static_cast<std::size_t>(t - 1)] != nullptr,
                          "craft_noise: no proxy data for task " + std::to_string(t));
    }

    NoisePack pack;
    pack.task_id = T;
    pack.epsilon = cfg.epsilon;
    pack.mode = cfg.mode;
    pack.eta = cfg.mode == AttackMode::cautious ? cfg.eta : 0.0;
    pack.mask = mask;
    pack.k = cfg.k;
    pack.inner_lr = cfg.inner_lr;
    pack.outer_iterations = cfg.outer_iterations;
    pack.seed = cfg.seed;
    pack.deltas = Tensor<double>(task.size(), task.images.shape, 0.0);

    std::vector<int> masked, unmasked;
    for (int i = 0; i < task.size(); ++i) (mask.selected[static_cast<std::size_t>(i)] ? masked : unmasked).push_back(i);
    if (masked.empty() || T < 2) return pack;

    const std::size_t s = task.images.sample_size();
    OuterState state{pack.deltas, std::vector<double>(pack.deltas.size(), 0.0),
                     std::vector<double>(pack.deltas.size(), 0.0), std::vector<int>(static_cast<std::size_t>(task.size()), 0)};
    OuterState previous = state;
    double step_size = cfg.outer_step;
    int failures = 0;
    Rng rng(derive_seed(cfg.seed, {0xc4af7}));
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

    for (int it = 0; it < cfg.outer_iterations;) {
        const std::uint64_t iter_seed = derive_seed(cfg.seed, {0x17e4, static_cast<std::uint64_t>(it),
                                                               static_cast<std::uint64_t>(failures)});
        // Noised samples first; pad with clean ones so BN sees >= 2 samples.
        auto batch = sample_without_replacement(masked, cfg.task_batch, rng);
        if (static_cast<int>(batch.size()) < std::min(cfg.task_batch, task.size())) {
            const auto extra = sample_without_replacement(
                unmasked, std::min(cfg.task_batch, task.size()) - static_cast<int>(batch.size()), rng);
            batch.insert(batch.end(), extra.begin(), extra.end());
        }
        std::vector<ProxyBatch> proxy_batches;
        for (int t = 1; t < T; ++t) {
            const auto& p = *by_task[static_cast<std::size_t>(t - 1)];
            std::vector<int> all(static_cast<std::size_t>(p.images.n));
            std::iota(all.begin(), all.end(), 0);
            const auto pick = sample_without_replacement(all, cfg.proxy_batch, rng);
            ProxyBatch pb{t, gather(p.images, pick), {}, static_cast<double>(p.images.n)};
            for (int i : pick) pb.labels.push_back(p.labels[static_cast<std::size_t>(i)]);
            proxy_batches.push_back(std::move(pb));
        }

        NoiseGradient ng;
        try {
            ng = noise_gradient(model, task, gather(state.delta, batch), batch, proxy_batches, cfg, iter_seed);
        } catch (const RuntimeFailure&) {
            if (++failures > cfg.max_retries) throw;
            state = previous;
            step_size *= 0.5;
            continue;
        }
        failures = 0;
        previous = state;

        for (std::size_t r = 0; r < batch.size(); ++r) {
            const int i = batch[r];
            if (!mask.selected[static_cast<std::size_t>(i)]) continue;
            const int count = ++state.steps[static_cast<std::size_t>(i)];
            const double c1 = 1.0 - std::pow(kBeta1, count);
            const double c2 = 1.0 - std::pow(kBeta2, count);
            const double* x = task.images.sample(i);
            double* d = state.delta.sample(i);
            for (std::size_t k = 0; k < s; ++k) {
                const double g = ng.d_delta.data[r * s + k];
                const std::size_t e = static_cast<std::size_t>(i) * s + k;
                double update = 0.0;
                switch (cfg.optimizer) {
                    case OuterOptimizer::adam:
                        state.m1[e] = kBeta1 * state.m1[e] + (1.0 - kBeta1) * g;
                        state.m2[e] = kBeta2 * state.m2[e] + (1.0 - kBeta2) * g * g;
                        update = (state.m1[e] / c1) / (std::sqrt(state.m2[e] / c2) + kEps);
                        break;
                    case OuterOptimizer::signed_gradient:
                        update = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
                        break;
                    case OuterOptimizer::gradient:
                        update = g;
                        break;
                }
                // Ascent, then the ε-ball and the image range.
                const double lo = std::max(-cfg.epsilon, -x[k]);
                const double hi = std::min(cfg.epsilon, 1.0 - x[k]);
                d[k] = std::clamp(d[k] + step_size * update, lo, hi);
            }
        }
        pack.outer_trace.push_back(ng.value);
        ++it;
    }
    pack.deltas = std::move(state.delta);
    pack.validate();
    return pack;
}

// ---------------------------------------------------------------------------

void save_noise(const std::filesystem::path& path, const NoisePack& pack) {
    pack.validate();
    TensorArchive ar;
    auto& m = ar.meta();
    m["kind"] = "noise_pack";
    m["task_id"] = pack.task_id;
    m["epsilon"] = pack.epsilon;
    m["mode"] = to_string(pack.mode);
    m["eta"] = pack.eta;
    m["k"] = pack.k;
    m["inner_lr"] = pack.inner_lr;
    m["outer_iterations"] = pack.outer_iterations;
    m["seed"] = pack.seed;
    m["source"] = pack.source;
    m["mask_rate"] = pack.mask.rate;
    m["mask_seed"] = pack.mask.seed;
    const auto& d = pack.deltas;
    ar.put("deltas", d.data, {d.n, d.shape.channels, d.shape.height, d.shape.width});
    std::vector<std::int64_t> sel(pack.mask.selected.begin(), pack.mask.selected.end());
    ar.put_ints("mask", sel);
    ar.put("outer_trace", pack.outer_trace);
    ar.save(path);
}

NoisePack load_noise(const std::filesystem::path& path) {
    const auto ar = TensorArchive::load(path);
    const auto& m = ar.meta();
    if (m.value("kind", std::string()) != "noise_pack") throw RuntimeFailure("'" + path.string() + "' is not a noise pack");
    NoisePack p;
    p.task_id = m.at("task_id").get<int>();
    p.epsilon = m.at("epsilon").get<double>();
    p.mode = attack_mode_from_string(m.at("mode").get<std::string>());
    p.eta = m.at("eta").get<double>();
    p.k = m.at("k").get<int>();
    p.inner_lr = m.at("inner_lr").get<double>();
    p.outer_iterations = m.at("outer_iterations").get<int>();
    p.seed = m.at("seed").get<std::uint64_t>();
    p.source = m.at("source").get<std::string>();
    const auto shape = ar.shape("deltas");
    p.deltas = Tensor<double>(static_cast<int>(shape[0]), ImageShape{static_cast<int>(shape[1]),
                                                                     static_cast<int>(shape[2]),
                                                                     static_cast<int>(shape[3])});
    p.deltas.data = ar.doubles("deltas");
    p.mask.task_id = p.task_id;
    p.mask.rate = m.at("mask_rate").get<double>();
    p.mask.seed = m.at("mask_seed").get<std::uint64_t>();
    for (auto v : ar.ints("mask")) p.mask.selected.push_back(v != 0);
    p.outer_trace = ar.doubles("outer_trace");
    p.validate();
    return p;
}

}  // namespace brainwash
