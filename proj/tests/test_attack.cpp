#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "brainwash/attack.hpp"
#include "support.hpp"

using namespace brainwash;
using bwtest::TempDir;

namespace {

// L(p, x) = Σ ½ x_i p_i² + ¼ p_i⁴, so ∇_p L = x p + p³ and ∇_x L = ½ p².
struct QuarticToy {
    template <class T>
    T gradients(std::span<const T> p, std::span<const T> x, std::vector<T>& dp, std::vector<T>* dx) const {
        T loss(0.0);
        dp.assign(p.size(), T(0.0));
        if (dx) dx->assign(x.size(), T(0.0));
        for (std::size_t i = 0; i < p.size(); ++i) {
            loss += T(0.5) * x[i] * p[i] * p[i] + T(0.25) * p[i] * p[i] * p[i] * p[i];
            dp[i] = x[i] * p[i] + p[i] * p[i] * p[i];
            if (dx) (*dx)[i] = T(0.5) * p[i] * p[i];
        }
        return loss;
    }
};

InjectionMask full_mask(int task_id, int n) { return {task_id, std::vector<bool>(static_cast<std::size_t>(n), true), 1.0, 0}; }

// A model trained "through task 1" (one head) plus a current task 2.
struct Scenario {
    ModelSnapshot model;
    TaskDataset task;
    SyntheticDataset proxy;
    std::vector<ProxyBatch> batches;
};

Scenario scenario(const ArchConfig& arch, int n_task, int n_proxy, std::uint64_t seed) {
    Scenario s;
    s.model = add_head(init_model(arch, seed), 2, seed + 1);
    Rng rng(seed + 2);
    for (auto& st : s.model.bn_stats) {
        for (auto& v : st.mean) v = rng.uniform(-0.2, 0.2);
        for (auto& v : st.var) v = rng.uniform(0.2, 1.0);
    }
    s.task = bwtest::make_task(2, bwtest::random_images(n_task, arch.input, seed + 3, 0.3, 0.7), 2);
    s.proxy.task_id = 1;
    s.proxy.num_classes = 2;
    s.proxy.images = bwtest::random_images(n_proxy, arch.input, seed + 4);
    for (int i = 0; i < n_proxy; ++i) s.proxy.labels.push_back((i + 1) % 2);
    s.batches.push_back({1, s.proxy.images, s.proxy.labels, static_cast<double>(n_proxy)});
    return s;
}

std::vector<int> iota_n(int n) {
    std::vector<int> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

double noise_value(const Scenario& s, const std::vector<double>& delta, const AttackConfig& cfg, std::uint64_t seed) {
    Tensor<double> d(s.task.size(), s.task.images.shape);
    d.data = delta;
    const auto idx = iota_n(s.task.size());
    return noise_gradient(s.model, s.task, d, idx, s.batches, cfg, seed).value;
}

}  // namespace

TEST_CASE("project_linf clamps, is idempotent and leaves interior points alone") {
    Tensor<double> d(1, {1, 1, 5});
    d.data = {-0.9, -0.3, 0.0, 0.2, 0.31};
    const auto p = project_linf(d, 0.3);
    CHECK(p.data == std::vector<double>{-0.3, -0.3, 0.0, 0.2, 0.3});
    CHECK(project_linf(p, 0.3).data == p.data);
    const auto r = bwtest::random_images(4, {1, 3, 3}, 2, -0.1, 0.1);
    CHECK(project_linf(r, 0.1).data == r.data);
    CHECK_THROWS_AS(project_linf(d, 0.0), ValidationError);
}

TEST_CASE("apply_noise adds, clamps to the image range and respects the mask") {
    auto task = bwtest::make_task(3, bwtest::random_images(10, {1, 2, 2}, 5), 2);
    NoisePack pack;
    pack.task_id = 3;
    pack.epsilon = 0.3;
    pack.mask = full_mask(3, 10);
    pack.deltas = Tensor<double>(10, {1, 2, 2}, 0.0);
    CHECK(apply_noise(task, pack).images.data == task.images.data);

    task.images.data[0] = 0.9;
    pack.deltas.data[0] = 0.3;
    task.images.data[1] = 0.1;
    pack.deltas.data[1] = -0.3;
    auto out = apply_noise(task, pack);
    CHECK(out.images.data[0] == 1.0);
    CHECK(out.images.data[1] == 0.0);
    CHECK(out.labels == task.labels);

    const auto half = select_injection_subset(task, 0.5, 4);
    pack = uniform_noise_baseline(task, 0.2, half, 8);
    out = apply_noise(task, pack);
    for (int i = 0; i < 10; ++i) {
        for (std::size_t k = 0; k < 4; ++k) {
            const double x = task.images.sample(i)[k];
            const double expected = half.selected[static_cast<std::size_t>(i)]
                                        ? std::clamp(x + pack.deltas.sample(i)[k], 0.0, 1.0)
                                        : x;
            CHECK(out.images.sample(i)[k] == expected);
        }
    }
    pack.task_id = 4;
    CHECK_THROWS_AS(apply_noise(task, pack), ValidationError);
}

TEST_CASE("uniform noise: bounded, centred and seeded") {
    const auto task = bwtest::make_task(1, Tensor<double>(10000, {1, 10, 10}, 0.5), 2);
    const auto mask = full_mask(1, 10000);
    const auto pack = uniform_noise_baseline(task, 0.3, mask, 1);
    CHECK_NOTHROW(pack.validate());
    double sum = 0.0, max_abs = 0.0;
    for (double d : pack.deltas.data) {
        max_abs = std::max(max_abs, std::abs(d));
        sum += d;
    }
    CHECK(max_abs <= 0.3);
    // 10⁶ draws, standard error ε/√3/√n.
    const double n = static_cast<double>(pack.deltas.size());
    CHECK(std::abs(sum / n) < 3.0 * 0.3 / std::sqrt(3.0) / std::sqrt(n));
    CHECK(uniform_noise_baseline(task, 0.3, mask, 1).deltas.data == pack.deltas.data);
    CHECK(uniform_noise_baseline(task, 0.3, mask, 2).deltas.data != pack.deltas.data);
    CHECK(pack.source == "uniform");
}

TEST_CASE("inner step: zero learning rate keeps θ*, the head is drawn from the iteration seed") {
    const auto s = scenario(bwtest::tiny_convnet(), 6, 4, 1);
    AttackConfig cfg;
    cfg.inner_lr = 0.0;
    const auto a = unrolled_inner_step(s.model, s.task.images, s.task.labels, 2, cfg, 77);
    CHECK(std::vector<double>(a.theta().begin(), a.theta().end()) == s.model.backbone);
    const auto head = init_head_params(s.model.architecture(), 2, 77);
    CHECK(std::vector<double>(a.head().begin(), a.head().end()) == head);

    cfg.inner_lr = 0.05;
    cfg.k = 3;
    const auto b = unrolled_inner_step(s.model, s.task.images, s.task.labels, 2, cfg, 77);
    const auto c = unrolled_inner_step(s.model, s.task.images, s.task.labels, 2, cfg, 77);
    CHECK(b.trajectory.params == c.trajectory.params);
    CHECK(b.trajectory.params.size() == 4);
    CHECK(std::vector<double>(b.theta().begin(), b.theta().end()) != s.model.backbone);
}

TEST_CASE("unrolled Jacobian on a separable quartic toy") {
    const QuarticToy toy;
    const std::vector<double> p0{0.4, -0.7, 1.1};
    const std::vector<double> x{0.5, 1.5, -0.2};
    const std::vector<double> c{1.0, -2.0, 0.5};
    const double lr = 0.1;
    for (UnrollGradient mode : {UnrollGradient::exact, UnrollGradient::finite_difference}) {
        // k = 1: p₁ = p₀ − lr(x p₀ + p₀³), so ∂(c·p₁)/∂x_i = −lr c_i p₀_i.
        const auto tr1 = unroll_forward(toy, p0, x, lr, 1);
        const auto g1 = unroll_backward(toy, tr1, x, lr, c, mode);
        for (std::size_t i = 0; i < 3; ++i) CHECK(g1[i] == doctest::Approx(-lr * c[i] * p0[i]).epsilon(1e-8));

        const auto tr = unroll_forward(toy, p0, x, lr, 4);
        const auto g = unroll_backward(toy, tr, x, lr, c, mode);
        const auto fd = bwtest::central_diff(
            [&](const std::vector<double>& xx) {
                const auto t = unroll_forward(toy, p0, xx, lr, 4);
                double o = 0.0;
                for (std::size_t i = 0; i < 3; ++i) o += c[i] * t.params.back()[i];
                return o;
            },
            x);
        CHECK(bwtest::rel_err(g, fd) < 1e-6);
    }
}

TEST_CASE("outer loss equals a standalone weighted cross-entropy sum") {
    auto s = scenario(bwtest::tiny_convnet(), 6, 5, 2);
    s.model = add_head(s.model, 3, 9);  // two past tasks
    SyntheticDataset p2;
    p2.task_id = 2;
    p2.num_classes = 3;
    p2.images = bwtest::random_images(4, s.model.arch.input, 10);
    p2.labels = {0, 1, 2, 0};
    s.batches.push_back({2, p2.images, p2.labels, 7.0});
    const auto theta = bwtest::random_vector(s.model.backbone.size(), 3, -0.3, 0.3);
    const auto head = init_head_params(s.model.architecture(), 2, 4);
    auto shifted = s.model;
    for (std::size_t j = 0; j < theta.size(); ++j) shifted.backbone[j] += theta[j];
    std::vector<double> th = shifted.backbone;

    const auto v = outer_loss(s.model, th, head, 2, s.batches, nullptr, {}, AttackMode::reckless, 0.0);
    double expected = 0.0;
    for (const auto& pb : s.batches) {
        const auto logits = forward(shifted, pb.task_id, pb.images, Mode::eval);
        expected += pb.weight * cross_entropy<double>(logits, std::span<const int>(pb.labels), nullptr);
    }
    CHECK(std::abs(v.value - expected) < 1e-6);

    // The cautious term subtracts η N_T times the clean batch's train-mode CE.
    const auto cv = outer_loss(s.model, th, head, 2, s.batches, &s.task.images, s.task.labels, AttackMode::cautious,
                               0.5, nullptr, 20.0);
    const auto mc = s.model.architecture();
    const auto fp = forward_pass(mc, ParamRefs<double>{th, head, 2}, s.model.bn_stats, s.task.images, Mode::train);
    const double clean = cross_entropy<double>(fp.logits, std::span<const int>(s.task.labels), nullptr);
    CHECK(std::abs(cv.value - (expected - 0.5 * 20.0 * clean)) < 1e-6);

    std::vector<ProxyBatch> missing{s.batches[0]};
    CHECK_THROWS_AS(outer_loss(s.model, th, head, 2, missing, nullptr, {}, AttackMode::reckless, 0.0),
                    ValidationError);
}

TEST_CASE("cautious with η = 0 gives the reckless gradient") {
    const auto s = scenario(bwtest::tiny_convnet(), 6, 4, 3);
    AttackConfig cfg;
    cfg.k = 2;
    cfg.inner_lr = 0.1;
    const auto delta = bwtest::random_images(6, s.task.images.shape, 6, -0.1, 0.1);
    const auto idx = iota_n(6);
    const auto r = noise_gradient(s.model, s.task, delta, idx, s.batches, cfg, 5);
    cfg.mode = AttackMode::cautious;
    cfg.eta = 0.0;
    const auto c = noise_gradient(s.model, s.task, delta, idx, s.batches, cfg, 5);
    CHECK(r.value == c.value);
    CHECK(r.d_delta.data == c.d_delta.data);
}

TEST_CASE("bi-level gradient of the outer objective matches central differences") {
    struct Case {
        ArchConfig arch;
        AttackMode mode;
        BnStatsModel bn;
    };
    const std::vector<Case> cases{
        {bwtest::tiny_mlp({1, 1, 2}, {1}, Activation::tanh, false), AttackMode::reckless, BnStatsModel::frozen},
        {bwtest::tiny_mlp({1, 1, 2}, {1}, Activation::tanh, false), AttackMode::cautious, BnStatsModel::frozen},
        {bwtest::tiny_mlp({1, 1, 3}, {3}, Activation::tanh, true), AttackMode::reckless, BnStatsModel::poisoned},
        {bwtest::tiny_mlp({1, 1, 3}, {3}, Activation::tanh, true), AttackMode::cautious, BnStatsModel::poisoned},
        {bwtest::tiny_convnet(), AttackMode::cautious, BnStatsModel::poisoned},
    };
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
        const auto& cs = cases[ci];
        const auto s = scenario(cs.arch, 4, 3, 20 + ci);
        for (UnrollGradient g : {UnrollGradient::exact, UnrollGradient::finite_difference}) {
            CAPTURE(ci);
            CAPTURE(static_cast<int>(g));
            AttackConfig cfg;
            cfg.mode = cs.mode;
            cfg.eta = 0.3;
            cfg.bn_stats = cs.bn;
            cfg.gradient = g;
            cfg.k = 2;
            cfg.inner_lr = 0.2;
            const auto delta = bwtest::random_images(4, s.task.images.shape, 30 + ci, -0.1, 0.1);
            const auto ng = noise_gradient(s.model, s.task, delta, iota_n(4), s.batches, cfg, 3);
            const auto fd = bwtest::central_diff([&](const std::vector<double>& d) { return noise_value(s, d, cfg, 3); },
                                                 delta.data);
            CHECK(bwtest::rel_err(ng.d_delta.data, fd) < 1e-3);
            CHECK(bwtest::cosine(ng.d_delta.data, fd) > 0.999);
        }
    }
}

TEST_CASE("pixels clamped at the image range get zero gradient") {
    auto s = scenario(bwtest::tiny_mlp({1, 1, 3}, {3}, Activation::tanh, true), 4, 3, 7);
    s.task.images.data[0] = 0.95;
    Tensor<double> delta(4, s.task.images.shape, 0.0);
    delta.data[0] = 0.2;
    AttackConfig cfg;
    const auto ng = noise_gradient(s.model, s.task, delta, iota_n(4), s.batches, cfg, 1);
    CHECK(ng.d_delta.data[0] == 0.0);
    CHECK(ng.d_delta.data[1] != 0.0);
}

TEST_CASE("craft_noise respects the budget, the mask and the image range, and is seeded") {
    const auto s = scenario(bwtest::tiny_convnet(), 12, 6, 4);
    const auto mask = select_injection_subset(s.task, 0.5, 2);
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.outer_iterations = 6;
    cfg.outer_step = 0.05;
    cfg.task_batch = 4;
    cfg.proxy_batch = 3;
    cfg.seed = 9;
    std::vector<SyntheticDataset> proxies{s.proxy};
    const auto pack = craft_noise(s.model, s.task, proxies, mask, cfg);
    CHECK_NOTHROW(pack.validate());
    CHECK(pack.outer_trace.size() == 6);
    CHECK(pack.source == "brainwash");
    bool moved = false;
    for (int i = 0; i < s.task.size(); ++i) {
        for (std::size_t k = 0; k < s.task.images.sample_size(); ++k) {
            const double d = pack.deltas.sample(i)[k];
            const double x = s.task.images.sample(i)[k];
            CHECK_UNARY(std::abs(d) <= 0.1);
            CHECK_UNARY(x + d >= 0.0);
            CHECK_UNARY(x + d <= 1.0);
            if (!mask.selected[static_cast<std::size_t>(i)]) CHECK(d == 0.0);
            moved = moved || d != 0.0;
        }
    }
    CHECK(moved);
    CHECK(craft_noise(s.model, s.task, proxies, mask, cfg).deltas.data == pack.deltas.data);

    const std::vector<SyntheticDataset> none;
    CHECK_THROWS_AS(craft_noise(s.model, s.task, none, mask, cfg), ValidationError);
    auto wrong = s.task;
    wrong.task_id = 3;
    CHECK_THROWS_AS(craft_noise(s.model, wrong, proxies, mask, cfg), ValidationError);

    TempDir dir("noise");
    save_noise(dir / "n.bwta", pack);
    const auto back = load_noise(dir / "n.bwta");
    CHECK(back.deltas.data == pack.deltas.data);
    CHECK(back.mask.selected == pack.mask.selected);
    CHECK(back.epsilon == pack.epsilon);
    CHECK(back.mode == pack.mode);
    CHECK(back.outer_trace == pack.outer_trace);
}

TEST_CASE("attack config validation and JSON round-trip") {
    AttackConfig c;
    c.mode = AttackMode::cautious;
    c.eta = 0.5;
    c.gradient = UnrollGradient::finite_difference;
    CHECK(AttackConfig::from_json(c.to_json()).to_json() == c.to_json());
    c.epsilon = 0.0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    CHECK_THROWS_AS(attack_mode_from_string("careful"), ValidationError);
    NoisePack p;
    p.epsilon = 0.1;
    p.deltas = Tensor<double>(1, {1, 1, 1}, 0.2);
    p.mask = full_mask(1, 1);
    CHECK_THROWS_AS(p.validate(), ValidationError);
}
