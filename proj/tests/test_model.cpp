#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>

#include "brainwash/archive.hpp"
#include "brainwash/model.hpp"
#include "support.hpp"

using namespace brainwash;
using bwtest::TempDir;

namespace {

ModelSnapshot trained_looking_model(const ArchConfig& arch, int heads, std::uint64_t seed) {
    auto m = init_model(arch, seed);
    for (int h = 0; h < heads; ++h) m = add_head(m, 3, seed + 10 + static_cast<std::uint64_t>(h));
    Rng rng(seed + 99);
    for (auto& s : m.bn_stats) {
        for (auto& v : s.mean) v = rng.uniform(-0.3, 0.3);
        for (auto& v : s.var) v = rng.uniform(0.5, 2.0);
    }
    return m;
}

double loss_at(const ModelSnapshot& m, int head, const Tensor<double>& x, const std::vector<int>& y, Mode mode) {
    const auto logits = forward(m, head, x, mode);
    return cross_entropy<double>(logits, std::span<const int>(y), nullptr);
}

}  // namespace

TEST_CASE("init_model is deterministic with zero heads and unit running variance") {
    const ArchConfig arch;
    const auto a = init_model(arch, 5);
    const auto b = init_model(arch, 5);
    CHECK(a == b);
    CHECK(a.num_heads() == 0);
    CHECK(a.lineage.empty());
    CHECK(init_model(arch, 6).backbone != a.backbone);
    REQUIRE(a.bn_stats.size() == 4);
    for (const auto& s : a.bn_stats) {
        for (double v : s.var) CHECK(v == 1.0);
        for (double v : s.mean) CHECK(v == 0.0);
    }
    ArchConfig bad;
    bad.arch_id = "resnet-1000";
    CHECK_THROWS_AS(init_model(bad, 0), ValidationError);
}

TEST_CASE("add_head appends one head and leaves everything else untouched") {
    const ArchConfig arch;
    const auto base = add_head(init_model(arch, 1), 4, 2);
    const auto m = add_head(base, 10, 3);
    CHECK(m.num_heads() == 2);
    CHECK(m.backbone == base.backbone);
    CHECK(m.heads[0] == base.heads[0]);
    CHECK(m.bn_stats == base.bn_stats);
    const auto x = bwtest::random_images(3, arch.input, 4);
    CHECK(forward(m, 2, x, Mode::eval).shape.channels == 10);
    CHECK(infer_num_classes(m, 2) == 10);
    CHECK(infer_num_classes(add_head(m, 7, 9), 3) == 7);

    const auto other = add_head(base, 10, 4);
    CHECK(other.heads[1].params.size() == m.heads[1].params.size());
    CHECK(other.heads[1].params != m.heads[1].params);
    CHECK_THROWS_AS(add_head(base, 1, 0), ValidationError);
    CHECK_THROWS_AS(infer_num_classes(base, 2), ValidationError);
}

TEST_CASE("eval-mode forward is deterministic, row-independent and pure") {
    const ArchConfig arch;
    const auto m = trained_looking_model(arch, 1, 3);
    const auto copy = m;
    const auto x = bwtest::random_images(4, arch.input, 8);
    CHECK(forward(m, 1, x, Mode::eval).data == forward(m, 1, x, Mode::eval).data);

    Tensor<double> same(5, arch.input);
    for (int b = 0; b < 5; ++b) std::copy(x.sample(0), x.sample(0) + x.sample_size(), same.sample(b));
    const auto logits = forward(m, 1, same, Mode::eval);
    for (int b = 1; b < 5; ++b) {
        for (int k = 0; k < 3; ++k) CHECK(logits.data[static_cast<std::size_t>(b * 3 + k)] == logits.data[static_cast<std::size_t>(k)]);
    }
    forward(m, 1, x, Mode::train);
    CHECK(m == copy);

    // Train mode normalizes with batch statistics, so it differs from eval.
    CHECK(forward(m, 1, x, Mode::train).data != forward(m, 1, x, Mode::eval).data);
    CHECK_THROWS_AS(forward(m, 1, bwtest::random_images(2, {1, 4, 4}, 1), Mode::eval), ValidationError);
}

TEST_CASE("tiny MLP logits equal the matrix-arithmetic oracle") {
    const auto arch = bwtest::tiny_mlp({1, 1, 2}, {3}, Activation::tanh, false);
    auto m = init_model(arch, 0);
    m.backbone = {0.5, -0.3, 0.2, 0.8, -0.6, 0.1, 0.1, -0.2, 0.05};
    m = add_head(m, 2, 0);
    m.heads[0].params = {1.0, -0.5, 0.3, -0.7, 0.4, 0.9, 0.2, -0.1};
    Tensor<double> x(2, {1, 1, 2});
    x.data = {0.3, 0.7, 0.9, 0.1};
    // Frozen from tests/oracles/closed_form.py.
    const std::vector<double> expected{0.023535033249881765, -0.02314819659201263, 0.5138628773292924,
                                       -0.8120380163301929};
    const auto logits = forward(m, 1, x, Mode::eval);
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(logits.data[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences") {
    for (Activation act : {Activation::relu, Activation::tanh}) {
        ArchConfig arch = bwtest::tiny_convnet();
        arch.activation = act;
        const auto m = trained_looking_model(arch, 2, 17);
        const auto mc = m.architecture();
        const auto x = bwtest::random_images(4, arch.input, 21);
        const std::vector<int> y{0, 2, 1, 2};
        for (Mode mode : {Mode::eval, Mode::train}) {
            CAPTURE(static_cast<int>(mode));
            BackwardOptions opt;
            opt.input = true;
            const auto lg = classification_gradients(mc, m.refs(2), m.bn_stats, x, std::span<const int>(y), mode, opt);

            const auto fx = bwtest::central_diff(
                [&](const std::vector<double>& v) {
                    Tensor<double> t = x;
                    t.data = v;
                    return loss_at(m, 2, t, y, mode);
                },
                x.data);
            CHECK(bwtest::rel_err(lg.grads.input.data, fx) < 1e-4);

            const auto ftheta = bwtest::central_diff(
                [&](const std::vector<double>& v) {
                    auto mm = m;
                    mm.backbone = v;
                    return loss_at(mm, 2, x, y, mode);
                },
                m.backbone);
            CHECK(bwtest::rel_err(lg.grads.backbone, ftheta) < 1e-4);

            const auto fhead = bwtest::central_diff(
                [&](const std::vector<double>& v) {
                    auto mm = m;
                    mm.heads[1].params = v;
                    return loss_at(mm, 2, x, y, mode);
                },
                m.heads[1].params);
            CHECK(bwtest::rel_err(lg.grads.head, fhead) < 1e-4);
        }
    }
}

TEST_CASE("reference-subset batch norm: statistics from the leading samples, gradients exact") {
    const auto arch = bwtest::tiny_convnet();
    const auto m = trained_looking_model(arch, 1, 4);
    const auto mc = m.architecture();
    const auto x = bwtest::random_images(6, arch.input, 5);

    // The trailing rows are normalized with the leading rows' statistics:
    // their logits do not depend on whether the reference batch saw them.
    const auto full = forward_pass(mc, m.refs(1), m.bn_stats, x, Mode::train, 4);
    const auto ref_only = forward_pass(mc, m.refs(1), m.bn_stats, gather(x, std::vector<int>{0, 1, 2, 3}), Mode::train);
    for (std::size_t i = 0; i < ref_only.logits.size(); ++i) CHECK(full.logits.data[i] == doctest::Approx(ref_only.logits.data[i]).epsilon(1e-12));

    const std::vector<int> y{0, 1, 2, 0, 1, 2};
    auto loss = [&](const Tensor<double>& in, const std::vector<double>& theta) {
        const ParamRefs<double> refs{theta, m.heads[0].params, 3};
        const auto fp = forward_pass(mc, refs, m.bn_stats, in, Mode::train, 4);
        return cross_entropy<double>(fp.logits, std::span<const int>(y), nullptr);
    };
    const ParamRefs<double> refs = m.refs(1);
    auto fp = forward_pass(mc, refs, m.bn_stats, x, Mode::train, 4);
    Tensor<double> dl;
    cross_entropy(fp.logits, std::span<const int>(y), &dl);
    BackwardOptions opt;
    opt.input = true;
    const auto g = backward_pass(mc, refs, fp, dl, opt);
    const auto fx = bwtest::central_diff(
        [&](const std::vector<double>& v) {
            Tensor<double> t = x;
            t.data = v;
            return loss(t, m.backbone);
        },
        x.data);
    CHECK(bwtest::rel_err(g.input.data, fx) < 1e-4);
    const auto ft = bwtest::central_diff([&](const std::vector<double>& v) { return loss(x, v); }, m.backbone);
    CHECK(bwtest::rel_err(g.backbone, ft) < 1e-4);
}

TEST_CASE("checkpoint round-trip is bitwise and versioned") {
    TempDir dir("model");
    auto m = trained_looking_model(ArchConfig{}, 3, 8);
    m.lineage[0] = {1, "ewc", 10.0, "bn running statistics updated"};
    const auto back = checkpoint_roundtrip(m, dir / "m.bwta");
    CHECK(back == m);
    CHECK(back.num_heads() == 3);
    const auto x = bwtest::random_images(3, m.arch.input, 2);
    CHECK(forward(back, 2, x, Mode::eval).data == forward(m, 2, x, Mode::eval).data);

    {
        std::fstream f(dir / "m.bwta", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        f.put(static_cast<char>(99));
    }
    CHECK_THROWS_AS(load_model(dir / "m.bwta"), RuntimeFailure);
    CHECK_THROWS(load_model(dir / "missing.bwta"));
}

TEST_CASE("model validation") {
    auto m = trained_looking_model(ArchConfig{}, 1, 1);
    CHECK_NOTHROW(m.validate());
    auto neg = m;
    neg.bn_stats[0].var[0] = -1.0;
    CHECK_THROWS_AS(neg.validate(), ValidationError);
    auto nan = m;
    nan.backbone[3] = std::nan("");
    CHECK_THROWS_AS(nan.validate(), ValidationError);
    auto lineage = m;
    lineage.lineage.clear();
    CHECK_THROWS_AS(lineage.validate(), ValidationError);
}
