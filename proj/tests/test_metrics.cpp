#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "brainwash/metrics.hpp"
#include "support.hpp"

using namespace brainwash;

namespace {

AccuracyMatrix random_matrix(int T, Rng& rng) {
    AccuracyMatrix m(T);
    for (int t = 1; t <= T; ++t)
        for (int i = 1; i <= t; ++i) m.set(t, i, static_cast<double>(rng.below(1001)) / 1000.0);
    return m;
}

double bwt_oracle(const AccuracyMatrix& m) {
    const int T = m.size();
    double s = 0.0;
    for (int i = 1; i <= T - 1; ++i) s += m.at(T, i) - m.at(i, i);
    return s / (T - 1);
}

}  // namespace

TEST_CASE("three-task hand example") {
    AccuracyMatrix m(3);
    m.set_row(1, {0.9});
    m.set_row(2, {0.85, 0.8});
    m.set_row(3, {0.6, 0.7, 0.95});
    CHECK(bwt(m) == doctest::Approx(-0.2).epsilon(1e-12));
    CHECK(forgetting(m) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(last_task_accuracy(m) == 0.95);
    CHECK(average_past_accuracy(m) == doctest::Approx(0.65).epsilon(1e-12));
}

TEST_CASE("bwt equals a loop oracle on random matrices, with forgetting its negation") {
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const int T = 2 + static_cast<int>(rng.below(9));
        const auto m = random_matrix(T, rng);
        const double b = bwt(m);
        CHECK(b == bwt_oracle(m));
        CHECK(forgetting(m) + b == 0.0);
        CHECK_UNARY(b >= -1.0);
        CHECK_UNARY(b <= 1.0);
    }
}

TEST_CASE("bwt is invariant to reordering the past tasks") {
    Rng rng(4);
    const auto m = random_matrix(4, rng);
    AccuracyMatrix swapped(4);
    const int perm[] = {0, 2, 1, 3};  // swap tasks 1 and 2
    for (int t = 1; t <= 4; ++t)
        for (int i = 1; i <= t; ++i) swapped.set(t, i, 0.0);
    for (int i = 1; i <= 3; ++i) {
        swapped.set(perm[i], perm[i], m.at(i, i));
        swapped.set(4, perm[i], m.at(4, i));
    }
    swapped.set(4, 4, m.at(4, 4));
    CHECK(bwt(swapped) == doctest::Approx(bwt(m)).epsilon(1e-14));
}

TEST_CASE("undefined entries are absent, rejected on use and serialized as null") {
    AccuracyMatrix m(3);
    m.set_row(1, {0.5});
    m.set_row(3, {0.4, 0.5, 0.6});
    CHECK_FALSE(m.has(2, 2));
    CHECK_FALSE(m.get(1, 2).has_value());
    CHECK_THROWS_AS(bwt(m), ValidationError);
    CHECK_THROWS_AS(m.set(1, 2, 0.5), ValidationError);
    CHECK_THROWS_AS(m.set(2, 1, 1.5), ValidationError);
    CHECK_THROWS_AS(bwt(AccuracyMatrix(1)), ValidationError);

    const auto j = m.to_json();
    CHECK(j[0][1].is_null());
    CHECK(j[1][0].is_null());
    CHECK(j[2][2] == 0.6);
    CHECK(AccuracyMatrix::from_json(j) == m);
}

TEST_CASE("task_accuracy: argmax-count oracle, chance level and memorization") {
    const auto arch = bwtest::tiny_convnet();
    const auto model = add_head(init_model(arch, 3), 10, 4);
    const auto task = bwtest::make_task(1, bwtest::random_images(2000, arch.input, 5), 10);

    const auto logits = forward(model, 1, task.images, Mode::eval);
    int correct = 0;
    for (int b = 0; b < task.size(); ++b) {
        const double* z = logits.sample(b);
        const int arg = static_cast<int>(std::max_element(z, z + 10) - z);
        correct += arg == task.labels[static_cast<std::size_t>(b)];
    }
    const double acc = task_accuracy(model, 1, task);
    CHECK(acc == static_cast<double>(correct) / 2000.0);
    // Labels carry no information about the images: 1/K within 4 standard errors.
    CHECK(std::abs(acc - 0.1) < 4.0 * std::sqrt(0.09 / 2000.0));

    auto memorized = task;
    const auto pred = predict(model, 1, task.images);
    memorized.labels = pred;
    CHECK(task_accuracy(model, 1, memorized) == 1.0);
}
