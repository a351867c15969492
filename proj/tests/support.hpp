#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "brainwash/model.hpp"
#include "brainwash/rng.hpp"
#include "brainwash/task_data.hpp"

namespace bwtest {

using namespace brainwash;

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞)
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, scale = 1e-12;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    }
    return diff / scale;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

// Central differences of f at x, one coordinate at a time.
inline std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

inline Tensor<double> random_images(int n, ImageShape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Tensor<double> t(n, shape);
    t.data = random_vector(t.size(), seed, lo, hi);
    return t;
}

inline ArchConfig tiny_mlp(ImageShape input, std::vector<int> widths, Activation act, bool bn) {
    ArchConfig a;
    a.arch_id = "mlp";
    a.widths = std::move(widths);
    a.activation = act;
    a.batch_norm = bn;
    a.input = input;
    return a;
}

inline ArchConfig tiny_convnet(ImageShape input = {1, 4, 4}, std::vector<int> widths = {3, 3}) {
    ArchConfig a;
    a.widths = std::move(widths);
    a.input = input;
    return a;
}

// Labelled task over `images` with labels i % K.
inline TaskDataset make_task(int task_id, Tensor<double> images, int num_classes) {
    TaskDataset t;
    t.task_id = task_id;
    t.images = std::move(images);
    t.num_classes = num_classes;
    for (int i = 0; i < t.images.n; ++i) t.labels.push_back(i % num_classes);
    return t;
}

// Scratch directory removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("brainwash-" + tag + "-" + std::to_string(Rng(std::random_device{}()).next() % 1000000007ULL));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace bwtest
