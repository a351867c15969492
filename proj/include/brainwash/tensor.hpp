#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "brainwash/error.hpp"

namespace brainwash {

// Per-sample image shape [C, H, W].
struct ImageShape {
    int channels = 0;
    int height = 0;
    int width = 0;

    std::size_t size() const {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
               static_cast<std::size_t>(width);
    }
    friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

// Dense row-major rank-4 tensor [N, C, H, W].
template <class T>
struct Tensor {
    int n = 0;
    ImageShape shape;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int batch, ImageShape s) : n(batch), shape(s), data(static_cast<std::size_t>(batch) * s.size()) {}
    Tensor(int batch, ImageShape s, T fill)
        : n(batch), shape(s), data(static_cast<std::size_t>(batch) * s.size(), fill) {}

    std::size_t sample_size() const { return shape.size(); }
    std::size_t size() const { return data.size(); }

    T& at(int b, int c, int y, int x) {
        return data[((static_cast<std::size_t>(b) * shape.channels + c) * shape.height + y) * shape.width + x];
    }
    const T& at(int b, int c, int y, int x) const {
        return data[((static_cast<std::size_t>(b) * shape.channels + c) * shape.height + y) * shape.width + x];
    }

    T* sample(int b) { return data.data() + static_cast<std::size_t>(b) * sample_size(); }
    const T* sample(int b) const { return data.data() + static_cast<std::size_t>(b) * sample_size(); }
};

// Copies the listed samples of `src` into a new tensor, in order.
template <class T, class Indices>
Tensor<T> gather(const Tensor<T>& src, const Indices& idx) {
    Tensor<T> out(static_cast<int>(idx.size()), src.shape);
    const std::size_t s = src.sample_size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* from = src.sample(static_cast<int>(idx[i]));
        std::copy(from, from + s, out.data.begin() + static_cast<std::ptrdiff_t>(i * s));
    }
    return out;
}

// Element-type conversion (e.g. double -> Dual with zero tangent).
template <class To, class From>
Tensor<To> convert(const Tensor<From>& src) {
    Tensor<To> out(src.n, src.shape);
    for (std::size_t i = 0; i < src.size(); ++i) out.data[i] = To(src.data[i]);
    return out;
}

}  // namespace brainwash
