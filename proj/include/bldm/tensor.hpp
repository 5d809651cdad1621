#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bldm {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major n-d array. Convolution layouts are [N, C, D, H, W].
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape))
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    std::size_t numel() const { return data.size(); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i < 0 ? int(shape.size()) + i : i)); }
    int ndim() const { return static_cast<int>(shape.size()); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // Product of trailing dims from axis `from` on.
    std::size_t inner(int from) const {
        std::size_t n = 1;
        for (int i = from; i < ndim(); ++i) n *= static_cast<std::size_t>(shape[i]);
        return n;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        return Tensor(std::move(s), data);
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

template <class T>
Tensor<T>& operator+=(Tensor<T>& a, const Tensor<T>& b) {
    if (a.numel() != b.numel()) throw std::invalid_argument("tensor += size mismatch");
    for (std::size_t i = 0; i < a.numel(); ++i) a.data[i] += b.data[i];
    return a;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.numel() != b.numel()) throw std::invalid_argument("max_abs_diff size mismatch");
    T m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace bldm
