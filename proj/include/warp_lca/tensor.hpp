#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "warp_lca/errors.hpp"

namespace warp_lca {

/// Extents of a rank-4 array: batch x channels x height x width.
struct Shape4 {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    constexpr std::size_t numel() const noexcept { return n * c * h * w; }
    constexpr std::size_t operator[](std::size_t axis) const noexcept {
        return axis == 0 ? n : axis == 1 ? c : axis == 2 ? h : w;
    }
    friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

    std::string str() const {
        return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) +
               "]";
    }
};

inline constexpr std::array<const char*, 4> kAxisNames{"batch", "channels", "height", "width"};

/// Throws ShapeError naming the first axis where `a` and `b` differ.
inline void require_same_shape(const Shape4& a, const Shape4& b, const std::string& context) {
    for (std::size_t axis = 0; axis < 4; ++axis) {
        if (a[axis] != b[axis]) throw ShapeError(kAxisNames[axis], a[axis], b[axis], context);
    }
}

/// Dense row-major rank-4 array. Value type, cheap to move.
template <typename T>
class BasicTensor4 {
public:
    using value_type = T;

    BasicTensor4() = default;
    explicit BasicTensor4(Shape4 shape, T fill = T{}) : shape_(shape), data_(shape.numel(), fill) {}
    BasicTensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{})
        : BasicTensor4(Shape4{n, c, h, w}, fill) {}
    BasicTensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.numel())
            throw ShapeError("data", shape_.numel(), data_.size(), "BasicTensor4");
    }

    static BasicTensor4 zeros(Shape4 shape) { return BasicTensor4(shape); }
    static BasicTensor4 zeros_like(const BasicTensor4& other) { return BasicTensor4(other.shape()); }

    const Shape4& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept {
        return data_[index(n, c, y, x)];
    }
    const T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return data_[index(n, c, y, x)];
    }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Contiguous H x W plane of sample n, channel c.
    std::span<T> plane(std::size_t n, std::size_t c) noexcept {
        return std::span<T>(data_).subspan(index(n, c, 0, 0), shape_.h * shape_.w);
    }
    std::span<const T> plane(std::size_t n, std::size_t c) const noexcept {
        return std::span<const T>(data_).subspan(index(n, c, 0, 0), shape_.h * shape_.w);
    }

    /// Copy of sample `n` as a batch-1 tensor.
    BasicTensor4 sample(std::size_t n) const {
        const std::size_t stride = shape_.c * shape_.h * shape_.w;
        BasicTensor4 out(Shape4{1, shape_.c, shape_.h, shape_.w});
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(n * stride), stride, out.data_.begin());
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    BasicTensor4& operator+=(const BasicTensor4& o) {
        require_same_shape(shape_, o.shape_, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    BasicTensor4& operator-=(const BasicTensor4& o) {
        require_same_shape(shape_, o.shape_, "operator-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    BasicTensor4& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }
    friend BasicTensor4 operator+(BasicTensor4 a, const BasicTensor4& b) { return a += b; }
    friend BasicTensor4 operator-(BasicTensor4 a, const BasicTensor4& b) { return a -= b; }
    friend BasicTensor4 operator*(BasicTensor4 a, T s) { return a *= s; }
    friend BasicTensor4 operator*(T s, BasicTensor4 a) { return a *= s; }

    /// this += alpha * x
    BasicTensor4& axpy(T alpha, const BasicTensor4& x) {
        require_same_shape(shape_, x.shape_, "axpy");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * x.data_[i];
        return *this;
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }
    T max_abs() const noexcept {
        T m{};
        for (T v : data_) m = std::max<T>(m, std::abs(v));
        return m;
    }
    T min() const noexcept { return data_.empty() ? T{} : *std::min_element(data_.begin(), data_.end()); }
    T max() const noexcept { return data_.empty() ? T{} : *std::max_element(data_.begin(), data_.end()); }

    friend bool operator==(const BasicTensor4&, const BasicTensor4&) = default;

private:
    Shape4 shape_{};
    std::vector<T> data_;
};

using Tensor4 = BasicTensor4<double>;

/// Inner product accumulated in double.
template <typename T>
double dot(const BasicTensor4<T>& a, const BasicTensor4<T>& b) {
    require_same_shape(a.shape(), b.shape(), "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

template <typename T>
double squared_norm(const BasicTensor4<T>& a) {
    return dot(a, a);
}

/// Stacks batch-1 tensors of identical shape along the batch axis.
template <typename T>
BasicTensor4<T> stack(std::span<const BasicTensor4<T>> samples) {
    if (samples.empty()) return {};
    const Shape4 s = samples.front().shape();
    BasicTensor4<T> out(Shape4{samples.size(), s.c, s.h, s.w});
    std::size_t offset = 0;
    for (const auto& t : samples) {
        if (t.shape().n != 1) throw ShapeError("batch", 1, t.shape().n, "stack");
        require_same_shape(Shape4{1, s.c, s.h, s.w}, t.shape(), "stack");
        std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
        offset += t.size();
    }
    return out;
}

/// Appends a constant-valued channel to every sample.
template <typename T>
BasicTensor4<T> append_constant_channel(const BasicTensor4<T>& x, T value) {
    const Shape4 s = x.shape();
    BasicTensor4<T> out(Shape4{s.n, s.c + 1, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            auto src = x.plane(n, c);
            std::copy(src.begin(), src.end(), out.plane(n, c).begin());
        }
        auto extra = out.plane(n, s.c);
        std::fill(extra.begin(), extra.end(), value);
    }
    return out;
}

} // namespace warp_lca
