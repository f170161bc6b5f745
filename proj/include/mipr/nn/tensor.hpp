#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace mipr::nn {

/// Cache-line aligned storage. Vectorized reductions peel differently
/// depending on the start address, so a fixed alignment keeps results
/// bitwise reproducible from run to run.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

/// NCHW shape. Weights use (out, in, kh, kw); scalars are 1x1x1x1.
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

/// Dense float64 NCHW tensor with value semantics.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value) { return Tensor(Shape{}, value); }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::size_t offset(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    double& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
    double at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

    /// Pointer to the (n, c) spatial plane.
    double* plane(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
    const double* plane(int n, int c) const { return data_.data() + offset(n, c, 0, 0); }

    void fill(double value);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double factor);

    double sum() const;
    double max_abs() const;
    bool all_finite() const;

    /// Same data, new shape with equal element count.
    Tensor reshaped(Shape shape) const;

private:
    Shape shape_{0, 0, 0, 0};
    AlignedBuffer data_;
};

/// Non-differentiable resampling helpers used for conditioning inputs.
Tensor resize_nearest(const Tensor& input, int height, int width);
/// Bilinear with half-pixel centers (align_corners = false).
Tensor resize_bilinear(const Tensor& input, int height, int width);

}  // namespace mipr::nn
