#include "mipr/nn/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "mipr/error.hpp"

namespace mipr::nn {

std::string Shape::str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(values.begin(), values.end()) {
    require(data_.size() == shape_.numel(), ErrorKind::Invalid,
            "tensor data size does not match shape " + shape_.str());
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
    require(shape_ == other.shape_, ErrorKind::Invalid,
            "tensor shape mismatch " + shape_.str() + " vs " + other.shape_.str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double factor) {
    for (double& v : data_) v *= factor;
    return *this;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape.numel() == data_.size(), ErrorKind::Invalid,
            "cannot reshape " + shape_.str() + " to " + shape.str());
    Tensor out = *this;
    out.shape_ = shape;
    return out;
}

Tensor resize_nearest(const Tensor& input, int height, int width) {
    const Shape& s = input.shape();
    if (s.h == height && s.w == width) return input;
    Tensor out(Shape{s.n, s.c, height, width});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const double* src = input.plane(n, c);
            double* dst = out.plane(n, c);
            for (int y = 0; y < height; ++y) {
                const int sy = std::min(s.h - 1, static_cast<int>(std::floor((y + 0.5) * s.h / height)));
                for (int x = 0; x < width; ++x) {
                    const int sx = std::min(s.w - 1, static_cast<int>(std::floor((x + 0.5) * s.w / width)));
                    dst[y * width + x] = src[sy * s.w + sx];
                }
            }
        }
    return out;
}

Tensor resize_bilinear(const Tensor& input, int height, int width) {
    const Shape& s = input.shape();
    if (s.h == height && s.w == width) return input;
    Tensor out(Shape{s.n, s.c, height, width});
    const double scale_y = static_cast<double>(s.h) / height;
    const double scale_x = static_cast<double>(s.w) / width;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const double* src = input.plane(n, c);
            double* dst = out.plane(n, c);
            for (int y = 0; y < height; ++y) {
                const double fy = std::clamp((y + 0.5) * scale_y - 0.5, 0.0, s.h - 1.0);
                const int y0 = static_cast<int>(fy);
                const int y1 = std::min(y0 + 1, s.h - 1);
                const double ty = fy - y0;
                for (int x = 0; x < width; ++x) {
                    const double fx = std::clamp((x + 0.5) * scale_x - 0.5, 0.0, s.w - 1.0);
                    const int x0 = static_cast<int>(fx);
                    const int x1 = std::min(x0 + 1, s.w - 1);
                    const double tx = fx - x0;
                    const double top = src[y0 * s.w + x0] * (1 - tx) + src[y0 * s.w + x1] * tx;
                    const double bottom = src[y1 * s.w + x0] * (1 - tx) + src[y1 * s.w + x1] * tx;
                    dst[y * width + x] = top * (1 - ty) + bottom * ty;
                }
            }
        }
    return out;
}

}  // namespace mipr::nn
