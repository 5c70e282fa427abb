#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bsnn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 array. Carrier of every weight and activation.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor from(std::initializer_list<float> values);
    static Tensor from(Shape shape, std::initializer_list<float> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at(std::size_t i, std::size_t j);
    float at(std::size_t i, std::size_t j) const;
    float& at(std::size_t c, std::size_t h, std::size_t w);
    float at(std::size_t c, std::size_t h, std::size_t w) const;

    /// Same data, new shape with identical element count.
    Tensor reshaped(Shape shape) const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

/// y = W x + b for W[out x in].
Tensor dense_forward(const Tensor& weight, const Tensor& bias, const Tensor& x);

/// Zero-padded cross-correlation. W[Cout x Cin x Kh x Kw], x[Cin x H x W].
Tensor conv2d_forward(const Tensor& weight, const Tensor& bias, const Tensor& x,
                      std::size_t stride, std::size_t pad);

Tensor relu_forward(const Tensor& x);

enum class PoolKind { max, avg };

/// Windowed pooling over [C x H x W]; windows must tile the input exactly.
Tensor pool2d_forward(const Tensor& x, PoolKind kind, std::size_t kernel, std::size_t stride);

/// (gamma / theta) * (x - mu) + beta per channel. theta is the standard
/// deviation. Channel is axis 0; a rank-1 input has one channel per element.
Tensor bn_forward(const Tensor& x, const Tensor& mu, const Tensor& theta, const Tensor& gamma,
                  const Tensor& beta);

/// Output spatial extent of a convolution or pooling window, throwing
/// ConfigError when the geometry does not tile.
std::size_t window_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t pad, const char* what);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

} // namespace bsnn
