#include "bsnn/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

#include "bsnn/errors.hpp"

namespace bsnn {

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
{
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data))
{
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
    }
}

Tensor Tensor::from(std::initializer_list<float> values)
{
    return Tensor({values.size()}, std::vector<float>(values));
}

Tensor Tensor::from(Shape shape, std::initializer_list<float> values)
{
    return Tensor(std::move(shape), std::vector<float>(values));
}

float& Tensor::at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
float Tensor::at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

float& Tensor::at(std::size_t c, std::size_t h, std::size_t w)
{
    return data_[(c * shape_[1] + h) * shape_[2] + w];
}

float Tensor::at(std::size_t c, std::size_t h, std::size_t w) const
{
    return data_[(c * shape_[1] + h) * shape_[2] + w];
}

Tensor Tensor::reshaped(Shape shape) const
{
    return Tensor(std::move(shape), data_);
}

std::size_t window_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t pad, const char* what)
{
    if (kernel == 0 || stride == 0) {
        throw ConfigError(std::string(what) + ": kernel and stride must be positive");
    }
    const std::size_t padded = in + 2 * pad;
    if (kernel > padded) {
        throw ConfigError(std::string(what) + ": window " + std::to_string(kernel) +
                          " exceeds input extent " + std::to_string(padded));
    }
    if ((padded - kernel) % stride != 0) {
        throw ConfigError(std::string(what) + ": non-integral output size for extent " +
                          std::to_string(in) + ", kernel " + std::to_string(kernel) + ", stride " +
                          std::to_string(stride) + ", pad " + std::to_string(pad));
    }
    return (padded - kernel) / stride + 1;
}

Tensor dense_forward(const Tensor& weight, const Tensor& bias, const Tensor& x)
{
    if (weight.rank() != 2) {
        throw DimensionError("dense: weight must be rank 2, got " + shape_str(weight.shape()));
    }
    const std::size_t out = weight.dim(0);
    const std::size_t in = weight.dim(1);
    if (x.size() != in) {
        throw DimensionError("dense: weight " + shape_str(weight.shape()) + " vs input " +
                             shape_str(x.shape()));
    }
    if (bias.size() != out) {
        throw DimensionError("dense: weight " + shape_str(weight.shape()) + " vs bias " +
                             shape_str(bias.shape()));
    }
    Tensor y({out});
    const float* w = weight.data().data();
    const float* xv = x.data().data();
    for (std::size_t i = 0; i < out; ++i) {
        double acc = bias[i];
        const float* row = w + i * in;
        for (std::size_t j = 0; j < in; ++j) {
            acc += static_cast<double>(row[j]) * xv[j];
        }
        y[i] = static_cast<float>(acc);
    }
    return y;
}

Tensor conv2d_forward(const Tensor& weight, const Tensor& bias, const Tensor& x,
                      std::size_t stride, std::size_t pad)
{
    if (weight.rank() != 4 || x.rank() != 3) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " and input " +
                             shape_str(x.shape()) + " must be rank 4 and rank 3");
    }
    const std::size_t cout = weight.dim(0), cin = weight.dim(1);
    const std::size_t kh = weight.dim(2), kw = weight.dim(3);
    if (x.dim(0) != cin) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " vs input " +
                             shape_str(x.shape()));
    }
    if (bias.size() != cout) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " vs bias " +
                             shape_str(bias.shape()));
    }
    const std::size_t h = x.dim(1), wd = x.dim(2);
    const std::size_t oh = window_output_extent(h, kh, stride, pad, "conv2d");
    const std::size_t ow = window_output_extent(wd, kw, stride, pad, "conv2d");

    Tensor y({cout, oh, ow});
    for (std::size_t oc = 0; oc < cout; ++oc) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = bias[oc];
                for (std::size_t ic = 0; ic < cin; ++ic) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                            continue;
                        }
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) {
                                continue;
                            }
                            acc += static_cast<double>(
                                       weight[((oc * cin + ic) * kh + ky) * kw + kx]) *
                                   x.at(ic, static_cast<std::size_t>(iy),
                                        static_cast<std::size_t>(ix));
                        }
                    }
                }
                y.at(oc, oy, ox) = static_cast<float>(acc);
            }
        }
    }
    return y;
}

Tensor relu_forward(const Tensor& x)
{
    Tensor y = x;
    for (float& v : y.data()) {
        v = std::max(v, 0.0f);
    }
    return y;
}

Tensor pool2d_forward(const Tensor& x, PoolKind kind, std::size_t kernel, std::size_t stride)
{
    if (x.rank() != 3) {
        throw DimensionError("pool2d: input must be [C x H x W], got " + shape_str(x.shape()));
    }
    const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t oh = window_output_extent(h, kernel, stride, 0, "pool2d");
    const std::size_t ow = window_output_extent(wd, kernel, stride, 0, "pool2d");
    Tensor y({c, oh, ow});
    const double inv_area = 1.0 / static_cast<double>(kernel * kernel);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = kind == PoolKind::max ? x.at(ch, oy * stride, ox * stride) : 0.0;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const float v = x.at(ch, oy * stride + ky, ox * stride + kx);
                        if (kind == PoolKind::max) {
                            acc = std::max<double>(acc, v);
                        } else {
                            acc += v;
                        }
                    }
                }
                y.at(ch, oy, ox) = static_cast<float>(kind == PoolKind::max ? acc : acc * inv_area);
            }
        }
    }
    return y;
}

Tensor bn_forward(const Tensor& x, const Tensor& mu, const Tensor& theta, const Tensor& gamma,
                  const Tensor& beta)
{
    if (x.rank() == 0) {
        throw DimensionError("batchnorm: empty input");
    }
    const std::size_t channels = x.dim(0);
    for (const Tensor* p : {&mu, &theta, &gamma, &beta}) {
        if (p->size() != channels) {
            throw DimensionError("batchnorm: parameter " + shape_str(p->shape()) +
                                 " vs input channels of " + shape_str(x.shape()));
        }
    }
    for (float t : theta.data()) {
        if (!(t > 0.0f)) {
            throw DomainError("batchnorm: theta must be positive, got " + std::to_string(t));
        }
    }
    Tensor y = x;
    const std::size_t inner = x.size() / channels;
    for (std::size_t ch = 0; ch < channels; ++ch) {
        const double g = static_cast<double>(gamma[ch]) / theta[ch];
        for (std::size_t k = 0; k < inner; ++k) {
            float& v = y[ch * inner + k];
            v = static_cast<float>(g * (static_cast<double>(v) - mu[ch]) + beta[ch]);
        }
    }
    return y;
}

Tensor add(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) {
        throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor y = a;
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] += b[i];
    }
    return y;
}

Tensor scale(const Tensor& a, float factor)
{
    Tensor y = a;
    for (float& v : y.data()) {
        v *= factor;
    }
    return y;
}

} // namespace bsnn
