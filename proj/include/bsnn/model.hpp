#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "bsnn/tensor.hpp"

namespace bsnn {

inline constexpr int kModelVersion = 1;

struct Layer;

struct InputLayer {
    Shape shape;
    bool operator==(const InputLayer&) const = default;
};

/// weight is [units x in].
struct DenseLayer {
    std::size_t units = 0;
    Tensor weight;
    Tensor bias;
    bool operator==(const DenseLayer&) const = default;
};

/// weight is [out_channels x in_channels x kernel x kernel].
struct Conv2dLayer {
    std::size_t out_channels = 0;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;
    Tensor weight;
    Tensor bias;
    bool operator==(const Conv2dLayer&) const = default;
};

/// Inference-mode batch norm. `std` is the per-channel standard deviation
/// sqrt(var + eps), not the variance.
struct BatchNormLayer {
    Tensor mean;
    Tensor std;
    Tensor gamma;
    Tensor beta;
    bool operator==(const BatchNormLayer&) const = default;
};

struct ReluLayer {
    bool operator==(const ReluLayer&) const = default;
};

struct PoolLayer {
    PoolKind kind = PoolKind::max;
    std::size_t kernel = 2;
    std::size_t stride = 2;
    bool operator==(const PoolLayer&) const = default;
};

struct FlattenLayer {
    bool operator==(const FlattenLayer&) const = default;
};

/// relu(body(x) + shortcut(shortcut_gain * x)). An empty shortcut is the
/// identity path. shortcut_gain is 1 for trained models and lambda_in /
/// lambda_out after weight normalization.
struct ResidualLayer {
    std::vector<Layer> body;
    std::vector<Layer> shortcut;
    float shortcut_gain = 1.0f;
    bool operator==(const ResidualLayer&) const;
};

using LayerOp = std::variant<InputLayer, DenseLayer, Conv2dLayer, BatchNormLayer, ReluLayer,
                             PoolLayer, FlattenLayer, ResidualLayer>;

enum class LayerKind { input, dense, conv2d, batchnorm, relu, maxpool2d, avgpool2d, flatten, residual };

struct Layer {
    LayerOp op;

    LayerKind kind() const;
    bool is_linear() const;
    bool operator==(const Layer&) const = default;
};

std::string kind_name(LayerKind kind);
LayerKind kind_from_name(const std::string& name);

struct ModelGraph {
    int version = kModelVersion;
    Shape input_shape;
    std::vector<Layer> layers;

    bool operator==(const ModelGraph&) const = default;
};

/// Output shape of `layer` given its input shape. Validates the layer's
/// parameter blobs against the input.
Shape layer_output_shape(const Layer& layer, const Shape& in, const std::string& path);

/// Shape after running `layers` on `in`.
Shape list_output_shape(const std::vector<Layer>& layers, const Shape& in, const std::string& path);

/// Full structural validation: input layer first, parameter shapes, batch
/// norm placement, residual path agreement. Returns the model output shape.
Shape validate_model(const ModelGraph& model);

/// Path prefix for layer `index` of a list rooted at `base` ("layers",
/// "layers.3.body", ...).
std::string layer_path(const std::string& base, std::size_t index);

// Convenience builders used by the trainer, fixtures and tests.
Layer make_input(Shape shape);
Layer make_dense(Tensor weight, Tensor bias);
Layer make_conv(Tensor weight, Tensor bias, std::size_t stride, std::size_t pad);
Layer make_batchnorm(Tensor mean, Tensor std, Tensor gamma, Tensor beta);
Layer make_relu();
Layer make_pool(PoolKind kind, std::size_t kernel, std::size_t stride);
Layer make_flatten();
Layer make_residual(std::vector<Layer> body, std::vector<Layer> shortcut, float gain = 1.0f);

bool has_residual(const std::vector<Layer>& layers);

} // namespace bsnn
