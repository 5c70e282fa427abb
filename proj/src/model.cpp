#include "bsnn/model.hpp"

#include <type_traits>
#include <utility>

#include "bsnn/errors.hpp"

namespace bsnn {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void expect_shape(const Tensor& t, const Shape& want, const std::string& what)
{
    if (t.shape() != want) {
        throw ShapeError(what + ": expected " + shape_str(want) + ", got " + shape_str(t.shape()));
    }
}

void validate_list(const std::vector<Layer>& layers, const std::string& base, bool top_level)
{
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& layer = layers[i];
        const std::string path = layer_path(base, i);
        if (layer.kind() == LayerKind::input && !(top_level && i == 0)) {
            throw StructureError(path + ": input layer must be the first top-level layer");
        }
        if (layer.kind() == LayerKind::batchnorm) {
            const bool follows_linear = i > 0 && (layers[i - 1].kind() == LayerKind::dense ||
                                                  layers[i - 1].kind() == LayerKind::conv2d);
            if (!follows_linear) {
                throw StructureError(path + ": batchnorm must directly follow dense or conv2d");
            }
        }
        if (const auto* res = std::get_if<ResidualLayer>(&layer.op)) {
            if (res->body.empty()) {
                throw StructureError(path + ": residual body is empty");
            }
            validate_list(res->body, path + ".body", false);
            validate_list(res->shortcut, path + ".shortcut", false);
            for (std::size_t k = 0; k < res->shortcut.size(); ++k) {
                const LayerKind sk = res->shortcut[k].kind();
                if (sk != LayerKind::dense && sk != LayerKind::conv2d && sk != LayerKind::batchnorm &&
                    sk != LayerKind::flatten) {
                    throw StructureError(layer_path(path + ".shortcut", k) +
                                         ": shortcut may only hold dense, conv2d, batchnorm or "
                                         "flatten layers");
                }
            }
        }
    }
}

} // namespace

bool ResidualLayer::operator==(const ResidualLayer& other) const
{
    return body == other.body && shortcut == other.shortcut && shortcut_gain == other.shortcut_gain;
}

LayerKind Layer::kind() const
{
    return std::visit(Overloaded{
                          [](const InputLayer&) { return LayerKind::input; },
                          [](const DenseLayer&) { return LayerKind::dense; },
                          [](const Conv2dLayer&) { return LayerKind::conv2d; },
                          [](const BatchNormLayer&) { return LayerKind::batchnorm; },
                          [](const ReluLayer&) { return LayerKind::relu; },
                          [](const PoolLayer& p) {
                              return p.kind == PoolKind::max ? LayerKind::maxpool2d
                                                             : LayerKind::avgpool2d;
                          },
                          [](const FlattenLayer&) { return LayerKind::flatten; },
                          [](const ResidualLayer&) { return LayerKind::residual; },
                      },
                      op);
}

bool Layer::is_linear() const
{
    const LayerKind k = kind();
    return k == LayerKind::dense || k == LayerKind::conv2d || k == LayerKind::batchnorm;
}

std::string kind_name(LayerKind kind)
{
    switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::residual: return "residual";
    }
    return "?";
}

LayerKind kind_from_name(const std::string& name)
{
    for (LayerKind k : {LayerKind::input, LayerKind::dense, LayerKind::conv2d, LayerKind::batchnorm,
                        LayerKind::relu, LayerKind::maxpool2d, LayerKind::avgpool2d,
                        LayerKind::flatten, LayerKind::residual}) {
        if (kind_name(k) == name) {
            return k;
        }
    }
    throw FormatError("unknown layer kind '" + name + "'");
}

std::string layer_path(const std::string& base, std::size_t index)
{
    return base + "." + std::to_string(index);
}

Shape layer_output_shape(const Layer& layer, const Shape& in, const std::string& path)
{
    return std::visit(
        Overloaded{
            [&](const InputLayer& l) {
                if (l.shape != in) {
                    throw ShapeError(path + ": input layer shape " + shape_str(l.shape) +
                                     " differs from model input_shape " + shape_str(in));
                }
                return in;
            },
            [&](const DenseLayer& l) {
                if (in.size() != 1) {
                    throw ShapeError(path + ": dense expects a rank-1 input, got " + shape_str(in) +
                                     " (insert a flatten layer)");
                }
                expect_shape(l.weight, {l.units, in[0]}, path + ".weight");
                expect_shape(l.bias, {l.units}, path + ".bias");
                return Shape{l.units};
            },
            [&](const Conv2dLayer& l) {
                if (in.size() != 3) {
                    throw ShapeError(path + ": conv2d expects [C x H x W], got " + shape_str(in));
                }
                expect_shape(l.weight, {l.out_channels, in[0], l.kernel, l.kernel},
                             path + ".weight");
                expect_shape(l.bias, {l.out_channels}, path + ".bias");
                const std::string what = path + " (conv2d)";
                return Shape{l.out_channels,
                             window_output_extent(in[1], l.kernel, l.stride, l.pad, what.c_str()),
                             window_output_extent(in[2], l.kernel, l.stride, l.pad, what.c_str())};
            },
            [&](const BatchNormLayer& l) {
                if (in.empty()) {
                    throw ShapeError(path + ": batchnorm on empty shape");
                }
                for (const auto& [t, name] : {std::pair{&l.mean, ".mean"}, std::pair{&l.std, ".std"},
                                              std::pair{&l.gamma, ".gamma"},
                                              std::pair{&l.beta, ".beta"}}) {
                    expect_shape(*t, {in[0]}, path + name);
                }
                return in;
            },
            [&](const ReluLayer&) { return in; },
            [&](const PoolLayer& l) {
                if (in.size() != 3) {
                    throw ShapeError(path + ": pooling expects [C x H x W], got " + shape_str(in));
                }
                const std::string what = path + " (pool)";
                return Shape{in[0], window_output_extent(in[1], l.kernel, l.stride, 0, what.c_str()),
                             window_output_extent(in[2], l.kernel, l.stride, 0, what.c_str())};
            },
            [&](const FlattenLayer&) { return Shape{shape_numel(in)}; },
            [&](const ResidualLayer& l) {
                const Shape body = list_output_shape(l.body, in, path + ".body");
                const Shape shortcut = list_output_shape(l.shortcut, in, path + ".shortcut");
                if (body != shortcut) {
                    throw ShapeError(path + ": residual body output " + shape_str(body) +
                                     " differs from shortcut output " + shape_str(shortcut));
                }
                return body;
            },
        },
        layer.op);
}

Shape list_output_shape(const std::vector<Layer>& layers, const Shape& in, const std::string& path)
{
    Shape shape = in;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        shape = layer_output_shape(layers[i], shape, layer_path(path, i));
    }
    return shape;
}

Shape validate_model(const ModelGraph& model)
{
    if (model.layers.empty() || model.layers.front().kind() != LayerKind::input) {
        throw StructureError("model must contain an input layer");
    }
    if (model.input_shape.empty() || shape_numel(model.input_shape) == 0) {
        throw ShapeError("model input_shape must be non-empty with positive extents");
    }
    validate_list(model.layers, "layers", true);
    return list_output_shape(model.layers, model.input_shape, "layers");
}

Layer make_input(Shape shape) { return Layer{InputLayer{std::move(shape)}}; }

Layer make_dense(Tensor weight, Tensor bias)
{
    const std::size_t units = weight.rank() > 0 ? weight.dim(0) : 0;
    return Layer{DenseLayer{units, std::move(weight), std::move(bias)}};
}

Layer make_conv(Tensor weight, Tensor bias, std::size_t stride, std::size_t pad)
{
    Conv2dLayer conv;
    conv.out_channels = weight.rank() == 4 ? weight.dim(0) : 0;
    conv.kernel = weight.rank() == 4 ? weight.dim(2) : 0;
    conv.stride = stride;
    conv.pad = pad;
    conv.weight = std::move(weight);
    conv.bias = std::move(bias);
    return Layer{std::move(conv)};
}

Layer make_batchnorm(Tensor mean, Tensor std, Tensor gamma, Tensor beta)
{
    return Layer{BatchNormLayer{std::move(mean), std::move(std), std::move(gamma), std::move(beta)}};
}

Layer make_relu() { return Layer{ReluLayer{}}; }

Layer make_pool(PoolKind kind, std::size_t kernel, std::size_t stride)
{
    return Layer{PoolLayer{kind, kernel, stride}};
}

Layer make_flatten() { return Layer{FlattenLayer{}}; }

Layer make_residual(std::vector<Layer> body, std::vector<Layer> shortcut, float gain)
{
    return Layer{ResidualLayer{std::move(body), std::move(shortcut), gain}};
}

bool has_residual(const std::vector<Layer>& layers)
{
    for (const Layer& l : layers) {
        if (l.kind() == LayerKind::residual) {
            return true;
        }
    }
    return false;
}

} // namespace bsnn
