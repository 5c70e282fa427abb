#pragma once

// Model builders and generators shared by the test suites and the acceptance
// binary.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "bsnn/fixtures.hpp"
#include "bsnn/model.hpp"
#include "bsnn/rng.hpp"
#include "bsnn/tensor.hpp"

namespace testing {

inline bsnn::Tensor identity(std::size_t n, float diag = 1.0f)
{
    bsnn::Tensor w({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        w[i * n + i] = diag;
    }
    return w;
}

/// Random dense net with batchnorm after every hidden dense layer.
inline bsnn::ModelGraph random_bn_mlp(bsnn::Rng& rng, std::size_t inputs, const std::vector<std::size_t>& widths,
                                      std::size_t outputs)
{
    bsnn::ModelGraph m;
    m.input_shape = {inputs};
    m.layers.push_back(bsnn::make_input({inputs}));
    std::size_t prev = inputs;
    for (std::size_t w : widths) {
        m.layers.push_back(bsnn::make_dense(bsnn::random_tensor(rng, {w, prev}, -0.6, 0.6),
                                            bsnn::random_tensor(rng, {w}, -0.2, 0.2)));
        m.layers.push_back(bsnn::make_batchnorm(
            bsnn::random_tensor(rng, {w}, -0.5, 0.5), bsnn::random_tensor(rng, {w}, 0.3, 2.0),
            bsnn::random_tensor(rng, {w}, 0.3, 2.0), bsnn::random_tensor(rng, {w}, -0.5, 0.5)));
        m.layers.push_back(bsnn::make_relu());
        prev = w;
    }
    m.layers.push_back(bsnn::make_dense(bsnn::random_tensor(rng, {outputs, prev}, -0.6, 0.6),
                                        bsnn::random_tensor(rng, {outputs}, -0.2, 0.2)));
    return m;
}

/// conv -> bn -> relu -> maxpool -> residual{conv, relu, conv; 1x1 conv shortcut}
/// -> avgpool -> flatten -> dense.
inline bsnn::ModelGraph random_conv_resnet(bsnn::Rng& rng, bool with_bn = true)
{
    using namespace bsnn;
    ModelGraph m;
    m.input_shape = {1, 8, 8};
    m.layers.push_back(make_input({1, 8, 8}));
    m.layers.push_back(make_conv(random_tensor(rng, {3, 1, 3, 3}, -0.5, 0.5), random_tensor(rng, {3}, -0.1, 0.2), 1, 1));
    if (with_bn) {
        m.layers.push_back(make_batchnorm(random_tensor(rng, {3}, -0.2, 0.2), random_tensor(rng, {3}, 0.5, 1.5),
                                          random_tensor(rng, {3}, 0.5, 1.5), random_tensor(rng, {3}, -0.1, 0.1)));
    }
    m.layers.push_back(make_relu());
    m.layers.push_back(make_pool(PoolKind::max, 2, 2));
    std::vector<Layer> body;
    body.push_back(make_conv(random_tensor(rng, {4, 3, 3, 3}, -0.4, 0.4), random_tensor(rng, {4}, -0.1, 0.1), 1, 1));
    body.push_back(make_relu());
    body.push_back(make_conv(random_tensor(rng, {4, 4, 3, 3}, -0.4, 0.4), random_tensor(rng, {4}, -0.1, 0.1), 1, 1));
    std::vector<Layer> shortcut;
    shortcut.push_back(make_conv(random_tensor(rng, {4, 3, 1, 1}, -0.8, 0.8), random_tensor(rng, {4}, -0.1, 0.1), 1, 0));
    m.layers.push_back(make_residual(std::move(body), std::move(shortcut)));
    m.layers.push_back(make_pool(PoolKind::avg, 2, 2));
    m.layers.push_back(make_flatten());
    m.layers.push_back(make_dense(random_tensor(rng, {3, 16}, -0.5, 0.5), random_tensor(rng, {3}, -0.1, 0.1)));
    return m;
}

/// input -> dense+relu -> residual{dense, relu, dense; identity shortcut} -> dense.
inline bsnn::ModelGraph dense_resnet(bsnn::Tensor w1, bsnn::Tensor b1, bsnn::Tensor wb1, bsnn::Tensor bb1,
                                     bsnn::Tensor wb2, bsnn::Tensor bb2, bsnn::Tensor wo, bsnn::Tensor bo)
{
    using namespace bsnn;
    ModelGraph m;
    m.input_shape = {w1.dim(1)};
    m.layers.push_back(make_input({w1.dim(1)}));
    m.layers.push_back(make_dense(std::move(w1), std::move(b1)));
    m.layers.push_back(make_relu());
    std::vector<Layer> body;
    body.push_back(make_dense(std::move(wb1), std::move(bb1)));
    body.push_back(make_relu());
    body.push_back(make_dense(std::move(wb2), std::move(bb2)));
    m.layers.push_back(make_residual(std::move(body), {}));
    m.layers.push_back(make_dense(std::move(wo), std::move(bo)));
    return m;
}

inline bsnn::ModelGraph random_dense_resnet(bsnn::Rng& rng, std::size_t inputs, std::size_t width, std::size_t outputs)
{
    using bsnn::random_tensor;
    return dense_resnet(random_tensor(rng, {width, inputs}, -0.5, 0.8), random_tensor(rng, {width}, -0.1, 0.2),
                        random_tensor(rng, {width, width}, -0.5, 0.6), random_tensor(rng, {width}, -0.1, 0.1),
                        random_tensor(rng, {width, width}, -0.5, 0.6), random_tensor(rng, {width}, -0.1, 0.1),
                        random_tensor(rng, {outputs, width}, -0.6, 0.6), random_tensor(rng, {outputs}, -0.1, 0.1));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("bsnn_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace testing
