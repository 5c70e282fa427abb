#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "bsnn/model.hpp"
#include "bsnn/model_io.hpp"
#include "bsnn/tensor.hpp"

namespace bsnn {

struct TrainConfig {
    std::vector<std::size_t> widths; ///< hidden layer widths; input and output come from the data
    std::size_t epochs = 10;
    double learning_rate = 0.05;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    std::size_t num_classes = 0; ///< 0: one more than the largest label

    void validate() const;
};

struct TrainResult {
    ModelGraph model;
    std::vector<double> epoch_loss; ///< mean training loss of each epoch
    double train_accuracy = 0.0;
    std::optional<double> test_accuracy;
};

/// Mini-batch SGD on softmax cross-entropy for input -> (dense, relu)* ->
/// dense (with a flatten after the input for rank > 1 samples). He initialization (N(0, 2/fan_in) weights, zero biases) drawn from
/// Rng(seed); the sample order is reshuffled every epoch from the same
/// generator. Throws DivergenceError naming the seed if the loss is not finite.
TrainResult train_mlp(const TrainConfig& cfg, const Dataset& train, const Dataset* test = nullptr);

/// He-initialized model without training. Inputs of rank > 1 are flattened
/// by a flatten layer after the input.
ModelGraph init_mlp(const Shape& input_shape, const std::vector<std::size_t>& widths, std::size_t outputs,
                    std::uint64_t seed);

double accuracy(const ModelGraph& model, const Dataset& data);

enum class LossKind {
    cross_entropy, ///< softmax cross-entropy against a target distribution
    squared,       ///< 0.5 * ||logits - target||^2
};

/// Per-layer gradients of a dense MLP, weight[l] laid out [out][in].
struct MlpGradient {
    std::vector<std::vector<double>> weight;
    std::vector<std::vector<double>> bias;
};

/// Loss for one sample; fills `grad` by back-propagation when given. The
/// model must be input -> [flatten] -> (dense, relu)* -> dense (an optional trailing relu
/// is allowed). Computed in 64-bit.
double mlp_loss(const ModelGraph& model, const Tensor& x, const std::vector<double>& target,
                LossKind loss, MlpGradient* grad = nullptr);

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    /// Parameters whose +-h perturbation moves a relu across its kink; the
    /// central difference is not a derivative estimate there.
    std::size_t skipped_kinks = 0;
};

/// Compares back-propagated gradients with central differences (step h on
/// 64-bit copies of the parameters). Relative error is
/// |g - g_fd| / max(|g| + |g_fd|, 1e-8).
GradCheckReport grad_check(const ModelGraph& model, const Tensor& x, const std::vector<double>& target,
                           LossKind loss = LossKind::cross_entropy, double h = 1e-3);

/// Cross-entropy check against a class label.
GradCheckReport grad_check(const ModelGraph& model, const Tensor& x, int label, double h = 1e-3);

} // namespace bsnn
