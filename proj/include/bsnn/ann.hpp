#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bsnn/model.hpp"
#include "bsnn/model_io.hpp"
#include "bsnn/tensor.hpp"

namespace bsnn {

// Normalization points, identified by path:
//   "input"            network input
//   "<layer path>"     output of a relu layer, e.g. "layers.2", "layers.4.body.1"
//   "<block>.in"       input of a residual block
//   "<block>.out"      output of a residual block (after add and relu)
//   "output"           network output (logits)
// A point whose tensor carries the same scale as an earlier point aliases
// that point's lambda: a block input always aliases the signal feeding it,
// and a relu or the output with no linear layer since the previous point
// aliases that point.
inline constexpr const char* kInputPoint = "input";
inline constexpr const char* kOutputPoint = "output";

struct NormPoint {
    std::string id;
    std::string alias_of; ///< empty when the point has its own lambda
};

std::vector<NormPoint> normalization_points(const ModelGraph& model);

/// Per-point activations for one input.
struct ActivationRecord {
    std::map<std::string, Tensor> points;

    const Tensor& at(const std::string& id) const;
};

struct InferenceResult {
    Tensor logits;
    std::optional<ActivationRecord> acts;
};

InferenceResult run_inference(const ModelGraph& model, const Tensor& x, bool capture = false);

std::size_t argmax(std::span<const float> values);

/// Merge every batchnorm into the preceding dense/conv2d layer.
ModelGraph fold_batchnorm(const ModelGraph& model);

bool has_batchnorm(const ModelGraph& model);

struct CalibrationStats {
    std::map<std::string, double> lambda;
    double p_max = 1.0;
    std::vector<std::string> warnings;

    double at(const std::string& id) const;
    bool operator==(const CalibrationStats& other) const
    {
        return lambda == other.lambda && p_max == other.p_max;
    }
};

/// ceil(p * N)-th smallest element of `values` (1-based). `values` is
/// reordered.
double nearest_rank_quantile(std::vector<float>& values, double p);

/// Lambda for every normalization point: nearest-rank p_max quantile of the
/// activations observed there over `calib`; replaced by 1 when the quantile is
/// not positive. `threads` = 0 uses the hardware concurrency.
CalibrationStats collect_lambdas(const ModelGraph& model, const Dataset& calib, double p_max,
                                 std::size_t threads = 1);

/// w * lambda_prev / lambda_next and b / lambda_next per linear layer;
/// shortcut paths keep their weights, divide biases by lambda_out and get
/// shortcut_gain = lambda_in / lambda_out. Input must be batchnorm-free.
ModelGraph normalize_weights(const ModelGraph& model, const CalibrationStats& stats);

/// lambda_in / lambda_out for the residual block at `block_path`
/// (e.g. "layers.3").
double residual_scale(const CalibrationStats& stats, const std::string& block_path);

/// Paths of all residual blocks in graph order.
std::vector<std::string> residual_blocks(const ModelGraph& model);

} // namespace bsnn
