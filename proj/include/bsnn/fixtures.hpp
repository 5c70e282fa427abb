#pragma once

#include <cstddef>
#include <cstdint>

#include "bsnn/model.hpp"
#include "bsnn/model_io.hpp"
#include "bsnn/rng.hpp"

namespace bsnn {

/// Gaussian class blobs clipped to [0, 1]. Class centres are drawn uniformly
/// in [center_lo, center_hi]^dims; samples are centre + N(0, spread^2) per
/// coordinate, emitted in shuffled order.
struct BlobConfig {
    std::size_t classes = 10;
    std::size_t dims = 64;
    std::size_t samples = 1000;
    double spread = 0.15;
    double center_lo = 0.2;
    double center_hi = 0.8;
    std::uint64_t seed = 7;
};

Dataset make_blobs(const BlobConfig& cfg);

/// Same class centres as make_blobs(cfg) but samples from an independent
/// stream, for held-out test sets.
Dataset make_blobs_split(const BlobConfig& cfg, std::uint64_t sample_seed);

/// Random dense MLP input -> (dense, relu)* -> dense with weights
/// U(-scale, scale) and biases U(-bias_scale, bias_scale).
ModelGraph random_mlp(Rng& rng, std::size_t inputs, const std::vector<std::size_t>& widths,
                      std::size_t outputs, double scale, double bias_scale);

/// Random tensor with U(lo, hi) elements.
Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi);

} // namespace bsnn
