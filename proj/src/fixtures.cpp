#include "bsnn/fixtures.hpp"

#include <algorithm>
#include <numeric>

#include "bsnn/errors.hpp"

namespace bsnn {

namespace {

std::vector<std::vector<double>> blob_centres(const BlobConfig& cfg, Rng& rng)
{
    std::vector<std::vector<double>> centres(cfg.classes, std::vector<double>(cfg.dims));
    for (auto& c : centres) {
        for (double& v : c) {
            v = rng.uniform(cfg.center_lo, cfg.center_hi);
        }
    }
    return centres;
}

Dataset blob_samples(const BlobConfig& cfg, const std::vector<std::vector<double>>& centres, Rng& rng)
{
    std::vector<int> labels(cfg.samples);
    for (std::size_t i = 0; i < cfg.samples; ++i) {
        labels[i] = static_cast<int>(i % cfg.classes);
    }
    rng.shuffle(labels);
    std::vector<float> data(cfg.samples * cfg.dims);
    for (std::size_t i = 0; i < cfg.samples; ++i) {
        const auto& c = centres[static_cast<std::size_t>(labels[i])];
        for (std::size_t d = 0; d < cfg.dims; ++d) {
            data[i * cfg.dims + d] = static_cast<float>(std::clamp(rng.normal(c[d], cfg.spread), 0.0, 1.0));
        }
    }
    Dataset out;
    out.inputs = Tensor({cfg.samples, cfg.dims}, std::move(data));
    out.labels = std::move(labels);
    return out;
}

void check(const BlobConfig& cfg)
{
    if (cfg.classes < 1 || cfg.classes > 256 || cfg.dims < 1) {
        throw ConfigError("blob fixture needs 1..256 classes and at least one dimension");
    }
    if (!(cfg.spread >= 0.0) || cfg.center_lo > cfg.center_hi) {
        throw ConfigError("blob fixture spread must be non-negative and centre range ordered");
    }
}

} // namespace

Dataset make_blobs(const BlobConfig& cfg)
{
    check(cfg);
    Rng rng(cfg.seed);
    const auto centres = blob_centres(cfg, rng);
    return blob_samples(cfg, centres, rng);
}

Dataset make_blobs_split(const BlobConfig& cfg, std::uint64_t sample_seed)
{
    check(cfg);
    Rng centre_rng(cfg.seed);
    const auto centres = blob_centres(cfg, centre_rng);
    Rng rng(sample_seed);
    return blob_samples(cfg, centres, rng);
}

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi)
{
    Tensor t(std::move(shape));
    for (float& v : t.data()) {
        v = static_cast<float>(rng.uniform(lo, hi));
    }
    return t;
}

ModelGraph random_mlp(Rng& rng, std::size_t inputs, const std::vector<std::size_t>& widths, std::size_t outputs,
                      double scale, double bias_scale)
{
    ModelGraph m;
    m.input_shape = {inputs};
    m.layers.push_back(make_input(m.input_shape));
    std::size_t prev = inputs;
    for (std::size_t w : widths) {
        m.layers.push_back(make_dense(random_tensor(rng, {w, prev}, -scale, scale),
                                      random_tensor(rng, {w}, -bias_scale, bias_scale)));
        m.layers.push_back(make_relu());
        prev = w;
    }
    m.layers.push_back(make_dense(random_tensor(rng, {outputs, prev}, -scale, scale),
                                  random_tensor(rng, {outputs}, -bias_scale, bias_scale)));
    return m;
}

} // namespace bsnn
