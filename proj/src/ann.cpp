#include "bsnn/ann.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "bsnn/errors.hpp"

namespace bsnn {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

using PointMap = std::map<std::string, Tensor>;

Tensor forward_list(const std::vector<Layer>& layers, const std::string& base, Tensor x,
                    PointMap* capture);

Tensor forward_layer(const Layer& layer, const std::string& path, const Tensor& x,
                     PointMap* capture)
{
    return std::visit(
        Overloaded{
            [&](const InputLayer& l) {
                if (x.shape() != l.shape) {
                    throw DimensionError("input " + shape_str(x.shape()) +
                                         " does not match model input " + shape_str(l.shape));
                }
                return x;
            },
            [&](const DenseLayer& l) { return dense_forward(l.weight, l.bias, x); },
            [&](const Conv2dLayer& l) {
                return conv2d_forward(l.weight, l.bias, x, l.stride, l.pad);
            },
            [&](const BatchNormLayer& l) { return bn_forward(x, l.mean, l.std, l.gamma, l.beta); },
            [&](const ReluLayer&) {
                Tensor y = relu_forward(x);
                if (capture) {
                    (*capture)[path] = y;
                }
                return y;
            },
            [&](const PoolLayer& l) { return pool2d_forward(x, l.kind, l.kernel, l.stride); },
            [&](const FlattenLayer&) { return x.reshaped({x.size()}); },
            [&](const ResidualLayer& l) {
                if (capture) {
                    (*capture)[path + ".in"] = x;
                }
                const Tensor body = forward_list(l.body, path + ".body", x, capture);
                const Tensor shortcut = forward_list(
                    l.shortcut, path + ".shortcut", l.shortcut_gain == 1.0f ? x : scale(x, l.shortcut_gain),
                    nullptr);
                Tensor y = relu_forward(add(body, shortcut));
                if (capture) {
                    (*capture)[path + ".out"] = y;
                }
                return y;
            },
        },
        layer.op);
}

Tensor forward_list(const std::vector<Layer>& layers, const std::string& base, Tensor x,
                    PointMap* capture)
{
    for (std::size_t i = 0; i < layers.size(); ++i) {
        x = forward_layer(layers[i], layer_path(base, i), x, capture);
    }
    return x;
}

// Walks a layer list emitting normalization points. `current` is the own
// (non-alias) point whose scale the signal carries; `linear_since` tracks
// whether a linear layer has rescaled the signal since then.
void walk_points(const std::vector<Layer>& layers, const std::string& base, std::string& current,
                 bool& linear_since, std::vector<NormPoint>& out)
{
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string path = layer_path(base, i);
        const Layer& layer = layers[i];
        switch (layer.kind()) {
        case LayerKind::dense:
        case LayerKind::conv2d:
        case LayerKind::batchnorm:
            linear_since = true;
            break;
        case LayerKind::relu:
            if (linear_since) {
                out.push_back({path, ""});
                current = path;
            } else {
                out.push_back({path, current});
            }
            linear_since = false;
            break;
        case LayerKind::residual: {
            if (linear_since) {
                throw StructureError(path + ": residual block input must be a relu, residual or "
                                            "network input (got an unrectified linear output)");
            }
            const auto& res = std::get<ResidualLayer>(layer.op);
            out.push_back({path + ".in", current});
            std::string inner = current;
            bool inner_linear = false;
            walk_points(res.body, path + ".body", inner, inner_linear, out);
            out.push_back({path + ".out", ""});
            current = path + ".out";
            linear_since = false;
            break;
        }
        default:
            break;
        }
    }
}

void fold_list(std::vector<Layer>& layers, const std::string& base)
{
    std::vector<Layer> out;
    out.reserve(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        Layer& layer = layers[i];
        const std::string path = layer_path(base, i);
        if (auto* res = std::get_if<ResidualLayer>(&layer.op)) {
            fold_list(res->body, path + ".body");
            fold_list(res->shortcut, path + ".shortcut");
        }
        if (const auto* bn = std::get_if<BatchNormLayer>(&layer.op)) {
            if (out.empty()) {
                throw StructureError(path + ": orphan batchnorm (no preceding dense/conv2d)");
            }
            Layer& prev = out.back();
            Tensor* weight = nullptr;
            Tensor* bias = nullptr;
            if (auto* d = std::get_if<DenseLayer>(&prev.op)) {
                weight = &d->weight;
                bias = &d->bias;
            } else if (auto* c = std::get_if<Conv2dLayer>(&prev.op)) {
                weight = &c->weight;
                bias = &c->bias;
            } else {
                throw StructureError(path + ": orphan batchnorm (preceded by " +
                                     kind_name(prev.kind()) + ")");
            }
            const std::size_t channels = bias->size();
            if (bn->std.size() != channels) {
                throw ShapeError(path + ": batchnorm has " + std::to_string(bn->std.size()) +
                                 " channels, preceding layer has " + std::to_string(channels));
            }
            const std::size_t per_channel = weight->size() / channels;
            for (std::size_t ch = 0; ch < channels; ++ch) {
                if (!(bn->std[ch] > 0.0f)) {
                    throw DomainError(path + ": batchnorm std must be positive");
                }
                const double g = static_cast<double>(bn->gamma[ch]) / bn->std[ch];
                for (std::size_t k = 0; k < per_channel; ++k) {
                    float& w = (*weight)[ch * per_channel + k];
                    w = static_cast<float>(g * w);
                }
                (*bias)[ch] = static_cast<float>(
                    g * (static_cast<double>((*bias)[ch]) - bn->mean[ch]) + bn->beta[ch]);
            }
            continue;
        }
        out.push_back(std::move(layer));
    }
    layers = std::move(out);
}

bool list_has_batchnorm(const std::vector<Layer>& layers)
{
    for (const Layer& l : layers) {
        if (l.kind() == LayerKind::batchnorm) {
            return true;
        }
        if (const auto* res = std::get_if<ResidualLayer>(&l.op)) {
            if (list_has_batchnorm(res->body) || list_has_batchnorm(res->shortcut)) {
                return true;
            }
        }
    }
    return false;
}

void scale_linear(Layer& layer, double weight_factor, double bias_divisor)
{
    auto apply = [&](Tensor& w, Tensor& b) {
        if (weight_factor != 1.0) {
            for (float& v : w.data()) {
                v = static_cast<float>(v * weight_factor);
            }
        }
        if (bias_divisor != 1.0) {
            for (float& v : b.data()) {
                v = static_cast<float>(v / bias_divisor);
            }
        }
    };
    if (auto* d = std::get_if<DenseLayer>(&layer.op)) {
        apply(d->weight, d->bias);
    } else if (auto* c = std::get_if<Conv2dLayer>(&layer.op)) {
        apply(c->weight, c->bias);
    }
}

void normalize_list(std::vector<Layer>& layers, const std::string& base, double& lambda_current,
                    double lambda_end, const CalibrationStats& stats)
{
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string path = layer_path(base, i);
        Layer& layer = layers[i];
        switch (layer.kind()) {
        case LayerKind::batchnorm:
            throw StructureError(path + ": fold batchnorm layers before normalizing");
        case LayerKind::dense:
        case LayerKind::conv2d: {
            double target = lambda_end;
            for (std::size_t j = i + 1; j < layers.size(); ++j) {
                if (layers[j].kind() == LayerKind::relu) {
                    target = stats.at(layer_path(base, j));
                    break;
                }
            }
            scale_linear(layer, lambda_current / target, target);
            lambda_current = target;
            break;
        }
        case LayerKind::relu:
            lambda_current = stats.at(path);
            break;
        case LayerKind::residual: {
            auto& res = std::get<ResidualLayer>(layer.op);
            const double lambda_in = lambda_current;
            const double lambda_out = stats.at(path + ".out");
            double inner = lambda_in;
            normalize_list(res.body, path + ".body", inner, lambda_out, stats);
            for (Layer& s : res.shortcut) {
                if (s.kind() == LayerKind::batchnorm) {
                    throw StructureError(path + ".shortcut: fold batchnorm layers before normalizing");
                }
                scale_linear(s, 1.0, lambda_out);
            }
            res.shortcut_gain =
                static_cast<float>(res.shortcut_gain * residual_scale(stats, path));
            lambda_current = lambda_out;
            break;
        }
        default:
            break;
        }
    }
}

void walk_blocks(const std::vector<Layer>& layers, const std::string& base,
                 std::vector<std::string>& out)
{
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (const auto* res = std::get_if<ResidualLayer>(&layers[i].op)) {
            out.push_back(layer_path(base, i));
            walk_blocks(res->body, layer_path(base, i) + ".body", out);
        }
    }
}

} // namespace

const Tensor& ActivationRecord::at(const std::string& id) const
{
    const auto it = points.find(id);
    if (it == points.end()) {
        throw ValidationError("no activations recorded for point '" + id + "'");
    }
    return it->second;
}

std::vector<NormPoint> normalization_points(const ModelGraph& model)
{
    std::vector<NormPoint> out{{kInputPoint, ""}};
    std::string current = kInputPoint;
    bool linear_since = false;
    walk_points(model.layers, "layers", current, linear_since, out);
    out.push_back({kOutputPoint, linear_since ? "" : current});
    return out;
}

InferenceResult run_inference(const ModelGraph& model, const Tensor& x, bool capture)
{
    if (x.shape() != model.input_shape) {
        throw DimensionError("input " + shape_str(x.shape()) + " does not match model input " +
                             shape_str(model.input_shape));
    }
    InferenceResult result;
    PointMap points;
    if (capture) {
        points[kInputPoint] = x;
    }
    result.logits = forward_list(model.layers, "layers", x, capture ? &points : nullptr);
    if (capture) {
        points[kOutputPoint] = result.logits;
        result.acts = ActivationRecord{std::move(points)};
    }
    return result;
}

std::size_t argmax(std::span<const float> values)
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) {
            best = i;
        }
    }
    return best;
}

ModelGraph fold_batchnorm(const ModelGraph& model)
{
    ModelGraph out = model;
    fold_list(out.layers, "layers");
    return out;
}

bool has_batchnorm(const ModelGraph& model) { return list_has_batchnorm(model.layers); }

double CalibrationStats::at(const std::string& id) const
{
    const auto it = lambda.find(id);
    if (it == lambda.end()) {
        throw ValidationError("missing lambda entry for normalization point '" + id + "'");
    }
    return it->second;
}

double nearest_rank_quantile(std::vector<float>& values, double p)
{
    if (values.empty()) {
        throw ValidationError("quantile of an empty set");
    }
    const double n = static_cast<double>(values.size());
    auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, values.size());
    auto nth = values.begin() + static_cast<std::ptrdiff_t>(rank - 1);
    std::nth_element(values.begin(), nth, values.end());
    return *nth;
}

CalibrationStats collect_lambdas(const ModelGraph& model, const Dataset& calib, double p_max,
                                 std::size_t threads)
{
    if (calib.count() == 0) {
        throw ValidationError("calibration set is empty");
    }
    if (!(p_max > 0.0 && p_max <= 1.0)) {
        throw DomainError("p_max must lie in (0, 1]");
    }
    if (has_batchnorm(model)) {
        throw StructureError("collect_lambdas expects a batchnorm-folded model");
    }
    const std::vector<NormPoint> points = normalization_points(model);

    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = std::min(threads, calib.count());
    std::vector<std::map<std::string, std::vector<float>>> partial(threads);
    auto work = [&](std::size_t part) {
        const std::size_t begin = calib.count() * part / threads;
        const std::size_t end = calib.count() * (part + 1) / threads;
        auto& sink = partial[part];
        for (std::size_t s = begin; s < end; ++s) {
            const InferenceResult r = run_inference(model, calib.sample(s), true);
            for (const NormPoint& p : points) {
                if (!p.alias_of.empty()) {
                    continue;
                }
                const auto vals = r.acts->at(p.id).data();
                auto& dst = sink[p.id];
                dst.insert(dst.end(), vals.begin(), vals.end());
            }
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back(work, t);
        }
    }

    CalibrationStats stats;
    stats.p_max = p_max;
    for (const NormPoint& p : points) {
        if (!p.alias_of.empty()) {
            stats.lambda[p.id] = stats.at(p.alias_of);
            continue;
        }
        std::vector<float> merged;
        for (auto& part : partial) {
            auto& v = part[p.id];
            merged.insert(merged.end(), v.begin(), v.end());
        }
        double q = nearest_rank_quantile(merged, p_max);
        if (!(q > 0.0)) {
            stats.warnings.push_back("point '" + p.id + "' has non-positive p_max quantile; lambda set to 1");
            q = 1.0;
        }
        stats.lambda[p.id] = q;
    }
    return stats;
}

ModelGraph normalize_weights(const ModelGraph& model, const CalibrationStats& stats)
{
    if (has_batchnorm(model)) {
        throw StructureError("normalize_weights expects a batchnorm-folded model");
    }
    for (const NormPoint& p : normalization_points(model)) {
        stats.at(p.id);
    }
    ModelGraph out = model;
    double lambda = stats.at(kInputPoint);
    normalize_list(out.layers, "layers", lambda, stats.at(kOutputPoint), stats);
    return out;
}

double residual_scale(const CalibrationStats& stats, const std::string& block_path)
{
    const double lambda_in = stats.at(block_path + ".in");
    double lambda_out = stats.at(block_path + ".out");
    if (!(lambda_out > 0.0)) {
        lambda_out = 1.0;
    }
    return lambda_in / lambda_out;
}

std::vector<std::string> residual_blocks(const ModelGraph& model)
{
    std::vector<std::string> out;
    walk_blocks(model.layers, "layers", out);
    return out;
}

} // namespace bsnn
