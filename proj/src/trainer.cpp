#include "bsnn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>

#include "bsnn/ann.hpp"
#include "bsnn/errors.hpp"
#include "bsnn/rng.hpp"

namespace bsnn {

void TrainConfig::validate() const
{
    for (std::size_t w : widths) {
        if (w < 1) {
            throw ConfigError("layer widths must be at least 1");
        }
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning rate must be positive");
    }
    if (batch_size < 1) {
        throw ConfigError("batch size must be at least 1");
    }
}

namespace {

/// 64-bit working copy of a dense MLP.
struct Mlp {
    Shape input_shape;
    std::vector<std::size_t> sizes; ///< sizes[0] = inputs, sizes[l+1] = outputs of layer l
    std::vector<std::vector<double>> weight;
    std::vector<std::vector<double>> bias;
    std::vector<bool> relu;

    std::size_t depth() const { return weight.size(); }
};

Mlp mlp_from_model(const ModelGraph& model)
{
    validate_model(model);
    Mlp m;
    m.input_shape = model.input_shape;
    m.sizes.push_back(shape_numel(model.input_shape));
    bool flattened = model.input_shape.size() == 1;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const Layer& layer = model.layers[i];
        switch (layer.kind()) {
        case LayerKind::input:
            if (i != 0) {
                throw StructureError(layer_path("layers", i) + ": unexpected input layer");
            }
            break;
        case LayerKind::flatten:
            if (flattened || !m.weight.empty()) {
                throw StructureError(layer_path("layers", i) + ": flatten is only supported right after the input");
            }
            flattened = true;
            break;
        case LayerKind::dense: {
            const auto& d = std::get<DenseLayer>(layer.op);
            m.weight.emplace_back(d.weight.values().begin(), d.weight.values().end());
            m.bias.emplace_back(d.bias.values().begin(), d.bias.values().end());
            m.relu.push_back(false);
            m.sizes.push_back(d.units);
            break;
        }
        case LayerKind::relu:
            if (m.relu.empty() || m.relu.back()) {
                throw StructureError(layer_path("layers", i) + ": relu must follow a dense layer");
            }
            m.relu.back() = true;
            break;
        default:
            throw StructureError(layer_path("layers", i) + ": trainer supports only dense and relu layers, got " +
                                 kind_name(layer.kind()));
        }
    }
    if (m.weight.empty()) {
        throw StructureError("trainer model has no dense layer");
    }
    return m;
}

ModelGraph mlp_to_model(const Mlp& m)
{
    ModelGraph g;
    g.input_shape = m.input_shape;
    g.layers.push_back(make_input(g.input_shape));
    if (g.input_shape.size() != 1) {
        g.layers.push_back(make_flatten());
    }
    for (std::size_t l = 0; l < m.depth(); ++l) {
        std::vector<float> w(m.weight[l].begin(), m.weight[l].end());
        std::vector<float> b(m.bias[l].begin(), m.bias[l].end());
        g.layers.push_back(make_dense(Tensor({m.sizes[l + 1], m.sizes[l]}, std::move(w)),
                                      Tensor({m.sizes[l + 1]}, std::move(b))));
        if (m.relu[l]) {
            g.layers.push_back(make_relu());
        }
    }
    return g;
}

struct Workspace {
    std::vector<std::vector<double>> z;   ///< pre-activations per layer
    std::vector<std::vector<double>> act; ///< act[0] = input, act[l+1] = layer l output
    std::vector<double> dz;
    std::vector<double> da;
};

void forward(const Mlp& m, std::span<const float> x, Workspace& ws)
{
    ws.act.resize(m.depth() + 1);
    ws.z.resize(m.depth());
    ws.act[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < m.depth(); ++l) {
        const std::size_t n_in = m.sizes[l];
        const std::size_t n_out = m.sizes[l + 1];
        const std::vector<double>& in = ws.act[l];
        std::vector<double>& z = ws.z[l];
        z.assign(n_out, 0.0);
        for (std::size_t o = 0; o < n_out; ++o) {
            const double* row = m.weight[l].data() + o * n_in;
            double acc = m.bias[l][o];
            for (std::size_t i = 0; i < n_in; ++i) {
                acc += row[i] * in[i];
            }
            z[o] = acc;
        }
        ws.act[l + 1] = z;
        if (m.relu[l]) {
            for (double& v : ws.act[l + 1]) {
                v = std::max(v, 0.0);
            }
        }
    }
}

double loss_of(const std::vector<double>& out, const std::vector<double>& target, LossKind loss,
               std::vector<double>* d_out)
{
    if (target.size() != out.size()) {
        throw DimensionError("loss target has " + std::to_string(target.size()) + " entries, model has " +
                             std::to_string(out.size()) + " outputs");
    }
    double value = 0.0;
    if (d_out) {
        d_out->assign(out.size(), 0.0);
    }
    if (loss == LossKind::squared) {
        for (std::size_t k = 0; k < out.size(); ++k) {
            const double d = out[k] - target[k];
            value += 0.5 * d * d;
            if (d_out) {
                (*d_out)[k] = d;
            }
        }
        return value;
    }
    const double top = *std::max_element(out.begin(), out.end());
    double sum = 0.0;
    for (double v : out) {
        sum += std::exp(v - top);
    }
    const double log_sum = top + std::log(sum);
    const double mass = std::accumulate(target.begin(), target.end(), 0.0);
    for (std::size_t k = 0; k < out.size(); ++k) {
        value -= target[k] * (out[k] - log_sum);
        if (d_out) {
            (*d_out)[k] = mass * std::exp(out[k] - log_sum) - target[k];
        }
    }
    return value;
}

/// Loss of one sample; accumulates gradients into `grad` when non-null.
double forward_backward(const Mlp& m, std::span<const float> x, const std::vector<double>& target, LossKind loss,
                        Workspace& ws, MlpGradient* grad)
{
    forward(m, x, ws);
    const double value = loss_of(ws.act.back(), target, loss, grad ? &ws.dz : nullptr);
    if (!grad) {
        return value;
    }
    for (std::size_t l = m.depth(); l-- > 0;) {
        const std::size_t n_in = m.sizes[l];
        const std::size_t n_out = m.sizes[l + 1];
        if (m.relu[l]) {
            for (std::size_t o = 0; o < n_out; ++o) {
                if (ws.z[l][o] <= 0.0) {
                    ws.dz[o] = 0.0;
                }
            }
        }
        const std::vector<double>& in = ws.act[l];
        std::vector<double>& gw = grad->weight[l];
        for (std::size_t o = 0; o < n_out; ++o) {
            const double d = ws.dz[o];
            grad->bias[l][o] += d;
            if (d == 0.0) {
                continue;
            }
            double* row = gw.data() + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) {
                row[i] += d * in[i];
            }
        }
        if (l == 0) {
            break;
        }
        ws.da.assign(n_in, 0.0);
        for (std::size_t o = 0; o < n_out; ++o) {
            const double d = ws.dz[o];
            if (d == 0.0) {
                continue;
            }
            const double* row = m.weight[l].data() + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) {
                ws.da[i] += d * row[i];
            }
        }
        ws.dz.swap(ws.da);
    }
    return value;
}

MlpGradient zero_gradient(const Mlp& m)
{
    MlpGradient g;
    for (std::size_t l = 0; l < m.depth(); ++l) {
        g.weight.emplace_back(m.weight[l].size(), 0.0);
        g.bias.emplace_back(m.bias[l].size(), 0.0);
    }
    return g;
}

std::vector<double> one_hot(int label, std::size_t classes)
{
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        throw DomainError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    }
    std::vector<double> t(classes, 0.0);
    t[static_cast<std::size_t>(label)] = 1.0;
    return t;
}

std::vector<bool> relu_mask(const Mlp& m, const Workspace& ws)
{
    std::vector<bool> mask;
    for (std::size_t l = 0; l < m.depth(); ++l) {
        if (!m.relu[l]) {
            continue;
        }
        for (double z : ws.z[l]) {
            mask.push_back(z > 0.0);
        }
    }
    return mask;
}

} // namespace

ModelGraph init_mlp(const Shape& input_shape, const std::vector<std::size_t>& widths, std::size_t outputs,
                    std::uint64_t seed)
{
    const std::size_t inputs = shape_numel(input_shape);
    if (input_shape.empty() || inputs < 1 || outputs < 1) {
        throw ConfigError("MLP needs at least one input and one output");
    }
    Rng rng(seed);
    Mlp m;
    m.input_shape = input_shape;
    m.sizes.push_back(inputs);
    for (std::size_t w : widths) {
        m.sizes.push_back(w);
    }
    m.sizes.push_back(outputs);
    for (std::size_t l = 0; l + 1 < m.sizes.size(); ++l) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(m.sizes[l]));
        std::vector<double> w(m.sizes[l + 1] * m.sizes[l]);
        for (double& v : w) {
            // Round through float so the exported model equals the shadow parameters.
            v = static_cast<float>(rng.normal(0.0, stddev));
        }
        m.weight.push_back(std::move(w));
        m.bias.emplace_back(m.sizes[l + 1], 0.0);
        m.relu.push_back(l + 2 < m.sizes.size());
    }
    return mlp_to_model(m);
}

double accuracy(const ModelGraph& model, const Dataset& data)
{
    if (data.count() == 0) {
        throw ValidationError("accuracy of an empty dataset");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.count(); ++i) {
        const InferenceResult r = run_inference(model, data.sample(i));
        if (static_cast<int>(argmax(r.logits.data())) == data.labels[i]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.count());
}

namespace {

bool fits_float(double v) { return std::abs(v) <= static_cast<double>(std::numeric_limits<float>::max()); }

[[noreturn]] void diverged(const char* why, std::size_t epoch, const TrainConfig& cfg)
{
    std::ostringstream msg;
    msg << "training diverged (" << why << ") at epoch " << epoch << " with seed " << cfg.seed
        << " and learning rate " << cfg.learning_rate;
    throw DivergenceError(msg.str());
}

} // namespace

TrainResult train_mlp(const TrainConfig& cfg, const Dataset& train, const Dataset* test)
{
    cfg.validate();
    if (train.count() == 0) {
        throw ValidationError("training set is empty");
    }
    const Shape sample_shape = train.sample_shape();
    const std::size_t inputs = shape_numel(sample_shape);
    std::size_t classes = cfg.num_classes;
    if (classes == 0) {
        classes = static_cast<std::size_t>(*std::max_element(train.labels.begin(), train.labels.end())) + 1;
    }

    Mlp m = mlp_from_model(init_mlp(sample_shape, cfg.widths, classes, cfg.seed));
    // A second stream for the sample order keeps the initialization
    // independent of the number of epochs.
    Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    std::vector<std::size_t> order(train.count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::vector<double>> targets;
    targets.reserve(train.count());
    for (int label : train.labels) {
        targets.push_back(one_hot(label, classes));
    }

    TrainResult result;
    Workspace ws;
    const std::span<const float> all = train.inputs.data();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            MlpGradient g = zero_gradient(m);
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                epoch_loss += forward_backward(m, all.subspan(i * inputs, inputs), targets[i],
                                               LossKind::cross_entropy, ws, &g);
            }
            if (!std::isfinite(epoch_loss)) {
                diverged("non-finite loss", epoch, cfg);
            }
            const double step = cfg.learning_rate / static_cast<double>(end - start);
            bool finite = true;
            for (std::size_t l = 0; l < m.depth(); ++l) {
                for (std::size_t j = 0; j < m.weight[l].size(); ++j) {
                    m.weight[l][j] -= step * g.weight[l][j];
                    finite = finite && fits_float(m.weight[l][j]);
                }
                for (std::size_t j = 0; j < m.bias[l].size(); ++j) {
                    m.bias[l][j] -= step * g.bias[l][j];
                    finite = finite && fits_float(m.bias[l][j]);
                }
            }
            // cross-entropy stays finite while weights explode, so watch the
            // parameters too: anything past float range is lost on export
            if (!finite) {
                diverged("parameters overflow 32-bit range", epoch, cfg);
            }
        }
        result.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }

    result.model = mlp_to_model(m);
    result.train_accuracy = accuracy(result.model, train);
    if (test && test->count() > 0) {
        result.test_accuracy = accuracy(result.model, *test);
    }
    return result;
}

double mlp_loss(const ModelGraph& model, const Tensor& x, const std::vector<double>& target, LossKind loss,
                MlpGradient* grad)
{
    const Mlp m = mlp_from_model(model);
    if (x.size() != m.sizes[0]) {
        throw DimensionError("input has " + std::to_string(x.size()) + " elements, model expects " +
                             std::to_string(m.sizes[0]));
    }
    Workspace ws;
    if (grad) {
        *grad = zero_gradient(m);
    }
    return forward_backward(m, x.data(), target, loss, ws, grad);
}

GradCheckReport grad_check(const ModelGraph& model, const Tensor& x, const std::vector<double>& target, LossKind loss,
                           double h)
{
    if (!(h > 0.0)) {
        throw ConfigError("finite-difference step must be positive");
    }
    Mlp m = mlp_from_model(model);
    if (x.size() != m.sizes[0]) {
        throw DimensionError("input has " + std::to_string(x.size()) + " elements, model expects " +
                             std::to_string(m.sizes[0]));
    }
    Workspace ws;
    MlpGradient g = zero_gradient(m);
    forward_backward(m, x.data(), target, loss, ws, &g);
    const std::vector<bool> base_mask = relu_mask(m, ws);

    GradCheckReport report;
    auto probe = [&](double& param, double analytic) {
        const double saved = param;
        param = saved + h;
        const double up = forward_backward(m, x.data(), target, loss, ws, nullptr);
        const bool kink_up = relu_mask(m, ws) != base_mask;
        param = saved - h;
        const double down = forward_backward(m, x.data(), target, loss, ws, nullptr);
        const bool kink_down = relu_mask(m, ws) != base_mask;
        param = saved;
        if (kink_up || kink_down) {
            ++report.skipped_kinks;
            return;
        }
        const double numeric = (up - down) / (2.0 * h);
        const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-8);
        report.max_relative_error = std::max(report.max_relative_error, rel);
        ++report.checked;
    };
    for (std::size_t l = 0; l < m.depth(); ++l) {
        for (std::size_t j = 0; j < m.weight[l].size(); ++j) {
            probe(m.weight[l][j], g.weight[l][j]);
        }
        for (std::size_t j = 0; j < m.bias[l].size(); ++j) {
            probe(m.bias[l][j], g.bias[l][j]);
        }
    }
    return report;
}

GradCheckReport grad_check(const ModelGraph& model, const Tensor& x, int label, double h)
{
    const std::size_t outputs = shape_numel(validate_model(model));
    return grad_check(model, x, one_hot(label, outputs), LossKind::cross_entropy, h);
}

} // namespace bsnn
