#include "bsnn/snn.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "bsnn/errors.hpp"

namespace bsnn {

std::string mode_name(SnnMode mode)
{
    switch (mode) {
    case SnnMode::bsnn: return "bsnn";
    case SnnMode::phase: return "phase";
    case SnnMode::rate: return "rate";
    }
    return "?";
}

SnnMode mode_from_name(const std::string& name)
{
    if (name == "bsnn") {
        return SnnMode::bsnn;
    }
    if (name == "phase") {
        return SnnMode::phase;
    }
    if (name == "rate") {
        return SnnMode::rate;
    }
    throw ConfigError("unknown mode '" + name + "' (expected bsnn, phase or rate)");
}

void PhaseConfig::validate() const
{
    if (phases < 1 || phases > 52) {
        throw ConfigError("phase count K must lie in [1, 52]");
    }
    if (periods < 1) {
        throw ConfigError("period count must be at least 1");
    }
    if (!(v_th > 0.0)) {
        throw ConfigError("threshold must be positive");
    }
}

double phase_weight(std::size_t t, std::size_t phases)
{
    return std::ldexp(1.0, -static_cast<int>(1 + t % phases));
}

Neuron spiking_neuron(std::size_t t, std::size_t phases)
{
    return period_of(t, phases) % 2 == 1 ? Neuron::A : Neuron::B;
}

Neuron accumulating_neuron(std::size_t t, std::size_t phases)
{
    return spiking_neuron(t, phases) == Neuron::A ? Neuron::B : Neuron::A;
}

BifSpikes bif_step(BifState& state, double current_a, double current_b, std::size_t t,
                   const PhaseConfig& cfg)
{
    state.v_a += current_a;
    state.v_b += current_b;
    const double threshold = phase_weight(t, cfg.phases) * cfg.v_th;
    BifSpikes out;
    if (spiking_neuron(t, cfg.phases) == Neuron::A) {
        if (state.v_a >= threshold) {
            state.v_a -= threshold;
            out.a = true;
        }
    } else if (state.v_b >= threshold) {
        state.v_b -= threshold;
        out.b = true;
    }
    return out;
}

IfStep if_step(double v, double current, std::size_t t, const PhaseConfig& cfg, SnnMode mode)
{
    const double threshold =
        mode == SnnMode::rate ? cfg.v_th : phase_weight(t, cfg.phases) * cfg.v_th;
    v += current;
    if (v >= threshold) {
        return {true, v - threshold};
    }
    return {false, v};
}

InputCurrent inject_input(std::span<const float> x, std::size_t t, const PhaseConfig& cfg,
                          SnnMode mode)
{
    InputCurrent out;
    const double w = mode == SnnMode::rate ? 1.0 : phase_weight(t, cfg.phases);
    out.current.reserve(x.size());
    for (float v : x) {
        out.current.push_back(w * v);
    }
    if (mode == SnnMode::bsnn) {
        out.target = accumulating_neuron(t, cfg.phases);
    }
    return out;
}

GateResult spiking_maxpool_gate(std::span<const double> step_spikes,
                                std::span<const double> running_sums)
{
    GateResult out;
    for (std::size_t i = 1; i < running_sums.size(); ++i) {
        if (running_sums[i] > running_sums[out.winner]) {
            out.winner = i;
        }
    }
    out.forwarded = step_spikes.empty() ? 0.0 : step_spikes[out.winner];
    return out;
}

// ---------------------------------------------------------------------------
// Network representation

namespace {

enum class NodeKind { input, dense, conv, avgpool, gain, add, unit, gate, readout };

struct Node {
    NodeKind kind = NodeKind::input;
    int in0 = -1;
    int in1 = -1;
    int out = -1;
    Shape in_shape;
    Shape out_shape;
    std::vector<float> weight; ///< dense: [in][out]; conv: [oc][ic][k][k]
    std::vector<float> bias;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    double gain = 1.0;
    std::size_t layer = 0;        ///< unit/readout: trace layer; gate: source unit layer
    std::size_t bias_start = 0;   ///< period from which the bias is injected
    bool is_static = false;       ///< output = w_in(t) * base_in + w_bias(t) * base_bias
};

struct Signal {
    int buffer = -1;
    Shape shape;
    std::size_t arrival = 0;
    std::size_t settled = 0;
    bool is_static = false;
    bool rectified = false; ///< non-negative spike signal with no linear layer since
    int unit_layer = -1;    ///< set when the buffer is a unit layer's direct output
};

} // namespace

struct SpikingNetwork::Impl {
    BuildOptions options;
    std::vector<Node> nodes;
    std::vector<std::size_t> buffer_sizes;
    std::vector<UnitLayerInfo> layers;
    std::map<std::string, double> gains;
    std::map<std::string, std::pair<std::size_t, std::size_t>> hops;
    std::vector<std::string> warnings;

    int new_buffer(std::size_t size)
    {
        buffer_sizes.push_back(size);
        return static_cast<int>(buffer_sizes.size() - 1);
    }

    bool bsnn() const { return options.mode == SnnMode::bsnn; }

    Signal add_unit(const Signal& in, const std::string& id, bool synchronous)
    {
        UnitLayerInfo info;
        info.id = id;
        info.size = shape_numel(in.shape);
        info.synchronous = synchronous;
        info.arrival = in.arrival + (bsnn() ? 1 : 0);
        info.settled = in.settled + (bsnn() ? 1 : 0);
        layers.push_back(info);

        Node node;
        node.kind = NodeKind::unit;
        node.in0 = in.buffer;
        node.out = new_buffer(info.size);
        node.in_shape = node.out_shape = in.shape;
        node.layer = layers.size() - 1;
        nodes.push_back(std::move(node));

        Signal out;
        out.buffer = nodes.back().out;
        out.shape = in.shape;
        out.arrival = info.arrival;
        out.settled = info.settled;
        out.rectified = true;
        out.unit_layer = static_cast<int>(layers.size() - 1);
        return out;
    }

    Signal add_linear(Node node, const Signal& in, Shape out_shape)
    {
        node.in0 = in.buffer;
        node.in_shape = in.shape;
        node.out_shape = out_shape;
        node.out = new_buffer(shape_numel(out_shape));
        node.bias_start = in.arrival;
        node.is_static = in.is_static;
        nodes.push_back(std::move(node));
        Signal out;
        out.buffer = nodes.back().out;
        out.shape = std::move(out_shape);
        out.arrival = in.arrival;
        out.settled = in.settled;
        out.is_static = in.is_static;
        return out;
    }

    Signal compile_layer(const Layer& layer, const std::string& path, const Signal& in,
                         std::size_t& units_made);
    Signal compile_list(const std::vector<Layer>& list, const std::string& base, Signal in,
                        std::size_t& units_made);
};

Signal SpikingNetwork::Impl::compile_list(const std::vector<Layer>& list, const std::string& base,
                                          Signal in, std::size_t& units_made)
{
    for (std::size_t i = 0; i < list.size(); ++i) {
        in = compile_layer(list[i], layer_path(base, i), in, units_made);
    }
    return in;
}

Signal SpikingNetwork::Impl::compile_layer(const Layer& layer, const std::string& path,
                                           const Signal& in, std::size_t& units_made)
{
    switch (layer.kind()) {
    case LayerKind::input:
        return in;
    case LayerKind::dense: {
        const auto& d = std::get<DenseLayer>(layer.op);
        const std::size_t n_in = d.weight.dim(1);
        const std::size_t n_out = d.weight.dim(0);
        Node node;
        node.kind = NodeKind::dense;
        node.weight.resize(n_in * n_out);
        for (std::size_t o = 0; o < n_out; ++o) {
            for (std::size_t i = 0; i < n_in; ++i) {
                node.weight[i * n_out + o] = d.weight[o * n_in + i];
            }
        }
        node.bias = d.bias.values();
        return add_linear(std::move(node), in, {n_out});
    }
    case LayerKind::conv2d: {
        const auto& c = std::get<Conv2dLayer>(layer.op);
        Node node;
        node.kind = NodeKind::conv;
        node.weight = c.weight.values();
        node.bias = c.bias.values();
        node.kernel = c.kernel;
        node.stride = c.stride;
        node.pad = c.pad;
        return add_linear(std::move(node), in, layer_output_shape(layer, in.shape, path));
    }
    case LayerKind::batchnorm:
        throw StructureError(path + ": batchnorm must be folded before conversion");
    case LayerKind::relu: {
        if (in.rectified) {
            return in;
        }
        ++units_made;
        return add_unit(in, path, false);
    }
    case LayerKind::maxpool2d: {
        const auto& p = std::get<PoolLayer>(layer.op);
        if (in.unit_layer < 0) {
            throw StructureError(path + ": spiking max-pool needs spiking unit inputs (place the "
                                        "max-pool after a relu)");
        }
        Node node;
        node.kind = NodeKind::gate;
        node.kernel = p.kernel;
        node.stride = p.stride;
        node.layer = static_cast<std::size_t>(in.unit_layer);
        Signal out = add_linear(std::move(node), in, layer_output_shape(layer, in.shape, path));
        out.rectified = true;
        return out;
    }
    case LayerKind::avgpool2d: {
        const auto& p = std::get<PoolLayer>(layer.op);
        Node node;
        node.kind = NodeKind::avgpool;
        node.kernel = p.kernel;
        node.stride = p.stride;
        Signal out = add_linear(std::move(node), in, layer_output_shape(layer, in.shape, path));
        out.rectified = in.rectified;
        return out;
    }
    case LayerKind::flatten: {
        Signal out = in;
        out.shape = {shape_numel(in.shape)};
        out.unit_layer = -1;
        return out;
    }
    case LayerKind::residual: {
        const auto& res = std::get<ResidualLayer>(layer.op);
        std::size_t body_units = 0;
        const Signal body = compile_list(res.body, path + ".body", in, body_units);

        Signal shortcut = in;
        std::size_t shortcut_units = 0;
        if (options.sn_enabled && bsnn()) {
            shortcut = add_unit(in, path + ".sync", true);
            shortcut_units = 1;
        }
        if (res.shortcut_gain != 1.0f) {
            Node node;
            node.kind = NodeKind::gain;
            node.gain = res.shortcut_gain;
            const bool rectified = shortcut.rectified;
            shortcut = add_linear(std::move(node), shortcut, shortcut.shape);
            shortcut.rectified = rectified && res.shortcut_gain > 0.0f;
        }
        gains[path] = res.shortcut_gain;
        for (std::size_t i = 0; i < res.shortcut.size(); ++i) {
            shortcut = compile_layer(res.shortcut[i], layer_path(path + ".shortcut", i), shortcut,
                                     shortcut_units);
        }

        Node sum;
        sum.kind = NodeKind::add;
        sum.in0 = body.buffer;
        sum.in1 = shortcut.buffer;
        sum.in_shape = sum.out_shape = body.shape;
        sum.out = new_buffer(shape_numel(body.shape));
        sum.is_static = body.is_static && shortcut.is_static;
        nodes.push_back(std::move(sum));
        Signal merged;
        merged.buffer = nodes.back().out;
        merged.shape = body.shape;
        merged.arrival = std::min(body.arrival, shortcut.arrival);
        merged.settled = std::max(body.settled, shortcut.settled);
        merged.is_static = nodes.back().is_static;

        units_made += body_units + shortcut_units + 1;
        hops[path] = {body_units + 1, shortcut_units + 1};
        return add_unit(merged, path + ".out", false);
    }
    }
    throw StructureError(path + ": unsupported layer kind");
}

SpikingNetwork::SpikingNetwork() : impl_(std::make_unique<Impl>()) {}
SpikingNetwork::~SpikingNetwork() = default;
SpikingNetwork::SpikingNetwork(SpikingNetwork&&) noexcept = default;
SpikingNetwork& SpikingNetwork::operator=(SpikingNetwork&&) noexcept = default;

SnnMode SpikingNetwork::mode() const { return impl_->options.mode; }
bool SpikingNetwork::sn_enabled() const { return impl_->options.sn_enabled; }
const BuildOptions& SpikingNetwork::options() const { return impl_->options; }
const std::vector<UnitLayerInfo>& SpikingNetwork::layers() const { return impl_->layers; }
const std::map<std::string, double>& SpikingNetwork::shortcut_gains() const { return impl_->gains; }
const std::vector<std::string>& SpikingNetwork::warnings() const { return impl_->warnings; }

const UnitLayerInfo& SpikingNetwork::layer(const std::string& id) const
{
    for (const UnitLayerInfo& l : impl_->layers) {
        if (l.id == id) {
            return l;
        }
    }
    throw ValidationError("spiking network has no layer '" + id + "'");
}

const UnitLayerInfo& SpikingNetwork::readout() const { return impl_->layers.back(); }

std::pair<std::size_t, std::size_t> SpikingNetwork::block_hops(const std::string& block_path) const
{
    const auto it = impl_->hops.find(block_path);
    if (it == impl_->hops.end()) {
        throw ValidationError("spiking network has no residual block '" + block_path + "'");
    }
    return it->second;
}

SpikingNetwork build_snn(const ModelGraph& model, const PhaseConfig& cfg, const BuildOptions& options)
{
    cfg.validate();
    validate_model(model);
    if (!(options.input_lambda > 0.0)) {
        throw DomainError("input lambda must be positive");
    }
    SpikingNetwork net;
    SpikingNetwork::Impl& impl = *net.impl_;
    impl.options = options;
    if (options.sn_enabled && !has_residual(model.layers)) {
        impl.warnings.push_back("synchronous neurons requested but the model has no residual blocks");
    }
    if (options.sn_enabled && options.mode != SnnMode::bsnn && has_residual(model.layers)) {
        impl.warnings.push_back("synchronous neurons only apply in bsnn mode; ignored");
    }

    Node input;
    input.kind = NodeKind::input;
    input.out = impl.new_buffer(shape_numel(model.input_shape));
    input.out_shape = model.input_shape;
    input.is_static = true;
    impl.nodes.push_back(input);

    Signal sig;
    sig.buffer = input.out;
    sig.shape = model.input_shape;
    sig.is_static = true;
    std::size_t units = 0;
    sig = impl.compile_list(model.layers, "layers", sig, units);

    UnitLayerInfo info;
    info.id = kOutputPoint;
    info.size = shape_numel(sig.shape);
    info.readout = true;
    info.arrival = sig.arrival;
    info.settled = sig.settled;
    impl.layers.push_back(info);
    Node readout;
    readout.kind = NodeKind::readout;
    readout.in0 = sig.buffer;
    readout.in_shape = sig.shape;
    readout.layer = impl.layers.size() - 1;
    impl.nodes.push_back(std::move(readout));
    return net;
}

// ---------------------------------------------------------------------------
// Simulation

namespace {

void conv_static(const Node& n, const std::vector<double>& in, std::vector<double>& out, bool with_bias)
{
    const std::size_t cin = n.in_shape[0], h = n.in_shape[1], w = n.in_shape[2];
    const std::size_t cout = n.out_shape[0], oh = n.out_shape[1], ow = n.out_shape[2];
    const std::size_t k = n.kernel;
    for (std::size_t oc = 0; oc < cout; ++oc) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = with_bias ? n.bias[oc] : 0.0;
                for (std::size_t ic = 0; ic < cin; ++ic) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * n.stride + ky) -
                                        static_cast<std::ptrdiff_t>(n.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                            continue;
                        }
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * n.stride + kx) -
                                            static_cast<std::ptrdiff_t>(n.pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) {
                                continue;
                            }
                            acc += static_cast<double>(n.weight[((oc * cin + ic) * k + ky) * k + kx]) *
                                   in[(ic * h + static_cast<std::size_t>(iy)) * w +
                                      static_cast<std::size_t>(ix)];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

/// out += conv(in) for sparse `in`, scattering each non-zero input.
void conv_scatter(const Node& n, const std::vector<double>& in, std::vector<double>& out)
{
    const std::size_t cin = n.in_shape[0], h = n.in_shape[1], w = n.in_shape[2];
    const std::size_t cout = n.out_shape[0], oh = n.out_shape[1], ow = n.out_shape[2];
    const auto k = static_cast<std::ptrdiff_t>(n.kernel);
    const auto s = static_cast<std::ptrdiff_t>(n.stride);
    const auto pad = static_cast<std::ptrdiff_t>(n.pad);
    for (std::size_t ic = 0; ic < cin; ++ic) {
        for (std::size_t iy = 0; iy < h; ++iy) {
            for (std::size_t ix = 0; ix < w; ++ix) {
                const double v = in[(ic * h + iy) * w + ix];
                if (v == 0.0) {
                    continue;
                }
                const auto py = static_cast<std::ptrdiff_t>(iy) + pad;
                const auto px = static_cast<std::ptrdiff_t>(ix) + pad;
                for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t ny = py - ky;
                    if (ny < 0 || ny % s != 0 || ny / s >= static_cast<std::ptrdiff_t>(oh)) {
                        continue;
                    }
                    for (std::ptrdiff_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t nx = px - kx;
                        if (nx < 0 || nx % s != 0 || nx / s >= static_cast<std::ptrdiff_t>(ow)) {
                            continue;
                        }
                        const std::size_t oy = static_cast<std::size_t>(ny / s);
                        const std::size_t ox = static_cast<std::size_t>(nx / s);
                        for (std::size_t oc = 0; oc < cout; ++oc) {
                            out[(oc * oh + oy) * ow + ox] +=
                                v * n.weight[((oc * cin + ic) * n.kernel + static_cast<std::size_t>(ky)) *
                                                 n.kernel +
                                             static_cast<std::size_t>(kx)];
                        }
                    }
                }
            }
        }
    }
}

void avgpool(const Node& n, const std::vector<double>& in, std::vector<double>& out)
{
    const std::size_t c = n.in_shape[0], h = n.in_shape[1], w = n.in_shape[2];
    const std::size_t oh = n.out_shape[1], ow = n.out_shape[2];
    const double inv = 1.0 / static_cast<double>(n.kernel * n.kernel);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (std::size_t ky = 0; ky < n.kernel; ++ky) {
                    for (std::size_t kx = 0; kx < n.kernel; ++kx) {
                        acc += in[(ch * h + oy * n.stride + ky) * w + ox * n.stride + kx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
}

/// Applies a linear node to `in` without bias.
void apply_linear(const Node& n, const std::vector<double>& in, std::vector<double>& out)
{
    switch (n.kind) {
    case NodeKind::dense: {
        const std::size_t n_out = out.size();
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double v = in[i];
            if (v == 0.0) {
                continue;
            }
            const float* row = n.weight.data() + i * n_out;
            for (std::size_t o = 0; o < n_out; ++o) {
                out[o] += v * row[o];
            }
        }
        break;
    }
    case NodeKind::conv:
        std::fill(out.begin(), out.end(), 0.0);
        conv_scatter(n, in, out);
        break;
    case NodeKind::avgpool:
        avgpool(n, in, out);
        break;
    case NodeKind::gain:
        for (std::size_t i = 0; i < in.size(); ++i) {
            out[i] = n.gain * in[i];
        }
        break;
    default:
        break;
    }
}

void add_bias(const Node& n, double weight, std::vector<double>& out)
{
    if (n.bias.empty() || weight == 0.0) {
        return;
    }
    if (n.kind == NodeKind::dense) {
        for (std::size_t o = 0; o < out.size(); ++o) {
            out[o] += weight * n.bias[o];
        }
    } else if (n.kind == NodeKind::conv) {
        const std::size_t per = out.size() / n.bias.size();
        for (std::size_t c = 0; c < n.bias.size(); ++c) {
            for (std::size_t k = 0; k < per; ++k) {
                out[c * per + k] += weight * n.bias[c];
            }
        }
    }
}

} // namespace

SimTrace simulate(const SpikingNetwork& net, const Tensor& x, const PhaseConfig& cfg, bool record_steps)
{
    cfg.validate();
    const SpikingNetwork::Impl& impl = *net.impl_;
    const SnnMode mode = impl.options.mode;
    const bool bsnn = mode == SnnMode::bsnn;
    const std::size_t K = cfg.phases;
    const std::size_t T = cfg.steps();
    const std::size_t n_periods = cfg.periods;

    if (x.size() != impl.buffer_sizes[0]) {
        throw DimensionError("simulate: input " + shape_str(x.shape()) + " does not match network input of " +
                             std::to_string(impl.buffer_sizes[0]) + " elements");
    }

    SimTrace trace;
    trace.mode = mode;
    trace.cfg = cfg;
    trace.layers.resize(impl.layers.size());
    std::vector<std::vector<double>> potentials(impl.layers.size());
    std::vector<std::vector<double>> running(impl.layers.size());
    for (std::size_t l = 0; l < impl.layers.size(); ++l) {
        LayerTrace& lt = trace.layers[l];
        lt.info = impl.layers[l];
        const std::size_t n = lt.info.size;
        lt.neurons_per_unit = (bsnn && !lt.info.readout) ? 2 : 1;
        lt.period_sums.assign(n_periods * n, 0.0);
        if (!lt.info.readout) {
            lt.period_counts.assign(n_periods * n, 0);
        }
        lt.injected.assign(lt.neurons_per_unit * n, 0.0);
        lt.emitted.assign(lt.neurons_per_unit * n, 0.0);
        potentials[l].assign(lt.neurons_per_unit * n, 0.0);
        running[l].assign(n, 0.0);
        if (record_steps && !lt.info.readout) {
            lt.step_spikes.assign(T * lt.neurons_per_unit * n, 0);
        }
    }

    std::vector<std::vector<double>> buffers(impl.buffer_sizes.size());
    for (std::size_t b = 0; b < buffers.size(); ++b) {
        buffers[b].assign(impl.buffer_sizes[b], 0.0);
    }

    // Static nodes depend on the input only: precompute the parts driven by
    // the input and by the biases.
    const double inv_lambda = 1.0 / impl.options.input_lambda;
    std::vector<std::vector<double>> base_in(impl.nodes.size());
    std::vector<std::vector<double>> base_bias(impl.nodes.size());
    std::vector<int> node_of_buffer(impl.buffer_sizes.size(), -1);
    for (std::size_t i = 0; i < impl.nodes.size(); ++i) {
        const Node& n = impl.nodes[i];
        if (n.out >= 0) {
            node_of_buffer[static_cast<std::size_t>(n.out)] = static_cast<int>(i);
        }
        if (!n.is_static) {
            continue;
        }
        const std::size_t size = impl.buffer_sizes[static_cast<std::size_t>(n.out)];
        base_in[i].assign(size, 0.0);
        base_bias[i].assign(size, 0.0);
        if (n.kind == NodeKind::input) {
            for (std::size_t k = 0; k < size; ++k) {
                base_in[i][k] = x[k] * inv_lambda;
            }
            continue;
        }
        const auto src0 = static_cast<std::size_t>(node_of_buffer[static_cast<std::size_t>(n.in0)]);
        if (n.kind == NodeKind::add) {
            const auto src1 = static_cast<std::size_t>(node_of_buffer[static_cast<std::size_t>(n.in1)]);
            for (std::size_t k = 0; k < size; ++k) {
                base_in[i][k] = base_in[src0][k] + base_in[src1][k];
                base_bias[i][k] = base_bias[src0][k] + base_bias[src1][k];
            }
            continue;
        }
        if (n.kind == NodeKind::conv) {
            conv_static(n, base_in[src0], base_in[i], false);
            conv_static(n, base_bias[src0], base_bias[i], true);
            continue;
        }
        apply_linear(n, base_in[src0], base_in[i]);
        apply_linear(n, base_bias[src0], base_bias[i]);
        add_bias(n, 1.0, base_bias[i]);
    }

    const bool constant_drive = impl.options.input_drive == InputDrive::constant;
    std::vector<double> scratch;

    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t p = t / K;
        const double s_t = phase_weight(t, K);
        const double spike_weight = mode == SnnMode::rate ? 1.0 : s_t;
        const double bias_weight = spike_weight;
        const double input_weight = (mode == SnnMode::rate || constant_drive) ? 1.0 : s_t;
        const double threshold = mode == SnnMode::rate ? cfg.v_th : s_t * cfg.v_th;
        const bool a_spikes = spiking_neuron(t, K) == Neuron::A;

        for (std::size_t i = 0; i < impl.nodes.size(); ++i) {
            const Node& n = impl.nodes[i];
            if (n.is_static) {
                std::vector<double>& out = buffers[static_cast<std::size_t>(n.out)];
                for (std::size_t k = 0; k < out.size(); ++k) {
                    out[k] = input_weight * base_in[i][k] + bias_weight * base_bias[i][k];
                }
                continue;
            }
            switch (n.kind) {
            case NodeKind::dense:
            case NodeKind::conv:
            case NodeKind::avgpool:
            case NodeKind::gain: {
                std::vector<double>& out = buffers[static_cast<std::size_t>(n.out)];
                apply_linear(n, buffers[static_cast<std::size_t>(n.in0)], out);
                if (!bsnn || p >= n.bias_start) {
                    add_bias(n, bias_weight, out);
                }
                break;
            }
            case NodeKind::add: {
                std::vector<double>& out = buffers[static_cast<std::size_t>(n.out)];
                const auto& a = buffers[static_cast<std::size_t>(n.in0)];
                const auto& b = buffers[static_cast<std::size_t>(n.in1)];
                for (std::size_t k = 0; k < out.size(); ++k) {
                    out[k] = a[k] + b[k];
                }
                break;
            }
            case NodeKind::gate: {
                std::vector<double>& out = buffers[static_cast<std::size_t>(n.out)];
                const auto& in = buffers[static_cast<std::size_t>(n.in0)];
                const auto& sums = running[n.layer];
                const std::size_t c = n.in_shape[0], h = n.in_shape[1], w = n.in_shape[2];
                const std::size_t oh = n.out_shape[1], ow = n.out_shape[2];
                scratch.resize(n.kernel * n.kernel * 2);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const std::size_t area = n.kernel * n.kernel;
                            std::span<double> spikes(scratch.data(), area);
                            std::span<double> window(scratch.data() + area, area);
                            for (std::size_t ky = 0; ky < n.kernel; ++ky) {
                                for (std::size_t kx = 0; kx < n.kernel; ++kx) {
                                    const std::size_t idx = (ch * h + oy * n.stride + ky) * w +
                                                            ox * n.stride + kx;
                                    spikes[ky * n.kernel + kx] = in[idx];
                                    window[ky * n.kernel + kx] = sums[idx];
                                }
                            }
                            out[(ch * oh + oy) * ow + ox] =
                                spiking_maxpool_gate(spikes, window).forwarded;
                        }
                    }
                }
                break;
            }
            case NodeKind::unit: {
                LayerTrace& lt = trace.layers[n.layer];
                const std::size_t size = lt.info.size;
                const auto& current = buffers[static_cast<std::size_t>(n.in0)];
                std::vector<double>& out = buffers[static_cast<std::size_t>(n.out)];
                std::vector<double>& v = potentials[n.layer];
                std::vector<double>& sums = running[n.layer];
                const std::size_t period_base = p * size;
                if (bsnn) {
                    // neuron index 0 = A, 1 = B
                    const std::size_t acc = a_spikes ? 1 : 0;
                    const std::size_t spk = 1 - acc;
                    for (std::size_t k = 0; k < size; ++k) {
                        BifState st{v[k], v[size + k]};
                        const double ia = acc == 0 ? current[k] : 0.0;
                        const double ib = acc == 1 ? current[k] : 0.0;
                        const BifSpikes fired = bif_step(st, ia, ib, t, cfg);
                        v[k] = st.v_a;
                        v[size + k] = st.v_b;
                        lt.injected[acc * size + k] += current[k];
                        const bool spiked = fired.a || fired.b;
                        out[k] = spiked ? spike_weight : 0.0;
                        if (spiked) {
                            lt.emitted[spk * size + k] += threshold;
                            lt.period_sums[period_base + k] += spike_weight;
                            ++lt.period_counts[period_base + k];
                            sums[k] += spike_weight;
                            if (record_steps) {
                                lt.step_spikes[(t * 2 + spk) * size + k] = 1;
                            }
                        }
                    }
                } else {
                    for (std::size_t k = 0; k < size; ++k) {
                        const IfStep r = if_step(v[k], current[k], t, cfg, mode);
                        v[k] = r.v;
                        lt.injected[k] += current[k];
                        out[k] = r.spike ? spike_weight : 0.0;
                        if (r.spike) {
                            lt.emitted[k] += threshold;
                            lt.period_sums[period_base + k] += spike_weight;
                            ++lt.period_counts[period_base + k];
                            sums[k] += spike_weight;
                            if (record_steps) {
                                lt.step_spikes[t * size + k] = 1;
                            }
                        }
                    }
                }
                break;
            }
            case NodeKind::readout: {
                LayerTrace& lt = trace.layers[n.layer];
                const auto& current = buffers[static_cast<std::size_t>(n.in0)];
                for (std::size_t k = 0; k < lt.info.size; ++k) {
                    lt.injected[k] += current[k];
                    potentials[n.layer][k] += current[k];
                    lt.period_sums[p * lt.info.size + k] += current[k];
                }
                break;
            }
            case NodeKind::input:
                break;
            }
        }
    }

    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        trace.layers[l].final_v = std::move(potentials[l]);
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Trace queries

std::uint64_t LayerTrace::total_spikes() const
{
    std::uint64_t n = 0;
    for (std::uint32_t c : period_counts) {
        n += c;
    }
    return n;
}

std::vector<std::uint32_t> LayerTrace::spike_counts() const
{
    std::vector<std::uint32_t> out(info.size, 0);
    if (period_counts.empty()) {
        return out;
    }
    for (std::size_t i = 0; i < period_counts.size(); ++i) {
        out[i % info.size] += period_counts[i];
    }
    return out;
}

const LayerTrace& SimTrace::layer(const std::string& id) const
{
    for (const LayerTrace& l : layers) {
        if (l.info.id == id) {
            return l;
        }
    }
    throw ValidationError("trace has no layer '" + id + "'");
}

const LayerTrace& SimTrace::readout() const { return layers.back(); }

namespace {

std::size_t window_end(const SimTrace& trace, std::optional<std::size_t> periods)
{
    if (trace.cfg.steps() == 0) {
        throw ConfigError("cannot decode a run with T = 0");
    }
    const std::size_t end = periods.value_or(trace.cfg.periods);
    if (end > trace.cfg.periods) {
        throw ConfigError("decode window exceeds the simulated periods");
    }
    return end;
}

} // namespace

Tensor decode_phase(const SimTrace& trace, const std::string& layer, std::optional<std::size_t> periods)
{
    const LayerTrace& lt = trace.layer(layer);
    const std::size_t end = window_end(trace, periods);
    const std::size_t n = lt.info.size;
    Tensor out({n});
    if (end <= lt.info.arrival) {
        return out;
    }
    double denom = static_cast<double>(end - lt.info.arrival);
    if (lt.info.readout) {
        // A period of input and bias drive carries total phase weight 1 - 2^-K.
        denom *= 1.0 - std::ldexp(1.0, -static_cast<int>(trace.cfg.phases));
    }
    for (std::size_t k = 0; k < n; ++k) {
        double acc = 0.0;
        for (std::size_t p = lt.info.arrival; p < end; ++p) {
            acc += lt.period_sums[p * n + k];
        }
        out[k] = static_cast<float>(acc / denom);
    }
    return out;
}

Tensor decode_rate(const SimTrace& trace, const std::string& layer, std::optional<std::size_t> periods)
{
    const LayerTrace& lt = trace.layer(layer);
    const std::size_t end = window_end(trace, periods);
    const std::size_t n = lt.info.size;
    Tensor out({n});
    if (end <= lt.info.arrival) {
        return out;
    }
    const double denom = static_cast<double>((end - lt.info.arrival) * trace.cfg.phases);
    for (std::size_t k = 0; k < n; ++k) {
        double acc = 0.0;
        for (std::size_t p = lt.info.arrival; p < end; ++p) {
            acc += lt.info.readout ? lt.period_sums[p * n + k] : lt.period_counts[p * n + k];
        }
        out[k] = static_cast<float>(acc / denom);
    }
    return out;
}

Tensor decode(const SimTrace& trace, const std::string& layer, std::optional<std::size_t> periods)
{
    return trace.mode == SnnMode::rate ? decode_rate(trace, layer, periods)
                                       : decode_phase(trace, layer, periods);
}

std::map<std::string, std::size_t> sin_count(const ActivationRecord& acts, const SimTrace& trace)
{
    std::map<std::string, std::size_t> out;
    for (const LayerTrace& lt : trace.layers) {
        if (lt.info.readout || lt.info.synchronous) {
            continue;
        }
        const auto it = acts.points.find(lt.info.id);
        if (it == acts.points.end()) {
            throw ValidationError("sin_count: ANN record has no activations for '" + lt.info.id + "'");
        }
        const Tensor& a = it->second;
        if (a.size() != lt.info.size) {
            throw DimensionError("sin_count: layer '" + lt.info.id + "' has " +
                                 std::to_string(lt.info.size) + " units but ANN record has " +
                                 std::to_string(a.size()));
        }
        const std::vector<std::uint32_t> counts = lt.spike_counts();
        std::size_t n = 0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            if (a[k] == 0.0f && counts[k] > 0) {
                ++n;
            }
        }
        out[lt.info.id] = n;
    }
    return out;
}

ConservationCheck check_conservation(const SimTrace& trace)
{
    ConservationCheck out;
    const std::size_t K = trace.cfg.phases;
    const std::size_t T = trace.cfg.steps();
    for (const LayerTrace& lt : trace.layers) {
        const std::size_t neurons = lt.neurons_per_unit * lt.info.size;
        for (std::size_t j = 0; j < neurons; ++j) {
            const double balance = lt.emitted[j] - (lt.injected[j] - lt.final_v[j]);
            out.max_balance_error = std::max(out.max_balance_error, std::abs(balance));
        }
        if (lt.step_spikes.empty()) {
            continue;
        }
        std::vector<double> recomputed(neurons, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            const double thr =
                trace.mode == SnnMode::rate ? trace.cfg.v_th : phase_weight(t, K) * trace.cfg.v_th;
            for (std::size_t j = 0; j < neurons; ++j) {
                if (lt.step_spikes[t * neurons + j]) {
                    recomputed[j] += thr;
                }
            }
        }
        for (std::size_t j = 0; j < neurons; ++j) {
            const double balance = recomputed[j] - (lt.injected[j] - lt.final_v[j]);
            out.max_recompute_error = std::max(out.max_recompute_error, std::abs(balance));
        }
    }
    return out;
}

} // namespace bsnn
