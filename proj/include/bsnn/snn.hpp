#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bsnn/ann.hpp"
#include "bsnn/model.hpp"
#include "bsnn/tensor.hpp"

namespace bsnn {

/// bsnn: bistable unit pairs (A/B), phase-weighted spikes.
/// phase: one IF neuron per unit with the dynamic phase threshold.
/// rate: one IF neuron per unit with a constant threshold.
enum class SnnMode { bsnn, phase, rate };

std::string mode_name(SnnMode mode);
SnnMode mode_from_name(const std::string& name);

struct PhaseConfig {
    std::size_t phases = 8;  ///< K, phase count per period
    std::size_t periods = 4; ///< n
    double v_th = 1.0;

    std::size_t steps() const { return phases * periods; }
    void validate() const;
};

/// S_t = 2^-(1 + t mod K). Exact dyadic.
double phase_weight(std::size_t t, std::size_t phases);

inline std::size_t period_of(std::size_t t, std::size_t phases) { return t / phases; }

enum class Neuron { A, B };

/// A spikes in odd periods, B in even periods.
Neuron spiking_neuron(std::size_t t, std::size_t phases);
Neuron accumulating_neuron(std::size_t t, std::size_t phases);

struct BifState {
    double v_a = 0.0;
    double v_b = 0.0;
};

struct BifSpikes {
    bool a = false;
    bool b = false;
};

/// Both potentials integrate their (already weighted) currents; only the
/// neuron in its spike stage may fire, at V >= S_t * V_th, with soft reset.
BifSpikes bif_step(BifState& state, double current_a, double current_b, std::size_t t,
                   const PhaseConfig& cfg);

struct IfStep {
    bool spike = false;
    double v = 0.0;
};

/// Plain IF neuron with soft reset; threshold V_th (rate) or S_t * V_th (phase).
IfStep if_step(double v, double current, std::size_t t, const PhaseConfig& cfg, SnnMode mode);

struct InputCurrent {
    std::vector<double> current;
    std::optional<Neuron> target; ///< bsnn only: the neuron accumulating at t
};

/// Real-valued input drive: x (rate) or x * S_t (phase, bsnn).
InputCurrent inject_input(std::span<const float> x, std::size_t t, const PhaseConfig& cfg,
                          SnnMode mode);

struct GateResult {
    std::size_t winner = 0;
    double forwarded = 0.0;
};

/// Forwards the current-step spike of the window unit with the largest
/// running weighted-spike sum; ties go to the lowest index.
GateResult spiking_maxpool_gate(std::span<const double> step_spikes,
                                std::span<const double> running_sums);

enum class InputDrive { phase_weighted, constant };

struct BuildOptions {
    SnnMode mode = SnnMode::bsnn;
    bool sn_enabled = true;
    /// Lambda of the "input" point; raw inputs are divided by it.
    double input_lambda = 1.0;
    /// phase/bsnn drive currents x * S_t by default; `constant` feeds x each step.
    InputDrive input_drive = InputDrive::phase_weighted;
};

/// Description of one stateful layer of the converted network.
struct UnitLayerInfo {
    std::string id;        ///< normalization point id, "<block>.sync" for synchronous units, "output"
    std::size_t size = 0;
    bool readout = false;  ///< non-spiking integrator that accumulates weighted input
    bool synchronous = false;
    /// First period in which the layer can emit (units) or receive signal
    /// (readout); the decode window starts here. Always 0 outside bsnn mode.
    std::size_t arrival = 0;
    /// Longest path latency in periods (the period by which every path has arrived).
    std::size_t settled = 0;
};

struct SimTrace;

/// Converted network: immutable topology and weights. Simulation state lives
/// in per-run instances, so one network can serve many threads.
class SpikingNetwork {
public:
    SpikingNetwork();
    ~SpikingNetwork();
    SpikingNetwork(SpikingNetwork&&) noexcept;
    SpikingNetwork& operator=(SpikingNetwork&&) noexcept;

    SnnMode mode() const;
    bool sn_enabled() const;
    const BuildOptions& options() const;
    const std::vector<UnitLayerInfo>& layers() const;
    const UnitLayerInfo& layer(const std::string& id) const;
    const UnitLayerInfo& readout() const;
    /// shortcut gain per residual block path
    const std::map<std::string, double>& shortcut_gains() const;
    /// Number of BIF-unit hops from block input to block output along the
    /// body and along the shortcut.
    std::pair<std::size_t, std::size_t> block_hops(const std::string& block_path) const;
    const std::vector<std::string>& warnings() const;

    struct Impl;

private:
    friend SpikingNetwork build_snn(const ModelGraph&, const PhaseConfig&, const BuildOptions&);
    friend SimTrace simulate(const SpikingNetwork&, const Tensor&, const PhaseConfig&, bool);
    std::unique_ptr<Impl> impl_;
};

/// Maps a batchnorm-folded, normalized model onto spiking units: each relu
/// becomes a unit, max-pools become spiking gates, residual shortcuts carry
/// the block's shortcut_gain and, with sn_enabled in bsnn mode, one
/// synchronous unit at their head. The final linear layers feed a readout.
SpikingNetwork build_snn(const ModelGraph& model, const PhaseConfig& cfg, const BuildOptions& options);

struct LayerTrace {
    UnitLayerInfo info;
    std::size_t neurons_per_unit = 1; ///< 2 in bsnn mode (A then B)
    /// [period][unit]: sum of emitted weighted spikes (S_t, or 1 in rate
    /// mode) for units; sum of input current for the readout.
    std::vector<double> period_sums;
    /// [period][unit] spike counts (units only).
    std::vector<std::uint32_t> period_counts;
    /// Per neuron ([neuron][unit]) conservation accumulators.
    std::vector<double> injected;
    std::vector<double> emitted;
    std::vector<double> final_v;
    /// Optional [step][neuron][unit] spike indicators.
    std::vector<std::uint8_t> step_spikes;

    std::uint64_t total_spikes() const;
    std::vector<std::uint32_t> spike_counts() const; ///< per unit, A+B
};

struct SimTrace {
    SnnMode mode = SnnMode::bsnn;
    PhaseConfig cfg;
    std::vector<LayerTrace> layers;

    const LayerTrace& layer(const std::string& id) const;
    const LayerTrace& readout() const;
};

/// Synchronous time-stepped run on one (raw, dataset-normalized) input.
/// `record_steps` keeps per-step spike indicators.
SimTrace simulate(const SpikingNetwork& net, const Tensor& x, const PhaseConfig& cfg,
                  bool record_steps = false);

/// Weighted spike sum over the decode window [arrival, periods) divided by
/// its length in periods. Readout layers decode their accumulated input
/// divided by the window's total phase weight, periods * (1 - 2^-K).
/// `periods` defaults to every completed period of the run.
Tensor decode_phase(const SimTrace& trace, const std::string& layer,
                    std::optional<std::size_t> periods = std::nullopt);

/// Spike count over the same window divided by its length in steps.
Tensor decode_rate(const SimTrace& trace, const std::string& layer,
                   std::optional<std::size_t> periods = std::nullopt);

/// decode_rate in rate mode, decode_phase otherwise.
Tensor decode(const SimTrace& trace, const std::string& layer,
              std::optional<std::size_t> periods = std::nullopt);

/// Neurons whose ANN activation is exactly 0 but that spiked at least once,
/// per unit layer that has an ANN counterpart.
std::map<std::string, std::size_t> sin_count(const ActivationRecord& acts, const SimTrace& trace);

/// Largest |emitted - (injected - V_T)| over all neurons, and the largest
/// deviation between the recorded emitted total and the one recomputed from
/// per-step spikes (0 if steps were not recorded).
struct ConservationCheck {
    double max_balance_error = 0.0;
    double max_recompute_error = 0.0;
};
ConservationCheck check_conservation(const SimTrace& trace);

} // namespace bsnn
