#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bsnn/ann.hpp"
#include "bsnn/model.hpp"
#include "bsnn/model_io.hpp"
#include "bsnn/snn.hpp"

namespace bsnn {

/// A batchnorm-folded, weight-normalized model with everything a simulation
/// run needs to be self-describing.
struct ConvertedModel {
    ModelGraph model;
    CalibrationStats stats;
    std::map<std::string, double> residual_scales;
    InputNormalization input_norm; ///< applied by the dataset loader before lambda_input

    double input_lambda() const { return stats.at(kInputPoint); }
    double output_lambda() const { return stats.at(kOutputPoint); }
};

inline constexpr const char* kStatsFile = "stats.json";

/// fold_batchnorm -> collect_lambdas -> normalize_weights. `calib` must
/// already carry `input_norm`; it is only recorded.
ConvertedModel convert_model(const ModelGraph& model, const Dataset& calib, double p_max,
                             const InputNormalization& input_norm, std::size_t threads = 1);

/// Deterministic stats.json text: lambdas, p_max, residual scales, input
/// normalization and calibration warnings.
std::string stats_to_json(const ConvertedModel& converted);
void stats_from_json(const std::string& text, ConvertedModel& converted);

/// Writes model.json, weights.bin and stats.json into `dir`.
void save_converted(const ConvertedModel& converted, const std::filesystem::path& dir);
ConvertedModel load_converted(const std::filesystem::path& dir);

struct SimOptions {
    SnnMode mode = SnnMode::bsnn;
    PhaseConfig cfg;
    bool sn_enabled = true;
    InputDrive input_drive = InputDrive::phase_weighted;
    std::size_t threads = 1; ///< 0: hardware concurrency
};

BuildOptions build_options(const ConvertedModel& converted, const SimOptions& options);

/// Result of one sample run against its ANN reference.
struct SampleResult {
    int label = -1;
    bool ann_correct = false;
    std::vector<bool> correct_after; ///< [period p-1]: readout argmax after p periods
    std::vector<double> output_diff; ///< decoded readout * lambda_L - ANN logits
    std::map<std::string, std::size_t> sin;
    std::uint64_t spikes = 0;
};

SampleResult run_sample(const SpikingNetwork& net, const ConvertedModel& converted, const Tensor& x, int label,
                        const PhaseConfig& cfg);

/// Runs fn(i) for i in [0, n) on up to `threads` worker threads, in
/// contiguous index blocks. `threads` = 0 uses the hardware concurrency.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Default worker count: $BSNN_THREADS if set to a positive integer, else 1.
std::size_t default_threads();

struct SimReport {
    std::string mode;
    std::size_t phases = 0;
    std::size_t periods = 0;
    bool sn_enabled = false;
    std::string input_drive;
    std::size_t samples = 0;
    std::vector<double> curve; ///< accuracy after each period, length = periods
    double final_accuracy = 0.0;
    double ann_accuracy = 0.0;
    double max_abs_diff = 0.0;
    double mean_abs_diff = 0.0;
    std::map<std::string, std::uint64_t> sin_totals;
    std::uint64_t total_spikes = 0;
    double spikes_per_sample = 0.0;
    double wall_clock_s = 0.0;
    std::vector<std::string> warnings;

    bool operator==(const SimReport&) const = default;
};

/// Simulates every sample of `data` (already input-normalized) and reduces
/// per-sample results in index order, so the report does not depend on the
/// thread count.
SimReport simulate_dataset(const ConvertedModel& converted, const Dataset& data, const SimOptions& options);

std::string report_to_json(const SimReport& report);
SimReport report_from_json(const std::string& text);

/// "period,steps,accuracy" rows.
std::string curve_to_csv(const SimReport& report);
std::vector<double> curve_from_csv(const std::string& text);

/// Smallest period count whose accuracy is within `tolerance` of the ANN
/// accuracy, or 0 if none.
std::size_t periods_to_tolerance(const SimReport& report, double tolerance);

inline constexpr double kHistogramBin = 0.001;
inline constexpr double kHistogramBinsPerUnit = 1000.0;

struct DiffSummary {
    std::string mode;
    std::size_t count = 0; ///< output neurons x samples
    double max_abs = 0.0;
    double mean_abs = 0.0;
    /// bin index floor(diff * 1000) -> count
    std::map<long long, std::uint64_t> histogram;

    bool operator==(const DiffSummary&) const = default;
};

struct CompareResult {
    std::vector<DiffSummary> modes;
    std::vector<std::string> warnings;
};

/// Distribution of decoded-output differences against the ANN for each mode
/// at the same configuration.
CompareResult compare_outputs(const ConvertedModel& converted, const Dataset& data,
                              const std::vector<SnnMode>& modes, const SimOptions& options);

/// "mode,bin_lo,bin_hi,count" rows for every non-empty bin.
std::string histogram_to_csv(const CompareResult& result);

/// Warnings for a run configuration, e.g. a decode window that closes before
/// the readout has settled.
std::vector<std::string> run_warnings(const SpikingNetwork& net, const PhaseConfig& cfg);

} // namespace bsnn
