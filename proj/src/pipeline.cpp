#include "bsnn/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "bsnn/errors.hpp"

namespace bsnn {

using nlohmann::json;

namespace {

std::string read_text(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

std::string format_double(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(std::string_view s, const std::string& what)
{
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw FormatError("cannot parse " + what + " value '" + std::string(s) + "'");
    }
    return v;
}

template <typename T>
T json_get(const json& j, const char* key)
{
    if (!j.contains(key)) {
        throw FormatError(std::string("missing field '") + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("field '") + key + "': " + e.what());
    }
}

} // namespace

ConvertedModel convert_model(const ModelGraph& model, const Dataset& calib, double p_max,
                             const InputNormalization& input_norm, std::size_t threads)
{
    ConvertedModel out;
    const ModelGraph folded = fold_batchnorm(model);
    out.stats = collect_lambdas(folded, calib, p_max, threads);
    out.model = normalize_weights(folded, out.stats);
    for (const std::string& block : residual_blocks(folded)) {
        out.residual_scales[block] = residual_scale(out.stats, block);
    }
    out.input_norm = input_norm;
    return out;
}

std::string stats_to_json(const ConvertedModel& converted)
{
    json j;
    j["format"] = "bsnn-stats";
    j["p_max"] = converted.stats.p_max;
    j["lambda"] = converted.stats.lambda;
    j["residual_scale"] = converted.residual_scales;
    j["input_normalization"] = {{"offset", converted.input_norm.offset},
                                {"divisor", converted.input_norm.divisor}};
    j["warnings"] = converted.stats.warnings;
    return j.dump(2) + "\n";
}

void stats_from_json(const std::string& text, ConvertedModel& converted)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("stats.json: ") + e.what());
    }
    if (!j.is_object() || j.value("format", "") != "bsnn-stats") {
        throw FormatError("stats.json: not a bsnn-stats document");
    }
    converted.stats.p_max = json_get<double>(j, "p_max");
    converted.stats.lambda = json_get<std::map<std::string, double>>(j, "lambda");
    converted.stats.warnings = json_get<std::vector<std::string>>(j, "warnings");
    converted.residual_scales = json_get<std::map<std::string, double>>(j, "residual_scale");
    const json norm = json_get<json>(j, "input_normalization");
    converted.input_norm.offset = json_get<double>(norm, "offset");
    converted.input_norm.divisor = json_get<double>(norm, "divisor");
    for (const auto& [id, lambda] : converted.stats.lambda) {
        if (!(lambda > 0.0)) {
            throw ValidationError("stats.json: lambda for '" + id + "' is not positive");
        }
    }
}

void save_converted(const ConvertedModel& converted, const std::filesystem::path& dir)
{
    save_model(converted.model, dir);
    write_text(dir / kStatsFile, stats_to_json(converted));
}

ConvertedModel load_converted(const std::filesystem::path& dir)
{
    ConvertedModel out;
    out.model = load_model(dir);
    stats_from_json(read_text(dir / kStatsFile), out);
    for (const NormPoint& p : normalization_points(out.model)) {
        out.stats.at(p.id);
    }
    return out;
}

BuildOptions build_options(const ConvertedModel& converted, const SimOptions& options)
{
    BuildOptions b;
    b.mode = options.mode;
    b.sn_enabled = options.sn_enabled;
    b.input_lambda = converted.input_lambda();
    b.input_drive = options.input_drive;
    return b;
}

SampleResult run_sample(const SpikingNetwork& net, const ConvertedModel& converted, const Tensor& x, int label,
                        const PhaseConfig& cfg)
{
    SampleResult r;
    r.label = label;
    Tensor scaled = x;
    const double inv_lambda = 1.0 / converted.input_lambda();
    for (float& v : scaled.data()) {
        v = static_cast<float>(v * inv_lambda);
    }
    const InferenceResult ann = run_inference(converted.model, scaled, true);
    r.ann_correct = static_cast<int>(argmax(ann.logits.data())) == label;

    const SimTrace trace = simulate(net, x, cfg);
    r.correct_after.resize(cfg.periods);
    for (std::size_t p = 1; p <= cfg.periods; ++p) {
        const Tensor out = decode(trace, kOutputPoint, p);
        r.correct_after[p - 1] = static_cast<int>(argmax(out.data())) == label;
    }
    const Tensor out = decode(trace, kOutputPoint);
    const double lambda_out = converted.output_lambda();
    r.output_diff.resize(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        r.output_diff[k] = (static_cast<double>(out[k]) - ann.logits[k]) * lambda_out;
    }
    r.sin = sin_count(*ann.acts, trace);
    for (const LayerTrace& l : trace.layers) {
        r.spikes += l.total_spikes();
    }
    return r;
}

std::size_t default_threads()
{
    if (const char* env = std::getenv("BSNN_THREADS")) {
        std::size_t n = 0;
        const std::string_view s(env);
        const auto res = std::from_chars(s.data(), s.data() + s.size(), n);
        if (res.ec == std::errc() && res.ptr == s.data() + s.size() && n > 0) {
            return n;
        }
    }
    return 1;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn)
{
    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = n * t / threads; i < n * (t + 1) / threads; ++i) {
                        fn(i);
                    }
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

std::vector<std::string> run_warnings(const SpikingNetwork& net, const PhaseConfig& cfg)
{
    std::vector<std::string> out = net.warnings();
    const UnitLayerInfo& readout = net.readout();
    if (cfg.periods <= readout.settled) {
        out.push_back("decode window of " + std::to_string(cfg.periods) + " period(s) ends before the readout settles (" +
                      std::to_string(readout.settled + 1) + " periods needed); " + mode_name(net.mode()) +
                      " decode is pre-warm-up");
    }
    return out;
}

namespace {

std::vector<SampleResult> run_all(const SpikingNetwork& net, const ConvertedModel& converted, const Dataset& data,
                                  const SimOptions& options)
{
    std::vector<SampleResult> results(data.count());
    parallel_for(data.count(), options.threads, [&](std::size_t i) {
        results[i] = run_sample(net, converted, data.sample(i), data.labels[i], options.cfg);
    });
    return results;
}

} // namespace

SimReport simulate_dataset(const ConvertedModel& converted, const Dataset& data, const SimOptions& options)
{
    if (data.count() == 0) {
        throw ValidationError("simulation needs at least one sample");
    }
    const auto start = std::chrono::steady_clock::now();
    const SpikingNetwork net = build_snn(converted.model, options.cfg, build_options(converted, options));
    const std::vector<SampleResult> results = run_all(net, converted, data, options);

    SimReport rep;
    rep.mode = mode_name(options.mode);
    rep.phases = options.cfg.phases;
    rep.periods = options.cfg.periods;
    rep.sn_enabled = options.sn_enabled;
    rep.input_drive = options.input_drive == InputDrive::constant ? "constant" : "phase";
    rep.samples = data.count();
    rep.warnings = run_warnings(net, options.cfg);

    std::vector<std::size_t> correct(options.cfg.periods, 0);
    std::size_t ann_correct = 0;
    double diff_sum = 0.0;
    std::size_t diff_count = 0;
    for (const SampleResult& r : results) {
        ann_correct += r.ann_correct ? 1 : 0;
        for (std::size_t p = 0; p < r.correct_after.size(); ++p) {
            correct[p] += r.correct_after[p] ? 1 : 0;
        }
        for (double d : r.output_diff) {
            rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(d));
            diff_sum += std::abs(d);
            ++diff_count;
        }
        for (const auto& [layer, n] : r.sin) {
            rep.sin_totals[layer] += n;
        }
        rep.total_spikes += r.spikes;
    }
    const auto n = static_cast<double>(data.count());
    for (std::size_t c : correct) {
        rep.curve.push_back(static_cast<double>(c) / n);
    }
    rep.final_accuracy = rep.curve.back();
    rep.ann_accuracy = static_cast<double>(ann_correct) / n;
    rep.mean_abs_diff = diff_count ? diff_sum / static_cast<double>(diff_count) : 0.0;
    rep.spikes_per_sample = static_cast<double>(rep.total_spikes) / n;
    rep.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

std::string report_to_json(const SimReport& r)
{
    json j;
    j["format"] = "bsnn-report";
    j["mode"] = r.mode;
    j["phases"] = r.phases;
    j["periods"] = r.periods;
    j["sn_enabled"] = r.sn_enabled;
    j["input_drive"] = r.input_drive;
    j["samples"] = r.samples;
    j["curve"] = r.curve;
    j["final_accuracy"] = r.final_accuracy;
    j["ann_accuracy"] = r.ann_accuracy;
    j["max_abs_diff"] = r.max_abs_diff;
    j["mean_abs_diff"] = r.mean_abs_diff;
    j["sin_totals"] = r.sin_totals;
    j["total_spikes"] = r.total_spikes;
    j["spikes_per_sample"] = r.spikes_per_sample;
    j["wall_clock_s"] = r.wall_clock_s;
    j["warnings"] = r.warnings;
    return j.dump(2) + "\n";
}

SimReport report_from_json(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("report: ") + e.what());
    }
    if (!j.is_object() || j.value("format", "") != "bsnn-report") {
        throw FormatError("report: not a bsnn-report document");
    }
    SimReport r;
    r.mode = json_get<std::string>(j, "mode");
    r.phases = json_get<std::size_t>(j, "phases");
    r.periods = json_get<std::size_t>(j, "periods");
    r.sn_enabled = json_get<bool>(j, "sn_enabled");
    r.input_drive = json_get<std::string>(j, "input_drive");
    r.samples = json_get<std::size_t>(j, "samples");
    r.curve = json_get<std::vector<double>>(j, "curve");
    r.final_accuracy = json_get<double>(j, "final_accuracy");
    r.ann_accuracy = json_get<double>(j, "ann_accuracy");
    r.max_abs_diff = json_get<double>(j, "max_abs_diff");
    r.mean_abs_diff = json_get<double>(j, "mean_abs_diff");
    r.sin_totals = json_get<std::map<std::string, std::uint64_t>>(j, "sin_totals");
    r.total_spikes = json_get<std::uint64_t>(j, "total_spikes");
    r.spikes_per_sample = json_get<double>(j, "spikes_per_sample");
    r.wall_clock_s = json_get<double>(j, "wall_clock_s");
    r.warnings = json_get<std::vector<std::string>>(j, "warnings");
    if (r.curve.size() != r.periods) {
        throw ValidationError("report: curve has " + std::to_string(r.curve.size()) + " points for " +
                              std::to_string(r.periods) + " periods");
    }
    for (double a : r.curve) {
        if (!(a >= 0.0 && a <= 1.0)) {
            throw ValidationError("report: accuracy outside [0, 1]");
        }
    }
    return r;
}

std::string curve_to_csv(const SimReport& report)
{
    std::string out = "period,steps,accuracy\n";
    for (std::size_t p = 0; p < report.curve.size(); ++p) {
        out += std::to_string(p + 1) + "," + std::to_string((p + 1) * report.phases) + "," +
               format_double(report.curve[p]) + "\n";
    }
    return out;
}

std::vector<double> curve_from_csv(const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "period,steps,accuracy") {
        throw FormatError("curve.csv: missing header 'period,steps,accuracy'");
    }
    std::vector<double> curve;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) {
            throw FormatError("curve.csv: malformed row '" + line + "'");
        }
        const double period = parse_double(std::string_view(line).substr(0, c1), "period");
        if (period != static_cast<double>(curve.size() + 1)) {
            throw FormatError("curve.csv: periods must be consecutive from 1");
        }
        curve.push_back(parse_double(std::string_view(line).substr(c2 + 1), "accuracy"));
    }
    return curve;
}

std::size_t periods_to_tolerance(const SimReport& report, double tolerance)
{
    for (std::size_t p = 0; p < report.curve.size(); ++p) {
        if (report.curve[p] >= report.ann_accuracy - tolerance) {
            return p + 1;
        }
    }
    return 0;
}

CompareResult compare_outputs(const ConvertedModel& converted, const Dataset& data, const std::vector<SnnMode>& modes,
                              const SimOptions& options)
{
    if (data.count() == 0) {
        throw ValidationError("compare needs at least one sample");
    }
    CompareResult result;
    for (SnnMode mode : modes) {
        SimOptions o = options;
        o.mode = mode;
        const SpikingNetwork net = build_snn(converted.model, o.cfg, build_options(converted, o));
        for (const std::string& w : run_warnings(net, o.cfg)) {
            result.warnings.push_back(mode_name(mode) + ": " + w);
        }
        const std::vector<SampleResult> results = run_all(net, converted, data, o);
        DiffSummary s;
        s.mode = mode_name(mode);
        double sum = 0.0;
        for (const SampleResult& r : results) {
            for (double d : r.output_diff) {
                s.max_abs = std::max(s.max_abs, std::abs(d));
                sum += std::abs(d);
                ++s.count;
                ++s.histogram[static_cast<long long>(std::floor(d * kHistogramBinsPerUnit))];
            }
        }
        s.mean_abs = s.count ? sum / static_cast<double>(s.count) : 0.0;
        result.modes.push_back(std::move(s));
    }
    return result;
}

std::string histogram_to_csv(const CompareResult& result)
{
    std::string out = "mode,bin_lo,bin_hi,count\n";
    for (const DiffSummary& s : result.modes) {
        for (const auto& [bin, count] : s.histogram) {
            out += s.mode + "," + format_double(static_cast<double>(bin) / kHistogramBinsPerUnit) + "," +
                   format_double(static_cast<double>(bin + 1) / kHistogramBinsPerUnit) + "," + std::to_string(count) + "\n";
        }
    }
    return out;
}

} // namespace bsnn
