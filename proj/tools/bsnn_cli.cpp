// bsnn: train fixtures, convert, simulate, compare and report.
//
// Exit codes: 0 success, 1 usage, 2 validation (bad model, data or config),
// 3 I/O.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bsnn/errors.hpp"
#include "bsnn/fixtures.hpp"
#include "bsnn/model_io.hpp"
#include "bsnn/pipeline.hpp"
#include "bsnn/trainer.hpp"

namespace fs = std::filesystem;
using namespace bsnn;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

struct DataArgs {
    std::string path;
    std::string format = "bsd";
    std::string labels;

    void add(CLI::App* cmd, const std::string& flag, const std::string& what, bool required = true)
    {
        auto* opt = cmd->add_option(flag, path, what);
        if (required) {
            opt->required();
        }
        cmd->add_option(flag + "-format", format, "dataset format: bsd or idx")
            ->check(CLI::IsMember({"bsd", "idx"}));
        cmd->add_option(flag + "-labels", labels, "IDX labels file (default: inferred from the image file name)");
    }

    Dataset load(const InputNormalization& norm, std::size_t limit = 0) const
    {
        Dataset d = load_dataset(path, dataset_format_from_name(format), labels);
        if (limit > 0 && limit < d.count()) {
            d = d.subset(0, limit);
        }
        normalize_inputs(d, norm);
        return d;
    }
};

void ensure_parent(const fs::path& path)
{
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
}

void write_file(const fs::path& path, const std::string& text)
{
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void print_warnings(const std::vector<std::string>& warnings)
{
    for (const std::string& w : warnings) {
        std::cerr << "warning: " << w << "\n";
    }
}

std::string pct(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

struct RunArgs {
    std::string mode = "bsnn";
    std::size_t phases = 8;
    std::size_t periods = 16;
    double v_th = 1.0;
    bool sn = true;
    std::string input_mode = "phase";
    std::size_t threads = default_threads();
    std::size_t limit = 0;

    void add(CLI::App* cmd, bool with_mode)
    {
        if (with_mode) {
            cmd->add_option("--mode", mode, "bsnn, phase or rate")->check(CLI::IsMember({"bsnn", "phase", "rate"}));
        }
        cmd->add_option("-K,--phases", phases, "phase count per period")->check(CLI::Range(1, 52));
        cmd->add_option("-n,--periods", periods, "number of periods (T = n*K)")->check(CLI::PositiveNumber);
        cmd->add_option("--v-th", v_th, "threshold")->check(CLI::PositiveNumber);
        cmd->add_flag("--sn,!--no-sn", sn, "synchronous neurons on residual shortcuts (bsnn mode)");
        cmd->add_option("--input-mode", input_mode, "phase (x*S_t) or constant (x) input drive")
            ->check(CLI::IsMember({"phase", "constant"}));
        cmd->add_option("--threads", threads, "worker threads (default $BSNN_THREADS or 1; 0 = all cores)");
        cmd->add_option("--limit", limit, "use only the first N samples (0 = all)");
    }

    SimOptions options() const
    {
        SimOptions o;
        o.mode = mode_from_name(mode);
        o.cfg.phases = phases;
        o.cfg.periods = periods;
        o.cfg.v_th = v_th;
        o.sn_enabled = sn;
        o.input_drive = input_mode == "constant" ? InputDrive::constant : InputDrive::phase_weighted;
        o.threads = threads;
        return o;
    }
};

std::vector<std::size_t> parse_widths(const std::string& text)
{
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) {
            continue;
        }
        std::size_t pos = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != item.size() || v == 0) {
            throw CLI::ValidationError("--widths", "expected comma-separated positive integers");
        }
        out.push_back(v);
    }
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Bistable-neuron ANN-to-SNN conversion toolkit"};
    app.require_subcommand(1);

    // fixture
    auto* fixture = app.add_subcommand("fixture", "write the synthetic Gaussian-blob dataset as BSD files");
    BlobConfig blob;
    std::size_t test_samples = 2000;
    std::uint64_t test_seed = 99;
    std::string fixture_train, fixture_test;
    fixture->add_option("--train-out", fixture_train, "training set BSD path")->required();
    fixture->add_option("--test-out", fixture_test, "test set BSD path");
    fixture->add_option("--classes", blob.classes)->check(CLI::Range(1, 256));
    fixture->add_option("--dims", blob.dims)->check(CLI::PositiveNumber);
    fixture->add_option("--samples", blob.samples, "training samples")->check(CLI::PositiveNumber);
    fixture->add_option("--test-samples", test_samples)->check(CLI::PositiveNumber);
    fixture->add_option("--spread", blob.spread, "per-coordinate noise standard deviation")->check(CLI::NonNegativeNumber);
    fixture->add_option("--seed", blob.seed, "seed for centres and training samples");
    fixture->add_option("--test-seed", test_seed, "seed for test samples");

    // train
    auto* train = app.add_subcommand("train", "train a dense ReLU MLP with SGD");
    DataArgs train_data, train_test;
    InputNormalization train_norm;
    TrainConfig tcfg;
    std::string widths = "96,96,96";
    std::string train_out;
    train_data.add(train, "--data", "training set");
    train_test.add(train, "--test-data", "held-out set for the reported test accuracy", false);
    train->add_option("--input-offset", train_norm.offset, "subtracted from every input element");
    train->add_option("--input-divisor", train_norm.divisor, "inputs are divided by this after the offset")
        ->check(CLI::PositiveNumber);
    train->add_option("--widths", widths, "hidden layer widths, comma separated");
    train->add_option("--epochs", tcfg.epochs);
    train->add_option("--lr", tcfg.learning_rate)->check(CLI::PositiveNumber);
    train->add_option("--batch-size", tcfg.batch_size)->check(CLI::PositiveNumber);
    train->add_option("--seed", tcfg.seed);
    train->add_option("--out", train_out, "output model directory")->required();

    // convert
    auto* convert = app.add_subcommand("convert", "fold batchnorm, calibrate lambdas and normalize weights");
    std::string convert_model_dir, convert_out;
    DataArgs calib;
    InputNormalization convert_norm;
    double p_max = 0.999;
    std::size_t convert_threads = default_threads();
    std::size_t calib_limit = 0;
    convert->add_option("--model", convert_model_dir, "trained model directory")->required();
    calib.add(convert, "--calib", "calibration set");
    convert->add_option("--p-max", p_max, "activation quantile used as lambda")->check(CLI::Range(1e-9, 1.0));
    convert->add_option("--input-offset", convert_norm.offset, "subtracted from every input element");
    convert->add_option("--input-divisor", convert_norm.divisor, "inputs are divided by this after the offset")
        ->check(CLI::PositiveNumber);
    convert->add_option("--limit", calib_limit, "use only the first N calibration samples (0 = all)");
    convert->add_option("--threads", convert_threads);
    convert->add_option("--out", convert_out, "converted model directory")->required();

    // simulate
    auto* simulate_cmd = app.add_subcommand("simulate", "run the spiking network on a dataset");
    std::string sim_model;
    DataArgs sim_data;
    RunArgs sim_run;
    std::string report_path = "report.json";
    std::string curve_path;
    bool omit_timing = false;
    simulate_cmd->add_option("--converted", sim_model, "converted model directory")->required();
    sim_data.add(simulate_cmd, "--data", "evaluation set");
    sim_run.add(simulate_cmd, true);
    simulate_cmd->add_option("--report", report_path, "report JSON path");
    simulate_cmd->add_option("--curve", curve_path, "accuracy curve CSV path (default: curve.csv next to the report)");
    simulate_cmd->add_flag("--omit-timing", omit_timing, "write wall_clock_s = 0 for byte-reproducible reports");

    // compare
    auto* compare = app.add_subcommand("compare", "histogram of decoded-output differences against the ANN");
    std::string cmp_model;
    DataArgs cmp_data;
    RunArgs cmp_run;
    cmp_run.limit = 100;
    std::vector<std::string> cmp_modes{"bsnn", "phase", "rate"};
    std::string hist_path = "hist.csv";
    compare->add_option("--converted", cmp_model, "converted model directory")->required();
    cmp_data.add(compare, "--data", "evaluation set");
    cmp_run.add(compare, false);
    compare->add_option("--modes", cmp_modes, "modes to compare")
        ->delimiter(',')
        ->check(CLI::IsMember({"bsnn", "phase", "rate"}));
    compare->add_option("--hist", hist_path, "histogram CSV path");

    // report
    auto* report = app.add_subcommand("report", "summarize one or more report.json files");
    std::vector<std::string> report_files;
    double tolerance_pp = 0.5;
    report->add_option("reports", report_files, "report.json files")->required();
    report->add_option("--tolerance", tolerance_pp, "accuracy tolerance in percentage points for the time column");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*fixture) {
            ensure_parent(fixture_train);
            save_dataset_bsd(make_blobs(blob), fixture_train);
            if (!fixture_test.empty()) {
                BlobConfig t = blob;
                t.samples = test_samples;
                ensure_parent(fixture_test);
                save_dataset_bsd(make_blobs_split(t, test_seed), fixture_test);
            }
            return 0;
        }
        if (*train) {
            tcfg.widths = parse_widths(widths);
            const Dataset data = train_data.load(train_norm);
            std::optional<Dataset> test;
            if (!train_test.path.empty()) {
                test = train_test.load(train_norm);
            }
            const TrainResult r = train_mlp(tcfg, data, test ? &*test : nullptr);
            save_model(r.model, train_out);
            std::cout << "final loss " << r.epoch_loss.back() << "\n";
            std::cout << "train accuracy " << pct(r.train_accuracy) << "%\n";
            if (r.test_accuracy) {
                std::cout << "test accuracy " << pct(*r.test_accuracy) << "%\n";
            }
            return 0;
        }
        if (*convert) {
            const ModelGraph model = load_model(convert_model_dir);
            const Dataset data = calib.load(convert_norm, calib_limit);
            const ConvertedModel converted = convert_model(model, data, p_max, convert_norm, convert_threads);
            print_warnings(converted.stats.warnings);
            save_converted(converted, convert_out);
            return 0;
        }
        if (*simulate_cmd) {
            const ConvertedModel converted = load_converted(sim_model);
            const Dataset data = sim_data.load(converted.input_norm, sim_run.limit);
            SimReport r = simulate_dataset(converted, data, sim_run.options());
            if (omit_timing) {
                r.wall_clock_s = 0.0;
            }
            print_warnings(r.warnings);
            write_file(report_path, report_to_json(r));
            const fs::path curve = curve_path.empty() ? fs::path(report_path).parent_path() / "curve.csv"
                                                      : fs::path(curve_path);
            write_file(curve, curve_to_csv(r));
            std::cout << r.mode << " K=" << r.phases << " n=" << r.periods << " T=" << r.phases * r.periods
                      << ": SNN " << pct(r.final_accuracy) << "% ANN " << pct(r.ann_accuracy) << "%\n";
            return 0;
        }
        if (*compare) {
            const ConvertedModel converted = load_converted(cmp_model);
            const Dataset data = cmp_data.load(converted.input_norm, cmp_run.limit);
            std::vector<SnnMode> modes;
            for (const std::string& m : cmp_modes) {
                modes.push_back(mode_from_name(m));
            }
            const CompareResult r = compare_outputs(converted, data, modes, cmp_run.options());
            print_warnings(r.warnings);
            write_file(hist_path, histogram_to_csv(r));
            std::cout << "mode,count,max_abs_diff,mean_abs_diff\n";
            for (const DiffSummary& s : r.modes) {
                std::cout << s.mode << "," << s.count << "," << s.max_abs << "," << s.mean_abs << "\n";
            }
            return 0;
        }
        if (*report) {
            std::cout << "file,mode,K,periods,T,sn,samples,ann_acc,snn_acc,loss_pp,time_to_tol_steps,max_abs_diff,"
                         "sin_total,spikes_per_sample\n";
            for (const std::string& f : report_files) {
                const SimReport r = report_from_json(read_file(f));
                std::uint64_t sin = 0;
                for (const auto& [layer, n] : r.sin_totals) {
                    sin += n;
                }
                const std::size_t p = periods_to_tolerance(r, tolerance_pp / 100.0);
                std::cout << f << "," << r.mode << "," << r.phases << "," << r.periods << "," << r.phases * r.periods
                          << "," << (r.sn_enabled ? "on" : "off") << "," << r.samples << "," << pct(r.ann_accuracy)
                          << "," << pct(r.final_accuracy) << "," << pct(r.ann_accuracy - r.final_accuracy) << ","
                          << (p == 0 ? std::string("none") : std::to_string(p * r.phases)) << "," << r.max_abs_diff
                          << "," << sin << "," << r.spikes_per_sample << "\n";
            }
            return 0;
        }
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitUsage;
}
