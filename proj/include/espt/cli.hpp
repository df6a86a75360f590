#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "espt/ablation.hpp"
#include "espt/config.hpp"
#include "espt/gradcheck.hpp"
#include "espt/training.hpp"

namespace espt {

namespace cli {

inline constexpr int kOk = 0;
inline constexpr int kRuntimeError = 1;
inline constexpr int kUsageError = 2;

/// Bad invocation: unknown flag, invalid config, missing input file.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// `error kind=<usage|runtime> message="..."` on one line.
inline std::string error_line(const std::string& kind, const std::string& message) {
    std::string escaped;
    for (char ch : message) {
        if (ch == '"' || ch == '\\') escaped += '\\';
        escaped += ch == '\n' ? ' ' : ch;
    }
    return "error kind=" + kind + " message=\"" + escaped + "\"";
}

inline EpisodeShape parse_shape(const std::string& text) {
    std::vector<std::size_t> v;
    try {
        v = ini::parse_list<std::size_t>(text, "--shape");
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    if (v.size() != 3 || v[0] == 0 || v[1] == 0 || v[2] == 0) {
        throw UsageError("--shape expects way,shot,queries with positive values, got '" + text + "'");
    }
    return {v[0], v[1], v[2]};
}

inline Dataset load_data(const std::string& manifest) {
    if (manifest.empty()) throw UsageError("no dataset: set data.manifest in the config or pass --data");
    if (!std::filesystem::exists(manifest)) throw UsageError("dataset manifest " + manifest + " not found");
    return load_dataset(manifest);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
}

inline RunConfig config_or_default(const std::string& path) {
    return path.empty() ? RunConfig{} : load_run_config(path);
}

// ---------------------------------------------------------------------------

inline int run_gendata(const std::string& spec_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
                       std::ostream& out) {
    SyntheticSpec spec;
    if (!spec_path.empty()) {
        if (!std::filesystem::exists(spec_path)) throw UsageError("spec file " + spec_path + " not found");
        spec = parse_synthetic_spec(ini::read_file(spec_path));
    }
    if (seed) spec.seed = *seed;
    Dataset data = generate_synthetic(spec);
    save_dataset(data, out_dir);
    ini::write_file(std::filesystem::path(out_dir) / "synthetic.ini", synthetic_spec_tree(spec));
    out << "wrote " << data.classes.size() << " classes, " << data.total_images() << " images to "
        << (std::filesystem::path(out_dir) / "dataset.ini").string() << "\n";
    return kOk;
}

template <typename T>
void train_with(const RunConfig& cfg, const Dataset& data, std::ostream& out) {
    const std::filesystem::path dir = cfg.output_dir;
    std::filesystem::create_directories(dir);
    write_text(dir / "config.ini", format_run_config(cfg));
    std::ofstream log(dir / "metrics.jsonl");
    if (!log) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
    auto result = train<T>(cfg.train, data, std::nullopt, [&](const TrainLogRecord& r) {
        log << r.to_json().dump() << "\n";
        log.flush();
        if (r.validation_accuracy) {
            out << "epoch " << r.epoch << " iteration " << r.iteration << " L_total " << r.metrics.l_total
                << " validation_accuracy " << *r.validation_accuracy << "\n";
        }
    });
    result.best.save(dir / "best");
    result.final_model.save(dir / "final");
    nlohmann::json summary = {{"iterations", result.log.size()},
                              {"seed", cfg.train.seed},
                              {"precision", precision_name(cfg.precision)},
                              {"best_validation_accuracy", result.best_validation}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    out << "wrote " << (dir / "best").string() << " and " << (dir / "metrics.jsonl").string() << "\n";
}

inline int run_train(RunConfig cfg, std::optional<std::uint64_t> seed, std::optional<std::size_t> epochs,
                     const std::string& out_dir, std::ostream& out) {
    if (seed) cfg.train.seed = *seed;
    if (epochs) cfg.train.epochs = *epochs;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    cfg.train.validate();
    Dataset data = load_data(cfg.manifest);
    if (cfg.precision == Precision::Float) train_with<float>(cfg, data, out);
    else train_with<double>(cfg, data, out);
    return kOk;
}

inline int run_eval(RunConfig cfg, const std::string& checkpoint, std::optional<std::size_t> tasks,
                    const std::string& shape, const std::string& split, const std::string& out_file,
                    std::ostream& out) {
    if (tasks) cfg.eval.tasks = *tasks;
    if (!shape.empty()) cfg.eval.shape = parse_shape(shape);
    if (!split.empty()) {
        try {
            cfg.eval.split = parse_split(split);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
    }
    if (!checkpoint.empty()) cfg.eval.checkpoint = checkpoint;
    std::filesystem::path ckpt = cfg.eval.checkpoint.empty() ? std::filesystem::path(cfg.output_dir) / "best"
                                                             : std::filesystem::path(cfg.eval.checkpoint);
    if (!std::filesystem::exists(ckpt) && ckpt.is_relative() && std::filesystem::exists(cfg.output_dir / ckpt)) {
        ckpt = cfg.output_dir / ckpt;
    }
    if (!std::filesystem::exists(ckpt / "checkpoint.ini")) throw UsageError("checkpoint " + ckpt.string() + " not found");
    cfg.eval.checkpoint = ckpt.string();
    auto model = Backbone<double>::load(ckpt);
    Dataset data = load_data(cfg.manifest);
    const std::uint64_t seed = stream_seed(cfg.train.seed, Stream::Test);
    auto report = evaluate(model, data, cfg.eval.split, cfg.eval.shape, cfg.eval.tasks, seed, cfg.train.hyper.lambda_bar);
    const std::filesystem::path report_path =
        out_file.empty() ? std::filesystem::path(cfg.output_dir) / "eval.json" : std::filesystem::path(out_file);
    write_text(report_path, report.to_json().dump(2) + "\n");
    write_text(report_path.parent_path() / "eval_config.ini", format_run_config(cfg));
    out << EvalReport::table_header() << "\n" << report.table_row() << "\n";
    return kOk;
}

inline int run_gradcheck(const RunConfig& cfg, std::uint64_t seed, double tolerance, const std::string& shape,
                         std::ostream& out) {
    const EpisodeShape s = shape.empty() ? EpisodeShape{2, 1, 2} : parse_shape(shape);
    BackboneConfig mc = cfg.train.model;
    SyntheticSpec spec;
    spec.num_classes = std::max<std::size_t>(8, 2 * s.way);
    spec.samples_per_class = s.shot + s.queries;
    spec.image_side = mc.input_size;
    spec.channels = mc.in_channels;
    spec.seed = seed;
    spec.train_fraction = 0.5;
    spec.val_fraction = 0.25;
    Dataset data = generate_synthetic(spec);
    std::mt19937_64 rng(derive_seed(seed, 0));
    Episode ep = sample_episode(data, Split::Train, s.way, s.shot, s.queries, rng);
    const int turns = sample_transform(cfg.train.transforms, rng);
    auto model = Backbone<double>::init(mc, stream_seed(seed, Stream::Init));
    auto report = gradient_check(model, ep, turns, cfg.train.hyper);
    out << "parameter,size,L_class,L_pretext,L_total\n";
    out.precision(3);
    for (const auto& e : report.entries) {
        out << e.name << ',' << e.size << ',' << std::scientific << e.max_rel_error[0] << ',' << e.max_rel_error[1]
            << ',' << e.max_rel_error[2] << std::defaultfloat << "\n";
    }
    out << "worst " << std::scientific << report.worst() << std::defaultfloat << " tolerance " << tolerance
        << " coordinates " << report.coordinates << " reprobed " << report.reprobed << " unresolved "
        << report.unresolved << "\n";
    return report.passed(tolerance) && report.unresolved == 0 ? kOk : kRuntimeError;
}

inline int run_sweep_cmd(RunConfig cfg, const std::string& axis, const std::string& out_file, std::ostream& out,
                         std::ostream& err) {
    if (!axis.empty()) {
        try {
            cfg.sweep_axis = parse_axis(axis);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
    }
    SweepSpec spec = cfg.sweep_spec();
    spec.validate();
    if (spec.long_running()) err << "warning: full-size backbone; each sweep cell may take hours on a CPU\n";
    Dataset data = load_data(cfg.manifest);
    const std::filesystem::path dir = cfg.output_dir;
    std::filesystem::create_directories(dir);
    write_text(dir / "config.ini", format_run_config(cfg));
    out << SweepTable::header() << "\n";
    auto emit = [&](const SweepRow& r) { out << SweepTable::format_row(r) << "\n" << std::flush; };
    SweepTable table = cfg.precision == Precision::Float ? run_sweep<float>(spec, data, emit)
                                                         : run_sweep<double>(spec, data, emit);
    write_text(out_file.empty() ? dir / "sweep.csv" : std::filesystem::path(out_file), table.to_csv());
    return kOk;
}

}  // namespace cli

/// Entry point of the `espt` tool. Returns 0 on success, 1 on a runtime
/// failure and 2 on a usage or configuration error; failures print one
/// `error kind=... message="..."` line to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Few-shot learning with ridge-reconstruction classifiers and rotation consistency"};
    app.name("espt");
    app.require_subcommand(1);

    std::string config_path, spec_path, out_dir, checkpoint, shape, split, out_file, axis, data_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs, tasks;
    double tolerance = 1e-4;

    auto* gendata = app.add_subcommand("gendata", "write a synthetic pattern dataset");
    gendata->add_option("--spec", spec_path, "synthetic spec file ([synthetic] section)");
    gendata->add_option("--out", out_dir, "output directory")->required();
    gendata->add_option("--seed", seed, "override the spec seed");

    auto* train_cmd = app.add_subcommand("train", "episodic training");
    train_cmd->add_option("--config", config_path, "run config")->required();
    train_cmd->add_option("--seed", seed, "override train.seed");
    train_cmd->add_option("--epochs", epochs, "override train.epochs");
    train_cmd->add_option("--out", out_dir, "override output.dir");

    auto* eval_cmd = app.add_subcommand("eval", "few-shot evaluation of a checkpoint");
    eval_cmd->add_option("--config", config_path, "run config");
    eval_cmd->add_option("--data", data_path, "dataset manifest (overrides data.manifest)");
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory");
    eval_cmd->add_option("--tasks", tasks, "number of tasks");
    eval_cmd->add_option("--shape", shape, "way,shot,queries");
    eval_cmd->add_option("--split", split, "train | val | test");
    eval_cmd->add_option("--out", out_file, "report path (default <output.dir>/eval.json)");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every loss gradient");
    grad_cmd->add_option("--config", config_path, "run config (model and loss settings)");
    grad_cmd->add_option("--seed", seed, "episode and initialization seed");
    grad_cmd->add_option("--tolerance", tolerance, "largest accepted relative error");
    grad_cmd->add_option("--shape", shape, "way,shot,queries (default 2,1,2)");

    auto* sweep_cmd = app.add_subcommand("sweep", "alpha or transform-set ablation");
    sweep_cmd->add_option("--config", config_path, "run config")->required();
    sweep_cmd->add_option("--axis", axis, "alpha | transforms (overrides sweep.axis)");
    sweep_cmd->add_option("--out", out_file, "results table path (default <output.dir>/sweep.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return cli::kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return cli::kOk;
    } catch (const CLI::ParseError& e) {
        err << cli::error_line("usage", e.what()) << "\n";
        return cli::kUsageError;
    }

    try {
        if (*gendata) return cli::run_gendata(spec_path, out_dir, seed, out);
        // A checkpoint sits next to the resolved config of the run that wrote it.
        if (*eval_cmd && config_path.empty() && !checkpoint.empty()) {
            const auto sibling = std::filesystem::path(checkpoint).parent_path() / "config.ini";
            if (std::filesystem::exists(sibling)) config_path = sibling.string();
        }
        RunConfig cfg = cli::config_or_default(config_path);
        if (!data_path.empty()) cfg.manifest = data_path;
        if (*train_cmd) return cli::run_train(cfg, seed, epochs, out_dir, out);
        if (*eval_cmd) return cli::run_eval(cfg, checkpoint, tasks, shape, split, out_file, out);
        if (*grad_cmd) return cli::run_gradcheck(cfg, seed.value_or(cfg.train.seed), tolerance, shape, out);
        if (*sweep_cmd) return cli::run_sweep_cmd(cfg, axis, out_file, out, err);
    } catch (const cli::UsageError& e) {
        err << cli::error_line("usage", e.what()) << "\n";
        return cli::kUsageError;
    } catch (const ConfigError& e) {
        err << cli::error_line("usage", e.what()) << "\n";
        return cli::kUsageError;
    } catch (const DatasetError& e) {
        err << cli::error_line("usage", e.what()) << "\n";
        return cli::kUsageError;
    } catch (const SamplerError& e) {
        err << cli::error_line("usage", e.what()) << "\n";
        return cli::kUsageError;
    } catch (const std::exception& e) {
        err << cli::error_line("runtime", e.what()) << "\n";
        return cli::kRuntimeError;
    }
    err << cli::error_line("usage", "no subcommand") << "\n";
    return cli::kUsageError;
}

}  // namespace espt
