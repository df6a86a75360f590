#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "espt/ablation.hpp"
#include "espt/ini.hpp"
#include "espt/training.hpp"

namespace espt {

enum class Precision { Double, Float };

inline const char* precision_name(Precision p) { return p == Precision::Double ? "double" : "float"; }

inline Precision parse_precision(const std::string& s) {
    if (s == "double") return Precision::Double;
    if (s == "float") return Precision::Float;
    throw ConfigError("train.precision must be double or float, got '" + s + "'");
}

struct EvalSettings {
    EpisodeShape shape{5, 1, 16};
    std::size_t tasks = 1000;
    Split split = Split::Test;
    std::string checkpoint;  // empty: <output.dir>/best

    bool operator==(const EvalSettings&) const = default;
};

/// Everything one invocation needs, read from a sectioned INI file:
///
///   [data]     manifest
///   [episode]  way, shot, queries
///   [espt]     alpha, lambda_bar, rotations (degrees)
///   [model]    preset, filters, convs_per_block, kernels, input_size, channels, rescale, leaky_slope
///   [optim]    lr_schedule, momentum, weight_decay, nesterov
///   [train]    epochs, episodes_per_epoch, validation_every, validation_tasks, seed, precision
///   [pretrain] epochs, batch_size, lr_schedule
///   [eval]     way, shot, queries, tasks, split, checkpoint
///   [sweep]    axis, alphas, transform_sets, seeds, tasks
///   [output]   dir
struct RunConfig {
    TrainConfig train;
    std::string manifest;
    Precision precision = Precision::Double;
    EvalSettings eval;
    SweepAxis sweep_axis = SweepAxis::Alpha;
    std::vector<double> sweep_alphas{0.0, 0.3};
    std::vector<TransformSet> sweep_transform_sets = all_transform_subsets();
    std::vector<std::uint64_t> sweep_seeds{0, 1, 2, 3, 4};
    std::size_t sweep_tasks = 200;
    std::string output_dir = "runs/default";

    bool operator==(const RunConfig&) const = default;

    SweepSpec sweep_spec() const {
        SweepSpec s;
        s.base = train;
        s.axis = sweep_axis;
        s.alphas = sweep_alphas;
        s.transform_sets = sweep_transform_sets;
        s.seeds = sweep_seeds;
        s.eval_shape = eval.shape;
        s.eval_tasks = sweep_tasks;
        s.eval_split = eval.split;
        return s;
    }
};

namespace detail {

inline std::string format_transform_sets(const std::vector<TransformSet>& sets) {
    std::string out;
    for (const auto& u : sets) out += (out.empty() ? "" : "; ") + transform_label(u);
    return out;
}

inline std::vector<TransformSet> parse_transform_sets(const std::string& text) {
    if (ini::trim(text) == "all") return all_transform_subsets();
    std::vector<TransformSet> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ';')) {
        item = ini::trim(item);
        if (item.empty()) throw ConfigError("sweep.transform_sets: empty entry in '" + text + "'");
        out.push_back(parse_transform_label(item));
    }
    return out;
}

}  // namespace detail

/// Parses a config tree. Unknown sections and keys are rejected; absent
/// keys take their defaults.
inline RunConfig parse_run_config(const ini::Tree& root) {
    RunConfig c;
    auto& t = c.train;

    ini::SectionReader data(root, "data");
    c.manifest = data.get_string("manifest", c.manifest);
    data.reject_unknown();

    ini::SectionReader episode(root, "episode");
    t.shape.way = episode.get<std::size_t>("way", t.shape.way);
    t.shape.shot = episode.get<std::size_t>("shot", t.shape.shot);
    t.shape.queries = episode.get<std::size_t>("queries", t.shape.queries);
    episode.reject_unknown();

    ini::SectionReader espt(root, "espt");
    t.hyper.alpha = espt.get<double>("alpha", t.hyper.alpha);
    t.hyper.lambda_bar = espt.get<double>("lambda_bar", t.hyper.lambda_bar);
    try {
        t.transforms = TransformSet::from_degrees(espt.get_list<int>("rotations", t.transforms.degrees()));
    } catch (const ContractError& e) {
        throw ConfigError(std::string("espt.rotations: ") + e.what());
    }
    espt.reject_unknown();

    ini::SectionReader model(root, "model");
    t.model = read_backbone_config(model);
    model.reject_unknown();

    ini::SectionReader optim(root, "optim");
    if (optim.has("lr_schedule")) t.optim.schedule = LrSchedule::parse(optim.get_string("lr_schedule", ""));
    else optim.get_string("lr_schedule", "");
    t.optim.momentum = optim.get<double>("momentum", t.optim.momentum);
    t.optim.weight_decay = optim.get<double>("weight_decay", t.optim.weight_decay);
    t.optim.nesterov = optim.get<bool>("nesterov", t.optim.nesterov);
    optim.reject_unknown();

    ini::SectionReader train(root, "train");
    t.epochs = train.get<std::size_t>("epochs", t.epochs);
    t.episodes_per_epoch = train.get<std::size_t>("episodes_per_epoch", t.episodes_per_epoch);
    t.validation_every = train.get<std::size_t>("validation_every", t.validation_every);
    t.validation_tasks = train.get<std::size_t>("validation_tasks", t.validation_tasks);
    t.seed = train.get<std::uint64_t>("seed", t.seed);
    c.precision = parse_precision(train.get_string("precision", precision_name(c.precision)));
    train.reject_unknown();

    ini::SectionReader pre(root, "pretrain");
    t.pretrain.epochs = pre.get<std::size_t>("epochs", t.pretrain.epochs);
    t.pretrain.batch_size = pre.get<std::size_t>("batch_size", t.pretrain.batch_size);
    if (pre.has("lr_schedule")) t.pretrain.schedule = LrSchedule::parse(pre.get_string("lr_schedule", ""));
    else pre.get_string("lr_schedule", "");
    pre.reject_unknown();

    ini::SectionReader eval(root, "eval");
    c.eval.shape.way = eval.get<std::size_t>("way", c.eval.shape.way);
    c.eval.shape.shot = eval.get<std::size_t>("shot", c.eval.shape.shot);
    c.eval.shape.queries = eval.get<std::size_t>("queries", c.eval.shape.queries);
    c.eval.tasks = eval.get<std::size_t>("tasks", c.eval.tasks);
    try {
        c.eval.split = parse_split(eval.get_string("split", split_name(c.eval.split)));
    } catch (const std::exception& e) {
        throw ConfigError(std::string("eval.split: ") + e.what());
    }
    c.eval.checkpoint = eval.get_string("checkpoint", c.eval.checkpoint);
    eval.reject_unknown();

    ini::SectionReader sweep(root, "sweep");
    c.sweep_axis = parse_axis(sweep.get_string("axis", axis_name(c.sweep_axis)));
    c.sweep_alphas = sweep.get_list<double>("alphas", c.sweep_alphas);
    if (sweep.has("transform_sets")) c.sweep_transform_sets = detail::parse_transform_sets(sweep.get_string("transform_sets", ""));
    else sweep.get_string("transform_sets", "");
    c.sweep_seeds = sweep.get_list<std::uint64_t>("seeds", c.sweep_seeds);
    c.sweep_tasks = sweep.get<std::size_t>("tasks", c.sweep_tasks);
    sweep.reject_unknown();

    ini::SectionReader output(root, "output");
    c.output_dir = output.get_string("dir", c.output_dir);
    output.reject_unknown();

    ini::reject_unknown_sections(
        root, {"data", "episode", "espt", "model", "optim", "train", "pretrain", "eval", "sweep", "output"});

    t.validate();
    if (c.eval.shape.way == 0 || c.eval.shape.shot == 0 || c.eval.shape.queries == 0) {
        throw ConfigError("eval shape must be positive");
    }
    c.sweep_spec().validate();
    return c;
}

inline RunConfig parse_run_config_string(const std::string& text) { return parse_run_config(ini::read_string(text)); }

/// Reads a config file. Relative paths inside it resolve against the
/// file's directory, and the dataset manifest must exist.
inline RunConfig load_run_config(const std::filesystem::path& file) {
    if (!std::filesystem::exists(file)) throw ConfigError("config file " + file.string() + " not found");
    RunConfig c = parse_run_config(ini::read_file(file));
    const auto base = file.parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative()) p = std::filesystem::absolute(base / p).lexically_normal().string();
    };
    resolve(c.manifest);
    resolve(c.eval.checkpoint);
    resolve(c.output_dir);
    if (!c.manifest.empty() && !std::filesystem::exists(c.manifest)) {
        throw ConfigError("data.manifest " + c.manifest + " not found");
    }
    if (!c.eval.checkpoint.empty() && !std::filesystem::exists(c.eval.checkpoint)) {
        throw ConfigError("eval.checkpoint " + c.eval.checkpoint + " not found");
    }
    return c;
}

/// Every key with its resolved value, so the output re-parses to an equal config.
inline ini::Tree run_config_tree(const RunConfig& c) {
    const auto& t = c.train;
    ini::Tree root;
    root.put("data.manifest", c.manifest);
    root.put("episode.way", t.shape.way);
    root.put("episode.shot", t.shape.shot);
    root.put("episode.queries", t.shape.queries);
    root.put("espt.alpha", ini::format_value(t.hyper.alpha));
    root.put("espt.lambda_bar", ini::format_value(t.hyper.lambda_bar));
    root.put("espt.rotations", ini::format_list(t.transforms.degrees()));
    write_backbone_config(root, t.model);
    root.put("optim.lr_schedule", t.optim.schedule.format());
    root.put("optim.momentum", ini::format_value(t.optim.momentum));
    root.put("optim.weight_decay", ini::format_value(t.optim.weight_decay));
    root.put("optim.nesterov", ini::format_value(t.optim.nesterov));
    root.put("train.epochs", t.epochs);
    root.put("train.episodes_per_epoch", t.episodes_per_epoch);
    root.put("train.validation_every", t.validation_every);
    root.put("train.validation_tasks", t.validation_tasks);
    root.put("train.seed", t.seed);
    root.put("train.precision", precision_name(c.precision));
    root.put("pretrain.epochs", t.pretrain.epochs);
    root.put("pretrain.batch_size", t.pretrain.batch_size);
    root.put("pretrain.lr_schedule", t.pretrain.schedule.format());
    root.put("eval.way", c.eval.shape.way);
    root.put("eval.shot", c.eval.shape.shot);
    root.put("eval.queries", c.eval.shape.queries);
    root.put("eval.tasks", c.eval.tasks);
    root.put("eval.split", split_name(c.eval.split));
    root.put("eval.checkpoint", c.eval.checkpoint);
    root.put("sweep.axis", axis_name(c.sweep_axis));
    root.put("sweep.alphas", ini::format_list(c.sweep_alphas));
    root.put("sweep.transform_sets", detail::format_transform_sets(c.sweep_transform_sets));
    root.put("sweep.seeds", ini::format_list(c.sweep_seeds));
    root.put("sweep.tasks", c.sweep_tasks);
    root.put("output.dir", c.output_dir);
    return root;
}

inline std::string format_run_config(const RunConfig& c) { return ini::write_string(run_config_tree(c)); }

// ---------------------------------------------------------------------------
// Synthetic dataset spec files ([synthetic] section)
// ---------------------------------------------------------------------------

inline SyntheticSpec parse_synthetic_spec(const ini::Tree& root) {
    SyntheticSpec s;
    ini::SectionReader r(root, "synthetic");
    s.num_classes = r.get<std::size_t>("num_classes", s.num_classes);
    s.samples_per_class = r.get<std::size_t>("samples_per_class", s.samples_per_class);
    s.image_side = r.get<std::size_t>("image_side", s.image_side);
    s.channels = r.get<std::size_t>("channels", s.channels);
    s.seed = r.get<std::uint64_t>("seed", s.seed);
    s.train_fraction = r.get<double>("train_fraction", s.train_fraction);
    s.val_fraction = r.get<double>("val_fraction", s.val_fraction);
    r.reject_unknown();
    ini::reject_unknown_sections(root, {"synthetic"});
    s.validate();
    return s;
}

inline ini::Tree synthetic_spec_tree(const SyntheticSpec& s) {
    ini::Tree root;
    root.put("synthetic.num_classes", s.num_classes);
    root.put("synthetic.samples_per_class", s.samples_per_class);
    root.put("synthetic.image_side", s.image_side);
    root.put("synthetic.channels", s.channels);
    root.put("synthetic.seed", s.seed);
    root.put("synthetic.train_fraction", ini::format_value(s.train_fraction));
    root.put("synthetic.val_fraction", ini::format_value(s.val_fraction));
    return root;
}

}  // namespace espt
