#pragma once

#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "espt/training.hpp"

namespace espt {

enum class SweepAxis { Alpha, Transforms };

inline const char* axis_name(SweepAxis a) { return a == SweepAxis::Alpha ? "alpha" : "transforms"; }

inline SweepAxis parse_axis(const std::string& s) {
    if (s == "alpha") return SweepAxis::Alpha;
    if (s == "transforms") return SweepAxis::Transforms;
    throw ConfigError("unknown sweep axis '" + s + "' (expected alpha or transforms)");
}

/// "90+180" style label of a transform set.
inline std::string transform_label(const TransformSet& u) {
    std::string out;
    for (int d : u.degrees()) out += (out.empty() ? "" : "+") + std::to_string(d);
    return out;
}

inline TransformSet parse_transform_label(const std::string& label) {
    std::vector<int> degrees;
    std::stringstream ss(label);
    std::string item;
    while (std::getline(ss, item, '+')) degrees.push_back(ini::parse_value<int>(item, "transform set"));
    try {
        return TransformSet::from_degrees(degrees);
    } catch (const ContractError& e) {
        throw ConfigError("transform set '" + label + "': " + e.what());
    }
}

/// The seven nonempty subsets of {90°, 180°, 270°}: singletons, pairs, full set.
inline std::vector<TransformSet> all_transform_subsets() {
    return {TransformSet({1}),    TransformSet({2}),    TransformSet({3}),      TransformSet({1, 2}),
            TransformSet({1, 3}), TransformSet({2, 3}), TransformSet({1, 2, 3})};
}

class SweepError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SweepSpec {
    TrainConfig base;
    SweepAxis axis = SweepAxis::Alpha;
    std::vector<double> alphas{0.0, 0.3};
    std::vector<TransformSet> transform_sets = all_transform_subsets();
    std::vector<std::uint64_t> seeds{0};
    EpisodeShape eval_shape{5, 1, 16};
    std::size_t eval_tasks = 200;
    Split eval_split = Split::Test;

    bool operator==(const SweepSpec&) const = default;

    std::size_t points() const { return axis == SweepAxis::Alpha ? alphas.size() : transform_sets.size(); }

    std::string value_label(std::size_t i) const {
        return axis == SweepAxis::Alpha ? ini::format_value(alphas[i]) : transform_label(transform_sets[i]);
    }

    /// Config for axis point i under seed s; everything else is the base.
    TrainConfig config_for(std::size_t i, std::uint64_t seed) const {
        TrainConfig c = base;
        c.seed = seed;
        if (axis == SweepAxis::Alpha) c.hyper.alpha = alphas[i];
        else c.transforms = transform_sets[i];
        return c;
    }

    void validate() const {
        if (points() == 0) throw ConfigError("sweep axis needs at least one value");
        if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
        if (eval_tasks == 0) throw ConfigError("sweep needs at least one evaluation task");
        for (std::size_t i = 0; i < points(); ++i) config_for(i, seeds[0]).validate();
    }

    /// Full-size backbones take hours per cell on a CPU.
    bool long_running() const { return base.model.input_size > 32 || base.model.blocks.size() > 2; }
};

struct SweepRow {
    std::string axis;
    std::string value;
    std::uint64_t seed = 0;
    double mean_acc = 0.0;
    double ci = 0.0;
};

struct SweepTable {
    std::vector<SweepRow> rows;

    static std::string header() { return "axis,value,seed,mean_acc,ci"; }

    static std::string format_row(const SweepRow& r) {
        std::ostringstream os;
        os.precision(10);
        os << r.axis << ',' << r.value << ',' << r.seed << ',' << r.mean_acc << ',' << r.ci;
        return os.str();
    }

    std::string to_csv() const {
        std::string out = header() + "\n";
        for (const auto& r : rows) out += format_row(r) + "\n";
        return out;
    }
};

/// Trains and evaluates one model per (axis value, seed). Cells sharing a
/// seed share the dataset, initialization and episode stream, so only the
/// swept value differs between them.
template <typename T>
SweepTable run_sweep(const SweepSpec& spec, const Dataset& data,
                     const std::function<void(const SweepRow&)>& on_row = {}) {
    spec.validate();
    SweepTable table;
    for (std::size_t i = 0; i < spec.points(); ++i) {
        for (auto seed : spec.seeds) {
            SweepRow row{axis_name(spec.axis), spec.value_label(i), seed, 0.0, 0.0};
            try {
                const TrainConfig cfg = spec.config_for(i, seed);
                auto result = train<T>(cfg, data);
                auto report = evaluate(result.best, data, spec.eval_split, spec.eval_shape, spec.eval_tasks,
                                       stream_seed(seed, Stream::Test), cfg.hyper.lambda_bar);
                row.mean_acc = report.mean;
                row.ci = report.ci95;
            } catch (const std::exception& e) {
                throw SweepError(std::string(axis_name(spec.axis)) + "=" + row.value + " seed=" + std::to_string(seed) +
                                 ": " + e.what());
            }
            if (on_row) on_row(row);
            table.rows.push_back(row);
        }
    }
    return table;
}

}  // namespace espt
