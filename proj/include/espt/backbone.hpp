#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "espt/autograd.hpp"
#include "espt/ini.hpp"
#include "espt/nn_ops.hpp"

namespace espt {

struct BlockSpec {
    std::size_t filters = 64;
    std::size_t convs = 3;
    std::size_t kernel = 3;

    bool operator==(const BlockSpec&) const = default;
};

/// Shape of the residual feature extractor.
struct BackboneConfig {
    std::vector<BlockSpec> blocks;
    std::size_t input_size = 84;
    std::size_t in_channels = 3;
    bool rescale = true;
    double leaky_slope = 0.1;

    bool operator==(const BackboneConfig&) const = default;

    /// Four blocks of three 3×3 convs, (64, 160, 320, 640) filters, 84-pixel input.
    static BackboneConfig resnet12() {
        BackboneConfig c;
        c.blocks = {{64, 3, 3}, {160, 3, 3}, {320, 3, 3}, {640, 3, 3}};
        c.input_size = 84;
        return c;
    }

    /// Two blocks with (8, 16) filters on 16-pixel input: 4×4×16 maps.
    static BackboneConfig toy() {
        BackboneConfig c;
        c.blocks = {{8, 3, 3}, {16, 3, 3}};
        c.input_size = 16;
        return c;
    }

    /// The toy layout with 1×1 kernels. Every layer then commutes with
    /// quarter-turn rotations, so the extractor is exactly equivariant.
    static BackboneConfig equivariant_toy() {
        BackboneConfig c = toy();
        for (auto& b : c.blocks) b.kernel = 1;
        return c;
    }

    void validate() const {
        if (blocks.empty()) throw ConfigError("backbone needs at least one block");
        if (in_channels == 0) throw ConfigError("backbone input channels must be positive");
        for (const auto& b : blocks) {
            if (b.filters == 0 || b.convs == 0) throw ConfigError("block filters and convs must be positive");
            if (b.kernel == 0 || b.kernel % 2 == 0) throw ConfigError("block kernel must be odd and positive");
        }
        if (output_side_unchecked() == 0) {
            throw ConfigError("input size " + std::to_string(input_size) + " cannot be downsampled by " +
                              std::to_string(blocks.size()) + " pooling stages");
        }
    }

    /// Spatial side of the output map: input side halved (floor) once per block.
    std::size_t output_side() const {
        validate();
        return output_side_unchecked();
    }

    std::size_t feature_dim() const { return blocks.back().filters; }

private:
    std::size_t output_side_unchecked() const {
        std::size_t s = input_size;
        for (std::size_t i = 0; i < blocks.size(); ++i) s /= 2;
        return s;
    }
};

inline void write_backbone_config(ini::Tree& root, const BackboneConfig& c) {
    std::vector<std::size_t> filters, convs, kernels;
    for (const auto& b : c.blocks) {
        filters.push_back(b.filters);
        convs.push_back(b.convs);
        kernels.push_back(b.kernel);
    }
    root.put("model.filters", ini::format_list(filters));
    root.put("model.convs_per_block", ini::format_list(convs));
    root.put("model.kernels", ini::format_list(kernels));
    root.put("model.input_size", c.input_size);
    root.put("model.channels", c.in_channels);
    root.put("model.rescale", ini::format_value(c.rescale));
    root.put("model.leaky_slope", ini::format_value(c.leaky_slope));
}

/// Reads the [model] section. `preset` selects the starting point
/// (resnet12 | toy | equivariant_toy); explicit keys override it.
inline BackboneConfig read_backbone_config(ini::SectionReader& s) {
    const std::string preset = s.get_string("preset", "toy");
    BackboneConfig c;
    if (preset == "resnet12") c = BackboneConfig::resnet12();
    else if (preset == "toy") c = BackboneConfig::toy();
    else if (preset == "equivariant_toy") c = BackboneConfig::equivariant_toy();
    else throw ConfigError("unknown model preset '" + preset + "'");

    std::vector<std::size_t> filters, convs, kernels;
    for (const auto& b : c.blocks) {
        filters.push_back(b.filters);
        convs.push_back(b.convs);
        kernels.push_back(b.kernel);
    }
    filters = s.get_list<std::size_t>("filters", filters);
    convs = s.get_list<std::size_t>("convs_per_block", convs);
    kernels = s.get_list<std::size_t>("kernels", kernels);
    // A single value applies to every block.
    if (convs.size() == 1) convs.assign(filters.size(), convs[0]);
    if (kernels.size() == 1) kernels.assign(filters.size(), kernels[0]);
    if (convs.size() != filters.size() || kernels.size() != filters.size()) {
        throw ConfigError("model.filters, model.convs_per_block and model.kernels must have equal length");
    }
    c.blocks.clear();
    for (std::size_t i = 0; i < filters.size(); ++i) c.blocks.push_back({filters[i], convs[i], kernels[i]});
    c.input_size = s.get<std::size_t>("input_size", c.input_size);
    c.in_channels = s.get<std::size_t>("channels", c.in_channels);
    c.rescale = s.get<bool>("rescale", c.rescale);
    c.leaky_slope = s.get<double>("leaky_slope", c.leaky_slope);
    c.validate();
    return c;
}

template <typename T>
struct Parameter {
    std::string name;
    Var<T> var;
    bool decay = true;  // whether weight decay applies
};

/// Named learnable tensors, in a fixed order.
template <typename T>
class ParamSet {
public:
    void add(std::string name, Tensor<T> value, bool decay) {
        params_.push_back({std::move(name), leaf(std::move(value), true), decay});
    }

    std::vector<Parameter<T>>& items() { return params_; }
    const std::vector<Parameter<T>>& items() const { return params_; }
    std::size_t size() const { return params_.size(); }

    const Var<T>& get(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.var;
        throw ContractError("no parameter named '" + name + "'");
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.var->numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.var->zero_grad();
    }

    /// Deep copy with fresh leaves and no gradients.
    ParamSet clone() const {
        ParamSet out;
        for (const auto& p : params_) out.add(p.name, p.var->value, p.decay);
        return out;
    }

    void copy_values_from(const ParamSet& other) {
        if (other.size() != size()) throw ContractError("parameter sets differ in size");
        for (std::size_t i = 0; i < size(); ++i) {
            if (other.params_[i].var->shape() != params_[i].var->shape()) {
                throw ContractError("parameter '" + params_[i].name + "' shape mismatch");
            }
            params_[i].var->value = other.params_[i].var->value;
        }
    }

    /// FNV-1a over the raw bytes of every value.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& p : params_) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(p.var->value.data().data());
            for (std::size_t i = 0; i < p.var->numel() * sizeof(T); ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        }
        return h;
    }

private:
    std::vector<Parameter<T>> params_;
};

inline const std::string kTemperatureName = "temperature";

/// Residual feature extractor plus the softmax temperature.
template <typename T>
class Backbone {
public:
    Backbone() = default;
    Backbone(BackboneConfig config, ParamSet<T> params) : config_(std::move(config)), params_(std::move(params)) {}

    /// Fan-in scaled normal weights, unit/zero normalization affines,
    /// temperature 1. Deterministic in `seed`.
    static Backbone init(const BackboneConfig& config, std::uint64_t seed) {
        config.validate();
        std::mt19937_64 rng(seed);
        ParamSet<T> params;
        const double slope = config.leaky_slope;
        auto conv_weight = [&](std::size_t out, std::size_t in, std::size_t k) {
            const double fan_in = static_cast<double>(in * k * k);
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in)));
            Tensor<T> w(Shape{out, in, k, k});
            for (auto& v : w.vec()) v = static_cast<T>(dist(rng));
            return w;
        };
        std::size_t in = config.in_channels;
        for (std::size_t b = 0; b < config.blocks.size(); ++b) {
            const auto& spec = config.blocks[b];
            const std::string prefix = "block" + std::to_string(b) + "/";
            std::size_t cin = in;
            for (std::size_t j = 0; j < spec.convs; ++j) {
                const std::string conv = prefix + "conv" + std::to_string(j);
                params.add(conv + "/weight", conv_weight(spec.filters, cin, spec.kernel), true);
                params.add(conv + "/bn_gamma", Tensor<T>(Shape{spec.filters}, T{1}), false);
                params.add(conv + "/bn_beta", Tensor<T>(Shape{spec.filters}, T{0}), false);
                cin = spec.filters;
            }
            if (in != spec.filters) {
                params.add(prefix + "shortcut/weight", conv_weight(spec.filters, in, 1), true);
                params.add(prefix + "shortcut/bn_gamma", Tensor<T>(Shape{spec.filters}, T{1}), false);
                params.add(prefix + "shortcut/bn_beta", Tensor<T>(Shape{spec.filters}, T{0}), false);
            }
            in = spec.filters;
        }
        params.add(kTemperatureName, Tensor<T>::scalar(T{1}), false);
        return Backbone(config, std::move(params));
    }

    const BackboneConfig& config() const { return config_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    const Var<T>& temperature() const { return params_.get(kTemperatureName); }

    std::size_t output_side() const { return config_.output_side(); }
    std::size_t feature_dim() const { return config_.feature_dim(); }

    /// Spatial feature maps of an N×C×S×S batch, shaped N×h×w×d, recorded
    /// for differentiation when the parameters require gradients.
    Var<T> forward(const Var<T>& images) const {
        const Shape& s = images->shape();
        if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.input_size || s[3] != config_.input_size) {
            throw ContractError("backbone expects N×" + std::to_string(config_.in_channels) + "×" +
                                std::to_string(config_.input_size) + "×" + std::to_string(config_.input_size) +
                                " images, got " + shape_str(s));
        }
        const T slope = static_cast<T>(config_.leaky_slope);
        Var<T> x = images;
        std::size_t in = config_.in_channels;
        for (std::size_t b = 0; b < config_.blocks.size(); ++b) {
            const auto& spec = config_.blocks[b];
            const std::string prefix = "block" + std::to_string(b) + "/";
            Var<T> block_in = x;
            for (std::size_t j = 0; j < spec.convs; ++j) {
                const std::string conv = prefix + "conv" + std::to_string(j);
                x = conv2d(x, params_.get(conv + "/weight"));
                x = batch_norm(x, params_.get(conv + "/bn_gamma"), params_.get(conv + "/bn_beta"));
                if (j + 1 < spec.convs) x = leaky_relu(x, slope);
            }
            Var<T> shortcut = block_in;
            if (in != spec.filters) {
                shortcut = conv2d(block_in, params_.get(prefix + "shortcut/weight"));
                shortcut = batch_norm(shortcut, params_.get(prefix + "shortcut/bn_gamma"),
                                      params_.get(prefix + "shortcut/bn_beta"));
            }
            x = leaky_relu(add(x, shortcut), slope);
            x = max_pool2(x);
            in = spec.filters;
        }
        x = channels_last(x);
        if (config_.rescale) x = scale(x, static_cast<T>(1.0 / std::sqrt(static_cast<double>(feature_dim()))));
        return x;
    }

    Var<T> forward(const Tensor<T>& images) const { return forward(constant(images)); }

    /// Independent copy of the parameters.
    Backbone clone() const { return Backbone(config_, params_.clone()); }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        ini::Tree root;
        write_backbone_config(root, config_);
        auto& section = root.put_child("params", ini::Tree{});
        std::size_t i = 0;
        for (const auto& p : params_.items()) {
            const std::string file = "param_" + std::to_string(i++) + ".bin";
            save_blob(dir / file, p.var->value);
            section.put(ini::Tree::path_type(p.name, '|'), file);
        }
        ini::write_file(dir / "checkpoint.ini", root);
    }

    /// Loads a checkpoint directory written by save(). Parameter names and
    /// shapes must match the layout implied by the stored config.
    static Backbone load(const std::filesystem::path& dir) {
        const auto manifest = dir / "checkpoint.ini";
        if (!std::filesystem::exists(manifest)) throw ConfigError("missing checkpoint manifest " + manifest.string());
        ini::Tree root = ini::read_file(manifest);
        ini::SectionReader model(root, "model");
        BackboneConfig config = read_backbone_config(model);
        Backbone out = init(config, 0);
        auto params = root.get_child_optional("params");
        if (!params) throw ConfigError(manifest.string() + ": no [params] section");
        if (params->size() != out.params_.size()) {
            throw ConfigError(manifest.string() + ": expected " + std::to_string(out.params_.size()) +
                              " parameters, found " + std::to_string(params->size()));
        }
        for (auto& p : out.params_.items()) {
            auto file = params->get_optional<std::string>(ini::Tree::path_type(p.name, '|'));
            if (!file) throw ConfigError(manifest.string() + ": parameter '" + p.name + "' missing");
            Tensor<T> value = load_blob<T>(dir / *file);
            if (value.shape() != p.var->shape()) {
                throw ConfigError(manifest.string() + ": parameter '" + p.name + "' has shape " +
                                  shape_str(value.shape()) + ", expected " + shape_str(p.var->shape()));
            }
            p.var->value = std::move(value);
        }
        return out;
    }

private:
    BackboneConfig config_;
    ParamSet<T> params_;
};

}  // namespace espt
