#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "espt/backbone.hpp"
#include "espt/episodes.hpp"
#include "espt/espt_loss.hpp"
#include "espt/evaluation.hpp"
#include "espt/optimizer.hpp"
#include "espt/transforms.hpp"

namespace espt {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PretrainConfig {
    std::size_t epochs = 0;
    std::size_t batch_size = 128;
    LrSchedule schedule{{{0, 0.1}}};

    bool operator==(const PretrainConfig&) const = default;
};

struct TrainConfig {
    BackboneConfig model = BackboneConfig::toy();
    EpisodeShape shape{5, 1, 16};
    TransformSet transforms;
    EsptHyperparams hyper;
    SgdConfig optim;
    std::size_t epochs = 0;
    std::size_t episodes_per_epoch = 100;
    std::size_t validation_every = 10;  // epochs; 0 disables validation
    std::size_t validation_tasks = 200;
    std::uint64_t seed = 0;
    PretrainConfig pretrain;

    bool operator==(const TrainConfig&) const = default;

    void validate() const {
        model.validate();
        hyper.validate();
        optim.schedule.validate();
        pretrain.schedule.validate();
        if (shape.way == 0 || shape.shot == 0 || shape.queries == 0) throw ConfigError("episode shape must be positive");
        if (optim.momentum < 0.0 || optim.weight_decay < 0.0) throw ConfigError("momentum and weight decay must be non-negative");
        if (pretrain.epochs > 0 && pretrain.batch_size == 0) throw ConfigError("pretrain batch size must be positive");
        const auto side = model.output_side();
        if (side == 0) throw ConfigError("backbone output is empty");
    }
};

/// Seed streams derived from the master seed.
enum class Stream : std::uint64_t { Init = 1, Episodes = 2, Transforms = 3, Validation = 4, Pretrain = 5, Test = 6 };

inline std::uint64_t stream_seed(std::uint64_t master, Stream s) {
    return derive_seed(master, static_cast<std::uint64_t>(s));
}

struct StepMetrics {
    double l_class = 0.0;
    double l_pretext = 0.0;
    double l_total = 0.0;
    double accuracy = 0.0;
};

template <typename T>
struct TrainState {
    Backbone<T> model;
    Sgd<T> optimizer;
    std::size_t epoch = 0;
    std::size_t iteration = 0;
    std::optional<Backbone<T>> best;
    double best_validation = -1.0;
};

/// One update on one episode with a fixed transform: two-branch forward,
/// L_total = L_class + α·L_pretext, backward, SGD step at rate `lr`.
template <typename T>
StepMetrics train_step(TrainState<T>& state, const Episode& ep, int turns, const EsptHyperparams& hyper, double lr) {
    auto& params = state.model.params();
    params.zero_grad();
    EsptLosses<T> losses = espt_losses(state.model, ep, turns, hyper);

    StepMetrics m;
    m.l_class = static_cast<double>(losses.classification->value[0]);
    m.l_pretext = static_cast<double>(losses.pretext->value[0]);
    m.l_total = static_cast<double>(losses.total->value[0]);
    if (!std::isfinite(m.l_class) || !std::isfinite(m.l_pretext) || !std::isfinite(m.l_total)) {
        std::ostringstream os;
        os << "non-finite loss at iteration " << state.iteration << ": L_class=" << m.l_class
           << " L_pretext=" << m.l_pretext << " L_total=" << m.l_total
           << " gamma=" << static_cast<double>(state.model.temperature()->value[0]);
        throw TrainingError(os.str());
    }

    const auto& logits = losses.logits->value;
    const std::size_t q = logits.dim(0), n = logits.dim(1);
    const double gamma = static_cast<double>(state.model.temperature()->value[0]);
    std::vector<std::size_t> predicted(q);
    for (std::size_t i = 0; i < q; ++i) {
        std::vector<double> row(n);
        for (std::size_t c = 0; c < n; ++c) row[c] = static_cast<double>(logits[i * n + c]);
        auto p = predict_proba(row, gamma);
        predicted[i] = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    }
    m.accuracy = episode_accuracy(predicted, ep.query_labels);

    backward(losses.total);
    state.optimizer.step(params, lr);
    ++state.iteration;
    return m;
}

/// Mini-batch cross-entropy over all base classes with a linear head on
/// spatially averaged features; the head is discarded afterwards.
template <typename T>
Backbone<T> pretrain(const TrainConfig& config, const Dataset& data, Backbone<T> model,
                     std::vector<double>* batch_losses = nullptr) {
    const auto& base = data.split(Split::Train);
    if (config.pretrain.epochs == 0) return model;
    if (base.empty()) throw TrainingError("pretraining needs a nonempty train split");

    const std::size_t d = model.feature_dim();
    const std::size_t hw = model.output_side() * model.output_side();
    const std::size_t num_classes = base.size();
    std::mt19937_64 rng(stream_seed(config.seed, Stream::Pretrain));
    std::normal_distribution<double> init(0.0, 0.01);

    ParamSet<T> head;
    Tensor<T> w(Shape{d, num_classes});
    for (auto& v : w.vec()) v = static_cast<T>(init(rng));
    head.add("head/weight", std::move(w), true);
    head.add("head/bias", Tensor<T>(Shape{num_classes}), false);

    std::vector<std::pair<std::size_t, std::size_t>> samples;  // (label, index)
    for (std::size_t label = 0; label < num_classes; ++label)
        for (std::size_t i = 0; i < data.classes[base[label]].count(); ++i) samples.emplace_back(label, i);

    SgdConfig opt_config = config.optim;
    opt_config.schedule = config.pretrain.schedule;
    Sgd<T> opt_model(opt_config), opt_head(opt_config);
    const std::size_t per_image = data.channels * data.side * data.side;

    for (std::size_t epoch = 0; epoch < config.pretrain.epochs; ++epoch) {
        std::shuffle(samples.begin(), samples.end(), rng);
        const double lr = config.pretrain.schedule.rate(epoch);
        for (std::size_t start = 0; start < samples.size(); start += config.pretrain.batch_size) {
            const std::size_t end = std::min(samples.size(), start + config.pretrain.batch_size);
            const std::size_t b = end - start;
            std::vector<T> pixels;
            pixels.reserve(b * per_image);
            std::vector<std::size_t> labels;
            for (std::size_t i = start; i < end; ++i) {
                const auto& img = data.classes[base[samples[i].first]].images.vec();
                const auto first = img.begin() + static_cast<std::ptrdiff_t>(samples[i].second * per_image);
                pixels.insert(pixels.end(), first, first + static_cast<std::ptrdiff_t>(per_image));
                labels.push_back(samples[i].first);
            }
            model.params().zero_grad();
            head.zero_grad();
            auto maps = model.forward(Tensor<T>(Shape{b, data.channels, data.side, data.side}, std::move(pixels)));
            Tensor<T> pool(Shape{b, b * hw});
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t p = 0; p < hw; ++p) pool[i * b * hw + i * hw + p] = static_cast<T>(1.0 / static_cast<double>(hw));
            auto features = matmul(constant(std::move(pool)), reshape(maps, Shape{b * hw, d}));
            auto logits = add_row_bias(matmul(features, head.get("head/weight")), head.get("head/bias"));
            auto loss = softmax_cross_entropy(logits, labels);
            const double value = static_cast<double>(loss->value[0]);
            if (!std::isfinite(value)) throw TrainingError("non-finite pretraining loss in epoch " + std::to_string(epoch));
            if (batch_losses) batch_losses->push_back(value);
            backward(loss);
            opt_model.step(model.params(), lr);
            opt_head.step(head, lr);
        }
    }
    return model;
}

struct TrainLogRecord {
    std::size_t iteration = 0;
    std::size_t epoch = 0;
    StepMetrics metrics;
    std::optional<double> validation_accuracy;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"iteration", iteration}, {"epoch", epoch},           {"L_class", metrics.l_class},
                            {"L_pretext", metrics.l_pretext}, {"L_total", metrics.l_total}, {"train_accuracy", metrics.accuracy}};
        if (validation_accuracy) j["validation_accuracy"] = *validation_accuracy;
        return j;
    }
};

template <typename T>
struct TrainResult {
    Backbone<T> best;    // highest validation accuracy, or the final model without validation
    Backbone<T> final_model;
    std::vector<TrainLogRecord> log;
    double best_validation = -1.0;
};

/// Episodic training loop with periodic validation and best-model selection.
/// `on_record` sees each log record as it is produced.
template <typename T>
TrainResult<T> train(const TrainConfig& config, const Dataset& data, std::optional<Backbone<T>> initial = std::nullopt,
                     const std::function<void(const TrainLogRecord&)>& on_record = {}) {
    config.validate();
    if (data.channels != config.model.in_channels || data.side != config.model.input_size) {
        throw TrainingError("dataset images are " + std::to_string(data.channels) + "×" + std::to_string(data.side) + "×" +
                            std::to_string(data.side) + " but the model expects " +
                            std::to_string(config.model.in_channels) + "×" + std::to_string(config.model.input_size) +
                            "×" + std::to_string(config.model.input_size));
    }
    const auto& shape = config.shape;
    std::mt19937_64 episode_rng(stream_seed(config.seed, Stream::Episodes));
    std::mt19937_64 transform_rng(stream_seed(config.seed, Stream::Transforms));
    const std::uint64_t validation_seed = stream_seed(config.seed, Stream::Validation);
    const bool validate_enabled = config.validation_every > 0 && config.validation_tasks > 0;

    if (config.epochs > 0) {
        std::mt19937_64 probe(0);
        (void)sample_episode(data, Split::Train, shape.way, shape.shot, shape.queries, probe);
        if (validate_enabled) (void)sample_episode(data, Split::Val, shape.way, shape.shot, shape.queries, probe);
    }

    TrainState<T> state;
    if (initial) {
        if (initial->config() != config.model) throw TrainingError("initial model config differs from the train config");
        state.model = initial->clone();
    } else {
        state.model = Backbone<T>::init(config.model, stream_seed(config.seed, Stream::Init));
        state.model = pretrain(config, data, std::move(state.model));
    }
    state.optimizer = Sgd<T>(config.optim);

    TrainResult<T> result;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        state.epoch = epoch;
        const double lr = config.optim.schedule.rate(epoch);
        for (std::size_t e = 0; e < config.episodes_per_epoch; ++e) {
            Episode ep = sample_episode(data, Split::Train, shape.way, shape.shot, shape.queries, episode_rng);
            const int turns = sample_transform(config.transforms, transform_rng);
            TrainLogRecord rec;
            rec.metrics = train_step(state, ep, turns, config.hyper, lr);
            rec.iteration = state.iteration;
            rec.epoch = epoch;
            const bool last_in_epoch = e + 1 == config.episodes_per_epoch;
            if (last_in_epoch && validate_enabled &&
                ((epoch + 1) % config.validation_every == 0 || epoch + 1 == config.epochs)) {
                auto report = evaluate(state.model, data, Split::Val, shape, config.validation_tasks, validation_seed,
                                       config.hyper.lambda_bar);
                rec.validation_accuracy = report.mean;
                if (report.mean > state.best_validation) {
                    state.best_validation = report.mean;
                    state.best = state.model.clone();
                }
            }
            if (on_record) on_record(rec);
            result.log.push_back(rec);
        }
    }
    result.final_model = state.model.clone();
    result.best = state.best ? std::move(*state.best) : state.model.clone();
    result.best_validation = state.best_validation;
    return result;
}

}  // namespace espt
