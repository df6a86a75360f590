#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "espt/backbone.hpp"
#include "espt/episodes.hpp"
#include "espt/espt_loss.hpp"

namespace espt {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Independent stream id for item `index` under a master seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ull));
}

/// Worker count from ESPT_THREADS (default 1).
/// Hardware concurrency, capped by ESPT_THREADS when set.
inline std::size_t worker_threads() {
    const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("ESPT_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return std::min(hw, static_cast<std::size_t>(v));
    }
    return hw;
}

struct EpisodeShape {
    std::size_t way = 5, shot = 1, queries = 16;

    bool operator==(const EpisodeShape&) const = default;
};

struct EvalReport {
    std::size_t num_tasks = 0;
    std::vector<double> accuracies;
    double mean = 0.0;
    double ci95 = 0.0;
    EpisodeShape shape;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"num_tasks", num_tasks}, {"mean_accuracy", mean}, {"ci95", ci95}, {"way", shape.way},
                {"shot", shape.shot},     {"queries", shape.queries}, {"seed", seed}};
    }

    static std::string table_header() { return "way,shot,queries,num_tasks,seed,mean_acc,ci"; }

    std::string table_row() const {
        std::ostringstream os;
        os.precision(10);
        os << shape.way << ',' << shape.shot << ',' << shape.queries << ',' << num_tasks << ',' << seed << ',' << mean
           << ',' << ci95;
        return os.str();
    }
};

/// Mean and 95% half-width 1.96·s/√n, s with the n−1 denominator
/// (zero for fewer than two values).
inline std::pair<double, double> mean_and_ci95(const std::vector<double>& values) {
    if (values.empty()) return {0.0, 0.0};
    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= n;
    if (values.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    return {mean, 1.96 * sd / std::sqrt(n)};
}

inline EvalReport summarize(std::vector<double> accuracies, EpisodeShape shape, std::uint64_t seed) {
    EvalReport r;
    r.num_tasks = accuracies.size();
    std::tie(r.mean, r.ci95) = mean_and_ci95(accuracies);
    r.accuracies = std::move(accuracies);
    r.shape = shape;
    r.seed = seed;
    return r;
}

/// Predicted episode label per query: argmax of softmax(γ·logits) on the
/// untransformed branch.
template <typename T>
std::vector<std::size_t> predict(const Backbone<T>& model, const Episode& ep, double lambda_bar) {
    NoGradGuard no_grad;
    const Tensor<T> logits = episode_logits(model, ep, lambda_bar);
    const double gamma = static_cast<double>(model.temperature()->value[0]);
    const std::size_t q = logits.dim(0), n = logits.dim(1);
    std::vector<std::size_t> out(q);
    for (std::size_t i = 0; i < q; ++i) {
        std::vector<double> row(n);
        for (std::size_t c = 0; c < n; ++c) row[c] = static_cast<double>(logits[i * n + c]);
        auto p = predict_proba(row, gamma);
        out[i] = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    }
    return out;
}

inline double episode_accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Predictor: (const Episode&, std::mt19937_64& task_rng) -> labels.
using Predictor = std::function<std::vector<std::size_t>(const Episode&, std::mt19937_64&)>;

/// Accuracy over `num_tasks` episodes. Task i draws from its own stream
/// derive_seed(seed, i), so results do not depend on the worker count.
inline EvalReport evaluate_with(const Predictor& predictor, const Dataset& data, Split split, EpisodeShape shape,
                                std::size_t num_tasks, std::uint64_t seed, std::size_t threads = worker_threads()) {
    std::vector<double> acc(num_tasks, 0.0);
    // Surface sampler errors on the calling thread.
    if (num_tasks > 0) {
        std::mt19937_64 probe(derive_seed(seed, 0));
        (void)sample_episode(data, split, shape.way, shape.shot, shape.queries, probe);
    }
    auto work = [&](std::size_t worker, std::size_t stride) {
        for (std::size_t i = worker; i < num_tasks; i += stride) {
            std::mt19937_64 rng(derive_seed(seed, i));
            Episode ep = sample_episode(data, split, shape.way, shape.shot, shape.queries, rng);
            acc[i] = episode_accuracy(predictor(ep, rng), ep.query_labels);
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, num_tasks));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                try {
                    work(w, threads);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    return summarize(std::move(acc), shape, seed);
}

template <typename T>
EvalReport evaluate(const Backbone<T>& model, const Dataset& data, Split split, EpisodeShape shape,
                    std::size_t num_tasks, std::uint64_t seed, double lambda_bar,
                    std::size_t threads = worker_threads()) {
    Predictor p = [&](const Episode& ep, std::mt19937_64&) { return predict(model, ep, lambda_bar); };
    return evaluate_with(p, data, split, shape, num_tasks, seed, threads);
}

}  // namespace espt
