#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "espt/ini.hpp"
#include "espt/tensor.hpp"

namespace espt {

enum class Split : std::size_t { Train = 0, Val = 1, Test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SamplerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ClassRecord {
    std::string name;
    Tensor<double> images;  // samples × C × S × S

    std::size_t count() const { return images.dim(0); }
};

/// Labeled images grouped by class, with a disjoint train/val/test
/// partition of the class ids.
struct Dataset {
    std::string name = "dataset";
    std::size_t channels = 3;
    std::size_t side = 16;
    std::vector<ClassRecord> classes;
    std::array<std::vector<std::size_t>, 3> splits;

    const std::vector<std::size_t>& split(Split s) const { return splits[static_cast<std::size_t>(s)]; }

    std::size_t total_images() const {
        std::size_t n = 0;
        for (const auto& c : classes) n += c.count();
        return n;
    }

    void validate() const {
        std::vector<int> owner(classes.size(), -1);
        for (std::size_t s = 0; s < 3; ++s) {
            for (auto id : splits[s]) {
                if (id >= classes.size()) {
                    throw DatasetError("split " + std::string(split_name(Split(s))) + " names unknown class " +
                                       std::to_string(id));
                }
                if (owner[id] != -1) {
                    throw DatasetError("class " + std::to_string(id) + " (" + classes[id].name + ") appears in splits " +
                                       split_name(Split(owner[id])) + " and " + split_name(Split(s)));
                }
                owner[id] = static_cast<int>(s);
            }
        }
        for (std::size_t id = 0; id < classes.size(); ++id) {
            if (owner[id] == -1) throw DatasetError("class " + std::to_string(id) + " (" + classes[id].name + ") is in no split");
            const Shape expected{classes[id].count(), channels, side, side};
            if (classes[id].images.shape() != expected) {
                throw DatasetError("class " + std::to_string(id) + " (" + classes[id].name + ") has image tensor " +
                                   shape_str(classes[id].images.shape()) + ", expected " + shape_str(expected));
            }
        }
    }
};

/// One n-way k-shot task. Support and query are stored class-major:
/// the k (resp. l) samples of episode class 0 first, then class 1, ...
struct Episode {
    std::size_t way = 0, shot = 0, queries = 0;
    std::vector<std::size_t> class_ids;  // global ids, index = episode label
    Tensor<double> support;              // (n·k) × C × S × S
    Tensor<double> query;                // (n·l) × C × S × S
    std::vector<std::size_t> support_labels, query_labels;
    std::vector<std::size_t> support_samples, query_samples;  // indices within their class
};

namespace detail {

// First `count` entries of a uniform random permutation of [0, n).
template <typename Rng>
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(count);
    return idx;
}

}  // namespace detail

template <typename Rng>
Episode sample_episode(const Dataset& data, Split split, std::size_t n, std::size_t k, std::size_t l, Rng& rng) {
    if (n == 0 || k == 0 || l == 0) throw SamplerError("episode shape must be positive");
    const auto& pool = data.split(split);
    if (pool.size() < n) {
        throw SamplerError(std::string("split ") + split_name(split) + " has " + std::to_string(pool.size()) +
                           " classes, need " + std::to_string(n) + " (short by " + std::to_string(n - pool.size()) + ")");
    }
    for (auto id : pool) {
        const auto have = data.classes[id].count();
        if (have < k + l) {
            throw SamplerError("class " + std::to_string(id) + " (" + data.classes[id].name + ") has " +
                               std::to_string(have) + " samples, need k + l = " + std::to_string(k + l) +
                               " (short by " + std::to_string(k + l - have) + ")");
        }
    }

    Episode ep;
    ep.way = n;
    ep.shot = k;
    ep.queries = l;
    const std::size_t per_image = data.channels * data.side * data.side;
    std::vector<double> support, query;
    support.reserve(n * k * per_image);
    query.reserve(n * l * per_image);

    for (auto pos : detail::sample_without_replacement(pool.size(), n, rng)) ep.class_ids.push_back(pool[pos]);
    for (std::size_t label = 0; label < n; ++label) {
        const auto& cls = data.classes[ep.class_ids[label]];
        auto picks = detail::sample_without_replacement(cls.count(), k + l, rng);
        for (std::size_t j = 0; j < k + l; ++j) {
            const auto first = cls.images.vec().begin() + static_cast<std::ptrdiff_t>(picks[j] * per_image);
            if (j < k) {
                support.insert(support.end(), first, first + static_cast<std::ptrdiff_t>(per_image));
                ep.support_labels.push_back(label);
                ep.support_samples.push_back(picks[j]);
            } else {
                query.insert(query.end(), first, first + static_cast<std::ptrdiff_t>(per_image));
                ep.query_labels.push_back(label);
                ep.query_samples.push_back(picks[j]);
            }
        }
    }
    ep.support = Tensor<double>(Shape{n * k, data.channels, data.side, data.side}, std::move(support));
    ep.query = Tensor<double>(Shape{n * l, data.channels, data.side, data.side}, std::move(query));
    return ep;
}

// ---------------------------------------------------------------------------
// Synthetic pattern data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    std::size_t num_classes = 8;
    std::size_t samples_per_class = 40;
    std::size_t image_side = 16;
    std::size_t channels = 3;
    std::uint64_t seed = 0;
    double train_fraction = 0.5;
    double val_fraction = 0.25;

    void validate() const {
        if (num_classes == 0 || samples_per_class == 0 || channels == 0) {
            throw ConfigError("synthetic spec counts must be positive");
        }
        if (image_side < 4) throw ConfigError("synthetic image side must be at least 4");
        if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1.0) {
            throw ConfigError("synthetic split fractions must be non-negative and sum to at most 1");
        }
    }
};

inline constexpr std::size_t kShapeFamilies = 8;
inline constexpr std::size_t kTextureFamilies = 4;

namespace detail {

// Signed membership test for shape family `shape` at offset (dx, dy) from
// the center, in units of the shape radius.
inline bool inside_shape(std::size_t shape, double dx, double dy) {
    const double r = std::sqrt(dx * dx + dy * dy);
    switch (shape) {
        case 0: return r <= 1.0;                                               // disk
        case 1: return std::abs(dx) <= 0.85 && std::abs(dy) <= 0.85;            // square
        case 2: return dy <= 0.8 && dy >= -0.9 + 2.0 * std::abs(dx);            // triangle
        case 3: return std::abs(dx) <= 0.3 || std::abs(dy) <= 0.3 ? r <= 1.0 : false;  // plus
        case 4: return r <= 1.0 && r >= 0.55;                                   // ring
        case 5: return std::abs(dy) <= 0.35 && std::abs(dx) <= 1.0;             // bar
        case 6: return std::abs(dx - dy) <= 0.45 && r <= 1.1;                   // diagonal band
        default: return (std::abs(dx - dy) <= 0.35 || std::abs(dx + dy) <= 0.35) && r <= 1.1;  // X
    }
}

inline double texture_gain(std::size_t texture, std::size_t x, std::size_t y, std::size_t period) {
    switch (texture) {
        case 0: return 1.0;
        case 1: return (y / period) % 2 == 0 ? 1.0 : 0.35;
        case 2: return (x / period) % 2 == 0 ? 1.0 : 0.35;
        default: return ((x / period) + (y / period)) % 2 == 0 ? 1.0 : 0.35;
    }
}

}  // namespace detail

/// Class c renders shape family c mod 8 with stroke texture
/// (c / 8 + c) mod 4, at a random position, size, color and noise level.
/// Classes are assigned to train/val/test contiguously by the fractions.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    Dataset data;
    data.name = "synthetic";
    data.channels = spec.channels;
    data.side = spec.image_side;
    const double side = static_cast<double>(spec.image_side);

    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        const std::size_t shape = c % kShapeFamilies;
        const std::size_t texture = (c / kShapeFamilies + c) % kTextureFamilies;
        Tensor<double> images(Shape{spec.samples_per_class, spec.channels, spec.image_side, spec.image_side});
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            const double cx = side / 2.0 + (unit(rng) - 0.5) * side / 3.0;
            const double cy = side / 2.0 + (unit(rng) - 0.5) * side / 3.0;
            const double radius = side * (0.22 + 0.14 * unit(rng));
            const std::size_t period = 1 + static_cast<std::size_t>(unit(rng) * 2.0);
            const double background = 0.3 * unit(rng);
            const double sigma = 0.05 + 0.1 * unit(rng);
            std::vector<double> color(spec.channels);
            for (auto& v : color) v = 0.5 + 0.5 * unit(rng);
            for (std::size_t y = 0; y < spec.image_side; ++y) {
                for (std::size_t x = 0; x < spec.image_side; ++x) {
                    const double dx = (static_cast<double>(x) + 0.5 - cx) / radius;
                    const double dy = (static_cast<double>(y) + 0.5 - cy) / radius;
                    const bool in = detail::inside_shape(shape, dx, dy);
                    const double gain = in ? detail::texture_gain(texture, x, y, period) : 0.0;
                    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
                        const double v = in ? color[ch] * gain : background;
                        images[((s * spec.channels + ch) * spec.image_side + y) * spec.image_side + x] =
                            v + sigma * noise(rng);
                    }
                }
            }
        }
        data.classes.push_back({"pattern_" + std::to_string(c), std::move(images)});
    }

    const auto n = spec.num_classes;
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(n))));
    for (std::size_t c = 0; c < n; ++c) {
        Split s = c < n_train ? Split::Train : (c < n_train + n_val ? Split::Val : Split::Test);
        data.splits[static_cast<std::size_t>(s)].push_back(c);
    }
    data.validate();
    return data;
}

// ---------------------------------------------------------------------------
// On-disk form: an INI manifest plus one tensor blob per class.
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
    data.validate();
    std::filesystem::create_directories(dir);
    ini::Tree root;
    root.put("dataset.name", data.name);
    root.put("dataset.channels", data.channels);
    root.put("dataset.side", data.side);
    root.put("dataset.num_classes", data.classes.size());
    for (std::size_t c = 0; c < data.classes.size(); ++c) {
        const std::string section = "class_" + std::to_string(c);
        const std::string blob = section + ".bin";
        save_blob(dir / blob, data.classes[c].images);
        root.put(section + ".name", data.classes[c].name);
        root.put(section + ".blob", blob);
        root.put(section + ".samples", data.classes[c].count());
    }
    for (std::size_t s = 0; s < 3; ++s) {
        root.put(std::string("splits.") + split_name(Split(s)), ini::format_list(data.splits[s]));
    }
    ini::write_file(dir / "dataset.ini", root);
}

/// Reads a manifest and its blobs, validating every invariant.
inline Dataset load_dataset(const std::filesystem::path& manifest) {
    if (!std::filesystem::exists(manifest)) throw DatasetError("missing dataset manifest " + manifest.string());
    const auto dir = manifest.parent_path();
    ini::Tree root;
    try {
        root = ini::read_file(manifest);
    } catch (const ConfigError& e) {
        throw DatasetError(manifest.string() + ": " + e.what());
    }
    Dataset data;
    try {
        ini::SectionReader head(root, "dataset");
        if (!head.present()) throw DatasetError("no [dataset] section");
        data.name = head.get_string("name", "dataset");
        data.channels = head.get<std::size_t>("channels", 0);
        data.side = head.get<std::size_t>("side", 0);
        const auto num_classes = head.get<std::size_t>("num_classes", 0);
        head.reject_unknown();
        if (data.channels == 0 || data.side == 0 || num_classes == 0) {
            throw DatasetError("channels, side and num_classes must be positive");
        }
        for (std::size_t c = 0; c < num_classes; ++c) {
            const std::string section = "class_" + std::to_string(c);
            ini::SectionReader cls(root, section);
            if (!cls.present()) throw DatasetError("class " + std::to_string(c) + ": section [" + section + "] missing");
            const std::string name = cls.get_string("name", section);
            const std::string blob = cls.get_string("blob", "");
            const auto samples = cls.get<std::size_t>("samples", 0);
            cls.reject_unknown();
            if (blob.empty()) throw DatasetError("class " + std::to_string(c) + " (" + name + "): no blob path");
            Tensor<double> images;
            try {
                images = load_blob<double>(dir / blob);
            } catch (const BlobError& e) {
                throw DatasetError("class " + std::to_string(c) + " (" + name + "): " + e.what());
            }
            if (images.rank() != 4 || images.dim(0) != samples) {
                throw DatasetError("class " + std::to_string(c) + " (" + name + "): blob " + blob + " has shape " +
                                   shape_str(images.shape()) + " but manifest declares " + std::to_string(samples) +
                                   " samples");
            }
            data.classes.push_back({name, std::move(images)});
        }
        ini::SectionReader splits(root, "splits");
        for (std::size_t s = 0; s < 3; ++s) data.splits[s] = splits.get_list<std::size_t>(split_name(Split(s)), {});
        splits.reject_unknown();
        std::vector<std::string> known{"dataset", "splits"};
        for (std::size_t c = 0; c < num_classes; ++c) known.push_back("class_" + std::to_string(c));
        ini::reject_unknown_sections(root, known);
    } catch (const ConfigError& e) {
        throw DatasetError(manifest.string() + ": " + e.what());
    }
    try {
        data.validate();
    } catch (const DatasetError& e) {
        throw DatasetError(manifest.string() + ": " + e.what());
    }
    return data;
}

}  // namespace espt
