#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "espt/autograd.hpp"

namespace espt {

/// Nonempty set of quarter-turn counts drawn from {1, 2, 3} (90°, 180°, 270°).
class TransformSet {
public:
    TransformSet() : turns_{1, 2, 3} {}

    explicit TransformSet(std::vector<int> turns) : turns_(std::move(turns)) {
        if (turns_.empty()) throw ContractError("transform set must not be empty");
        std::sort(turns_.begin(), turns_.end());
        for (std::size_t i = 0; i < turns_.size(); ++i) {
            if (turns_[i] < 1 || turns_[i] > 3) {
                throw ContractError("transform set members must be 90, 180 or 270 degrees");
            }
            if (i > 0 && turns_[i] == turns_[i - 1]) throw ContractError("transform set members must be distinct");
        }
    }

    static TransformSet from_degrees(const std::vector<int>& degrees) {
        std::vector<int> turns;
        for (int d : degrees) {
            if (d % 90 != 0) throw ContractError("rotation " + std::to_string(d) + " is not a quarter turn");
            turns.push_back(d / 90);
        }
        return TransformSet(std::move(turns));
    }

    const std::vector<int>& turns() const { return turns_; }

    std::vector<int> degrees() const {
        std::vector<int> out;
        for (int t : turns_) out.push_back(90 * t);
        return out;
    }

    bool operator==(const TransformSet&) const = default;

private:
    std::vector<int> turns_;
};

/// One draw, uniform over the members of `u`.
template <typename Rng>
int sample_transform(const TransformSet& u, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, u.turns().size() - 1);
    return u.turns()[pick(rng)];
}

namespace detail {

inline int normalize_turns(int turns) { return ((turns % 4) + 4) % 4; }

// Source cell (r, c) that lands at (i, j) after `turns` counterclockwise
// quarter turns of an h×w grid.
inline std::pair<std::size_t, std::size_t> rotation_source(std::size_t i, std::size_t j, int turns, std::size_t h,
                                                           std::size_t w) {
    switch (turns) {
        case 1: return {j, w - 1 - i};
        case 2: return {h - 1 - i, w - 1 - j};
        case 3: return {h - 1 - j, i};
        default: return {i, j};
    }
}

// Rotates the (h, w) axes of a [outer, h, w, inner] layout.
template <typename T>
std::vector<T> rotate_grid(std::span<const T> src, std::size_t outer, std::size_t h, std::size_t w, std::size_t inner,
                           int turns, bool inverse = false) {
    turns = normalize_turns(turns);
    if ((turns == 1 || turns == 3) && h != w) {
        throw ContractError("quarter-turn rotation needs a square grid, got " + std::to_string(h) + "x" +
                            std::to_string(w));
    }
    std::vector<T> out(src.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                auto [r, c] = rotation_source(i, j, turns, h, w);
                const std::size_t dst_cell = (o * h + i) * w + j;
                const std::size_t src_cell = (o * h + r) * w + c;
                const std::size_t to = (inverse ? src_cell : dst_cell) * inner;
                const std::size_t from = (inverse ? dst_cell : src_cell) * inner;
                std::copy_n(src.begin() + from, inner, out.begin() + to);
            }
        }
    }
    return out;
}

}  // namespace detail

/// Counterclockwise quarter-turn rotation of the last two axes of a
/// C×S×S image or an N×C×S×S batch. Exact index permutation.
template <typename T>
Tensor<T> rotate_image(const Tensor<T>& image, int turns) {
    if (image.rank() < 2) throw ContractError("rotate_image: need at least two spatial axes");
    const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
    const std::size_t outer = image.numel() / (h * w);
    return Tensor<T>(image.shape(), detail::rotate_grid<T>(image.data(), outer, h, w, 1, turns));
}

/// Rotates the spatial grid of an H×W×D feature map (or N×H×W×D batch);
/// channel vectors move intact. The backward pass applies the inverse
/// permutation.
template <typename T>
Var<T> rotate_feature_map(const Var<T>& fmap, int turns) {
    const Shape& s = fmap->shape();
    if (s.size() != 3 && s.size() != 4) {
        throw ContractError("rotate_feature_map: expected H×W×D or N×H×W×D, got " + shape_str(s));
    }
    const std::size_t h = s[s.size() - 3], w = s[s.size() - 2], d = s.back();
    const std::size_t outer = fmap->numel() / (h * w * d);
    Tensor<T> out(s, detail::rotate_grid<T>(fmap->value.data(), outer, h, w, d, turns));
    return make_node<T>(std::move(out), {fmap}, [fmap, outer, h, w, d, turns](Node<T>& self) {
        auto back = detail::rotate_grid<T>(self.grad.data(), outer, h, w, d, turns, true);
        fmap->accumulate(back);
    }, "rotate_feature_map");
}

}  // namespace espt
