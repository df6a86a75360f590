#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace espt {

using Shape = std::vector<std::size_t>;

/// Thrown when a caller violates an operation's shape or argument contract.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of real scalars.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_dims();
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != shape_numel(shape_)) {
            throw ContractError("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    T item() const {
        if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ContractError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool operator==(const Tensor& other) const = default;

private:
    void check_dims() const {
        for (auto d : shape_) {
            if (d == 0) throw ContractError("tensor dimensions must be positive, got " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Blob file format: "ESPT" | u16 version | u8 rank | u32 dims[rank] | f64 values
// All integers and values are little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kBlobMagic[4] = {'E', 'S', 'P', 'T'};
inline constexpr std::uint16_t kBlobVersion = 1;

class BlobError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw BlobError("truncated tensor blob");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    U v;
    std::memcpy(&v, bytes, sizeof(U));
    return v;
}

}  // namespace detail

template <typename T>
void write_blob(std::ostream& os, const Tensor<T>& t) {
    if (t.rank() > 255) throw BlobError("tensor rank exceeds 255");
    os.write(kBlobMagic, 4);
    detail::write_le<std::uint16_t>(os, kBlobVersion);
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) {
        if (d > 0xffffffffu) throw BlobError("tensor dimension exceeds u32");
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    }
    for (auto v : t.data()) detail::write_le<double>(os, static_cast<double>(v));
}

template <typename T = double>
Tensor<T> read_blob(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kBlobMagic, 4) != 0) {
        throw BlobError("bad tensor blob magic");
    }
    auto version = detail::read_le<std::uint16_t>(is);
    if (version != kBlobVersion) throw BlobError("unsupported tensor blob version " + std::to_string(version));
    auto rank = detail::read_le<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) {
        d = detail::read_le<std::uint32_t>(is);
        if (d == 0) throw BlobError("tensor blob has a zero dimension");
    }
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(detail::read_le<double>(is));
    return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_blob(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw BlobError("cannot open " + path.string() + " for writing");
    write_blob(os, t);
    if (!os) throw BlobError("failed writing " + path.string());
}

template <typename T = double>
Tensor<T> load_blob(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw BlobError("missing tensor blob " + path.string());
    try {
        return read_blob<T>(is);
    } catch (const BlobError& e) {
        throw BlobError(path.string() + ": " + e.what());
    }
}

}  // namespace espt
