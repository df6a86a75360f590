#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace espt {

/// Malformed or invalid configuration / manifest contents.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace ini {

using Tree = boost::property_tree::ptree;

inline Tree read_file(const std::filesystem::path& path) {
    Tree t;
    try {
        boost::property_tree::read_ini(path.string(), t);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(e.what());
    }
    return t;
}

inline Tree read_string(const std::string& text) {
    Tree t;
    std::istringstream is(text);
    try {
        boost::property_tree::read_ini(is, t);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(e.what());
    }
    return t;
}

inline std::string write_string(const Tree& t) {
    std::ostringstream os;
    boost::property_tree::write_ini(os, t);
    return os.str();
}

inline void write_file(const std::filesystem::path& path, const Tree& t) {
    try {
        boost::property_tree::write_ini(path.string(), t);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(e.what());
    }
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

/// "[a, b, c]" or "a, b, c" -> {"a", "b", "c"}; "[]" -> {}.
inline std::vector<std::string> split_list(const std::string& raw) {
    std::string s = trim(raw);
    if (!s.empty() && s.front() == '[') {
        if (s.back() != ']') throw ConfigError("unterminated list: " + raw);
        s = s.substr(1, s.size() - 2);
    }
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) throw ConfigError("empty list element in: " + raw);
        out.push_back(item);
    }
    return out;
}

template <typename V>
V parse_value(const std::string& s, const std::string& key) {
    std::istringstream is(trim(s));
    V v{};
    if constexpr (std::is_same_v<V, bool>) {
        std::string t = trim(s);
        if (t == "true" || t == "1") return true;
        if (t == "false" || t == "0") return false;
        throw ConfigError("key '" + key + "': expected true/false, got '" + s + "'");
    } else {
        if (!(is >> v) || !(is >> std::ws).eof()) {
            throw ConfigError("key '" + key + "': cannot parse '" + s + "'");
        }
        if constexpr (std::is_unsigned_v<V>) {
            if (trim(s).starts_with("-")) throw ConfigError("key '" + key + "': must be non-negative");
        }
    }
    return v;
}

template <typename V>
std::vector<V> parse_list(const std::string& s, const std::string& key) {
    std::vector<V> out;
    for (const auto& item : split_list(s)) out.push_back(parse_value<V>(item, key));
    return out;
}

/// Shortest text that parses back to the same value.
template <typename V>
std::string format_value(const V& v) {
    if constexpr (std::is_same_v<V, bool>) {
        return v ? "true" : "false";
    } else if constexpr (std::is_arithmetic_v<V>) {
        std::array<char, 64> buf{};
        auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
        return std::string(buf.data(), end);
    } else {
        std::ostringstream os;
        os << v;
        return os.str();
    }
}

template <typename V>
std::string format_list(const std::vector<V>& values) {
    std::string out = "[";
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ", ";
        out += format_value(values[i]);
    }
    return out + "]";
}

/// Reads typed values out of one section, remembering which keys were
/// consumed so unknown keys can be rejected afterwards.
class SectionReader {
public:
    SectionReader(const Tree& root, std::string section) : name_(std::move(section)) {
        if (auto child = root.get_child_optional(name_)) tree_ = &*child;
    }

    bool present() const { return tree_ != nullptr; }

    bool has(const std::string& key) const { return tree_ && tree_->get_child_optional(key).has_value(); }

    template <typename V>
    V get(const std::string& key, V fallback) {
        used_.push_back(key);
        if (!has(key)) return fallback;
        return parse_value<V>(tree_->get<std::string>(key), name_ + "." + key);
    }

    std::string get_string(const std::string& key, std::string fallback) {
        used_.push_back(key);
        if (!has(key)) return fallback;
        return trim(tree_->get<std::string>(key));
    }

    template <typename V>
    std::vector<V> get_list(const std::string& key, std::vector<V> fallback) {
        used_.push_back(key);
        if (!has(key)) return fallback;
        return parse_list<V>(tree_->get<std::string>(key), name_ + "." + key);
    }

    void reject_unknown() const {
        if (!tree_) return;
        for (const auto& [key, _] : *tree_) {
            if (std::find(used_.begin(), used_.end(), key) == used_.end()) {
                throw ConfigError("unknown key '" + key + "' in section [" + name_ + "]");
            }
        }
    }

private:
    std::string name_;
    const Tree* tree_ = nullptr;
    std::vector<std::string> used_;
};

inline void reject_unknown_sections(const Tree& root, const std::vector<std::string>& known) {
    for (const auto& [key, child] : root) {
        if (child.empty() && !child.data().empty()) throw ConfigError("key '" + key + "' outside of any section");
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown section [" + key + "]");
        }
    }
}

}  // namespace ini
}  // namespace espt
