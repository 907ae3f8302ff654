#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mbn {

// Thrown for malformed configuration input; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

}  // namespace detail

// Flat `key = value` configuration with dotted keys. '#' starts a comment;
// blank lines are ignored; later assignments win.
class Config {
  public:
    static Config from_string(const std::string& text, const std::string& origin = "<string>") {
        Config cfg;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: " + origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + line + "'");
            const std::string key = detail::trim(line.substr(0, eq));
            const std::string value = detail::trim(line.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config: " + origin + ":" + std::to_string(lineno) +
                                  ": empty key");
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static Config from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot open " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return from_string(buf.str(), path);
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    // Apply a "key=value" override (the --set flag).
    void apply_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: override '" + assignment + "' is not key=value");
        const std::string key = detail::trim(assignment.substr(0, eq));
        const std::string value = detail::trim(assignment.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: override '" + assignment + "' has empty key");
        values_[key] = value;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_double(key, it->second);
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_u64(key, it->second);
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config: key '" + key + "': expected true/false, got '" + it->second +
                          "'");
    }

    // Comma-separated doubles, e.g. "0.4,0.6".
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<double> out;
        for (const auto& item : split_list(it->second)) out.push_back(parse_double(key, item));
        return out;
    }

    std::vector<std::size_t> get_size_list(const std::string& key,
                                           const std::vector<std::size_t>& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<std::size_t> out;
        for (const auto& item : split_list(it->second))
            out.push_back(static_cast<std::size_t>(parse_u64(key, item)));
        return out;
    }

    // Schedule syntax "0:0.1,0.4:0.5,0.6:0.9" -> (fraction, value) pairs.
    std::vector<std::pair<double, double>> get_schedule(
        const std::string& key, const std::vector<std::pair<double, double>>& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<std::pair<double, double>> out;
        for (const auto& item : split_list(it->second)) {
            const auto colon = item.find(':');
            if (colon == std::string::npos)
                throw ConfigError("config: key '" + key + "': schedule entry '" + item +
                                  "' is not fraction:value");
            out.emplace_back(parse_double(key, item.substr(0, colon)),
                             parse_double(key, item.substr(colon + 1)));
        }
        return out;
    }

    // Reject keys outside the allowed set; catches typos before they
    // silently fall back to defaults.
    void require_known_keys(const std::set<std::string>& known) const {
        for (const auto& [key, value] : values_)
            if (!known.count(key))
                throw ConfigError("config: unknown key '" + key + "'");
    }

    // Canonical serialized form: sorted keys, one per line. Feeding the
    // output back through from_string reproduces the configuration.
    std::string resolved() const {
        std::ostringstream os;
        for (const auto& [key, value] : values_) os << key << " = " << value << "\n";
        return os.str();
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

  private:
    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> out;
        std::string item;
        std::istringstream ss(s);
        while (std::getline(ss, item, ',')) {
            item = detail::trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    static double parse_double(const std::string& key, const std::string& value) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("trailing junk");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "': bad number '" + value + "'");
        }
    }

    static std::uint64_t parse_u64(const std::string& key, const std::string& value) {
        try {
            std::size_t pos = 0;
            const unsigned long long v = std::stoull(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("trailing junk");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "': bad integer '" + value + "'");
        }
    }

    std::map<std::string, std::string> values_;
};

}  // namespace mbn
