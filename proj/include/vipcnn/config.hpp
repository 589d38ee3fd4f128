#pragma once

// key = value configuration with environment overrides. Every value read
// through a getter is recorded so the fully resolved configuration can be
// written next to a run's outputs.
//
// Environment: VIPCNN_<KEY> overrides <key>, where the key is matched with
// '.' and '-' read as '_' and case ignored (VIPCNN_TRAIN_LR -> train.lr).

#include <vipcnn/errors.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

namespace vipcnn {

class Config {
public:
    static constexpr const char* kEnvPrefix = "VIPCNN_";

    static Config parse(std::istream& is, const std::string& origin = "config")
    {
        Config c;
        std::string line;
        std::size_t no = 0;
        while (std::getline(is, line)) {
            ++no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) throw ParseError(origin + ": expected key = value", no);
            const auto key = trim(t.substr(0, eq));
            if (key.empty()) throw ParseError(origin + ": empty key", no);
            if (c.file_.count(key)) throw ParseError(origin + ": duplicate key " + key, no);
            c.file_[key] = trim(t.substr(eq + 1));
        }
        return c;
    }

    static Config load(const std::string& path)
    {
        std::ifstream f(path);
        if (!f) throw InputError("cannot read config " + path);
        return parse(f, path);
    }

    // Explicit values (e.g. from command-line flags) beat the file and the
    // environment.
    void set(const std::string& key, const std::string& value) { explicit_[key] = value; }

    void apply_env(char** env = environ)
    {
        const std::string prefix = kEnvPrefix;
        for (char** e = env; e && *e; ++e) {
            const std::string kv = *e;
            if (kv.compare(0, prefix.size(), prefix) != 0) continue;
            const auto eq = kv.find('=');
            if (eq == std::string::npos) continue;
            env_[fold(kv.substr(prefix.size(), eq - prefix.size()))] = kv.substr(eq + 1);
        }
    }

    bool has(const std::string& key) const { return raw(key).has_value(); }

    std::string get_string(const std::string& key, const std::string& def)
    {
        const auto v = raw(key).value_or(def);
        resolved_[key] = v;
        return v;
    }

    double get_double(const std::string& key, double def)
    {
        const auto r = raw(key);
        const double v = r ? to_double(key, *r) : def;
        resolved_[key] = format(v);
        return v;
    }

    std::int64_t get_int(const std::string& key, std::int64_t def)
    {
        const auto r = raw(key);
        const std::int64_t v = r ? to_int(key, *r) : def;
        resolved_[key] = std::to_string(v);
        return v;
    }

    std::size_t get_size(const std::string& key, std::size_t def)
    {
        const auto v = get_int(key, std::int64_t(def));
        if (v < 0) throw ConfigError(key + " must be non-negative");
        return std::size_t(v);
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t def)
    {
        const auto r = raw(key);
        std::uint64_t v = def;
        if (r) {
            auto [p, ec] = std::from_chars(r->data(), r->data() + r->size(), v);
            if (ec != std::errc() || p != r->data() + r->size()) throw ConfigError(key + ": not an unsigned integer: " + *r);
        }
        resolved_[key] = std::to_string(v);
        return v;
    }

    bool get_bool(const std::string& key, bool def)
    {
        const auto r = raw(key);
        bool v = def;
        if (r) {
            std::string s = *r;
            std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
            if (s == "true" || s == "1" || s == "yes" || s == "on") v = true;
            else if (s == "false" || s == "0" || s == "no" || s == "off") v = false;
            else throw ConfigError(key + ": not a boolean: " + *r);
        }
        resolved_[key] = v ? "true" : "false";
        return v;
    }

    // Comma-separated list.
    std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& def)
    {
        const auto r = raw(key);
        std::vector<std::size_t> v = def;
        if (r) {
            v.clear();
            for (const auto& item : split_list(*r)) {
                const auto x = to_int(key, item);
                if (x < 0) throw ConfigError(key + ": negative entry " + item);
                v.push_back(std::size_t(x));
            }
        }
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        resolved_[key] = s;
        return v;
    }

    std::vector<double> get_doubles(const std::string& key, const std::vector<double>& def)
    {
        const auto r = raw(key);
        std::vector<double> v = def;
        if (r) {
            v.clear();
            for (const auto& item : split_list(*r)) v.push_back(to_double(key, item));
        }
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format(v[i]);
        resolved_[key] = s;
        return v;
    }

    std::vector<std::string> get_strings(const std::string& key, const std::vector<std::string>& def)
    {
        const auto r = raw(key);
        std::vector<std::string> v = r ? split_list(*r) : def;
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
        resolved_[key] = s;
        return v;
    }

    // "none" (or empty) maps to nullopt.
    std::optional<std::size_t> get_optional_size(const std::string& key, std::optional<std::size_t> def)
    {
        const auto r = raw(key);
        std::optional<std::size_t> v = def;
        if (r) {
            if (r->empty() || *r == "none") v.reset();
            else {
                const auto x = to_int(key, *r);
                if (x < 0) throw ConfigError(key + " must be non-negative or none");
                v = std::size_t(x);
            }
        }
        resolved_[key] = v ? std::to_string(*v) : "none";
        return v;
    }

    // Keys present in the file but never read; typically typos.
    std::vector<std::string> unused() const
    {
        std::vector<std::string> out;
        for (const auto& [k, v] : file_)
            if (!resolved_.count(k)) out.push_back(k);
        return out;
    }

    const std::map<std::string, std::string>& resolved() const { return resolved_; }

    void write_resolved(std::ostream& os) const
    {
        for (const auto& [k, v] : resolved_) os << k << " = " << v << '\n';
    }

    void write_resolved(const std::string& path) const
    {
        std::ofstream f(path);
        if (!f) throw InputError("cannot write " + path);
        write_resolved(f);
    }

private:
    std::optional<std::string> raw(const std::string& key) const
    {
        if (auto it = explicit_.find(key); it != explicit_.end()) return it->second;
        if (auto it = env_.find(fold(key)); it != env_.end()) return it->second;
        if (auto it = file_.find(key); it != file_.end()) return it->second;
        return std::nullopt;
    }

    static std::string fold(std::string k)
    {
        for (auto& c : k) c = (c == '.' || c == '-') ? '_' : char(std::tolower(static_cast<unsigned char>(c)));
        return k;
    }

    static std::string trim(const std::string& s)
    {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::string> split_list(const std::string& s)
    {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    static double to_double(const std::string& key, const std::string& s)
    {
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError(key + ": not a number: " + s);
        }
    }

    static std::int64_t to_int(const std::string& key, const std::string& s)
    {
        std::int64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": not an integer: " + s);
        return v;
    }

    static std::string format(double v)
    {
        char buf[64];
        auto r = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, r.ptr);
    }

    std::map<std::string, std::string> file_, env_, explicit_, resolved_;
};

} // namespace vipcnn
