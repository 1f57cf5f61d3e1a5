#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "receler/core/rng.hpp"

namespace receler {

using Json = nlohmann::ordered_json;

inline Json load_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    Json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("bad JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

inline void save_json(const std::filesystem::path& path, const Json& j) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing " + path.string());
    f << j.dump(2) << "\n";
}

inline std::string hex64(uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// Stable content hash of a JSON document (canonical compact dump).
inline std::string json_hash(const Json& j) { return hex64(fnv1a64(j.dump())); }

// Artifact directories carry a manifest.json describing their own layout.
// Loaders check `kind` before trusting anything else.
inline Json load_manifest(const std::filesystem::path& dir, const std::string& expected_kind) {
    const auto mpath = dir / "manifest.json";
    if (!std::filesystem::exists(mpath))
        throw std::runtime_error("no manifest.json under " + dir.string());
    Json m = load_json(mpath);
    const std::string kind = m.value("kind", "");
    if (kind != expected_kind)
        throw std::runtime_error(dir.string() + ": manifest kind is '" + kind + "', expected '" + expected_kind +
                                 "'");
    return m;
}

}  // namespace receler
