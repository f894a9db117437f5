#pragma once
// JSON helpers shared by the checkpoint, dataset and report formats.
// nlohmann::json writes doubles in shortest round-trip form, so decimal
// encodings reload value-exactly.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mend/errors.hpp"
#include "mend/numkit.hpp"

namespace mend::io {

using json = nlohmann::json;

inline json to_json(const Vector& v) { return json(v.data()); }

inline json to_json(const Matrix& m) {
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Vector vector_from_json(const json& j) {
    if (!j.is_array()) throw DataError("expected a numeric array");
    return Vector(j.get<std::vector<double>>());
}

inline Matrix matrix_from_json(const json& j) {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != rows * cols) throw DataError("matrix data length does not match rows*cols");
    return Matrix(rows, cols, std::move(data));
}

// Reads a whole file; missing files are data errors.
inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

inline json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(what + ": " + e.what());
    }
}

// Checks the {"format", "version"} envelope every file carries.
inline void check_envelope(const json& j, const std::string& format, int version) {
    if (!j.is_object() || !j.contains("format") || j.at("format") != format) {
        throw DataError("expected a '" + format + "' file");
    }
    const int found = j.at("version").get<int>();
    if (found != version) {
        throw DataError(format + ": unsupported version " + std::to_string(found) + " (expected " +
                        std::to_string(version) + ")");
    }
}

}  // namespace mend::io
