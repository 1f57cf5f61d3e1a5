#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "receler/core/tensor.hpp"

// Minimal .npy (format version 1.0) reader/writer for the dtypes the
// artifacts use: '<f8' (tensors), '<i8' (labels/ids), '|u1' (image bytes).

namespace receler::npy {

namespace detail {

inline std::string header_for(const Shape& shape, const char* descr) {
    std::ostringstream os;
    os << "{'descr': '" << descr << "', 'fortran_order': False, 'shape': (";
    if (shape.size() == 1) {
        os << shape[0] << ",";
    } else {
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    }
    os << "), }";
    std::string h = os.str();
    // pad with spaces so that 10 + len(header) + 1 is a multiple of 64
    const size_t base = 10 + h.size() + 1;
    const size_t pad = (64 - base % 64) % 64;
    h.append(pad, ' ');
    h.push_back('\n');
    return h;
}

inline void write_raw(const std::filesystem::path& path, const Shape& shape, const char* descr, const void* data,
                      size_t bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
    const std::string header = header_for(shape, descr);
    const uint16_t hlen = static_cast<uint16_t>(header.size());
    f.write("\x93NUMPY\x01\x00", 8);
    f.write(reinterpret_cast<const char*>(&hlen), 2);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

struct Header {
    std::string descr;
    Shape shape;
};

inline Header read_header(std::ifstream& f, const std::string& name) {
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "\x93NUMPY", 6) != 0)
        throw std::runtime_error("not a .npy file: " + name);
    uint16_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 2);
    std::string header(hlen, '\0');
    f.read(header.data(), hlen);
    if (!f) throw std::runtime_error("truncated .npy header: " + name);

    Header out;
    auto dpos = header.find("'descr':");
    auto q1 = header.find('\'', dpos + 8);
    auto q2 = header.find('\'', q1 + 1);
    out.descr = header.substr(q1 + 1, q2 - q1 - 1);
    if (header.find("'fortran_order': False") == std::string::npos)
        throw std::runtime_error("fortran-order .npy unsupported: " + name);
    auto spos = header.find("'shape':");
    auto p1 = header.find('(', spos);
    auto p2 = header.find(')', p1);
    std::string dims = header.substr(p1 + 1, p2 - p1 - 1);
    std::istringstream ds(dims);
    std::string tok;
    while (std::getline(ds, tok, ',')) {
        std::string trimmed;
        for (char c : tok)
            if (!std::isspace(static_cast<unsigned char>(c))) trimmed.push_back(c);
        if (!trimmed.empty()) out.shape.push_back(std::stoi(trimmed));
    }
    return out;
}

}  // namespace detail

inline void save(const std::filesystem::path& path, const Tensor& t) {
    detail::write_raw(path, t.shape(), "<f8", t.data(), t.size() * sizeof(double));
}

inline void save_i64(const std::filesystem::path& path, const Shape& shape, const std::vector<int64_t>& v) {
    if (v.size() != shape_numel(shape)) throw std::invalid_argument("save_i64: size mismatch");
    detail::write_raw(path, shape, "<i8", v.data(), v.size() * sizeof(int64_t));
}

inline void save_u8(const std::filesystem::path& path, const Shape& shape, const std::vector<uint8_t>& v) {
    if (v.size() != shape_numel(shape)) throw std::invalid_argument("save_u8: size mismatch");
    detail::write_raw(path, shape, "|u1", v.data(), v.size());
}

inline Tensor load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    auto h = detail::read_header(f, path.string());
    if (h.descr != "<f8") throw std::runtime_error("expected <f8 data in " + path.string() + ", got " + h.descr);
    Tensor t(h.shape);
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated .npy data: " + path.string());
    return t;
}

inline std::pair<Shape, std::vector<int64_t>> load_i64(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    auto h = detail::read_header(f, path.string());
    if (h.descr != "<i8") throw std::runtime_error("expected <i8 data in " + path.string());
    std::vector<int64_t> v(shape_numel(h.shape));
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(int64_t)));
    if (!f) throw std::runtime_error("truncated .npy data: " + path.string());
    return {h.shape, std::move(v)};
}

inline std::pair<Shape, std::vector<uint8_t>> load_u8(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    auto h = detail::read_header(f, path.string());
    if (h.descr != "|u1") throw std::runtime_error("expected |u1 data in " + path.string());
    std::vector<uint8_t> v(shape_numel(h.shape));
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size()));
    if (!f) throw std::runtime_error("truncated .npy data: " + path.string());
    return {h.shape, std::move(v)};
}

}  // namespace receler::npy
