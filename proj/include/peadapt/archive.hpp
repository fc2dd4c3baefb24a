#pragma once

// Named-array container used for pretrained weights and checkpoints.
//
// Layout (little-endian):
//   "PEADAPT1"
//   u32 n_meta,   then n_meta x (u32 len, key bytes, u32 len, value bytes)
//   u32 n_arrays, then n_arrays x (u32 len, name bytes, u8 dtype, u32 ndim,
//                                  ndim x i64 dims, raw values)
// dtype 0 = float32, 1 = float64.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "peadapt/core/autograd.hpp"
#include "peadapt/core/error.hpp"
#include "peadapt/core/strings.hpp"

namespace peadapt {

enum class DType : std::uint8_t { float32 = 0, float64 = 1 };

struct ArrayRecord {
    DType dtype = DType::float64;
    std::vector<std::int64_t> dims;
    std::vector<double> data;  // float32 values widen exactly

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

class NamedArrays {
public:
    std::map<std::string, std::string> metadata;

    template <typename S>
    void put(const std::string& name, const Matrix<S>& m) {
        ArrayRecord r;
        r.dtype = sizeof(S) == 4 ? DType::float32 : DType::float64;
        r.dims = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
        r.data.assign(m.data(), m.data() + m.size());
        put(name, std::move(r));
    }

    void put(const std::string& name, ArrayRecord r) {
        if (!arrays_.count(name)) {
            order_.push_back(name);
        }
        arrays_[name] = std::move(r);
    }

    bool contains(const std::string& name) const { return arrays_.count(name) != 0; }

    const ArrayRecord& at(const std::string& name) const {
        auto it = arrays_.find(name);
        if (it == arrays_.end()) {
            throw LookupError("container has no array named '" + name + "'");
        }
        return it->second;
    }

    /// Copies a stored array into a rows x cols matrix; element counts must match.
    template <typename S>
    Matrix<S> get(const std::string& name, Index rows, Index cols) const {
        const ArrayRecord& r = at(name);
        if (r.numel() != rows * cols) {
            throw ShapeError("array '" + name + "': expected " + dims_str(rows, cols) + ", got " +
                             std::to_string(r.numel()) + " elements");
        }
        Matrix<S> m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<S>(r.data[static_cast<std::size_t>(i)]);
        }
        return m;
    }

    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw IoError("cannot write container '" + path + "'");
        }
        out.write("PEADAPT1", 8);
        write_u32(out, static_cast<std::uint32_t>(metadata.size()));
        for (const auto& [k, v] : metadata) {
            write_str(out, k);
            write_str(out, v);
        }
        write_u32(out, static_cast<std::uint32_t>(order_.size()));
        for (const auto& name : order_) {
            const ArrayRecord& r = arrays_.at(name);
            write_str(out, name);
            const auto dt = static_cast<std::uint8_t>(r.dtype);
            out.write(reinterpret_cast<const char*>(&dt), 1);
            write_u32(out, static_cast<std::uint32_t>(r.dims.size()));
            for (auto d : r.dims) {
                out.write(reinterpret_cast<const char*>(&d), sizeof(d));
            }
            if (r.dtype == DType::float32) {
                std::vector<float> tmp(r.data.begin(), r.data.end());
                out.write(reinterpret_cast<const char*>(tmp.data()),
                          static_cast<std::streamsize>(tmp.size() * sizeof(float)));
            } else {
                out.write(reinterpret_cast<const char*>(r.data.data()),
                          static_cast<std::streamsize>(r.data.size() * sizeof(double)));
            }
        }
        if (!out) {
            throw IoError("failed while writing container '" + path + "'");
        }
    }

    static NamedArrays load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw IoError("cannot read container '" + path + "'");
        }
        char magic[8];
        in.read(magic, 8);
        if (!in || std::memcmp(magic, "PEADAPT1", 8) != 0) {
            throw IoError("'" + path + "' is not a named-array container");
        }
        NamedArrays c;
        const auto n_meta = read_u32(in, path);
        for (std::uint32_t i = 0; i < n_meta; ++i) {
            std::string k = read_str(in, path);
            c.metadata[k] = read_str(in, path);
        }
        const auto n = read_u32(in, path);
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = read_str(in, path);
            ArrayRecord r;
            std::uint8_t dt = 0;
            in.read(reinterpret_cast<char*>(&dt), 1);
            if (dt > 1) {
                throw IoError("array '" + name + "' in '" + path + "' has unknown dtype");
            }
            r.dtype = static_cast<DType>(dt);
            const auto ndim = read_u32(in, path);
            if (ndim > 8) {
                throw IoError("array '" + name + "' in '" + path + "' has implausible rank");
            }
            r.dims.resize(ndim);
            for (auto& d : r.dims) {
                in.read(reinterpret_cast<char*>(&d), sizeof(d));
                if (d < 0) {
                    throw IoError("array '" + name + "' has a negative dimension");
                }
            }
            const auto count = static_cast<std::size_t>(r.numel());
            if (r.dtype == DType::float32) {
                std::vector<float> tmp(count);
                in.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(count * sizeof(float)));
                r.data.assign(tmp.begin(), tmp.end());
            } else {
                r.data.resize(count);
                in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(count * sizeof(double)));
            }
            if (!in) {
                throw IoError("truncated container '" + path + "' while reading '" + name + "'");
            }
            c.put(name, std::move(r));
        }
        return c;
    }

private:
    static void write_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
    static void write_str(std::ofstream& out, const std::string& s) {
        write_u32(out, static_cast<std::uint32_t>(s.size()));
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    static std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        if (!in) {
            throw IoError("truncated container '" + path + "'");
        }
        return v;
    }
    static std::string read_str(std::ifstream& in, const std::string& path) {
        const auto n = read_u32(in, path);
        if (n > (1u << 24)) {
            throw IoError("implausible string length in '" + path + "'");
        }
        std::string s(n, '\0');
        in.read(s.data(), n);
        if (!in) {
            throw IoError("truncated container '" + path + "'");
        }
        return s;
    }

    std::map<std::string, ArrayRecord> arrays_;
    std::vector<std::string> order_;
};

/// Parses "source_name -> target_name" lines; '#' starts a comment.
inline std::map<std::string, std::string> load_name_mapping(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read name-mapping manifest '" + path + "'");
    }
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        if (trim(line).empty()) {
            continue;
        }
        const auto arrow = line.find("->");
        if (arrow == std::string::npos) {
            throw IngestionError("manifest '" + path + "' line " + std::to_string(lineno) + ": expected 'a -> b'");
        }
        out[trim(line.substr(0, arrow))] = trim(line.substr(arrow + 2));
    }
    return out;
}

inline void save_name_mapping(const std::string& path, const std::map<std::string, std::string>& mapping) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write name-mapping manifest '" + path + "'");
    }
    for (const auto& [src, dst] : mapping) {
        out << src << " -> " << dst << "\n";
    }
}

}  // namespace peadapt
