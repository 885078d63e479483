#pragma once

// Binary file formats, all little-endian:
//
//   TSR1 tensor file: magic "TSR1", u32 rank, u64 extents[rank], f64 payload
//   (row-major).
//
//   MSK1 soft mask file: magic "MSK1", u32 count, then per mask u32 height,
//   u32 width, f32 sigmoid probabilities row-major.
//
//   MSKB thresholded mask file: magic "MSKB", u32 count, then per mask u32
//   height, u32 width, ceil(h*w/8) bytes of row-major bits, LSB first.

#include "deskvis/tensor.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace deskvis {

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_le<std::uint64_t>(os, bits);
}

inline double read_f64(std::istream& is) {
    const std::uint64_t bits = read_le<std::uint64_t>(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_le<std::uint32_t>(os, bits);
}

inline float read_f32(std::istream& is) {
    const std::uint32_t bits = read_le<std::uint32_t>(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void expect_magic(std::istream& is, const char* magic, const std::string& what) {
    char buf[4];
    is.read(buf, 4);
    if (!is || std::memcmp(buf, magic, 4) != 0)
        throw std::runtime_error(what + ": bad magic, expected " + magic);
}

// "tag key=value key=value ..." line used by the structured-text formats
inline std::map<std::string, std::string> parse_kv_line(const std::string& line, std::string* tag) {
    std::istringstream ss(line);
    std::string tok;
    std::map<std::string, std::string> kv;
    ss >> *tag;
    while (ss >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("manifest: malformed token '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    return kv;
}

inline std::vector<double> parse_csv(const std::string& s) {
    std::vector<double> out;
    std::istringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("TSR1", 4);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::write_le<std::uint64_t>(os, d);
    for (std::size_t i = 0; i < t.size(); ++i) detail::write_f64(os, t[i]);
}

inline Tensor read_tensor(std::istream& is) {
    detail::expect_magic(is, "TSR1", "read_tensor");
    const std::uint32_t rank = detail::read_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_le<std::uint64_t>(is);
    Tensor t{shape};
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = detail::read_f64(is);
    if (!is) throw std::runtime_error("read_tensor: truncated file");
    return t;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_tensor: cannot open " + path);
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_tensor: cannot open " + path);
    return read_tensor(is);
}

// Soft masks, each [h, w] of probabilities, stored as f32.
inline void write_masks(std::ostream& os, const std::vector<Tensor>& masks) {
    os.write("MSK1", 4);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(masks.size()));
    for (const Tensor& m : masks) {
        if (m.rank() != 2) throw std::invalid_argument("write_masks: masks must be rank 2");
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.dim(0)));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.dim(1)));
        for (std::size_t i = 0; i < m.size(); ++i) detail::write_f32(os, static_cast<float>(m[i]));
    }
}

inline std::vector<Tensor> read_masks(std::istream& is) {
    detail::expect_magic(is, "MSK1", "read_masks");
    const std::uint32_t count = detail::read_le<std::uint32_t>(is);
    std::vector<Tensor> masks;
    masks.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t h = detail::read_le<std::uint32_t>(is);
        const std::uint32_t w = detail::read_le<std::uint32_t>(is);
        Tensor m{Shape{h, w}};
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(detail::read_f32(is));
        masks.push_back(std::move(m));
    }
    if (!is) throw std::runtime_error("read_masks: truncated file");
    return masks;
}

inline void save_masks(const std::string& path, const std::vector<Tensor>& masks) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_masks: cannot open " + path);
    write_masks(os, masks);
}

inline std::vector<Tensor> load_masks(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_masks: cannot open " + path);
    return read_masks(is);
}

// Thresholded variant: probabilities >= 0.5 become set bits.
inline void write_masks_binary(std::ostream& os, const std::vector<Tensor>& masks, double threshold = 0.5) {
    os.write("MSKB", 4);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(masks.size()));
    for (const Tensor& m : masks) {
        if (m.rank() != 2) throw std::invalid_argument("write_masks_binary: masks must be rank 2");
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.dim(0)));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.dim(1)));
        const std::size_t nbytes = (m.size() + 7) / 8;
        std::vector<unsigned char> bits(nbytes, 0);
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i] >= threshold) bits[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
        os.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(nbytes));
    }
}

inline std::vector<Tensor> read_masks_binary(std::istream& is) {
    detail::expect_magic(is, "MSKB", "read_masks_binary");
    const std::uint32_t count = detail::read_le<std::uint32_t>(is);
    std::vector<Tensor> masks;
    masks.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t h = detail::read_le<std::uint32_t>(is);
        const std::uint32_t w = detail::read_le<std::uint32_t>(is);
        Tensor m{Shape{h, w}};
        const std::size_t nbytes = (m.size() + 7) / 8;
        std::vector<unsigned char> bits(nbytes);
        is.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(nbytes));
        for (std::size_t i = 0; i < m.size(); ++i)
            m[i] = (bits[i / 8] >> (i % 8)) & 1u ? 1.0 : 0.0;
        masks.push_back(std::move(m));
    }
    if (!is) throw std::runtime_error("read_masks_binary: truncated file");
    return masks;
}

}  // namespace deskvis
