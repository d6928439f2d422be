#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sla2/matrix.hpp"

// Binary tensor file format "RTEN1":
//   magic "RTEN1\0" | u32le rank | u32le dims[rank] | u8 dtype (0=f32, 1=f64) | raw le data
namespace sla2::rten {

inline constexpr char kMagic[6] = {'R', 'T', 'E', 'N', '1', '\0'};

template <class T>
constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "RTEN1 supports f32 and f64 only");
    return std::is_same_v<T, float> ? 0 : 1;
}

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <class T>
void write_payload(std::ostream& os, const std::vector<std::uint32_t>& dims, const T* data,
                   std::size_t count) {
    os.write(kMagic, sizeof(kMagic));
    write_u32(os, static_cast<std::uint32_t>(dims.size()));
    for (const std::uint32_t d : dims) write_u32(os, d);
    const std::uint8_t code = dtype_code<T>();
    os.write(reinterpret_cast<const char*>(&code), 1);
    // Little-endian host assumed (x86/aarch64); raw dump is the wire format.
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
}

template <class T>
std::vector<T> read_payload(std::istream& is, std::vector<std::uint32_t>& dims,
                            const std::string& path) {
    char magic[6];
    is.read(magic, 6);
    if (!is || std::memcmp(magic, kMagic, 6) != 0) {
        throw contract_error("RTEN1: bad magic in " + path);
    }
    const std::uint32_t rank = read_u32(is);
    dims.resize(rank);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        dims[i] = read_u32(is);
        count *= dims[i];
    }
    std::uint8_t code = 0;
    is.read(reinterpret_cast<char*>(&code), 1);
    if (code != dtype_code<T>()) {
        throw contract_error("RTEN1: dtype mismatch in " + path);
    }
    std::vector<T> data(count);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (!is) throw contract_error("RTEN1: truncated file " + path);
    return data;
}

}  // namespace detail

template <class T>
void save(const std::filesystem::path& path, const Matrix<T>& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw contract_error("RTEN1: cannot open for write: " + path.string());
    detail::write_payload(os, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
                          m.data().data(), m.size());
}

template <class T>
void save(const std::filesystem::path& path, const Vector<T>& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw contract_error("RTEN1: cannot open for write: " + path.string());
    detail::write_payload(os, {static_cast<std::uint32_t>(v.size())}, v.data().data(), v.size());
}

template <class T>
Matrix<T> load_matrix(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw contract_error("RTEN1: cannot open: " + path.string());
    std::vector<std::uint32_t> dims;
    std::vector<T> data = detail::read_payload<T>(is, dims, path.string());
    if (dims.size() != 2) throw contract_error("RTEN1: expected rank 2 in " + path.string());
    return Matrix<T>(dims[0], dims[1], std::move(data));
}

template <class T>
Vector<T> load_vector(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw contract_error("RTEN1: cannot open: " + path.string());
    std::vector<std::uint32_t> dims;
    std::vector<T> data = detail::read_payload<T>(is, dims, path.string());
    if (dims.size() != 1) throw contract_error("RTEN1: expected rank 1 in " + path.string());
    return Vector<T>(std::move(data));
}

}  // namespace sla2::rten
