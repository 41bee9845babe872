#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sicnn {

/// MNIST-style IDX container for unsigned-byte tensors: big-endian int32
/// header fields, raw payload.
struct IdxImages {
    int count = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // count * height * width
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw std::runtime_error("idx: truncated header in " + path);
    }
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline IdxImages load_idx_images(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("idx: cannot open " + path);
    const std::uint32_t magic = detail::read_be32(in, path);
    if (magic != 0x00000803u) {
        throw std::runtime_error("idx: bad image magic in " + path);
    }
    IdxImages img;
    img.count = static_cast<int>(detail::read_be32(in, path));
    img.height = static_cast<int>(detail::read_be32(in, path));
    img.width = static_cast<int>(detail::read_be32(in, path));
    if (img.count <= 0 || img.height <= 0 || img.width <= 0) {
        throw std::runtime_error("idx: nonsense dimensions in " + path);
    }
    const std::size_t n =
        static_cast<std::size_t>(img.count) * img.height * img.width;
    img.pixels.resize(n);
    if (!in.read(reinterpret_cast<char*>(img.pixels.data()),
                 static_cast<std::streamsize>(n))) {
        throw std::runtime_error("idx: truncated pixel data in " + path);
    }
    return img;
}

inline std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("idx: cannot open " + path);
    const std::uint32_t magic = detail::read_be32(in, path);
    if (magic != 0x00000801u) {
        throw std::runtime_error("idx: bad label magic in " + path);
    }
    const int count = static_cast<int>(detail::read_be32(in, path));
    if (count <= 0) throw std::runtime_error("idx: nonsense count in " + path);
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(count));
    if (!in.read(reinterpret_cast<char*>(labels.data()), count)) {
        throw std::runtime_error("idx: truncated label data in " + path);
    }
    return labels;
}

inline void save_idx_images(const std::string& path, const IdxImages& img) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("idx: cannot write " + path);
    detail::write_be32(out, 0x00000803u);
    detail::write_be32(out, static_cast<std::uint32_t>(img.count));
    detail::write_be32(out, static_cast<std::uint32_t>(img.height));
    detail::write_be32(out, static_cast<std::uint32_t>(img.width));
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw std::runtime_error("idx: short write to " + path);
}

inline void save_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("idx: cannot write " + path);
    detail::write_be32(out, 0x00000801u);
    detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
    if (!out) throw std::runtime_error("idx: short write to " + path);
}

}  // namespace sicnn
