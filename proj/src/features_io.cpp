#include "prvr/features_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace prvr {

namespace {

constexpr char kMatrixMagic[4] = {'P', 'R', 'V', 'F'};
constexpr char kSectionMagic[4] = {'P', 'R', 'V', 'S'};

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian; big-endian hosts are unsupported");

void put_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t get_u32(std::istream& is, const std::string& path, const char* what) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) {
        throw IoError(path + ": truncated file while reading " + what);
    }
    return v;
}

void write_matrix_block(std::ostream& os, const Tensor& m, Dtype dtype) {
    if (m.rank() != 2) {
        throw std::invalid_argument("write_features: expected a matrix, got shape " +
                                    shape_str(m.shape()));
    }
    os.write(kMatrixMagic, 4);
    put_u32(os, static_cast<uint32_t>(dtype));
    put_u32(os, static_cast<uint32_t>(m.rows()));
    put_u32(os, static_cast<uint32_t>(m.cols()));
    if (dtype == Dtype::f32) {
        std::vector<float> buf(m.numel());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(m.data()[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        os.write(reinterpret_cast<const char*>(m.data().data()),
                 static_cast<std::streamsize>(m.numel() * sizeof(double)));
    }
}

Tensor read_matrix_block(std::istream& is, const std::string& path) {
    char magic[4];
    if (!is.read(magic, 4)) throw IoError(path + ": truncated file while reading magic");
    if (std::memcmp(magic, kMatrixMagic, 4) != 0) throw IoError(path + ": bad magic");
    uint32_t version = get_u32(is, path, "version");
    if (version != 1 && version != 2) {
        throw IoError(path + ": unsupported version " + std::to_string(version));
    }
    uint32_t rows = get_u32(is, path, "rows");
    uint32_t cols = get_u32(is, path, "cols");
    size_t n = static_cast<size_t>(rows) * cols;
    std::vector<double> data(n);
    if (version == 1) {
        std::vector<float> buf(n);
        if (!is.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(n * sizeof(float)))) {
            throw IoError(path + ": truncated payload, header declares " + std::to_string(rows) +
                          "x" + std::to_string(cols));
        }
        for (size_t i = 0; i < n; ++i) data[i] = static_cast<double>(buf[i]);
    } else {
        if (!is.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(n * sizeof(double)))) {
            throw IoError(path + ": truncated payload, header declares " + std::to_string(rows) +
                          "x" + std::to_string(cols));
        }
    }
    return Tensor::matrix(rows, cols, std::move(data));
}

}  // namespace

void write_features(const std::string& path, const Tensor& matrix) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(path + ": cannot open for writing");
    write_matrix_block(os, matrix, Dtype::f32);
    if (!os) throw IoError(path + ": write failed");
}

Tensor load_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path + ": cannot open");
    Tensor m = read_matrix_block(is, path);
    // A well-formed file ends exactly after the payload.
    char extra;
    if (is.read(&extra, 1)) throw IoError(path + ": trailing bytes after payload");
    return m;
}

void write_sections(const std::string& path, const Sections& sections, Dtype dtype) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(path + ": cannot open for writing");
    os.write(kSectionMagic, 4);
    put_u32(os, 1);
    put_u32(os, static_cast<uint32_t>(sections.size()));
    for (const auto& [name, tensor] : sections) {
        put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        Tensor m = tensor.rank() == 2 ? tensor
                                      : Tensor::matrix(1, tensor.numel(), tensor.data());
        write_matrix_block(os, m, dtype);
    }
    if (!os) throw IoError(path + ": write failed");
}

Sections load_sections(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path + ": cannot open");
    char magic[4];
    if (!is.read(magic, 4)) throw IoError(path + ": truncated file while reading magic");
    if (std::memcmp(magic, kSectionMagic, 4) != 0) throw IoError(path + ": bad magic");
    uint32_t version = get_u32(is, path, "container version");
    if (version != 1) throw IoError(path + ": unsupported container version");
    uint32_t count = get_u32(is, path, "section count");
    Sections out;
    out.reserve(count);
    for (uint32_t k = 0; k < count; ++k) {
        uint32_t len = get_u32(is, path, "section name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw IoError(path + ": truncated section name");
        out.emplace_back(std::move(name), read_matrix_block(is, path));
    }
    return out;
}

}  // namespace prvr
