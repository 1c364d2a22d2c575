// SPDX-License-Identifier: Apache-2.0
#include "vaflow/nn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace vaflow::nn {
namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore<float>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);

    os.write("FFCK", 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<uint32_t>(params.tensors.size()));
    uint64_t offset = 0;
    for (const auto& [name, m] : params.tensors) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(m.rows()));
        write_u32(os, static_cast<uint32_t>(m.cols()));
        os.put(static_cast<char>(kDtypeF32));
        write_u64(os, offset);
        offset += static_cast<uint64_t>(m.size()) * 4;
    }
    for (const auto& [name, m] : params.tensors) {
        (void)name;
        os.write(reinterpret_cast<const char*>(m.data()),
                 static_cast<std::streamsize>(m.size()) * 4);
    }
    if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
}

ParamStore<float> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FFCK", 4) != 0)
        throw std::runtime_error("bad checkpoint magic (want FFCK): " + path);
    uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 ": " + path);
    uint32_t count = read_u32(is);

    struct Entry {
        std::string name;
        uint32_t rows, cols;
        uint64_t offset;
    };
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        uint32_t len = read_u32(is);
        if (!is || len > 4096) throw std::runtime_error("corrupt checkpoint manifest: " + path);
        e.name.resize(len);
        is.read(e.name.data(), len);
        e.rows = read_u32(is);
        e.cols = read_u32(is);
        uint8_t dtype = static_cast<uint8_t>(is.get());
        if (dtype != kDtypeF32)
            throw std::runtime_error("unsupported tensor dtype in checkpoint: " + path);
        e.offset = read_u64(is);
    }
    std::streampos data_start = is.tellg();

    ParamStore<float> params;
    for (const auto& e : entries) {
        MatF m(e.rows, e.cols);
        is.seekg(data_start + static_cast<std::streamoff>(e.offset));
        is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size()) * 4);
        if (!is) throw std::runtime_error("truncated checkpoint data: " + path);
        if (!params.tensors.emplace(e.name, std::move(m)).second)
            throw std::runtime_error("duplicate tensor in checkpoint: " + e.name);
    }
    return params;
}

}  // namespace vaflow::nn
