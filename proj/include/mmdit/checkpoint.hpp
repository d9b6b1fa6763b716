#pragma once

// Binary checkpoint:
//   "MMDP" | u32 version | u32 n + n bytes of UTF-8 config JSON |
//   u32 tensor count | per tensor: u32 name length, name, u32 rank,
//   u32 dims[rank], f32 data (little endian).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdit/config.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/model.hpp"

namespace mmdit {

inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'D', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_bytes(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(b_.begin() + pos_, b_.begin() + pos_ + n);
        pos_ += n;
        return s;
    }
    float f32() {
        const std::uint32_t bits = u32("tensor data");
        return std::bit_cast<float>(bits);
    }
    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == b_.size(); }
    void need(std::size_t n, const char* what) const {
        if (b_.size() - pos_ < n)
            throw ParseError("checkpoint truncated in " + std::string(what) + " at byte " + std::to_string(pos_));
    }

private:
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> checkpoint_bytes(const ModelWeights& w) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_u32(out, kCheckpointVersion);
    detail::put_bytes(out, config_to_json(w.config).dump());
    std::uint32_t count = 0;
    for_each_tensor(w, [&](const std::string&, const Matrix&, unsigned) { ++count; });
    detail::put_u32(out, count);
    for_each_tensor(w, [&](const std::string& name, const Matrix& m, unsigned rank) {
        detail::put_bytes(out, name);
        detail::put_u32(out, rank);
        if (rank == 2) detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
        detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
        for (float v : m.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    });
    return out;
}

inline ModelWeights checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes);
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw ParseError("not a checkpoint (bad magic)");
    r.u32("magic");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
    ModelConfig cfg;
    try {
        cfg = config_from_json(nlohmann::json::parse(r.str("config")));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint config: ") + e.what());
    } catch (const InputError& e) {
        throw ParseError(std::string("checkpoint config: ") + e.what());
    }
    ModelWeights w = zero_weights<float>(cfg);
    std::uint32_t expected = 0;
    for_each_tensor(w, [&](const std::string&, const Matrix&, unsigned) { ++expected; });
    const std::uint32_t count = r.u32("tensor count");
    if (count != expected)
        throw ParseError("checkpoint has " + std::to_string(count) + " tensors, expected " + std::to_string(expected));
    for_each_tensor(w, [&](const std::string& name, Matrix& m, unsigned rank) {
        const std::string got = r.str("tensor name");
        if (got != name) throw ParseError("checkpoint tensor '" + got + "' where '" + name + "' was expected");
        const std::uint32_t rk = r.u32("rank");
        if (rk != rank) throw ParseError(name + ": rank " + std::to_string(rk) + " != " + std::to_string(rank));
        const std::size_t rows = rank == 2 ? r.u32("dims") : 1;
        const std::size_t cols = r.u32("dims");
        if (rows != m.rows() || cols != m.cols()) throw ParseError(name + ": shape does not match the config");
        r.need(4 * m.size(), name.c_str());
        for (auto& v : m.data()) {
            v = r.f32();
            if (!std::isfinite(v)) throw ParseError(name + ": non-finite value");
        }
    });
    if (!r.done()) throw ParseError("trailing bytes after the last tensor");
    return w;
}

inline void write_checkpoint(const ModelWeights& w, const std::string& path) {
    const auto bytes = checkpoint_bytes(w);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("failed writing '" + path + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ModelWeights read_checkpoint(const std::string& path) {
    try {
        return checkpoint_from_bytes(read_file_bytes(path));
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

}  // namespace mmdit
