#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "decrop/tensor.hpp"

namespace decrop {

using json = nlohmann::json;

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kContainerVersion = 1;

namespace detail {

inline bool host_little_endian() { return std::endian::native == std::endian::little; }

inline void swap_f32_bytes(std::vector<char>& buf) {
    for (size_t i = 0; i + 3 < buf.size(); i += 4) {
        std::swap(buf[i], buf[i + 3]);
        std::swap(buf[i + 1], buf[i + 2]);
    }
}

} // namespace detail

// On-disk tensor container: one-line UTF-8 JSON header terminated by '\n',
// then raw little-endian float32 payloads at the header-declared offsets
// (relative to the end of the header line).
inline void save_tensors(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, TensorData>>& blocks,
                         const json& meta = json::object()) {
    json header;
    header["format_version"] = kContainerVersion;
    header["dtype"] = "f32";
    header["meta"] = meta;
    json jblocks = json::array();
    int64_t offset = 0;
    std::map<std::string, int> seen;
    for (const auto& [name, t] : blocks) {
        if (seen[name]++) throw std::invalid_argument("save_tensors: duplicate block name " + name);
        json jb;
        jb["name"] = name;
        jb["shape"] = t.shape;
        jb["offset"] = offset;
        jb["nbytes"] = t.size() * 4;
        jblocks.push_back(jb);
        offset += t.size() * 4;
    }
    header["blocks"] = jblocks;
    header["payload_bytes"] = offset;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("save_tensors: cannot open " + path.string());
    f << header.dump() << '\n';
    for (const auto& [name, t] : blocks) {
        (void)name;
        std::vector<char> buf(t.v.size() * 4);
        std::memcpy(buf.data(), t.v.data(), buf.size());
        if (!detail::host_little_endian()) detail::swap_f32_bytes(buf);
        f.write(buf.data(), std::streamsize(buf.size()));
    }
    if (!f) throw FormatError("save_tensors: write failed for " + path.string());
}

struct TensorContainer {
    std::vector<std::pair<std::string, TensorData>> blocks;
    json meta;

    const TensorData& get(const std::string& name) const {
        for (const auto& [n, t] : blocks)
            if (n == name) return t;
        throw FormatError("container: missing block " + name);
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : blocks)
            if (n == name) return true;
        return false;
    }
};

inline TensorContainer load_tensors(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("load_tensors: cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw FormatError("load_tensors: missing header in " + path.string());
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw FormatError("load_tensors: bad header JSON: " + std::string(e.what()));
    }
    if (header.value("format_version", -1) != kContainerVersion)
        throw FormatError("load_tensors: unsupported format_version");
    if (header.value("dtype", "") != "f32") throw FormatError("load_tensors: unsupported dtype");

    int64_t payload_bytes = header.at("payload_bytes").get<int64_t>();
    std::streamoff payload_start = f.tellg();
    f.seekg(0, std::ios::end);
    std::streamoff file_end = f.tellg();
    if (file_end - payload_start != payload_bytes)
        throw FormatError("load_tensors: payload length mismatch (header says " + std::to_string(payload_bytes) +
                          ", file has " + std::to_string(int64_t(file_end - payload_start)) + ")");

    TensorContainer out;
    out.meta = header.value("meta", json::object());
    for (const auto& jb : header.at("blocks")) {
        Shape shape = jb.at("shape").get<Shape>();
        int64_t offset = jb.at("offset").get<int64_t>();
        int64_t nbytes = jb.at("nbytes").get<int64_t>();
        if (nbytes != numel(shape) * 4) throw FormatError("load_tensors: block size disagrees with shape");
        if (offset < 0 || offset + nbytes > payload_bytes) throw FormatError("load_tensors: block out of bounds");
        f.seekg(payload_start + offset);
        std::vector<char> buf(static_cast<size_t>(nbytes));
        f.read(buf.data(), nbytes);
        if (!f) throw FormatError("load_tensors: truncated payload");
        if (!detail::host_little_endian()) detail::swap_f32_bytes(buf);
        TensorData t = TensorData::zeros(shape);
        std::memcpy(t.v.data(), buf.data(), buf.size());
        out.blocks.emplace_back(jb.at("name").get<std::string>(), std::move(t));
    }
    return out;
}

} // namespace decrop
