#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protego/core.hpp"
#include "protego/face_world.hpp"

namespace protego::io {

using json = nlohmann::json;

/// Versioned binary array: 8-byte magic, u32 version, u32 rank, u64 dims,
/// then little-endian doubles.
struct Blob {
    std::uint32_t version = 0;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;
};

void write_blob(const std::filesystem::path& path, const char (&magic)[9], std::uint32_t version,
                const std::vector<std::uint64_t>& dims, std::span<const double> data);
Blob read_blob(const std::filesystem::path& path, const char (&magic)[9]);

void write_json(const std::filesystem::path& path, const json& doc);
json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// 8-bit PNG (gray or RGB). Values are rounded from [0,1].
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// UV map as 16-bit RGB PNG: R = u, G = v, B = mask (65535 on the face).
void write_uv_png(const std::filesystem::path& path, const UVMap& uv);
UVMap read_uv_png(const std::filesystem::path& path);

/// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

}  // namespace protego::io
