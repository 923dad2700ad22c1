#include "protego/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include <png.h>

namespace protego::io {
namespace fs = std::filesystem;

namespace {

template <typename T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const fs::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw FormatError("truncated file " + path.string());
    return v;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    if (!f) throw DependencyError("cannot open " + path.string());
    return f;
}

struct PngRows {
    int width = 0;
    int height = 0;
    int channels = 0;
    int bit_depth = 8;
    std::vector<std::uint16_t> samples;  // row-major interleaved
};

void write_png_rows(const fs::path& path, const PngRows& img) {
    auto file = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) throw Error("libpng initialisation failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng write failed for " + path.string());
    }
    png_init_io(png, file.get());
    const int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY
                      : img.channels == 3 ? PNG_COLOR_TYPE_RGB
                                          : PNG_COLOR_TYPE_RGBA;
    png_set_IHDR(png, info, img.width, img.height, img.bit_depth, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const int bytes = img.bit_depth / 8;
    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels * bytes);
    for (int r = 0; r < img.height; ++r) {
        for (int i = 0; i < img.width * img.channels; ++i) {
            const std::uint16_t s = img.samples[static_cast<std::size_t>(r) * img.width * img.channels + i];
            if (bytes == 1) {
                row[i] = static_cast<png_byte>(s);
            } else {
                row[2 * i] = static_cast<png_byte>(s >> 8);
                row[2 * i + 1] = static_cast<png_byte>(s & 0xFF);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

PngRows read_png_rows(const fs::path& path) {
    auto file = open_file(path, "rb");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError(path.string() + " is not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) throw Error("libpng initialisation failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("libpng read failed for " + path.string());
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (png_get_bit_depth(png, info) < 8) png_set_packing(png);
    png_read_update_info(png, info);

    PngRows img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = png_get_channels(png, info);
    img.bit_depth = png_get_bit_depth(png, info);
    const int bytes = img.bit_depth / 8;
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    img.samples.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    for (int r = 0; r < img.height; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (int i = 0; i < img.width * img.channels; ++i) {
            const std::uint16_t s = bytes == 1 ? row[i]
                                               : static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]);
            img.samples[static_cast<std::size_t>(r) * img.width * img.channels + i] = s;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace

void write_blob(const fs::path& path, const char (&magic)[9], std::uint32_t version,
                const std::vector<std::uint64_t>& dims, std::span<const double> data) {
    std::uint64_t expected = 1;
    for (auto d : dims) expected *= d;
    if (expected != data.size()) throw ShapeError("write_blob: dims do not match data size");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DependencyError("cannot write " + path.string());
    out.write(magic, 8);
    put(out, version);
    put(out, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) put(out, d);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
}

Blob read_blob(const fs::path& path, const char (&magic)[9]) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("missing file " + path.string());
    char found[8];
    in.read(found, 8);
    if (!in || std::memcmp(found, magic, 8) != 0)
        throw FormatError(path.string() + ": bad magic header (expected " + std::string(magic, 8) + ")");
    Blob blob;
    blob.version = get<std::uint32_t>(in, path);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw FormatError(path.string() + ": implausible rank");
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        blob.dims.push_back(get<std::uint64_t>(in, path));
        count *= blob.dims.back();
    }
    blob.data.resize(count);
    in.read(reinterpret_cast<char*>(blob.data.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw FormatError("truncated blob " + path.string());
    return blob;
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DependencyError("cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("missing file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_png(const fs::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3 && image.channels != 4)
        throw ShapeError("write_png: unsupported channel count " + std::to_string(image.channels));
    PngRows rows{image.cols, image.rows, image.channels, 8, {}};
    rows.samples.resize(image.size());
    for (std::size_t i = 0; i < image.size(); ++i)
        rows.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
    write_png_rows(path, rows);
}

Image read_png(const fs::path& path) {
    PngRows rows = read_png_rows(path);
    const double full = rows.bit_depth == 16 ? 65535.0 : 255.0;
    Image img(rows.height, rows.width, rows.channels);
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = rows.samples[i] / full;
    return img;
}

void write_uv_png(const fs::path& path, const UVMap& uv) {
    PngRows rows{uv.cols, uv.rows, 3, 16, {}};
    rows.samples.resize(uv.pixel_count() * 3);
    for (std::size_t p = 0; p < uv.pixel_count(); ++p) {
        const bool valid = uv.mask[p] != 0;
        rows.samples[3 * p] = valid ? static_cast<std::uint16_t>(std::lround(uv.u[p] * 65535.0)) : 0;
        rows.samples[3 * p + 1] = valid ? static_cast<std::uint16_t>(std::lround(uv.v[p] * 65535.0)) : 0;
        rows.samples[3 * p + 2] = valid ? 65535 : 0;
    }
    write_png_rows(path, rows);
}

UVMap read_uv_png(const fs::path& path) {
    PngRows rows = read_png_rows(path);
    if (rows.channels != 3 || rows.bit_depth != 16)
        throw FormatError(path.string() + ": UV maps must be 16-bit RGB PNG");
    UVMap uv(rows.height, rows.width);
    for (std::size_t p = 0; p < uv.pixel_count(); ++p) {
        if (rows.samples[3 * p + 2] == 0) continue;
        uv.mask[p] = 1;
        uv.u[p] = rows.samples[3 * p] / 65535.0;
        uv.v[p] = rows.samples[3 * p + 1] / 65535.0;
    }
    return uv;
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string file_hash(const fs::path& path) { return fnv1a_hex(read_text(path)); }

}  // namespace protego::io
