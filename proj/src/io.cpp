#include "ldmorph/io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace ldmorph::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const
    {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode)
{
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) {
        throw RuntimeFailure("cannot open " + path.string());
    }
    return f;
}

std::string lower_ext(const fs::path& path)
{
    auto ext = path.extension().string();
    for (auto& c : ext) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return ext;
}

// Raw decoded samples from a grayscale raster.
struct GraySamples {
    int64_t height = 0;
    int64_t width = 0;
    uint32_t maxval = 255;
    std::vector<uint32_t> samples;
};

struct RawRows {
    int64_t height = 0;
    int64_t width = 0;
    int channels = 1;
    int bit_depth = 8;
    std::vector<uint8_t> bytes;
};

RawRows png_read_raw(const fs::path& path, bool want_rgb)
{
    auto file = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (png == nullptr || info == nullptr) {
        throw RuntimeFailure("libpng initialisation failed");
    }
    RawRows out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw RuntimeFailure("malformed PNG: " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
        depth = 8;
    }
    if ((color & PNG_COLOR_MASK_ALPHA) != 0) {
        png_set_strip_alpha(png);
    }
    const bool is_color = (color & PNG_COLOR_MASK_COLOR) != 0 || color == PNG_COLOR_TYPE_PALETTE;
    if (want_rgb && !is_color) {
        png_set_gray_to_rgb(png);
    }
    if (!want_rgb && is_color) {
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    if (want_rgb && depth == 16) {
        png_set_strip_16(png);
        depth = 8;
    }
    png_read_update_info(png, info);
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.channels = png_get_channels(png, info);
    out.bit_depth = png_get_bit_depth(png, info);
    const auto rowbytes = png_get_rowbytes(png, info);
    out.bytes.resize(rowbytes * out.height);
    std::vector<png_bytep> rows(out.height);
    for (int64_t r = 0; r < out.height; ++r) {
        rows[r] = out.bytes.data() + r * rowbytes;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void png_write_raw(const fs::path& path, int64_t height, int64_t width, int color_type, int bit_depth,
                   const std::vector<uint8_t>& bytes)
{
    auto file = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (png == nullptr || info == nullptr) {
        throw RuntimeFailure("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw RuntimeFailure("PNG write failed: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
    const size_t rowbytes = static_cast<size_t>(width) * channels * (bit_depth / 8);
    for (int64_t r = 0; r < height; ++r) {
        png_write_row(png, const_cast<png_bytep>(bytes.data() + r * rowbytes));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

GraySamples read_png_gray(const fs::path& path)
{
    auto raw = png_read_raw(path, false);
    GraySamples g{raw.height, raw.width, raw.bit_depth == 16 ? 65535u : 255u, {}};
    g.samples.resize(raw.height * raw.width);
    for (int64_t i = 0; i < raw.height * raw.width; ++i) {
        g.samples[i] = raw.bit_depth == 16 ? (uint32_t{raw.bytes[2 * i]} << 8) | raw.bytes[2 * i + 1] : raw.bytes[i];
    }
    return g;
}

GraySamples read_pgm(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw RuntimeFailure("cannot open " + path.string());
    }
    auto next_token = [&in]() {
        std::string tok;
        while (in >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return tok;
        }
        throw RuntimeFailure("truncated PGM header");
    };
    if (next_token() != "P5") {
        throw RuntimeFailure("only binary PGM (P5) is supported: " + path.string());
    }
    GraySamples g;
    g.width = std::stoll(next_token());
    g.height = std::stoll(next_token());
    g.maxval = static_cast<uint32_t>(std::stoul(next_token()));
    in.get();
    const bool wide = g.maxval > 255;
    std::vector<uint8_t> bytes(g.width * g.height * (wide ? 2 : 1));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) {
        throw RuntimeFailure("truncated PGM data: " + path.string());
    }
    g.samples.resize(g.width * g.height);
    for (size_t i = 0; i < g.samples.size(); ++i) {
        g.samples[i] = wide ? (uint32_t{bytes[2 * i]} << 8) | bytes[2 * i + 1] : bytes[i];
    }
    return g;
}

void write_pgm(const fs::path& path, const GraySamples& g)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw RuntimeFailure("cannot write " + path.string());
    }
    out << "P5\n" << g.width << " " << g.height << "\n" << g.maxval << "\n";
    const bool wide = g.maxval > 255;
    for (auto s : g.samples) {
        if (wide) {
            out.put(static_cast<char>(s >> 8));
        }
        out.put(static_cast<char>(s & 0xFF));
    }
}

GraySamples read_gray(const fs::path& path)
{
    if (!fs::exists(path)) {
        throw RuntimeFailure("missing file: " + path.string());
    }
    return lower_ext(path) == ".pgm" ? read_pgm(path) : read_png_gray(path);
}

void write_gray(const fs::path& path, const GraySamples& g)
{
    if (lower_ext(path) == ".pgm") {
        write_pgm(path, g);
        return;
    }
    const bool wide = g.maxval > 255;
    std::vector<uint8_t> bytes;
    bytes.reserve(g.samples.size() * (wide ? 2 : 1));
    for (auto s : g.samples) {
        if (wide) {
            bytes.push_back(static_cast<uint8_t>(s >> 8));
        }
        bytes.push_back(static_cast<uint8_t>(s & 0xFF));
    }
    png_write_raw(path, g.height, g.width, PNG_COLOR_TYPE_GRAY, wide ? 16 : 8, bytes);
}

template <typename T>
void put_le(std::ostream& out, T value)
{
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in)
{
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw RuntimeFailure("truncated binary map");
    }
    return value;
}

void write_planes(const fs::path& path, const torch::Tensor& planes)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw RuntimeFailure("cannot write " + path.string());
    }
    const auto data = planes.to(torch::kFloat32).contiguous();
    const uint32_t header[8] = {kFieldMagic,
                                kFieldVersion,
                                static_cast<uint32_t>(data.size(1)),
                                static_cast<uint32_t>(data.size(2)),
                                static_cast<uint32_t>(data.size(0)),
                                0,
                                0,
                                0};
    for (auto v : header) {
        put_le(out, v);
    }
    const auto* p = data.data_ptr<float>();
    for (int64_t i = 0; i < data.numel(); ++i) {
        put_le(out, p[i]);
    }
}

torch::Tensor read_planes(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw RuntimeFailure("cannot open " + path.string());
    }
    uint32_t header[8];
    for (auto& v : header) {
        v = get_le<uint32_t>(in);
    }
    if (header[0] != kFieldMagic) {
        throw RuntimeFailure("bad field magic in " + path.string());
    }
    if (header[1] != kFieldVersion) {
        throw RuntimeFailure("unsupported field version " + std::to_string(header[1]));
    }
    const int64_t h = header[2];
    const int64_t w = header[3];
    const int64_t planes = header[4];
    auto out = torch::empty({planes, h, w}, torch::kFloat32);
    auto* p = out.data_ptr<float>();
    for (int64_t i = 0; i < out.numel(); ++i) {
        p[i] = get_le<float>(in);
    }
    return out;
}

} // namespace

Image2D read_image(const fs::path& path)
{
    const auto g = read_gray(path);
    auto t = torch::empty({g.height, g.width}, torch::kFloat64);
    auto* p = t.data_ptr<double>();
    for (size_t i = 0; i < g.samples.size(); ++i) {
        p[i] = static_cast<double>(g.samples[i]) / static_cast<double>(g.maxval);
    }
    return Image2D(t);
}

void write_image(const fs::path& path, const Image2D& image)
{
    GraySamples g{image.height(), image.width(), 65535u, {}};
    g.samples.resize(image.pixels.numel());
    const auto* p = image.pixels.data_ptr<double>();
    for (size_t i = 0; i < g.samples.size(); ++i) {
        g.samples[i] = static_cast<uint32_t>(std::lround(std::clamp(p[i], 0.0, 1.0) * 65535.0));
    }
    write_gray(path, g);
}

LabelMap2D read_labels(const fs::path& path)
{
    const auto g = read_gray(path);
    auto t = torch::empty({g.height, g.width}, torch::kInt64);
    auto* p = t.data_ptr<int64_t>();
    for (size_t i = 0; i < g.samples.size(); ++i) {
        p[i] = g.samples[i];
    }
    return LabelMap2D(t);
}

void write_labels(const fs::path& path, const LabelMap2D& labels)
{
    const auto max_label = labels.labels.max().item<int64_t>();
    if (labels.labels.min().item<int64_t>() < 0 || max_label > 65535) {
        throw std::invalid_argument("labels must lie in [0, 65535] to be stored as image samples");
    }
    GraySamples g{labels.height(), labels.width(), max_label > 255 ? 65535u : 255u, {}};
    g.samples.resize(labels.labels.numel());
    const auto* p = labels.labels.data_ptr<int64_t>();
    for (size_t i = 0; i < g.samples.size(); ++i) {
        g.samples[i] = static_cast<uint32_t>(p[i]);
    }
    write_gray(path, g);
}

void write_rgb_png(const fs::path& path, const RgbImage& image)
{
    png_write_raw(path, image.height, image.width, PNG_COLOR_TYPE_RGB, 8, image.data);
}

RgbImage read_rgb_png(const fs::path& path)
{
    auto raw = png_read_raw(path, true);
    return {raw.height, raw.width, std::move(raw.bytes)};
}

void write_field(const fs::path& path, const DisplacementField2D& field)
{
    write_planes(path, field.planes);
}

DisplacementField2D read_field(const fs::path& path)
{
    auto planes = read_planes(path);
    if (planes.size(0) != 2) {
        throw RuntimeFailure("expected a two-plane field in " + path.string());
    }
    return DisplacementField2D(planes);
}

void write_scalar_map(const fs::path& path, const torch::Tensor& map)
{
    write_planes(path, map.dim() == 2 ? map.unsqueeze(0) : map);
}

torch::Tensor read_scalar_map(const fs::path& path)
{
    auto planes = read_planes(path).to(torch::kFloat64);
    return planes.size(0) == 1 ? planes.squeeze(0) : planes;
}

Image2D quantize16(const Image2D& image)
{
    return Image2D((image.pixels.clamp(0.0, 1.0) * 65535.0).round() / 65535.0);
}

} // namespace ldmorph::io
