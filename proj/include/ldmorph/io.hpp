#pragma once

#include "ldmorph/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>

namespace ldmorph::io {

namespace fs = std::filesystem;

/// Reads an 8- or 16-bit grayscale PNG or binary PGM (P5); values are scaled
/// to [0, 1] by the file's maximum sample value.
Image2D read_image(const fs::path& path);

/// Writes a 16-bit grayscale PNG (or PGM when the extension is .pgm).
/// Values are clamped to [0, 1] and rounded to the nearest 1/65535 step.
void write_image(const fs::path& path, const Image2D& image);

/// Label maps are stored as raw integer samples (8-bit when all labels fit).
LabelMap2D read_labels(const fs::path& path);
void write_labels(const fs::path& path, const LabelMap2D& labels);

/// Interleaved RGB, 8 bits per channel, row-major (H, W, 3).
struct RgbImage {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> data;
};
void write_rgb_png(const fs::path& path, const RgbImage& image);
RgbImage read_rgb_png(const fs::path& path);

/// Displacement-field binary layout (little-endian):
///   8 x uint32 header: magic, version, H, W, planes, reserved x3
///   planes x H x W float32 samples, plane-major, row-major.
inline constexpr uint32_t kFieldMagic = 0x464D444C; // "LDMF"
inline constexpr uint32_t kFieldVersion = 1;

void write_field(const fs::path& path, const DisplacementField2D& field);
DisplacementField2D read_field(const fs::path& path);

/// Single-plane float maps (e.g. Jacobian determinants) share the layout
/// with planes = 1.
void write_scalar_map(const fs::path& path, const torch::Tensor& map);
/// A single plane comes back as (H, W).
torch::Tensor read_scalar_map(const fs::path& path);

/// Rounds to the 16-bit sample grid used by write_image.
Image2D quantize16(const Image2D& image);

} // namespace ldmorph::io
