#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace ldmorph {

/// Raised for malformed or inconsistent configuration (CLI exit code 1).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when an operation cannot complete (CLI exit code 2).
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Single-channel raster stored as a (H, W) float64 tensor.
struct Image2D {
    torch::Tensor pixels;

    Image2D() = default;
    explicit Image2D(torch::Tensor p);
    static Image2D zeros(int64_t height, int64_t width);

    int64_t height() const { return pixels.size(0); }
    int64_t width() const { return pixels.size(1); }
    double at(int64_t row, int64_t col) const;
    bool all_finite() const;
    /// (1, 1, H, W) view in the requested dtype, ready for network input.
    torch::Tensor batched(torch::ScalarType dtype = torch::kFloat64) const;
};

/// Integer label raster stored as a (H, W) int64 tensor; 0 is background.
struct LabelMap2D {
    torch::Tensor labels;

    LabelMap2D() = default;
    explicit LabelMap2D(torch::Tensor l);
    static LabelMap2D zeros(int64_t height, int64_t width);

    int64_t height() const { return labels.size(0); }
    int64_t width() const { return labels.size(1); }
    int64_t at(int64_t row, int64_t col) const;
    std::set<int64_t> label_set() const;
};

/// Per-pixel displacement in pixel units stored as (2, H, W) float64.
/// Plane 0 is the column (x) displacement, plane 1 the row (y) displacement.
/// Warping samples the source image at p + u(p).
struct DisplacementField2D {
    torch::Tensor planes;

    DisplacementField2D() = default;
    explicit DisplacementField2D(torch::Tensor p);
    static DisplacementField2D zeros(int64_t height, int64_t width);

    int64_t height() const { return planes.size(1); }
    int64_t width() const { return planes.size(2); }
    bool all_finite() const;
    double max_magnitude() const;
};

struct RegistrationPair {
    Image2D moving;
    Image2D fixed;
    std::optional<LabelMap2D> moving_labels;
    std::optional<LabelMap2D> fixed_labels;
    std::string pair_id;

    /// Throws std::invalid_argument when shapes disagree.
    void validate() const;
};

/// Multi-channel latent raster (C, h, w) at a quarter of the image resolution.
struct LatentGrid {
    torch::Tensor values;

    int64_t channels() const { return values.size(0); }
    int64_t height() const { return values.size(1); }
    int64_t width() const { return values.size(2); }
};

/// Ordered multi-resolution rasters, each (B, C, H, W), finest first.
struct FeaturePyramid {
    enum class Stream { Latent, Global, Fused };
    std::vector<torch::Tensor> levels;
    Stream stream = Stream::Global;

    size_t size() const { return levels.size(); }
};

/// Floating dtype of a module's first parameter (float32 when it has none).
torch::ScalarType module_dtype(const torch::nn::Module& module);

} // namespace ldmorph
