#pragma once

#include "ldmorph/attention.hpp"
#include "ldmorph/types.hpp"

#include <vector>

namespace ldmorph::regnet {

struct RegNetConfig {
    int64_t levels = 3;
    std::vector<int64_t> widths{64, 128, 256};
    std::vector<int64_t> heads{4, 8, 16};
    int64_t patch_stride = 4;
    int64_t window = 4;
    double mlp_ratio = 4.0;
    bool relative_position_bias = true;
    int64_t decoder_width = 32;

    bool use_ldmfe = true;
    bool use_lgca = true;
    /// Channels of each extracted feature level ([f_M | f_F]).
    int64_t feature_channels = 128;
    /// Image pixels per feature pixel, one entry per extracted level.
    std::vector<int64_t> feature_scales{4, 16};

    /// Image pixels per lower-stream pixel at level i (0-based).
    int64_t level_scale(int64_t i) const { return patch_stride << i; }
    int64_t deepest_scale() const { return level_scale(levels - 1); }
    /// Throws ConfigError on inconsistent settings.
    void validate() const;
    /// One more encoder level (deepest at 1/32 with stride 4); width and
    /// heads of the new level double the previous ones.
    void enable_deep_geometry();
};

/// Index of the extracted feature level feeding lower-stream level i:
/// nearest in log-scale, ties go to the finer level.
int64_t feature_source(const RegNetConfig& cfg, int64_t level);

/// 2x2 neighbourhood concatenation, LayerNorm, linear reduction.
class PatchMergingImpl : public torch::nn::Module {
public:
    PatchMergingImpl(int64_t in_dim, int64_t out_dim);
    torch::Tensor forward(const torch::Tensor& x); ///< (B, C, H, W) -> (B, C', H/2, W/2)

private:
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::Linear reduce_{nullptr};
};
TORCH_MODULE(PatchMerging);

class RegNetImpl : public torch::nn::Module {
public:
    explicit RegNetImpl(const RegNetConfig& cfg);

    /// Patch embedding of the concatenated pair then per-level GFE blocks.
    std::vector<torch::Tensor> lower_stream(const torch::Tensor& moving, const torch::Tensor& fixed);
    /// Per-level 3x3 convolutions on resampled latent features.
    std::vector<torch::Tensor> upper_stream(const FeaturePyramid& features);
    std::vector<torch::Tensor> fuse_levels(const std::vector<torch::Tensor>& upper,
                                           const std::vector<torch::Tensor>& lower);
    torch::Tensor decode(const std::vector<torch::Tensor>& fused, const torch::Tensor& moving,
                         const torch::Tensor& fixed);

    /// moving, fixed: (B, 1, H, W); returns the displacement (B, 2, H, W).
    /// `features` may be empty when the latent stream is disabled.
    torch::Tensor forward(const torch::Tensor& moving, const torch::Tensor& fixed, const FeaturePyramid& features);

    /// Convolution-bearing decoder stages (upsampling stages plus the
    /// full-resolution fusion stage).
    int64_t decoder_stage_count() const { return static_cast<int64_t>(up_convs_.size()) + 1; }
    /// Zeroes the final convolution so the field starts at identity.
    void zero_head();
    const RegNetConfig& config() const { return cfg_; }
    attention::LgcaBlock lgca(int64_t level) const { return lgca_.at(static_cast<size_t>(level)); }

private:
    void check_geometry(const torch::Tensor& moving, const torch::Tensor& fixed) const;

    RegNetConfig cfg_;
    torch::nn::Conv2d patch_embed_{nullptr};
    torch::nn::LayerNorm embed_norm_{nullptr};
    std::vector<attention::GfeBlock> gfe_;
    std::vector<PatchMerging> merge_;
    std::vector<torch::nn::Conv2d> upper_convs_;
    std::vector<attention::LgcaBlock> lgca_;
    std::vector<torch::nn::Conv2d> concat_reduce_;
    std::vector<torch::nn::Conv2d> up_convs_;
    std::vector<int64_t> up_skip_; ///< fused level concatenated at each stage, or -1
    torch::nn::Conv2d low_level_{nullptr};
    torch::nn::Conv2d fusion_conv_{nullptr};
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(RegNet);

/// Single-pair convenience wrapper.
DisplacementField2D predict_field(RegNet& net, const Image2D& moving, const Image2D& fixed,
                                  const FeaturePyramid& features);

} // namespace ldmorph::regnet
