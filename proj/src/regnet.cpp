#include "ldmorph/regnet.hpp"

#include <cmath>
#include <string>

namespace ldmorph::regnet {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv3x3(int64_t in, int64_t out)
{
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1));
}

bool power_of_two(int64_t v)
{
    return v > 0 && (v & (v - 1)) == 0;
}

int64_t log2_exact(int64_t v)
{
    int64_t n = 0;
    while ((int64_t{1} << n) < v) {
        ++n;
    }
    return n;
}

// Brings a feature raster to (h, w): average pooling for integer reductions,
// bilinear interpolation otherwise.
torch::Tensor resample(const torch::Tensor& x, int64_t h, int64_t w)
{
    if (x.size(2) == h && x.size(3) == w) {
        return x;
    }
    if (x.size(2) % h == 0 && x.size(3) % w == 0 && x.size(2) / h == x.size(3) / w) {
        const auto k = x.size(2) / h;
        return torch::avg_pool2d(x, {k, k}, {k, k});
    }
    return torch::nn::functional::interpolate(
        x, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<int64_t>{h, w})
               .mode(torch::kBilinear)
               .align_corners(false));
}

} // namespace

void RegNetConfig::validate() const
{
    const auto n = static_cast<size_t>(levels);
    if (levels < 1) {
        throw ConfigError("regnet: levels must be >= 1");
    }
    if (widths.size() != n || heads.size() != n) {
        throw ConfigError("regnet: expected " + std::to_string(levels) + " widths and heads, got " +
                          std::to_string(widths.size()) + " and " + std::to_string(heads.size()));
    }
    for (size_t i = 0; i < n; ++i) {
        if (widths[i] <= 0 || heads[i] <= 0 || widths[i] % heads[i] != 0) {
            throw ConfigError("regnet: level " + std::to_string(i + 1) + " width " + std::to_string(widths[i]) +
                              " not divisible by " + std::to_string(heads[i]) + " heads");
        }
    }
    if (!power_of_two(patch_stride)) {
        throw ConfigError("regnet: patch_stride must be a power of two");
    }
    if (window < 1 || decoder_width < 1 || mlp_ratio <= 0.0) {
        throw ConfigError("regnet: window, decoder_width and mlp_ratio must be positive");
    }
    if (use_ldmfe) {
        if (feature_scales.empty() || feature_channels < 1) {
            throw ConfigError("regnet: latent stream enabled without feature levels");
        }
        for (auto s : feature_scales) {
            if (!power_of_two(s)) {
                throw ConfigError("regnet: feature scale " + std::to_string(s) + " is not a power of two");
            }
        }
    }
}

void RegNetConfig::enable_deep_geometry()
{
    levels += 1;
    widths.push_back(widths.empty() ? 64 : widths.back() * 2);
    heads.push_back(heads.empty() ? 4 : heads.back() * 2);
}

int64_t feature_source(const RegNetConfig& cfg, int64_t level)
{
    const auto target = log2_exact(cfg.level_scale(level));
    int64_t best = -1, best_dist = 0;
    for (size_t i = 0; i < cfg.feature_scales.size(); ++i) {
        const auto s = log2_exact(cfg.feature_scales[i]);
        const auto dist = std::abs(s - target);
        const bool finer = best >= 0 && s < log2_exact(cfg.feature_scales[static_cast<size_t>(best)]);
        if (best < 0 || dist < best_dist || (dist == best_dist && finer)) {
            best = static_cast<int64_t>(i);
            best_dist = dist;
        }
    }
    return best;
}

PatchMergingImpl::PatchMergingImpl(int64_t in_dim, int64_t out_dim)
{
    norm_ = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({4 * in_dim})));
    reduce_ = register_module("reduce", nn::Linear(nn::LinearOptions(4 * in_dim, out_dim).bias(false)));
}

torch::Tensor PatchMergingImpl::forward(const torch::Tensor& x)
{
    if (x.size(2) % 2 != 0 || x.size(3) % 2 != 0) {
        throw std::invalid_argument("PatchMerging: odd raster " + std::to_string(x.size(2)) + "x" +
                                    std::to_string(x.size(3)));
    }
    auto t = x.permute({0, 2, 3, 1});
    using torch::indexing::Slice;
    auto merged = torch::cat({t.index({Slice(), Slice(0, torch::indexing::None, 2), Slice(0, torch::indexing::None, 2)}),
                              t.index({Slice(), Slice(1, torch::indexing::None, 2), Slice(0, torch::indexing::None, 2)}),
                              t.index({Slice(), Slice(0, torch::indexing::None, 2), Slice(1, torch::indexing::None, 2)}),
                              t.index({Slice(), Slice(1, torch::indexing::None, 2), Slice(1, torch::indexing::None, 2)})},
                             -1);
    return reduce_(norm_(merged)).permute({0, 3, 1, 2}).contiguous();
}

RegNetImpl::RegNetImpl(const RegNetConfig& cfg) : cfg_(cfg)
{
    cfg.validate();
    const auto L = cfg.levels;
    const auto& w = cfg.widths;
    patch_embed_ = register_module(
        "patch_embed", nn::Conv2d(nn::Conv2dOptions(2, w[0], cfg.patch_stride).stride(cfg.patch_stride)));
    embed_norm_ = register_module("embed_norm", nn::LayerNorm(nn::LayerNormOptions({w[0]})));
    for (int64_t i = 0; i < L; ++i) {
        const auto ui = static_cast<size_t>(i);
        attention::AttentionConfig ac;
        ac.dim = w[ui];
        ac.heads = cfg.heads[ui];
        ac.window = cfg.window;
        ac.mlp_ratio = cfg.mlp_ratio;
        ac.relative_position_bias = cfg.relative_position_bias;
        if (i > 0) {
            merge_.push_back(register_module("merge" + std::to_string(i), PatchMerging(w[ui - 1], w[ui])));
        }
        gfe_.push_back(register_module("gfe" + std::to_string(i), attention::GfeBlock(ac)));
        if (cfg.use_ldmfe) {
            upper_convs_.push_back(register_module("upper" + std::to_string(i), conv3x3(cfg.feature_channels, w[ui])));
            if (cfg.use_lgca) {
                lgca_.push_back(register_module("lgca" + std::to_string(i), attention::LgcaBlock(ac)));
            } else {
                concat_reduce_.push_back(register_module(
                    "concat" + std::to_string(i), nn::Conv2d(nn::Conv2dOptions(2 * w[ui], w[ui], 1))));
            }
        }
    }
    // decoder: 2x stages from the deepest level to full resolution
    const auto stages = log2_exact(cfg.deepest_scale());
    int64_t channels = w.back();
    for (int64_t k = 0; k < stages; ++k) {
        const auto scale = cfg.deepest_scale() >> (k + 1);
        int64_t skip = -1;
        for (int64_t i = 0; i < L; ++i) {
            if (cfg.level_scale(i) == scale) {
                skip = i;
            }
        }
        const auto in = channels + (skip >= 0 ? w[static_cast<size_t>(skip)] : 0);
        const auto out = skip >= 0 ? w[static_cast<size_t>(skip)] : cfg.decoder_width;
        up_convs_.push_back(register_module("up" + std::to_string(k), conv3x3(in, out)));
        up_skip_.push_back(skip);
        channels = out;
    }
    low_level_ = register_module("low_level", conv3x3(2, cfg.decoder_width));
    fusion_conv_ = register_module("fusion", conv3x3(channels + cfg.decoder_width, cfg.decoder_width));
    head_ = register_module("head", conv3x3(cfg.decoder_width, 2));
    zero_head();
}

void RegNetImpl::zero_head()
{
    torch::NoGradGuard no_grad;
    head_->weight.zero_();
    head_->bias.zero_();
}

void RegNetImpl::check_geometry(const torch::Tensor& moving, const torch::Tensor& fixed) const
{
    if (moving.dim() != 4 || moving.size(1) != 1 || moving.sizes() != fixed.sizes()) {
        throw std::invalid_argument("RegNet: expected matching (B, 1, H, W) moving and fixed batches");
    }
    const auto s = cfg_.deepest_scale();
    if (moving.size(2) % s != 0 || moving.size(3) % s != 0) {
        throw std::invalid_argument("RegNet: image " + std::to_string(moving.size(2)) + "x" +
                                    std::to_string(moving.size(3)) + " not divisible by the deepest scale " +
                                    std::to_string(s));
    }
}

std::vector<torch::Tensor> RegNetImpl::lower_stream(const torch::Tensor& moving, const torch::Tensor& fixed)
{
    check_geometry(moving, fixed);
    auto x = patch_embed_(torch::cat({moving, fixed}, 1));
    x = embed_norm_(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
    std::vector<torch::Tensor> out;
    for (size_t i = 0; i < gfe_.size(); ++i) {
        if (i > 0) {
            x = merge_[i - 1](x);
        }
        x = gfe_[i](x);
        out.push_back(x);
    }
    return out;
}

std::vector<torch::Tensor> RegNetImpl::upper_stream(const FeaturePyramid& features)
{
    if (!cfg_.use_ldmfe) {
        return {};
    }
    if (features.size() != cfg_.feature_scales.size()) {
        throw std::invalid_argument("upper_stream: expected " + std::to_string(cfg_.feature_scales.size()) +
                                    " feature levels, got " + std::to_string(features.size()));
    }
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < cfg_.levels; ++i) {
        const auto src = static_cast<size_t>(feature_source(cfg_, i));
        const auto& f = features.levels[src];
        if (f.dim() != 4 || f.size(1) != cfg_.feature_channels) {
            throw std::invalid_argument("upper_stream: level " + std::to_string(i + 1) + " expects " +
                                        std::to_string(cfg_.feature_channels) + " feature channels");
        }
        // feature level src sits at image/feature_scales[src]; reproject onto level i
        const auto h = f.size(2) * cfg_.feature_scales[src] / cfg_.level_scale(i);
        const auto w = f.size(3) * cfg_.feature_scales[src] / cfg_.level_scale(i);
        if (h < 1 || w < 1) {
            throw std::invalid_argument("upper_stream: level " + std::to_string(i + 1) + " cannot be aligned (feature " +
                                        std::to_string(f.size(2)) + "x" + std::to_string(f.size(3)) + ")");
        }
        out.push_back(upper_convs_[static_cast<size_t>(i)](resample(f, h, w)));
    }
    return out;
}

std::vector<torch::Tensor> RegNetImpl::fuse_levels(const std::vector<torch::Tensor>& upper,
                                                   const std::vector<torch::Tensor>& lower)
{
    if (!cfg_.use_ldmfe) {
        return lower;
    }
    if (upper.size() != lower.size()) {
        throw std::invalid_argument("fuse_levels: level counts differ");
    }
    std::vector<torch::Tensor> out;
    for (size_t i = 0; i < lower.size(); ++i) {
        if (upper[i].sizes() != lower[i].sizes()) {
            throw std::invalid_argument("fuse_levels: level " + std::to_string(i + 1) + " geometry mismatch");
        }
        if (cfg_.use_lgca) {
            out.push_back(lgca_[i](upper[i], lower[i]));
        } else {
            out.push_back(concat_reduce_[i](torch::cat({upper[i], lower[i]}, 1)));
        }
    }
    return out;
}

torch::Tensor RegNetImpl::decode(const std::vector<torch::Tensor>& fused, const torch::Tensor& moving,
                                 const torch::Tensor& fixed)
{
    if (fused.size() != static_cast<size_t>(cfg_.levels)) {
        throw std::invalid_argument("decode: expected " + std::to_string(cfg_.levels) + " fused levels");
    }
    auto x = fused.back();
    for (size_t k = 0; k < up_convs_.size(); ++k) {
        x = torch::nn::functional::interpolate(
            x, torch::nn::functional::InterpolateFuncOptions()
                   .scale_factor(std::vector<double>{2.0, 2.0})
                   .mode(torch::kNearest));
        if (up_skip_[k] >= 0) {
            x = torch::cat({x, fused[static_cast<size_t>(up_skip_[k])]}, 1);
        }
        x = torch::silu(up_convs_[k](x));
    }
    auto low = torch::silu(low_level_(torch::cat({moving, fixed}, 1)));
    x = torch::silu(fusion_conv_(torch::cat({x, low}, 1)));
    return head_(x);
}

torch::Tensor RegNetImpl::forward(const torch::Tensor& moving, const torch::Tensor& fixed,
                                  const FeaturePyramid& features)
{
    auto lower = lower_stream(moving, fixed);
    auto upper = upper_stream(features);
    return decode(fuse_levels(upper, lower), moving, fixed);
}

DisplacementField2D predict_field(RegNet& net, const Image2D& moving, const Image2D& fixed,
                                  const FeaturePyramid& features)
{
    torch::NoGradGuard no_grad;
    const auto dtype = module_dtype(*net);
    FeaturePyramid cast = features;
    for (auto& l : cast.levels) {
        l = l.to(dtype);
    }
    auto u = net->forward(moving.batched(dtype), fixed.batched(dtype), cast);
    return DisplacementField2D(u.squeeze(0));
}

} // namespace ldmorph::regnet
