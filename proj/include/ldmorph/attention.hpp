#pragma once

#include <torch/torch.h>

#include <utility>

namespace ldmorph::attention {

/// Window layout for one raster. Windows are clamped to the raster side,
/// sides are zero-padded up to a multiple of the window, and the cyclic
/// shift is half a window (disabled when a single window covers an axis).
struct WindowPlan {
    int64_t height = 0, width = 0;          ///< unpadded raster
    int64_t padded_h = 0, padded_w = 0;
    int64_t win_h = 0, win_w = 0;
    int64_t shift_h = 0, shift_w = 0;

    int64_t windows() const { return (padded_h / win_h) * (padded_w / win_w); }
    int64_t tokens() const { return win_h * win_w; }
    bool shifted() const { return shift_h > 0 || shift_w > 0; }
};

WindowPlan plan_windows(int64_t height, int64_t width, int64_t window, bool shifted);

/// (B, H, W, C) -> (B * nW, wh * ww, C); H, W must be multiples of the window.
torch::Tensor window_partition(const torch::Tensor& x, int64_t win_h, int64_t win_w);
/// Inverse of window_partition.
torch::Tensor window_reverse(const torch::Tensor& windows, int64_t win_h, int64_t win_w, int64_t height,
                             int64_t width);

/// Rolls (B, H, W, C) by (-shift_h, -shift_w); cyclic_unshift undoes it.
torch::Tensor cyclic_shift(const torch::Tensor& x, int64_t shift_h, int64_t shift_w);
torch::Tensor cyclic_unshift(const torch::Tensor& x, int64_t shift_h, int64_t shift_w);

/// Additive mask (nW, T, T): 0 where two tokens of a shifted window came from
/// the same region of the unshifted raster, a large negative value otherwise.
torch::Tensor shifted_window_mask(const WindowPlan& plan);

inline constexpr double kMaskValue = -1e4;

/// softmax(q k^T / sqrt(d) + bias) over the last axis; q, k are (..., T, d).
torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& bias = {});

/// softmax(q k^T / sqrt(d) + bias) v
torch::Tensor self_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                             const torch::Tensor& bias = {});

/// Queries from one stream attend over keys/values of the other. Window and
/// token counts of the two streams must agree.
torch::Tensor cross_attention(const torch::Tensor& q_a, const torch::Tensor& k_b, const torch::Tensor& v_b,
                              const torch::Tensor& bias = {});

struct AttentionConfig {
    int64_t dim = 64;
    int64_t heads = 4;
    int64_t window = 4;
    double mlp_ratio = 4.0;
    bool relative_position_bias = true;
};

/// Per-window multi-head attention with optional learned relative bias.
class WindowAttentionImpl : public torch::nn::Module {
public:
    explicit WindowAttentionImpl(const AttentionConfig& cfg);

    struct Projected {
        torch::Tensor q, k, v; ///< (N, heads, T, head_dim)
    };
    Projected project(const torch::Tensor& windows);
    /// Attends and applies the output projection; returns (N, T, dim).
    /// `mask` is (nW, T, T) or undefined.
    torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                         const WindowPlan& plan, const torch::Tensor& mask);
    /// Self-attention over windows (N, T, dim).
    torch::Tensor forward(const torch::Tensor& windows, const WindowPlan& plan, const torch::Tensor& mask = {});
    /// (heads, T, T) bias for the plan's window size, or undefined.
    torch::Tensor relative_bias(const WindowPlan& plan) const;

    const AttentionConfig& config() const { return cfg_; }

private:
    AttentionConfig cfg_;
    torch::nn::Linear qkv_{nullptr}, proj_{nullptr};
    torch::Tensor bias_table_;
};
TORCH_MODULE(WindowAttention);

class MlpImpl : public torch::nn::Module {
public:
    MlpImpl(int64_t dim, double ratio);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Mlp);

/// W-MSA / SW-MSA applied to a channel-last raster (B, H, W, C), including
/// padding, shifting and masking.
torch::Tensor windowed_self_attention(WindowAttention& attn, const torch::Tensor& x, bool shifted);

/// Global feature extraction block on (B, C, H, W):
///   x += W-MSA(LN x); x += MLP(LN x); x += SW-MSA(LN x); x += MLP(LN x)
class GfeBlockImpl : public torch::nn::Module {
public:
    explicit GfeBlockImpl(const AttentionConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);
    /// Same computation on a channel-last raster.
    torch::Tensor forward_channels_last(torch::Tensor x);

private:
    AttentionConfig cfg_;
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr}, norm4_{nullptr};
    WindowAttention wmsa_{nullptr}, swmsa_{nullptr};
    Mlp mlp1_{nullptr}, mlp2_{nullptr};
};
TORCH_MODULE(GfeBlock);

/// MLP, SW-MSA, MLP with pre-norm residuals (the tail shared with GfeBlock).
class BranchTailImpl : public torch::nn::Module {
public:
    explicit BranchTailImpl(const AttentionConfig& cfg);
    torch::Tensor forward(torch::Tensor x); ///< channel-last

private:
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr};
    Mlp mlp1_{nullptr}, mlp2_{nullptr};
    WindowAttention swmsa_{nullptr};
};
TORCH_MODULE(BranchTail);

/// Latent/global cross-attention fusion. Each stream gets its own q/k/v
/// embedding; the latent branch attends with the global stream's queries
/// over its own keys/values and vice versa. Branch outputs are concatenated
/// along channels and projected back to `dim`.
class LgcaBlockImpl : public torch::nn::Module {
public:
    explicit LgcaBlockImpl(const AttentionConfig& cfg);

    /// s (latent stream), g (global stream): (B, C, H, W) each.
    torch::Tensor forward(const torch::Tensor& s, const torch::Tensor& g);
    /// Branch outputs before concatenation, both (B, C, H, W).
    std::pair<torch::Tensor, torch::Tensor> forward_branches(const torch::Tensor& s, const torch::Tensor& g);
    /// Copies the latent-branch weights into the global branch.
    void tie_branches();

private:
    std::pair<torch::Tensor, torch::Tensor> branches_channels_last(const torch::Tensor& s, const torch::Tensor& g);

    AttentionConfig cfg_;
    torch::nn::LayerNorm norm_s_{nullptr}, norm_g_{nullptr};
    WindowAttention attn_s_{nullptr}, attn_g_{nullptr};
    BranchTail tail_s_{nullptr}, tail_g_{nullptr};
    torch::nn::Linear fuse_{nullptr};
};
TORCH_MODULE(LgcaBlock);

} // namespace ldmorph::attention
