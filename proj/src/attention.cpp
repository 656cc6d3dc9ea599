#include "ldmorph/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ldmorph::attention {

namespace nn = torch::nn;

WindowPlan plan_windows(int64_t height, int64_t width, int64_t window, bool shifted)
{
    if (height <= 0 || width <= 0 || window <= 0) {
        throw std::invalid_argument("plan_windows: sizes must be positive");
    }
    WindowPlan p;
    p.height = height;
    p.width = width;
    p.win_h = std::min(window, height);
    p.win_w = std::min(window, width);
    p.padded_h = (height + p.win_h - 1) / p.win_h * p.win_h;
    p.padded_w = (width + p.win_w - 1) / p.win_w * p.win_w;
    if (shifted) {
        p.shift_h = p.padded_h > p.win_h ? p.win_h / 2 : 0;
        p.shift_w = p.padded_w > p.win_w ? p.win_w / 2 : 0;
    }
    return p;
}

torch::Tensor window_partition(const torch::Tensor& x, int64_t win_h, int64_t win_w)
{
    if (x.dim() != 4) {
        throw std::invalid_argument("window_partition: expected (B, H, W, C)");
    }
    const auto b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
    if (h % win_h != 0 || w % win_w != 0) {
        throw std::invalid_argument("window_partition: raster " + std::to_string(h) + "x" + std::to_string(w) +
                                    " not divisible by window " + std::to_string(win_h) + "x" +
                                    std::to_string(win_w));
    }
    return x.view({b, h / win_h, win_h, w / win_w, win_w, c})
        .permute({0, 1, 3, 2, 4, 5})
        .reshape({-1, win_h * win_w, c});
}

torch::Tensor window_reverse(const torch::Tensor& windows, int64_t win_h, int64_t win_w, int64_t height,
                             int64_t width)
{
    const auto nh = height / win_h, nw = width / win_w;
    const auto c = windows.size(-1);
    const auto b = windows.size(0) / (nh * nw);
    return windows.reshape({b, nh, nw, win_h, win_w, c})
        .permute({0, 1, 3, 2, 4, 5})
        .reshape({b, height, width, c});
}

torch::Tensor cyclic_shift(const torch::Tensor& x, int64_t shift_h, int64_t shift_w)
{
    if (shift_h == 0 && shift_w == 0) {
        return x;
    }
    return torch::roll(x, {-shift_h, -shift_w}, {1, 2});
}

torch::Tensor cyclic_unshift(const torch::Tensor& x, int64_t shift_h, int64_t shift_w)
{
    if (shift_h == 0 && shift_w == 0) {
        return x;
    }
    return torch::roll(x, {shift_h, shift_w}, {1, 2});
}

namespace {

// region id per padded row: 0 before the last window, 1 in the last window
// minus the shift, 2 in the wrapped-around strip
torch::Tensor region_ids(int64_t padded, int64_t win, int64_t shift)
{
    auto ids = torch::zeros({padded}, torch::kInt64);
    if (shift > 0) {
        ids.slice(0, padded - win, padded - shift).fill_(1);
        ids.slice(0, padded - shift, padded).fill_(2);
    }
    return ids;
}

} // namespace

torch::Tensor shifted_window_mask(const WindowPlan& plan)
{
    auto rows = region_ids(plan.padded_h, plan.win_h, plan.shift_h);
    auto cols = region_ids(plan.padded_w, plan.win_w, plan.shift_w);
    auto img = (rows.view({-1, 1}) * 3 + cols.view({1, -1})).view({1, plan.padded_h, plan.padded_w, 1});
    auto win = window_partition(img, plan.win_h, plan.win_w).squeeze(-1); // (nW, T)
    auto diff = win.unsqueeze(1) != win.unsqueeze(2);
    return torch::zeros(diff.sizes(), torch::kFloat64).masked_fill(diff, kMaskValue);
}

torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& bias)
{
    if (q.size(-1) != k.size(-1)) {
        throw std::invalid_argument("attention: query/key widths differ");
    }
    if (q.size(-1) == 0) {
        throw std::invalid_argument("attention: zero-width queries");
    }
    auto logits = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(q.size(-1)));
    if (bias.defined()) {
        logits = logits + bias.to(logits.scalar_type());
    }
    return torch::softmax(logits, -1);
}

torch::Tensor self_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                             const torch::Tensor& bias)
{
    return torch::matmul(attention_weights(q, k, bias), v);
}

torch::Tensor cross_attention(const torch::Tensor& q_a, const torch::Tensor& k_b, const torch::Tensor& v_b,
                              const torch::Tensor& bias)
{
    if (q_a.dim() != k_b.dim() || q_a.size(0) != k_b.size(0) || q_a.size(-2) != k_b.size(-2)) {
        throw std::invalid_argument("cross_attention: streams disagree on window or token count");
    }
    return self_attention(q_a, k_b, v_b, bias);
}

WindowAttentionImpl::WindowAttentionImpl(const AttentionConfig& cfg) : cfg_(cfg)
{
    if (cfg.dim % cfg.heads != 0) {
        throw std::invalid_argument("WindowAttention: dim " + std::to_string(cfg.dim) + " not divisible by " +
                                    std::to_string(cfg.heads) + " heads");
    }
    qkv_ = register_module("qkv", nn::Linear(cfg.dim, 3 * cfg.dim));
    proj_ = register_module("proj", nn::Linear(cfg.dim, cfg.dim));
    if (cfg.relative_position_bias) {
        const auto side = 2 * cfg.window - 1;
        bias_table_ = register_parameter("bias_table", torch::randn({side * side, cfg.heads}) * 0.02);
    }
}

WindowAttentionImpl::Projected WindowAttentionImpl::project(const torch::Tensor& windows)
{
    const auto n = windows.size(0), t = windows.size(1);
    const auto hd = cfg_.dim / cfg_.heads;
    auto qkv = qkv_(windows).view({n, t, 3, cfg_.heads, hd}).permute({2, 0, 3, 1, 4});
    return {qkv[0], qkv[1], qkv[2]};
}

torch::Tensor WindowAttentionImpl::relative_bias(const WindowPlan& plan) const
{
    if (!bias_table_.defined()) {
        return {};
    }
    // offsets for a clamped window still index the full (2P-1)^2 table
    const auto side = 2 * cfg_.window - 1;
    auto r = torch::arange(plan.win_h, torch::kInt64);
    auto c = torch::arange(plan.win_w, torch::kInt64);
    auto rr = r.view({-1, 1}).expand({plan.win_h, plan.win_w}).reshape({-1});
    auto cc = c.view({1, -1}).expand({plan.win_h, plan.win_w}).reshape({-1});
    auto dr = rr.view({-1, 1}) - rr.view({1, -1}) + (cfg_.window - 1);
    auto dc = cc.view({-1, 1}) - cc.view({1, -1}) + (cfg_.window - 1);
    auto idx = (dr * side + dc).reshape({-1});
    const auto t = plan.tokens();
    return bias_table_.index_select(0, idx).view({t, t, cfg_.heads}).permute({2, 0, 1});
}

torch::Tensor WindowAttentionImpl::attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                          const WindowPlan& plan, const torch::Tensor& mask)
{
    const auto n = q.size(0), t = q.size(2);
    auto logits = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(q.size(-1)));
    auto bias = relative_bias(plan);
    if (bias.defined()) {
        logits = logits + bias.unsqueeze(0);
    }
    if (mask.defined()) {
        const auto nw = mask.size(0);
        logits = logits.view({n / nw, nw, cfg_.heads, t, t}) + mask.to(logits.scalar_type()).unsqueeze(1).unsqueeze(0);
        logits = logits.view({n, cfg_.heads, t, t});
    }
    auto out = torch::matmul(torch::softmax(logits, -1), v);
    return proj_(out.transpose(1, 2).reshape({n, t, cfg_.dim}));
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& windows, const WindowPlan& plan,
                                           const torch::Tensor& mask)
{
    auto p = project(windows);
    return attend(p.q, p.k, p.v, plan, mask);
}

MlpImpl::MlpImpl(int64_t dim, double ratio)
{
    const auto hidden = static_cast<int64_t>(std::lround(static_cast<double>(dim) * ratio));
    fc1_ = register_module("fc1", nn::Linear(dim, hidden));
    fc2_ = register_module("fc2", nn::Linear(hidden, dim));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x)
{
    return fc2_(torch::gelu(fc1_(x)));
}

namespace {

torch::Tensor pad_to_plan(const torch::Tensor& x, const WindowPlan& plan)
{
    const auto ph = plan.padded_h - plan.height, pw = plan.padded_w - plan.width;
    if (ph == 0 && pw == 0) {
        return x;
    }
    // (B, H, W, C): pad W then H at the far side
    return torch::constant_pad_nd(x, {0, 0, 0, pw, 0, ph});
}

torch::Tensor crop_to_plan(const torch::Tensor& x, const WindowPlan& plan)
{
    if (plan.padded_h == plan.height && plan.padded_w == plan.width) {
        return x;
    }
    return x.slice(1, 0, plan.height).slice(2, 0, plan.width).contiguous();
}

nn::LayerNorm layer_norm(int64_t dim)
{
    return nn::LayerNorm(nn::LayerNormOptions({dim}));
}

torch::Tensor to_channels_last(const torch::Tensor& x)
{
    if (x.dim() != 4) {
        throw std::invalid_argument("expected a (B, C, H, W) tensor");
    }
    return x.permute({0, 2, 3, 1}).contiguous();
}

torch::Tensor to_channels_first(const torch::Tensor& x)
{
    return x.permute({0, 3, 1, 2}).contiguous();
}

} // namespace

torch::Tensor windowed_self_attention(WindowAttention& attn, const torch::Tensor& x, bool shifted)
{
    const auto plan = plan_windows(x.size(1), x.size(2), attn->config().window, shifted);
    auto y = cyclic_shift(pad_to_plan(x, plan), plan.shift_h, plan.shift_w);
    torch::Tensor mask;
    if (plan.shifted()) {
        mask = shifted_window_mask(plan);
    }
    auto windows = attn->forward(window_partition(y.contiguous(), plan.win_h, plan.win_w), plan, mask);
    y = window_reverse(windows, plan.win_h, plan.win_w, plan.padded_h, plan.padded_w);
    return crop_to_plan(cyclic_unshift(y, plan.shift_h, plan.shift_w), plan);
}

GfeBlockImpl::GfeBlockImpl(const AttentionConfig& cfg) : cfg_(cfg)
{
    norm1_ = register_module("norm1", layer_norm(cfg.dim));
    wmsa_ = register_module("wmsa", WindowAttention(cfg));
    norm2_ = register_module("norm2", layer_norm(cfg.dim));
    mlp1_ = register_module("mlp1", Mlp(cfg.dim, cfg.mlp_ratio));
    norm3_ = register_module("norm3", layer_norm(cfg.dim));
    swmsa_ = register_module("swmsa", WindowAttention(cfg));
    norm4_ = register_module("norm4", layer_norm(cfg.dim));
    mlp2_ = register_module("mlp2", Mlp(cfg.dim, cfg.mlp_ratio));
}

torch::Tensor GfeBlockImpl::forward_channels_last(torch::Tensor x)
{
    if (x.size(3) != cfg_.dim) {
        throw std::invalid_argument("GfeBlock: expected " + std::to_string(cfg_.dim) + " channels, got " +
                                    std::to_string(x.size(3)));
    }
    x = x + windowed_self_attention(wmsa_, norm1_(x), false);
    x = x + mlp1_(norm2_(x));
    x = x + windowed_self_attention(swmsa_, norm3_(x), true);
    x = x + mlp2_(norm4_(x));
    return x;
}

torch::Tensor GfeBlockImpl::forward(const torch::Tensor& x)
{
    return to_channels_first(forward_channels_last(to_channels_last(x)));
}

BranchTailImpl::BranchTailImpl(const AttentionConfig& cfg)
{
    norm1_ = register_module("norm1", layer_norm(cfg.dim));
    mlp1_ = register_module("mlp1", Mlp(cfg.dim, cfg.mlp_ratio));
    norm2_ = register_module("norm2", layer_norm(cfg.dim));
    swmsa_ = register_module("swmsa", WindowAttention(cfg));
    norm3_ = register_module("norm3", layer_norm(cfg.dim));
    mlp2_ = register_module("mlp2", Mlp(cfg.dim, cfg.mlp_ratio));
}

torch::Tensor BranchTailImpl::forward(torch::Tensor x)
{
    x = x + mlp1_(norm1_(x));
    x = x + windowed_self_attention(swmsa_, norm2_(x), true);
    x = x + mlp2_(norm3_(x));
    return x;
}

LgcaBlockImpl::LgcaBlockImpl(const AttentionConfig& cfg) : cfg_(cfg)
{
    norm_s_ = register_module("norm_s", layer_norm(cfg.dim));
    norm_g_ = register_module("norm_g", layer_norm(cfg.dim));
    attn_s_ = register_module("attn_s", WindowAttention(cfg));
    attn_g_ = register_module("attn_g", WindowAttention(cfg));
    tail_s_ = register_module("tail_s", BranchTail(cfg));
    tail_g_ = register_module("tail_g", BranchTail(cfg));
    fuse_ = register_module("fuse", nn::Linear(2 * cfg.dim, cfg.dim));
}

std::pair<torch::Tensor, torch::Tensor> LgcaBlockImpl::branches_channels_last(const torch::Tensor& s,
                                                                              const torch::Tensor& g)
{
    if (s.sizes() != g.sizes()) {
        throw std::invalid_argument("LgcaBlock: latent and global streams differ in shape");
    }
    if (s.size(3) != cfg_.dim) {
        throw std::invalid_argument("LgcaBlock: expected " + std::to_string(cfg_.dim) + " channels, got " +
                                    std::to_string(s.size(3)));
    }
    const auto plan = plan_windows(s.size(1), s.size(2), cfg_.window, false);
    auto ws = window_partition(pad_to_plan(norm_s_(s), plan).contiguous(), plan.win_h, plan.win_w);
    auto wg = window_partition(pad_to_plan(norm_g_(g), plan).contiguous(), plan.win_h, plan.win_w);
    auto ps = attn_s_->project(ws);
    auto pg = attn_g_->project(wg);
    auto out_s = attn_s_->attend(pg.q, ps.k, ps.v, plan, {});
    auto out_g = attn_g_->attend(ps.q, pg.k, pg.v, plan, {});
    auto back = [&](const torch::Tensor& w) {
        return crop_to_plan(window_reverse(w, plan.win_h, plan.win_w, plan.padded_h, plan.padded_w), plan);
    };
    auto bs = tail_s_->forward(s + back(out_s));
    auto bg = tail_g_->forward(g + back(out_g));
    return {bs, bg};
}

std::pair<torch::Tensor, torch::Tensor> LgcaBlockImpl::forward_branches(const torch::Tensor& s,
                                                                        const torch::Tensor& g)
{
    auto [bs, bg] = branches_channels_last(to_channels_last(s), to_channels_last(g));
    return {to_channels_first(bs), to_channels_first(bg)};
}

torch::Tensor LgcaBlockImpl::forward(const torch::Tensor& s, const torch::Tensor& g)
{
    auto [bs, bg] = branches_channels_last(to_channels_last(s), to_channels_last(g));
    return to_channels_first(fuse_(torch::cat({bs, bg}, -1)));
}

void LgcaBlockImpl::tie_branches()
{
    torch::NoGradGuard no_grad;
    auto copy = [](nn::Module& dst, const nn::Module& src) {
        auto d = dst.named_parameters(true);
        for (const auto& p : src.named_parameters(true)) {
            d[p.key()].copy_(p.value());
        }
    };
    copy(*norm_g_, *norm_s_);
    copy(*attn_g_, *attn_s_);
    copy(*tail_g_, *tail_s_);
}

} // namespace ldmorph::attention
