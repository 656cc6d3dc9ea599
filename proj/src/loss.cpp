#include "ldmorph/loss.hpp"

#include "ldmorph/warp.hpp"

namespace ldmorph::loss {

void LossWeights::validate() const
{
    if (!(lambda >= 0.0)) {
        throw ConfigError("loss: lambda must be >= 0");
    }
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw ConfigError("loss: beta must lie in [0, 1]");
    }
}

torch::Tensor loss_org(const torch::Tensor& warped, const torch::Tensor& fixed)
{
    if (warped.sizes() != fixed.sizes()) {
        throw std::invalid_argument("loss_org: shape mismatch");
    }
    return (warped - fixed).pow(2).mean();
}

torch::Tensor loss_lat(const torch::Tensor& warped, const torch::Tensor& fixed, const LatentEncoder& encoder,
                       const torch::Tensor& fixed_latent)
{
    if (!encoder) {
        throw std::invalid_argument("loss_lat: no latent encoder supplied");
    }
    auto zf = fixed_latent.defined() ? fixed_latent : encoder(fixed);
    auto zw = encoder(warped);
    if (zw.sizes() != zf.sizes()) {
        throw std::invalid_argument("loss_lat: latent shape mismatch");
    }
    return (zw - zf).pow(2).mean();
}

torch::Tensor loss_smooth(const torch::Tensor& field)
{
    if (field.dim() != 4 || field.size(1) != 2) {
        throw std::invalid_argument("loss_smooth: expected a (B, 2, H, W) field");
    }
    const auto h = field.size(2);
    const auto w = field.size(3);
    auto dx = field.narrow(3, 1, w - 1) - field.narrow(3, 0, w - 1);
    auto dy = field.narrow(2, 1, h - 1) - field.narrow(2, 0, h - 1);
    return dx.pow(2).sum() + dy.pow(2).sum();
}

LossBreakdown loss_total(const torch::Tensor& moving, const torch::Tensor& fixed, const torch::Tensor& field,
                         const LatentEncoder& encoder, const LossWeights& weights, const torch::Tensor& fixed_latent)
{
    weights.validate();
    auto warped = warp::warp_bilinear(moving, field);
    LossBreakdown out;
    const double inner_org = weights.weight_inside_terms ? weights.beta : 1.0;
    const double inner_lat = weights.weight_inside_terms ? 1.0 - weights.beta : 1.0;
    out.org = inner_org * loss_org(warped, fixed);
    out.lat = weights.beta < 1.0 ? inner_lat * loss_lat(warped, fixed, encoder, fixed_latent)
                                 : torch::zeros({}, out.org.options());
    out.smooth = loss_smooth(field);
    out.sim = weights.beta * out.org + (1.0 - weights.beta) * out.lat;
    out.total = out.sim + weights.lambda * out.smooth;
    return out;
}

} // namespace ldmorph::loss
