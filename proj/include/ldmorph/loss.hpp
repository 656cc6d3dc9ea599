#pragma once

#include "ldmorph/types.hpp"

#include <functional>

namespace ldmorph::loss {

/// Maps an image batch (B, 1, H, W) to latents (B, C, H/4, W/4); must be
/// differentiable with respect to its input.
using LatentEncoder = std::function<torch::Tensor(const torch::Tensor&)>;

struct LossWeights {
    double lambda = 0.01; ///< smoothness weight
    double beta = 0.6;    ///< pixel/latent similarity mix
    /// Apply beta inside the pixel and latent sums as well as outside
    /// (beta^2 and (1-beta)^2 overall). Off by default.
    bool weight_inside_terms = false;

    void validate() const;
};

struct LossBreakdown {
    torch::Tensor total;
    torch::Tensor sim;
    torch::Tensor org;
    torch::Tensor lat;
    torch::Tensor smooth;

    double total_value() const { return total.item<double>(); }
};

/// Mean squared difference over all pixels.
torch::Tensor loss_org(const torch::Tensor& warped, const torch::Tensor& fixed);

/// Mean squared difference between encoded images over latent elements.
/// `fixed_latent` may carry a precomputed E(fixed).
torch::Tensor loss_lat(const torch::Tensor& warped, const torch::Tensor& fixed, const LatentEncoder& encoder,
                       const torch::Tensor& fixed_latent = {});

/// Sum of squared forward differences of both field components over all
/// valid stencil sites (boundary differences excluded).
torch::Tensor loss_smooth(const torch::Tensor& field);

/// total = beta*org + (1-beta)*lat + lambda*smooth, evaluated on the
/// moving image warped by `field`. The latent term is skipped when beta = 1.
LossBreakdown loss_total(const torch::Tensor& moving, const torch::Tensor& fixed, const torch::Tensor& field,
                         const LatentEncoder& encoder, const LossWeights& weights,
                         const torch::Tensor& fixed_latent = {});

} // namespace ldmorph::loss
