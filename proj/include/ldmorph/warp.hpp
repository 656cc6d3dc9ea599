#pragma once

#include "ldmorph/types.hpp"

namespace ldmorph::warp {

/// Bilinear resampling of `image` (B, C, H, W) at p + u(p), with u given as
/// `field` (B, 2, H, W) in pixel units (x first). Sample coordinates are
/// clamped to the image border. Differentiable in both arguments.
torch::Tensor warp_bilinear(const torch::Tensor& image, const torch::Tensor& field);

/// Nearest-neighbour resampling with the same geometry as warp_bilinear.
/// Coordinates round half up (floor(x + 0.5)). Works for any dtype.
torch::Tensor warp_nearest(const torch::Tensor& image, const torch::Tensor& field);

Image2D warp_image(const Image2D& image, const DisplacementField2D& field);
LabelMap2D warp_labels(const LabelMap2D& labels, const DisplacementField2D& field);

} // namespace ldmorph::warp
