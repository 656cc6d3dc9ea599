#include "ldmorph/warp.hpp"

#include <sstream>

namespace ldmorph::warp {

namespace {

struct SampleCoords {
    torch::Tensor x; // (B, H, W), clamped to [0, W-1]
    torch::Tensor y; // (B, H, W), clamped to [0, H-1]
};

void check_geometry(const torch::Tensor& image, const torch::Tensor& field)
{
    if (image.dim() != 4 || field.dim() != 4 || field.size(1) != 2) {
        throw std::invalid_argument("warp expects image (B,C,H,W) and field (B,2,H,W)");
    }
    if (image.size(0) != field.size(0) || image.size(2) != field.size(2) || image.size(3) != field.size(3)) {
        std::ostringstream msg;
        msg << "warp shape mismatch: image " << image.sizes() << " vs field " << field.sizes();
        throw std::invalid_argument(msg.str());
    }
}

SampleCoords sample_coords(const torch::Tensor& field)
{
    const auto h = field.size(2);
    const auto w = field.size(3);
    auto opts = field.options().requires_grad(false);
    auto xs = torch::arange(w, opts).view({1, 1, w});
    auto ys = torch::arange(h, opts).view({1, h, 1});
    auto sx = (xs + field.select(1, 0)).clamp(0, static_cast<double>(w - 1));
    auto sy = (ys + field.select(1, 1)).clamp(0, static_cast<double>(h - 1));
    return {sx, sy};
}

// Gathers image values at integer (row, col) index maps of shape (B, H, W).
torch::Tensor gather2d(const torch::Tensor& flat, const torch::Tensor& rows, const torch::Tensor& cols, int64_t width)
{
    const auto b = flat.size(0);
    const auto c = flat.size(1);
    auto idx = (rows * width + cols).view({b, 1, -1}).expand({b, c, rows.size(1) * rows.size(2)});
    return flat.gather(2, idx).view({b, c, rows.size(1), rows.size(2)});
}

} // namespace

torch::Tensor warp_bilinear(const torch::Tensor& image, const torch::Tensor& field)
{
    check_geometry(image, field);
    const auto h = image.size(2);
    const auto w = image.size(3);
    auto [sx, sy] = sample_coords(field);

    auto x0 = sx.detach().floor();
    auto y0 = sy.detach().floor();
    auto wx = (sx - x0).unsqueeze(1);
    auto wy = (sy - y0).unsqueeze(1);
    auto x0i = x0.to(torch::kLong);
    auto y0i = y0.to(torch::kLong);
    auto x1i = (x0i + 1).clamp_max(w - 1);
    auto y1i = (y0i + 1).clamp_max(h - 1);

    auto flat = image.reshape({image.size(0), image.size(1), h * w});
    auto v00 = gather2d(flat, y0i, x0i, w);
    auto v01 = gather2d(flat, y0i, x1i, w);
    auto v10 = gather2d(flat, y1i, x0i, w);
    auto v11 = gather2d(flat, y1i, x1i, w);

    auto top = (1 - wx) * v00 + wx * v01;
    auto bottom = (1 - wx) * v10 + wx * v11;
    return (1 - wy) * top + wy * bottom;
}

torch::Tensor warp_nearest(const torch::Tensor& image, const torch::Tensor& field)
{
    check_geometry(image, field);
    const auto w = image.size(3);
    auto [sx, sy] = sample_coords(field.detach());
    auto cols = (sx + 0.5).floor().to(torch::kLong).clamp_max(w - 1);
    auto rows = (sy + 0.5).floor().to(torch::kLong).clamp_max(image.size(2) - 1);
    auto flat = image.reshape({image.size(0), image.size(1), image.size(2) * w});
    return gather2d(flat, rows, cols, w);
}

Image2D warp_image(const Image2D& image, const DisplacementField2D& field)
{
    if (!field.all_finite()) {
        throw std::invalid_argument("warp_image: displacement field contains non-finite values");
    }
    auto out = warp_bilinear(image.batched(), field.planes.unsqueeze(0));
    return Image2D(out.squeeze(0).squeeze(0));
}

LabelMap2D warp_labels(const LabelMap2D& labels, const DisplacementField2D& field)
{
    if (!field.all_finite()) {
        throw std::invalid_argument("warp_labels: displacement field contains non-finite values");
    }
    auto out = warp_nearest(labels.labels.unsqueeze(0).unsqueeze(0), field.planes.unsqueeze(0));
    return LabelMap2D(out.squeeze(0).squeeze(0));
}

} // namespace ldmorph::warp
