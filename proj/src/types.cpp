#include "ldmorph/types.hpp"

#include <sstream>

namespace ldmorph {

namespace {

torch::Tensor as_cpu_double(torch::Tensor t)
{
    return t.to(torch::kCPU, torch::kFloat64).contiguous();
}

} // namespace

Image2D::Image2D(torch::Tensor p) : pixels(as_cpu_double(std::move(p)))
{
    if (pixels.dim() != 2) {
        throw std::invalid_argument("Image2D expects a (H, W) tensor");
    }
}

Image2D Image2D::zeros(int64_t height, int64_t width)
{
    return Image2D(torch::zeros({height, width}, torch::kFloat64));
}

double Image2D::at(int64_t row, int64_t col) const
{
    return pixels.data_ptr<double>()[row * width() + col];
}

bool Image2D::all_finite() const
{
    return torch::isfinite(pixels).all().item<bool>();
}

torch::Tensor Image2D::batched(torch::ScalarType dtype) const
{
    return pixels.to(dtype).unsqueeze(0).unsqueeze(0);
}

LabelMap2D::LabelMap2D(torch::Tensor l) : labels(l.to(torch::kCPU, torch::kInt64).contiguous())
{
    if (labels.dim() != 2) {
        throw std::invalid_argument("LabelMap2D expects a (H, W) tensor");
    }
}

LabelMap2D LabelMap2D::zeros(int64_t height, int64_t width)
{
    return LabelMap2D(torch::zeros({height, width}, torch::kInt64));
}

int64_t LabelMap2D::at(int64_t row, int64_t col) const
{
    return labels.data_ptr<int64_t>()[row * width() + col];
}

std::set<int64_t> LabelMap2D::label_set() const
{
    std::set<int64_t> out;
    const auto* p = labels.data_ptr<int64_t>();
    for (int64_t i = 0; i < labels.numel(); ++i) {
        out.insert(p[i]);
    }
    return out;
}

DisplacementField2D::DisplacementField2D(torch::Tensor p) : planes(as_cpu_double(std::move(p)))
{
    if (planes.dim() != 3 || planes.size(0) != 2) {
        throw std::invalid_argument("DisplacementField2D expects a (2, H, W) tensor");
    }
}

DisplacementField2D DisplacementField2D::zeros(int64_t height, int64_t width)
{
    return DisplacementField2D(torch::zeros({2, height, width}, torch::kFloat64));
}

bool DisplacementField2D::all_finite() const
{
    return torch::isfinite(planes).all().item<bool>();
}

double DisplacementField2D::max_magnitude() const
{
    return planes.pow(2).sum(0).sqrt().max().item<double>();
}

void RegistrationPair::validate() const
{
    std::ostringstream msg;
    if (moving.height() != fixed.height() || moving.width() != fixed.width()) {
        msg << "pair " << pair_id << ": moving " << moving.height() << "x" << moving.width()
            << " vs fixed " << fixed.height() << "x" << fixed.width();
        throw std::invalid_argument(msg.str());
    }
    for (const auto* lm : {moving_labels ? &*moving_labels : nullptr, fixed_labels ? &*fixed_labels : nullptr}) {
        if (lm != nullptr && (lm->height() != fixed.height() || lm->width() != fixed.width())) {
            msg << "pair " << pair_id << ": label map " << lm->height() << "x" << lm->width()
                << " does not match image " << fixed.height() << "x" << fixed.width();
            throw std::invalid_argument(msg.str());
        }
    }
}

torch::ScalarType module_dtype(const torch::nn::Module& module)
{
    const auto params = module.parameters(true);
    return params.empty() ? torch::kFloat32 : params.front().scalar_type();
}

} // namespace ldmorph
