// Small trained models shared by several test binaries.
#pragma once

#include "ldmorph/diffusion.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace fixture {

/// Smooth random latents (N, C, side, side): noise blurred by 3x3 averaging.
inline torch::Tensor smooth_latents(int64_t n, int64_t channels, int64_t side, uint64_t seed)
{
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto z = torch::randn({n, channels, side, side}, gen, torch::kFloat32);
    z = torch::avg_pool2d(z, 3, 1, 1, false, false);
    return z / z.std();
}

inline ldmorph::diffusion::DenoiserConfig toy_denoiser_config()
{
    ldmorph::diffusion::DenoiserConfig cfg;
    cfg.latent_channels = 4;
    cfg.width = 16;
    cfg.levels = 4;
    cfg.layers_per_level = 1;
    cfg.time_dim = 32;
    return cfg;
}

/// Denoiser trained for a few epochs on 32x32 latents under a T = 200 schedule.
struct ToyDiffusion {
    ldmorph::diffusion::NoiseSchedule schedule;
    ldmorph::diffusion::DenoiserUNet model{nullptr};
    torch::Tensor latents;
    ldmorph::diffusion::LdmTrainResult result;
};

inline ToyDiffusion train_toy_diffusion(int64_t epochs = 8)
{
    using namespace ldmorph::diffusion;
    ToyDiffusion out;
    out.schedule = make_schedule(200);
    out.latents = smooth_latents(24, 4, 32, 77);
    LdmTrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 8;
    tc.learning_rate = 2e-3;
    tc.seed = 5;
    out.result = train_ldm(out.latents.narrow(0, 0, 20), out.latents.narrow(0, 20, 4), toy_denoiser_config(),
                           out.schedule, tc);
    out.model = out.result.model;
    out.model->eval();
    return out;
}

} // namespace fixture

#include "ldmorph/loss.hpp"
#include "ldmorph/regnet.hpp"

namespace fixture {

/// One-level registration network on 16x16 images, float64, with a
/// randomised head so every parameter receives gradient.
struct MiniRegistration {
    ldmorph::regnet::RegNet net{nullptr};
    ldmorph::ae::Autoencoder encoder{nullptr};
    ldmorph::FeaturePyramid features;
    torch::Tensor moving, fixed;

    torch::Tensor loss()
    {
        auto field = net->forward(moving, fixed, features);
        auto enc = [this](const torch::Tensor& x) { return encoder->encode(x); };
        return ldmorph::loss::loss_total(moving, fixed, field, enc, ldmorph::loss::LossWeights{}).total;
    }
};

inline MiniRegistration mini_registration(uint64_t seed = 0)
{
    using namespace ldmorph;
    torch::manual_seed(seed);
    MiniRegistration m;
    regnet::RegNetConfig cfg;
    cfg.levels = 1;
    cfg.widths = {8};
    cfg.heads = {2};
    cfg.patch_stride = 4;
    cfg.window = 4;
    cfg.mlp_ratio = 2.0;
    cfg.decoder_width = 8;
    cfg.feature_channels = 6;
    cfg.feature_scales = {4};
    m.net = regnet::RegNet(cfg);
    m.net->to(torch::kFloat64);
    {
        torch::NoGradGuard guard;
        for (auto& p : m.net->named_parameters(true)) {
            if (p.key().rfind("head.", 0) == 0) {
                p.value().normal_(0.0, 0.3);
            }
        }
    }
    ae::AutoencoderConfig ac;
    ac.channels = 4;
    m.encoder = ae::Autoencoder(ac);
    m.encoder->to(torch::kFloat64);
    m.encoder->eval();
    for (auto& p : m.encoder->parameters()) {
        p.set_requires_grad(false);
    }
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed + 100);
    m.moving = torch::rand({1, 1, 16, 16}, gen, torch::kFloat64);
    m.fixed = torch::rand({1, 1, 16, 16}, gen, torch::kFloat64);
    m.features.levels = {torch::randn({1, 6, 4, 4}, gen, torch::kFloat64)};
    m.features.stream = FeaturePyramid::Stream::Latent;
    return m;
}

} // namespace fixture
