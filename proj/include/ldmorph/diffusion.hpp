#pragma once

#include "ldmorph/autoencoder.hpp"
#include "ldmorph/types.hpp"

#include <filesystem>
#include <set>
#include <vector>

namespace ldmorph::diffusion {

/// Per-step variances indexed by t in [0, T]; index 0 is the clean state
/// (beta = 0, alpha_bar = 1).
struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar; ///< running product of (1 - beta)
    std::vector<double> sigma;     ///< reverse-step standard deviation

    /// Builds a schedule from betas for t = 1..T; each must lie in [0, 1].
    static NoiseSchedule from_betas(const std::vector<double>& betas);
};

/// Linear beta ramp from beta_start (t = 1) to beta_end (t = T).
NoiseSchedule make_schedule(int64_t T, double beta_start = 1e-4, double beta_end = 0.02);

/// One forward Markov step: sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps.
torch::Tensor forward_step(const torch::Tensor& z_prev, int64_t t, const torch::Tensor& eps,
                           const NoiseSchedule& schedule);

/// Closed-form jump: sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
torch::Tensor q_sample(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps, const NoiseSchedule& schedule);

/// (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t)
torch::Tensor reverse_mean(const torch::Tensor& z_t, int64_t t, const torch::Tensor& eps_hat,
                           const NoiseSchedule& schedule);

struct DenoiserConfig {
    int64_t latent_channels = 4;
    int64_t width = 64;
    int64_t levels = 4;
    int64_t layers_per_level = 3;
    int64_t time_dim = 128;
};

/// Sinusoidal embedding of integer steps (B) -> (B, dim).
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

class TimeResBlockImpl : public torch::nn::Module {
public:
    TimeResBlockImpl(int64_t channels, int64_t time_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(TimeResBlock);

/// Noise-prediction U-Net. The encoder has `levels` resolution levels with
/// `layers_per_level` time-conditioned residual layers each; level i runs at
/// 1/2^(i-1) of the latent resolution.
class DenoiserUNetImpl : public torch::nn::Module {
public:
    explicit DenoiserUNetImpl(const DenoiserConfig& cfg = {});

    /// z (B, C, h, w), t (B) int64 -> predicted noise shaped like z.
    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t);
    /// Encoder-only pass; returns one feature map per level, finest first.
    std::vector<torch::Tensor> encode_features(const torch::Tensor& z, const torch::Tensor& t);

    const DenoiserConfig& config() const { return cfg_; }

private:
    struct EncoderPass {
        std::vector<torch::Tensor> features;
        torch::Tensor temb;
    };
    EncoderPass run_encoder(const torch::Tensor& z, const torch::Tensor& t);

    DenoiserConfig cfg_;
    torch::nn::Sequential time_mlp_{nullptr};
    torch::nn::Conv2d in_conv_{nullptr};
    std::vector<std::vector<TimeResBlock>> down_blocks_;
    std::vector<torch::nn::Conv2d> downsample_;
    TimeResBlock mid_{nullptr};
    std::vector<torch::nn::Conv2d> up_merge_;
    std::vector<TimeResBlock> up_blocks_;
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(DenoiserUNet);

struct DiffusionState {
    torch::Tensor z;
    int64_t t = 0;
};

/// eps_hat = denoiser(z, t) with range checking on t.
torch::Tensor denoiser_predict(const DiffusionState& state, DenoiserUNet& model, const NoiseSchedule& schedule);

/// z_{t-1} = reverse_mean + sigma_t * noise
DiffusionState ddpm_reverse_step(const DiffusionState& state, DenoiserUNet& model, const NoiseSchedule& schedule,
                                 const torch::Tensor& noise);

/// Deterministic DDIM trajectory from z0 up to t_target, one native step at a
/// time, using the model's own prediction at each step.
DiffusionState ddim_invert(const torch::Tensor& z0, int64_t t_target, DenoiserUNet& model,
                           const NoiseSchedule& schedule);

/// Deterministic DDIM denoising from state.t down to t = 0.
torch::Tensor ddim_denoise(const DiffusionState& state, DenoiserUNet& model, const NoiseSchedule& schedule);

struct LdmTrainConfig {
    int64_t epochs = 30;
    int64_t batch_size = 16;
    double learning_rate = 1e-3;
    uint64_t seed = 0;
    std::filesystem::path curve_path;
};

struct LdmTrainResult {
    DenoiserUNet model{nullptr};
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    int64_t best_epoch = -1;
};

/// Minimises E||eps - eps_theta(z_t, t)||^2 with t uniform on {1..T}.
/// `latents` and `val_latents` are (N, C, h, w).
LdmTrainResult train_ldm(const torch::Tensor& latents, const torch::Tensor& val_latents,
                         const DenoiserConfig& cfg, const NoiseSchedule& schedule, const LdmTrainConfig& tc);

/// Frozen latent-diffusion feature extractor.
struct FeatureExtractor {
    ae::Autoencoder autoencoder{nullptr};
    DenoiserUNet denoiser{nullptr};
    NoiseSchedule schedule;
    int64_t t = 1;
    std::set<int64_t> layers{1, 3}; ///< 1-based encoder levels

    /// Channel-concatenated features [f_M | f_F] per requested level,
    /// finest first. Inputs are (B, 1, H, W).
    FeaturePyramid extract(const torch::Tensor& moving, const torch::Tensor& fixed);
    /// Per-level channel count of the extracted features.
    int64_t feature_channels() const;
    /// Image pixels per feature pixel for each requested level.
    std::vector<int64_t> feature_scales() const;
};

FeaturePyramid extract_features(const Image2D& moving, const Image2D& fixed, FeatureExtractor& extractor);

} // namespace ldmorph::diffusion
