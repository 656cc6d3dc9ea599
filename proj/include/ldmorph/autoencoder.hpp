#pragma once

#include "ldmorph/types.hpp"

#include <filesystem>
#include <vector>

namespace ldmorph::ae {

/// Spatial reduction of the encoder (two stride-2 stages).
inline constexpr int64_t kDownsample = 4;

struct AutoencoderConfig {
    int64_t channels = 64;
    int64_t latent_channels = 4;
    bool vq_enabled = false;
    int64_t codebook_size = 256;
    double commitment = 0.25;
};

/// x + conv(silu(conv(silu(x))))
class ResBlockImpl : public torch::nn::Module {
public:
    explicit ResBlockImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Image <-> latent map with exactly 4x spatial compression: two stride-2
/// stages with one residual block each, optional vector quantisation.
class AutoencoderImpl : public torch::nn::Module {
public:
    explicit AutoencoderImpl(const AutoencoderConfig& cfg = {});

    /// (B, 1, H, W) -> (B, latent_channels, H/4, W/4). With vector
    /// quantisation enabled the values are exact codebook entries and the
    /// gradient passes straight through to the continuous latent.
    torch::Tensor encode(const torch::Tensor& images);
    torch::Tensor decode(const torch::Tensor& latents);

    struct Output {
        torch::Tensor reconstruction;
        torch::Tensor latent;
        torch::Tensor vq_loss; ///< zero when quantisation is disabled
    };
    Output forward(const torch::Tensor& images);

    const AutoencoderConfig& config() const { return cfg_; }
    /// Nearest-codebook indices for continuous latents (B, C, h, w) -> (B, h, w).
    torch::Tensor code_indices(const torch::Tensor& latents);

private:
    torch::Tensor encode_continuous(const torch::Tensor& images);
    std::pair<torch::Tensor, torch::Tensor> quantize(const torch::Tensor& z);

    AutoencoderConfig cfg_;
    torch::nn::Sequential encoder_{nullptr};
    torch::nn::Sequential decoder_{nullptr};
    torch::nn::Embedding codebook_{nullptr};
};
TORCH_MODULE(Autoencoder);

LatentGrid encode(const Image2D& image, Autoencoder& model);
Image2D decode(const LatentGrid& latent, Autoencoder& model);

struct TrainConfig {
    int64_t epochs = 20;
    int64_t batch_size = 8;
    double learning_rate = 1e-3;
    uint64_t seed = 0;
    std::filesystem::path curve_path; ///< CSV training curve; empty disables
};

struct TrainResult {
    Autoencoder model{nullptr};
    std::vector<double> train_loss; ///< per epoch
    std::vector<double> val_loss;   ///< per epoch
    int64_t best_epoch = -1;        ///< -1 when no epoch ran
};

/// Reconstruction-MSE training; returns the lowest-validation checkpoint.
TrainResult train_autoencoder(const std::vector<Image2D>& train, const std::vector<Image2D>& val,
                              const AutoencoderConfig& cfg, const TrainConfig& tc);

/// Mean reconstruction MSE over a set of images.
double reconstruction_mse(Autoencoder& model, const std::vector<Image2D>& images);

/// Stacks images into a (N, 1, H, W) float batch of the given dtype.
torch::Tensor stack_images(const std::vector<Image2D>& images, torch::ScalarType dtype = torch::kFloat32);

} // namespace ldmorph::ae
