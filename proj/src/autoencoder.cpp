#include "ldmorph/autoencoder.hpp"

#include "ldmorph/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace ldmorph::ae {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1)
{
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

} // namespace

ResBlockImpl::ResBlockImpl(int64_t channels)
{
    conv1_ = register_module("conv1", conv3x3(channels, channels));
    conv2_ = register_module("conv2", conv3x3(channels, channels));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x)
{
    return x + conv2_(torch::silu(conv1_(torch::silu(x))));
}

AutoencoderImpl::AutoencoderImpl(const AutoencoderConfig& cfg) : cfg_(cfg)
{
    const auto c = cfg.channels;
    encoder_ = register_module("encoder", nn::Sequential(conv3x3(1, c), nn::SiLU(), conv3x3(c, c, 2), ResBlock(c),
                                                          conv3x3(c, c, 2), ResBlock(c), nn::SiLU(),
                                                          nn::Conv2d(nn::Conv2dOptions(c, cfg.latent_channels, 1))));
    decoder_ = register_module(
        "decoder", nn::Sequential(conv3x3(cfg.latent_channels, c), ResBlock(c),
                                  nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)),
                                  conv3x3(c, c), ResBlock(c),
                                  nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)),
                                  conv3x3(c, c), nn::SiLU(), conv3x3(c, 1)));
    if (cfg.vq_enabled) {
        codebook_ = register_module("codebook", nn::Embedding(cfg.codebook_size, cfg.latent_channels));
        torch::NoGradGuard no_grad;
        codebook_->weight.uniform_(-1.0 / static_cast<double>(cfg.codebook_size),
                                   1.0 / static_cast<double>(cfg.codebook_size));
    }
}

torch::Tensor AutoencoderImpl::encode_continuous(const torch::Tensor& images)
{
    if (images.dim() != 4 || images.size(1) != 1) {
        throw std::invalid_argument("encode: expected a (B, 1, H, W) batch");
    }
    if (images.size(2) % 4 != 0 || images.size(3) % 4 != 0) {
        throw std::invalid_argument("encode: image sides must be divisible by 4, got " +
                                    std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)));
    }
    return encoder_->forward(images);
}

torch::Tensor AutoencoderImpl::code_indices(const torch::Tensor& latents)
{
    if (!codebook_) {
        throw std::logic_error("code_indices: vector quantisation is disabled");
    }
    const auto c = latents.size(1);
    auto flat = latents.permute({0, 2, 3, 1}).reshape({-1, c});
    auto dist = torch::cdist(flat.detach(), codebook_->weight.detach());
    return dist.argmin(1).view({latents.size(0), latents.size(2), latents.size(3)});
}

std::pair<torch::Tensor, torch::Tensor> AutoencoderImpl::quantize(const torch::Tensor& z)
{
    auto idx = code_indices(z);
    auto q = codebook_->forward(idx).permute({0, 3, 1, 2});
    auto codebook_term = (q - z.detach()).pow(2).mean();
    auto commit_term = (z - q.detach()).pow(2).mean();
    // value is exactly q; gradient flows to z
    auto straight = q.detach() + (z - z.detach());
    return {straight, codebook_term + cfg_.commitment * commit_term};
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& images)
{
    auto z = encode_continuous(images);
    return cfg_.vq_enabled ? quantize(z).first : z;
}

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& latents)
{
    if (latents.dim() != 4 || latents.size(1) != cfg_.latent_channels) {
        throw std::invalid_argument("decode: expected latents with " + std::to_string(cfg_.latent_channels) +
                                    " channels");
    }
    return decoder_->forward(latents);
}

AutoencoderImpl::Output AutoencoderImpl::forward(const torch::Tensor& images)
{
    auto z = encode_continuous(images);
    Output out;
    if (cfg_.vq_enabled) {
        auto [q, loss] = quantize(z);
        out.latent = q;
        out.vq_loss = loss;
    } else {
        out.latent = z;
        out.vq_loss = torch::zeros({}, z.options());
    }
    out.reconstruction = decoder_->forward(out.latent);
    return out;
}

LatentGrid encode(const Image2D& image, Autoencoder& model)
{
    auto z = model->encode(image.batched(module_dtype(*model)));
    return {z.squeeze(0)};
}

Image2D decode(const LatentGrid& latent, Autoencoder& model)
{
    if (latent.values.dim() != 3) {
        throw std::invalid_argument("decode: latent must be (C, h, w)");
    }
    auto x = model->decode(latent.values.to(module_dtype(*model)).unsqueeze(0));
    return Image2D(x.squeeze(0).squeeze(0).detach());
}

torch::Tensor stack_images(const std::vector<Image2D>& images, torch::ScalarType dtype)
{
    std::vector<torch::Tensor> parts;
    parts.reserve(images.size());
    for (const auto& im : images) {
        parts.push_back(im.pixels.to(dtype).unsqueeze(0));
    }
    return torch::stack(parts);
}

double reconstruction_mse(Autoencoder& model, const std::vector<Image2D>& images)
{
    if (images.empty()) {
        return 0.0;
    }
    torch::NoGradGuard no_grad;
    const auto dtype = module_dtype(*model);
    double sum = 0.0;
    for (size_t start = 0; start < images.size(); start += 16) {
        std::vector<Image2D> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                   images.begin() + static_cast<std::ptrdiff_t>(std::min(start + 16, images.size())));
        auto x = stack_images(chunk, dtype);
        auto out = model->forward(x);
        sum += (out.reconstruction - x).pow(2).mean().item<double>() * static_cast<double>(chunk.size());
    }
    return sum / static_cast<double>(images.size());
}

TrainResult train_autoencoder(const std::vector<Image2D>& train, const std::vector<Image2D>& val,
                              const AutoencoderConfig& cfg, const TrainConfig& tc)
{
    if (train.empty()) {
        throw std::invalid_argument("train_autoencoder: empty training set");
    }
    torch::manual_seed(tc.seed);
    TrainResult result;
    result.model = Autoencoder(cfg);
    auto& model = result.model;
    const auto dtype = module_dtype(*model);
    torch::optim::Adam optim(model->parameters(), torch::optim::AdamOptions(tc.learning_rate));
    std::mt19937_64 rng(tc.seed);
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    std::ofstream curve;
    if (!tc.curve_path.empty()) {
        curve.open(tc.curve_path);
        curve << "epoch,train_mse,val_mse\n";
    }
    auto best_state = ckpt::snapshot(*model);
    double best = std::numeric_limits<double>::infinity();
    const auto batch = std::max<int64_t>(tc.batch_size, 1);
    for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
        model->train();
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
            std::vector<Image2D> chunk;
            for (size_t i = start; i < std::min(start + static_cast<size_t>(batch), order.size()); ++i) {
                chunk.push_back(train[order[i]]);
            }
            auto x = stack_images(chunk, dtype);
            auto out = model->forward(x);
            auto mse = (out.reconstruction - x).pow(2).mean();
            auto loss = mse + out.vq_loss;
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw RuntimeFailure("train_autoencoder: non-finite loss at epoch " + std::to_string(epoch));
            }
            optim.zero_grad();
            loss.backward();
            optim.step();
            epoch_sum += mse.item<double>() * static_cast<double>(chunk.size());
        }
        model->eval();
        const double train_mse = epoch_sum / static_cast<double>(train.size());
        const double val_mse = val.empty() ? train_mse : reconstruction_mse(model, val);
        result.train_loss.push_back(train_mse);
        result.val_loss.push_back(val_mse);
        if (curve.is_open()) {
            curve << epoch + 1 << "," << train_mse << "," << val_mse << "\n";
        }
        if (val_mse < best) {
            best = val_mse;
            result.best_epoch = epoch;
            best_state = ckpt::snapshot(*model);
        }
    }
    ckpt::restore(*model, best_state);
    model->eval();
    return result;
}

} // namespace ldmorph::ae
