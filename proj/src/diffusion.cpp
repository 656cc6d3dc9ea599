#include "ldmorph/diffusion.hpp"

#include "ldmorph/checkpoint.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace ldmorph::diffusion {

namespace nn = torch::nn;

namespace {

void check_step(int64_t t, const NoiseSchedule& schedule, const char* who)
{
    if (t < 1 || t > schedule.T) {
        std::ostringstream msg;
        msg << who << ": step " << t << " outside [1, " << schedule.T << "]";
        throw std::invalid_argument(msg.str());
    }
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* who)
{
    if (a.sizes() != b.sizes()) {
        std::ostringstream msg;
        msg << who << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
        throw std::invalid_argument(msg.str());
    }
}

int64_t group_count(int64_t channels)
{
    return channels % 8 == 0 ? 8 : 1;
}

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1)
{
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::Tensor step_tensor(int64_t t, int64_t batch)
{
    return torch::full({batch}, t, torch::kInt64);
}

} // namespace

NoiseSchedule NoiseSchedule::from_betas(const std::vector<double>& betas)
{
    if (betas.empty()) {
        throw std::invalid_argument("noise schedule needs at least one step");
    }
    NoiseSchedule s;
    s.T = static_cast<int64_t>(betas.size());
    s.beta.assign(1, 0.0);
    s.alpha_bar.assign(1, 1.0);
    s.sigma.assign(1, 0.0);
    for (auto b : betas) {
        if (!(b >= 0.0 && b <= 1.0)) {
            throw std::invalid_argument("noise schedule: beta must lie in [0, 1]");
        }
        s.beta.push_back(b);
        s.alpha_bar.push_back(s.alpha_bar.back() * (1.0 - b));
        s.sigma.push_back(std::sqrt(b));
    }
    return s;
}

NoiseSchedule make_schedule(int64_t T, double beta_start, double beta_end)
{
    if (T < 1) {
        throw std::invalid_argument("make_schedule: T must be >= 1");
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(T);
    for (int64_t t = 1; t <= T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        betas[t - 1] = beta_start + (beta_end - beta_start) * frac;
    }
    return NoiseSchedule::from_betas(betas);
}

torch::Tensor forward_step(const torch::Tensor& z_prev, int64_t t, const torch::Tensor& eps,
                           const NoiseSchedule& schedule)
{
    check_step(t, schedule, "forward_step");
    check_same_shape(z_prev, eps, "forward_step");
    return std::sqrt(1.0 - schedule.beta[t]) * z_prev + std::sqrt(schedule.beta[t]) * eps;
}

torch::Tensor q_sample(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps, const NoiseSchedule& schedule)
{
    check_step(t, schedule, "q_sample");
    check_same_shape(z0, eps, "q_sample");
    const double a = schedule.alpha_bar[t];
    return std::sqrt(a) * z0 + std::sqrt(1.0 - a) * eps;
}

torch::Tensor reverse_mean(const torch::Tensor& z_t, int64_t t, const torch::Tensor& eps_hat,
                           const NoiseSchedule& schedule)
{
    check_step(t, schedule, "reverse_mean");
    check_same_shape(z_t, eps_hat, "reverse_mean");
    const double b = schedule.beta[t];
    const double one_minus_a = 1.0 - schedule.alpha_bar[t];
    if (b == 0.0) {
        return z_t.clone();
    }
    if (!(one_minus_a > 0.0) || b >= 1.0) {
        throw std::invalid_argument("reverse_mean: degenerate schedule at step " + std::to_string(t));
    }
    return (z_t - (b / std::sqrt(one_minus_a)) * eps_hat) / std::sqrt(1.0 - b);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim)
{
    const auto half = dim / 2;
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / static_cast<double>(half));
    auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
    if (dim % 2 == 1) {
        emb = torch::cat({emb, torch::zeros({t.size(0), 1}, torch::kFloat64)}, 1);
    }
    return emb;
}

TimeResBlockImpl::TimeResBlockImpl(int64_t channels, int64_t time_dim)
{
    norm1_ = register_module("norm1", nn::GroupNorm(group_count(channels), channels));
    conv1_ = register_module("conv1", conv3x3(channels, channels));
    time_proj_ = register_module("time_proj", nn::Linear(time_dim, channels));
    norm2_ = register_module("norm2", nn::GroupNorm(group_count(channels), channels));
    conv2_ = register_module("conv2", conv3x3(channels, channels));
}

torch::Tensor TimeResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb)
{
    auto h = conv1_(torch::silu(norm1_(x)));
    h = h + time_proj_(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2_(torch::silu(norm2_(h)));
    return x + h;
}

DenoiserUNetImpl::DenoiserUNetImpl(const DenoiserConfig& cfg) : cfg_(cfg)
{
    if (cfg.levels < 1 || cfg.layers_per_level < 1) {
        throw std::invalid_argument("DenoiserUNet: need at least one level and one layer per level");
    }
    const auto w = cfg.width;
    time_mlp_ = register_module(
        "time_mlp", nn::Sequential(nn::Linear(cfg.time_dim, cfg.time_dim), nn::SiLU(), nn::Linear(cfg.time_dim, cfg.time_dim)));
    in_conv_ = register_module("in_conv", conv3x3(cfg.latent_channels, w));
    for (int64_t level = 0; level < cfg.levels; ++level) {
        std::vector<TimeResBlock> blocks;
        for (int64_t layer = 0; layer < cfg.layers_per_level; ++layer) {
            blocks.push_back(register_module("down" + std::to_string(level) + "_" + std::to_string(layer),
                                             TimeResBlock(w, cfg.time_dim)));
        }
        down_blocks_.push_back(std::move(blocks));
        if (level + 1 < cfg.levels) {
            downsample_.push_back(register_module("downsample" + std::to_string(level), conv3x3(w, w, 2)));
        }
    }
    mid_ = register_module("mid", TimeResBlock(w, cfg.time_dim));
    for (int64_t level = 0; level < cfg.levels; ++level) {
        up_merge_.push_back(register_module("up_merge" + std::to_string(level), conv3x3(2 * w, w)));
        up_blocks_.push_back(register_module("up" + std::to_string(level), TimeResBlock(w, cfg.time_dim)));
    }
    out_norm_ = register_module("out_norm", nn::GroupNorm(group_count(w), w));
    out_conv_ = register_module("out_conv", conv3x3(w, cfg.latent_channels));
}

DenoiserUNetImpl::EncoderPass DenoiserUNetImpl::run_encoder(const torch::Tensor& z, const torch::Tensor& t)
{
    if (z.dim() != 4 || z.size(1) != cfg_.latent_channels) {
        throw std::invalid_argument("denoiser: expected latents (B, " + std::to_string(cfg_.latent_channels) +
                                    ", h, w)");
    }
    EncoderPass pass;
    pass.temb = time_mlp_->forward(timestep_embedding(t, cfg_.time_dim).to(z.scalar_type()));
    auto h = in_conv_(z);
    for (int64_t level = 0; level < cfg_.levels; ++level) {
        for (auto& block : down_blocks_[level]) {
            h = block(h, pass.temb);
        }
        pass.features.push_back(h);
        if (level + 1 < cfg_.levels) {
            h = downsample_[level](h);
        }
    }
    return pass;
}

std::vector<torch::Tensor> DenoiserUNetImpl::encode_features(const torch::Tensor& z, const torch::Tensor& t)
{
    return run_encoder(z, t).features;
}

torch::Tensor DenoiserUNetImpl::forward(const torch::Tensor& z, const torch::Tensor& t)
{
    auto pass = run_encoder(z, t);
    auto h = mid_(pass.features.back(), pass.temb);
    for (int64_t level = cfg_.levels - 1; level >= 0; --level) {
        const auto& skip = pass.features[level];
        if (h.size(2) != skip.size(2) || h.size(3) != skip.size(3)) {
            h = torch::nn::functional::interpolate(
                h, torch::nn::functional::InterpolateFuncOptions()
                       .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                       .mode(torch::kNearest));
        }
        h = up_merge_[level](torch::cat({h, skip}, 1));
        h = up_blocks_[level](h, pass.temb);
    }
    return out_conv_(torch::silu(out_norm_(h)));
}

torch::Tensor denoiser_predict(const DiffusionState& state, DenoiserUNet& model, const NoiseSchedule& schedule)
{
    check_step(state.t, schedule, "denoiser_predict");
    return model->forward(state.z, step_tensor(state.t, state.z.size(0)));
}

DiffusionState ddpm_reverse_step(const DiffusionState& state, DenoiserUNet& model, const NoiseSchedule& schedule,
                                 const torch::Tensor& noise)
{
    check_step(state.t, schedule, "ddpm_reverse_step");
    auto eps_hat = denoiser_predict(state, model, schedule);
    auto mean = reverse_mean(state.z, state.t, eps_hat, schedule);
    return {mean + schedule.sigma[state.t] * noise, state.t - 1};
}

DiffusionState ddim_invert(const torch::Tensor& z0, int64_t t_target, DenoiserUNet& model,
                           const NoiseSchedule& schedule)
{
    check_step(t_target, schedule, "ddim_invert");
    auto z = z0;
    for (int64_t t = 1; t <= t_target; ++t) {
        const double a_prev = schedule.alpha_bar[t - 1];
        const double a = schedule.alpha_bar[t];
        auto eps = model->forward(z, step_tensor(t, z.size(0)));
        auto x0 = (z - std::sqrt(1.0 - a_prev) * eps) / std::sqrt(a_prev);
        z = std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
    }
    return {z, t_target};
}

torch::Tensor ddim_denoise(const DiffusionState& state, DenoiserUNet& model, const NoiseSchedule& schedule)
{
    if (state.t < 0 || state.t > schedule.T) {
        throw std::invalid_argument("ddim_denoise: step out of range");
    }
    auto z = state.z;
    for (int64_t t = state.t; t >= 1; --t) {
        const double a_prev = schedule.alpha_bar[t - 1];
        const double a = schedule.alpha_bar[t];
        auto eps = model->forward(z, step_tensor(t, z.size(0)));
        auto x0 = (z - std::sqrt(1.0 - a) * eps) / std::sqrt(a);
        z = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps;
    }
    return z;
}

namespace {

double noise_prediction_loss(DenoiserUNet& model, const torch::Tensor& z0, const NoiseSchedule& schedule,
                             at::Generator& gen, bool with_grad, torch::Tensor* loss_out)
{
    auto t = torch::randint(1, schedule.T + 1, {z0.size(0)}, gen, torch::kInt64);
    auto eps = torch::randn(z0.sizes(), gen, z0.options());
    std::vector<double> sa(z0.size(0));
    std::vector<double> sb(z0.size(0));
    const auto* tp = t.data_ptr<int64_t>();
    for (int64_t i = 0; i < z0.size(0); ++i) {
        sa[i] = std::sqrt(schedule.alpha_bar[tp[i]]);
        sb[i] = std::sqrt(1.0 - schedule.alpha_bar[tp[i]]);
    }
    auto ca = torch::tensor(sa, z0.options()).view({-1, 1, 1, 1});
    auto cb = torch::tensor(sb, z0.options()).view({-1, 1, 1, 1});
    auto z_t = ca * z0 + cb * eps;
    if (!with_grad) {
        torch::NoGradGuard no_grad;
        return (model->forward(z_t, t) - eps).pow(2).mean().item<double>();
    }
    auto loss = (model->forward(z_t, t) - eps).pow(2).mean();
    *loss_out = loss;
    return loss.item<double>();
}

} // namespace

LdmTrainResult train_ldm(const torch::Tensor& latents, const torch::Tensor& val_latents, const DenoiserConfig& cfg,
                         const NoiseSchedule& schedule, const LdmTrainConfig& tc)
{
    if (latents.dim() != 4 || latents.size(0) == 0) {
        throw std::invalid_argument("train_ldm: expected a non-empty (N, C, h, w) latent batch");
    }
    torch::manual_seed(tc.seed);
    LdmTrainResult result;
    result.model = DenoiserUNet(cfg);
    auto& model = result.model;
    const auto dtype = module_dtype(*model);
    const auto data = latents.detach().to(dtype);
    const auto val = val_latents.defined() && val_latents.numel() > 0 ? val_latents.detach().to(dtype) : data;
    torch::optim::Adam optim(model->parameters(), torch::optim::AdamOptions(tc.learning_rate));
    auto gen = at::make_generator<at::CPUGeneratorImpl>(tc.seed);
    std::mt19937_64 rng(tc.seed);
    std::vector<int64_t> order(data.size(0));
    std::iota(order.begin(), order.end(), 0);

    std::ofstream curve;
    if (!tc.curve_path.empty()) {
        curve.open(tc.curve_path);
        curve << "epoch,train_loss,val_loss\n";
    }
    auto best_state = ckpt::snapshot(*model);
    double best = std::numeric_limits<double>::infinity();
    const auto batch = std::max<int64_t>(tc.batch_size, 1);
    for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        for (int64_t start = 0; start < data.size(0); start += batch) {
            const auto stop = std::min(start + batch, data.size(0));
            std::vector<int64_t> idx(order.begin() + start, order.begin() + stop);
            auto z0 = data.index_select(0, torch::tensor(idx, torch::kInt64));
            torch::Tensor loss;
            const double value = noise_prediction_loss(model, z0, schedule, gen, true, &loss);
            if (!std::isfinite(value)) {
                throw RuntimeFailure("train_ldm: non-finite loss at epoch " + std::to_string(epoch));
            }
            optim.zero_grad();
            loss.backward();
            optim.step();
            sum += value * static_cast<double>(stop - start);
        }
        const double train_loss = sum / static_cast<double>(data.size(0));
        // fixed draws so validation losses are comparable across epochs
        auto val_gen = at::make_generator<at::CPUGeneratorImpl>(tc.seed ^ 0x5EEDULL);
        double val_loss = 0.0;
        for (int rep = 0; rep < 4; ++rep) {
            val_loss += noise_prediction_loss(model, val, schedule, val_gen, false, nullptr) / 4.0;
        }
        result.train_loss.push_back(train_loss);
        result.val_loss.push_back(val_loss);
        if (curve.is_open()) {
            curve << epoch + 1 << "," << train_loss << "," << val_loss << "\n";
        }
        if (val_loss < best) {
            best = val_loss;
            result.best_epoch = epoch;
            best_state = ckpt::snapshot(*model);
        }
    }
    ckpt::restore(*model, best_state);
    model->eval();
    return result;
}

FeaturePyramid FeatureExtractor::extract(const torch::Tensor& moving, const torch::Tensor& fixed)
{
    if (!autoencoder || !denoiser) {
        throw std::logic_error("FeatureExtractor: models not loaded");
    }
    const auto levels = denoiser->config().levels;
    for (auto l : layers) {
        if (l < 1 || l > levels) {
            throw std::invalid_argument("extract_features: level " + std::to_string(l) + " outside [1, " +
                                        std::to_string(levels) + "]");
        }
    }
    torch::NoGradGuard no_grad;
    const auto dtype = module_dtype(*denoiser);
    auto run = [&](const torch::Tensor& image) {
        auto z0 = autoencoder->encode(image.to(module_dtype(*autoencoder))).to(dtype);
        auto state = ddim_invert(z0, t, denoiser, schedule);
        return denoiser->encode_features(state.z, step_tensor(t, z0.size(0)));
    };
    auto fm = run(moving);
    auto ff = run(fixed);
    FeaturePyramid out;
    out.stream = FeaturePyramid::Stream::Latent;
    for (auto l : layers) {
        out.levels.push_back(torch::cat({fm[l - 1], ff[l - 1]}, 1));
    }
    return out;
}

int64_t FeatureExtractor::feature_channels() const
{
    return 2 * denoiser->config().width;
}

std::vector<int64_t> FeatureExtractor::feature_scales() const
{
    std::vector<int64_t> out;
    for (auto l : layers) {
        out.push_back(ae::kDownsample << (l - 1));
    }
    return out;
}

FeaturePyramid extract_features(const Image2D& moving, const Image2D& fixed, FeatureExtractor& extractor)
{
    return extractor.extract(moving.batched(), fixed.batched());
}

} // namespace ldmorph::diffusion
