#include "fixtures.hpp"
#include "oracles.hpp"

#include "ldmorph/checkpoint.hpp"
#include "ldmorph/diffusion.hpp"

#include "doctest_torch.hpp"

using namespace ldmorph;
using namespace ldmorph::diffusion;

namespace {

// Tiny untrained autoencoder/denoiser pair for extraction shape checks.
FeatureExtractor tiny_extractor(int64_t levels = 4)
{
    torch::manual_seed(10);
    FeatureExtractor fx;
    ae::AutoencoderConfig ac;
    ac.channels = 8;
    fx.autoencoder = ae::Autoencoder(ac);
    auto dc = fixture::toy_denoiser_config();
    dc.levels = levels;
    fx.denoiser = DenoiserUNet(dc);
    fx.autoencoder->eval();
    fx.denoiser->eval();
    fx.schedule = make_schedule(200);
    return fx;
}

} // namespace

TEST_CASE("schedule: degenerate, hand product and recurrence")
{
    auto zero = NoiseSchedule::from_betas(std::vector<double>(5, 0.0));
    for (int64_t t = 0; t <= 5; ++t) {
        CHECK(zero.alpha_bar[t] == 1.0);
    }
    auto half = NoiseSchedule::from_betas({0.5, 0.5});
    CHECK(half.alpha_bar[2] == doctest::Approx(0.25).epsilon(1e-12));

    auto s = make_schedule(1000);
    CHECK(s.beta[1] == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.beta[1000] == doctest::Approx(0.02).epsilon(1e-12));
    double running = 1.0;
    for (int64_t t = 1; t <= 1000; ++t) {
        running *= 1.0 - s.beta[t];
        CHECK(s.alpha_bar[t] == s.alpha_bar[t - 1] * (1.0 - s.beta[t]));
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        CHECK(s.sigma[t] == std::sqrt(s.beta[t]));
    }
    CHECK(s.alpha_bar[1000] == doctest::Approx(running).epsilon(1e-12));
    CHECK(s.alpha_bar[1000] < 0.01);

    CHECK_THROWS_AS(make_schedule(0), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({0.5, 1.5}), std::invalid_argument);
}

TEST_CASE("q_sample: trivial cases and hand value")
{
    auto s = make_schedule(50);
    auto z0 = torch::randn({3, 4, 4}, torch::kFloat64);
    auto eps = torch::randn({3, 4, 4}, torch::kFloat64);
    CHECK(torch::allclose(q_sample(z0, 7, torch::zeros_like(z0), s), std::sqrt(s.alpha_bar[7]) * z0, 0, 1e-15));
    CHECK(torch::allclose(q_sample(torch::zeros_like(z0), 7, eps, s), std::sqrt(1 - s.alpha_bar[7]) * eps, 0, 1e-15));

    auto half = NoiseSchedule::from_betas({0.5, 0.5});
    auto one = torch::ones({1}, torch::kFloat64);
    CHECK(q_sample(one, 2, one, half).item<double>() == doctest::Approx(1.3660254).epsilon(1e-6));
    CHECK_THROWS_AS(q_sample(z0, 0, eps, s), std::invalid_argument);
    CHECK_THROWS_AS(q_sample(z0, 51, eps, s), std::invalid_argument);
    CHECK_THROWS_AS(q_sample(z0, 3, torch::zeros({2}), s), std::invalid_argument);
}

TEST_CASE("reverse_mean: trivial cases and hand value")
{
    auto z = torch::randn({5}, torch::kFloat64);
    auto e = torch::randn({5}, torch::kFloat64);
    auto zero = NoiseSchedule::from_betas({0.0, 0.0});
    CHECK(torch::equal(reverse_mean(z, 1, e, zero), z));
    auto s = make_schedule(20);
    CHECK(torch::allclose(reverse_mean(z, 4, torch::zeros_like(z), s), z / std::sqrt(1 - s.beta[4]), 0, 1e-15));
    auto half = NoiseSchedule::from_betas({0.5});
    auto one = torch::ones({1}, torch::kFloat64);
    CHECK(reverse_mean(one, 1, one, half).item<double>() == doctest::Approx(0.41421356).epsilon(1e-6));
}

TEST_CASE("forward chain matches the closed form statistically")
{
    auto s = make_schedule(200);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(99);
    const int64_t draws = 20000;
    auto z0 = torch::full({draws}, 2.0, torch::kFloat64);
    auto z = z0.clone();
    for (int64_t t = 1; t <= 40; ++t) {
        z = forward_step(z, t, torch::randn({draws}, gen, torch::kFloat64), s);
    }
    const double mean = std::sqrt(s.alpha_bar[40]) * 2.0;
    const double sd = std::sqrt(1.0 - s.alpha_bar[40]);
    CHECK(z.mean().item<double>() == doctest::Approx(mean).epsilon(0.02));
    CHECK(z.std(false).item<double>() == doctest::Approx(sd).epsilon(0.02));
}

TEST_CASE("denoiser: shape, determinism, live time embedding, step range")
{
    torch::manual_seed(3);
    DenoiserUNet net(fixture::toy_denoiser_config());
    net->eval();
    auto s = make_schedule(200);
    auto z = fixture::smooth_latents(2, 4, 16, 1);
    auto a = denoiser_predict({z, 5}, net, s);
    CHECK(a.sizes() == z.sizes());
    CHECK(torch::equal(a, denoiser_predict({z, 5}, net, s)));
    auto b = denoiser_predict({z, 150}, net, s);
    CHECK((a - b).abs().max().item<double>() > 0.0);
    CHECK_THROWS_AS(denoiser_predict({z, 0}, net, s), std::invalid_argument);
    CHECK_THROWS_AS(denoiser_predict({z, 201}, net, s), std::invalid_argument);

    auto feats = net->encode_features(z, torch::full({2}, 1, torch::kInt64));
    REQUIRE(feats.size() == 4);
    for (size_t i = 0; i < feats.size(); ++i) {
        CHECK(feats[i].size(2) == 16 >> i);
    }
}

TEST_CASE("ddpm step: zero noise equals reverse mean, terminal tag")
{
    torch::manual_seed(4);
    DenoiserUNet net(fixture::toy_denoiser_config());
    net->eval();
    torch::NoGradGuard guard;
    auto s = make_schedule(200);
    auto z = fixture::smooth_latents(1, 4, 8, 2);
    auto step = ddpm_reverse_step({z, 9}, net, s, torch::zeros_like(z));
    auto eps = denoiser_predict({z, 9}, net, s);
    CHECK(torch::equal(step.z, reverse_mean(z, 9, eps, s)));
    CHECK(step.t == 8);
    CHECK(ddpm_reverse_step({z, 1}, net, s, torch::zeros_like(z)).t == 0);
}

TEST_CASE("training: zero learning rate leaves parameters unchanged")
{
    auto lat = fixture::smooth_latents(4, 4, 8, 3);
    LdmTrainConfig tc;
    tc.epochs = 2;
    tc.learning_rate = 0.0;
    tc.seed = 12;
    auto res = train_ldm(lat, {}, fixture::toy_denoiser_config(), make_schedule(50), tc);
    torch::manual_seed(12);
    DenoiserUNet ref(fixture::toy_denoiser_config());
    auto a = ckpt::snapshot(*res.model);
    auto b = ckpt::snapshot(*ref);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(torch::equal(a[i], b[i]));
    }
}

TEST_CASE("training: memorises one latent")
{
    auto lat = fixture::smooth_latents(1, 4, 8, 4);
    LdmTrainConfig tc;
    tc.epochs = 600;
    tc.batch_size = 1;
    tc.learning_rate = 2e-3;
    auto res = train_ldm(lat.expand({16, 4, 8, 8}).contiguous(), {}, fixture::toy_denoiser_config(),
                         make_schedule(200), tc);
    double tail = 0.0;
    for (size_t i = res.train_loss.size() - 50; i < res.train_loss.size(); ++i) {
        tail += res.train_loss[i] / 50.0;
    }
    MESSAGE("memorisation loss " << tail);
    CHECK(tail < 0.1);
}

TEST_CASE("training: loss trend over five seeds")
{
    auto lat = fixture::smooth_latents(16, 4, 16, 5);
    double first = 0.0, last = 0.0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        LdmTrainConfig tc;
        tc.epochs = 6;
        tc.batch_size = 4;
        tc.seed = seed;
        auto res = train_ldm(lat, {}, fixture::toy_denoiser_config(), make_schedule(200), tc);
        first += res.train_loss.front();
        last += res.train_loss.back();
    }
    CHECK(last < first);
}

TEST_CASE("ddim: determinism, round trip and sampling chain on a trained toy model")
{
    auto toy = fixture::train_toy_diffusion();
    torch::NoGradGuard guard;
    auto z0 = toy.latents.narrow(0, 20, 2);
    auto inv = ddim_invert(z0, 1, toy.model, toy.schedule);
    CHECK(inv.t == 1);
    CHECK(torch::equal(inv.z, ddim_invert(z0, 1, toy.model, toy.schedule).z));
    auto back = ddim_denoise(inv, toy.model, toy.schedule);
    const double rel = ((back - z0).norm() / z0.norm()).item<double>();
    MESSAGE("round-trip relative error " << rel);
    CHECK(rel <= 1e-3);

    // ten stochastic steps from pure noise stay finite
    auto gen = at::make_generator<at::CPUGeneratorImpl>(8);
    DiffusionState st{torch::randn({1, 4, 32, 32}, gen, torch::kFloat32), 10};
    while (st.t > 0) {
        st = ddpm_reverse_step(st, toy.model, toy.schedule, torch::randn({1, 4, 32, 32}, gen, torch::kFloat32));
    }
    CHECK(torch::isfinite(st.z).all().item<bool>());
    CHECK_THROWS_AS(ddim_invert(z0, 0, toy.model, toy.schedule), std::invalid_argument);
}

TEST_CASE("features: default levels, swap symmetry, stride ladder, purity")
{
    auto fx = tiny_extractor();
    CHECK(fx.layers == std::set<int64_t>{1, 3});
    CHECK(fx.t == 1);
    auto m = torch::rand({1, 1, 64, 64});
    auto f = torch::rand({1, 1, 64, 64});
    auto a = fx.extract(m, f);
    auto b = fx.extract(f, m);
    auto again = fx.extract(m, f);
    REQUIRE(a.size() == 2);
    const auto c = fx.denoiser->config().width;
    CHECK(fx.feature_channels() == 2 * c);
    CHECK(fx.feature_scales() == std::vector<int64_t>{4, 16});
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a.levels[i].size(1) == 2 * c);
        CHECK(torch::equal(a.levels[i].narrow(1, 0, c), b.levels[i].narrow(1, c, c)));
        CHECK(torch::equal(a.levels[i].narrow(1, c, c), b.levels[i].narrow(1, 0, c)));
        CHECK(torch::equal(a.levels[i], again.levels[i]));
        CHECK(a.levels[i].size(2) == 64 / fx.feature_scales()[i]);
    }
    fx.layers = {1, 5};
    CHECK_THROWS_AS(fx.extract(m, f), std::invalid_argument);
}
