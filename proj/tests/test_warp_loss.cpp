#include "oracles.hpp"

#include "ldmorph/data.hpp"
#include "ldmorph/loss.hpp"
#include "ldmorph/warp.hpp"

#include "doctest_torch.hpp"

using namespace ldmorph;

namespace {

torch::Tensor rand_image(int64_t h, int64_t w, uint64_t seed)
{
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::rand({h, w}, gen, torch::kFloat64);
}

// Average-pool "encoder": linear, differentiable, 4x reduction.
torch::Tensor pool_encoder(const torch::Tensor& x)
{
    return torch::avg_pool2d(x, 4);
}

} // namespace

TEST_CASE("warp_image: zero field is bit-exact identity")
{
    auto img = Image2D(rand_image(32, 40, 1));
    auto out = warp::warp_image(img, DisplacementField2D::zeros(32, 40));
    CHECK(torch::equal(out.pixels, img.pixels));
}

TEST_CASE("warp_image: unit column shift with clamped border")
{
    auto img = Image2D(rand_image(8, 9, 2));
    auto f = DisplacementField2D::zeros(8, 9);
    f.planes[0].fill_(1.0);
    auto out = warp::warp_image(img, f);
    for (int64_t r = 0; r < 8; ++r) {
        for (int64_t c = 0; c < 9; ++c) {
            CHECK(out.at(r, c) == img.at(r, std::min<int64_t>(c + 1, 8)));
        }
    }
}

TEST_CASE("warp_image: half-pixel shift averages neighbours")
{
    auto img = Image2D(torch::tensor({{2.0, 6.0}}, torch::kFloat64));
    auto f = DisplacementField2D::zeros(1, 2);
    f.planes[0][0][0] = 0.5;
    auto out = warp::warp_image(img, f);
    CHECK(out.at(0, 0) == 4.0);
    CHECK(out.at(0, 1) == 6.0);
}

TEST_CASE("warp_image: agrees with the per-pixel bilinear oracle")
{
    auto img = Image2D(rand_image(24, 20, 3));
    auto f = DisplacementField2D(oracle::random_field(24, 20, 3.0, 4));
    auto got = warp::warp_image(img, f);
    auto expect = oracle::warp_bilinear(img, f);
    CHECK(torch::allclose(got.pixels, expect.pixels, 0.0, 1e-12));
}

TEST_CASE("warp_image: shape mismatch and non-finite fields are rejected")
{
    auto img = Image2D(rand_image(8, 8, 5));
    CHECK_THROWS_AS(warp::warp_image(img, DisplacementField2D::zeros(8, 9)), std::invalid_argument);
    auto f = DisplacementField2D::zeros(8, 8);
    f.planes[0][1][1] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(warp::warp_image(img, f), std::invalid_argument);
}

TEST_CASE("warp_labels: identity, label closure and rounding oracle")
{
    auto gen = at::make_generator<at::CPUGeneratorImpl>(6);
    auto lab = LabelMap2D(torch::randint(0, 5, {32, 32}, gen, torch::kInt64));
    CHECK(torch::equal(warp::warp_labels(lab, DisplacementField2D::zeros(32, 32)).labels, lab.labels));
    for (uint64_t seed = 0; seed < 5; ++seed) {
        auto f = data::random_smooth_field(seed, 32, 5.0, 6.0);
        auto out = warp::warp_labels(lab, f);
        auto in_set = lab.label_set();
        for (auto v : out.label_set()) {
            CHECK(in_set.count(v) == 1);
        }
        CHECK(torch::equal(out.labels, oracle::warp_nearest(lab, f).labels));
    }
}

TEST_CASE("warp_bilinear: gradient w.r.t. field and image")
{
    auto img = rand_image(10, 12, 7).view({1, 1, 10, 12}).requires_grad_(true);
    auto field = (oracle::random_field(10, 12, 1.5, 8).unsqueeze(0) + 0.123).requires_grad_(true);
    auto fn = [&] { return (warp::warp_bilinear(img, field) * torch::linspace(0, 1, 120, torch::kFloat64).view({1, 1, 10, 12})).sum(); };
    auto gc = oracle::check_gradients(fn, {field, img}, 60);
    CHECK(gc.rel_error <= 1e-4);
    CHECK(gc.analytic_norm > 0.0);
}

TEST_CASE("loss_org: trivial values and loop oracle")
{
    auto a = rand_image(16, 16, 9).view({1, 1, 16, 16});
    CHECK(loss::loss_org(a, a).item<double>() == 0.0);
    auto ones = torch::ones({1, 1, 128, 128}, torch::kFloat64);
    CHECK(loss::loss_org(ones, torch::zeros_like(ones)).item<double>() == 1.0);
    auto b = rand_image(16, 16, 10).view({1, 1, 16, 16});
    CHECK(loss::loss_org(a, b).item<double>() == doctest::Approx(oracle::mse(a, b)).epsilon(1e-12));
}

TEST_CASE("loss_lat: zero at match, loop oracle, live field gradient")
{
    auto a = rand_image(16, 16, 11).view({1, 1, 16, 16});
    auto b = rand_image(16, 16, 12).view({1, 1, 16, 16});
    CHECK(loss::loss_lat(a, a, pool_encoder).item<double>() == 0.0);
    const double expect = oracle::mse(pool_encoder(a), pool_encoder(b));
    CHECK(loss::loss_lat(a, b, pool_encoder).item<double>() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(loss::loss_lat(a, b, pool_encoder, pool_encoder(b)).item<double>() ==
          doctest::Approx(expect).epsilon(1e-12));
    CHECK_THROWS_AS(loss::loss_lat(a, b, {}), std::invalid_argument);

    auto field = oracle::random_field(16, 16, 1.0, 13).unsqueeze(0).requires_grad_(true);
    auto l = loss::loss_lat(warp::warp_bilinear(a, field), b, pool_encoder);
    l.backward();
    CHECK(field.grad().abs().sum().item<double>() > 0.0);
}

TEST_CASE("loss_smooth: constant, ramp and loop oracle")
{
    auto c = torch::full({1, 2, 6, 6}, 3.5, torch::kFloat64);
    CHECK(loss::loss_smooth(c).item<double>() == 0.0);
    auto ramp = torch::zeros({1, 2, 4, 4}, torch::kFloat64);
    ramp[0][0].copy_(torch::arange(4, torch::kFloat64).view({1, 4}).expand({4, 4}));
    CHECK(loss::loss_smooth(ramp).item<double>() == 12.0);
    for (uint64_t seed = 0; seed < 4; ++seed) {
        auto f = oracle::random_field(9, 13, 2.0, seed).unsqueeze(0);
        CHECK(loss::loss_smooth(f).item<double>() == doctest::Approx(oracle::smoothness(f)).epsilon(1e-12));
    }
}

TEST_CASE("loss_total: defaults, beta = 1 and the zero case")
{
    loss::LossWeights w;
    CHECK(w.lambda == 0.01);
    CHECK(w.beta == 0.6);

    auto m = rand_image(16, 16, 14).view({1, 1, 16, 16});
    auto f = rand_image(16, 16, 15).view({1, 1, 16, 16});
    auto field = oracle::random_field(16, 16, 0.7, 16).unsqueeze(0);

    auto zero = loss::loss_total(f, f, torch::zeros_like(field), pool_encoder, w);
    CHECK(zero.total_value() == 0.0);

    loss::LossWeights pixel_only{0.01, 1.0};
    auto only = loss::loss_total(m, f, field, {}, pixel_only);
    const double org = oracle::mse(oracle::warp_bilinear(Image2D(m[0][0]), DisplacementField2D(field[0])).pixels, f);
    CHECK(only.lat.item<double>() == 0.0);
    CHECK(only.total_value() == doctest::Approx(org + 0.01 * oracle::smoothness(field)).epsilon(1e-12));

    auto full = loss::loss_total(m, f, field, pool_encoder, w);
    const auto warped = warp::warp_bilinear(m, field);
    const double lat = oracle::mse(pool_encoder(warped), pool_encoder(f));
    CHECK(full.total_value() ==
          doctest::Approx(0.6 * org + 0.4 * lat + 0.01 * oracle::smoothness(field)).epsilon(1e-12));

    loss::LossWeights inside{0.01, 0.6, true};
    auto sq = loss::loss_total(m, f, field, pool_encoder, inside);
    CHECK(sq.sim.item<double>() == doctest::Approx(0.36 * org + 0.16 * lat).epsilon(1e-12));

    CHECK_THROWS(loss::LossWeights{-1.0, 0.5}.validate());
    CHECK_THROWS(loss::LossWeights{0.01, 1.5}.validate());
}

TEST_CASE("loss_total: field gradient matches central differences")
{
    auto m = rand_image(16, 16, 17).view({1, 1, 16, 16});
    auto f = rand_image(16, 16, 18).view({1, 1, 16, 16});
    auto field = (oracle::random_field(16, 16, 1.2, 19).unsqueeze(0) + 0.31).requires_grad_(true);
    loss::LossWeights w;
    auto fn = [&] { return loss::loss_total(m, f, field, pool_encoder, w).total; };
    auto gc = oracle::check_gradients(fn, {field}, 512);
    CHECK(gc.rel_error <= 1e-4);
}
