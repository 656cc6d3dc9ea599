#include "oracles.hpp"

#include "ldmorph/data.hpp"
#include "ldmorph/metrics.hpp"
#include "ldmorph/pipeline.hpp"

#include "doctest_torch.hpp"

#include <random>
#include <sstream>

using namespace ldmorph;

namespace {

LabelMap2D random_mask(std::mt19937_64& rng, int64_t h, int64_t w)
{
    std::uniform_int_distribution<int64_t> pick(0, 3);
    auto t = torch::zeros({h, w}, torch::kInt64);
    auto a = t.accessor<int64_t, 2>();
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            a[r][c] = pick(rng);
        }
    }
    return LabelMap2D(t);
}

} // namespace

TEST_CASE("dsc: identical, disjoint and hand-counted masks")
{
    auto a = LabelMap2D::zeros(4, 4);
    a.labels[1][1] = 1;
    a.labels[2][2] = 2;
    auto same = metrics::dsc(a, a, {1, 2});
    CHECK(same.per_label.at(1) == 1.0);
    CHECK(same.per_label.at(2) == 1.0);

    auto b = LabelMap2D::zeros(4, 4);
    b.labels[3][3] = 1;
    CHECK(metrics::dsc(a, b, {1}).per_label.at(1) == 0.0);

    auto pred = LabelMap2D::zeros(3, 3);
    pred.labels[0][0] = 1;
    pred.labels[0][1] = 1;
    auto target = LabelMap2D::zeros(3, 3);
    target.labels[0][0] = 1;
    CHECK(metrics::dsc(pred, target, {1}).per_label.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("dsc: equals the set-arithmetic oracle on 100 random mask pairs")
{
    std::mt19937_64 rng(123);
    for (int k = 0; k < 100; ++k) {
        auto p = random_mask(rng, 20, 17);
        auto t = random_mask(rng, 20, 17);
        auto d = metrics::dsc(p, t, {1, 2, 3});
        double mean = 0.0;
        for (int64_t l = 1; l <= 3; ++l) {
            CHECK(d.per_label.at(l) == oracle::dice(p, t, l));
            mean += oracle::dice(p, t, l);
        }
        CHECK(d.mean == doctest::Approx(mean / 3.0).epsilon(1e-15));
    }
}

TEST_CASE("dsc: shape mismatch is rejected")
{
    CHECK_THROWS_AS(metrics::dsc(LabelMap2D::zeros(3, 3), LabelMap2D::zeros(3, 4), {1}), std::invalid_argument);
}

TEST_CASE("jacobian: identity, doubling map and loop oracle")
{
    auto zero = metrics::jacobian_determinant(DisplacementField2D::zeros(8, 9));
    CHECK(zero.det.size(0) == 7);
    CHECK(zero.det.size(1) == 8);
    CHECK(torch::all(zero.det == 1.0).item<bool>());

    // u(p) = p, so p -> 2p
    auto f = DisplacementField2D::zeros(6, 6);
    f.planes[0].copy_(torch::arange(6, torch::kFloat64).view({1, 6}).expand({6, 6}));
    f.planes[1].copy_(torch::arange(6, torch::kFloat64).view({6, 1}).expand({6, 6}));
    CHECK(torch::all(metrics::jacobian_determinant(f).det == 4.0).item<bool>());

    for (uint64_t seed = 0; seed < 10; ++seed) {
        auto rf = data::random_smooth_field(seed, 32, 4.0, 3.0);
        CHECK(torch::equal(metrics::jacobian_determinant(rf).det, oracle::jacobian(rf)));
    }
}

TEST_CASE("folding: identity 0%, one engineered fold in 100 sites is 1%")
{
    CHECK(metrics::folding_percent(metrics::jacobian_determinant(DisplacementField2D::zeros(11, 11))) == 0.0);
    auto f = DisplacementField2D::zeros(11, 11);
    f.planes[0][5][6] = -2.5;
    auto oracle_det = oracle::jacobian(f);
    REQUIRE((oracle_det <= 0).sum().item<int64_t>() == 1);
    CHECK(metrics::folding_percent(metrics::jacobian_determinant(f)) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("folding: gentle generator fields do not fold")
{
    for (uint64_t seed = 20; seed < 30; ++seed) {
        auto f = data::random_smooth_field(seed, 64, 2.0, 16.0);
        CHECK(metrics::folding_percent(metrics::jacobian_determinant(f)) == 0.0);
    }
}

TEST_CASE("timing: non-negative, stable median")
{
    auto work = [] {
        auto x = torch::rand({64, 64}, torch::kFloat64);
        for (int i = 0; i < 20; ++i) {
            x = torch::tanh(x.mm(x) / 64.0);
        }
    };
    auto t = metrics::time_registration(work, 7);
    CHECK(t.samples.size() == 7);
    CHECK(t.median_seconds >= 0.0);
    std::vector<double> dev;
    for (double s : t.samples) {
        dev.push_back(std::abs(s - t.median_seconds));
    }
    std::nth_element(dev.begin(), dev.begin() + dev.size() / 2, dev.end());
    CHECK(dev[dev.size() / 2] < 0.5 * t.median_seconds);
}

TEST_CASE("summaries and report layout")
{
    auto s = metrics::summarize({1.0, 2.0, 3.0});
    CHECK(s.mean == 2.0);
    CHECK(s.stddev == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-6));
    CHECK(metrics::summarize({}).mean == 0.0);

    data::PhantomParams p;
    auto splits = data::make_phantom_splits({0, 0, 6}, p, 7);
    auto report = pipeline::evaluate(pipeline::identity_predictor(), splits.test, {1, 2}, pipeline::Timing::Single);
    CHECK(report.pairs.size() == 6);
    for (const auto& pr : report.pairs) {
        CHECK(pr.mean_dsc == pr.initial_dsc);
        CHECK(pr.folding_percent == 0.0);
        CHECK(pr.runtime_seconds >= 0.0);
    }
    std::ostringstream csv, summary;
    report.write_csv(csv);
    report.write_summary(summary);
    CHECK(csv.str().rfind("pair_id,dsc_label_1,dsc_label_2,mean_dsc", 0) == 0);
    CHECK(summary.str().find("Avg. DSC") != std::string::npos);
    CHECK(summary.str().find("Time (s)") != std::string::npos);
}
