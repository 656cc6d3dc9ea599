#include "oracles.hpp"

#include "ldmorph/attention.hpp"

#include "doctest_torch.hpp"

using namespace ldmorph::attention;

namespace {

AttentionConfig small_config()
{
    AttentionConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.window = 4;
    return cfg;
}

void zero_non_norm(torch::nn::Module& m)
{
    torch::NoGradGuard guard;
    for (auto& p : m.named_parameters(true)) {
        if (p.key().find("norm") == std::string::npos) {
            p.value().zero_();
        }
    }
}

} // namespace

TEST_CASE("plan_windows: arithmetic, clamping and padding")
{
    auto p = plan_windows(8, 8, 4, false);
    CHECK(p.windows() == 4);
    CHECK(p.tokens() == 16);
    CHECK_FALSE(p.shifted());
    auto s = plan_windows(8, 8, 4, true);
    CHECK(s.shift_h == 2);
    CHECK(s.shift_w == 2);
    auto small = plan_windows(2, 3, 4, true);
    CHECK(small.win_h == 2);
    CHECK(small.win_w == 3);
    CHECK_FALSE(small.shifted());
    auto odd = plan_windows(6, 9, 4, false);
    CHECK(odd.padded_h == 8);
    CHECK(odd.padded_w == 12);
}

TEST_CASE("window partition: index oracle and bit-exact round trip")
{
    auto x = torch::randn({2, 8, 12, 3}, torch::kFloat64);
    auto w = window_partition(x, 4, 4);
    CHECK(w.sizes() == torch::IntArrayRef({12, 16, 3}));
    for (int64_t b = 0; b < 2; ++b) {
        for (int64_t i = 0; i < 8; ++i) {
            for (int64_t j = 0; j < 12; ++j) {
                const auto win = b * 6 + (i / 4) * 3 + j / 4;
                const auto tok = (i % 4) * 4 + j % 4;
                CHECK(torch::equal(w[win][tok], x[b][i][j]));
            }
        }
    }
    CHECK(torch::equal(window_reverse(w, 4, 4, 8, 12), x));
    CHECK_THROWS_AS(window_partition(torch::zeros({1, 6, 8, 1}), 4, 4), std::invalid_argument);
}

TEST_CASE("cyclic shift: index oracle and shifted round trip")
{
    auto x = torch::randn({1, 8, 8, 2}, torch::kFloat64);
    auto s = cyclic_shift(x, 2, 2);
    for (int64_t i = 0; i < 8; ++i) {
        for (int64_t j = 0; j < 8; ++j) {
            CHECK(torch::equal(s[0][i][j], x[0][(i + 2) % 8][(j + 2) % 8]));
        }
    }
    auto back = cyclic_unshift(window_reverse(window_partition(s, 4, 4), 4, 4, 8, 8), 2, 2);
    CHECK(torch::equal(back, x));
}

TEST_CASE("shift mask: same-origin tokens attend, wrapped ones are masked")
{
    auto plan = plan_windows(8, 8, 4, true);
    auto mask = shifted_window_mask(plan);
    REQUIRE(mask.sizes() == torch::IntArrayRef({4, 16, 16}));
    auto wrapped = [&](int64_t pos, int64_t shift, int64_t n) { return pos + shift >= n; };
    for (int64_t wi = 0; wi < 2; ++wi) {
        for (int64_t wj = 0; wj < 2; ++wj) {
            for (int64_t a = 0; a < 16; ++a) {
                for (int64_t b = 0; b < 16; ++b) {
                    const int64_t ra = wi * 4 + a / 4, ca = wj * 4 + a % 4;
                    const int64_t rb = wi * 4 + b / 4, cb = wj * 4 + b % 4;
                    const bool same = wrapped(ra, 2, 8) == wrapped(rb, 2, 8) && wrapped(ca, 2, 8) == wrapped(cb, 2, 8);
                    CHECK(mask[wi * 2 + wj][a][b].item<double>() == (same ? 0.0 : kMaskValue));
                }
            }
        }
    }
}

TEST_CASE("self_attention: hand cases")
{
    auto v1 = torch::tensor({{3.0, -1.0}}, torch::kFloat64);
    auto q1 = torch::randn({1, 2}, torch::kFloat64);
    CHECK(torch::equal(self_attention(q1, torch::randn({1, 2}, torch::kFloat64), v1), v1));

    auto v = torch::randn({5, 3}, torch::kFloat64);
    auto out = self_attention(torch::zeros({5, 4}, torch::kFloat64), torch::randn({5, 4}, torch::kFloat64), v);
    for (int64_t i = 0; i < 5; ++i) {
        CHECK(torch::allclose(out[i], v.mean(0), 0, 1e-12));
    }

    auto q = torch::tensor({{1.0}, {0.0}}, torch::kFloat64);
    auto k = torch::tensor({{1.0}, {0.0}}, torch::kFloat64);
    auto vv = torch::tensor({{2.0}, {4.0}}, torch::kFloat64);
    const double e = std::exp(1.0);
    CHECK(self_attention(q, k, vv)[0][0].item<double>() == doctest::Approx((2 * e + 4) / (e + 1)).epsilon(1e-12));
    CHECK_THROWS_AS(attention_weights(torch::zeros({2, 0}), torch::zeros({2, 0})), std::invalid_argument);
}

TEST_CASE("cross_attention: substitution, constant values, hand case, mismatch")
{
    auto a = torch::randn({3, 2, 16, 4}, torch::kFloat64);
    CHECK(torch::equal(cross_attention(a, a, a), self_attention(a, a, a)));

    auto vb = torch::full({3, 2, 16, 4}, 1.75, torch::kFloat64);
    auto out = cross_attention(torch::randn({3, 2, 16, 4}, torch::kFloat64), a, vb);
    CHECK(torch::allclose(out, vb, 0, 1e-12));

    // queries from stream a, keys and values from stream b
    auto qa = torch::tensor({{1.0}, {0.0}}, torch::kFloat64);
    auto kb = torch::tensor({{1.0}, {0.0}}, torch::kFloat64);
    auto vb2 = torch::tensor({{2.0}, {4.0}}, torch::kFloat64);
    const double e = std::exp(1.0);
    CHECK(cross_attention(qa, kb, vb2)[0][0].item<double>() == doctest::Approx((2 * e + 4) / (e + 1)).epsilon(1e-12));
    CHECK(cross_attention(qa, kb, vb2)[1][0].item<double>() == doctest::Approx(3.0).epsilon(1e-12));

    CHECK_THROWS_AS(cross_attention(torch::zeros({3, 2, 16, 4}), torch::zeros({4, 2, 16, 4}), torch::zeros({4, 2, 16, 4})),
                    std::invalid_argument);
    CHECK_THROWS_AS(cross_attention(torch::zeros({3, 2, 16, 4}), torch::zeros({3, 2, 9, 4}), torch::zeros({3, 2, 9, 4})),
                    std::invalid_argument);
}

TEST_CASE("attention rows sum to one and ignore per-row logit offsets")
{
    auto q = torch::randn({4, 3, 16, 8}, torch::kFloat64) * 3;
    auto k = torch::randn({4, 3, 16, 8}, torch::kFloat64) * 3;
    auto w = attention_weights(q, k);
    CHECK((w.sum(-1) - 1).abs().max().item<double>() <= 1e-6);
    auto offset = torch::randn({4, 3, 16, 1}, torch::kFloat64).expand({4, 3, 16, 16}) * 10;
    CHECK((attention_weights(q, k, offset) - w).abs().max().item<double>() <= 1e-6);

    WindowAttention attn(small_config());
    attn->to(torch::kFloat64);
    auto plan = plan_windows(8, 8, 4, true);
    auto p = attn->project(torch::randn({4, 16, 8}, torch::kFloat64));
    auto masked = attention_weights(p.q, p.k, shifted_window_mask(plan).unsqueeze(1));
    CHECK((masked.sum(-1) - 1).abs().max().item<double>() <= 1e-6);
}

TEST_CASE("relative bias: shared by equal offsets")
{
    WindowAttention attn(small_config());
    auto bias = attn->relative_bias(plan_windows(8, 8, 4, false));
    REQUIRE(bias.sizes() == torch::IntArrayRef({2, 16, 16}));
    // tokens (0,0)->(1,1) and (2,2)->(3,3) share the offset (-1,-1)
    CHECK(torch::equal(bias.select(1, 0).select(1, 5), bias.select(1, 10).select(1, 15)));
    auto cfg = small_config();
    cfg.relative_position_bias = false;
    WindowAttention plain(cfg);
    CHECK_FALSE(plain->relative_bias(plan_windows(8, 8, 4, false)).defined());
}

TEST_CASE("gfe block: shape, residual identity, gradient")
{
    torch::manual_seed(1);
    GfeBlock block(small_config());
    block->to(torch::kFloat64);
    auto x = torch::randn({1, 8, 8, 8}, torch::kFloat64);
    CHECK(block->forward(x).sizes() == x.sizes());
    auto odd = torch::randn({1, 8, 6, 10}, torch::kFloat64);
    CHECK(block->forward(odd).sizes() == odd.sizes());

    auto xg = x.clone().requires_grad_(true);
    auto weights = torch::randn({1, 8, 8, 8}, torch::kFloat64);
    auto fn = [&] { return (block->forward(xg) * weights).sum(); };
    auto gc = oracle::check_gradients(fn, {xg}, 80);
    CHECK(gc.rel_error <= 1e-4);

    zero_non_norm(*block);
    CHECK(torch::equal(block->forward(x), x));
}

TEST_CASE("lgca block: tied symmetric case, shapes, gradients")
{
    torch::manual_seed(2);
    LgcaBlock block(small_config());
    block->to(torch::kFloat64);
    auto s = torch::randn({1, 8, 8, 8}, torch::kFloat64);
    auto g = torch::randn({1, 8, 8, 8}, torch::kFloat64);
    CHECK(block->forward(s, g).sizes() == s.sizes());

    auto [bs, bg] = block->forward_branches(s, s);
    CHECK_FALSE(torch::equal(bs, bg));
    block->tie_branches();
    auto [ts, tg] = block->forward_branches(s, s);
    CHECK(torch::equal(ts, tg));

    torch::manual_seed(3);
    LgcaBlock fresh(small_config());
    fresh->to(torch::kFloat64);
    auto sg = s.clone().requires_grad_(true);
    auto gg = g.clone().requires_grad_(true);
    auto weights = torch::randn({1, 8, 8, 8}, torch::kFloat64);
    auto fn = [&] { return (fresh->forward(sg, gg) * weights).sum(); };
    auto gc = oracle::check_gradients(fn, {sg, gg}, 60);
    CHECK(gc.rel_error <= 1e-4);

    CHECK_THROWS(fresh->forward(s, torch::randn({1, 8, 4, 8}, torch::kFloat64)));
}
