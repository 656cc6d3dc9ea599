// Acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]; no arguments runs all ten.

#include "fixtures.hpp"
#include "oracles.hpp"

#include "ldmorph/attention.hpp"
#include "ldmorph/checkpoint.hpp"
#include "ldmorph/metrics.hpp"
#include "ldmorph/pipeline.hpp"
#include "ldmorph/warp.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace ldmorph;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 4)
{
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

const fs::path kRunRoot = "acceptance_runs";

// 1. iterated forward steps vs the closed-form marginal
Outcome forward_chain()
{
    const auto start = Clock::now();
    auto s = diffusion::make_schedule(1000);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(11);
    const int64_t draws = 100000;
    double worst = 0.0;
    for (double z0 : {2.0, -3.0}) {
        for (int64_t t : {int64_t{1}, int64_t{10}, s.T / 2}) {
            auto z = torch::full({draws}, z0, torch::kFloat64);
            for (int64_t k = 1; k <= t; ++k) {
                z = diffusion::forward_step(z, k, torch::randn({draws}, gen, torch::kFloat64), s);
            }
            const double mean = std::sqrt(s.alpha_bar[static_cast<size_t>(t)]) * z0;
            const double sd = std::sqrt(1.0 - s.alpha_bar[static_cast<size_t>(t)]);
            worst = std::max(worst, std::abs(z.mean().item<double>() - mean) / std::abs(mean));
            worst = std::max(worst, std::abs(z.std(false).item<double>() - sd) / sd);
        }
    }
    const double secs = seconds_since(start);
    return {worst <= 0.02 && secs < 30.0,
            "max relative deviation " + fmt(worst) + " over 100000 draws, " + fmt(secs, 3) + " s"};
}

// 2. hand-evaluated values
Outcome hand_values()
{
    std::vector<std::pair<std::string, double>> errs;
    auto half = diffusion::NoiseSchedule::from_betas({0.5, 0.5});
    auto one = torch::ones({1}, torch::kFloat64);
    errs.emplace_back("alpha_bar", std::abs(half.alpha_bar[2] - 0.25));
    errs.emplace_back("q_sample", std::abs(diffusion::q_sample(one, 2, one, half).item<double>() - 1.3660254));
    errs.emplace_back("reverse_mean",
                      std::abs(diffusion::reverse_mean(one, 1, one, diffusion::NoiseSchedule::from_betas({0.5}))
                                   .item<double>() -
                               0.41421356));
    auto q = torch::tensor({{1.0}, {0.0}}, torch::kFloat64);
    auto v = torch::tensor({{2.0}, {4.0}}, torch::kFloat64);
    const double e = std::exp(1.0);
    errs.emplace_back("attention",
                      std::abs(attention::self_attention(q, q, v)[0][0].item<double>() - (2 * e + 4) / (e + 1)));
    LabelMap2D pred(torch::tensor({{1, 1}, {0, 0}}, torch::kInt64));
    LabelMap2D target(torch::tensor({{1, 0}, {0, 0}}, torch::kInt64));
    errs.emplace_back("dsc", std::abs(metrics::dsc(pred, target, {1}).mean - 2.0 / 3.0));
    auto ys = torch::arange(6, torch::kFloat64).view({6, 1}).expand({6, 7});
    auto xs = torch::arange(7, torch::kFloat64).view({1, 7}).expand({6, 7});
    DisplacementField2D doubling(torch::stack({xs, ys}));
    auto det = metrics::jacobian_determinant(doubling).det;
    errs.emplace_back("jacobian", (det - 4.0).abs().max().item<double>());
    double worst = 0.0;
    std::string detail;
    for (const auto& [name, e] : errs) {
        worst = std::max(worst, e);
        detail += name + " " + fmt(e, 2) + " ";
    }
    return {worst <= 1e-6, "abs errors: " + detail};
}

// 3. finite-difference gradient suite
Outcome gradient_suite()
{
    const auto start = Clock::now();
    auto mini = fixture::mini_registration(21);
    auto field = (oracle::random_field(16, 16, 1.2, 22).unsqueeze(0) + 0.31).requires_grad_(true);
    auto enc = [&](const torch::Tensor& x) { return mini.encoder->encode(x); };
    auto field_fn = [&] { return loss::loss_total(mini.moving, mini.fixed, field, enc, {}).total; };
    auto gf = oracle::check_gradients(field_fn, {field}, 512);
    std::vector<torch::Tensor> params;
    for (auto& p : mini.net->parameters()) {
        params.push_back(p);
    }
    auto gp = oracle::check_gradients([&] { return mini.loss(); }, params, 6);
    const double secs = seconds_since(start);
    return {gf.rel_error <= 1e-4 && gp.rel_error <= 1e-3 && gf.analytic_norm > 0 && gp.analytic_norm > 0 &&
                secs < 300.0,
            "field " + fmt(gf.rel_error, 3) + " (" + std::to_string(gf.entries) + " entries), parameters " +
                fmt(gp.rel_error, 3) + " (" + std::to_string(gp.entries) + " entries over " +
                std::to_string(params.size()) + " tensors), " + fmt(secs, 3) + " s"};
}

// 4. warp and metric oracles
Outcome oracles()
{
    auto gen = at::make_generator<at::CPUGeneratorImpl>(31);
    Image2D img(torch::rand({40, 36}, gen, torch::kFloat64));
    LabelMap2D lab(torch::randint(0, 4, {40, 36}, gen, torch::kInt64));
    auto zero = DisplacementField2D::zeros(40, 36);
    const bool identity = torch::equal(warp::warp_image(img, zero).pixels, img.pixels) &&
                          torch::equal(warp::warp_labels(lab, zero).labels, lab.labels);
    DisplacementField2D f(oracle::random_field(40, 36, 3.0, 32));
    const bool jac = torch::equal(metrics::jacobian_determinant(f).det, oracle::jacobian(f));
    int64_t dsc_ok = 0;
    for (int i = 0; i < 100; ++i) {
        LabelMap2D a(torch::randint(0, 3, {24, 24}, gen, torch::kInt64));
        LabelMap2D b(torch::randint(0, 3, {24, 24}, gen, torch::kInt64));
        auto d = metrics::dsc(a, b, {1, 2});
        dsc_ok += d.per_label.at(1) == oracle::dice(a, b, 1) && d.per_label.at(2) == oracle::dice(a, b, 2);
    }
    return {identity && jac && dsc_ok == 100, std::string("identity ") + (identity ? "exact" : "differs") +
                                                   ", jacobian " + (jac ? "exact" : "differs") + ", dsc " +
                                                   std::to_string(dsc_ok) + "/100 exact"};
}

// 5. attention invariants
Outcome attention_invariants()
{
    using namespace attention;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(41);
    auto q = torch::randn({6, 2, 16, 8}, gen, torch::kFloat64);
    auto k = torch::randn({6, 2, 16, 8}, gen, torch::kFloat64);
    auto plan = plan_windows(8, 12, 4, true);
    auto mask = shifted_window_mask(plan).unsqueeze(1);
    const double rows = std::max((attention_weights(q, k).sum(-1) - 1).abs().max().item<double>(),
                                 (attention_weights(q, k, mask).sum(-1) - 1).abs().max().item<double>());
    auto a = torch::randn({6, 2, 16, 8}, gen, torch::kFloat64);
    const double cross = (cross_attention(a, a, a) - self_attention(a, a, a)).abs().max().item<double>();
    auto x = torch::randn({2, 8, 12, 5}, gen, torch::kFloat64);
    const bool plain = torch::equal(window_reverse(window_partition(x, 4, 4), 4, 4, 8, 12), x);
    auto shifted = cyclic_unshift(
        window_reverse(window_partition(cyclic_shift(x, plan.shift_h, plan.shift_w), 4, 4), 4, 4, 8, 12),
        plan.shift_h, plan.shift_w);
    const bool shift_ok = plan.shifted() && torch::equal(shifted, x);
    return {rows <= 1e-6 && cross <= 1e-6 && plain && shift_ok,
            "row-sum error " + fmt(rows, 2) + ", cross-vs-self " + fmt(cross, 2) + ", round trip " +
                (plain ? "exact" : "differs") + " / shifted " + (shift_ok ? "exact" : "differs")};
}

// 6. DDIM invert-then-denoise on a trained toy model
Outcome ddim_round_trip()
{
    auto toy = fixture::train_toy_diffusion();
    torch::NoGradGuard guard;
    auto z0 = toy.latents.narrow(0, 20, 4);
    auto inv = diffusion::ddim_invert(z0, 1, toy.model, toy.schedule);
    auto back = diffusion::ddim_denoise(inv, toy.model, toy.schedule);
    const double rel = ((back - z0).norm() / z0.norm()).item<double>();
    return {rel <= 1e-3, "relative error " + fmt(rel, 3) + " (T = 200, 32x32 latents, t = 1)"};
}

RunConfig desk_config()
{
    auto cfg = RunConfig::load(fs::path(LDMORPH_CONFIG_DIR) / "desk.ini");
    cfg.train.checkpoint_dir = kRunRoot / "desk";
    return cfg;
}

// 7. desk-scale end to end: phantoms, autoencoder, LDM, registration, test eval
Outcome desk_end_to_end()
{
    const auto start = Clock::now();
    auto cfg = desk_config();
    fs::remove_all(cfg.train.checkpoint_dir);
    auto data = pipeline::load_data(cfg);
    auto model = pipeline::train_autoencoder_phase(cfg, data);
    pipeline::train_ldm_phase(cfg, data, model);
    auto extractor = pipeline::load_extractor(cfg);
    auto progress = [](const std::string& s) { std::cerr << "  [desk] " << s << std::endl; };
    auto res = pipeline::train_registration(cfg, data, extractor, cfg.train.checkpoint_dir, progress);
    auto report = pipeline::evaluate(pipeline::make_predictor(res.net, extractor), data.test, cfg.data.label_subset,
                                     pipeline::Timing::Single);
    const double secs = seconds_since(start);
    const double gain = report.dsc().mean - report.initial_dsc().mean;
    const double folding = report.folding().mean;
    return {gain >= 0.05 && folding < 5.0 && secs < 1800.0 && report.failures.empty(),
            "test DSC " + fmt(report.initial_dsc().mean) + " -> " + fmt(report.dsc().mean) + " (gain " + fmt(gain, 3) +
                "), folding " + fmt(folding, 3) + "%, " + std::to_string(report.pairs.size()) + " pairs, epochs " +
                std::to_string(cfg.train.epochs) + ", " + fmt(secs / 60.0, 3) + " min"};
}

// Reduced-scale trend runs reuse the desk autoencoder and LDM.
struct TrendSetup {
    RunConfig cfg;
    pipeline::Dataset data;
    diffusion::FeatureExtractor extractor;
};

TrendSetup trend_setup()
{
    auto cfg = desk_config();
    if (!fs::exists(cfg.ldm_checkpoint())) {
        throw RuntimeFailure("trend runs need the desk checkpoints; run criterion 7 first");
    }
    cfg.train.epochs = 12;
    auto full = pipeline::load_data(cfg);
    pipeline::Dataset data;
    data.train.assign(full.train.begin(), full.train.begin() + 80);
    data.val.assign(full.val.begin(), full.val.begin() + 10);
    data.test.assign(full.test.begin(), full.test.begin() + 80);
    return {cfg, std::move(data), pipeline::load_extractor(cfg)};
}

metrics::EvalReport train_and_eval(TrendSetup& s, const RunConfig& cfg, const fs::path& dir)
{
    const bool needs_ldm = cfg.ablation.use_ldmfe || cfg.effective_loss().beta < 1.0;
    std::optional<diffusion::FeatureExtractor> fx;
    if (needs_ldm) {
        fx = s.extractor;
    }
    auto res = pipeline::train_registration(cfg, s.data, fx, dir);
    return pipeline::evaluate(pipeline::make_predictor(res.net, fx), s.data.test, cfg.data.label_subset,
                              pipeline::Timing::Single);
}

// 8. full model vs lower-stream-only baseline
Outcome ablation_trend(TrendSetup& s)
{
    int wins = 0;
    std::string detail;
    for (uint64_t seed : {0, 1, 2}) {
        auto c = s.cfg;
        c.train.seed = seed;
        c.ablation = {false, false, false};
        const double base = train_and_eval(s, c, kRunRoot / "ablation" / ("baseline_seed" + std::to_string(seed)))
                                .dsc()
                                .mean;
        c.ablation = {true, true, true};
        const double full =
            train_and_eval(s, c, kRunRoot / "ablation" / ("full_seed" + std::to_string(seed))).dsc().mean;
        wins += full >= base;
        detail += "seed " + std::to_string(seed) + ": full " + fmt(full) + " vs baseline " + fmt(base) + "; ";
        std::cerr << "  [ablation] " << detail << std::endl;
    }
    return {wins >= 2, std::to_string(wins) + "/3 seeds; " + detail + "80/10/80 pairs, 12 epochs"};
}

// 9. beta sweep trends
Outcome beta_trend(TrendSetup& s)
{
    int fold_wins = 0, dsc_wins = 0;
    std::string detail;
    for (uint64_t seed : {0, 1, 2}) {
        std::map<double, metrics::EvalReport> r;
        for (double beta : {0.2, 0.4, 0.6, 1.0}) {
            auto c = s.cfg;
            c.train.seed = seed;
            c.loss.beta = beta;
            r[beta] = train_and_eval(s, c, kRunRoot / "sweep" / ("beta" + fmt(beta, 2) + "_seed" + std::to_string(seed)));
        }
        fold_wins += r[1.0].folding().mean >= r[0.4].folding().mean;
        dsc_wins += r[0.6].dsc().mean >= r[0.2].dsc().mean;
        detail += "seed " + std::to_string(seed) + ": folding% b1.0 " + fmt(r[1.0].folding().mean, 3) + " b0.4 " +
                  fmt(r[0.4].folding().mean, 3) + ", DSC b0.6 " + fmt(r[0.6].dsc().mean) + " b0.2 " +
                  fmt(r[0.2].dsc().mean) + "; ";
        std::cerr << "  [sweep] " << detail << std::endl;
    }
    return {fold_wins >= 2 && dsc_wins >= 2, "folding " + std::to_string(fold_wins) + "/3, DSC " +
                                                 std::to_string(dsc_wins) + "/3; " + detail};
}

// 10. identically seeded runs give identical loss logs
Outcome determinism()
{
    auto cfg = desk_config();
    cfg.data.counts = {12, 4, 0};
    cfg.train.epochs = 2;
    auto data = pipeline::load_data(cfg);
    std::optional<diffusion::FeatureExtractor> fx;
    if (fs::exists(cfg.ldm_checkpoint())) {
        fx = pipeline::load_extractor(cfg);
    } else {
        cfg.ablation = {false, false, false};
    }
    std::string logs[2];
    for (int i = 0; i < 2; ++i) {
        const auto dir = kRunRoot / ("determinism" + std::to_string(i));
        pipeline::train_registration(cfg, data, fx, dir);
        std::ifstream in(dir / "train_log.csv");
        std::stringstream buf;
        buf << in.rdbuf();
        logs[i] = buf.str();
    }
    return {!logs[0].empty() && logs[0] == logs[1],
            std::string("train_log.csv ") + (logs[0] == logs[1] ? "identical" : "differs") + " (" +
                std::to_string(std::count(logs[0].begin(), logs[0].end(), '\n')) + " lines" +
                (fx ? "" : ", LDM branch off") + ")"};
}

} // namespace

int main(int argc, char** argv)
{
    torch::set_num_threads(1);
    torch::manual_seed(0);
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) {
        wanted.insert(std::stoi(argv[i]));
    }
    auto want = [&](int n) { return wanted.empty() || wanted.count(n) > 0; };
    fs::create_directories(kRunRoot);

    const std::vector<std::pair<int, std::string>> names = {
        {1, "forward-chain marginal"}, {2, "hand values"},        {3, "gradient suite"},
        {4, "warp/metric oracles"},    {5, "attention invariants"}, {6, "DDIM round trip"},
        {7, "desk end-to-end"},        {8, "ablation trend"},     {9, "beta-sweep trend"},
        {10, "determinism"}};
    std::optional<TrendSetup> trend;
    int failed = 0;
    for (const auto& [n, name] : names) {
        if (!want(n)) {
            continue;
        }
        Outcome o;
        try {
            switch (n) {
            case 1: o = forward_chain(); break;
            case 2: o = hand_values(); break;
            case 3: o = gradient_suite(); break;
            case 4: o = oracles(); break;
            case 5: o = attention_invariants(); break;
            case 6: o = ddim_round_trip(); break;
            case 7: o = desk_end_to_end(); break;
            case 8:
            case 9:
                if (!trend) {
                    trend = trend_setup();
                }
                o = n == 8 ? ablation_trend(*trend) : beta_trend(*trend);
                break;
            case 10: o = determinism(); break;
            }
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << "criterion " << n << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
                  << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
