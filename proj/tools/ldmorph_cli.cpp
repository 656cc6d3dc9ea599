// ldmorph: phantom generation, three-phase training, evaluation, warping,
// ablation, beta sweep and report emission.

#include "ldmorph/checkpoint.hpp"
#include "ldmorph/io.hpp"
#include "ldmorph/pipeline.hpp"
#include "ldmorph/warp.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace ldmorph;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitPartial = 3;

struct CommonOptions {
    std::string config;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool config_required = true)
{
    auto* c = cmd->add_option("-c,--config", opts.config, "run configuration (INI)");
    if (config_required) {
        c->required();
    }
    cmd->add_option("--set", opts.overrides, "override, e.g. train.epochs=5")->take_all();
}

RunConfig load_config(const CommonOptions& opts)
{
    auto cfg = opts.config.empty() ? RunConfig{} : RunConfig::load(opts.config);
    for (const auto& o : opts.overrides) {
        cfg.apply_override(o);
    }
    cfg.validate();
    return cfg;
}

void log_line(const std::string& s)
{
    std::cerr << s << std::endl;
}

int finish_eval(metrics::EvalReport report, const std::vector<std::string>& load_failures, const fs::path& out_dir,
                const std::string& method)
{
    report.failures.insert(report.failures.begin(), load_failures.begin(), load_failures.end());
    fs::create_directories(out_dir);
    {
        std::ofstream csv(out_dir / "eval_pairs.csv");
        report.write_csv(csv);
        std::ofstream summary(out_dir / "eval_summary.txt");
        report.write_summary(summary, method);
    }
    report.write_summary(std::cout, method);
    if (!report.failures.empty()) {
        std::cerr << report.failures.size() << " pair(s) skipped:\n";
        for (const auto& f : report.failures) {
            std::cerr << "  " << f << "\n";
        }
        return kExitPartial;
    }
    return kExitOk;
}

std::optional<diffusion::FeatureExtractor> extractor_for(const RunConfig& cfg, bool needed)
{
    if (!needed) {
        return std::nullopt;
    }
    return pipeline::load_extractor(cfg);
}

data::PreprocessOptions preprocess_for(const RunConfig& cfg)
{
    if (cfg.data.manifest.empty()) {
        return {cfg.data.phantom_size, cfg.data.phantom_size};
    }
    return cfg.data.preprocess_options();
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Latent-diffusion-guided deformable 2D registration"};
    app.require_subcommand(1);

    CommonOptions common;

    auto* phantom = app.add_subcommand("phantom", "export a synthetic phantom dataset with a manifest");
    std::string phantom_out;
    std::string phantom_family;
    add_common(phantom, common, false);
    phantom->add_option("-o,--out", phantom_out, "output directory")->required();
    phantom->add_option("--family", phantom_family, "appearance family (A or B)");

    auto* ae_train = app.add_subcommand("ae-train", "train the autoencoder");
    add_common(ae_train, common);

    auto* ldm_train = app.add_subcommand("ldm-train", "train the latent denoiser on frozen autoencoder latents");
    add_common(ldm_train, common);

    auto* reg_train = app.add_subcommand("reg-train", "train the registration network");
    std::string reg_out;
    add_common(reg_train, common);
    reg_train->add_option("-o,--out", reg_out, "output directory (default: train.checkpoint_dir)");

    auto* eval = app.add_subcommand("eval", "evaluate a registration checkpoint on the test split");
    std::string eval_ckpt, eval_out, eval_family;
    bool eval_identity = false;
    add_common(eval, common);
    eval->add_option("--checkpoint", eval_ckpt, "registration checkpoint (default: train.checkpoint_dir/regnet.ckpt)");
    eval->add_option("-o,--out", eval_out, "output directory (default: train.checkpoint_dir)");
    eval->add_option("--family", eval_family, "cross-dataset mode: test phantoms of another appearance family");
    eval->add_flag("--identity", eval_identity, "evaluate the zero field instead of a network");

    auto* warp = app.add_subcommand("warp", "register one pair and write warped outputs");
    std::string warp_ckpt, warp_moving, warp_fixed, warp_ml, warp_fl, warp_out;
    warp->add_option("--checkpoint", warp_ckpt, "registration checkpoint")->required();
    warp->add_option("--moving", warp_moving, "moving image")->required();
    warp->add_option("--fixed", warp_fixed, "fixed image")->required();
    warp->add_option("--moving-labels", warp_ml, "moving label map");
    warp->add_option("--fixed-labels", warp_fl, "fixed label map");
    warp->add_option("-o,--out", warp_out, "output prefix")->required();

    auto* sweep = app.add_subcommand("sweep", "beta sweep over [sweep] betas and seeds");
    std::string sweep_out;
    add_common(sweep, common);
    sweep->add_option("-o,--out", sweep_out, "output directory (default: train.checkpoint_dir)");

    auto* ablate = app.add_subcommand("ablate", "four-row module ablation over [sweep] seeds");
    std::string ablate_out;
    add_common(ablate, common);
    ablate->add_option("-o,--out", ablate_out, "output directory (default: train.checkpoint_dir)");

    auto* report = app.add_subcommand("report", "summarise a run directory into report.md and plots");
    std::string report_dir;
    report->add_option("run_dir", report_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*phantom) {
            auto cfg = load_config(common);
            auto params = cfg.data.phantom_params(phantom_family.empty() ? cfg.data.family : phantom_family);
            auto manifest = data::export_phantom_dataset(phantom_out, cfg.data.counts, params, cfg.data.seed);
            write_snapshot(cfg, phantom_out);
            std::cout << "wrote " << manifest.entries.size() << " pairs to " << phantom_out << "/manifest.ini\n";
            return kExitOk;
        }
        if (*report) {
            std::cout << "wrote " << pipeline::write_report(report_dir).string() << "\n";
            return kExitOk;
        }
        if (*warp) {
            RunConfig stored;
            auto net = pipeline::load_regnet(warp_ckpt, &stored);
            auto predict = pipeline::make_predictor(net, extractor_for(stored, net->config().use_ldmfe));
            const auto opts = preprocess_for(stored);
            RegistrationPair pair;
            pair.pair_id = fs::path(warp_moving).stem().string();
            pair.moving = data::preprocess(io::read_image(warp_moving), opts);
            pair.fixed = data::preprocess(io::read_image(warp_fixed), opts);
            if (!warp_ml.empty()) {
                pair.moving_labels = data::preprocess_labels(io::read_labels(warp_ml), opts);
            }
            if (!warp_fl.empty()) {
                pair.fixed_labels = data::preprocess_labels(io::read_labels(warp_fl), opts);
            }
            pair.validate();
            auto field = predict(pair);
            for (const auto& p : pipeline::write_warp_outputs(warp_out, pair, field)) {
                std::cout << p.string() << "\n";
            }
            if (pair.moving_labels && pair.fixed_labels) {
                auto d = metrics::dsc(warp::warp_labels(*pair.moving_labels, field), *pair.fixed_labels,
                                      stored.data.label_subset);
                std::cout << "mean DSC " << d.mean << "\n";
            }
            return kExitOk;
        }

        auto cfg = load_config(common);
        if (*ae_train) {
            auto data = pipeline::load_data(cfg);
            pipeline::train_autoencoder_phase(cfg, data);
            std::cout << "wrote " << cfg.autoencoder_checkpoint().string() << "\n";
            return kExitOk;
        }
        if (*ldm_train) {
            auto data = pipeline::load_data(cfg);
            auto model = pipeline::load_autoencoder(cfg);
            pipeline::train_ldm_phase(cfg, data, model);
            std::cout << "wrote " << cfg.ldm_checkpoint().string() << "\n";
            return kExitOk;
        }
        if (*reg_train) {
            auto data = pipeline::load_data(cfg);
            const bool need_ldm = cfg.ablation.use_ldmfe || cfg.effective_loss().beta < 1.0;
            const fs::path out = reg_out.empty() ? cfg.train.checkpoint_dir : fs::path(reg_out);
            auto result = pipeline::train_registration(cfg, data, extractor_for(cfg, need_ldm), out, log_line);
            std::cout << "best epoch " << result.best_epoch << " val DSC " << result.best_val_dsc << "\n"
                      << "wrote " << (out / "regnet.ckpt").string() << "\n";
            return kExitOk;
        }
        if (*eval) {
            auto data = pipeline::load_data(cfg, eval_family);
            const fs::path out = eval_out.empty() ? cfg.train.checkpoint_dir : fs::path(eval_out);
            if (eval_identity) {
                return finish_eval(pipeline::evaluate(pipeline::identity_predictor(), data.test, cfg.data.label_subset),
                                   data.test_failures, out, "Identity");
            }
            const fs::path ckpt = eval_ckpt.empty() ? cfg.regnet_checkpoint() : fs::path(eval_ckpt);
            RunConfig stored;
            auto net = pipeline::load_regnet(ckpt, &stored);
            auto predict = pipeline::make_predictor(net, extractor_for(stored, net->config().use_ldmfe));
            return finish_eval(pipeline::evaluate(predict, data.test, cfg.data.label_subset), data.test_failures, out,
                               "LDM-Morph");
        }
        if (*sweep) {
            auto data = pipeline::load_data(cfg);
            const fs::path out = sweep_out.empty() ? cfg.train.checkpoint_dir : fs::path(sweep_out);
            pipeline::run_beta_sweep(cfg, data, out, log_line);
            std::cout << "wrote " << (out / "sweep.csv").string() << "\n";
            return kExitOk;
        }
        if (*ablate) {
            auto data = pipeline::load_data(cfg);
            const fs::path out = ablate_out.empty() ? cfg.train.checkpoint_dir : fs::path(ablate_out);
            pipeline::run_ablation(cfg, data, out, log_line);
            std::cout << "wrote " << (out / "ablation.csv").string() << "\n";
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
