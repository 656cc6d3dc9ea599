#include "ldmorph/pipeline.hpp"

#include "ldmorph/checkpoint.hpp"
#include "ldmorph/io.hpp"
#include "ldmorph/render.hpp"
#include "ldmorph/warp.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace ldmorph::pipeline {

using warp::warp_image;
using warp::warp_labels;

namespace {

void say(const Progress& progress, const std::string& line)
{
    if (progress) {
        progress(line);
    }
}

void freeze(torch::nn::Module& m)
{
    for (auto& p : m.parameters()) {
        p.set_requires_grad(false);
    }
    m.eval();
}

ckpt::Checkpoint load_checkpoint(const fs::path& path, const std::string& what)
{
    if (!fs::exists(path)) {
        throw RuntimeFailure("missing " + what + " checkpoint " + path.string() + " (run the earlier phase first)");
    }
    return ckpt::Checkpoint::load(path);
}

RunConfig stored_config(const ckpt::Checkpoint& c, const fs::path& path)
{
    auto it = c.meta.find("config");
    if (it == c.meta.end()) {
        throw RuntimeFailure("checkpoint " + path.string() + " has no config snapshot");
    }
    return RunConfig::parse(it->second);
}

diffusion::NoiseSchedule schedule_of(const RunConfig& cfg)
{
    return diffusion::make_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end);
}

std::string join_doubles(const std::vector<double>& v)
{
    std::ostringstream out;
    out << std::setprecision(17);
    for (size_t i = 0; i < v.size(); ++i) {
        out << (i ? "," : "") << v[i];
    }
    return out.str();
}

// cached per-pair network inputs
struct PairTensors {
    torch::Tensor moving, fixed, fixed_latent;
    FeaturePyramid features;
    const RegistrationPair* pair = nullptr;
};

std::vector<PairTensors> prepare(const std::vector<RegistrationPair>& pairs, torch::ScalarType dtype,
                                 std::optional<diffusion::FeatureExtractor>& extractor, bool need_features,
                                 bool need_latent)
{
    torch::NoGradGuard no_grad;
    std::vector<PairTensors> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        p.validate();
        PairTensors t;
        t.pair = &p;
        t.moving = p.moving.batched(dtype);
        t.fixed = p.fixed.batched(dtype);
        if (need_features) {
            t.features = extractor->extract(p.moving.batched(), p.fixed.batched());
            for (auto& l : t.features.levels) {
                l = l.to(dtype);
            }
        }
        if (need_latent) {
            auto& ae = extractor->autoencoder;
            t.fixed_latent = ae->encode(p.fixed.batched(module_dtype(*ae))).to(dtype);
        }
        out.push_back(std::move(t));
    }
    return out;
}

FeaturePyramid stack_features(const std::vector<const PairTensors*>& items)
{
    FeaturePyramid out;
    if (items.empty() || items.front()->features.size() == 0) {
        return out;
    }
    out.stream = FeaturePyramid::Stream::Latent;
    for (size_t l = 0; l < items.front()->features.size(); ++l) {
        std::vector<torch::Tensor> parts;
        for (const auto* it : items) {
            parts.push_back(it->features.levels[l]);
        }
        out.levels.push_back(torch::cat(parts, 0));
    }
    return out;
}

struct Score {
    double dsc = 0, folding = 0;
};

Score score(regnet::RegNet& net, const std::vector<PairTensors>& items, const std::vector<int64_t>& labels)
{
    torch::NoGradGuard no_grad;
    Score s;
    size_t n = 0;
    for (const auto& it : items) {
        const auto& p = *it.pair;
        if (!p.moving_labels || !p.fixed_labels) {
            continue;
        }
        DisplacementField2D field(net->forward(it.moving, it.fixed, it.features).squeeze(0));
        auto warped = warp_labels(*p.moving_labels, field);
        s.dsc += metrics::dsc(warped, *p.fixed_labels, labels).mean;
        s.folding += metrics::folding_percent(metrics::jacobian_determinant(field));
        ++n;
    }
    if (n > 0) {
        s.dsc /= static_cast<double>(n);
        s.folding /= static_cast<double>(n);
    }
    return s;
}

std::string fixed_fmt(double v, int digits = 4)
{
    std::ostringstream o;
    o << std::fixed << std::setprecision(digits) << v;
    return o.str();
}

} // namespace

Dataset load_data(const RunConfig& cfg, const std::string& test_family)
{
    const auto& d = cfg.data;
    Dataset out;
    if (!d.manifest.empty()) {
        auto m = data::DatasetManifest::read(d.manifest);
        m.validate();
        const auto opts = d.preprocess_options();
        out.train = data::load_dataset(m.filtered(data::Split::Train), opts);
        out.val = data::load_dataset(m.filtered(data::Split::Val), opts);
        out.test = data::load_dataset(m.filtered(data::Split::Test), opts, &out.test_failures);
        if (!test_family.empty()) {
            throw ConfigError("a test family override only applies to generated phantoms");
        }
        return out;
    }
    auto splits = data::make_phantom_splits(d.counts, d.phantom_params(d.family), d.seed);
    out.train = std::move(splits.train);
    out.val = std::move(splits.val);
    out.test = std::move(splits.test);
    const auto family = test_family.empty() ? d.test_family : test_family;
    if (!family.empty() && family != d.family) {
        data::SplitCounts only_test{0, 0, d.counts.test};
        out.test = data::make_phantom_splits(only_test, d.phantom_params(family), d.seed).test;
    }
    return out;
}

std::vector<Image2D> pair_images(const std::vector<RegistrationPair>& pairs)
{
    std::vector<Image2D> out;
    for (const auto& p : pairs) {
        out.push_back(p.moving);
        out.push_back(p.fixed);
    }
    return out;
}

ae::Autoencoder train_autoencoder_phase(const RunConfig& cfg, const Dataset& data)
{
    at::set_num_threads(static_cast<int>(cfg.train.threads));
    fs::create_directories(cfg.train.checkpoint_dir);
    ae::TrainConfig tc;
    tc.epochs = cfg.autoencoder.epochs;
    tc.batch_size = cfg.autoencoder.batch_size;
    tc.learning_rate = cfg.autoencoder.learning_rate;
    tc.seed = cfg.train.seed;
    tc.curve_path = cfg.train.checkpoint_dir / "ae_curve.csv";
    auto result = ae::train_autoencoder(pair_images(data.train), pair_images(data.val), cfg.autoencoder.model, tc);
    ckpt::Checkpoint c;
    c.meta["kind"] = "autoencoder";
    c.meta["config"] = cfg.to_ini();
    c.meta["best_epoch"] = std::to_string(result.best_epoch + 1);
    c.meta["val_history"] = join_doubles(result.val_loss);
    c.add_module("autoencoder", *result.model);
    c.save(cfg.autoencoder_checkpoint());
    write_snapshot(cfg, cfg.train.checkpoint_dir);
    return result.model;
}

namespace {

torch::Tensor encode_all(ae::Autoencoder& model, const std::vector<Image2D>& images)
{
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> parts;
    const auto dtype = module_dtype(*model);
    for (size_t start = 0; start < images.size(); start += 32) {
        std::vector<Image2D> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                   images.begin() + static_cast<std::ptrdiff_t>(std::min(start + 32, images.size())));
        parts.push_back(model->encode(ae::stack_images(chunk, dtype)));
    }
    return parts.empty() ? torch::Tensor() : torch::cat(parts, 0);
}

} // namespace

diffusion::DenoiserUNet train_ldm_phase(const RunConfig& cfg, const Dataset& data, ae::Autoencoder& autoencoder)
{
    at::set_num_threads(static_cast<int>(cfg.train.threads));
    fs::create_directories(cfg.train.checkpoint_dir);
    freeze(*autoencoder);
    auto latents = encode_all(autoencoder, pair_images(data.train));
    auto val = data.val.empty() ? torch::Tensor() : encode_all(autoencoder, pair_images(data.val));
    auto model_cfg = cfg.diffusion.model;
    model_cfg.latent_channels = cfg.autoencoder.model.latent_channels;
    diffusion::LdmTrainConfig tc;
    tc.epochs = cfg.diffusion.epochs;
    tc.batch_size = cfg.diffusion.batch_size;
    tc.learning_rate = cfg.diffusion.learning_rate;
    tc.seed = cfg.train.seed;
    tc.curve_path = cfg.train.checkpoint_dir / "ldm_curve.csv";
    auto result = diffusion::train_ldm(latents, val, model_cfg, schedule_of(cfg), tc);
    ckpt::Checkpoint c;
    c.meta["kind"] = "ldm";
    c.meta["config"] = cfg.to_ini();
    c.meta["best_epoch"] = std::to_string(result.best_epoch + 1);
    c.meta["val_history"] = join_doubles(result.val_loss);
    c.meta["autoencoder_hash"] = std::to_string(ckpt::hash_module(*autoencoder));
    c.add_module("denoiser", *result.model);
    c.save(cfg.ldm_checkpoint());
    write_snapshot(cfg, cfg.train.checkpoint_dir);
    return result.model;
}

ae::Autoencoder load_autoencoder(const RunConfig& cfg)
{
    const auto path = cfg.autoencoder_checkpoint();
    auto c = load_checkpoint(path, "autoencoder");
    auto stored = stored_config(c, path);
    ae::Autoencoder model(stored.autoencoder.model);
    c.load_module("autoencoder", *model);
    freeze(*model);
    return model;
}

diffusion::DenoiserUNet load_denoiser(const RunConfig& cfg)
{
    const auto path = cfg.ldm_checkpoint();
    auto c = load_checkpoint(path, "latent diffusion");
    auto stored = stored_config(c, path);
    auto model_cfg = stored.diffusion.model;
    model_cfg.latent_channels = stored.autoencoder.model.latent_channels;
    diffusion::DenoiserUNet model(model_cfg);
    c.load_module("denoiser", *model);
    freeze(*model);
    return model;
}

diffusion::FeatureExtractor load_extractor(const RunConfig& cfg)
{
    diffusion::FeatureExtractor fx;
    fx.autoencoder = load_autoencoder(cfg);
    fx.denoiser = load_denoiser(cfg);
    auto c = ckpt::Checkpoint::load(cfg.ldm_checkpoint());
    auto it = c.meta.find("autoencoder_hash");
    if (it != c.meta.end() && it->second != std::to_string(ckpt::hash_module(*fx.autoencoder))) {
        throw RuntimeFailure("autoencoder checkpoint differs from the one the latent diffusion model was trained on");
    }
    fx.schedule = schedule_of(stored_config(c, cfg.ldm_checkpoint()));
    fx.t = cfg.diffusion.feature_t;
    fx.layers = cfg.diffusion.feature_layers;
    for (auto l : fx.layers) {
        if (l > fx.denoiser->config().levels) {
            throw ConfigError("diffusion.feature_layers entry " + std::to_string(l) + " exceeds the trained U-Net's " +
                              std::to_string(fx.denoiser->config().levels) + " levels");
        }
    }
    if (fx.t > fx.schedule.T) {
        throw ConfigError("diffusion.feature_t exceeds the trained schedule length");
    }
    return fx;
}

RegTrainResult train_registration(const RunConfig& cfg, const Dataset& data,
                                  std::optional<diffusion::FeatureExtractor> extractor, const fs::path& out_dir,
                                  const Progress& progress)
{
    at::set_num_threads(static_cast<int>(cfg.train.threads));
    const auto weights = cfg.effective_loss();
    weights.validate();
    const bool need_features = cfg.ablation.use_ldmfe;
    const bool need_latent = weights.beta < 1.0;
    if ((need_features || need_latent) && !extractor) {
        throw RuntimeFailure("registration training needs the trained autoencoder and latent diffusion model");
    }
    if (data.train.empty()) {
        throw RuntimeFailure("registration training: empty training split");
    }
    const auto dtype = cfg.dtype();
    const auto labels = cfg.data.label_subset;
    const auto feature_channels =
        extractor ? extractor->feature_channels() : 2 * cfg.diffusion.model.width;

    uint64_t ae_hash = 0, ldm_hash = 0;
    if (extractor) {
        ae_hash = ckpt::hash_module(*extractor->autoencoder);
        ldm_hash = ckpt::hash_module(*extractor->denoiser);
    }

    auto train_items = prepare(data.train, dtype, extractor, need_features, need_latent);
    auto val_items = prepare(data.val.empty() ? data.train : data.val, dtype, extractor, need_features, false);

    torch::manual_seed(cfg.train.seed);
    RegTrainResult result;
    result.net = regnet::RegNet(cfg.network_config(feature_channels));
    auto& net = result.net;
    net->to(dtype);

    loss::LatentEncoder encoder;
    if (need_latent) {
        auto ae = extractor->autoencoder;
        const auto ae_dtype = module_dtype(*ae);
        encoder = [ae, ae_dtype, dtype](const torch::Tensor& x) mutable { return ae->encode(x.to(ae_dtype)).to(dtype); };
    }

    std::unique_ptr<torch::optim::Optimizer> optim;
    if (cfg.train.optimizer == "adamw") {
        optim = std::make_unique<torch::optim::AdamW>(net->parameters(),
                                                      torch::optim::AdamWOptions(cfg.train.learning_rate));
    } else {
        optim = std::make_unique<torch::optim::Adam>(net->parameters(),
                                                     torch::optim::AdamOptions(cfg.train.learning_rate));
    }

    net->eval();
    auto initial = score(net, val_items, labels);
    EpochLog first;
    first.val_dsc = initial.dsc;
    first.val_folding = initial.folding;
    result.log.push_back(first);
    result.best_val_dsc = initial.dsc;
    auto best_state = ckpt::snapshot(*net);
    say(progress, "epoch 0 val_dsc " + fixed_fmt(initial.dsc));

    std::mt19937_64 rng(cfg.train.seed);
    std::vector<size_t> order(train_items.size());
    std::iota(order.begin(), order.end(), 0);
    const auto batch = static_cast<size_t>(cfg.train.batch_size);
    for (int64_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        net->train();
        std::shuffle(order.begin(), order.end(), rng);
        EpochLog log;
        log.epoch = epoch;
        const auto started = std::chrono::steady_clock::now();
        for (size_t start = 0; start < order.size(); start += batch) {
            std::vector<const PairTensors*> items;
            std::vector<torch::Tensor> m, f, fl;
            for (size_t i = start; i < std::min(start + batch, order.size()); ++i) {
                const auto& it = train_items[order[i]];
                items.push_back(&it);
                m.push_back(it.moving);
                f.push_back(it.fixed);
                if (need_latent) {
                    fl.push_back(it.fixed_latent);
                }
            }
            auto moving = torch::cat(m, 0);
            auto fixed = torch::cat(f, 0);
            auto field = net->forward(moving, fixed, stack_features(items));
            auto terms = loss::loss_total(moving, fixed, field, encoder, weights,
                                          need_latent ? torch::cat(fl, 0) : torch::Tensor());
            const double total = terms.total.item<double>();
            if (!std::isfinite(total)) {
                throw RuntimeFailure("registration training: non-finite loss at epoch " + std::to_string(epoch) +
                                     " (pair " + items.front()->pair->pair_id + ")");
            }
            optim->zero_grad();
            terms.total.backward();
            optim->step();
            const auto n = static_cast<double>(items.size());
            log.loss += total * n;
            log.sim += terms.sim.item<double>() * n;
            log.org += terms.org.item<double>() * n;
            log.lat += terms.lat.item<double>() * n;
            log.smooth += terms.smooth.item<double>() * n;
        }
        const auto count = static_cast<double>(order.size());
        log.loss /= count;
        log.sim /= count;
        log.org /= count;
        log.lat /= count;
        log.smooth /= count;
        net->eval();
        auto s = score(net, val_items, labels);
        log.val_dsc = s.dsc;
        log.val_folding = s.folding;
        result.log.push_back(log);
        if (s.dsc > result.best_val_dsc) {
            result.best_val_dsc = s.dsc;
            result.best_epoch = epoch;
            best_state = ckpt::snapshot(*net);
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        say(progress, "epoch " + std::to_string(epoch) + " loss " + fixed_fmt(log.loss, 6) + " val_dsc " +
                          fixed_fmt(s.dsc) + " folding% " + fixed_fmt(s.folding, 3) + " (" + fixed_fmt(secs, 1) +
                          " s)");
    }
    ckpt::restore(*net, best_state);
    net->eval();

    if (extractor && (ckpt::hash_module(*extractor->autoencoder) != ae_hash ||
                      ckpt::hash_module(*extractor->denoiser) != ldm_hash)) {
        throw RuntimeFailure("frozen autoencoder or denoiser weights changed during registration training");
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_train_log(out_dir / "train_log.csv", result.log);
        save_regnet(out_dir / "regnet.ckpt", net, cfg, &result);
        write_snapshot(cfg, out_dir);
    }
    return result;
}

void save_regnet(const fs::path& path, regnet::RegNet& net, const RunConfig& cfg, const RegTrainResult* result)
{
    ckpt::Checkpoint c;
    c.meta["kind"] = "regnet";
    c.meta["config"] = cfg.to_ini();
    c.meta["feature_channels"] = std::to_string(net->config().feature_channels);
    if (result != nullptr) {
        std::vector<double> history;
        for (const auto& e : result->log) {
            history.push_back(e.val_dsc);
        }
        c.meta["best_epoch"] = std::to_string(result->best_epoch);
        c.meta["val_history"] = join_doubles(history);
    }
    c.add_module("regnet", *net);
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    c.save(path);
}

regnet::RegNet load_regnet(const fs::path& path, RunConfig* stored)
{
    auto c = load_checkpoint(path, "registration");
    auto cfg = stored_config(c, path);
    auto it = c.meta.find("feature_channels");
    if (it == c.meta.end()) {
        throw RuntimeFailure("registration checkpoint " + path.string() + " lacks feature_channels");
    }
    regnet::RegNet net(cfg.network_config(std::stoll(it->second)));
    net->to(cfg.dtype());
    c.load_module("regnet", *net);
    net->eval();
    if (stored != nullptr) {
        *stored = cfg;
    }
    return net;
}

void write_train_log(const fs::path& path, const std::vector<EpochLog>& log)
{
    std::ofstream out(path);
    if (!out) {
        throw RuntimeFailure("cannot write " + path.string());
    }
    out << "epoch,loss,sim,org,lat,smooth,val_dsc,val_folding\n" << std::setprecision(17);
    for (const auto& e : log) {
        out << e.epoch << "," << e.loss << "," << e.sim << "," << e.org << "," << e.lat << "," << e.smooth << ","
            << e.val_dsc << "," << e.val_folding << "\n";
    }
}

std::vector<EpochLog> read_train_log(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw RuntimeFailure("cannot read " + path.string());
    }
    std::string line;
    std::getline(in, line);
    std::vector<EpochLog> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream row(line);
        EpochLog e;
        row >> e.epoch >> e.loss >> e.sim >> e.org >> e.lat >> e.smooth >> e.val_dsc >> e.val_folding;
        if (row.fail()) {
            throw RuntimeFailure("malformed training log row in " + path.string());
        }
        out.push_back(e);
    }
    return out;
}

FieldPredictor make_predictor(regnet::RegNet net, std::optional<diffusion::FeatureExtractor> extractor)
{
    if (net->config().use_ldmfe && !extractor) {
        throw RuntimeFailure("the network uses latent features but no latent diffusion model was loaded");
    }
    return [net, extractor](const RegistrationPair& pair) mutable {
        FeaturePyramid features;
        if (net->config().use_ldmfe) {
            features = extractor->extract(pair.moving.batched(), pair.fixed.batched());
        }
        return regnet::predict_field(net, pair.moving, pair.fixed, features);
    };
}

FieldPredictor identity_predictor()
{
    return [](const RegistrationPair& pair) {
        return DisplacementField2D::zeros(pair.fixed.height(), pair.fixed.width());
    };
}

metrics::EvalReport evaluate(const FieldPredictor& predict, const std::vector<RegistrationPair>& pairs,
                             const std::vector<int64_t>& labels, Timing timing)
{
    metrics::EvalReport report;
    report.labels = labels;
    for (const auto& pair : pairs) {
        try {
            pair.validate();
            if (!pair.moving_labels || !pair.fixed_labels) {
                throw std::invalid_argument("pair " + pair.pair_id + " has no label maps");
            }
            DisplacementField2D field;
            metrics::PairReport row;
            row.pair_id = pair.pair_id;
            if (timing == Timing::Median) {
                auto t = metrics::time_registration([&] { field = predict(pair); });
                row.runtime_seconds = t.median_seconds;
            } else {
                const auto start = std::chrono::steady_clock::now();
                field = predict(pair);
                row.runtime_seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            }
            if (!field.all_finite()) {
                throw RuntimeFailure("pair " + pair.pair_id + ": non-finite displacement");
            }
            auto warped = warp_labels(*pair.moving_labels, field);
            auto d = metrics::dsc(warped, *pair.fixed_labels, labels);
            row.dsc_per_label = d.per_label;
            row.mean_dsc = d.mean;
            row.initial_dsc = metrics::dsc(*pair.moving_labels, *pair.fixed_labels, labels).mean;
            row.folding_percent = metrics::folding_percent(metrics::jacobian_determinant(field));
            report.pairs.push_back(std::move(row));
        } catch (const std::exception& e) {
            report.failures.push_back(pair.pair_id + ": " + e.what());
        }
    }
    return report;
}

std::vector<fs::path> write_warp_outputs(const fs::path& prefix, const RegistrationPair& pair,
                                         const DisplacementField2D& field)
{
    if (prefix.has_parent_path()) {
        fs::create_directories(prefix.parent_path());
    }
    std::vector<fs::path> written;
    std::vector<std::string> errors;
    auto emit = [&](const std::string& suffix, const std::function<void(const fs::path&)>& fn) {
        const fs::path path = prefix.string() + suffix;
        try {
            fn(path);
            written.push_back(path);
        } catch (const std::exception& e) {
            errors.push_back(path.string() + ": " + e.what());
        }
    };
    auto det = metrics::jacobian_determinant(field).det;
    emit("_warped.png", [&](const fs::path& p) { io::write_image(p, warp_image(pair.moving, field)); });
    if (pair.moving_labels) {
        emit("_warped_labels.png", [&](const fs::path& p) { io::write_labels(p, warp_labels(*pair.moving_labels, field)); });
    }
    emit("_field.bin", [&](const fs::path& p) { io::write_field(p, field); });
    emit("_jacobian.bin", [&](const fs::path& p) { io::write_scalar_map(p, det); });
    emit("_field_rgb.png", [&](const fs::path& p) { io::write_rgb_png(p, render::field_rgb(field)); });
    emit("_field_grid.png", [&](const fs::path& p) { io::write_rgb_png(p, render::field_grid(field)); });
    emit("_jacobian.png", [&](const fs::path& p) { io::write_rgb_png(p, render::jacobian_rgb(det)); });
    if (!errors.empty()) {
        std::string msg = "failed to write:";
        for (const auto& e : errors) {
            msg += "\n  " + e;
        }
        throw RuntimeFailure(msg);
    }
    return written;
}

std::vector<AblationRow> ablation_rows()
{
    return {{"baseline", false, false, false},
            {"+LDM-FE", true, false, false},
            {"+LGCA", true, true, false},
            {"+L_lat", true, true, true}};
}

namespace {

TableEntry table_entry(const std::string& row, uint64_t seed, double beta, const metrics::EvalReport& report)
{
    TableEntry e;
    e.row = row;
    e.seed = seed;
    e.beta = beta;
    e.dsc = report.dsc();
    e.folding = report.folding();
    e.initial_dsc = report.initial_dsc().mean;
    e.failures = report.failures.size();
    return e;
}

std::optional<diffusion::FeatureExtractor> maybe_extractor(const RunConfig& cfg, bool needed)
{
    if (!needed) {
        return std::nullopt;
    }
    return load_extractor(cfg);
}

void write_eval(const fs::path& dir, const metrics::EvalReport& report, const std::string& method)
{
    fs::create_directories(dir);
    std::ofstream csv(dir / "eval_pairs.csv");
    report.write_csv(csv);
    std::ofstream summary(dir / "eval_summary.txt");
    report.write_summary(summary, method);
}

} // namespace

std::vector<TableEntry> run_ablation(const RunConfig& cfg, const Dataset& data, const fs::path& out_dir,
                                     const Progress& progress)
{
    auto extractor = maybe_extractor(cfg, true);
    std::vector<TableEntry> table;
    for (auto seed : cfg.sweep.seeds) {
        for (const auto& row : ablation_rows()) {
            auto c = cfg;
            c.train.seed = seed;
            c.ablation = {row.use_ldmfe, row.use_lgca, row.use_latent_loss};
            const auto dir = out_dir / "ablation" / (row.name.substr(1 * (row.name[0] == '+')) + "_seed" +
                                                     std::to_string(seed));
            say(progress, "ablation " + row.name + " seed " + std::to_string(seed));
            auto trained = train_registration(c, data, extractor, dir, progress);
            auto report = evaluate(make_predictor(trained.net, extractor), data.test, c.data.label_subset,
                                   Timing::Single);
            write_eval(dir, report, row.name);
            table.push_back(table_entry(row.name, seed, c.effective_loss().beta, report));
            say(progress, "  test dsc " + fixed_fmt(table.back().dsc.mean) + " folding% " +
                              fixed_fmt(table.back().folding.mean, 3));
        }
    }
    fs::create_directories(out_dir);
    write_table_csv(out_dir / "ablation.csv", table);
    write_snapshot(cfg, out_dir);
    return table;
}

std::vector<TableEntry> run_beta_sweep(const RunConfig& cfg, const Dataset& data, const fs::path& out_dir,
                                       const Progress& progress)
{
    auto extractor = maybe_extractor(cfg, true);
    std::vector<TableEntry> table;
    for (auto seed : cfg.sweep.seeds) {
        for (auto beta : cfg.sweep.betas) {
            auto c = cfg;
            c.train.seed = seed;
            c.loss.beta = beta;
            c.ablation = {true, true, true};
            std::ostringstream name;
            name << "beta" << std::fixed << std::setprecision(2) << beta << "_seed" << seed;
            const auto dir = out_dir / "sweep" / name.str();
            say(progress, "sweep beta " + fixed_fmt(beta, 2) + " seed " + std::to_string(seed));
            auto trained = train_registration(c, data, extractor, dir, progress);
            auto report = evaluate(make_predictor(trained.net, extractor), data.test, c.data.label_subset,
                                   Timing::Single);
            write_eval(dir, report, "beta=" + fixed_fmt(beta, 2));
            table.push_back(table_entry("beta", seed, beta, report));
            say(progress, "  test dsc " + fixed_fmt(table.back().dsc.mean) + " folding% " +
                              fixed_fmt(table.back().folding.mean, 3));
        }
    }
    fs::create_directories(out_dir);
    write_table_csv(out_dir / "sweep.csv", table);
    write_snapshot(cfg, out_dir);

    std::vector<render::Series> dsc_series, fold_series;
    for (auto seed : cfg.sweep.seeds) {
        render::Series d{"seed " + std::to_string(seed), {}, {}}, f = d;
        for (const auto& e : table) {
            if (e.seed == seed) {
                d.x.push_back(e.beta);
                d.y.push_back(e.dsc.mean);
                f.x.push_back(e.beta);
                f.y.push_back(e.folding.mean);
            }
        }
        dsc_series.push_back(d);
        fold_series.push_back(f);
    }
    render::write_line_plot(out_dir / "sweep_dsc.svg", "Mean DSC vs beta", "beta", "mean DSC", dsc_series);
    render::write_line_plot(out_dir / "sweep_folding.svg", "Folding vs beta", "beta", "|J| <= 0 (%)", fold_series);
    return table;
}

void write_table_csv(const fs::path& path, const std::vector<TableEntry>& table)
{
    std::ofstream out(path);
    if (!out) {
        throw RuntimeFailure("cannot write " + path.string());
    }
    out << "row,seed,beta,dsc_mean,dsc_std,folding_mean,folding_std,initial_dsc,failures\n" << std::setprecision(10);
    for (const auto& e : table) {
        out << e.row << "," << e.seed << "," << e.beta << "," << e.dsc.mean << "," << e.dsc.stddev << ","
            << e.folding.mean << "," << e.folding.stddev << "," << e.initial_dsc << "," << e.failures << "\n";
    }
}

std::vector<TableEntry> read_table_csv(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw RuntimeFailure("cannot read " + path.string());
    }
    std::string line;
    std::getline(in, line);
    std::vector<TableEntry> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto comma = line.find(',');
        TableEntry e;
        e.row = line.substr(0, comma);
        auto rest = line.substr(comma + 1);
        std::replace(rest.begin(), rest.end(), ',', ' ');
        std::istringstream row(rest);
        row >> e.seed >> e.beta >> e.dsc.mean >> e.dsc.stddev >> e.folding.mean >> e.folding.stddev >> e.initial_dsc >>
            e.failures;
        if (row.fail()) {
            throw RuntimeFailure("malformed table row in " + path.string());
        }
        out.push_back(e);
    }
    return out;
}

namespace {

void plot_curve_csv(const fs::path& csv, const fs::path& svg, const std::string& title)
{
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    render::Series train{"train", {}, {}}, val{"val", {}, {}};
    std::string line;
    while (std::getline(in, line)) {
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream row(line);
        double e, t, v;
        if (row >> e >> t >> v) {
            train.x.push_back(e);
            train.y.push_back(t);
            val.x.push_back(e);
            val.y.push_back(v);
        }
    }
    render::write_line_plot(svg, title, "epoch", "loss", {train, val});
}

void table_markdown(std::ostream& out, const std::vector<TableEntry>& table, bool by_beta)
{
    // mean over seeds per row key
    std::vector<std::string> keys;
    std::map<std::string, std::vector<const TableEntry*>> groups;
    for (const auto& e : table) {
        const auto key = by_beta ? fixed_fmt(e.beta, 2) : e.row;
        if (!groups.count(key)) {
            keys.push_back(key);
        }
        groups[key].push_back(&e);
    }
    out << "| " << (by_beta ? "beta" : "row") << " | seeds | mean DSC | folding (%) | initial DSC |\n";
    out << "|---|---|---|---|---|\n";
    for (const auto& k : keys) {
        double d = 0, f = 0, i = 0;
        for (const auto* e : groups[k]) {
            d += e->dsc.mean;
            f += e->folding.mean;
            i += e->initial_dsc;
        }
        const auto n = static_cast<double>(groups[k].size());
        out << "| " << k << " | " << groups[k].size() << " | " << fixed_fmt(d / n) << " | " << fixed_fmt(f / n, 3)
            << " | " << fixed_fmt(i / n) << " |\n";
    }
}

} // namespace

fs::path write_report(const fs::path& run_dir)
{
    if (!fs::is_directory(run_dir)) {
        throw RuntimeFailure("report: " + run_dir.string() + " is not a directory");
    }
    const auto path = run_dir / "report.md";
    std::ofstream out(path);
    if (!out) {
        throw RuntimeFailure("cannot write " + path.string());
    }
    out << "# Run report: " << run_dir.filename().string() << "\n\n";
    bool any = false;
    if (fs::exists(run_dir / "ae_curve.csv")) {
        plot_curve_csv(run_dir / "ae_curve.csv", run_dir / "ae_curve.svg", "Autoencoder reconstruction MSE");
        out << "## Autoencoder\n\n![autoencoder curve](ae_curve.svg)\n\n";
        any = true;
    }
    if (fs::exists(run_dir / "ldm_curve.csv")) {
        plot_curve_csv(run_dir / "ldm_curve.csv", run_dir / "ldm_curve.svg", "Denoiser noise-prediction MSE");
        out << "## Latent diffusion\n\n![ldm curve](ldm_curve.svg)\n\n";
        any = true;
    }
    if (fs::exists(run_dir / "train_log.csv")) {
        auto log = read_train_log(run_dir / "train_log.csv");
        render::Series loss{"train loss", {}, {}}, dsc{"val DSC", {}, {}};
        for (const auto& e : log) {
            if (e.epoch > 0) {
                loss.x.push_back(static_cast<double>(e.epoch));
                loss.y.push_back(e.loss);
            }
            dsc.x.push_back(static_cast<double>(e.epoch));
            dsc.y.push_back(e.val_dsc);
        }
        render::write_line_plot(run_dir / "reg_loss.svg", "Registration loss", "epoch", "loss", {loss});
        render::write_line_plot(run_dir / "reg_val_dsc.svg", "Validation mean DSC", "epoch", "DSC", {dsc});
        size_t best = 0;
        for (size_t i = 0; i < log.size(); ++i) {
            if (log[i].val_dsc > log[best].val_dsc) {
                best = i;
            }
        }
        out << "## Registration training\n\n";
        out << "Initial validation DSC " << fixed_fmt(log.front().val_dsc) << ", best " << fixed_fmt(log[best].val_dsc)
            << " at epoch " << log[best].epoch << ".\n\n";
        out << "![loss](reg_loss.svg) ![val dsc](reg_val_dsc.svg)\n\n";
        any = true;
    }
    if (fs::exists(run_dir / "eval_summary.txt")) {
        std::ifstream in(run_dir / "eval_summary.txt");
        out << "## Evaluation\n\n```\n" << in.rdbuf() << "```\n\n";
        any = true;
    }
    if (fs::exists(run_dir / "ablation.csv")) {
        out << "## Ablation\n\n";
        table_markdown(out, read_table_csv(run_dir / "ablation.csv"), false);
        out << "\n";
        any = true;
    }
    if (fs::exists(run_dir / "sweep.csv")) {
        out << "## Beta sweep\n\n";
        table_markdown(out, read_table_csv(run_dir / "sweep.csv"), true);
        out << "\n![dsc](sweep_dsc.svg) ![folding](sweep_folding.svg)\n\n";
        any = true;
    }
    if (!any) {
        out << "No training logs, evaluations or tables found.\n";
    }
    return path;
}

} // namespace ldmorph::pipeline
