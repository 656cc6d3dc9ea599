#include "ldmorph/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>

namespace ldmorph {

namespace pt = boost::property_tree;

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) {
        return "";
    }
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text)
{
    std::istringstream in(trim(text));
    T value{};
    in >> value;
    if (in.fail() || !in.eof()) {
        throw ConfigError("config: " + key + " = '" + text + "' is not a valid number");
    }
    return value;
}

bool parse_bool(const std::string& key, const std::string& text)
{
    const auto t = trim(text);
    if (t == "true" || t == "1" || t == "yes" || t == "on") {
        return true;
    }
    if (t == "false" || t == "0" || t == "no" || t == "off") {
        return false;
    }
    throw ConfigError("config: " + key + " = '" + text + "' is not a boolean");
}

template <typename T>
std::string format_number(T v)
{
    std::ostringstream out;
    if constexpr (std::is_floating_point_v<T>) {
        out << std::setprecision(std::numeric_limits<T>::max_digits10);
    }
    out << v;
    return out.str();
}

template <typename Range>
std::string join(const Range& r)
{
    std::string out;
    for (const auto& v : r) {
        if (!out.empty()) {
            out += ",";
        }
        out += format_number(v);
    }
    return out;
}

struct Binding {
    std::string section, key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

template <typename T>
Binding number(const std::string& section, const std::string& key, T& ref)
{
    const auto name = section + "." + key;
    return {section, key, [&ref, name](const std::string& s) { ref = parse_number<T>(name, s); },
            [&ref] { return format_number(ref); }};
}

Binding flag(const std::string& section, const std::string& key, bool& ref)
{
    const auto name = section + "." + key;
    return {section, key, [&ref, name](const std::string& s) { ref = parse_bool(name, s); },
            [&ref] { return std::string(ref ? "true" : "false"); }};
}

Binding text(const std::string& section, const std::string& key, std::string& ref)
{
    return {section, key, [&ref](const std::string& s) { ref = trim(s); }, [&ref] { return ref; }};
}

Binding path(const std::string& section, const std::string& key, fs::path& ref)
{
    return {section, key, [&ref](const std::string& s) { ref = trim(s); }, [&ref] { return ref.string(); }};
}

template <typename T>
Binding list(const std::string& section, const std::string& key, std::vector<T>& ref)
{
    const auto name = section + "." + key;
    return {section, key,
            [&ref, name](const std::string& s) {
                ref.clear();
                for (const auto& item : split_list(s)) {
                    ref.push_back(parse_number<T>(name, item));
                }
            },
            [&ref] { return join(ref); }};
}

Binding int_set(const std::string& section, const std::string& key, std::set<int64_t>& ref)
{
    const auto name = section + "." + key;
    return {section, key,
            [&ref, name](const std::string& s) {
                ref.clear();
                for (const auto& item : split_list(s)) {
                    ref.insert(parse_number<int64_t>(name, item));
                }
            },
            [&ref] { return join(ref); }};
}

std::vector<Binding> bindings(RunConfig& c)
{
    auto& d = c.data;
    auto& a = c.autoencoder;
    auto& f = c.diffusion;
    auto& r = c.regnet;
    auto& t = c.train;
    return {
        path("data", "manifest", d.manifest),
        number("data", "phantom_size", d.phantom_size),
        number("data", "train_pairs", d.counts.train),
        number("data", "val_pairs", d.counts.val),
        number("data", "test_pairs", d.counts.test),
        number("data", "deform_amplitude", d.deform_amplitude),
        number("data", "smoothness", d.smoothness),
        number("data", "noise_level", d.noise_level),
        text("data", "family", d.family),
        text("data", "test_family", d.test_family),
        number("data", "seed", d.seed),
        list("data", "label_subset", d.label_subset),
        number("data", "content_size", d.content_size),
        number("data", "canvas_size", d.canvas_size),

        number("autoencoder", "channels", a.model.channels),
        number("autoencoder", "latent_channels", a.model.latent_channels),
        flag("autoencoder", "vq_enabled", a.model.vq_enabled),
        number("autoencoder", "codebook_size", a.model.codebook_size),
        number("autoencoder", "commitment", a.model.commitment),
        number("autoencoder", "epochs", a.epochs),
        number("autoencoder", "batch_size", a.batch_size),
        number("autoencoder", "learning_rate", a.learning_rate),

        number("diffusion", "T", f.T),
        number("diffusion", "beta_start", f.beta_start),
        number("diffusion", "beta_end", f.beta_end),
        int_set("diffusion", "feature_layers", f.feature_layers),
        number("diffusion", "feature_t", f.feature_t),
        number("diffusion", "width", f.model.width),
        number("diffusion", "levels", f.model.levels),
        number("diffusion", "layers_per_level", f.model.layers_per_level),
        number("diffusion", "time_dim", f.model.time_dim),
        number("diffusion", "epochs", f.epochs),
        number("diffusion", "batch_size", f.batch_size),
        number("diffusion", "learning_rate", f.learning_rate),

        number("attention", "window", r.window),
        list("attention", "heads_per_level", r.heads),
        number("attention", "mlp_ratio", r.mlp_ratio),
        flag("attention", "use_relative_bias", r.relative_position_bias),

        number("regnet", "levels", r.levels),
        list("regnet", "widths", r.widths),
        number("regnet", "patch_stride", r.patch_stride),
        number("regnet", "decoder_width", r.decoder_width),
        flag("regnet", "deep_geometry", c.deep_geometry),

        number("loss", "lambda", c.loss.lambda),
        number("loss", "beta", c.loss.beta),
        flag("loss", "weight_inside_terms", c.loss.weight_inside_terms),

        text("train", "optimizer", t.optimizer),
        number("train", "learning_rate", t.learning_rate),
        number("train", "batch_size", t.batch_size),
        number("train", "epochs", t.epochs),
        number("train", "seed", t.seed),
        path("train", "checkpoint_dir", t.checkpoint_dir),
        text("train", "dtype", t.dtype),
        number("train", "threads", t.threads),

        flag("ablation", "use_ldmfe", c.ablation.use_ldmfe),
        flag("ablation", "use_lgca", c.ablation.use_lgca),
        flag("ablation", "use_latent_loss", c.ablation.use_latent_loss),

        list("sweep", "betas", c.sweep.betas),
        list("sweep", "seeds", c.sweep.seeds),
    };
}

void assign(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value)
{
    for (auto& b : bindings(cfg)) {
        if (b.section == section && b.key == key) {
            b.set(value);
            return;
        }
    }
    throw ConfigError("config: unknown key [" + section + "] " + key);
}

} // namespace

data::PhantomParams DataSection::phantom_params(const std::string& family_name) const
{
    data::PhantomParams p;
    p.size = phantom_size;
    p.deform_amplitude = deform_amplitude;
    p.smoothness = smoothness;
    p.noise_level = noise_level;
    p.appearance = data::PhantomAppearance::family(family_name);
    return p;
}

data::PreprocessOptions DataSection::preprocess_options() const
{
    return {content_size, canvas_size};
}

RunConfig RunConfig::parse(const std::string& text)
{
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    RunConfig cfg;
    for (const auto& [section, body] : tree) {
        if (body.empty()) {
            throw ConfigError("config: key '" + section + "' outside a section");
        }
        for (const auto& [key, value] : body) {
            assign(cfg, section, key, value.data());
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot open " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

void RunConfig::apply_override(const std::string& assignment)
{
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ConfigError("config: override '" + assignment + "' must look like section.key=value");
    }
    assign(*this, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
           assignment.substr(eq + 1));
}

std::string RunConfig::to_ini() const
{
    auto& self = const_cast<RunConfig&>(*this);
    std::ostringstream out;
    std::string current;
    for (const auto& b : bindings(self)) {
        if (b.section != current) {
            out << (current.empty() ? "" : "\n") << "[" << b.section << "]\n";
            current = b.section;
        }
        out << b.key << " = " << b.get() << "\n";
    }
    return out.str();
}

void RunConfig::validate() const
{
    auto positive = [](bool ok, const std::string& what) {
        if (!ok) {
            throw ConfigError("config: " + what);
        }
    };
    positive(data.phantom_size >= 16, "data.phantom_size must be >= 16");
    positive(data.counts.train >= 1 && data.counts.val >= 0 && data.counts.test >= 0,
             "data split counts must be non-negative with at least one training pair");
    positive(!data.label_subset.empty(), "data.label_subset must not be empty");
    positive(autoencoder.epochs >= 0 && autoencoder.batch_size >= 1 && autoencoder.learning_rate > 0.0,
             "autoencoder epochs/batch_size/learning_rate out of range");
    positive(diffusion.T >= 1, "diffusion.T must be >= 1");
    positive(diffusion.feature_t >= 0 && diffusion.feature_t <= diffusion.T, "diffusion.feature_t outside [0, T]");
    positive(!diffusion.feature_layers.empty(), "diffusion.feature_layers must not be empty");
    for (auto l : diffusion.feature_layers) {
        positive(l >= 1 && l <= diffusion.model.levels, "diffusion.feature_layers entry " + std::to_string(l) +
                                                            " outside [1, levels]");
    }
    positive(diffusion.epochs >= 0 && diffusion.batch_size >= 1 && diffusion.learning_rate > 0.0,
             "diffusion epochs/batch_size/learning_rate out of range");
    positive(train.learning_rate > 0.0, "train.learning_rate must be > 0");
    positive(train.batch_size >= 1, "train.batch_size must be >= 1");
    positive(train.epochs >= 0, "train.epochs must be >= 0");
    positive(train.threads >= 1, "train.threads must be >= 1");
    positive(train.optimizer == "adam" || train.optimizer == "adamw", "train.optimizer must be adam or adamw");
    positive(train.dtype == "float32" || train.dtype == "float64", "train.dtype must be float32 or float64");
    positive(!sweep.betas.empty() && !sweep.seeds.empty(), "sweep.betas and sweep.seeds must not be empty");
    for (auto b : sweep.betas) {
        positive(b >= 0.0 && b <= 1.0, "sweep.betas entries must lie in [0, 1]");
    }
    try {
        diffusion::make_schedule(diffusion.T, diffusion.beta_start, diffusion.beta_end);
        loss.validate();
        network_config(2 * diffusion.model.width).validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

regnet::RegNetConfig RunConfig::network_config(int64_t feature_channels) const
{
    auto r = regnet;
    if (deep_geometry) {
        r.enable_deep_geometry();
    }
    r.use_ldmfe = ablation.use_ldmfe;
    r.use_lgca = ablation.use_lgca;
    r.feature_channels = feature_channels;
    r.feature_scales.clear();
    for (auto l : diffusion.feature_layers) {
        r.feature_scales.push_back(ae::kDownsample << (l - 1));
    }
    return r;
}

loss::LossWeights RunConfig::effective_loss() const
{
    auto w = loss;
    if (!ablation.use_latent_loss) {
        w.beta = 1.0;
    }
    return w;
}

torch::ScalarType RunConfig::dtype() const
{
    return train.dtype == "float64" ? torch::kFloat64 : torch::kFloat32;
}

void write_snapshot(const RunConfig& cfg, const fs::path& dir)
{
    fs::create_directories(dir);
    std::ofstream out(dir / "config_snapshot.ini");
    if (!out) {
        throw RuntimeFailure("cannot write config snapshot in " + dir.string());
    }
    out << cfg.to_ini();
}

} // namespace ldmorph
