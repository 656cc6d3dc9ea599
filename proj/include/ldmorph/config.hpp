#pragma once

#include "ldmorph/autoencoder.hpp"
#include "ldmorph/data.hpp"
#include "ldmorph/diffusion.hpp"
#include "ldmorph/loss.hpp"
#include "ldmorph/regnet.hpp"

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace ldmorph {

namespace fs = std::filesystem;

struct DataSection {
    fs::path manifest;          ///< empty: generate phantoms in memory
    int64_t phantom_size = 64;
    data::SplitCounts counts{};
    double deform_amplitude = 6.0;
    double smoothness = 16.0;
    double noise_level = 0.15;
    std::string family = "A";
    std::string test_family;    ///< empty: same as family
    uint64_t seed = 7;
    std::vector<int64_t> label_subset{1, 2};
    int64_t content_size = 112; ///< manifest data only
    int64_t canvas_size = 128;

    data::PhantomParams phantom_params(const std::string& family_name) const;
    data::PreprocessOptions preprocess_options() const;
};

struct AutoencoderSection {
    ae::AutoencoderConfig model{};
    int64_t epochs = 20;
    int64_t batch_size = 8;
    double learning_rate = 1e-3;
};

struct DiffusionSection {
    int64_t T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::set<int64_t> feature_layers{1, 3};
    int64_t feature_t = 1;
    diffusion::DenoiserConfig model{};
    int64_t epochs = 30;
    int64_t batch_size = 16;
    double learning_rate = 1e-3;
};

struct TrainSection {
    std::string optimizer = "adam";
    double learning_rate = 1e-4;
    int64_t batch_size = 1;
    int64_t epochs = 30;
    uint64_t seed = 0;
    fs::path checkpoint_dir = "runs/default";
    std::string dtype = "float32";
    int64_t threads = 1;
};

struct AblationSection {
    bool use_ldmfe = true;
    bool use_lgca = true;
    bool use_latent_loss = true;
};

struct SweepSection {
    std::vector<double> betas{0.2, 0.4, 0.6, 0.8, 1.0};
    std::vector<uint64_t> seeds{0, 1, 2};
};

/// Whole-pipeline configuration read from an INI-style file with sections
/// [data] [autoencoder] [diffusion] [attention] [regnet] [loss] [train]
/// [ablation] [sweep]. Unknown keys are rejected.
struct RunConfig {
    DataSection data;
    AutoencoderSection autoencoder;
    DiffusionSection diffusion;
    regnet::RegNetConfig regnet;
    bool deep_geometry = false;
    loss::LossWeights loss;
    TrainSection train;
    AblationSection ablation;
    SweepSection sweep;

    static RunConfig load(const fs::path& path);
    static RunConfig parse(const std::string& text);
    /// Applies "section.key=value" overrides (CLI --set).
    void apply_override(const std::string& assignment);
    std::string to_ini() const;
    void validate() const;

    /// Registration-network settings with ablation flags and feature geometry
    /// resolved.
    regnet::RegNetConfig network_config(int64_t feature_channels) const;
    /// Loss weights with the latent term removed when use_latent_loss is off.
    loss::LossWeights effective_loss() const;
    torch::ScalarType dtype() const;
    fs::path autoencoder_checkpoint() const { return train.checkpoint_dir / "autoencoder.ckpt"; }
    fs::path ldm_checkpoint() const { return train.checkpoint_dir / "ldm.ckpt"; }
    fs::path regnet_checkpoint() const { return train.checkpoint_dir / "regnet.ckpt"; }
};

/// Writes the frozen config snapshot next to run outputs.
void write_snapshot(const RunConfig& cfg, const fs::path& dir);

} // namespace ldmorph
