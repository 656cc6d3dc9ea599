#pragma once

#include "ldmorph/config.hpp"
#include "ldmorph/metrics.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ldmorph::pipeline {

struct Dataset {
    std::vector<RegistrationPair> train, val, test;
    std::vector<std::string> test_failures; ///< malformed test pairs skipped at load
};

/// Phantoms generated from [data] or the manifest's pairs, preprocessed.
/// `test_family` overrides the appearance family of the test split.
Dataset load_data(const RunConfig& cfg, const std::string& test_family = "");

/// Moving and fixed images of every pair.
std::vector<Image2D> pair_images(const std::vector<RegistrationPair>& pairs);

// Phase 1 and 2: the frozen latent model.
ae::Autoencoder train_autoencoder_phase(const RunConfig& cfg, const Dataset& data);
diffusion::DenoiserUNet train_ldm_phase(const RunConfig& cfg, const Dataset& data, ae::Autoencoder& autoencoder);
ae::Autoencoder load_autoencoder(const RunConfig& cfg);
diffusion::DenoiserUNet load_denoiser(const RunConfig& cfg);
/// Loads both frozen models; RuntimeFailure when a checkpoint is missing.
diffusion::FeatureExtractor load_extractor(const RunConfig& cfg);

struct EpochLog {
    int64_t epoch = 0; ///< 0 is the initial state
    double loss = 0, sim = 0, org = 0, lat = 0, smooth = 0;
    double val_dsc = 0, val_folding = 0;
};

struct RegTrainResult {
    regnet::RegNet net{nullptr};
    std::vector<EpochLog> log;
    int64_t best_epoch = 0;
    double best_val_dsc = 0.0;
};

/// Progress callback: one line per epoch.
using Progress = std::function<void(const std::string&)>;

/// Unsupervised registration training with the LDM frozen; keeps the
/// checkpoint with the highest validation mean DSC. Writes train_log.csv and
/// regnet.ckpt into `out_dir` when it is non-empty.
RegTrainResult train_registration(const RunConfig& cfg, const Dataset& data,
                                  std::optional<diffusion::FeatureExtractor> extractor,
                                  const fs::path& out_dir, const Progress& progress = {});

void save_regnet(const fs::path& path, regnet::RegNet& net, const RunConfig& cfg, const RegTrainResult* result);
/// Rebuilds the network from the config snapshot stored in the checkpoint.
regnet::RegNet load_regnet(const fs::path& path, RunConfig* stored_config = nullptr);

void write_train_log(const fs::path& path, const std::vector<EpochLog>& log);
std::vector<EpochLog> read_train_log(const fs::path& path);

using FieldPredictor = std::function<DisplacementField2D(const RegistrationPair&)>;

/// Field predictor around a trained network; `extractor` may be empty when
/// the latent stream is disabled.
FieldPredictor make_predictor(regnet::RegNet net, std::optional<diffusion::FeatureExtractor> extractor);
/// Always predicts the zero field.
FieldPredictor identity_predictor();

enum class Timing { Median, Single };

/// Per-pair warp, DSC, folding and runtime. Pairs that fail are recorded in
/// `failures` and skipped.
metrics::EvalReport evaluate(const FieldPredictor& predict, const std::vector<RegistrationPair>& pairs,
                             const std::vector<int64_t>& labels, Timing timing = Timing::Median);

/// Warped image/labels, field binary, determinant map and renderings.
/// Returns the written paths.
std::vector<fs::path> write_warp_outputs(const fs::path& prefix, const RegistrationPair& pair,
                                         const DisplacementField2D& field);

struct AblationRow {
    std::string name;
    bool use_ldmfe, use_lgca, use_latent_loss;
};
/// Baseline, +LDM-FE, +LGCA, +L_lat in that order.
std::vector<AblationRow> ablation_rows();

struct TableEntry {
    std::string row;
    uint64_t seed = 0;
    double beta = 0.0;
    metrics::Summary dsc, folding;
    double initial_dsc = 0.0;
    size_t failures = 0;
};

/// Trains and evaluates every ablation row for every seed in [sweep] seeds.
std::vector<TableEntry> run_ablation(const RunConfig& cfg, const Dataset& data, const fs::path& out_dir,
                                     const Progress& progress = {});
/// Trains and evaluates every beta in [sweep] betas for every seed.
std::vector<TableEntry> run_beta_sweep(const RunConfig& cfg, const Dataset& data, const fs::path& out_dir,
                                       const Progress& progress = {});

void write_table_csv(const fs::path& path, const std::vector<TableEntry>& table);
std::vector<TableEntry> read_table_csv(const fs::path& path);

/// Collects logs, tables and summaries under `run_dir` into report.md plus
/// SVG plots.
fs::path write_report(const fs::path& run_dir);

} // namespace ldmorph::pipeline
