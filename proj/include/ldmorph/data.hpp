#pragma once

#include "ldmorph/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ldmorph::data {

namespace fs = std::filesystem;

struct PreprocessOptions {
    int64_t content_size = 112; ///< side after the bilinear resize
    int64_t canvas_size = 128;  ///< side after zero padding
};

/// Half-pixel-centred bilinear resize (edge samples clamp).
Image2D resize_bilinear(const Image2D& image, int64_t height, int64_t width);
/// Half-pixel-centred nearest-neighbour resize for label maps.
LabelMap2D resize_nearest(const LabelMap2D& labels, int64_t height, int64_t width);

/// Min-max normalise to [0, 1]; a constant image maps to all zeros.
Image2D normalize_minmax(const Image2D& image);

/// Zero-pad to `canvas`; odd remainders go to the bottom/right.
Image2D pad_to(const Image2D& image, int64_t canvas);
LabelMap2D pad_to(const LabelMap2D& labels, int64_t canvas);

/// Normalise, resize to content_size, pad to canvas_size. Inputs already at
/// canvas size are treated as preprocessed geometry and only normalised, which
/// makes the operation idempotent.
Image2D preprocess(const Image2D& raw, const PreprocessOptions& opts = {});
LabelMap2D preprocess_labels(const LabelMap2D& raw, const PreprocessOptions& opts = {});

/// Gaussian-smoothed white noise per component, rescaled so that the largest
/// displacement magnitude equals `amplitude`.
DisplacementField2D random_smooth_field(uint64_t seed, int64_t size, double amplitude, double smoothness);

/// Grey levels of the synthetic ventricle. Family B shifts the appearance
/// for cross-dataset evaluation.
struct PhantomAppearance {
    double background = 0.08;
    double cavity = 0.22;
    double ring = 0.85;
    double edge_softness = 0.7; ///< pixels

    static PhantomAppearance family(const std::string& name);
};

struct PhantomParams {
    int64_t size = 64;
    double deform_amplitude = 6.0;
    double smoothness = 16.0;
    double noise_level = 0.15;
    PhantomAppearance appearance{};
    int max_retries = 8;
    double min_label_fraction = 0.01; ///< each label must cover this share of the image
};

inline constexpr int64_t kLabelCavity = 1;
inline constexpr int64_t kLabelRing = 2;

struct PhantomSample {
    RegistrationPair pair;
    DisplacementField2D field; ///< moving = fixed sampled through this field
};

PhantomSample generate_phantom_sample(uint64_t seed, const PhantomParams& params);
RegistrationPair generate_phantom_pair(uint64_t seed, const PhantomParams& params);

enum class Split { Train, Val, Test };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct ManifestEntry {
    fs::path moving;
    fs::path fixed;
    std::optional<fs::path> moving_labels;
    std::optional<fs::path> fixed_labels;
    Split split = Split::Train;
    std::string pair_id;
};

/// Pair list stored as an INI-style file, one section per pair. Relative
/// paths are resolved against the manifest's directory.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    fs::path base_dir;

    static DatasetManifest read(const fs::path& path);
    void write(const fs::path& path) const;
    /// Throws ConfigError on duplicate ids or unreadable paths.
    void validate() const;
    DatasetManifest filtered(Split split) const;
    fs::path resolve(const fs::path& p) const;
};

/// Raised by load_dataset; carries the failing pair id.
class DatasetEntryError : public RuntimeFailure {
public:
    DatasetEntryError(std::string pair_id, const std::string& what)
        : RuntimeFailure("pair " + pair_id + ": " + what), pair_id_(std::move(pair_id))
    {
    }
    const std::string& pair_id() const { return pair_id_; }

private:
    std::string pair_id_;
};

/// With `failures` set, malformed pairs are recorded there and skipped
/// instead of aborting the load.
std::vector<RegistrationPair> load_dataset(const DatasetManifest& manifest, const PreprocessOptions& opts = {},
                                           std::vector<std::string>* failures = nullptr);

struct SplitCounts {
    int64_t train = 200;
    int64_t val = 20;
    int64_t test = 200;
};

/// Writes phantom pairs as 16-bit PNGs plus manifest.ini under `out_dir`.
DatasetManifest export_phantom_dataset(const fs::path& out_dir, const SplitCounts& counts,
                                       const PhantomParams& params, uint64_t base_seed);

/// In-memory counterpart of export_phantom_dataset (identical pairs).
struct PhantomSplits {
    std::vector<RegistrationPair> train;
    std::vector<RegistrationPair> val;
    std::vector<RegistrationPair> test;
};
PhantomSplits make_phantom_splits(const SplitCounts& counts, const PhantomParams& params, uint64_t base_seed);

} // namespace ldmorph::data
