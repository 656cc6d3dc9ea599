#pragma once

#include "ldmorph/types.hpp"

#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace ldmorph::metrics {

struct DiceResult {
    std::map<int64_t, double> per_label;
    double mean = 1.0;
};

/// 2|A∩B| / (|A| + |B|) per label; a label absent from both maps scores 1.
DiceResult dsc(const LabelMap2D& pred, const LabelMap2D& target, const std::vector<int64_t>& label_set);

/// Determinants of the Jacobian of p -> p + u(p) by forward differences on
/// the (H-1) x (W-1) stencil domain.
struct JacobianMap {
    torch::Tensor det; // (H-1, W-1) float64
};

JacobianMap jacobian_determinant(const DisplacementField2D& field);

/// Percentage of stencil sites with det <= 0.
double folding_percent(const JacobianMap& jmap);

/// Median wall-clock seconds over `repeats` (>= 3) calls after one warm-up.
struct TimingResult {
    double median_seconds = 0.0;
    std::vector<double> samples;
};
TimingResult time_registration(const std::function<void()>& fn, int repeats = 3);

struct PairReport {
    std::string pair_id;
    std::map<int64_t, double> dsc_per_label;
    double mean_dsc = 0.0;
    double initial_dsc = 0.0;
    double folding_percent = 0.0;
    double runtime_seconds = 0.0;
};

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;
};
Summary summarize(const std::vector<double>& values);

struct EvalReport {
    std::vector<PairReport> pairs;
    std::vector<int64_t> labels;
    std::vector<std::string> failures; ///< pair ids skipped because of errors

    Summary dsc() const;
    Summary initial_dsc() const;
    Summary folding() const;
    Summary runtime() const;

    void write_csv(std::ostream& out) const;
    /// Table-style block: Avg. DSC (std), |J|<=0 (%) (std), Time (s).
    void write_summary(std::ostream& out, const std::string& method = "LDM-Morph") const;
};

} // namespace ldmorph::metrics
