#include "ldmorph/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ldmorph::metrics {

DiceResult dsc(const LabelMap2D& pred, const LabelMap2D& target, const std::vector<int64_t>& label_set)
{
    if (pred.height() != target.height() || pred.width() != target.width()) {
        throw std::invalid_argument("dsc: label maps differ in shape");
    }
    DiceResult out;
    const auto* a = pred.labels.data_ptr<int64_t>();
    const auto* b = target.labels.data_ptr<int64_t>();
    const auto n = pred.labels.numel();
    double sum = 0.0;
    for (auto label : label_set) {
        int64_t count_a = 0;
        int64_t count_b = 0;
        int64_t both = 0;
        for (int64_t i = 0; i < n; ++i) {
            const bool in_a = a[i] == label;
            const bool in_b = b[i] == label;
            count_a += in_a;
            count_b += in_b;
            both += in_a && in_b;
        }
        const double score =
            count_a + count_b == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(count_a + count_b);
        out.per_label[label] = score;
        sum += score;
    }
    out.mean = label_set.empty() ? 1.0 : sum / static_cast<double>(label_set.size());
    return out;
}

JacobianMap jacobian_determinant(const DisplacementField2D& field)
{
    const auto& u = field.planes;
    const auto h = field.height();
    const auto w = field.width();
    if (h < 2 || w < 2) {
        throw std::invalid_argument("jacobian_determinant: field must be at least 2x2");
    }
    auto ux = u[0];
    auto uy = u[1];
    auto crop = [&](const torch::Tensor& t, int64_t r0, int64_t c0) { return t.narrow(0, r0, h - 1).narrow(1, c0, w - 1); };
    auto dux_dx = crop(ux, 0, 1) - crop(ux, 0, 0);
    auto dux_dy = crop(ux, 1, 0) - crop(ux, 0, 0);
    auto duy_dx = crop(uy, 0, 1) - crop(uy, 0, 0);
    auto duy_dy = crop(uy, 1, 0) - crop(uy, 0, 0);
    return {((1 + dux_dx) * (1 + duy_dy) - dux_dy * duy_dx).contiguous()};
}

double folding_percent(const JacobianMap& jmap)
{
    const auto n = jmap.det.numel();
    if (n == 0) {
        return 0.0;
    }
    return 100.0 * static_cast<double>(jmap.det.le(0).sum().item<int64_t>()) / static_cast<double>(n);
}

TimingResult time_registration(const std::function<void()>& fn, int repeats)
{
    repeats = std::max(repeats, 3);
    fn();
    TimingResult out;
    for (int i = 0; i < repeats; ++i) {
        const auto start = std::chrono::steady_clock::now();
        fn();
        const auto stop = std::chrono::steady_clock::now();
        out.samples.push_back(std::chrono::duration<double>(stop - start).count());
    }
    auto sorted = out.samples;
    std::sort(sorted.begin(), sorted.end());
    out.median_seconds = sorted[sorted.size() / 2];
    return out;
}

Summary summarize(const std::vector<double>& values)
{
    if (values.empty()) {
        return {};
    }
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    double var = 0.0;
    for (auto v : values) {
        var += (v - mean) * (v - mean);
    }
    return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

namespace {

template <typename Getter>
Summary summarize_by(const std::vector<PairReport>& pairs, Getter get)
{
    std::vector<double> v;
    v.reserve(pairs.size());
    for (const auto& p : pairs) {
        v.push_back(get(p));
    }
    return summarize(v);
}

} // namespace

Summary EvalReport::dsc() const
{
    return summarize_by(pairs, [](const PairReport& p) { return p.mean_dsc; });
}

Summary EvalReport::initial_dsc() const
{
    return summarize_by(pairs, [](const PairReport& p) { return p.initial_dsc; });
}

Summary EvalReport::folding() const
{
    return summarize_by(pairs, [](const PairReport& p) { return p.folding_percent; });
}

Summary EvalReport::runtime() const
{
    return summarize_by(pairs, [](const PairReport& p) { return p.runtime_seconds; });
}

void EvalReport::write_csv(std::ostream& out) const
{
    out << "pair_id";
    for (auto l : labels) {
        out << ",dsc_label_" << l;
    }
    out << ",mean_dsc,initial_dsc,folding_percent,runtime_s\n";
    out << std::setprecision(10);
    for (const auto& p : pairs) {
        out << p.pair_id;
        for (auto l : labels) {
            auto it = p.dsc_per_label.find(l);
            out << "," << (it == p.dsc_per_label.end() ? 0.0 : it->second);
        }
        out << "," << p.mean_dsc << "," << p.initial_dsc << "," << p.folding_percent << "," << p.runtime_seconds
            << "\n";
    }
}

void EvalReport::write_summary(std::ostream& out, const std::string& method) const
{
    auto cell = [](const Summary& s) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(3) << s.mean << " (" << s.stddev << ")";
        return os.str();
    };
    out << std::left << std::setw(14) << "Method" << std::setw(18) << "Avg. DSC" << std::setw(18) << "|J|<=0 (%)"
        << "Time (s)\n";
    out << std::setw(14) << "Initial" << std::setw(18) << cell(initial_dsc()) << std::setw(18) << "-" << "-\n";
    out << std::setw(14) << method << std::setw(18) << cell(dsc()) << std::setw(18) << cell(folding())
        << std::fixed << std::setprecision(4) << runtime().mean << "\n";
    out.unsetf(std::ios::fixed);
    out << "pairs evaluated: " << pairs.size();
    if (!failures.empty()) {
        out << ", skipped: " << failures.size();
    }
    out << "\n";
}

} // namespace ldmorph::metrics
