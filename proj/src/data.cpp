#include "ldmorph/data.hpp"

#include "ldmorph/io.hpp"
#include "ldmorph/warp.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace ldmorph::data {

namespace {

uint64_t splitmix64(uint64_t x)
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::vector<double> gaussian_kernel(double sigma)
{
    const auto radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (auto& v : k) {
        v /= sum;
    }
    return k;
}

// Separable "valid" convolution: (n + 2r)^2 grid in, n^2 grid out.
std::vector<double> smooth_valid(const std::vector<double>& grid, int64_t n, const std::vector<double>& kernel)
{
    const auto radius = static_cast<int64_t>(kernel.size() / 2);
    const auto m = n + 2 * radius;
    std::vector<double> tmp(static_cast<size_t>(m * n));
    for (int64_t r = 0; r < m; ++r) {
        for (int64_t c = 0; c < n; ++c) {
            double acc = 0.0;
            for (int64_t k = 0; k < 2 * radius + 1; ++k) {
                acc += kernel[k] * grid[r * m + c + k];
            }
            tmp[r * n + c] = acc;
        }
    }
    std::vector<double> out(static_cast<size_t>(n * n));
    for (int64_t r = 0; r < n; ++r) {
        for (int64_t c = 0; c < n; ++c) {
            double acc = 0.0;
            for (int64_t k = 0; k < 2 * radius + 1; ++k) {
                acc += kernel[k] * tmp[(r + k) * n + c];
            }
            out[r * n + c] = acc;
        }
    }
    return out;
}

void check_finite(const Image2D& image)
{
    const auto bad = (~torch::isfinite(image.pixels)).sum().item<int64_t>();
    if (bad > 0) {
        std::ostringstream msg;
        msg << "preprocess: " << bad << " non-finite value(s) in " << image.height() << "x" << image.width()
            << " image";
        throw std::invalid_argument(msg.str());
    }
}

struct Ellipse {
    double cx, cy, ax, ay, cos_t, sin_t;
    double harmonic_amp, harmonic_phase;

    // < 1 inside, 1 on the boundary.
    double radius(double x, double y) const
    {
        const double dx = x - cx;
        const double dy = y - cy;
        const double u = cos_t * dx + sin_t * dy;
        const double v = -sin_t * dx + cos_t * dy;
        const double theta = std::atan2(v, u);
        const double wobble = 1.0 + harmonic_amp * std::sin(2.0 * theta + harmonic_phase);
        return std::sqrt((u / ax) * (u / ax) + (v / ay) * (v / ay)) / wobble;
    }
    double mean_axis() const { return 0.5 * (ax + ay); }
};

double inside_weight(double rho, double mean_axis, double softness)
{
    const double signed_dist = (rho - 1.0) * mean_axis;
    return 1.0 / (1.0 + std::exp(signed_dist / softness));
}

struct FixedPhantom {
    Image2D image;
    LabelMap2D labels;
};

FixedPhantom draw_fixed(std::mt19937_64& rng, const PhantomParams& p)
{
    const auto n = p.size;
    const double s = static_cast<double>(n);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto between = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };

    const double theta = between(0.0, std::numbers::pi);
    Ellipse outer{0.5 * s + between(-0.05, 0.05) * s,
                  0.5 * s + between(-0.05, 0.05) * s,
                  between(0.24, 0.31) * s,
                  between(0.29, 0.37) * s,
                  std::cos(theta),
                  std::sin(theta),
                  between(0.0, 0.06),
                  between(0.0, 2.0 * std::numbers::pi)};
    const double thickness = between(0.10, 0.13) * s;
    Ellipse inner = outer;
    inner.ax -= thickness;
    inner.ay -= thickness;

    const auto& look = p.appearance;
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto img = torch::empty({n, n}, torch::kFloat64);
    auto lab = torch::empty({n, n}, torch::kInt64);
    auto* ip = img.data_ptr<double>();
    auto* lp = lab.data_ptr<int64_t>();
    for (int64_t r = 0; r < n; ++r) {
        for (int64_t c = 0; c < n; ++c) {
            const double x = static_cast<double>(c);
            const double y = static_cast<double>(r);
            const double ro = outer.radius(x, y);
            const double ri = inner.radius(x, y);
            const double w_out = inside_weight(ro, outer.mean_axis(), look.edge_softness);
            const double w_in = inside_weight(ri, inner.mean_axis(), look.edge_softness);
            double v = look.background + (look.ring - look.background) * w_out - (look.ring - look.cavity) * w_in;
            v *= 1.0 + p.noise_level * gauss(rng);
            ip[r * n + c] = std::max(v, 0.0);
            lp[r * n + c] = ri <= 1.0 ? kLabelCavity : (ro <= 1.0 ? kLabelRing : 0);
        }
    }
    return {io::quantize16(normalize_minmax(Image2D(img))), LabelMap2D(lab)};
}

bool labels_present(const LabelMap2D& labels, double min_fraction)
{
    const auto min_count = static_cast<int64_t>(std::ceil(min_fraction * static_cast<double>(labels.labels.numel())));
    for (auto l : {kLabelCavity, kLabelRing}) {
        if (labels.labels.eq(l).sum().item<int64_t>() < std::max<int64_t>(min_count, 1)) {
            return false;
        }
    }
    return true;
}

} // namespace

Image2D resize_bilinear(const Image2D& image, int64_t height, int64_t width)
{
    if (height <= 0 || width <= 0 || image.height() <= 0 || image.width() <= 0) {
        throw std::invalid_argument("resize_bilinear: dimensions must be positive");
    }
    const auto ih = image.height();
    const auto iw = image.width();
    const double sy = static_cast<double>(ih) / static_cast<double>(height);
    const double sx = static_cast<double>(iw) / static_cast<double>(width);
    auto out = torch::empty({height, width}, torch::kFloat64);
    auto* op = out.data_ptr<double>();
    const auto* ip = image.pixels.data_ptr<double>();
    for (int64_t r = 0; r < height; ++r) {
        const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(ih - 1));
        const auto y0 = static_cast<int64_t>(fy);
        const auto y1 = std::min(y0 + 1, ih - 1);
        const double wy = fy - static_cast<double>(y0);
        for (int64_t c = 0; c < width; ++c) {
            const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(iw - 1));
            const auto x0 = static_cast<int64_t>(fx);
            const auto x1 = std::min(x0 + 1, iw - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = (1.0 - wx) * ip[y0 * iw + x0] + wx * ip[y0 * iw + x1];
            const double bottom = (1.0 - wx) * ip[y1 * iw + x0] + wx * ip[y1 * iw + x1];
            op[r * width + c] = (1.0 - wy) * top + wy * bottom;
        }
    }
    return Image2D(out);
}

LabelMap2D resize_nearest(const LabelMap2D& labels, int64_t height, int64_t width)
{
    if (height <= 0 || width <= 0) {
        throw std::invalid_argument("resize_nearest: dimensions must be positive");
    }
    const auto ih = labels.height();
    const auto iw = labels.width();
    auto out = torch::empty({height, width}, torch::kInt64);
    auto* op = out.data_ptr<int64_t>();
    const auto* ip = labels.labels.data_ptr<int64_t>();
    for (int64_t r = 0; r < height; ++r) {
        const auto y = std::min(static_cast<int64_t>((r + 0.5) * ih / static_cast<double>(height)), ih - 1);
        for (int64_t c = 0; c < width; ++c) {
            const auto x = std::min(static_cast<int64_t>((c + 0.5) * iw / static_cast<double>(width)), iw - 1);
            op[r * width + c] = ip[y * iw + x];
        }
    }
    return LabelMap2D(out);
}

Image2D normalize_minmax(const Image2D& image)
{
    const double lo = image.pixels.min().item<double>();
    const double hi = image.pixels.max().item<double>();
    if (!(hi > lo)) {
        return Image2D::zeros(image.height(), image.width());
    }
    return Image2D((image.pixels - lo) / (hi - lo));
}

namespace {

template <typename Raster>
torch::Tensor pad_tensor(const Raster& t, int64_t h, int64_t w, int64_t canvas)
{
    if (h > canvas || w > canvas) {
        throw std::invalid_argument("pad_to: raster larger than canvas");
    }
    const auto top = (canvas - h) / 2;
    const auto left = (canvas - w) / 2;
    auto out = torch::zeros({canvas, canvas}, t.options());
    out.narrow(0, top, h).narrow(1, left, w).copy_(t);
    return out;
}

} // namespace

Image2D pad_to(const Image2D& image, int64_t canvas)
{
    return Image2D(pad_tensor(image.pixels, image.height(), image.width(), canvas));
}

LabelMap2D pad_to(const LabelMap2D& labels, int64_t canvas)
{
    return LabelMap2D(pad_tensor(labels.labels, labels.height(), labels.width(), canvas));
}

Image2D preprocess(const Image2D& raw, const PreprocessOptions& opts)
{
    if (raw.height() <= 0 || raw.width() <= 0) {
        throw std::invalid_argument("preprocess: image has no pixels");
    }
    check_finite(raw);
    if (raw.height() == opts.canvas_size && raw.width() == opts.canvas_size) {
        return normalize_minmax(raw);
    }
    // normalising after the resize keeps the output range exactly [0, 1]
    return pad_to(normalize_minmax(resize_bilinear(raw, opts.content_size, opts.content_size)), opts.canvas_size);
}

LabelMap2D preprocess_labels(const LabelMap2D& raw, const PreprocessOptions& opts)
{
    if (raw.height() == opts.canvas_size && raw.width() == opts.canvas_size) {
        return raw;
    }
    return pad_to(resize_nearest(raw, opts.content_size, opts.content_size), opts.canvas_size);
}

DisplacementField2D random_smooth_field(uint64_t seed, int64_t size, double amplitude, double smoothness)
{
    if (amplitude < 0.0 || !(smoothness > 0.0) || size <= 0) {
        throw std::invalid_argument("random_smooth_field: need amplitude >= 0, smoothness > 0, size > 0");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto kernel = gaussian_kernel(smoothness);
    auto planes = torch::empty({2, size, size}, torch::kFloat64);
    auto* p = planes.data_ptr<double>();
    // noise on a margin-extended grid keeps the smoothed field stationary up to the border
    const auto m = size + 2 * static_cast<int64_t>(kernel.size() / 2);
    for (int plane = 0; plane < 2; ++plane) {
        std::vector<double> grid(static_cast<size_t>(m * m));
        for (auto& v : grid) {
            v = gauss(rng);
        }
        auto smooth = smooth_valid(grid, size, kernel);
        std::copy(smooth.begin(), smooth.end(), p + plane * size * size);
    }
    const double peak = planes.pow(2).sum(0).sqrt().max().item<double>();
    if (peak > 0.0) {
        planes.mul_(amplitude / peak);
    } else {
        planes.zero_();
    }
    return DisplacementField2D(planes);
}

PhantomAppearance PhantomAppearance::family(const std::string& name)
{
    if (name == "A" || name == "a" || name.empty()) {
        return {};
    }
    if (name == "B" || name == "b") {
        // brighter background, darker ring, softer edges
        return {0.20, 0.05, 0.70, 1.2};
    }
    throw ConfigError("unknown phantom family '" + name + "' (expected A or B)");
}

PhantomSample generate_phantom_sample(uint64_t seed, const PhantomParams& params)
{
    if (params.size < 32 || params.deform_amplitude < 0.0 || !(params.smoothness > 0.0)) {
        throw std::invalid_argument("generate_phantom_pair: need size >= 32, amplitude >= 0, smoothness > 0");
    }
    std::mt19937_64 rng(seed);
    for (int attempt = 0; attempt <= params.max_retries; ++attempt) {
        auto fixed = draw_fixed(rng, params);
        auto field = random_smooth_field(rng(), params.size, params.deform_amplitude, params.smoothness);
        auto moving_labels = warp::warp_labels(fixed.labels, field);
        if (!labels_present(fixed.labels, params.min_label_fraction) ||
            !labels_present(moving_labels, params.min_label_fraction)) {
            continue;
        }
        auto moving = io::quantize16(normalize_minmax(warp::warp_image(fixed.image, field)));
        RegistrationPair pair{moving, fixed.image, moving_labels, fixed.labels, "phantom_" + std::to_string(seed)};
        return {std::move(pair), std::move(field)};
    }
    throw RuntimeFailure("generate_phantom_pair: label regions vanished after " +
                         std::to_string(params.max_retries + 1) + " attempts (amplitude too large?)");
}

RegistrationPair generate_phantom_pair(uint64_t seed, const PhantomParams& params)
{
    return generate_phantom_sample(seed, params).pair;
}

std::string to_string(Split split)
{
    switch (split) {
    case Split::Train:
        return "train";
    case Split::Val:
        return "val";
    case Split::Test:
        return "test";
    }
    return "train";
}

Split split_from_string(const std::string& name)
{
    if (name == "train") {
        return Split::Train;
    }
    if (name == "val") {
        return Split::Val;
    }
    if (name == "test") {
        return Split::Test;
    }
    throw ConfigError("unknown split '" + name + "'");
}

DatasetManifest DatasetManifest::read(const fs::path& path)
{
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("manifest: ") + e.what());
    }
    DatasetManifest m;
    m.base_dir = path.parent_path();
    for (const auto& [section, node] : tree) {
        ManifestEntry e;
        e.pair_id = node.get<std::string>("pair_id", section);
        auto required = [&](const char* key) {
            auto v = node.get_optional<std::string>(key);
            if (!v) {
                throw ConfigError("manifest entry " + section + " lacks '" + key + "'");
            }
            return fs::path(*v);
        };
        e.moving = required("moving");
        e.fixed = required("fixed");
        if (auto v = node.get_optional<std::string>("moving_labels"); v && !v->empty()) {
            e.moving_labels = *v;
        }
        if (auto v = node.get_optional<std::string>("fixed_labels"); v && !v->empty()) {
            e.fixed_labels = *v;
        }
        e.split = split_from_string(node.get<std::string>("split", "train"));
        m.entries.push_back(std::move(e));
    }
    return m;
}

void DatasetManifest::write(const fs::path& path) const
{
    namespace pt = boost::property_tree;
    pt::ptree tree;
    for (const auto& e : entries) {
        pt::ptree node;
        node.put("pair_id", e.pair_id);
        node.put("moving", e.moving.string());
        node.put("fixed", e.fixed.string());
        node.put("moving_labels", e.moving_labels ? e.moving_labels->string() : "");
        node.put("fixed_labels", e.fixed_labels ? e.fixed_labels->string() : "");
        node.put("split", to_string(e.split));
        tree.push_back({e.pair_id, node});
    }
    pt::write_ini(path.string(), tree);
}

fs::path DatasetManifest::resolve(const fs::path& p) const
{
    return p.is_absolute() ? p : base_dir / p;
}

void DatasetManifest::validate() const
{
    std::set<std::string> ids;
    for (const auto& e : entries) {
        if (!ids.insert(e.pair_id).second) {
            throw ConfigError("manifest: duplicate pair_id " + e.pair_id);
        }
        for (const auto* p : {&e.moving, &e.fixed, e.moving_labels ? &*e.moving_labels : nullptr,
                              e.fixed_labels ? &*e.fixed_labels : nullptr}) {
            if (p != nullptr && !fs::is_regular_file(resolve(*p))) {
                throw ConfigError("manifest: pair " + e.pair_id + " references missing file " + resolve(*p).string());
            }
        }
    }
}

DatasetManifest DatasetManifest::filtered(Split split) const
{
    DatasetManifest out;
    out.base_dir = base_dir;
    for (const auto& e : entries) {
        if (e.split == split) {
            out.entries.push_back(e);
        }
    }
    return out;
}

std::vector<RegistrationPair> load_dataset(const DatasetManifest& manifest, const PreprocessOptions& opts,
                                           std::vector<std::string>* failures)
{
    std::vector<RegistrationPair> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        try {
            RegistrationPair pair;
            pair.pair_id = e.pair_id;
            auto moving_raw = io::read_image(manifest.resolve(e.moving));
            auto fixed_raw = io::read_image(manifest.resolve(e.fixed));
            auto check_labels = [&](const LabelMap2D& l, const Image2D& img, const char* which) {
                if (l.height() != img.height() || l.width() != img.width()) {
                    std::ostringstream msg;
                    msg << which << " labels " << l.height() << "x" << l.width() << " vs image " << img.height()
                        << "x" << img.width();
                    throw std::invalid_argument(msg.str());
                }
            };
            if (e.moving_labels) {
                auto l = io::read_labels(manifest.resolve(*e.moving_labels));
                check_labels(l, moving_raw, "moving");
                pair.moving_labels = preprocess_labels(l, opts);
            }
            if (e.fixed_labels) {
                auto l = io::read_labels(manifest.resolve(*e.fixed_labels));
                check_labels(l, fixed_raw, "fixed");
                pair.fixed_labels = preprocess_labels(l, opts);
            }
            pair.moving = preprocess(moving_raw, opts);
            pair.fixed = preprocess(fixed_raw, opts);
            pair.validate();
            out.push_back(std::move(pair));
        } catch (const std::exception& ex) {
            auto* entry_error = dynamic_cast<const DatasetEntryError*>(&ex);
            DatasetEntryError err = entry_error != nullptr ? *entry_error : DatasetEntryError(e.pair_id, ex.what());
            if (failures == nullptr) {
                throw err;
            }
            failures->push_back(err.what());
        }
    }
    return out;
}

namespace {

uint64_t pair_seed(uint64_t base_seed, Split split, int64_t index)
{
    return splitmix64(splitmix64(base_seed) ^ (static_cast<uint64_t>(split) << 40) ^ static_cast<uint64_t>(index));
}

std::string pair_name(Split split, int64_t index)
{
    std::ostringstream os;
    os << to_string(split) << "_" << std::setw(4) << std::setfill('0') << index;
    return os.str();
}

} // namespace

PhantomSplits make_phantom_splits(const SplitCounts& counts, const PhantomParams& params, uint64_t base_seed)
{
    PhantomSplits out;
    auto fill = [&](std::vector<RegistrationPair>& dst, Split split, int64_t n) {
        for (int64_t i = 0; i < n; ++i) {
            auto pair = generate_phantom_pair(pair_seed(base_seed, split, i), params);
            pair.pair_id = pair_name(split, i);
            dst.push_back(std::move(pair));
        }
    };
    fill(out.train, Split::Train, counts.train);
    fill(out.val, Split::Val, counts.val);
    fill(out.test, Split::Test, counts.test);
    return out;
}

DatasetManifest export_phantom_dataset(const fs::path& out_dir, const SplitCounts& counts,
                                       const PhantomParams& params, uint64_t base_seed)
{
    fs::create_directories(out_dir / "images");
    auto splits = make_phantom_splits(counts, params, base_seed);
    DatasetManifest m;
    m.base_dir = out_dir;
    auto emit = [&](const std::vector<RegistrationPair>& pairs, Split split) {
        for (const auto& p : pairs) {
            ManifestEntry e;
            e.pair_id = p.pair_id;
            e.split = split;
            e.moving = fs::path("images") / (p.pair_id + "_moving.png");
            e.fixed = fs::path("images") / (p.pair_id + "_fixed.png");
            e.moving_labels = fs::path("images") / (p.pair_id + "_moving_labels.png");
            e.fixed_labels = fs::path("images") / (p.pair_id + "_fixed_labels.png");
            io::write_image(out_dir / e.moving, p.moving);
            io::write_image(out_dir / e.fixed, p.fixed);
            io::write_labels(out_dir / *e.moving_labels, *p.moving_labels);
            io::write_labels(out_dir / *e.fixed_labels, *p.fixed_labels);
            m.entries.push_back(std::move(e));
        }
    };
    emit(splits.train, Split::Train);
    emit(splits.val, Split::Val);
    emit(splits.test, Split::Test);
    m.write(out_dir / "manifest.ini");
    return m;
}

} // namespace ldmorph::data
