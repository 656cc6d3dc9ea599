// numpy-facing bindings: arrays are copied into float64 / int64 tensors.

#include "ldmorph/config.hpp"
#include "ldmorph/data.hpp"
#include "ldmorph/diffusion.hpp"
#include "ldmorph/loss.hpp"
#include "ldmorph/metrics.hpp"
#include "ldmorph/pipeline.hpp"
#include "ldmorph/warp.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace ldmorph;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I64 = py::array_t<int64_t, py::array::c_style | py::array::forcecast>;

template <typename T>
torch::Tensor to_tensor(const py::array_t<T, py::array::c_style | py::array::forcecast>& a, torch::ScalarType type)
{
    std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
    return torch::from_blob(const_cast<T*>(a.data()), shape, type).clone();
}

template <typename T>
py::array_t<T> to_numpy(const torch::Tensor& t)
{
    auto c = t.contiguous();
    std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
    py::array_t<T> out(shape);
    std::memcpy(out.mutable_data(), c.data_ptr<T>(), sizeof(T) * static_cast<size_t>(c.numel()));
    return out;
}

Image2D image(const F64& a)
{
    return Image2D(to_tensor(a, torch::kFloat64));
}

LabelMap2D labels(const I64& a)
{
    return LabelMap2D(to_tensor(a, torch::kInt64));
}

DisplacementField2D field(const F64& a)
{
    return DisplacementField2D(to_tensor(a, torch::kFloat64));
}

py::dict pair_dict(const RegistrationPair& p)
{
    py::dict d;
    d["pair_id"] = p.pair_id;
    d["moving"] = to_numpy<double>(p.moving.pixels);
    d["fixed"] = to_numpy<double>(p.fixed.pixels);
    if (p.moving_labels) {
        d["moving_labels"] = to_numpy<int64_t>(p.moving_labels->labels);
    }
    if (p.fixed_labels) {
        d["fixed_labels"] = to_numpy<int64_t>(p.fixed_labels->labels);
    }
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m)
{
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

    m.def(
        "generate_phantom_pair",
        [](uint64_t seed, int64_t size, double amplitude, double smoothness, double noise, const std::string& family) {
            data::PhantomParams p;
            p.size = size;
            p.deform_amplitude = amplitude;
            p.smoothness = smoothness;
            p.noise_level = noise;
            p.appearance = data::PhantomAppearance::family(family);
            return pair_dict(data::generate_phantom_pair(seed, p));
        },
        py::arg("seed"), py::arg("size") = 64, py::arg("deform_amplitude") = 6.0, py::arg("smoothness") = 16.0,
        py::arg("noise_level") = 0.15, py::arg("family") = "A");

    m.def(
        "random_smooth_field",
        [](uint64_t seed, int64_t size, double amplitude, double smoothness) {
            return to_numpy<double>(data::random_smooth_field(seed, size, amplitude, smoothness).planes);
        },
        py::arg("seed"), py::arg("size"), py::arg("amplitude"), py::arg("smoothness"));

    m.def(
        "preprocess",
        [](const F64& img, int64_t content, int64_t canvas) {
            return to_numpy<double>(data::preprocess(image(img), {content, canvas}).pixels);
        },
        py::arg("image"), py::arg("content_size") = 112, py::arg("canvas_size") = 128);

    m.def(
        "warp_image", [](const F64& img, const F64& f) { return to_numpy<double>(warp::warp_image(image(img), field(f)).pixels); },
        py::arg("image"), py::arg("field"));
    m.def(
        "warp_labels",
        [](const I64& lab, const F64& f) { return to_numpy<int64_t>(warp::warp_labels(labels(lab), field(f)).labels); },
        py::arg("labels"), py::arg("field"));

    m.def(
        "dsc",
        [](const I64& pred, const I64& target, const std::vector<int64_t>& label_set) {
            auto d = metrics::dsc(labels(pred), labels(target), label_set);
            return py::make_tuple(d.mean, d.per_label);
        },
        py::arg("pred"), py::arg("target"), py::arg("labels") = std::vector<int64_t>{1, 2});
    m.def(
        "jacobian_determinant", [](const F64& f) { return to_numpy<double>(metrics::jacobian_determinant(field(f)).det); },
        py::arg("field"));
    m.def(
        "folding_percent",
        [](const F64& f) { return metrics::folding_percent(metrics::jacobian_determinant(field(f))); },
        py::arg("field"));

    m.def(
        "loss_smooth",
        [](const F64& f) { return loss::loss_smooth(to_tensor(f, torch::kFloat64).unsqueeze(0)).item<double>(); },
        py::arg("field"));
    m.def(
        "loss_org",
        [](const F64& warped, const F64& fixed) {
            return loss::loss_org(to_tensor(warped, torch::kFloat64), to_tensor(fixed, torch::kFloat64)).item<double>();
        },
        py::arg("warped"), py::arg("fixed"));

    m.def(
        "noise_schedule",
        [](int64_t T, double beta_start, double beta_end) {
            auto s = diffusion::make_schedule(T, beta_start, beta_end);
            py::dict d;
            d["beta"] = s.beta;
            d["alpha_bar"] = s.alpha_bar;
            d["sigma"] = s.sigma;
            return d;
        },
        py::arg("T"), py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);
    m.def(
        "q_sample",
        [](const F64& z0, int64_t t, const F64& eps, int64_t T) {
            auto s = diffusion::make_schedule(T);
            return to_numpy<double>(
                diffusion::q_sample(to_tensor(z0, torch::kFloat64), t, to_tensor(eps, torch::kFloat64), s));
        },
        py::arg("z0"), py::arg("t"), py::arg("eps"), py::arg("T") = 1000);

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("load", &RunConfig::load)
        .def_static("parse", &RunConfig::parse)
        .def("set", &RunConfig::apply_override)
        .def("validate", &RunConfig::validate)
        .def("to_ini", &RunConfig::to_ini);

    m.def(
        "register_pair",
        [](const std::filesystem::path& checkpoint, const F64& moving, const F64& fixed) {
            RunConfig stored;
            auto net = pipeline::load_regnet(checkpoint, &stored);
            std::optional<diffusion::FeatureExtractor> fx;
            if (net->config().use_ldmfe) {
                fx = pipeline::load_extractor(stored);
            }
            RegistrationPair pair;
            pair.moving = image(moving);
            pair.fixed = image(fixed);
            pair.validate();
            return to_numpy<double>(pipeline::make_predictor(net, fx)(pair).planes);
        },
        py::arg("checkpoint"), py::arg("moving"), py::arg("fixed"),
        "Displacement field (2, H, W) predicted by a registration checkpoint.");
}
