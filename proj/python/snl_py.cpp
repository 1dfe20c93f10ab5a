#include "snl/affinity.hpp"
#include "snl/blocks.hpp"
#include "snl/config.hpp"
#include "snl/graph_spectral.hpp"
#include "snl/io.hpp"
#include "snl/synth.hpp"
#include "snl/train.hpp"
#include "snl/verify.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace snl;

namespace {

using NdArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const NdArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    std::vector<double> data(a.data(), a.data() + a.size());
    return Array(std::move(shape), std::move(data));
}

template <typename T>
py::array_t<T> to_numpy(const DenseArray<T>& a) {
    py::array_t<T> out(std::vector<py::ssize_t>(a.shape().begin(), a.shape().end()));
    std::copy(a.values().begin(), a.values().end(), out.mutable_data());
    return out;
}

Variant variant_arg(const std::string& name) {
    const auto v = parse_variant(name);
    if (!v) throw py::value_error("unknown variant '" + name + "'");
    return *v;
}

BlockConfig block_config(const std::string& variant, std::size_t c1, std::size_t cs, std::size_t order,
                         std::size_t h, std::size_t w) {
    auto cfg = BlockConfig::make(variant_arg(variant), c1, cs);
    cfg.order = order;
    cfg.h = h;
    cfg.w = w;
    cfg.validate();
    return cfg;
}

} // namespace

PYBIND11_MODULE(_snl, m) {
    m.doc() = "Nonlocal and spectral nonlocal blocks";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<PropertyViolation>(m, "PropertyViolation", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

    m.def("variants", [] {
        std::vector<std::string> out;
        for (auto v : {Variant::NL, Variant::NS, Variant::A2, Variant::CGNL, Variant::CC, Variant::SNL})
            out.emplace_back(variant_name(v));
        return out;
    });

    m.def(
        "count_params",
        [](const std::string& variant, std::size_t c1, std::size_t cs, std::size_t order) {
            const auto p = count_params(block_config(variant, c1, cs, order, 0, 0));
            return py::dict(py::arg("weights") = p.weights, py::arg("batch_norm") = p.batch_norm);
        },
        py::arg("variant"), py::arg("c1"), py::arg("cs"), py::arg("order") = 2);

    m.def(
        "count_macs",
        [](const std::string& variant, std::size_t c1, std::size_t cs, std::size_t h, std::size_t w,
           std::size_t order) { return count_flops(block_config(variant, c1, cs, order, h, w), h, w); },
        py::arg("variant"), py::arg("c1"), py::arg("cs"), py::arg("h"), py::arg("w"), py::arg("order") = 2);

    m.def(
        "normalize_sym",
        [](const NdArray& m_) {
            AffinityMatrix a{to_array(m_), Normalization::Raw, Kernel::EmbeddedGaussian};
            return to_numpy(normalize_sym(a).m);
        },
        py::arg("m"), "D^-1/2 M_hat D^-1/2 with M_hat the symmetrised affinity");

    m.def(
        "chebyshev_filter",
        [](const NdArray& a, const NdArray& z, std::vector<double> theta) {
            AffinityMatrix aff{to_array(a), Normalization::Symmetric, Kernel::EmbeddedGaussian};
            return to_numpy(chebyshev_filter(aff, to_array(z), ChebCoeffs{std::move(theta)}));
        },
        py::arg("a"), py::arg("z"), py::arg("theta"));

    m.def(
        "spectral_filter_direct",
        [](const NdArray& a, const NdArray& z, std::vector<double> omega) {
            AffinityMatrix aff{to_array(a), Normalization::Symmetric, Kernel::EmbeddedGaussian};
            return to_numpy(spectral_filter_direct(aff, to_array(z), GraphFilter{std::move(omega)}));
        },
        py::arg("a"), py::arg("z"), py::arg("omega"));

    m.def(
        "block_forward",
        [](const std::string& variant, const NdArray& x, std::size_t cs, std::uint64_t seed, std::size_t order,
           std::size_t h, std::size_t w) {
            const Array xa = to_array(x);
            if (xa.rank() != 2) throw py::value_error("x must be n x c1");
            const auto cfg = block_config(variant, xa.shape()[1], cs, order, h, w);
            Rng rng(seed);
            const auto p = init_block_params<double>(cfg, rng);
            const auto out = forward_block(xa, p, cfg, {BnMode::Train, true});
            return py::make_tuple(to_numpy(out.y), to_numpy(out.attention.at(0).m));
        },
        py::arg("variant"), py::arg("x"), py::arg("cs"), py::arg("seed") = 1, py::arg("order") = 2,
        py::arg("h") = 0, py::arg("w") = 0,
        "Randomly initialised block on one sample: returns (y, affinity)");

    m.def(
        "generate_synth",
        [](std::size_t n, std::uint64_t seed, std::size_t image, std::size_t classes) {
            SynthTask task;
            task.image = image;
            task.classes = classes;
            task.validate();
            const auto d = generate_synth(task, n, seed);
            py::array_t<float> px({static_cast<py::ssize_t>(n), static_cast<py::ssize_t>(image),
                                   static_cast<py::ssize_t>(image)});
            std::copy(d.pixels.begin(), d.pixels.end(), px.mutable_data());
            py::array_t<std::uint32_t> labels(static_cast<py::ssize_t>(n));
            std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
            return py::make_tuple(px, labels);
        },
        py::arg("n"), py::arg("seed"), py::arg("image") = 24, py::arg("classes") = 10);

    m.def(
        "evaluate_topk",
        [](const NdArray& logits, std::vector<std::uint32_t> labels, std::size_t k) {
            return evaluate_topk(to_array(logits), labels, k);
        },
        py::arg("logits"), py::arg("labels"), py::arg("k"));

    m.def(
        "parse_config", [](const std::string& text) { return config_to_json(parse_config(text)); }, py::arg("text"),
        "Validates a JSON experiment config and returns it with every default filled in");

    m.def(
        "load_checkpoint",
        [](const std::string& path) {
            py::dict out;
            for (const auto& e : load_checkpoint(path).entries) {
                if (const auto* d = std::get_if<Array>(&e.value))
                    out[py::str(e.name)] = to_numpy(*d);
                else
                    out[py::str(e.name)] = to_numpy(std::get<ArrayF>(e.value));
            }
            return out;
        },
        py::arg("path"));

    m.def(
        "verify",
        [](const std::string& suite, std::size_t trials, std::uint64_t seed) {
            const auto s = verify::parse_suite(suite);
            if (!s) throw py::value_error("unknown suite '" + suite + "'");
            verify::Options opts;
            opts.trials = trials;
            opts.seed = seed;
            verify::SuiteResult r;
            {
                py::gil_scoped_release release;
                r = verify::run_suite(*s, opts);
            }
            py::list checks;
            for (const auto& c : r.checks)
                checks.append(py::dict(py::arg("name") = c.name, py::arg("trials") = c.trials,
                                       py::arg("failures") = c.failures, py::arg("worst") = c.worst,
                                       py::arg("tolerance") = c.tolerance, py::arg("passed") = c.passed()));
            return checks;
        },
        py::arg("suite"), py::arg("trials") = 0, py::arg("seed") = 1);
}
