#include "hld/checkpoint.hpp"
#include "hld/config.hpp"
#include "hld/guidance.hpp"
#include "hld/hypernet.hpp"
#include "hld/io.hpp"
#include "hld/lora.hpp"
#include "hld/metrics.hpp"
#include "hld/rng.hpp"
#include "hld/toy_data.hpp"
#include "hld/training.hpp"
#include "hld/verify.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

namespace py = pybind11;
using namespace hld;

namespace {

using Images = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Columns of flattened images -> (n, side, side).
Images to_stack(const Mat &columns) {
    const auto n = static_cast<py::ssize_t>(columns.cols());
    Images out({n, static_cast<py::ssize_t>(kImageSide), static_cast<py::ssize_t>(kImageSide)});
    double *dst = out.mutable_data();
    for (py::ssize_t j = 0; j < n; ++j) {
        std::memcpy(dst + j * kImageDim, columns.col(j).data(), sizeof(double) * kImageDim);
    }
    return out;
}

Mat from_stack(const Images &images) {
    require(images.ndim() == 3 && images.shape(1) == kImageSide && images.shape(2) == kImageSide,
            "expected an array of shape (n, 16, 16)");
    const auto n = images.shape(0);
    Mat out(kImageDim, n);
    for (py::ssize_t j = 0; j < n; ++j) {
        std::memcpy(out.col(j).data(), images.data() + j * kImageDim, sizeof(double) * kImageDim);
    }
    return out;
}

LoraAdapterSet load_adapters(const std::filesystem::path &path) { return deserialize_adapters(io::read_file(path)); }

Images sample(const Checkpoint &ck, std::optional<LoraAdapterSet> adapters, const std::string &mode,
              double guidance_scale, double kappa, int steps, int n, std::optional<int> class_id,
              std::optional<int> subject_class, std::optional<int> generic_class, std::uint64_t seed) {
    GuidanceConfig g;
    g.mode = parse_mode(mode);
    g.w = guidance_scale - 1.0;
    g.kappa = kappa;
    g.steps = steps;
    g.validate();
    const int vocab = ck.denoiser.config.vocab;
    PromptSpec pS, pG;
    if (g.mode == GuidanceMode::hmcfg) {
        require(subject_class && generic_class, "hmcfg needs subject_class and generic_class");
        pS = make_prompt(*subject_class, true, vocab);
        pG = make_prompt(*generic_class, false, vocab);
    } else {
        require(subject_class.has_value() != class_id.has_value(), "give exactly one of class_id or subject_class");
        pS = subject_class ? make_prompt(*subject_class, true, vocab) : make_prompt(*class_id, false, vocab);
        pG = pS;
    }
    const NoiseSchedule sched = make_schedule(ck.schedule);
    Mat x;
    {
        py::gil_scoped_release release;
        x = guided_sample(ck.denoiser, adapters ? &*adapters : nullptr, pS, pG, g, sched, n, seed);
    }
    return to_stack(to_image(x));
}

} // namespace

PYBIND11_MODULE(_hld, m) {
    m.doc() = "Hypernetwork-personalized toy diffusion: sampling, guidance, adapters and metrics";

    auto base_error = py::register_exception<Error>(m, "HldError", PyExc_RuntimeError);
    py::register_exception<UsageError>(m, "UsageError", base_error.ptr());
    py::register_exception<NumericalError>(m, "NumericalError", base_error.ptr());
    py::register_exception<FormatError>(m, "FormatError", base_error.ptr());

    m.attr("IMAGE_SIDE") = kImageSide;

    py::class_<NoiseSchedule>(m, "Schedule")
        .def(py::init([](int T, double beta_min, double beta_max) {
                 return make_schedule(ScheduleKind::linear, T, beta_min, beta_max);
             }),
             py::arg("T") = 1000, py::arg("beta_min") = 1e-4, py::arg("beta_max") = 0.02)
        .def_property_readonly("T", &NoiseSchedule::T)
        .def("beta", &NoiseSchedule::beta)
        .def("alpha_bar", &NoiseSchedule::alpha_bar)
        .def("alpha", &NoiseSchedule::alpha)
        .def("sigma", &NoiseSchedule::sigma);

    m.def("forward_diffuse", &forward_diffuse, py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));
    m.def("cfg_eps", &cfg_eps, py::arg("eps_cond"), py::arg("eps_uncond"), py::arg("w"));
    m.def("hmcfg_eps", &hmcfg_eps, py::arg("eps_subject"), py::arg("eps_generic"), py::arg("eps_null"),
          py::arg("w"), py::arg("kappa"));

    py::class_<LoraAdapterSet>(m, "AdapterSet")
        .def_static("load", &load_adapters, py::arg("path"))
        .def("save", [](const LoraAdapterSet &s, const std::filesystem::path &p) {
            io::write_file(p, serialize_adapters(s));
        })
        .def("to_bytes", [](const LoraAdapterSet &s) {
            const auto b = serialize_adapters(s);
            return py::bytes(reinterpret_cast<const char *>(b.data()), b.size());
        })
        .def_static("from_bytes", [](const py::bytes &b) {
            const std::string s = b;
            return deserialize_adapters(std::span(reinterpret_cast<const std::uint8_t *>(s.data()), s.size()));
        })
        .def_property_readonly("rank", &LoraAdapterSet::rank)
        .def_property_readonly("sq_norm", [](const LoraAdapterSet &s) { return adapter_sq_norm(s); })
        .def("flatten", &LoraAdapterSet::flatten)
        .def("factors", [](const LoraAdapterSet &s) {
            py::dict out;
            for (const auto &[t, e] : s.entries()) {
                out[py::str(std::string(target_name(t)))] = py::make_tuple(e.B, e.A);
            }
            return out;
        });

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_static("load", &load_checkpoint, py::arg("path"))
        .def("save", [](const Checkpoint &c, const std::filesystem::path &p) { save_checkpoint(p, c); })
        .def_readonly("seed", &Checkpoint::seed)
        .def_readonly("config_echo", &Checkpoint::config_echo)
        .def_property_readonly("has_hypernet", [](const Checkpoint &c) { return c.hypernet.has_value(); })
        .def_property_readonly("T", [](const Checkpoint &c) { return c.schedule.T; })
        .def_property_readonly("adapter_ids", [](const Checkpoint &c) {
            std::vector<std::string> ids;
            for (const auto &[id, _] : c.adapters) {
                ids.push_back(id);
            }
            return ids;
        })
        .def("adapters", [](const Checkpoint &c, const std::string &id) {
            const auto it = c.adapters.find(id);
            if (it == c.adapters.end()) {
                throw UsageError("no adapters stored under '" + id + "'");
            }
            return it->second;
        })
        .def("predict_adapters", [](const Checkpoint &c, const Images &exemplars) {
            if (!c.hypernet) {
                throw UsageError("checkpoint has no hypernetwork");
            }
            const Mat cols = from_stack(exemplars);
            std::vector<Vec> imgs;
            for (Eigen::Index j = 0; j < cols.cols(); ++j) {
                imgs.push_back(cols.col(j));
            }
            return predict(imgs, *c.hypernet);
        });

    m.def(
        "pretrain",
        [](const std::filesystem::path &config, std::uint64_t seed) {
            RunConfig cfg = load_run_config(config);
            cfg.set_seed(seed);
            Checkpoint ck;
            ck.schedule = cfg.schedule;
            ck.config_echo = describe(cfg);
            ck.seed = seed;
            py::gil_scoped_release release;
            ck.denoiser = pretrain_denoiser(cfg.corpus.num_classes, init_denoiser(cfg.denoiser, derive_seed(seed, {200})),
                                            cfg.pretrain)
                              .params;
            return ck;
        },
        py::arg("config"), py::arg("seed"), "Train a base denoiser from a run configuration file.");

    m.def(
        "finetune",
        [](const Checkpoint &ck, const Images &subject, int class_id, int steps, int rank, std::uint64_t seed) {
            TrainConfig tc = default_finetune_config();
            tc.schedule = ck.schedule;
            tc.seed = seed;
            const Mat images = from_stack(subject);
            py::gil_scoped_release release;
            return finetune_subject(images, class_id, ck.denoiser, steps, {steps}, tc, rank).back().adapters;
        },
        py::arg("checkpoint"), py::arg("subject"), py::arg("class_id"), py::arg("steps") = 400, py::arg("rank") = 3,
        py::arg("seed") = 0, "Fit LoRA adapters to subject images (pixel values, shape (n, 16, 16)).");

    m.def("sample", &sample, py::arg("checkpoint"), py::arg("adapters") = std::nullopt, py::arg("mode") = "cfg",
          py::arg("guidance_scale") = 7.5, py::arg("kappa") = 1.0, py::arg("steps") = 30, py::arg("n") = 16,
          py::arg("class_id") = std::nullopt, py::arg("subject_class") = std::nullopt,
          py::arg("generic_class") = std::nullopt, py::arg("seed") = 0,
          "Guided samples as an (n, 16, 16) array of pixel values in [0, 1].");

    m.def(
        "subject_images",
        [](int class_id, std::uint64_t subject_seed, int n, std::uint64_t noise_seed) {
            return to_stack(gen_subject_images({class_id, subject_seed}, n, noise_seed));
        },
        py::arg("class_id"), py::arg("subject_seed"), py::arg("n"), py::arg("noise_seed") = 0);
    m.def(
        "class_prior",
        [](int class_id, int n, std::uint64_t seed) { return to_stack(gen_class_prior(class_id, n, seed)); },
        py::arg("class_id"), py::arg("n"), py::arg("seed") = 0);

    py::class_<MetricSuite>(m, "MetricSuite")
        .def_static("load", [](const std::filesystem::path &p) { return deserialize_metric_suite(io::read_file(p)); })
        .def_static(
            "train",
            [](std::uint64_t seed, int probe_steps) {
                MetricSuiteConfig cfg;
                cfg.seed = seed;
                cfg.probe.steps = probe_steps;
                py::gil_scoped_release release;
                return make_metric_suite(cfg);
            },
            py::arg("seed") = 0, py::arg("probe_steps") = 1500)
        .def("save", [](const MetricSuite &s, const std::filesystem::path &p) {
            io::write_file(p, serialize_metric_suite(s));
        })
        .def(
            "subject_fidelity",
            [](const MetricSuite &s, const Images &gen, const Images &ref) {
                return subject_fidelity(from_stack(gen), from_stack(ref), s.projection);
            },
            py::arg("generated"), py::arg("reference"))
        .def(
            "prompt_fidelity",
            [](const MetricSuite &s, const Images &gen, int class_id) {
                require(s.probe.has_value(), "metric suite has no probe");
                return prompt_fidelity(from_stack(gen), class_id, *s.probe);
            },
            py::arg("generated"), py::arg("class_id"));

    m.def("spearman", [](const std::vector<double> &a, const std::vector<double> &b) { return spearman(a, b); });

    m.def(
        "oracle_verify",
        [](std::uint64_t seed, int chains) {
            OracleSuiteOptions opt;
            opt.seed = seed;
            opt.chains = chains;
            std::vector<CheckResult> rs;
            {
                py::gil_scoped_release release;
                rs = run_oracle_suite(opt);
            }
            py::list out;
            for (const auto &r : rs) {
                out.append(py::make_tuple(r.name, r.passed, r.detail));
            }
            return out;
        },
        py::arg("seed") = 0, py::arg("chains") = 10000);
}
