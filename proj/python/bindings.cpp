#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

#include "tsflow/layer_checks.hpp"
#include "tsflow/metrics.hpp"
#include "tsflow/serialize.hpp"
#include "tsflow/training.hpp"

namespace py = pybind11;
using namespace tsflow;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const DArray& a) {
    Shape s(a.shape(), a.shape() + a.ndim());
    return Tensor<double>::from_external(std::move(s), std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename Real>
py::array_t<Real> to_array(const Tensor<Real>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<Real> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict sample_to_dict(const TimeSeriesSample& s) {
    py::dict d;
    d["id"] = s.id;
    d["x_clear"] = to_array(s.x_clear);
    if (!s.x_contam.empty()) d["x_contam"] = to_array(s.x_contam);
    if (!s.cloud_mask.empty()) d["cloud_mask"] = to_array(s.cloud_mask);
    if (!s.shadow_mask.empty()) d["shadow_mask"] = to_array(s.shadow_mask);
    d["aux"] = to_array(s.aux);
    if (!s.labels.empty()) d["labels"] = to_array(s.labels);
    d["doy"] = s.doy;
    d["aux_doy"] = s.aux_doy;
    d["contam_doy"] = s.contam_doy;
    d["lonlat"] = py::make_tuple(s.lonlat.lon, s.lonlat.lat);
    d["cloud_frac"] = s.cloud_frac;
    d["shadow_frac"] = s.shadow_frac;
    d["contam_cloud_frac"] = s.contam_cloud_frac;
    d["band_names"] = s.band_names;
    d["classes"] = s.classes;
    return d;
}

SolverConfig make_solver(const std::string& method, std::size_t steps, bool adaptive, double rtol, double atol) {
    SolverConfig c;
    c.method = solver_from_string(method);
    c.steps = steps;
    c.adaptive = adaptive;
    c.rtol = rtol;
    c.atol = atol;
    c.validate();
    return c;
}

// A trained or loaded model together with the task it was trained for.
struct PyModel {
    std::shared_ptr<FlowTransformer<float>> model;
    TrainConfig config;
    nlohmann::json history = nlohmann::json::object();

    py::dict evaluate(const std::filesystem::path& data_dir, double missing_rate, const SolverConfig& solver,
                      std::uint64_t seed, bool drop_aux) const {
        const auto data = load_dataset(data_dir);
        EvalConfig ec;
        ec.solver = solver;
        ec.seed = seed;
        ec.missing_rate = missing_rate;
        ec.drop_aux = drop_aux;
        auto j = evaluate_task(*model, config.task, data, ec).to_json();
        return json_to_py(j);
    }

    py::array_t<float> infer(const std::filesystem::path& sample_path, const SolverConfig& solver, std::uint64_t seed) const {
        const auto s = read_sample(sample_path);
        InferenceOptions opt;
        opt.solver = solver;
        opt.seed = seed;
        return to_array(infer_sequence(*model, s, config.task, opt).frames);
    }
};

}  // namespace

PYBIND11_MODULE(_tsflow, m) {
    m.doc() = "Conditional flow-matching transformer for satellite image time series";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<SolverError>(m, "SolverError", PyExc_RuntimeError);

    py::class_<SolverConfig>(m, "SolverConfig")
        .def(py::init(&make_solver), py::arg("method") = "dopri5", py::arg("steps") = 10, py::arg("adaptive") = false,
             py::arg("rtol") = 1e-5, py::arg("atol") = 1e-5)
        .def_property_readonly("method", [](const SolverConfig& c) { return to_string(c.method); })
        .def_readonly("steps", &SolverConfig::steps)
        .def_readonly("adaptive", &SolverConfig::adaptive)
        .def_readonly("rtol", &SolverConfig::rtol)
        .def_readonly("atol", &SolverConfig::atol);

    // Metrics
    m.def("psnr", [](const DArray& p, const DArray& g) { return metrics::psnr(to_tensor(p), to_tensor(g)); });
    m.def("rmse", [](const DArray& p, const DArray& g) { return metrics::rmse(to_tensor(p), to_tensor(g)); });
    m.def("mae", [](const DArray& p, const DArray& g) { return metrics::mae(to_tensor(p), to_tensor(g)); });
    m.def("ssim", [](const DArray& p, const DArray& g) { return metrics::ssim(to_tensor(p), to_tensor(g)); });
    m.def("sam", [](const DArray& p, const DArray& g) -> py::object {
        const auto r = metrics::sam(to_tensor(p), to_tensor(g));
        if (!r.defined()) return py::none();
        return py::float_(r.degrees);
    }, "Mean spectral angle in degrees over [C, H, W] or [T, C, H, W]; None when every pixel is skipped.");
    m.def("miou", [](const std::vector<int>& p, const std::vector<int>& g, std::size_t classes) {
        const auto r = metrics::miou(p, g, classes);
        return py::make_tuple(r.mean, r.per_class);
    });
    m.def("change_scores", [](const std::vector<int>& p, const std::vector<int>& g, std::size_t frames, std::size_t classes) {
        const auto r = metrics::change_scores(p, g, frames, classes);
        py::dict d;
        d["defined"] = r.defined;
        d["bc"] = r.bc;
        d["sc"] = r.sc;
        d["scs"] = r.scs;
        d["convention"] = r.convention;
        return d;
    });

    // Flow matching
    m.def("interpolate", [](const DArray& x0, const DArray& x1, double t) {
        return to_array(interpolate(to_tensor(x0), to_tensor(x1), t));
    });
    m.def("velocity_target", [](const DArray& x0, const DArray& x1) {
        return to_array(velocity_target(to_tensor(x0), to_tensor(x1)));
    });
    m.def("integrate", [](const std::function<DArray(DArray, double)>& f, const DArray& x0, const SolverConfig& cfg) {
        VelocityField<double> field = [&f](const Tensor<double>& x, double t) { return to_tensor(f(to_array(x), t)); };
        SolveStats stats;
        auto x = integrate(field, to_tensor(x0), cfg, &stats);
        return py::make_tuple(to_array(x), stats.accepted);
    }, py::arg("field"), py::arg("x0"), py::arg("solver") = SolverConfig{},
       "Integrates dx/dt = field(x, t) from t=0 to 1; returns (x1, accepted steps).");

    // Data
    m.def("synthesize", [](std::size_t rois, std::size_t h, std::size_t w, const std::string& mode, std::uint64_t seed,
                           std::optional<std::filesystem::path> out) -> py::object {
        SynthConfig sc;
        sc.rois = rois;
        sc.h = h;
        sc.w = w;
        sc.mode = dataset_mode_from_string(mode);
        sc.seed = seed;
        if (out) {
            const auto s = synthesize(sc, *out);
            py::dict d;
            d["emitted"] = s.emitted;
            d["dropped"] = s.dropped;
            d["cloud_density"] = s.cloud_density;
            d["files"] = s.files;
            return d;
        }
        py::list samples;
        for (const auto& s : synthesize_samples(sc)) samples.append(sample_to_dict(s));
        return samples;
    }, py::arg("rois") = 8, py::arg("h") = 16, py::arg("w") = 16, py::arg("mode") = "ts_s12", py::arg("seed") = 0,
       py::arg("out") = py::none(),
       "Generates synthetic sequences; returns sample dicts, or a summary when `out` names a directory.");
    m.def("read_sample", [](const std::filesystem::path& p) { return sample_to_dict(read_sample(p)); });

    // Models
    py::class_<PyModel>(m, "Model")
        .def_property_readonly("parameter_count", [](const PyModel& p) { return p.model->params().scalar_count(); })
        .def_property_readonly("parameter_names", [](const PyModel& p) { return p.model->params().names(); })
        .def_property_readonly("config", [](const PyModel& p) { return json_to_py(to_json(p.config)); })
        .def_property_readonly("history", [](const PyModel& p) { return json_to_py(p.history); })
        .def("evaluate", &PyModel::evaluate, py::arg("data_dir"), py::arg("missing_rate") = 0.5,
             py::arg("solver") = SolverConfig{}, py::arg("seed") = 1234, py::arg("drop_aux") = false)
        .def("infer", &PyModel::infer, py::arg("sample_path"), py::arg("solver") = SolverConfig{}, py::arg("seed") = 0,
             "Generates every frame of a stored sample with a sliding window.")
        .def("save", [](const PyModel& p, const std::filesystem::path& path) {
            save_checkpoint(path, *p.model, p.config, p.history.value("steps", std::size_t{0}), 0.0, nullptr);
        });

    m.def("train", [](const std::filesystem::path& data_dir, const std::string& task, std::size_t steps, std::uint64_t seed,
                      double lr, std::size_t batch, std::size_t width, std::size_t depth, std::size_t heads) {
        auto data = load_dataset(data_dir);
        TrainConfig cfg;
        cfg.task = TaskConfig::toy(task_from_string(task));
        cfg.steps = steps;
        cfg.seed = seed;
        cfg.optim.lr = lr;
        cfg.batch = batch;
        cfg.model.width = width;
        cfg.model.depth = depth;
        cfg.model.heads = heads;
        if (!data.empty()) {
            cfg.model.image_h = data.front().x_clear.dim(2);
            cfg.model.image_w = data.front().x_clear.dim(3);
        }
        // The trainer points into its data; keep both alive behind the model handle.
        struct Run {
            std::vector<TimeSeriesSample> data;
            std::unique_ptr<Trainer> trainer;
        };
        auto run = std::make_shared<Run>();
        run->data = std::move(data);
        run->trainer = std::make_unique<Trainer>(cfg, run->data);
        {
            py::gil_scoped_release release;
            run->trainer->run();
        }
        const auto& t = *run->trainer;
        PyModel out;
        out.config = cfg;
        out.history = {{"steps", t.steps_done()}, {"loss", t.losses()}, {"ema", t.ema()}};
        out.model = std::shared_ptr<FlowTransformer<float>>(run, &run->trainer->model());
        return out;
    }, py::arg("data_dir"), py::arg("task") = "recon", py::arg("steps") = 200, py::arg("seed") = 0, py::arg("lr") = 1e-3,
       py::arg("batch") = 8, py::arg("width") = 64, py::arg("depth") = 4, py::arg("heads") = 4);

    m.def("load_checkpoint", [](const std::filesystem::path& p) {
        auto ck = load_checkpoint(p);
        PyModel out;
        out.config = ck.config;
        out.history = {{"steps", ck.step}, {"ema", ck.ema}};
        out.model = std::shared_ptr<FlowTransformer<float>>(std::move(ck.model));
        return out;
    });

    m.def("layer_checks", [](std::uint64_t seed, std::size_t cases) {
        py::list out;
        for (const auto& c : run_layer_checks(seed, cases)) {
            py::dict d;
            d["layer"] = c.layer;
            d["case"] = c.shape;
            d["max_rel_error"] = c.result.max_rel_error;
            d["coordinates"] = c.result.coordinates_checked;
            out.append(d);
        }
        return out;
    }, py::arg("seed") = 0, py::arg("cases") = 3, "Finite-difference gradient checks for every layer (64-bit).");
}
