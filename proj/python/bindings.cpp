// Python extension: thin wrappers over the library. Structured values cross
// the boundary as JSON text; the package in cmcl/__init__.py decodes them.

#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cmcl/harness.hpp"
#include "cmcl/losses.hpp"

namespace py = pybind11;
using namespace cmcl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array, got " + std::to_string(a.ndim()) + " dims");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Tensor({rows, cols}, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

std::vector<Tensor> to_tensors(const std::vector<Array>& xs) {
  std::vector<Tensor> out;
  for (const auto& a : xs) out.push_back(to_tensor(a));
  return out;
}

py::tuple dataset_tuple(const DomainDataset& ds) {
  py::array_t<int, py::array::c_style> y({static_cast<py::ssize_t>(ds.y.size())});
  std::copy(ds.y.begin(), ds.y.end(), y.mutable_data());
  return py::make_tuple(ds.name, to_array(ds.x), y, ds.class_count);
}

RunConfig config_from(const std::string& text) { return parse_run_config_text(text); }

}  // namespace

PYBIND11_MODULE(_cmcl, m) {
  m.doc() = "CMCL domain generalization core";

  // Translators run newest first, so the base class goes in before its subclasses.
  const auto base = py::register_exception<Error>(m, "CmclError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<ValidationError>(m, "ValidationError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<ContractError>(m, "ContractError", base);

  m.def("registered_scenarios", &registered_scenarios);
  m.def("registered_scenario", [](const std::string& name) { return run_config_to_json(registered_scenario(name)).dump(); },
        py::arg("name"));
  m.def("normalize_config", [](const std::string& text) { return run_config_to_json(config_from(text)).dump(); },
        py::arg("config_json"), "Parses and validates a run config; returns it with defaults filled in.");

  m.def(
      "generate",
      [](const std::string& text, std::optional<std::uint64_t> seed) {
        ScenarioSpec s = config_from(text).scenario;
        if (seed) s.seed = *seed;
        py::list out;
        for (const auto& ds : generate(s)) out.append(dataset_tuple(ds));
        return out;
      },
      py::arg("config_json"), py::arg("seed") = py::none());

  m.def(
      "run_experiment",
      [](const std::string& text, const std::filesystem::path& out_dir, std::vector<std::string> methods,
         unsigned jobs, bool write_files) {
        const RunConfig cfg = config_from(text);
        ExperimentOptions eo;
        eo.out_dir = out_dir;
        eo.methods = std::move(methods);
        eo.jobs = jobs;
        eo.write_files = write_files;
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(cfg, eo);
        }
        return run_result_to_json(r).dump();
      },
      py::arg("config_json"), py::arg("out_dir"), py::arg("methods") = std::vector<std::string>{"cmcl"},
      py::arg("jobs") = 1u, py::arg("write_files") = true);

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& dataset) {
        std::ostringstream out, err;
        const int code = cmd_eval(checkpoint, dataset, out, err);
        if (code != kExitOk) throw Error(err.str());
        return out.str();
      },
      py::arg("checkpoint"), py::arg("dataset"));

  m.def(
      "gradcheck",
      [](std::size_t configs, std::uint64_t seed, const std::string& fault) {
        GradcheckOptions g;
        g.configs_per_loss = configs;
        g.seed = seed;
        g.inject_fault = fault;
        py::list out;
        for (const auto& r : run_gradcheck(g)) {
          py::dict d;
          d["loss"] = r.loss;
          d["configs"] = r.configs;
          d["failures"] = r.failures;
          d["max_rel_error"] = r.max_rel_error;
          out.append(d);
        }
        return out;
      },
      py::arg("configs") = 20, py::arg("seed") = 0, py::arg("inject_fault") = "");

  m.def("loss_mean", [](const std::vector<Array>& f) { return loss_mean(to_tensors(f)); }, py::arg("features"));
  m.def("loss_cov", [](const std::vector<Array>& f) { return loss_cov(to_tensors(f)); }, py::arg("features"));
  m.def(
      "loss_mm",
      [](const std::vector<Array>& f, double lm, double lc) { return loss_mm(to_tensors(f), lm, lc); },
      py::arg("features"), py::arg("lambda_mean"), py::arg("lambda_cov"));
  m.def("kl_categorical", [](std::vector<double> p, std::vector<double> q) { return kl_categorical(p, q); });
  m.def("kl_terms", [](std::vector<double> p, std::vector<double> q) {
    const KlTerms t = kl_decomposition_check(p, q);
    return py::make_tuple(t.negative_entropy, t.cross);
  });

  m.def("read_dataset", [](const std::filesystem::path& p) { return dataset_tuple(dataset_read(p)); });
  m.def(
      "write_dataset",
      [](const std::string& name, const Array& x, std::vector<int> y, std::size_t classes,
         const std::filesystem::path& p) { dataset_write(DomainDataset{name, to_tensor(x), std::move(y), classes}, p); },
      py::arg("name"), py::arg("x"), py::arg("y"), py::arg("class_count"), py::arg("path"));
}
