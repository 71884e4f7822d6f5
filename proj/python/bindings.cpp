#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ksm/errors.hpp"
#include "ksm/export.hpp"
#include "ksm/run.hpp"

namespace py = pybind11;

namespace {

// Configs cross the boundary as JSON text; the Python side wraps dicts.
ksm::RunConfig parse_config(const std::string& text) {
  ksm::Json j;
  try {
    j = ksm::Json::parse(text, nullptr, true, true);
  } catch (const ksm::Json::parse_error& e) {
    throw ksm::ConfigError(e.what());
  }
  return ksm::RunConfig::from_json(j);
}

ksm::ExportOptions export_options(const std::string& kind, int iteration, std::optional<double> feature, int nx,
                                  int nr, int nf, std::optional<int> measure) {
  ksm::ExportOptions o;
  o.kind = ksm::parse_export_kind(kind);
  o.iteration = iteration;
  o.feature = feature;
  o.x_points = nx;
  o.r_points = nr;
  o.feature_points = nf;
  o.measure = measure;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Krusell-Smith master equation solver";

  py::register_exception<ksm::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ksm::NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ksm::IoError>(m, "IoError", PyExc_OSError);

  m.def("default_config_text", &ksm::default_config_text);
  m.def("normalize_config", [](const std::string& text) { return ksm::to_text(parse_config(text).to_json()); },
        "Full config with defaults filled in, as JSON text.");
  m.def("config_hash", [](const std::string& text) { return parse_config(text).hash(); });

  m.def("economy_params", [](const std::string& text) { return ksm::to_text(parse_config(text).economy.to_json()); });
  m.def(
      "utility",
      [](double gamma, double c) {
        ksm::EconomyParams p;
        p.gamma = gamma;
        return ksm::utility(p, c);
      },
      py::arg("gamma"), py::arg("c"));
  m.def(
      "hamiltonian",
      [](double gamma, double p) {
        ksm::EconomyParams e;
        e.gamma = gamma;
        return ksm::hamiltonian(e, p);
      },
      py::arg("gamma"), py::arg("p"));
  m.def(
      "hamiltonian_prime",
      [](double gamma, double p) {
        ksm::EconomyParams e;
        e.gamma = gamma;
        return ksm::hamiltonian_prime(e, p);
      },
      py::arg("gamma"), py::arg("p"));
  m.def("pearson", [](const std::vector<double>& a, const std::vector<double>& b) { return ksm::pearson(a, b); });

  m.def(
      "aiyagari",
      [](const std::string& text) {
        const auto eq = ksm::cmd_aiyagari(parse_config(text));
        return py::dict(py::arg("r") = eq.r, py::arg("w") = eq.w, py::arg("capital") = eq.aggregates.capital,
                        py::arg("clearing_gap") = eq.clearing_gap);
      },
      py::arg("config"), py::call_guard<py::gil_scoped_release>(),
      "Writes aiyagari.json and grid.json to the config's out directory.");
  m.def(
      "solve",
      [](const std::string& text) {
        const auto h = ksm::cmd_solve(parse_config(text));
        std::vector<std::string> reports;
        for (const auto& r : h.reports) reports.push_back(ksm::to_text(r.to_json()));
        return std::make_pair(h.converged, reports);
      },
      py::arg("config"), py::call_guard<py::gil_scoped_release>(),
      "Runs the pipeline; returns (converged, report JSON texts).");
  m.def(
      "export_csv",
      [](const std::filesystem::path& run_dir, const std::string& kind, int iteration, std::optional<double> feature,
         int nx, int nr, int nf, std::optional<int> measure) {
        return ksm::cmd_export(run_dir, export_options(kind, iteration, feature, nx, nr, nf, measure));
      },
      py::arg("run_dir"), py::arg("kind"), py::arg("iteration") = 0, py::arg("feature") = py::none(),
      py::arg("nx") = 61, py::arg("nr") = 41, py::arg("nf") = 41, py::arg("measure") = py::none());

  py::class_<ksm::ValueNetwork>(m, "ValueNetwork")
      .def_static(
          "load", [](const std::filesystem::path& path) { return ksm::load_checkpoint(path); }, py::arg("path"))
      .def_property_readonly("d", [](const ksm::ValueNetwork& n) { return n.spec().d; })
      .def_property_readonly("d0", [](const ksm::ValueNetwork& n) { return n.spec().d0; })
      .def_property_readonly("parameter_count", &ksm::ValueNetwork::parameter_count)
      .def(
          "evaluate",
          [](const ksm::ValueNetwork& n, const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& r,
             const Eigen::MatrixXd& M) {
            if (x.size() != r.size() || M.cols() != x.size()) throw ksm::ConfigError("x, r and M columns differ");
            Eigen::VectorXd v, g;
            n.evaluate(ksm::NetBatch{x, M, r}, &v, &g);
            return std::make_pair(v, g);
          },
          py::arg("x"), py::arg("r"), py::arg("M"), "Values and dV/dx; M is d x n.")
      .def("features", &ksm::ValueNetwork::features, py::arg("M"));
}
