#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "stale_lab/config.hpp"
#include "stale_lab/gate.hpp"
#include "stale_lab/harness.hpp"
#include "stale_lab/optim.hpp"
#include "stale_lab/simulator.hpp"
#include "stale_lab/theory.hpp"
#include "stale_lab/verify.hpp"

namespace py = pybind11;
using namespace stale_lab;

namespace {

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : "; ") + x;
  return out;
}

RunConfig parse_config(const std::string& text) {
  return run_config_from_json(nlohmann::json::parse(text));
}

OuterConfig outer_defaults(const std::string& method) { return OuterConfig::defaults(parse_method(method)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the stale-lab simulator core";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      PyErr_SetString(PyExc_ValueError, join(e.errors()).c_str());
    } catch (const nlohmann::json::exception& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  m.attr("NO_CUTOFF") = kNoCutoff;

  m.def("cosine_gate", &cosine_gate, py::arg("tau"), py::arg("tau_cut"));
  m.def(
      "staleness_weight",
      [](double tau, double alpha, double tau_cut) { return staleness_weight(tau, StalenessGate{alpha, tau_cut}); },
      py::arg("tau"), py::arg("alpha") = 0.2, py::arg("tau_cut") = 32.0);
  m.def(
      "max_tau_sigma",
      [](double alpha, double tau_cut, double step) {
        const auto r = max_tau_sigma(StalenessGate{alpha, tau_cut}, step);
        return py::make_tuple(r.argmax, r.value);
      },
      py::arg("alpha"), py::arg("tau_cut") = 32.0, py::arg("grid_step") = 1e-4,
      "(argmax, value) of tau * sigma(tau) on a grid.");
  m.def("tau_decay_peak", &tau_decay_peak, py::arg("alpha"));
  m.def(
      "bound_terms",
      [](double L, double G, double noise, double c, std::int64_t T, double gap, double alpha) {
        TheoryInputs in{L, G, noise, c, T, gap};
        if (auto errs = in.validate(); !errs.empty()) throw py::value_error(join(errs));
        const auto t = bound_terms(in, alpha);
        py::dict d;
        d["optimization"] = t.optimization;
        d["noise"] = t.noise;
        d["staleness"] = t.staleness;
        d["total"] = t.total();
        return d;
      },
      py::arg("smoothness"), py::arg("grad_bound"), py::arg("noise_bound"), py::arg("step_constant"),
      py::arg("horizon"), py::arg("initial_gap"), py::arg("alpha"));

  py::class_<OuterConfig>(m, "OuterConfig")
      .def(py::init([](const std::string& method) { return outer_defaults(method); }),
           py::arg("method") = "cgad")
      .def_property(
          "method", [](const OuterConfig& c) { return std::string(to_string(c.method)); },
          [](OuterConfig& c, const std::string& s) { c.method = parse_method(s); })
      .def_readwrite("eta", &OuterConfig::eta)
      .def_readwrite("beta1", &OuterConfig::beta1)
      .def_readwrite("beta2", &OuterConfig::beta2)
      .def_readwrite("epsilon", &OuterConfig::epsilon)
      .def_readwrite("mu", &OuterConfig::mu)
      .def_property(
          "alpha", [](const OuterConfig& c) { return c.gate.alpha; },
          [](OuterConfig& c, double a) { c.gate.alpha = a; })
      .def_property(
          "tau_cut", [](const OuterConfig& c) { return c.gate.tau_cut; },
          [](OuterConfig& c, double t) { c.gate.tau_cut = t; })
      .def_property(
          "gate_placement", [](const OuterConfig& c) { return std::string(to_string(c.gate_placement)); },
          [](OuterConfig& c, const std::string& s) { c.gate_placement = parse_gate_placement(s); })
      .def_readwrite("buffer_period", &OuterConfig::buffer_period);

  py::class_<AdamMoments>(m, "AdamMoments")
      .def(py::init<std::size_t>(), py::arg("size"))
      .def_readwrite("m", &AdamMoments::m)
      .def_readwrite("v", &AdamMoments::v)
      .def_readwrite("t", &AdamMoments::t);

  m.def(
      "cgad_step",
      [](std::vector<double> params, const std::vector<double>& grad, double tau, AdamMoments& state,
         const OuterConfig& cfg) {
        const auto rep = cgad_step(params, grad, tau, state, cfg);
        return py::make_tuple(params, rep.applied, rep.scale);
      },
      py::arg("params"), py::arg("grad"), py::arg("tau"), py::arg("state"), py::arg("config"),
      "One gated Adam outer step. Returns (new_params, applied, sigma); state is updated in place.");

  m.def(
      "quantize",
      [](const std::vector<double>& values, std::size_t fragments) {
        const auto part = FragmentPartition::even(values.size(), fragments);
        const auto q = quantize_payload(values, part);
        return py::make_tuple(std::vector<int>(q.codes.begin(), q.codes.end()), q.max_abs);
      },
      py::arg("values"), py::arg("fragments") = 1, "(int8 codes, per-fragment max_abs)");
  m.def(
      "round_trip",
      [](const std::vector<double>& values, std::size_t fragments) {
        const auto part = FragmentPartition::even(values.size(), fragments);
        return dequantize_payload(quantize_payload(values, part), part);
      },
      py::arg("values"), py::arg("fragments") = 1);

  m.def(
      "config_hash", [](const std::string& text) { return config_hash(parse_config(text)); },
      py::arg("config_json"));
  m.def(
      "canonical_config", [](const std::string& text) { return canonical_json(parse_config(text)); },
      py::arg("config_json"));
  m.def(
      "run_json",
      [](const std::string& text) {
        const auto cfg = parse_config(text);
        py::gil_scoped_release release;
        return serialize_document(execute_run(cfg).document);
      },
      py::arg("config_json"), "Run a config and return the result document as JSON text.");
  m.def("verify", [] {
    std::vector<py::tuple> out;
    for (const auto& r : run_verify_suite()) out.push_back(py::make_tuple(r.name, r.passed, r.detail));
    return out;
  });
}
