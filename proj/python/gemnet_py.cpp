#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gemnet/calibrate.hpp"
#include "gemnet/cli.hpp"
#include "gemnet/error.hpp"
#include "gemnet/evaluate.hpp"
#include "gemnet/ingest.hpp"
#include "gemnet/model.hpp"
#include "gemnet/synthgen.hpp"

namespace py = pybind11;
using namespace gemnet;

namespace {

std::vector<StoneRecord> parse_records(const std::vector<std::string>& lines) {
  std::vector<StoneRecord> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(record_from_json_line(l));
  return out;
}

py::dict prediction_dict(const Prediction& p, Task task, double threshold) {
  py::dict d;
  d["label"] = p.label;
  d["class"] = task == Task::OD ? std::string(to_string(static_cast<Origin>(p.label)))
                                : std::string(to_string(static_cast<Treatment>(p.label)));
  d["confidence"] = p.confidence;
  d["probs"] = p.probs;
  d["accepted"] = accepts(p, threshold);
  return d;
}

}  // namespace

PYBIND11_MODULE(_gemnet, m) {
  m.doc() = "gemnet native bindings";

  py::register_exception<Error>(m, "GemnetError");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a gemnet subcommand in-process; returns (exit code, stdout, stderr).");

  m.def(
      "generate",
      [](const std::string& spec, std::size_t n, std::optional<std::uint64_t> seed) {
        GeneratorSpec s = resolve_spec(spec);
        if (seed) s.seed = *seed;
        std::vector<std::string> lines;
        for (const auto& r : gen_corpus(s, n)) lines.push_back(record_to_json_line(r));
        return lines;
      },
      py::arg("spec"), py::arg("n"), py::arg("seed") = py::none(),
      "Synthetic corpus as JSON lines, one per evaluation.");

  m.def(
      "oracle_accuracy",
      [](const std::string& spec, const std::vector<std::string>& lines, const std::string& task) {
        return bayes_accuracy(parse_records(lines), resolve_spec(spec), task_from_string(task));
      },
      py::arg("spec"), py::arg("records"), py::arg("task") = "od");

  m.def(
      "resample_ftir",
      [](const std::vector<std::pair<double, double>>& points) {
        const auto s = resample_ftir(RawSpectrum{points});
        return py::make_tuple(std::vector<double>(s.values().begin(), s.values().end()),
                              std::vector<bool>(s.coverage().begin(), s.coverage().end()));
      },
      py::arg("points"), "Spline-resamples (wavenumber, absorbance) pairs onto 200..7000.");

  m.def(
      "validate_xrf",
      [](const std::map<std::string, double>& named) { return validate_xrf(xrf_from_named(named)); },
      py::arg("named"));

  m.def(
      "select_threshold",
      [](const std::vector<double>& confidence, const std::vector<bool>& correct, double epsilon) {
        const std::vector<std::uint8_t> c(correct.begin(), correct.end());
        const auto sel = select_threshold(confidence, c, epsilon);
        py::dict d;
        d["threshold"] = sel.threshold;
        d["removed"] = sel.removed;
        d["retained"] = sel.retained;
        d["retained_accuracy"] = sel.retained_accuracy;
        return d;
      },
      py::arg("confidence"), py::arg("correct"), py::arg("epsilon"));

  py::class_<Model>(m, "Model")
      .def_static("load", &Model::load, py::arg("path"))
      .def_property_readonly("task",
                             [](const Model& self) { return std::string(to_string(self.config().task)); })
      .def_property_readonly("config", [](const Model& self) { return config_to_json(self.config()); })
      .def(
          "predict",
          [](const Model& self, const std::vector<std::string>& lines, double threshold) {
            const auto records = parse_records(lines);
            std::vector<Prediction> preds;
            {
              py::gil_scoped_release release;
              preds = self.predict(records);
            }
            py::list out;
            for (const auto& p : preds) out.append(prediction_dict(p, self.config().task, threshold));
            return out;
          },
          py::arg("records"), py::arg("threshold") = 0.0,
          "Predicts JSON-line records; `accepted` applies confidence >= threshold.");
}
