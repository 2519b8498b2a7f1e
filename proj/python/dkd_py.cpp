#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dkd/checkpoint.hpp"
#include "dkd/cli.hpp"
#include "dkd/distill.hpp"
#include "dkd/grad_battery.hpp"
#include "dkd/model.hpp"
#include "dkd/trainer.hpp"

namespace py = pybind11;
using namespace dkd;

namespace {

// Python objects cross the boundary as JSON text.
nlohmann::json to_nl(const py::object& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object from_nl(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_of(const Array& a, Dtype dtype) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()), dtype);
}

py::array_t<double> array_of(const Tensor& t) {
  const auto v = t.to_vector();
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

EncoderConfig named_config(const std::string& name, const std::vector<int>& heads) {
  if (name == "reference_teacher") return EncoderConfig::reference_teacher();
  if (name == "reference_student") return EncoderConfig::reference_student(heads);
  if (name == "desk_teacher") return EncoderConfig::desk_teacher();
  if (name == "desk_student") return EncoderConfig::desk_student(heads);
  throw ConfigError("unknown config name '" + name + "'");
}

std::map<int, FeatureMap> maps_of(const std::map<int, Array>& in) {
  std::map<int, FeatureMap> out;
  for (const auto& [l, a] : in) {
    if (a.ndim() != 2) {
      throw RankError("distill_loss: layer " + std::to_string(l) + " must be a [frames, width] array");
    }
    out.emplace(l, FeatureMap{tensor_of(a, Dtype::f64), l});
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_dkd, m) {
  m.doc() = "Layer-wise multi-task distillation of speech encoders";

  // Translators run newest first, so the subclass is registered last.
  auto& error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", error);

  m.def(
      "encoder_config", [](const std::string& name, const std::vector<int>& heads) {
        return from_nl(to_json(named_config(name, heads)));
      },
      py::arg("name"), py::arg("heads") = std::vector<int>{},
      "Config dict for reference_teacher, reference_student, desk_teacher or desk_student.");

  m.def(
      "count_params", [](const py::object& config) {
        const ParamCount c = count_params(encoder_config_from_json(to_nl(config)));
        return py::make_tuple(c.total, c.breakdown);
      },
      py::arg("config"), "(total, breakdown) trainable scalar count.");

  m.def(
      "count_flops", [](const py::object& config, std::size_t samples) {
        const FlopCount c = count_flops(encoder_config_from_json(to_nl(config)), samples);
        return py::make_tuple(c.total, c.terms);
      },
      py::arg("config"), py::arg("samples"), "(total, terms) multiply-accumulates of one forward pass.");

  m.def(
      "distill_loss",
      [](const std::map<int, Array>& student, const std::map<int, Array>& teacher, double lambda, bool use_cosine,
         const std::string& reduction) {
        DistillSpec spec;
        spec.predicted_layers.clear();
        for (const auto& [l, a] : student) spec.predicted_layers.push_back(l);
        spec.lambda = lambda;
        spec.use_cosine = use_cosine;
        spec.reduction = reduction == "sum" ? LossReduction::sum_over_time : LossReduction::mean_over_time;
        const LossBreakdown b = distill_loss(maps_of(student), maps_of(teacher), spec);
        py::dict out;
        out["total"] = b.total.item();
        std::map<int, double> l1, cos;
        for (const auto& [l, t] : b.l1) l1[l] = t.item();
        for (const auto& [l, t] : b.cosine) cos[l] = t.item();
        out["l1"] = l1;
        out["cosine"] = cos;
        return out;
      },
      py::arg("student"), py::arg("teacher"), py::arg("lam") = 1.0, py::arg("use_cosine") = true,
      py::arg("reduction") = "mean",
      "Per-layer l1 + cosine objective; inputs map teacher layer -> [frames, width] array.");

  m.def(
      "lr_at", [](std::int64_t step, const py::object& train_config) {
        const TrainConfig cfg =
            train_config.is_none() ? TrainConfig::reference() : train_config_from_json(to_nl(train_config));
        return lr_at(step, cfg);
      },
      py::arg("step"), py::arg("train_config") = py::none(), "Learning rate at `step` (default: reference schedule).");

  m.def(
      "generate_corpus", [](const py::object& params) {
        const CorpusParams p = params.is_none() ? CorpusParams{} : corpus_params_from_json(to_nl(params));
        const Corpus c = generate_corpus(p);
        py::list records;
        for (const auto& r : c.manifest.records) {
          py::dict d;
          d["id"] = r.id;
          d["speaker"] = r.speaker;
          d["content"] = r.content;
          d["intent"] = r.intent;
          d["offset"] = r.offset;
          d["length"] = r.length;
          records.append(d);
        }
        py::array_t<float> audio(static_cast<py::ssize_t>(c.audio.size()));
        std::copy(c.audio.begin(), c.audio.end(), audio.mutable_data());
        return py::make_tuple(records, audio);
      },
      py::arg("params") = py::none(), "(records, audio) of a synthetic corpus.");

  py::class_<Encoder>(m, "Encoder")
      .def_static(
          "build", [](const py::object& config, std::uint64_t seed) {
            return build(encoder_config_from_json(to_nl(config)), seed);
          },
          py::arg("config"), py::arg("seed"))
      .def_static(
          "load", [](const std::filesystem::path& path) { return to_encoder(load_checkpoint(path)); }, py::arg("path"))
      .def("save", [](const Encoder& e, const std::filesystem::path& path) { save_checkpoint(to_checkpoint(e), path); })
      .def_property_readonly("config", [](const Encoder& e) { return from_nl(to_json(e.config())); })
      .def_property_readonly("num_scalars", &Encoder::num_scalars)
      .def(
          "forward",
          [](const Encoder& e, const Array& wave) {
            NoGradScope guard;
            const EncoderOutput out = e.forward(tensor_of(wave, Dtype::f32));
            py::list layers;
            for (const auto& fm : out.layers) layers.append(array_of(fm.frames));
            py::dict heads;
            for (const auto& [l, fm] : out.heads) heads[py::int_(l)] = array_of(fm.frames);
            return py::make_tuple(layers, heads);
          },
          py::arg("wave"), "(layers, heads): layer outputs 0..L and head outputs keyed by teacher layer.");

  m.def(
      "strip_heads", [](const std::filesystem::path& in, const std::filesystem::path& out) {
        const StripResult r = strip_heads(load_checkpoint(in));
        save_checkpoint(r.checkpoint, out);
        return r.removed_scalars;
      },
      py::arg("src"), py::arg("dst"), "Writes `src` without heads to `dst`; returns the removed scalar count.");

  m.def(
      "checkpoint_digest", [](const std::filesystem::path& path) { return checkpoint_digest(load_checkpoint(path)); },
      py::arg("path"));

  m.def(
      "grad_battery", [](std::uint64_t seed, int shapes) {
        py::list out;
        for (const auto& c : run_grad_battery(seed, shapes)) {
          py::dict d;
          d["op"] = c.op;
          d["input"] = c.input;
          d["shape"] = std::vector<std::size_t>(c.shape.begin(), c.shape.end());
          d["max_rel_error"] = c.report.max_rel_error;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 0, py::arg("shapes") = 3, "Finite-difference check of every differentiable op.");

  m.def(
      "run_cli", [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a `dkd` subcommand in process; returns (exit code, stdout, stderr).");
}
