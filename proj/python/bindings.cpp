#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "malvit/attacks.hpp"
#include "malvit/cli.hpp"
#include "malvit/dataset.hpp"
#include "malvit/error.hpp"
#include "malvit/evaluator.hpp"
#include "malvit/trainer.hpp"

namespace py = pybind11;
using namespace malvit;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<float>(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const Tensor<float>& t) {
  const auto& s = t.shape();
  py::array_t<float> out(std::vector<py::ssize_t>(s.begin(), s.end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<std::uint8_t> to_labels(const LabelArray& y) { return {y.data(), y.data() + y.size()}; }

// Images [N, H, W, C] and labels [N, n] as numpy arrays.
py::dict dataset_arrays(const Dataset& d) {
  py::array_t<float> images({static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.image_size),
                             static_cast<py::ssize_t>(d.image_size), static_cast<py::ssize_t>(d.channels)});
  if (!d.images.empty()) std::copy(d.images.begin(), d.images.end(), images.mutable_data());
  py::array_t<std::uint8_t> labels({static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.num_tasks())});
  std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
  py::dict out;
  out["images"] = images;
  out["labels"] = labels;
  out["task_names"] = d.task_names;
  out["ids"] = d.ids;
  out["split"] = std::string(split_name(d.split));
  return out;
}

Dataset dataset_from_arrays(const FloatArray& images, const LabelArray& labels,
                            const std::vector<std::string>& task_names) {
  if (images.ndim() != 4 || labels.ndim() != 2 || images.shape(0) != labels.shape(0) ||
      labels.shape(1) != static_cast<py::ssize_t>(task_names.size())) {
    throw DimensionError("expected images [N, H, W, C], labels [N, n] and n task names");
  }
  Dataset d;
  d.task_names = task_names;
  d.image_size = static_cast<std::size_t>(images.shape(1));
  d.channels = static_cast<std::size_t>(images.shape(3));
  d.images.assign(images.data(), images.data() + images.size());
  d.labels = to_labels(labels);
  for (py::ssize_t i = 0; i < images.shape(0); ++i) d.ids.push_back(std::to_string(i));
  d.validate();
  return d;
}

py::dict metrics_dict(const std::vector<TaskMetrics>& m) {
  py::dict out;
  for (const auto& t : m) out[py::str(t.task)] = t.balanced_accuracy();
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-attribute vision transformer: models, attacks and evaluation";
  m.attr("__version__") = kVersion;

  static py::exception<Error> error(m, "MalvitError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "malvit");
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one command line; returns (exit code, stdout, stderr).");

  m.def(
      "synth",
      [](std::size_t n_attributes, std::size_t n_train, std::size_t n_val, std::size_t n_test, std::size_t image_size,
         std::uint64_t seed) {
        auto spec = SynthSpec::face_attributes(n_attributes, seed);
        spec.n_train = n_train;
        spec.n_val = n_val;
        spec.n_test = n_test;
        spec.image_size = image_size;
        const auto s = synth_generate(spec);
        py::dict out;
        out["train"] = dataset_arrays(s.train);
        out["val"] = dataset_arrays(s.val);
        out["test"] = dataset_arrays(s.test);
        return out;
      },
      py::arg("n_attributes") = 9, py::arg("n_train") = 8000, py::arg("n_val") = 1000, py::arg("n_test") = 1000,
      py::arg("image_size") = 64, py::arg("seed") = 0, "Seeded synthetic face-attribute benchmark.");

  m.def(
      "load_dataset", [](const std::filesystem::path& p) { return dataset_arrays(load_dataset(p)); }, py::arg("path"));

  m.def(
      "read_attribute_table",
      [](const std::filesystem::path& p) {
        const auto t = read_attribute_table(p);
        return py::make_tuple(t.attribute_names, t.filenames, t.values);
      },
      py::arg("path"), "CelebA attribute file as (names, filenames, +1/-1 rows).");

  m.def(
      "balanced_accuracy",
      [](const LabelArray& preds, const LabelArray& labels) { return balanced_accuracy(to_labels(preds), to_labels(labels)); },
      py::arg("preds"), py::arg("labels"));

  py::class_<MalVitModel<float>>(m, "Model")
      .def(py::init([](const std::vector<std::string>& tasks, const std::string& variant, std::uint64_t seed,
                       const std::string& preset) {
             return MalVitModel<float>(ModelConfig::preset(preset, tasks, parse_variant(variant)), seed);
           }),
           py::arg("tasks"), py::arg("variant") = "mal", py::arg("seed") = 0, py::arg("preset") = "desk")
      .def_static(
          "load", [](const std::filesystem::path& p) { return load_checkpoint(p).model; }, py::arg("path"))
      .def("save", [](const MalVitModel<float>& self, const std::filesystem::path& p) { save_checkpoint(self, p); })
      .def_property_readonly("task_names", [](const MalVitModel<float>& self) { return self.config().task_names; })
      .def_property_readonly("variant",
                             [](const MalVitModel<float>& self) { return std::string(variant_name(self.config().variant)); })
      .def_property_readonly("config", [](const MalVitModel<float>& self) { return self.config().to_json().dump(); })
      .def_property_readonly("parameter_count", &MalVitModel<float>::parameter_count)
      .def_property_readonly("hash", [](const MalVitModel<float>& self) { return model_hash(self); })
      .def(
          "logits",
          [](const MalVitModel<float>& self, const FloatArray& images) {
            GradientTape<float> tape(false);
            return to_array(self.forward(tape, to_tensor(images)).logits);
          },
          py::arg("images"), "Logits [B, n] for images [B, H, W, C] in [0, 1].")
      .def(
          "attention",
          [](const MalVitModel<float>& self, const FloatArray& images) {
            GradientTape<float> tape(false);
            std::vector<py::array_t<float>> maps;
            for (const auto& a : self.forward(tape, to_tensor(images), true).attention_maps) maps.push_back(to_array(a));
            return maps;
          },
          py::arg("images"), "Attention maps per block, each [B, heads, S, S].");

  m.def(
      "attack",
      [](const MalVitModel<float>& model, const FloatArray& images, const LabelArray& labels, const std::string& family,
         double eps, std::size_t steps, std::optional<double> alpha, bool random_start, std::size_t k,
         std::size_t patch_iters, std::uint64_t seed) {
        AttackConfig cfg;
        cfg.family = parse_attack_family(family);
        cfg.epsilon = eps;
        cfg.steps = steps;
        cfg.alpha = alpha;
        cfg.random_start = random_start;
        cfg.patch_budget = k;
        cfg.patch_iters = patch_iters;
        cfg.validate();
        Rng rng(seed);
        const auto x = to_tensor(images);
        const auto y = to_labels(labels);
        if (cfg.family == AttackFamily::uap) {
          throw ConfigError("uap needs a training set; use evaluate_robust");
        }
        return to_array(run_attack(model, x, y, cfg, rng).x_adv);
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("family") = "pgd", py::arg("eps") = 0.03,
      py::arg("steps") = 10, py::arg("alpha") = py::none(), py::arg("random_start") = false, py::arg("k") = 1,
      py::arg("patch_iters") = 60, py::arg("seed") = 0, "Adversarial images for fgsm, bim, pgd or patch-fool.");

  m.def(
      "evaluate_clean",
      [](const MalVitModel<float>& model, const FloatArray& images, const LabelArray& labels) {
        return metrics_dict(evaluate_clean(model, dataset_from_arrays(images, labels, model.config().task_names)));
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), "Balanced accuracy per task.");

  m.def(
      "evaluate_robust",
      [](const MalVitModel<float>& model, const FloatArray& images, const LabelArray& labels, const std::string& family,
         double eps, std::size_t steps, std::size_t uap_epochs, std::size_t k, std::uint64_t seed) {
        AttackConfig cfg;
        cfg.family = parse_attack_family(family);
        cfg.epsilon = eps;
        cfg.steps = steps;
        cfg.uap_epochs = uap_epochs;
        cfg.patch_budget = k;
        cfg.validate();
        return metrics_dict(
            evaluate_robust(model, dataset_from_arrays(images, labels, model.config().task_names), cfg, seed));
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("family") = "pgd", py::arg("eps") = 0.03,
      py::arg("steps") = 10, py::arg("uap_epochs") = 5, py::arg("k") = 1, py::arg("seed") = 0,
      "Balanced accuracy per task on attacked images.");
}
