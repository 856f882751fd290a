#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "tlam/errors.hpp"
#include "tlam/fusion.hpp"
#include "tlam/labels.hpp"
#include "tlam/metrics.hpp"
#include "tlam/parallel.hpp"
#include "tlam/tensor_io.hpp"
#include "tlam/train.hpp"

namespace py = pybind11;
using namespace tlam;

namespace {

template <class T>
py::array_t<T> array_of(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.dims().begin(), t.dims().end());
  py::array_t<T> out(shape);
  std::memcpy(out.mutable_data(), t.data<T>().data(), t.size() * sizeof(T));
  return out;
}

py::array to_numpy(const Tensor& t) {
  switch (t.dtype()) {
    case DType::f32: return array_of<float>(t);
    case DType::f64: return array_of<double>(t);
    case DType::u8: return array_of<std::uint8_t>(t);
  }
  throw ShapeError("unknown dtype");
}

template <class T>
Tensor tensor_as(const py::array& a) {
  const auto c = py::array_t<T, py::array::c_style | py::array::forcecast>::ensure(a);
  if (!c) throw ShapeError("cannot convert array");
  Dims dims(c.shape(), c.shape() + c.ndim());
  return Tensor::from<T>(std::move(dims), std::vector<T>(c.data(), c.data() + c.size()));
}

// float32 / uint8 arrays keep their dtype; anything else becomes float64.
Tensor from_numpy(const py::array& a) {
  if (a.dtype().is(py::dtype::of<float>())) return tensor_as<float>(a);
  if (a.dtype().is(py::dtype::of<std::uint8_t>())) return tensor_as<std::uint8_t>(a);
  return tensor_as<double>(a);
}

// Labels cross the boundary as a list of dicts {name, kind, values (H,W,C f32), mask (H,W u8)}.
py::list labels_to_py(const LabelSet& s) {
  py::list out;
  for (const auto& l : s.labels) {
    py::dict d;
    d["name"] = l.name;
    d["kind"] = label_kind_name(l.kind);
    d["values"] = to_numpy(l.values);
    d["mask"] = to_numpy(l.mask);
    out.append(d);
  }
  return out;
}

LabelSet labels_from_py(const py::list& items) {
  LabelSet s;
  for (const auto& item : items) {
    const auto d = item.cast<py::dict>();
    LabelMap l;
    l.name = d["name"].cast<std::string>();
    l.kind = d.contains("kind") ? parse_label_kind(d["kind"].cast<std::string>()) : LabelKind::continuous;
    l.values = tensor_as<float>(d["values"].cast<py::array>());
    if (l.values.rank() == 2) {
      const auto v = l.values.data<float>();
      l.values = Tensor::from<float>({l.values.dim(0), l.values.dim(1), 1}, std::vector<float>(v.begin(), v.end()));
    }
    if (d.contains("mask") && !d["mask"].is_none()) {
      l.mask = tensor_as<std::uint8_t>(d["mask"].cast<py::array>());
    } else {
      l.mask = Tensor({l.values.dim(0), l.values.dim(1)}, DType::u8);
      std::fill(l.mask.data<std::uint8_t>().begin(), l.mask.data<std::uint8_t>().end(), 1);
    }
    s.labels.push_back(std::move(l));
  }
  if (!s.labels.empty()) {
    s.height = s.labels[0].values.dim(0);
    s.width = s.labels[0].values.dim(1);
  }
  validate_label_set(s);
  return s;
}

InstanceMap instances_from_py(const py::array& a) {
  const auto c = py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>::ensure(a);
  if (!c || c.ndim() != 2) throw ShapeError("instance map must be a 2-D integer array");
  InstanceMap m{static_cast<std::size_t>(c.shape(0)), static_cast<std::size_t>(c.shape(1)), {}};
  for (py::ssize_t i = 0; i < c.size(); ++i) {
    if (c.data()[i] < 0) throw ValidationError("instance ids must be non-negative");
    m.ids.push_back(static_cast<std::uint32_t>(c.data()[i]));
  }
  return m;
}

py::array instances_to_py(const InstanceMap& m) {
  py::array_t<std::uint32_t> out({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
  std::memcpy(out.mutable_data(), m.ids.data(), m.ids.size() * sizeof(std::uint32_t));
  return out;
}

SegMap segmap_from_py(const py::array& a, std::size_t classes) {
  return SegMap::from_tensor(tensor_as<double>(a), classes);
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

class Merger {
 public:
  Merger(MergerParams p) : params_(std::move(p)) {}

  static Merger create(const py::list& labels, const std::string& variant, std::size_t d, std::size_t depth,
                       std::size_t heads, std::uint64_t seed) {
    const MergerConfig cfg{parse_variant(variant), d, depth, heads};
    return Merger(init_merger_params(bindings_of(labels_from_py(labels)), cfg, seed));
  }

  py::array merge(const py::list& labels, const std::string& precision) {
    const auto s = labels_from_py(labels);
    if (precision != "f32" && precision != "f64") throw ValidationError("precision must be f32 or f64");
    MergeStats stats;
    const auto z = tlam::merge(s, params_, precision == "f32" ? DType::f32 : DType::f64, &stats);
    last_macs_ = stats.attention_macs;
    return to_numpy(z);
  }

  std::string variant() const { return variant_name(params_.config.variant); }
  std::size_t d() const { return params_.config.d; }
  std::size_t depth() const { return params_.config.depth; }
  std::size_t heads() const { return params_.config.heads; }
  std::uint64_t last_macs() const { return last_macs_; }
  std::vector<std::string> label_names() const {
    std::vector<std::string> out;
    for (const auto& l : params_.labels) out.push_back(l.name);
    return out;
  }

  py::dict parameters() const {
    py::dict out;
    for (const auto& [name, t] : to_param_store(params_)) out[py::str(name)] = to_numpy(t);
    return out;
  }

  void save(const std::filesystem::path& dir) const { save_merger_params(params_, dir); }
  static Merger load(const std::filesystem::path& dir) { return Merger(load_merger_params(dir)); }

 private:
  MergerParams params_;
  std::uint64_t last_macs_ = 0;
};

}  // namespace

PYBIND11_MODULE(tlam, m) {
  m.doc() = "Pixel-wise transformer label merging";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  m.def("set_num_threads", &set_num_threads, py::arg("n"), "0 selects all cores");
  m.def("num_threads", &num_threads);

  m.def("load_tensor", [](const std::filesystem::path& p) { return to_numpy(load_tensor(p)); }, py::arg("path"));
  m.def(
      "save_tensor", [](const py::array& a, const std::filesystem::path& p) { return save_tensor(from_numpy(a), p); },
      py::arg("array"), py::arg("path"), "Writes TLT1; returns the byte count.");

  m.def(
      "synth_scene",
      [](std::size_t h, std::size_t w, std::size_t regions, std::uint64_t seed) {
        const auto s = synth_scene(h, w, regions, seed);
        py::dict out;
        out["labels"] = labels_to_py(s.labels);
        out["instances"] = instances_to_py(s.instances);
        out["target"] = to_numpy(s.target);
        return out;
      },
      py::arg("height"), py::arg("width"), py::arg("regions"), py::arg("seed"));

  m.def(
      "sparsify",
      [](const py::list& labels, const py::array& instances, double sparsity, std::uint64_t seed) {
        const auto s = labels_from_py(labels);
        return labels_to_py(apply_masks(s, generate_sparse_masks(instances_from_py(instances), s, sparsity, seed)));
      },
      py::arg("labels"), py::arg("instances"), py::arg("sparsity"), py::arg("seed"));

  m.def("load_manifest", [](const std::filesystem::path& p) { return labels_to_py(load_manifest(p)); });
  m.def("save_manifest",
        [](const py::list& labels, const std::filesystem::path& p) { save_manifest(labels_from_py(labels), p); });

  py::class_<Merger>(m, "Merger")
      .def(py::init(&Merger::create), py::arg("labels"), py::arg("variant") = "tlam", py::arg("d") = 96,
           py::arg("depth") = 3, py::arg("heads") = 3, py::arg("seed") = 0)
      .def("merge", &Merger::merge, py::arg("labels"), py::arg("precision") = "f64")
      .def_property_readonly("variant", &Merger::variant)
      .def_property_readonly("d", &Merger::d)
      .def_property_readonly("depth", &Merger::depth)
      .def_property_readonly("heads", &Merger::heads)
      .def_property_readonly("labels", &Merger::label_names)
      .def_property_readonly("last_attention_macs", &Merger::last_macs)
      .def("parameters", &Merger::parameters)
      .def("save", &Merger::save, py::arg("dir"))
      .def_static("load", &Merger::load, py::arg("dir"));

  m.def("naive_concat", [](const py::list& labels) { return to_numpy(naive_concat(labels_from_py(labels))); });
  m.def("count_attention_macs", &count_attention_macs, py::arg("labels"), py::arg("d"), py::arg("heads"),
        py::arg("blocks"), py::arg("pixels"));

  m.def(
      "gradcheck",
      [](const std::string& preset, std::uint64_t seed, double corrupt) {
        GradCheckOptions opts;
        opts.corrupt_factor = corrupt;
        py::list out;
        for (const auto& c : gradcheck_preset(preset, seed)) {
          const auto r = gradcheck_case(c, opts);
          py::dict d;
          d["case"] = describe(c);
          d["passed"] = r.passed;
          d["checked"] = r.checked;
          d["max_rel_error"] = r.max_rel_error;
          d["group_max"] = r.group_max;
          out.append(d);
        }
        return out;
      },
      py::arg("preset") = "small", py::arg("seed") = 42, py::arg("corrupt") = 1.0);

  m.def(
      "train_toy",
      [](std::size_t height, std::size_t width, std::size_t regions, std::size_t iters, double sparsity,
         const std::string& mode, std::uint64_t seed, std::size_t d, std::size_t depth, std::size_t heads,
         std::size_t batch, double lr) {
        TrainConfig c;
        c.height = height;
        c.width = width;
        c.regions = regions;
        c.iters = iters;
        c.sparsity = sparsity;
        if (mode == "adv") {
          c.mode = TrainMode::adversarial;
          if (lr > 0.0) c.lr_g = lr;
        } else if (mode == "l2") {
          if (lr > 0.0) c.lr_l2 = lr;
        } else {
          throw ValidationError("mode must be l2 or adv");
        }
        c.seed = seed;
        c.d = d;
        c.depth = depth;
        c.heads = heads;
        c.batch = batch;
        const auto r = train_toy(c);
        auto out = json_to_py(r.to_json());
        if (!r.diverged) out["concept"] = to_numpy(r.concept_tensor);
        return out;
      },
      py::arg("height") = 16, py::arg("width") = 16, py::arg("regions") = 4, py::arg("iters") = 500,
      py::arg("sparsity") = 0.5, py::arg("mode") = "l2", py::arg("seed") = 42, py::arg("d") = 16,
      py::arg("depth") = 2, py::arg("heads") = 2, py::arg("batch") = 4, py::arg("lr") = 0.0,
      "lr > 0 overrides the generator-side learning rate. Returns the report as a dict, plus the final dense concept tensor under 'concept'.");

  m.def(
      "mean_iou",
      [](const py::array& pred, const py::array& gt, std::size_t classes) {
        return mean_iou(segmap_from_py(pred, classes), segmap_from_py(gt, classes));
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"));
  m.def(
      "pixel_accuracy",
      [](const py::array& pred, const py::array& gt, std::size_t classes) {
        return pixel_accuracy(segmap_from_py(pred, classes), segmap_from_py(gt, classes));
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"));

  m.def(
      "pca_project_3",
      [](const py::array& z) {
        const auto r = pca_project_3(from_numpy(z));
        py::dict out;
        out["image"] = to_numpy(r.image);
        out["coords"] = to_numpy(r.coords);
        out["mean"] = r.basis.mean;
        out["components"] = r.basis.components;
        out["explained_variance"] = r.basis.explained_variance;
        out["total_variance"] = r.basis.total_variance;
        return out;
      },
      py::arg("concept"));
  m.def(
      "write_ppm", [](const py::array& img, const std::filesystem::path& p) { return write_ppm(from_numpy(img), p); },
      py::arg("image"), py::arg("path"));
}
