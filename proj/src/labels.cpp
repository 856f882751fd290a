#include "tlam/labels.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

#include "tlam/rng.hpp"
#include "tlam/tensor_io.hpp"

namespace tlam {
namespace {

bool valid_label_name(const std::string& name) {
  if (name.empty()) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

void check_hw(const Tensor& t, std::size_t h, std::size_t w, const std::string& what) {
  if (t.rank() < 2 || t.dim(0) != h || t.dim(1) != w) {
    throw ValidationError(what + " has dims " + dims_string(t.dims()) + ", expected " +
                          std::to_string(h) + "x" + std::to_string(w));
  }
}

}  // namespace

const char* label_kind_name(LabelKind kind) {
  return kind == LabelKind::discrete ? "discrete" : "continuous";
}

LabelKind parse_label_kind(const std::string& s) {
  if (s == "discrete") return LabelKind::discrete;
  if (s == "continuous") return LabelKind::continuous;
  throw ValidationError("unknown label kind \"" + s + "\"");
}

LabelMap LabelMap::dense(std::string name, LabelKind kind, Tensor values) {
  if (values.rank() != 3) throw ShapeError("label values must be H x W x C");
  values.require_dtype(DType::f32);
  Tensor mask({values.dim(0), values.dim(1)}, DType::u8);
  std::ranges::fill(mask.data<std::uint8_t>(), std::uint8_t{1});
  return LabelMap{std::move(name), kind, std::move(values), std::move(mask)};
}

const LabelMap& LabelSet::find(const std::string& name) const {
  return labels[index_of(name)];
}

std::size_t LabelSet::index_of(const std::string& name) const {
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k].name == name) return k;
  }
  throw ValidationError("no label named \"" + name + "\"");
}

void validate_label_set(const LabelSet& s) {
  if (s.labels.empty()) throw ValidationError("label set is empty (N must be >= 1)");
  std::set<std::string> seen;
  for (const auto& l : s.labels) {
    if (!valid_label_name(l.name)) {
      throw ValidationError("label name \"" + l.name + "\" must be non-empty [A-Za-z0-9_-]");
    }
    if (!seen.insert(l.name).second) throw ValidationError("duplicate label name \"" + l.name + "\"");
    if (l.values.empty() || l.values.rank() != 3) {
      throw ValidationError("label \"" + l.name + "\" values must be H x W x C");
    }
    if (l.values.dtype() != DType::f32) throw ValidationError("label \"" + l.name + "\" values must be f32");
    if (l.mask.empty() || l.mask.rank() != 2 || l.mask.dtype() != DType::u8) {
      throw ValidationError("label \"" + l.name + "\" mask must be an H x W u8 tensor");
    }
    check_hw(l.values, s.height, s.width, "label \"" + l.name + "\" values");
    check_hw(l.mask, s.height, s.width, "label \"" + l.name + "\" mask");
  }
}

std::vector<std::uint32_t> InstanceMap::regions() const {
  std::vector<std::uint32_t> r(ids.begin(), ids.end());
  std::ranges::sort(r);
  r.erase(std::unique(r.begin(), r.end()), r.end());
  return r;
}

Tensor InstanceMap::to_tensor() const {
  Tensor t({height, width}, DType::u8);
  auto out = t.data<std::uint8_t>();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] > 255) throw ShapeError("instance id " + std::to_string(ids[i]) + " does not fit in u8");
    out[i] = static_cast<std::uint8_t>(ids[i]);
  }
  return t;
}

InstanceMap InstanceMap::from_tensor(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("instance map must be H x W");
  t.require_dtype(DType::u8);
  auto src = t.data<std::uint8_t>();
  return InstanceMap{t.dim(0), t.dim(1), std::vector<std::uint32_t>(src.begin(), src.end())};
}

SparsityMaskSet generate_sparse_masks(const InstanceMap& inst, const LabelSet& labels,
                                      double sparsity, std::uint64_t seed) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) {
    throw ShapeError("sparsity must lie in [0,1], got " + std::to_string(sparsity));
  }
  if (inst.height != labels.height || inst.width != labels.width) {
    throw ShapeError("instance map dims do not match label set dims");
  }
  const auto regions = inst.regions();
  Rng rng(seed);
  SparsityMaskSet out;
  std::vector<std::uint8_t> keep(regions.size());
  for (std::size_t k = 0; k < labels.size(); ++k) {
    for (std::size_t r = 0; r < regions.size(); ++r) keep[r] = rng.uniform() < sparsity ? 0 : 1;
    Tensor mask({inst.height, inst.width}, DType::u8);
    auto m = mask.data<std::uint8_t>();
    for (std::size_t p = 0; p < inst.ids.size(); ++p) {
      const auto r = std::ranges::lower_bound(regions, inst.ids[p]) - regions.begin();
      m[p] = keep[static_cast<std::size_t>(r)];
    }
    out.masks.push_back(std::move(mask));
  }
  return out;
}

LabelSet apply_masks(const LabelSet& s, const SparsityMaskSet& m) {
  if (m.masks.size() != s.size()) throw ShapeError("mask count does not match label count");
  LabelSet out = s;
  for (std::size_t k = 0; k < s.size(); ++k) {
    auto& label = out.labels[k];
    const auto& sm = m.masks[k];
    if (sm.rank() != 2 || sm.dim(0) != s.height || sm.dim(1) != s.width) {
      throw ShapeError("sparsity mask for \"" + label.name + "\" has dims " + dims_string(sm.dims()));
    }
    auto keep = sm.data<std::uint8_t>();
    auto mask = label.mask.data<std::uint8_t>();
    auto values = label.values.data<float>();
    const auto c = label.channels();
    for (std::size_t p = 0; p < mask.size(); ++p) {
      mask[p] = (mask[p] && keep[p]) ? 1 : 0;
      if (!mask[p]) std::fill_n(values.begin() + static_cast<std::ptrdiff_t>(p * c), c, 0.0f);
    }
  }
  return out;
}

SparsityMaskSet drop_label_masks(const LabelSet& s, std::size_t label_index) {
  SparsityMaskSet out;
  for (std::size_t k = 0; k < s.size(); ++k) {
    Tensor mask({s.height, s.width}, DType::u8);
    std::ranges::fill(mask.data<std::uint8_t>(), static_cast<std::uint8_t>(k == label_index ? 0 : 1));
    out.masks.push_back(std::move(mask));
  }
  return out;
}

namespace {

struct Rect {
  std::size_t i0, j0, h, w;
};

std::vector<Rect> split_grid(std::size_t h, std::size_t w, std::size_t regions, Rng& rng) {
  std::vector<Rect> rects{{0, 0, h, w}};
  while (rects.size() < regions) {
    std::vector<std::size_t> splittable;
    for (std::size_t r = 0; r < rects.size(); ++r) {
      if (rects[r].h * rects[r].w >= 2) splittable.push_back(r);
    }
    const auto pick = splittable[rng.next() % splittable.size()];
    const Rect rect = rects[pick];
    bool vertical;  // cut along rows (split height)
    if (rect.h >= 2 && rect.w >= 2) {
      vertical = (rng.next() & 1) == 0;
    } else {
      vertical = rect.h >= 2;
    }
    if (vertical) {
      const std::size_t cut = 1 + rng.next() % (rect.h - 1);
      rects[pick] = {rect.i0, rect.j0, cut, rect.w};
      rects.push_back({rect.i0 + cut, rect.j0, rect.h - cut, rect.w});
    } else {
      const std::size_t cut = 1 + rng.next() % (rect.w - 1);
      rects[pick] = {rect.i0, rect.j0, rect.h, cut};
      rects.push_back({rect.i0, rect.j0 + cut, rect.h, rect.w - cut});
    }
  }
  return rects;
}

}  // namespace

SynthScene synth_scene(std::size_t h, std::size_t w, std::size_t regions, std::uint64_t seed) {
  if (h < 4 || w < 4) throw ShapeError("synth_scene needs h, w >= 4");
  if (regions < 1 || regions > 16) throw ShapeError("synth_scene needs 1 <= regions <= 16");

  Rng rng(seed);
  const auto rects = split_grid(h, w, regions, rng);

  InstanceMap inst{h, w, std::vector<std::uint32_t>(h * w)};
  for (std::size_t r = 0; r < rects.size(); ++r) {
    const auto& rect = rects[r];
    for (std::size_t i = rect.i0; i < rect.i0 + rect.h; ++i) {
      for (std::size_t j = rect.j0; j < rect.j0 + rect.w; ++j) inst.ids[i * w + j] = static_cast<std::uint32_t>(r);
    }
  }

  struct Plane {
    double a, b, c, curvature;
  };
  std::vector<Plane> planes(regions);
  for (auto& p : planes) {
    p.a = rng.uniform();
    p.b = rng.uniform();
    p.c = rng.uniform();
    p.curvature = rng.uniform();
  }

  Tensor semantics({h, w, regions}, DType::f32);
  Tensor depth({h, w, 1}, DType::f32);
  Tensor normals({h, w, 3}, DType::f32);
  Tensor edges({h, w, 1}, DType::f32);
  Tensor curvature({h, w, 1}, DType::f32);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const auto r = inst.at(i, j);
      const auto& p = planes[r];
      semantics.at<float>({i, j, r}) = 1.0f;
      depth.at<float>({i, j, 0}) = static_cast<float>(p.a * static_cast<double>(i) + p.b * static_cast<double>(j) + p.c);
      const double norm = std::sqrt(p.a * p.a + p.b * p.b + 1.0);
      normals.at<float>({i, j, 0}) = static_cast<float>(-p.a / norm);
      normals.at<float>({i, j, 1}) = static_cast<float>(-p.b / norm);
      normals.at<float>({i, j, 2}) = static_cast<float>(1.0 / norm);
      bool boundary = false;
      if (i > 0 && inst.at(i - 1, j) != r) boundary = true;
      if (i + 1 < h && inst.at(i + 1, j) != r) boundary = true;
      if (j > 0 && inst.at(i, j - 1) != r) boundary = true;
      if (j + 1 < w && inst.at(i, j + 1) != r) boundary = true;
      edges.at<float>({i, j, 0}) = boundary ? 1.0f : 0.0f;
      curvature.at<float>({i, j, 0}) = static_cast<float>(p.curvature);
    }
  }

  SynthScene scene;
  scene.labels.height = h;
  scene.labels.width = w;
  scene.labels.labels.push_back(LabelMap::dense("semantics", LabelKind::discrete, std::move(semantics)));
  scene.labels.labels.push_back(LabelMap::dense("depth", LabelKind::continuous, std::move(depth)));
  scene.labels.labels.push_back(LabelMap::dense("normals", LabelKind::continuous, std::move(normals)));
  scene.labels.labels.push_back(LabelMap::dense("edges", LabelKind::discrete, std::move(edges)));
  scene.labels.labels.push_back(LabelMap::dense("curvature", LabelKind::continuous, std::move(curvature)));
  scene.instances = std::move(inst);
  scene.target = reconstruct_target(scene.labels);
  return scene;
}

Tensor reconstruct_target(const LabelSet& full) {
  const auto& sem = full.find("semantics");
  const auto& depth = full.find("depth").values;
  const auto& edges = full.find("edges").values;
  const auto& curv = full.find("curvature").values;
  const std::size_t h = full.height, w = full.width, classes = sem.channels();

  auto d = depth.data<float>();
  const auto [lo_it, hi_it] = std::ranges::minmax_element(d);
  const double lo = *lo_it, hi = *hi_it;

  Tensor target({h, w, 3}, DType::f32);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      std::size_t cls = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (sem.values.at<float>({i, j, c}) > sem.values.at<float>({i, j, cls})) cls = c;
      }
      const double dv = depth.at<float>({i, j, 0});
      target.at<float>({i, j, 0}) = static_cast<float>(static_cast<double>(cls) / static_cast<double>(classes));
      target.at<float>({i, j, 1}) = static_cast<float>(hi > lo ? (dv - lo) / (hi - lo) : 0.0);
      target.at<float>({i, j, 2}) = static_cast<float>(0.5 * edges.at<float>({i, j, 0}) + 0.5 * curv.at<float>({i, j, 0}));
    }
  }
  return target;
}

LabelSet load_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
  const auto base = manifest.parent_path();
  LabelSet s;
  try {
    s.height = doc.at("height").get<std::size_t>();
    s.width = doc.at("width").get<std::size_t>();
    for (const auto& entry : doc.at("labels")) {
      LabelMap l;
      l.name = entry.at("name").get<std::string>();
      l.kind = parse_label_kind(entry.at("kind").get<std::string>());
      l.values = load_tensor(base / entry.at("values").get<std::string>());
      l.mask = load_tensor(base / entry.at("mask").get<std::string>());
      const auto channels = entry.at("channels").get<std::size_t>();
      if (l.values.rank() != 3 || l.values.dim(2) != channels) {
        throw ValidationError("label \"" + l.name + "\" declares " + std::to_string(channels) +
                              " channels but values have dims " + dims_string(l.values.dims()));
      }
      s.labels.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
  validate_label_set(s);
  return s;
}

void save_manifest(const LabelSet& s, const std::filesystem::path& manifest) {
  validate_label_set(s);
  const auto base = manifest.parent_path();
  if (!base.empty()) std::filesystem::create_directories(base);
  nlohmann::json doc;
  doc["height"] = s.height;
  doc["width"] = s.width;
  doc["labels"] = nlohmann::json::array();
  for (const auto& l : s.labels) {
    const std::string values = l.name + ".values.tlt";
    const std::string mask = l.name + ".mask.tlt";
    save_tensor(l.values, base / values);
    save_tensor(l.mask, base / mask);
    doc["labels"].push_back({{"name", l.name},
                             {"kind", label_kind_name(l.kind)},
                             {"channels", l.channels()},
                             {"values", values},
                             {"mask", mask}});
  }
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write manifest " + manifest.string());
  out << doc.dump(2) << '\n';
}

}  // namespace tlam
