#include "tlam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "tlam/errors.hpp"
#include "tlam/tensor_io.hpp"

namespace tlam {

SegMap SegMap::from_tensor(const Tensor& t, std::size_t num_classes) {
  if (!(t.rank() == 2 || (t.rank() == 3 && t.dim(2) == 1))) {
    throw ShapeError("segmentation map must be H x W, got " + dims_string(t.dims()));
  }
  SegMap m;
  m.height = t.dim(0);
  m.width = t.dim(1);
  m.num_classes = num_classes;
  for (double v : t.to_f64()) {
    if (!(v >= 0.0) || v != std::floor(v)) throw ValidationError("class indices must be non-negative integers");
    m.classes.push_back(static_cast<std::uint32_t>(v));
  }
  m.check();
  return m;
}

void SegMap::check() const {
  if (num_classes == 0) throw ValidationError("num_classes must be >= 1");
  if (classes.size() != height * width) throw ShapeError("segmentation map size does not match H x W");
  for (auto c : classes) {
    if (c >= num_classes) {
      throw ValidationError("class index " + std::to_string(c) + " out of range for K=" + std::to_string(num_classes));
    }
  }
}

namespace {

void check_pair(const SegMap& pred, const SegMap& gt) {
  pred.check();
  gt.check();
  if (pred.height != gt.height || pred.width != gt.width) throw ShapeError("segmentation maps differ in size");
  if (pred.num_classes != gt.num_classes) throw ValidationError("segmentation maps differ in class count");
}

}  // namespace

double mean_iou(const SegMap& pred, const SegMap& gt) {
  check_pair(pred, gt);
  const std::size_t k = gt.num_classes;
  std::vector<std::size_t> inter(k, 0), uni(k, 0);
  for (std::size_t i = 0; i < gt.classes.size(); ++i) {
    const auto p = pred.classes[i], g = gt.classes[i];
    if (p == g) {
      ++inter[g];
      ++uni[g];
    } else {
      ++uni[p];
      ++uni[g];
    }
  }
  double acc = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (uni[c] == 0) continue;
    acc += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++counted;
  }
  return counted ? acc / static_cast<double>(counted) : 1.0;
}

double pixel_accuracy(const SegMap& pred, const SegMap& gt) {
  check_pair(pred, gt);
  std::size_t same = 0;
  for (std::size_t i = 0; i < gt.classes.size(); ++i) same += pred.classes[i] == gt.classes[i];
  return static_cast<double>(same) / static_cast<double>(gt.classes.size());
}

SymmetricEigen jacobi_eigen(std::vector<double> a, std::size_t n, double rel_tol, std::size_t max_sweeps) {
  if (a.size() != n * n) throw ShapeError("jacobi_eigen: matrix is not n x n");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i != j) s += a[i * n + j] * a[i * n + j];
      }
    }
    return std::sqrt(s);
  };
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += std::abs(a[i * n + i]);

  SymmetricEigen out;
  while (off_norm() > rel_tol * trace && out.sweeps < max_sweeps) {
    ++out.sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a[i * n + i] > a[j * n + j]; });
  out.values.resize(n);
  out.vectors.resize(n * n);
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a[order[c] * n + order[c]];
    for (std::size_t r = 0; r < n; ++r) out.vectors[r * n + c] = v[r * n + order[c]];
  }
  return out;
}

PcaProjection pca_project_3(const Tensor& z) {
  if (z.rank() != 3) throw ShapeError("concept tensor must be H x W x d, got " + dims_string(z.dims()));
  const std::size_t h = z.dim(0), w = z.dim(1), d = z.dim(2), p = h * w;
  if (d < 3) throw ContractError("PCA projection needs d >= 3, got d=" + std::to_string(d));
  if (p < 4) throw ContractError("PCA projection needs at least 4 pixels");
  const auto x = z.to_f64();

  PcaProjection out;
  auto& b = out.basis;
  b.mean.assign(d, 0.0);
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < d; ++c) b.mean[c] += x[r * d + c];
  }
  for (auto& m : b.mean) m /= static_cast<double>(p);

  std::vector<double> cov(d * d, 0.0), row(d);
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < d; ++c) row[c] = x[r * d + c] - b.mean[c];
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = i; j < d; ++j) cov[i * d + j] += row[i] * row[j];
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      cov[i * d + j] /= static_cast<double>(p - 1);
      cov[j * d + i] = cov[i * d + j];
    }
    b.total_variance += cov[i * d + i];
  }

  const auto eig = jacobi_eigen(cov, d);
  b.all_variances = eig.values;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> comp(d);
    std::size_t arg = 0;
    for (std::size_t r = 0; r < d; ++r) {
      comp[r] = eig.vectors[r * d + c];
      if (std::abs(comp[r]) > std::abs(comp[arg])) arg = r;
    }
    if (comp[arg] < 0.0) {
      for (auto& v : comp) v = -v;
    }
    b.components.push_back(std::move(comp));
    b.explained_variance.push_back(eig.values[c]);
  }

  std::vector<double> coords(p * 3);
  double scale = 0.0;
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += (x[r * d + i] - b.mean[i]) * b.components[c][i];
      coords[r * 3 + c] = acc;
      scale = std::max(scale, std::abs(acc));
    }
  }
  // Channels whose spread is round-off relative to the data are treated as constant.
  const double flat = 1e-9 * std::max(1.0, scale);
  std::vector<double> img(p * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    double lo = coords[c], hi = coords[c];
    for (std::size_t r = 0; r < p; ++r) {
      lo = std::min(lo, coords[r * 3 + c]);
      hi = std::max(hi, coords[r * 3 + c]);
    }
    for (std::size_t r = 0; r < p; ++r) {
      img[r * 3 + c] = hi - lo <= flat ? 0.5 : (coords[r * 3 + c] - lo) / (hi - lo);
    }
  }
  out.coords = Tensor::from<double>({h, w, 3}, std::move(coords));
  out.image = Tensor::from<double>({h, w, 3}, std::move(img));
  return out;
}

void save_pca_basis(const PcaBasis& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t d = b.mean.size();
  std::vector<double> comps;
  for (const auto& c : b.components) comps.insert(comps.end(), c.begin(), c.end());
  save_tensor(Tensor::from<double>({d}, b.mean), dir / "mean.tlt");
  save_tensor(Tensor::from<double>({b.components.size(), d}, comps), dir / "components.tlt");
  save_tensor(Tensor::from<double>({b.explained_variance.size()}, b.explained_variance),
              dir / "explained_variance.tlt");
  nlohmann::json j = {{"d", d},
                      {"components", b.components.size()},
                      {"explained_variance", b.explained_variance},
                      {"total_variance", b.total_variance},
                      {"mean", "mean.tlt"},
                      {"components_file", "components.tlt"},
                      {"explained_variance_file", "explained_variance.tlt"}};
  std::ofstream f(dir / "pca.json");
  if (!f) throw IoError("cannot write " + (dir / "pca.json").string());
  f << j.dump(2) << "\n";
}

PcaBasis load_pca_basis(const std::filesystem::path& dir) {
  std::ifstream f(dir / "pca.json");
  if (!f) throw IoError("cannot read " + (dir / "pca.json").string());
  const auto j = nlohmann::json::parse(f);
  PcaBasis b;
  b.total_variance = j.at("total_variance").get<double>();
  b.mean = load_tensor(dir / "mean.tlt").to_f64();
  b.explained_variance = load_tensor(dir / "explained_variance.tlt").to_f64();
  const auto comps = load_tensor(dir / "components.tlt");
  if (comps.rank() != 2 || comps.dim(1) != b.mean.size()) throw FormatError("components.tlt has wrong shape");
  const auto flat = comps.to_f64();
  for (std::size_t c = 0; c < comps.dim(0); ++c) {
    b.components.emplace_back(flat.begin() + c * comps.dim(1), flat.begin() + (c + 1) * comps.dim(1));
  }
  return b;
}

std::uint8_t ppm_byte(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

std::size_t write_ppm(const Tensor& image, std::ostream& out) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("PPM needs an H x W x 3 image");
  if (image.dtype() == DType::u8) throw ShapeError("PPM input must be floating point in [0, 1]");
  const std::string header =
      "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  std::string bytes;
  bytes.reserve(image.size());
  for (double v : image.to_f64()) bytes.push_back(static_cast<char>(ppm_byte(v)));
  out << header << bytes;
  if (!out) throw IoError("failed writing PPM stream");
  return header.size() + bytes.size();
}

std::size_t write_ppm(const Tensor& image, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  return write_ppm(image, f);
}

}  // namespace tlam
