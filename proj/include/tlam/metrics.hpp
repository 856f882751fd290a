#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <vector>

#include "tlam/tensor.hpp"

namespace tlam {

/// H x W class indices, each < num_classes.
struct SegMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 1;
  std::vector<std::uint32_t> classes;

  /// From an H x W (or H x W x 1) integer-valued tensor of any dtype.
  static SegMap from_tensor(const Tensor& t, std::size_t num_classes);
  void check() const;
};

/// Mean IoU over classes present in either map; classes absent from both are skipped.
double mean_iou(const SegMap& pred, const SegMap& gt);
double pixel_accuracy(const SegMap& pred, const SegMap& gt);

/// Eigen-decomposition of a symmetric n x n matrix (row-major) by cyclic Jacobi
/// sweeps. Eigenvalues are returned in descending order; eigenvectors are the
/// matching columns of `vectors`.
struct SymmetricEigen {
  std::vector<double> values;
  std::vector<double> vectors;
  std::size_t sweeps = 0;
};
SymmetricEigen jacobi_eigen(std::vector<double> a, std::size_t n, double rel_tol = 1e-10,
                            std::size_t max_sweeps = 100);

struct PcaBasis {
  std::vector<double> mean;                    // d
  std::vector<std::vector<double>> components; // 3 x d, unit norm
  std::vector<double> explained_variance;      // 3
  std::vector<double> all_variances;           // d, descending
  double total_variance = 0.0;                 // covariance trace
};

struct PcaProjection {
  PcaBasis basis;
  Tensor coords;  // H x W x 3 f64, centred projections before rescaling
  Tensor image;   // H x W x 3 f64 in [0, 1]
};

/// Top-3 principal components of the pixels of an H x W x d tensor, with each
/// projected channel rescaled to [0, 1] (constant channels map to 0.5).
PcaProjection pca_project_3(const Tensor& concept_tensor);

/// <dir>/pca.json plus mean.tlt, components.tlt, explained_variance.tlt.
void save_pca_basis(const PcaBasis& b, const std::filesystem::path& dir);
PcaBasis load_pca_basis(const std::filesystem::path& dir);

/// Binary P6 with channel bytes round(clamp(v, 0, 1) * 255), halves rounded up.
std::size_t write_ppm(const Tensor& image, std::ostream& out);
std::size_t write_ppm(const Tensor& image, const std::filesystem::path& path);
std::uint8_t ppm_byte(double v);

}  // namespace tlam
