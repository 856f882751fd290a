#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tlam/tensor.hpp"

namespace tlam {

/// Named f64 parameter tensors, iterated in name order.
class ParamStore {
 public:
  void set(const std::string& name, Tensor value);
  void set(const std::string& name, Dims dims, std::vector<double> values);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::vector<double> values(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;
  std::vector<std::string> names() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  /// False if any element is NaN or infinite.
  bool all_finite() const;

  /// Writes <dir>/<name>.tlt for every entry.
  void save(const std::filesystem::path& dir) const;
  /// Loads <dir>/<name>.tlt for each requested name.
  static ParamStore load(const std::filesystem::path& dir, const std::vector<std::string>& names);

 private:
  std::map<std::string, Tensor> params_;
};

}  // namespace tlam
