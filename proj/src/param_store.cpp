#include "tlam/param_store.hpp"

#include <cmath>

#include "tlam/tensor_io.hpp"

namespace tlam {

void ParamStore::set(const std::string& name, Tensor value) {
  if (name.empty()) throw ValidationError("parameter name must be non-empty");
  value.require_dtype(DType::f64);
  params_.insert_or_assign(name, std::move(value));
}

void ParamStore::set(const std::string& name, Dims dims, std::vector<double> values) {
  set(name, Tensor::from<double>(std::move(dims), std::move(values)));
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter \"" + name + "\"");
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter \"" + name + "\"");
  return it->second;
}

std::vector<double> ParamStore::values(const std::string& name) const {
  auto v = get(name).data<double>();
  return {v.begin(), v.end()};
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

bool ParamStore::all_finite() const {
  for (const auto& [_, t] : params_) {
    for (double v : t.data<double>()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

void ParamStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& [name, t] : params_) save_tensor(t, dir / (name + ".tlt"));
}

ParamStore ParamStore::load(const std::filesystem::path& dir, const std::vector<std::string>& names) {
  ParamStore store;
  for (const auto& name : names) {
    auto t = load_tensor(dir / (name + ".tlt"));
    if (t.dtype() != DType::f64) t = t.cast(DType::f64);
    store.set(name, std::move(t));
  }
  return store;
}

}  // namespace tlam
