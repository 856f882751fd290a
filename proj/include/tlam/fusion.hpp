#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tlam/labels.hpp"
#include "tlam/nn_ops.hpp"
#include "tlam/param_store.hpp"
#include "tlam/tensor.hpp"

namespace tlam {

enum class MergerVariant { tlam, clam, naive };

const char* variant_name(MergerVariant v);
MergerVariant parse_variant(const std::string& s);

struct LabelBinding {
  std::string name;
  std::size_t channels = 0;
};

std::vector<LabelBinding> bindings_of(const LabelSet& s);

/// Projection A_k (d x C_k, output x input), bias b_k and label encoding p_k.
struct LabelProjection {
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> encoding;
};

/// One CLAM layer v <- gelu(A v + b), A is d x d.
struct ClamLayer {
  std::vector<double> a;
  std::vector<double> b;
};

struct MergerConfig {
  MergerVariant variant = MergerVariant::tlam;
  std::size_t d = 96;
  std::size_t depth = 3;  // transformer blocks (TLAM) or stacked layers (CLAM)
  std::size_t heads = 3;
};

struct MergerParams {
  MergerConfig config;
  std::vector<LabelBinding> labels;
  std::vector<LabelProjection> projections;   // one per label
  std::vector<nn::BlockParams<double>> blocks;  // TLAM only
  std::vector<std::vector<ClamLayer>> clam;     // CLAM only, [label][depth]

  std::size_t d() const { return config.d; }
  void check() const;
};

/// Xavier-uniform weights, zero biases, unit LayerNorm gains and
/// N(0, 0.02^2) label encodings, drawn in a fixed order from `seed`.
MergerParams init_merger_params(const std::vector<LabelBinding>& labels, const MergerConfig& config,
                                std::uint64_t seed);

/// Throws ValidationError unless params are bound to exactly s's labels, in order.
void check_binding(const MergerParams& p, const LabelSet& s);

/// e = gelu(A x + b); an absent label (present == false) projects the zero vector.
template <class T>
void project_label(std::span<const T> x, bool present, std::span<const T> a, std::span<const T> b,
                   std::span<T> out, std::span<T> zero_scratch) {
  std::span<const T> input = x;
  if (!present) {
    std::fill(zero_scratch.begin(), zero_scratch.end(), T{});
    input = std::span<const T>(zero_scratch.data(), x.size());
  }
  nn::linear<T>(input, a, b, out);
  for (auto& v : out) v = nn::gelu(v);
}

std::vector<double> project_label(const std::vector<double>& x, bool present, const std::vector<double>& a,
                                  const std::vector<double>& b);

struct MergeStats {
  std::uint64_t attention_macs = 0;
};

/// Pixel-wise transformer label merging; returns an H x W x d tensor in the
/// requested floating dtype. Pixels are processed in parallel chunks and the
/// result does not depend on the thread count.
Tensor tlam_merge(const LabelSet& s, const MergerParams& p, DType precision = DType::f64,
                  MergeStats* stats = nullptr);

/// Stacked per-label affine+GeLU baseline followed by the same 1/N average.
Tensor clam_merge(const LabelSet& s, const MergerParams& p, DType precision = DType::f64);

/// Channel concatenation in label order (f32, H x W x sum C_k). Absent pixels
/// contribute zeros.
Tensor naive_concat(const LabelSet& s);

Tensor merge(const LabelSet& s, const MergerParams& p, DType precision = DType::f64, MergeStats* stats = nullptr);

/// Exact QK^T plus AV multiply-accumulates: pixels * l * h * 2 * N^2 * (d/h).
std::uint64_t count_attention_macs(std::uint64_t n_labels, std::uint64_t d, std::uint64_t heads,
                                   std::uint64_t blocks, std::uint64_t pixels);

// Parameter names: proj.<label>.A / .b, enc.<label>, blocks.<m>.{ln1,ln2}.{gamma,beta},
// blocks.<m>.attn.{Wq,Wk,Wv,Wo,bo}, blocks.<m>.mlp.{W1,b1,W2,b2}, clam.<label>.<m>.{A,b}.
ParamStore to_param_store(const MergerParams& p);
MergerParams from_param_store(const ParamStore& store, const MergerConfig& config,
                              const std::vector<LabelBinding>& labels);
std::vector<std::string> param_names(const MergerConfig& config, const std::vector<LabelBinding>& labels);

/// Directory layout: params.json (variant, d, depth, heads, label bindings)
/// plus one <name>.tlt per parameter.
void save_merger_params(const MergerParams& p, const std::filesystem::path& dir);
MergerParams load_merger_params(const std::filesystem::path& dir);

}  // namespace tlam
