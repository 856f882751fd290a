#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tlam/tensor.hpp"

namespace tlam {

enum class LabelKind { discrete, continuous };

const char* label_kind_name(LabelKind kind);
LabelKind parse_label_kind(const std::string& s);

/// One spatial label X_k: H x W x C_k f32 values plus an H x W u8 presence mask.
struct LabelMap {
  std::string name;
  LabelKind kind = LabelKind::continuous;
  Tensor values;  // f32, H x W x C
  Tensor mask;    // u8, H x W, 1 = present

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }

  /// Fully present label from an H x W x C f32 tensor.
  static LabelMap dense(std::string name, LabelKind kind, Tensor values);
};

struct LabelSet {
  std::vector<LabelMap> labels;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return labels.size(); }
  const LabelMap& find(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
};

/// Throws ValidationError unless the set is non-empty, names are unique and
/// well-formed, and every member matches the set's H x W.
void validate_label_set(const LabelSet& s);

/// Per-pixel region identifiers. Ids need not be contiguous.
struct InstanceMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> ids;

  std::uint32_t at(std::size_t i, std::size_t j) const { return ids[i * width + j]; }
  /// Distinct ids in ascending order.
  std::vector<std::uint32_t> regions() const;

  Tensor to_tensor() const;  // u8; throws if an id exceeds 255
  static InstanceMap from_tensor(const Tensor& t);
};

/// One H x W u8 mask per label (1 = keep).
struct SparsityMaskSet {
  std::vector<Tensor> masks;
};

/// For each (label, region) pair in ascending (label index, region id) order,
/// draws one uniform and drops the whole region iff the draw < sparsity.
SparsityMaskSet generate_sparse_masks(const InstanceMap& inst, const LabelSet& labels,
                                      double sparsity, std::uint64_t seed);

/// ANDs each label mask with its sparsity mask and zeroes values at pixels
/// that end up absent.
LabelSet apply_masks(const LabelSet& s, const SparsityMaskSet& m);

/// Mask set that removes one whole label and keeps all others.
SparsityMaskSet drop_label_masks(const LabelSet& s, std::size_t label_index);

struct SynthScene {
  LabelSet labels;
  InstanceMap instances;
  Tensor target;  // f32 H x W x 3
};

/// Toy scene with rectangular regions and the five labels semantics, depth,
/// normals, edges and curvature. The RGB target is a closed-form function of
/// the full label set (see reconstruct_target).
SynthScene synth_scene(std::size_t h, std::size_t w, std::size_t regions, std::uint64_t seed);

/// R = class / classes, G = depth min-max normalised, B = (edge + curvature) / 2.
Tensor reconstruct_target(const LabelSet& full);

// Manifest: {"height":H,"width":W,"labels":[{"name","kind","channels","values","mask"}]},
// tensor paths relative to the manifest file.
LabelSet load_manifest(const std::filesystem::path& manifest);
void save_manifest(const LabelSet& s, const std::filesystem::path& manifest);

}  // namespace tlam
