#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tlam/autodiff.hpp"
#include "tlam/fusion.hpp"
#include "tlam/labels.hpp"
#include "tlam/param_store.hpp"

namespace tlam {

// ---- toy generator / discriminator heads ---------------------------------

/// Widths of the per-pixel heads. Parameters live in a ParamStore under
/// gen.{W1,b1,W2,b2} (d -> gen_hidden -> 3) and disc.{W1,b1,W2,b2}
/// ((d+3) -> disc_hidden -> 1); weights are stored input x output.
struct HeadConfig {
  std::size_t d = 16;
  std::size_t gen_hidden = 64;
  std::size_t disc_hidden = 64;
};

ParamStore init_head_params(const HeadConfig& config, std::uint64_t seed);
std::vector<std::string> generator_param_names();
std::vector<std::string> discriminator_param_names();

/// rgb = W2 gelu(W1 z + b1) + b2 per pixel; H x W x 3 f64, no squashing.
Tensor forward_generate(const Tensor& concept_z, const ParamStore& heads);
/// Mean over pixels of W2 gelu(W1 [z, rgb] + b1) + b2.
double discriminator_score(const Tensor& concept_z, const Tensor& image, const ParamStore& heads);

double hinge_d_loss(double real_score, double fake_score);
double hinge_g_loss(double fake_score);
double l2_loss(const Tensor& image, const Tensor& target);

// ---- the same pipeline recorded on a tape ---------------------------------

namespace graph {

/// Masked label values of one label as a constant P x C node.
ad::Var label_input(ad::Tape& t, const LabelMap& label);
/// TLAM over all pixels; returns the P x d concept (P = H*W).
ad::Var tlam_merge(ad::Tape& t, const ParamStore& store, const MergerConfig& config,
                   const std::vector<LabelBinding>& labels, const LabelSet& s, std::uint64_t* macs = nullptr);
ad::Var generate(ad::Tape& t, ad::Var concept_z, const ParamStore& store);
ad::Var discriminate(ad::Tape& t, ad::Var concept_z, ad::Var image, const ParamStore& store);
ad::Var hinge_d(ad::Tape& t, ad::Var real_score, ad::Var fake_score);
ad::Var hinge_g(ad::Tape& t, ad::Var fake_score);
ad::Var image_constant(ad::Tape& t, const Tensor& image);

}  // namespace graph

// ---- gradient checking -----------------------------------------------------

/// Loss of a parameter store; fills *grads with tape gradients when non-null.
using DiffLoss = std::function<double(const ParamStore&, ParamStore* grads)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  std::size_t full_limit = 10000;   // above this many elements, subsample
  std::size_t sample_size = 256;    // >= 200
  std::uint64_t seed = 0;
  double corrupt_factor = 1.0;      // != 1 scales tape gradients (negative control)
};

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> failures;
  std::map<std::string, double> group_max;  // per op group
  bool passed = true;
};

/// |a - b| / max(1e-8, |a| + |b|)
double grad_rel_error(double analytic, double numeric);
/// Op group of a parameter name, e.g. "blocks.0.attn.Wq" -> "attention".
std::string param_group(const std::string& name);

GradCheckReport finite_diff_check(const ParamStore& store, const DiffLoss& loss, const GradCheckOptions& options = {});

/// One seeded end-to-end check of tlam_merge -> forward_generate -> l2_loss on
/// a sparsified synthetic scene restricted to the first `labels` labels.
struct GradCheckCase {
  std::size_t labels = 3;
  std::size_t d = 8;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t size = 4;
  std::size_t gen_hidden = 16;
  double sparsity = 0.3;
  std::uint64_t seed = 0;
};

std::string describe(const GradCheckCase& c);

/// Tape gradients of the case's loss; finite differences use the direct
/// (tape-free) forward, so the two sides share no code path beyond the kernels.
GradCheckReport gradcheck_case(const GradCheckCase& c, const GradCheckOptions& options = {});

/// "small": the single N=3, d=8, l=2, h=2, 4x4 case. "full": the acceptance
/// sweep over N in {1,3,5}, d in {8,16}, l in {1,2}.
std::vector<GradCheckCase> gradcheck_preset(const std::string& name, std::uint64_t seed);

// ---- Adam ------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  /// One update of every parameter named in grads.
  void step(ParamStore& params, const ParamStore& grads);

  std::uint64_t steps() const { return t_; }
  const std::vector<double>& first_moment(const std::string& name) const { return m_.at(name); }
  const std::vector<double>& second_moment(const std::string& name) const { return v_.at(name); }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// ---- toy training ----------------------------------------------------------

enum class TrainMode { l2, adversarial };

struct TrainConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t regions = 4;
  std::uint64_t seed = 42;
  std::size_t iters = 500;
  double sparsity = 0.5;
  TrainMode mode = TrainMode::l2;
  std::size_t d = 16;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t gen_hidden = 64;
  std::size_t disc_hidden = 64;
  double lr_l2 = 3e-3;      // l2 mode
  double lr_g = 1e-4;       // adversarial mode, generator side
  double lr_d = 4e-4;       // adversarial mode, discriminator
  double l2_weight = 10.0;  // stabiliser in adversarial mode
  bool cosine_decay = true; // anneal every lr to lr_floor * lr over the run
  double lr_floor = 0.1;
  std::size_t batch = 4;    // independent mask draws per iteration
  std::size_t eval_draws = 16;
};

nlohmann::json to_json(const TrainConfig& c);

struct TrainReport {
  TrainConfig config;
  std::vector<double> loss;    // per-iteration L2 training loss
  std::vector<double> d_loss;  // adversarial mode only
  std::vector<double> g_loss;  // adversarial mode only
  double initial_loss = 0.0;   // first iteration
  double final_loss = 0.0;     // mean over the trailing window
  std::map<std::string, double> eval;                // "s0.0" ... "s0.7"
  std::map<std::string, double> per_label_ablation;  // label -> eval loss with it removed
  bool diverged = false;  // loss or a parameter left the finite f32 range
  std::size_t diverged_at = 0;
  ParamStore params;  // final merger + head parameters
  MergerParams merger;
  Tensor concept_tensor;  // final dense concept tensor (H x W x d, f64)

  nlohmann::json to_json() const;
};

inline constexpr double kEvalSparsities[] = {0.0, 0.3, 0.5, 0.7};

TrainReport train_toy(const TrainConfig& config);

/// L2 eval of a trained store on `scene` averaged over `draws` sparsity
/// masks seeded from `seed`.
double evaluate_l2(const ParamStore& store, const MergerConfig& merger, const SynthScene& scene, double sparsity,
                   std::size_t draws, std::uint64_t seed);

}  // namespace tlam
