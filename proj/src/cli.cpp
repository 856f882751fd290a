#include "tlam/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "CLI11.hpp"

#include "tlam/errors.hpp"
#include "tlam/fusion.hpp"
#include "tlam/labels.hpp"
#include "tlam/metrics.hpp"
#include "tlam/parallel.hpp"
#include "tlam/rng.hpp"
#include "tlam/tensor_io.hpp"
#include "tlam/train.hpp"

namespace fs = std::filesystem;

namespace tlam {
namespace {

struct Size2 {
  std::size_t h = 0, w = 0;
};

Size2 parse_size(const std::string& s) {
  const auto x = s.find_first_of("xX");
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    Size2 out{std::stoul(s.substr(0, x), &used), std::stoul(s.substr(x + 1))};
    if (out.h == 0 || out.w == 0) throw std::invalid_argument(s);
    return out;
  } catch (const std::logic_error&) {
    throw ValidationError("size must look like HxW with positive integers, got \"" + s + "\"");
  }
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw IoError(std::string(what) + " directory not found: " + p.string());
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " file not found: " + p.string());
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  ensure_parent(path);
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
  auto p = out;
  p.replace_extension();
  return p.string() + suffix;
}

// Fully present random labels, 3 channels each.
LabelSet random_labels(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  LabelSet s;
  s.height = h;
  s.width = w;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<float> v(h * w * 3);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    s.labels.push_back(LabelMap::dense("label" + std::to_string(k), LabelKind::continuous,
                                       Tensor::from<float>({h, w, 3}, std::move(v))));
  }
  return s;
}

struct Globals {
  std::uint64_t seed = 42;
  unsigned threads = 0;
};

// ---- subcommands -----------------------------------------------------------

struct MergeArgs {
  std::string manifest, params, variant = "tlam", out, precision = "f32";
};

int cmd_merge(const MergeArgs& a, std::ostream& out) {
  require_file(a.manifest, "manifest");
  const auto variant = parse_variant(a.variant);
  if (variant != MergerVariant::naive) {
    if (a.params.empty()) throw ValidationError("--params is required for variant " + a.variant);
    require_dir(a.params, "params");
  }
  const DType precision = a.precision == "f64" ? DType::f64 : DType::f32;
  const auto labels = load_manifest(a.manifest);
  Tensor z;
  MergeStats stats;
  if (variant == MergerVariant::naive) {
    z = naive_concat(labels);
  } else {
    const auto p = load_merger_params(a.params);
    if (p.config.variant != variant) {
      throw ValidationError("params in " + a.params + " are for variant " + variant_name(p.config.variant) +
                            ", not " + a.variant);
    }
    z = merge(labels, p, precision, &stats);
  }
  ensure_parent(a.out);
  const auto bytes = save_tensor(z, a.out);
  out << "variant " << a.variant << " dims " << dims_string(z.dims()) << " bytes " << bytes << "\n";
  out << "attention_macs " << stats.attention_macs << "\n";
  return kExitOk;
}

struct SparsifyArgs {
  std::string manifest, instances, out_manifest;
  double sparsity = 0.5;
};

int cmd_sparsify(const SparsifyArgs& a, const Globals& g, std::ostream& out) {
  require_file(a.manifest, "manifest");
  require_file(a.instances, "instances");
  const auto labels = load_manifest(a.manifest);
  const auto inst = InstanceMap::from_tensor(load_tensor(a.instances));
  if (inst.height != labels.height || inst.width != labels.width) {
    throw ValidationError("instance map " + a.instances + " does not match the label set size");
  }
  const auto masks = generate_sparse_masks(inst, labels, a.sparsity, g.seed);
  const auto sparse = apply_masks(labels, masks);
  ensure_parent(a.out_manifest);
  save_manifest(sparse, a.out_manifest);
  std::size_t present = 0, total = 0;
  for (const auto& l : sparse.labels) {
    for (auto m : l.mask.data<std::uint8_t>()) present += m;
    total += sparse.height * sparse.width;
  }
  out << "wrote " << a.out_manifest << " present_fraction " << std::setprecision(6)
      << static_cast<double>(present) / static_cast<double>(total) << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::string preset = "small";
  double corrupt = 1.0;
};

int cmd_gradcheck(const GradcheckArgs& a, const Globals& g, std::ostream& out) {
  const auto cases = gradcheck_preset(a.preset, g.seed);
  GradCheckOptions opt;
  opt.seed = g.seed;
  opt.corrupt_factor = a.corrupt;
  bool all = true;
  std::map<std::string, double> groups;
  for (const auto& c : cases) {
    const auto r = gradcheck_case(c, opt);
    all = all && r.passed;
    out << (r.passed ? "PASS " : "FAIL ") << describe(c) << " checked " << r.checked << " max_rel "
        << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat;
    if (!r.passed) out << " failures " << r.failures.size() << " worst " << r.worst.param << "[" << r.worst.index << "]";
    out << "\n";
    for (const auto& [k, v] : r.group_max) groups[k] = std::max(groups[k], v);
  }
  out << "group          max_rel_error\n";
  for (const auto& [k, v] : groups) {
    out << std::left << std::setw(15) << k << std::scientific << std::setprecision(3) << v << std::defaultfloat
        << "\n";
  }
  out << (all ? "gradcheck passed" : "gradcheck FAILED") << " (tol " << opt.tol << ")\n";
  return all ? kExitOk : kExitNumerical;
}

struct TrainArgs {
  std::string size = "16x16", mode = "l2", out = "report.json", params_out, ppm;
  std::size_t regions = 4, iters = 500, d = 16, blocks = 2, heads = 2, batch = 4;
  double sparsity = 0.5;
  double lr = 0.0;
};

int cmd_train(const TrainArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  TrainConfig c;
  const auto sz = parse_size(a.size);
  c.height = sz.h;
  c.width = sz.w;
  c.regions = a.regions;
  c.iters = a.iters;
  c.sparsity = a.sparsity;
  c.seed = g.seed;
  c.d = a.d;
  c.depth = a.blocks;
  c.heads = a.heads;
  c.batch = a.batch;
  if (a.mode == "l2") {
    c.mode = TrainMode::l2;
    if (a.lr > 0.0) c.lr_l2 = a.lr;
  } else if (a.mode == "adv") {
    c.mode = TrainMode::adversarial;
    if (a.lr > 0.0) c.lr_g = a.lr;
  } else {
    throw ValidationError("--mode must be l2 or adv");
  }

  const auto report = train_toy(c);
  write_json(report.to_json(), a.out);
  if (report.diverged) {
    err << "training diverged at iteration " << report.diverged_at << " (loss or parameters not finite in f32)\n";
    return kExitNumerical;
  }
  const fs::path params_dir = a.params_out.empty() ? sibling(a.out, "_params") : fs::path(a.params_out);
  save_merger_params(report.merger, params_dir);
  ParamStore heads;
  for (const auto& [name, t] : report.params) {
    if (name.starts_with("gen.") || name.starts_with("disc.")) heads.set(name, t);
  }
  heads.save(params_dir / "heads");
  const fs::path ppm = a.ppm.empty() ? sibling(a.out, "_concept.ppm") : fs::path(a.ppm);
  ensure_parent(ppm);
  if (c.d >= 3) write_ppm(pca_project_3(report.concept_tensor).image, ppm);

  out << "iters " << report.loss.size() << "\n";
  if (!report.loss.empty()) {
    out << "initial_loss " << report.initial_loss << " final_loss " << report.final_loss << " ratio "
        << report.final_loss / report.initial_loss << "\n";
  }
  for (const auto& [k, v] : report.eval) out << "eval " << k << " " << v << "\n";
  for (const auto& [k, v] : report.per_label_ablation) out << "drop " << k << " " << v << "\n";
  out << "report " << a.out << " params " << params_dir.string() << " ppm " << ppm.string() << "\n";
  return kExitOk;
}

struct BenchArgs {
  std::size_t labels = 5, d = 96, blocks = 3, heads = 3, repeat = 3;
  std::string size = "64x64", precision = "f32";
};

int cmd_bench(const BenchArgs& a, const Globals& g, std::ostream& out) {
  const auto sz = parse_size(a.size);
  if (a.repeat == 0) throw ValidationError("--repeat must be >= 1");
  const MergerConfig mc{MergerVariant::tlam, a.d, a.blocks, a.heads};
  const DType precision = a.precision == "f64" ? DType::f64 : DType::f32;
  auto run = [&](std::size_t n, std::size_t h, std::size_t w) {
    const auto s = random_labels(n, h, w, g.seed);
    const auto p = init_merger_params(bindings_of(s), mc, g.seed + 1);
    MergeStats st;
    tlam_merge(s, p, precision, &st);
    return st.attention_macs;
  };

  const auto s = random_labels(a.labels, sz.h, sz.w, g.seed);
  const auto p = init_merger_params(bindings_of(s), mc, g.seed + 1);
  std::vector<double> secs;
  std::uint64_t macs = 0;
  for (std::size_t r = 0; r < a.repeat; ++r) {
    MergeStats st;
    const auto t0 = std::chrono::steady_clock::now();
    tlam_merge(s, p, precision, &st);
    secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    macs = st.attention_macs;
  }
  std::sort(secs.begin(), secs.end());
  const double best = secs.front(), median = secs[secs.size() / 2];
  const std::uint64_t pixels = sz.h * sz.w;
  const auto expected = count_attention_macs(a.labels, a.d, a.heads, a.blocks, pixels);

  const double n_ratio = static_cast<double>(run(2 * a.labels, sz.h, sz.w)) / static_cast<double>(macs);
  const double hw_ratio = static_cast<double>(run(a.labels, 2 * sz.h, sz.w)) / static_cast<double>(macs);

  out << "labels " << a.labels << " size " << sz.h << "x" << sz.w << " d " << a.d << " blocks " << a.blocks
      << " heads " << a.heads << " threads " << num_threads() << "\n";
  out << "time_min_s " << best << " time_median_s " << median << "\n";
  out << "pixels_per_s " << static_cast<double>(pixels) / best << "\n";
  out << "attention_macs " << macs << " expected " << expected << (macs == expected ? " ok" : " MISMATCH") << "\n";
  out << "macs_per_s " << static_cast<double>(macs) / best << "\n";
  out << "mac_ratio_2N " << n_ratio << " (expect 4)\n";
  out << "mac_ratio_2HW " << hw_ratio << " (expect 2)\n";
  return macs == expected && n_ratio == 4.0 && hw_ratio == 2.0 ? kExitOk : kExitNumerical;
}

struct VisualizeArgs {
  std::string concept_path, out, basis_out;
};

int cmd_visualize(const VisualizeArgs& a, std::ostream& out) {
  require_file(a.concept_path, "concept");
  const auto z = load_tensor(a.concept_path);
  const auto proj = pca_project_3(z);
  ensure_parent(a.out);
  const auto bytes = write_ppm(proj.image, fs::path(a.out));
  if (!a.basis_out.empty()) save_pca_basis(proj.basis, a.basis_out);
  out << "wrote " << a.out << " " << z.dim(1) << "x" << z.dim(0) << " bytes " << bytes << " explained_variance";
  for (double v : proj.basis.explained_variance) out << " " << v;
  out << " total " << proj.basis.total_variance << "\n";
  return kExitOk;
}

struct SynthArgs {
  std::string size = "16x16", out_manifest, instances, target;
  std::size_t regions = 4;
};

int cmd_synth(const SynthArgs& a, const Globals& g, std::ostream& out) {
  const auto sz = parse_size(a.size);
  const auto scene = synth_scene(sz.h, sz.w, a.regions, g.seed);
  ensure_parent(a.out_manifest);
  save_manifest(scene.labels, a.out_manifest);
  const fs::path inst = a.instances.empty() ? sibling(a.out_manifest, "_instances.tlt") : fs::path(a.instances);
  ensure_parent(inst);
  save_tensor(scene.instances.to_tensor(), inst);
  const fs::path target = a.target.empty() ? sibling(a.out_manifest, "_target.tlt") : fs::path(a.target);
  save_tensor(scene.target, target);
  out << "wrote " << a.out_manifest << " instances " << inst.string() << " target " << target.string() << "\n";
  return kExitOk;
}

struct InitArgs {
  std::string manifest, variant = "tlam", out;
  std::size_t d = 96, blocks = 3, heads = 3;
};

int cmd_init(const InitArgs& a, const Globals& g, std::ostream& out) {
  require_file(a.manifest, "manifest");
  const auto variant = parse_variant(a.variant);
  if (variant == MergerVariant::naive) throw ValidationError("the naive variant has no parameters");
  const auto labels = load_manifest(a.manifest);
  const auto p = init_merger_params(bindings_of(labels), {variant, a.d, a.blocks, a.heads}, g.seed);
  save_merger_params(p, a.out);
  out << "wrote " << a.out << " (" << to_param_store(p).element_count() << " parameters)\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spatial label fusion: merge, sparsify, train and inspect concept tensors"};
  app.require_subcommand(1);
  app.allow_extras(false);

  Globals g;
  app.add_option("--seed", g.seed, "RNG seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads (0 = all cores, 1 = bit-exact mode)")
      ->capture_default_str();

  MergeArgs ma;
  auto* merge = app.add_subcommand("merge", "merge a label manifest into a concept tensor");
  merge->add_option("--manifest", ma.manifest, "label set manifest (JSON)")->required();
  merge->add_option("--params", ma.params, "merger parameter directory (tlam, clam)");
  merge->add_option("--variant", ma.variant, "tlam | clam | naive")
      ->check(CLI::IsMember({"tlam", "clam", "naive"}))
      ->capture_default_str();
  merge->add_option("--precision", ma.precision, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  merge->add_option("--out", ma.out, "output concept tensor (.tlt)")->required();

  SparsifyArgs sa;
  auto* sparsify = app.add_subcommand("sparsify", "drop labels per region with probability S");
  sparsify->add_option("--manifest", sa.manifest, "input manifest")->required();
  sparsify->add_option("--instances", sa.instances, "instance map (.tlt, u8)")->required();
  sparsify->add_option("--sparsity", sa.sparsity, "drop probability S in [0, 1]")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  sparsify->add_option("--out-manifest", sa.out_manifest, "output manifest")->required();

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the tape gradients");
  gradcheck->add_option("--preset", ga.preset, "small | full")
      ->check(CLI::IsMember({"small", "full"}))
      ->capture_default_str();
  gradcheck->add_option("--corrupt", ga.corrupt, "debug: scale tape gradients by this factor (1.1 must fail)")
      ->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train-toy", "train the fusion pipeline on a synthetic scene");
  train->add_option("--size", ta.size, "scene size HxW")->capture_default_str();
  train->add_option("--regions", ta.regions, "rectangular regions")->capture_default_str();
  train->add_option("--iters", ta.iters, "optimisation steps")->capture_default_str();
  train->add_option("--sparsity", ta.sparsity, "training drop probability")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  train->add_option("--mode", ta.mode, "l2 | adv")->check(CLI::IsMember({"l2", "adv"}))->capture_default_str();
  train->add_option("--d", ta.d, "token width")->capture_default_str();
  train->add_option("--blocks", ta.blocks, "transformer blocks")->capture_default_str();
  train->add_option("--heads", ta.heads, "attention heads")->capture_default_str();
  train->add_option("--batch", ta.batch, "mask draws per step")->capture_default_str();
  train->add_option("--lr", ta.lr, "override the generator-side learning rate");
  train->add_option("--out", ta.out, "report JSON")->capture_default_str();
  train->add_option("--params-out", ta.params_out, "parameter directory (default <out>_params)");
  train->add_option("--ppm", ta.ppm, "PCA visualisation (default <out>_concept.ppm)");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "time tlam_merge and verify the attention MAC counter");
  bench->add_option("--labels", ba.labels, "labels N")->capture_default_str();
  bench->add_option("--size", ba.size, "HxW")->capture_default_str();
  bench->add_option("--d", ba.d, "token width")->capture_default_str();
  bench->add_option("--blocks", ba.blocks, "transformer blocks")->capture_default_str();
  bench->add_option("--heads", ba.heads, "attention heads")->capture_default_str();
  bench->add_option("--repeat", ba.repeat, "timed repetitions")->capture_default_str();
  bench->add_option("--precision", ba.precision, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();

  VisualizeArgs va;
  auto* visualize = app.add_subcommand("visualize", "PCA-project a concept tensor to an RGB PPM");
  visualize->add_option("--concept", va.concept_path, "concept tensor (.tlt)")->required();
  visualize->add_option("--out", va.out, "output .ppm")->required();
  visualize->add_option("--basis-out", va.basis_out, "optional directory for the PCA basis");

  SynthArgs ya;
  auto* synth = app.add_subcommand("synth", "write a synthetic scene manifest, instance map and target");
  synth->add_option("--size", ya.size, "HxW")->capture_default_str();
  synth->add_option("--regions", ya.regions, "rectangular regions (1..16)")->capture_default_str();
  synth->add_option("--out-manifest", ya.out_manifest, "output manifest")->required();
  synth->add_option("--instances", ya.instances, "instance map path (default <manifest>_instances.tlt)");
  synth->add_option("--target", ya.target, "target image path (default <manifest>_target.tlt)");

  InitArgs ia;
  auto* init = app.add_subcommand("init-params", "write freshly initialised merger parameters");
  init->add_option("--manifest", ia.manifest, "label manifest the parameters bind to")->required();
  init->add_option("--variant", ia.variant, "tlam | clam")->check(CLI::IsMember({"tlam", "clam"}))
      ->capture_default_str();
  init->add_option("--d", ia.d, "token width")->capture_default_str();
  init->add_option("--blocks", ia.blocks, "transformer blocks or CLAM layers")->capture_default_str();
  init->add_option("--heads", ia.heads, "attention heads")->capture_default_str();
  init->add_option("--out", ia.out, "output directory")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  try {
    set_num_threads(g.threads);
    if (merge->parsed()) return cmd_merge(ma, out);
    if (sparsify->parsed()) return cmd_sparsify(sa, g, out);
    if (gradcheck->parsed()) return cmd_gradcheck(ga, g, out);
    if (train->parsed()) return cmd_train(ta, g, out, err);
    if (bench->parsed()) return cmd_bench(ba, g, out);
    if (visualize->parsed()) return cmd_visualize(va, out);
    if (synth->parsed()) return cmd_synth(ya, g, out);
    if (init->parsed()) return cmd_init(ia, g, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}

}  // namespace tlam
