#include "tlam/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>

#include "tlam/errors.hpp"
#include "tlam/nn_ops.hpp"
#include "tlam/rng.hpp"

namespace tlam {
namespace {

std::vector<double> xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (auto& v : w) v = rng.uniform(-limit, limit);
  return w;
}

std::size_t pixels_of(const Tensor& t) { return t.dim(0) * t.dim(1); }

void require_image(const Tensor& img, std::size_t h, std::size_t w, const char* what) {
  if (img.rank() != 3 || img.dim(0) != h || img.dim(1) != w || img.dim(2) != 3) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(h) + "x" + std::to_string(w) +
                     "x3 image, got " + dims_string(img.dims()));
  }
}

// Per-pixel two-layer MLP on rows of `in` (P x k); weights input x output.
std::vector<double> mlp_rows(const std::vector<double>& in, std::size_t rows, std::size_t k, const ParamStore& hp,
                             const std::string& prefix) {
  const auto& w1 = hp.get(prefix + ".W1");
  const auto& w2 = hp.get(prefix + ".W2");
  if (w1.rank() != 2 || w1.dim(0) != k) {
    throw ShapeError(prefix + ".W1 expects input width " + std::to_string(k) + ", got " + dims_string(w1.dims()));
  }
  const std::size_t hidden = w1.dim(1);
  if (w2.rank() != 2 || w2.dim(0) != hidden) throw ShapeError(prefix + ".W2 does not match " + prefix + ".W1");
  const std::size_t out = w2.dim(1);
  const auto b1 = hp.get(prefix + ".b1").data<double>();
  const auto b2 = hp.get(prefix + ".b2").data<double>();
  if (b1.size() != hidden || b2.size() != out) throw ShapeError(prefix + " bias widths are inconsistent");

  std::vector<double> h(rows * hidden), y(rows * out);
  nn::detail::matmul(in.data(), w1.data<double>().data(), h.data(), rows, k, hidden);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < hidden; ++c) h[r * hidden + c] = nn::gelu(h[r * hidden + c] + b1[c]);
  }
  nn::detail::matmul(h.data(), w2.data<double>().data(), y.data(), rows, hidden, out);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < out; ++c) y[r * out + c] += b2[c];
  }
  return y;
}

std::vector<double> flat_f64(const Tensor& t) { return t.to_f64(); }

std::string fmt_key(double s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%.1f", s);
  return buf;
}

// Seeds for per-iteration and per-draw masks, decorrelated from the scene seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  Rng r(seed ^ (stream * 0xD1B54A32D192ED03ULL));
  for (std::uint64_t i = 0; i < index % 4; ++i) r.next();
  return r.next() + index * 0x9E3779B97F4A7C15ULL;
}

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kEvalStream = 2;

}  // namespace

ParamStore init_head_params(const HeadConfig& c, std::uint64_t seed) {
  if (c.d == 0 || c.gen_hidden == 0 || c.disc_hidden == 0) throw ValidationError("head widths must be positive");
  Rng rng(seed);
  ParamStore hp;
  hp.set("gen.W1", {c.d, c.gen_hidden}, xavier(rng, c.d, c.gen_hidden));
  hp.set("gen.b1", {c.gen_hidden}, std::vector<double>(c.gen_hidden, 0.0));
  hp.set("gen.W2", {c.gen_hidden, 3}, xavier(rng, c.gen_hidden, 3));
  hp.set("gen.b2", {3}, std::vector<double>(3, 0.0));
  hp.set("disc.W1", {c.d + 3, c.disc_hidden}, xavier(rng, c.d + 3, c.disc_hidden));
  hp.set("disc.b1", {c.disc_hidden}, std::vector<double>(c.disc_hidden, 0.0));
  hp.set("disc.W2", {c.disc_hidden, 1}, xavier(rng, c.disc_hidden, 1));
  hp.set("disc.b2", {1}, std::vector<double>(1, 0.0));
  return hp;
}

std::vector<std::string> generator_param_names() { return {"gen.W1", "gen.W2", "gen.b1", "gen.b2"}; }
std::vector<std::string> discriminator_param_names() { return {"disc.W1", "disc.W2", "disc.b1", "disc.b2"}; }

Tensor forward_generate(const Tensor& concept_z, const ParamStore& heads) {
  if (concept_z.rank() != 3) throw ShapeError("concept_z tensor must be H x W x d");
  const std::size_t p = pixels_of(concept_z), d = concept_z.dim(2);
  auto rgb = mlp_rows(flat_f64(concept_z), p, d, heads, "gen");
  if (rgb.size() != p * 3) throw ShapeError("gen.W2 must have 3 outputs");
  return Tensor::from<double>({concept_z.dim(0), concept_z.dim(1), 3}, std::move(rgb));
}

double discriminator_score(const Tensor& concept_z, const Tensor& image, const ParamStore& heads) {
  if (concept_z.rank() != 3) throw ShapeError("concept_z tensor must be H x W x d");
  require_image(image, concept_z.dim(0), concept_z.dim(1), "discriminator_score");
  const std::size_t p = pixels_of(concept_z), d = concept_z.dim(2);
  const auto z = flat_f64(concept_z), rgb = flat_f64(image);
  std::vector<double> in(p * (d + 3));
  for (std::size_t r = 0; r < p; ++r) {
    std::copy_n(z.data() + r * d, d, in.data() + r * (d + 3));
    std::copy_n(rgb.data() + r * 3, 3, in.data() + r * (d + 3) + d);
  }
  const auto s = mlp_rows(in, p, d + 3, heads, "disc");
  if (s.size() != p) throw ShapeError("disc.W2 must have 1 output");
  double acc = 0.0;
  for (double v : s) acc += v;
  return acc / static_cast<double>(p);
}

double hinge_d_loss(double real_score, double fake_score) {
  return std::max(0.0, 1.0 - real_score) + std::max(0.0, 1.0 + fake_score);
}

double hinge_g_loss(double fake_score) { return -fake_score; }

double l2_loss(const Tensor& image, const Tensor& target) {
  if (image.dims() != target.dims()) {
    throw ShapeError("l2_loss: " + dims_string(image.dims()) + " vs " + dims_string(target.dims()));
  }
  const auto a = flat_f64(image), b = flat_f64(target);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

namespace graph {

ad::Var label_input(ad::Tape& t, const LabelMap& label) {
  const std::size_t p = label.height() * label.width(), c = label.channels();
  const auto v = label.values.data<float>();
  const auto m = label.mask.data<std::uint8_t>();
  std::vector<double> x(p * c, 0.0);
  for (std::size_t r = 0; r < p; ++r) {
    if (!m[r]) continue;
    for (std::size_t i = 0; i < c; ++i) x[r * c + i] = v[r * c + i];
  }
  return t.constant(p, c, std::move(x));
}

ad::Var tlam_merge(ad::Tape& t, const ParamStore& store, const MergerConfig& config,
                   const std::vector<LabelBinding>& labels, const LabelSet& s, std::uint64_t* macs) {
  validate_label_set(s);
  if (s.size() != labels.size()) throw ValidationError("label set does not match parameter bindings");
  std::vector<ad::Var> tokens;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const auto& l = s.labels[k];
    if (l.name != labels[k].name || l.channels() != labels[k].channels) {
      throw ValidationError("label " + std::to_string(k) + " (" + l.name + ") does not match binding " +
                            labels[k].name);
    }
    const std::string pre = "proj." + l.name;
    auto e = ad::gelu(t, ad::add_row(t, ad::matmul_bt(t, label_input(t, l), t.param(pre + ".A", store)),
                                     t.param(pre + ".b", store)));
    tokens.push_back(ad::add_row(t, e, t.param("enc." + l.name, store)));
  }
  const std::size_t n = labels.size();
  auto z = ad::interleave_rows(t, tokens);
  for (std::size_t m = 0; m < config.depth; ++m) {
    const std::string pre = "blocks." + std::to_string(m) + ".";
    auto p = [&](const char* name) { return t.param(pre + name, store); };
    auto normed = ad::layer_norm_rows(t, z, p("ln1.gamma"), p("ln1.beta"), nn::kLayerNormEps);
    auto q = ad::matmul(t, normed, p("attn.Wq"));
    auto k = ad::matmul(t, normed, p("attn.Wk"));
    auto v = ad::matmul(t, normed, p("attn.Wv"));
    auto heads = ad::grouped_attention(t, q, k, v, n, config.heads, macs);
    z = ad::add(t, z, ad::add_row(t, ad::matmul(t, heads, p("attn.Wo")), p("attn.bo")));
    normed = ad::layer_norm_rows(t, z, p("ln2.gamma"), p("ln2.beta"), nn::kLayerNormEps);
    auto hidden = ad::gelu(t, ad::add_row(t, ad::matmul(t, normed, p("mlp.W1")), p("mlp.b1")));
    z = ad::add(t, z, ad::add_row(t, ad::matmul(t, hidden, p("mlp.W2")), p("mlp.b2")));
  }
  return ad::group_mean(t, z, n);
}

ad::Var generate(ad::Tape& t, ad::Var concept_z, const ParamStore& store) {
  auto h = ad::gelu(t, ad::add_row(t, ad::matmul(t, concept_z, t.param("gen.W1", store)), t.param("gen.b1", store)));
  return ad::add_row(t, ad::matmul(t, h, t.param("gen.W2", store)), t.param("gen.b2", store));
}

ad::Var discriminate(ad::Tape& t, ad::Var concept_z, ad::Var image, const ParamStore& store) {
  auto in = ad::concat_cols(t, concept_z, image);
  auto h = ad::gelu(t, ad::add_row(t, ad::matmul(t, in, t.param("disc.W1", store)), t.param("disc.b1", store)));
  auto s = ad::add_row(t, ad::matmul(t, h, t.param("disc.W2", store)), t.param("disc.b2", store));
  return ad::mean_all(t, s);
}

ad::Var hinge_d(ad::Tape& t, ad::Var real_score, ad::Var fake_score) {
  auto real_term = ad::relu(t, ad::add_scalar(t, ad::scale(t, real_score, -1.0), 1.0));
  auto fake_term = ad::relu(t, ad::add_scalar(t, fake_score, 1.0));
  return ad::add(t, real_term, fake_term);
}

ad::Var hinge_g(ad::Tape& t, ad::Var fake_score) { return ad::scale(t, fake_score, -1.0); }

ad::Var image_constant(ad::Tape& t, const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("image must be H x W x c");
  return t.constant(pixels_of(image), image.dim(2), flat_f64(image));
}

}  // namespace graph

double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

std::string param_group(const std::string& name) {
  auto has = [&](const char* s) { return name.find(s) != std::string::npos; };
  if (name.starts_with("proj.")) return "projection";
  if (name.starts_with("enc.")) return "encoding";
  if (name.starts_with("clam.")) return "clam";
  if (name.starts_with("gen.")) return "generator";
  if (name.starts_with("disc.")) return "discriminator";
  if (has(".ln1.") || has(".ln2.")) return "layernorm";
  if (has(".attn.")) return "attention";
  if (has(".mlp.")) return "mlp";
  return "other";
}

GradCheckReport finite_diff_check(const ParamStore& store, const DiffLoss& loss, const GradCheckOptions& o) {
  ParamStore grads;
  loss(store, &grads);

  struct Site {
    std::string name;
    std::size_t index;
  };
  std::vector<Site> sites;
  for (const auto& [name, t] : store) {
    for (std::size_t i = 0; i < t.size(); ++i) sites.push_back({name, i});
  }
  if (sites.size() > o.full_limit && o.sample_size < sites.size()) {
    // Partial Fisher-Yates: a seeded subsample without replacement, then
    // restored to store order.
    Rng rng(o.seed);
    std::vector<std::size_t> idx(sites.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < o.sample_size; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next() % (idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(o.sample_size);
    std::sort(idx.begin(), idx.end());
    std::vector<Site> picked;
    for (auto i : idx) picked.push_back(sites[i]);
    sites = std::move(picked);
  }

  GradCheckReport report;
  ParamStore probe = store;
  for (const auto& site : sites) {
    auto values = probe.get(site.name).data<double>();
    const double orig = values[site.index];
    values[site.index] = orig + o.step;
    const double up = loss(probe, nullptr);
    values[site.index] = orig - o.step;
    const double down = loss(probe, nullptr);
    values[site.index] = orig;

    GradCheckEntry e;
    e.param = site.name;
    e.index = site.index;
    e.analytic = (grads.contains(site.name) ? grads.get(site.name).data<double>()[site.index] : 0.0) *
                 o.corrupt_factor;
    e.numeric = (up - down) / (2.0 * o.step);
    e.rel_error = grad_rel_error(e.analytic, e.numeric);
    if (!std::isfinite(e.rel_error)) e.rel_error = std::numeric_limits<double>::infinity();

    ++report.checked;
    auto& gm = report.group_max[param_group(site.name)];
    gm = std::max(gm, e.rel_error);
    if (report.checked == 1 || e.rel_error > report.max_rel_error) {
      report.max_rel_error = e.rel_error;
      report.worst = e;
    }
    if (!(e.rel_error <= o.tol)) report.failures.push_back(e);
  }
  report.passed = report.failures.empty();
  return report;
}

std::string describe(const GradCheckCase& c) {
  return "N=" + std::to_string(c.labels) + " d=" + std::to_string(c.d) + " l=" + std::to_string(c.depth) +
         " h=" + std::to_string(c.heads) + " " + std::to_string(c.size) + "x" + std::to_string(c.size) +
         " seed=" + std::to_string(c.seed);
}

GradCheckReport gradcheck_case(const GradCheckCase& c, const GradCheckOptions& options) {
  if (c.labels == 0 || c.labels > 5) throw ValidationError("gradcheck cases use 1..5 labels");
  auto scene = synth_scene(c.size, c.size, std::min<std::size_t>(4, c.size * c.size), c.seed);
  scene.labels.labels.resize(c.labels);
  const auto masks = generate_sparse_masks(scene.instances, scene.labels, c.sparsity, c.seed ^ 0x5eedULL);
  const auto input = apply_masks(scene.labels, masks);
  const auto bindings = bindings_of(input);
  const MergerConfig mc{MergerVariant::tlam, c.d, c.depth, c.heads};

  Rng rng(c.seed);
  ParamStore store = to_param_store(init_merger_params(bindings, mc, rng.next()));
  // Non-trivial LayerNorm gains, biases and encodings so every path carries signal.
  for (auto& [name, t] : store) {
    if (name.ends_with("gamma") || name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2") ||
        name.ends_with("bo") || name.ends_with("beta") || name.starts_with("enc.")) {
      for (auto& v : t.data<double>()) v += 0.3 * rng.normal();
    }
  }
  for (const auto& [name, t] : init_head_params({c.d, c.gen_hidden, 1}, rng.next())) {
    if (!name.starts_with("gen.")) continue;
    Tensor v = t;
    if (name.ends_with("b1") || name.ends_with("b2")) {
      for (auto& x : v.data<double>()) x = 0.3 * rng.normal();
    }
    store.set(name, std::move(v));
  }

  const DiffLoss loss = [&](const ParamStore& p, ParamStore* grads) {
    if (grads) {
      ad::Tape t;
      auto z = graph::tlam_merge(t, p, mc, bindings, input);
      auto l = ad::mse(t, graph::generate(t, z, p), graph::image_constant(t, scene.target));
      *grads = t.backward(l);
      return t.scalar(l);
    }
    const auto merger = from_param_store(p, mc, bindings);
    return l2_loss(forward_generate(tlam_merge(input, merger, DType::f64), p), scene.target);
  };
  return finite_diff_check(store, loss, options);
}

std::vector<GradCheckCase> gradcheck_preset(const std::string& name, std::uint64_t seed) {
  if (name == "small") return {GradCheckCase{3, 8, 2, 2, 4, 16, 0.3, seed}};
  if (name == "full") {
    std::vector<GradCheckCase> cases;
    const std::size_t configs[][3] = {{1, 8, 1}, {3, 8, 2}, {5, 8, 1}, {3, 16, 1}, {5, 16, 2}, {1, 16, 2}};
    for (std::size_t i = 0; i < std::size(configs); ++i) {
      cases.push_back({configs[i][0], configs[i][1], configs[i][2], 2, 4, 16, 0.3, seed + i});
    }
    return cases;
  }
  throw ValidationError("unknown gradcheck preset \"" + name + "\" (expected small or full)");
}

void Adam::step(ParamStore& params, const ParamStore& grads) {
  ++t_;
  const auto& c = config_;
  const double t = static_cast<double>(t_);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& [name, g_tensor] : grads) {
    auto theta = params.get(name).data<double>();
    const auto g = g_tensor.data<double>();
    if (g.size() != theta.size()) throw ShapeError("adam: gradient shape differs for " + name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"regions", c.regions},
          {"seed", c.seed},
          {"iters", c.iters},
          {"sparsity", c.sparsity},
          {"mode", c.mode == TrainMode::l2 ? "l2" : "adv"},
          {"d", c.d},
          {"blocks", c.depth},
          {"heads", c.heads},
          {"gen_hidden", c.gen_hidden},
          {"disc_hidden", c.disc_hidden},
          {"lr_l2", c.lr_l2},
          {"lr_g", c.lr_g},
          {"lr_d", c.lr_d},
          {"l2_weight", c.l2_weight},
          {"cosine_decay", c.cosine_decay},
          {"lr_floor", c.lr_floor},
          {"batch", c.batch},
          {"eval_draws", c.eval_draws}};
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json j;
  j["config"] = tlam::to_json(config);
  j["loss"] = loss;
  if (config.mode == TrainMode::adversarial) {
    j["d_loss"] = d_loss;
    j["g_loss"] = g_loss;
  }
  j["initial_loss"] = loss.empty() ? nlohmann::json(nullptr) : nlohmann::json(initial_loss);
  j["final_loss"] = loss.empty() ? nlohmann::json(nullptr) : nlohmann::json(final_loss);
  j["eval"] = eval;
  j["per_label_ablation"] = per_label_ablation;
  j["diverged"] = diverged;
  if (diverged) j["diverged_at"] = diverged_at;
  return j;
}

namespace {

double eval_once(const ParamStore& store, const MergerParams& merger, const LabelSet& s, const Tensor& target) {
  return l2_loss(forward_generate(tlam_merge(s, merger, DType::f64), store), target);
}

}  // namespace

double evaluate_l2(const ParamStore& store, const MergerConfig& config, const SynthScene& scene, double sparsity,
                   std::size_t draws, std::uint64_t seed) {
  const auto merger = from_param_store(store, config, bindings_of(scene.labels));
  if (sparsity == 0.0) return eval_once(store, merger, scene.labels, scene.target);
  double acc = 0.0;
  const std::size_t n = std::max<std::size_t>(1, draws);
  for (std::size_t i = 0; i < n; ++i) {
    const auto masks = generate_sparse_masks(scene.instances, scene.labels, sparsity, derive_seed(seed, kEvalStream, i));
    acc += eval_once(store, merger, apply_masks(scene.labels, masks), scene.target);
  }
  return acc / static_cast<double>(n);
}

namespace {

// Divergence test: values past the f32 range count as non-finite, since the
// exported merger runs in f32 and would produce inf/NaN there.
bool representable(double v) { return std::isfinite(v) && std::abs(v) <= std::numeric_limits<float>::max(); }

bool representable(const ParamStore& store) {
  for (const auto& [_, t] : store) {
    for (double v : t.data<double>()) {
      if (!representable(v)) return false;
    }
  }
  return true;
}

}  // namespace

TrainReport train_toy(const TrainConfig& c) {
  if (c.height == 0 || c.width == 0) throw ValidationError("scene size must be positive");
  if (c.regions == 0) throw ValidationError("regions must be positive");
  if (!(c.sparsity >= 0.0 && c.sparsity <= 1.0)) throw ValidationError("sparsity must lie in [0, 1]");
  if (c.heads == 0 || c.d % c.heads != 0) throw ValidationError("d must be divisible by heads");

  TrainReport report;
  report.config = c;
  const auto scene = synth_scene(c.height, c.width, c.regions, c.seed);
  const auto bindings = bindings_of(scene.labels);
  const MergerConfig mc{MergerVariant::tlam, c.d, c.depth, c.heads};

  Rng init(c.seed);
  const std::uint64_t merger_seed = init.next();
  const std::uint64_t head_seed = init.next();
  ParamStore params = to_param_store(init_merger_params(bindings, mc, merger_seed));
  for (const auto& [name, t] : init_head_params({c.d, c.gen_hidden, c.disc_hidden}, head_seed)) params.set(name, t);

  auto is_disc = [](const std::string& name) { return name.starts_with("disc."); };
  auto without = [&](const ParamStore& grads, bool keep_disc) {
    ParamStore out;
    for (const auto& [name, t] : grads) {
      if (is_disc(name) == keep_disc) out.set(name, t);
    }
    return out;
  };

  const bool adv = c.mode == TrainMode::adversarial;
  const std::size_t batch = std::max<std::size_t>(1, c.batch);
  Adam opt_g({adv ? c.lr_g : c.lr_l2, 0.0, 0.999, 1e-8});
  Adam opt_d({c.lr_d, 0.0, 0.999, 1e-8});

  for (std::size_t it = 0; it < c.iters; ++it) {
    if (c.cosine_decay) {
      const double frac = static_cast<double>(it) / static_cast<double>(c.iters);
      const double f = c.lr_floor + (1.0 - c.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
      opt_g.set_lr((adv ? c.lr_g : c.lr_l2) * f);
      opt_d.set_lr(c.lr_d * f);
    }
    std::vector<LabelSet> inputs;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto masks = generate_sparse_masks(scene.instances, scene.labels, c.sparsity,
                                               derive_seed(c.seed, kTrainStream, it * batch + b));
      inputs.push_back(apply_masks(scene.labels, masks));
    }
    const double inv_batch = 1.0 / static_cast<double>(batch);

    if (adv) {
      // Discriminator step on detached concepts and fake images.
      ad::Tape td;
      std::optional<ad::Var> d_loss;
      for (const auto& input : inputs) {
        auto z = graph::tlam_merge(td, params, mc, bindings, input);
        auto fake = graph::generate(td, z, params);
        auto zc = td.constant(td.rows(z), td.cols(z), {td.value(z).begin(), td.value(z).end()});
        auto fc = td.constant(td.rows(fake), td.cols(fake), {td.value(fake).begin(), td.value(fake).end()});
        auto term = graph::hinge_d(td, graph::discriminate(td, zc, graph::image_constant(td, scene.target), params),
                                   graph::discriminate(td, zc, fc, params));
        d_loss = d_loss ? ad::add(td, *d_loss, term) : term;
      }
      const auto mean_d = ad::scale(td, *d_loss, inv_batch);
      report.d_loss.push_back(td.scalar(mean_d));
      opt_d.step(params, without(td.backward(mean_d), true));
    }

    ad::Tape t;
    const auto target = graph::image_constant(t, scene.target);
    std::optional<ad::Var> l2_sum, g_sum;
    for (const auto& input : inputs) {
      auto z = graph::tlam_merge(t, params, mc, bindings, input);
      auto img = graph::generate(t, z, params);
      auto term = ad::mse(t, img, target);
      l2_sum = l2_sum ? ad::add(t, *l2_sum, term) : term;
      if (adv) {
        auto g = graph::hinge_g(t, graph::discriminate(t, z, img, params));
        g_sum = g_sum ? ad::add(t, *g_sum, g) : g;
      }
    }
    const auto l2 = ad::scale(t, *l2_sum, inv_batch);
    ad::Var objective = l2;
    if (adv) {
      const auto g_loss = ad::scale(t, *g_sum, inv_batch);
      report.g_loss.push_back(t.scalar(g_loss));
      objective = ad::add(t, g_loss, ad::scale(t, l2, c.l2_weight));
    }
    const double loss = t.scalar(l2);
    report.loss.push_back(loss);
    if (!representable(loss) || !representable(t.scalar(objective))) {
      report.diverged = true;
      report.diverged_at = it;
      break;
    }
    opt_g.step(params, without(t.backward(objective), false));
    if (!representable(params)) {
      report.diverged = true;
      report.diverged_at = it;
      break;
    }
  }

  if (!report.loss.empty()) {
    report.initial_loss = report.loss.front();
    const std::size_t window = std::min<std::size_t>(20, report.loss.size());
    double acc = 0.0;
    for (std::size_t i = report.loss.size() - window; i < report.loss.size(); ++i) acc += report.loss[i];
    report.final_loss = acc / static_cast<double>(window);
  }

  report.params = params;
  report.merger = from_param_store(params, mc, bindings);
  if (report.diverged) return report;

  for (double s : kEvalSparsities) {
    report.eval[fmt_key(s)] = evaluate_l2(params, mc, scene, s, c.eval_draws, c.seed);
  }
  for (std::size_t k = 0; k < scene.labels.size(); ++k) {
    const auto ablated = apply_masks(scene.labels, drop_label_masks(scene.labels, k));
    report.per_label_ablation[scene.labels.labels[k].name] = eval_once(params, report.merger, ablated, scene.target);
  }
  report.concept_tensor = tlam_merge(scene.labels, report.merger, DType::f64);
  return report;
}

}  // namespace tlam
