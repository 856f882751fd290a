#include "tlam/fusion.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

#include "tlam/parallel.hpp"
#include "tlam/rng.hpp"

namespace tlam {
namespace {

constexpr std::size_t kPixelChunk = 64;

void xavier(std::vector<double>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w) v = rng.uniform(-bound, bound);
}

template <class T>
std::vector<T> convert(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

template <class T>
struct ProjectionT {
  std::vector<T> a, b, encoding;
  std::size_t channels;
};

template <class T>
std::vector<ProjectionT<T>> cast_projections(const MergerParams& p) {
  std::vector<ProjectionT<T>> out;
  for (std::size_t k = 0; k < p.labels.size(); ++k) {
    const auto& src = p.projections[k];
    out.push_back({convert<T>(src.a), convert<T>(src.b), convert<T>(src.encoding), p.labels[k].channels});
  }
  return out;
}

/// Per-pixel view of the label inputs: converted, masked values.
template <class T>
struct PixelInputs {
  std::vector<std::span<const float>> values;
  std::vector<std::span<const std::uint8_t>> masks;
  std::vector<std::size_t> channels;
  std::size_t max_channels = 0;

  explicit PixelInputs(const LabelSet& s) {
    for (const auto& l : s.labels) {
      values.push_back(l.values.data<float>());
      masks.push_back(l.mask.data<std::uint8_t>());
      channels.push_back(l.channels());
      max_channels = std::max(max_channels, l.channels());
    }
  }

  // Projects every label of pixel `px` into tokens (N x d).
  void project(std::size_t px, const std::vector<ProjectionT<T>>& proj, std::size_t d, T* tokens,
               std::vector<T>& x, std::vector<T>& zero) const {
    for (std::size_t k = 0; k < values.size(); ++k) {
      const std::size_t c = channels[k];
      const float* src = values[k].data() + px * c;
      for (std::size_t i = 0; i < c; ++i) x[i] = static_cast<T>(src[i]);
      project_label<T>(std::span<const T>(x.data(), c), masks[k][px] != 0, proj[k].a, proj[k].b,
                       std::span<T>(tokens + k * d, d), std::span<T>(zero.data(), c));
    }
  }
};

template <class T>
void average_tokens(const T* tokens, std::size_t n, std::size_t d, T* out) {
  for (std::size_t c = 0; c < d; ++c) {
    T acc = tokens[c];
    for (std::size_t k = 1; k < n; ++k) acc += tokens[k * d + c];
    out[c] = acc / static_cast<T>(n);
  }
}

template <class T>
Tensor tlam_merge_impl(const LabelSet& s, const MergerParams& p, MergeStats* stats) {
  const std::size_t n = s.size(), d = p.d(), pixels = s.height * s.width;
  const auto proj = cast_projections<T>(p);
  std::vector<nn::BlockParams<T>> blocks;
  for (const auto& b : p.blocks) blocks.push_back(b.template cast<T>());
  const PixelInputs<T> inputs(s);

  Tensor out({s.height, s.width, d}, dtype_of<T>());
  auto z = out.data<T>();
  std::vector<std::uint64_t> chunk_macs(chunk_count(pixels, kPixelChunk), 0);

  parallel_chunks(pixels, kPixelChunk, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    nn::BlockScratch<T> scratch;
    scratch.reserve(n, d);
    std::vector<T> tokens(n * d), x(inputs.max_channels), zero(inputs.max_channels);
    std::uint64_t macs = 0;
    for (std::size_t px = begin; px < end; ++px) {
      inputs.project(px, proj, d, tokens.data(), x, zero);
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t c = 0; c < d; ++c) tokens[k * d + c] += proj[k].encoding[c];
      }
      for (const auto& block : blocks) nn::transformer_block_inplace(tokens.data(), n, block, scratch, &macs);
      average_tokens(tokens.data(), n, d, z.data() + px * d);
    }
    chunk_macs[chunk] = macs;
  });

  if (stats) {
    for (auto m : chunk_macs) stats->attention_macs += m;
  }
  return out;
}

template <class T>
Tensor clam_merge_impl(const LabelSet& s, const MergerParams& p) {
  const std::size_t n = s.size(), d = p.d(), pixels = s.height * s.width;
  const auto proj = cast_projections<T>(p);
  std::vector<std::vector<std::pair<std::vector<T>, std::vector<T>>>> layers(n);
  for (std::size_t k = 0; k < n; ++k) {
    for (const auto& layer : p.clam[k]) layers[k].emplace_back(convert<T>(layer.a), convert<T>(layer.b));
  }
  const PixelInputs<T> inputs(s);

  Tensor out({s.height, s.width, d}, dtype_of<T>());
  auto z = out.data<T>();
  parallel_chunks(pixels, kPixelChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<T> tokens(n * d), x(inputs.max_channels), zero(inputs.max_channels), tmp(d);
    for (std::size_t px = begin; px < end; ++px) {
      inputs.project(px, proj, d, tokens.data(), x, zero);
      for (std::size_t k = 0; k < n; ++k) {
        std::span<T> v(tokens.data() + k * d, d);
        for (const auto& [a, b] : layers[k]) {
          nn::linear<T>(std::span<const T>(v.data(), d), a, b, tmp);
          for (std::size_t c = 0; c < d; ++c) v[c] = nn::gelu(tmp[c]);
        }
      }
      average_tokens(tokens.data(), n, d, z.data() + px * d);
    }
  });
  return out;
}

std::string block_prefix(std::size_t m) { return "blocks." + std::to_string(m) + "."; }

}  // namespace

const char* variant_name(MergerVariant v) {
  switch (v) {
    case MergerVariant::tlam: return "tlam";
    case MergerVariant::clam: return "clam";
    case MergerVariant::naive: return "naive";
  }
  return "?";
}

MergerVariant parse_variant(const std::string& s) {
  if (s == "tlam") return MergerVariant::tlam;
  if (s == "clam") return MergerVariant::clam;
  if (s == "naive") return MergerVariant::naive;
  throw ValidationError("unknown merger variant \"" + s + "\" (expected tlam|clam|naive)");
}

std::vector<LabelBinding> bindings_of(const LabelSet& s) {
  std::vector<LabelBinding> out;
  for (const auto& l : s.labels) out.push_back({l.name, l.channels()});
  return out;
}

void MergerParams::check() const {
  if (config.variant == MergerVariant::naive) return;
  const std::size_t d = config.d;
  if (d == 0) throw ShapeError("merger width d must be >= 1");
  if (projections.size() != labels.size()) throw ShapeError("one projection per label required");
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const auto& pr = projections[k];
    if (pr.a.size() != d * labels[k].channels || pr.b.size() != d || pr.encoding.size() != d) {
      throw ShapeError("projection of label \"" + labels[k].name + "\" has inconsistent widths");
    }
  }
  if (config.variant == MergerVariant::tlam) {
    if (config.heads == 0 || d % config.heads != 0) throw ShapeError("d must be divisible by heads");
    if (blocks.size() != config.depth) throw ShapeError("block count does not match depth");
    for (const auto& b : blocks) {
      b.check();
      if (b.d != d) throw ShapeError("block width does not match d");
    }
  } else {
    if (clam.size() != labels.size()) throw ShapeError("one CLAM stack per label required");
    for (const auto& stack : clam) {
      if (stack.size() != config.depth) throw ShapeError("CLAM stack depth does not match depth");
      for (const auto& layer : stack) {
        if (layer.a.size() != d * d || layer.b.size() != d) throw ShapeError("CLAM layer widths inconsistent");
      }
    }
  }
}

MergerParams init_merger_params(const std::vector<LabelBinding>& labels, const MergerConfig& config,
                                std::uint64_t seed) {
  MergerParams p;
  p.config = config;
  p.labels = labels;
  if (config.variant == MergerVariant::naive) return p;
  if (config.d == 0) throw ShapeError("merger width d must be >= 1");
  if (config.variant == MergerVariant::tlam && (config.heads == 0 || config.d % config.heads != 0)) {
    throw ShapeError("d=" + std::to_string(config.d) + " is not divisible by heads=" + std::to_string(config.heads));
  }
  const std::size_t d = config.d;
  Rng rng(seed);
  for (const auto& l : labels) {
    if (l.channels == 0) throw ShapeError("label \"" + l.name + "\" has zero channels");
    LabelProjection pr{std::vector<double>(d * l.channels), std::vector<double>(d, 0.0), std::vector<double>(d)};
    xavier(pr.a, l.channels, d, rng);
    for (auto& v : pr.encoding) v = 0.02 * rng.normal();
    p.projections.push_back(std::move(pr));
  }
  if (config.variant == MergerVariant::tlam) {
    for (std::size_t m = 0; m < config.depth; ++m) {
      nn::BlockParams<double> b;
      b.d = d;
      b.ln1 = {std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)};
      b.ln2 = b.ln1;
      b.attn.heads = config.heads;
      for (auto* w : {&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo}) {
        w->resize(d * d);
        xavier(*w, d, d, rng);
      }
      b.attn.bo.assign(d, 0.0);
      b.w1.resize(d * 4 * d);
      xavier(b.w1, d, 4 * d, rng);
      b.b1.assign(4 * d, 0.0);
      b.w2.resize(4 * d * d);
      xavier(b.w2, 4 * d, d, rng);
      b.b2.assign(d, 0.0);
      p.blocks.push_back(std::move(b));
    }
  } else {
    p.clam.resize(labels.size());
    for (auto& stack : p.clam) {
      for (std::size_t m = 0; m < config.depth; ++m) {
        ClamLayer layer{std::vector<double>(d * d), std::vector<double>(d, 0.0)};
        xavier(layer.a, d, d, rng);
        stack.push_back(std::move(layer));
      }
    }
  }
  return p;
}

void check_binding(const MergerParams& p, const LabelSet& s) {
  validate_label_set(s);
  if (p.config.variant == MergerVariant::naive) return;
  if (p.labels.size() != s.size()) {
    throw ValidationError("parameters bind " + std::to_string(p.labels.size()) + " labels, label set has " +
                          std::to_string(s.size()));
  }
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (p.labels[k].name != s.labels[k].name) {
      throw ValidationError("label \"" + s.labels[k].name + "\" is not bound at position " + std::to_string(k) +
                            " (parameters expect \"" + p.labels[k].name + "\")");
    }
    if (p.labels[k].channels != s.labels[k].channels()) {
      throw ValidationError("label \"" + s.labels[k].name + "\" has " + std::to_string(s.labels[k].channels()) +
                            " channels, parameters expect " + std::to_string(p.labels[k].channels));
    }
  }
  p.check();
}

std::vector<double> project_label(const std::vector<double>& x, bool present, const std::vector<double>& a,
                                  const std::vector<double>& b) {
  std::vector<double> out(b.size()), zero(x.size());
  project_label<double>(x, present, a, b, out, zero);
  return out;
}

Tensor tlam_merge(const LabelSet& s, const MergerParams& p, DType precision, MergeStats* stats) {
  if (p.config.variant != MergerVariant::tlam) throw ValidationError("tlam_merge needs TLAM parameters");
  check_binding(p, s);
  switch (precision) {
    case DType::f32: return tlam_merge_impl<float>(s, p, stats);
    case DType::f64: return tlam_merge_impl<double>(s, p, stats);
    default: throw ShapeError("merge precision must be f32 or f64");
  }
}

Tensor clam_merge(const LabelSet& s, const MergerParams& p, DType precision) {
  if (p.config.variant != MergerVariant::clam) throw ValidationError("clam_merge needs CLAM parameters");
  check_binding(p, s);
  switch (precision) {
    case DType::f32: return clam_merge_impl<float>(s, p);
    case DType::f64: return clam_merge_impl<double>(s, p);
    default: throw ShapeError("merge precision must be f32 or f64");
  }
}

Tensor naive_concat(const LabelSet& s) {
  validate_label_set(s);
  std::size_t total = 0;
  for (const auto& l : s.labels) total += l.channels();
  Tensor out({s.height, s.width, total}, DType::f32);
  auto z = out.data<float>();
  std::size_t offset = 0;
  for (const auto& l : s.labels) {
    const auto c = l.channels();
    auto v = l.values.data<float>();
    auto m = l.mask.data<std::uint8_t>();
    for (std::size_t px = 0; px < s.height * s.width; ++px) {
      for (std::size_t i = 0; i < c; ++i) z[px * total + offset + i] = m[px] ? v[px * c + i] : 0.0f;
    }
    offset += c;
  }
  return out;
}

Tensor merge(const LabelSet& s, const MergerParams& p, DType precision, MergeStats* stats) {
  switch (p.config.variant) {
    case MergerVariant::tlam: return tlam_merge(s, p, precision, stats);
    case MergerVariant::clam: return clam_merge(s, p, precision);
    case MergerVariant::naive: return naive_concat(s);
  }
  throw ValidationError("unknown variant");
}

std::uint64_t count_attention_macs(std::uint64_t n_labels, std::uint64_t d, std::uint64_t heads,
                                   std::uint64_t blocks, std::uint64_t pixels) {
  if (heads == 0 || d % heads != 0) throw ShapeError("d must be divisible by heads");
  return pixels * blocks * heads * (2 * n_labels * n_labels * (d / heads));
}

std::vector<std::string> param_names(const MergerConfig& config, const std::vector<LabelBinding>& labels) {
  std::vector<std::string> names;
  if (config.variant == MergerVariant::naive) return names;
  for (const auto& l : labels) {
    names.push_back("proj." + l.name + ".A");
    names.push_back("proj." + l.name + ".b");
    names.push_back("enc." + l.name);
  }
  if (config.variant == MergerVariant::tlam) {
    for (std::size_t m = 0; m < config.depth; ++m) {
      const auto pre = block_prefix(m);
      for (const char* n : {"ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta", "attn.Wq", "attn.Wk", "attn.Wv",
                            "attn.Wo", "attn.bo", "mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2"}) {
        names.push_back(pre + n);
      }
    }
  } else {
    for (const auto& l : labels) {
      for (std::size_t m = 0; m < config.depth; ++m) {
        names.push_back("clam." + l.name + "." + std::to_string(m) + ".A");
        names.push_back("clam." + l.name + "." + std::to_string(m) + ".b");
      }
    }
  }
  return names;
}

ParamStore to_param_store(const MergerParams& p) {
  p.check();
  ParamStore store;
  const std::size_t d = p.d();
  if (p.config.variant == MergerVariant::naive) return store;
  for (std::size_t k = 0; k < p.labels.size(); ++k) {
    const auto& l = p.labels[k];
    const auto& pr = p.projections[k];
    store.set("proj." + l.name + ".A", {d, l.channels}, pr.a);
    store.set("proj." + l.name + ".b", {d}, pr.b);
    store.set("enc." + l.name, {d}, pr.encoding);
  }
  for (std::size_t m = 0; m < p.blocks.size(); ++m) {
    const auto& b = p.blocks[m];
    const auto pre = block_prefix(m);
    store.set(pre + "ln1.gamma", {d}, b.ln1.gamma);
    store.set(pre + "ln1.beta", {d}, b.ln1.beta);
    store.set(pre + "ln2.gamma", {d}, b.ln2.gamma);
    store.set(pre + "ln2.beta", {d}, b.ln2.beta);
    store.set(pre + "attn.Wq", {d, d}, b.attn.wq);
    store.set(pre + "attn.Wk", {d, d}, b.attn.wk);
    store.set(pre + "attn.Wv", {d, d}, b.attn.wv);
    store.set(pre + "attn.Wo", {d, d}, b.attn.wo);
    store.set(pre + "attn.bo", {d}, b.attn.bo);
    store.set(pre + "mlp.W1", {d, 4 * d}, b.w1);
    store.set(pre + "mlp.b1", {4 * d}, b.b1);
    store.set(pre + "mlp.W2", {4 * d, d}, b.w2);
    store.set(pre + "mlp.b2", {d}, b.b2);
  }
  for (std::size_t k = 0; k < p.clam.size(); ++k) {
    for (std::size_t m = 0; m < p.clam[k].size(); ++m) {
      const auto pre = "clam." + p.labels[k].name + "." + std::to_string(m) + ".";
      store.set(pre + "A", {d, d}, p.clam[k][m].a);
      store.set(pre + "b", {d}, p.clam[k][m].b);
    }
  }
  return store;
}

MergerParams from_param_store(const ParamStore& store, const MergerConfig& config,
                              const std::vector<LabelBinding>& labels) {
  MergerParams p;
  p.config = config;
  p.labels = labels;
  if (config.variant == MergerVariant::naive) return p;
  const std::size_t d = config.d;
  auto get = [&](const std::string& name, const Dims& dims) {
    const auto& t = store.get(name);
    if (t.dims() != dims) {
      throw ShapeError("parameter \"" + name + "\" has dims " + dims_string(t.dims()) + ", expected " +
                       dims_string(dims));
    }
    return store.values(name);
  };
  for (const auto& l : labels) {
    p.projections.push_back({get("proj." + l.name + ".A", {d, l.channels}), get("proj." + l.name + ".b", {d}),
                             get("enc." + l.name, {d})});
  }
  if (config.variant == MergerVariant::tlam) {
    for (std::size_t m = 0; m < config.depth; ++m) {
      const auto pre = block_prefix(m);
      nn::BlockParams<double> b;
      b.d = d;
      b.ln1 = {get(pre + "ln1.gamma", {d}), get(pre + "ln1.beta", {d})};
      b.ln2 = {get(pre + "ln2.gamma", {d}), get(pre + "ln2.beta", {d})};
      b.attn.heads = config.heads;
      b.attn.wq = get(pre + "attn.Wq", {d, d});
      b.attn.wk = get(pre + "attn.Wk", {d, d});
      b.attn.wv = get(pre + "attn.Wv", {d, d});
      b.attn.wo = get(pre + "attn.Wo", {d, d});
      b.attn.bo = get(pre + "attn.bo", {d});
      b.w1 = get(pre + "mlp.W1", {d, 4 * d});
      b.b1 = get(pre + "mlp.b1", {4 * d});
      b.w2 = get(pre + "mlp.W2", {4 * d, d});
      b.b2 = get(pre + "mlp.b2", {d});
      p.blocks.push_back(std::move(b));
    }
  } else {
    for (const auto& l : labels) {
      std::vector<ClamLayer> stack;
      for (std::size_t m = 0; m < config.depth; ++m) {
        const auto pre = "clam." + l.name + "." + std::to_string(m) + ".";
        stack.push_back({get(pre + "A", {d, d}), get(pre + "b", {d})});
      }
      p.clam.push_back(std::move(stack));
    }
  }
  p.check();
  return p;
}

void save_merger_params(const MergerParams& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  to_param_store(p).save(dir);
  nlohmann::json doc;
  doc["variant"] = variant_name(p.config.variant);
  doc["d"] = p.config.d;
  doc["depth"] = p.config.depth;
  doc["heads"] = p.config.heads;
  doc["labels"] = nlohmann::json::array();
  for (const auto& l : p.labels) doc["labels"].push_back({{"name", l.name}, {"channels", l.channels}});
  doc["tensors"] = param_names(p.config, p.labels);
  std::ofstream out(dir / "params.json");
  if (!out) throw IoError("cannot write " + (dir / "params.json").string());
  out << doc.dump(2) << '\n';
}

MergerParams load_merger_params(const std::filesystem::path& dir) {
  const auto meta = dir / "params.json";
  if (!std::filesystem::is_directory(dir)) throw IoError("parameter directory " + dir.string() + " does not exist");
  std::ifstream in(meta);
  if (!in) throw IoError("cannot open " + meta.string());
  MergerConfig config;
  std::vector<LabelBinding> labels;
  try {
    const auto doc = nlohmann::json::parse(in);
    config.variant = parse_variant(doc.at("variant").get<std::string>());
    config.d = doc.at("d").get<std::size_t>();
    config.depth = doc.at("depth").get<std::size_t>();
    config.heads = doc.at("heads").get<std::size_t>();
    for (const auto& l : doc.at("labels")) {
      labels.push_back({l.at("name").get<std::string>(), l.at("channels").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  }
  const auto store = ParamStore::load(dir, param_names(config, labels));
  return from_param_store(store, config, labels);
}

}  // namespace tlam
