#include "tlam/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "tlam/nn_ops.hpp"
#include "tlam/parallel.hpp"

namespace tlam::ad {
namespace {

constexpr std::size_t kRowChunk = 256;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// Sum of per-chunk partials (each `width` wide) in ascending chunk order.
std::vector<double> chunked_sum(std::size_t n, std::size_t width,
                                const std::function<void(std::size_t, std::size_t, double*)>& fn) {
  const std::size_t chunks = chunk_count(n, kRowChunk);
  std::vector<double> partials(chunks * width, 0.0);
  parallel_chunks(n, kRowChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
    fn(b, e, partials.data() + c * width);
  });
  std::vector<double> out(width, 0.0);
  for (std::size_t c = 0; c < chunks; ++c) {
    for (std::size_t i = 0; i < width; ++i) out[i] += partials[c * width + i];
  }
  return out;
}

void accumulate(std::vector<double>& into, const std::vector<double>& from) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

}  // namespace

Var Tape::param(const std::string& name, const Tensor& value) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var{it->second};
  if (value.rank() > 2) throw ShapeError("parameter \"" + name + "\" must have rank 1 or 2");
  const std::size_t rows = value.rank() == 2 ? value.dim(0) : 1;
  const std::size_t cols = value.rank() == 2 ? value.dim(1) : value.dim(0);
  auto data = value.data<double>();
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value.assign(data.begin(), data.end());
  n.param = name;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  param_ids_[name] = nodes_.size() - 1;
  param_dims_[name] = value.dims();
  return Var{nodes_.size() - 1};
}

Var Tape::constant(std::size_t rows, std::size_t cols, std::vector<double> value) {
  require(value.size() == rows * cols, "constant: data length does not match shape");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(std::size_t rows, std::size_t cols, std::vector<double> value, std::vector<std::size_t> inputs,
                 BackwardFn backward) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_.at(i).requires_grad;
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

double Tape::scalar(Var v) const {
  const auto& n = node(v);
  if (n.rows != 1 || n.cols != 1) throw ContractError("node is not a scalar");
  return n.value[0];
}

std::vector<double>& Tape::grad(std::size_t id) {
  auto& n = nodes_.at(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

ParamStore Tape::backward(Var loss) {
  const auto& root = node(loss);
  if (root.rows != 1 || root.cols != 1) {
    throw ContractError("backward needs a 1 x 1 loss node, got " + std::to_string(root.rows) + " x " +
                        std::to_string(root.cols));
  }
  for (auto& n : nodes_) n.grad.clear();
  grad(loss.id)[0] = 1.0;
  backward_visits_ = 0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    ++backward_visits_;
    auto& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
  ParamStore grads;
  for (const auto& [name, id] : param_ids_) {
    auto& n = nodes_[id];
    std::vector<double> g = n.grad.empty() ? std::vector<double>(n.value.size(), 0.0) : n.grad;
    grads.set(name, param_dims_[name], std::move(g));
  }
  return grads;
}

Var matmul(Tape& t, Var x, Var w) {
  const std::size_t m = t.rows(x), k = t.cols(x), n = t.cols(w);
  require(t.rows(w) == k, "matmul: inner dimensions differ");
  std::vector<double> y(m * n);
  const double* xv = t.value(x).data();
  const double* wv = t.value(w).data();
  parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t b, std::size_t e) {
    nn::detail::matmul(xv + b * k, wv, y.data() + b * n, e - b, k, n);
  });
  return t.record(m, n, std::move(y), {x.id, w.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    const auto& X = tp.node(x.id).value;
    const auto& W = tp.node(w.id).value;
    if (tp.node(x.id).requires_grad) {
      auto& dx = tp.grad(x.id);
      parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t r = b; r < e; ++r) {
          for (std::size_t i = 0; i < k; ++i) {
            double acc = 0.0;
            for (std::size_t c = 0; c < n; ++c) acc += dy[r * n + c] * W[i * n + c];
            dx[r * k + i] += acc;
          }
        }
      });
    }
    if (tp.node(w.id).requires_grad) {
      accumulate(tp.grad(w.id), chunked_sum(m, k * n, [&](std::size_t b, std::size_t e, double* part) {
        for (std::size_t r = b; r < e; ++r) {
          for (std::size_t i = 0; i < k; ++i) {
            const double xv_ = X[r * k + i];
            for (std::size_t c = 0; c < n; ++c) part[i * n + c] += xv_ * dy[r * n + c];
          }
        }
      }));
    }
  });
}

Var matmul_bt(Tape& t, Var x, Var a) {
  const std::size_t m = t.rows(x), k = t.cols(x), n = t.rows(a);
  require(t.cols(a) == k, "matmul_bt: inner dimensions differ");
  std::vector<double> y(m * n);
  const auto X = t.value(x);
  const auto A = t.value(a);
  parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t r = b; r < e; ++r) {
      for (std::size_t o = 0; o < n; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i) acc += A[o * k + i] * X[r * k + i];
        y[r * n + o] = acc;
      }
    }
  });
  return t.record(m, n, std::move(y), {x.id, a.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    const auto& Xv = tp.node(x.id).value;
    const auto& Av = tp.node(a.id).value;
    if (tp.node(x.id).requires_grad) {
      auto& dx = tp.grad(x.id);
      parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t r = b; r < e; ++r) {
          for (std::size_t o = 0; o < n; ++o) {
            const double g = dy[r * n + o];
            for (std::size_t i = 0; i < k; ++i) dx[r * k + i] += g * Av[o * k + i];
          }
        }
      });
    }
    if (tp.node(a.id).requires_grad) {
      accumulate(tp.grad(a.id), chunked_sum(m, n * k, [&](std::size_t b, std::size_t e, double* part) {
        for (std::size_t r = b; r < e; ++r) {
          for (std::size_t o = 0; o < n; ++o) {
            const double g = dy[r * n + o];
            for (std::size_t i = 0; i < k; ++i) part[o * k + i] += g * Xv[r * k + i];
          }
        }
      }));
    }
  });
}

namespace {

Var add_scaled(Tape& t, Var a, Var b, double sign) {
  require(t.rows(a) == t.rows(b) && t.cols(a) == t.cols(b), "add: shapes differ");
  const auto av = t.value(a), bv = t.value(b);
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sign > 0 ? av[i] + bv[i] : av[i] - bv[i];
  return t.record(t.rows(a), t.cols(a), std::move(y), {a.id, b.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    if (tp.node(a.id).requires_grad) accumulate(tp.grad(a.id), dy);
    if (tp.node(b.id).requires_grad) {
      auto& db = tp.grad(b.id);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += sign * dy[i];
    }
  });
}

}  // namespace

Var add(Tape& t, Var a, Var b) { return add_scaled(t, a, b, 1.0); }
Var sub(Tape& t, Var a, Var b) { return add_scaled(t, a, b, -1.0); }

Var add_row(Tape& t, Var x, Var bias) {
  const std::size_t m = t.rows(x), n = t.cols(x);
  require(t.rows(bias) == 1 && t.cols(bias) == n, "add_row: bias width differs");
  const auto xv = t.value(x), bv = t.value(bias);
  std::vector<double> y(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] = xv[r * n + c] + bv[c];
  }
  return t.record(m, n, std::move(y), {x.id, bias.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    if (tp.node(x.id).requires_grad) accumulate(tp.grad(x.id), dy);
    if (tp.node(bias.id).requires_grad) {
      accumulate(tp.grad(bias.id), chunked_sum(m, n, [&](std::size_t b, std::size_t e, double* part) {
        for (std::size_t r = b; r < e; ++r) {
          for (std::size_t c = 0; c < n; ++c) part[c] += dy[r * n + c];
        }
      }));
    }
  });
}

Var scale(Tape& t, Var x, double s) {
  const auto xv = t.value(x);
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = s * xv[i];
  return t.record(t.rows(x), t.cols(x), std::move(y), {x.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    auto& dx = tp.grad(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * dy[i];
  });
}

Var add_scalar(Tape& t, Var x, double c) {
  const auto xv = t.value(x);
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + c;
  return t.record(t.rows(x), t.cols(x), std::move(y), {x.id}, [=](Tape& tp, std::size_t self) {
    accumulate(tp.grad(x.id), tp.node(self).grad);
  });
}

Var gelu(Tape& t, Var x) {
  const auto xv = t.value(x);
  std::vector<double> y(xv.size());
  parallel_chunks(y.size(), kRowChunk * 16, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) y[i] = nn::gelu(xv[i]);
  });
  return t.record(t.rows(x), t.cols(x), std::move(y), {x.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    const auto& X = tp.node(x.id).value;
    auto& dx = tp.grad(x.id);
    parallel_chunks(dx.size(), kRowChunk * 16, [&](std::size_t, std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) dx[i] += dy[i] * nn::gelu_derivative(X[i]);
    });
  });
}

Var relu(Tape& t, Var x) {
  const auto xv = t.value(x);
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return t.record(t.rows(x), t.cols(x), std::move(y), {x.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    const auto& X = tp.node(x.id).value;
    auto& dx = tp.grad(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += X[i] > 0.0 ? dy[i] : 0.0;
  });
}

Var layer_norm_rows(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const std::size_t m = t.rows(x), d = t.cols(x);
  require(t.rows(gamma) == 1 && t.cols(gamma) == d && t.rows(beta) == 1 && t.cols(beta) == d,
          "layer_norm_rows: gamma/beta width differs");
  const auto xv = t.value(x), gv = t.value(gamma), bv = t.value(beta);
  std::vector<double> y(m * d);
  parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t r = b; r < e; ++r) {
      nn::layer_norm<double>(xv.subspan(r * d, d), gv, bv, eps, std::span<double>(y.data() + r * d, d));
    }
  });
  return t.record(m, d, std::move(y), {x.id, gamma.id, beta.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    const auto& X = tp.node(x.id).value;
    const auto& G = tp.node(gamma.id).value;
    // Row statistics are recomputed; xhat is needed by every gradient.
    std::vector<double> xhat(m * d), inv(m);
    parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t b, std::size_t e) {
      for (std::size_t r = b; r < e; ++r) {
        const double* xr = X.data() + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<double>(d);
        inv[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) xhat[r * d + i] = (xr[i] - mean) * inv[r];
      }
    });
    if (tp.node(x.id).requires_grad) {
      auto& dx = tp.grad(x.id);
      parallel_chunks(m, kRowChunk, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t r = b; r < e; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            const double g = dy[r * d + i] * G[i];
            mean_g += g;
            mean_gx += g * xhat[r * d + i];
          }
          mean_g /= static_cast<double>(d);
          mean_gx /= static_cast<double>(d);
          for (std::size_t i = 0; i < d; ++i) {
            const double g = dy[r * d + i] * G[i];
            dx[r * d + i] += inv[r] * (g - mean_g - xhat[r * d + i] * mean_gx);
          }
        }
      });
    }
    if (tp.node(gamma.id).requires_grad) {
      accumulate(tp.grad(gamma.id), chunked_sum(m, d, [&](std::size_t b, std::size_t e, double* part) {
        for (std::size_t r = b; r < e; ++r) {
          for (std::size_t i = 0; i < d; ++i) part[i] += dy[r * d + i] * xhat[r * d + i];
        }
      }));
    }
    if (tp.node(beta.id).requires_grad) {
      accumulate(tp.grad(beta.id), chunked_sum(m, d, [&](std::size_t b, std::size_t e, double* part) {
        for (std::size_t r = b; r < e; ++r) {
          for (std::size_t i = 0; i < d; ++i) part[i] += dy[r * d + i];
        }
      }));
    }
  });
}

Var softmax_rows(Tape& t, Var x) {
  const std::size_t m = t.rows(x), n = t.cols(x);
  const auto xv = t.value(x);
  std::vector<double> y(m * n);
  for (std::size_t r = 0; r < m; ++r) nn::softmax<double>(xv.subspan(r * n, n), std::span<double>(y.data() + r * n, n));
  return t.record(m, n, std::move(y), {x.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    const auto& Y = tp.node(self).value;
    auto& dx = tp.grad(x.id);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += dy[r * n + c] * Y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += Y[r * n + c] * (dy[r * n + c] - dot);
    }
  });
}

Var grouped_attention(Tape& t, Var q, Var k, Var v, std::size_t group, std::size_t heads, std::uint64_t* macs) {
  const std::size_t rows = t.rows(q), d = t.cols(q);
  require(group >= 1 && rows % group == 0, "grouped_attention: rows not a multiple of group");
  require(heads >= 1 && d % heads == 0, "grouped_attention: d not divisible by heads");
  require(t.rows(k) == rows && t.rows(v) == rows && t.cols(k) == d && t.cols(v) == d,
          "grouped_attention: q/k/v shapes differ");
  const std::size_t groups = rows / group, n = group, dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Q = t.value(q), K = t.value(k), V = t.value(v);
  auto probs = std::make_shared<std::vector<double>>(groups * heads * n * n);
  std::vector<double> y(rows * d, 0.0);
  const std::size_t group_chunk = std::max<std::size_t>(1, kRowChunk / n);
  std::vector<std::uint64_t> chunk_macs(chunk_count(groups, group_chunk), 0);

  parallel_chunks(groups, group_chunk, [&](std::size_t chunk, std::size_t gb, std::size_t ge) {
    std::uint64_t counted = 0;
    for (std::size_t g = gb; g < ge; ++g) {
      const std::size_t r0 = g * n;
      for (std::size_t j = 0; j < heads; ++j) {
        const std::size_t c0 = j * dh;
        double* P = probs->data() + (g * heads + j) * n * n;
        for (std::size_t a = 0; a < n; ++a) {
          const double* qa = Q.data() + (r0 + a) * d + c0;
          double* pa = P + a * n;
          for (std::size_t b = 0; b < n; ++b) {
            const double* kb = K.data() + (r0 + b) * d + c0;
            double dot = 0.0;
            for (std::size_t c = 0; c < dh; ++c) dot += qa[c] * kb[c];
            pa[b] = dot * scl;
          }
          counted += n * dh;
          nn::softmax<double>(std::span<const double>(pa, n), std::span<double>(pa, n));
          double* ya = y.data() + (r0 + a) * d + c0;
          for (std::size_t b = 0; b < n; ++b) {
            const double wgt = pa[b];
            const double* vb = V.data() + (r0 + b) * d + c0;
            for (std::size_t c = 0; c < dh; ++c) ya[c] += wgt * vb[c];
          }
          counted += n * dh;
        }
      }
    }
    chunk_macs[chunk] = counted;
  });
  if (macs) {
    for (auto c : chunk_macs) *macs += c;
  }

  return t.record(rows, d, std::move(y), {q.id, k.id, v.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    const auto& Qv = tp.node(q.id).value;
    const auto& Kv = tp.node(k.id).value;
    const auto& Vv = tp.node(v.id).value;
    auto& dq = tp.grad(q.id);
    auto& dk = tp.grad(k.id);
    auto& dv = tp.grad(v.id);
    parallel_chunks(groups, group_chunk, [&](std::size_t, std::size_t gb, std::size_t ge) {
      std::vector<double> dp(n), ds(n * n);
      for (std::size_t g = gb; g < ge; ++g) {
        const std::size_t r0 = g * n;
        for (std::size_t j = 0; j < heads; ++j) {
          const std::size_t c0 = j * dh;
          const double* P = probs->data() + (g * heads + j) * n * n;
          for (std::size_t a = 0; a < n; ++a) {
            const double* dya = dy.data() + (r0 + a) * d + c0;
            const double* pa = P + a * n;
            double row_dot = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
              const double* vb = Vv.data() + (r0 + b) * d + c0;
              double acc = 0.0;
              for (std::size_t c = 0; c < dh; ++c) acc += dya[c] * vb[c];
              dp[b] = acc;
              row_dot += pa[b] * acc;
              double* dvb = dv.data() + (r0 + b) * d + c0;
              for (std::size_t c = 0; c < dh; ++c) dvb[c] += pa[b] * dya[c];
            }
            for (std::size_t b = 0; b < n; ++b) ds[a * n + b] = pa[b] * (dp[b] - row_dot) * scl;
          }
          for (std::size_t a = 0; a < n; ++a) {
            double* dqa = dq.data() + (r0 + a) * d + c0;
            const double* qa = Qv.data() + (r0 + a) * d + c0;
            for (std::size_t b = 0; b < n; ++b) {
              const double s = ds[a * n + b];
              const double* kb = Kv.data() + (r0 + b) * d + c0;
              double* dkb = dk.data() + (r0 + b) * d + c0;
              for (std::size_t c = 0; c < dh; ++c) {
                dqa[c] += s * kb[c];
                dkb[c] += s * qa[c];
              }
            }
          }
        }
      }
    });
  });
}

Var group_mean(Tape& t, Var x, std::size_t group) {
  const std::size_t rows = t.rows(x), d = t.cols(x);
  require(group >= 1 && rows % group == 0, "group_mean: rows not a multiple of group");
  const std::size_t groups = rows / group;
  const auto xv = t.value(x);
  std::vector<double> y(groups * d);
  const double n = static_cast<double>(group);
  for (std::size_t g = 0; g < groups; ++g) {
    const double* base = xv.data() + g * group * d;
    for (std::size_t c = 0; c < d; ++c) {
      double acc = base[c];
      for (std::size_t k = 1; k < group; ++k) acc += base[k * d + c];
      y[g * d + c] = acc / n;
    }
  }
  return t.record(groups, d, std::move(y), {x.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    auto& dx = tp.grad(x.id);
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t k = 0; k < group; ++k) {
        for (std::size_t c = 0; c < d; ++c) dx[(g * group + k) * d + c] += dy[g * d + c] / n;
      }
    }
  });
}

Var interleave_rows(Tape& t, const std::vector<Var>& parts) {
  require(!parts.empty(), "interleave_rows: no parts");
  const std::size_t p = t.rows(parts[0]), d = t.cols(parts[0]), n = parts.size();
  std::vector<std::size_t> ids;
  for (auto part : parts) {
    require(t.rows(part) == p && t.cols(part) == d, "interleave_rows: part shapes differ");
    ids.push_back(part.id);
  }
  std::vector<double> y(p * n * d);
  for (std::size_t k = 0; k < n; ++k) {
    const auto src = t.value(parts[k]);
    for (std::size_t r = 0; r < p; ++r) std::copy_n(src.data() + r * d, d, y.data() + (r * n + k) * d);
  }
  return t.record(p * n, d, std::move(y), ids, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    for (std::size_t k = 0; k < n; ++k) {
      if (!tp.node(ids[k]).requires_grad) continue;
      auto& dx = tp.grad(ids[k]);
      for (std::size_t r = 0; r < p; ++r) {
        for (std::size_t c = 0; c < d; ++c) dx[r * d + c] += dy[(r * n + k) * d + c];
      }
    }
  });
}

Var concat_cols(Tape& t, Var a, Var b) {
  const std::size_t m = t.rows(a), na = t.cols(a), nb = t.cols(b);
  require(t.rows(b) == m, "concat_cols: row counts differ");
  const auto av = t.value(a), bv = t.value(b);
  std::vector<double> y(m * (na + nb));
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(av.data() + r * na, na, y.data() + r * (na + nb));
    std::copy_n(bv.data() + r * nb, nb, y.data() + r * (na + nb) + na);
  }
  return t.record(m, na + nb, std::move(y), {a.id, b.id}, [=](Tape& tp, std::size_t self) {
    const auto& dy = tp.node(self).grad;
    if (tp.node(a.id).requires_grad) {
      auto& da = tp.grad(a.id);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < na; ++c) da[r * na + c] += dy[r * (na + nb) + c];
      }
    }
    if (tp.node(b.id).requires_grad) {
      auto& db = tp.grad(b.id);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < nb; ++c) db[r * nb + c] += dy[r * (na + nb) + na + c];
      }
    }
  });
}

Var sum_all(Tape& t, Var x) {
  double acc = 0.0;
  for (double v : t.value(x)) acc += v;
  return t.record(1, 1, {acc}, {x.id}, [=](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0];
    for (auto& v : tp.grad(x.id)) v += g;
  });
}

Var mean_all(Tape& t, Var x) {
  const double n = static_cast<double>(t.value(x).size());
  double acc = 0.0;
  for (double v : t.value(x)) acc += v;
  return t.record(1, 1, {acc / n}, {x.id}, [=](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0] / n;
    for (auto& v : tp.grad(x.id)) v += g;
  });
}

Var mse(Tape& t, Var a, Var b) {
  require(t.rows(a) == t.rows(b) && t.cols(a) == t.cols(b), "mse: shapes differ");
  const auto av = t.value(a), bv = t.value(b);
  const double n = static_cast<double>(av.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  return t.record(1, 1, {acc / n}, {a.id, b.id}, [=](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0] * 2.0 / n;
    const auto& A = tp.node(a.id).value;
    const auto& B = tp.node(b.id).value;
    if (tp.node(a.id).requires_grad) {
      auto& da = tp.grad(a.id);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g * (A[i] - B[i]);
    }
    if (tp.node(b.id).requires_grad) {
      auto& db = tp.grad(b.id);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g * (A[i] - B[i]);
    }
  });
}

}  // namespace tlam::ad
