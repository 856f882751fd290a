#pragma once

// Forward kernels of the pixel-wise label transformer. Everything here works
// on one pixel's N x d token matrix; the differentiable versions used for
// training live in autodiff.hpp and share these definitions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "tlam/errors.hpp"

namespace tlam::nn {

inline constexpr double kLayerNormEps = 1e-5;

/// tanh approximation of GeLU.
template <class T>
T gelu(T x) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T c = static_cast<T>(0.044715);
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::tanh(k * (x + c * x * x * x)));
}

/// d/dx of the tanh approximation (not of the exact erf GeLU).
template <class T>
T gelu_derivative(T x) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T c = static_cast<T>(0.044715);
  const T t = std::tanh(k * (x + c * x * x * x));
  const T dt = (static_cast<T>(1) - t * t) * k * (static_cast<T>(1) + static_cast<T>(3) * c * x * x);
  return static_cast<T>(0.5) * (static_cast<T>(1) + t) + static_cast<T>(0.5) * x * dt;
}

/// N x d tokens of one pixel, row-major.
template <class T>
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  TokenMatrix() = default;
  TokenMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T{}) {}
  TokenMatrix(std::size_t r, std::size_t c, std::vector<T> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("token matrix data length mismatch");
  }

  T& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

template <class T>
struct LayerNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
};

/// Query/key/value maps are stored as d x d matrices (input x output) whose
/// column block [j*d_h, (j+1)*d_h) is the d x d_h map of head j.
template <class T>
struct AttentionParams {
  std::size_t heads = 1;
  std::vector<T> wq, wk, wv;
  std::vector<T> wo;  // d x d
  std::vector<T> bo;  // d
};

/// One transformer block; MLP weights are input x output (w1: d x 4d, w2: 4d x d).
template <class T>
struct BlockParams {
  std::size_t d = 0;
  LayerNormParams<T> ln1, ln2;
  AttentionParams<T> attn;
  std::vector<T> w1, b1, w2, b2;

  std::size_t hidden() const { return 4 * d; }

  template <class U>
  BlockParams<U> cast() const {
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    BlockParams<U> out;
    out.d = d;
    out.ln1 = {conv(ln1.gamma), conv(ln1.beta)};
    out.ln2 = {conv(ln2.gamma), conv(ln2.beta)};
    out.attn.heads = attn.heads;
    out.attn.wq = conv(attn.wq);
    out.attn.wk = conv(attn.wk);
    out.attn.wv = conv(attn.wv);
    out.attn.wo = conv(attn.wo);
    out.attn.bo = conv(attn.bo);
    out.w1 = conv(w1);
    out.b1 = conv(b1);
    out.w2 = conv(w2);
    out.b2 = conv(b2);
    return out;
  }

  void check() const {
    const auto dd = d * d;
    if (d == 0 || attn.heads == 0 || d % attn.heads != 0) throw ShapeError("block width must be divisible by heads");
    if (ln1.gamma.size() != d || ln1.beta.size() != d || ln2.gamma.size() != d || ln2.beta.size() != d ||
        attn.wq.size() != dd || attn.wk.size() != dd || attn.wv.size() != dd || attn.wo.size() != dd ||
        attn.bo.size() != d || w1.size() != d * hidden() || b1.size() != hidden() ||
        w2.size() != hidden() * d || b2.size() != d) {
      throw ShapeError("block parameter widths inconsistent with d=" + std::to_string(d));
    }
  }
};

/// out = A x + b with A stored d x C (output x input).
template <class T>
void linear(std::span<const T> x, std::span<const T> a, std::span<const T> b, std::span<T> out) {
  const std::size_t d = out.size(), c = x.size();
  if (a.size() != d * c || b.size() != d) throw ShapeError("linear: shape mismatch");
  for (std::size_t o = 0; o < d; ++o) {
    T acc = T{};
    const T* row = a.data() + o * c;
    for (std::size_t i = 0; i < c; ++i) acc += row[i] * x[i];
    out[o] = acc + b[o];
  }
}

template <class T>
std::vector<T> linear(const std::vector<T>& x, const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<T> out(b.size());
  linear<T>(x, a, b, out);
  return out;
}

/// Biased-variance layer normalisation of a single token.
template <class T>
void layer_norm(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta, T eps,
                std::span<T> out) {
  const std::size_t d = x.size();
  if (gamma.size() != d || beta.size() != d || out.size() != d) throw ShapeError("layer_norm: shape mismatch");
  T mean = T{};
  for (auto v : x) mean += v;
  mean /= static_cast<T>(d);
  T var = T{};
  for (auto v : x) var += (v - mean) * (v - mean);
  var /= static_cast<T>(d);
  const T inv = static_cast<T>(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < d; ++i) out[i] = gamma[i] * ((x[i] - mean) * inv) + beta[i];
}

template <class T>
std::vector<T> layer_norm(const std::vector<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                          T eps = static_cast<T>(kLayerNormEps)) {
  std::vector<T> out(x.size());
  layer_norm<T>(x, gamma, beta, eps, out);
  return out;
}

/// Max-shifted softmax; in and out may alias.
template <class T>
void softmax(std::span<const T> in, std::span<T> out) {
  if (in.empty() || in.size() != out.size()) throw ShapeError("softmax: shape mismatch");
  const T mx = *std::max_element(in.begin(), in.end());
  T sum = T{};
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
}

template <class T>
std::vector<T> softmax(const std::vector<T>& v) {
  std::vector<T> out(v.size());
  softmax<T>(v, out);
  return out;
}

template <class T>
TokenMatrix<T> layer_norm_rows(const TokenMatrix<T>& z, const LayerNormParams<T>& p,
                               T eps = static_cast<T>(kLayerNormEps)) {
  TokenMatrix<T> out(z.rows, z.cols);
  for (std::size_t r = 0; r < z.rows; ++r) layer_norm<T>(z.row(r), p.gamma, p.beta, eps, out.row(r));
  return out;
}

namespace detail {

// y (rows x m) = x (rows x k) * w (k x m)
template <class T>
void matmul(const T* x, const T* w, T* y, std::size_t rows, std::size_t k, std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y + r * m;
    std::fill(yr, yr + m, T{});
    const T* xr = x + r * k;
    for (std::size_t i = 0; i < k; ++i) {
      const T xv = xr[i];
      const T* wi = w + i * m;
      for (std::size_t c = 0; c < m; ++c) yr[c] += xv * wi[c];
    }
  }
}

}  // namespace detail

/// Scratch buffers reused across pixels by the fused merge loop.
template <class T>
struct BlockScratch {
  std::vector<T> normed, q, k, v, heads, scores, hidden, out;

  void reserve(std::size_t n, std::size_t d) {
    normed.resize(n * d);
    q.resize(n * d);
    k.resize(n * d);
    v.resize(n * d);
    heads.resize(n * d);
    scores.resize(n);
    hidden.resize(n * 4 * d);
    out.resize(n * d);
  }
};

/// Multi-head self-attention over tokens (n x d) into out (n x d), using
/// s.q/s.k/s.v/s.heads/s.scores. Adds the exact QK^T and AV multiply-
/// accumulate count (2 * n^2 * d_h per head) to *macs when given.
template <class T>
void attention_into(const T* tokens, std::size_t n, std::size_t d, const AttentionParams<T>& p, T* out,
                    BlockScratch<T>& s, std::uint64_t* macs) {
  const std::size_t h = p.heads;
  const std::size_t dh = d / h;
  const T scale = static_cast<T>(1) / std::sqrt(static_cast<T>(dh));
  detail::matmul(tokens, p.wq.data(), s.q.data(), n, d, d);
  detail::matmul(tokens, p.wk.data(), s.k.data(), n, d, d);
  detail::matmul(tokens, p.wv.data(), s.v.data(), n, d, d);
  std::uint64_t counted = 0;
  for (std::size_t j = 0; j < h; ++j) {
    const std::size_t c0 = j * dh;
    for (std::size_t a = 0; a < n; ++a) {
      const T* qa = s.q.data() + a * d + c0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* kb = s.k.data() + b * d + c0;
        T dot = T{};
        for (std::size_t c = 0; c < dh; ++c) dot += qa[c] * kb[c];
        s.scores[b] = dot * scale;
      }
      counted += n * dh;
      softmax<T>(std::span<const T>(s.scores.data(), n), std::span<T>(s.scores.data(), n));
      T* ha = s.heads.data() + a * d + c0;
      std::fill(ha, ha + dh, T{});
      for (std::size_t b = 0; b < n; ++b) {
        const T wgt = s.scores[b];
        const T* vb = s.v.data() + b * d + c0;
        for (std::size_t c = 0; c < dh; ++c) ha[c] += wgt * vb[c];
      }
      counted += n * dh;
    }
  }
  detail::matmul(s.heads.data(), p.wo.data(), out, n, d, d);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t c = 0; c < d; ++c) out[a * d + c] += p.bo[c];
  }
  if (macs) *macs += counted;
}

/// In-place transformer block on an n x d token buffer:
/// Z <- MSA(LN1(Z)) + Z, then Z <- MLP(LN2(Z)) + Z.
template <class T>
void transformer_block_inplace(T* tokens, std::size_t n, const BlockParams<T>& p, BlockScratch<T>& s,
                               std::uint64_t* macs) {
  const std::size_t d = p.d, f = p.hidden();
  const T eps = static_cast<T>(kLayerNormEps);
  for (std::size_t a = 0; a < n; ++a) {
    layer_norm<T>(std::span<const T>(tokens + a * d, d), p.ln1.gamma, p.ln1.beta, eps,
                  std::span<T>(s.normed.data() + a * d, d));
  }
  attention_into(s.normed.data(), n, d, p.attn, s.out.data(), s, macs);
  for (std::size_t i = 0; i < n * d; ++i) tokens[i] += s.out[i];

  for (std::size_t a = 0; a < n; ++a) {
    layer_norm<T>(std::span<const T>(tokens + a * d, d), p.ln2.gamma, p.ln2.beta, eps,
                  std::span<T>(s.normed.data() + a * d, d));
  }
  detail::matmul(s.normed.data(), p.w1.data(), s.hidden.data(), n, d, f);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t c = 0; c < f; ++c) s.hidden[a * f + c] = gelu(s.hidden[a * f + c] + p.b1[c]);
  }
  detail::matmul(s.hidden.data(), p.w2.data(), s.out.data(), n, f, d);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t c = 0; c < d; ++c) tokens[a * d + c] += s.out[a * d + c] + p.b2[c];
  }
}

template <class T>
TokenMatrix<T> multi_head_self_attention(const TokenMatrix<T>& z, const AttentionParams<T>& p,
                                         std::uint64_t* macs = nullptr) {
  const std::size_t d = z.cols;
  if (z.rows == 0 || d == 0) throw ShapeError("attention needs N >= 1 and d >= 1");
  if (p.heads == 0 || d % p.heads != 0) throw ShapeError("attention: d must be divisible by heads");
  if (p.wq.size() != d * d || p.wk.size() != d * d || p.wv.size() != d * d || p.wo.size() != d * d ||
      p.bo.size() != d) {
    throw ShapeError("attention: parameter shapes do not match d=" + std::to_string(d));
  }
  BlockScratch<T> s;
  s.reserve(z.rows, d);
  TokenMatrix<T> out(z.rows, d);
  attention_into(z.data.data(), z.rows, d, p, out.data.data(), s, macs);
  return out;
}

template <class T>
TokenMatrix<T> msa_block(const TokenMatrix<T>& z, const BlockParams<T>& p, std::uint64_t* macs = nullptr) {
  p.check();
  if (z.cols != p.d) throw ShapeError("msa_block: token width does not match block width");
  auto out = multi_head_self_attention(layer_norm_rows(z, p.ln1), p.attn, macs);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += z.data[i];
  return out;
}

template <class T>
TokenMatrix<T> mlp_block(const TokenMatrix<T>& z, const BlockParams<T>& p) {
  p.check();
  if (z.cols != p.d) throw ShapeError("mlp_block: token width does not match block width");
  const std::size_t d = p.d, f = p.hidden();
  const auto normed = layer_norm_rows(z, p.ln2);
  std::vector<T> hidden(z.rows * f);
  detail::matmul(normed.data.data(), p.w1.data(), hidden.data(), z.rows, d, f);
  for (std::size_t a = 0; a < z.rows; ++a) {
    for (std::size_t c = 0; c < f; ++c) hidden[a * f + c] = gelu(hidden[a * f + c] + p.b1[c]);
  }
  TokenMatrix<T> out(z.rows, d);
  detail::matmul(hidden.data(), p.w2.data(), out.data.data(), z.rows, f, d);
  for (std::size_t a = 0; a < z.rows; ++a) {
    for (std::size_t c = 0; c < d; ++c) out.at(a, c) = z.at(a, c) + (out.at(a, c) + p.b2[c]);
  }
  return out;
}

template <class T>
TokenMatrix<T> transformer_block(const TokenMatrix<T>& z, const BlockParams<T>& p, std::uint64_t* macs = nullptr) {
  return mlp_block(msa_block(z, p, macs), p);
}

}  // namespace tlam::nn
