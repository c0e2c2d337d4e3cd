#include "treeformer/nn/functional.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace treeformer::nn {

namespace {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

Tensor make_out(const Shape& shape, bool track) {
  Tensor t = Tensor::zeros(shape);
  if (track) t.set_requires_grad(true);
  return t;
}

void check(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape mismatch");
  bool track = want_grad({&a, &b});
  Tensor out = make_out(a.shape(), track);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (track)
    Tape::record([a = a, b = b, out = out]() mutable {
      const float* g = out.grad();
      if (a.requires_grad()) {
        float* ga = a.grad();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        float* gb = b.grad();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] += g[i];
      }
    });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  bool track = want_grad({&a, &b});
  Tensor out = make_out(a.shape(), track);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (track)
    Tape::record([a = a, b = b, out = out]() mutable {
      const float* g = out.grad();
      if (a.requires_grad()) {
        float* ga = a.grad();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        float* gb = b.grad();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] += g[i] * a.data()[i];
      }
    });
  return out;
}

Tensor scale(const Tensor& a, float s) {
  bool track = want_grad({&a});
  Tensor out = make_out(a.shape(), track);
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
  if (track)
    Tape::record([a = a, out = out, s]() mutable {
      const float* g = out.grad();
      float* ga = a.grad();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i] * s;
    });
  return out;
}

Tensor relu(const Tensor& x) {
  bool track = want_grad({&x});
  Tensor out = make_out(x.shape(), track);
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > 0.f ? x.data()[i] : 0.f;
  if (track)
    Tape::record([x = x, out = out]() mutable {
      const float* g = out.grad();
      float* gx = x.grad();
      for (int64_t i = 0; i < x.numel(); ++i)
        if (x.data()[i] > 0.f) gx[i] += g[i];
    });
  return out;
}

Tensor gelu(const Tensor& x) {
  bool track = want_grad({&x});
  Tensor out = make_out(x.shape(), track);
  constexpr float kInvSqrt2 = 0.70710678f;
  for (int64_t i = 0; i < x.numel(); ++i) {
    float v = x.data()[i];
    out.data()[i] = 0.5f * v * (1.f + std::erf(v * kInvSqrt2));
  }
  if (track)
    Tape::record([x = x, out = out]() mutable {
      constexpr float kInvSqrt2pi = 0.3989423f;
      const float* g = out.grad();
      float* gx = x.grad();
      for (int64_t i = 0; i < x.numel(); ++i) {
        float v = x.data()[i];
        float cdf = 0.5f * (1.f + std::erf(v * 0.70710678f));
        float pdf = kInvSqrt2pi * std::exp(-0.5f * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  bool track = want_grad({&x});
  Tensor out = make_out(x.shape(), track);
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = 1.f / (1.f + std::exp(-x.data()[i]));
  if (track)
    Tape::record([x = x, out = out]() mutable {
      const float* g = out.grad();
      float* gx = x.grad();
      for (int64_t i = 0; i < x.numel(); ++i) {
        float y = out.data()[i];
        gx[i] += g[i] * y * (1.f - y);
      }
    });
  return out;
}

Tensor mul_const_mask(const Tensor& x, const std::vector<float>& mask) {
  check(int64_t(mask.size()) == x.numel(), "mul_const_mask: size mismatch");
  bool track = want_grad({&x});
  Tensor out = make_out(x.shape(), track);
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * mask[i];
  if (track)
    Tape::record([x = x, out = out, mask]() mutable {
      const float* g = out.grad();
      float* gx = x.grad();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * mask[i];
    });
  return out;
}

Tensor add_rowtable(const Tensor& x, const Tensor& table) {
  check(x.ndim() == 3, "add_rowtable: expect (N,T,C)");
  check(table.numel() == int64_t(x.dim(1)) * x.dim(2), "add_rowtable: table shape mismatch");
  bool track = want_grad({&x});  // table is constant
  Tensor out = make_out(x.shape(), track);
  const int64_t stride = int64_t(x.dim(1)) * x.dim(2);
  for (int n = 0; n < x.dim(0); ++n)
    for (int64_t i = 0; i < stride; ++i)
      out.data()[n * stride + i] = x.data()[n * stride + i] + table.data()[i];
  if (track)
    Tape::record([x = x, out = out]() mutable {
      const float* g = out.grad();
      float* gx = x.grad();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
    });
  return out;
}

Tensor mul_channel_weights(const Tensor& x, const Tensor& w) {
  check(x.ndim() == 4 && w.ndim() == 2, "mul_channel_weights: expect (N,C,H,W), (N,C)");
  check(x.dim(0) == w.dim(0) && x.dim(1) == w.dim(1), "mul_channel_weights: shape mismatch");
  bool track = want_grad({&x, &w});
  Tensor out = make_out(x.shape(), track);
  const int N = x.dim(0), C = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float wv = w.data()[n * C + c];
      const float* xs = x.data() + (int64_t(n) * C + c) * hw;
      float* os = out.data() + (int64_t(n) * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) os[i] = xs[i] * wv;
    }
  if (track)
    Tape::record([x = x, w = w, out = out, N, C, hw]() mutable {
      const float* g = out.grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const float* gs = g + (int64_t(n) * C + c) * hw;
          const float* xs = x.data() + (int64_t(n) * C + c) * hw;
          if (x.requires_grad()) {
            float wv = w.data()[n * C + c];
            float* gx = x.grad() + (int64_t(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) gx[i] += gs[i] * wv;
          }
          if (w.requires_grad()) {
            float acc = 0.f;
            for (int64_t i = 0; i < hw; ++i) acc += gs[i] * xs[i];
            w.grad()[n * C + c] += acc;
          }
        }
    });
  return out;
}

Tensor mul_spatial_map(const Tensor& x, const Tensor& m) {
  check(x.ndim() == 4 && m.ndim() == 4 && m.dim(1) == 1, "mul_spatial_map: expect (N,1,H,W) map");
  check(x.dim(0) == m.dim(0) && x.dim(2) == m.dim(2) && x.dim(3) == m.dim(3),
        "mul_spatial_map: shape mismatch");
  bool track = want_grad({&x, &m});
  Tensor out = make_out(x.shape(), track);
  const int N = x.dim(0), C = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + (int64_t(n) * C + c) * hw;
      const float* ms = m.data() + int64_t(n) * hw;
      float* os = out.data() + (int64_t(n) * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) os[i] = xs[i] * ms[i];
    }
  if (track)
    Tape::record([x = x, m = m, out = out, N, C, hw]() mutable {
      const float* g = out.grad();
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const float* gs = g + (int64_t(n) * C + c) * hw;
          const float* xs = x.data() + (int64_t(n) * C + c) * hw;
          const float* ms = m.data() + int64_t(n) * hw;
          if (x.requires_grad()) {
            float* gx = x.grad() + (int64_t(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) gx[i] += gs[i] * ms[i];
          }
          if (m.requires_grad()) {
            float* gm = m.grad() + int64_t(n) * hw;
            for (int64_t i = 0; i < hw; ++i) gm[i] += gs[i] * xs[i];
          }
        }
      }
    });
  return out;
}

Tensor sum_all(const Tensor& x) {
  bool track = want_grad({&x});
  Tensor out = make_out({1}, track);
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  out.data()[0] = float(acc);
  if (track)
    Tape::record([x = x, out = out]() mutable {
      float g = out.grad()[0];
      float* gx = x.grad();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  check(x.ndim() == 4, "global_avg_pool: expect (N,C,H,W)");
  bool track = want_grad({&x});
  const int N = x.dim(0), C = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  Tensor out = make_out({N, C}, track);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + (int64_t(n) * C + c) * hw;
      double acc = 0;
      for (int64_t i = 0; i < hw; ++i) acc += xs[i];
      out.data()[n * C + c] = float(acc / double(hw));
    }
  if (track)
    Tape::record([x = x, out = out, N, C, hw]() mutable {
      float* gx = x.grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          float g = out.grad()[n * C + c] / float(hw);
          float* gs = gx + (int64_t(n) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) gs[i] += g;
        }
    });
  return out;
}

Tensor grid_to_tokens(const Tensor& x) {
  check(x.ndim() == 4, "grid_to_tokens: expect (N,C,H,W)");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  bool track = want_grad({&x});
  Tensor out = make_out({N, H * W, C}, track);
  const int64_t hw = int64_t(H) * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + (int64_t(n) * C + c) * hw;
      float* os = out.data() + int64_t(n) * hw * C + c;
      for (int64_t i = 0; i < hw; ++i) os[i * C] = xs[i];
    }
  if (track)
    Tape::record([x = x, out = out, N, C, hw]() mutable {
      float* gx = x.grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          float* gxs = gx + (int64_t(n) * C + c) * hw;
          const float* gos = out.grad() + int64_t(n) * hw * C + c;
          for (int64_t i = 0; i < hw; ++i) gxs[i] += gos[i * C];
        }
    });
  return out;
}

Tensor tokens_to_grid(const Tensor& x, int h, int w) {
  check(x.ndim() == 3, "tokens_to_grid: expect (N,T,C)");
  check(x.dim(1) == h * w, "tokens_to_grid: T != h*w");
  const int N = x.dim(0), C = x.dim(2);
  bool track = want_grad({&x});
  Tensor out = make_out({N, C, h, w}, track);
  const int64_t hw = int64_t(h) * w;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + int64_t(n) * hw * C + c;
      float* os = out.data() + (int64_t(n) * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) os[i] = xs[i * C];
    }
  if (track)
    Tape::record([x = x, out = out, N, C, hw]() mutable {
      float* gx = x.grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          float* gxs = gx + int64_t(n) * hw * C + c;
          const float* gos = out.grad() + (int64_t(n) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) gxs[i * C] += gos[i];
        }
    });
  return out;
}

Tensor split_heads(const Tensor& x, int heads) {
  check(x.ndim() == 3, "split_heads: expect (N,T,C)");
  const int N = x.dim(0), T = x.dim(1), C = x.dim(2);
  check(C % heads == 0, "split_heads: C not divisible by heads");
  const int dh = C / heads;
  bool track = want_grad({&x});
  Tensor out = make_out({N * heads, T, dh}, track);
  for (int n = 0; n < N; ++n)
    for (int hh = 0; hh < heads; ++hh)
      for (int t = 0; t < T; ++t) {
        const float* xs = x.data() + (int64_t(n) * T + t) * C + hh * dh;
        float* os = out.data() + ((int64_t(n) * heads + hh) * T + t) * dh;
        std::copy(xs, xs + dh, os);
      }
  if (track)
    Tape::record([x = x, out = out, N, T, C, heads, dh]() mutable {
      float* gx = x.grad();
      for (int n = 0; n < N; ++n)
        for (int hh = 0; hh < heads; ++hh)
          for (int t = 0; t < T; ++t) {
            float* gxs = gx + (int64_t(n) * T + t) * C + hh * dh;
            const float* gos = out.grad() + ((int64_t(n) * heads + hh) * T + t) * dh;
            for (int d = 0; d < dh; ++d) gxs[d] += gos[d];
          }
    });
  return out;
}

Tensor merge_heads(const Tensor& x, int heads) {
  check(x.ndim() == 3, "merge_heads: expect (N*heads,T,dh)");
  const int NH = x.dim(0), T = x.dim(1), dh = x.dim(2);
  check(NH % heads == 0, "merge_heads: batch not divisible by heads");
  const int N = NH / heads, C = dh * heads;
  bool track = want_grad({&x});
  Tensor out = make_out({N, T, C}, track);
  for (int n = 0; n < N; ++n)
    for (int hh = 0; hh < heads; ++hh)
      for (int t = 0; t < T; ++t) {
        const float* xs = x.data() + ((int64_t(n) * heads + hh) * T + t) * dh;
        float* os = out.data() + (int64_t(n) * T + t) * C + hh * dh;
        std::copy(xs, xs + dh, os);
      }
  if (track)
    Tape::record([x = x, out = out, N, T, C, heads, dh]() mutable {
      float* gx = x.grad();
      for (int n = 0; n < N; ++n)
        for (int hh = 0; hh < heads; ++hh)
          for (int t = 0; t < T; ++t) {
            float* gxs = gx + ((int64_t(n) * heads + hh) * T + t) * dh;
            const float* gos = out.grad() + (int64_t(n) * T + t) * C + hh * dh;
            for (int d = 0; d < dh; ++d) gxs[d] += gos[d];
          }
    });
  return out;
}

Tensor append_token(const Tensor& x, const Tensor& token) {
  check(x.ndim() == 3, "append_token: expect (N,T,C)");
  check(token.numel() == x.dim(2), "append_token: token width mismatch");
  const int N = x.dim(0), T = x.dim(1), C = x.dim(2);
  bool track = want_grad({&x, &token});
  Tensor out = make_out({N, T + 1, C}, track);
  for (int n = 0; n < N; ++n) {
    std::copy(x.data() + int64_t(n) * T * C, x.data() + int64_t(n + 1) * T * C,
              out.data() + int64_t(n) * (T + 1) * C);
    std::copy(token.data(), token.data() + C,
              out.data() + (int64_t(n) * (T + 1) + T) * C);
  }
  if (track)
    Tape::record([x = x, token = token, out = out, N, T, C]() mutable {
      for (int n = 0; n < N; ++n) {
        const float* go = out.grad() + int64_t(n) * (T + 1) * C;
        if (x.requires_grad()) {
          float* gx = x.grad() + int64_t(n) * T * C;
          for (int64_t i = 0; i < int64_t(T) * C; ++i) gx[i] += go[i];
        }
        if (token.requires_grad()) {
          float* gt = token.grad();
          const float* gl = go + int64_t(T) * C;
          for (int c = 0; c < C; ++c) gt[c] += gl[c];
        }
      }
    });
  return out;
}

Tensor slice_tokens(const Tensor& x, int start, int len) {
  check(x.ndim() == 3, "slice_tokens: expect (N,T,C)");
  check(start >= 0 && start + len <= x.dim(1), "slice_tokens: out of range");
  const int N = x.dim(0), T = x.dim(1), C = x.dim(2);
  bool track = want_grad({&x});
  Tensor out = make_out({N, len, C}, track);
  for (int n = 0; n < N; ++n)
    std::copy(x.data() + (int64_t(n) * T + start) * C, x.data() + (int64_t(n) * T + start + len) * C,
              out.data() + int64_t(n) * len * C);
  if (track)
    Tape::record([x = x, out = out, N, T, C, start, len]() mutable {
      float* gx = x.grad();
      for (int n = 0; n < N; ++n) {
        const float* go = out.grad() + int64_t(n) * len * C;
        float* gs = gx + (int64_t(n) * T + start) * C;
        for (int64_t i = 0; i < int64_t(len) * C; ++i) gs[i] += go[i];
      }
    });
  return out;
}

Tensor concat_tokens(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 3 && b.ndim() == 3, "concat_tokens: expect (N,T,C)");
  check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2), "concat_tokens: shape mismatch");
  const int N = a.dim(0), Ta = a.dim(1), Tb = b.dim(1), C = a.dim(2);
  bool track = want_grad({&a, &b});
  Tensor out = make_out({N, Ta + Tb, C}, track);
  for (int n = 0; n < N; ++n) {
    std::copy(a.data() + int64_t(n) * Ta * C, a.data() + int64_t(n + 1) * Ta * C,
              out.data() + int64_t(n) * (Ta + Tb) * C);
    std::copy(b.data() + int64_t(n) * Tb * C, b.data() + int64_t(n + 1) * Tb * C,
              out.data() + (int64_t(n) * (Ta + Tb) + Ta) * C);
  }
  if (track)
    Tape::record([a = a, b = b, out = out, N, Ta, Tb, C]() mutable {
      for (int n = 0; n < N; ++n) {
        const float* go = out.grad() + int64_t(n) * (Ta + Tb) * C;
        if (a.requires_grad()) {
          float* ga = a.grad() + int64_t(n) * Ta * C;
          for (int64_t i = 0; i < int64_t(Ta) * C; ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
          float* gb = b.grad() + int64_t(n) * Tb * C;
          const float* gs = go + int64_t(Ta) * C;
          for (int64_t i = 0; i < int64_t(Tb) * C; ++i) gb[i] += gs[i];
        }
      }
    });
  return out;
}

Tensor channel_mean_max(const Tensor& x) {
  check(x.ndim() == 4, "channel_mean_max: expect (N,C,H,W)");
  const int N = x.dim(0), C = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  bool track = want_grad({&x});
  Tensor out = make_out({N, 2, x.dim(2), x.dim(3)}, track);
  std::vector<int> argmax(size_t(N) * hw);
  for (int n = 0; n < N; ++n) {
    float* mean_s = out.data() + int64_t(n) * 2 * hw;
    float* max_s = mean_s + hw;
    for (int64_t i = 0; i < hw; ++i) {
      double m = 0;
      float best = x.data()[(int64_t(n) * C) * hw + i];
      int best_c = 0;
      for (int c = 0; c < C; ++c) {
        float v = x.data()[(int64_t(n) * C + c) * hw + i];
        m += v;
        if (v > best) {
          best = v;
          best_c = c;
        }
      }
      mean_s[i] = float(m / C);
      max_s[i] = best;
      argmax[int64_t(n) * hw + i] = best_c;
    }
  }
  if (track)
    Tape::record([x = x, out = out, N, C, hw, argmax = std::move(argmax)]() mutable {
      float* gx = x.grad();
      for (int n = 0; n < N; ++n) {
        const float* gmean = out.grad() + int64_t(n) * 2 * hw;
        const float* gmax = gmean + hw;
        for (int64_t i = 0; i < hw; ++i) {
          float gm = gmean[i] / float(C);
          for (int c = 0; c < C; ++c) gx[(int64_t(n) * C + c) * hw + i] += gm;
          gx[(int64_t(n) * C + argmax[int64_t(n) * hw + i]) * hw + i] += gmax[i];
        }
      }
    });
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 4 && b.ndim() == 4, "concat_channels: expect (N,C,H,W)");
  check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
        "concat_channels: shape mismatch");
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const int64_t hw = int64_t(a.dim(2)) * a.dim(3);
  bool track = want_grad({&a, &b});
  Tensor out = make_out({N, Ca + Cb, a.dim(2), a.dim(3)}, track);
  for (int n = 0; n < N; ++n) {
    std::copy(a.data() + int64_t(n) * Ca * hw, a.data() + int64_t(n + 1) * Ca * hw,
              out.data() + int64_t(n) * (Ca + Cb) * hw);
    std::copy(b.data() + int64_t(n) * Cb * hw, b.data() + int64_t(n + 1) * Cb * hw,
              out.data() + (int64_t(n) * (Ca + Cb) + Ca) * hw);
  }
  if (track)
    Tape::record([a = a, b = b, out = out, N, Ca, Cb, hw]() mutable {
      for (int n = 0; n < N; ++n) {
        const float* go = out.grad() + int64_t(n) * (Ca + Cb) * hw;
        if (a.requires_grad()) {
          float* ga = a.grad() + int64_t(n) * Ca * hw;
          for (int64_t i = 0; i < Ca * hw; ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
          float* gb = b.grad() + int64_t(n) * Cb * hw;
          const float* gs = go + Ca * hw;
          for (int64_t i = 0; i < Cb * hw; ++i) gb[i] += gs[i];
        }
      }
    });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check(w.ndim() == 2, "linear: weight must be (Cin,Cout)");
  const int cin = w.dim(0), cout = w.dim(1);
  check(x.shape().back() == cin, "linear: input width mismatch");
  const int64_t rows = x.numel() / cin;
  bool track = want_grad({&x, &w, &b});

  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor out = make_out(out_shape, track);

  ECMap X(x.data(), rows, cin);
  ECMap W(w.data(), cin, cout);
  EMap O(out.data(), rows, cout);
  O.noalias() = X * W;
  if (b.defined()) {
    ECMap B(b.data(), 1, cout);
    O.rowwise() += B.row(0);
  }
  if (track)
    Tape::record([x = x, w = w, b = b, out = out, rows, cin, cout]() mutable {
      ECMap GO(out.grad(), rows, cout);
      if (x.requires_grad()) {
        EMap GX(x.grad(), rows, cin);
        ECMap W(w.data(), cin, cout);
        GX.noalias() += GO * W.transpose();
      }
      if (w.requires_grad()) {
        EMap GW(w.grad(), cin, cout);
        ECMap X(x.data(), rows, cin);
        GW.noalias() += X.transpose() * GO;
      }
      if (b.defined() && b.requires_grad()) {
        EMap GB(b.grad(), 1, cout);
        GB.row(0) += GO.colwise().sum();
      }
    });
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  check(a.ndim() == 3 && b.ndim() == 3, "bmm: expect 3-D tensors");
  const int B = a.dim(0), M = a.dim(1), K = a.dim(2);
  check(b.dim(0) == B, "bmm: batch mismatch");
  const int N = transpose_b ? b.dim(1) : b.dim(2);
  check((transpose_b ? b.dim(2) : b.dim(1)) == K, "bmm: inner dim mismatch");
  bool track = want_grad({&a, &b});
  Tensor out = make_out({B, M, N}, track);
  for (int i = 0; i < B; ++i) {
    ECMap A(a.data() + int64_t(i) * M * K, M, K);
    EMap O(out.data() + int64_t(i) * M * N, M, N);
    if (transpose_b) {
      ECMap Bm(b.data() + int64_t(i) * N * K, N, K);
      O.noalias() = A * Bm.transpose();
    } else {
      ECMap Bm(b.data() + int64_t(i) * K * N, K, N);
      O.noalias() = A * Bm;
    }
  }
  if (track)
    Tape::record([a = a, b = b, out = out, B, M, K, N, transpose_b]() mutable {
      for (int i = 0; i < B; ++i) {
        ECMap GO(out.grad() + int64_t(i) * M * N, M, N);
        if (transpose_b) {
          ECMap Bm(b.data() + int64_t(i) * N * K, N, K);
          ECMap A(a.data() + int64_t(i) * M * K, M, K);
          if (a.requires_grad()) {
            EMap GA(a.grad() + int64_t(i) * M * K, M, K);
            GA.noalias() += GO * Bm;
          }
          if (b.requires_grad()) {
            EMap GB(b.grad() + int64_t(i) * N * K, N, K);
            GB.noalias() += GO.transpose() * A;
          }
        } else {
          ECMap Bm(b.data() + int64_t(i) * K * N, K, N);
          ECMap A(a.data() + int64_t(i) * M * K, M, K);
          if (a.requires_grad()) {
            EMap GA(a.grad() + int64_t(i) * M * K, M, K);
            GA.noalias() += GO * Bm.transpose();
          }
          if (b.requires_grad()) {
            EMap GB(b.grad() + int64_t(i) * K * N, K, N);
            GB.noalias() += A.transpose() * GO;
          }
        }
      }
    });
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  const int C = x.shape().back();
  const int64_t rows = x.numel() / C;
  bool track = want_grad({&x});
  Tensor out = make_out(x.shape(), track);
  for (int64_t r = 0; r < rows; ++r) {
    const float* xs = x.data() + r * C;
    float* os = out.data() + r * C;
    float m = xs[0];
    for (int c = 1; c < C; ++c) m = std::max(m, xs[c]);
    double total = 0;
    for (int c = 0; c < C; ++c) {
      os[c] = std::exp(xs[c] - m);
      total += os[c];
    }
    float inv = float(1.0 / total);
    for (int c = 0; c < C; ++c) os[c] *= inv;
  }
  if (track)
    Tape::record([x = x, out = out, rows, C]() mutable {
      float* gx = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const float* y = out.data() + r * C;
        const float* gy = out.grad() + r * C;
        double dot = 0;
        for (int c = 0; c < C; ++c) dot += double(gy[c]) * y[c];
        float* gs = gx + r * C;
        for (int c = 0; c < C; ++c) gs[c] += y[c] * (gy[c] - float(dot));
      }
    });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int C = x.shape().back();
  check(gamma.numel() == C && beta.numel() == C, "layer_norm: affine shape mismatch");
  const int64_t rows = x.numel() / C;
  bool track = want_grad({&x, &gamma, &beta});
  Tensor out = make_out(x.shape(), track);
  std::vector<float> xhat;
  std::vector<float> invstd(rows);
  if (track) xhat.resize(size_t(x.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xs = x.data() + r * C;
    float* os = out.data() + r * C;
    double mean = 0;
    for (int c = 0; c < C; ++c) mean += xs[c];
    mean /= C;
    double var = 0;
    for (int c = 0; c < C; ++c) {
      double d = xs[c] - mean;
      var += d * d;
    }
    var /= C;
    float is = float(1.0 / std::sqrt(var + eps));
    invstd[r] = is;
    for (int c = 0; c < C; ++c) {
      float xh = (xs[c] - float(mean)) * is;
      if (track) xhat[r * C + c] = xh;
      os[c] = xh * gamma.data()[c] + beta.data()[c];
    }
  }
  if (track)
    Tape::record([x = x, gamma = gamma, beta = beta, out = out, rows, C,
                  xhat = std::move(xhat), invstd = std::move(invstd)]() mutable {
      for (int64_t r = 0; r < rows; ++r) {
        const float* gy = out.grad() + r * C;
        const float* xh = xhat.data() + r * C;
        if (gamma.requires_grad()) {
          float* gg = gamma.grad();
          for (int c = 0; c < C; ++c) gg[c] += gy[c] * xh[c];
        }
        if (beta.requires_grad()) {
          float* gb = beta.grad();
          for (int c = 0; c < C; ++c) gb[c] += gy[c];
        }
        if (x.requires_grad()) {
          // dxhat = gy * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * invstd
          double s1 = 0, s2 = 0;
          for (int c = 0; c < C; ++c) {
            double dxh = double(gy[c]) * gamma.data()[c];
            s1 += dxh;
            s2 += dxh * xh[c];
          }
          s1 /= C;
          s2 /= C;
          float* gx = x.grad() + r * C;
          for (int c = 0; c < C; ++c) {
            double dxh = double(gy[c]) * gamma.data()[c];
            gx[c] += float((dxh - s1 - double(xh[c]) * s2) * invstd[r]);
          }
        }
      }
    });
  return out;
}

namespace {

// im2col: (Cin*k*k) x (OH*OW), row-major
void im2col(const float* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
            float* col) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + ((int64_t(c) * k + ky) * k + kx) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill(row + int64_t(oy) * OW, row + int64_t(oy + 1) * OW, 0.f);
            continue;
          }
          const float* xr = x + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * stride - pad + kx;
            row[int64_t(oy) * OW + ox] = (ix >= 0 && ix < W) ? xr[ix] : 0.f;
          }
        }
      }
}

void col2im_accumulate(const float* col, int C, int H, int W, int k, int stride, int pad, int OH,
                       int OW, float* gx) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + ((int64_t(c) * k + ky) * k + kx) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          float* xr = gx + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) xr[ix] += row[int64_t(oy) * OW + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int cout, int k, int stride,
              int pad) {
  check(x.ndim() == 4, "conv2d: expect (N,C,H,W)");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(w.numel() == int64_t(cout) * C * k * k, "conv2d: weight size mismatch");
  const int OH = (H + 2 * pad - k) / stride + 1;
  const int OW = (W + 2 * pad - k) / stride + 1;
  check(OH > 0 && OW > 0, "conv2d: output would be empty");
  bool track = want_grad({&x, &w, &b});
  Tensor out = make_out({N, cout, OH, OW}, track);

  const int64_t col_rows = int64_t(C) * k * k;
  const int64_t col_cols = int64_t(OH) * OW;
  std::vector<float> col(size_t(col_rows * col_cols));
  ECMap Wm(w.data(), cout, col_rows);
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + int64_t(n) * C * H * W, C, H, W, k, stride, pad, OH, OW, col.data());
    ECMap Cm(col.data(), col_rows, col_cols);
    EMap O(out.data() + int64_t(n) * cout * col_cols, cout, col_cols);
    O.noalias() = Wm * Cm;
    if (b.defined()) {
      for (int co = 0; co < cout; ++co) {
        float bv = b.data()[co];
        float* os = out.data() + (int64_t(n) * cout + co) * col_cols;
        for (int64_t i = 0; i < col_cols; ++i) os[i] += bv;
      }
    }
  }
  if (track)
    Tape::record([x = x, w = w, b = b, out = out, N, C, H, W, cout, k, stride, pad, OH, OW,
                  col_rows, col_cols]() mutable {
      std::vector<float> col(size_t(col_rows * col_cols));
      std::vector<float> gcol(size_t(col_rows * col_cols));
      for (int n = 0; n < N; ++n) {
        ECMap GO(out.grad() + int64_t(n) * cout * col_cols, cout, col_cols);
        if (w.requires_grad() || x.requires_grad()) {
          im2col(x.data() + int64_t(n) * C * H * W, C, H, W, k, stride, pad, OH, OW, col.data());
        }
        if (w.requires_grad()) {
          EMap GW(w.grad(), cout, col_rows);
          ECMap Cm(col.data(), col_rows, col_cols);
          GW.noalias() += GO * Cm.transpose();
        }
        if (x.requires_grad()) {
          ECMap Wm(w.data(), cout, col_rows);
          EMap GC(gcol.data(), col_rows, col_cols);
          GC.noalias() = Wm.transpose() * GO;
          col2im_accumulate(gcol.data(), C, H, W, k, stride, pad, OH, OW,
                            x.grad() + int64_t(n) * C * H * W);
        }
        if (b.defined() && b.requires_grad()) {
          float* gb = b.grad();
          for (int co = 0; co < cout; ++co) {
            const float* gs = out.grad() + (int64_t(n) * cout + co) * col_cols;
            double acc = 0;
            for (int64_t i = 0; i < col_cols; ++i) acc += gs[i];
            gb[co] += float(acc);
          }
        }
      }
    });
  return out;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& run_mean,
                    Tensor& run_var, bool training, float momentum, float eps) {
  check(x.ndim() == 4, "batch_norm2d: expect (N,C,H,W)");
  const int N = x.dim(0), C = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  const int64_t cnt = int64_t(N) * hw;
  bool track = want_grad({&x, &gamma, &beta});
  Tensor out = make_out(x.shape(), track);

  std::vector<float> mean(C), invstd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double m = 0;
      for (int n = 0; n < N; ++n) {
        const float* xs = x.data() + (int64_t(n) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) m += xs[i];
      }
      m /= double(cnt);
      double var = 0;
      for (int n = 0; n < N; ++n) {
        const float* xs = x.data() + (int64_t(n) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          double d = xs[i] - m;
          var += d * d;
        }
      }
      var /= double(cnt);
      mean[c] = float(m);
      invstd[c] = float(1.0 / std::sqrt(var + eps));
      // running stats use the unbiased variance
      double unbiased = cnt > 1 ? var * double(cnt) / double(cnt - 1) : var;
      run_mean.data()[c] = (1.f - momentum) * run_mean.data()[c] + momentum * float(m);
      run_var.data()[c] = (1.f - momentum) * run_var.data()[c] + momentum * float(unbiased);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = run_mean.data()[c];
      invstd[c] = float(1.0 / std::sqrt(double(run_var.data()[c]) + eps));
    }
  }

  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + (int64_t(n) * C + c) * hw;
      float* os = out.data() + (int64_t(n) * C + c) * hw;
      float g = gamma.data()[c], bb = beta.data()[c], m = mean[c], is = invstd[c];
      for (int64_t i = 0; i < hw; ++i) os[i] = (xs[i] - m) * is * g + bb;
    }

  if (track)
    Tape::record([x = x, gamma = gamma, beta = beta, out = out, N, C, hw, cnt,
                  mean = std::move(mean), invstd = std::move(invstd), training]() mutable {
      for (int c = 0; c < C; ++c) {
        double sum_gy = 0, sum_gy_xh = 0;
        for (int n = 0; n < N; ++n) {
          const float* gy = out.grad() + (int64_t(n) * C + c) * hw;
          const float* xs = x.data() + (int64_t(n) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            sum_gy += gy[i];
            sum_gy_xh += double(gy[i]) * (xs[i] - mean[c]) * invstd[c];
          }
        }
        if (gamma.requires_grad()) gamma.grad()[c] += float(sum_gy_xh);
        if (beta.requires_grad()) beta.grad()[c] += float(sum_gy);
        if (x.requires_grad()) {
          float g = gamma.data()[c], is = invstd[c], m = mean[c];
          if (training) {
            double mg = sum_gy / double(cnt), mgx = sum_gy_xh / double(cnt);
            for (int n = 0; n < N; ++n) {
              const float* gy = out.grad() + (int64_t(n) * C + c) * hw;
              const float* xs = x.data() + (int64_t(n) * C + c) * hw;
              float* gx = x.grad() + (int64_t(n) * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                double xh = (xs[i] - m) * is;
                gx[i] += float(g * is * (double(gy[i]) - mg - xh * mgx));
              }
            }
          } else {
            for (int n = 0; n < N; ++n) {
              const float* gy = out.grad() + (int64_t(n) * C + c) * hw;
              float* gx = x.grad() + (int64_t(n) * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) gx[i] += gy[i] * g * is;
            }
          }
        }
      }
    });
  return out;
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
  check(x.ndim() == 4, "upsample_bilinear: expect (N,C,H,W)");
  if (factor == 1) return x;
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = H * factor, OW = W * factor;
  bool track = want_grad({&x});
  Tensor out = make_out({N, C, OH, OW}, track);

  // align_corners=false sampling
  auto coords = [&](int out_size, int in_size) {
    std::vector<std::tuple<int, int, float>> m(out_size);  // (i0, i1, w1)
    for (int i = 0; i < out_size; ++i) {
      float src = (i + 0.5f) / float(factor) - 0.5f;
      int i0 = int(std::floor(src));
      float w1 = src - i0;
      int i1 = i0 + 1;
      i0 = std::clamp(i0, 0, in_size - 1);
      i1 = std::clamp(i1, 0, in_size - 1);
      m[i] = {i0, i1, w1};
    }
    return m;
  };
  auto ym = coords(OH, H);
  auto xm = coords(OW, W);

  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + (int64_t(n) * C + c) * H * W;
      float* os = out.data() + (int64_t(n) * C + c) * OH * OW;
      for (int oy = 0; oy < OH; ++oy) {
        auto [y0, y1, wy] = ym[oy];
        for (int ox = 0; ox < OW; ++ox) {
          auto [x0, x1, wx] = xm[ox];
          float v00 = xs[y0 * W + x0], v01 = xs[y0 * W + x1];
          float v10 = xs[y1 * W + x0], v11 = xs[y1 * W + x1];
          os[int64_t(oy) * OW + ox] = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                      wy * ((1 - wx) * v10 + wx * v11);
        }
      }
    }
  if (track)
    Tape::record([x = x, out = out, N, C, H, W, OH, OW, ym, xm]() mutable {
      float* gx_base = x.grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          float* gx = gx_base + (int64_t(n) * C + c) * H * W;
          const float* go = out.grad() + (int64_t(n) * C + c) * OH * OW;
          for (int oy = 0; oy < OH; ++oy) {
            auto [y0, y1, wy] = ym[oy];
            for (int ox = 0; ox < OW; ++ox) {
              auto [x0, x1, wx] = xm[ox];
              float g = go[int64_t(oy) * OW + ox];
              gx[y0 * W + x0] += (1 - wy) * (1 - wx) * g;
              gx[y0 * W + x1] += (1 - wy) * wx * g;
              gx[y1 * W + x0] += wy * (1 - wx) * g;
              gx[y1 * W + x1] += wy * wx * g;
            }
          }
        }
    });
  return out;
}

}  // namespace treeformer::nn
