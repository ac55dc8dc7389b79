#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eemkit/common.hpp"

namespace eemkit {

using MatF = Eigen::MatrixXf;
using VecF = Eigen::VectorXf;

// Channel-major activation block: v[(c*h + y)*w + x].
struct Tensor3 {
  int c = 0, h = 0, w = 0;
  VecF v;

  void resize(int c_, int h_, int w_) {
    c = c_;
    h = h_;
    w = w_;
    v.setZero(static_cast<Eigen::Index>(c) * h * w);
  }
  float& at(int ch, int y, int x) { return v[static_cast<Eigen::Index>((ch * h + y) * w + x)]; }
  float at(int ch, int y, int x) const { return v[static_cast<Eigen::Index>((ch * h + y) * w + x)]; }
};

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

struct AdamState {
  MatF m, v;
  void match(const MatF& w) {
    if (m.rows() != w.rows() || m.cols() != w.cols()) {
      m.setZero(w.rows(), w.cols());
      v.setZero(w.rows(), w.cols());
    }
  }
  void reset() {
    m.setZero(m.rows(), m.cols());
    v.setZero(v.rows(), v.cols());
  }
};

// One bias-corrected Adam update; `step` is the 1-based step count after this update.
inline void adam_update(MatF& w, const MatF& grad, AdamState& state, const AdamHyper& hp, long step) {
  state.match(w);
  const float b1 = static_cast<float>(hp.beta1);
  const float b2 = static_cast<float>(hp.beta2);
  state.m = b1 * state.m + (1.0f - b1) * grad;
  state.v = b2 * state.v + (1.0f - b2) * grad.cwiseProduct(grad);
  const float corr1 = 1.0f - std::pow(b1, static_cast<float>(step));
  const float corr2 = 1.0f - std::pow(b2, static_cast<float>(step));
  const float lr = static_cast<float>(hp.learning_rate);
  const float eps = static_cast<float>(hp.epsilon);
  w.noalias() -= (lr * (state.m / corr1).array() / ((state.v / corr2).array().sqrt() + eps)).matrix();
}

inline void fan_in_uniform_init(MatF& w, int fan_in, std::mt19937_64& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::uniform_real_distribution<float> dist(-limit, limit);
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
}

// --- Convolution -------------------------------------------------------------

struct Conv2d {
  int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 0;
  MatF W;   // out_c x (in_c*k*k)
  MatF b;   // out_c x 1
  MatF gW;  // accumulated gradients (batch mean scale applied by caller)
  MatF gb;
  AdamState aW, ab;

  void init(int in_channels, int out_channels, int kernel, int stride_, int pad_, std::mt19937_64& rng) {
    in_c = in_channels;
    out_c = out_channels;
    k = kernel;
    stride = stride_;
    pad = pad_;
    W.resize(out_c, in_c * k * k);
    fan_in_uniform_init(W, in_c * k * k, rng);
    b.setZero(out_c, 1);
    zero_grads();
  }

  void zero_grads() {
    gW.setZero(out_c, in_c * k * k);
    gb.setZero(out_c, 1);
  }

  int out_h(int h) const { return (h + 2 * pad - k) / stride + 1; }
  int out_w(int w) const { return (w + 2 * pad - k) / stride + 1; }

  // Patch matrix: (in_c*k*k) x (oh*ow), one column per output position.
  void im2col(const Tensor3& x, MatF& patches) const {
    const int oh = out_h(x.h), ow = out_w(x.w);
    patches.setZero(in_c * k * k, oh * ow);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const int col = oy * ow + ox;
        const int base_y = oy * stride - pad;
        const int base_x = ox * stride - pad;
        int row = 0;
        for (int c = 0; c < in_c; ++c)
          for (int ky = 0; ky < k; ++ky) {
            const int y = base_y + ky;
            if (y < 0 || y >= x.h) {
              row += k;
              continue;
            }
            for (int kx = 0; kx < k; ++kx, ++row) {
              const int px = base_x + kx;
              if (px >= 0 && px < x.w) patches(row, col) = x.at(c, y, px);
            }
          }
      }
    }
  }

  void forward(const Tensor3& x, Tensor3& y, MatF& patches) const {
    if (x.c != in_c) throw Error("conv input has " + std::to_string(x.c) + " channels, expected " + std::to_string(in_c));
    const int oh = out_h(x.h), ow = out_w(x.w);
    im2col(x, patches);
    y.resize(out_c, oh, ow);
    Eigen::Map<MatF> ymap(y.v.data(), oh * ow, out_c);
    ymap.noalias() = patches.transpose() * W.transpose();
    for (int c = 0; c < out_c; ++c) ymap.col(c).array() += b(c, 0);
  }

  // dy is the gradient w.r.t. this layer's output. Accumulates gW/gb; fills dx
  // (same shape as the forward input) when need_dx.
  void backward(const Tensor3& dy, const MatF& patches, const Tensor3& x_shape, Tensor3* dx, bool need_dx) {
    const int oh = dy.h, ow = dy.w;
    Eigen::Map<const MatF> dymap(dy.v.data(), oh * ow, out_c);
    gW.noalias() += dymap.transpose() * patches.transpose();
    gb.noalias() += dymap.colwise().sum().transpose();
    if (!need_dx || dx == nullptr) return;
    MatF dpatches(in_c * k * k, oh * ow);
    dpatches.noalias() = W.transpose() * dymap.transpose();
    dx->resize(x_shape.c, x_shape.h, x_shape.w);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const int col = oy * ow + ox;
        const int base_y = oy * stride - pad;
        const int base_x = ox * stride - pad;
        int row = 0;
        for (int c = 0; c < in_c; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx, ++row) {
              const int y = base_y + ky;
              const int px = base_x + kx;
              if (y >= 0 && y < x_shape.h && px >= 0 && px < x_shape.w) dx->at(c, y, px) += dpatches(row, col);
            }
      }
    }
  }

  std::size_t param_count() const { return static_cast<std::size_t>(W.size()) + static_cast<std::size_t>(b.size()); }

  void adam_step(const AdamHyper& hp, long step) {
    adam_update(W, gW, aW, hp, step);
    adam_update(b, gb, ab, hp, step);
  }
};

inline void relu_forward(const Tensor3& x, Tensor3& y) {
  y.c = x.c;
  y.h = x.h;
  y.w = x.w;
  y.v = x.v.cwiseMax(0.0f);
}

inline void relu_backward(const Tensor3& dy, const Tensor3& x, Tensor3& dx) {
  dx.c = x.c;
  dx.h = x.h;
  dx.w = x.w;
  dx.v = dy.v.cwiseProduct((x.v.array() > 0.0f).cast<float>().matrix());
}

// --- Dense -------------------------------------------------------------------

struct Dense {
  MatF W;  // out x in
  MatF b;  // out x 1
  MatF gW, gb;
  AdamState aW, ab;

  void init(int in_dim, int out_dim, std::mt19937_64& rng) {
    W.resize(out_dim, in_dim);
    fan_in_uniform_init(W, in_dim, rng);
    b.setZero(out_dim, 1);
    zero_grads();
  }

  void zero_grads() {
    gW.setZero(W.rows(), W.cols());
    gb.setZero(b.rows(), 1);
  }

  VecF forward(const VecF& x) const { return W * x + b.col(0); }

  // Accumulates gradients; returns gradient w.r.t. the input.
  VecF backward(const VecF& dy, const VecF& x) {
    gW.noalias() += dy * x.transpose();
    gb.col(0).noalias() += dy;
    return W.transpose() * dy;
  }

  std::size_t param_count() const { return static_cast<std::size_t>(W.size()) + static_cast<std::size_t>(b.size()); }

  void adam_step(const AdamHyper& hp, long step) {
    adam_update(W, gW, aW, hp, step);
    adam_update(b, gb, ab, hp, step);
  }
};

}  // namespace eemkit
