#include "psr/layers.hpp"

#include <cmath>
#include <functional>

namespace psr {

namespace {

void maybe_record_custom(const std::vector<Tensor>& parents, Tensor& result,
                         std::function<void()> fn) {
  Tape* tape = Tape::active();
  if (!tape) return;
  bool any = false;
  for (const Tensor& p : parents) {
    if (p.requires_grad()) {
      any = true;
      break;
    }
  }
  if (!any) return;
  result.impl()->requires_grad = true;
  std::vector<std::shared_ptr<TensorImpl>> pi;
  pi.reserve(parents.size());
  for (const Tensor& p : parents) pi.push_back(p.impl());
  tape->record(std::move(pi), result.impl(), std::move(fn));
}

Tensor uniform_param(const Shape& shape, Rng& rng, double bound) {
  Tensor t = Tensor::uniform(shape, rng, -bound, bound);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

Conv2dParams make_conv2d(int c_in, int c_out, int k, int stride, int pad, Rng& rng) {
  if (k != 1 && k != 3 && k != 5) throw ShapeError("conv2d kernel must be 1, 3 or 5");
  const double bound = std::sqrt(1.0 / (static_cast<double>(c_in) * k * k));
  Conv2dParams p;
  p.weight = uniform_param({c_out, c_in, k, k}, rng, bound);
  p.bias = uniform_param({c_out}, rng, bound);
  p.stride = stride;
  p.pad = pad;
  return p;
}

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  if (x.rank() != 4) throw ShapeError("conv2d expects [B,C,H,W], got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = p.weight.dim(0), k = p.weight.dim(2);
  if (p.weight.dim(1) != Cin) {
    throw ShapeError("conv2d channel mismatch: input " + std::to_string(Cin) + ", weight " +
                     std::to_string(p.weight.dim(1)));
  }
  const int64_t s = p.stride, pad = p.pad;
  const int64_t Ho = (H + 2 * pad - k) / s + 1;
  const int64_t Wo = (W + 2 * pad - k) / s + 1;
  if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d input smaller than kernel");

  Tensor out = Tensor::zeros({B, Cout, Ho, Wo});
  const double* xv = x.values().data();
  const double* wv = p.weight.values().data();
  const double* bv = p.bias.values().data();
  double* ov = out.values().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Cout; ++co) {
      double* out_map = ov + ((b * Cout + co) * Ho) * Wo;
      for (int64_t i = 0; i < Ho * Wo; ++i) out_map[i] = bv[co];
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const double* in_map = xv + ((b * Cin + ci) * H) * W;
        const double* ker = wv + ((co * Cin + ci) * k) * k;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          for (int64_t kh = 0; kh < k; ++kh) {
            const int64_t ih = oh * s - pad + kh;
            if (ih < 0 || ih >= H) continue;
            for (int64_t kw = 0; kw < k; ++kw) {
              const double wgt = ker[kh * k + kw];
              if (wgt == 0.0) continue;
              const int64_t iw0 = -pad + kw;
              double* orow = out_map + oh * Wo;
              const double* irow = in_map + ih * W;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t iw = ow * s + iw0;
                if (iw < 0 || iw >= W) continue;
                orow[ow] += wgt * irow[iw];
              }
            }
          }
        }
      }
    }
  }

  Tensor weight = p.weight, bias = p.bias;
  std::function<void()> fn = [xi = x.impl(), wi = weight.impl(), bi = bias.impl(),
                              oi = out.impl(), B, Cin, Cout, H, W, Ho, Wo, k, s, pad]() {
    const auto& g = oi->grad;
    const bool need_x = !xi->grad.empty();
    const bool need_w = !wi->grad.empty();
    const bool need_b = !bi->grad.empty();
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t co = 0; co < Cout; ++co) {
        const double* gmap = g.data() + ((b * Cout + co) * Ho) * Wo;
        if (need_b) {
          double acc = 0.0;
          for (int64_t i = 0; i < Ho * Wo; ++i) acc += gmap[i];
          bi->grad[static_cast<size_t>(co)] += acc;
        }
        if (!need_x && !need_w) continue;
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const double* in_map = xi->data.data() + ((b * Cin + ci) * H) * W;
          const double* ker = wi->data.data() + ((co * Cin + ci) * k) * k;
          double* gin = need_x ? xi->grad.data() + ((b * Cin + ci) * H) * W : nullptr;
          double* gker = need_w ? wi->grad.data() + ((co * Cin + ci) * k) * k : nullptr;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t kh = 0; kh < k; ++kh) {
              const int64_t ih = oh * s - pad + kh;
              if (ih < 0 || ih >= H) continue;
              for (int64_t kw = 0; kw < k; ++kw) {
                const int64_t iw0 = -pad + kw;
                const double* grow = gmap + oh * Wo;
                for (int64_t ow = 0; ow < Wo; ++ow) {
                  const int64_t iw = ow * s + iw0;
                  if (iw < 0 || iw >= W) continue;
                  const double go = grow[ow];
                  if (go == 0.0) continue;
                  if (need_x) gin[ih * W + iw] += go * ker[kh * k + kw];
                  if (need_w) gker[kh * k + kw] += go * in_map[ih * W + iw];
                }
              }
            }
          }
        }
      }
    }
  };
  Tensor out_ref = out;
  maybe_record_custom({x, weight, bias}, out_ref, std::move(fn));
  return out;
}

// ---------------------------------------------------------------------------
// conv3d over time

Conv3dTemporalParams make_conv3d_temporal(int c_in, int c_out, int stride_t, int k_spatial,
                                          Rng& rng) {
  if (k_spatial != 1 && k_spatial != 3) throw ShapeError("conv3d spatial kernel must be 1 or 3");
  const double bound =
      std::sqrt(1.0 / (static_cast<double>(c_in) * stride_t * k_spatial * k_spatial));
  Conv3dTemporalParams p;
  p.weight = uniform_param({c_out, c_in, stride_t, k_spatial, k_spatial}, rng, bound);
  p.bias = uniform_param({c_out}, rng, bound);
  p.stride_t = stride_t;
  p.pad_s = k_spatial / 2;
  return p;
}

Tensor conv3d_temporal(const Tensor& x, const Conv3dTemporalParams& p) {
  if (x.rank() != 5) throw ShapeError("conv3d expects [B,C,T,H,W], got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), Cin = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t Cout = p.weight.dim(0), kT = p.weight.dim(2), ks = p.weight.dim(3);
  if (p.weight.dim(1) != Cin) throw ShapeError("conv3d channel mismatch");
  if (kT != p.stride_t) throw ShapeError("conv3d temporal kernel must equal its stride");
  if (T % p.stride_t != 0) {
    throw ShapeError("conv3d: T=" + std::to_string(T) + " not divisible by stride " +
                     std::to_string(p.stride_t));
  }
  const int64_t L = T / p.stride_t;
  const int64_t pad = p.pad_s;
  Tensor out = Tensor::zeros({B, Cout, L, H, W});
  const double* xv = x.values().data();
  const double* wv = p.weight.values().data();
  const double* bv = p.bias.values().data();
  double* ov = out.values().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t l = 0; l < L; ++l) {
        double* omap = ov + (((b * Cout + co) * L + l) * H) * W;
        for (int64_t i = 0; i < H * W; ++i) omap[i] = bv[co];
        for (int64_t ci = 0; ci < Cin; ++ci)
          for (int64_t kt = 0; kt < kT; ++kt) {
            const int64_t t = l * p.stride_t + kt;
            const double* imap = xv + (((b * Cin + ci) * T + t) * H) * W;
            const double* ker = wv + ((((co * Cin + ci) * kT + kt) * ks)) * ks;
            for (int64_t oh = 0; oh < H; ++oh)
              for (int64_t kh = 0; kh < ks; ++kh) {
                const int64_t ih = oh - pad + kh;
                if (ih < 0 || ih >= H) continue;
                for (int64_t kw = 0; kw < ks; ++kw) {
                  const double wgt = ker[kh * ks + kw];
                  for (int64_t ow = 0; ow < W; ++ow) {
                    const int64_t iw = ow - pad + kw;
                    if (iw < 0 || iw >= W) continue;
                    omap[oh * W + ow] += wgt * imap[ih * W + iw];
                  }
                }
              }
          }
      }

  Tensor weight = p.weight, bias = p.bias;
  const int64_t sT = p.stride_t;
  std::function<void()> fn = [xi = x.impl(), wi = weight.impl(), bi = bias.impl(),
                              oi = out.impl(), B, Cin, Cout, T, H, W, L, kT, ks, pad, sT]() {
    const auto& g = oi->grad;
    const bool need_x = !xi->grad.empty();
    const bool need_w = !wi->grad.empty();
    const bool need_b = !bi->grad.empty();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t co = 0; co < Cout; ++co)
        for (int64_t l = 0; l < L; ++l) {
          const double* gmap = g.data() + (((b * Cout + co) * L + l) * H) * W;
          if (need_b) {
            double acc = 0.0;
            for (int64_t i = 0; i < H * W; ++i) acc += gmap[i];
            bi->grad[static_cast<size_t>(co)] += acc;
          }
          if (!need_x && !need_w) continue;
          for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t kt = 0; kt < kT; ++kt) {
              const int64_t t = l * sT + kt;
              const double* imap = xi->data.data() + (((b * Cin + ci) * T + t) * H) * W;
              double* gin =
                  need_x ? xi->grad.data() + (((b * Cin + ci) * T + t) * H) * W : nullptr;
              const double* ker = wi->data.data() + ((((co * Cin + ci) * kT + kt) * ks)) * ks;
              double* gker =
                  need_w ? wi->grad.data() + ((((co * Cin + ci) * kT + kt) * ks)) * ks : nullptr;
              for (int64_t oh = 0; oh < H; ++oh)
                for (int64_t kh = 0; kh < ks; ++kh) {
                  const int64_t ih = oh - pad + kh;
                  if (ih < 0 || ih >= H) continue;
                  for (int64_t kw = 0; kw < ks; ++kw)
                    for (int64_t ow = 0; ow < W; ++ow) {
                      const int64_t iw = ow - pad + kw;
                      if (iw < 0 || iw >= W) continue;
                      const double go = gmap[oh * W + ow];
                      if (go == 0.0) continue;
                      if (need_x) gin[ih * W + iw] += go * ker[kh * ks + kw];
                      if (need_w) gker[kh * ks + kw] += go * imap[ih * W + iw];
                    }
                }
            }
        }
  };
  Tensor out_ref = out;
  maybe_record_custom({x, weight, bias}, out_ref, std::move(fn));
  return out;
}

// ---------------------------------------------------------------------------
// batch norm

BatchNormParams make_batch_norm(int channels) {
  BatchNormParams p;
  p.gamma = Tensor::full({channels}, 1.0).set_requires_grad(true);
  p.beta = Tensor::zeros({channels}).set_requires_grad(true);
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::full({channels}, 1.0);
  return p;
}

Tensor batch_norm2d(const Tensor& x, BatchNormParams& p, bool training, bool update_running) {
  if (x.rank() != 4) throw ShapeError("batch_norm2d expects [B,C,H,W]");
  const int64_t C = x.dim(1);
  if (C != p.gamma.dim(0)) throw ShapeError("batch_norm2d channel mismatch");
  const Shape per_channel{1, C, 1, 1};
  Tensor gamma = reshape(p.gamma, per_channel);
  Tensor beta = reshape(p.beta, per_channel);
  if (training) {
    const double count = static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
    Tensor mu = mul_scalar(reduce_sum(x, {0, 2, 3}, true), 1.0 / count);
    Tensor xc = sub(x, mu);
    Tensor var = mul_scalar(reduce_sum(mul(xc, xc), {0, 2, 3}, true), 1.0 / count);
    if (update_running) {
      auto& rm = p.running_mean.values();
      auto& rv = p.running_var.values();
      for (int64_t c = 0; c < C; ++c) {
        rm[static_cast<size_t>(c)] = (1.0 - p.momentum) * rm[static_cast<size_t>(c)] +
                                     p.momentum * mu.values()[static_cast<size_t>(c)];
        rv[static_cast<size_t>(c)] = (1.0 - p.momentum) * rv[static_cast<size_t>(c)] +
                                     p.momentum * var.values()[static_cast<size_t>(c)];
      }
    }
    Tensor xhat = div(xc, psr::sqrt(add_scalar(var, p.eps)));
    return add(mul(gamma, xhat), beta);
  }
  Tensor rm = reshape(p.running_mean, per_channel);
  Tensor rv = reshape(p.running_var, per_channel);
  Tensor xhat = div(sub(x, rm), psr::sqrt(add_scalar(rv, p.eps)));
  return add(mul(gamma, xhat), beta);
}

// ---------------------------------------------------------------------------
// pixel shuffle

Tensor pixel_shuffle(const Tensor& x, int r) {
  if (x.rank() != 4) throw ShapeError("pixel_shuffle expects [B,C,H,W]");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t r2 = static_cast<int64_t>(r) * r;
  if (C % r2 != 0) {
    throw ShapeError("pixel_shuffle: " + std::to_string(C) + " channels not divisible by r^2=" +
                     std::to_string(r2));
  }
  const int64_t Co = C / r2;
  Tensor out = Tensor::zeros({B, Co, H * r, W * r});
  const double* xv = x.values().data();
  double* ov = out.values().data();
  const int64_t Ho = H * r, Wo = W * r;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < Co; ++c)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < r; ++j) {
          const double* imap = xv + ((b * C + c * r2 + i * r + j) * H) * W;
          double* omap = ov + ((b * Co + c) * Ho) * Wo;
          for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) omap[(r * h + i) * Wo + (r * w + j)] = imap[h * W + w];
        }
  std::function<void()> fn = [xi = x.impl(), oi = out.impl(), B, C, Co, H, W, r, r2, Ho, Wo]() {
    if (xi->grad.empty()) return;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < Co; ++c)
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < r; ++j) {
            double* gmap = xi->grad.data() + ((b * C + c * r2 + i * r + j) * H) * W;
            const double* gout = oi->grad.data() + ((b * Co + c) * Ho) * Wo;
            for (int64_t h = 0; h < H; ++h)
              for (int64_t w = 0; w < W; ++w)
                gmap[h * W + w] += gout[(r * h + i) * Wo + (r * w + j)];
          }
  };
  Tensor out_ref = out;
  maybe_record_custom({x}, out_ref, std::move(fn));
  return out;
}

// ---------------------------------------------------------------------------
// block pooling / nearest upsample

Tensor sum_pool2d(const Tensor& x, int n) {
  if (x.rank() != 4) throw ShapeError("sum_pool2d expects [B,C,H,W]");
  const int64_t B = x.dim(0), C = x.dim(1), nH = x.dim(2), nW = x.dim(3);
  if (nH % n != 0 || nW % n != 0) throw ShapeError("sum_pool2d: dims not divisible by n");
  const int64_t H = nH / n, W = nW / n;
  Tensor out = Tensor::zeros({B, C, H, W});
  const double* xv = x.values().data();
  double* ov = out.values().data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* imap = xv + bc * nH * nW;
    double* omap = ov + bc * H * W;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < n; ++j) acc += imap[(h * n + i) * nW + (w * n + j)];
        omap[h * W + w] = acc;
      }
  }
  std::function<void()> fn = [xi = x.impl(), oi = out.impl(), B, C, H, W, nH, nW, n]() {
    if (xi->grad.empty()) return;
    for (int64_t bc = 0; bc < B * C; ++bc) {
      double* gmap = xi->grad.data() + bc * nH * nW;
      const double* gout = oi->grad.data() + bc * H * W;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          const double go = gout[h * W + w];
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) gmap[(h * n + i) * nW + (w * n + j)] += go;
        }
    }
  };
  Tensor out_ref = out;
  maybe_record_custom({x}, out_ref, std::move(fn));
  return out;
}

Tensor upsample_nearest2d(const Tensor& x, int n) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2d expects [B,C,H,W]");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t nH = H * n, nW = W * n;
  Tensor out = Tensor::zeros({B, C, nH, nW});
  const double* xv = x.values().data();
  double* ov = out.values().data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* imap = xv + bc * H * W;
    double* omap = ov + bc * nH * nW;
    for (int64_t h = 0; h < nH; ++h)
      for (int64_t w = 0; w < nW; ++w) omap[h * nW + w] = imap[(h / n) * W + (w / n)];
  }
  std::function<void()> fn = [xi = x.impl(), oi = out.impl(), B, C, H, W, nH, nW, n]() {
    if (xi->grad.empty()) return;
    for (int64_t bc = 0; bc < B * C; ++bc) {
      double* gmap = xi->grad.data() + bc * H * W;
      const double* gout = oi->grad.data() + bc * nH * nW;
      for (int64_t h = 0; h < nH; ++h)
        for (int64_t w = 0; w < nW; ++w) gmap[(h / n) * W + (w / n)] += gout[h * nW + w];
    }
  };
  Tensor out_ref = out;
  maybe_record_custom({x}, out_ref, std::move(fn));
  return out;
}

// ---------------------------------------------------------------------------
// dense block

DenseBlockParams make_dense_block(int c_in, int width, Rng& rng) {
  DenseBlockParams p;
  p.conv1 = make_conv2d(c_in, width, 3, 1, 1, rng);
  p.bn = make_batch_norm(width);
  p.conv2 = make_conv2d(width, width, 3, 1, 1, rng);
  return p;
}

Tensor dense_block_forward(const std::vector<Tensor>& inputs, DenseBlockParams& p, bool training,
                           bool update_running) {
  if (inputs.empty()) throw ShapeError("dense block needs at least one input");
  for (size_t i = 1; i < inputs.size(); ++i) {
    if (inputs[i].dim(2) != inputs[0].dim(2) || inputs[i].dim(3) != inputs[0].dim(3)) {
      throw ShapeError("dense block inputs disagree on spatial dims");
    }
  }
  Tensor x = inputs.size() == 1 ? inputs[0] : concat(inputs, 1);
  Tensor h = conv2d(x, p.conv1);
  h = batch_norm2d(h, p.bn, training, update_running);
  h = relu(h);
  h = conv2d(h, p.conv2);
  return relu(h);
}

// ---------------------------------------------------------------------------
// LSTM

LstmParams make_lstm(int input_dim, int hidden_dim, Rng& rng) {
  const double bound = std::sqrt(1.0 / hidden_dim);
  LstmParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  auto w = [&](int in) { return uniform_param({in, hidden_dim}, rng, bound); };
  auto b = [&]() { return uniform_param({hidden_dim}, rng, bound); };
  p.wx_i = w(input_dim); p.wh_i = w(hidden_dim); p.b_i = b();
  p.wx_f = w(input_dim); p.wh_f = w(hidden_dim); p.b_f = b();
  p.wx_o = w(input_dim); p.wh_o = w(hidden_dim); p.b_o = b();
  p.wx_g = w(input_dim); p.wh_g = w(hidden_dim); p.b_g = b();
  return p;
}

Tensor lstm_sequence(const Tensor& embeds, const LstmParams& p) {
  if (embeds.rank() != 2 || embeds.dim(1) != p.input_dim) {
    throw ShapeError("lstm_sequence expects [S, input_dim]");
  }
  const int64_t S = embeds.dim(0);
  Tensor h = Tensor::zeros({1, p.hidden_dim});
  Tensor c = Tensor::zeros({1, p.hidden_dim});
  for (int64_t t = 0; t < S; ++t) {
    Tensor x = slice0(embeds, t, 1);  // [1, E]
    Tensor i = sigmoid(add(add(matmul(x, p.wx_i), matmul(h, p.wh_i)), p.b_i));
    Tensor f = sigmoid(add(add(matmul(x, p.wx_f), matmul(h, p.wh_f)), p.b_f));
    Tensor o = sigmoid(add(add(matmul(x, p.wx_o), matmul(h, p.wh_o)), p.b_o));
    Tensor g = psr::tanh(add(add(matmul(x, p.wx_g), matmul(h, p.wh_g)), p.b_g));
    c = add(mul(f, c), mul(i, g));
    h = mul(o, psr::tanh(c));
  }
  return reshape(h, {p.hidden_dim});
}

// ---------------------------------------------------------------------------
// embedding

Tensor embedding_lookup(const Tensor& table, int64_t index) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, E]");
  const int64_t V = table.dim(0), E = table.dim(1);
  if (index < 0 || index >= V) {
    throw IndexError("embedding index " + std::to_string(index) + " out of range [0, " +
                     std::to_string(V) + ")");
  }
  Tensor out = Tensor::zeros({E});
  std::copy(table.values().begin() + index * E, table.values().begin() + (index + 1) * E,
            out.values().begin());
  std::function<void()> fn = [ti = table.impl(), oi = out.impl(), index, E]() {
    if (ti->grad.empty()) return;
    for (int64_t e = 0; e < E; ++e)
      ti->grad[static_cast<size_t>(index * E + e)] += oi->grad[static_cast<size_t>(e)];
  };
  Tensor out_ref = out;
  maybe_record_custom({table}, out_ref, std::move(fn));
  return out;
}

// ---------------------------------------------------------------------------
// N^2 normalization

Tensor n2_normalize(const Tensor& raw, const Tensor& coarse, int n) {
  if (raw.rank() != 4 || coarse.rank() != 4) throw ShapeError("n2_normalize expects 4-d tensors");
  if (raw.dim(0) != coarse.dim(0) || raw.dim(1) != 1 || coarse.dim(1) != 1 ||
      raw.dim(2) != coarse.dim(2) * n || raw.dim(3) != coarse.dim(3) * n) {
    throw ShapeError("n2_normalize: raw " + shape_str(raw.shape()) + " does not refine coarse " +
                     shape_str(coarse.shape()) + " by n=" + std::to_string(n));
  }
  Tensor w = add_scalar(relu(raw), kN2WeightFloor);
  Tensor block_sum = sum_pool2d(w, n);
  Tensor frac = div(w, upsample_nearest2d(block_sum, n));
  return mul(frac, upsample_nearest2d(coarse, n));
}

// ---------------------------------------------------------------------------
// losses

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) throw ShapeError("mse_loss shape mismatch");
  Tensor d = sub(pred, target);
  return mean_all(mul(d, d));
}

Tensor bce_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) throw ShapeError("bce_loss shape mismatch");
  constexpr double lo = 1e-7;
  Tensor p = clamp_min(pred, lo);
  p = neg(clamp_min(neg(p), lo - 1.0));  // upper clamp at 1 - lo
  Tensor pos = mul(target, psr::log(p));
  Tensor negv = mul(add_scalar(neg(target), 1.0), psr::log(add_scalar(neg(p), 1.0)));
  return neg(mean_all(add(pos, negv)));
}

Tensor loss(LossKind kind, const Tensor& pred, const Tensor& target) {
  return kind == LossKind::Mse ? mse_loss(pred, target) : bce_loss(pred, target);
}

// ---------------------------------------------------------------------------
// linear / res blocks

LinearParams make_linear(int in_dim, int out_dim, Rng& rng) {
  const double bound = std::sqrt(1.0 / in_dim);
  LinearParams p;
  p.weight = uniform_param({in_dim, out_dim}, rng, bound);
  p.bias = uniform_param({out_dim}, rng, bound);
  return p;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.weight.dim(0)) throw ShapeError("linear shape mismatch");
  return add(matmul(x, p.weight), p.bias);
}

ResBlockParams make_res_block(int c_in, int c_out, int stride, Rng& rng) {
  ResBlockParams p;
  p.conv1 = make_conv2d(c_in, c_out, 3, stride, 1, rng);
  p.conv2 = make_conv2d(c_out, c_out, 3, 1, 1, rng);
  if (stride != 1 || c_in != c_out) p.proj = make_conv2d(c_in, c_out, 1, stride, 0, rng);
  return p;
}

Tensor res_block(const Tensor& x, const ResBlockParams& p) {
  Tensor h = relu(conv2d(x, p.conv1));
  h = conv2d(h, p.conv2);
  Tensor skip = p.proj ? conv2d(x, *p.proj) : x;
  return relu(add(h, skip));
}

// ---------------------------------------------------------------------------
// parameter registration

void collect(Conv2dParams& p, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".weight", p.weight);
  out.emplace_back(prefix + ".bias", p.bias);
}

void collect(Conv3dTemporalParams& p, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".weight", p.weight);
  out.emplace_back(prefix + ".bias", p.bias);
}

void collect(BatchNormParams& p, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

void collect(DenseBlockParams& p, const std::string& prefix, NamedParams& out) {
  collect(p.conv1, prefix + ".conv1", out);
  collect(p.bn, prefix + ".bn", out);
  collect(p.conv2, prefix + ".conv2", out);
}

void collect(LstmParams& p, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".wx_i", p.wx_i); out.emplace_back(prefix + ".wh_i", p.wh_i);
  out.emplace_back(prefix + ".b_i", p.b_i);
  out.emplace_back(prefix + ".wx_f", p.wx_f); out.emplace_back(prefix + ".wh_f", p.wh_f);
  out.emplace_back(prefix + ".b_f", p.b_f);
  out.emplace_back(prefix + ".wx_o", p.wx_o); out.emplace_back(prefix + ".wh_o", p.wh_o);
  out.emplace_back(prefix + ".b_o", p.b_o);
  out.emplace_back(prefix + ".wx_g", p.wx_g); out.emplace_back(prefix + ".wh_g", p.wh_g);
  out.emplace_back(prefix + ".b_g", p.b_g);
}

void collect(LinearParams& p, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".weight", p.weight);
  out.emplace_back(prefix + ".bias", p.bias);
}

void collect(ResBlockParams& p, const std::string& prefix, NamedParams& out) {
  collect(p.conv1, prefix + ".conv1", out);
  collect(p.conv2, prefix + ".conv2", out);
  if (p.proj) collect(*p.proj, prefix + ".proj", out);
}

void collect_state(BatchNormParams& p, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".running_mean", p.running_mean);
  out.emplace_back(prefix + ".running_var", p.running_var);
}

void collect_state(DenseBlockParams& p, const std::string& prefix, NamedParams& out) {
  collect_state(p.bn, prefix + ".bn", out);
}

std::vector<Tensor> tensors_of(const NamedParams& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.push_back(t);
  return out;
}

int64_t param_count(const NamedParams& params) {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace psr
