#include "tcyolo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tcyolo {

Activation parse_activation(std::string_view name) {
  if (name == "mish") return {ActivationKind::mish};
  if (name == "leaky_relu" || name == "leaky") return {ActivationKind::leaky_relu, 0.1};
  if (name == "sigmoid") return {ActivationKind::sigmoid};
  if (name == "relu") return {ActivationKind::relu};
  if (name == "identity" || name == "linear") return {ActivationKind::identity};
  throw ConfigError("unknown activation kind '" + std::string(name) + "'");
}

std::string activation_name(const Activation& a) {
  switch (a.kind) {
    case ActivationKind::identity: return "identity";
    case ActivationKind::mish: return "mish";
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::relu: return "relu";
  }
  return "identity";
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  if (x > Scalar(20)) return x;
  return std::log1p(std::exp(x));
}

template <typename Scalar>
static Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar apply_activation(const Activation& a, Scalar x) {
  switch (a.kind) {
    case ActivationKind::identity: return x;
    case ActivationKind::mish: return x * std::tanh(softplus(x));
    case ActivationKind::leaky_relu: return x >= 0 ? x : Scalar(a.slope) * x;
    case ActivationKind::sigmoid: return sigmoid(x);
    case ActivationKind::relu: return x > 0 ? x : Scalar(0);
  }
  return x;
}

template <typename Scalar>
Scalar activation_derivative(const Activation& a, Scalar x) {
  switch (a.kind) {
    case ActivationKind::identity: return Scalar(1);
    case ActivationKind::mish: {
      const Scalar t = std::tanh(softplus(x));
      return t + x * (Scalar(1) - t * t) * sigmoid(x);
    }
    case ActivationKind::leaky_relu: return x >= 0 ? Scalar(1) : Scalar(a.slope);
    case ActivationKind::sigmoid: {
      const Scalar s = sigmoid(x);
      return s * (Scalar(1) - s);
    }
    case ActivationKind::relu: return x > 0 ? Scalar(1) : Scalar(0);
  }
  return Scalar(1);
}

namespace {

struct ConvGeometry {
  Index channels, height, width, kernel_h, kernel_w, out_h, out_w;
  Index stride, padding, dilation;

  Index col_rows() const { return channels * kernel_h * kernel_w; }
  Index col_cols() const { return out_h * out_w; }
  bool pointwise() const {
    return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0;
  }
};

template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* cols) {
  for (Index c = 0; c < g.channels; ++c) {
    const Scalar* plane = image + c * g.height * g.width;
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + ki * g.dilation;
          if (ih < 0 || ih >= g.height) {
            std::fill(cols, cols + g.out_w, Scalar(0));
            cols += g.out_w;
            continue;
          }
          const Scalar* row = plane + ih * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kj * g.dilation;
            *cols++ = (iw >= 0 && iw < g.width) ? row[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* image) {
  for (Index c = 0; c < g.channels; ++c) {
    Scalar* plane = image + c * g.height * g.width;
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + ki * g.dilation;
          if (ih < 0 || ih >= g.height) {
            cols += g.out_w;
            continue;
          }
          Scalar* row = plane + ih * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kj * g.dilation;
            if (iw >= 0 && iw < g.width) row[iw] += *cols;
            ++cols;
          }
        }
      }
    }
  }
}

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (&a.tape() != &b.tape())
    throw ConfigError(std::string(op) + ": operands recorded on different tapes");
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>* bias,
                   const Conv2dOptions& options) {
  using Matrix = typename Tensor<Scalar>::Matrix;
  using Map = typename Tensor<Scalar>::MatrixMap;
  using ConstMap = typename Tensor<Scalar>::ConstMatrixMap;

  const Tensor<Scalar>& x = input.value();
  const Tensor<Scalar>& w = weight.value();
  require_nchw(x, "conv2d input");
  require_nchw(w, "conv2d weight");
  require_same_tape(input, weight, "conv2d");
  if (options.stride < 1 || options.dilation < 1 || options.padding < 0)
    throw ConfigError("conv2d: stride and dilation must be positive, padding non-negative");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: input has " + std::to_string(x.dim(1)) +
                         " channels but weight expects " + std::to_string(w.dim(1)) + " (input " +
                         x.shape().str() + ", weight " + w.shape().str() + ")");
  const Index out_channels = w.dim(0);
  if (bias) {
    if (bias->value().size() != out_channels)
      throw DimensionError("conv2d: bias length " + std::to_string(bias->value().size()) +
                           " does not match " + std::to_string(out_channels) + " output channels");
  }

  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), 0, 0,
                 options.stride, options.padding, options.dilation};
  g.out_h = window_output_extent(g.height, g.kernel_h, g.stride, g.padding, g.dilation);
  g.out_w = window_output_extent(g.width, g.kernel_w, g.stride, g.padding, g.dilation);
  if (g.out_h < 1 || g.out_w < 1)
    throw ConfigError("conv2d: computed output extent " + std::to_string(g.out_h) + "x" +
                      std::to_string(g.out_w) + " is not positive for input " + x.shape().str() +
                      " and kernel " + w.shape().str());

  const Index batch = x.dim(0);
  Tensor<Scalar> out(Shape{batch, out_channels, g.out_h, g.out_w});
  ConstMap wm(w.data(), out_channels, g.col_rows());
  Matrix cols;
  if (!g.pointwise()) cols.resize(g.col_rows(), g.col_cols());
  const Index in_plane = g.channels * g.height * g.width;
  const Index out_plane = out_channels * g.col_cols();
  for (Index n = 0; n < batch; ++n) {
    Map om(out.data() + n * out_plane, out_channels, g.col_cols());
    if (g.pointwise()) {
      om.noalias() = wm * ConstMap(x.data() + n * in_plane, g.channels, g.col_cols());
    } else {
      im2col(x.data() + n * in_plane, g, cols.data());
      om.noalias() = wm * cols;
    }
    if (bias) om.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
                                  bias->value().data(), out_channels);
  }

  std::vector<Var<Scalar>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const Var<Scalar> in_var = input, w_var = weight;
  const Var<Scalar> b_var = bias ? *bias : Var<Scalar>();
  return input.tape().record(
      "conv2d", std::move(out), inputs,
      [in_var, w_var, b_var, g, batch, out_channels](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
        const Tensor<Scalar>& x = in_var.value();
        const Tensor<Scalar>& w = w_var.value();
        const Index in_plane = g.channels * g.height * g.width;
        const Index out_plane = out_channels * g.col_cols();
        ConstMap wm(w.data(), out_channels, g.col_rows());
        const bool need_x = tape.requires_grad(in_var);
        const bool need_w = tape.requires_grad(w_var);
        Tensor<Scalar> gx(x.shape());
        Tensor<Scalar> gw(w.shape());
        Map gwm(gw.data(), out_channels, g.col_rows());
        Matrix cols, gcols;
        if (!g.pointwise()) cols.resize(g.col_rows(), g.col_cols());
        for (Index n = 0; n < batch; ++n) {
          ConstMap gom(go.data() + n * out_plane, out_channels, g.col_cols());
          if (need_w) {
            if (g.pointwise()) {
              gwm.noalias() += gom * ConstMap(x.data() + n * in_plane, g.channels, g.col_cols())
                                         .transpose();
            } else {
              im2col(x.data() + n * in_plane, g, cols.data());
              gwm.noalias() += gom * cols.transpose();
            }
          }
          if (need_x) {
            if (g.pointwise()) {
              Map(gx.data() + n * in_plane, g.channels, g.col_cols()).noalias() =
                  wm.transpose() * gom;
            } else {
              gcols.noalias() = wm.transpose() * gom;
              col2im_add(gcols.data(), g, gx.data() + n * in_plane);
            }
          }
        }
        if (need_x) tape.accumulate(in_var, gx);
        if (need_w) tape.accumulate(w_var, gw);
        if (b_var.valid() && tape.requires_grad(b_var)) {
          Tensor<Scalar> gb(b_var.value().shape());
          for (Index n = 0; n < batch; ++n) {
            ConstMap gom(go.data() + n * out_plane, out_channels, g.col_cols());
            Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(gb.data(), out_channels) +=
                gom.rowwise().sum();
          }
          tape.accumulate(b_var, gb);
        }
      });
}

template <typename Scalar>
Var<Scalar> activation(const Var<Scalar>& input, const Activation& kind) {
  if (kind.kind == ActivationKind::identity) return input;
  const Tensor<Scalar>& x = input.value();
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = apply_activation(kind, x[i]);
  const Var<Scalar> in_var = input;
  return input.tape().record(
      activation_name(kind), std::move(out), {input},
      [in_var, kind](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
        const Tensor<Scalar>& x = in_var.value();
        Tensor<Scalar> gx(x.shape());
        for (Index i = 0; i < x.size(); ++i) gx[i] = go[i] * activation_derivative(kind, x[i]);
        tape.accumulate(in_var, gx);
      });
}

template <typename Scalar>
Var<Scalar> batchnorm(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                      Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var,
                      const BatchNormOptions& options) {
  const Tensor<Scalar>& x = input.value();
  require_nchw(x, "batchnorm input");
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.value().size() != channels || beta.value().size() != channels ||
      running_mean.size() != channels || running_var.size() != channels)
    throw DimensionError("batchnorm: per-channel parameters must have length " +
                         std::to_string(channels));
  const Index count = batch * plane;
  if (count < 1) throw ConfigError("batchnorm: no elements per channel");

  const Scalar eps = Scalar(options.epsilon);
  Tensor<Scalar> mean(Shape{channels}), inv_std(Shape{channels});
  Tensor<Scalar> normalized(x.shape());
  Tensor<Scalar> out(x.shape());
  const bool training = options.mode == NormMode::train;
  for (Index c = 0; c < channels; ++c) {
    Scalar m, v;
    if (training) {
      Scalar s = 0;
      for (Index n = 0; n < batch; ++n) {
        const Scalar* p = x.data() + (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) s += p[i];
      }
      m = s / Scalar(count);
      Scalar ss = 0;
      for (Index n = 0; n < batch; ++n) {
        const Scalar* p = x.data() + (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      v = ss / Scalar(count);
      const Scalar mom = Scalar(options.momentum);
      const Scalar unbiased = count > 1 ? ss / Scalar(count - 1) : v;
      running_mean[c] = (Scalar(1) - mom) * running_mean[c] + mom * m;
      running_var[c] = (Scalar(1) - mom) * running_var[c] + mom * unbiased;
    } else {
      m = running_mean[c];
      v = running_var[c];
    }
    mean[c] = m;
    inv_std[c] = Scalar(1) / std::sqrt(v + eps);
    const Scalar ga = gamma.value()[c], be = beta.value()[c];
    for (Index n = 0; n < batch; ++n) {
      const Index off = (n * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        const Scalar xh = (x[off + i] - m) * inv_std[c];
        normalized[off + i] = xh;
        out[off + i] = ga * xh + be;
      }
    }
  }

  const Var<Scalar> in_var = input, g_var = gamma, b_var = beta;
  return input.tape().record(
      "batchnorm", std::move(out), {input, gamma, beta},
      [in_var, g_var, b_var, normalized = std::move(normalized), inv_std = std::move(inv_std),
       training, batch, channels, plane, count](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
        Tensor<Scalar> gx(in_var.value().shape());
        Tensor<Scalar> gg(Shape{channels}), gb(Shape{channels});
        for (Index c = 0; c < channels; ++c) {
          Scalar sum_g = 0, sum_gx = 0;
          for (Index n = 0; n < batch; ++n) {
            const Index off = (n * channels + c) * plane;
            for (Index i = 0; i < plane; ++i) {
              sum_g += go[off + i];
              sum_gx += go[off + i] * normalized[off + i];
            }
          }
          gg[c] = sum_gx;
          gb[c] = sum_g;
          const Scalar ga = g_var.value()[c];
          const Scalar k = ga * inv_std[c];
          for (Index n = 0; n < batch; ++n) {
            const Index off = (n * channels + c) * plane;
            for (Index i = 0; i < plane; ++i) {
              if (training) {
                gx[off + i] = k * (go[off + i] - sum_g / Scalar(count) -
                                   normalized[off + i] * sum_gx / Scalar(count));
              } else {
                gx[off + i] = k * go[off + i];
              }
            }
          }
        }
        tape.accumulate(in_var, gx);
        tape.accumulate(g_var, gg);
        tape.accumulate(b_var, gb);
      });
}

template <typename Scalar>
Var<Scalar> maxpool2d(const Var<Scalar>& input, Index kernel, Index stride, Index padding) {
  const Tensor<Scalar>& x = input.value();
  require_nchw(x, "maxpool2d input");
  if (kernel < 1 || stride < 1 || padding < 0)
    throw ConfigError("maxpool2d: kernel and stride must be positive, padding non-negative");
  const Index batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = window_output_extent(h, kernel, stride, padding);
  const Index ow = window_output_extent(w, kernel, stride, padding);
  if (oh < 1 || ow < 1)
    throw ConfigError("maxpool2d: kernel " + std::to_string(kernel) + " exceeds padded input " +
                      x.shape().str());
  Tensor<Scalar> out(Shape{batch, channels, oh, ow});
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  for (Index nc = 0; nc < batch * channels; ++nc) {
    const Scalar* plane = x.data() + nc * h * w;
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        Index best_idx = -1;
        for (Index ki = 0; ki < kernel; ++ki) {
          const Index r = i * stride - padding + ki;
          if (r < 0 || r >= h) continue;
          for (Index kj = 0; kj < kernel; ++kj) {
            const Index col = j * stride - padding + kj;
            if (col < 0 || col >= w) continue;
            const Scalar v = plane[r * w + col];
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = r * w + col;
            }
          }
        }
        // A window lying entirely in the padding yields 0 and routes no gradient.
        const Index o = (nc * oh + i) * ow + j;
        out[o] = best_idx < 0 ? Scalar(0) : best;
        argmax[static_cast<std::size_t>(o)] = best_idx < 0 ? -1 : nc * h * w + best_idx;
      }
    }
  }
  const Var<Scalar> in_var = input;
  return input.tape().record(
      "maxpool2d", std::move(out), {input},
      [in_var, argmax = std::move(argmax)](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
        Tensor<Scalar> gx(in_var.value().shape());
        for (std::size_t o = 0; o < argmax.size(); ++o)
          if (argmax[o] >= 0) gx[argmax[o]] += go[Index(o)];
        tape.accumulate(in_var, gx);
      });
}

template <typename Scalar>
Var<Scalar> global_avgpool(const Var<Scalar>& input) {
  const Tensor<Scalar>& x = input.value();
  require_nchw(x, "global_avgpool input");
  const Index nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> out(Shape{x.dim(0), x.dim(1), 1, 1});
  for (Index i = 0; i < nc; ++i) out[i] = x.values().segment(i * plane, plane).mean();
  const Var<Scalar> in_var = input;
  return input.tape().record("global_avgpool", std::move(out), {input},
                             [in_var, nc, plane](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
                               Tensor<Scalar> gx(in_var.value().shape());
                               for (Index i = 0; i < nc; ++i)
                                 gx.values().segment(i * plane, plane).setConstant(
                                     go[i] / Scalar(plane));
                               tape.accumulate(in_var, gx);
                             });
}

template <typename Scalar>
Var<Scalar> resize_nearest(const Var<Scalar>& input, Index height, Index width) {
  const Tensor<Scalar>& x = input.value();
  require_nchw(x, "resize_nearest input");
  if (height < 1 || width < 1)
    throw ConfigError("resize_nearest: target size " + std::to_string(height) + "x" +
                      std::to_string(width) + " must be positive");
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  // Source index floor(dst * in / out), exact in integers.
  std::vector<Index> src(static_cast<std::size_t>(height * width));
  for (Index i = 0; i < height; ++i)
    for (Index j = 0; j < width; ++j)
      src[static_cast<std::size_t>(i * width + j)] = (i * h / height) * w + (j * w / width);
  Tensor<Scalar> out(Shape{x.dim(0), x.dim(1), height, width});
  for (Index p = 0; p < nc; ++p)
    for (Index k = 0; k < height * width; ++k)
      out[p * height * width + k] = x[p * h * w + src[static_cast<std::size_t>(k)]];
  const Var<Scalar> in_var = input;
  return input.tape().record(
      "resize_nearest", std::move(out), {input},
      [in_var, src = std::move(src), nc, h, w, height, width](Tape<Scalar>& tape,
                                                               const Tensor<Scalar>& go) {
        Tensor<Scalar> gx(in_var.value().shape());
        for (Index p = 0; p < nc; ++p)
          for (Index k = 0; k < height * width; ++k)
            gx[p * h * w + src[static_cast<std::size_t>(k)]] += go[p * height * width + k];
        tape.accumulate(in_var, gx);
      });
}

template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> inputs) {
  if (inputs.empty()) throw ConfigError("concat: no inputs");
  const Shape& first = inputs[0].shape();
  require_nchw(inputs[0].value(), "concat input");
  Index channels = 0;
  for (const auto& in : inputs) {
    const Shape& s = in.shape();
    if (s.rank() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3])
      throw DimensionError("concat: extent mismatch between " + first.str() + " and " + s.str());
    channels += s[1];
  }
  const Index batch = first[0], plane = first[2] * first[3];
  Tensor<Scalar> out(Shape{batch, channels, first[2], first[3]});
  for (Index n = 0; n < batch; ++n) {
    Index offset = 0;
    for (const auto& in : inputs) {
      const Index c = in.dim(1);
      out.values().segment((n * channels + offset) * plane, c * plane) =
          in.value().values().segment(n * c * plane, c * plane);
      offset += c;
    }
  }
  std::vector<Var<Scalar>> ins(inputs.begin(), inputs.end());
  return inputs[0].tape().record(
      "concat", std::move(out), ins,
      [ins, batch, channels, plane](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
        Index offset = 0;
        for (const auto& in : ins) {
          const Index c = in.dim(1);
          if (tape.requires_grad(in)) {
            Tensor<Scalar> gx(in.shape());
            for (Index n = 0; n < batch; ++n)
              gx.values().segment(n * c * plane, c * plane) =
                  go.values().segment((n * channels + offset) * plane, c * plane);
            tape.accumulate(in, gx);
          }
          offset += c;
        }
      });
}

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& input, Index begin, Index count) {
  const Tensor<Scalar>& x = input.value();
  require_nchw(x, "slice_channels input");
  const Index channels = x.dim(1);
  if (begin < 0 || count < 1 || begin + count > channels)
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + std::to_string(channels) +
                         " channels");
  const Index batch = x.dim(0), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> out(Shape{batch, count, x.dim(2), x.dim(3)});
  for (Index n = 0; n < batch; ++n)
    out.values().segment(n * count * plane, count * plane) =
        x.values().segment((n * channels + begin) * plane, count * plane);
  const Var<Scalar> in_var = input;
  return input.tape().record(
      "slice_channels", std::move(out), {input},
      [in_var, batch, channels, plane, begin, count](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
        Tensor<Scalar> gx(in_var.value().shape());
        for (Index n = 0; n < batch; ++n)
          gx.values().segment((n * channels + begin) * plane, count * plane) =
              go.values().segment(n * count * plane, count * plane);
        tape.accumulate(in_var, gx);
      });
}

template <typename Scalar>
Var<Scalar> stride2_slice(const Var<Scalar>& input, Index row_offset, Index col_offset) {
  const Tensor<Scalar>& x = input.value();
  require_nchw(x, "stride2_slice input");
  if ((row_offset != 0 && row_offset != 1) || (col_offset != 0 && col_offset != 1))
    throw ConfigError("stride2_slice: offsets must be 0 or 1");
  const Index h = x.dim(2), w = x.dim(3);
  const Index oh = (h - row_offset + 1) / 2, ow = (w - col_offset + 1) / 2;
  if (oh < 1 || ow < 1) throw DimensionError("stride2_slice: input " + x.shape().str() + " too small");
  const Index nc = x.dim(0) * x.dim(1);
  Tensor<Scalar> out(Shape{x.dim(0), x.dim(1), oh, ow});
  for (Index p = 0; p < nc; ++p)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j)
        out[(p * oh + i) * ow + j] = x[(p * h + 2 * i + row_offset) * w + 2 * j + col_offset];
  const Var<Scalar> in_var = input;
  return input.tape().record(
      "stride2_slice", std::move(out), {input},
      [in_var, nc, h, w, oh, ow, row_offset, col_offset](Tape<Scalar>& tape,
                                                         const Tensor<Scalar>& go) {
        Tensor<Scalar> gx(in_var.value().shape());
        for (Index p = 0; p < nc; ++p)
          for (Index i = 0; i < oh; ++i)
            for (Index j = 0; j < ow; ++j)
              gx[(p * h + 2 * i + row_offset) * w + 2 * j + col_offset] = go[(p * oh + i) * ow + j];
        tape.accumulate(in_var, gx);
      });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(a, b, "add");
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor<Scalar> out(a.shape(), typename Tensor<Scalar>::Array(a.value().values() + b.value().values()));
  const Var<Scalar> av = a, bv = b;
  return a.tape().record("add", std::move(out), {a, b},
                         [av, bv](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
                           tape.accumulate(av, go);
                           tape.accumulate(bv, go);
                         });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), typename Tensor<Scalar>::Array(a.value().values() * factor));
  const Var<Scalar> av = a;
  return a.tape().record("scale", std::move(out), {a},
                         [av, factor](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
                           tape.accumulate(
                               av, Tensor<Scalar>(go.shape(), typename Tensor<Scalar>::Array(
                                                                  go.values() * factor)));
                         });
}

template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& a, const Tensor<Scalar>& weights) {
  if (a.shape() != weights.shape())
    throw DimensionError("weighted_sum: shape mismatch " + a.shape().str() + " vs " +
                         weights.shape().str());
  Tensor<Scalar> out = Tensor<Scalar>::scalar((a.value().values() * weights.values()).sum());
  const Var<Scalar> av = a;
  return a.tape().record("weighted_sum", std::move(out), {a},
                         [av, weights](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
                           tape.accumulate(av, Tensor<Scalar>(weights.shape(),
                                                              typename Tensor<Scalar>::Array(
                                                                  weights.values() * go[0])));
                         });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  return weighted_sum(a, Tensor<Scalar>(a.shape(), Scalar(1)));
}

#define TCYOLO_INSTANTIATE_OPS(S)                                                              \
  template S softplus<S>(S);                                                                   \
  template S apply_activation<S>(const Activation&, S);                                        \
  template S activation_derivative<S>(const Activation&, S);                                   \
  template Var<S> conv2d<S>(const Var<S>&, const Var<S>&, const Var<S>*, const Conv2dOptions&); \
  template Var<S> activation<S>(const Var<S>&, const Activation&);                             \
  template Var<S> batchnorm<S>(const Var<S>&, const Var<S>&, const Var<S>&, Tensor<S>&,        \
                               Tensor<S>&, const BatchNormOptions&);                           \
  template Var<S> maxpool2d<S>(const Var<S>&, Index, Index, Index);                            \
  template Var<S> global_avgpool<S>(const Var<S>&);                                            \
  template Var<S> resize_nearest<S>(const Var<S>&, Index, Index);                              \
  template Var<S> concat_channels<S>(std::span<const Var<S>>);                                 \
  template Var<S> slice_channels<S>(const Var<S>&, Index, Index);                              \
  template Var<S> stride2_slice<S>(const Var<S>&, Index, Index);                               \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                        \
  template Var<S> scale<S>(const Var<S>&, S);                                                  \
  template Var<S> weighted_sum<S>(const Var<S>&, const Tensor<S>&);                            \
  template Var<S> sum<S>(const Var<S>&);

TCYOLO_INSTANTIATE_OPS(double)
TCYOLO_INSTANTIATE_OPS(float)

}  // namespace tcyolo
