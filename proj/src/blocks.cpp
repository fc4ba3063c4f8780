#include "tcyolo/blocks.hpp"

#include <cmath>

namespace tcyolo {

template <typename Scalar>
void init_conv_weight(Parameter<Scalar>& p, Rng& rng) {
  const auto& s = p.value.shape();
  const Index fan_in = s.numel() / s[0];
  const double bound = 1.0 / std::sqrt(double(fan_in));
  for (Index i = 0; i < p.value.size(); ++i) p.value[i] = Scalar(uniform(rng, -bound, bound));
}

template <typename Scalar>
void declare_batchnorm(ParameterStore<Scalar>& store, const std::string& key, Index channels) {
  store.declare(key + ".gamma", Shape{channels}, ParamRole::norm_scale, Scalar(1));
  store.declare(key + ".beta", Shape{channels}, ParamRole::bias, Scalar(0));
  store.declare(key + ".running_mean", Shape{channels}, ParamRole::buffer, Scalar(0));
  store.declare(key + ".running_var", Shape{channels}, ParamRole::buffer, Scalar(1));
}

template <typename Scalar>
Var<Scalar> batchnorm_forward(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x) {
  return batchnorm(x, ctx.param(key + ".gamma"), ctx.param(key + ".beta"),
                   ctx.buffer(key + ".running_mean"), ctx.buffer(key + ".running_var"), ctx.bn());
}

// Declares a conv weight once; shared keys keep the first initialization.
template <typename Scalar>
static void declare_conv(ParameterStore<Scalar>& store, const std::string& name, Index out,
                         Index in, Index kernel, Rng& rng) {
  const bool fresh = !store.contains(name);
  auto& p = store.declare(name, Shape{out, in, kernel, kernel}, ParamRole::weight);
  if (fresh) init_conv_weight(p, rng);
}

template <typename Scalar>
void declare_cbl(ParameterStore<Scalar>& store, const std::string& key, Index in_channels,
                 const CblSpec& spec, Rng& rng) {
  declare_conv(store, key + ".conv.weight", spec.out_channels, in_channels, spec.kernel, rng);
  declare_batchnorm(store, key + ".bn", spec.out_channels);
}

template <typename Scalar>
Var<Scalar> cbl_forward(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x,
                        const CblSpec& spec) {
  auto y = conv2d(x, ctx.param(key + ".conv.weight"), Conv2dOptions{spec.stride, spec.pad(), 1});
  return activation(batchnorm_forward(ctx, key + ".bn", y), spec.act);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> focus_slice(const Var<Scalar>& x) {
  require_nchw(x.value(), "focus input");
  if (x.dim(2) % 2 || x.dim(3) % 2)
    throw ConfigError("focus needs even spatial extents, got " + x.shape().str());
  return concat_channels({stride2_slice(x, 0, 0), stride2_slice(x, 1, 0), stride2_slice(x, 0, 1),
                          stride2_slice(x, 1, 1)});
}

template <typename Scalar>
Tensor<Scalar> focus_unslice(const Tensor<Scalar>& s) {
  require_nchw(s, "focus_unslice input");
  if (s.dim(1) % 4) throw DimensionError("focus_unslice needs a multiple of 4 channels, got " + s.shape().str());
  const Index n = s.dim(0), c = s.dim(1) / 4, h = s.dim(2), w = s.dim(3);
  Tensor<Scalar> out(Shape{n, c, 2 * h, 2 * w});
  const Index offsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (Index b = 0; b < n; ++b)
    for (int k = 0; k < 4; ++k)
      for (Index ch = 0; ch < c; ++ch)
        for (Index i = 0; i < h; ++i)
          for (Index j = 0; j < w; ++j)
            out.at(b, ch, 2 * i + offsets[k][0], 2 * j + offsets[k][1]) = s.at(b, k * c + ch, i, j);
  return out;
}

template <typename Scalar>
void declare_focus(ParameterStore<Scalar>& store, const std::string& key, Index in_channels,
                   const FocusSpec& spec, Rng& rng) {
  declare_cbl(store, key, 4 * in_channels, CblSpec{spec.out_channels, spec.kernel, 1, -1, spec.act}, rng);
}

template <typename Scalar>
Var<Scalar> focus_forward(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x,
                          const FocusSpec& spec) {
  return cbl_forward(ctx, key, focus_slice(x), CblSpec{spec.out_channels, spec.kernel, 1, -1, spec.act});
}

// ---------------------------------------------------------------------------

CspDenseLayout csp_dense_layout(Index in_channels, const CspDenseSpec& spec) {
  if (in_channels < 2 || in_channels % 2)
    throw ConfigError("csp_dense needs an even input channel count, got " + std::to_string(in_channels));
  if (spec.dense_layers < 1 || spec.growth < 1)
    throw ConfigError("csp_dense needs m >= 1 and d >= 1 (zero-size dense path)");
  CspDenseLayout l;
  l.out = spec.out_channels > 0 ? spec.out_channels : in_channels;
  if (l.out % 2) throw ConfigError("csp_dense output channels must be even, got " + std::to_string(l.out));
  l.half = in_channels / 2;
  for (Index j = 0; j < spec.dense_layers; ++j) l.dense_in.push_back(l.half + j * spec.growth);
  l.transition_in = l.half + spec.dense_layers * spec.growth;
  l.transition_out = l.out / 2;
  l.merge_in = l.half + l.transition_out;
  return l;
}

template <typename Scalar>
void declare_csp_dense(ParameterStore<Scalar>& store, const std::string& key, Index in_channels,
                       const CspDenseSpec& spec, Rng& rng) {
  const auto l = csp_dense_layout(in_channels, spec);
  for (std::size_t j = 0; j < l.dense_in.size(); ++j) {
    const std::string k = key + ".dense" + std::to_string(j);
    declare_batchnorm(store, k + ".bn", l.dense_in[j]);
    declare_conv(store, k + ".conv.weight", spec.growth, l.dense_in[j], 3, rng);
  }
  declare_batchnorm(store, key + ".transition.bn", l.transition_in);
  declare_conv(store, key + ".transition.conv.weight", l.transition_out, l.transition_in, 1, rng);
  declare_batchnorm(store, key + ".merge.bn", l.merge_in);
  declare_conv(store, key + ".merge.conv.weight", l.out, l.merge_in, 1, rng);
}

template <typename Scalar>
static Var<Scalar> preact_conv(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x,
                               const Activation& act, Index kernel) {
  auto y = activation(batchnorm_forward(ctx, key + ".bn", x), act);
  return conv2d(y, ctx.param(key + ".conv.weight"), Conv2dOptions{1, kernel / 2, 1});
}

template <typename Scalar>
Var<Scalar> csp_dense_forward(BlockContext<Scalar>& ctx, const std::string& key,
                              const Var<Scalar>& x0, const CspDenseSpec& spec) {
  require_nchw(x0.value(), "csp_dense input");
  const auto l = csp_dense_layout(x0.dim(1), spec);
  const auto skip = slice_channels(x0, 0, l.half);
  std::vector<Var<Scalar>> path{slice_channels(x0, l.half, l.half)};
  for (std::size_t j = 0; j < l.dense_in.size(); ++j) {
    auto in = path.size() == 1 ? path[0] : concat_channels<Scalar>(path);
    path.push_back(preact_conv(ctx, key + ".dense" + std::to_string(j), in, spec.act, 3));
  }
  auto xt = preact_conv(ctx, key + ".transition", concat_channels<Scalar>(path), spec.act, 1);
  return preact_conv(ctx, key + ".merge", concat_channels({skip, xt}), spec.act, 1);
}

// ---------------------------------------------------------------------------

Cio cio(CioKind kind, Index c, Index m, Index d) {
  if (c < 1 || m < 1) throw ConfigError("cio needs c >= 1 and m >= 1");
  if (d < 0) throw ConfigError("cio needs d >= 0");
  const Index cm = c * m, tri = (m * m + m) * d;
  // twice the value: dense 2cm + tri, partial cm + tri
  if (kind == CioKind::dense) return Cio{2 * cm + tri};
  return Cio{cm + tri};
}

SppParams spp_params(Index h_in, Index n) {
  if (h_in < 1 || n < 1) throw ConfigError("spp_params needs h_in >= 1 and n >= 1");
  SppParams p;
  p.kernel = (h_in + n - 1) / n;
  p.stride = p.kernel;
  p.padding = (p.kernel * n - h_in + 1) / 2;
  p.padded = 2 * p.padding + h_in;
  return p;
}

Index spp_kernel(Index h, Index n) {
  Index k = spp_params(h, n).kernel;
  return k % 2 ? k : k + 1;
}

template <typename Scalar>
Var<Scalar> spp_forward(const Var<Scalar>& x, std::span<const Index> bins) {
  require_nchw(x.value(), "spp input");
  if (bins.empty()) throw ConfigError("spp needs at least one bin");
  std::vector<Var<Scalar>> parts{x};
  for (Index n : bins) {
    const Index kh = spp_kernel(x.dim(2), n), kw = spp_kernel(x.dim(3), n);
    const Index k = std::max(kh, kw);
    if (k / 2 > x.dim(2) || k / 2 > x.dim(3))
      throw ConfigError("spp kernel " + std::to_string(k) + " exceeds padded input " + x.shape().str());
    parts.push_back(maxpool2d(x, k, 1, k / 2));
  }
  return concat_channels<Scalar>(parts);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
void declare_aspp(ParameterStore<Scalar>& store, const std::string& key, Index channels,
                  const AsppSpec& spec, Rng& rng) {
  if (channels % 4)
    throw ConfigError("aspp needs channels divisible by 4, got " + std::to_string(channels));
  const Index q = channels / 4;
  for (int b = 0; b < 4; ++b) {
    const std::string k = key + ".branch" + std::to_string(b);
    const Index kernel = b < 3 ? spec.kernels[std::size_t(b)] : 1;
    declare_conv(store, k + ".weight", q, channels, kernel, rng);
    store.declare(k + ".bias", Shape{q}, ParamRole::bias);
  }
}

template <typename Scalar>
Var<Scalar> aspp_forward(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x,
                         const AsppSpec& spec) {
  require_nchw(x.value(), "aspp input");
  if (x.dim(1) % 4)
    throw ConfigError("aspp needs channels divisible by 4, got " + x.shape().str());
  const Activation relu{ActivationKind::relu};
  std::vector<Var<Scalar>> parts;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::string k = key + ".branch" + std::to_string(b);
    auto bias = ctx.param(k + ".bias");
    parts.push_back(activation(conv2d(x, ctx.param(k + ".weight"), &bias,
                                      Conv2dOptions{1, spec.paddings[b], spec.rates[b]}),
                               relu));
  }
  auto bias = ctx.param(key + ".branch3.bias");
  auto pooled = activation(conv2d(global_avgpool(x), ctx.param(key + ".branch3.weight"), &bias, Conv2dOptions{}),
                           relu);
  parts.push_back(resize_nearest(pooled, x.dim(2), x.dim(3)));
  for (const auto& p : parts)
    if (p.dim(2) != x.dim(2) || p.dim(3) != x.dim(3))
      throw ConfigError("aspp branch changes spatial extent: " + p.shape().str() + " from " + x.shape().str());
  return concat_channels<Scalar>(parts);
}

#define TCYOLO_INSTANTIATE_BLOCKS(S)                                                              \
  template void init_conv_weight<S>(Parameter<S>&, Rng&);                                       \
  template void declare_batchnorm<S>(ParameterStore<S>&, const std::string&, Index);            \
  template Var<S> batchnorm_forward<S>(BlockContext<S>&, const std::string&, const Var<S>&);    \
  template void declare_cbl<S>(ParameterStore<S>&, const std::string&, Index, const CblSpec&,   \
                               Rng&);                                                           \
  template Var<S> cbl_forward<S>(BlockContext<S>&, const std::string&, const Var<S>&,           \
                                 const CblSpec&);                                               \
  template Var<S> focus_slice<S>(const Var<S>&);                                                \
  template Tensor<S> focus_unslice<S>(const Tensor<S>&);                                        \
  template void declare_focus<S>(ParameterStore<S>&, const std::string&, Index,                 \
                                 const FocusSpec&, Rng&);                                       \
  template Var<S> focus_forward<S>(BlockContext<S>&, const std::string&, const Var<S>&,         \
                                   const FocusSpec&);                                           \
  template void declare_csp_dense<S>(ParameterStore<S>&, const std::string&, Index,             \
                                     const CspDenseSpec&, Rng&);                                \
  template Var<S> csp_dense_forward<S>(BlockContext<S>&, const std::string&, const Var<S>&,     \
                                       const CspDenseSpec&);                                    \
  template Var<S> spp_forward<S>(const Var<S>&, std::span<const Index>);                        \
  template void declare_aspp<S>(ParameterStore<S>&, const std::string&, Index, const AsppSpec&, \
                                Rng&);                                                          \
  template Var<S> aspp_forward<S>(BlockContext<S>&, const std::string&, const Var<S>&,          \
                                  const AsppSpec&);

TCYOLO_INSTANTIATE_BLOCKS(double)
TCYOLO_INSTANTIATE_BLOCKS(float)

}  // namespace tcyolo
