#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tcyolo/ops.hpp"
#include "tcyolo/random.hpp"

namespace tcyolo {

/// Forward-pass state shared by the blocks: the tape, the parameter store and
/// the batchnorm mode. Parameter leaves are created once per tape and reused,
/// so weights shared between unrolled steps accumulate into one gradient.
template <typename Scalar>
class BlockContext {
 public:
  BlockContext(Tape<Scalar>& tape, ParameterStore<Scalar>& params, BatchNormOptions bn = {})
      : tape_(tape), params_(params), bn_(bn) {}

  Tape<Scalar>& tape() { return tape_; }
  ParameterStore<Scalar>& params() { return params_; }
  const BatchNormOptions& bn() const { return bn_; }

  Var<Scalar> param(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    Var<Scalar> v = tape_.parameter(params_.get(name));
    leaves_.emplace(name, v);
    return v;
  }
  Tensor<Scalar>& buffer(const std::string& name) { return params_.get(name).value; }

 private:
  Tape<Scalar>& tape_;
  ParameterStore<Scalar>& params_;
  BatchNormOptions bn_;
  std::map<std::string, Var<Scalar>> leaves_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) fill for convolution weights.
template <typename Scalar>
void init_conv_weight(Parameter<Scalar>& p, Rng& rng);

// ---------------------------------------------------------------------------
// CBL: convolution (no bias) -> batchnorm -> activation.

struct CblSpec {
  Index out_channels = 1;
  Index kernel = 1;
  Index stride = 1;
  Index padding = -1;  // -1: kernel / 2
  Activation act{ActivationKind::leaky_relu, 0.1};

  Index pad() const { return padding < 0 ? kernel / 2 : padding; }
};

template <typename Scalar>
void declare_cbl(ParameterStore<Scalar>& store, const std::string& key, Index in_channels,
                 const CblSpec& spec, Rng& rng);
template <typename Scalar>
Var<Scalar> cbl_forward(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x,
                        const CblSpec& spec);

/// Batchnorm with parameters under `key`: gamma, beta and running statistics.
template <typename Scalar>
void declare_batchnorm(ParameterStore<Scalar>& store, const std::string& key, Index channels);
template <typename Scalar>
Var<Scalar> batchnorm_forward(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x);

// ---------------------------------------------------------------------------
// Focus.

/// Channel concatenation of the four stride-2 slices at offsets (0,0), (1,0),
/// (0,1), (1,1) (row, column). Throws ConfigError on odd extents.
template <typename Scalar>
Var<Scalar> focus_slice(const Var<Scalar>& x);

/// Exact inverse of focus_slice.
template <typename Scalar>
Tensor<Scalar> focus_unslice(const Tensor<Scalar>& sliced);

struct FocusSpec {
  Index out_channels = 32;
  Index kernel = 3;
  Activation act{ActivationKind::mish};
};

template <typename Scalar>
void declare_focus(ParameterStore<Scalar>& store, const std::string& key, Index in_channels,
                   const FocusSpec& spec, Rng& rng);
template <typename Scalar>
Var<Scalar> focus_forward(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x,
                          const FocusSpec& spec);

// ---------------------------------------------------------------------------
// CSPDense.
//
// x0 is split into x0' (first half) and x0'' (second half). Dense layer j sees
// [x0'', y_1 .. y_{j-1}] and emits `growth` channels. x_T is a 1x1 transition
// over [x0'', y_1 .. y_m] and x_U a 1x1 transition over [x0', x_T]. Dense
// layers and transitions are pre-activation (BN -> act -> conv), so x0' only
// meets a per-channel BN, the activation and the x_U weights.

struct CspDenseSpec {
  Index dense_layers = 2;
  Index growth = 1;
  Index out_channels = 0;  // 0: same as input
  Activation act{ActivationKind::mish};
};

struct CspDenseLayout {
  Index half = 0;
  std::vector<Index> dense_in;  // input channels of each dense layer
  Index transition_in = 0;      // x0'' plus all dense outputs
  Index transition_out = 0;     // x_T channels
  Index merge_in = 0;           // x0' plus x_T
  Index out = 0;
};

CspDenseLayout csp_dense_layout(Index in_channels, const CspDenseSpec& spec);

template <typename Scalar>
void declare_csp_dense(ParameterStore<Scalar>& store, const std::string& key, Index in_channels,
                       const CspDenseSpec& spec, Rng& rng);
template <typename Scalar>
Var<Scalar> csp_dense_forward(BlockContext<Scalar>& ctx, const std::string& key,
                              const Var<Scalar>& x0, const CspDenseSpec& spec);

// ---------------------------------------------------------------------------
// CIO accounting.

enum class CioKind { dense, partial_dense };

/// Exact CIO value held in half units, since the partial form can be
/// half-integral. `reported()` rounds up.
struct Cio {
  Index half_units = 0;

  double value() const { return double(half_units) / 2.0; }
  Index reported() const { return (half_units + 1) / 2; }
  friend bool operator==(const Cio&, const Cio&) = default;
};

/// dense: c*m + (m^2 + m)*d/2; partial_dense: (c*m + (m^2 + m)*d) / 2.
Cio cio(CioKind kind, Index c, Index m, Index d);

// ---------------------------------------------------------------------------
// SPP.

struct SppParams {
  Index kernel = 0;
  Index stride = 0;
  Index padding = 0;
  Index padded = 0;
};

/// Adaptive-bin pooling parameters for `n` bins along an axis of length h_in:
/// K = S = ceil(h_in / n), P = floor((K*n - h_in + 1) / 2), H = 2P + h_in.
SppParams spp_params(Index h_in, Index n);

/// Kernel of the same-size pooling branch for bin count n on an extent h:
/// ceil(h / n), bumped to the next odd value.
Index spp_kernel(Index h, Index n);

/// Stride-1 same-size max pools (padding k/2) for each bin, concatenated after
/// the input: output channels = C * (1 + bins).
template <typename Scalar>
Var<Scalar> spp_forward(const Var<Scalar>& x, std::span<const Index> bins);

// ---------------------------------------------------------------------------
// ASPP.

struct AsppSpec {
  std::array<Index, 3> kernels{1, 3, 3};
  std::array<Index, 3> rates{1, 3, 6};
  std::array<Index, 3> paddings{0, 3, 6};
};

template <typename Scalar>
void declare_aspp(ParameterStore<Scalar>& store, const std::string& key, Index channels,
                  const AsppSpec& spec, Rng& rng);

/// Three dilated conv+ReLU branches and a global-pool -> 1x1 conv -> ReLU ->
/// resize branch, each with C/4 channels, concatenated. Shape preserving.
template <typename Scalar>
Var<Scalar> aspp_forward(BlockContext<Scalar>& ctx, const std::string& key, const Var<Scalar>& x,
                         const AsppSpec& spec);

}  // namespace tcyolo
