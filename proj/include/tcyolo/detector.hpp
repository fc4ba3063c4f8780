#pragma once

#include <map>
#include <string>
#include <vector>

#include "tcyolo/graph.hpp"
#include "tcyolo/image.hpp"

namespace tcyolo {

struct DetectOptions {
  double score_threshold = 0.25;
  double nms_iou = 0.45;
  std::size_t max_detections = 300;
};

/// A graph, its float parameters, anchors and input size.
class Detector {
 public:
  /// The config must carry anchors. Parameters start empty; call initialize
  /// or load them from a checkpoint.
  Detector(GraphConfig config, Index input_size);

  void initialize(std::uint64_t seed);

  const GraphConfig& config() const { return config_; }
  const ModelGraph& template_graph() const { return template_; }
  const ModelGraph& graph() const { return graph_; }
  ParameterStore<float>& params() { return params_; }
  const ParameterStore<float>& params() const { return params_; }
  const AnchorSet& anchors() const { return *config_.anchors; }
  Index input_size() const { return input_size_; }
  const std::array<double, 3>& strides() const { return strides_; }

  std::array<Var<float>, 3> forward(BlockContext<float>& ctx, const Var<float>& input) const;

  /// Raw boxes in network-input pixels, one image (index `n`) of a batch.
  std::vector<BoxD> decode(const std::array<Var<float>, 3>& heads, Index n = 0) const;

  /// Letterbox, forward in inference mode, decode, DIoU-NMS and map back to
  /// source pixels (clamped to the image).
  std::vector<BoxD> detect(const Image& image, const DetectOptions& options) const;

  /// Node names usable with `activation`. Loop nodes are listed per step;
  /// a bare loop name refers to the last step.
  std::vector<std::string> layer_names() const;
  Tensor<float> activation(const Image& image, const std::string& layer) const;

 private:
  GraphConfig config_;
  ModelGraph template_, graph_;
  Index input_size_;
  std::array<double, 3> strides_{};
  // inference reads parameters through a tape leaf; the store is never written
  mutable ParameterStore<float> params_;
};

/// Per-channel mean of a 1 x C x H x W map, min-max normalized to 8 bits.
std::vector<std::uint8_t> activation_map(const Tensor<float>& t);

// ---------------------------------------------------------------------------
// Checkpoints (see docs/checkpoint-format.md).

struct CheckpointTensor {
  std::string name;
  ParamRole role = ParamRole::weight;
  Tensor<float> value;
};

struct Checkpoint {
  std::string graph_yaml;
  Index input_size = 0;
  std::map<std::string, std::string> meta;
  std::vector<CheckpointTensor> tensors;
};

void save_checkpoint(const std::string& path, const Detector& detector,
                     const std::map<std::string, std::string>& meta = {});
Checkpoint read_checkpoint(const std::string& path);

/// Copies checkpoint tensors into a declared store. The first missing, extra
/// or shape-mismatched tensor is a DimensionError naming it.
void load_parameters(ParameterStore<float>& store, const Checkpoint& ckpt, const std::string& origin);

/// Detector from a checkpoint's embedded graph, or from `graph` when given
/// (anchors and input size still come from the checkpoint).
Detector load_detector(const std::string& path, const GraphConfig* graph = nullptr);

}  // namespace tcyolo
