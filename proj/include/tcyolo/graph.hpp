#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tcyolo/blocks.hpp"
#include "tcyolo/boxgeom.hpp"

namespace tcyolo {

enum class LayerKind { input, focus, cbl, csp_dense, spp, aspp, rfp_fuse, upsample, concat, detect_head };

std::string layer_kind_name(LayerKind kind);

/// Where a node sits relative to the RFP recursion. Loop nodes are repeated
/// per unrolled step; pre nodes run once before and post nodes once after.
enum class Phase { pre, loop, post };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::cbl;
  std::vector<std::string> inputs;
  std::string param_key;  // parameters live under this prefix; shared across steps
  Phase phase = Phase::pre;
  std::string role;       // "B1".."B3", "F1".."F3", "R1".."R3" or empty
  int step = 0;           // unrolled step (1-based), 0 outside the loop
  std::string feedback;   // template graph: R node feeding this fuse from the previous step

  Index out_channels = 0;  // cbl, focus, csp_dense, detect_head
  Index kernel = 1;
  Index stride = 1;
  Index padding = -1;
  Index dense_layers = 0;  // csp_dense m
  Index growth = 0;        // csp_dense d
  std::vector<Index> bins; // spp
  AsppSpec aspp;
  Activation act{ActivationKind::leaky_relu, 0.1};
};

struct ModelGraph {
  std::vector<LayerSpec> nodes;  // topological order
  std::string input = "image";
  Index input_channels = 3;
  std::array<std::string, 3> heads;  // strides 8, 16, 32
  int num_classes = 1;
  bool unrolled = false;

  std::size_t index_of(const std::string& name) const;
  const LayerSpec& node(const std::string& name) const { return nodes[index_of(name)]; }
  bool contains(const std::string& name) const;

  /// Checks names are unique, inputs refer to existing nodes, the input graph
  /// is acyclic, and reorders nodes topologically (stable).
  void validate();
};

// ---------------------------------------------------------------------------
// Graph configuration (YAML).

struct StageConfig {
  Index width = 64;
  Index dense_layers = 2;
  Index growth = 0;  // 0: width / 2
};

struct GraphConfig {
  std::string name = "tc-yolo";
  int num_classes = 1;
  Activation backbone_act{ActivationKind::mish};
  Activation neck_act{ActivationKind::leaky_relu, 0.1};
  Index focus_channels = 32;
  Index focus_kernel = 3;
  std::vector<StageConfig> stages{{64, 2, 32}, {128, 2, 64}, {256, 2, 128}, {512, 2, 256}};
  std::vector<Index> spp_bins{1, 2, 4};
  std::array<Index, 3> neck_widths{128, 256, 512};
  int rfp_steps = 2;
  AsppSpec aspp;
  std::optional<AnchorSet> anchors;
};

GraphConfig parse_graph_config(const std::string& yaml_text, const std::string& origin = "<string>");
GraphConfig load_graph_config(const std::string& path);
std::string graph_config_yaml(const GraphConfig& config);

/// Template graph with RFP feedback edges recorded on the fuse nodes:
/// focus -> 4 x (downsample CBL -> [fuse] -> CSPDense), SPP + 1x1 CBL after
/// the last stage, a top-down pyramid over the last three stages, ASPP
/// connecting modules R_i on each pyramid output, and 1x1 detect heads.
ModelGraph build_graph(const GraphConfig& config);

/// The template with all feedback removed: a plain FPN detector.
ModelGraph plain_fpn(const ModelGraph& tmpl);

/// Unrolls the recursion into T sequential steps with shared parameters.
/// Step 1 has no R input; step t > 1 feeds R_i(f_i^{t-1}) into stage i.
ModelGraph rfp_unroll(const ModelGraph& tmpl, int steps);

// ---------------------------------------------------------------------------

/// Per-node output shape (1 x C x H x W), keyed by node name.
using ShapeTable = std::map<std::string, Shape>;

ShapeTable infer_shapes(const ModelGraph& graph, Index height, Index width);

/// Head strides implied by a shape table.
std::array<Index, 3> head_strides(const ModelGraph& graph, const ShapeTable& shapes, Index height);

struct CioRow {
  std::string block;
  Index c = 0, m = 0, d = 0;
  Cio dense, partial;
  double saving() const { return dense.half_units ? 1.0 - double(partial.half_units) / double(dense.half_units) : 0.0; }
};

struct CioReport {
  std::vector<CioRow> rows;
  Cio total_dense, total_partial;
};

/// One row per distinct csp_dense parameter block (shared steps count once).
CioReport analyze_cio(const ModelGraph& graph, const ShapeTable& shapes);

// ---------------------------------------------------------------------------

/// Declares and initializes every parameter of the template graph. The
/// parameter table depends only on the template, not on the unroll count.
template <typename Scalar>
void declare_parameters(const ModelGraph& tmpl, ParameterStore<Scalar>& store, std::uint64_t seed);

/// Runs the graph. Returns one value per node, in node order. Feedback edges
/// of a template graph are ignored.
template <typename Scalar>
std::vector<Var<Scalar>> run_graph(const ModelGraph& graph, BlockContext<Scalar>& ctx,
                                   const Var<Scalar>& input);

/// The three head outputs from a run_graph result.
template <typename Scalar>
std::array<Var<Scalar>, 3> graph_heads(const ModelGraph& graph, const std::vector<Var<Scalar>>& values);

}  // namespace tcyolo
