#include "tcyolo/detector.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tcyolo/data.hpp"

namespace tcyolo {

Detector::Detector(GraphConfig config, Index input_size) : config_(std::move(config)), input_size_(input_size) {
  if (!config_.anchors) throw ConfigError("graph config '" + config_.name + "' has no anchors");
  if (config_.anchors->size() != 9) throw ConfigError("detector needs 9 anchors (3 per scale)");
  template_ = build_graph(config_);
  graph_ = rfp_unroll(template_, config_.rfp_steps);
  const auto shapes = infer_shapes(graph_, input_size_, input_size_);
  const auto s = head_strides(graph_, shapes, input_size_);
  for (std::size_t i = 0; i < 3; ++i) strides_[i] = double(s[i]);
}

void Detector::initialize(std::uint64_t seed) {
  params_ = ParameterStore<float>();
  declare_parameters(template_, params_, seed);
}

std::array<Var<float>, 3> Detector::forward(BlockContext<float>& ctx, const Var<float>& input) const {
  return graph_heads(graph_, run_graph(graph_, ctx, input));
}

std::vector<BoxD> Detector::decode(const std::array<Var<float>, 3>& heads, Index n) const {
  std::vector<BoxD> out;
  for (int s = 0; s < 3; ++s) {
    const auto boxes = decode_head(heads[std::size_t(s)].value(), anchors().scale(s),
                                   float(strides_[std::size_t(s)]), config_.num_classes, n);
    for (const auto& b : boxes) out.push_back(BoxD{b.cx, b.cy, b.w, b.h, b.score, b.class_id});
  }
  return out;
}

std::vector<BoxD> Detector::detect(const Image& image, const DetectOptions& options) const {
  DatasetRecord rec;
  rec.image = image;
  LetterboxTransform lt;
  const auto boxed = letterbox(rec, input_size_, &lt);
  Tape<float> tape(false);
  BlockContext<float> ctx(tape, params_, BatchNormOptions{NormMode::infer});
  const auto heads = forward(ctx, tape.constant(image_to_tensor<float>(boxed.image)));
  std::vector<BoxD> candidates;
  for (const auto& b : decode(heads))
    if (b.score >= options.score_threshold) candidates.push_back(b);
  std::vector<BoxD> kept = diou_nms<double>(candidates, options.nms_iou, options.score_threshold);
  if (kept.size() > options.max_detections) kept.resize(options.max_detections);
  const double W = double(image.width), H = double(image.height);
  std::vector<BoxD> out;
  for (const auto& k : kept) {
    const BoxD b = lt.inverse(k);
    const double x1 = std::clamp(b.x1(), 0.0, W), x2 = std::clamp(b.x2(), 0.0, W);
    const double y1 = std::clamp(b.y1(), 0.0, H), y2 = std::clamp(b.y2(), 0.0, H);
    if (!(x1 < x2 && y1 < y2)) continue;
    BoxD c = BoxD::from_corners(x1, y1, x2, y2);
    c.score = b.score;
    c.class_id = b.class_id;
    out.push_back(c);
  }
  return out;
}

namespace {

// "name@t" with t the last step, or the bare name for non-loop nodes
std::string resolve_layer(const ModelGraph& g, const std::string& layer, int steps) {
  if (g.contains(layer)) return layer;
  const std::string last = layer + "@" + std::to_string(steps);
  if (g.contains(last)) return last;
  return "";
}

}  // namespace

std::vector<std::string> Detector::layer_names() const {
  std::vector<std::string> out;
  for (const auto& n : graph_.nodes) out.push_back(n.name);
  return out;
}

Tensor<float> Detector::activation(const Image& image, const std::string& layer) const {
  const std::string name = resolve_layer(graph_, layer, config_.rfp_steps);
  if (name.empty()) {
    std::string names;
    for (const auto& n : layer_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown layer '" + layer + "'; available: " + names);
  }
  DatasetRecord rec;
  rec.image = image;
  const auto boxed = letterbox(rec, input_size_);
  Tape<float> tape(false);
  BlockContext<float> ctx(tape, params_, BatchNormOptions{NormMode::infer});
  const auto values = run_graph(graph_, ctx, tape.constant(image_to_tensor<float>(boxed.image)));
  return values[graph_.index_of(name)].value();
}

std::vector<std::uint8_t> activation_map(const Tensor<float>& t) {
  if (t.rank() != 4 || t.dim(0) != 1) throw DimensionError("activation map needs a 1 x C x H x W tensor");
  const Index C = t.dim(1), H = t.dim(2), W = t.dim(3);
  std::vector<double> mean(std::size_t(H * W), 0.0);
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) mean[std::size_t(y * W + x)] += double(t.at(0, c, y, x)) / double(C);
  const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
  const double span = *hi - *lo;
  std::vector<std::uint8_t> out(mean.size(), 0);
  if (span > 0)
    for (std::size_t i = 0; i < mean.size(); ++i) out[i] = std::uint8_t(std::lround(255.0 * (mean[i] - *lo) / span));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kMagic = "TCYOLO-CKPT 1";

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::weight: return "weight";
    case ParamRole::bias: return "bias";
    case ParamRole::norm_scale: return "norm_scale";
    case ParamRole::buffer: return "buffer";
  }
  return "?";
}

ParamRole parse_role(const std::string& s, const std::string& where) {
  if (s == "weight") return ParamRole::weight;
  if (s == "bias") return ParamRole::bias;
  if (s == "norm_scale") return ParamRole::norm_scale;
  if (s == "buffer") return ParamRole::buffer;
  throw CheckpointError(where + ": unknown tensor role '" + s + "'");
}

std::string line_of(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(path + ": truncated checkpoint");
  return line;
}

}  // namespace

void save_checkpoint(const std::string& path, const Detector& det, const std::map<std::string, std::string>& meta) {
  std::ostringstream out(std::ios::binary);
  const std::string yaml = graph_config_yaml(det.config());
  out << kMagic << "\n";
  out << "input_size " << det.input_size() << "\n";
  out << "graph " << yaml.size() << "\n" << yaml << "\n";
  out << "meta " << meta.size() << "\n";
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("checkpoint metadata '" + k + "' contains a space or newline");
    out << k << " " << v << "\n";
  }
  const auto& entries = det.params().entries();
  out << "tensors " << entries.size() << "\n";
  for (const auto& [name, p] : entries) {
    out << name << " " << role_name(p.role) << " " << p.value.rank();
    for (std::size_t i = 0; i < p.value.rank(); ++i) out << " " << p.value.dim(i);
    out << "\n";
    out.write(reinterpret_cast<const char*>(p.value.data()), std::streamsize(sizeof(float) * std::size_t(p.value.size())));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint '" + path + "'");
  const std::string bytes = out.str();
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  if (line_of(in, path) != kMagic) throw CheckpointError(path + ": not a TC-YOLO checkpoint (bad header)");
  Checkpoint ck;
  auto keyed = [&](const std::string& key) {
    std::istringstream ls(line_of(in, path));
    std::string k;
    long long v = -1;
    ls >> k >> v;
    if (k != key || v < 0) throw CheckpointError(path + ": expected '" + key + " <n>'");
    return v;
  };
  ck.input_size = Index(keyed("input_size"));
  const auto yaml_size = std::size_t(keyed("graph"));
  ck.graph_yaml.resize(yaml_size);
  in.read(ck.graph_yaml.data(), std::streamsize(yaml_size));
  if (!in || in.get() != '\n') throw CheckpointError(path + ": truncated graph section");
  const auto meta_count = keyed("meta");
  for (long long i = 0; i < meta_count; ++i) {
    const std::string line = line_of(in, path);
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw CheckpointError(path + ": bad metadata line '" + line + "'");
    ck.meta[line.substr(0, sp)] = line.substr(sp + 1);
  }
  const auto count = keyed("tensors");
  for (long long i = 0; i < count; ++i) {
    std::istringstream ls(line_of(in, path));
    CheckpointTensor t;
    std::string role;
    std::size_t rank = 0;
    ls >> t.name >> role >> rank;
    if (!ls || rank > 8) throw CheckpointError(path + ": bad tensor header #" + std::to_string(i));
    t.role = parse_role(role, path);
    std::vector<Index> dims(rank);
    for (auto& d : dims) {
      ls >> d;
      if (!ls || d < 1) throw CheckpointError(path + ": bad shape for tensor '" + t.name + "'");
    }
    t.value = Tensor<float>(Shape(dims));
    in.read(reinterpret_cast<char*>(t.value.data()), std::streamsize(sizeof(float) * std::size_t(t.value.size())));
    if (!in) throw CheckpointError(path + ": truncated data for tensor '" + t.name + "'");
    ck.tensors.push_back(std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path + ": trailing bytes after tensors");
  return ck;
}

void load_parameters(ParameterStore<float>& store, const Checkpoint& ck, const std::string& origin) {
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  for (auto& [name, p] : store.entries()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DimensionError(origin + ": layer '" + name + "' missing from checkpoint");
    if (it->second->value.shape() != p.value.shape())
      throw DimensionError(origin + ": layer '" + name + "' has shape " + it->second->value.shape().str() +
                           " in the checkpoint but " + p.value.shape().str() + " in the model");
  }
  for (const auto& t : ck.tensors)
    if (!store.contains(t.name)) throw DimensionError(origin + ": checkpoint layer '" + t.name + "' is not in the model");
  for (auto& [name, p] : store.entries()) {
    p.value = by_name.at(name)->value;
    p.grad = Tensor<float>();
  }
}

Detector load_detector(const std::string& path, const GraphConfig* graph) {
  const Checkpoint ck = read_checkpoint(path);
  GraphConfig stored = parse_graph_config(ck.graph_yaml, path);
  GraphConfig config = graph ? *graph : stored;
  if (graph) config.anchors = stored.anchors;
  Detector det(config, ck.input_size);
  det.initialize(0);
  load_parameters(det.params(), ck, path);
  return det;
}

}  // namespace tcyolo
