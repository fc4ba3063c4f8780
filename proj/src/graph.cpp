#include "tcyolo/graph.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace tcyolo {

std::string layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::focus: return "focus";
    case LayerKind::cbl: return "cbl";
    case LayerKind::csp_dense: return "csp_dense";
    case LayerKind::spp: return "spp";
    case LayerKind::aspp: return "aspp";
    case LayerKind::rfp_fuse: return "rfp_fuse";
    case LayerKind::upsample: return "upsample";
    case LayerKind::concat: return "concat";
    case LayerKind::detect_head: return "detect_head";
  }
  return "?";
}

std::size_t ModelGraph::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].name == name) return i;
  throw ConfigError("graph has no node '" + name + "'");
}

bool ModelGraph::contains(const std::string& name) const {
  return std::any_of(nodes.begin(), nodes.end(), [&](const LayerSpec& n) { return n.name == name; });
}

void ModelGraph::validate() {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (!index.emplace(nodes[i].name, i).second) throw ConfigError("duplicate node name '" + nodes[i].name + "'");
  std::vector<std::size_t> pending(nodes.size(), 0);
  std::vector<std::vector<std::size_t>> users(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& in : nodes[i].inputs) {
      auto it = index.find(in);
      if (it == index.end())
        throw ConfigError("node '" + nodes[i].name + "' reads unknown node '" + in + "'");
      users[it->second].push_back(i);
      ++pending[i];
    }
    if (!nodes[i].feedback.empty() && !index.count(nodes[i].feedback))
      throw ConfigError("node '" + nodes[i].name + "' has unknown feedback source '" + nodes[i].feedback + "'");
  }
  // Kahn's algorithm, always taking the lowest ready index so the existing
  // order is kept when it is already topological.
  std::set<std::size_t> ready;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (pending[i] == 0) ready.insert(i);
  std::vector<LayerSpec> order;
  while (!ready.empty()) {
    const std::size_t i = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(nodes[i]);
    for (std::size_t u : users[i])
      if (--pending[u] == 0) ready.insert(u);
  }
  if (order.size() != nodes.size()) throw ConfigError("graph is cyclic");
  nodes = std::move(order);
  if (!contains(input) || node(input).kind != LayerKind::input)
    throw ConfigError("graph input '" + input + "' is missing or not an input node");
  if (heads[0].empty()) return;  // headless graphs are allowed for block-level analysis
  for (const auto& h : heads)
    if (!contains(h) || node(h).kind != LayerKind::detect_head)
      throw ConfigError("graph head '" + h + "' is missing or not a detect_head");
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
T scalar_field(const YAML::Node& n, const char* key, T fallback, const std::string& origin) {
  if (!n || !n[key]) return fallback;
  try {
    return n[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": bad value for '" + key + "': " + e.what());
  }
}

Activation activation_field(const YAML::Node& n, const char* key, Activation fallback,
                            const std::string& origin) {
  if (!n || !n[key]) return fallback;
  const auto name = scalar_field<std::string>(n, key, "", origin);
  Activation a = parse_activation(name);
  if (a.kind == ActivationKind::leaky_relu && n["leaky_slope"]) a.slope = n["leaky_slope"].as<double>();
  return a;
}

template <std::size_t N>
std::array<Index, N> index_array(const YAML::Node& n, const char* key, std::array<Index, N> fallback,
                                 const std::string& origin) {
  if (!n || !n[key]) return fallback;
  const auto v = n[key].as<std::vector<Index>>();
  if (v.size() != N)
    throw ConfigError(origin + ": '" + key + "' needs " + std::to_string(N) + " entries, got " +
                      std::to_string(v.size()));
  std::array<Index, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

void require_positive(Index v, const std::string& what) {
  if (v < 1) throw ConfigError(what + " must be positive, got " + std::to_string(v));
}

}  // namespace

GraphConfig parse_graph_config(const std::string& yaml_text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  GraphConfig c;
  try {
    c.name = scalar_field<std::string>(root, "name", c.name, origin);
    c.num_classes = scalar_field<int>(root, "num_classes", c.num_classes, origin);
    c.backbone_act = activation_field(root["backbone"], "activation", c.backbone_act, origin);
    c.neck_act = activation_field(root["neck"], "activation", c.neck_act, origin);
    if (auto f = root["focus"]) {
      c.focus_channels = scalar_field<Index>(f, "channels", c.focus_channels, origin);
      c.focus_kernel = scalar_field<Index>(f, "kernel", c.focus_kernel, origin);
    }
    if (auto b = root["backbone"]; b && b["stages"]) {
      c.stages.clear();
      for (const auto& s : b["stages"]) {
        StageConfig st;
        st.width = scalar_field<Index>(s, "width", 0, origin);
        st.dense_layers = scalar_field<Index>(s, "m", st.dense_layers, origin);
        st.growth = scalar_field<Index>(s, "d", 0, origin);
        c.stages.push_back(st);
      }
    }
    if (auto s = root["spp"]; s && s["bins"]) c.spp_bins = s["bins"].as<std::vector<Index>>();
    c.neck_widths = index_array<3>(root["neck"], "widths", c.neck_widths, origin);
    if (auto r = root["rfp"]) {
      c.rfp_steps = scalar_field<int>(r, "steps", c.rfp_steps, origin);
      c.aspp.kernels = index_array<3>(r["aspp"], "kernels", c.aspp.kernels, origin);
      c.aspp.rates = index_array<3>(r["aspp"], "rates", c.aspp.rates, origin);
      c.aspp.paddings = index_array<3>(r["aspp"], "paddings", c.aspp.paddings, origin);
    }
    if (auto a = root["anchors"]) {
      std::vector<AnchorWH> anchors;
      for (const auto& p : a) {
        const auto wh = p.as<std::vector<double>>();
        if (wh.size() != 2) throw ConfigError(origin + ": each anchor needs [w, h]");
        anchors.push_back({wh[0], wh[1]});
      }
      c.anchors = AnchorSet(anchors);
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }

  if (c.num_classes < 1) throw ConfigError(origin + ": num_classes must be >= 1");
  if (c.stages.size() != 4) throw ConfigError(origin + ": backbone needs exactly 4 stages");
  for (auto& st : c.stages) {
    require_positive(st.width, origin + ": stage width");
    require_positive(st.dense_layers, origin + ": stage m");
    if (st.growth == 0) st.growth = st.width / 2;
    require_positive(st.growth, origin + ": stage d");
  }
  require_positive(c.focus_channels, origin + ": focus channels");
  require_positive(c.focus_kernel, origin + ": focus kernel");
  if (c.spp_bins.empty()) throw ConfigError(origin + ": spp bins must not be empty");
  for (Index b : c.spp_bins) require_positive(b, origin + ": spp bin");
  for (Index w : c.neck_widths) {
    require_positive(w, origin + ": neck width");
    if (w % 4) throw ConfigError(origin + ": neck widths must be divisible by 4 (ASPP), got " + std::to_string(w));
  }
  if (c.rfp_steps < 1) throw ConfigError(origin + ": rfp steps must be >= 1");
  return c;
}

GraphConfig load_graph_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read graph config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_graph_config(ss.str(), path);
}

std::string graph_config_yaml(const GraphConfig& c) {
  YAML::Emitter out;
  auto flow = [&](const auto& seq) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& v : seq) out << v;
    out << YAML::EndSeq;
  };
  auto act = [&](const Activation& a) {
    out << YAML::Key << "activation" << YAML::Value << activation_name(a);
    if (a.kind == ActivationKind::leaky_relu) out << YAML::Key << "leaky_slope" << YAML::Value << a.slope;
  };
  out << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << c.name;
  out << YAML::Key << "num_classes" << YAML::Value << c.num_classes;
  out << YAML::Key << "focus" << YAML::Value << YAML::BeginMap << YAML::Key << "channels" << YAML::Value
      << c.focus_channels << YAML::Key << "kernel" << YAML::Value << c.focus_kernel << YAML::EndMap;
  out << YAML::Key << "backbone" << YAML::Value << YAML::BeginMap;
  act(c.backbone_act);
  out << YAML::Key << "stages" << YAML::Value << YAML::BeginSeq;
  for (const auto& s : c.stages)
    out << YAML::Flow << YAML::BeginMap << YAML::Key << "width" << YAML::Value << s.width << YAML::Key << "m"
        << YAML::Value << s.dense_layers << YAML::Key << "d" << YAML::Value << s.growth << YAML::EndMap;
  out << YAML::EndSeq << YAML::EndMap;
  out << YAML::Key << "spp" << YAML::Value << YAML::BeginMap << YAML::Key << "bins" << YAML::Value;
  flow(c.spp_bins);
  out << YAML::EndMap;
  out << YAML::Key << "neck" << YAML::Value << YAML::BeginMap;
  act(c.neck_act);
  out << YAML::Key << "widths" << YAML::Value;
  flow(c.neck_widths);
  out << YAML::EndMap;
  out << YAML::Key << "rfp" << YAML::Value << YAML::BeginMap << YAML::Key << "steps" << YAML::Value << c.rfp_steps;
  out << YAML::Key << "aspp" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kernels" << YAML::Value;
  flow(c.aspp.kernels);
  out << YAML::Key << "rates" << YAML::Value;
  flow(c.aspp.rates);
  out << YAML::Key << "paddings" << YAML::Value;
  flow(c.aspp.paddings);
  out << YAML::EndMap << YAML::EndMap;
  if (c.anchors) {
    out << YAML::Key << "anchors" << YAML::Value << YAML::BeginSeq;
    for (const auto& a : c.anchors->all()) {
      out << YAML::Flow << YAML::BeginSeq << a.w << a.h << YAML::EndSeq;
    }
    out << YAML::EndSeq;
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------------------

ModelGraph build_graph(const GraphConfig& c) {
  ModelGraph g;
  g.num_classes = c.num_classes;
  auto add = [&](LayerSpec s) -> LayerSpec& {
    if (s.param_key.empty()) s.param_key = s.name;
    g.nodes.push_back(std::move(s));
    return g.nodes.back();
  };
  auto cbl = [&](std::string name, std::string in, Index out, Index k, Index stride, Activation act,
                 Phase phase, std::string role) {
    LayerSpec s;
    s.name = std::move(name);
    s.kind = LayerKind::cbl;
    s.inputs = {std::move(in)};
    s.out_channels = out;
    s.kernel = k;
    s.stride = stride;
    s.act = act;
    s.phase = phase;
    s.role = std::move(role);
    return add(std::move(s));
  };

  LayerSpec image;
  image.name = "image";
  image.kind = LayerKind::input;
  image.out_channels = g.input_channels;
  add(image);

  LayerSpec focus;
  focus.name = "focus";
  focus.kind = LayerKind::focus;
  focus.inputs = {"image"};
  focus.out_channels = c.focus_channels;
  focus.kernel = c.focus_kernel;
  focus.act = c.backbone_act;
  add(focus);

  auto csp = [&](std::string name, std::string in, const StageConfig& st, Phase phase, std::string role) {
    LayerSpec s;
    s.name = std::move(name);
    s.kind = LayerKind::csp_dense;
    s.inputs = {std::move(in)};
    s.out_channels = st.width;
    s.dense_layers = st.dense_layers;
    s.growth = st.growth;
    s.act = c.backbone_act;
    s.phase = phase;
    s.role = std::move(role);
    add(std::move(s));
  };

  // X_0: first stage, outside the recursion
  cbl("s0.down", "focus", c.stages[0].width, 3, 2, c.backbone_act, Phase::pre, "");
  csp("s0.csp", "s0.down", c.stages[0], Phase::pre, "");

  std::array<std::string, 4> x{"s0.csp", "", "", ""};
  for (int i = 1; i <= 3; ++i) {
    const std::string b = "b" + std::to_string(i);
    const std::string role = "B" + std::to_string(i);
    const auto& st = c.stages[std::size_t(i)];
    cbl(b + ".down", x[std::size_t(i - 1)], st.width, 3, 2, c.backbone_act, Phase::loop, role);
    LayerSpec fuse;
    fuse.name = b + ".fuse";
    fuse.kind = LayerKind::rfp_fuse;
    fuse.inputs = {b + ".down"};
    fuse.feedback = "r" + std::to_string(i);
    fuse.phase = Phase::loop;
    fuse.role = role;
    add(fuse);
    csp(b + ".csp", b + ".fuse", st, Phase::loop, role);
    x[std::size_t(i)] = b + ".csp";
    if (i == 3) {
      LayerSpec spp;
      spp.name = b + ".spp";
      spp.kind = LayerKind::spp;
      spp.inputs = {b + ".csp"};
      spp.bins = c.spp_bins;
      spp.phase = Phase::loop;
      spp.role = role;
      add(spp);
      cbl(b + ".out", b + ".spp", st.width, 1, 1, c.backbone_act, Phase::loop, role);
      x[3] = b + ".out";
    }
  }

  // top-down pyramid
  const auto& n = c.neck_widths;
  cbl("f3", x[3], n[2], 1, 1, c.neck_act, Phase::loop, "F3");
  for (int i = 2; i >= 1; --i) {
    const std::string f = "f" + std::to_string(i);
    const std::string role = "F" + std::to_string(i);
    const std::string above = "f" + std::to_string(i + 1);
    cbl(f + ".lat", x[std::size_t(i)], n[std::size_t(i - 1)] / 2, 1, 1, c.neck_act, Phase::loop, role);
    LayerSpec up;
    up.name = f + ".up";
    up.kind = LayerKind::upsample;
    up.inputs = {above};
    up.phase = Phase::loop;
    up.role = role;
    add(up);
    LayerSpec cat;
    cat.name = f + ".cat";
    cat.kind = LayerKind::concat;
    cat.inputs = {f + ".lat", f + ".up"};
    cat.phase = Phase::loop;
    cat.role = role;
    add(cat);
    cbl(f, f + ".cat", n[std::size_t(i - 1)], 3, 1, c.neck_act, Phase::loop, role);
  }

  for (int i = 1; i <= 3; ++i) {
    LayerSpec r;
    r.name = "r" + std::to_string(i);
    r.kind = LayerKind::aspp;
    r.inputs = {"f" + std::to_string(i)};
    r.aspp = c.aspp;
    r.phase = Phase::loop;
    r.role = "R" + std::to_string(i);
    add(r);
  }

  for (int i = 1; i <= 3; ++i) {
    LayerSpec h;
    h.name = "head" + std::to_string(i);
    h.kind = LayerKind::detect_head;
    h.inputs = {"f" + std::to_string(i)};
    h.out_channels = Index(AnchorSet::kScales) * (5 + c.num_classes);
    h.phase = Phase::post;
    add(h);
    g.heads[std::size_t(i - 1)] = h.name;
  }
  g.validate();
  return g;
}

ModelGraph plain_fpn(const ModelGraph& tmpl) {
  if (tmpl.unrolled) throw ConfigError("plain_fpn expects a template graph");
  ModelGraph g = tmpl;
  g.nodes.clear();
  for (auto n : tmpl.nodes) {
    if (n.kind == LayerKind::aspp && n.role.size() && n.role[0] == 'R') continue;
    n.feedback.clear();
    g.nodes.push_back(std::move(n));
  }
  g.validate();
  return g;
}

ModelGraph rfp_unroll(const ModelGraph& tmpl, int steps) {
  if (steps < 1) throw ConfigError("rfp unroll count T must be >= 1, got " + std::to_string(steps));
  if (tmpl.unrolled) throw ConfigError("graph is already unrolled");
  ModelGraph check = tmpl;
  check.validate();  // rejects cyclic templates

  auto at = [](const std::string& name, int t) { return name + "@" + std::to_string(t); };
  std::set<std::string> loop;
  for (const auto& n : check.nodes)
    if (n.phase == Phase::loop) loop.insert(n.name);

  ModelGraph g = check;
  g.nodes.clear();
  g.unrolled = true;
  for (const auto& n : check.nodes)
    if (n.phase == Phase::pre) g.nodes.push_back(n);
  for (int t = 1; t <= steps; ++t) {
    for (const auto& n : check.nodes) {
      if (n.phase != Phase::loop) continue;
      // R outputs at the last step feed nothing
      if (t == steps && n.kind == LayerKind::aspp && !n.role.empty() && n.role[0] == 'R') continue;
      LayerSpec s = n;
      s.name = at(n.name, t);
      s.step = t;
      s.feedback.clear();
      for (auto& in : s.inputs)
        if (loop.count(in)) in = at(in, t);
      if (!n.feedback.empty() && t > 1) s.inputs.push_back(at(n.feedback, t - 1));
      g.nodes.push_back(std::move(s));
    }
  }
  for (const auto& n : check.nodes) {
    if (n.phase != Phase::post) continue;
    LayerSpec s = n;
    for (auto& in : s.inputs)
      if (loop.count(in)) in = at(in, steps);
    g.nodes.push_back(std::move(s));
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------

ShapeTable infer_shapes(const ModelGraph& graph, Index height, Index width) {
  if (height < 32 || width < 32 || height % 32 || width % 32)
    throw ConfigError("input size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be positive multiples of 32");
  ShapeTable shapes;
  auto fail = [](const LayerSpec& n, const std::string& why) {
    throw ConfigError("node '" + n.name + "' (" + layer_kind_name(n.kind) + "): " + why);
  };
  auto extent = [&](const LayerSpec& n, Index h, Index k, Index s, Index p, Index d) {
    const Index e = window_output_extent(h, k, s, p, d);
    if (e < 1) fail(n, "output extent < 1 for input extent " + std::to_string(h));
    return e;
  };
  for (const auto& n : graph.nodes) {
    std::vector<Shape> in;
    for (const auto& name : n.inputs) in.push_back(shapes.at(name));
    auto need_inputs = [&](std::size_t k) {
      if (in.size() != k) fail(n, "expected " + std::to_string(k) + " inputs, got " + std::to_string(in.size()));
    };
    Shape out;
    switch (n.kind) {
      case LayerKind::input:
        out = Shape{1, graph.input_channels, height, width};
        break;
      case LayerKind::focus: {
        need_inputs(1);
        if (in[0][2] % 2 || in[0][3] % 2) fail(n, "odd spatial extent " + in[0].str());
        const Index p = n.kernel / 2;
        out = Shape{1, n.out_channels, extent(n, in[0][2] / 2, n.kernel, 1, p, 1),
                    extent(n, in[0][3] / 2, n.kernel, 1, p, 1)};
        break;
      }
      case LayerKind::cbl: {
        need_inputs(1);
        const Index p = n.padding < 0 ? n.kernel / 2 : n.padding;
        out = Shape{1, n.out_channels, extent(n, in[0][2], n.kernel, n.stride, p, 1),
                    extent(n, in[0][3], n.kernel, n.stride, p, 1)};
        break;
      }
      case LayerKind::csp_dense: {
        need_inputs(1);
        CspDenseLayout l;
        try {
          l = csp_dense_layout(in[0][1], CspDenseSpec{n.dense_layers, n.growth, n.out_channels, n.act});
        } catch (const ConfigError& e) {
          fail(n, e.what());
        }
        out = Shape{1, l.out, in[0][2], in[0][3]};
        break;
      }
      case LayerKind::spp:
        need_inputs(1);
        if (n.bins.empty()) fail(n, "no bins");
        out = Shape{1, in[0][1] * Index(1 + n.bins.size()), in[0][2], in[0][3]};
        break;
      case LayerKind::aspp:
        need_inputs(1);
        if (in[0][1] % 4) fail(n, "channels " + std::to_string(in[0][1]) + " not divisible by 4");
        for (std::size_t b = 0; b < 3; ++b)
          for (int axis : {2, 3})
            if (extent(n, in[0][std::size_t(axis)], n.aspp.kernels[b], 1, n.aspp.paddings[b], n.aspp.rates[b]) !=
                in[0][std::size_t(axis)])
              fail(n, "branch " + std::to_string(b) + " does not preserve spatial extent");
        out = in[0];
        break;
      case LayerKind::rfp_fuse:
        if (in.empty() || in.size() > 2) fail(n, "expects one or two inputs");
        if (in.size() == 2 && (in[1][2] != in[0][2] || in[1][3] != in[0][3]))
          fail(n, "feedback " + in[1].str() + " does not align with " + in[0].str());
        out = in[0];
        break;
      case LayerKind::upsample:
        need_inputs(1);
        out = Shape{1, in[0][1], 2 * in[0][2], 2 * in[0][3]};
        break;
      case LayerKind::concat: {
        if (in.empty()) fail(n, "no inputs");
        Index ch = 0;
        for (const auto& s : in) {
          if (s[2] != in[0][2] || s[3] != in[0][3])
            fail(n, "input extents disagree: " + s.str() + " vs " + in[0].str());
          ch += s[1];
        }
        out = Shape{1, ch, in[0][2], in[0][3]};
        break;
      }
      case LayerKind::detect_head:
        need_inputs(1);
        out = Shape{1, n.out_channels, in[0][2], in[0][3]};
        break;
    }
    shapes[n.name] = out;
  }
  if (graph.heads[0].empty()) return shapes;
  const auto strides = head_strides(graph, shapes, height);
  const std::array<Index, 3> expected{8, 16, 32};
  if (strides != expected)
    throw ConfigError("detect heads sit at strides " + std::to_string(strides[0]) + "/" +
                      std::to_string(strides[1]) + "/" + std::to_string(strides[2]) + ", expected 8/16/32");
  return shapes;
}

std::array<Index, 3> head_strides(const ModelGraph& graph, const ShapeTable& shapes, Index height) {
  std::array<Index, 3> s{};
  for (std::size_t i = 0; i < 3; ++i) s[i] = height / shapes.at(graph.heads[i])[2];
  return s;
}

CioReport analyze_cio(const ModelGraph& graph, const ShapeTable& shapes) {
  CioReport report;
  std::set<std::string> seen;
  for (const auto& n : graph.nodes) {
    if (n.kind != LayerKind::csp_dense || !seen.insert(n.param_key).second) continue;
    CioRow row;
    row.block = n.param_key;
    row.c = shapes.at(n.inputs.at(0))[1];
    row.m = n.dense_layers;
    row.d = n.growth;
    row.dense = cio(CioKind::dense, row.c, row.m, row.d);
    row.partial = cio(CioKind::partial_dense, row.c, row.m, row.d);
    report.total_dense.half_units += row.dense.half_units;
    report.total_partial.half_units += row.partial.half_units;
    report.rows.push_back(row);
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

// Objectness logit prior: sigmoid(-4.6) ~ 0.01.
constexpr double kObjectnessPrior = -4.6;

CblSpec cbl_spec(const LayerSpec& n) { return CblSpec{n.out_channels, n.kernel, n.stride, n.padding, n.act}; }
CspDenseSpec csp_spec(const LayerSpec& n) { return CspDenseSpec{n.dense_layers, n.growth, n.out_channels, n.act}; }

}  // namespace

template <typename Scalar>
void declare_parameters(const ModelGraph& tmpl, ParameterStore<Scalar>& store, std::uint64_t seed) {
  if (tmpl.unrolled) throw ConfigError("declare_parameters expects the template graph");
  const ShapeTable shapes = infer_shapes(tmpl, 64, 64);
  Rng rng(seed);
  for (const auto& n : tmpl.nodes) {
    const Index cin = n.inputs.empty() ? 0 : shapes.at(n.inputs[0])[1];
    const std::string& key = n.param_key;
    switch (n.kind) {
      case LayerKind::focus:
        declare_focus(store, key, cin, FocusSpec{n.out_channels, n.kernel, n.act}, rng);
        break;
      case LayerKind::cbl:
        declare_cbl(store, key, cin, cbl_spec(n), rng);
        break;
      case LayerKind::csp_dense:
        declare_csp_dense(store, key, cin, csp_spec(n), rng);
        break;
      case LayerKind::aspp:
        declare_aspp(store, key, cin, n.aspp, rng);
        break;
      case LayerKind::rfp_fuse:
        if (!n.feedback.empty())
          store.declare(key + ".proj.weight", Shape{cin, shapes.at(n.feedback)[1], 1, 1}, ParamRole::weight);
        break;
      case LayerKind::detect_head: {
        auto& w = store.declare(key + ".weight", Shape{n.out_channels, cin, 1, 1}, ParamRole::weight);
        init_conv_weight(w, rng);
        auto& b = store.declare(key + ".bias", Shape{n.out_channels}, ParamRole::bias);
        const Index fields = 5 + tmpl.num_classes;
        for (Index a = 0; a < n.out_channels / fields; ++a) b.value[a * fields + 4] = Scalar(kObjectnessPrior);
        break;
      }
      default:
        break;
    }
  }
}

template <typename Scalar>
std::vector<Var<Scalar>> run_graph(const ModelGraph& graph, BlockContext<Scalar>& ctx, const Var<Scalar>& input) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) index[graph.nodes[i].name] = i;
  std::vector<Var<Scalar>> values(graph.nodes.size());
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const auto& n = graph.nodes[i];
    std::vector<Var<Scalar>> in;
    for (const auto& name : n.inputs) in.push_back(values[index.at(name)]);
    const std::string& key = n.param_key;
    switch (n.kind) {
      case LayerKind::input:
        if (input.dim(1) != graph.input_channels)
          throw DimensionError("graph input expects " + std::to_string(graph.input_channels) + " channels, got " +
                               input.shape().str());
        values[i] = input;
        break;
      case LayerKind::focus:
        values[i] = focus_forward(ctx, key, in[0], FocusSpec{n.out_channels, n.kernel, n.act});
        break;
      case LayerKind::cbl:
        values[i] = cbl_forward(ctx, key, in[0], cbl_spec(n));
        break;
      case LayerKind::csp_dense:
        values[i] = csp_dense_forward(ctx, key, in[0], csp_spec(n));
        break;
      case LayerKind::spp:
        values[i] = spp_forward(in[0], std::span<const Index>(n.bins));
        break;
      case LayerKind::aspp:
        values[i] = aspp_forward(ctx, key, in[0], n.aspp);
        break;
      case LayerKind::rfp_fuse:
        if (in.size() == 1)
          values[i] = in[0];
        else
          values[i] = add(in[0], conv2d(in[1], ctx.param(key + ".proj.weight"), Conv2dOptions{}));
        break;
      case LayerKind::upsample:
        values[i] = resize_nearest(in[0], 2 * in[0].dim(2), 2 * in[0].dim(3));
        break;
      case LayerKind::concat:
        values[i] = concat_channels<Scalar>(in);
        break;
      case LayerKind::detect_head: {
        auto bias = ctx.param(key + ".bias");
        values[i] = conv2d(in[0], ctx.param(key + ".weight"), &bias, Conv2dOptions{});
        break;
      }
    }
  }
  return values;
}

template <typename Scalar>
std::array<Var<Scalar>, 3> graph_heads(const ModelGraph& graph, const std::vector<Var<Scalar>>& values) {
  return {values[graph.index_of(graph.heads[0])], values[graph.index_of(graph.heads[1])],
          values[graph.index_of(graph.heads[2])]};
}

#define TCYOLO_INSTANTIATE_GRAPH(S)                                                                   \
  template void declare_parameters<S>(const ModelGraph&, ParameterStore<S>&, std::uint64_t);         \
  template std::vector<Var<S>> run_graph<S>(const ModelGraph&, BlockContext<S>&, const Var<S>&);      \
  template std::array<Var<S>, 3> graph_heads<S>(const ModelGraph&, const std::vector<Var<S>>&);

TCYOLO_INSTANTIATE_GRAPH(double)
TCYOLO_INSTANTIATE_GRAPH(float)

}  // namespace tcyolo
