#include "tcyolo/train.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tcyolo/anchors.hpp"
#include "tcyolo/random.hpp"

namespace fs = std::filesystem;

namespace tcyolo {

namespace {

template <typename T>
void read_field(const YAML::Node& n, const char* key, T& target, const std::string& origin) {
  if (!n || !n[key]) return;
  try {
    target = n[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": bad value for '" + key + "': " + e.what());
  }
}

void read_detect(const YAML::Node& n, DetectOptions& d, const std::string& origin) {
  if (!n) return;
  read_field(n, "score_threshold", d.score_threshold, origin);
  read_field(n, "nms_iou", d.nms_iou, origin);
  read_field(n, "max_detections", d.max_detections, origin);
}

std::string resolve(const std::string& path, const std::string& base) {
  if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).lexically_normal().string();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RunConfig parse_run_config(const std::string& yaml_text, const std::string& origin, const std::string& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  RunConfig c;
  if (!root || root.IsNull()) return c;
  if (!root.IsMap()) throw ConfigError(origin + ": run config must be a mapping");
  static const char* known[] = {"input_size", "epochs",    "batch_size", "seed",     "lr",       "momentum",
                                "weight_decay", "warmup_epochs", "warmup_momentum", "warmup_bias_lr", "gamma",
                                "milestones", "augment",   "loss",       "detect",   "eval",     "split",
                                "data",       "graph",     "out"};
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      throw ConfigError(origin + ": unknown run config key '" + key + "'");
  }
  read_field(root, "input_size", c.input_size, origin);
  read_field(root, "epochs", c.epochs, origin);
  read_field(root, "batch_size", c.batch_size, origin);
  read_field(root, "seed", c.seed, origin);
  read_field(root, "lr", c.lr, origin);
  read_field(root, "momentum", c.momentum, origin);
  read_field(root, "weight_decay", c.weight_decay, origin);
  read_field(root, "warmup_epochs", c.warmup_epochs, origin);
  read_field(root, "warmup_momentum", c.warmup_momentum, origin);
  read_field(root, "warmup_bias_lr", c.warmup_bias_lr, origin);
  read_field(root, "gamma", c.gamma, origin);
  read_field(root, "milestones", c.milestones, origin);
  read_field(root, "augment", c.augment, origin);
  if (auto l = root["loss"]) {
    read_field(l, "box", c.loss.box, origin);
    read_field(l, "obj", c.loss.obj, origin);
    read_field(l, "cls", c.loss.cls, origin);
  }
  read_detect(root["detect"], c.detect, origin);
  if (auto e = root["eval"]) {
    read_detect(e, c.eval_detect, origin);
    read_field(e, "iou", c.eval_iou, origin);
  }
  if (root["split"]) {
    std::vector<double> s;
    read_field(root, "split", s, origin);
    if (s.size() != 3) throw ConfigError(origin + ": split needs three ratios");
    std::copy(s.begin(), s.end(), c.split.begin());
  }
  read_field(root, "data", c.data, origin);
  read_field(root, "graph", c.graph, origin);
  read_field(root, "out", c.out, origin);
  c.data = resolve(c.data, base_dir);
  c.graph = resolve(c.graph, base_dir);
  validate(c);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read run config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path, fs::path(path).parent_path().string());
}

std::string run_config_yaml(const RunConfig& c) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "input_size" << YAML::Value << c.input_size;
  out << YAML::Key << "epochs" << YAML::Value << c.epochs;
  out << YAML::Key << "batch_size" << YAML::Value << c.batch_size;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::Key << "lr" << YAML::Value << c.lr;
  out << YAML::Key << "momentum" << YAML::Value << c.momentum;
  out << YAML::Key << "weight_decay" << YAML::Value << c.weight_decay;
  out << YAML::Key << "warmup_epochs" << YAML::Value << c.warmup_epochs;
  out << YAML::Key << "warmup_momentum" << YAML::Value << c.warmup_momentum;
  out << YAML::Key << "warmup_bias_lr" << YAML::Value << c.warmup_bias_lr;
  out << YAML::Key << "gamma" << YAML::Value << c.gamma;
  out << YAML::Key << "milestones" << YAML::Value << YAML::Flow << c.milestones;
  out << YAML::Key << "augment" << YAML::Value << c.augment;
  out << YAML::Key << "loss" << YAML::Value << YAML::Flow << YAML::BeginMap << YAML::Key << "box" << YAML::Value
      << c.loss.box << YAML::Key << "obj" << YAML::Value << c.loss.obj << YAML::Key << "cls" << YAML::Value
      << c.loss.cls << YAML::EndMap;
  auto detect = [&](const DetectOptions& d) {
    out << YAML::Key << "score_threshold" << YAML::Value << d.score_threshold;
    out << YAML::Key << "nms_iou" << YAML::Value << d.nms_iou;
    out << YAML::Key << "max_detections" << YAML::Value << d.max_detections;
  };
  out << YAML::Key << "detect" << YAML::Value << YAML::Flow << YAML::BeginMap;
  detect(c.detect);
  out << YAML::EndMap;
  out << YAML::Key << "eval" << YAML::Value << YAML::Flow << YAML::BeginMap;
  detect(c.eval_detect);
  out << YAML::Key << "iou" << YAML::Value << c.eval_iou << YAML::EndMap;
  out << YAML::Key << "split" << YAML::Value << YAML::Flow << std::vector<double>(c.split.begin(), c.split.end());
  out << YAML::Key << "data" << YAML::Value << c.data;
  out << YAML::Key << "graph" << YAML::Value << c.graph;
  out << YAML::Key << "out" << YAML::Value << c.out;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

void validate(const RunConfig& c) {
  if (c.input_size < 32 || c.input_size % 32)
    throw ConfigError("input size must be a positive multiple of 32, got " + std::to_string(c.input_size));
  if (c.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (c.batch_size < 1) throw ConfigError("batch size must be >= 1");
  // lr = 0 is allowed: it freezes the weights
  if (c.lr < 0 || c.momentum < 0 || c.momentum >= 1 || c.weight_decay < 0 || c.warmup_epochs < 0 ||
      c.warmup_momentum < 0 || c.warmup_momentum >= 1 || c.warmup_bias_lr < 0 || !(c.gamma > 0))
    throw ConfigError("optimizer rates out of range");
  for (double m : c.milestones)
    if (!(m > 0 && m < 1)) throw ConfigError("lr milestones must be fractions in (0, 1)");
  for (const auto* d : {&c.detect, &c.eval_detect})
    if (d->score_threshold < 0 || d->score_threshold > 1 || d->nms_iou < 0 || d->nms_iou > 1)
      throw ConfigError("detection thresholds must lie in [0, 1]");
  if (!(c.eval_iou > 0 && c.eval_iou <= 1)) throw ConfigError("eval iou must lie in (0, 1]");
}

// ---------------------------------------------------------------------------

StepSchedule schedule_at(const RunConfig& c, int epoch, long long iteration, long long batches_per_epoch) {
  double lr = c.lr;
  for (double m : c.milestones)
    if (epoch >= int(std::ceil(m * double(c.epochs)))) lr *= c.gamma;
  StepSchedule s{lr, lr, c.momentum};
  const double warmup = std::max(c.warmup_epochs * double(batches_per_epoch), 0.0);
  if (warmup > 0 && double(iteration) < warmup) {
    const double x = double(iteration) / warmup;
    s.weight_lr = lr * x;
    s.bias_lr = c.warmup_bias_lr + (lr - c.warmup_bias_lr) * x;
    s.momentum = c.warmup_momentum + (c.momentum - c.warmup_momentum) * x;
  }
  return s;
}

void Sgd::step(ParameterStore<float>& params, const StepSchedule& s) {
  for (auto& [name, p] : params.entries()) {
    if (!p.trainable() || p.grad.empty()) continue;
    auto& v = velocity_[name];
    if (v.empty()) v = Tensor<float>(p.value.shape());
    const float lr = float(p.role == ParamRole::bias ? s.bias_lr : s.weight_lr);
    const float mu = float(s.momentum);
    if (p.role == ParamRole::weight && weight_decay_ > 0)
      v.values() = mu * v.values() + p.grad.values() + float(weight_decay_) * p.value.values();
    else
      v.values() = mu * v.values() + p.grad.values();
    p.value.values() -= lr * v.values();
  }
}

// ---------------------------------------------------------------------------

std::vector<ImageEval> run_detector(const Detector& det, const std::vector<DatasetRecord>& records,
                                    std::span<const std::size_t> indices, const DetectOptions& options,
                                    double* seconds) {
  std::vector<ImageEval> out;
  double total = 0;
  for (std::size_t i : indices) {
    const auto& r = records.at(i);
    const auto t0 = std::chrono::steady_clock::now();
    auto dets = det.detect(r.image, options);
    total += seconds_since(t0);
    out.push_back({r.id, std::move(dets), r.boxes, r.tags});
  }
  if (seconds) *seconds = total;
  return out;
}

EvalReport evaluate_detector(const Detector& det, const std::vector<DatasetRecord>& records,
                             std::span<const std::size_t> indices, const DetectOptions& options, double tau,
                             double report_score) {
  double seconds = 0;
  const auto images = run_detector(det, records, indices, options, &seconds);
  EvalReport rep = evaluate(images, tau, report_score);
  rep.seconds = seconds;
  return rep;
}

Split dataset_split(const std::string& root, const std::vector<DatasetRecord>& records, std::uint64_t seed,
                    const std::array<double, 3>& ratios) {
  Split s;
  if (read_split_manifests(root, records, s)) return s;
  return split_records(records.size(), seed, ratios);
}

AnchorSet estimate_anchors(const std::vector<DatasetRecord>& records, std::span<const std::size_t> indices,
                           Index input_size, std::uint64_t seed) {
  std::vector<AnchorWH> dims;
  for (std::size_t i : indices) {
    const auto& r = records.at(i);
    const auto t = letterbox_transform(r.image.width, r.image.height, input_size);
    for (const auto& b : r.boxes) dims.push_back({b.w * t.scale, b.h * t.scale});
  }
  if (dims.size() < 9)
    throw DataError("anchor estimation needs at least 9 boxes, the training split has " + std::to_string(dims.size()));
  KMeansOptions o;
  o.seed = seed;
  o.restarts = 3;
  return kmeans_anchors(dims, o);
}

std::string format_epoch(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%s,%.3f", e.epoch, e.loss.total, e.loss.box, e.loss.obj,
                e.loss.cls, e.lr, e.val_ap ? num(*e.val_ap).c_str() : "", e.seconds);
  return buf;
}

namespace {

struct Batch {
  Tensor<float> images;
  std::vector<std::vector<BoxD>> boxes;
};

Batch make_batch(const std::vector<DatasetRecord>& records, std::span<const std::size_t> indices, Index size,
                 bool augment_images, Rng& rng) {
  static const AugmentOp ops[] = {AugmentOp::identity, AugmentOp::hflip,  AugmentOp::vflip,
                                  AugmentOp::rot90,    AugmentOp::rot180, AugmentOp::rot270};
  Batch b;
  b.images = Tensor<float>(Shape{Index(indices.size()), 3, size, size});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    DatasetRecord r = letterbox(records.at(indices[k]), size);
    if (augment_images) r = augment(r, ops[uniform_index(rng, 6)]);
    const auto t = image_to_tensor<float>(r.image);
    const Index plane = 3 * size * size;
    b.images.values().segment(Index(k) * plane, plane) = t.values();
    b.boxes.push_back(std::move(r.boxes));
  }
  return b;
}

}  // namespace

TrainResult train(const RunConfig& config, GraphConfig graph, const LogSink& log) {
  validate(config);
  const auto t_start = std::chrono::steady_clock::now();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  if (config.data.empty()) throw ConfigError("no dataset given");
  const auto records = load_dataset(config.data);
  if (records.empty()) throw DataError("dataset '" + config.data + "' has no images");
  const Split split = dataset_split(config.data, records, config.seed, config.split);
  if (split.train.empty()) throw DataError("training split is empty");

  if (!graph.anchors) {
    graph.anchors = estimate_anchors(records, split.train, config.input_size, config.seed);
    std::string a;
    for (const auto& wh : graph.anchors->all()) a += " " + num(wh.w) + "x" + num(wh.h);
    say("anchors:" + a);
  }
  Detector det(graph, config.input_size);  // shape errors surface here
  det.initialize(config.seed);
  say("parameters: " + std::to_string(det.params().trainable_count()) + " trainable");

  std::map<std::string, std::string> meta{{"seed", std::to_string(config.seed)},
                                          {"split", num(config.split[0]) + ":" + num(config.split[1]) + ":" +
                                                        num(config.split[2])},
                                          {"epochs", std::to_string(config.epochs)}};
  TrainResult result;
  if (config.epochs == 0) {
    meta["best_epoch"] = "0";
    save_checkpoint(config.out, det, meta);
    result.seconds = seconds_since(t_start);
    return result;
  }

  const std::size_t bs = std::size_t(config.batch_size);
  const long long batches = (static_cast<long long>(split.train.size()) + config.batch_size - 1) / config.batch_size;
  const std::array<double, 3> strides = det.strides();
  Sgd sgd(config.weight_decay);
  Rng rng(config.seed ^ 0x5EEDF00Dull);
  ParameterStore<float> best = det.params();
  long long iteration = 0;
  say(kEpochHeader);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = split.train;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    EpochLog e;
    e.epoch = epoch + 1;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++iteration) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      const Batch batch = make_batch(records, idx, config.input_size, config.augment, rng);
      det.params().zero_grad();
      Tape<float> tape;
      BlockContext<float> ctx(tape, det.params(), BatchNormOptions{NormMode::train});
      const auto heads = det.forward(ctx, tape.constant(batch.images));
      const std::vector<Var<float>> hv(heads.begin(), heads.end());
      const auto grids = head_grids<float>(hv, strides);
      std::vector<Assignment> targets;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto a = assign_targets(batch.boxes[k], det.anchors(), grids, Index(k), records[idx[k]].id);
        targets.insert(targets.end(), a.begin(), a.end());
      }
      const auto loss = total_loss<float>(hv, strides, det.anchors(), targets, graph.num_classes, config.loss);
      if (!std::isfinite(loss.parts.total))
        throw DataError("training diverged at epoch " + std::to_string(epoch + 1) + " (non-finite loss)");
      tape.backward(loss.total);
      const auto s = schedule_at(config, epoch, iteration, batches);
      sgd.step(det.params(), s);
      e.lr = s.weight_lr;
      // loss parts are per-image means within the batch
      const double n = double(idx.size());
      e.loss.total += loss.parts.total;
      e.loss.box += loss.parts.box * n;
      e.loss.obj += loss.parts.obj * n;
      e.loss.cls += loss.parts.cls * n;
      e.loss.positives += loss.parts.positives;
      seen += idx.size();
    }
    e.loss.total /= double(seen);
    e.loss.box /= double(seen);
    e.loss.obj /= double(seen);
    e.loss.cls /= double(seen);
    if (!split.val.empty()) {
      e.val_ap = evaluate_detector(det, records, split.val, config.eval_detect, config.eval_iou).ap;
      if (e.val_ap && (!result.best_val_ap || *e.val_ap > *result.best_val_ap)) {
        result.best_val_ap = e.val_ap;
        result.best_epoch = e.epoch;
        best = det.params();
      }
    } else {
      result.best_epoch = e.epoch;
      best = det.params();
    }
    e.seconds = seconds_since(t0);
    result.log.push_back(e);
    say(format_epoch(e));
  }
  if (result.best_epoch == 0) {  // no val AP was ever defined
    result.best_epoch = config.epochs;
    best = det.params();
  }

  det.params() = best;
  meta["best_epoch"] = std::to_string(result.best_epoch);
  if (result.best_val_ap) meta["val_ap"] = num(*result.best_val_ap);
  if (!split.test.empty()) {
    result.test_ap = evaluate_detector(det, records, split.test, config.eval_detect, config.eval_iou).ap;
    if (result.test_ap) meta["test_ap"] = num(*result.test_ap);
  }
  save_checkpoint(config.out, det, meta);
  result.seconds = seconds_since(t_start);
  say("best epoch " + std::to_string(result.best_epoch) +
      (result.best_val_ap ? "  val AP " + num(*result.best_val_ap) : std::string()) +
      (result.test_ap ? "  test AP " + num(*result.test_ap) : std::string()));
  return result;
}

}  // namespace tcyolo
