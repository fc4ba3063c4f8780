// tcyolo: batch front end (anchors, synth, train, detect, eval, analyze, activations).

#include <glob.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "tcyolo/anchors.hpp"
#include "tcyolo/train.hpp"

namespace fs = std::filesystem;
using namespace tcyolo;

namespace {

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorCategory::usage, what) {}
};

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << text;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  globfree(&g);
  if (out.empty()) throw IoError("no images match '" + pattern + "'");
  std::sort(out.begin(), out.end());
  return out;
}

void draw_box(Image& img, const BoxD& b) {
  const Index x1 = std::clamp<Index>(Index(std::floor(b.x1())), 0, img.width - 1);
  const Index x2 = std::clamp<Index>(Index(std::ceil(b.x2())) - 1, 0, img.width - 1);
  const Index y1 = std::clamp<Index>(Index(std::floor(b.y1())), 0, img.height - 1);
  const Index y2 = std::clamp<Index>(Index(std::ceil(b.y2())) - 1, 0, img.height - 1);
  auto put = [&](Index x, Index y) {
    img.at(x, y, 0) = 255;
    img.at(x, y, 1) = 0;
    img.at(x, y, 2) = 0;
  };
  for (Index x = x1; x <= x2; ++x) put(x, y1), put(x, y2);
  for (Index y = y1; y <= y2; ++y) put(x1, y), put(x2, y);
}

std::vector<std::size_t> pick_split(const Split& s, const std::string& which, std::size_t n) {
  if (which == "train") return s.train;
  if (which == "val") return s.val;
  if (which == "test") return s.test;
  if (which == "all") {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  throw UsageError("unknown split '" + which + "' (train, val, test or all)");
}

std::uint64_t meta_seed(const Checkpoint& ck) {
  auto it = ck.meta.find("seed");
  return it == ck.meta.end() ? 0 : std::stoull(it->second);
}

// ---------------------------------------------------------------------------

struct AnchorsArgs {
  std::string data, out;
  std::uint64_t seed = 0;
  Index size = 416;
  int k = 9;
};

void cmd_anchors(const AnchorsArgs& a) {
  const auto records = load_dataset(a.data);
  std::vector<AnchorWH> dims;
  for (const auto& r : records) {
    const auto t = letterbox_transform(r.image.width, r.image.height, a.size);
    for (const auto& b : r.boxes) dims.push_back({b.w * t.scale, b.h * t.scale});
  }
  if (dims.size() < std::size_t(a.k)) throw DataError("need at least " + std::to_string(a.k) + " boxes for k-means");
  KMeansOptions o;
  o.k = a.k;
  o.seed = a.seed;
  o.restarts = 3;
  const auto res = kmeans_dims(dims, o);
  std::string yaml = "anchors:\n";
  for (const auto& c : res.centroids) {
    std::cout << fmt("%.2f", c.w) << "," << fmt("%.2f", c.h) << "\n";
    yaml += "  - [" + fmt("%.17g", c.w) + ", " + fmt("%.17g", c.h) + "]\n";
  }
  std::cout << "boxes " << dims.size() << "  mean best IoU " << fmt("%.4f", mean_best_iou(dims, res.centroids))
            << "  iterations " << res.iterations << "\n";
  if (!a.out.empty()) write_text(a.out, yaml);
}

struct SynthArgs {
  std::size_t n = 200;
  std::string out;
  std::uint64_t seed = 0;
  double overlap = 0;
  Index size = 128;
};

void cmd_synth(const SynthArgs& a) {
  SynthOptions o;
  o.size = a.size;
  o.overlap = a.overlap;
  synth_dataset(a.out, a.n, a.seed, o);
  const auto records = load_dataset(a.out);
  const auto split = split_records(records.size(), a.seed);
  write_split_manifests(a.out, records, split);
  std::cout << "wrote " << a.n << " images to " << a.out << " (train " << split.train.size() << ", val "
            << split.val.size() << ", test " << split.test.size() << ")\n";
}

struct TrainArgs {
  std::string config, data, graph, out, log;
  int epochs = -1, batch = -1;
  Index size = -1;
  double lr = -1;
  std::int64_t seed = -1;
  bool no_warmup = false, no_augment = false;
};

void cmd_train(const TrainArgs& a) {
  RunConfig c = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  // flags override the config file
  if (!a.data.empty()) c.data = a.data;
  if (!a.graph.empty()) c.graph = a.graph;
  if (!a.out.empty()) c.out = a.out;
  if (a.epochs >= 0) c.epochs = a.epochs;
  if (a.batch >= 0) c.batch_size = a.batch;
  if (a.size >= 0) c.input_size = a.size;
  if (a.lr >= 0) c.lr = a.lr;
  if (a.seed >= 0) c.seed = std::uint64_t(a.seed);
  if (a.no_warmup) c.warmup_epochs = 0;
  if (a.no_augment) c.augment = false;
  validate(c);
  if (c.data.empty()) throw UsageError("train needs --data (or 'data' in the config)");
  if (c.graph.empty()) throw UsageError("train needs --graph (or 'graph' in the config)");
  const GraphConfig graph = load_graph_config(c.graph);

  std::ofstream log_file;
  const std::string log_path = a.log.empty() ? c.out + ".log" : a.log;
  log_file.open(log_path);
  if (!log_file) throw IoError("cannot write log '" + log_path + "'");
  const auto result = train(c, graph, [&](const std::string& line) {
    std::cout << line << std::endl;
    log_file << line << "\n";
  });
  std::cout << "checkpoint " << c.out << " (" << fmt("%.1f", result.seconds) << " s)\n";
}

struct DetectArgs {
  std::string ckpt, images, out = "detections", config;
  bool draw = false;
  double score = -1, nms = -1;
};

void cmd_detect(const DetectArgs& a) {
  const Detector det = load_detector(a.ckpt);
  DetectOptions o = a.config.empty() ? RunConfig{}.detect : load_run_config(a.config).detect;
  if (a.score >= 0) o.score_threshold = a.score;
  if (a.nms >= 0) o.nms_iou = a.nms;
  const auto files = expand_glob(a.images);
  fs::create_directories(a.out);
  double total = 0;
  std::size_t count = 0;
  for (const auto& f : files) {
    const Image img = read_image(f);
    const auto t0 = std::chrono::steady_clock::now();
    const auto boxes = det.detect(img, o);
    total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::string id = fs::path(f).stem().string();
    std::string text;
    for (const auto& b : boxes) text += format_detection(id, b) + "\n";
    write_text(fs::path(a.out) / (id + ".txt"), text);
    if (a.draw) {
      Image drawn = img;
      for (const auto& b : boxes) draw_box(drawn, b);
      write_png((fs::path(a.out) / (id + ".png")).string(), drawn);
    }
    count += boxes.size();
  }
  const std::string summary = std::to_string(files.size()) + " images, " + std::to_string(count) +
                              " detections, " + fmt("%.3f", total) + " s, " +
                              fmt("%.2f", total > 0 ? double(files.size()) / total : 0.0) + " images/s\n";
  write_text(fs::path(a.out) / "timing.txt", summary);
  std::cout << summary;
}

struct EvalArgs {
  std::string ckpt, data, split = "test", csv, pr, config;
  double iou = -1;
};

void cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = read_checkpoint(a.ckpt);
  const Detector det = load_detector(a.ckpt);
  RunConfig c = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.iou >= 0) c.eval_iou = a.iou;
  validate(c);
  const auto records = load_dataset(a.data);
  const Split split = dataset_split(a.data, records, meta_seed(ck), c.split);
  const auto idx = pick_split(split, a.split, records.size());
  const auto rep = evaluate_detector(det, records, idx, c.eval_detect, c.eval_iou, c.detect.score_threshold);
  std::cout << format_report(rep);
  if (!a.csv.empty()) write_text(a.csv, format_report_csv(rep));
  if (!a.pr.empty()) write_text(a.pr, format_pr_curve(rep.curve));
}

struct AnalyzeArgs {
  std::string graph, csv;
  Index size = 416;
};

void cmd_analyze(const AnalyzeArgs& a) {
  const GraphConfig config = load_graph_config(a.graph);
  const ModelGraph tmpl = build_graph(config);
  const ModelGraph g = rfp_unroll(tmpl, config.rfp_steps);
  const auto shapes = infer_shapes(g, a.size, a.size);
  std::printf("%-16s %-12s %s\n", "node", "kind", "shape");
  for (const auto& n : g.nodes)
    std::printf("%-16s %-12s %s\n", n.name.c_str(), layer_kind_name(n.kind).c_str(), shapes.at(n.name).str().c_str());
  std::printf("\nheads:");
  for (const auto& h : g.heads) std::printf(" %s %lldx%lld", h.c_str(), (long long)shapes.at(h)[2], (long long)shapes.at(h)[3]);
  const auto rep = analyze_cio(g, shapes);
  std::printf("\n\n%-10s %6s %4s %6s %12s %12s %8s\n", "block", "c", "m", "d", "CIO dense", "CIO partial", "saving");
  std::string csv = "block,c,m,d,cio_dense,cio_partial,saving\n";
  for (const auto& r : rep.rows) {
    std::printf("%-10s %6lld %4lld %6lld %12lld %12lld %7.2f%%\n", r.block.c_str(), (long long)r.c, (long long)r.m,
                (long long)r.d, (long long)r.dense.reported(), (long long)r.partial.reported(), 100 * r.saving());
    csv += r.block + "," + std::to_string(r.c) + "," + std::to_string(r.m) + "," + std::to_string(r.d) + "," +
           std::to_string(r.dense.reported()) + "," + std::to_string(r.partial.reported()) + "," +
           fmt("%.6f", r.saving()) + "\n";
  }
  std::printf("%-10s %6s %4s %6s %12lld %12lld\n", "total", "", "", "", (long long)rep.total_dense.reported(),
              (long long)rep.total_partial.reported());
  csv += "total,,,," + std::to_string(rep.total_dense.reported()) + "," + std::to_string(rep.total_partial.reported()) + ",\n";
  ParameterStore<float> store;
  declare_parameters(tmpl, store, 0);
  std::printf("\nparameters %lld trainable\n", (long long)store.trainable_count());
  if (!a.csv.empty()) write_text(a.csv, csv);
}

struct ActivationsArgs {
  std::string ckpt, image, layers, out = ".";
};

void cmd_activations(const ActivationsArgs& a) {
  const Detector det = load_detector(a.ckpt);
  const Image img = read_image(a.image);
  std::vector<std::string> layers;
  std::stringstream ss(a.layers);
  for (std::string l; std::getline(ss, l, ',');)
    if (!l.empty()) layers.push_back(l);
  if (layers.empty()) throw UsageError("--layers needs at least one name");
  fs::create_directories(a.out);
  const std::string stem = fs::path(a.image).stem().string();
  for (const auto& layer : layers) {
    const auto t = det.activation(img, layer);
    std::string safe = layer;
    std::replace(safe.begin(), safe.end(), '@', '_');
    const fs::path p = fs::path(a.out) / (stem + "_" + safe + ".png");
    write_gray_png(p.string(), t.dim(3), t.dim(2), activation_map(t));
    std::cout << p.string() << " " << t.dim(3) << "x" << t.dim(2) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TC-YOLO desk-scale detector"};
  app.require_subcommand(1);

  AnchorsArgs anchors;
  auto* a = app.add_subcommand("anchors", "k-means anchors from a dataset");
  a->add_option("--data", anchors.data, "dataset root")->required();
  a->add_option("--seed", anchors.seed);
  a->add_option("--size", anchors.size, "network input size");
  a->add_option("--k", anchors.k, "number of anchors");
  a->add_option("--out", anchors.out, "write anchors as YAML");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic dataset");
  s->add_option("--n", synth.n)->required();
  s->add_option("--out", synth.out)->required();
  s->add_option("--seed", synth.seed)->required();
  s->add_option("--overlap", synth.overlap, "overlap ratio of injected partners");
  s->add_option("--size", synth.size, "image size");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a detector");
  t->add_option("--config", tr.config, "run config YAML; flags override it");
  t->add_option("--data", tr.data);
  t->add_option("--graph", tr.graph);
  t->add_option("--epochs", tr.epochs);
  t->add_option("--size", tr.size);
  t->add_option("--batch", tr.batch);
  t->add_option("--lr", tr.lr);
  t->add_option("--seed", tr.seed);
  t->add_option("--out", tr.out, "checkpoint path");
  t->add_option("--log", tr.log, "training log (default <out>.log)");
  t->add_flag("--no-warmup", tr.no_warmup);
  t->add_flag("--no-augment", tr.no_augment);

  DetectArgs dt;
  auto* d = app.add_subcommand("detect", "run a checkpoint on images");
  d->add_option("--ckpt", dt.ckpt)->required();
  d->add_option("--images", dt.images, "glob")->required();
  d->add_option("--out", dt.out, "output directory");
  d->add_option("--config", dt.config);
  d->add_option("--score", dt.score);
  d->add_option("--nms", dt.nms);
  d->add_flag("--draw", dt.draw, "write annotated PNGs");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "AP and scenario report");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--iou", ev.iou);
  e->add_option("--split", ev.split, "train, val, test or all");
  e->add_option("--config", ev.config);
  e->add_option("--csv", ev.csv);
  e->add_option("--pr", ev.pr, "precision-recall points file");

  AnalyzeArgs an;
  auto* z = app.add_subcommand("analyze", "shapes, CIO and parameter count");
  z->add_option("--graph", an.graph)->required();
  z->add_option("--size", an.size)->required();
  z->add_option("--csv", an.csv);

  ActivationsArgs ac;
  auto* v = app.add_subcommand("activations", "feature maps as grayscale PNGs");
  v->add_option("--ckpt", ac.ckpt)->required();
  v->add_option("--image", ac.image)->required();
  v->add_option("--layers", ac.layers)->required();
  v->add_option("--out", ac.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "error: usage: " << ex.what() << "\n";
    return 2;
  }

  try {
    if (*a) cmd_anchors(anchors);
    if (*s) cmd_synth(synth);
    if (*t) cmd_train(tr);
    if (*d) cmd_detect(dt);
    if (*e) cmd_eval(ev);
    if (*z) cmd_analyze(an);
    if (*v) cmd_activations(ac);
  } catch (const Error& ex) {
    std::cerr << "error: " << category_name(ex.category()) << ": " << ex.what() << "\n";
    return ex.category() == ErrorCategory::usage ? 2 : 1;
  } catch (const std::exception& ex) {
    std::cerr << "error: internal: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
