#include "tcyolo/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "tcyolo/log.hpp"
#include "tcyolo/random.hpp"

namespace fs = std::filesystem;

namespace tcyolo {

const std::vector<std::string>& scenario_vocabulary() {
  static const std::vector<std::string> v{"strong_light",    "weak_light",        "normal_light",
                                          "high_overlap",    "moderate_overlap",  "normal_overlap",
                                          "high_occlusion",  "moderate_occlusion", "normal_occlusion"};
  return v;
}

bool is_scenario_tag(const std::string& tag) {
  const auto& v = scenario_vocabulary();
  return std::find(v.begin(), v.end(), tag) != v.end();
}

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + p.string() + "'");
}

double snap(double v) { return std::round(v / kBoxQuantum) * kBoxQuantum; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

std::vector<BoxD> parse_labels(const std::string& text, Index width, Index height, const std::string& origin) {
  std::vector<BoxD> boxes;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::istringstream ls(line);
    std::string cls_text;
    double v[4];
    ls >> cls_text >> v[0] >> v[1] >> v[2] >> v[3];
    std::string extra;
    if (!ls || (ls >> extra)) throw DataError(where + ": expected 'class cx cy w h', got '" + line + "'");
    std::size_t used = 0;
    int cls = -1;
    try {
      cls = std::stoi(cls_text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != cls_text.size() || cls < 0) throw DataError(where + ": bad class '" + cls_text + "'");
    for (double x : v)
      if (!(x >= 0.0 && x <= 1.0)) throw DataError(where + ": coordinate outside [0, 1] in '" + line + "'");
    if (v[2] <= 0.0 || v[3] <= 0.0) throw DataError(where + ": zero-size box in '" + line + "'");
    const double W = double(width), H = double(height);
    const double x1 = snap(std::clamp((v[0] - v[2] / 2) * W, 0.0, W));
    const double x2 = snap(std::clamp((v[0] + v[2] / 2) * W, 0.0, W));
    const double y1 = snap(std::clamp((v[1] - v[3] / 2) * H, 0.0, H));
    const double y2 = snap(std::clamp((v[1] + v[3] / 2) * H, 0.0, H));
    if (!(x1 < x2 && y1 < y2)) throw DataError(where + ": box is empty after clamping to the image");
    BoxD b = BoxD::from_corners(x1, y1, x2, y2);
    b.class_id = cls;
    boxes.push_back(b);
  }
  return boxes;
}

std::string format_labels(const std::vector<BoxD>& boxes, Index width, Index height) {
  std::string out;
  char buf[160];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof buf, "%d %.17g %.17g %.17g %.17g\n", b.class_id, b.cx / double(width),
                  b.cy / double(height), b.w / double(width), b.h / double(height));
    out += buf;
  }
  return out;
}

std::vector<DatasetRecord> load_dataset(const std::string& root) {
  const fs::path images = fs::path(root) / "images", labels = fs::path(root) / "labels",
                 tags = fs::path(root) / "tags";
  if (!fs::is_directory(images)) throw IoError("missing images directory '" + images.string() + "'");
  if (!fs::is_directory(labels)) throw IoError("missing labels directory '" + labels.string() + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".ppm" || ext == ".png")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<DatasetRecord> records;
  std::set<std::string> ids;
  for (const auto& f : files) {
    DatasetRecord r;
    r.id = f.stem().string();
    if (!ids.insert(r.id).second) throw DataError("duplicate image id '" + r.id + "' in " + images.string());
    r.image = read_image(f.string());
    const fs::path label = labels / (r.id + ".txt");
    if (fs::exists(label))
      r.boxes = parse_labels(read_text(label), r.image.width, r.image.height, label.string());
    else
      warn("image '" + r.id + "' has no label file; loaded with zero boxes");
    const fs::path tag = tags / (r.id + ".txt");
    if (fs::exists(tag)) {
      std::istringstream in(read_text(tag));
      std::string t;
      while (std::getline(in, t)) {
        t = trim(t);
        if (t.empty()) continue;
        if (!is_scenario_tag(t)) throw DataError(tag.string() + ": unknown scenario tag '" + t + "'");
        r.tags.push_back(t);
      }
    }
    records.push_back(std::move(r));
  }
  return records;
}

void save_record(const std::string& root, const DatasetRecord& r) {
  const fs::path base(root);
  for (const char* d : {"images", "labels", "tags"}) fs::create_directories(base / d);
  write_ppm((base / "images" / (r.id + ".ppm")).string(), r.image);
  write_text(base / "labels" / (r.id + ".txt"), format_labels(r.boxes, r.image.width, r.image.height));
  std::string tags;
  for (const auto& t : r.tags) tags += t + "\n";
  write_text(base / "tags" / (r.id + ".txt"), tags);
}

// ---------------------------------------------------------------------------

std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
  double total = 0;
  for (double r : ratios) {
    if (!(r > 0)) throw ConfigError("split ratios must be positive");
    total += r;
  }
  if (n < ratios.size())
    throw DataError("cannot split " + std::to_string(n) + " records into " + std::to_string(ratios.size()) +
                    " partitions");
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = double(n) * ratios[i] / total;
    sizes[i] = std::size_t(std::floor(exact));
    remainder[i] = exact - double(sizes[i]);
    assigned += sizes[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  return sizes;
}

Split split_records(std::size_t n, std::uint64_t seed, const std::array<double, 3>& ratios) {
  const auto sizes = split_sizes(n, ratios);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + std::ptrdiff_t(sizes[0]));
  s.val.assign(idx.begin() + std::ptrdiff_t(sizes[0]), idx.begin() + std::ptrdiff_t(sizes[0] + sizes[1]));
  s.test.assign(idx.begin() + std::ptrdiff_t(sizes[0] + sizes[1]), idx.end());
  return s;
}

void write_split_manifests(const std::string& root, const std::vector<DatasetRecord>& records, const Split& split) {
  const fs::path dir = fs::path(root) / "splits";
  fs::create_directories(dir);
  auto write = [&](const char* name, const std::vector<std::size_t>& part) {
    std::string text;
    for (std::size_t i : part) text += records.at(i).id + "\n";
    write_text(dir / name, text);
  };
  write("train.txt", split.train);
  write("val.txt", split.val);
  write("test.txt", split.test);
}

bool read_split_manifests(const std::string& root, const std::vector<DatasetRecord>& records, Split& split) {
  const fs::path dir = fs::path(root) / "splits";
  if (!fs::is_directory(dir)) return false;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index[records[i].id] = i;
  std::set<std::size_t> seen;
  auto read = [&](const char* name, std::vector<std::size_t>& part) {
    part.clear();
    std::istringstream in(read_text(dir / name));
    std::string id;
    while (std::getline(in, id)) {
      id = trim(id);
      if (id.empty()) continue;
      auto it = index.find(id);
      if (it == index.end()) throw DataError((dir / name).string() + ": unknown image id '" + id + "'");
      if (!seen.insert(it->second).second) throw DataError((dir / name).string() + ": id '" + id + "' listed twice");
      part.push_back(it->second);
    }
  };
  read("train.txt", split.train);
  read("val.txt", split.val);
  read("test.txt", split.test);
  return true;
}

// ---------------------------------------------------------------------------

AugmentOp inverse(AugmentOp op) {
  switch (op) {
    case AugmentOp::rot90: return AugmentOp::rot270;
    case AugmentOp::rot270: return AugmentOp::rot90;
    default: return op;
  }
}

std::string augment_name(AugmentOp op) {
  switch (op) {
    case AugmentOp::identity: return "identity";
    case AugmentOp::hflip: return "hflip";
    case AugmentOp::vflip: return "vflip";
    case AugmentOp::rot90: return "rot90";
    case AugmentOp::rot180: return "rot180";
    case AugmentOp::rot270: return "rot270";
  }
  return "?";
}

BoxD augment_box(const BoxD& b, Index width, Index height, AugmentOp op) {
  const double W = double(width), H = double(height);
  BoxD o = b;
  switch (op) {
    case AugmentOp::identity: break;
    case AugmentOp::hflip: o.cx = W - b.cx; break;
    case AugmentOp::vflip: o.cy = H - b.cy; break;
    case AugmentOp::rot180:
      o.cx = W - b.cx;
      o.cy = H - b.cy;
      break;
    case AugmentOp::rot90:  // clockwise: (x, y) -> (H - y, x)
      o.cx = H - b.cy;
      o.cy = b.cx;
      o.w = b.h;
      o.h = b.w;
      break;
    case AugmentOp::rot270:  // (x, y) -> (y, W - x)
      o.cx = b.cy;
      o.cy = W - b.cx;
      o.w = b.h;
      o.h = b.w;
      break;
  }
  return o;
}

DatasetRecord augment(const DatasetRecord& r, AugmentOp op) {
  const Index W = r.image.width, H = r.image.height;
  const bool swap = op == AugmentOp::rot90 || op == AugmentOp::rot270;
  DatasetRecord out;
  out.id = r.id;
  out.tags = r.tags;
  out.image = Image(swap ? H : W, swap ? W : H);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      Index nx = x, ny = y;
      switch (op) {
        case AugmentOp::identity: break;
        case AugmentOp::hflip: nx = W - 1 - x; break;
        case AugmentOp::vflip: ny = H - 1 - y; break;
        case AugmentOp::rot180:
          nx = W - 1 - x;
          ny = H - 1 - y;
          break;
        case AugmentOp::rot90:
          nx = H - 1 - y;
          ny = x;
          break;
        case AugmentOp::rot270:
          nx = y;
          ny = W - 1 - x;
          break;
      }
      for (int c = 0; c < 3; ++c) out.image.at(nx, ny, c) = r.image.at(x, y, c);
    }
  for (const auto& b : r.boxes) out.boxes.push_back(augment_box(b, W, H, op));
  return out;
}

// ---------------------------------------------------------------------------

BoxD LetterboxTransform::forward(const BoxD& b) const {
  BoxD o = b;
  o.cx = b.cx * scale + pad_x;
  o.cy = b.cy * scale + pad_y;
  o.w = b.w * scale;
  o.h = b.h * scale;
  return o;
}

BoxD LetterboxTransform::inverse(const BoxD& b) const {
  BoxD o = b;
  o.cx = (b.cx - pad_x) / scale;
  o.cy = (b.cy - pad_y) / scale;
  o.w = b.w / scale;
  o.h = b.h / scale;
  return o;
}

LetterboxTransform letterbox_transform(Index width, Index height, Index size) {
  if (size < 32 || size % 32) throw ConfigError("letterbox size " + std::to_string(size) + " must be a multiple of 32");
  if (width < 1 || height < 1) throw DataError("letterbox of an empty image");
  LetterboxTransform t;
  t.source_width = width;
  t.source_height = height;
  t.size = size;
  t.scale = std::min(double(size) / double(width), double(size) / double(height));
  const Index nw = std::max<Index>(1, Index(std::lround(double(width) * t.scale)));
  const Index nh = std::max<Index>(1, Index(std::lround(double(height) * t.scale)));
  t.pad_x = double((size - nw) / 2);
  t.pad_y = double((size - nh) / 2);
  return t;
}

DatasetRecord letterbox(const DatasetRecord& r, Index size, LetterboxTransform* transform) {
  const auto t = letterbox_transform(r.image.width, r.image.height, size);
  if (transform) *transform = t;
  DatasetRecord out;
  out.id = r.id;
  out.tags = r.tags;
  if (r.image.width == size && r.image.height == size) {
    out.image = r.image;
    out.boxes = r.boxes;
    return out;
  }
  const Index nw = std::max<Index>(1, Index(std::lround(double(r.image.width) * t.scale)));
  const Index nh = std::max<Index>(1, Index(std::lround(double(r.image.height) * t.scale)));
  const Image scaled = resize_bilinear(r.image, nw, nh);
  out.image = Image(size, size, kLetterboxGray);
  const Index ox = Index(t.pad_x), oy = Index(t.pad_y);
  for (Index y = 0; y < nh; ++y)
    for (Index x = 0; x < nw; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(ox + x, oy + y, c) = scaled.at(x, y, c);
  for (const auto& b : r.boxes) out.boxes.push_back(t.forward(b));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

using Rgb = std::array<double, 3>;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

Index uniform_int(Rng& rng, Index lo, Index hi) {  // inclusive
  return lo + Index(uniform_index(rng, std::uint64_t(hi - lo + 1)));
}

struct Ellipse {
  Index cx, cy, rx, ry;
  BoxD box() const { return BoxD{double(cx), double(cy), double(2 * rx), double(2 * ry)}; }
};

bool inside(const Ellipse& e, Index x, Index y) {
  const double dx = (double(x) + 0.5 - double(e.cx)) / double(e.rx);
  const double dy = (double(y) + 0.5 - double(e.cy)) / double(e.ry);
  return dx * dx + dy * dy <= 1.0;
}

std::uint8_t to_byte(double v) { return std::uint8_t(std::clamp(std::lround(v), 0L, 255L)); }

// Fills the ellipse with a radial two-tone pattern: `inner` within
// `core` of the radius, `outer` elsewhere, with petal striping.
// Returns the painted pixel indices.
std::vector<Index> paint(Image& img, const Ellipse& e, const Rgb& outer, const Rgb& inner, double core,
                         int petals, double light) {
  std::vector<Index> painted;
  for (Index y = std::max<Index>(0, e.cy - e.ry); y < std::min(img.height, e.cy + e.ry); ++y)
    for (Index x = std::max<Index>(0, e.cx - e.rx); x < std::min(img.width, e.cx + e.rx); ++x) {
      if (!inside(e, x, y)) continue;
      const double dx = (double(x) + 0.5 - double(e.cx)) / double(e.rx);
      const double dy = (double(y) + 0.5 - double(e.cy)) / double(e.ry);
      const double r = std::sqrt(dx * dx + dy * dy);
      const Rgb& base = r < core ? inner : outer;
      const double stripe = petals > 0 ? 0.85 + 0.15 * std::cos(petals * std::atan2(dy, dx)) : 1.0;
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = to_byte(base[std::size_t(c)] * stripe * light);
      painted.push_back(y * img.width + x);
    }
  return painted;
}

Rgb jitter(Rng& rng, Rgb c, double amount) {
  for (auto& v : c) v += uniform(rng, -amount, amount);
  return c;
}

double pair_iou(const Ellipse& a, const Ellipse& b) { return iou(a.box(), b.box()); }

}  // namespace

SynthRecord synth_record(std::uint64_t seed, std::size_t index, const SynthOptions& o) {
  if (o.size < 32 || o.min_radius < 2 || o.max_radius < o.min_radius || 2 * o.max_radius >= o.size)
    throw ConfigError("synth: invalid size/radius options");
  if (o.min_targets < 0 || o.max_targets < o.min_targets) throw ConfigError("synth: invalid target counts");
  if (o.overlap < 0 || o.overlap >= 1) throw ConfigError("synth: overlap ratio must lie in [0, 1)");
  Rng rng(splitmix(seed ^ splitmix(std::uint64_t(index))));
  SynthRecord out;
  DatasetRecord& r = out.record;
  char id[32];
  std::snprintf(id, sizeof id, "img_%05zu", index);
  r.id = id;

  double light = 1.0;
  std::string light_tag = "normal_light";
  if (o.vary_light) {
    const double u = uniform01(rng);
    if (u < 0.2) {
      light = uniform(rng, 1.25, 1.45);
      light_tag = "strong_light";
    } else if (u < 0.4) {
      light = uniform(rng, 0.5, 0.65);
      light_tag = "weak_light";
    }
  }
  const Rgb soil = jitter(rng, {88, 72, 52}, 14);
  for (int c = 0; c < 3; ++c) out.background[std::size_t(c)] = to_byte(soil[std::size_t(c)] * light);
  r.image = Image(o.size, o.size);
  for (Index i = 0; i < o.size * o.size; ++i)
    for (int c = 0; c < 3; ++c) r.image.pixels[std::size_t(i * 3 + c)] = out.background[std::size_t(c)];

  auto random_ellipse = [&](Index rmin, Index rmax) {
    Ellipse e;
    e.rx = uniform_int(rng, rmin, rmax);
    e.ry = std::clamp<Index>(Index(std::lround(double(e.rx) * uniform(rng, 0.75, 1.33))), rmin, rmax);
    e.cx = uniform_int(rng, e.rx, o.size - e.rx);
    e.cy = uniform_int(rng, e.ry, o.size - e.ry);
    return e;
  };

  // distractors: leaves and purple flowers, drawn first
  const int distractors = int(uniform_int(rng, 0, o.max_distractors));
  for (int k = 0; k < distractors; ++k) {
    const Ellipse e = random_ellipse(o.min_radius, o.max_radius);
    if (uniform01(rng) < 0.5)
      paint(r.image, e, jitter(rng, {62, 138, 52}, 12), jitter(rng, {50, 115, 45}, 10), 0.0, 0, light);
    else
      paint(r.image, e, jitter(rng, {148, 62, 158}, 12), jitter(rng, {90, 30, 100}, 10), 0.3, 6, light);
  }

  // targets
  std::vector<Ellipse> targets;
  std::vector<std::vector<Index>> pixels;
  const int wanted = int(uniform_int(rng, o.min_targets, o.max_targets));
  for (int k = 0; k < wanted; ++k) {
    for (int attempt = 0; attempt < 30; ++attempt) {
      const Ellipse e = random_ellipse(o.min_radius, o.max_radius);
      bool clear = true;
      for (const auto& t : targets) clear = clear && pair_iou(e, t) < 0.05;
      if (!clear) continue;
      targets.push_back(e);
      break;
    }
  }
  auto draw_target = [&](const Ellipse& e) {
    return paint(r.image, e, jitter(rng, {236, 204, 48}, 10), jitter(rng, {214, 118, 26}, 10), 0.35, 12, light);
  };
  for (const auto& e : targets) pixels.push_back(draw_target(e));

  // injected overlap partner: same size, shifted so the shared width is at
  // least `overlap` of the box width
  if (o.overlap > 0 && !targets.empty() && uniform01(rng) < o.overlap_probability) {
    const std::size_t base = targets.size() - 1;
    const Ellipse t = targets[base];
    const Index shift = std::max<Index>(1, Index(std::floor((1.0 - o.overlap) * double(2 * t.rx))));
    Ellipse p = t;
    p.cx = t.cx + shift <= o.size - t.rx ? t.cx + shift : t.cx - shift;
    if (p.cx >= t.rx && p.cx <= o.size - t.rx) {
      targets.push_back(p);
      pixels.push_back(draw_target(p));
      out.overlap_pairs.emplace_back(base, targets.size() - 1);
    }
  }

  // occluding leaves over some targets
  double worst_occlusion = 0;
  const std::size_t n_targets = targets.size();
  for (std::size_t k = 0; k < n_targets; ++k) {
    if (uniform01(rng) >= o.occlusion_probability) continue;
    const Ellipse& t = targets[k];
    Ellipse leaf;
    leaf.rx = std::max<Index>(2, Index(std::lround(double(t.rx) * uniform(rng, 0.45, 0.75))));
    leaf.ry = std::max<Index>(2, Index(std::lround(double(t.ry) * uniform(rng, 0.45, 0.75))));
    const double angle = uniform(rng, 0, 2 * M_PI);
    leaf.cx = t.cx + Index(std::lround(std::cos(angle) * double(t.rx) * 0.9));
    leaf.cy = t.cy + Index(std::lround(std::sin(angle) * double(t.ry) * 0.9));
    const auto covered = paint(r.image, leaf, jitter(rng, {62, 138, 52}, 12), {50, 115, 45}, 0.0, 0, light);
    const std::set<Index> cover(covered.begin(), covered.end());
    std::size_t hidden = 0;
    for (Index p : pixels[k]) hidden += cover.count(p);
    worst_occlusion = std::max(worst_occlusion, double(hidden) / double(std::max<std::size_t>(1, pixels[k].size())));
  }

  double worst_overlap = 0;
  for (std::size_t a = 0; a < targets.size(); ++a)
    for (std::size_t b = a + 1; b < targets.size(); ++b) worst_overlap = std::max(worst_overlap, pair_iou(targets[a], targets[b]));

  for (const auto& t : targets) r.boxes.push_back(t.box());
  r.tags = {light_tag,
            worst_overlap >= 0.3 ? "high_overlap" : worst_overlap > 0.0 ? "moderate_overlap" : "normal_overlap",
            worst_occlusion > 0.3 ? "high_occlusion" : worst_occlusion > 0.05 ? "moderate_occlusion" : "normal_occlusion"};
  return out;
}

void synth_dataset(const std::string& root, std::size_t n, std::uint64_t seed, const SynthOptions& options) {
  if (n < 1) throw ConfigError("synth needs n >= 1");
  for (std::size_t i = 0; i < n; ++i) save_record(root, synth_record(seed, i, options).record);
}

}  // namespace tcyolo
