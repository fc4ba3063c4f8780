#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "support/oracles.hpp"
#include "tcyolo/data.hpp"
#include "tcyolo/log.hpp"

using namespace tcyolo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("tcyolo_" + name + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

Image noise_image(std::mt19937_64& rng, Index w, Index h) {
  Image img(w, h);
  for (auto& p : img.pixels) p = std::uint8_t(rng() & 0xff);
  return img;
}

DatasetRecord random_record(std::mt19937_64& rng, Index w, Index h) {
  DatasetRecord r;
  r.id = "r";
  r.image = noise_image(rng, w, h);
  std::uniform_real_distribution<double> u(0, 1);
  for (int k = 0; k < 5; ++k) {
    double x1 = u(rng) * w, x2 = u(rng) * w, y1 = u(rng) * h, y2 = u(rng) * h;
    if (x1 > x2) std::swap(x1, x2);
    if (y1 > y2) std::swap(y1, y2);
    const auto q = [](double v) { return std::round(v / kBoxQuantum) * kBoxQuantum; };
    x2 = std::max(q(x2), q(x1) + kBoxQuantum);
    y2 = std::max(q(y2), q(y1) + kBoxQuantum);
    r.boxes.push_back(BoxD::from_corners(q(x1), q(y1), x2, y2));
  }
  return r;
}

}  // namespace

TEST_CASE("label parsing converts normalized boxes to pixels") {
  const auto boxes = parse_labels("0 0.5 0.5 0.25 0.25\n", 400, 400, "x.txt");
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0].cx == 200);
  CHECK(boxes[0].cy == 200);
  CHECK(boxes[0].w == 100);
  CHECK(boxes[0].h == 100);
  CHECK(boxes[0].class_id == 0);

  CHECK(parse_labels("", 10, 10, "e").empty());
  CHECK(parse_labels("\n  \n", 10, 10, "e").empty());
}

TEST_CASE("label errors name the file and line") {
  try {
    parse_labels("0 0.5 0.5 0.1 0.1\n0 1.2 0.5 0.25 0.25\n", 100, 100, "labels/a.txt");
    FAIL("expected an error");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("labels/a.txt:2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_labels("0 0.5 0.5 0.1\n", 100, 100, "f"), DataError);
  CHECK_THROWS_AS(parse_labels("x 0.5 0.5 0.1 0.1\n", 100, 100, "f"), DataError);
  CHECK_THROWS_AS(parse_labels("0 0.5 0.5 0 0.1\n", 100, 100, "f"), DataError);
  CHECK_THROWS_AS(parse_labels("0 0.5 0.5 0.1 0.1 7\n", 100, 100, "f"), DataError);
}

TEST_CASE("boxes crossing the border are clamped") {
  const auto b = parse_labels("0 0.0 0.5 0.5 0.5\n", 100, 100, "f").at(0);
  CHECK(b.x1() == 0);
  CHECK(b.x2() == 25);
  CHECK(b.y1() == 25);
  CHECK(b.y2() == 75);
}

TEST_CASE("labels round trip through formatting") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const Index w = 16 + Index(rng() % 500), h = 16 + Index(rng() % 500);
    const auto r = random_record(rng, w, h);
    const auto back = parse_labels(format_labels(r.boxes, w, h), w, h, "rt");
    REQUIRE(back.size() == r.boxes.size());
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == r.boxes[i]);
  }
}

TEST_CASE("split sizes use largest remainder") {
  CHECK(split_sizes(1000, {6, 3, 1}) == std::array<std::size_t, 3>{600, 300, 100});
  CHECK(split_sizes(10, {6, 3, 1}) == std::array<std::size_t, 3>{6, 3, 1});
  CHECK(split_sizes(11, {6, 3, 1}) == std::array<std::size_t, 3>{7, 3, 1});  // 6.6, 3.3, 1.1
  CHECK(split_sizes(3, {6, 3, 1}) == std::array<std::size_t, 3>{2, 1, 0});
  CHECK_THROWS_AS(split_sizes(2, {6, 3, 1}), DataError);
  for (std::size_t n = 3; n < 300; ++n) {
    const auto s = split_sizes(n, {6, 3, 1});
    CHECK(s[0] + s[1] + s[2] == n);
    for (int i = 0; i < 3; ++i) {
      const double exact = double(n) * std::array<double, 3>{0.6, 0.3, 0.1}[std::size_t(i)];
      CHECK(std::abs(double(s[std::size_t(i)]) - exact) < 1.0);
    }
  }
}

TEST_CASE("split is a seeded partition") {
  const auto a = split_records(1000, 42), b = split_records(1000, 42), c = split_records(1000, 43);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
  CHECK(a.train != c.train);
  CHECK(a.train.size() == 600);
  CHECK(a.val.size() == 300);
  CHECK(a.test.size() == 100);
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  all.insert(a.test.begin(), a.test.end());
  CHECK(all.size() == 1000);
  CHECK(*all.rbegin() == 999);
}

TEST_CASE("augmentations are exact involutions") {
  std::mt19937_64 rng(9);
  const AugmentOp ops[] = {AugmentOp::identity, AugmentOp::hflip,  AugmentOp::vflip,
                           AugmentOp::rot90,    AugmentOp::rot180, AugmentOp::rot270};
  for (int t = 0; t < 20; ++t) {
    const auto r = random_record(rng, 5 + Index(rng() % 60), 5 + Index(rng() % 60));
    for (auto op : ops) {
      const auto back = augment(augment(r, op), inverse(op));
      CHECK_MESSAGE(back == r, augment_name(op));
    }
  }
}

TEST_CASE("augmented boxes follow their pixels") {
  const BoxD b{10, 20, 4, 6};
  CHECK(augment_box(b, 100, 50, AugmentOp::hflip) == BoxD{90, 20, 4, 6});
  CHECK(augment_box(b, 100, 50, AugmentOp::vflip) == BoxD{10, 30, 4, 6});
  CHECK(augment_box(b, 100, 50, AugmentOp::rot90) == BoxD{30, 10, 6, 4});

  // a one-pixel box marks a pixel; it must land on the moved pixel
  std::mt19937_64 rng(4);
  for (auto op : {AugmentOp::hflip, AugmentOp::vflip, AugmentOp::rot90, AugmentOp::rot180, AugmentOp::rot270}) {
    DatasetRecord r;
    r.image = Image(7, 4);
    const Index px = 5, py = 1;
    r.image.at(px, py, 0) = 255;
    r.boxes.push_back(BoxD::from_corners(px, py, px + 1, py + 1));
    const auto a = augment(r, op);
    const auto& nb = a.boxes[0];
    CHECK(nb.w == 1);
    CHECK(nb.h == 1);
    CHECK(a.image.at(Index(nb.x1()), Index(nb.y1()), 0) == 255);
  }
}

TEST_CASE("letterbox transform") {
  const auto id = letterbox_transform(416, 416, 416);
  CHECK(id.scale == 1.0);
  CHECK(id.pad_x == 0);
  CHECK(id.pad_y == 0);

  const auto t = letterbox_transform(1080, 1920, 416);
  CHECK(t.scale == doctest::Approx(416.0 / 1920.0));
  CHECK(t.pad_y == 0);
  CHECK(t.pad_x == double((416 - 234) / 2));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int k = 0; k < 200; ++k) {
    const Index w = 20 + Index(rng() % 2000), h = 20 + Index(rng() % 2000);
    const auto lt = letterbox_transform(w, h, 416);
    const BoxD b{u(rng) * double(w), u(rng) * double(h), 1 + u(rng) * 50, 1 + u(rng) * 50};
    const auto back = lt.inverse(lt.forward(b));
    CHECK(std::abs(back.cx - b.cx) < 1e-6);
    CHECK(std::abs(back.cy - b.cy) < 1e-6);
    CHECK(std::abs(back.w - b.w) < 1e-6);
    CHECK(std::abs(back.h - b.h) < 1e-6);
  }
  CHECK_THROWS_AS(letterbox_transform(100, 100, 100), ConfigError);
}

TEST_CASE("letterboxed image is centered on gray") {
  DatasetRecord r;
  r.image = Image(64, 32, 200);
  r.boxes.push_back(BoxD{32, 16, 8, 8});
  LetterboxTransform t;
  const auto lb = letterbox(r, 128, &t);
  CHECK(lb.image.width == 128);
  CHECK(lb.image.height == 128);
  CHECK(lb.image.at(0, 0, 0) == kLetterboxGray);
  CHECK(lb.image.at(64, 64, 0) == 200);
  CHECK(lb.image.at(64, 31, 0) == kLetterboxGray);
  CHECK(lb.image.at(64, 32, 0) == 200);
  CHECK(lb.boxes[0] == BoxD{64, 64, 16, 16});

  DatasetRecord same;
  same.image = Image(128, 128, 7);
  CHECK(letterbox(same, 128).image == same.image);
}

TEST_CASE("dataset load and save") {
  TempDir dir("ds");
  std::mt19937_64 rng(5);
  DatasetRecord r = random_record(rng, 40, 30);
  r.id = "a";
  r.tags = {"weak_light", "normal_overlap"};
  save_record(dir.str(), r);
  DatasetRecord r2 = r;
  r2.id = "b";
  r2.boxes.clear();
  r2.tags.clear();
  save_record(dir.str(), r2);
  const auto loaded = load_dataset(dir.str());
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0] == r);
  CHECK(loaded[1] == r2);

  Split s{{0}, {1}, {}};
  write_split_manifests(dir.str(), loaded, s);
  Split back;
  CHECK(read_split_manifests(dir.str(), loaded, back));
  CHECK(back.train == s.train);
  CHECK(back.val == s.val);
  CHECK(back.test.empty());
}

TEST_CASE("missing label file warns and loads zero boxes") {
  TempDir dir("nolabel");
  std::mt19937_64 rng(5);
  fs::create_directories(dir.path / "labels");
  fs::create_directories(dir.path / "images");
  write_ppm((dir.path / "images" / "x.ppm").string(), noise_image(rng, 8, 8));
  std::vector<std::string> warnings;
  set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  const auto loaded = load_dataset(dir.str());
  set_warning_sink(nullptr);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].boxes.empty());
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("x") != std::string::npos);
}

TEST_CASE("dataset errors") {
  TempDir dir("bad");
  try {
    load_dataset(dir.str());
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("images") != std::string::npos);
  }
  fs::create_directories(dir.path / "images");
  try {
    load_dataset(dir.str());
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find((dir.path / "labels").string()) != std::string::npos);
  }
  std::mt19937_64 rng(5);
  write_ppm((dir.path / "images" / "x.ppm").string(), noise_image(rng, 8, 8));
  write_file(dir.path / "labels" / "x.txt", "0 0.5 0.5 0.2 0.2\n");
  write_file(dir.path / "tags" / "x.txt", "foggy\n");
  CHECK_THROWS_AS(load_dataset(dir.str()), DataError);
  write_file(dir.path / "tags" / "x.txt", "weak_light\n");
  write_file(dir.path / "labels" / "x.txt", "0 0.5 -0.5 0.2 0.2\n");
  CHECK_THROWS_AS(load_dataset(dir.str()), DataError);
}

TEST_CASE("synthetic records are deterministic") {
  SynthOptions o;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto a = synth_record(7, i, o), b = synth_record(7, i, o);
    CHECK(a.record == b.record);
  }
  CHECK_FALSE(synth_record(7, 0, o).record.image == synth_record(8, 0, o).record.image);
}

TEST_CASE("synthetic boxes enclose the painted targets exactly") {
  SynthOptions o;
  o.max_distractors = 0;
  o.occlusion_probability = 0;
  for (std::size_t i = 0; i < 30; ++i) {
    const auto s = synth_record(11, i, o);
    const auto& img = s.record.image;
    Index x1 = img.width, y1 = img.height, x2 = -1, y2 = -1;
    for (Index y = 0; y < img.height; ++y)
      for (Index x = 0; x < img.width; ++x) {
        bool bg = true;
        for (int c = 0; c < 3; ++c) bg = bg && img.at(x, y, c) == s.background[std::size_t(c)];
        if (bg) continue;
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x + 1);
        y2 = std::max(y2, y + 1);
      }
    // the union of the painted pixels equals the union of the boxes
    double bx1 = 1e9, by1 = 1e9, bx2 = -1, by2 = -1;
    for (const auto& b : s.record.boxes) {
      CHECK(b.x1() >= 0);
      CHECK(b.y1() >= 0);
      CHECK(b.x2() <= double(img.width));
      CHECK(b.y2() <= double(img.height));
      bx1 = std::min(bx1, b.x1());
      by1 = std::min(by1, b.y1());
      bx2 = std::max(bx2, b.x2());
      by2 = std::max(by2, b.y2());
    }
    CHECK(double(x1) == bx1);
    CHECK(double(y1) == by1);
    CHECK(double(x2) == bx2);
    CHECK(double(y2) == by2);
  }
}

TEST_CASE("injected overlap reaches the requested ratio") {
  SynthOptions o;
  o.overlap = 0.6;
  o.overlap_probability = 1.0;
  int pairs = 0;
  for (std::size_t i = 0; i < 40; ++i) {
    const auto s = synth_record(21, i, o);
    for (const auto& [a, b] : s.overlap_pairs) {
      ++pairs;
      const double v = oracle::iou(oracle::rect(s.record.boxes[a]), oracle::rect(s.record.boxes[b]));
      CHECK(v >= 0.3);
      CHECK(s.record.tags[1] == "high_overlap");
    }
  }
  CHECK(pairs >= 30);
}

TEST_CASE("synthetic tags use the vocabulary") {
  SynthOptions o;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < 200; ++i)
    for (const auto& t : synth_record(3, i, o).record.tags) {
      CHECK(is_scenario_tag(t));
      seen.insert(t);
    }
  CHECK(seen.count("strong_light"));
  CHECK(seen.count("weak_light"));
  CHECK(seen.count("moderate_occlusion") + seen.count("high_occlusion") > 0);
}

TEST_CASE("synthetic dataset loads back unchanged") {
  TempDir dir("synth");
  SynthOptions o;
  synth_dataset(dir.str(), 5, 17, o);
  const auto loaded = load_dataset(dir.str());
  REQUIRE(loaded.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(loaded[i] == synth_record(17, i, o).record);
}
