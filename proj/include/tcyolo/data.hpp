#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tcyolo/boxgeom.hpp"
#include "tcyolo/image.hpp"

namespace tcyolo {

/// The nine scenario tags (three families: light, overlap, occlusion).
const std::vector<std::string>& scenario_vocabulary();
bool is_scenario_tag(const std::string& tag);

struct DatasetRecord {
  std::string id;
  Image image;
  std::vector<BoxD> boxes;  // pixels; class in class_id, score 1
  std::vector<std::string> tags;

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

/// Box corners are snapped to multiples of this many pixels on load, which
/// keeps every flip and rotation exactly invertible in double precision.
inline constexpr double kBoxQuantum = 1.0 / 1024.0;

/// Parses "class cx cy w h" lines (normalized to [0, 1]) into pixel boxes
/// clamped to the image. `origin` names the file in error messages.
std::vector<BoxD> parse_labels(const std::string& text, Index width, Index height, const std::string& origin);
std::string format_labels(const std::vector<BoxD>& boxes, Index width, Index height);

/// Loads root/images/*.{ppm,png} (sorted by id), root/labels/<id>.txt and the
/// optional root/tags/<id>.txt.
std::vector<DatasetRecord> load_dataset(const std::string& root);

/// Writes a record in the dataset layout (PPM image, label, tag sidecar).
void save_record(const std::string& root, const DatasetRecord& record);

// ---------------------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train, val, test;  // indices into the record list
};

/// Largest-remainder partition sizes for `n` items; ties go to the earlier part.
std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios);

/// Seeded shuffle then largest-remainder sizes.
Split split_records(std::size_t n, std::uint64_t seed, const std::array<double, 3>& ratios = {6, 3, 1});

/// root/splits/{train,val,test}.txt, one image id per line.
void write_split_manifests(const std::string& root, const std::vector<DatasetRecord>& records, const Split& split);

/// Reads manifests if present; returns false when root/splits is missing.
bool read_split_manifests(const std::string& root, const std::vector<DatasetRecord>& records, Split& split);

// ---------------------------------------------------------------------------

enum class AugmentOp { identity, hflip, vflip, rot90, rot180, rot270 };

AugmentOp inverse(AugmentOp op);
std::string augment_name(AugmentOp op);

/// rot90 turns the image a quarter clockwise. Boxes follow exactly.
DatasetRecord augment(const DatasetRecord& record, AugmentOp op);
BoxD augment_box(const BoxD& box, Index width, Index height, AugmentOp op);

// ---------------------------------------------------------------------------

struct LetterboxTransform {
  double scale = 1.0;
  double pad_x = 0.0, pad_y = 0.0;
  Index source_width = 0, source_height = 0;
  Index size = 0;

  BoxD forward(const BoxD& b) const;
  BoxD inverse(const BoxD& b) const;
};

inline constexpr std::uint8_t kLetterboxGray = 114;

/// Aspect-preserving resize into a size x size canvas, centered, gray padded.
LetterboxTransform letterbox_transform(Index width, Index height, Index size);
DatasetRecord letterbox(const DatasetRecord& record, Index size, LetterboxTransform* transform = nullptr);

// ---------------------------------------------------------------------------

struct SynthOptions {
  Index size = 128;
  int min_targets = 1;
  int max_targets = 6;
  int max_distractors = 3;
  Index min_radius = 5;
  Index max_radius = 16;
  double overlap = 0.0;          // > 0: inject a same-size partner overlapping this fraction
  double overlap_probability = 0.3;
  double occlusion_probability = 0.25;
  bool vary_light = true;
};

struct SynthRecord {
  DatasetRecord record;
  std::vector<std::pair<std::size_t, std::size_t>> overlap_pairs;  // injected partners (box indices)
  std::array<std::uint8_t, 3> background{};
};

/// One synthetic image: ellipse "flowers" of the target class among distractor
/// ellipses on a solid background. Fully determined by (seed, index).
SynthRecord synth_record(std::uint64_t seed, std::size_t index, const SynthOptions& options);

/// Writes n records under root in the dataset layout.
void synth_dataset(const std::string& root, std::size_t n, std::uint64_t seed, const SynthOptions& options);

}  // namespace tcyolo
