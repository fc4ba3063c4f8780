#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tcyolo/data.hpp"
#include "tcyolo/detector.hpp"
#include "tcyolo/eval.hpp"
#include "tcyolo/loss.hpp"

namespace tcyolo {

struct RunConfig {
  Index input_size = 416;
  int epochs = 30;
  int batch_size = 8;
  std::uint64_t seed = 0;

  double lr = 0.01;
  double momentum = 0.937;
  double weight_decay = 5e-4;
  double warmup_epochs = 3;  // 0 disables warmup
  double warmup_momentum = 0.8;
  double warmup_bias_lr = 0.1;
  double gamma = 0.1;
  std::vector<double> milestones{0.6, 0.9};  // fractions of the epoch count
  bool augment = true;                       // random flip / quarter rotation per image
  LossWeights loss;

  DetectOptions detect;                        // used by `detect`
  DetectOptions eval_detect{0.001, 0.45, 300};  // used for AP
  double eval_iou = 0.5;
  std::array<double, 3> split{6, 3, 1};

  std::string data;
  std::string graph;
  std::string out = "tcyolo.ckpt";
};

/// Keys missing from the YAML keep their defaults. Relative `graph` and
/// `data` paths are taken relative to `base_dir` when it is non-empty.
RunConfig parse_run_config(const std::string& yaml_text, const std::string& origin = "<string>",
                           const std::string& base_dir = "");
RunConfig load_run_config(const std::string& path);
std::string run_config_yaml(const RunConfig& config);
void validate(const RunConfig& config);

/// Learning rate and momentum for one optimizer step.
struct StepSchedule {
  double weight_lr = 0, bias_lr = 0, momentum = 0;
};

/// Step decay by gamma at each milestone, with linear warmup over the first
/// warmup_epochs * batches_per_epoch iterations: weight lr from 0, bias lr
/// from warmup_bias_lr, momentum from warmup_momentum.
StepSchedule schedule_at(const RunConfig& config, int epoch, long long iteration, long long batches_per_epoch);

/// SGD with momentum. Weight decay applies to role `weight` tensors only;
/// `bias` tensors take the bias lr.
class Sgd {
 public:
  explicit Sgd(double weight_decay) : weight_decay_(weight_decay) {}
  void step(ParameterStore<float>& params, const StepSchedule& s);

 private:
  double weight_decay_;
  std::map<std::string, Tensor<float>> velocity_;
};

/// Detections for the given records, one image at a time.
std::vector<ImageEval> run_detector(const Detector& detector, const std::vector<DatasetRecord>& records,
                                    std::span<const std::size_t> indices, const DetectOptions& options,
                                    double* seconds = nullptr);

/// AP over `options` detections; scenario rows count those scoring at least
/// `report_score`.
EvalReport evaluate_detector(const Detector& detector, const std::vector<DatasetRecord>& records,
                             std::span<const std::size_t> indices, const DetectOptions& options, double tau,
                             double report_score = 0.0);

/// Train/val/test split for a dataset: manifests if present, else seeded.
Split dataset_split(const std::string& root, const std::vector<DatasetRecord>& records, std::uint64_t seed,
                    const std::array<double, 3>& ratios);

/// k-means anchors on letterboxed training box sizes.
AnchorSet estimate_anchors(const std::vector<DatasetRecord>& records, std::span<const std::size_t> indices,
                           Index input_size, std::uint64_t seed);

struct EpochLog {
  int epoch = 0;
  LossBreakdown loss;  // per-image means over the epoch
  double lr = 0;
  std::optional<double> val_ap;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  std::optional<double> best_val_ap;
  std::optional<double> test_ap;
  double seconds = 0;
};

using LogSink = std::function<void(const std::string&)>;

std::string format_epoch(const EpochLog& e);
inline constexpr const char* kEpochHeader = "epoch,loss,box,obj,cls,lr,val_ap,seconds";

/// Trains and writes the best-val-AP checkpoint to config.out. `graph` is the
/// model; when it has no anchors they are estimated from the training split.
TrainResult train(const RunConfig& config, GraphConfig graph, const LogSink& log = {});

}  // namespace tcyolo
