#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "dpnet/checkpoint.hpp"
#include "dpnet/config.hpp"
#include "dpnet/metrics.hpp"
#include "dpnet/synthetic.hpp"

namespace dpnet {

// Linear warm-up to lr_max over the first warmup_fraction of steps, then
// linear decay to 0 at total_steps.
double lr_schedule(std::int64_t step, std::int64_t total_steps, double lr_max,
                   double warmup_fraction);

// One SGD-with-momentum update over all parameters: g' = g + wd*theta,
// v <- momentum*v + g', theta <- theta - lr*v, with separate learning rates
// for the backbone group and the rest.
void sgd_step(ParamSet& params, double lr_backbone, double lr_other, double momentum,
              double weight_decay);

// Deterministic parallel map: fn(i) for i in [0,count). Results must be
// written per-index; the schedule never affects values.
void parallel_for(int count, int threads, const std::function<void(int)>& fn);

struct EpochLog {
    int epoch = 0;
    double lr_backbone = 0.0;  // value at the last step of the epoch
    double lr_other = 0.0;
    double loss_total = 0.0;
    double loss_final_bce = 0.0;
    double loss_final_iou = 0.0;
    double loss_aux_bce = 0.0;
    double loss_aux_iou = 0.0;
    double val_mae = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> epochs;
    std::vector<double> step_lr_other;  // schedule value per optimizer step
    double best_val_mae = 1.0;
    int best_epoch = -1;
    std::string best_path;
    std::string last_path;
    std::string log_path;
};

TrainResult train(const TrainConfig& config);

// Resizes an image to the model resolution, forwards it, and returns the
// sigmoid of the primary final map resized to (out_h, out_w).
Tensor4 predict_saliency(const DPNet& net, const Tensor4& image, int out_h, int out_w);

struct EvalResult {
    MetricReport overall;
    std::array<MetricReport, 3> by_class;  // small, middle, large
    std::array<int, 3> class_counts{};
    std::vector<std::string> missing;  // unreadable sample files, skipped
};

EvalResult evaluate_dataset(const DPNet& net, const std::string& root, int threads);

void infer_image(const DPNet& net, const std::string& image_path, const std::string& out_path);

struct RoutingRow {
    int stage = 0;   // 2..5
    int kernel = 0;  // kernel size of the branch
    double scale = 0.0;
    double mean_weight = 0.0;
};

// Mean routing weight per (stage, kernel, input scale) over a dataset.
std::vector<RoutingRow> routing_report(const DPNet& net, const std::string& root,
                                       const std::vector<double>& scales, int threads);

struct ParamCountReport {
    std::vector<Encoder::BlockCounts> blocks;  // DPConv encoder rows
    long long dpconv_encoder_total = 0;
    long long static_encoder_total = 0;
    long long dpconv_model_total = 0;
    long long static_model_total = 0;
    bool all_blocks_lightweight = false;
};

ParamCountReport paramcount_report(const ModelConfig& config);

struct GradCheckRow {
    std::string name;
    double max_err = 0.0;
    double threshold = 0.0;

    bool pass() const { return max_err < threshold; }
};

// Seeded finite-difference sweeps: every primitive op (1e-6), the composite
// blocks (1e-5), and the whole model through the training loss (1e-4).
std::vector<GradCheckRow> gradcheck_ops();
std::vector<GradCheckRow> gradcheck_blocks();
std::vector<GradCheckRow> gradcheck_model();

}  // namespace dpnet
