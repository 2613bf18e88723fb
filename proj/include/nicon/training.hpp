#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "nicon/neuralnet.hpp"
#include "nicon/plants.hpp"
#include "nicon/stability.hpp"

namespace nicon {

struct TrainConfig {
  int epochs = 300;
  int batch_size = 32;
  AdamConfig adam;
  std::uint64_t seed = 0;
  StabilityConfig stability;
  DropoutSpec dropout;
  std::vector<int> hidden{64, 64, 64};
  // Per-component saturation of the controller output.
  Vec control_limit;
  // Gradient-norm guard against divergence; 0 disables it.
  double clip_norm = 100.0;
  // Read NN_ghat as N(x, u) - N(x, 0) so that ghat(x, 0) = 0 exactly.
  bool ghat_zero_anchor = false;
  // Read NN_pi as N(x) - N(0) so that the origin is a closed-loop equilibrium.
  bool pi_zero_anchor = false;

  void validate() const;
};

struct StageReport {
  std::vector<double> train_loss;  // mean batch loss per epoch
  std::vector<double> val_loss;    // validation loss after each epoch
  int best_epoch = -1;
  double best_val = 0.0;
  int clip_events = 0;
};

struct TrainReport {
  StageReport ghat;
  StageReport controller;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

// Learned stability head and controller network. The control law is
// bound_output(pi(x), pi.output_bound).
struct ControllerModel {
  StabilityHead head;
  MlpParams pi;
  bool zero_anchor = false;  // raw output is pi(x) - pi(0)

  Vec control(const Vec& x) const;
  Vec control(const Vec& x, const DropoutMask& mask) const;
};

/// |dxdt_u - dxdt_0 - ghat_out|^2 for one sample.
double loss_ghat(const Vec& ghat_out, const DynamicsSample& sample);
/// |f0 + ghat_at_pi - fs|^2 for one sample.
double loss_stage2(const Vec& f0, const Vec& ghat_at_pi, const Vec& fs);
double batch_mean(const std::vector<double>& losses);

/// Mean stage-1 loss over the columns of `xu` (state stacked on input) and
/// `target` (f(x,u) - f(x,0)); accumulates parameter gradients when asked.
double ghat_batch_loss(const MlpParams& ghat, const Mat& xu, const Mat& target,
                       MlpGrads* grads, const DropoutMask* mask = nullptr,
                       bool zero_anchor = false);

/// ghat(x, u) for column batches; with `zero_anchor` the network is read as
/// N(x, u) - N(x, 0), which vanishes at u = 0 by construction.
Mat ghat_eval(const MlpParams& ghat, const Mat& x, const Mat& u, bool zero_anchor);

struct ZeroAnchors {
  bool ghat = false;
  bool pi = false;
};

struct Stage2Masks {
  const DropoutMask* head = nullptr;
  const DropoutMask* pi = nullptr;
};

/// Mean stage-2 loss over the columns of `x` with autonomous derivatives
/// `f0`. Gradients flow through ghat (whose parameters are left untouched)
/// into the controller and through f_s into the head.
double stage2_batch_loss(const StabilityConfig& cfg, const StabilityHead& head,
                         const MlpParams& pi, const MlpParams& ghat,
                         const Mat& x, const Mat& f0, MlpGrads* head_grads,
                         MlpGrads* pi_grads, const Stage2Masks& masks = {},
                         const ZeroAnchors& anchors = {});

/// Fits NN_ghat to the control effect; returns the best-validation weights.
MlpParams train_ghat(const DatasetSplits& data, const TrainConfig& cfg,
                     StageReport* report = nullptr);

/// Jointly fits the stability head and the controller against the stable
/// hypothesis, with `ghat` frozen. Uses only the state and f(x, 0) columns.
ControllerModel train_controller(const DatasetSplits& data, const MlpParams& ghat,
                                 const TrainConfig& cfg,
                                 StageReport* report = nullptr);

struct TrainedModels {
  MlpParams ghat;
  ControllerModel controller;
  TrainReport report;
};

/// Both stages back to back.
TrainedModels train_all(const DatasetSplits& data, const TrainConfig& cfg);

inline constexpr const char* kControllerSchema = "nicon.controller.v1";

/// Stability head, controller network and anchoring flag in one document.
std::string controller_to_string(const ControllerModel& model);
/// Throws LoadError when the document is malformed or the parts disagree.
ControllerModel controller_from_string(std::string_view text);
void save_controller(const ControllerModel& model, const std::filesystem::path& path);
ControllerModel load_controller(const std::filesystem::path& path);

/// Loss curves as CSV: stage,epoch,train_loss,val_loss.
void write_loss_curves(const TrainReport& report, const std::filesystem::path& path);

}  // namespace nicon
