#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "nicon/numkit.hpp"

namespace nicon {

enum class Activation { kRelu, kTanh, kIdentity };

std::string_view activation_name(Activation activation);
Activation parse_activation(std::string_view name);

struct Layer {
  Mat weight;  // out x in
  Vec bias;    // out
  Activation activation = Activation::kIdentity;
};

// Weights and biases of one multilayer perceptron. `output_bound`, when
// non-empty, records the saturation bound used with bound_output() for this
// network; forward() itself never applies it.
struct MlpParams {
  std::vector<Layer> layers;
  Vec output_bound;

  int input_dim() const;
  int output_dim() const;
  std::vector<int> hidden_dims() const;
  std::size_t parameter_count() const;
  // Throws ConfigError if layer shapes do not chain or a value is non-finite.
  void validate() const;
};

bool operator==(const MlpParams& a, const MlpParams& b);

/// Glorot-uniform weights, zero biases. Hidden layers use
/// `hidden_activation`, the output layer is linear.
MlpParams make_mlp(int input_dim, const std::vector<int>& hidden, int output_dim,
                   Rng& rng, Activation hidden_activation = Activation::kRelu);

enum class DropoutMode { kOff, kTrain, kMcInference };

struct DropoutSpec {
  double p_drop = 0.0;
  DropoutMode mode = DropoutMode::kOff;

  bool active() const { return mode != DropoutMode::kOff && p_drop > 0.0; }
};

// One matrix per hidden layer holding 0 or 1/(1-p). A mask has either one
// column per batch sample or a single column shared by the whole batch.
using DropoutMask = std::vector<Mat>;

DropoutMask draw_dropout_mask(const MlpParams& params, const DropoutSpec& spec,
                              Eigen::Index columns, Rng& rng);

// Intermediate values of a batched forward pass, consumed by backward.
struct MlpTape {
  std::vector<Mat> inputs;  // input of each layer
  std::vector<Mat> pre;     // pre-activation of each layer
  DropoutMask mask;
};

struct MlpGrads {
  std::vector<Mat> weight;
  std::vector<Vec> bias;

  static MlpGrads zeros_like(const MlpParams& params);
  void set_zero();
  void scale(double factor);
  double squared_norm() const;
  bool all_finite() const;
};

/// Batched forward pass; `x` holds one sample per column.
Mat forward_batch(const MlpParams& params, const Mat& x,
                  const DropoutMask* mask = nullptr, MlpTape* tape = nullptr);

/// Reverse pass for the loss whose gradient with respect to the batched
/// output is `upstream`. Parameter gradients are accumulated into `grads`
/// when it is non-null; the input gradient is returned.
Mat backward_batch(const MlpParams& params, const MlpTape& tape,
                   const Mat& upstream, MlpGrads* grads);

/// Single-sample forward pass. In kTrain and kMcInference modes a fresh
/// dropout mask is drawn from `rng`, which must then be non-null.
Vec forward(const MlpParams& params, const Vec& x,
            const DropoutSpec& dropout = {}, Rng* rng = nullptr,
            MlpTape* tape = nullptr);

struct BackwardResult {
  MlpGrads params;
  Vec input;
};

/// Single-sample reverse pass reusing the dropout mask stored in `tape`.
BackwardResult backward(const MlpParams& params, const MlpTape& tape,
                        const Vec& upstream);

struct AdamConfig {
  double lr = 1e-3;
  double lr_decay = 0.99;  // per epoch
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  double learning_rate(int epoch) const;
};

struct AdamState {
  AdamConfig config;
  MlpGrads m;
  MlpGrads v;
  long step = 0;
};

AdamState make_adam_state(const MlpParams& params, const AdamConfig& config);

/// Bias-corrected Adam update at learning rate config.learning_rate(epoch).
/// Throws TrainingError on a non-finite gradient.
void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& state,
               int epoch, int batch = -1);

/// bound_i * tanh(y_i / bound_i), strictly inside (-bound_i, bound_i).
Vec bound_output(const Vec& y, const Vec& bound);
Mat bound_output_batch(const Mat& y, const Vec& bound);
// Chain rule through bound_output: upstream * (1 - tanh^2(y / bound)).
Mat bound_output_backward(const Mat& y, const Vec& bound, const Mat& upstream);

inline constexpr std::string_view kCheckpointSchema = "nicon.mlp.v1";

std::string checkpoint_to_string(const MlpParams& params);
/// Throws LoadError with a byte offset or field path on malformed input.
MlpParams checkpoint_from_string(std::string_view text);

void save_checkpoint(const MlpParams& params, const std::filesystem::path& path);
MlpParams load_checkpoint(const std::filesystem::path& path);

}  // namespace nicon
