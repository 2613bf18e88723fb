#include "nicon/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "nicon/errors.hpp"

namespace nicon {
namespace {

// RNG stream ids, one per consumer so that toggling dropout does not
// perturb initialization or batch order.
constexpr std::uint64_t kStreamGhatInit = 10;
constexpr std::uint64_t kStreamHeadInit = 11;
constexpr std::uint64_t kStreamPiInit = 12;
constexpr std::uint64_t kStreamGhatShuffle = 20;
constexpr std::uint64_t kStreamStage2Shuffle = 21;
constexpr std::uint64_t kStreamGhatDropout = 30;
constexpr std::uint64_t kStreamStage2Dropout = 31;

constexpr Eigen::Index kEvalChunk = 2048;

struct Columns {
  Mat inputs;
  Mat targets;
};

Columns ghat_columns(const Dataset& data) {
  const auto count = static_cast<Eigen::Index>(data.size());
  Columns c{Mat(data.n + data.m, count), Mat(data.n, count)};
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto& s = data.samples[static_cast<std::size_t>(i)];
    c.inputs.col(i) << s.x, s.u;
    c.targets.col(i) = s.dxdt_u - s.dxdt_0;
  }
  return c;
}

Columns stage2_columns(const Dataset& data) {
  const auto count = static_cast<Eigen::Index>(data.size());
  Columns c{Mat(data.n, count), Mat(data.n, count)};
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto& s = data.samples[static_cast<std::size_t>(i)];
    c.inputs.col(i) = s.x;
    c.targets.col(i) = s.dxdt_0;
  }
  return c;
}

Mat gather(const Mat& source, const std::vector<Eigen::Index>& order,
           std::size_t begin, std::size_t end) {
  Mat out(source.rows(), static_cast<Eigen::Index>(end - begin));
  for (std::size_t k = begin; k < end; ++k) {
    out.col(static_cast<Eigen::Index>(k - begin)) = source.col(order[k]);
  }
  return out;
}

// Scales the gradients down to `clip_norm` when they exceed it.
bool clip(std::vector<MlpGrads*> grads, double clip_norm) {
  if (clip_norm <= 0.0) return false;
  double total = 0.0;
  for (const auto* g : grads) total += g->squared_norm();
  const double norm = std::sqrt(total);
  if (!(norm > clip_norm)) return false;
  for (auto* g : grads) g->scale(clip_norm / norm);
  return true;
}

template <typename EvalFn>
double chunked_mean(Eigen::Index count, EvalFn&& eval) {
  double sum = 0.0;
  for (Eigen::Index begin = 0; begin < count; begin += kEvalChunk) {
    const Eigen::Index len = std::min(kEvalChunk, count - begin);
    sum += eval(begin, len) * static_cast<double>(len);
  }
  return sum / static_cast<double>(count);
}

void check_splits(const DatasetSplits& data) {
  if (data.train.size() == 0 || data.val.size() == 0) {
    throw ConfigError("training needs non-empty train and validation splits");
  }
  if (data.train.n != data.val.n || data.train.m != data.val.m) {
    throw ConfigError("train and validation splits have different shapes");
  }
}

std::vector<Eigen::Index> identity_order(Eigen::Index count) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  return order;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1", "train.epochs");
  if (batch_size < 1) {
    throw ConfigError("batch size must be >= 1", "train.batch_size");
  }
  if (!(adam.lr > 0.0) || !(adam.lr_decay > 0.0)) {
    throw ConfigError("learning rate and decay must be positive", "train.lr");
  }
  if (dropout.p_drop < 0.0 || dropout.p_drop >= 1.0) {
    throw ConfigError("dropout must lie in [0, 1)", "train.dropout");
  }
  for (int width : hidden) {
    if (width <= 0) throw ConfigError("hidden widths must be positive", "train.hidden");
  }
  stability.validate();
  if (control_limit.size() == 0 || (control_limit.array() <= 0.0).any()) {
    throw ConfigError("controller output bound must be positive", "input_bound");
  }
}

Vec ControllerModel::control(const Vec& x) const {
  Vec raw = forward(pi, x);
  if (zero_anchor) raw -= forward(pi, Vec::Zero(x.size()));
  return bound_output(raw, pi.output_bound);
}

Vec ControllerModel::control(const Vec& x, const DropoutMask& mask) const {
  Mat raw = forward_batch(pi, x, &mask);
  if (zero_anchor) raw -= forward_batch(pi, Mat::Zero(x.size(), 1), &mask);
  return bound_output(Vec(raw.col(0)), pi.output_bound);
}

double loss_ghat(const Vec& ghat_out, const DynamicsSample& sample) {
  return (sample.dxdt_u - sample.dxdt_0 - ghat_out).squaredNorm();
}

double loss_stage2(const Vec& f0, const Vec& ghat_at_pi, const Vec& fs) {
  return (f0 + ghat_at_pi - fs).squaredNorm();
}

double batch_mean(const std::vector<double>& losses) {
  if (losses.empty()) return 0.0;
  return std::accumulate(losses.begin(), losses.end(), 0.0) /
         static_cast<double>(losses.size());
}

double ghat_batch_loss(const MlpParams& ghat, const Mat& xu, const Mat& target,
                       MlpGrads* grads, const DropoutMask* mask, bool zero_anchor) {
  const double batch = static_cast<double>(xu.cols());
  MlpTape tape;
  MlpTape anchor_tape;
  Mat out = forward_batch(ghat, xu, mask, grads != nullptr ? &tape : nullptr);
  if (zero_anchor) {
    Mat x0 = xu;
    x0.bottomRows(xu.rows() - target.rows()).setZero();
    out -= forward_batch(ghat, x0, mask, grads != nullptr ? &anchor_tape : nullptr);
  }
  const Mat residual = out - target;
  if (grads != nullptr) {
    backward_batch(ghat, tape, (2.0 / batch) * residual, grads);
    if (zero_anchor) backward_batch(ghat, anchor_tape, (-2.0 / batch) * residual, grads);
  }
  return residual.squaredNorm() / batch;
}

Mat ghat_eval(const MlpParams& ghat, const Mat& x, const Mat& u, bool zero_anchor) {
  Mat xu(x.rows() + u.rows(), x.cols());
  xu << x, u;
  Mat out = forward_batch(ghat, xu);
  if (zero_anchor) {
    xu.bottomRows(u.rows()).setZero();
    out -= forward_batch(ghat, xu);
  }
  return out;
}

double stage2_batch_loss(const StabilityConfig& cfg, const StabilityHead& head,
                         const MlpParams& pi, const MlpParams& ghat,
                         const Mat& x, const Mat& f0, MlpGrads* head_grads,
                         MlpGrads* pi_grads, const Stage2Masks& masks,
                         const ZeroAnchors& anchors) {
  const bool want_grads = head_grads != nullptr || pi_grads != nullptr;
  const Eigen::Index batch = x.cols();
  const int n = static_cast<int>(x.rows());
  const Vec& limit = pi.output_bound;

  MlpTape pi_tape;
  MlpTape ghat_tape;
  MlpTape head_tape;
  MlpTape pi_anchor_tape;
  Mat pi_raw = forward_batch(pi, x, masks.pi, want_grads ? &pi_tape : nullptr);
  if (anchors.pi) {
    pi_raw -= forward_batch(pi, Mat::Zero(x.rows(), batch), masks.pi,
                            want_grads ? &pi_anchor_tape : nullptr);
  }
  const Mat u = bound_output_batch(pi_raw, limit);
  Mat xu(x.rows() + u.rows(), batch);
  xu << x, u;
  Mat g = forward_batch(ghat, xu, nullptr, want_grads ? &ghat_tape : nullptr);
  if (anchors.ghat) {
    Mat x0u = xu;
    x0u.bottomRows(u.rows()).setZero();
    g -= forward_batch(ghat, x0u);
  }
  const Mat head_out =
      forward_batch(head.net, x, masks.head, want_grads ? &head_tape : nullptr);

  Mat residual(n, batch);
  for (Eigen::Index c = 0; c < batch; ++c) {
    const PFactors f = split_head_output(head_out.col(c), head.n, head.rows_a);
    const Vec fs = stable_hypothesis_from_p(cfg, assemble_p(f.a, f.b), x.col(c));
    residual.col(c) = f0.col(c) + g.col(c) - fs;
  }
  const double loss = residual.squaredNorm() / static_cast<double>(batch);
  if (!want_grads) return loss;

  const Mat d_out = (2.0 / static_cast<double>(batch)) * residual;
  if (pi_grads != nullptr) {
    const Mat d_xu = backward_batch(ghat, ghat_tape, d_out, nullptr);
    const Mat d_u = d_xu.bottomRows(u.rows());
    const Mat d_raw = bound_output_backward(pi_raw, limit, d_u);
    backward_batch(pi, pi_tape, d_raw, pi_grads);
    if (anchors.pi) backward_batch(pi, pi_anchor_tape, -d_raw, pi_grads);
  }
  if (head_grads != nullptr) {
    Mat d_head(head_out.rows(), batch);
    for (Eigen::Index c = 0; c < batch; ++c) {
      d_head.col(c) = stable_hypothesis_backward(cfg, head_out.col(c), x.col(c),
                                                 -d_out.col(c));
    }
    backward_batch(head.net, head_tape, d_head, head_grads);
  }
  return loss;
}

MlpParams train_ghat(const DatasetSplits& data, const TrainConfig& cfg,
                     StageReport* report) {
  cfg.validate();
  check_splits(data);
  const int n = data.train.n;
  const int m = data.train.m;
  const Columns train = ghat_columns(data.train);
  const Columns val = ghat_columns(data.val);
  const Eigen::Index count = train.inputs.cols();

  Rng init_rng(cfg.seed, kStreamGhatInit);
  MlpParams ghat = make_mlp(n + m, cfg.hidden, n, init_rng);
  AdamState adam = make_adam_state(ghat, cfg.adam);
  Rng shuffle_rng(cfg.seed, kStreamGhatShuffle);
  Rng dropout_rng(cfg.seed, kStreamGhatDropout);
  DropoutSpec dropout = cfg.dropout;
  if (dropout.p_drop > 0.0) dropout.mode = DropoutMode::kTrain;

  StageReport local;
  StageReport& rep = report != nullptr ? *report : local;
  rep = StageReport{};
  MlpParams best = ghat;
  auto order = identity_order(count);
  MlpGrads grads = MlpGrads::zeros_like(ghat);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    int batch_index = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const Mat xu = gather(train.inputs, order, begin, end);
      const Mat target = gather(train.targets, order, begin, end);
      const DropoutMask mask = draw_dropout_mask(ghat, dropout, xu.cols(), dropout_rng);
      grads.set_zero();
      const double loss =
          ghat_batch_loss(ghat, xu, target, &grads, mask.empty() ? nullptr : &mask,
                          cfg.ghat_zero_anchor);
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite control-effect loss", epoch, batch_index);
      }
      if (clip({&grads}, cfg.clip_norm)) {
        ++rep.clip_events;
        spdlog::debug("ghat: gradient clipped at epoch {} batch {}", epoch, batch_index);
      }
      adam_step(ghat, grads, adam, epoch, batch_index);
      loss_sum += loss * static_cast<double>(end - begin);
    }
    const double val_loss = chunked_mean(val.inputs.cols(), [&](Eigen::Index b, Eigen::Index len) {
      return ghat_batch_loss(ghat, val.inputs.middleCols(b, len),
                             val.targets.middleCols(b, len), nullptr, nullptr,
                             cfg.ghat_zero_anchor);
    });
    if (!std::isfinite(val_loss)) {
      throw TrainingError("non-finite control-effect validation loss", epoch, -1);
    }
    rep.train_loss.push_back(loss_sum / static_cast<double>(count));
    rep.val_loss.push_back(val_loss);
    if (rep.best_epoch < 0 || val_loss < rep.best_val) {
      rep.best_epoch = epoch;
      rep.best_val = val_loss;
      best = ghat;
    }
    spdlog::debug("ghat epoch {}: train {:.6g} val {:.6g}", epoch,
                  rep.train_loss.back(), val_loss);
  }
  if (rep.clip_events > 0) {
    spdlog::info("ghat: gradient clipping triggered {} times", rep.clip_events);
  }
  return best;
}

ControllerModel train_controller(const DatasetSplits& data, const MlpParams& ghat,
                                 const TrainConfig& cfg, StageReport* report) {
  cfg.validate();
  check_splits(data);
  const int n = data.train.n;
  const int m = data.train.m;
  if (ghat.input_dim() != n + m || ghat.output_dim() != n) {
    throw ConfigError("control-effect network does not match the dataset");
  }
  if (cfg.stability.dim() != n) {
    throw ConfigError("Q dimension does not match the plant state", "stability.q");
  }
  if (cfg.control_limit.size() != m) {
    throw ConfigError("controller bound does not match the input dimension");
  }
  const Columns train = stage2_columns(data.train);
  const Columns val = stage2_columns(data.val);
  const Eigen::Index count = train.inputs.cols();

  Rng head_rng(cfg.seed, kStreamHeadInit);
  Rng pi_rng(cfg.seed, kStreamPiInit);
  ControllerModel model{make_stability_head(cfg.stability, cfg.hidden, head_rng),
                        make_mlp(n, cfg.hidden, m, pi_rng)};
  model.pi.output_bound = cfg.control_limit;
  model.zero_anchor = cfg.pi_zero_anchor;
  AdamState head_adam = make_adam_state(model.head.net, cfg.adam);
  AdamState pi_adam = make_adam_state(model.pi, cfg.adam);
  Rng shuffle_rng(cfg.seed, kStreamStage2Shuffle);
  Rng dropout_rng(cfg.seed, kStreamStage2Dropout);
  DropoutSpec dropout = cfg.dropout;
  if (dropout.p_drop > 0.0) dropout.mode = DropoutMode::kTrain;

  StageReport local;
  StageReport& rep = report != nullptr ? *report : local;
  rep = StageReport{};
  ControllerModel best = model;
  auto order = identity_order(count);
  MlpGrads head_grads = MlpGrads::zeros_like(model.head.net);
  MlpGrads pi_grads = MlpGrads::zeros_like(model.pi);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    int batch_index = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const Mat x = gather(train.inputs, order, begin, end);
      const Mat f0 = gather(train.targets, order, begin, end);
      const DropoutMask head_mask =
          draw_dropout_mask(model.head.net, dropout, x.cols(), dropout_rng);
      const DropoutMask pi_mask = draw_dropout_mask(model.pi, dropout, x.cols(), dropout_rng);
      head_grads.set_zero();
      pi_grads.set_zero();
      const double loss = stage2_batch_loss(
          cfg.stability, model.head, model.pi, ghat, x, f0, &head_grads, &pi_grads,
          Stage2Masks{head_mask.empty() ? nullptr : &head_mask,
                      pi_mask.empty() ? nullptr : &pi_mask},
          ZeroAnchors{cfg.ghat_zero_anchor, cfg.pi_zero_anchor});
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite stage-2 loss", epoch, batch_index);
      }
      if (clip({&head_grads, &pi_grads}, cfg.clip_norm)) {
        ++rep.clip_events;
        spdlog::debug("stage 2: gradient clipped at epoch {} batch {}", epoch,
                      batch_index);
      }
      adam_step(model.head.net, head_grads, head_adam, epoch, batch_index);
      adam_step(model.pi, pi_grads, pi_adam, epoch, batch_index);
      loss_sum += loss * static_cast<double>(end - begin);
    }
    const double val_loss = chunked_mean(val.inputs.cols(), [&](Eigen::Index b, Eigen::Index len) {
      return stage2_batch_loss(cfg.stability, model.head, model.pi, ghat,
                               val.inputs.middleCols(b, len),
                               val.targets.middleCols(b, len), nullptr, nullptr, {},
                               ZeroAnchors{cfg.ghat_zero_anchor, cfg.pi_zero_anchor});
    });
    if (!std::isfinite(val_loss)) {
      throw TrainingError("non-finite stage-2 validation loss", epoch, -1);
    }
    rep.train_loss.push_back(loss_sum / static_cast<double>(count));
    rep.val_loss.push_back(val_loss);
    if (rep.best_epoch < 0 || val_loss < rep.best_val) {
      rep.best_epoch = epoch;
      rep.best_val = val_loss;
      best = model;
    }
    spdlog::debug("stage 2 epoch {}: train {:.6g} val {:.6g}", epoch,
                  rep.train_loss.back(), val_loss);
  }
  if (rep.clip_events > 0) {
    spdlog::info("stage 2: gradient clipping triggered {} times", rep.clip_events);
  }
  return best;
}

TrainedModels train_all(const DatasetSplits& data, const TrainConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  TrainedModels out;
  out.report.seed = cfg.seed;
  out.ghat = train_ghat(data, cfg, &out.report.ghat);
  out.controller = train_controller(data, out.ghat, cfg, &out.report.controller);
  out.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

std::string controller_to_string(const ControllerModel& model) {
  return fmt::format(
      "{{\n\"schema\": \"{}\",\n\"state_dim\": {},\n\"rows_a\": {},\n"
      "\"zero_anchor\": {},\n\"head\": {},\n\"pi\": {}\n}}\n",
      kControllerSchema, model.head.n, model.head.rows_a, model.zero_anchor,
      checkpoint_to_string(model.head.net), checkpoint_to_string(model.pi));
}

ControllerModel controller_from_string(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError(fmt::format("controller parse error at byte {}", e.byte));
  }
  if (!doc.is_object() || doc.value("schema", std::string{}) != kControllerSchema) {
    throw LoadError(fmt::format("schema: expected \"{}\"", kControllerSchema));
  }
  for (const char* key : {"state_dim", "rows_a"}) {
    if (!doc.contains(key) || !doc[key].is_number_integer() || doc[key].get<int>() < 1) {
      throw LoadError(fmt::format("{}: expected a positive integer", key));
    }
  }
  if (!doc.contains("zero_anchor") || !doc["zero_anchor"].is_boolean()) {
    throw LoadError("zero_anchor: expected true or false");
  }
  for (const char* key : {"head", "pi"}) {
    if (!doc.contains(key)) throw LoadError(fmt::format("{}: missing", key));
  }
  ControllerModel model;
  model.head.n = doc["state_dim"].get<int>();
  model.head.rows_a = doc["rows_a"].get<int>();
  model.zero_anchor = doc["zero_anchor"].get<bool>();
  try {
    model.head.net = checkpoint_from_string(doc["head"].dump());
    model.pi = checkpoint_from_string(doc["pi"].dump());
  } catch (const LoadError& e) {
    throw LoadError(fmt::format("controller: {}", e.what()));
  }
  const int n = model.head.n;
  if (model.head.net.input_dim() != n || model.head.net.output_dim() != model.head.output_dim()) {
    throw LoadError("head: dimensions do not match state_dim and rows_a");
  }
  if (model.pi.input_dim() != n || model.pi.output_bound.size() != model.pi.output_dim()) {
    throw LoadError("pi: dimensions do not match state_dim or its output bound");
  }
  return model;
}

void save_controller(const ControllerModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError(path.string());
  out << controller_to_string(model);
}

ControllerModel load_controller(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError(path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return controller_from_string(buffer.str());
}

void write_loss_curves(const TrainReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError(path.string());
  out << "stage,epoch,train_loss,val_loss\n";
  auto emit = [&](const char* stage, const StageReport& r) {
    for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
      out << fmt::format("{},{},{:.17g},{:.17g}\n", stage, e, r.train_loss[e],
                         r.val_loss[e]);
    }
  };
  emit("ghat", report.ghat);
  emit("controller", report.controller);
}

}  // namespace nicon
