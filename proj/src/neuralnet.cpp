#include "nicon/neuralnet.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "nicon/errors.hpp"

namespace nicon {
namespace {

using nlohmann::json;

bool is_finite(const Mat& m) { return m.allFinite(); }

Mat apply_activation(Activation activation, const Mat& z) {
  switch (activation) {
    case Activation::kRelu:
      return z.cwiseMax(0.0);
    case Activation::kTanh:
      return z.array().tanh().matrix();
    case Activation::kIdentity:
      return z;
  }
  return z;
}

// Multiplies `grad` in place by the activation derivative evaluated at `z`.
// relu'(0) is taken as 0.
void apply_activation_grad(Activation activation, const Mat& z, Mat& grad) {
  switch (activation) {
    case Activation::kRelu:
      grad.array() *= (z.array() > 0.0).cast<double>();
      break;
    case Activation::kTanh:
      grad.array() *= 1.0 - z.array().tanh().square();
      break;
    case Activation::kIdentity:
      break;
  }
}

void append_array(std::string& out, const double* data, Eigen::Index count) {
  out += '[';
  for (Eigen::Index i = 0; i < count; ++i) {
    if (i > 0) out += ", ";
    out += fmt::format("{:.17g}", data[i]);
  }
  out += ']';
}

std::vector<double> read_array(const json& node, const std::string& path,
                               std::size_t expected) {
  if (!node.is_array()) throw LoadError(path + ": expected an array");
  if (node.size() != expected) {
    throw LoadError(fmt::format("{}: expected {} values, found {}", path,
                                expected, node.size()));
  }
  std::vector<double> values;
  values.reserve(expected);
  for (std::size_t i = 0; i < node.size(); ++i) {
    if (!node[i].is_number()) {
      throw LoadError(fmt::format("{}[{}]: expected a number", path, i));
    }
    values.push_back(node[i].get<double>());
  }
  return values;
}

int read_dim(const json& node, const char* key, const std::string& path) {
  if (!node.contains(key) || !node[key].is_number_integer() ||
      node[key].get<long long>() <= 0) {
    throw LoadError(fmt::format("{}.{}: expected a positive integer", path, key));
  }
  return static_cast<int>(node[key].get<long long>());
}

}  // namespace

std::string_view activation_name(Activation activation) {
  switch (activation) {
    case Activation::kRelu:
      return "relu";
    case Activation::kTanh:
      return "tanh";
    case Activation::kIdentity:
      return "identity";
  }
  return "identity";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw ConfigError(fmt::format("unknown activation '{}'", name));
}

int MlpParams::input_dim() const {
  return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols());
}

int MlpParams::output_dim() const {
  return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows());
}

std::vector<int> MlpParams::hidden_dims() const {
  std::vector<int> dims;
  for (std::size_t k = 0; k + 1 < layers.size(); ++k) {
    dims.push_back(static_cast<int>(layers[k].weight.rows()));
  }
  return dims;
}

std::size_t MlpParams::parameter_count() const {
  std::size_t count = 0;
  for (const auto& layer : layers) {
    count += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
  }
  return count;
}

void MlpParams::validate() const {
  if (layers.empty()) throw ConfigError("MLP has no layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& layer = layers[k];
    if (layer.bias.size() != layer.weight.rows()) {
      throw ConfigError(fmt::format("layer {}: bias has {} entries, expected {}",
                                    k, layer.bias.size(), layer.weight.rows()));
    }
    if (k > 0 && layer.weight.cols() != layers[k - 1].weight.rows()) {
      throw ConfigError(fmt::format("layer {}: input dim {} does not chain with {}",
                                    k, layer.weight.cols(),
                                    layers[k - 1].weight.rows()));
    }
    if (!is_finite(layer.weight) || !layer.bias.allFinite()) {
      throw ConfigError(fmt::format("layer {}: non-finite parameter", k));
    }
  }
  if (output_bound.size() != 0) {
    if (output_bound.size() != output_dim()) {
      throw ConfigError("output bound does not match output dimension");
    }
    if ((output_bound.array() <= 0.0).any() || !output_bound.allFinite()) {
      throw ConfigError("output bound entries must be positive and finite");
    }
  }
}

bool operator==(const MlpParams& a, const MlpParams& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    const auto& la = a.layers[k];
    const auto& lb = b.layers[k];
    if (la.activation != lb.activation || la.weight.rows() != lb.weight.rows() ||
        la.weight.cols() != lb.weight.cols() || la.weight != lb.weight ||
        la.bias != lb.bias) {
      return false;
    }
  }
  return a.output_bound.size() == b.output_bound.size() &&
         a.output_bound == b.output_bound;
}

MlpParams make_mlp(int input_dim, const std::vector<int>& hidden, int output_dim,
                   Rng& rng, Activation hidden_activation) {
  if (input_dim <= 0 || output_dim <= 0) {
    throw ConfigError("MLP dimensions must be positive");
  }
  MlpParams params;
  int fan_in = input_dim;
  auto add_layer = [&](int fan_out, Activation activation) {
    if (fan_out <= 0) throw ConfigError("MLP hidden width must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Layer layer;
    layer.weight.resize(fan_out, fan_in);
    // Row-major fill so the draw order does not depend on storage order.
    for (int r = 0; r < fan_out; ++r) {
      for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = rng.uniform(-limit, limit);
    }
    layer.bias = Vec::Zero(fan_out);
    layer.activation = activation;
    params.layers.push_back(std::move(layer));
    fan_in = fan_out;
  };
  for (int width : hidden) add_layer(width, hidden_activation);
  add_layer(output_dim, Activation::kIdentity);
  return params;
}

DropoutMask draw_dropout_mask(const MlpParams& params, const DropoutSpec& spec,
                              Eigen::Index columns, Rng& rng) {
  DropoutMask mask;
  if (!spec.active()) return mask;
  if (spec.p_drop < 0.0 || spec.p_drop >= 1.0) {
    throw ConfigError("dropout probability must lie in [0, 1)");
  }
  const double keep_scale = 1.0 / (1.0 - spec.p_drop);
  for (std::size_t k = 0; k + 1 < params.layers.size(); ++k) {
    Mat m(params.layers[k].weight.rows(), columns);
    for (Eigen::Index c = 0; c < columns; ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        m(r, c) = rng.uniform() < spec.p_drop ? 0.0 : keep_scale;
      }
    }
    mask.push_back(std::move(m));
  }
  return mask;
}

MlpGrads MlpGrads::zeros_like(const MlpParams& params) {
  MlpGrads grads;
  for (const auto& layer : params.layers) {
    grads.weight.push_back(Mat::Zero(layer.weight.rows(), layer.weight.cols()));
    grads.bias.push_back(Vec::Zero(layer.bias.size()));
  }
  return grads;
}

void MlpGrads::set_zero() {
  for (auto& w : weight) w.setZero();
  for (auto& b : bias) b.setZero();
}

void MlpGrads::scale(double factor) {
  for (auto& w : weight) w *= factor;
  for (auto& b : bias) b *= factor;
}

double MlpGrads::squared_norm() const {
  double sum = 0.0;
  for (const auto& w : weight) sum += w.squaredNorm();
  for (const auto& b : bias) sum += b.squaredNorm();
  return sum;
}

bool MlpGrads::all_finite() const {
  for (const auto& w : weight) {
    if (!w.allFinite()) return false;
  }
  for (const auto& b : bias) {
    if (!b.allFinite()) return false;
  }
  return true;
}

Mat forward_batch(const MlpParams& params, const Mat& x, const DropoutMask* mask,
                  MlpTape* tape) {
  if (x.rows() != params.input_dim()) {
    throw ConfigError(fmt::format("MLP expects input dim {}, got {}",
                                  params.input_dim(), x.rows()));
  }
  const bool masked = mask != nullptr && !mask->empty();
  if (masked && mask->size() + 1 != params.layers.size()) {
    throw ConfigError("dropout mask does not match the hidden layer count");
  }
  if (tape != nullptr) {
    tape->inputs.clear();
    tape->pre.clear();
    tape->mask = masked ? *mask : DropoutMask{};
  }
  Mat a = x;
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const auto& layer = params.layers[k];
    Mat z = layer.weight * a;
    z.colwise() += layer.bias;
    Mat h = apply_activation(layer.activation, z);
    if (masked && k + 1 < params.layers.size()) {
      const Mat& m = (*mask)[k];
      if (m.cols() == 1) {
        h.array().colwise() *= m.col(0).array();
      } else {
        h.array() *= m.array();
      }
    }
    if (tape != nullptr) {
      tape->inputs.push_back(std::move(a));
      tape->pre.push_back(std::move(z));
    }
    a = std::move(h);
  }
  return a;
}

Mat backward_batch(const MlpParams& params, const MlpTape& tape,
                   const Mat& upstream, MlpGrads* grads) {
  if (tape.pre.size() != params.layers.size()) {
    throw ConfigError("backward called without a matching forward tape");
  }
  Mat g = upstream;
  for (std::size_t i = params.layers.size(); i-- > 0;) {
    const auto& layer = params.layers[i];
    if (!tape.mask.empty() && i + 1 < params.layers.size()) {
      const Mat& m = tape.mask[i];
      if (m.cols() == 1) {
        g.array().colwise() *= m.col(0).array();
      } else {
        g.array() *= m.array();
      }
    }
    apply_activation_grad(layer.activation, tape.pre[i], g);
    if (grads != nullptr) {
      grads->weight[i].noalias() += g * tape.inputs[i].transpose();
      grads->bias[i] += g.rowwise().sum();
    }
    g = layer.weight.transpose() * g;
  }
  return g;
}

Vec forward(const MlpParams& params, const Vec& x, const DropoutSpec& dropout,
            Rng* rng, MlpTape* tape) {
  DropoutMask mask;
  if (dropout.active()) {
    if (rng == nullptr) throw ConfigError("dropout forward requires an Rng");
    mask = draw_dropout_mask(params, dropout, 1, *rng);
  }
  return forward_batch(params, x, mask.empty() ? nullptr : &mask, tape);
}

BackwardResult backward(const MlpParams& params, const MlpTape& tape,
                        const Vec& upstream) {
  BackwardResult result{MlpGrads::zeros_like(params), Vec()};
  result.input = backward_batch(params, tape, upstream, &result.params);
  return result;
}

double AdamConfig::learning_rate(int epoch) const {
  return lr * std::pow(lr_decay, epoch);
}

AdamState make_adam_state(const MlpParams& params, const AdamConfig& config) {
  if (!(config.beta1 > 0.0 && config.beta1 < 1.0 && config.beta2 > 0.0 &&
        config.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in (0, 1)");
  }
  return AdamState{config, MlpGrads::zeros_like(params),
                   MlpGrads::zeros_like(params), 0};
}

void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& state,
               int epoch, int batch) {
  if (!grads.all_finite()) {
    throw TrainingError("non-finite gradient", epoch, batch);
  }
  const auto& cfg = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  const double lr = cfg.learning_rate(epoch);

  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / correction1) /
                     ((v.array() / correction2).sqrt() + cfg.eps);
  };
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    update(params.layers[k].weight, grads.weight[k], state.m.weight[k],
           state.v.weight[k]);
    update(params.layers[k].bias, grads.bias[k], state.m.bias[k],
           state.v.bias[k]);
  }
}

Vec bound_output(const Vec& y, const Vec& bound) {
  return bound_output_batch(y, bound);
}

Mat bound_output_batch(const Mat& y, const Vec& bound) {
  if (y.rows() != bound.size()) {
    throw ConfigError("bound_output: bound dimension mismatch");
  }
  Mat out(y.rows(), y.cols());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double b = bound[r];
      double v = b * std::tanh(y(r, c) / b);
      // tanh saturates to exactly 1 in floating point for large arguments.
      if (std::abs(v) >= b) v = std::copysign(std::nextafter(b, 0.0), v);
      out(r, c) = v;
    }
  }
  return out;
}

Mat bound_output_backward(const Mat& y, const Vec& bound, const Mat& upstream) {
  Mat out(y.rows(), y.cols());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double t = std::tanh(y(r, c) / bound[r]);
      out(r, c) = upstream(r, c) * (1.0 - t * t);
    }
  }
  return out;
}

std::string checkpoint_to_string(const MlpParams& params) {
  params.validate();
  std::string out;
  out += fmt::format("{{\n  \"schema\": \"{}\",\n  \"input_dim\": {},\n",
                     kCheckpointSchema, params.input_dim());
  out += "  \"output_bound\": ";
  append_array(out, params.output_bound.data(), params.output_bound.size());
  out += ",\n  \"layers\": [\n";
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const auto& layer = params.layers[k];
    out += fmt::format(
        "    {{\n      \"in\": {},\n      \"out\": {},\n      \"activation\": \"{}\",\n",
        layer.weight.cols(), layer.weight.rows(),
        activation_name(layer.activation));
    // Row-major weights.
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
        row_major = layer.weight;
    out += "      \"weight\": ";
    append_array(out, row_major.data(), row_major.size());
    out += ",\n      \"bias\": ";
    append_array(out, layer.bias.data(), layer.bias.size());
    out += k + 1 < params.layers.size() ? "\n    },\n" : "\n    }\n";
  }
  out += "  ]\n}\n";
  return out;
}

MlpParams checkpoint_from_string(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw LoadError(fmt::format("checkpoint parse error at byte {}: {}", e.byte,
                                e.what()));
  }
  if (!doc.is_object()) throw LoadError("checkpoint: expected an object");
  if (!doc.contains("schema") || !doc["schema"].is_string() ||
      doc["schema"].get<std::string>() != kCheckpointSchema) {
    throw LoadError(fmt::format("schema: expected \"{}\"", kCheckpointSchema));
  }
  const int input_dim = read_dim(doc, "input_dim", "checkpoint");
  if (!doc.contains("layers") || !doc["layers"].is_array() ||
      doc["layers"].empty()) {
    throw LoadError("layers: expected a non-empty array");
  }

  MlpParams params;
  int expected_in = input_dim;
  const auto& layers = doc["layers"];
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const std::string path = fmt::format("layers[{}]", k);
    const auto& node = layers[k];
    if (!node.is_object()) throw LoadError(path + ": expected an object");
    const int in = read_dim(node, "in", path);
    const int out = read_dim(node, "out", path);
    if (in != expected_in) {
      throw LoadError(fmt::format("{}.in: declared {} but previous output is {}",
                                  path, in, expected_in));
    }
    if (!node.contains("activation") || !node["activation"].is_string()) {
      throw LoadError(path + ".activation: expected a string");
    }
    Layer layer;
    try {
      layer.activation = parse_activation(node["activation"].get<std::string>());
    } catch (const ConfigError& e) {
      throw LoadError(path + ".activation: " + e.what());
    }
    const auto w = read_array(node.value("weight", json()), path + ".weight",
                              static_cast<std::size_t>(in) * out);
    const auto b = read_array(node.value("bias", json()), path + ".bias",
                              static_cast<std::size_t>(out));
    layer.weight.resize(out, in);
    for (int r = 0; r < out; ++r) {
      for (int c = 0; c < in; ++c) layer.weight(r, c) = w[r * in + c];
    }
    layer.bias = Eigen::Map<const Vec>(b.data(), out);
    params.layers.push_back(std::move(layer));
    expected_in = out;
  }
  if (doc.contains("output_bound")) {
    const auto& node = doc["output_bound"];
    if (node.is_array() && !node.empty()) {
      const auto b = read_array(node, "output_bound",
                                static_cast<std::size_t>(expected_in));
      params.output_bound = Eigen::Map<const Vec>(b.data(), expected_in);
    } else if (!node.is_array()) {
      throw LoadError("output_bound: expected an array");
    }
  }
  try {
    params.validate();
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint: ") + e.what());
  }
  return params;
}

void save_checkpoint(const MlpParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError(path.string());
  out << checkpoint_to_string(params);
}

MlpParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError(path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return checkpoint_from_string(buffer.str());
}

}  // namespace nicon
