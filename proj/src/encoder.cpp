#include "mmcl/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mmcl {

using nlohmann::json;

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Text: return "text";
    case Modality::Image: return "image";
    case Modality::Audio: return "audio";
  }
  return "text";
}

Modality modality_from_string(std::string_view name) {
  if (name == "text") return Modality::Text;
  if (name == "image") return Modality::Image;
  if (name == "audio") return Modality::Audio;
  throw Error(ErrorKind::ConfigInvalid, "unknown modality '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// EncoderParams

std::size_t EncoderParams::input_dim() const {
  return layers.empty() ? 0 : layers.front().in_dim();
}

std::size_t EncoderParams::output_dim() const {
  return layers.empty() ? 0 : layers.back().out_dim();
}

void EncoderParams::validate() const {
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw Error(ErrorKind::InvalidRate, "encoder dropout rate " + std::to_string(dropout_rate));
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& layer = layers[k];
    if (layer.bias.size() != layer.out_dim()) {
      throw Error(ErrorKind::DimensionMismatch,
                  "layer " + std::to_string(k) + " bias has " + std::to_string(layer.bias.size()) +
                      " entries for " + std::to_string(layer.out_dim()) + " outputs");
    }
    if (k > 0 && layers[k - 1].out_dim() != layer.in_dim()) {
      throw Error(ErrorKind::DimensionMismatch,
                  "layer " + std::to_string(k - 1) + " outputs " + std::to_string(layers[k - 1].out_dim()) +
                      " but layer " + std::to_string(k) + " expects " + std::to_string(layer.in_dim()));
    }
  }
}

EncoderParams EncoderParams::random(const std::vector<std::size_t>& widths, double dropout_rate, Rng& rng) {
  EncoderParams params;
  params.dropout_rate = dropout_rate;
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    DenseLayer layer{Matrix(widths[k + 1], widths[k]), std::vector<double>(widths[k + 1], 0.0)};
    const double stddev = 1.0 / std::sqrt(static_cast<double>(widths[k]));
    for (double& w : layer.weight.values()) w = stddev * rng.normal();
    params.layers.push_back(std::move(layer));
  }
  params.validate();
  return params;
}

DropoutMasks sample_masks(const EncoderParams& params, std::size_t batch, Rng& rng) {
  if (params.dropout_rate == 0.0) return {};
  DropoutMasks masks;
  for (std::size_t k = 0; k < params.hidden_count(); ++k) {
    masks.push_back(dropout_mask(rng, batch, params.layers[k].out_dim(), params.dropout_rate));
  }
  return masks;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Matrix affine(const Matrix& input, const DenseLayer& layer) {
  Matrix out = matmul_nt(input, layer.weight);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.bias[c];
  }
  return out;
}

Encoded run_mlp(const EncoderParams& params, Matrix input, const DropoutMasks& masks, Modality modality) {
  params.validate();
  if (!params.layers.empty() && input.cols() != params.input_dim()) {
    throw Error(ErrorKind::DimensionMismatch,
                "encoder expects input width " + std::to_string(params.input_dim()) + ", got " +
                    std::to_string(input.cols()));
  }
  if (!masks.empty()) {
    if (masks.size() != params.hidden_count()) {
      throw Error(ErrorKind::DimensionMismatch,
                  "expected " + std::to_string(params.hidden_count()) + " dropout masks, got " +
                      std::to_string(masks.size()));
    }
    for (std::size_t k = 0; k < masks.size(); ++k) {
      if (masks[k].rows() != input.rows() || masks[k].cols() != params.layers[k].out_dim()) {
        throw Error(ErrorKind::DimensionMismatch, "dropout mask " + std::to_string(k) + " has wrong shape");
      }
    }
  }

  Encoded result;
  ForwardTrace& trace = result.trace;
  trace.masks = masks;
  Matrix current = std::move(input);
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    trace.layer_inputs.push_back(current);
    Matrix pre = affine(current, params.layers[k]);
    if (k + 1 == params.layers.size()) {
      current = std::move(pre);
      break;
    }
    for (double& x : pre.values()) x = std::tanh(x);
    trace.activations.push_back(pre);
    if (!masks.empty()) {
      auto pv = pre.values();
      const auto mv = masks[k].values();
      for (std::size_t i = 0; i < pv.size(); ++i) pv[i] *= mv[i];
    }
    current = std::move(pre);
  }

  trace.output_raw = current;
  trace.output_norms.resize(current.rows());
  for (std::size_t r = 0; r < current.rows(); ++r) trace.output_norms[r] = l2_norm(current.row(r));
  result.batch.matrix = l2_normalize_rows(current);
  result.batch.modality = modality;
  return result;
}

}  // namespace

Matrix bag_of_tokens(const Matrix& table, const TextInput& input) {
  if (input.vocab_size != table.rows()) {
    throw Error(ErrorKind::DimensionMismatch,
                "token table has " + std::to_string(table.rows()) + " rows but vocabulary has " +
                    std::to_string(input.vocab_size) + " entries");
  }
  Matrix bag(input.size(), table.cols());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const auto& ids = input.token_ids[i];
    if (ids.empty()) {
      throw Error(ErrorKind::EmptyInput, "caption " + std::to_string(i) + " has no tokens", i);
    }
    auto out = bag.row(i);
    for (std::size_t id : ids) {
      if (id >= input.vocab_size) {
        throw Error(ErrorKind::UnknownToken,
                    "token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(input.vocab_size),
                    i);
      }
      const auto src = table.row(id);
      for (std::size_t c = 0; c < out.size(); ++c) out[c] += src[c];
    }
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (double& x : out) x *= inv;
  }
  return bag;
}

Encoded embed_features(const EncoderParams& params, const Matrix& features, const DropoutMasks& masks,
                       Modality modality) {
  return run_mlp(params, features, masks, modality);
}

Encoded embed_text(const EncoderParams& params, const Matrix& table, const TextInput& input,
                   const DropoutMasks& masks) {
  Encoded result = run_mlp(params, bag_of_tokens(table, input), masks, Modality::Text);
  result.trace.token_ids = input.token_ids;
  result.trace.table_rows = table.rows();
  return result;
}

// ---------------------------------------------------------------------------
// Backward

ParamGrads ParamGrads::zeros_like(const EncoderParams& params, const Matrix* table) {
  ParamGrads g;
  for (const auto& layer : params.layers) {
    g.weight.emplace_back(layer.weight.rows(), layer.weight.cols());
    g.bias.emplace_back(layer.bias.size(), 0.0);
  }
  if (table != nullptr) g.table = Matrix(table->rows(), table->cols());
  return g;
}

void ParamGrads::add(const ParamGrads& other) {
  if (weight.size() != other.weight.size() || table.has_value() != other.table.has_value()) {
    throw Error(ErrorKind::ShapeMismatch, "adding gradients of different encoders");
  }
  for (std::size_t k = 0; k < weight.size(); ++k) {
    axpy(weight[k], 1.0, other.weight[k]);
    for (std::size_t i = 0; i < bias[k].size(); ++i) bias[k][i] += other.bias[k][i];
  }
  if (table) axpy(*table, 1.0, *other.table);
}

ParamGrads backward(const EncoderParams& params, const ForwardTrace& trace, const Matrix& grad_out) {
  const std::size_t n = trace.output_raw.rows();
  bool ok = trace.layer_inputs.size() == params.layers.size() &&
            trace.activations.size() == params.hidden_count() &&
            (trace.masks.empty() || trace.masks.size() == params.hidden_count()) &&
            grad_out.rows() == n && grad_out.cols() == trace.output_raw.cols() &&
            trace.output_norms.size() == n;
  for (std::size_t k = 0; ok && k < params.layers.size(); ++k) {
    ok = trace.layer_inputs[k].cols() == params.layers[k].in_dim() && trace.layer_inputs[k].rows() == n;
  }
  if (ok && !params.layers.empty()) ok = trace.output_raw.cols() == params.output_dim();
  if (!ok) throw Error(ErrorKind::TraceMismatch, "forward trace does not match encoder or gradient shape");

  // Through the row normalization: (I - y_hat y_hat^T) g / |y|.
  Matrix grad = grad_out;
  for (std::size_t r = 0; r < n; ++r) {
    const auto y = trace.output_raw.row(r);
    const double norm = trace.output_norms[r];
    auto g = grad.row(r);
    const double radial = dot(y, g) / (norm * norm);
    for (std::size_t c = 0; c < g.size(); ++c) g[c] = (g[c] - radial * y[c]) / norm;
  }

  ParamGrads grads;
  grads.weight.resize(params.layers.size());
  grads.bias.resize(params.layers.size());
  for (std::size_t k = params.layers.size(); k-- > 0;) {
    const auto& layer = params.layers[k];
    grads.weight[k] = matmul_tn(grad, trace.layer_inputs[k]);
    grads.bias[k].assign(layer.out_dim(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const auto g = grad.row(r);
      for (std::size_t c = 0; c < g.size(); ++c) grads.bias[k][c] += g[c];
    }
    Matrix grad_in = matmul(grad, layer.weight);
    if (k > 0) {
      const auto& act = trace.activations[k - 1];
      auto gv = grad_in.values();
      const auto av = act.values();
      for (std::size_t i = 0; i < gv.size(); ++i) {
        double g = gv[i];
        if (!trace.masks.empty()) g *= trace.masks[k - 1].values()[i];
        gv[i] = g * (1.0 - av[i] * av[i]);
      }
    }
    grad = std::move(grad_in);
  }

  if (trace.token_ids) {
    Matrix table_grad(trace.table_rows, grad.cols());
    for (std::size_t i = 0; i < trace.token_ids->size(); ++i) {
      const auto& ids = (*trace.token_ids)[i];
      const double inv = 1.0 / static_cast<double>(ids.size());
      const auto g = grad.row(i);
      for (std::size_t id : ids) {
        auto dst = table_grad.row(id);
        for (std::size_t c = 0; c < g.size(); ++c) dst[c] += inv * g[c];
      }
    }
    grads.table = std::move(table_grad);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

namespace {

constexpr double kStep = 1e-5;

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

template <typename Evaluate>
double check_entries(std::span<double> values, std::span<const double> analytic, Evaluate&& evaluate) {
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + kStep;
    const double plus = evaluate();
    values[i] = saved - kStep;
    const double minus = evaluate();
    values[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (plus - minus) / (2.0 * kStep)));
  }
  return worst;
}

double check_layers(EncoderParams& params, const ParamGrads& grads, const std::function<double()>& evaluate) {
  double worst = 0.0;
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    worst = std::max(worst, check_entries(params.layers[k].weight.values(), grads.weight[k].values(), evaluate));
    worst = std::max(worst, check_entries(params.layers[k].bias, grads.bias[k], evaluate));
  }
  return worst;
}

}  // namespace

double gradient_check(const EncoderParams& params, const Matrix& features, const EmbeddingLoss& loss_fn,
                      const GradTamper& tamper) {
  const Encoded base = embed_features(params, features);
  ParamGrads grads = backward(params, base.trace, loss_fn(base.batch.matrix).grad);
  if (tamper) tamper(grads);

  EncoderParams probe = params;
  probe.dropout_rate = 0.0;
  return check_layers(probe, grads, [&] { return loss_fn(embed_features(probe, features).batch.matrix).value; });
}

double gradient_check(const EncoderParams& params, const Matrix& table, const TextInput& input,
                      const EmbeddingLoss& loss_fn, const GradTamper& tamper) {
  const Encoded base = embed_text(params, table, input);
  ParamGrads grads = backward(params, base.trace, loss_fn(base.batch.matrix).grad);
  if (tamper) tamper(grads);

  EncoderParams probe = params;
  probe.dropout_rate = 0.0;
  Matrix probe_table = table;
  auto evaluate = [&] { return loss_fn(embed_text(probe, probe_table, input).batch.matrix).value; };
  const double layer_error = check_layers(probe, grads, evaluate);
  return std::max(layer_error, check_entries(probe_table.values(), grads.table->values(), evaluate));
}

// ---------------------------------------------------------------------------
// Vocabulary

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string token;
  while (in >> token) out.push_back(token);
  return out;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  tokens_.emplace_back(kUnknown);
  index_.emplace(std::string(kUnknown), 0);
  for (const auto& t : tokens) {
    if (index_.contains(t)) continue;
    index_.emplace(t, tokens_.size());
    tokens_.push_back(t);
  }
}

std::size_t Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? 0 : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.find(token) != index_.end(); }

std::vector<std::size_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::size_t> ids;
  for (const auto& t : split_whitespace(text)) ids.push_back(id(t));
  return ids;
}

TextInput Vocabulary::encode_all(const std::vector<std::string>& texts) const {
  TextInput input;
  input.vocab_size = size();
  input.token_ids.reserve(texts.size());
  for (const auto& t : texts) input.token_ids.push_back(encode(t));
  return input;
}

// ---------------------------------------------------------------------------
// Logit scale and the two-tower model

double LogitScale::initial() { return std::log(1.0 / 0.07); }

void LogitScale::clamp() { value = std::clamp(value, kMin, kMax); }

double LogitScale::scale() const { return std::exp(value); }

DualEncoder DualEncoder::create(Vocabulary vocab, std::size_t feature_dim, const Shape& shape, Rng& rng,
                                Modality other_modality) {
  DualEncoder model;
  model.vocab = std::move(vocab);
  model.other_modality = other_modality;
  model.token_table = Matrix(model.vocab.size(), shape.token_dim);
  for (double& x : model.token_table.values()) x = rng.normal();
  model.text = EncoderParams::random({shape.token_dim, shape.text_hidden, shape.embed_dim}, shape.text_dropout, rng);
  model.other =
      EncoderParams::random({feature_dim, shape.other_hidden, shape.embed_dim}, shape.other_dropout, rng);
  return model;
}

EmbeddingBatch DualEncoder::encode_texts(const std::vector<std::string>& texts) const {
  return embed_text(text, token_table, vocab.encode_all(texts)).batch;
}

EmbeddingBatch DualEncoder::encode_features(const Matrix& features) const {
  if (features.cols() != feature_dim()) {
    throw Error(ErrorKind::CheckpointMismatch,
                "checkpoint expects feature dim " + std::to_string(feature_dim()) + " but data has " +
                    std::to_string(features.cols()));
  }
  return embed_features(other, features, {}, other_modality).batch;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization

namespace {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, std::size_t expected_cols) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) return Matrix(0, expected_cols);
  return Matrix::from_rows(rows);
}

json encoder_to_json(const EncoderParams& p) {
  json layers = json::array();
  for (const auto& layer : p.layers) {
    layers.push_back({{"weight", matrix_to_json(layer.weight)}, {"bias", layer.bias}});
  }
  std::vector<std::size_t> widths;
  if (!p.layers.empty()) widths.push_back(p.input_dim());
  for (const auto& layer : p.layers) widths.push_back(layer.out_dim());
  return {{"dropout_rate", p.dropout_rate}, {"widths", widths}, {"layers", layers}};
}

EncoderParams encoder_from_json(const json& j) {
  EncoderParams p;
  p.dropout_rate = j.at("dropout_rate").get<double>();
  for (const auto& layer : j.at("layers")) {
    const auto bias = layer.at("bias").get<std::vector<double>>();
    p.layers.push_back({matrix_from_json(layer.at("weight"), 0), bias});
  }
  p.validate();
  return p;
}

}  // namespace

std::string checkpoint_to_json(const DualEncoder& model) {
  json doc;
  doc["format"] = "mmcl-checkpoint";
  doc["version"] = 1;
  doc["vocab"] = model.vocab.tokens();
  doc["dims"] = {{"vocab_size", model.vocab.size()},
                 {"token_dim", model.token_table.cols()},
                 {"feature_dim", model.feature_dim()},
                 {"embed_dim", model.embed_dim()}};
  doc["token_table"] = matrix_to_json(model.token_table);
  doc["text_encoder"] = encoder_to_json(model.text);
  doc["other_encoder"] = encoder_to_json(model.other);
  doc["other_modality"] = std::string(to_string(model.other_modality));
  doc["logit_scale"] = model.logit_scale.value;
  doc["logit_scale_trainable"] = model.logit_scale.trainable;
  return doc.dump() + "\n";
}

DualEncoder checkpoint_from_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    if (doc.value("format", "") != "mmcl-checkpoint") {
      throw Error(ErrorKind::ParseError, "not an mmcl checkpoint");
    }
    DualEncoder model;
    model.vocab = Vocabulary(doc.at("vocab").get<std::vector<std::string>>());
    const auto token_dim = doc.at("dims").at("token_dim").get<std::size_t>();
    model.token_table = matrix_from_json(doc.at("token_table"), token_dim);
    model.text = encoder_from_json(doc.at("text_encoder"));
    model.other = encoder_from_json(doc.at("other_encoder"));
    model.other_modality = modality_from_string(doc.at("other_modality").get<std::string>());
    model.logit_scale.value = doc.at("logit_scale").get<double>();
    model.logit_scale.trainable = doc.value("logit_scale_trainable", true);
    if (model.token_table.rows() != model.vocab.size() || model.token_table.cols() != model.text.input_dim()) {
      throw Error(ErrorKind::DimensionMismatch, "token table shape does not match vocabulary or text encoder");
    }
    if (model.text.output_dim() != model.other.output_dim()) {
      throw Error(ErrorKind::DimensionMismatch, "text and other encoders disagree on embedding dim");
    }
    return model;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const DualEncoder& model, const std::string& path) {
  write_file_atomic(path, checkpoint_to_json(model));
}

DualEncoder load_checkpoint(const std::string& path) { return checkpoint_from_json(read_file(path)); }

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out << contents;
    out.flush();
    if (!out) throw Error(ErrorKind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) throw Error(ErrorKind::Io, "rename " + tmp.string() + " -> " + path + ": " + ec.message());
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace mmcl
