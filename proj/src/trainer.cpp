#include "mmcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

namespace mmcl {

using nlohmann::json;

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (batch_size < 2) throw Error(ErrorKind::ConfigInvalid, "batch_size must be >= 2");
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw Error(ErrorKind::ConfigInvalid, "peak_lr must be > 0");
  if (!(betas.first >= 0.0 && betas.first < 1.0) || !(betas.second >= 0.0 && betas.second < 1.0)) {
    throw Error(ErrorKind::ConfigInvalid, "betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw Error(ErrorKind::ConfigInvalid, "eps must be > 0");
  if (!(weight_decay >= 0.0)) throw Error(ErrorKind::ConfigInvalid, "weight_decay must be >= 0");
  if (!(shape.text_dropout >= 0.0 && shape.text_dropout < 1.0)) {
    throw Error(ErrorKind::ConfigInvalid, "model.text_dropout must lie in [0, 1)");
  }
  if (!(shape.other_dropout >= 0.0 && shape.other_dropout < 1.0)) {
    throw Error(ErrorKind::ConfigInvalid, "model.other_dropout must lie in [0, 1)");
  }
  if (shape.token_dim == 0 || shape.text_hidden == 0 || shape.other_hidden == 0 || shape.embed_dim == 0) {
    throw Error(ErrorKind::ConfigInvalid, "model widths must be positive");
  }
  objective.validate();
}

json TrainConfig::to_json() const {
  return {
      {"epochs", epochs},
      {"batch_size", batch_size},
      {"peak_lr", peak_lr},
      {"warmup_steps", warmup_steps},
      {"optimizer", optimizer == OptimizerKind::Adam ? "adam" : "adamw"},
      {"betas", {betas.first, betas.second}},
      {"eps", eps},
      {"weight_decay", weight_decay},
      {"seed", seed},
      {"eval_every", eval_every},
      {"objective",
       {{"variant", std::string(to_string(objective.variant))},
        {"lambda_contra", objective.lambda_contra},
        {"lambda_c_cyclic", objective.lambda_c_cyclic},
        {"lambda_i_cyclic", objective.lambda_i_cyclic},
        {"lambda_s", objective.lambda_s},
        {"lambda_n", objective.lambda_n},
        {"tau_s", objective.tau_s}}},
      {"model",
       {{"token_dim", shape.token_dim},
        {"text_hidden", shape.text_hidden},
        {"other_hidden", shape.other_hidden},
        {"embed_dim", shape.embed_dim},
        {"text_dropout", shape.text_dropout},
        {"other_dropout", shape.other_dropout}}},
  };
}

namespace {

[[noreturn]] void config_error(const std::string& field, const std::string& why) {
  throw Error(ErrorKind::ConfigInvalid, field + ": " + why);
}

void reject_unknown(const json& j, const std::string& prefix, const std::set<std::string>& known) {
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) config_error(prefix + key, "unknown field");
  }
}

template <typename T>
void read_field(const json& j, const std::string& prefix, const char* key, T& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if constexpr (std::is_same_v<T, double>) {
    if (!v.is_number()) config_error(prefix + key, "expected a number");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || v.get<long long>() < 0) config_error(prefix + key, "expected a non-negative integer");
  } else {
    if (!v.is_string()) config_error(prefix + key, "expected a string");
  }
  out = v.get<T>();
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) config_error("<root>", "expected a JSON object");
  reject_unknown(j, "", {"epochs", "batch_size", "peak_lr", "warmup_steps", "optimizer", "betas", "eps",
                         "weight_decay", "seed", "eval_every", "objective", "model"});
  TrainConfig c;
  read_field(j, "", "epochs", c.epochs);
  read_field(j, "", "batch_size", c.batch_size);
  read_field(j, "", "peak_lr", c.peak_lr);
  read_field(j, "", "warmup_steps", c.warmup_steps);
  read_field(j, "", "eps", c.eps);
  read_field(j, "", "seed", c.seed);
  read_field(j, "", "eval_every", c.eval_every);
  if (j.contains("optimizer")) {
    std::string name;
    read_field(j, "", "optimizer", name);
    if (name == "adam") {
      c.optimizer = OptimizerKind::Adam;
    } else if (name == "adamw") {
      c.optimizer = OptimizerKind::AdamW;
      c.weight_decay = 0.01;
    } else {
      config_error("optimizer", "expected adam or adamw, got '" + name + "'");
    }
  }
  read_field(j, "", "weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    const auto& b = j.at("betas");
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number()) {
      config_error("betas", "expected two numbers");
    }
    c.betas = {b[0].get<double>(), b[1].get<double>()};
  }
  if (j.contains("objective")) {
    const auto& o = j.at("objective");
    if (!o.is_object()) config_error("objective", "expected an object");
    reject_unknown(o, "objective.",
                   {"variant", "lambda_contra", "lambda_c_cyclic", "lambda_i_cyclic", "lambda_s", "lambda_n", "tau_s"});
    if (o.contains("variant")) {
      std::string name;
      read_field(o, "objective.", "variant", name);
      c.objective.variant = variant_from_string(name);
    }
    read_field(o, "objective.", "lambda_contra", c.objective.lambda_contra);
    read_field(o, "objective.", "lambda_c_cyclic", c.objective.lambda_c_cyclic);
    read_field(o, "objective.", "lambda_i_cyclic", c.objective.lambda_i_cyclic);
    read_field(o, "objective.", "lambda_s", c.objective.lambda_s);
    read_field(o, "objective.", "lambda_n", c.objective.lambda_n);
    read_field(o, "objective.", "tau_s", c.objective.tau_s);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (!m.is_object()) config_error("model", "expected an object");
    reject_unknown(m, "model.",
                   {"token_dim", "text_hidden", "other_hidden", "embed_dim", "text_dropout", "other_dropout"});
    read_field(m, "model.", "token_dim", c.shape.token_dim);
    read_field(m, "model.", "text_hidden", c.shape.text_hidden);
    read_field(m, "model.", "other_hidden", c.shape.other_hidden);
    read_field(m, "model.", "embed_dim", c.shape.embed_dim);
    read_field(m, "model.", "text_dropout", c.shape.text_dropout);
    read_field(m, "model.", "other_dropout", c.shape.other_dropout);
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

double lr_at(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  if (config.warmup_steps >= total_steps) {
    throw Error(ErrorKind::InvalidSchedule, "warmup_steps (" + std::to_string(config.warmup_steps) +
                                                ") must be below total steps (" + std::to_string(total_steps) + ")");
  }
  if (step > total_steps) throw Error(ErrorKind::InvalidSchedule, "step beyond the end of the schedule");
  if (step < config.warmup_steps) {
    return config.peak_lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  if (step == total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - config.warmup_steps) / static_cast<double>(total_steps - config.warmup_steps);
  return config.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void optimizer_step(OptimizerState& state, std::span<const ParamBlock> blocks, double lr, const TrainConfig& config) {
  if (state.first_moment.empty() && state.step == 0) {
    for (const auto& b : blocks) {
      state.first_moment.emplace_back(b.value.size(), 0.0);
      state.second_moment.emplace_back(b.value.size(), 0.0);
    }
  }
  if (state.first_moment.size() != blocks.size()) {
    throw Error(ErrorKind::ShapeMismatch, "optimizer state tracks " + std::to_string(state.first_moment.size()) +
                                              " blocks, got " + std::to_string(blocks.size()));
  }
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    if (blocks[k].grad.size() != blocks[k].value.size() || state.first_moment[k].size() != blocks[k].value.size()) {
      throw Error(ErrorKind::ShapeMismatch, "parameter block " + std::to_string(k) + " has mismatched gradient");
    }
  }

  ++state.step;
  const auto [beta1, beta2] = config.betas;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(beta1, t);
  const double correction2 = 1.0 - std::pow(beta2, t);
  const bool decoupled = config.optimizer == OptimizerKind::AdamW;

  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const ParamBlock& block = blocks[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < block.value.size(); ++i) {
      double g = block.grad[i];
      double& p = block.value[i];
      if (block.decay && config.weight_decay > 0.0) {
        if (decoupled) {
          p *= 1.0 - lr * config.weight_decay;
        } else {
          g += config.weight_decay * p;
        }
      }
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      p -= lr * (m[i] / correction1) / (std::sqrt(v[i] / correction2) + config.eps);
      if (block.clamp) p = std::clamp(p, block.clamp->first, block.clamp->second);
    }
  }
}

// ---------------------------------------------------------------------------
// Logs

json HistoryEntry::to_json() const {
  return {{"step", step},         {"epoch", epoch}, {"lr", lr},
          {"r1_text", r1_text},   {"r1_other", r1_other}, {"score", score},
          {"train_loss", train_loss}, {"logit_scale", logit_scale}};
}

json StepRecord::to_json() const {
  json j = {{"step", step}, {"lr", lr}};
  json terms = json::object();
  for (const auto& t : this->terms) terms[std::string(to_string(t.term))] = t.value;
  j["terms"] = terms;
  j["composite"] = composite;
  j["logit_scale"] = logit_scale;
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation

PairedEvaluation evaluate_pairs(const DualEncoder& model, const PairedDataset& dataset) {
  if (dataset.size() == 0) throw Error(ErrorKind::EmptyDataset, "evaluation set is empty");
  const Matrix captions = model.encode_texts(dataset.captions).matrix;
  const Matrix items = model.encode_features(dataset.item_features()).matrix;

  RelevanceMap item_to_captions(dataset.item_count());
  RelevanceMap caption_to_item(dataset.size());
  for (std::size_t r = 0; r < dataset.size(); ++r) {
    item_to_captions[dataset.item_of[r]].push_back(r);
    caption_to_item[r].push_back(dataset.item_of[r]);
  }
  PairedEvaluation out;
  out.text = evaluate_retrieval(items, captions, item_to_captions, Direction::TextRetrieval);
  out.other = evaluate_retrieval(captions, items, caption_to_item, Direction::OtherRetrieval);
  return out;
}

Vocabulary build_vocabulary(const TrainingSet& data) {
  std::set<std::string> tokens;
  auto add = [&](const std::string& text) {
    for (auto& t : split_whitespace(text)) tokens.insert(std::move(t));
  };
  for (const auto& r : data.pairs) add(r.caption);
  for (const auto& r : data.nli) {
    add(r.premise);
    add(r.entailment);
    add(r.contradiction);
  }
  tokens.erase(std::string(Vocabulary::kUnknown));
  return Vocabulary(std::vector<std::string>(tokens.begin(), tokens.end()));
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

TextInput slice(const TextInput& all, std::span<const std::size_t> rows) {
  TextInput out;
  out.vocab_size = all.vocab_size;
  for (std::size_t r : rows) out.token_ids.push_back(all.token_ids[r]);
  return out;
}

Matrix slice(const Matrix& all, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), all.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = all.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// Endless reshuffled pass over [0, n).
class Cycler {
 public:
  Cycler(std::size_t n, Rng rng) : rng_(std::move(rng)), order_(n) { refill(); }

  std::vector<std::size_t> take(std::size_t count) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      if (pos_ == order_.size()) refill();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void refill() {
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
    pos_ = 0;
  }

  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

void push_layer_blocks(std::vector<ParamBlock>& blocks, EncoderParams& params, const ParamGrads& grads) {
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    blocks.push_back({params.layers[k].weight.values(), grads.weight[k].values(), true, std::nullopt});
    blocks.push_back({params.layers[k].bias, grads.bias[k], false, std::nullopt});
  }
}

}  // namespace

TrainResult train(const TrainConfig& config, const TrainingSet& data, const std::vector<PairedRecord>& val) {
  config.validate();
  if (data.pairs.empty()) throw Error(ErrorKind::EmptyDataset, "training set is empty");
  if (val.empty()) throw Error(ErrorKind::EmptyDataset, "validation set is empty");
  {
    std::set<std::string> train_items;
    for (const auto& r : data.pairs) train_items.insert(item_key(r.id));
    for (const auto& r : val) {
      if (train_items.contains(item_key(r.id))) {
        throw Error(ErrorKind::OverlapLeak, "item '" + item_key(r.id) + "' is in both train and val");
      }
    }
  }
  const ObjectiveConfig& objective = config.objective;
  const bool external_sentences = objective.needs_twin_views() && objective.sentence_corpus() == SentenceCorpus::External;
  if ((objective.needs_nli() || external_sentences) && data.nli.empty()) {
    throw Error(ErrorKind::MissingInput, std::string(to_string(objective.variant)) + " requires NLI records");
  }

  Rng root(config.seed);
  Rng init_rng = root.fork(1);
  Rng shuffle_rng = root.fork(2);
  Rng dropout_rng = root.fork(3);
  Rng aux_rng = root.fork(4);

  const PairedDataset train_set = PairedDataset::from_records(data.pairs);
  const PairedDataset val_set = PairedDataset::from_records(val);
  if (val_set.features.cols() != train_set.features.cols()) {
    throw Error(ErrorKind::DimensionMismatch, "train and val feature dims differ");
  }

  TrainResult result;
  DualEncoder model =
      DualEncoder::create(build_vocabulary(data), train_set.features.cols(), config.shape, init_rng);
  result.best = model;
  result.final_model = model;

  const std::size_t n = train_set.size();
  const std::size_t batch = config.batch_size;
  const std::size_t full_batches = n / batch;
  const bool keep_tail = n % batch >= 2;
  const std::size_t per_epoch = full_batches + (keep_tail ? 1 : 0);
  if (per_epoch == 0) throw Error(ErrorKind::EmptyDataset, "training set has fewer than 2 pairs");
  result.total_steps = config.epochs * per_epoch;
  if (config.epochs == 0) return result;
  lr_at(config, 0, result.total_steps);  // validates the schedule up front

  const TextInput captions = model.vocab.encode_all(train_set.captions);
  TextInput nli_premise, nli_entail, nli_contra, sentences;
  std::optional<Cycler> nli_cycle, sentence_cycle;
  if (objective.needs_nli()) {
    std::vector<std::string> p, e, c;
    for (const auto& r : data.nli) {
      p.push_back(r.premise);
      e.push_back(r.entailment);
      c.push_back(r.contradiction);
    }
    nli_premise = model.vocab.encode_all(p);
    nli_entail = model.vocab.encode_all(e);
    nli_contra = model.vocab.encode_all(c);
    nli_cycle.emplace(data.nli.size(), aux_rng.fork(1));
  }
  if (external_sentences) {
    std::vector<std::string> all;
    for (const auto& r : data.nli) {
      all.push_back(r.premise);
      all.push_back(r.entailment);
      all.push_back(r.contradiction);
    }
    sentences = model.vocab.encode_all(all);
    sentence_cycle.emplace(all.size(), aux_rng.fork(2));
  }

  OptimizerState opt;
  std::optional<std::size_t> best;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::size_t step = 0;

  auto evaluate = [&](std::size_t epoch, double lr) {
    const PairedEvaluation ev = evaluate_pairs(model, val_set);
    HistoryEntry h;
    h.step = step;
    h.epoch = epoch;
    h.lr = lr;
    h.r1_text = ev.text.recall_at.at(1);
    h.r1_other = ev.other.recall_at.at(1);
    h.score = ev.score();
    h.train_loss = loss_count == 0 ? 0.0 : loss_sum / static_cast<double>(loss_count);
    h.logit_scale = model.logit_scale.value;
    loss_sum = 0.0;
    loss_count = 0;
    result.history.push_back(h);
    if (!best || h.score > result.history[*best].score) {
      best = result.history.size() - 1;
      result.best = model;
    }
  };

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    bool evaluated_at_step = false;
    double lr = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * batch;
      const std::span<const std::size_t> rows(order.data() + begin, std::min(n, begin + batch) - begin);
      lr = lr_at(config, step, result.total_steps);

      const Encoded img = embed_features(model.other, slice(train_set.features, rows),
                                         sample_masks(model.other, rows.size(), dropout_rng), model.other_modality);
      const TextInput caption_batch = slice(captions, rows);
      const Encoded txt = embed_text(model.text, model.token_table, caption_batch,
                                     sample_masks(model.text, rows.size(), dropout_rng));

      std::optional<Encoded> view_a, view_b, premise, entail, contra;
      std::optional<TwinViews> twins;
      std::optional<NliTriple> triple;
      if (objective.needs_twin_views()) {
        if (external_sentences) {
          const TextInput s = slice(sentences, sentence_cycle->take(rows.size()));
          view_a = embed_text(model.text, model.token_table, s, sample_masks(model.text, rows.size(), dropout_rng));
          view_b = embed_text(model.text, model.token_table, s, sample_masks(model.text, rows.size(), dropout_rng));
          twins = TwinViews{view_a->batch.matrix, view_b->batch.matrix};
        } else {
          view_b = embed_text(model.text, model.token_table, caption_batch,
                              sample_masks(model.text, rows.size(), dropout_rng));
          twins = TwinViews{txt.batch.matrix, view_b->batch.matrix};
        }
      }
      if (objective.needs_nli()) {
        const auto picks = nli_cycle->take(rows.size());
        premise = embed_text(model.text, model.token_table, slice(nli_premise, picks),
                             sample_masks(model.text, rows.size(), dropout_rng));
        entail = embed_text(model.text, model.token_table, slice(nli_entail, picks),
                            sample_masks(model.text, rows.size(), dropout_rng));
        contra = embed_text(model.text, model.token_table, slice(nli_contra, picks),
                            sample_masks(model.text, rows.size(), dropout_rng));
        triple = NliTriple{premise->batch.matrix, entail->batch.matrix, contra->batch.matrix};
      }

      CompositeInputs inputs;
      inputs.img = &img.batch.matrix;
      inputs.txt = &txt.batch.matrix;
      inputs.sentences = twins ? &*twins : nullptr;
      inputs.nli = triple ? &*triple : nullptr;
      const CompositeLoss loss = composite_loss(objective, model.logit_scale.value, inputs);

      for (const auto& t : loss.breakdown) {
        if (!std::isfinite(t.value)) {
          throw Error(ErrorKind::NumericFailure,
                      "non-finite " + std::string(to_string(t.term)) + " loss at step " + std::to_string(step), step);
        }
      }
      if (!std::isfinite(loss.value) || !std::isfinite(loss.grad_logit_scale)) {
        throw Error(ErrorKind::NumericFailure, "non-finite composite loss at step " + std::to_string(step), step);
      }

      ParamGrads other_grads = backward(model.other, img.trace, loss.grad_img);
      ParamGrads text_grads = ParamGrads::zeros_like(model.text, &model.token_table);
      Matrix grad_txt = loss.grad_txt;
      if (twins && !external_sentences) axpy(grad_txt, 1.0, loss.grad_sentence);
      text_grads.add(backward(model.text, txt.trace, grad_txt));
      if (twins) {
        if (external_sentences) text_grads.add(backward(model.text, view_a->trace, loss.grad_sentence));
        text_grads.add(backward(model.text, view_b->trace, loss.grad_sentence_plus));
      }
      if (triple) {
        text_grads.add(backward(model.text, premise->trace, loss.grad_premise));
        text_grads.add(backward(model.text, entail->trace, loss.grad_entailment));
        text_grads.add(backward(model.text, contra->trace, loss.grad_contradiction));
      }

      std::vector<ParamBlock> blocks;
      blocks.push_back({model.token_table.values(), text_grads.table->values(), true, std::nullopt});
      push_layer_blocks(blocks, model.text, text_grads);
      push_layer_blocks(blocks, model.other, other_grads);
      const double logit_grad = loss.grad_logit_scale;
      if (model.logit_scale.trainable) {
        blocks.push_back({std::span<double>(&model.logit_scale.value, 1), std::span<const double>(&logit_grad, 1),
                          false, std::make_pair(LogitScale::kMin, LogitScale::kMax)});
      }
      optimizer_step(opt, blocks, lr, config);
      model.logit_scale.clamp();

      StepRecord rec;
      rec.step = step;
      rec.lr = lr;
      rec.terms = loss.breakdown;
      rec.composite = loss.value;
      rec.logit_scale = model.logit_scale.value;
      result.steps.push_back(std::move(rec));
      loss_sum += loss.value;
      ++loss_count;
      ++step;

      evaluated_at_step = config.eval_every > 0 && step % config.eval_every == 0;
      if (evaluated_at_step) evaluate(epoch, lr);
    }
    if (!evaluated_at_step) evaluate(epoch, lr);
  }

  result.best_index = best;
  result.final_model = std::move(model);
  return result;
}

}  // namespace mmcl
