#include "mmcl/objectives.hpp"

#include <cmath>

namespace mmcl {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::CLIP: return "CLIP";
    case Variant::CLIPs: return "CLIPs";
    case Variant::CLIPn: return "CLIPn";
    case Variant::CLIPe: return "CLIPe";
    case Variant::CyCLIP: return "CyCLIP";
    case Variant::CyCLIPs: return "CyCLIPs";
    case Variant::CyCLIPn: return "CyCLIPn";
    case Variant::CyCLIPe: return "CyCLIPe";
  }
  return "CLIP";
}

Variant variant_from_string(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  for (std::string_view base : {"CyCLIP", "CLIP"}) {
    if (!name.starts_with(base)) continue;
    const auto suffix = name.substr(base.size());
    if (suffix.size() > 1 && suffix.find_first_not_of("sne") == std::string_view::npos) {
      throw Error(ErrorKind::ConfigInvalid,
                  "variant '" + std::string(name) + "' combines several sentence objectives; pick one suffix");
    }
  }
  throw Error(ErrorKind::ConfigInvalid,
              "unknown variant '" + std::string(name) +
                  "' (expected CLIP|CLIPs|CLIPn|CLIPe|CyCLIP|CyCLIPs|CyCLIPn|CyCLIPe)");
}

std::string_view to_string(Term t) {
  switch (t) {
    case Term::Contrastive: return "contrastive";
    case Term::CrossCyclic: return "c_cyclic";
    case Term::InModalCyclic: return "i_cyclic";
    case Term::SimcseUnsup: return "simcse";
    case Term::NliSup: return "nli";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// ObjectiveConfig

namespace {

bool is_cyclic(Variant v) {
  return v == Variant::CyCLIP || v == Variant::CyCLIPs || v == Variant::CyCLIPn || v == Variant::CyCLIPe;
}

bool uses_simcse(Variant v) {
  return v == Variant::CLIPs || v == Variant::CyCLIPs || v == Variant::CLIPe || v == Variant::CyCLIPe;
}

bool uses_nli(Variant v) { return v == Variant::CLIPn || v == Variant::CyCLIPn; }

}  // namespace

SentenceCorpus ObjectiveConfig::sentence_corpus() const {
  return (variant == Variant::CLIPe || variant == Variant::CyCLIPe) ? SentenceCorpus::External
                                                                    : SentenceCorpus::Captions;
}

bool ObjectiveConfig::is_active(Term t) const {
  switch (t) {
    case Term::Contrastive: return true;
    case Term::CrossCyclic:
    case Term::InModalCyclic: return is_cyclic(variant);
    case Term::SimcseUnsup: return uses_simcse(variant);
    case Term::NliSup: return uses_nli(variant);
  }
  return false;
}

double ObjectiveConfig::weight(Term t) const {
  if (!is_active(t)) return 0.0;
  switch (t) {
    case Term::Contrastive: return lambda_contra;
    case Term::CrossCyclic: return lambda_c_cyclic;
    case Term::InModalCyclic: return lambda_i_cyclic;
    case Term::SimcseUnsup: return lambda_s;
    case Term::NliSup: return lambda_n;
  }
  return 0.0;
}

std::vector<Term> ObjectiveConfig::active_terms() const {
  std::vector<Term> out;
  for (Term t : kAllTerms) {
    if (is_active(t)) out.push_back(t);
  }
  return out;
}

void ObjectiveConfig::validate() const {
  const std::pair<const char*, double> lambdas[] = {{"lambda_contra", lambda_contra},
                                                    {"lambda_c_cyclic", lambda_c_cyclic},
                                                    {"lambda_i_cyclic", lambda_i_cyclic},
                                                    {"lambda_s", lambda_s},
                                                    {"lambda_n", lambda_n}};
  for (const auto& [name, value] : lambdas) {
    if (!(value >= 0.0) || !std::isfinite(value)) {
      throw Error(ErrorKind::ConfigInvalid, std::string(name) + " must be a finite value >= 0");
    }
  }
  if (!(tau_s > 0.0) || !std::isfinite(tau_s)) throw Error(ErrorKind::ConfigInvalid, "tau_s must be > 0");
}

// ---------------------------------------------------------------------------
// Individual terms

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::DimensionMismatch,
                std::string(op) + ": inputs are " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                    " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

void require_batch(std::size_t n, std::size_t min, const char* op) {
  if (n < min) {
    throw Error(ErrorKind::BatchTooSmall,
                std::string(op) + " needs at least " + std::to_string(min) + " rows, got " + std::to_string(n));
  }
}

// Mean over rows of -log softmax(logits)[j][target_col(j)], with d/dlogits.
struct CrossEntropy {
  double value = 0.0;
  Matrix grad;
};

CrossEntropy diagonal_cross_entropy(const Matrix& logits) {
  const std::size_t n = logits.rows();
  const Matrix log_p = log_softmax_rows(logits);
  CrossEntropy ce;
  ce.grad = Matrix(n, logits.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) {
    ce.value -= log_p(j, j);
    for (std::size_t k = 0; k < logits.cols(); ++k) ce.grad(j, k) = std::exp(log_p(j, k)) * inv_n;
    ce.grad(j, j) -= inv_n;
  }
  ce.value *= inv_n;
  return ce;
}

}  // namespace

LossTerm contrastive_loss(const Matrix& img, const Matrix& txt, double logit_scale) {
  require_same_shape(img, txt, "contrastive_loss");
  require_batch(img.rows(), 2, "contrastive_loss");

  const double scale = std::exp(logit_scale);
  Matrix logits = matmul_nt(img, txt);
  for (double& x : logits.values()) x *= scale;

  const CrossEntropy per_image = diagonal_cross_entropy(logits);
  const CrossEntropy per_text = diagonal_cross_entropy(transpose(logits));

  Matrix grad_logits = per_image.grad;
  axpy(grad_logits, 1.0, transpose(per_text.grad));
  for (double& g : grad_logits.values()) g *= 0.5;

  LossTerm out;
  out.value = 0.5 * (per_image.value + per_text.value);
  // d logits / d l = logits
  const auto gv = grad_logits.values();
  const auto lv = logits.values();
  for (std::size_t i = 0; i < gv.size(); ++i) out.grad_logit_scale += gv[i] * lv[i];

  Matrix grad_sim = std::move(grad_logits);
  for (double& g : grad_sim.values()) g *= scale;
  out.grad_a = matmul(grad_sim, txt);
  out.grad_b = matmul_tn(grad_sim, img);
  return out;
}

LossTerm cross_cyclic_loss(const Matrix& img, const Matrix& txt) {
  require_same_shape(img, txt, "cross_cyclic_loss");
  require_batch(img.rows(), 1, "cross_cyclic_loss");
  const std::size_t n = img.rows();
  const double inv_n2 = 1.0 / static_cast<double>(n * n);
  const Matrix sim = matmul_nt(img, txt);

  LossTerm out;
  Matrix grad_sim(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      const double diff = sim(j, k) - sim(k, j);
      out.value += diff * diff;
      // S_jk appears in the (j,k) term with + and in the (k,j) term with -.
      grad_sim(j, k) = 4.0 * diff * inv_n2;
    }
  }
  out.value *= inv_n2;
  out.grad_a = matmul(grad_sim, txt);
  out.grad_b = matmul_tn(grad_sim, img);
  return out;
}

LossTerm in_modal_cyclic_loss(const Matrix& img, const Matrix& txt) {
  require_same_shape(img, txt, "in_modal_cyclic_loss");
  require_batch(img.rows(), 1, "in_modal_cyclic_loss");
  const std::size_t n = img.rows();
  const double inv_n2 = 1.0 / static_cast<double>(n * n);
  const Matrix gram_img = matmul_nt(img, img);
  const Matrix gram_txt = matmul_nt(txt, txt);

  LossTerm out;
  Matrix diff(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      diff(j, k) = gram_img(j, k) - gram_txt(k, j);
      out.value += diff(j, k) * diff(j, k);
    }
  }
  out.value *= inv_n2;
  // Both Gram matrices are symmetric, so d/dX of sum (X X^T - Y Y^T)^2 is 4 D X.
  out.grad_a = matmul(diff, img);
  out.grad_b = matmul(diff, txt);
  for (double& g : out.grad_a.values()) g *= 4.0 * inv_n2;
  for (double& g : out.grad_b.values()) g *= -4.0 * inv_n2;
  return out;
}

LossTerm simcse_unsup_loss(const Matrix& t, const Matrix& t_plus, double tau_s) {
  require_same_shape(t, t_plus, "simcse_unsup_loss");
  require_batch(t.rows(), 2, "simcse_unsup_loss");
  const double inv_tau = 1.0 / tau_s;
  Matrix logits = matmul_nt(t, t_plus);
  for (double& x : logits.values()) x *= inv_tau;

  CrossEntropy ce = diagonal_cross_entropy(logits);
  for (double& g : ce.grad.values()) g *= inv_tau;

  LossTerm out;
  out.value = ce.value;
  out.grad_a = matmul(ce.grad, t_plus);
  out.grad_b = matmul_tn(ce.grad, t);
  return out;
}

LossTerm nli_sup_loss(const Matrix& premise, const Matrix& entail, const Matrix& contra, double tau_s) {
  require_same_shape(premise, entail, "nli_sup_loss");
  require_same_shape(premise, contra, "nli_sup_loss");
  require_batch(premise.rows(), 1, "nli_sup_loss");
  const std::size_t n = premise.rows();
  const double inv_tau = 1.0 / tau_s;

  // Candidates per premise: [entail_0..entail_{N-1}, contra_0..contra_{N-1}].
  const Matrix pos = matmul_nt(premise, entail);
  const Matrix neg = matmul_nt(premise, contra);
  Matrix logits(n, 2 * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      logits(j, k) = pos(j, k) * inv_tau;
      logits(j, n + k) = neg(j, k) * inv_tau;
    }
  }
  const CrossEntropy ce = diagonal_cross_entropy(logits);

  Matrix grad_pos(n, n);
  Matrix grad_neg(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      grad_pos(j, k) = ce.grad(j, k) * inv_tau;
      grad_neg(j, k) = ce.grad(j, n + k) * inv_tau;
    }
  }

  LossTerm out;
  out.value = ce.value;
  out.grad_a = matmul(grad_pos, entail);
  axpy(out.grad_a, 1.0, matmul(grad_neg, contra));
  out.grad_b = matmul_tn(grad_pos, premise);
  out.grad_c = matmul_tn(grad_neg, premise);
  return out;
}

// ---------------------------------------------------------------------------
// Composite

std::optional<double> CompositeLoss::term_value(Term t) const {
  for (const auto& entry : breakdown) {
    if (entry.term == t) return entry.value;
  }
  return std::nullopt;
}

namespace {

void accumulate(Matrix& target, double weight, const Matrix& grad) {
  if (target.empty()) target = Matrix(grad.rows(), grad.cols());
  axpy(target, weight, grad);
}

}  // namespace

CompositeLoss composite_loss(const ObjectiveConfig& config, double logit_scale, const CompositeInputs& inputs) {
  config.validate();
  if (inputs.img == nullptr) throw Error(ErrorKind::MissingInput, "image-side embeddings are required");
  if (inputs.txt == nullptr) throw Error(ErrorKind::MissingInput, "text embeddings are required");
  if (config.needs_twin_views() && inputs.sentences == nullptr) {
    throw Error(ErrorKind::MissingInput,
                std::string(to_string(config.variant)) + " requires twin sentence views (txt_plus)");
  }
  if (config.needs_nli() && inputs.nli == nullptr) {
    throw Error(ErrorKind::MissingInput, std::string(to_string(config.variant)) + " requires an NLI triple batch");
  }

  CompositeLoss out;
  if (!config.needs_twin_views() && inputs.sentences != nullptr) {
    out.warnings.push_back("InactiveInputProvided: twin sentence views ignored by " +
                           std::string(to_string(config.variant)));
  }
  if (!config.needs_nli() && inputs.nli != nullptr) {
    out.warnings.push_back("InactiveInputProvided: NLI triple ignored by " + std::string(to_string(config.variant)));
  }

  const Matrix& img = *inputs.img;
  const Matrix& txt = *inputs.txt;
  out.grad_img = Matrix(img.rows(), img.cols());
  out.grad_txt = Matrix(txt.rows(), txt.cols());

  for (Term term : config.active_terms()) {
    const double w = config.weight(term);
    LossTerm lt;
    switch (term) {
      case Term::Contrastive:
        lt = contrastive_loss(img, txt, logit_scale);
        accumulate(out.grad_img, w, lt.grad_a);
        accumulate(out.grad_txt, w, lt.grad_b);
        out.grad_logit_scale += w * lt.grad_logit_scale;
        break;
      case Term::CrossCyclic:
        lt = cross_cyclic_loss(img, txt);
        accumulate(out.grad_img, w, lt.grad_a);
        accumulate(out.grad_txt, w, lt.grad_b);
        break;
      case Term::InModalCyclic:
        lt = in_modal_cyclic_loss(img, txt);
        accumulate(out.grad_img, w, lt.grad_a);
        accumulate(out.grad_txt, w, lt.grad_b);
        break;
      case Term::SimcseUnsup:
        lt = simcse_unsup_loss(inputs.sentences->view, inputs.sentences->view_plus, config.tau_s);
        accumulate(out.grad_sentence, w, lt.grad_a);
        accumulate(out.grad_sentence_plus, w, lt.grad_b);
        break;
      case Term::NliSup:
        lt = nli_sup_loss(inputs.nli->premise, inputs.nli->entailment, inputs.nli->contradiction, config.tau_s);
        accumulate(out.grad_premise, w, lt.grad_a);
        accumulate(out.grad_entailment, w, lt.grad_b);
        accumulate(out.grad_contradiction, w, lt.grad_c);
        break;
    }
    out.value += w * lt.value;
    out.breakdown.push_back({term, lt.value, w});
  }
  return out;
}

}  // namespace mmcl
