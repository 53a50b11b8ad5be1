#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmcl/encoder.hpp"
#include "mmcl/tensor.hpp"

namespace mmcl {

enum class Variant { CLIP, CLIPs, CLIPn, CLIPe, CyCLIP, CyCLIPs, CyCLIPn, CyCLIPe };

inline constexpr std::array kAllVariants = {Variant::CLIP,   Variant::CLIPs,   Variant::CLIPn,   Variant::CLIPe,
                                            Variant::CyCLIP, Variant::CyCLIPs, Variant::CyCLIPn, Variant::CyCLIPe};

std::string_view to_string(Variant v);
// Accepts exactly the eight names above; combined suffixes such as "CLIPsn" are rejected.
Variant variant_from_string(std::string_view name);

enum class SentenceCorpus { Captions, External };

enum class Term { Contrastive, CrossCyclic, InModalCyclic, SimcseUnsup, NliSup };

inline constexpr std::array kAllTerms = {Term::Contrastive, Term::CrossCyclic, Term::InModalCyclic,
                                         Term::SimcseUnsup, Term::NliSup};

std::string_view to_string(Term t);

struct ObjectiveConfig {
  Variant variant = Variant::CLIP;
  double lambda_contra = 1.0;
  double lambda_c_cyclic = 0.25;
  double lambda_i_cyclic = 0.25;
  double lambda_s = 0.1;
  double lambda_n = 0.1;
  double tau_s = 0.05;

  SentenceCorpus sentence_corpus() const;
  bool is_active(Term t) const;
  // Weight of a term, 0 when the variant does not use it.
  double weight(Term t) const;
  std::vector<Term> active_terms() const;
  bool needs_twin_views() const { return is_active(Term::SimcseUnsup); }
  bool needs_nli() const { return is_active(Term::NliSup); }

  void validate() const;
};

// Value and gradients of one objective. grad_c is only used by the NLI term,
// grad_logit_scale only by the contrastive term.
struct LossTerm {
  double value = 0.0;
  Matrix grad_a;
  Matrix grad_b;
  Matrix grad_c;
  double grad_logit_scale = 0.0;
};

// Symmetric InfoNCE over logits exp(scale) * cos(img_j, txt_k). Each direction
// is a per-row mean and the two directions are averaged.
LossTerm contrastive_loss(const Matrix& img, const Matrix& txt, double logit_scale);

// (1/N^2) sum_{j,k} (<I_j,T_k> - <I_k,T_j>)^2
LossTerm cross_cyclic_loss(const Matrix& img, const Matrix& txt);

// (1/N^2) sum_{j,k} (<I_j,I_k> - <T_k,T_j>)^2
LossTerm in_modal_cyclic_loss(const Matrix& img, const Matrix& txt);

// Unsupervised SimCSE: twin views of the same sentences are positives.
LossTerm simcse_unsup_loss(const Matrix& t, const Matrix& t_plus, double tau_s);

// Supervised SimCSE: entailments are positives, all in-batch entailments and
// contradictions are the candidates.
LossTerm nli_sup_loss(const Matrix& premise, const Matrix& entail, const Matrix& contra, double tau_s);

struct TwinViews {
  Matrix view;
  Matrix view_plus;
};

struct NliTriple {
  Matrix premise;
  Matrix entailment;
  Matrix contradiction;
};

struct CompositeInputs {
  const Matrix* img = nullptr;
  const Matrix* txt = nullptr;
  const TwinViews* sentences = nullptr;
  const NliTriple* nli = nullptr;
};

struct TermValue {
  Term term;
  double value;   // unweighted
  double weight;
};

struct CompositeLoss {
  double value = 0.0;
  std::vector<TermValue> breakdown;  // fixed order, active terms only
  Matrix grad_img;
  Matrix grad_txt;
  Matrix grad_sentence;       // twin views, first
  Matrix grad_sentence_plus;  // twin views, second
  Matrix grad_premise;
  Matrix grad_entailment;
  Matrix grad_contradiction;
  double grad_logit_scale = 0.0;
  std::vector<std::string> warnings;

  std::optional<double> term_value(Term t) const;
};

CompositeLoss composite_loss(const ObjectiveConfig& config, double logit_scale, const CompositeInputs& inputs);

}  // namespace mmcl
