#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mmcl/tensor.hpp"

namespace mmcl {

using Ranking = std::vector<std::vector<std::size_t>>;

// For every query, the gallery indices that count as hits.
using RelevanceMap = std::vector<std::vector<std::size_t>>;

void validate_relevance(const RelevanceMap& relevance, std::size_t n_queries, std::size_t n_gallery);

// Gallery indices per query by descending cosine; ties go to the lower index.
Ranking rank_gallery(const Matrix& queries, const Matrix& gallery);

double recall_at_k(const Ranking& ranking, const RelevanceMap& relevance, std::size_t k);

// AP@10 = (sum of precision@r over relevant hits at r <= 10) / min(|relevant|, 10).
double map_at_10(const Ranking& ranking, const RelevanceMap& relevance);

enum class Direction {
  TextRetrieval,   // non-text item queries, caption gallery
  OtherRetrieval,  // caption queries, non-text item gallery
};

std::string_view to_string(Direction d);

struct RetrievalResult {
  Direction direction = Direction::TextRetrieval;
  std::map<std::size_t, double> recall_at;  // keys 1, 5, 10
  double map_at_10 = 0.0;
  std::size_t n_queries = 0;
  std::size_t n_gallery = 0;

  nlohmann::json to_json() const;
};

RetrievalResult evaluate_retrieval(const Matrix& queries, const Matrix& gallery, const RelevanceMap& relevance,
                                   Direction direction);

struct ZeroShotResult {
  std::vector<std::size_t> predictions;
  std::optional<double> accuracy;
  std::size_t n_classes = 0;
  std::size_t prompts_per_class = 0;  // max over classes

  nlohmann::json to_json() const;
};

// Unit-norm mean of each class's prompt embeddings.
Matrix class_vectors(const std::vector<Matrix>& class_prompts);

ZeroShotResult zero_shot_classify(const Matrix& items, const std::vector<Matrix>& class_prompts,
                                  const std::vector<std::size_t>* labels = nullptr);

}  // namespace mmcl
