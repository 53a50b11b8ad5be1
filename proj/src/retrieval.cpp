#include "mmcl/retrieval.hpp"

#include <algorithm>
#include <numeric>

namespace mmcl {

void validate_relevance(const RelevanceMap& relevance, std::size_t n_queries, std::size_t n_gallery) {
  if (relevance.size() != n_queries) {
    throw Error(ErrorKind::DimensionMismatch, "relevance map covers " + std::to_string(relevance.size()) +
                                                  " queries, expected " + std::to_string(n_queries));
  }
  for (std::size_t q = 0; q < relevance.size(); ++q) {
    if (relevance[q].empty()) throw Error(ErrorKind::EmptyInput, "query " + std::to_string(q) + " has no relevant item", q);
    for (std::size_t g : relevance[q]) {
      if (g >= n_gallery) {
        throw Error(ErrorKind::DimensionMismatch,
                    "query " + std::to_string(q) + " lists gallery index " + std::to_string(g) + " out of range", q);
      }
    }
  }
}

Ranking rank_gallery(const Matrix& queries, const Matrix& gallery) {
  if (gallery.rows() == 0) throw Error(ErrorKind::EmptyInput, "gallery is empty");
  const Matrix scores = cosine_similarity_matrix(queries, gallery);
  Ranking ranking(queries.rows());
  parallel_for(queries.rows(), [&](std::size_t q) {
    auto& order = ranking[q];
    order.resize(gallery.rows());
    std::iota(order.begin(), order.end(), 0);
    const auto s = scores.row(q);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return s[a] > s[b] || (s[a] == s[b] && a < b);
    });
  });
  return ranking;
}

namespace {

bool contains(const std::vector<std::size_t>& set, std::size_t x) {
  return std::find(set.begin(), set.end(), x) != set.end();
}

std::size_t unique_count(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

}  // namespace

double recall_at_k(const Ranking& ranking, const RelevanceMap& relevance, std::size_t k) {
  if (k == 0) throw Error(ErrorKind::ConfigInvalid, "recall@k needs k >= 1");
  if (ranking.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < ranking.size(); ++q) {
    const std::size_t depth = std::min(k, ranking[q].size());
    for (std::size_t r = 0; r < depth; ++r) {
      if (contains(relevance[q], ranking[q][r])) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(ranking.size());
}

double map_at_10(const Ranking& ranking, const RelevanceMap& relevance) {
  if (ranking.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < ranking.size(); ++q) {
    const std::size_t depth = std::min<std::size_t>(10, ranking[q].size());
    double precision_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < depth; ++r) {
      if (contains(relevance[q], ranking[q][r])) {
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
      }
    }
    total += precision_sum / static_cast<double>(std::min<std::size_t>(unique_count(relevance[q]), 10));
  }
  return total / static_cast<double>(ranking.size());
}

std::string_view to_string(Direction d) {
  return d == Direction::TextRetrieval ? "text_retrieval" : "other_retrieval";
}

nlohmann::json RetrievalResult::to_json() const {
  return {{"direction", std::string(to_string(direction))},
          {"recall@1", recall_at.at(1)},
          {"recall@5", recall_at.at(5)},
          {"recall@10", recall_at.at(10)},
          {"map@10", map_at_10},
          {"n_queries", n_queries},
          {"n_gallery", n_gallery}};
}

RetrievalResult evaluate_retrieval(const Matrix& queries, const Matrix& gallery, const RelevanceMap& relevance,
                                   Direction direction) {
  validate_relevance(relevance, queries.rows(), gallery.rows());
  const Ranking ranking = rank_gallery(queries, gallery);
  RetrievalResult out;
  out.direction = direction;
  for (std::size_t k : {1, 5, 10}) out.recall_at[k] = recall_at_k(ranking, relevance, k);
  out.map_at_10 = map_at_10(ranking, relevance);
  out.n_queries = queries.rows();
  out.n_gallery = gallery.rows();
  return out;
}

nlohmann::json ZeroShotResult::to_json() const {
  nlohmann::json j = {{"n_items", predictions.size()}, {"n_classes", n_classes}, {"prompts_per_class", prompts_per_class}};
  j["accuracy"] = accuracy ? nlohmann::json(*accuracy) : nlohmann::json(nullptr);
  return j;
}

Matrix class_vectors(const std::vector<Matrix>& class_prompts) {
  if (class_prompts.empty()) throw Error(ErrorKind::EmptyClass, "no classes given");
  const std::size_t dim = class_prompts.front().cols();
  Matrix means(class_prompts.size(), dim);
  for (std::size_t c = 0; c < class_prompts.size(); ++c) {
    const Matrix& prompts = class_prompts[c];
    if (prompts.rows() == 0) throw Error(ErrorKind::EmptyClass, "class " + std::to_string(c) + " has no prompts", c);
    if (prompts.cols() != dim) {
      throw Error(ErrorKind::DimensionMismatch, "class " + std::to_string(c) + " prompt embeddings have the wrong width");
    }
    auto out = means.row(c);
    for (std::size_t r = 0; r < prompts.rows(); ++r) {
      const auto p = prompts.row(r);
      for (std::size_t i = 0; i < dim; ++i) out[i] += p[i];
    }
    for (double& x : out) x /= static_cast<double>(prompts.rows());
  }
  return l2_normalize_rows(means);
}

ZeroShotResult zero_shot_classify(const Matrix& items, const std::vector<Matrix>& class_prompts,
                                  const std::vector<std::size_t>* labels) {
  const Matrix classes = class_vectors(class_prompts);
  const Matrix scores = cosine_similarity_matrix(items, classes);
  ZeroShotResult out;
  out.n_classes = class_prompts.size();
  for (const auto& p : class_prompts) out.prompts_per_class = std::max(out.prompts_per_class, p.rows());
  out.predictions.resize(items.rows());
  for (std::size_t i = 0; i < items.rows(); ++i) {
    const auto s = scores.row(i);
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.size(); ++c) {
      if (s[c] > s[best]) best = c;
    }
    out.predictions[i] = best;
  }
  if (labels != nullptr) {
    if (labels->size() != items.rows()) {
      throw Error(ErrorKind::DimensionMismatch, "label count does not match item count");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < items.rows(); ++i) correct += out.predictions[i] == (*labels)[i] ? 1 : 0;
    out.accuracy = items.rows() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(items.rows());
  }
  return out;
}

}  // namespace mmcl
