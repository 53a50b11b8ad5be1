#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "mmcl/data.hpp"
#include "mmcl/encoder.hpp"
#include "mmcl/tensor.hpp"

namespace mmcl {

// Mean squared distance between aligned rows. Range [0, 4] for unit rows.
double alignment(const Matrix& a, const Matrix& b);

// Batches above this size are estimated from kUniformityPairs seeded pairs.
inline constexpr std::size_t kExactUniformityLimit = 4096;
inline constexpr std::size_t kUniformityPairs = kExactUniformityLimit * kExactUniformityLimit;

// log mean_{i != j} exp(-2 |x_i - x_j|^2)
double uniformity(const Matrix& batch, std::uint64_t sample_seed = 0);

// |S - S^T|_F / N for the cross-modal cosine matrix S.
double asymmetry(const Matrix& img, const Matrix& txt);

// Mean of <x_i, x_j> over ordered pairs i != j.
double mean_pairwise_cosine(const Matrix& batch);

struct GeometryReport {
  double align = 0.0;
  double uniform_text = 0.0;
  double uniform_other = 0.0;
  double asymmetry = 0.0;
  double mean_pairwise_cosine = 0.0;  // text side
  double mean_pairwise_cosine_other = 0.0;
  std::size_t n_pairs = 0;

  nlohmann::json to_json() const;
};

GeometryReport geometry_report(const Matrix& text_embeddings, const Matrix& other_embeddings);

// Encodes every record without dropout. Each caption is paired with its own
// item's features.
GeometryReport geometry_report(const DualEncoder& model, const PairedDataset& dataset);

std::string geometry_csv_header();
std::string geometry_csv_row(const std::string& run_id, const std::string& variant, std::uint64_t seed,
                             const GeometryReport& report);

}  // namespace mmcl
