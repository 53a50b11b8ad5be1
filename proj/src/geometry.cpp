#include "mmcl/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace mmcl {

double alignment(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0) throw Error(ErrorKind::EmptyInput, "alignment of an empty batch");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::DimensionMismatch, "alignment needs equally shaped batches");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto x = a.row(i);
    const auto y = b.row(i);
    for (std::size_t c = 0; c < x.size(); ++c) total += (x[c] - y[c]) * (x[c] - y[c]);
  }
  return total / static_cast<double>(a.rows());
}

namespace {

double squared_distance(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t c = 0; c < x.size(); ++c) s += (x[c] - y[c]) * (x[c] - y[c]);
  return s;
}

}  // namespace

double uniformity(const Matrix& batch, std::uint64_t sample_seed) {
  const std::size_t n = batch.rows();
  if (n < 2) throw Error(ErrorKind::BatchTooSmall, "uniformity needs at least 2 rows");

  if (n <= kExactUniformityLimit) {
    // Each unordered pair stands for both orderings.
    std::vector<double> row_sums(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
      double s = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) s += std::exp(-2.0 * squared_distance(batch.row(i), batch.row(j)));
      row_sums[i] = s;
    });
    const double total = std::accumulate(row_sums.begin(), row_sums.end(), 0.0);
    return std::log(total / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1)));
  }

  // Fixed chunking with per-chunk streams keeps the estimate independent of threads.
  constexpr std::size_t kChunks = kExactUniformityLimit;
  constexpr std::size_t kPerChunk = kUniformityPairs / kChunks;
  std::vector<double> chunk_sums(kChunks, 0.0);
  parallel_for(kChunks, [&](std::size_t c) {
    Rng rng = Rng(sample_seed).fork(c);
    double s = 0.0;
    for (std::size_t p = 0; p < kPerChunk; ++p) {
      const std::size_t i = rng.index(n);
      std::size_t j = rng.index(n - 1);
      if (j >= i) ++j;
      s += std::exp(-2.0 * squared_distance(batch.row(i), batch.row(j)));
    }
    chunk_sums[c] = s;
  });
  const double total = std::accumulate(chunk_sums.begin(), chunk_sums.end(), 0.0);
  return std::log(total / static_cast<double>(kUniformityPairs));
}

double asymmetry(const Matrix& img, const Matrix& txt) {
  if (img.rows() != txt.rows() || img.cols() != txt.cols()) {
    throw Error(ErrorKind::DimensionMismatch, "asymmetry needs equally shaped batches");
  }
  const std::size_t n = img.rows();
  if (n == 0) throw Error(ErrorKind::EmptyInput, "asymmetry of an empty batch");
  const Matrix sim = cosine_similarity_matrix(img, txt);
  double sq = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      const double d = sim(j, k) - sim(k, j);
      sq += d * d;
    }
  }
  return std::sqrt(sq) / static_cast<double>(n);
}

double mean_pairwise_cosine(const Matrix& batch) {
  const std::size_t n = batch.rows();
  if (n < 2) throw Error(ErrorKind::BatchTooSmall, "mean_pairwise_cosine needs at least 2 rows");
  std::vector<double> sum(batch.cols(), 0.0);
  double self = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = batch.row(i);
    for (std::size_t c = 0; c < x.size(); ++c) sum[c] += x[c];
    self += dot(x, x);
  }
  return (dot(sum, sum) - self) / (static_cast<double>(n) * static_cast<double>(n - 1));
}

nlohmann::json GeometryReport::to_json() const {
  return {{"align", align},
          {"uniform_text", uniform_text},
          {"uniform_other", uniform_other},
          {"asymmetry", asymmetry},
          {"mean_pairwise_cosine", mean_pairwise_cosine},
          {"mean_pairwise_cosine_other", mean_pairwise_cosine_other},
          {"n_pairs", n_pairs}};
}

GeometryReport geometry_report(const Matrix& text_embeddings, const Matrix& other_embeddings) {
  GeometryReport r;
  r.n_pairs = text_embeddings.rows();
  r.align = alignment(other_embeddings, text_embeddings);
  r.uniform_text = uniformity(text_embeddings);
  r.uniform_other = uniformity(other_embeddings);
  r.asymmetry = mmcl::asymmetry(other_embeddings, text_embeddings);
  r.mean_pairwise_cosine = mmcl::mean_pairwise_cosine(text_embeddings);
  r.mean_pairwise_cosine_other = mmcl::mean_pairwise_cosine(other_embeddings);
  return r;
}

GeometryReport geometry_report(const DualEncoder& model, const PairedDataset& dataset) {
  if (dataset.size() == 0) throw Error(ErrorKind::EmptyDataset, "geometry report over an empty dataset");
  const EmbeddingBatch text = model.encode_texts(dataset.captions);
  const EmbeddingBatch other = model.encode_features(dataset.features);
  return geometry_report(text.matrix, other.matrix);
}

std::string geometry_csv_header() { return "run_id,variant,seed,align,uniform_text,uniform_other,asymmetry,mean_cos"; }

std::string geometry_csv_row(const std::string& run_id, const std::string& variant, std::uint64_t seed,
                             const GeometryReport& report) {
  char buf[256];
  std::snprintf(buf, sizeof buf, ",%llu,%.17g,%.17g,%.17g,%.17g,%.17g", static_cast<unsigned long long>(seed),
                report.align, report.uniform_text, report.uniform_other, report.asymmetry,
                report.mean_pairwise_cosine);
  return run_id + "," + variant + buf;
}

}  // namespace mmcl
