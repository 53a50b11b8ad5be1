#pragma once

// Brute-force reference implementations used only by tests. They evaluate the
// defining formulas term by term and share no code path with the library
// beyond the Matrix container and Rng.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "mmcl/tensor.hpp"

namespace mmcl::oracle {

inline double dot_rows(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) s += a(i, c) * b(j, c);
  return s;
}

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& x : m.values()) x = scale * rng.normal();
  return m;
}

inline Matrix random_unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m = random_matrix(rng, rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0.0;
    for (double x : m.row(r)) n += x * x;
    n = std::sqrt(n);
    for (double& x : m.row(r)) x /= n;
  }
  return m;
}

// Unit directions scaled to a sphere of the given radius. Softmax losses are
// gradient-checked at radius 0.5: on the unit sphere their logits reach 1/tau
// = 20 and central differences lose the small entries to rounding.
// The quartic cyclic losses are checked at radius 2, where gradients grow 8x
// while the h^2 truncation error of central differences grows only 2x.
inline Matrix random_sphere_rows(Rng& rng, std::size_t rows, std::size_t cols, double radius) {
  Matrix m = random_unit_rows(rng, rows, cols);
  for (double& x : m.values()) x *= radius;
  return m;
}

// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
inline Matrix random_rotation(Rng& rng, std::size_t d) {
  Matrix q = random_matrix(rng, d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double p = dot_rows(q, i, q, j);
      for (std::size_t c = 0; c < d; ++c) q(i, c) -= p * q(j, c);
    }
    const double n = std::sqrt(dot_rows(q, i, q, i));
    for (std::size_t c = 0; c < d; ++c) q(i, c) /= n;
  }
  return q;
}

// x * Q for row vectors.
inline Matrix rotate(const Matrix& x, const Matrix& q) {
  Matrix out(x.rows(), q.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < q.cols(); ++c)
      for (std::size_t k = 0; k < x.cols(); ++k) out(r, c) += x(r, k) * q(k, c);
  return out;
}

inline double neg_log_ratio(double positive_logit, const std::vector<double>& all_logits) {
  double denom = 0.0;
  for (double l : all_logits) denom += std::exp(l);
  return -std::log(std::exp(positive_logit) / denom);
}

inline double contrastive(const Matrix& img, const Matrix& txt, double logit_scale) {
  const std::size_t n = img.rows();
  const double s = std::exp(logit_scale);
  double per_image = 0.0, per_text = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> row, col;
    for (std::size_t k = 0; k < n; ++k) {
      row.push_back(s * dot_rows(img, j, txt, k));
      col.push_back(s * dot_rows(img, k, txt, j));
    }
    per_image += neg_log_ratio(s * dot_rows(img, j, txt, j), row);
    per_text += neg_log_ratio(s * dot_rows(img, j, txt, j), col);
  }
  return 0.5 * (per_image / n + per_text / n);
}

inline double cross_cyclic(const Matrix& img, const Matrix& txt) {
  const std::size_t n = img.rows();
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < n; ++k) {
      const double d = dot_rows(img, j, txt, k) - dot_rows(img, k, txt, j);
      total += d * d;
    }
  return total / static_cast<double>(n * n);
}

inline double in_modal_cyclic(const Matrix& img, const Matrix& txt) {
  const std::size_t n = img.rows();
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < n; ++k) {
      const double d = dot_rows(img, j, img, k) - dot_rows(txt, k, txt, j);
      total += d * d;
    }
  return total / static_cast<double>(n * n);
}

inline double simcse(const Matrix& t, const Matrix& tp, double tau) {
  const std::size_t n = t.rows();
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> logits;
    for (std::size_t k = 0; k < n; ++k) logits.push_back(dot_rows(t, j, tp, k) / tau);
    total += neg_log_ratio(dot_rows(t, j, tp, j) / tau, logits);
  }
  return total / static_cast<double>(n);
}

inline double nli(const Matrix& p, const Matrix& e, const Matrix& c, double tau) {
  const std::size_t n = p.rows();
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> logits;
    for (std::size_t k = 0; k < n; ++k) {
      logits.push_back(dot_rows(p, j, e, k) / tau);
      logits.push_back(dot_rows(p, j, c, k) / tau);
    }
    total += neg_log_ratio(dot_rows(p, j, e, j) / tau, logits);
  }
  return total / static_cast<double>(n);
}

// Central differences of f w.r.t. every entry of m (m is restored).
inline Matrix numeric_gradient(Matrix& m, const std::function<double()>& f, double h = 1e-5) {
  Matrix g(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double saved = m.values()[i];
    m.values()[i] = saved + h;
    const double plus = f();
    m.values()[i] = saved - h;
    const double minus = f();
    m.values()[i] = saved;
    g.values()[i] = (plus - minus) / (2.0 * h);
  }
  return g;
}

inline double max_relative_error(const Matrix& analytic, const Matrix& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic.values()[i];
    const double n = numeric.values()[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}));
  }
  return worst;
}

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

// Full sort by (descending score, ascending index) with an explicit O(n^2)
// selection instead of std::sort.
inline std::vector<std::vector<std::size_t>> brute_rank(const Matrix& q, const Matrix& g) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::vector<bool> used(g.rows(), false);
    std::vector<std::size_t> order;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      std::size_t best = g.rows();
      double best_score = 0.0;
      for (std::size_t j = 0; j < g.rows(); ++j) {
        if (used[j]) continue;
        const double s = dot_rows(q, i, g, j);
        if (best == g.rows() || s > best_score) {
          best = j;
          best_score = s;
        }
      }
      used[best] = true;
      order.push_back(best);
    }
    out.push_back(order);
  }
  return out;
}

inline double brute_recall(const std::vector<std::vector<std::size_t>>& ranking,
                           const std::vector<std::vector<std::size_t>>& relevant, std::size_t k) {
  double hits = 0.0;
  for (std::size_t q = 0; q < ranking.size(); ++q) {
    bool hit = false;
    for (std::size_t g : relevant[q]) {
      const auto pos = std::find(ranking[q].begin(), ranking[q].end(), g) - ranking[q].begin();
      if (static_cast<std::size_t>(pos) < k) hit = true;
    }
    hits += hit ? 1.0 : 0.0;
  }
  return hits / static_cast<double>(ranking.size());
}

inline double brute_map10(const std::vector<std::vector<std::size_t>>& ranking,
                          const std::vector<std::vector<std::size_t>>& relevant) {
  double total = 0.0;
  for (std::size_t q = 0; q < ranking.size(); ++q) {
    // Ranks (1-based) of every relevant item, then AP over those within 10.
    std::vector<std::size_t> ranks;
    for (std::size_t g : relevant[q]) {
      ranks.push_back(static_cast<std::size_t>(std::find(ranking[q].begin(), ranking[q].end(), g) -
                                               ranking[q].begin()) + 1);
    }
    std::sort(ranks.begin(), ranks.end());
    double ap = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      if (ranks[i] <= 10) ap += static_cast<double>(i + 1) / static_cast<double>(ranks[i]);
    }
    total += ap / static_cast<double>(std::min<std::size_t>(relevant[q].size(), 10));
  }
  return total / static_cast<double>(ranking.size());
}

inline std::vector<std::size_t> brute_zero_shot(const Matrix& items, const std::vector<Matrix>& prompts) {
  std::vector<std::vector<double>> centers;
  for (const auto& p : prompts) {
    std::vector<double> c(p.cols(), 0.0);
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t k = 0; k < p.cols(); ++k) c[k] += p(r, k) / static_cast<double>(p.rows());
    double n = 0.0;
    for (double x : c) n += x * x;
    for (double& x : c) x /= std::sqrt(n);
    centers.push_back(c);
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.rows(); ++i) {
    std::size_t best = 0;
    double best_score = -2.0;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < items.cols(); ++k) s += items(i, k) * centers[c][k];
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace mmcl::oracle
