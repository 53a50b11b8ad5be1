#include "mmcl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <string>
#include <thread>

namespace mmcl {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ZeroRow: return "ZeroRow";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::InvalidRate: return "InvalidRate";
    case ErrorKind::UnknownToken: return "UnknownToken";
    case ErrorKind::TraceMismatch: return "TraceMismatch";
    case ErrorKind::BatchTooSmall: return "BatchTooSmall";
    case ErrorKind::MissingInput: return "MissingInput";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::EmptyClass: return "EmptyClass";
    case ErrorKind::InvalidSchedule: return "InvalidSchedule";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::OverlapLeak: return "OverlapLeak";
    case ErrorKind::SpecInvalid: return "SpecInvalid";
    case ErrorKind::NeedTwoClasses: return "NeedTwoClasses";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::MissingPlaceholder: return "MissingPlaceholder";
    case ErrorKind::ConfigInvalid: return "ConfigInvalid";
    case ErrorKind::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorKind::NumericFailure: return "NumericFailure";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message, std::optional<std::size_t> index)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message),
      kind_(kind),
      index_(index) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<std::vector<double>> copy;
  for (const auto& r : rows) copy.emplace_back(r);
  return from_rows(copy);
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols_) {
      throw Error(ErrorKind::DimensionMismatch,
                  "ragged rows: row " + std::to_string(r) + " has " +
                      std::to_string(rows[r].size()) + " columns, expected " +
                      std::to_string(m.cols_));
    }
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Rng

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t Rng::next_u64() {
  ++draws_;
  return engine_();
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller; u1 is shifted into (0, 1] so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw Error(ErrorKind::EmptyInput, "Rng::index on empty range");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<std::size_t>(x % bound);
}

Rng Rng::fork(std::uint64_t salt) {
  // splitmix64 finalizer over (next draw, salt)
  std::uint64_t z = next_u64() ^ (salt * 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return Rng(z ^ (z >> 31));
}

// ---------------------------------------------------------------------------
// Threading

namespace {

std::atomic<std::size_t> g_thread_cap{0};

std::size_t default_threads() {
  if (const char* env = std::getenv("RUN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace

std::size_t max_threads() {
  std::size_t cap = g_thread_cap.load();
  if (cap == 0) {
    cap = default_threads();
    g_thread_cap.store(cap);
  }
  return cap;
}

void set_max_threads(std::size_t n) { g_thread_cap.store(std::max<std::size_t>(1, n)); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(max_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Linear algebra

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

namespace {

void require_dims(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw Error(ErrorKind::DimensionMismatch,
                std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                    std::to_string(b.cols()));
  }
}

// Rows above this are split across threads.
constexpr std::size_t kParallelRows = 256;

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.rows(), "matmul", a, b);
  Matrix out(a.rows(), b.cols());
  auto body = [&](std::size_t i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto br = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  };
  if (a.rows() >= kParallelRows) {
    parallel_for(a.rows(), body);
  } else {
    for (std::size_t i = 0; i < a.rows(); ++i) body(i);
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.cols(), "matmul_nt", a, b);
  Matrix out(a.rows(), b.rows());
  auto body = [&](std::size_t i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(ar, b.row(j));
  };
  if (a.rows() >= kParallelRows) {
    parallel_for(a.rows(), body);
  } else {
    for (std::size_t i = 0; i < a.rows(); ++i) body(i);
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require_dims(a.rows() == b.rows(), "matmul_tn", a, b);
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto ar = a.row(k);
    const auto br = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ar[i];
      if (aki == 0.0) continue;
      auto o = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

void axpy(Matrix& a, double scale, const Matrix& b) {
  require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "axpy", a, b);
  auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += scale * bv[i];
}

Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double norm = l2_norm(m.row(r));
    if (!(norm > 1e-12)) {
      throw Error(ErrorKind::ZeroRow, "row " + std::to_string(r) + " has zero norm", r);
    }
    for (double& x : out.row(r)) x /= norm;
  }
  return out;
}

Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.cols(), "cosine_similarity_matrix", a, b);
  return matmul_nt(a, b);
}

Matrix log_softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto in = m.row(r);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (double x : in) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out = log_softmax_rows(m);
  for (double& x : out.values()) x = std::exp(x);
  return out;
}

Matrix dropout_mask(Rng& rng, std::size_t rows, std::size_t cols, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw Error(ErrorKind::InvalidRate, "dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  Matrix mask(rows, cols, 1.0);
  if (rate == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& x : mask.values()) x = rng.uniform() < rate ? 0.0 : keep_scale;
  return mask;
}

}  // namespace mmcl
