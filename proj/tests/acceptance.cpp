// Acceptance harness: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmcl/cli.hpp"
#include "mmcl/data.hpp"
#include "mmcl/geometry.hpp"
#include "mmcl/objectives.hpp"
#include "mmcl/retrieval.hpp"
#include "mmcl/trainer.hpp"
#include "oracles.hpp"

using namespace mmcl;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-5;
constexpr double kUniformityTarget = -3.94;
constexpr double kUniformityTolerance = 0.08;
constexpr double kDecompositionTolerance = 1e-12;
constexpr double kChanceMultiple = 10.0;
constexpr std::size_t kTrendSeeds = 5;

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

bool report(int id, const std::string& name, double budget_s, const std::function<Outcome()>& body) {
  const auto start = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  if (budget_s > 0 && secs > budget_s) {
    o.pass = false;
    o.detail += " (over the " + std::to_string(static_cast<int>(budget_s)) + " s budget)";
  }
  std::printf("criterion %d %s: %s  [%.1f s]  %s\n", id, o.pass ? "PASS" : "FAIL", name.c_str(), secs,
              o.detail.c_str());
  std::fflush(stdout);
  return o.pass;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// 1. gradients

constexpr double kSoftmaxRadius = 0.5;
constexpr double kCyclicRadius = 2.0;

using WorstByName = std::map<std::string, double>;

void check_loss_gradients(Rng& rng, std::size_t n, std::size_t d, WorstByName& worst) {
  Matrix a = oracle::random_sphere_rows(rng, n, d, kSoftmaxRadius);
  Matrix b = oracle::random_sphere_rows(rng, n, d, kSoftmaxRadius);
  Matrix c = oracle::random_sphere_rows(rng, n, d, kSoftmaxRadius);
  Matrix ua = oracle::random_sphere_rows(rng, n, d, kCyclicRadius);
  Matrix ub = oracle::random_sphere_rows(rng, n, d, kCyclicRadius);
  double l = LogitScale::kMax * rng.uniform();
  auto track = [&](const char* name, const Matrix& analytic, Matrix& input, const std::function<double()>& f) {
    double& w = worst[name];
    w = std::max(w, oracle::max_relative_error(analytic, oracle::numeric_gradient(input, f)));
  };

  const LossTerm contra = contrastive_loss(a, b, l);
  auto f_contra = [&] { return contrastive_loss(a, b, l).value; };
  track("contrastive", contra.grad_a, a, f_contra);
  track("contrastive", contra.grad_b, b, f_contra);
  Matrix scale(1, 1, l);
  auto f_scale = [&] { return contrastive_loss(a, b, scale(0, 0)).value; };
  track("contrastive", Matrix(1, 1, contra.grad_logit_scale), scale, f_scale);

  const LossTerm cc = cross_cyclic_loss(ua, ub);
  auto f_cc = [&] { return cross_cyclic_loss(ua, ub).value; };
  track("c_cyclic", cc.grad_a, ua, f_cc);
  track("c_cyclic", cc.grad_b, ub, f_cc);

  const LossTerm ic = in_modal_cyclic_loss(ua, ub);
  auto f_ic = [&] { return in_modal_cyclic_loss(ua, ub).value; };
  track("i_cyclic", ic.grad_a, ua, f_ic);
  track("i_cyclic", ic.grad_b, ub, f_ic);

  const double tau = ObjectiveConfig{}.tau_s;
  const LossTerm s = simcse_unsup_loss(a, b, tau);
  auto f_s = [&] { return simcse_unsup_loss(a, b, tau).value; };
  track("simcse", s.grad_a, a, f_s);
  track("simcse", s.grad_b, b, f_s);

  const LossTerm nl = nli_sup_loss(a, b, c, tau);
  auto f_n = [&] { return nli_sup_loss(a, b, c, tau).value; };
  track("nli", nl.grad_a, a, f_n);
  track("nli", nl.grad_b, b, f_n);
  track("nli", nl.grad_c, c, f_n);
}

EmbeddingLoss contrastive_against(const Matrix& target, double logit_scale) {
  return [target, logit_scale](const Matrix& e) {
    const LossTerm t = contrastive_loss(e, target, logit_scale);
    return ScalarAndGrad{t.value, t.grad_a};
  };
}

void check_encoder_gradients(Rng& rng, std::size_t n, std::size_t d, WorstByName& worst) {
  const std::size_t embed = 4;
  const Matrix target = oracle::random_unit_rows(rng, n, embed);

  const EncoderParams other = EncoderParams::random({d, 2 * d, embed}, 0.0, rng);
  const Matrix features = oracle::random_matrix(rng, n, d);
  double& wo = worst["other_encoder"];
  wo = std::max(wo, gradient_check(other, features, contrastive_against(target, 1.0)));

  const std::size_t vocab = 12;
  const Matrix table = oracle::random_matrix(rng, vocab, d);
  const EncoderParams text = EncoderParams::random({d, 2 * d, embed}, 0.1, rng);
  TextInput input{{}, vocab};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> ids;
    const std::size_t len = 1 + rng.index(4);
    for (std::size_t k = 0; k < len; ++k) ids.push_back(rng.index(vocab));
    input.token_ids.push_back(ids);
  }
  double& wt = worst["text_encoder"];
  wt = std::max(wt, gradient_check(text, table, input, contrastive_against(target, 1.0)));
}

Outcome criterion_gradients() {
  WorstByName worst;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (std::size_t n : {2u, 5u, 8u}) {
      for (std::size_t d : {4u, 16u}) {
        Rng rng(seed * 1000 + n * 10 + d);
        check_loss_gradients(rng, n, d, worst);
        check_encoder_gradients(rng, n, d, worst);
      }
    }
  }
  bool pass = true;
  std::string detail = "max rel err (tol " + fmt("%.0e", kGradTolerance) + "):";
  for (const auto& [name, w] : worst) {
    pass = pass && w < kGradTolerance;
    detail += " " + name + " " + fmt("%.2e", w);
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 2. metric oracles

Outcome criterion_metrics() {
  std::size_t mismatches = 0;
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    Rng rng(500 + inst);
    const std::size_t n = 50, d = 8;
    const Matrix q = oracle::random_unit_rows(rng, n, d);
    Matrix g = oracle::random_unit_rows(rng, n, d);
    // A few duplicated gallery rows exercise the tie-break rule.
    for (int t = 0; t < 3; ++t) {
      const std::size_t src = rng.index(n), dst = rng.index(n);
      for (std::size_t c = 0; c < d; ++c) g(dst, c) = g(src, c);
    }
    RelevanceMap rel(n);
    for (auto& r : rel) {
      const std::size_t m = 1 + rng.index(15);
      while (r.size() < m) {
        const std::size_t cand = rng.index(n);
        if (std::find(r.begin(), r.end(), cand) == r.end()) r.push_back(cand);
      }
    }
    const Ranking ranking = rank_gallery(q, g);
    const auto brute = oracle::brute_rank(q, g);
    if (ranking != brute) ++mismatches;
    for (std::size_t k : {1u, 5u, 10u}) {
      if (recall_at_k(ranking, rel, k) != oracle::brute_recall(brute, rel, k)) ++mismatches;
    }
    if (map_at_10(ranking, rel) != oracle::brute_map10(brute, rel)) ++mismatches;

    std::vector<Matrix> prompts;
    for (int c = 0; c < 5; ++c) prompts.push_back(oracle::random_unit_rows(rng, 10, d));
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.index(5);
    const ZeroShotResult zs = zero_shot_classify(q, prompts, &labels);
    const auto expect = oracle::brute_zero_shot(q, prompts);
    if (zs.predictions != expect) ++mismatches;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += expect[i] == labels[i] ? 1 : 0;
    if (*zs.accuracy != static_cast<double>(correct) / static_cast<double>(n)) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 20 instances of 50x50"};
}

// ---------------------------------------------------------------------------
// 3. uniformity calibration

Outcome criterion_uniformity() {
  Rng rng(2024);
  const double random_u = uniformity(oracle::random_unit_rows(rng, 10000, 128));
  const double collapsed = uniformity(Matrix(100, 128, 1.0 / std::sqrt(128.0)));
  const double antipodal = uniformity(Matrix::from_rows({{1, 0}, {-1, 0}}));
  const bool pass = std::abs(random_u - kUniformityTarget) <= kUniformityTolerance && collapsed == 0.0 &&
                    antipodal == -8.0;
  return {pass, "random " + fmt("%.4f", random_u) + " (target -3.94 +/- 0.08), collapsed " + fmt("%g", collapsed) +
                    ", antipodal " + fmt("%.17g", antipodal)};
}

// ---------------------------------------------------------------------------
// 4-7. training trends

GenSpec trend_spec() {
  GenSpec s;
  s.n_classes = 8;
  s.pairs_per_class = 64;
  s.latent_dim = 4;
  s.feature_dim = 32;
  s.vocab_size = 256;
  s.caption_len = 12;
  s.noise_sigma = 0.1;
  s.seed = 7;
  return s;
}

TrainConfig trend_config(Variant v, std::uint64_t seed) {
  TrainConfig c;  // 200 epochs, batch 64, peak lr 5e-4, warmup 100
  c.objective.variant = v;
  c.seed = seed;
  return c;
}

struct TrendRun {
  Variant variant;
  std::uint64_t seed;
  GeometryReport geometry;
  PairedEvaluation eval;
  bool scale_in_range = true;
  bool finite = true;
};

struct TrendData {
  std::vector<TrendRun> runs;
  std::size_t val_items = 0;
  std::size_t val_captions = 0;
  double seconds = 0.0;
};

const TrendData& trend_runs() {
  static const TrendData data = [] {
    const auto start = Clock::now();
    const GenSpec spec = trend_spec();
    const GeneratedData gen = generate(spec);
    const TrainingSet set{gen.train, {}};
    std::vector<PairedRecord> all = gen.train;
    all.insert(all.end(), gen.val.begin(), gen.val.end());
    const PairedDataset all_set = PairedDataset::from_records(all);
    const PairedDataset val_set = PairedDataset::from_records(gen.val);

    TrendData out;
    out.val_items = val_set.item_count();
    out.val_captions = val_set.size();
    for (Variant v : {Variant::CLIP, Variant::CLIPs, Variant::CyCLIP, Variant::CyCLIPs})
      for (std::uint64_t s = 1; s <= kTrendSeeds; ++s) out.runs.push_back({v, s, {}, {}});

    parallel_for(out.runs.size(), [&](std::size_t i) {
      TrendRun& run = out.runs[i];
      const TrainResult r = train(trend_config(run.variant, run.seed), set, gen.val);
      for (const auto& step : r.steps) {
        if (step.logit_scale < LogitScale::kMin || step.logit_scale > LogitScale::kMax) run.scale_in_range = false;
        if (!std::isfinite(step.composite)) run.finite = false;
        for (const auto& t : step.terms)
          if (!std::isfinite(t.value)) run.finite = false;
      }
      run.geometry = geometry_report(r.best, all_set);
      run.eval = evaluate_pairs(r.best, val_set);
    });
    out.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return out;
  }();
  return data;
}

double median_of(Variant v, double GeometryReport::*field) {
  std::vector<double> xs;
  for (const auto& r : trend_runs().runs)
    if (r.variant == v) xs.push_back(r.geometry.*field);
  return median(xs);
}

Outcome criterion_trade_off() {
  const auto& runs = trend_runs();
  const double u_clip = median_of(Variant::CLIP, &GeometryReport::uniform_text);
  const double u_clips = median_of(Variant::CLIPs, &GeometryReport::uniform_text);
  const double a_clip = median_of(Variant::CLIP, &GeometryReport::align);
  const double a_clips = median_of(Variant::CLIPs, &GeometryReport::align);
  const double u_cy = median_of(Variant::CyCLIP, &GeometryReport::uniform_text);
  const double u_cys = median_of(Variant::CyCLIPs, &GeometryReport::uniform_text);
  const double a_cy = median_of(Variant::CyCLIP, &GeometryReport::align);
  const double a_cys = median_of(Variant::CyCLIPs, &GeometryReport::align);
  const bool pass = u_clips < u_clip && a_clips > a_clip && u_cys < u_cy && a_cys > a_cy;
  std::string d = "uniform_text CLIP " + fmt("%.4f", u_clip) + " CLIPs " + fmt("%.4f", u_clips) + "; align CLIP " +
                  fmt("%.4f", a_clip) + " CLIPs " + fmt("%.4f", a_clips) + "; uniform_text CyCLIP " +
                  fmt("%.4f", u_cy) + " CyCLIPs " + fmt("%.4f", u_cys) + "; align CyCLIP " + fmt("%.4f", a_cy) +
                  " CyCLIPs " + fmt("%.4f", a_cys) + "; " + std::to_string(runs.runs.size()) + " runs in " +
                  fmt("%.0f", runs.seconds) + " s";
  if (runs.seconds > 15 * 60) {
    return {false, d + " (over the 900 s budget)"};
  }
  return {pass, d};
}

Outcome criterion_symmetry() {
  const double clip = median_of(Variant::CLIP, &GeometryReport::asymmetry);
  const double cy = median_of(Variant::CyCLIP, &GeometryReport::asymmetry);
  return {cy < clip, "median asymmetry CLIP " + fmt("%.5f", clip) + ", CyCLIP " + fmt("%.5f", cy)};
}

Outcome criterion_other_space() {
  const double ut_cy = median_of(Variant::CyCLIP, &GeometryReport::uniform_text);
  const double ut_cys = median_of(Variant::CyCLIPs, &GeometryReport::uniform_text);
  const double uo_cy = median_of(Variant::CyCLIP, &GeometryReport::uniform_other);
  const double uo_cys = median_of(Variant::CyCLIPs, &GeometryReport::uniform_other);
  const bool text_lower = ut_cys < ut_cy;
  const bool other_lower = uo_cys < uo_cy;
  const bool pass = text_lower == other_lower && ut_cys != ut_cy && uo_cys != uo_cy;
  return {pass, "uniform_other CyCLIP " + fmt("%.4f", uo_cy) + " CyCLIPs " + fmt("%.4f", uo_cys) +
                    " (text ordering: CyCLIPs " + (text_lower ? "lower" : "higher") + ")"};
}

Outcome criterion_sanity() {
  const auto& data = trend_runs();
  const double chance_text = 1.0 / static_cast<double>(data.val_captions);
  const double chance_other = 1.0 / static_cast<double>(data.val_items);
  bool pass = true;
  double min_text = 1.0, min_other = 1.0;
  for (const auto& r : data.runs) {
    const double t = r.eval.text.recall_at.at(1);
    const double o = r.eval.other.recall_at.at(1);
    min_text = std::min(min_text, t);
    min_other = std::min(min_other, o);
    if (!r.scale_in_range || !r.finite) pass = false;
    if (t < kChanceMultiple * chance_text || o < kChanceMultiple * chance_other) pass = false;
  }
  std::size_t bad_scale = 0, bad_loss = 0;
  for (const auto& r : data.runs) {
    bad_scale += r.scale_in_range ? 0 : 1;
    bad_loss += r.finite ? 0 : 1;
  }
  return {pass, "min val R@1 text " + fmt("%.3f", min_text) + " other " + fmt("%.3f", min_other) + " (need " +
                    fmt("%.3f", kChanceMultiple * chance_text) + " / " + fmt("%.3f", kChanceMultiple * chance_other) +
                    "); runs with scale out of range " + std::to_string(bad_scale) + ", non-finite loss " +
                    std::to_string(bad_loss)};
}

// ---------------------------------------------------------------------------
// 8. determinism of cmd_train

Outcome criterion_determinism() {
  const fs::path root = fs::temp_directory_path() / "mmcl_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto spec_path = (root / "spec.json").string();
  const auto cfg_path = (root / "config.json").string();
  write_file_atomic(spec_path, trend_spec().to_json().dump());
  write_file_atomic(cfg_path, trend_config(Variant::CyCLIPs, 3).to_json().dump());

  std::ostringstream out, err;
  if (run_cli({"gen", "--spec", spec_path, "--out", (root / "data").string()}, out, err) != kExitOk) {
    return {false, "gen failed: " + err.str()};
  }
  const std::size_t saved = max_threads();
  const fs::path a = root / "run_a";
  const fs::path b = root / "run_b";
  int codes = 0;
  set_max_threads(saved);
  codes |= run_cli({"train", "--config", cfg_path, "--data", (root / "data").string(), "--out", a.string()}, out, err);
  set_max_threads(1);
  codes |= run_cli({"train", "--config", cfg_path, "--data", (root / "data").string(), "--out", b.string()}, out, err);
  set_max_threads(saved);
  if (codes != 0) return {false, "train failed: " + err.str()};

  bool same = true;
  std::string detail;
  for (const char* f : {"history.jsonl", "best.ckpt.json"}) {
    const std::string x = read_file((a / f).string());
    const std::string y = read_file((b / f).string());
    same = same && x == y && !x.empty();
    detail += std::string(f) + (x == y ? " identical" : " DIFFERS") + " (" + std::to_string(x.size()) + " bytes); ";
  }
  fs::remove_all(root);
  return {same, detail + "threads " + std::to_string(saved) + " vs 1"};
}

// ---------------------------------------------------------------------------
// 9. composite decomposition

Outcome criterion_decomposition() {
  double worst = 0.0;
  std::size_t checked = 0;
  for (Variant v : kAllVariants) {
    for (std::uint64_t batch = 0; batch < 10; ++batch) {
      Rng rng(900 + 17 * batch + static_cast<std::uint64_t>(v));
      const std::size_t n = 2 + rng.index(15), d = 2 + rng.index(31);
      const Matrix img = oracle::random_unit_rows(rng, n, d), txt = oracle::random_unit_rows(rng, n, d);
      const TwinViews twins{oracle::random_unit_rows(rng, n, d), oracle::random_unit_rows(rng, n, d)};
      const NliTriple nli{oracle::random_unit_rows(rng, n, d), oracle::random_unit_rows(rng, n, d),
                          oracle::random_unit_rows(rng, n, d)};
      ObjectiveConfig c;
      c.variant = v;
      if (batch % 2 == 1) {
        c.lambda_contra = 0.5 + rng.uniform();
        c.lambda_c_cyclic = rng.uniform();
        c.lambda_i_cyclic = rng.uniform();
        c.lambda_s = rng.uniform();
        c.lambda_n = rng.uniform();
      }
      const double l = LogitScale::kMax * rng.uniform();
      CompositeInputs in{&img, &txt, c.needs_twin_views() ? &twins : nullptr, c.needs_nli() ? &nli : nullptr};
      const CompositeLoss out = composite_loss(c, l, in);

      double expect = c.lambda_contra * contrastive_loss(img, txt, l).value;
      if (c.is_active(Term::CrossCyclic)) expect += c.lambda_c_cyclic * cross_cyclic_loss(img, txt).value;
      if (c.is_active(Term::InModalCyclic)) expect += c.lambda_i_cyclic * in_modal_cyclic_loss(img, txt).value;
      if (c.is_active(Term::SimcseUnsup))
        expect += c.lambda_s * simcse_unsup_loss(twins.view, twins.view_plus, c.tau_s).value;
      if (c.is_active(Term::NliSup))
        expect += c.lambda_n * nli_sup_loss(nli.premise, nli.entailment, nli.contradiction, c.tau_s).value;
      worst = std::max(worst, std::abs(out.value - expect));
      ++checked;
    }
  }
  return {worst <= kDecompositionTolerance,
          std::to_string(checked) + " batches over 8 variants, max |composite - sum| " + fmt("%.2e", worst)};
}

}  // namespace

// Optional arguments select criteria by number, e.g. `mmcl_acceptance 1 9`.
int main(int argc, char** argv) {
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  auto wanted = [&](int id) { return selected.empty() || std::find(selected.begin(), selected.end(), id) != selected.end(); };

  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    Outcome (*body)();
  };
  const Criterion criteria[] = {
      {1, "gradient correctness", 30, criterion_gradients},
      {2, "metric oracles", 10, criterion_metrics},
      {3, "uniformity calibration", 10, criterion_uniformity},
      {4, "sentence objective trades alignment for text uniformity", 0, criterion_trade_off},
      {5, "cyclic losses reduce asymmetry", 0, criterion_symmetry},
      {6, "non-text uniformity follows text uniformity", 0, criterion_other_space},
      {7, "training sanity", 0, criterion_sanity},
      {8, "cmd_train determinism", 0, criterion_determinism},
      {9, "composite decomposition", 0, criterion_decomposition},
  };
  int run = 0, failures = 0;
  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    ++run;
    failures += report(c.id, c.name, c.budget_s, c.body) ? 0 : 1;
  }
  std::printf("%d of %d criteria passed\n", run - failures, run);
  return failures == 0 ? 0 : 1;
}
