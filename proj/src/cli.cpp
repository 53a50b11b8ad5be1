#include "mmcl/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmcl/data.hpp"
#include "mmcl/geometry.hpp"
#include "mmcl/retrieval.hpp"
#include "mmcl/trainer.hpp"

namespace mmcl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kTrainPairs = "pairs.jsonl";
constexpr const char* kValPairs = "val_pairs.jsonl";
constexpr const char* kNli = "nli.jsonl";
constexpr const char* kClasses = "classes.txt";
constexpr const char* kGenSpecCopy = "gen_spec.json";

std::string path_in(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

json parse_json_file(const std::string& path, ErrorKind kind) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(kind, path + ": " + e.what());
  }
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create directory " + dir + ": " + ec.message());
}

std::string jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string spec;
  std::string out;
};

int cmd_gen(const GenArgs& args, std::ostream& out, std::ostream& err) {
  const GenSpec spec = GenSpec::from_json(parse_json_file(args.spec, ErrorKind::SpecInvalid));
  const GeneratedData data = generate(spec);
  const std::vector<NliRecord> nli = generate_nli(spec, data.train);

  ensure_dir(args.out);
  write_pairs(path_in(args.out, kTrainPairs), data.train);
  write_pairs(path_in(args.out, kValPairs), data.val);
  write_nli(path_in(args.out, kNli), nli);
  std::string classes;
  for (const auto& c : data.classes) classes += c + "\n";
  write_file_atomic(path_in(args.out, kClasses), classes);
  write_file_atomic(path_in(args.out, kGenSpecCopy), spec.to_json().dump(2) + "\n");

  std::map<std::string, std::size_t> per_class;
  for (const auto& r : data.train) ++per_class[r.class_label.value_or("")];
  for (const auto& r : data.val) ++per_class[r.class_label.value_or("")];
  json summary = {{"train", data.train.size()}, {"val", data.val.size()}, {"nli", nli.size()},
                  {"classes", data.classes.size()}, {"per_class", per_class}, {"out", args.out}};
  err << "generated " << data.train.size() << " train / " << data.val.size() << " val pairs, " << nli.size()
      << " NLI triples in " << args.out << "\n";
  out << summary.dump() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string variant;
  std::optional<std::uint64_t> seed;
};

json evaluation_json(const PairedEvaluation& ev) {
  return {{"text_retrieval", ev.text.to_json()}, {"other_retrieval", ev.other.to_json()}, {"score", ev.score()}};
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  const auto started = std::chrono::steady_clock::now();
  json raw = parse_json_file(args.config, ErrorKind::ConfigInvalid);
  if (!raw.is_object()) throw Error(ErrorKind::ConfigInvalid, "config must be a JSON object");
  if (!args.variant.empty()) raw["objective"]["variant"] = args.variant;
  if (args.seed) raw["seed"] = *args.seed;
  const TrainConfig config = TrainConfig::from_json(raw);

  TrainingSet data;
  data.pairs = load_pairs(path_in(args.data, kTrainPairs));
  const auto val = load_pairs(path_in(args.data, kValPairs));
  const std::string nli_path = path_in(args.data, kNli);
  const bool wants_nli = config.objective.needs_nli() ||
                         (config.objective.needs_twin_views() &&
                          config.objective.sentence_corpus() == SentenceCorpus::External);
  if (wants_nli) {
    if (!fs::exists(nli_path)) {
      throw Error(ErrorKind::MissingInput,
                  std::string(to_string(config.objective.variant)) + " needs " + nli_path + ", which does not exist");
    }
    data.nli = load_nli(nli_path);
  }

  err << "training " << to_string(config.objective.variant) << " seed " << config.seed << " on "
      << data.pairs.size() << " pairs\n";
  const TrainResult result = train(config, data, val);
  const auto trained = std::chrono::steady_clock::now();

  ensure_dir(args.out);
  write_file_atomic(path_in(args.out, "config.json"), config.to_json().dump(2) + "\n");
  std::vector<json> history;
  for (const auto& h : result.history) history.push_back(h.to_json());
  write_file_atomic(path_in(args.out, "history.jsonl"), jsonl(history));
  std::vector<json> steps;
  for (const auto& s : result.steps) steps.push_back(s.to_json());
  write_file_atomic(path_in(args.out, "train_log.jsonl"), jsonl(steps));
  save_checkpoint(result.best, path_in(args.out, "best.ckpt.json"));
  save_checkpoint(result.final_model, path_in(args.out, "final.ckpt.json"));

  const PairedEvaluation best_eval = evaluate_pairs(result.best, PairedDataset::from_records(val));
  const auto finished = std::chrono::steady_clock::now();
  auto seconds = [](auto a, auto b) { return std::chrono::duration<double>(b - a).count(); };

  json manifest = {
      {"run_id", fs::path(args.out).filename().string()},
      {"tool_version", kToolVersion},
      {"config", config.to_json()},
      {"config_path", args.config},
      {"data_dir", args.data},
      {"gen_spec", fs::exists(path_in(args.data, kGenSpecCopy)) ? json(path_in(args.data, kGenSpecCopy)) : json(nullptr)},
      {"artifacts",
       {{"config", "config.json"},
        {"history", "history.jsonl"},
        {"train_log", "train_log.jsonl"},
        {"best_checkpoint", "best.ckpt.json"},
        {"final_checkpoint", "final.ckpt.json"}}},
      {"total_steps", result.total_steps},
      {"started_utc", utc_timestamp()},
      {"timings_s", {{"train", seconds(started, trained)}, {"total", seconds(started, finished)}}},
  };
  write_file_atomic(path_in(args.out, "manifest.json"), manifest.dump(2) + "\n");

  json summary = evaluation_json(best_eval);
  summary["variant"] = std::string(to_string(config.objective.variant));
  summary["seed"] = config.seed;
  summary["best_step"] = result.best_index ? json(result.history[*result.best_index].step) : json(nullptr);
  summary["history_entries"] = result.history.size();
  out << summary.dump() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string prompts;
  std::string split = "val";
};

std::vector<PairedRecord> load_split(const std::string& dir, const std::string& split) {
  if (split == "val") return load_pairs(path_in(dir, kValPairs));
  if (split == "train") return load_pairs(path_in(dir, kTrainPairs));
  if (split == "all") {
    auto records = load_pairs(path_in(dir, kTrainPairs));
    auto val = load_pairs(path_in(dir, kValPairs));
    records.insert(records.end(), val.begin(), val.end());
    return records;
  }
  throw Error(ErrorKind::ConfigInvalid, "--split must be val, train or all");
}

void check_dims(const DualEncoder& model, const PairedDataset& ds, const std::string& ckpt) {
  if (ds.features.cols() != model.feature_dim()) {
    throw Error(ErrorKind::CheckpointMismatch, ckpt + " expects feature dim " + std::to_string(model.feature_dim()) +
                                                   " but data has feature dim " + std::to_string(ds.features.cols()));
  }
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  const DualEncoder model = load_checkpoint(args.ckpt);
  const PairedDataset ds = PairedDataset::from_records(load_split(args.data, args.split));
  check_dims(model, ds, args.ckpt);
  json report = evaluation_json(evaluate_pairs(model, ds));

  if (!args.prompts.empty()) {
    const auto templates = load_prompts(args.prompts);
    std::vector<std::string> classes;
    const std::string classes_path = path_in(args.data, kClasses);
    if (fs::exists(classes_path)) {
      classes = load_lines(classes_path);
    } else {
      std::set<std::string> seen;
      for (const auto& l : ds.labels) {
        if (l) seen.insert(*l);
      }
      classes.assign(seen.begin(), seen.end());
    }
    std::vector<Matrix> class_prompts;
    for (const auto& prompts : expand_prompts(templates, classes)) {
      class_prompts.push_back(model.encode_texts(prompts).matrix);
    }
    const Matrix items = model.encode_features(ds.item_features()).matrix;
    std::vector<std::size_t> labels;
    bool labelled = true;
    for (std::size_t first : ds.item_first) {
      const auto& l = ds.labels[first];
      const auto it = l ? std::find(classes.begin(), classes.end(), *l) : classes.end();
      if (it == classes.end()) {
        labelled = false;
        break;
      }
      labels.push_back(static_cast<std::size_t>(it - classes.begin()));
    }
    report["zero_shot"] = zero_shot_classify(items, class_prompts, labelled ? &labels : nullptr).to_json();
  }
  err << "evaluated " << args.ckpt << " on " << ds.size() << " " << args.split << " pairs\n";
  out << report.dump() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::vector<std::string> ckpts;
  std::string data;
  std::string out;
  std::string split = "all";
};

int cmd_analyze(const AnalyzeArgs& args, std::ostream& out, std::ostream& err) {
  const PairedDataset ds = PairedDataset::from_records(load_split(args.data, args.split));
  std::string csv = geometry_csv_header() + "\n";
  json reports = json::array();
  for (const auto& ckpt : args.ckpts) {
    const DualEncoder model = load_checkpoint(ckpt);
    check_dims(model, ds, ckpt);
    const GeometryReport report = geometry_report(model, ds);

    const fs::path run_dir = fs::path(ckpt).parent_path();
    std::string variant = "unknown";
    std::uint64_t seed = 0;
    const fs::path config_path = run_dir / "config.json";
    if (fs::exists(config_path)) {
      const json cfg = parse_json_file(config_path.string(), ErrorKind::ConfigInvalid);
      variant = cfg.at("objective").value("variant", "unknown");
      seed = cfg.value("seed", std::uint64_t{0});
    }
    const std::string run_id = run_dir.filename().string() + "/" + fs::path(ckpt).filename().string();
    csv += geometry_csv_row(run_id, variant, seed, report) + "\n";
    json j = report.to_json();
    j["run_id"] = run_id;
    reports.push_back(j);
  }
  write_file_atomic(args.out, csv);
  err << "wrote " << args.ckpts.size() << " geometry rows to " << args.out << "\n";
  out << json{{"reports", reports}, {"csv", args.out}}.dump() << "\n";
  return kExitOk;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingInput: return kExitMissingInput;
    case ErrorKind::NumericFailure: return kExitNumericFailure;
    default: return kExitInputError;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-modal contrastive pretraining with sentence-embedding objectives", "mmcl"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic paired dataset");
  gen_cmd->add_option("--spec", gen.spec, "GenSpec JSON file")->required();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one model variant");
  train_cmd->add_option("--config", tr.config, "Training config JSON")->required();
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--variant", tr.variant, "CLIP|CLIPs|CLIPn|CLIPe|CyCLIP|CyCLIPs|CyCLIPn|CyCLIPe");
  train_cmd->add_option("--seed", tr.seed, "Override the config seed");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Retrieval and zero-shot evaluation");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint JSON")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--prompts", ev.prompts, "Prompt template file");
  eval_cmd->add_option("--split", ev.split, "val, train or all")->capture_default_str();

  AnalyzeArgs an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Geometry report per checkpoint as CSV");
  analyze_cmd->add_option("--ckpt", an.ckpts, "Checkpoint JSON (repeatable)")->required()->expected(1, -1);
  analyze_cmd->add_option("--data", an.data, "Dataset directory")->required();
  analyze_cmd->add_option("--out", an.out, "CSV output path")->required();
  analyze_cmd->add_option("--split", an.split, "val, train or all")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInputError;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen(gen, out, err);
    if (train_cmd->parsed()) return cmd_train(tr, out, err);
    if (eval_cmd->parsed()) return cmd_eval(ev, out, err);
    if (analyze_cmd->parsed()) return cmd_analyze(an, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInputError;
  }
  return kExitInputError;
}

}  // namespace mmcl
