#include "mmcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace mmcl {

using nlohmann::json;

// ---------------------------------------------------------------------------
// GenSpec

namespace {

[[noreturn]] void spec_error(const std::string& field, const std::string& why) {
  throw Error(ErrorKind::SpecInvalid, field + ": " + why);
}

}  // namespace

void GenSpec::validate() const {
  if (n_classes < 2) spec_error("n_classes", "must be >= 2, got " + std::to_string(n_classes));
  if (pairs_per_class < 1) spec_error("pairs_per_class", "must be >= 1");
  if (latent_dim < 2) spec_error("latent_dim", "must be >= 2");
  if (feature_dim < 2) spec_error("feature_dim", "must be >= 2");
  if (caption_len < 1) spec_error("caption_len", "must be >= 1");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) spec_error("noise_sigma", "must be finite and >= 0");
  if (captions_per_item < 1) spec_error("captions_per_item", "must be >= 1");
  if (n_classes * pairs_per_class < 2) spec_error("pairs_per_class", "need at least two items in total");
  const CaptionVocabulary v = CaptionVocabulary::layout(*this);
  (void)v;
}

json GenSpec::to_json() const {
  return {{"n_classes", n_classes},     {"pairs_per_class", pairs_per_class},
          {"latent_dim", latent_dim},   {"feature_dim", feature_dim},
          {"vocab_size", vocab_size},   {"caption_len", caption_len},
          {"noise_sigma", noise_sigma}, {"captions_per_item", captions_per_item},
          {"seed", seed}};
}

GenSpec GenSpec::from_json(const json& j) {
  if (!j.is_object()) spec_error("<root>", "expected a JSON object");
  GenSpec spec;
  auto count = [&](const std::string& key, std::size_t& field) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_number_integer()) spec_error(key, "expected an integer");
    if (v.get<long long>() < 0) spec_error(key, "must be non-negative");
    field = v.get<std::size_t>();
  };
  const std::set<std::string> known = {"n_classes",   "pairs_per_class", "latent_dim",
                                       "feature_dim", "vocab_size",      "caption_len",
                                       "noise_sigma", "captions_per_item", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) spec_error(key, "unknown field");
  }
  count("n_classes", spec.n_classes);
  count("pairs_per_class", spec.pairs_per_class);
  count("latent_dim", spec.latent_dim);
  count("feature_dim", spec.feature_dim);
  count("vocab_size", spec.vocab_size);
  count("caption_len", spec.caption_len);
  count("captions_per_item", spec.captions_per_item);
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_integer()) spec_error("seed", "expected an integer");
    spec.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("noise_sigma")) {
    if (!j.at("noise_sigma").is_number()) spec_error("noise_sigma", "expected a number");
    spec.noise_sigma = j.at("noise_sigma").get<double>();
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Vocabulary layout

CaptionVocabulary CaptionVocabulary::layout(const GenSpec& spec) {
  if (spec.n_classes == 0) spec_error("n_classes", "must be >= 2");
  const std::size_t band_size = spec.vocab_size / (2 * spec.n_classes);
  if (band_size < 1) {
    spec_error("vocab_size", "must be at least 2 * n_classes = " + std::to_string(2 * spec.n_classes));
  }
  CaptionVocabulary v;
  const std::size_t filler_count = spec.vocab_size - band_size * spec.n_classes;
  v.band_tokens_per_caption = std::min(band_size, std::max<std::size_t>(1, (spec.caption_len + 1) / 2));
  v.filler_tokens_per_caption = spec.caption_len - v.band_tokens_per_caption;
  if (v.filler_tokens_per_caption > filler_count) {
    spec_error("caption_len", "needs " + std::to_string(v.filler_tokens_per_caption) +
                                  " distinct filler tokens but vocab_size leaves " + std::to_string(filler_count));
  }
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    const std::string label = "class" + std::to_string(c);
    v.labels.push_back(label);
    std::vector<std::string> band{label};
    for (std::size_t k = 1; k < band_size; ++k) band.push_back(label + "_" + std::to_string(k));
    v.bands.push_back(std::move(band));
  }
  for (std::size_t k = 0; k < filler_count; ++k) v.filler.push_back("w" + std::to_string(k));
  return v;
}

std::vector<std::string> CaptionVocabulary::all_tokens() const {
  std::vector<std::string> out;
  for (const auto& band : bands) out.insert(out.end(), band.begin(), band.end());
  out.insert(out.end(), filler.begin(), filler.end());
  return out;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

std::vector<double> random_unit(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  const double n = l2_norm(v);
  for (double& x : v) x /= n;
  return v;
}

double gumbel(Rng& rng) {
  const double u = (static_cast<double>(rng.next_u64() >> 11) + 0.5) * 0x1.0p-53;  // (0, 1)
  return -std::log(-std::log(u));
}

// Picks `count` distinct candidates, preferring those whose prototype points
// along `offset`. Gumbel-top-k, i.e. sampling without replacement.
std::vector<std::size_t> pick_tokens(Rng& rng, const std::vector<std::vector<double>>& prototypes,
                                     std::span<const double> offset, double sharpness, std::size_t first,
                                     std::size_t count) {
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t k = first; k < prototypes.size(); ++k) {
    scored.emplace_back(sharpness * dot(prototypes[k], offset) + gumbel(rng), k);
  }
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(count), scored.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(scored[i].second);
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::string item_id(std::size_t item, std::size_t caption, std::size_t captions_per_item) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "i%05zu", item);
  std::string id(buf);
  if (captions_per_item > 1) id += "#" + std::to_string(caption);
  return id;
}

}  // namespace

GeneratedData generate(const GenSpec& spec) {
  spec.validate();
  const CaptionVocabulary vocab = CaptionVocabulary::layout(spec);
  Rng rng(spec.seed);
  Rng structure = rng.fork(1);
  Rng sampling = rng.fork(2);
  Rng splitter = rng.fork(3);

  std::vector<std::vector<double>> centers;
  for (std::size_t c = 0; c < spec.n_classes; ++c) centers.push_back(random_unit(structure, spec.latent_dim));

  Matrix projection(spec.feature_dim, spec.latent_dim);
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  for (double& x : projection.values()) x = proj_scale * structure.normal();

  std::vector<std::vector<std::vector<double>>> band_protos(spec.n_classes);
  for (auto& protos : band_protos) {
    for (std::size_t k = 0; k < vocab.bands.front().size(); ++k) protos.push_back(random_unit(structure, spec.latent_dim));
  }
  std::vector<std::vector<double>> filler_protos;
  for (std::size_t k = 0; k < vocab.filler.size(); ++k) filler_protos.push_back(random_unit(structure, spec.latent_dim));

  // Projections of the within-class offset have stddev noise_sigma.
  const double sharpness = spec.noise_sigma > 0.0 ? 3.0 / spec.noise_sigma : 0.0;

  struct Item {
    std::vector<PairedRecord> records;
  };
  std::vector<Item> items;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t p = 0; p < spec.pairs_per_class; ++p) {
      std::vector<double> offset(spec.latent_dim);
      for (double& x : offset) x = spec.noise_sigma * sampling.normal();
      std::vector<double> latent = centers[c];
      for (std::size_t i = 0; i < latent.size(); ++i) latent[i] += offset[i];
      std::vector<double> features(spec.feature_dim);
      for (std::size_t r = 0; r < spec.feature_dim; ++r) features[r] = dot(projection.row(r), latent);

      Item item;
      const std::size_t index = items.size();
      for (std::size_t k = 0; k < spec.captions_per_item; ++k) {
        std::vector<std::string> words{vocab.labels[c]};
        for (std::size_t t : pick_tokens(sampling, band_protos[c], offset, sharpness, 1,
                                         vocab.band_tokens_per_caption - 1)) {
          words.push_back(vocab.bands[c][t]);
        }
        for (std::size_t t : pick_tokens(sampling, filler_protos, offset, sharpness, 0,
                                         vocab.filler_tokens_per_caption)) {
          words.push_back(vocab.filler[t]);
        }
        item.records.push_back({item_id(index, k, spec.captions_per_item), join(words), features, vocab.labels[c]});
      }
      items.push_back(std::move(item));
    }
  }

  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  splitter.shuffle(order);
  const std::size_t n_val =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(items.size()))), 1,
                              items.size() - 1);
  std::vector<std::size_t> val_items(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_items(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val_items.begin(), val_items.end());
  std::sort(train_items.begin(), train_items.end());

  GeneratedData out;
  out.classes = vocab.labels;
  for (std::size_t i : train_items) {
    for (auto& r : items[i].records) out.train.push_back(r);
  }
  for (std::size_t i : val_items) {
    for (auto& r : items[i].records) out.val.push_back(r);
  }
  return out;
}

std::vector<NliRecord> generate_nli(const GenSpec& spec, const std::vector<PairedRecord>& base) {
  if (base.empty()) throw Error(ErrorKind::EmptyInput, "generate_nli needs at least one base record");
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (!base[i].class_label) {
      throw Error(ErrorKind::SpecInvalid, "record " + base[i].id + " has no class label", i);
    }
    by_class[*base[i].class_label].push_back(i);
  }
  if (by_class.size() < 2) {
    throw Error(ErrorKind::NeedTwoClasses, "NLI generation needs records from at least two classes");
  }
  std::vector<std::string> class_names;
  for (const auto& [name, _] : by_class) class_names.push_back(name);

  const CaptionVocabulary vocab = CaptionVocabulary::layout(spec);
  std::map<std::string, const std::vector<std::string>*> band_of;
  for (std::size_t c = 0; c < vocab.labels.size(); ++c) band_of[vocab.labels[c]] = &vocab.bands[c];

  Rng rng = Rng(spec.seed).fork(4);
  std::vector<NliRecord> out;
  out.reserve(base.size());
  for (const auto& premise : base) {
    const std::string& label = *premise.class_label;
    // Entailment: keep the label and filler, resample the other band tokens.
    std::vector<std::string> words = split_whitespace(premise.caption);
    const auto band_it = band_of.find(label);
    if (band_it != band_of.end() && band_it->second->size() > 1) {
      const auto& band = *band_it->second;
      for (auto& w : words) {
        if (w != label && std::find(band.begin(), band.end(), w) != band.end()) {
          w = band[1 + rng.index(band.size() - 1)];
        }
      }
    }
    // Contradiction: a caption from a different class.
    std::size_t other = rng.index(class_names.size() - 1);
    const auto self = static_cast<std::size_t>(
        std::find(class_names.begin(), class_names.end(), label) - class_names.begin());
    if (other >= self) ++other;
    const auto& pool = by_class[class_names[other]];
    const auto& contra = base[pool[rng.index(pool.size())]];
    out.push_back({premise.caption, join(words), contra.caption});
  }
  return out;
}

std::string item_key(std::string_view id) {
  const auto hash = id.find('#');
  return std::string(hash == std::string_view::npos ? id : id.substr(0, hash));
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = text.find('\n', pos);
    const auto line = text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
    ++line_no;
    pos = end == std::string_view::npos ? text.size() : end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    fn(line, line_no);
  }
}

json parse_line(std::string_view line, std::size_t line_no) {
  try {
    json j = json::parse(line);
    if (!j.is_object()) throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": expected object", line_no);
    return j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": " + e.what(), line_no);
  }
}

std::string require_string(const json& j, const char* key, std::size_t line_no, bool non_empty) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": missing string field '" + key + "'",
                line_no);
  }
  auto s = j.at(key).get<std::string>();
  if (non_empty && s.empty()) {
    throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": field '" + key + "' is empty", line_no);
  }
  return s;
}

}  // namespace

std::string pairs_to_jsonl(const std::vector<PairedRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    json j = {{"id", r.id}, {"caption", r.caption}, {"features", r.features}};
    if (r.class_label) j["class_label"] = *r.class_label;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string nli_to_jsonl(const std::vector<NliRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += json{{"premise", r.premise}, {"entailment", r.entailment}, {"contradiction", r.contradiction}}.dump();
    out += '\n';
  }
  return out;
}

void write_pairs(const std::string& path, const std::vector<PairedRecord>& records) {
  write_file_atomic(path, pairs_to_jsonl(records));
}

void write_nli(const std::string& path, const std::vector<NliRecord>& records) {
  write_file_atomic(path, nli_to_jsonl(records));
}

std::vector<PairedRecord> parse_pairs(std::string_view text) {
  std::vector<PairedRecord> out;
  std::set<std::string> seen;
  std::optional<std::size_t> dim;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    const json j = parse_line(line, line_no);
    PairedRecord r;
    r.id = require_string(j, "id", line_no, true);
    r.caption = require_string(j, "caption", line_no, true);
    if (!j.contains("features") || !j.at("features").is_array()) {
      throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": missing array field 'features'",
                  line_no);
    }
    try {
      r.features = j.at("features").get<std::vector<double>>();
    } catch (const json::exception&) {
      throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": features must be numbers", line_no);
    }
    if (j.contains("class_label") && !j.at("class_label").is_null()) {
      r.class_label = require_string(j, "class_label", line_no, false);
    }
    if (!seen.insert(r.id).second) {
      throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": duplicate id '" + r.id + "'", line_no);
    }
    if (dim && *dim != r.features.size()) {
      throw Error(ErrorKind::ParseError,
                  "line " + std::to_string(line_no) + ": features have " + std::to_string(r.features.size()) +
                      " entries, earlier records have " + std::to_string(*dim),
                  line_no);
    }
    if (split_whitespace(r.caption).empty()) {
      throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": caption has no tokens", line_no);
    }
    dim = r.features.size();
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<PairedRecord> load_pairs(const std::string& path) { return parse_pairs(read_file(path)); }

std::vector<NliRecord> parse_nli(std::string_view text) {
  std::vector<NliRecord> out;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    const json j = parse_line(line, line_no);
    out.push_back({require_string(j, "premise", line_no, true), require_string(j, "entailment", line_no, true),
                   require_string(j, "contradiction", line_no, true)});
  });
  return out;
}

std::vector<NliRecord> load_nli(const std::string& path) { return parse_nli(read_file(path)); }

// ---------------------------------------------------------------------------
// Prompts

namespace {

constexpr std::string_view kPlaceholder = "{label}";

std::size_t count_placeholders(std::string_view s) {
  std::size_t n = 0;
  for (auto pos = s.find(kPlaceholder); pos != std::string_view::npos; pos = s.find(kPlaceholder, pos + 1)) ++n;
  return n;
}

}  // namespace

std::vector<std::string> parse_prompts(std::string_view text) {
  std::vector<std::string> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    std::string line(text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
    ++line_no;
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto last = line.find_last_not_of(" \t");
    line = line.substr(first, last - first + 1);
    const std::size_t n = count_placeholders(line);
    if (n != 1) {
      throw Error(ErrorKind::MissingPlaceholder,
                  "line " + std::to_string(line_no) + ": template must contain exactly one {label}, found " +
                      std::to_string(n),
                  line_no);
    }
    out.push_back(std::move(line));
  }
  if (out.empty()) throw Error(ErrorKind::ParseError, "prompt file contains no templates");
  return out;
}

std::vector<std::string> load_prompts(const std::string& path) { return parse_prompts(read_file(path)); }

std::string expand_prompt(std::string_view templ, std::string_view label) {
  const auto pos = templ.find(kPlaceholder);
  if (pos == std::string_view::npos || count_placeholders(templ) != 1) {
    throw Error(ErrorKind::MissingPlaceholder, "template '" + std::string(templ) + "' needs exactly one {label}");
  }
  std::string out(templ.substr(0, pos));
  out += label;
  out += templ.substr(pos + kPlaceholder.size());
  return out;
}

std::vector<std::vector<std::string>> expand_prompts(const std::vector<std::string>& templates,
                                                     const std::vector<std::string>& classes) {
  std::vector<std::vector<std::string>> out;
  for (const auto& c : classes) {
    std::vector<std::string> prompts;
    for (const auto& t : templates) prompts.push_back(expand_prompt(t, c));
    out.push_back(std::move(prompts));
  }
  return out;
}

std::vector<std::string> load_lines(const std::string& path) {
  std::vector<std::string> out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PairedDataset

PairedDataset PairedDataset::from_records(const std::vector<PairedRecord>& records) {
  PairedDataset ds;
  const std::size_t dim = records.empty() ? 0 : records.front().features.size();
  ds.features = Matrix(records.size(), dim);
  std::map<std::string, std::size_t> item_index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.features.size() != dim) {
      throw Error(ErrorKind::DimensionMismatch, "record " + r.id + " has a different feature dimension", i);
    }
    ds.ids.push_back(r.id);
    ds.captions.push_back(r.caption);
    ds.labels.push_back(r.class_label);
    std::copy(r.features.begin(), r.features.end(), ds.features.row(i).begin());
    const auto [it, inserted] = item_index.emplace(item_key(r.id), ds.item_first.size());
    if (inserted) ds.item_first.push_back(i);
    ds.item_of.push_back(it->second);
  }
  return ds;
}

Matrix PairedDataset::item_features() const {
  Matrix out(item_first.size(), features.cols());
  for (std::size_t k = 0; k < item_first.size(); ++k) {
    const auto src = features.row(item_first[k]);
    std::copy(src.begin(), src.end(), out.row(k).begin());
  }
  return out;
}

}  // namespace mmcl
