#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mmcl/encoder.hpp"
#include "mmcl/tensor.hpp"

namespace mmcl {

struct PairedRecord {
  std::string id;
  std::string caption;
  std::vector<double> features;
  std::optional<std::string> class_label;

  friend bool operator==(const PairedRecord&, const PairedRecord&) = default;
};

struct NliRecord {
  std::string premise;
  std::string entailment;
  std::string contradiction;

  friend bool operator==(const NliRecord&, const NliRecord&) = default;
};

struct GenSpec {
  std::size_t n_classes = 8;
  std::size_t pairs_per_class = 64;
  std::size_t latent_dim = 16;
  std::size_t feature_dim = 32;
  std::size_t vocab_size = 256;
  std::size_t caption_len = 12;
  double noise_sigma = 0.5;
  std::size_t captions_per_item = 1;
  std::uint64_t seed = 0;

  // Throws SpecInvalid naming the first offending field.
  void validate() const;

  nlohmann::json to_json() const;
  // Unknown keys and wrongly typed values are SpecInvalid; missing keys keep defaults.
  static GenSpec from_json(const nlohmann::json& j);
};

// Token layout implied by a GenSpec: every class owns a band of tokens whose
// first entry is the class label itself; the remaining tokens are shared filler.
struct CaptionVocabulary {
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> bands;  // per class, bands[c][0] == labels[c]
  std::vector<std::string> filler;
  std::size_t band_tokens_per_caption = 0;      // label included
  std::size_t filler_tokens_per_caption = 0;

  static CaptionVocabulary layout(const GenSpec& spec);
  std::vector<std::string> all_tokens() const;
};

struct GeneratedData {
  std::vector<PairedRecord> train;
  std::vector<PairedRecord> val;
  std::vector<std::string> classes;
};

GeneratedData generate(const GenSpec& spec);
std::vector<NliRecord> generate_nli(const GenSpec& spec, const std::vector<PairedRecord>& base);

// Records that share an item key describe the same non-text observation.
// Ids of the form "<item>#<k>" share the item key "<item>".
std::string item_key(std::string_view id);

// JSONL I/O. Writers are atomic; loaders report ParseError with a 1-based line.
std::string pairs_to_jsonl(const std::vector<PairedRecord>& records);
std::string nli_to_jsonl(const std::vector<NliRecord>& records);
void write_pairs(const std::string& path, const std::vector<PairedRecord>& records);
void write_nli(const std::string& path, const std::vector<NliRecord>& records);
std::vector<PairedRecord> load_pairs(const std::string& path);
std::vector<PairedRecord> parse_pairs(std::string_view text);
std::vector<NliRecord> load_nli(const std::string& path);
std::vector<NliRecord> parse_nli(std::string_view text);

// Prompt templates: one per line, "#" starts a comment line, blank lines are
// skipped. Each template contains exactly one "{label}".
std::vector<std::string> parse_prompts(std::string_view text);
std::vector<std::string> load_prompts(const std::string& path);
std::string expand_prompt(std::string_view templ, std::string_view label);
std::vector<std::vector<std::string>> expand_prompts(const std::vector<std::string>& templates,
                                                     const std::vector<std::string>& classes);

std::vector<std::string> load_lines(const std::string& path);

// Column view over paired records with the item grouping used by retrieval.
struct PairedDataset {
  std::vector<std::string> ids;
  std::vector<std::string> captions;
  Matrix features;                       // one row per record
  std::vector<std::optional<std::string>> labels;
  std::vector<std::size_t> item_of;      // record -> item index
  std::vector<std::size_t> item_first;   // item -> first record index

  static PairedDataset from_records(const std::vector<PairedRecord>& records);
  std::size_t size() const { return ids.size(); }
  std::size_t item_count() const { return item_first.size(); }
  Matrix item_features() const;
};

}  // namespace mmcl
