#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmcl/tensor.hpp"

namespace mmcl {

enum class Modality { Text, Image, Audio };

std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view name);

struct DenseLayer {
  Matrix weight;  // out x in
  std::vector<double> bias;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

// Stack of affine layers with tanh between them and nothing after the last.
// The output is L2-normalized per row. Dropout applies to hidden activations.
struct EncoderParams {
  std::vector<DenseLayer> layers;
  double dropout_rate = 0.0;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t hidden_count() const { return layers.empty() ? 0 : layers.size() - 1; }

  // Throws DimensionMismatch if the layers do not chain, InvalidRate on a bad rate.
  void validate() const;

  // widths = {in, hidden..., out}. Weights ~ N(0, 1/in), zero bias.
  static EncoderParams random(const std::vector<std::size_t>& widths, double dropout_rate, Rng& rng);
};

struct EmbeddingBatch {
  Matrix matrix;
  Modality modality = Modality::Text;

  std::size_t size() const { return matrix.rows(); }
  std::size_t dim() const { return matrix.cols(); }
};

struct TextInput {
  std::vector<std::vector<std::size_t>> token_ids;
  std::size_t vocab_size = 0;

  std::size_t size() const { return token_ids.size(); }
};

// One mask per hidden layer, each N x width. Empty means no dropout.
using DropoutMasks = std::vector<Matrix>;

DropoutMasks sample_masks(const EncoderParams& params, std::size_t batch, Rng& rng);

struct ForwardTrace {
  std::vector<Matrix> layer_inputs;   // input to layer k
  std::vector<Matrix> activations;    // tanh(pre) for hidden layers, pre-mask
  DropoutMasks masks;
  Matrix output_raw;                  // pre-normalization output
  std::vector<double> output_norms;
  // Text only: token ids and table shape so the bag-mean can be reversed.
  std::optional<std::vector<std::vector<std::size_t>>> token_ids;
  std::size_t table_rows = 0;
};

struct ParamGrads {
  std::vector<Matrix> weight;
  std::vector<std::vector<double>> bias;
  std::optional<Matrix> table;

  static ParamGrads zeros_like(const EncoderParams& params, const Matrix* table = nullptr);
  void add(const ParamGrads& other);
};

struct Encoded {
  EmbeddingBatch batch;
  ForwardTrace trace;
};

// Mean of token-table rows per caption.
Matrix bag_of_tokens(const Matrix& table, const TextInput& input);

Encoded embed_features(const EncoderParams& params, const Matrix& features,
                       const DropoutMasks& masks = {}, Modality modality = Modality::Image);

Encoded embed_text(const EncoderParams& params, const Matrix& table, const TextInput& input,
                   const DropoutMasks& masks = {});

// Gradient of sum(grad_out .* output) w.r.t. every layer parameter and, for
// text traces, the token table.
ParamGrads backward(const EncoderParams& params, const ForwardTrace& trace, const Matrix& grad_out);

// Scalar objective of an embedding matrix together with its gradient.
struct ScalarAndGrad {
  double value = 0.0;
  Matrix grad;
};
using EmbeddingLoss = std::function<ScalarAndGrad(const Matrix& embeddings)>;

// Optional hook that edits analytic gradients before comparison (fault injection).
using GradTamper = std::function<void(ParamGrads&)>;

// Max relative error |a - n| / max(|a|, |n|, 1e-8) between backward() and
// central differences with step 1e-5, over every parameter. Dropout is off.
double gradient_check(const EncoderParams& params, const Matrix& features, const EmbeddingLoss& loss_fn,
                      const GradTamper& tamper = {});
double gradient_check(const EncoderParams& params, const Matrix& table, const TextInput& input,
                      const EmbeddingLoss& loss_fn, const GradTamper& tamper = {});

// Whitespace tokenizer over a fixed vocabulary. Id 0 is reserved for "<unk>".
class Vocabulary {
 public:
  static constexpr std::string_view kUnknown = "<unk>";

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  std::vector<std::size_t> encode(std::string_view text) const;
  TextInput encode_all(const std::vector<std::string>& texts) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

std::vector<std::string> split_whitespace(std::string_view text);

struct LogitScale {
  static constexpr double kMin = 0.0;
  static constexpr double kMax = 4.6052;
  static double initial();  // ln(1 / 0.07)

  double value = initial();
  bool trainable = true;

  void clamp();
  double scale() const;  // exp(value)
};

// Both towers, the token table, vocabulary and logit scale.
struct DualEncoder {
  Vocabulary vocab;
  Matrix token_table;  // vocab x token_dim
  EncoderParams text;
  EncoderParams other;
  Modality other_modality = Modality::Image;
  LogitScale logit_scale;

  struct Shape {
    std::size_t token_dim = 64;
    std::size_t text_hidden = 64;
    std::size_t other_hidden = 64;
    std::size_t embed_dim = 32;
    double text_dropout = 0.1;
    double other_dropout = 0.0;
  };

  static DualEncoder create(Vocabulary vocab, std::size_t feature_dim, const Shape& shape, Rng& rng,
                            Modality other_modality = Modality::Image);

  std::size_t feature_dim() const { return other.input_dim(); }
  std::size_t embed_dim() const { return text.output_dim(); }

  // Dropout-free encodings for evaluation.
  EmbeddingBatch encode_texts(const std::vector<std::string>& texts) const;
  EmbeddingBatch encode_features(const Matrix& features) const;
};

std::string checkpoint_to_json(const DualEncoder& model);
DualEncoder checkpoint_from_json(const std::string& text);
void save_checkpoint(const DualEncoder& model, const std::string& path);
DualEncoder load_checkpoint(const std::string& path);

// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace mmcl
