#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "geocap/geodata.hpp"
#include "geocap/knowledge.hpp"
#include "geocap/tensor.hpp"

namespace geocap {

inline constexpr std::size_t kMaxCaptionTokens = 100;

struct Sample {
  std::string image_id;
  GeoPoint location;
  std::string caption_raw;
  std::string feature_ref;
};

/// Tab-separated image_id, lat, lon, caption, feature_ref. Captions longer than
/// `max_tokens` after preprocessing are dropped and counted in `dropped`.
std::vector<Sample> parse_dataset(const std::string& text, const std::string& source = "<memory>",
                                  std::size_t max_tokens = kMaxCaptionTokens, std::size_t* dropped = nullptr);
std::vector<Sample> load_dataset(const std::string& path, std::size_t max_tokens = kMaxCaptionTokens,
                                 std::size_t* dropped = nullptr);
std::string format_dataset(const std::vector<Sample>& samples);

/// Lowercases, strips markup tags, unifies a few spellings ("&" -> "and",
/// "saint" -> "st") and splits into word and punctuation tokens.
std::vector<std::string> preprocess_caption(std::string_view text);

enum class TokenKind { Vocab, Entity, Fact };

std::string_view kind_name(TokenKind kind);
TokenKind parse_kind(std::string_view name);

/// Caption tokens with their kind mask. `refs` hold a vocabulary index for
/// VOCAB tokens (or -1 while unresolved), the GeoContext index for ENTITY
/// tokens and the KnowledgeContext index for FACT tokens.
struct TokenizedCaption {
  std::vector<std::string> tokens;
  std::vector<TokenKind> kinds;
  std::vector<int> refs;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  void push(std::string token, TokenKind kind, int ref);
  /// Space-joined surface string; multi-word tokens expand to their words.
  std::string surface() const;
  /// The surface split back into single words.
  std::vector<std::string> words() const;
  bool operator==(const TokenizedCaption&) const = default;
};

/// Greedy longest-match linking of preprocessed tokens against entity names
/// and fact object labels. Equal-length entity/fact matches resolve to the
/// entity; among facts sharing a label, one whose subject was already
/// mentioned wins, then the lowest context index.
TokenizedCaption link_caption(const std::vector<std::string>& tokens, const GeoContext& geo,
                              const KnowledgeContext& knowledge);

/// Re-links maximal runs of VOCAB tokens, keeping existing ENTITY/FACT tokens.
TokenizedCaption relink_vocab_runs(const TokenizedCaption& caption, const GeoContext& geo,
                                   const KnowledgeContext& knowledge);

/// Throws DataError when a ref is out of range for its kind.
void validate_refs(const TokenizedCaption& caption, std::size_t vocab_size, std::size_t geo_size,
                   std::size_t knowledge_size);

enum class Split { Train, Validation, Test };

inline constexpr double kTestLatitude = 54.8975;
inline constexpr double kValidationLatitude = 53.5706;

Split split_of(double latitude);
std::string_view split_name(Split split);

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> validation;
  std::vector<Sample> test;
};

/// Latitude bands: test north of 54.8975, validation above 53.5706, train the rest.
DatasetSplit split_dataset(const std::vector<Sample>& samples);

/// word -> vector table read from a GloVe-style text file.
using PretrainedVectors = std::map<std::string, std::vector<float>>;
PretrainedVectors load_pretrained_vectors(const std::string& path, int dim);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;

  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, nn::Tensor<float> vectors);

  int size() const { return static_cast<int>(tokens_.size()); }
  int dim() const { return vectors_.cols(); }
  /// Index of `token`, or kUnk.
  int index_of(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int index) const { return tokens_.at(static_cast<std::size_t>(index)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const nn::Tensor<float>& vectors() const { return vectors_; }

  /// Fills the refs of VOCAB tokens with vocabulary indices.
  void resolve(TokenizedCaption& caption) const;

  bool operator==(const Vocabulary& o) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  nn::Tensor<float> vectors_;
};

/// VOCAB-kind tokens of `captions` with count >= min_count, ordered by
/// frequency then lexicographically, after the four reserved tokens. Rows come
/// from `pretrained` where available, otherwise uniform in [-0.05, 0.05].
Vocabulary build_vocabulary(const std::vector<TokenizedCaption>& captions, int dim, std::uint64_t seed,
                            int min_count = 1, const PretrainedVectors* pretrained = nullptr);

struct FeatureShape {
  int positions = 196;
  int channels = 2048;
};

/// Little-endian "GFCF" record: u32 positions, u32 channels, float32 data.
nn::Tensor<float> load_image_features(const std::string& path, const FeatureShape& expected);
void write_image_features(const std::string& path, const nn::Tensor<float>& features);

/// Deterministic pseudo-features seeded by a hash of the image id.
nn::Tensor<float> synthetic_image_features(const std::string& image_id, const FeatureShape& shape);

/// Loads `<features_dir>/<feature_ref>`; with `synthetic_fallback` a missing
/// file (or the ref "synthetic") yields synthetic features instead.
nn::Tensor<float> resolve_image_features(const Sample& sample, const std::string& features_dir,
                                         const FeatureShape& shape, bool synthetic_fallback);

}  // namespace geocap
