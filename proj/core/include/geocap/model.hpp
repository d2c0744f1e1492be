#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "geocap/corpus.hpp"
#include "geocap/geodata.hpp"
#include "geocap/knowledge.hpp"
#include "geocap/tensor.hpp"

namespace geocap {

/// Architecture variants: the full model and the four ablations.
enum class Variant { Full, NoPInd, NoGInd, NoKnowledge, GeoOnly };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

/// Geographic context in the encoder and the output space.
inline bool uses_geo(Variant v) { return v != Variant::NoKnowledge; }
/// Knowledge context in the encoder and the output space.
inline bool uses_knowledge(Variant v) { return v == Variant::Full || v == Variant::NoPInd || v == Variant::NoGInd; }
inline bool uses_p_ind(Variant v) { return v == Variant::Full || v == Variant::NoGInd; }
inline bool uses_g_ind(Variant v) { return v == Variant::Full || v == Variant::NoPInd; }

struct ModelConfig {
  int d = 300;
  int enc_layers = 3;
  int dec_layers = 3;
  int heads = 10;
  int ff_dim = 512;
  double dropout = 0.5;
  double lr = 4e-4;
  double grad_clip = 5.0;
  int early_stop_patience = 20;
  int max_epochs = 1000;
  /// Stop once the epoch training loss falls below this value (0 disables).
  double target_loss = 0.0;
  std::size_t n = 300;
  double r = 1.0;
  std::size_t m = 50;
  std::size_t max_caption_len = kMaxCaptionTokens;
  FeatureShape features;
  Variant variant = Variant::Full;
  std::uint64_t seed = 0;

  static ModelConfig large();
  /// d = 64, one layer, two heads; used for desk-scale runs and tests.
  static ModelConfig tiny();

  int type_dim() const { return d - kGeoScalarFeatures; }
  /// Throws ConfigError on inconsistent values.
  void validate() const;
  /// Stable key = value text of every field, used for hashing and echoing.
  std::string canonical() const;
  std::uint64_t hash() const { return fnv1a(canonical()); }
};

/// JSON object with one member per ModelConfig field.
std::string config_to_json(const ModelConfig& config);
/// Inverse of config_to_json. Throws ConfigError on missing or mistyped fields.
ModelConfig config_from_json(const std::string& text);

/// Per-step decoder indicators.
struct IndicatorState {
  std::vector<std::uint8_t> p_ind;  ///< one slot per predicate row (row 0 = unknown)
  std::vector<std::uint8_t> g_ind;  ///< one slot per knowledge-context fact
  std::set<int> mentioned_entities;
};

/// g_ind[j] = 1 iff the subject of fact j is among the ENTITY refs of `prefix`;
/// p_ind[q] = 1 iff some fact with predicate q has g_ind = 1.
IndicatorState compute_indicators(const TokenizedCaption& prefix, std::span<const int> fact_subjects,
                                  std::span<const int> fact_predicates, int predicate_rows);

/// Same, resolving predicates by name against `predicates` (row 0 = unknown).
IndicatorState compute_indicators(const TokenizedCaption& prefix, const KnowledgeContext& knowledge,
                                  const LabelEmbedding& predicates);

/// Softmax over the concatenated [V | G | K] scores.
struct HybridDistribution {
  std::vector<double> probs;
  int vocab_size = 0;
  int geo_size = 0;
  int knowledge_size = 0;

  std::size_t size() const { return probs.size(); }
  double total() const;
  /// First index of the maximum probability.
  int argmax() const;
  TokenKind kind_of(int index) const;
  /// Index within the section of `index`.
  int ref_of(int index) const;
};

HybridDistribution hybrid_distribution(std::span<const double> vocab_scores, std::span<const double> geo_scores,
                                       std::span<const double> knowledge_scores);

/// Model inputs for one image, already mapped onto the model's index spaces.
struct ExampleInput {
  nn::Tensor<float> image;           ///< positions x channels
  nn::Tensor<double> geo_scalars;    ///< |G| x 6
  std::vector<int> geo_types;        ///< type-table row per entity
  std::vector<int> fact_subjects;    ///< GeoContext index per fact
  std::vector<int> fact_predicates;  ///< predicate-table row per fact

  int geo_size() const { return static_cast<int>(geo_types.size()); }
  int knowledge_size() const { return static_cast<int>(fact_subjects.size()); }
};

struct Example {
  std::string image_id;
  ExampleInput input;
  TokenizedCaption caption;  ///< refs resolved; kinds restricted to the variant
};

/// The trainable weights of the scoring head.
template <typename T>
struct HeadWeights {
  nn::Tensor<T> w_pred;   ///< predicate rows x d
  nn::Tensor<T> w_vocab;  ///< d x |V|
  nn::Tensor<T> w_geo;    ///< 1 x d
  nn::Tensor<T> w_f;      ///< 1 x d
};

template <typename T>
struct HybridScores {
  std::vector<T> vocab;
  std::vector<T> geo;
  std::vector<T> knowledge;
};

/// Scores of a single decoder state `h` (1 x d) against the vocabulary and
/// the two context embeddings under `variant`.
template <typename T>
HybridScores<T> hybrid_scores(const nn::Tensor<T>& h, const nn::Tensor<T>& emb_g, const nn::Tensor<T>& emb_k,
                              const IndicatorState& indicators, Variant variant, const HeadWeights<T>& head);

/// Fixed sinusoidal position encodings, `rows` x `dim`.
template <typename T>
nn::Tensor<T> sinusoidal_positions(int rows, int dim);

template <typename T>
struct NamedParameter {
  std::string name;
  nn::Parameter<T>* param;
};

template <typename T>
struct Linear {
  nn::Parameter<T> weight;  ///< in x out
  nn::Parameter<T> bias;    ///< 1 x out
  nn::Var operator()(nn::Graph<T>& g, nn::Var x);
};

template <typename T>
struct LayerNorm {
  nn::Parameter<T> gain;
  nn::Parameter<T> bias;
  nn::Var operator()(nn::Graph<T>& g, nn::Var x);
};

template <typename T>
struct MultiHeadAttention {
  int heads = 1;
  Linear<T> query, key, value, out;
  nn::Var operator()(nn::Graph<T>& g, nn::Var q, nn::Var kv, bool causal, double dropout);
};

/// Post-norm transformer encoder layer (self-attention, ReLU feed-forward).
template <typename T>
struct EncoderLayer {
  MultiHeadAttention<T> attn;
  Linear<T> ff1, ff2;
  LayerNorm<T> norm1, norm2;
  nn::Var operator()(nn::Graph<T>& g, nn::Var x, double dropout);
};

/// Post-norm transformer decoder layer (causal self-attention, cross-attention, feed-forward).
template <typename T>
struct DecoderLayer {
  MultiHeadAttention<T> self_attn, cross_attn;
  Linear<T> ff1, ff2;
  LayerNorm<T> norm1, norm2, norm3;
  nn::Var operator()(nn::Graph<T>& g, nn::Var x, nn::Var memory, double dropout);
};

/// The knowledge-aware captioner.
template <typename T>
class CaptionModel {
 public:
  CaptionModel(ModelConfig config, Vocabulary vocab, std::vector<std::string> type_tags,
               std::vector<std::string> predicates);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const std::vector<std::string>& type_tags() const { return type_tags_; }
  const std::vector<std::string>& predicates() const { return predicates_; }
  int predicate_rows() const { return static_cast<int>(predicates_.size()) + 1; }
  int type_row(const std::string& tag) const;
  int predicate_row(const std::string& predicate) const;

  /// All parameters in a fixed order with hierarchical names.
  std::vector<NamedParameter<T>> parameters();
  std::size_t parameter_count();

  /// Restricts the contexts to the variant, links the caption tokens against
  /// them and maps everything onto the model's index spaces.
  Example make_example(const std::string& image_id, const std::vector<std::string>& caption_tokens,
                       const GeoContext& geo, const KnowledgeContext& knowledge, nn::Tensor<float> image) const;
  ExampleInput make_input(const GeoContext& geo, const KnowledgeContext& knowledge, nn::Tensor<float> image) const;

  struct Encoded {
    nn::Var emb_g;   ///< |G| x d, valid when n_g > 0
    nn::Var emb_k;   ///< |K| x d, valid when n_k > 0
    nn::Var memory;  ///< (positions + |G| + |K|) x d
    int n_img = 0;
    int n_g = 0;
    int n_k = 0;
  };

  /// EmbG rows: Concat[geo scalars, type embedding].
  nn::Var geo_embeddings(nn::Graph<T>& g, const ExampleInput& in);
  /// EmbK rows: EmbG[subject] + predicate embedding.
  nn::Var fact_embeddings(nn::Graph<T>& g, nn::Var emb_g, const ExampleInput& in);
  /// [proj(image); enc_G(EmbG); enc_K(EmbK)].
  Encoded encode(nn::Graph<T>& g, const ExampleInput& in);
  /// Decoder input rows: BOS followed by the embedded prefix tokens, plus positions.
  nn::Var embed_prefix(nn::Graph<T>& g, const Encoded& enc, const TokenizedCaption& prefix);
  /// Decoder states for every prefix position, (|prefix| + 1) x d.
  nn::Var decode(nn::Graph<T>& g, const Encoded& enc, const TokenizedCaption& prefix);
  /// [y_v | y_e | y_f] for every decoder row; indicators from the prefix.
  nn::Var logits(nn::Graph<T>& g, nn::Var states, const Encoded& enc, const ExampleInput& in,
                 const TokenizedCaption& prefix);

  /// Mean token cross-entropy over the caption plus EOS. With `backward`,
  /// gradients are accumulated into the parameters.
  T loss(const Example& ex, bool training, Rng* rng, bool backward);

  /// The distribution for the next token after `prefix` (eval mode).
  HybridDistribution next_distribution(const ExampleInput& in, const TokenizedCaption& prefix);

  /// Greedy decoding from BOS until EOS or max_caption_len tokens.
  TokenizedCaption generate(const ExampleInput& in, const GeoContext& geo, const KnowledgeContext& knowledge);

  /// Value-level token embedding of a caption token, routed by kind.
  std::vector<T> token_embedding(const ExampleInput& in, TokenKind kind, int ref);

  HeadWeights<T> head_weights() const;
  /// Type table as a value-level embedder (float).
  TypeEmbedder type_embedder() const;
  PredicateVocabulary predicate_vocabulary() const;

  /// Copies every parameter into a model of another scalar type.
  template <typename U>
  CaptionModel<U> cast() const;

  nn::Parameter<T>& parameter(const std::string& name);

 private:
  template <typename>
  friend class CaptionModel;

  ModelConfig config_;
  Vocabulary vocab_;
  std::vector<std::string> type_tags_;
  std::vector<std::string> predicates_;
  std::map<std::string, int> type_index_;
  std::map<std::string, int> predicate_index_;

  Linear<T> image_proj_;
  std::vector<EncoderLayer<T>> geo_encoder_;
  std::vector<EncoderLayer<T>> knowledge_encoder_;
  std::vector<DecoderLayer<T>> decoder_;
  nn::Parameter<T> type_table_;
  nn::Parameter<T> predicate_table_;
  nn::Parameter<T> vocab_table_;
  nn::Parameter<T> w_pred_;
  nn::Parameter<T> w_vocab_;
  nn::Parameter<T> w_geo_;
  nn::Parameter<T> w_f_;
  nn::Tensor<T> positions_;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> validation_loss;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_loss = 0.0;
  bool early_stopped = false;
  bool reached_target = false;
};

/// Adam over per-sample steps with elementwise gradient clipping, early
/// stopping on validation loss (training loss when no validation set is
/// given) and restoration of the best parameters.
TrainResult train(CaptionModel<float>& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& validation_set,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Adam state for a parameter list.
template <typename T>
class Adam {
 public:
  Adam(std::vector<NamedParameter<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Clips gradients elementwise to [-clip, clip] (clip <= 0 disables), then steps.
  void step(double clip);
  void zero_grad();

 private:
  std::vector<NamedParameter<T>> params_;
  std::vector<nn::Tensor<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Versioned binary checkpoint: JSON header (config echo, vocabularies,
/// tensor table) followed by float32 tensor data.
void save_checkpoint(const std::string& path, CaptionModel<float>& model, const std::string& extra_json = "{}");
CaptionModel<float> load_checkpoint(const std::string& path);
/// The `extra_json` stored with a checkpoint.
std::string checkpoint_extra(const std::string& path);

}  // namespace geocap
