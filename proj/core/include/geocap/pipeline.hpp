#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "geocap/corpus.hpp"
#include "geocap/eval.hpp"
#include "geocap/geodata.hpp"
#include "geocap/knowledge.hpp"
#include "geocap/model.hpp"

namespace geocap {

struct ContextSettings {
  double r = 1.0;
  std::size_t n = 300;
  std::size_t m = 50;
  RankerTrainingConfig ranker;
};

/// A sample with its preprocessed caption and both contexts.
struct PreparedSample {
  Sample sample;
  Split split = Split::Train;
  std::vector<std::string> tokens;
  GeoContext geo;
  std::vector<ContextFact> candidates;
  KnowledgeContext knowledge;
};

struct PreparedCorpus {
  std::vector<PreparedSample> samples;
  std::vector<std::string> predicates;  ///< sorted canonical predicates of the fact store
  std::vector<std::string> type_tags;   ///< sorted distinct entity types
  FactRanker ranker;
  ContextSettings settings;
  std::string config_hash;
  std::uint64_t seed = 0;

  std::vector<const PreparedSample*> split(Split s) const;
  std::vector<const PreparedSample*> all() const;
  std::map<std::string, ImageContexts> contexts() const;
  const PreparedSample& find(const std::string& image_id) const;
};

/// 1 iff the fact's object label and its subject's name both occur as token
/// runs in the preprocessed caption.
int ranker_label(const ContextFact& cf, const GeoContext& geo, const std::vector<std::string>& caption_tokens);

/// Labelled candidate facts of every sample in `split`.
std::vector<RankerExample> ranker_examples(const std::vector<PreparedSample>& samples, const FactFeaturizer& featurizer,
                                           Split split = Split::Train);

/// Builds geographic contexts and candidate facts for every sample. The
/// knowledge contexts are ranked with `ranker` when given, otherwise with a
/// ranker trained on the training split. Context building fans out over
/// `jobs` threads; the result does not depend on it.
PreparedCorpus prepare_corpus(const EntityStore& entities, const FactStore& facts, const std::vector<Sample>& samples,
                              const ContextSettings& settings, const FactRanker* ranker = nullptr,
                              std::size_t jobs = 1);

/// Re-ranks every sample's candidates into a top-m knowledge context.
void apply_ranker(PreparedCorpus& corpus, const FactRanker& ranker);

std::string ranker_to_json(const FactRanker& ranker, const std::string& config_hash, std::uint64_t seed);
FactRanker ranker_from_json(const std::string& text);

/// manifest.json, contexts.jsonl and ranker.json.
void write_corpus_dir(const std::string& dir, const PreparedCorpus& corpus);
PreparedCorpus read_corpus_dir(const std::string& dir);

struct FeatureSource {
  std::string dir;
  bool synthetic_fallback = true;
};

/// Vocabulary over the VOCAB tokens of the training captions, linked under the
/// contexts the variant can see.
Vocabulary build_variant_vocabulary(const PreparedCorpus& corpus, const ModelConfig& config,
                                    const PretrainedVectors* pretrained = nullptr);

CaptionModel<float> make_model(const PreparedCorpus& corpus, const ModelConfig& config,
                               const PretrainedVectors* pretrained = nullptr);

std::vector<Example> make_examples(const CaptionModel<float>& model, const std::vector<const PreparedSample*>& samples,
                                   const FeatureSource& features);

std::vector<CaptionRecord> generate_captions(CaptionModel<float>& model,
                                             const std::vector<const PreparedSample*>& samples,
                                             const FeatureSource& features);

/// Gold captions linked against the full contexts.
std::vector<CaptionRecord> gold_captions(const std::vector<const PreparedSample*>& samples);

}  // namespace geocap
