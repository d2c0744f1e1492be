#pragma once

#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "geocap/geodata.hpp"

namespace geocap {

/// A knowledge-base triple. The object is an atomic label even when it spans
/// several words ("john rennie the elder").
struct Fact {
  std::string subject_id;
  std::string predicate;
  std::string object_label;

  bool operator==(const Fact&) const = default;
};

/// raw predicate -> canonical predicate. Canonical predicates map to themselves.
class SynonymMap {
 public:
  SynonymMap() = default;
  explicit SynonymMap(std::map<std::string, std::string> entries);

  const std::string& canonical(const std::string& raw) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

 private:
  std::map<std::string, std::string> entries_;
};

/// Lines of `raw<TAB>canonical`; '#' starts a comment line.
SynonymMap load_synonyms(const std::string& path);
SynonymMap parse_synonyms(const std::string& text, const std::string& source = "<memory>");

/// synonym_map[raw] if present, else raw. Idempotent.
std::string merge_predicates(const std::string& raw, const SynonymMap& synonyms);

/// Immutable triple store keyed by subject id. Insertion order is preserved.
class FactStore {
 public:
  FactStore() = default;
  explicit FactStore(std::vector<Fact> facts);

  std::size_t size() const { return facts_.size(); }
  const std::vector<Fact>& facts() const { return facts_; }
  /// Facts whose subject is `subject_id`, in file order.
  std::vector<const Fact*> about(const std::string& subject_id) const;
  int count_for(const std::string& subject_id) const;
  /// Sorted distinct canonical predicates.
  std::vector<std::string> predicates() const;
  /// Sorted distinct object labels.
  std::vector<std::string> object_labels() const;

 private:
  std::vector<Fact> facts_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_subject_;
};

/// Tab-separated subject_id, raw_predicate, object_label; predicates are merged
/// through `synonyms` while loading.
FactStore load_facts(const std::string& path, const SynonymMap& synonyms);
FactStore parse_facts(const std::string& text, const SynonymMap& synonyms,
                      const std::string& source = "<memory>");

struct FactStatistics {
  std::size_t facts = 0;
  std::size_t subjects = 0;
  std::size_t predicates = 0;
  double facts_per_subject = 0.0;
  double predicates_per_subject = 0.0;
};

FactStatistics fact_statistics(const FactStore& store);

struct ContextFact {
  Fact fact;
  int subject_ref = -1;  ///< index of the subject in the paired GeoContext
  double score = 0.0;
};

struct KnowledgeContext {
  std::vector<ContextFact> facts;

  std::size_t size() const { return facts.size(); }
  bool empty() const { return facts.empty(); }
};

/// Every stored fact whose subject appears in `geo`, linked to that entity.
/// Ordered by subject rank, then store order.
std::vector<ContextFact> candidate_facts(const GeoContext& geo, const FactStore& store);

/// Ranker features: one-hot predicate block followed by subject rank, distance,
/// normalized azimuth (2), size, has_facts and fact count.
class FactFeaturizer {
 public:
  static constexpr int kGeometricFeatures = 7;

  explicit FactFeaturizer(std::vector<std::string> predicates);

  int dim() const { return static_cast<int>(predicates_.size()) + kGeometricFeatures; }
  const std::vector<std::string>& predicates() const { return predicates_; }

  /// With `strict`, a predicate outside the vocabulary is an error; otherwise
  /// its one-hot block stays all zero.
  std::vector<double> featurize(const ContextFact& cf, const GeoContext& geo, bool strict) const;

 private:
  std::vector<std::string> predicates_;
  std::map<std::string, int> index_;
};

struct RankerTrainingConfig {
  double l2 = 1e-4;
  double tolerance = 1e-6;  ///< stop when the relative loss change drops below
  int max_epochs = 10000;
  std::uint64_t seed = 0;
};

/// Logistic-regression fact ranker. Features are standardized with the
/// training statistics before the linear map.
struct FactRanker {
  std::vector<std::string> predicates;
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;
  std::vector<double> weights;
  double bias = 0.0;
  int epochs = 0;
  double final_loss = 0.0;

  FactFeaturizer featurizer() const { return FactFeaturizer(predicates); }
  /// Linear score (the logit). Monotone in the predicted probability.
  double score(std::span<const double> features) const;
  double probability(std::span<const double> features) const;
};

struct RankerExample {
  std::vector<double> features;
  int label = 0;
};

/// Full-batch gradient descent on L2-regularized log-loss. Deterministic for a
/// fixed seed. Throws DataError when only one label class is present.
FactRanker train_fact_ranker(const std::vector<RankerExample>& examples,
                             std::vector<std::string> predicates,
                             const RankerTrainingConfig& config);

/// Scores candidates, sorts by score descending (ties by subject_ref,
/// predicate, object label) and keeps the first `max_facts`.
KnowledgeContext build_knowledge_context(std::vector<ContextFact> candidates, const GeoContext& geo,
                                         const FactRanker& ranker, std::size_t max_facts);

/// Canonical predicates plus their trainable embeddings (row 0 = unknown).
struct PredicateVocabulary {
  SynonymMap synonyms;
  LabelEmbedding embedder;

  const std::vector<std::string>& predicates() const { return embedder.labels(); }
};

/// GeoEmb(subject) + Emb_p(predicate).
std::vector<float> fact_embedding(const ContextFact& cf, const GeoContext& geo,
                                  const TypeEmbedder& types, const PredicateVocabulary& predicates);

}  // namespace geocap
