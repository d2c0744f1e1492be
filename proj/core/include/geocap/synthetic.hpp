#pragma once

#include <cstdint>
#include <string>

namespace geocap {

/// Controls the generated corpus. Every image has one main entity (always the
/// nearest) whose caption names it, a type-specific filler phrase and a year
/// fact introduced by the predicate's trigger phrase. The entity type fixes
/// the predicate and the year pool.
struct SyntheticConfig {
  std::size_t samples = 100;
  /// Year-valued facts per image: the main entity's plus one per distractor.
  int year_candidates = 4;
  /// Probability that the main entity also has an architect fact, which the
  /// caption then mentions ("designed by ...").
  double architect_probability = 0.0;
  /// One fact-less entity per image (a road or stream).
  bool plain_entities = true;
  double validation_fraction = 0.0;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;
};

/// File contents in the ingestion formats.
struct SyntheticCorpus {
  std::string entities;  ///< entity snapshot TSV
  std::string triples;   ///< raw-predicate triples TSV
  std::string dataset;   ///< image_id, lat, lon, caption, feature_ref
  std::string synonyms;
  std::string lexicon;
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticConfig& config);

/// Writes entities.tsv, triples.tsv, dataset.tsv, synonyms.tsv and lexicon.tsv.
void write_synthetic_corpus(const std::string& dir, const SyntheticCorpus& corpus);

/// The synonym map and key-phrase lexicon shipped with the repository.
const std::string& default_synonyms_text();
const std::string& default_lexicon_text();

}  // namespace geocap
