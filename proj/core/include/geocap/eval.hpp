#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geocap/corpus.hpp"
#include "geocap/geodata.hpp"
#include "geocap/knowledge.hpp"

namespace geocap {

using Tokens = std::vector<std::string>;
/// One or more references per candidate.
using ReferenceSet = std::vector<Tokens>;

/// Corpus BLEU-n (uniform weights over 1..n, closest reference length for
/// the brevity penalty), scaled to 0-100.
double bleu(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references, int n);

/// Mean sentence ROUGE-L F-measure (beta = 1.2, best reference), x100.
double rouge_l(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references);

/// Per-candidate CIDEr-D (n = 1..4, sigma = 6, document frequencies over the
/// references), in the coco-caption scale.
std::vector<double> cider_scores(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references);

/// Mean CIDEr-D x100.
double cider(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references);

/// Suffix-stripping stem used by the METEOR alignment.
std::string light_stem(const std::string& word);

struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
  double precision = 0.0;
  double recall = 0.0;
  double fmean = 0.0;
  double penalty = 0.0;
  double score = 0.0;
};

/// Exact-then-stem unigram alignment of one candidate against one reference.
/// Fmean = 10PR / (R + 9P), penalty = 0.5 (chunks / matches)^3.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);

/// Mean over candidates of the best-reference simplified METEOR, x100.
double meteor_simplified(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references);

/// canonical predicate -> trigger phrases (each a token sequence).
class KeyPhraseLexicon {
 public:
  KeyPhraseLexicon() = default;
  explicit KeyPhraseLexicon(std::map<std::string, std::vector<Tokens>> phrases);

  bool contains(const std::string& predicate) const { return phrases_.count(predicate) != 0; }
  const std::vector<Tokens>& phrases(const std::string& predicate) const;
  const std::map<std::string, std::vector<Tokens>>& entries() const { return phrases_; }

 private:
  std::map<std::string, std::vector<Tokens>> phrases_;
};

/// Lines of `predicate<TAB>phrase|phrase|...`; '#' starts a comment line.
KeyPhraseLexicon parse_lexicon(const std::string& text, const std::string& source = "<memory>");
KeyPhraseLexicon load_lexicon(const std::string& path);

inline constexpr int kTriggerWindow = 5;

/// The contexts built for one image.
struct ImageContexts {
  GeoContext geo;
  KnowledgeContext knowledge;
};

struct CaptionRecord {
  std::string image_id;
  TokenizedCaption caption;
};

struct FactVerdict {
  std::string image_id;
  int position = 0;
  int fact_ref = -1;
  std::string subject_id;
  std::string predicate;
  std::string object_label;
  bool subject_in_context = false;
  bool subject_mentioned = false;
  bool trigger_found = false;
  bool lexicon_missing = false;
  bool correct = false;
};

struct FactAccuracy {
  std::size_t generated = 0;
  std::size_t correct = 0;
  std::size_t lexicon_missing = 0;
  std::vector<FactVerdict> verdicts;

  /// 100 * correct / generated; empty when no fact was generated.
  std::optional<double> percentage() const;
};

/// Checks every FACT token: its subject lies in the image's geographic
/// context, the subject's name occurs among the ENTITY tokens, and a trigger
/// phrase of its predicate ends within kTriggerWindow VOCAB tokens before it.
FactVerdict judge_fact(const std::string& image_id, const TokenizedCaption& caption, std::size_t position,
                       const ImageContexts& contexts, const KeyPhraseLexicon& lexicon);
FactAccuracy fact_accuracy(const std::vector<CaptionRecord>& generated,
                           const std::map<std::string, ImageContexts>& contexts, const KeyPhraseLexicon& lexicon);

/// All-digit labels of 3 or 4 characters are years; everything else is a name.
bool is_year_like(const std::string& label);

struct PerturbStats {
  std::size_t fact_tokens = 0;
  std::size_t replaced = 0;
  /// FACT tokens whose class has no other candidate in the knowledge context.
  std::size_t without_alternative = 0;
};

/// Replaces every FACT token by a uniformly drawn fact of the same object class
/// from the same knowledge context (the original included).
std::vector<CaptionRecord> random_fact_baseline(const std::vector<CaptionRecord>& generated,
                                                const std::map<std::string, ImageContexts>& contexts,
                                                std::uint64_t seed, PerturbStats* stats = nullptr);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

/// Two-sided Welch two-sample t-test.
TTest welch_t_test(std::span<const double> a, std::span<const double> b);

struct MetricReport {
  std::size_t samples = 0;
  double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
  double rouge_l = 0.0;
  double meteor = 0.0;
  double cider = 0.0;
  std::optional<double> fact_accuracy;
  std::size_t generated_facts = 0;
  std::size_t correct_facts = 0;
  std::size_t lexicon_missing = 0;
  std::vector<double> per_sample_cider;
  std::vector<FactVerdict> verdicts;
  std::optional<TTest> cider_t_test;
  std::string notes;

  bool operator==(const MetricReport&) const;
};

/// Scores `generated` against the gold captions. With `relink`, maximal VOCAB
/// runs of the generated captions are linked against the image contexts first,
/// so object labels produced from the word vocabulary count as facts.
MetricReport evaluate_captions(const std::vector<CaptionRecord>& generated, const std::vector<CaptionRecord>& gold,
                               const std::map<std::string, ImageContexts>& contexts,
                               const KeyPhraseLexicon& lexicon, bool relink = true);

std::string report_to_json(const MetricReport& report);
MetricReport report_from_json(const std::string& text);

/// Aligned metric table followed by one line per fact verdict.
std::string format_report_table(const MetricReport& report);

/// One JSON object per line: image_id, tokens, kinds, refs. A non-empty
/// `header_json` object is written first; lines with an "artifact" member are
/// skipped when parsing.
std::string format_captions(const std::vector<CaptionRecord>& records, const std::string& header_json = "");
std::vector<CaptionRecord> parse_captions(const std::string& text, const std::string& source = "<memory>");

}  // namespace geocap
