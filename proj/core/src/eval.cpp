#include "geocap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "geocap/error.hpp"

namespace geocap {

using json = nlohmann::json;

namespace {

using NgramCounts = std::map<std::string, int>;

NgramCounts ngram_counts(const Tokens& words, int n) {
  NgramCounts out;
  for (int k = 1; k <= n; ++k) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= words.size(); ++i) {
      std::string key;
      for (int j = 0; j < k; ++j) {
        if (j) key.push_back('\x1f');
        key += words[i + static_cast<std::size_t>(j)];
      }
      ++out[key];
    }
  }
  return out;
}

int ngram_order(const std::string& key) { return 1 + static_cast<int>(std::count(key.begin(), key.end(), '\x1f')); }

void check_pairs(std::size_t candidates, std::size_t references) {
  if (candidates == 0) throw DataError("cannot score an empty corpus");
  if (candidates != references) throw DataError("candidate and reference lists differ in length");
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double bleu(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references, int n) {
  check_pairs(candidates.size(), references.size());
  if (n < 1) throw ConfigError("BLEU order must be positive");
  std::vector<double> guess(static_cast<std::size_t>(n), 0.0), correct(static_cast<std::size_t>(n), 0.0);
  double test_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens& cand = candidates[i];
    if (references[i].empty()) throw DataError("candidate without references");
    const double len = static_cast<double>(cand.size());
    double closest = static_cast<double>(references[i][0].size());
    NgramCounts max_ref;
    for (const Tokens& ref : references[i]) {
      const double rl = static_cast<double>(ref.size());
      if (std::abs(rl - len) < std::abs(closest - len) || (std::abs(rl - len) == std::abs(closest - len) && rl < closest))
        closest = rl;
      for (const auto& [g, c] : ngram_counts(ref, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    test_len += len;
    ref_len += closest;
    for (int k = 1; k <= n; ++k) guess[static_cast<std::size_t>(k - 1)] += std::max(0.0, len - k + 1);
    for (const auto& [g, c] : ngram_counts(cand, n)) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) correct[static_cast<std::size_t>(ngram_order(g) - 1)] += std::min(c, it->second);
    }
  }
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    if (correct[static_cast<std::size_t>(k)] == 0.0) return 0.0;
    log_sum += std::log(correct[static_cast<std::size_t>(k)] / guess[static_cast<std::size_t>(k)]);
  }
  double score = std::exp(log_sum / n);
  if (test_len < ref_len) score *= std::exp(1.0 - ref_len / test_len);
  return 100.0 * score;
}

double rouge_l(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references) {
  check_pairs(candidates.size(), references.size());
  constexpr double beta = 1.2;
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens& cand = candidates[i];
    double best_p = 0.0, best_r = 0.0;
    for (const Tokens& ref : references[i]) {
      const double lcs = static_cast<double>(lcs_length(cand, ref));
      if (!cand.empty()) best_p = std::max(best_p, lcs / static_cast<double>(cand.size()));
      if (!ref.empty()) best_r = std::max(best_r, lcs / static_cast<double>(ref.size()));
    }
    if (best_p > 0.0 && best_r > 0.0)
      total += (1.0 + beta * beta) * best_p * best_r / (best_r + beta * beta * best_p);
  }
  return 100.0 * total / static_cast<double>(candidates.size());
}

std::vector<double> cider_scores(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references) {
  check_pairs(candidates.size(), references.size());
  constexpr int n = 4;
  constexpr double sigma = 6.0;

  std::vector<std::vector<NgramCounts>> ref_counts(references.size());
  std::map<std::string, double> doc_freq;
  for (std::size_t i = 0; i < references.size(); ++i) {
    std::set<std::string> seen;
    for (const Tokens& ref : references[i]) {
      ref_counts[i].push_back(ngram_counts(ref, n));
      for (const auto& [g, c] : ref_counts[i].back()) seen.insert(g);
    }
    for (const auto& g : seen) doc_freq[g] += 1.0;
  }
  const double log_refs = std::log(static_cast<double>(references.size()));

  struct Vec {
    std::array<std::map<std::string, double>, n> weights;
    std::array<double, n> norm{};
    double length = 0.0;
  };
  // Lengths count bigrams, matching the coco-caption reference scorer.
  auto to_vec = [&](const NgramCounts& counts) {
    Vec v;
    for (const auto& [g, tf] : counts) {
      auto it = doc_freq.find(g);
      const double df = std::log(std::max(1.0, it == doc_freq.end() ? 0.0 : it->second));
      const int k = ngram_order(g) - 1;
      const double w = tf * (log_refs - df);
      v.weights[static_cast<std::size_t>(k)][g] = w;
      v.norm[static_cast<std::size_t>(k)] += w * w;
      if (k == 1) v.length += tf;
    }
    for (double& x : v.norm) x = std::sqrt(x);
    return v;
  };
  auto sim = [&](const Vec& hyp, const Vec& ref) {
    const double delta = hyp.length - ref.length;
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
    std::array<double, n> val{};
    for (std::size_t k = 0; k < n; ++k) {
      for (const auto& [g, w] : hyp.weights[k]) {
        auto it = ref.weights[k].find(g);
        const double r = it == ref.weights[k].end() ? 0.0 : it->second;
        val[k] += std::min(w, r) * r;
      }
      if (hyp.norm[k] != 0.0 && ref.norm[k] != 0.0) val[k] /= hyp.norm[k] * ref.norm[k];
      val[k] *= penalty;
    }
    return val;
  };

  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Vec hyp = to_vec(ngram_counts(candidates[i], n));
    std::array<double, n> acc{};
    for (const auto& rc : ref_counts[i]) {
      const auto s = sim(hyp, to_vec(rc));
      for (std::size_t k = 0; k < n; ++k) acc[k] += s[k];
    }
    double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
    if (!ref_counts[i].empty()) mean /= static_cast<double>(ref_counts[i].size());
    scores.push_back(10.0 * mean);
  }
  return scores;
}

double cider(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references) {
  const auto s = cider_scores(candidates, references);
  return 100.0 * std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

std::string light_stem(const std::string& word) {
  static const std::pair<const char*, const char*> rules[] = {
      {"ies", "y"}, {"ing", ""}, {"ed", ""}, {"es", ""}, {"ly", ""}, {"s", ""}};
  for (const auto& [suffix, repl] : rules) {
    const std::string s(suffix);
    if (word.size() >= s.size() + 3 && word.compare(word.size() - s.size(), s.size(), s) == 0) {
      if (s == "s" && word.size() >= 2 && word[word.size() - 2] == 's') continue;
      return word.substr(0, word.size() - s.size()) + repl;
    }
  }
  return word;
}

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  MeteorAlignment a;
  std::vector<int> match(candidate.size(), -1);
  std::vector<bool> used(reference.size(), false);
  auto stage = [&](auto key) {
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (match[i] >= 0) continue;
      const std::string ci = key(candidate[i]);
      for (std::size_t j = 0; j < reference.size(); ++j) {
        if (used[j] || key(reference[j]) != ci) continue;
        match[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
    }
  };
  stage([](const std::string& w) { return w; });
  stage([](const std::string& w) { return light_stem(w); });

  int prev = -2;
  bool in_chunk = false;
  for (int j : match) {
    if (j < 0) {
      in_chunk = false;
      continue;
    }
    ++a.matches;
    if (!in_chunk || j != prev + 1) ++a.chunks;
    in_chunk = true;
    prev = j;
  }
  if (a.matches == 0) return a;
  a.precision = static_cast<double>(a.matches) / static_cast<double>(candidate.size());
  a.recall = static_cast<double>(a.matches) / static_cast<double>(reference.size());
  a.fmean = 10.0 * a.precision * a.recall / (a.recall + 9.0 * a.precision);
  a.penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / a.matches, 3.0);
  a.score = a.fmean * (1.0 - a.penalty);
  return a;
}

double meteor_simplified(const std::vector<Tokens>& candidates, const std::vector<ReferenceSet>& references) {
  check_pairs(candidates.size(), references.size());
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0.0;
    for (const Tokens& ref : references[i]) best = std::max(best, meteor_align(candidates[i], ref).score);
    total += best;
  }
  return 100.0 * total / static_cast<double>(candidates.size());
}

KeyPhraseLexicon::KeyPhraseLexicon(std::map<std::string, std::vector<Tokens>> phrases) : phrases_(std::move(phrases)) {
  for (const auto& [pred, list] : phrases_) {
    if (list.empty()) throw DataError("lexicon entry '" + pred + "' has no phrases");
    for (const auto& p : list)
      if (p.empty()) throw DataError("lexicon entry '" + pred + "' has an empty phrase");
  }
}

const std::vector<Tokens>& KeyPhraseLexicon::phrases(const std::string& predicate) const {
  static const std::vector<Tokens> none;
  auto it = phrases_.find(predicate);
  return it == phrases_.end() ? none : it->second;
}

KeyPhraseLexicon parse_lexicon(const std::string& text, const std::string& source) {
  std::map<std::string, std::vector<Tokens>> entries;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto fields = split(line, '\t');
    if (fields.size() != 2) throw DataError(where + ": expected predicate<TAB>phrases");
    const std::string pred = trim(fields[0]);
    if (pred.empty()) throw DataError(where + ": empty predicate");
    for (const auto& raw : split(fields[1], '|')) {
      Tokens phrase = preprocess_caption(raw);
      if (phrase.empty()) throw DataError(where + ": empty trigger phrase");
      entries[pred].push_back(std::move(phrase));
    }
  }
  return KeyPhraseLexicon(std::move(entries));
}

KeyPhraseLexicon load_lexicon(const std::string& path) { return parse_lexicon(read_file(path), path); }

std::optional<double> FactAccuracy::percentage() const {
  if (generated == 0) return std::nullopt;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(generated);
}

FactVerdict judge_fact(const std::string& image_id, const TokenizedCaption& caption, std::size_t position,
                       const ImageContexts& contexts, const KeyPhraseLexicon& lexicon) {
  FactVerdict v;
  v.image_id = image_id;
  v.position = static_cast<int>(position);
  v.fact_ref = caption.refs.at(position);
  if (v.fact_ref < 0 || v.fact_ref >= static_cast<int>(contexts.knowledge.size())) return v;
  const ContextFact& cf = contexts.knowledge.facts[static_cast<std::size_t>(v.fact_ref)];
  v.subject_id = cf.fact.subject_id;
  v.predicate = cf.fact.predicate;
  v.object_label = cf.fact.object_label;

  const int s = cf.subject_ref;
  v.subject_in_context = s >= 0 && s < static_cast<int>(contexts.geo.size()) &&
                         contexts.geo.entities[static_cast<std::size_t>(s)].entity.id == cf.fact.subject_id;
  if (v.subject_in_context) {
    const std::string name = join(preprocess_caption(contexts.geo.entities[static_cast<std::size_t>(s)].entity.name), " ");
    for (std::size_t i = 0; i < caption.size(); ++i)
      if (caption.kinds[i] == TokenKind::Entity && caption.tokens[i] == name) v.subject_mentioned = true;
  }

  if (!lexicon.contains(cf.fact.predicate)) {
    v.lexicon_missing = true;
    v.trigger_found = true;
  } else {
    const std::size_t lo = position >= static_cast<std::size_t>(kTriggerWindow) ? position - kTriggerWindow : 0;
    for (const Tokens& phrase : lexicon.phrases(cf.fact.predicate)) {
      if (phrase.size() > position - lo) continue;
      for (std::size_t start = lo; start + phrase.size() <= position && !v.trigger_found; ++start) {
        bool ok = true;
        for (std::size_t j = 0; j < phrase.size() && ok; ++j)
          ok = caption.kinds[start + j] == TokenKind::Vocab && caption.tokens[start + j] == phrase[j];
        v.trigger_found = ok;
      }
      if (v.trigger_found) break;
    }
  }
  v.correct = v.subject_in_context && v.subject_mentioned && v.trigger_found;
  return v;
}

FactAccuracy fact_accuracy(const std::vector<CaptionRecord>& generated,
                           const std::map<std::string, ImageContexts>& contexts, const KeyPhraseLexicon& lexicon) {
  FactAccuracy acc;
  for (const auto& rec : generated) {
    auto it = contexts.find(rec.image_id);
    if (it == contexts.end()) throw DataError("no contexts for image " + rec.image_id);
    for (std::size_t i = 0; i < rec.caption.size(); ++i) {
      if (rec.caption.kinds[i] != TokenKind::Fact) continue;
      FactVerdict v = judge_fact(rec.image_id, rec.caption, i, it->second, lexicon);
      ++acc.generated;
      if (v.correct) ++acc.correct;
      if (v.lexicon_missing) ++acc.lexicon_missing;
      acc.verdicts.push_back(std::move(v));
    }
  }
  return acc;
}

bool is_year_like(const std::string& label) {
  return (label.size() == 3 || label.size() == 4) &&
         std::all_of(label.begin(), label.end(), [](unsigned char c) { return std::isdigit(c) != 0; });
}

std::vector<CaptionRecord> random_fact_baseline(const std::vector<CaptionRecord>& generated,
                                                const std::map<std::string, ImageContexts>& contexts,
                                                std::uint64_t seed, PerturbStats* stats) {
  Rng rng(seed);
  PerturbStats local;
  std::vector<CaptionRecord> out = generated;
  for (auto& rec : out) {
    auto it = contexts.find(rec.image_id);
    if (it == contexts.end()) throw DataError("no contexts for image " + rec.image_id);
    const auto& facts = it->second.knowledge.facts;
    for (std::size_t i = 0; i < rec.caption.size(); ++i) {
      if (rec.caption.kinds[i] != TokenKind::Fact) continue;
      ++local.fact_tokens;
      const int ref = rec.caption.refs[i];
      if (ref < 0 || ref >= static_cast<int>(facts.size())) throw DataError(rec.image_id + ": fact reference out of range");
      const bool year = is_year_like(facts[static_cast<std::size_t>(ref)].fact.object_label);
      std::vector<int> pool;
      for (std::size_t j = 0; j < facts.size(); ++j)
        if (is_year_like(facts[j].fact.object_label) == year) pool.push_back(static_cast<int>(j));
      if (pool.size() <= 1) ++local.without_alternative;
      const int pick = pool[uniform_index(rng, pool.size())];
      if (pick != ref) ++local.replaced;
      rec.caption.refs[i] = pick;
      rec.caption.tokens[i] = join(preprocess_caption(facts[static_cast<std::size_t>(pick)].fact.object_label), " ");
    }
  }
  if (stats) *stats = local;
  return out;
}

TTest welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("t-test needs at least two values per sample");
  auto moments = [](std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / (n - 1.0)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  TTest r;
  if (sa + sb == 0.0) {
    r.df = na + nb - 2.0;
    r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
    r.p = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

namespace {

bool same_verdict(const FactVerdict& a, const FactVerdict& b) {
  return a.image_id == b.image_id && a.position == b.position && a.fact_ref == b.fact_ref &&
         a.subject_id == b.subject_id && a.predicate == b.predicate && a.object_label == b.object_label &&
         a.subject_in_context == b.subject_in_context && a.subject_mentioned == b.subject_mentioned &&
         a.trigger_found == b.trigger_found && a.lexicon_missing == b.lexicon_missing && a.correct == b.correct;
}

}  // namespace

bool MetricReport::operator==(const MetricReport& o) const {
  auto same_t = [](const std::optional<TTest>& x, const std::optional<TTest>& y) {
    if (x.has_value() != y.has_value()) return false;
    return !x || (x->t == y->t && x->df == y->df && x->p == y->p);
  };
  return samples == o.samples && bleu1 == o.bleu1 && bleu2 == o.bleu2 && bleu3 == o.bleu3 && bleu4 == o.bleu4 &&
         rouge_l == o.rouge_l && meteor == o.meteor && cider == o.cider && fact_accuracy == o.fact_accuracy &&
         generated_facts == o.generated_facts && correct_facts == o.correct_facts &&
         lexicon_missing == o.lexicon_missing && per_sample_cider == o.per_sample_cider &&
         std::equal(verdicts.begin(), verdicts.end(), o.verdicts.begin(), o.verdicts.end(), same_verdict) &&
         same_t(cider_t_test, o.cider_t_test) && notes == o.notes;
}

MetricReport evaluate_captions(const std::vector<CaptionRecord>& generated, const std::vector<CaptionRecord>& gold,
                               const std::map<std::string, ImageContexts>& contexts,
                               const KeyPhraseLexicon& lexicon, bool relink) {
  if (generated.empty()) throw DataError("no captions to evaluate");
  std::map<std::string, const CaptionRecord*> gold_by_id;
  for (const auto& g : gold) gold_by_id.emplace(g.image_id, &g);
  std::vector<std::string> missing;
  for (const auto& rec : generated)
    if (!gold_by_id.count(rec.image_id) || !contexts.count(rec.image_id)) missing.push_back(rec.image_id);
  if (!missing.empty()) throw DataError("captions reference unknown images: " + join(missing, ", "));

  std::vector<CaptionRecord> judged = generated;
  if (relink)
    for (auto& rec : judged) {
      const auto& ctx = contexts.at(rec.image_id);
      rec.caption = relink_vocab_runs(rec.caption, ctx.geo, ctx.knowledge);
    }

  std::vector<Tokens> cands;
  std::vector<ReferenceSet> refs;
  for (const auto& rec : generated) {
    cands.push_back(rec.caption.words());
    refs.push_back({gold_by_id.at(rec.image_id)->caption.words()});
  }
  MetricReport r;
  r.samples = generated.size();
  r.bleu1 = bleu(cands, refs, 1);
  r.bleu2 = bleu(cands, refs, 2);
  r.bleu3 = bleu(cands, refs, 3);
  r.bleu4 = bleu(cands, refs, 4);
  r.rouge_l = rouge_l(cands, refs);
  r.meteor = meteor_simplified(cands, refs);
  r.per_sample_cider = cider_scores(cands, refs);
  r.cider = 100.0 * std::accumulate(r.per_sample_cider.begin(), r.per_sample_cider.end(), 0.0) /
            static_cast<double>(r.per_sample_cider.size());
  const FactAccuracy acc = fact_accuracy(judged, contexts, lexicon);
  r.fact_accuracy = acc.percentage();
  r.generated_facts = acc.generated;
  r.correct_facts = acc.correct;
  r.lexicon_missing = acc.lexicon_missing;
  r.verdicts = acc.verdicts;
  r.notes =
      "METEOR is a simplified exact+stem unigram alignment with fragmentation penalty, not the reference tool. "
      "Fact accuracy uses automatic rules only (subject in context, subject mentioned, trigger phrase within 5 tokens).";
  return r;
}

std::string report_to_json(const MetricReport& r) {
  json j;
  j["samples"] = r.samples;
  j["metrics"] = {{"bleu1", r.bleu1}, {"bleu2", r.bleu2},   {"bleu3", r.bleu3}, {"bleu4", r.bleu4},
                  {"rouge_l", r.rouge_l}, {"meteor", r.meteor}, {"cider", r.cider}};
  j["fact_accuracy"] = r.fact_accuracy ? json(*r.fact_accuracy) : json(nullptr);
  j["generated_facts"] = r.generated_facts;
  j["correct_facts"] = r.correct_facts;
  j["lexicon_missing"] = r.lexicon_missing;
  j["per_sample_cider"] = r.per_sample_cider;
  if (r.cider_t_test) j["cider_t_test"] = {{"t", r.cider_t_test->t}, {"df", r.cider_t_test->df}, {"p", r.cider_t_test->p}};
  json verdicts = json::array();
  for (const auto& v : r.verdicts)
    verdicts.push_back({{"image_id", v.image_id},
                        {"position", v.position},
                        {"fact_ref", v.fact_ref},
                        {"subject_id", v.subject_id},
                        {"predicate", v.predicate},
                        {"object_label", v.object_label},
                        {"subject_in_context", v.subject_in_context},
                        {"subject_mentioned", v.subject_mentioned},
                        {"trigger_found", v.trigger_found},
                        {"lexicon_missing", v.lexicon_missing},
                        {"correct", v.correct}});
  j["verdicts"] = verdicts;
  j["notes"] = r.notes;
  return j.dump(2) + "\n";
}

MetricReport report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    MetricReport r;
    r.samples = j.at("samples").get<std::size_t>();
    const auto& m = j.at("metrics");
    r.bleu1 = m.at("bleu1").get<double>();
    r.bleu2 = m.at("bleu2").get<double>();
    r.bleu3 = m.at("bleu3").get<double>();
    r.bleu4 = m.at("bleu4").get<double>();
    r.rouge_l = m.at("rouge_l").get<double>();
    r.meteor = m.at("meteor").get<double>();
    r.cider = m.at("cider").get<double>();
    if (!j.at("fact_accuracy").is_null()) r.fact_accuracy = j.at("fact_accuracy").get<double>();
    r.generated_facts = j.at("generated_facts").get<std::size_t>();
    r.correct_facts = j.at("correct_facts").get<std::size_t>();
    r.lexicon_missing = j.at("lexicon_missing").get<std::size_t>();
    r.per_sample_cider = j.at("per_sample_cider").get<std::vector<double>>();
    if (j.contains("cider_t_test")) {
      const auto& t = j.at("cider_t_test");
      r.cider_t_test = TTest{t.at("t").get<double>(), t.at("df").get<double>(), t.at("p").get<double>()};
    }
    for (const auto& v : j.at("verdicts")) {
      FactVerdict f;
      f.image_id = v.at("image_id").get<std::string>();
      f.position = v.at("position").get<int>();
      f.fact_ref = v.at("fact_ref").get<int>();
      f.subject_id = v.at("subject_id").get<std::string>();
      f.predicate = v.at("predicate").get<std::string>();
      f.object_label = v.at("object_label").get<std::string>();
      f.subject_in_context = v.at("subject_in_context").get<bool>();
      f.subject_mentioned = v.at("subject_mentioned").get<bool>();
      f.trigger_found = v.at("trigger_found").get<bool>();
      f.lexicon_missing = v.at("lexicon_missing").get<bool>();
      f.correct = v.at("correct").get<bool>();
      r.verdicts.push_back(std::move(f));
    }
    r.notes = j.at("notes").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed metric report: ") + e.what());
  }
}

std::string format_report_table(const MetricReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "samples          " << r.samples << "\n";
  out << "BLEU-1           " << r.bleu1 << "\n";
  out << "BLEU-2           " << r.bleu2 << "\n";
  out << "BLEU-3           " << r.bleu3 << "\n";
  out << "BLEU-4           " << r.bleu4 << "\n";
  out << "ROUGE-L          " << r.rouge_l << "\n";
  out << "METEOR*          " << r.meteor << "\n";
  out << "CIDEr            " << r.cider << "\n";
  out << "fact accuracy    ";
  if (r.fact_accuracy)
    out << *r.fact_accuracy;
  else
    out << "n/a";
  out << " (" << r.correct_facts << "/" << r.generated_facts << ")\n";
  if (r.cider_t_test)
    out << "CIDEr t-test     t=" << r.cider_t_test->t << " df=" << r.cider_t_test->df << " p=" << std::setprecision(6)
        << r.cider_t_test->p << std::setprecision(2) << "\n";
  for (const auto& v : r.verdicts) {
    out << (v.correct ? "ok   " : "FAIL ") << v.image_id << " @" << v.position << " " << v.subject_id << " "
        << v.predicate << " " << v.object_label;
    if (!v.correct) {
      out << " [";
      if (!v.subject_in_context) out << " subject-outside-context";
      if (!v.subject_mentioned) out << " subject-not-mentioned";
      if (!v.trigger_found) out << " no-trigger";
      out << " ]";
    }
    if (v.lexicon_missing) out << " (no lexicon entry)";
    out << "\n";
  }
  return out.str();
}

std::string format_captions(const std::vector<CaptionRecord>& records, const std::string& header_json) {
  std::string out;
  if (!header_json.empty()) out += json::parse(header_json).dump() + "\n";
  for (const auto& rec : records) {
    json kinds = json::array();
    for (TokenKind k : rec.caption.kinds) kinds.push_back(std::string(kind_name(k)));
    json j = {{"image_id", rec.image_id}, {"tokens", rec.caption.tokens}, {"kinds", kinds}, {"refs", rec.caption.refs}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<CaptionRecord> parse_captions(const std::string& text, const std::string& source) {
  std::vector<CaptionRecord> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    try {
      const json j = json::parse(line);
      if (j.contains("artifact")) continue;
      CaptionRecord rec;
      rec.image_id = j.at("image_id").get<std::string>();
      const auto tokens = j.at("tokens").get<std::vector<std::string>>();
      const auto kinds = j.at("kinds").get<std::vector<std::string>>();
      const auto refs = j.at("refs").get<std::vector<int>>();
      if (tokens.size() != kinds.size() || tokens.size() != refs.size())
        throw DataError(where + ": tokens, kinds and refs differ in length");
      for (std::size_t i = 0; i < tokens.size(); ++i) rec.caption.push(tokens[i], parse_kind(kinds[i]), refs[i]);
      out.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace geocap
