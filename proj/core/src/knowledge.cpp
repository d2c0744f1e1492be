#include "geocap/knowledge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "geocap/error.hpp"

namespace geocap {

SynonymMap::SynonymMap(std::map<std::string, std::string> entries) : entries_(std::move(entries)) {
  // Canonical predicates must be fixed points, otherwise merging is not idempotent.
  for (const auto& [raw, canon] : entries_) {
    auto it = entries_.find(canon);
    if (it != entries_.end() && it->second != canon)
      throw DataError("synonym chain: '" + raw + "' -> '" + canon + "' -> '" + it->second + "'");
  }
}

const std::string& SynonymMap::canonical(const std::string& raw) const {
  auto it = entries_.find(raw);
  return it == entries_.end() ? raw : it->second;
}

SynonymMap parse_synonyms(const std::string& text, const std::string& source) {
  std::map<std::string, std::string> entries;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    auto fields = split(line, '\t');
    const std::string where = source + ":" + std::to_string(line_no);
    if (fields.size() != 2) throw DataError(where + ": expected raw<TAB>canonical");
    const std::string raw = to_lower(trim(fields[0]));
    const std::string canon = to_lower(trim(fields[1]));
    if (raw.empty() || canon.empty()) throw DataError(where + ": empty predicate");
    auto [it, inserted] = entries.emplace(raw, canon);
    if (!inserted && it->second != canon) throw DataError(where + ": conflicting entry for '" + raw + "'");
  }
  return SynonymMap(std::move(entries));
}

SynonymMap load_synonyms(const std::string& path) { return parse_synonyms(read_file(path), path); }

std::string merge_predicates(const std::string& raw, const SynonymMap& synonyms) {
  return synonyms.canonical(raw);
}

FactStore::FactStore(std::vector<Fact> facts) : facts_(std::move(facts)) {
  for (std::size_t i = 0; i < facts_.size(); ++i) by_subject_[facts_[i].subject_id].push_back(i);
}

std::vector<const Fact*> FactStore::about(const std::string& subject_id) const {
  std::vector<const Fact*> out;
  auto it = by_subject_.find(subject_id);
  if (it == by_subject_.end()) return out;
  for (std::size_t i : it->second) out.push_back(&facts_[i]);
  return out;
}

int FactStore::count_for(const std::string& subject_id) const {
  auto it = by_subject_.find(subject_id);
  return it == by_subject_.end() ? 0 : static_cast<int>(it->second.size());
}

std::vector<std::string> FactStore::predicates() const {
  std::set<std::string> s;
  for (const auto& f : facts_) s.insert(f.predicate);
  return {s.begin(), s.end()};
}

std::vector<std::string> FactStore::object_labels() const {
  std::set<std::string> s;
  for (const auto& f : facts_) s.insert(f.object_label);
  return {s.begin(), s.end()};
}

FactStore parse_facts(const std::string& text, const SynonymMap& synonyms, const std::string& source) {
  std::vector<Fact> facts;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    auto fields = split(line, '\t');
    const std::string where = source + ":" + std::to_string(line_no);
    if (fields.size() != 3) throw DataError(where + ": expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    Fact f{trim(fields[0]), merge_predicates(to_lower(trim(fields[1])), synonyms), to_lower(trim(fields[2]))};
    if (f.subject_id.empty() || f.predicate.empty() || f.object_label.empty())
      throw DataError(where + ": empty field");
    facts.push_back(std::move(f));
  }
  return FactStore(std::move(facts));
}

FactStore load_facts(const std::string& path, const SynonymMap& synonyms) {
  return parse_facts(read_file(path), synonyms, path);
}

FactStatistics fact_statistics(const FactStore& store) {
  FactStatistics st;
  st.facts = store.size();
  std::map<std::string, std::set<std::string>> preds_by_subject;
  std::map<std::string, std::size_t> facts_by_subject;
  for (const auto& f : store.facts()) {
    preds_by_subject[f.subject_id].insert(f.predicate);
    ++facts_by_subject[f.subject_id];
  }
  st.subjects = facts_by_subject.size();
  st.predicates = store.predicates().size();
  if (st.subjects > 0) {
    std::size_t pred_total = 0;
    for (const auto& [s, p] : preds_by_subject) pred_total += p.size();
    st.facts_per_subject = static_cast<double>(st.facts) / st.subjects;
    st.predicates_per_subject = static_cast<double>(pred_total) / st.subjects;
  }
  return st;
}

std::vector<ContextFact> candidate_facts(const GeoContext& geo, const FactStore& store) {
  std::vector<ContextFact> out;
  for (std::size_t i = 0; i < geo.entities.size(); ++i) {
    for (const Fact* f : store.about(geo.entities[i].entity.id))
      out.push_back(ContextFact{*f, static_cast<int>(i), 0.0});
  }
  return out;
}

FactFeaturizer::FactFeaturizer(std::vector<std::string> predicates) : predicates_(std::move(predicates)) {
  for (std::size_t i = 0; i < predicates_.size(); ++i)
    if (!index_.emplace(predicates_[i], static_cast<int>(i)).second)
      throw ConfigError("duplicate predicate in featurizer: " + predicates_[i]);
}

std::vector<double> FactFeaturizer::featurize(const ContextFact& cf, const GeoContext& geo, bool strict) const {
  if (cf.subject_ref < 0 || cf.subject_ref >= static_cast<int>(geo.size()))
    throw DataError("fact subject reference outside the geographic context");
  std::vector<double> x(static_cast<std::size_t>(dim()), 0.0);
  auto it = index_.find(cf.fact.predicate);
  if (it != index_.end()) {
    x[it->second] = 1.0;
  } else if (strict) {
    throw DataError("predicate outside the ranker vocabulary: " + cf.fact.predicate);
  }
  const ContextEntity& ce = geo.entities[cf.subject_ref];
  const auto az = normalize_azimuth(ce.azimuth_deg);
  double* g = x.data() + predicates_.size();
  g[0] = ce.rank;
  g[1] = ce.distance_km;
  g[2] = az.north;
  g[3] = az.east;
  g[4] = ce.entity.size;
  g[5] = ce.has_facts ? 1.0 : 0.0;
  g[6] = ce.fact_count;
  return x;
}

double FactRanker::score(std::span<const double> features) const {
  if (features.size() != weights.size()) throw ConfigError("ranker feature dimension mismatch");
  double z = bias;
  for (std::size_t j = 0; j < features.size(); ++j) z += weights[j] * (features[j] - feature_mean[j]) / feature_scale[j];
  return z;
}

double FactRanker::probability(std::span<const double> features) const {
  return 1.0 / (1.0 + std::exp(-score(features)));
}

namespace {

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

FactRanker train_fact_ranker(const std::vector<RankerExample>& examples, std::vector<std::string> predicates,
                             const RankerTrainingConfig& config) {
  if (examples.empty()) throw DataError("no ranker training examples");
  const std::size_t dim = examples.front().features.size();
  bool has_pos = false, has_neg = false;
  for (const auto& ex : examples) {
    if (ex.features.size() != dim) throw DataError("inconsistent ranker feature dimensions");
    (ex.label ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw DataError("degenerate labels: ranker needs both classes");

  FactRanker r;
  r.predicates = std::move(predicates);
  r.feature_mean.assign(dim, 0.0);
  r.feature_scale.assign(dim, 1.0);
  const double n = static_cast<double>(examples.size());
  for (const auto& ex : examples)
    for (std::size_t j = 0; j < dim; ++j) r.feature_mean[j] += ex.features[j] / n;
  for (std::size_t j = 0; j < dim; ++j) {
    double var = 0.0;
    for (const auto& ex : examples) var += (ex.features[j] - r.feature_mean[j]) * (ex.features[j] - r.feature_mean[j]);
    var /= n;
    r.feature_scale[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }

  std::vector<std::vector<double>> z(examples.size(), std::vector<double>(dim));
  for (std::size_t i = 0; i < examples.size(); ++i)
    for (std::size_t j = 0; j < dim; ++j)
      z[i][j] = (examples[i].features[j] - r.feature_mean[j]) / r.feature_scale[j];

  Rng rng(config.seed);
  r.weights.resize(dim);
  for (auto& w : r.weights) w = uniform(rng, -0.01, 0.01);
  r.bias = 0.0;

  // Standardized features bound the Hessian trace by dim + 1, which makes this
  // step size a guaranteed descent step for the log-loss.
  const double lr = 4.0 / (static_cast<double>(dim) + 1.0);

  auto objective = [&](std::vector<double>* grad_w, double* grad_b) {
    double loss = 0.0;
    if (grad_w) std::fill(grad_w->begin(), grad_w->end(), 0.0);
    if (grad_b) *grad_b = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      double s = r.bias;
      for (std::size_t j = 0; j < dim; ++j) s += r.weights[j] * z[i][j];
      const double y = examples[i].label ? 1.0 : 0.0;
      loss += softplus(s) - y * s;
      if (grad_w) {
        const double d = (sigmoid(s) - y) / n;
        for (std::size_t j = 0; j < dim; ++j) (*grad_w)[j] += d * z[i][j];
        *grad_b += d;
      }
    }
    loss /= n;
    double reg = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      reg += r.weights[j] * r.weights[j];
      if (grad_w) (*grad_w)[j] += config.l2 * r.weights[j];
    }
    return loss + 0.5 * config.l2 * reg;
  };

  std::vector<double> gw(dim);
  double gb = 0.0;
  double loss = objective(&gw, &gb);
  int epoch = 0;
  while (epoch < config.max_epochs) {
    for (std::size_t j = 0; j < dim; ++j) r.weights[j] -= lr * gw[j];
    r.bias -= lr * gb;
    ++epoch;
    const double next = objective(&gw, &gb);
    if (!std::isfinite(next)) throw NumericError("ranker training diverged");
    const double rel = std::abs(loss - next) / std::max(std::abs(loss), 1e-300);
    loss = next;
    if (rel < config.tolerance) break;
  }
  r.epochs = epoch;
  r.final_loss = loss;
  return r;
}

KnowledgeContext build_knowledge_context(std::vector<ContextFact> candidates, const GeoContext& geo,
                                         const FactRanker& ranker, std::size_t max_facts) {
  const FactFeaturizer featurizer = ranker.featurizer();
  for (auto& cf : candidates) cf.score = ranker.score(featurizer.featurize(cf, geo, false));
  std::sort(candidates.begin(), candidates.end(), [](const ContextFact& a, const ContextFact& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.subject_ref != b.subject_ref) return a.subject_ref < b.subject_ref;
    if (a.fact.predicate != b.fact.predicate) return a.fact.predicate < b.fact.predicate;
    return a.fact.object_label < b.fact.object_label;
  });
  if (candidates.size() > max_facts) candidates.resize(max_facts);
  return KnowledgeContext{std::move(candidates)};
}

std::vector<float> fact_embedding(const ContextFact& cf, const GeoContext& geo, const TypeEmbedder& types,
                                  const PredicateVocabulary& predicates) {
  if (cf.subject_ref < 0 || cf.subject_ref >= static_cast<int>(geo.size()))
    throw DataError("fact subject reference outside the geographic context");
  std::vector<float> out = geo_embedding(geo.entities[cf.subject_ref], types);
  if (predicates.embedder.dim() != static_cast<int>(out.size()))
    throw ConfigError("predicate embedding width " + std::to_string(predicates.embedder.dim()) +
                      " does not match geographic embedding width " + std::to_string(out.size()));
  auto row = predicates.embedder.row(predicates.embedder.index_of(cf.fact.predicate));
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += row[j];
  return out;
}

}  // namespace geocap
