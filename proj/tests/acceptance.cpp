// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 iff all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "geocap/error.hpp"
#include "geocap/pipeline.hpp"
#include "geocap/synthetic.hpp"
#include "model_fixtures.hpp"
#include "oracle_fixtures.hpp"

using namespace geocap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failures; the first few messages are kept for the report line.
class Ledger {
 public:
  void require(bool ok, const std::string& what) {
    if (ok) return;
    ++failures_;
    if (messages_.size() < 3) messages_.push_back(what);
  }
  int failures() const { return failures_; }
  std::string summary() const {
    std::string s;
    for (const auto& m : messages_) s += (s.empty() ? "" : "; ") + m;
    return s;
  }

 private:
  int failures_ = 0;
  std::vector<std::string> messages_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome finish(const Ledger& l, const std::string& ok_detail) {
  if (l.failures() == 0) return {true, ok_detail};
  return {false, std::to_string(l.failures()) + " failed checks: " + l.summary()};
}

// 1 -------------------------------------------------------------------------

Outcome model_invariants() {
  constexpr int kCases = 1000;
  constexpr double kTol = 1e-6;
  Rng rng(20240501);
  Ledger l;
  const std::array<Variant, 5> variants{Variant::Full, Variant::NoPInd, Variant::NoGInd, Variant::NoKnowledge,
                                        Variant::GeoOnly};
  for (int c = 0; c < kCases; ++c) {
    const std::string tag = "case " + std::to_string(c);
    const int d = 8 * (1 + static_cast<int>(uniform_index(rng, 3)));
    const Variant variant = variants[uniform_index(rng, variants.size())];
    const int n_geo = 1 + static_cast<int>(uniform_index(rng, 6));
    const int n_facts = static_cast<int>(uniform_index(rng, 7));
    auto model = fixtures::small_model(d, variant);
    const auto scene = fixtures::random_scene(rng, n_geo, n_facts);
    const ExampleInput in = model.make_input(scene.geo, scene.knowledge, synthetic_image_features(tag, model.config().features));

    // concatenation layout of geographic embeddings
    const TypeEmbedder types = model.type_embedder();
    for (int i = 0; i < in.geo_size(); ++i) {
      const auto routed = model.token_embedding(in, TokenKind::Entity, i);
      const auto direct = geo_embedding(scene.geo.entities[static_cast<std::size_t>(i)], types);
      l.require(routed == direct, tag + ": entity embedding layout");
      const auto scalars = geo_scalar_features(scene.geo.entities[static_cast<std::size_t>(i)]);
      for (int j = 0; j < kGeoScalarFeatures; ++j)
        l.require(routed[static_cast<std::size_t>(j)] == static_cast<float>(scalars[static_cast<std::size_t>(j)]),
                  tag + ": scalar prefix");
    }
    // fact embedding = subject embedding + predicate embedding
    const auto& pred_table = model.parameter("predicate_table").value;
    for (int k = 0; k < in.knowledge_size(); ++k) {
      const auto fact = model.token_embedding(in, TokenKind::Fact, k);
      const auto subject = model.token_embedding(in, TokenKind::Entity, in.fact_subjects[static_cast<std::size_t>(k)]);
      for (int j = 0; j < d; ++j)
        l.require(fact[static_cast<std::size_t>(j)] ==
                      subject[static_cast<std::size_t>(j)] + pred_table(in.fact_predicates[static_cast<std::size_t>(k)], j),
                  tag + ": fact additivity");
    }
    // vocabulary routing
    const int w = Vocabulary::kReserved + static_cast<int>(uniform_index(
                                              rng, static_cast<std::size_t>(model.vocabulary().size() - Vocabulary::kReserved)));
    const auto vocab_row = model.token_embedding(in, TokenKind::Vocab, w);
    for (int j = 0; j < d; ++j)
      l.require(vocab_row[static_cast<std::size_t>(j)] == model.parameter("vocab_table").value(w, j), tag + ": vocab routing");

    // positional additivity
    const TokenizedCaption prefix = fixtures::random_prefix(rng, model, in.geo_size(), in.knowledge_size(),
                                                            static_cast<int>(uniform_index(rng, 6)));
    {
      nn::Graph<float> g;
      const auto enc = model.encode(g, in);
      const auto& x = g.value(model.embed_prefix(g, enc, prefix));
      const auto pos = sinusoidal_positions<float>(x.rows(), d);
      l.require(x.rows() == static_cast<int>(prefix.size()) + 1, tag + ": prefix rows");
      for (int r = 0; r < x.rows(); ++r) {
        const auto tok = r == 0 ? model.token_embedding(in, TokenKind::Vocab, Vocabulary::kBos)
                                : model.token_embedding(in, prefix.kinds[static_cast<std::size_t>(r - 1)],
                                                        prefix.refs[static_cast<std::size_t>(r - 1)]);
        for (int j = 0; j < d; ++j)
          l.require(std::abs(x(r, j) - tok[static_cast<std::size_t>(j)] - pos(r, j)) <= kTol, tag + ": positional sum");
      }
    }

    // indicator invariants
    const IndicatorState ind =
        compute_indicators(prefix, in.fact_subjects, in.fact_predicates, model.predicate_rows());
    for (int k = 0; k < in.knowledge_size(); ++k)
      l.require((ind.g_ind[static_cast<std::size_t>(k)] == 1) ==
                    (ind.mentioned_entities.count(in.fact_subjects[static_cast<std::size_t>(k)]) == 1),
                tag + ": g_ind");
    for (int q = 0; q < model.predicate_rows(); ++q) {
      bool expect = false;
      for (int k = 0; k < in.knowledge_size(); ++k)
        expect = expect || (in.fact_predicates[static_cast<std::size_t>(k)] == q && ind.g_ind[static_cast<std::size_t>(k)] == 1);
      l.require((ind.p_ind[static_cast<std::size_t>(q)] == 1) == expect, tag + ": p_ind");
    }

    // hybrid scores on random states and context embeddings
    nn::Tensor<float> h(1, d), eg(in.geo_size(), d), ek(in.knowledge_size(), d);
    for (auto* t : {&h, &eg, &ek})
      for (auto& v : t->values()) v = static_cast<float>(uniform(rng, -1.0, 1.0));
    const auto head = model.head_weights();
    const auto s = hybrid_scores(h, eg, ek, ind, variant, head);
    l.require(static_cast<int>(s.vocab.size()) == model.vocabulary().size(), tag + ": vocab section");
    l.require(static_cast<int>(s.geo.size()) == (uses_geo(variant) ? in.geo_size() : 0), tag + ": geo section");
    l.require(static_cast<int>(s.knowledge.size()) == (uses_knowledge(variant) ? in.knowledge_size() : 0),
              tag + ": knowledge section");
    if (uses_knowledge(variant))
      for (int k = 0; k < in.knowledge_size(); ++k) {
        const float y = s.knowledge[static_cast<std::size_t>(k)];
        if (uses_g_ind(variant) && ind.g_ind[static_cast<std::size_t>(k)] == 0)
          l.require(y == 0.0f, tag + ": masked fact score not exactly zero");
        else
          l.require(y != 0.0f, tag + ": unmasked fact score is zero");
      }
    if (uses_p_ind(variant) && std::none_of(ind.p_ind.begin(), ind.p_ind.end(), [](auto v) { return v != 0; }))
      for (float y : s.vocab) l.require(y == 0.0f, tag + ": vocab scores without any active predicate");
    {
      // full == no_p_ind when the active predicate rows sum to ones
      IndicatorState one = ind;
      one.p_ind.assign(one.p_ind.size(), 0);
      const int q = static_cast<int>(uniform_index(rng, one.p_ind.size()));
      one.p_ind[static_cast<std::size_t>(q)] = 1;
      HeadWeights<float> ones = head;
      for (int j = 0; j < d; ++j) ones.w_pred(q, j) = 1.0f;
      const auto a = hybrid_scores(h, eg, ek, one, Variant::Full, ones);
      const auto b = hybrid_scores(h, eg, ek, one, Variant::NoPInd, ones);
      for (std::size_t i = 0; i < a.vocab.size(); ++i)
        l.require(std::abs(a.vocab[i] - b.vocab[i]) <= kTol * (1.0 + std::abs(b.vocab[i])), tag + ": constructed W_pred");
    }

    // normalization, shift invariance and argmax
    std::vector<double> v(s.vocab.begin(), s.vocab.end()), ge(s.geo.begin(), s.geo.end()),
        kn(s.knowledge.begin(), s.knowledge.end());
    const auto dist = hybrid_distribution(v, ge, kn);
    l.require(std::abs(dist.total() - 1.0) <= kTol, tag + ": distribution sums to " + fmt("%.9f", dist.total()));
    l.require(std::all_of(dist.probs.begin(), dist.probs.end(), [](double p) { return p >= 0.0; }), tag + ": negative");
    const double shift = uniform(rng, -50.0, 50.0);
    auto shifted = [&](std::vector<double> x) {
      for (auto& e : x) e += shift;
      return x;
    };
    const auto moved = hybrid_distribution(shifted(v), shifted(ge), shifted(kn));
    for (std::size_t i = 0; i < dist.size(); ++i)
      l.require(std::abs(dist.probs[i] - moved.probs[i]) <= kTol, tag + ": shift invariance");
    std::vector<double> all = v;
    all.insert(all.end(), ge.begin(), ge.end());
    all.insert(all.end(), kn.begin(), kn.end());
    l.require(dist.argmax() == static_cast<int>(std::max_element(all.begin(), all.end()) - all.begin()), tag + ": argmax");

    // model distributions honour the variant's index space
    const auto next = model.next_distribution(in, prefix);
    l.require(std::abs(next.total() - 1.0) <= kTol, tag + ": model distribution sum");
    l.require(next.geo_size == (uses_geo(variant) ? in.geo_size() : 0) &&
                  next.knowledge_size == (uses_knowledge(variant) ? in.knowledge_size() : 0),
              tag + ": model index space");
  }
  return finish(l, std::to_string(kCases) + " fuzz cases, tol " + fmt("%.0e", kTol));
}

// 2 -------------------------------------------------------------------------

Outcome azimuth_table() {
  struct Row {
    double azimuth, north, east;
  };
  // north = |a| / 180; east = |90 - a| / 180 for a >= -90, else (90 + |a + 180|) / 180
  const std::vector<Row> table{{0, 0.0, 0.5}, {90, 0.5, 0.0}, {-90, 0.5, 1.0}, {180, 1.0, 0.5}, {-180, 1.0, 0.5}};
  Ledger l;
  for (const auto& r : table) {
    const auto n = normalize_azimuth(r.azimuth);
    l.require(n.north == r.north && n.east == r.east, "azimuth " + fmt("%.0f", r.azimuth));
  }
  const auto a = normalize_azimuth(180.0), b = normalize_azimuth(-180.0);
  l.require(a.north == b.north && a.east == b.east, "norm(180) != norm(-180)");
  for (int i = 0; i <= 3600; ++i) {
    const auto n = normalize_azimuth(-180.0 + 0.1 * i);
    l.require(n.north >= 0.0 && n.north <= 1.0 && n.east >= 0.0 && n.east <= 1.0, "component outside [0,1]");
  }
  return finish(l, "5 tabulated cases exact, continuity at +-180, 3601-point range sweep");
}

// 3 -------------------------------------------------------------------------

Outcome geo_context_oracle() {
  constexpr int kStores = 100;
  Rng rng(77);
  Ledger l;
  std::size_t queries = 0, hits = 0;
  for (int s = 0; s < kStores; ++s) {
    const std::size_t n = 1 + uniform_index(rng, 10000);
    // clustered stores exercise cell edges; some sit on the antimeridian or near a pole
    const double lat0 = s % 10 == 0 ? uniform(rng, 85.0, 89.9) : uniform(rng, -60.0, 60.0);
    const double lon0 = s % 7 == 0 ? 179.9 : uniform(rng, -180.0, 180.0);
    const double spread = s % 3 == 0 ? 0.05 : 1.0;
    std::vector<GeoEntity> ents;
    ents.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double lat = std::clamp(lat0 + uniform(rng, -spread, spread), -90.0, 90.0);
      const double lon = normalize_longitude(lon0 + uniform(rng, -spread, spread));
      ents.push_back(GeoEntity{"e" + std::to_string(i), "x", {lat, lon}, 1.0, "t"});
    }
    const EntityStore store(std::move(ents));
    for (int q = 0; q < 20; ++q) {
      const GeoPoint c = q == 0 ? store.entities()[0].location
                                : GeoPoint{std::clamp(lat0 + uniform(rng, -spread, spread), -90.0, 90.0),
                                           normalize_longitude(lon0 + uniform(rng, -spread, spread))};
      const double radius = q % 4 == 0 ? uniform(rng, 10.0, 200.0) : uniform(rng, 0.05, 5.0);
      auto got = store.within(c, radius);
      std::sort(got.begin(), got.end());
      std::vector<std::size_t> want;
      for (std::size_t i = 0; i < store.size(); ++i)
        if (haversine_distance(c, store.entities()[i].location) <= radius) want.push_back(i);
      l.require(got == want, "store " + std::to_string(s) + " query " + std::to_string(q));
      ++queries;
      hits += want.size();
    }
  }
  return finish(l, std::to_string(kStores) + " stores, " + std::to_string(queries) + " queries, " +
                       std::to_string(hits) + " matches, exact set equality");
}

// 4 -------------------------------------------------------------------------

Outcome gradient_check() {
  constexpr double kTol = 1e-4;
  constexpr double kStep = 1e-6;
  constexpr double kZeroFloor = 1e-6;
  constexpr double kZeroAbs = 1e-7;
  Ledger l;
  ModelConfig cfg = fixtures::small_config(8, Variant::Full);
  cfg.enc_layers = 2;
  cfg.dec_layers = 2;
  cfg.ff_dim = 16;
  CaptionModel<float> narrow(cfg, fixtures::small_vocabulary(8), fixtures::kTypes, fixtures::kPredicates);
  auto model = narrow.cast<double>();
  Rng rng(5);
  const auto scene = fixtures::random_scene(rng, 4, 4);
  const auto& f0 = scene.knowledge.facts[0];
  const std::string subject = "place" + std::to_string(f0.subject_ref);
  const std::vector<std::string> words{"the", subject, "built", "in", f0.fact.object_label, "over", "place3", "."};
  const Example ex = model.make_example("g", words, scene.geo, scene.knowledge,
                                        synthetic_image_features("g", cfg.features));

  auto params = model.parameters();
  for (auto& p : params) p.param->zero_grad();
  model.loss(ex, false, nullptr, true);
  std::vector<nn::Tensor<double>> analytic;
  for (auto& p : params) analytic.push_back(p.param->grad);

  double worst = 0.0;
  std::string worst_name;
  std::size_t entries = 0, zero = 0;
  std::set<std::string> live;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].param->value.values();
    const auto a = analytic[i].values();
    double diff2 = 0.0, an2 = 0.0, num2 = 0.0;
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double keep = value[j];
      value[j] = keep + kStep;
      const double up = model.loss(ex, false, nullptr, false);
      value[j] = keep - kStep;
      const double down = model.loss(ex, false, nullptr, false);
      value[j] = keep;
      const double num = (up - down) / (2.0 * kStep);
      diff2 += (num - a[j]) * (num - a[j]);
      an2 += a[j] * a[j];
      num2 += num * num;
      ++entries;
    }
    const double scale = std::max(std::sqrt(an2), std::sqrt(num2));
    // below the finite-difference noise floor the gradient is zero; compare absolutely
    if (scale < kZeroFloor) {
      ++zero;
      l.require(std::sqrt(diff2) < kZeroAbs, params[i].name + " abs " + fmt("%.2e", std::sqrt(diff2)));
      continue;
    }
    const double rel = std::sqrt(diff2) / scale;
    live.insert(params[i].name);
    if (rel > worst) {
      worst = rel;
      worst_name = params[i].name;
    }
    l.require(rel < kTol, params[i].name + " rel " + fmt("%.2e", rel));
  }
  for (const char* name : {"w_pred", "w_vocab", "w_geo", "w_f", "predicate_table", "type_table"})
    l.require(live.count(name) == 1, std::string(name) + " has no gradient");
  return finish(l, std::to_string(params.size()) + " tensors / " + std::to_string(entries) +
                       " entries in double precision, worst rel " + fmt("%.2e", worst) + " (" + worst_name +
                       "), tol " + fmt("%.0e", kTol) + "; " + std::to_string(zero) +
                       " zero-gradient tensors within " + fmt("%.0e", kZeroAbs) + " absolute");
}

// 5 and 7 -------------------------------------------------------------------

struct Overfit {
  PreparedCorpus corpus;
  KeyPhraseLexicon lexicon;
  std::vector<CaptionRecord> generated;
  MetricReport report;
  TrainResult train;
};

Overfit run_overfit() {
  const std::string dir = std::string(GEOCAP_DATA_DIR) + "/synthetic-100";
  Overfit o;
  const SynonymMap syn = load_synonyms(dir + "/synonyms.tsv");
  ContextSettings settings;
  settings.ranker.seed = 1;
  o.corpus = prepare_corpus(load_entities(dir + "/entities.tsv"), load_facts(dir + "/triples.tsv", syn),
                            load_dataset(dir + "/dataset.tsv"), settings);
  o.lexicon = load_lexicon(dir + "/lexicon.tsv");
  ModelConfig cfg = ModelConfig::tiny();
  cfg.seed = 1;
  cfg.max_epochs = 500;
  cfg.target_loss = 0.05;
  auto model = make_model(o.corpus, cfg);
  const auto samples = o.corpus.all();
  o.train = train(model, make_examples(model, samples, {}), {});
  o.generated = generate_captions(model, samples, {});
  o.report = evaluate_captions(o.generated, gold_captions(samples), o.corpus.contexts(), o.lexicon);
  return o;
}

Outcome overfit(const Overfit& o) {
  Ledger l;
  const double acc = o.report.fact_accuracy.value_or(0.0);
  l.require(o.train.best_loss < 0.1, "loss " + fmt("%.4f", o.train.best_loss));
  l.require(o.train.log.size() <= 500, "epochs " + std::to_string(o.train.log.size()));
  l.require(acc >= 90.0, "fact accuracy " + fmt("%.2f", acc));
  l.require(o.report.bleu4 >= 60.0, "BLEU-4 " + fmt("%.2f", o.report.bleu4));
  return finish(l, "loss " + fmt("%.4f", o.train.best_loss) + " < 0.1 after " + std::to_string(o.train.log.size()) +
                       " epochs (<= 500), fact accuracy " + fmt("%.2f", acc) + " >= 90, BLEU-4 " +
                       fmt("%.2f", o.report.bleu4) + " >= 60 on " + std::to_string(o.report.samples) + " samples");
}

Outcome random_fact_baseline_check(const Overfit& o) {
  constexpr int kSeeds = 30;
  constexpr double kTolPp = 5.0;
  Ledger l;
  const auto contexts = o.corpus.contexts();
  std::vector<CaptionRecord> linked = o.generated;
  for (auto& r : linked) {
    const auto& c = contexts.at(r.image_id);
    r.caption = relink_vocab_runs(r.caption, c.geo, c.knowledge);
  }
  // every knowledge context holds k year facts and nothing else
  std::set<std::size_t> ks;
  for (const auto& s : o.corpus.samples) ks.insert(s.knowledge.size());
  l.require(ks.size() == 1, "knowledge contexts differ in size");
  const double k = static_cast<double>(*ks.begin());
  const double expected = 100.0 / k;
  double sum = 0.0;
  for (int s = 0; s < kSeeds; ++s) {
    const auto perturbed = random_fact_baseline(linked, contexts, static_cast<std::uint64_t>(1000 + s));
    sum += fact_accuracy(perturbed, contexts, o.lexicon).percentage().value_or(0.0);
  }
  const double mean = sum / kSeeds;
  const double model_acc = o.report.fact_accuracy.value_or(0.0);
  l.require(std::abs(mean - expected) <= kTolPp, "baseline " + fmt("%.2f", mean) + " vs 100/k " + fmt("%.2f", expected));
  l.require(mean < model_acc, "baseline not below model accuracy");
  return finish(l, "k=" + fmt("%.0f", k) + ", mean over " + std::to_string(kSeeds) + " seeds " + fmt("%.2f", mean) +
                       " vs 100/k " + fmt("%.2f", expected) + " (tol " + fmt("%.0f", kTolPp) + " pp), model " +
                       fmt("%.2f", model_acc));
}

// 6 -------------------------------------------------------------------------

Outcome ablation() {
  const std::vector<Variant> variants{Variant::Full, Variant::NoPInd, Variant::NoGInd, Variant::GeoOnly,
                                      Variant::NoKnowledge};
  std::map<Variant, std::vector<double>> acc;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    SyntheticConfig sc;
    sc.samples = 300;
    sc.seed = 100 + seed;
    sc.validation_fraction = 0.1;
    sc.test_fraction = 0.2;
    sc.architect_probability = 0.5;
    const SyntheticCorpus sy = generate_synthetic_corpus(sc);
    ContextSettings settings;
    settings.ranker.seed = seed;
    const PreparedCorpus corpus = prepare_corpus(parse_entities(sy.entities), parse_facts(sy.triples, parse_synonyms(sy.synonyms)),
                                                 parse_dataset(sy.dataset), settings);
    const KeyPhraseLexicon lexicon = parse_lexicon(sy.lexicon);
    const auto test = corpus.split(Split::Test);
    for (Variant v : variants) {
      ModelConfig cfg = ModelConfig::tiny();
      cfg.variant = v;
      cfg.seed = seed;
      cfg.max_epochs = 30;
      cfg.target_loss = 0.02;
      auto model = make_model(corpus, cfg);
      train(model, make_examples(model, corpus.split(Split::Train), {}),
            make_examples(model, corpus.split(Split::Validation), {}));
      const auto report =
          evaluate_captions(generate_captions(model, test, {}), gold_captions(test), corpus.contexts(), lexicon);
      acc[v].push_back(report.fact_accuracy.value_or(0.0));
    }
  }
  std::map<Variant, double> mean;
  for (auto& [v, xs] : acc) mean[v] = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  Ledger l;
  const double full = mean[Variant::Full], geo = mean[Variant::GeoOnly], none = mean[Variant::NoKnowledge];
  l.require(full >= mean[Variant::NoPInd], "full < no_p_ind");
  l.require(full >= mean[Variant::NoGInd], "full < no_g_ind");
  for (Variant v : {Variant::Full, Variant::NoPInd, Variant::NoGInd})
    l.require(mean[v] > geo, std::string(variant_name(v)) + " <= geo_only");
  l.require(geo > none, "geo_only <= no_knowledge");
  l.require(none == 0.0, "no_knowledge scored " + fmt("%.2f", none));
  std::string detail = "held-out fact accuracy, mean of 3 seeds:";
  for (Variant v : variants) detail += " " + std::string(variant_name(v)) + " " + fmt("%.2f", mean[v]);
  return finish(l, detail);
}

// 8 -------------------------------------------------------------------------

Outcome metric_validation() {
  constexpr double kTol = 1e-4;
  Ledger l;
  std::vector<Tokens> cands, identity;
  std::vector<ReferenceSet> refs, identity_refs;
  for (const auto& c : oracle::kCaptions) {
    cands.push_back(split(c.candidate, ' '));
    ReferenceSet rs;
    for (const auto& r : c.references) rs.push_back(split(r, ' '));
    refs.push_back(rs);
    identity.push_back(rs[0]);
    identity_refs.push_back({rs[0]});
  }
  for (int n = 1; n <= 4; ++n)
    l.require(std::abs(bleu(cands, refs, n) - oracle::kBleu[static_cast<std::size_t>(n - 1)]) <= kTol,
              "BLEU-" + std::to_string(n));
  l.require(std::abs(rouge_l(cands, refs) - oracle::kRougeL) <= kTol, "ROUGE-L");
  const auto each = cider_scores(cands, refs);
  for (std::size_t i = 0; i < each.size(); ++i)
    l.require(std::abs(each[i] - oracle::kCiderEach[i]) <= kTol, "CIDEr-D sample " + std::to_string(i));
  l.require(std::abs(cider(cands, refs) / 100.0 - oracle::kCiderMean) <= kTol, "CIDEr-D mean");
  const auto t = welch_t_test(oracle::kSampleA, oracle::kSampleB);
  l.require(std::abs(t.t - oracle::kWelchT) <= kTol && std::abs(t.p - oracle::kWelchP) <= kTol, "Welch t-test");

  // rare-token ordering
  const std::vector<ReferenceSet> scenes{{split("the bridge over the river", ' ')},
                                         {split("the church in the village", ' ')},
                                         {split("the castle on the hill", ' ')}};
  const auto common = cider_scores({{"the"}, {"the"}, {"the"}}, scenes);
  const auto rare = cider_scores({{"bridge"}, {"church"}, {"castle"}}, scenes);
  for (std::size_t i = 0; i < 3; ++i) l.require(rare[i] > common[i], "CIDEr rare-token ordering");

  for (int n = 1; n <= 4; ++n)
    l.require(std::abs(bleu(identity, identity_refs, n) - 100.0) <= kTol, "identity BLEU-" + std::to_string(n));
  l.require(std::abs(rouge_l(identity, identity_refs) - 100.0) <= kTol, "identity ROUGE-L");
  l.require(std::abs(cider(identity, identity_refs) - 1000.0) <= kTol, "identity CIDEr-D");

  SyntheticConfig sc;
  sc.samples = 20;
  sc.architect_probability = 0.5;
  const SyntheticCorpus sy = generate_synthetic_corpus(sc);
  const PreparedCorpus corpus = prepare_corpus(parse_entities(sy.entities), parse_facts(sy.triples, parse_synonyms(sy.synonyms)),
                                               parse_dataset(sy.dataset), {});
  const auto gold = gold_captions(corpus.all());
  const auto report = evaluate_captions(gold, gold, corpus.contexts(), parse_lexicon(sy.lexicon));
  l.require(report.fact_accuracy && std::abs(*report.fact_accuracy - 100.0) <= kTol, "identity fact accuracy");
  return finish(l, "BLEU-1..4, ROUGE-L, CIDEr-D, Welch vs reference within " + fmt("%.0e", kTol) +
                       "; rare-token ordering; identity BLEU/ROUGE-L/fact accuracy 100, CIDEr-D 1000 (x100 scale)");
}

// 9 -------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const std::string& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path().string());
  return files;
}

Outcome cli_determinism() {
  const std::string root = (fs::temp_directory_path() / "geocap_acceptance_cli").string();
  const std::string d = root + "/run";
  const std::string cfg = root + "/run.ini";
  const std::vector<std::vector<std::string>> commands{
      {"--seed", "3", "synth", "--samples", "40", "--validation", "0.2", "--test", "0.2", "--architect-probability",
       "0.5", "--out", d + "/data"},
      {"ingest-geo", "--entities", d + "/data/entities.tsv", "--out", d + "/geo.json"},
      {"ingest-facts", "--triples", d + "/data/triples.tsv", "--synonyms", d + "/data/synonyms.tsv", "--out",
       d + "/facts.json"},
      {"--config", cfg, "build-contexts", "--dataset", d + "/data/dataset.tsv", "--entities", d + "/data/entities.tsv",
       "--triples", d + "/data/triples.tsv", "--synonyms", d + "/data/synonyms.tsv", "--jobs", "4", "--out",
       d + "/corpus"},
      {"train-ranker", "--corpus", d + "/corpus", "--out", d + "/ranker.json"},
      {"--config", cfg, "train", "--corpus", d + "/corpus", "--out", d + "/model.gckp"},
      {"generate", "--ckpt", d + "/model.gckp", "--dataset", d + "/corpus", "--split", "test", "--out",
       d + "/captions.jsonl"},
      {"--seed", "3", "perturb", "--captions", d + "/captions.jsonl", "--corpus", d + "/corpus", "--out",
       d + "/random.jsonl"},
      {"evaluate", "--captions", d + "/captions.jsonl", "--corpus", d + "/corpus", "--lexicon",
       d + "/data/lexicon.tsv", "--report", d + "/report.json", "--compare", d + "/random.jsonl"},
      {"--seed", "3", "demo", "--out", d + "/demo"},
  };
  Ledger l;
  std::vector<std::map<std::string, std::string>> runs;
  for (int r = 0; r < 2; ++r) {
    fs::remove_all(root);
    fs::create_directories(root);
    write_file(cfg, "[model]\nd = 16\nff_dim = 32\nmax_epochs = 5\n[run]\nseed = 3\n");
    for (const auto& c : commands) {
      std::ostringstream out, err;
      const int code = cli::run(c, out, err);
      l.require(code == 0, c[c.size() > 2 && c[0] == "--seed" ? 2 : (c[0] == "--config" ? 2 : 0)] + " exited " +
                               std::to_string(code) + ": " + err.str());
    }
    runs.push_back(snapshot(d));
  }
  fs::remove_all(root);
  l.require(runs[0].size() == runs[1].size(), "different file sets");
  std::size_t bytes = 0;
  for (const auto& [name, content] : runs[0]) {
    auto it = runs[1].find(name);
    l.require(it != runs[1].end() && it->second == content, name + " differs");
    bytes += content.size();
  }
  return finish(l, std::to_string(commands.size()) + " commands run twice, " + std::to_string(runs[0].size()) +
                       " artifacts (" + std::to_string(bytes) + " bytes) byte-identical");
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  std::optional<Overfit> overfit_run;
  auto overfit_once = [&]() -> const Overfit& {
    if (!overfit_run) overfit_run = run_overfit();
    return *overfit_run;
  };
  const std::vector<Criterion> criteria{
      {1, "model invariants", model_invariants},
      {2, "azimuth normalization", azimuth_table},
      {3, "geographic context oracle", geo_context_oracle},
      {4, "gradient check", gradient_check},
      {5, "overfit reproduction", [&] { return overfit(overfit_once()); }},
      {6, "ablation ordering", ablation},
      {7, "random-fact baseline", [&] { return random_fact_baseline_check(overfit_once()); }},
      {8, "metric validation", metric_validation},
      {9, "CLI determinism", cli_determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && only.count(c.id) == 0) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  const std::size_t ran = only.empty() ? criteria.size() : only.size();
  std::printf("%d/%zu criteria passed\n", static_cast<int>(ran) - failed, ran);
  return failed == 0 ? 0 : 1;
}
