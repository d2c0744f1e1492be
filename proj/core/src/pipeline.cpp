#include "geocap/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <future>
#include <set>
#include <sstream>

#include <json.hpp>

#include "geocap/error.hpp"

namespace geocap {

using json = nlohmann::json;

namespace {

bool contains_run(const std::vector<std::string>& tokens, const std::vector<std::string>& run) {
  if (run.empty() || run.size() > tokens.size()) return false;
  return std::search(tokens.begin(), tokens.end(), run.begin(), run.end()) != tokens.end();
}

std::string settings_canonical(const ContextSettings& s) {
  std::ostringstream out;
  out.precision(17);
  out << "r=" << s.r << ";n=" << s.n << ";m=" << s.m << ";l2=" << s.ranker.l2 << ";tolerance=" << s.ranker.tolerance
      << ";max_epochs=" << s.ranker.max_epochs << ";seed=" << s.ranker.seed;
  return out.str();
}

json entity_json(const ContextEntity& ce) {
  return {{"id", ce.entity.id},
          {"name", ce.entity.name},
          {"lat", ce.entity.location.lat},
          {"lon", ce.entity.location.lon},
          {"size", ce.entity.size},
          {"type", ce.entity.type_tag},
          {"distance_km", ce.distance_km},
          {"azimuth_deg", ce.azimuth_deg},
          {"has_facts", ce.has_facts},
          {"fact_count", ce.fact_count},
          {"rank", ce.rank}};
}

ContextEntity entity_from_json(const json& j) {
  ContextEntity ce;
  ce.entity.id = j.at("id").get<std::string>();
  ce.entity.name = j.at("name").get<std::string>();
  ce.entity.location = GeoPoint{j.at("lat").get<double>(), j.at("lon").get<double>()};
  ce.entity.size = j.at("size").get<double>();
  ce.entity.type_tag = j.at("type").get<std::string>();
  ce.distance_km = j.at("distance_km").get<double>();
  ce.azimuth_deg = j.at("azimuth_deg").get<double>();
  ce.has_facts = j.at("has_facts").get<bool>();
  ce.fact_count = j.at("fact_count").get<int>();
  ce.rank = j.at("rank").get<int>();
  return ce;
}

json fact_json(const ContextFact& cf, bool with_score) {
  json j = {{"subject", cf.fact.subject_id},
            {"predicate", cf.fact.predicate},
            {"object", cf.fact.object_label},
            {"subject_ref", cf.subject_ref}};
  if (with_score) j["score"] = cf.score;
  return j;
}

ContextFact fact_from_json(const json& j) {
  ContextFact cf;
  cf.fact.subject_id = j.at("subject").get<std::string>();
  cf.fact.predicate = j.at("predicate").get<std::string>();
  cf.fact.object_label = j.at("object").get<std::string>();
  cf.subject_ref = j.at("subject_ref").get<int>();
  if (j.contains("score")) cf.score = j.at("score").get<double>();
  return cf;
}

Split parse_split(const std::string& name) {
  for (Split s : {Split::Train, Split::Validation, Split::Test})
    if (split_name(s) == name) return s;
  throw DataError("unknown split '" + name + "'");
}

}  // namespace

std::vector<const PreparedSample*> PreparedCorpus::split(Split s) const {
  std::vector<const PreparedSample*> out;
  for (const auto& p : samples)
    if (p.split == s) out.push_back(&p);
  return out;
}

std::vector<const PreparedSample*> PreparedCorpus::all() const {
  std::vector<const PreparedSample*> out;
  for (const auto& p : samples) out.push_back(&p);
  return out;
}

std::map<std::string, ImageContexts> PreparedCorpus::contexts() const {
  std::map<std::string, ImageContexts> out;
  for (const auto& p : samples) out.emplace(p.sample.image_id, ImageContexts{p.geo, p.knowledge});
  return out;
}

const PreparedSample& PreparedCorpus::find(const std::string& image_id) const {
  for (const auto& p : samples)
    if (p.sample.image_id == image_id) return p;
  throw DataError("image " + image_id + " is not in the corpus");
}

int ranker_label(const ContextFact& cf, const GeoContext& geo, const std::vector<std::string>& caption_tokens) {
  if (cf.subject_ref < 0 || cf.subject_ref >= static_cast<int>(geo.size())) return 0;
  const auto& name = geo.entities[static_cast<std::size_t>(cf.subject_ref)].entity.name;
  return contains_run(caption_tokens, preprocess_caption(cf.fact.object_label)) &&
                 contains_run(caption_tokens, preprocess_caption(name))
             ? 1
             : 0;
}

std::vector<RankerExample> ranker_examples(const std::vector<PreparedSample>& samples, const FactFeaturizer& featurizer,
                                           Split split) {
  std::vector<RankerExample> out;
  for (const auto& p : samples) {
    if (p.split != split) continue;
    for (const auto& cf : p.candidates)
      out.push_back(RankerExample{featurizer.featurize(cf, p.geo, true), ranker_label(cf, p.geo, p.tokens)});
  }
  return out;
}

void apply_ranker(PreparedCorpus& corpus, const FactRanker& ranker) {
  corpus.ranker = ranker;
  for (auto& p : corpus.samples) p.knowledge = build_knowledge_context(p.candidates, p.geo, ranker, corpus.settings.m);
}

PreparedCorpus prepare_corpus(const EntityStore& entities, const FactStore& facts, const std::vector<Sample>& samples,
                              const ContextSettings& settings, const FactRanker* ranker, std::size_t jobs) {
  PreparedCorpus corpus;
  corpus.settings = settings;
  corpus.seed = settings.ranker.seed;
  corpus.config_hash = hex64(fnv1a(settings_canonical(settings)));
  corpus.predicates = facts.predicates();
  std::set<std::string> types;
  for (const auto& e : entities.entities()) types.insert(e.type_tag);
  corpus.type_tags.assign(types.begin(), types.end());

  std::set<std::string> ids;
  for (const auto& s : samples)
    if (!ids.insert(s.image_id).second) throw DataError("duplicate image id " + s.image_id);

  corpus.samples.resize(samples.size());
  auto build = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      PreparedSample& p = corpus.samples[i];
      p.sample = samples[i];
      p.split = split_of(p.sample.location.lat);
      p.tokens = preprocess_caption(p.sample.caption_raw);
      p.geo = build_geo_context(entities, p.sample.location, settings.r, settings.n, facts);
      p.candidates = candidate_facts(p.geo, facts);
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(samples.size(), 1));
  if (workers == 1) {
    build(0, samples.size());
  } else {
    std::vector<std::future<void>> pending;
    const std::size_t chunk = (samples.size() + workers - 1) / workers;
    for (std::size_t b = 0; b < samples.size(); b += chunk)
      pending.push_back(std::async(std::launch::async, build, b, std::min(samples.size(), b + chunk)));
    for (auto& f : pending) f.get();
  }

  if (ranker != nullptr) {
    apply_ranker(corpus, *ranker);
  } else {
    const auto examples = ranker_examples(corpus.samples, FactFeaturizer(corpus.predicates), Split::Train);
    if (examples.empty()) throw DataError("no candidate facts in the training split to fit the ranker");
    apply_ranker(corpus, train_fact_ranker(examples, corpus.predicates, settings.ranker));
  }
  return corpus;
}

std::string ranker_to_json(const FactRanker& r, const std::string& config_hash, std::uint64_t seed) {
  json j = {{"artifact", "ranker"},
            {"config_hash", config_hash},
            {"seed", seed},
            {"predicates", r.predicates},
            {"feature_mean", r.feature_mean},
            {"feature_scale", r.feature_scale},
            {"weights", r.weights},
            {"bias", r.bias},
            {"epochs", r.epochs},
            {"final_loss", r.final_loss}};
  return j.dump(2) + "\n";
}

FactRanker ranker_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    FactRanker r;
    r.predicates = j.at("predicates").get<std::vector<std::string>>();
    r.feature_mean = j.at("feature_mean").get<std::vector<double>>();
    r.feature_scale = j.at("feature_scale").get<std::vector<double>>();
    r.weights = j.at("weights").get<std::vector<double>>();
    r.bias = j.at("bias").get<double>();
    r.epochs = j.at("epochs").get<int>();
    r.final_loss = j.at("final_loss").get<double>();
    const std::size_t dim = r.predicates.size() + FactFeaturizer::kGeometricFeatures;
    if (r.weights.size() != dim || r.feature_mean.size() != dim || r.feature_scale.size() != dim)
      throw DataError("ranker weights do not match its predicate vocabulary");
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ranker file: ") + e.what());
  }
}

void write_corpus_dir(const std::string& dir, const PreparedCorpus& corpus) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());

  std::map<std::string, std::size_t> split_counts;
  std::string lines = json{{"artifact", "contexts"}, {"config_hash", corpus.config_hash}, {"seed", corpus.seed}}.dump() + "\n";
  for (const auto& p : corpus.samples) {
    ++split_counts[std::string(split_name(p.split))];
    json geo = json::array(), cands = json::array(), kb = json::array();
    for (const auto& ce : p.geo.entities) geo.push_back(entity_json(ce));
    for (const auto& cf : p.candidates) cands.push_back(fact_json(cf, false));
    for (const auto& cf : p.knowledge.facts) kb.push_back(fact_json(cf, true));
    json rec = {{"image_id", p.sample.image_id},
                {"lat", p.sample.location.lat},
                {"lon", p.sample.location.lon},
                {"caption", p.sample.caption_raw},
                {"feature_ref", p.sample.feature_ref},
                {"split", std::string(split_name(p.split))},
                {"tokens", p.tokens},
                {"geo", geo},
                {"candidates", cands},
                {"knowledge", kb}};
    lines += rec.dump() + "\n";
  }
  json manifest = {{"artifact", "corpus"},
                   {"config_hash", corpus.config_hash},
                   {"seed", corpus.seed},
                   {"settings",
                    {{"r", corpus.settings.r},
                     {"n", corpus.settings.n},
                     {"m", corpus.settings.m},
                     {"ranker_l2", corpus.settings.ranker.l2},
                     {"ranker_tolerance", corpus.settings.ranker.tolerance},
                     {"ranker_max_epochs", corpus.settings.ranker.max_epochs},
                     {"ranker_seed", corpus.settings.ranker.seed}}},
                   {"predicates", corpus.predicates},
                   {"type_tags", corpus.type_tags},
                   {"samples", corpus.samples.size()},
                   {"splits", split_counts}};
  write_file(dir + "/contexts.jsonl", lines);
  write_file(dir + "/ranker.json", ranker_to_json(corpus.ranker, corpus.config_hash, corpus.seed));
  write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

PreparedCorpus read_corpus_dir(const std::string& dir) {
  PreparedCorpus corpus;
  try {
    const json manifest = json::parse(read_file(dir + "/manifest.json"));
    corpus.config_hash = manifest.at("config_hash").get<std::string>();
    corpus.seed = manifest.at("seed").get<std::uint64_t>();
    const auto& s = manifest.at("settings");
    corpus.settings.r = s.at("r").get<double>();
    corpus.settings.n = s.at("n").get<std::size_t>();
    corpus.settings.m = s.at("m").get<std::size_t>();
    corpus.settings.ranker.l2 = s.at("ranker_l2").get<double>();
    corpus.settings.ranker.tolerance = s.at("ranker_tolerance").get<double>();
    corpus.settings.ranker.max_epochs = s.at("ranker_max_epochs").get<int>();
    corpus.settings.ranker.seed = s.at("ranker_seed").get<std::uint64_t>();
    corpus.predicates = manifest.at("predicates").get<std::vector<std::string>>();
    corpus.type_tags = manifest.at("type_tags").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(dir + "/manifest.json: " + e.what());
  }
  corpus.ranker = ranker_from_json(read_file(dir + "/ranker.json"));

  std::istringstream in(read_file(dir + "/contexts.jsonl"));
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.contains("artifact")) continue;
      PreparedSample p;
      p.sample.image_id = j.at("image_id").get<std::string>();
      p.sample.location = GeoPoint{j.at("lat").get<double>(), j.at("lon").get<double>()};
      p.sample.caption_raw = j.at("caption").get<std::string>();
      p.sample.feature_ref = j.at("feature_ref").get<std::string>();
      p.split = parse_split(j.at("split").get<std::string>());
      p.tokens = j.at("tokens").get<std::vector<std::string>>();
      p.geo.image_location = p.sample.location;
      for (const auto& e : j.at("geo")) p.geo.entities.push_back(entity_from_json(e));
      for (const auto& f : j.at("candidates")) p.candidates.push_back(fact_from_json(f));
      for (const auto& f : j.at("knowledge")) p.knowledge.facts.push_back(fact_from_json(f));
      corpus.samples.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw DataError(dir + "/contexts.jsonl:" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

Vocabulary build_variant_vocabulary(const PreparedCorpus& corpus, const ModelConfig& config,
                                    const PretrainedVectors* pretrained) {
  std::vector<TokenizedCaption> captions;
  for (const PreparedSample* p : corpus.split(Split::Train)) {
    GeoContext geo;
    geo.image_location = p->geo.image_location;
    if (uses_geo(config.variant)) geo.entities = p->geo.entities;
    KnowledgeContext kb;
    if (uses_knowledge(config.variant)) kb = p->knowledge;
    captions.push_back(link_caption(p->tokens, geo, kb));
  }
  return build_vocabulary(captions, config.d, config.seed, 1, pretrained);
}

CaptionModel<float> make_model(const PreparedCorpus& corpus, const ModelConfig& config,
                               const PretrainedVectors* pretrained) {
  return CaptionModel<float>(config, build_variant_vocabulary(corpus, config, pretrained), corpus.type_tags,
                             corpus.predicates);
}

std::vector<Example> make_examples(const CaptionModel<float>& model, const std::vector<const PreparedSample*>& samples,
                                   const FeatureSource& features) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const PreparedSample* p : samples)
    out.push_back(model.make_example(
        p->sample.image_id, p->tokens, p->geo, p->knowledge,
        resolve_image_features(p->sample, features.dir, model.config().features, features.synthetic_fallback)));
  return out;
}

std::vector<CaptionRecord> generate_captions(CaptionModel<float>& model,
                                             const std::vector<const PreparedSample*>& samples,
                                             const FeatureSource& features) {
  std::vector<CaptionRecord> out;
  out.reserve(samples.size());
  for (const PreparedSample* p : samples) {
    const ExampleInput in = model.make_input(
        p->geo, p->knowledge,
        resolve_image_features(p->sample, features.dir, model.config().features, features.synthetic_fallback));
    out.push_back(CaptionRecord{p->sample.image_id, model.generate(in, p->geo, p->knowledge)});
  }
  return out;
}

std::vector<CaptionRecord> gold_captions(const std::vector<const PreparedSample*>& samples) {
  std::vector<CaptionRecord> out;
  out.reserve(samples.size());
  for (const PreparedSample* p : samples)
    out.push_back(CaptionRecord{p->sample.image_id, link_caption(p->tokens, p->geo, p->knowledge)});
  return out;
}

}  // namespace geocap
