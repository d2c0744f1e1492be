#include "cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <ostream>
#include <regex>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <CLI11.hpp>
#include <json.hpp>

#include "geocap/corpus.hpp"
#include "geocap/error.hpp"
#include "geocap/eval.hpp"
#include "geocap/geodata.hpp"
#include "geocap/knowledge.hpp"
#include "geocap/pipeline.hpp"
#include "geocap/synthetic.hpp"
#include "geocap/util.hpp"

namespace geocap::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kToolVersion = "geocap 0.1.0";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string resolve_path(const std::string& base_dir, const std::string& value) {
  if (value.empty() || value == "synthetic") return value;
  fs::path p(value);
  if (p.is_absolute() || base_dir.empty()) return p.lexically_normal().string();
  return (fs::path(base_dir) / p).lexically_normal().string();
}

std::string* path_slot(RunConfig& rc, const std::string& key) {
  static const std::map<std::string, std::string RunConfig::*> slots{
      {"dataset", &RunConfig::dataset},   {"entities", &RunConfig::entities}, {"triples", &RunConfig::triples},
      {"synonyms", &RunConfig::synonyms}, {"lexicon", &RunConfig::lexicon},   {"features", &RunConfig::features_dir},
      {"output", &RunConfig::output_dir}};
  auto it = slots.find(key);
  return it == slots.end() ? nullptr : &(rc.*(it->second));
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  std::istringstream in(trim(text));
  T v{};
  if (!(in >> v) || !in.eof()) throw ConfigError(where + ": '" + text + "' is not a valid number");
  return v;
}

std::string output_dir(const RunConfig& rc) {
  if (!rc.output_dir.empty()) return rc.output_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
  return "geocap-out";
}

void require_input(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError("missing required " + what + " path");
  if (!fs::exists(path)) throw DataError("missing " + what + ": " + path);
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw DataError("cannot create directory " + parent.string() + ": " + ec.message());
}

std::string content_hash(const std::string& path) {
  if (fs::is_directory(path)) {
    std::string all;
    for (const char* name : {"/manifest.json", "/contexts.jsonl", "/ranker.json"}) all += read_file(path + name);
    return hex64(fnv1a(all));
  }
  return hex64(fnv1a(read_file(path)));
}

/// Accumulates the inputs of one command into a config hash.
class HashBuilder {
 public:
  explicit HashBuilder(const std::string& command) { text_ = std::string(kToolVersion) + "\n" + command + "\n"; }
  HashBuilder& value(const std::string& key, const std::string& v) {
    text_ += key + "=" + v + "\n";
    return *this;
  }
  HashBuilder& file(const std::string& key, const std::string& path) {
    return value(key, path.empty() ? "<built-in>" : content_hash(path));
  }
  std::string str() const { return hex64(fnv1a(text_)); }

 private:
  std::string text_;
};

std::optional<std::string> embedded_hash(const std::string& path) {
  try {
    std::error_code ec;
    if (fs::is_directory(path, ec)) {
      const std::string manifest = path + "/manifest.json";
      if (!fs::exists(manifest)) return std::nullopt;
      return json::parse(read_file(manifest)).at("config_hash").get<std::string>();
    }
    if (!fs::exists(path, ec)) return std::nullopt;
    const std::string text = read_file(path);
    if (text.rfind("GCKP", 0) == 0) return json::parse(checkpoint_extra(path)).at("config_hash").get<std::string>();
    const std::string first = text.substr(0, text.find('\n'));
    if (auto j = json::parse(text, nullptr, false); !j.is_discarded() && j.is_object())
      return j.at("config_hash").get<std::string>();
    if (auto j = json::parse(first, nullptr, false); !j.is_discarded() && j.is_object())
      return j.at("config_hash").get<std::string>();
    std::smatch m;
    static const std::regex tag("config_hash=([0-9a-f]+)");
    if (std::regex_search(first, m, tag)) return m[1].str();
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

struct Session {
  std::ostream& out;
  std::ostream& err;
  bool force = false;

  /// True (after a note) when `path` already embeds `hash`.
  bool up_to_date(const std::string& path, const std::string& hash) const {
    if (force || embedded_hash(path) != hash) return false;
    out << path << " is up to date (config_hash " << hash << "); use --force to rebuild\n";
    return true;
  }
};

std::string header(const std::string& artifact, const std::string& hash, std::uint64_t seed) {
  return json{{"artifact", artifact}, {"config_hash", hash}, {"seed", seed}}.dump();
}

SynonymMap synonyms_of(const RunConfig& rc) {
  return rc.synonyms.empty() ? parse_synonyms(default_synonyms_text(), "<built-in synonyms>")
                             : load_synonyms(rc.synonyms);
}

KeyPhraseLexicon lexicon_of(const RunConfig& rc) {
  return rc.lexicon.empty() ? parse_lexicon(default_lexicon_text(), "<built-in lexicon>") : load_lexicon(rc.lexicon);
}

FeatureSource features_of(const RunConfig& rc) {
  if (rc.features_dir.empty() || rc.features_dir == "synthetic") return FeatureSource{"", true};
  return FeatureSource{rc.features_dir, false};
}

std::vector<const PreparedSample*> select_split(const PreparedCorpus& corpus, const std::string& split) {
  if (split == "all") return corpus.all();
  if (split == "train") return corpus.split(Split::Train);
  if (split == "validation") return corpus.split(Split::Validation);
  if (split == "test") return corpus.split(Split::Test);
  throw UsageError("unknown split '" + split + "' (expected all, train, validation or test)");
}

std::size_t count_facts(const std::vector<CaptionRecord>& records) {
  std::size_t n = 0;
  for (const auto& r : records)
    for (TokenKind k : r.caption.kinds) n += k == TokenKind::Fact;
  return n;
}

ContextSettings context_settings(const RunConfig& rc) {
  ContextSettings s;
  s.r = rc.model.r;
  s.n = rc.model.n;
  s.m = rc.model.m;
  s.ranker.seed = rc.seed;
  return s;
}

std::string settings_text(const ContextSettings& s) {
  return "r=" + fixed(s.r, 6) + ";n=" + std::to_string(s.n) + ";m=" + std::to_string(s.m) +
         ";seed=" + std::to_string(s.ranker.seed);
}

/// Prefixes every file with a comment line carrying the hash and seed.
SyntheticCorpus tagged(SyntheticCorpus corpus, const std::string& hash, std::uint64_t seed) {
  const std::string tag = "# geocap synthetic corpus config_hash=" + hash + " seed=" + std::to_string(seed) + "\n";
  for (std::string* text : {&corpus.entities, &corpus.triples, &corpus.dataset, &corpus.synonyms, &corpus.lexicon})
    *text = tag + *text;
  return corpus;
}

// Commands.

int cmd_ingest_geo(const Session& s, const RunConfig& rc, std::string out_path) {
  require_input(rc.entities, "entities file");
  if (out_path.empty()) out_path = output_dir(rc) + "/geo_summary.json";
  const std::string hash = HashBuilder("ingest-geo").file("entities", rc.entities).value("seed", std::to_string(rc.seed)).str();
  if (s.up_to_date(out_path, hash)) return kOk;

  const EntityStore store = load_entities(rc.entities);
  std::map<std::string, std::size_t> types;
  double lat_lo = 90, lat_hi = -90, lon_lo = 180, lon_hi = -180;
  for (const auto& e : store.entities()) {
    ++types[e.type_tag];
    lat_lo = std::min(lat_lo, e.location.lat);
    lat_hi = std::max(lat_hi, e.location.lat);
    lon_lo = std::min(lon_lo, e.location.lon);
    lon_hi = std::max(lon_hi, e.location.lon);
  }
  json j = {{"artifact", "geo_summary"}, {"config_hash", hash}, {"seed", rc.seed}, {"entities", store.size()},
            {"types", types}};
  if (store.size() > 0) j["bounds"] = {{"lat", {lat_lo, lat_hi}}, {"lon", {lon_lo, lon_hi}}};
  ensure_parent(out_path);
  write_file(out_path, j.dump(2) + "\n");
  s.out << store.size() << " entities, " << types.size() << " types -> " << out_path << "\n";
  return kOk;
}

int cmd_ingest_facts(const Session& s, const RunConfig& rc, std::string out_path) {
  require_input(rc.triples, "triples file");
  if (!rc.synonyms.empty()) require_input(rc.synonyms, "synonyms file");
  if (out_path.empty()) out_path = output_dir(rc) + "/facts_summary.json";
  const std::string hash = HashBuilder("ingest-facts")
                               .file("triples", rc.triples)
                               .file("synonyms", rc.synonyms)
                               .value("seed", std::to_string(rc.seed))
                               .str();
  if (s.up_to_date(out_path, hash)) return kOk;

  const FactStore store = load_facts(rc.triples, synonyms_of(rc));
  const FactStatistics st = fact_statistics(store);
  std::map<std::string, std::size_t> per_predicate;
  for (const auto& f : store.facts()) ++per_predicate[f.predicate];
  json j = {{"artifact", "facts_summary"},
            {"config_hash", hash},
            {"seed", rc.seed},
            {"facts", st.facts},
            {"subjects", st.subjects},
            {"predicates", st.predicates},
            {"facts_per_subject", st.facts_per_subject},
            {"predicates_per_subject", st.predicates_per_subject},
            {"predicate_counts", per_predicate}};
  ensure_parent(out_path);
  write_file(out_path, j.dump(2) + "\n");
  s.out << st.facts << " facts about " << st.subjects << " subjects, " << st.predicates << " predicates -> "
        << out_path << "\n";
  return kOk;
}

int cmd_build_contexts(const Session& s, const RunConfig& rc, std::string out_dir, const std::string& ranker_path) {
  require_input(rc.dataset, "dataset file");
  require_input(rc.entities, "entities file");
  require_input(rc.triples, "triples file");
  if (!rc.synonyms.empty()) require_input(rc.synonyms, "synonyms file");
  if (!ranker_path.empty()) require_input(ranker_path, "ranker file");
  if (out_dir.empty()) out_dir = output_dir(rc) + "/corpus";
  const ContextSettings settings = context_settings(rc);
  HashBuilder hb("build-contexts");
  hb.file("dataset", rc.dataset)
      .file("entities", rc.entities)
      .file("triples", rc.triples)
      .file("synonyms", rc.synonyms)
      .value("settings", settings_text(settings))
      .value("max_caption_len", std::to_string(rc.model.max_caption_len));
  if (!ranker_path.empty()) hb.file("ranker", ranker_path);
  const std::string hash = hb.str();
  if (s.up_to_date(out_dir, hash)) return kOk;

  const EntityStore entities = load_entities(rc.entities);
  const FactStore facts = load_facts(rc.triples, synonyms_of(rc));
  const auto samples = load_dataset(rc.dataset, rc.model.max_caption_len);
  std::optional<FactRanker> ranker;
  if (!ranker_path.empty()) ranker = ranker_from_json(read_file(ranker_path));
  PreparedCorpus corpus =
      prepare_corpus(entities, facts, samples, settings, ranker ? &*ranker : nullptr, std::max<std::size_t>(rc.jobs, 1));
  corpus.config_hash = hash;
  corpus.seed = rc.seed;
  write_corpus_dir(out_dir, corpus);
  s.out << corpus.samples.size() << " samples (train " << corpus.split(Split::Train).size() << ", validation "
        << corpus.split(Split::Validation).size() << ", test " << corpus.split(Split::Test).size() << "), ranker loss "
        << fixed(corpus.ranker.final_loss, 6) << " -> " << out_dir << "\n";
  return kOk;
}

int cmd_train_ranker(const Session& s, const RunConfig& rc, const std::string& corpus_dir, std::string out_path) {
  require_input(corpus_dir, "corpus directory");
  if (out_path.empty()) out_path = output_dir(rc) + "/ranker.json";
  const std::string hash =
      HashBuilder("train-ranker").file("corpus", corpus_dir).value("seed", std::to_string(rc.seed)).str();
  if (s.up_to_date(out_path, hash)) return kOk;

  const PreparedCorpus corpus = read_corpus_dir(corpus_dir);
  const auto examples = ranker_examples(corpus.samples, FactFeaturizer(corpus.predicates), Split::Train);
  if (examples.empty()) throw DataError(corpus_dir + ": no candidate facts in the training split");
  RankerTrainingConfig cfg = corpus.settings.ranker;
  cfg.seed = rc.seed;
  const FactRanker ranker = train_fact_ranker(examples, corpus.predicates, cfg);
  std::size_t positives = 0;
  for (const auto& e : examples) positives += e.label == 1;
  ensure_parent(out_path);
  write_file(out_path, ranker_to_json(ranker, hash, rc.seed));
  s.out << examples.size() << " training facts (" << positives << " positive), " << ranker.epochs
        << " epochs, loss " << fixed(ranker.final_loss, 6) << " -> " << out_path << "\n";
  return kOk;
}

int cmd_train(const Session& s, const RunConfig& rc, const std::string& corpus_dir, std::string out_path) {
  require_input(corpus_dir, "corpus directory");
  if (out_path.empty()) out_path = output_dir(rc) + "/model.gckp";
  ModelConfig cfg = rc.model;
  cfg.seed = rc.seed;
  cfg.validate();
  const std::string hash = HashBuilder("train")
                               .file("corpus", corpus_dir)
                               .value("model", cfg.canonical())
                               .value("features", rc.features_dir)
                               .str();
  if (s.up_to_date(out_path, hash)) return kOk;

  const PreparedCorpus corpus = read_corpus_dir(corpus_dir);
  CaptionModel<float> model = make_model(corpus, cfg);
  const FeatureSource features = features_of(rc);
  const auto train_set = make_examples(model, corpus.split(Split::Train), features);
  const auto val_set = make_examples(model, corpus.split(Split::Validation), features);
  if (train_set.empty()) throw DataError(corpus_dir + ": the training split is empty");
  s.out << "variant " << variant_name(cfg.variant) << ", " << model.parameter_count() << " parameters, "
        << train_set.size() << " training and " << val_set.size() << " validation samples\n";

  const TrainResult result = train(model, train_set, val_set, [&](const EpochLog& log) {
    if (log.epoch % 10 != 0) return;
    s.out << "epoch " << log.epoch << " train " << fixed(log.train_loss, 6);
    if (log.validation_loss) s.out << " validation " << fixed(*log.validation_loss, 6);
    s.out << "\n";
  });
  json log = json::array();
  for (const auto& e : result.log)
    log.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"validation_loss", e.validation_loss ? json(*e.validation_loss) : json(nullptr)}});
  const json extra = {{"artifact", "checkpoint"},   {"config_hash", hash},
                      {"seed", rc.seed},            {"corpus_hash", corpus.config_hash},
                      {"epochs", result.log.size()}, {"best_epoch", result.best_epoch},
                      {"best_loss", result.best_loss}, {"early_stopped", result.early_stopped},
                      {"reached_target", result.reached_target}, {"log", log}};
  ensure_parent(out_path);
  save_checkpoint(out_path, model, extra.dump());
  s.out << result.log.size() << " epochs, best loss " << fixed(result.best_loss, 6) << " at epoch "
        << result.best_epoch << " -> " << out_path << "\n";
  return kOk;
}

int cmd_generate(const Session& s, const RunConfig& rc, const std::string& ckpt, const std::string& corpus_dir,
                 std::string out_path, const std::string& split, const std::string& variant) {
  require_input(ckpt, "checkpoint");
  require_input(corpus_dir, "corpus directory");
  if (out_path.empty()) out_path = output_dir(rc) + "/captions.jsonl";
  const std::string hash = HashBuilder("generate")
                               .file("checkpoint", ckpt)
                               .file("corpus", corpus_dir)
                               .value("split", split)
                               .value("variant", variant)
                               .value("features", rc.features_dir)
                               .str();
  if (s.up_to_date(out_path, hash)) return kOk;

  CaptionModel<float> model = load_checkpoint(ckpt);
  if (!variant.empty() && parse_variant(variant) != model.config().variant)
    throw ConfigError("checkpoint " + ckpt + " was trained as variant " +
                      std::string(variant_name(model.config().variant)) + ", not " + variant);
  const PreparedCorpus corpus = read_corpus_dir(corpus_dir);
  const auto records = generate_captions(model, select_split(corpus, split), features_of(rc));
  json head = json::parse(header("captions", hash, model.config().seed));
  head["variant"] = variant_name(model.config().variant);
  head["split"] = split;
  ensure_parent(out_path);
  write_file(out_path, format_captions(records, head.dump()));
  s.out << records.size() << " captions, " << count_facts(records) << " fact tokens -> " << out_path << "\n";
  return kOk;
}

int cmd_perturb(const Session& s, const RunConfig& rc, const std::string& captions, const std::string& corpus_dir,
                std::string out_path) {
  require_input(captions, "captions file");
  require_input(corpus_dir, "corpus directory");
  if (out_path.empty()) out_path = output_dir(rc) + "/perturbed.jsonl";
  const std::string hash = HashBuilder("perturb")
                               .file("captions", captions)
                               .file("corpus", corpus_dir)
                               .value("seed", std::to_string(rc.seed))
                               .str();
  if (s.up_to_date(out_path, hash)) return kOk;

  const auto records = parse_captions(read_file(captions), captions);
  const PreparedCorpus corpus = read_corpus_dir(corpus_dir);
  PerturbStats stats;
  const auto perturbed = random_fact_baseline(records, corpus.contexts(), rc.seed, &stats);
  ensure_parent(out_path);
  write_file(out_path, format_captions(perturbed, header("perturbed_captions", hash, rc.seed)));
  s.out << stats.fact_tokens << " fact tokens, " << stats.replaced << " replaced, " << stats.without_alternative
        << " without alternative -> " << out_path << "\n";
  return kOk;
}

MetricReport evaluate_file(const std::string& captions, const PreparedCorpus& corpus, const KeyPhraseLexicon& lexicon,
                           bool relink) {
  const auto records = parse_captions(read_file(captions), captions);
  std::vector<const PreparedSample*> samples;
  for (const auto& r : records) samples.push_back(&corpus.find(r.image_id));
  return evaluate_captions(records, gold_captions(samples), corpus.contexts(), lexicon, relink);
}

int cmd_evaluate(const Session& s, const RunConfig& rc, const std::string& captions, const std::string& corpus_dir,
                 std::string report_path, const std::string& compare, bool relink) {
  require_input(captions, "captions file");
  require_input(corpus_dir, "corpus directory");
  if (!rc.lexicon.empty()) require_input(rc.lexicon, "lexicon file");
  if (!compare.empty()) require_input(compare, "comparison captions file");
  if (report_path.empty()) report_path = output_dir(rc) + "/report.json";
  HashBuilder hb("evaluate");
  hb.file("captions", captions)
      .file("corpus", corpus_dir)
      .file("lexicon", rc.lexicon)
      .value("relink", relink ? "1" : "0")
      .value("seed", std::to_string(rc.seed));
  if (!compare.empty()) hb.file("compare", compare);
  const std::string hash = hb.str();
  if (s.up_to_date(report_path, hash)) {
    s.out << format_report_table(report_from_json(read_file(report_path)));
    return kOk;
  }

  const PreparedCorpus corpus = read_corpus_dir(corpus_dir);
  const KeyPhraseLexicon lexicon = lexicon_of(rc);
  MetricReport report = evaluate_file(captions, corpus, lexicon, relink);
  if (!compare.empty()) {
    const MetricReport other = evaluate_file(compare, corpus, lexicon, relink);
    report.cider_t_test = welch_t_test(report.per_sample_cider, other.per_sample_cider);
  }
  json j = json::parse(report_to_json(report));
  j["artifact"] = "report";
  j["config_hash"] = hash;
  j["seed"] = rc.seed;
  ensure_parent(report_path);
  write_file(report_path, j.dump(2) + "\n");
  s.out << format_report_table(report);
  return kOk;
}

int cmd_synth(const Session& s, const RunConfig& rc, std::string out_dir, const SyntheticConfig& base) {
  if (out_dir.empty()) out_dir = output_dir(rc) + "/synthetic";
  SyntheticConfig sc = base;
  sc.seed = rc.seed;
  const std::string hash = HashBuilder("synth")
                               .value("samples", std::to_string(sc.samples))
                               .value("year_candidates", std::to_string(sc.year_candidates))
                               .value("architect_probability", fixed(sc.architect_probability, 6))
                               .value("plain_entities", sc.plain_entities ? "1" : "0")
                               .value("validation_fraction", fixed(sc.validation_fraction, 6))
                               .value("test_fraction", fixed(sc.test_fraction, 6))
                               .value("seed", std::to_string(sc.seed))
                               .str();
  if (s.up_to_date(out_dir + "/dataset.tsv", hash)) return kOk;

  write_synthetic_corpus(out_dir, tagged(generate_synthetic_corpus(sc), hash, sc.seed));
  s.out << sc.samples << " samples -> " << out_dir << "\n";
  return kOk;
}

int cmd_demo(const Session& s, const RunConfig& rc, std::string out_dir) {
  if (out_dir.empty()) out_dir = output_dir(rc) + "/demo";
  ModelConfig cfg = ModelConfig::tiny();
  cfg.seed = rc.seed;
  cfg.target_loss = 0.05;
  const std::string report_path = out_dir + "/report.json";
  const std::string hash = HashBuilder("demo").value("model", cfg.canonical()).str();
  if (s.up_to_date(report_path, hash)) {
    s.out << format_report_table(report_from_json(read_file(report_path)));
    return kOk;
  }

  SyntheticConfig sc;
  sc.samples = 30;
  sc.seed = rc.seed;
  const SyntheticCorpus data = generate_synthetic_corpus(sc);
  write_synthetic_corpus(out_dir + "/data", tagged(data, hash, rc.seed));
  ContextSettings settings;
  settings.r = cfg.r;
  settings.n = cfg.n;
  settings.m = cfg.m;
  settings.ranker.seed = rc.seed;
  PreparedCorpus corpus = prepare_corpus(parse_entities(data.entities, "entities.tsv"),
                                         parse_facts(data.triples, parse_synonyms(data.synonyms), "triples.tsv"),
                                         parse_dataset(data.dataset, "dataset.tsv"), settings);
  corpus.config_hash = hash;
  corpus.seed = rc.seed;
  write_corpus_dir(out_dir + "/corpus", corpus);

  CaptionModel<float> model = make_model(corpus, cfg);
  const FeatureSource features{"", true};
  const TrainResult result = train(model, make_examples(model, corpus.all(), features), {});
  save_checkpoint(out_dir + "/model.gckp", model, header("checkpoint", hash, rc.seed));
  s.out << "trained " << result.log.size() << " epochs on " << corpus.samples.size() << " samples, loss "
        << fixed(result.best_loss, 6) << "\n";

  const auto records = generate_captions(model, corpus.all(), features);
  write_file(out_dir + "/captions.jsonl", format_captions(records, header("captions", hash, rc.seed)));
  const MetricReport report = evaluate_captions(records, gold_captions(corpus.all()), corpus.contexts(),
                                                parse_lexicon(data.lexicon, "lexicon.tsv"));
  json j = json::parse(report_to_json(report));
  j["artifact"] = "report";
  j["config_hash"] = hash;
  j["seed"] = rc.seed;
  write_file(report_path, j.dump(2) + "\n");
  s.out << format_report_table(report);
  return kOk;
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& base_dir, const std::string& source) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig rc;
  for (const auto& [section, node] : tree) {
    const std::string where = source + " [" + section + "]";
    if (node.empty()) throw ConfigError(source + ": key '" + section + "' is outside a section");
    if (section == "paths") {
      for (const auto& [key, value] : node) {
        std::string* slot = path_slot(rc, key);
        if (slot == nullptr) throw ConfigError(where + ": unknown key '" + key + "'");
        *slot = resolve_path(base_dir, value.data());
      }
    } else if (section == "model") {
      if (auto preset = node.get_optional<std::string>("preset")) {
        if (*preset == "tiny")
          rc.model = ModelConfig::tiny();
        else if (*preset == "large")
          rc.model = ModelConfig::large();
        else
          throw ConfigError(where + ": unknown preset '" + *preset + "' (expected tiny or large)");
      }
      json j = json::parse(config_to_json(rc.model));
      for (const auto& [key, value] : node) {
        if (key == "preset") continue;
        if (!j.contains(key) || key == "seed" || key == "variant")
          throw ConfigError(where + ": unknown key '" + key + "'");
        json& slot = j[key];
        const std::string v = value.data();
        if (slot.is_number_float())
          slot = parse_number<double>(v, where + " " + key);
        else if (slot.is_number_unsigned())
          slot = parse_number<std::uint64_t>(v, where + " " + key);
        else
          slot = parse_number<std::int64_t>(v, where + " " + key);
      }
      const Variant variant = rc.model.variant;
      rc.model = config_from_json(j.dump());
      rc.model.variant = variant;
    } else if (section == "run") {
      for (const auto& [key, value] : node) {
        if (key == "seed")
          rc.seed = parse_number<std::uint64_t>(value.data(), where + " seed");
        else if (key == "variant")
          rc.model.variant = parse_variant(trim(value.data()));
        else if (key == "jobs")
          rc.jobs = parse_number<std::size_t>(value.data(), where + " jobs");
        else
          throw ConfigError(where + ": unknown key '" + key + "'");
      }
    } else {
      throw ConfigError(source + ": unknown section [" + section + "]");
    }
  }
  rc.model.seed = rc.seed;
  rc.model.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  if (!fs::exists(path)) throw DataError("missing config file: " + path);
  return parse_run_config(read_file(path), fs::path(path).parent_path().string(), path);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge-aware image captioning from location metadata", "geocap"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir_flag, features_flag, variant_flag, lexicon_flag;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool force = false;
  app.add_option("--config", config_path, "INI run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "Seed echoed into every artifact");
  app.add_option("--out-dir", out_dir_flag, std::string("Default output directory (else $") + kOutputDirEnv + ")");
  app.add_flag("--force", force, "Rebuild artifacts that are up to date");

  std::string entities, triples, synonyms, dataset, corpus, output, ckpt, captions, report, compare, ranker;
  std::string split = "all";
  bool no_relink = false;
  SyntheticConfig synth;

  auto* ingest_geo = app.add_subcommand("ingest-geo", "Parse an entity snapshot and summarize it");
  ingest_geo->add_option("--entities", entities, "Entity snapshot TSV");
  ingest_geo->add_option("--out", output, "Summary JSON");

  auto* ingest_facts = app.add_subcommand("ingest-facts", "Parse triples, merge predicates and summarize");
  ingest_facts->add_option("--triples", triples, "Triple TSV");
  ingest_facts->add_option("--synonyms", synonyms, "Predicate synonym map");
  ingest_facts->add_option("--out", output, "Summary JSON");

  auto* build = app.add_subcommand("build-contexts", "Build geographic and knowledge contexts for a dataset");
  build->add_option("--dataset", dataset, "Dataset TSV");
  build->add_option("--entities", entities, "Entity snapshot TSV");
  build->add_option("--triples", triples, "Triple TSV");
  build->add_option("--synonyms", synonyms, "Predicate synonym map");
  build->add_option("--ranker", ranker, "Ranker JSON (default: train one on the training split)");
  build->add_option("--jobs", jobs, "Worker threads for context building")->check(CLI::PositiveNumber);
  build->add_option("--out", output, "Corpus directory");

  auto* train_ranker = app.add_subcommand("train-ranker", "Train the fact ranker on a corpus' training split");
  train_ranker->add_option("--corpus", corpus, "Corpus directory")->required();
  train_ranker->add_option("--out", output, "Ranker JSON");

  auto* train_cmd = app.add_subcommand("train", "Train a captioning model");
  train_cmd->add_option("--corpus", corpus, "Corpus directory")->required();
  train_cmd->add_option("--variant", variant_flag, "full, no_p_ind, no_g_ind, no_knowledge or geo_only");
  train_cmd->add_option("--features", features_flag, "Feature directory or 'synthetic'");
  train_cmd->add_option("--out", output, "Checkpoint path");

  auto* generate = app.add_subcommand("generate", "Generate captions greedily");
  generate->add_option("--ckpt", ckpt, "Checkpoint")->required();
  generate->add_option("--dataset", corpus, "Corpus directory built by build-contexts")->required();
  generate->add_option("--split", split, "all, train, validation or test");
  generate->add_option("--variant", variant_flag, "Expected variant of the checkpoint");
  generate->add_option("--features", features_flag, "Feature directory or 'synthetic'");
  generate->add_option("--out", output, "Captions file");

  auto* perturb = app.add_subcommand("perturb", "Replace every fact by a random same-class fact");
  perturb->add_option("--captions", captions, "Captions file")->required();
  perturb->add_option("--corpus", corpus, "Corpus directory")->required();
  perturb->add_option("--out", output, "Perturbed captions file");

  auto* evaluate = app.add_subcommand("evaluate", "Score captions and fact accuracy");
  evaluate->add_option("--captions", captions, "Captions file")->required();
  evaluate->add_option("--corpus", corpus, "Corpus directory")->required();
  evaluate->add_option("--lexicon", lexicon_flag, "Key-phrase lexicon");
  evaluate->add_option("--report", report, "Report JSON");
  evaluate->add_option("--compare", compare, "Second captions file for a CIDEr t-test");
  evaluate->add_flag("--no-relink", no_relink, "Score FACT tokens exactly as generated");

  auto* demo = app.add_subcommand("demo", "Train and evaluate the tiny model on a 30-sample synthetic corpus");
  demo->add_option("--out", output, "Demo directory");

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic corpus");
  synth_cmd->add_option("--samples", synth.samples, "Images")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--candidates", synth.year_candidates, "Year facts per image")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--architect-probability", synth.architect_probability)->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--validation", synth.validation_fraction, "Validation fraction")->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--test", synth.test_fraction, "Test fraction")->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--out", output, "Output directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    RunConfig rc = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed_opt->count() > 0) rc.seed = seed;
    rc.model.seed = rc.seed;
    if (!out_dir_flag.empty()) rc.output_dir = out_dir_flag;
    if (!entities.empty()) rc.entities = entities;
    if (!triples.empty()) rc.triples = triples;
    if (!synonyms.empty()) rc.synonyms = synonyms;
    if (!dataset.empty()) rc.dataset = dataset;
    if (!lexicon_flag.empty()) rc.lexicon = lexicon_flag;
    if (!features_flag.empty()) rc.features_dir = features_flag;
    if (build->parsed() && build->count("--jobs") > 0) rc.jobs = jobs;
    if (train_cmd->parsed() && !variant_flag.empty()) rc.model.variant = parse_variant(variant_flag);

    const Session session{out, err, force};
    if (ingest_geo->parsed()) return cmd_ingest_geo(session, rc, output);
    if (ingest_facts->parsed()) return cmd_ingest_facts(session, rc, output);
    if (build->parsed()) return cmd_build_contexts(session, rc, output, ranker);
    if (train_ranker->parsed()) return cmd_train_ranker(session, rc, corpus, output);
    if (train_cmd->parsed()) return cmd_train(session, rc, corpus, output);
    if (generate->parsed()) return cmd_generate(session, rc, ckpt, corpus, output, split, variant_flag);
    if (perturb->parsed()) return cmd_perturb(session, rc, captions, corpus, output);
    if (evaluate->parsed()) return cmd_evaluate(session, rc, captions, corpus, report, compare, !no_relink);
    if (demo->parsed()) return cmd_demo(session, rc, output);
    if (synth_cmd->parsed()) return cmd_synth(session, rc, output, synth);
    return kUsage;
  } catch (const UsageError& e) {
    err << "geocap: usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "geocap: configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "geocap: numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const DataError& e) {
    err << "geocap: data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "geocap: error: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace geocap::cli
