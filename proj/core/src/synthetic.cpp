#include "geocap/synthetic.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <set>
#include <vector>

#include "geocap/error.hpp"
#include "geocap/geodata.hpp"
#include "geocap/util.hpp"

namespace geocap {

namespace {

struct TypeSpec {
  const char* type;
  const char* raw_predicate;
  const char* trigger;
  const char* filler;
  std::array<int, 4> years;
};

constexpr std::array<TypeSpec, 4> kTypes{{
    {"bridge", "built", "built in", "over the river", {1781, 1796, 1809, 1824}},
    {"station", "openingyear", "opened in", "on the old line", {1846, 1859, 1872, 1887}},
    {"church", "consecration", "consecrated in", "in the village", {1125, 1160, 1210, 1245}},
    {"castle", "rebuilt", "rebuilt in", "on the hill", {1320, 1365, 1410, 1455}},
}};

constexpr std::array<const char*, 2> kPlainTypes{"road", "stream"};
constexpr std::array<const char*, 5> kFirstNames{"john", "james", "william", "thomas", "robert"};

constexpr const char* kSynonyms =
    "# raw predicate\tcanonical predicate\n"
    "openingyear\topened\n"
    "opening_year\topened\n"
    "built\tbuilt_in\n"
    "yearbuilt\tbuilt_in\n"
    "architects\tarchitect\n"
    "consecration\tconsecrated\n";

constexpr const char* kLexicon =
    "# canonical predicate\ttrigger phrases separated by |\n"
    "built_in\tbuilt in|constructed in|dating back to\n"
    "opened\topened in|opened\n"
    "consecrated\tconsecrated in|consecrated\n"
    "rebuilt\trebuilt in|rebuilt\n"
    "architect\tdesigned by|architect\n";

/// Pronounceable pseudo-words; each call returns a word not handed out before.
class NameForge {
 public:
  explicit NameForge(Rng& rng) : rng_(rng) {}

  std::string next() {
    static constexpr std::array<const char*, 16> onsets{"b", "d", "f", "g", "h", "k", "l", "m",
                                                        "n", "p", "r", "s", "t", "v", "w", "br"};
    static constexpr std::array<const char*, 5> vowels{"a", "e", "i", "o", "u"};
    static constexpr std::array<const char*, 8> codas{"", "n", "r", "l", "m", "s", "th", "ck"};
    for (;;) {
      std::string w;
      const int syllables = 2 + static_cast<int>(uniform_index(rng_, 2));
      for (int s = 0; s < syllables; ++s) {
        w += onsets[uniform_index(rng_, onsets.size())];
        w += vowels[uniform_index(rng_, vowels.size())];
        if (s + 1 == syllables || uniform_index(rng_, 3) == 0) w += codas[uniform_index(rng_, codas.size())];
      }
      if (used_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string capitalize_words(const std::string& text) {
  std::string out = text;
  bool start = true;
  for (char& c : out) {
    if (start && c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    start = c == ' ';
  }
  return out;
}

GeoPoint offset(const GeoPoint& from, double km, double bearing_deg) {
  const double rad = std::numbers::pi / 180.0;
  const double ang = km / kEarthRadiusKm;
  const double lat = from.lat + ang * std::cos(bearing_deg * rad) / rad;
  const double lon = from.lon + ang * std::sin(bearing_deg * rad) / std::cos(from.lat * rad) / rad;
  return GeoPoint{std::round(lat * 1e6) / 1e6, std::round(lon * 1e6) / 1e6};
}

}  // namespace

const std::string& default_synonyms_text() {
  static const std::string text = kSynonyms;
  return text;
}

const std::string& default_lexicon_text() {
  static const std::string text = kLexicon;
  return text;
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticConfig& config) {
  if (config.samples == 0) throw ConfigError("synthetic corpus needs at least one sample");
  if (config.year_candidates < 1) throw ConfigError("year_candidates must be at least 1");
  if (config.validation_fraction < 0.0 || config.test_fraction < 0.0 ||
      config.validation_fraction + config.test_fraction > 1.0)
    throw ConfigError("split fractions must be non-negative and sum to at most 1");

  Rng rng(config.seed ^ 0x73796e7468657469ULL);
  NameForge forge(rng);
  SyntheticCorpus out;
  out.synonyms = kSynonyms;
  out.lexicon = kLexicon;
  out.entities = "# id\tname\tlat\tlon\tsize (km^2)\ttype\n";
  out.triples = "# subject\traw predicate\tobject\n";

  const auto n = config.samples;
  const auto n_test = static_cast<std::size_t>(std::llround(config.test_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(n)));
  std::vector<int> band(n, 0);
  for (std::size_t i = 0; i < n_val; ++i) band[i] = 1;
  for (std::size_t i = n_val; i < n_val + n_test && i < n; ++i) band[i] = 2;
  for (std::size_t i = n; i > 1; --i) std::swap(band[i - 1], band[uniform_index(rng, i)]);

  const std::array<double, 3> band_lat{50.5, 53.8, 55.2};
  std::array<int, 3> band_count{0, 0, 0};
  int next_entity = 0;
  auto entity_id = [&] {
    char buf[32];
    std::snprintf(buf, sizeof buf, "e%06d", next_entity++);
    return std::string(buf);
  };
  auto add_entity = [&](const std::string& id, const std::string& name, const GeoPoint& p, const std::string& type) {
    const double size = 0.1 + 1.9 * uniform01(rng);
    out.entities += id + "\t" + name + "\t" + fixed(p.lat, 6) + "\t" + fixed(p.lon, 6) + "\t" + fixed(size, 3) + "\t" +
                    type + "\n";
  };
  auto add_fact = [&](const std::string& subject, const std::string& predicate, const std::string& object) {
    out.triples += subject + "\t" + predicate + "\t" + object + "\n";
  };

  for (std::size_t i = 0; i < n; ++i) {
    const int b = band[i];
    const int j = band_count[static_cast<std::size_t>(b)]++;
    const GeoPoint image{band_lat[static_cast<std::size_t>(b)] + 0.05 * (j / 20), -5.0 + 0.1 * (j % 20)};
    char image_id[32];
    std::snprintf(image_id, sizeof image_id, "img%05zu", i);

    const TypeSpec& main_type = kTypes[uniform_index(rng, kTypes.size())];
    const std::string main_id = entity_id();
    const std::string main_name = forge.next() + " " + main_type.type;
    add_entity(main_id, main_name, offset(image, 0.05 + 0.2 * uniform01(rng), 360.0 * uniform01(rng)), main_type.type);
    const int year = main_type.years[uniform_index(rng, main_type.years.size())];
    add_fact(main_id, main_type.raw_predicate, std::to_string(year));
    std::string caption = capitalize_words(main_name) + " " + main_type.filler + ", " + main_type.trigger + " " +
                          std::to_string(year);
    if (uniform01(rng) < config.architect_probability) {
      const std::string architect =
          std::string(kFirstNames[uniform_index(rng, kFirstNames.size())]) + " " + forge.next();
      add_fact(main_id, uniform_index(rng, 2) == 0 ? "architect" : "architects", architect);
      caption += " and designed by " + capitalize_words(architect);
    }
    caption += ".";

    for (int k = 1; k < config.year_candidates; ++k) {
      const TypeSpec& t = kTypes[uniform_index(rng, kTypes.size())];
      const std::string id = entity_id();
      add_entity(id, forge.next() + " " + t.type, offset(image, 0.3 + 0.6 * uniform01(rng), 360.0 * uniform01(rng)),
                 t.type);
      add_fact(id, t.raw_predicate, std::to_string(t.years[uniform_index(rng, t.years.size())]));
    }
    if (config.plain_entities) {
      const std::string type = kPlainTypes[uniform_index(rng, kPlainTypes.size())];
      add_entity(entity_id(), forge.next() + " " + type,
                 offset(image, 0.3 + 0.6 * uniform01(rng), 360.0 * uniform01(rng)), type);
    }
    out.dataset += std::string(image_id) + "\t" + fixed(image.lat, 6) + "\t" + fixed(image.lon, 6) + "\t" +
                   escape_field(caption) + "\tsynthetic\n";
  }
  return out;
}

void write_synthetic_corpus(const std::string& dir, const SyntheticCorpus& corpus) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
  write_file(dir + "/entities.tsv", corpus.entities);
  write_file(dir + "/triples.tsv", corpus.triples);
  write_file(dir + "/dataset.tsv", corpus.dataset);
  write_file(dir + "/synonyms.tsv", corpus.synonyms);
  write_file(dir + "/lexicon.tsv", corpus.lexicon);
}

}  // namespace geocap
