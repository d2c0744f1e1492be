#include "geocap/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "geocap/error.hpp"

namespace geocap {

static_assert(std::endian::native == std::endian::little, "feature files assume a little-endian host");

namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

std::string strip_markup(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '<') {
      const auto close = text.find('>', i + 1);
      if (close != std::string_view::npos) {
        out += ' ';
        i = close;
        continue;
      }
    }
    out += text[i];
  }
  return out;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

}  // namespace

std::vector<std::string> preprocess_caption(std::string_view raw) {
  std::string text = to_lower(strip_markup(raw));
  replace_all(text, "&amp;", " and ");
  replace_all(text, "&", " and ");

  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    tokens.push_back(word == "saint" ? std::string("st") : word);
    word.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    const bool prev_word = !word.empty();
    const bool next_word = i + 1 < text.size() && is_word_byte(static_cast<unsigned char>(text[i + 1]));
    if (is_word_byte(c)) {
      word += static_cast<char>(c);
    } else if (c == '\'' || c == 0x60) {
      // Apostrophes are dropped inside and around words ("mary's" -> "marys").
      continue;
    } else if (c == '-' && prev_word && next_word) {
      word += '-';
    } else if ((c == '.' || c == ',') && prev_word && next_word &&
               std::isdigit(static_cast<unsigned char>(word.back())) &&
               std::isdigit(static_cast<unsigned char>(text[i + 1]))) {
      word += static_cast<char>(c);
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      tokens.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return tokens;
}

std::string_view kind_name(TokenKind kind) {
  switch (kind) {
    case TokenKind::Vocab: return "VOCAB";
    case TokenKind::Entity: return "ENTITY";
    case TokenKind::Fact: return "FACT";
  }
  return "VOCAB";
}

TokenKind parse_kind(std::string_view name) {
  if (name == "VOCAB") return TokenKind::Vocab;
  if (name == "ENTITY") return TokenKind::Entity;
  if (name == "FACT") return TokenKind::Fact;
  throw DataError("unknown token kind: " + std::string(name));
}

void TokenizedCaption::push(std::string token, TokenKind kind, int ref) {
  tokens.push_back(std::move(token));
  kinds.push_back(kind);
  refs.push_back(ref);
}

std::string TokenizedCaption::surface() const { return join(tokens, " "); }

std::vector<std::string> TokenizedCaption::words() const {
  std::vector<std::string> out;
  for (const auto& t : tokens)
    for (auto& w : split(t, ' '))
      if (!w.empty()) out.push_back(std::move(w));
  return out;
}

namespace {

struct Pattern {
  std::vector<std::string> words;
  TokenKind kind;
  int index;
  int subject_ref;  // facts only
};

class Linker {
 public:
  Linker(const GeoContext& geo, const KnowledgeContext& knowledge) {
    for (std::size_t i = 0; i < geo.entities.size(); ++i)
      add(Pattern{preprocess_caption(geo.entities[i].entity.name), TokenKind::Entity, static_cast<int>(i), -1});
    for (std::size_t j = 0; j < knowledge.facts.size(); ++j)
      add(Pattern{preprocess_caption(knowledge.facts[j].fact.object_label), TokenKind::Fact, static_cast<int>(j),
                  knowledge.facts[j].subject_ref});
    for (const auto& pat : patterns_) by_first_[pat.words.front()].push_back(&pat);
  }

  void link(const std::vector<std::string>& words, std::set<int>& mentioned, TokenizedCaption& out) const {
    std::size_t p = 0;
    while (p < words.size()) {
      const Pattern* best = nullptr;
      auto it = by_first_.find(words[p]);
      if (it != by_first_.end()) {
        for (const Pattern* pat : it->second) {
          if (!matches(*pat, words, p)) continue;
          if (best == nullptr || better(*pat, *best, mentioned)) best = pat;
        }
      }
      if (best == nullptr) {
        out.push(words[p], TokenKind::Vocab, -1);
        ++p;
        continue;
      }
      out.push(join(best->words, " "), best->kind, best->index);
      if (best->kind == TokenKind::Entity) mentioned.insert(best->index);
      p += best->words.size();
    }
  }

 private:
  void add(Pattern pat) {
    if (pat.words.empty()) return;
    patterns_.push_back(std::move(pat));
  }

  static bool matches(const Pattern& pat, const std::vector<std::string>& words, std::size_t p) {
    if (p + pat.words.size() > words.size()) return false;
    return std::equal(pat.words.begin(), pat.words.end(), words.begin() + static_cast<std::ptrdiff_t>(p));
  }

  static bool better(const Pattern& a, const Pattern& b, const std::set<int>& mentioned) {
    if (a.words.size() != b.words.size()) return a.words.size() > b.words.size();
    if (a.kind != b.kind) return a.kind == TokenKind::Entity;
    if (a.kind == TokenKind::Fact) {
      const bool am = mentioned.count(a.subject_ref) != 0;
      const bool bm = mentioned.count(b.subject_ref) != 0;
      if (am != bm) return am;
    }
    return a.index < b.index;
  }

  std::vector<Pattern> patterns_;
  std::unordered_map<std::string, std::vector<const Pattern*>> by_first_;
};

}  // namespace

TokenizedCaption link_caption(const std::vector<std::string>& tokens, const GeoContext& geo,
                              const KnowledgeContext& knowledge) {
  Linker linker(geo, knowledge);
  TokenizedCaption out;
  std::set<int> mentioned;
  linker.link(tokens, mentioned, out);
  return out;
}

TokenizedCaption relink_vocab_runs(const TokenizedCaption& caption, const GeoContext& geo,
                                   const KnowledgeContext& knowledge) {
  Linker linker(geo, knowledge);
  TokenizedCaption out;
  std::set<int> mentioned;
  std::vector<std::string> run;
  auto flush = [&] {
    if (run.empty()) return;
    linker.link(run, mentioned, out);
    run.clear();
  };
  for (std::size_t i = 0; i < caption.size(); ++i) {
    if (caption.kinds[i] == TokenKind::Vocab) {
      for (auto& w : split(caption.tokens[i], ' '))
        if (!w.empty()) run.push_back(std::move(w));
      continue;
    }
    flush();
    out.push(caption.tokens[i], caption.kinds[i], caption.refs[i]);
    if (caption.kinds[i] == TokenKind::Entity) mentioned.insert(caption.refs[i]);
  }
  flush();
  return out;
}

void validate_refs(const TokenizedCaption& caption, std::size_t vocab_size, std::size_t geo_size,
                   std::size_t knowledge_size) {
  if (caption.kinds.size() != caption.tokens.size() || caption.refs.size() != caption.tokens.size())
    throw DataError("caption token, kind and ref lists differ in length");
  for (std::size_t i = 0; i < caption.size(); ++i) {
    const int r = caption.refs[i];
    std::size_t limit = 0;
    switch (caption.kinds[i]) {
      case TokenKind::Vocab: limit = vocab_size; break;
      case TokenKind::Entity: limit = geo_size; break;
      case TokenKind::Fact: limit = knowledge_size; break;
    }
    if (r < 0 || static_cast<std::size_t>(r) >= limit)
      throw DataError("dangling " + std::string(kind_name(caption.kinds[i])) + " reference " + std::to_string(r) +
                      " for token '" + caption.tokens[i] + "'");
  }
}

Split split_of(double latitude) {
  if (latitude > kTestLatitude) return Split::Test;
  if (latitude > kValidationLatitude) return Split::Validation;
  return Split::Train;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "train";
}

DatasetSplit split_dataset(const std::vector<Sample>& samples) {
  DatasetSplit out;
  for (const auto& s : samples) {
    switch (split_of(s.location.lat)) {
      case Split::Train: out.train.push_back(s); break;
      case Split::Validation: out.validation.push_back(s); break;
      case Split::Test: out.test.push_back(s); break;
    }
  }
  return out;
}

std::vector<Sample> parse_dataset(const std::string& text, const std::string& source, std::size_t max_tokens,
                                  std::size_t* dropped) {
  std::vector<Sample> out;
  std::set<std::string> ids;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::size_t skipped = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    const std::string where = source + ":" + std::to_string(line_no);
    auto fields = split(line, '\t');
    if (fields.size() != 5) throw DataError(where + ": expected 5 tab-separated fields, got " + std::to_string(fields.size()));
    Sample s;
    s.image_id = trim(fields[0]);
    if (s.image_id.empty()) throw DataError(where + ": empty image id");
    double lat = 0, lon = 0;
    try {
      lat = std::stod(fields[1]);
      lon = std::stod(fields[2]);
      s.location = GeoPoint::make(lat, lon);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    } catch (const std::exception&) {
      throw DataError(where + ": invalid coordinates");
    }
    s.caption_raw = unescape_field(fields[3]);
    s.feature_ref = trim(fields[4]);
    if (!ids.insert(s.image_id).second) throw DataError(where + ": duplicate image id " + s.image_id);
    if (preprocess_caption(s.caption_raw).size() > max_tokens) {
      ++skipped;
      continue;
    }
    out.push_back(std::move(s));
  }
  if (dropped) *dropped = skipped;
  return out;
}

std::vector<Sample> load_dataset(const std::string& path, std::size_t max_tokens, std::size_t* dropped) {
  return parse_dataset(read_file(path), path, max_tokens, dropped);
}

std::string format_dataset(const std::vector<Sample>& samples) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& s : samples)
    out << s.image_id << '\t' << s.location.lat << '\t' << s.location.lon << '\t' << escape_field(s.caption_raw)
        << '\t' << s.feature_ref << '\n';
  return out.str();
}

PretrainedVectors load_pretrained_vectors(const std::string& path, int dim) {
  PretrainedVectors out;
  std::istringstream in(read_file(path));
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    std::vector<float> v;
    float x;
    while (ls >> x) v.push_back(x);
    if (static_cast<int>(v.size()) != dim)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(dim) + " components");
    out.emplace(std::move(word), std::move(v));
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, nn::Tensor<float> vectors)
    : tokens_(std::move(tokens)), vectors_(std::move(vectors)) {
  if (tokens_.size() < Vocabulary::kReserved || tokens_[kPad] != "<pad>" || tokens_[kBos] != "<bos>" ||
      tokens_[kEos] != "<eos>" || tokens_[kUnk] != "<unk>")
    throw DataError("vocabulary must start with the reserved tokens");
  if (vectors_.rows() != static_cast<int>(tokens_.size())) throw DataError("vocabulary vector table size mismatch");
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) throw DataError("duplicate vocabulary token " + tokens_[i]);
}

int Vocabulary::index_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

void Vocabulary::resolve(TokenizedCaption& caption) const {
  for (std::size_t i = 0; i < caption.size(); ++i)
    if (caption.kinds[i] == TokenKind::Vocab) caption.refs[i] = index_of(caption.tokens[i]);
}

bool Vocabulary::operator==(const Vocabulary& o) const {
  return tokens_ == o.tokens_ && vectors_.same_shape(o.vectors_) &&
         std::equal(vectors_.values().begin(), vectors_.values().end(), o.vectors_.values().begin());
}

Vocabulary build_vocabulary(const std::vector<TokenizedCaption>& captions, int dim, std::uint64_t seed,
                            int min_count, const PretrainedVectors* pretrained) {
  std::map<std::string, int> counts;
  for (const auto& c : captions)
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c.kinds[i] == TokenKind::Vocab) ++counts[c.tokens[i]];
  std::vector<std::pair<std::string, int>> kept;
  for (auto& [tok, n] : counts)
    if (n >= min_count && tok != "<pad>" && tok != "<bos>" && tok != "<eos>" && tok != "<unk>") kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  nn::Tensor<float> vectors(static_cast<int>(tokens.size()), dim);
  Rng rng(seed);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    float* row = vectors.row(static_cast<int>(i));
    const std::vector<float>* pre = nullptr;
    if (pretrained) {
      auto it = pretrained->find(tokens[i]);
      if (it != pretrained->end() && static_cast<int>(it->second.size()) == dim) pre = &it->second;
    }
    for (int j = 0; j < dim; ++j) {
      // Always draw, so rows do not shift when pretrained coverage changes.
      const float r = static_cast<float>(uniform(rng, -0.05, 0.05));
      row[j] = pre ? (*pre)[static_cast<std::size_t>(j)] : r;
    }
  }
  return Vocabulary(std::move(tokens), std::move(vectors));
}

nn::Tensor<float> load_image_features(const std::string& path, const FeatureShape& expected) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 12 || bytes.compare(0, 4, "GFCF") != 0) throw DataError(path + ": not a GFCF feature file");
  std::uint32_t positions = 0, channels = 0;
  std::memcpy(&positions, bytes.data() + 4, 4);
  std::memcpy(&channels, bytes.data() + 8, 4);
  if (static_cast<int>(positions) != expected.positions || static_cast<int>(channels) != expected.channels)
    throw DataError(path + ": feature shape " + std::to_string(positions) + "x" + std::to_string(channels) +
                    " does not match configured " + std::to_string(expected.positions) + "x" +
                    std::to_string(expected.channels));
  const std::size_t count = static_cast<std::size_t>(positions) * channels;
  if (bytes.size() != 12 + count * 4) throw DataError(path + ": truncated feature payload");
  nn::Tensor<float> out(static_cast<int>(positions), static_cast<int>(channels));
  std::memcpy(out.values().data(), bytes.data() + 12, count * 4);
  return out;
}

void write_image_features(const std::string& path, const nn::Tensor<float>& features) {
  std::string bytes = "GFCF";
  const std::uint32_t positions = static_cast<std::uint32_t>(features.rows());
  const std::uint32_t channels = static_cast<std::uint32_t>(features.cols());
  bytes.append(reinterpret_cast<const char*>(&positions), 4);
  bytes.append(reinterpret_cast<const char*>(&channels), 4);
  bytes.append(reinterpret_cast<const char*>(features.values().data()), features.size() * 4);
  write_file(path, bytes);
}

nn::Tensor<float> synthetic_image_features(const std::string& image_id, const FeatureShape& shape) {
  Rng rng(fnv1a(image_id));
  nn::Tensor<float> out(shape.positions, shape.channels);
  for (auto& x : out.values()) x = static_cast<float>(uniform(rng, -1.0, 1.0));
  return out;
}

nn::Tensor<float> resolve_image_features(const Sample& sample, const std::string& features_dir,
                                         const FeatureShape& shape, bool synthetic_fallback) {
  if (synthetic_fallback && (sample.feature_ref.empty() || sample.feature_ref == "synthetic"))
    return synthetic_image_features(sample.image_id, shape);
  const std::filesystem::path p = std::filesystem::path(features_dir) / sample.feature_ref;
  if (!std::filesystem::exists(p)) {
    if (synthetic_fallback) return synthetic_image_features(sample.image_id, shape);
    throw DataError("missing feature file: " + p.string());
  }
  return load_image_features(p.string(), shape);
}

}  // namespace geocap
