#include <doctest.h>

#include <filesystem>

#include "geocap/corpus.hpp"
#include "geocap/error.hpp"

using namespace geocap;

namespace {

using Words = std::vector<std::string>;

GeoContext context_with(const std::vector<std::string>& names) {
  GeoContext geo;
  for (std::size_t i = 0; i < names.size(); ++i) {
    ContextEntity ce;
    ce.entity = GeoEntity{"e" + std::to_string(i), names[i], {50.0, 0.01 * (i + 1)}, 1.0, "t"};
    ce.rank = static_cast<int>(i);
    geo.entities.push_back(ce);
  }
  return geo;
}

}  // namespace

TEST_CASE("caption preprocessing") {
  CHECK(preprocess_caption("The <b>Old</b> Bridge, built in 1809.") ==
        Words{"the", "old", "bridge", ",", "built", "in", "1809", "."});
  CHECK(preprocess_caption("Church of Saint Mary's & yard") == Words{"church", "of", "st", "marys", "and", "yard"});
  CHECK(preprocess_caption("a well-known 1,250.5 m tower") == Words{"a", "well-known", "1,250.5", "m", "tower"});
  CHECK(preprocess_caption("  ") == Words{});
}

TEST_CASE("dataset parsing") {
  const std::string text =
      "# header\n"
      "img1\t50.5\t-5.0\tA caption\\twith a tab\tf1.gcf\n"
      "img2\t53.8\t-4.9\tshort\tsynthetic\n";
  const auto samples = parse_dataset(text);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].caption_raw == "A caption\twith a tab");
  CHECK(samples[0].feature_ref == "f1.gcf");
  CHECK(samples[1].location.lat == 53.8);
  CHECK(parse_dataset(format_dataset(samples)).size() == 2);
  CHECK(parse_dataset(format_dataset(samples))[0].caption_raw == samples[0].caption_raw);

  std::size_t dropped = 0;
  const auto kept = parse_dataset(text, "d", 3, &dropped);
  CHECK(kept.size() == 1);
  CHECK(dropped == 1);

  CHECK_THROWS_WITH_AS(parse_dataset("img1\t50\t0\tcap\n", "d.tsv"), doctest::Contains("d.tsv:1"), DataError);
  CHECK_THROWS_AS(parse_dataset("img1\tx\t0\tcap\tf\n"), DataError);
  CHECK_THROWS_AS(parse_dataset("img1\t50\t0\tcap\tf\nimg1\t50\t0\tcap\tf\n"), DataError);
}

TEST_CASE("latitude splits") {
  CHECK(split_of(50.0) == Split::Train);
  CHECK(split_of(53.5706) == Split::Train);
  CHECK(split_of(53.5707) == Split::Validation);
  CHECK(split_of(54.8975) == Split::Validation);
  CHECK(split_of(54.8976) == Split::Test);
  CHECK(split_name(Split::Validation) == "validation");
  const auto parts = split_dataset({Sample{"a", {50, 0}, "", ""}, Sample{"b", {55, 0}, "", ""}, Sample{"c", {54, 0}, "", ""}});
  CHECK(parts.train.size() == 1);
  CHECK(parts.validation.size() == 1);
  CHECK(parts.test.size() == 1);
}

TEST_CASE("linking prefers the longest match, then entities, then mentioned subjects") {
  GeoContext geo = context_with({"kelbar bridge", "kelbar", "mill"});
  KnowledgeContext kb;
  kb.facts = {ContextFact{Fact{"e2", "built_in", "1809"}, 2, 0.0}, ContextFact{Fact{"e0", "built_in", "1809"}, 0, 0.0},
              ContextFact{Fact{"e2", "name", "mill"}, 2, 0.0}};
  const auto words = preprocess_caption("Kelbar Bridge near the mill, built in 1809");
  const TokenizedCaption c = link_caption(words, geo, kb);
  REQUIRE(c.size() == 8);
  CHECK(c.tokens[0] == "kelbar bridge");
  CHECK(c.kinds[0] == TokenKind::Entity);
  CHECK(c.refs[0] == 0);
  CHECK(c.kinds[3] == TokenKind::Entity);
  CHECK(c.refs[3] == 2);
  CHECK(c.kinds[7] == TokenKind::Fact);
  CHECK(c.refs[7] == 0);
  CHECK(c.kinds[1] == TokenKind::Vocab);
  CHECK(c.surface() == "kelbar bridge near the mill , built in 1809");
  CHECK(c.words() == words);

  const TokenizedCaption other = link_caption(preprocess_caption("Kelbar Bridge built in 1809"), geo, kb);
  CHECK(other.refs.back() == 1);
}

TEST_CASE("relinking only touches VOCAB runs") {
  GeoContext geo = context_with({"kelbar bridge"});
  KnowledgeContext kb;
  kb.facts = {ContextFact{Fact{"e0", "built_in", "1809"}, 0, 0.0}};
  TokenizedCaption c;
  c.push("kelbar", TokenKind::Vocab, 7);
  c.push("bridge", TokenKind::Vocab, 8);
  c.push("1809", TokenKind::Vocab, 9);
  const auto r = relink_vocab_runs(c, geo, kb);
  REQUIRE(r.size() == 2);
  CHECK(r.kinds[0] == TokenKind::Entity);
  CHECK(r.kinds[1] == TokenKind::Fact);
}

TEST_CASE("reference validation") {
  TokenizedCaption c;
  c.push("a", TokenKind::Vocab, 4);
  c.push("x", TokenKind::Entity, 1);
  CHECK_NOTHROW(validate_refs(c, 5, 2, 0));
  CHECK_THROWS_AS(validate_refs(c, 4, 2, 0), DataError);
  CHECK_THROWS_AS(validate_refs(c, 5, 1, 0), DataError);
  CHECK(parse_kind(kind_name(TokenKind::Fact)) == TokenKind::Fact);
  CHECK_THROWS_AS(parse_kind("WORD"), DataError);
}

TEST_CASE("vocabulary: reserved tokens, then frequency, then lexicographic order") {
  TokenizedCaption a, b;
  for (const char* w : {"the", "bridge", "the", "old"}) a.push(w, TokenKind::Vocab, -1);
  b.push("x bridge", TokenKind::Entity, 0);
  b.push("the", TokenKind::Vocab, -1);
  b.push("old", TokenKind::Vocab, -1);
  const Vocabulary v = build_vocabulary({a, b}, 6, 1);
  CHECK(v.tokens() == Words{"<pad>", "<bos>", "<eos>", "<unk>", "the", "old", "bridge"});
  CHECK(v.dim() == 6);
  CHECK(v.index_of("x bridge") == Vocabulary::kUnk);
  CHECK(build_vocabulary({a, b}, 6, 1) == v);
  CHECK(build_vocabulary({a, b}, 6, 1, 2).size() == 6);

  const PretrainedVectors pre{{"old", std::vector<float>(6, 0.5f)}};
  const Vocabulary with = build_vocabulary({a, b}, 6, 1, 1, &pre);
  CHECK(with.vectors()(5, 0) == 0.5f);
  CHECK(with.vectors()(4, 0) == v.vectors()(4, 0));

  v.resolve(a);
  CHECK(a.refs == std::vector<int>{4, 6, 4, 5});
}

TEST_CASE("feature files round-trip and are validated") {
  const auto dir = std::filesystem::temp_directory_path() / "geocap_corpus_test";
  std::filesystem::create_directories(dir);
  const FeatureShape shape{3, 4};
  const auto feats = synthetic_image_features("img9", shape);
  CHECK(synthetic_image_features("img9", shape).values()[5] == feats.values()[5]);
  CHECK(synthetic_image_features("img8", shape).values()[5] != feats.values()[5]);
  const std::string path = (dir / "img9.gcf").string();
  write_image_features(path, feats);
  const auto back = load_image_features(path, shape);
  CHECK(std::equal(back.values().begin(), back.values().end(), feats.values().begin()));
  CHECK_THROWS_AS(load_image_features(path, FeatureShape{4, 3}), DataError);
  write_file(path + ".bad", "NOPE");
  CHECK_THROWS_AS(load_image_features(path + ".bad", shape), DataError);

  Sample s{"img9", {50, 0}, "", "img9.gcf"};
  CHECK(resolve_image_features(s, dir.string(), shape, false).values()[0] == feats.values()[0]);
  s.feature_ref = "missing.gcf";
  CHECK_THROWS_AS(resolve_image_features(s, dir.string(), shape, false), DataError);
  CHECK(resolve_image_features(s, dir.string(), shape, true).values()[0] == feats.values()[0]);
  std::filesystem::remove_all(dir);
}
