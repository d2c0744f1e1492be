#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "geocap/error.hpp"
#include "geocap/geodata.hpp"
#include "geocap/knowledge.hpp"
#include "oracle_fixtures.hpp"

using namespace geocap;

TEST_CASE("haversine distance and bearing match the vector-geometry oracle") {
  for (const auto& c : oracle::kGeo) {
    const GeoPoint a{c.lat1, c.lon1}, b{c.lat2, c.lon2};
    CHECK(haversine_distance(a, b) == doctest::Approx(c.distance_km).epsilon(1e-9));
    CHECK(azimuth(a, b) == doctest::Approx(c.bearing_deg).epsilon(1e-7));
  }
}

TEST_CASE("distance is symmetric and zero on coincident points") {
  const GeoPoint a{50.5, -5.0}, b{51.0, -4.2};
  CHECK(haversine_distance(a, b) == doctest::Approx(haversine_distance(b, a)).epsilon(1e-12));
  CHECK(haversine_distance(a, a) == 0.0);
}

TEST_CASE("bearing of coincident points is an error") {
  const GeoPoint a{10.0, 10.0};
  CHECK_THROWS_AS(azimuth(a, a), NumericError);
}

TEST_CASE("bearing lies in (-180, 180]") {
  CHECK(azimuth({10.0, 0.0}, {0.0, 0.0}) == doctest::Approx(180.0));
  CHECK(azimuth({0.0, 0.0}, {0.0, -1.0}) == doctest::Approx(-90.0));
  CHECK(azimuth({0.0, 0.0}, {1.0, 0.0}) == doctest::Approx(0.0));
}

TEST_CASE("azimuth normalization on the tabulated directions") {
  struct Row {
    double a, north, east;
  };
  for (const Row& r : {Row{0, 0.0, 0.5}, Row{90, 0.5, 0.0}, Row{-90, 0.5, 1.0}, Row{180, 1.0, 0.5},
                       Row{-180, 1.0, 0.5}}) {
    const auto n = normalize_azimuth(r.a);
    CHECK(n.north == r.north);
    CHECK(n.east == r.east);
  }
  for (double a = -180.0; a <= 180.0; a += 0.5) {
    const auto n = normalize_azimuth(a);
    CHECK(n.north >= 0.0);
    CHECK(n.north <= 1.0);
    CHECK(n.east >= 0.0);
    CHECK(n.east <= 1.0);
  }
}

TEST_CASE("longitudes wrap into (-180, 180]") {
  CHECK(normalize_longitude(190.0) == doctest::Approx(-170.0));
  CHECK(normalize_longitude(-180.0) == 180.0);
  CHECK(normalize_longitude(540.0) == 180.0);
  CHECK(normalize_longitude(12.5) == 12.5);
  CHECK_THROWS_AS(GeoPoint::make(91.0, 0.0), DataError);
}

TEST_CASE("entity snapshot parsing") {
  const std::string text =
      "# comment\n"
      "e1\tOld Bridge\t50.5\t-5.0\t1.5\tBridge\n"
      "\n"
      "e2\tchurch of st mary\t50.51\t-4.99\t0.2\tchurch\r\n";
  const EntityStore store = parse_entities(text);
  REQUIRE(store.size() == 2);
  CHECK(store.find("e1")->name == "old bridge");
  CHECK(store.find("e1")->type_tag == "bridge");
  CHECK(store.find("e2")->size == 0.2);
  CHECK(store.find("e3") == nullptr);

  CHECK_THROWS_WITH_AS(parse_entities("e1\tx\t50\n", "snap.tsv"), doctest::Contains("snap.tsv:1"), DataError);
  CHECK_THROWS_AS(parse_entities("e1\tx\tnorth\t0\t1\tt\n"), DataError);
  CHECK_THROWS_AS(parse_entities("e1\tx\t95\t0\t1\tt\n"), DataError);
  CHECK_THROWS_AS(parse_entities("e1\tx\t5\t0\t-1\tt\n"), DataError);
  CHECK_THROWS_AS(parse_entities("e1\tx\t5\t0\t1\tt\ne1\ty\t5\t0\t1\tt\n"), DataError);
}

TEST_CASE("radius queries agree with a linear scan") {
  Rng rng(7);
  std::vector<GeoEntity> entities;
  for (int i = 0; i < 2000; ++i)
    entities.push_back(GeoEntity{"e" + std::to_string(i), "n", GeoPoint{uniform(rng, 49.0, 52.0), uniform(rng, -6.0, -2.0)},
                                 1.0, "t"});
  const EntityStore store(entities);
  for (int q = 0; q < 50; ++q) {
    const GeoPoint c{uniform(rng, 49.0, 52.0), uniform(rng, -6.0, -2.0)};
    const double r = uniform(rng, 0.1, 30.0);
    auto got = store.within(c, r);
    std::sort(got.begin(), got.end());
    std::vector<std::size_t> want;
    for (std::size_t i = 0; i < entities.size(); ++i)
      if (haversine_distance(c, entities[i].location) <= r) want.push_back(i);
    CHECK(got == want);
  }
}

TEST_CASE("radius queries across the antimeridian and near the pole") {
  const EntityStore store({GeoEntity{"w", "w", {0.0, 179.99}, 1, "t"}, GeoEntity{"e", "e", {0.0, -179.99}, 1, "t"},
                           GeoEntity{"p", "p", {89.99, 0.0}, 1, "t"}, GeoEntity{"q", "q", {89.99, 180.0}, 1, "t"}});
  auto near_dateline = store.within({0.0, 180.0}, 5.0);
  std::sort(near_dateline.begin(), near_dateline.end());
  CHECK(near_dateline == std::vector<std::size_t>{0, 1});
  auto near_pole = store.within({90.0, 0.0}, 5.0);
  std::sort(near_pole.begin(), near_pole.end());
  CHECK(near_pole == std::vector<std::size_t>{2, 3});
}

TEST_CASE("geographic context: nearest first, truncated, coincident entities skipped") {
  const EntityStore store({GeoEntity{"a", "a", {50.0, 0.0}, 1, "t"}, GeoEntity{"b", "b", {50.002, 0.0}, 1, "t"},
                           GeoEntity{"c", "c", {50.001, 0.0}, 1, "t"}, GeoEntity{"d", "d", {50.0, 0.001}, 1, "t"},
                           GeoEntity{"far", "far", {51.0, 0.0}, 1, "t"}});
  const FactStore facts({Fact{"c", "p", "x"}, Fact{"c", "q", "y"}});
  const GeoContext ctx = build_geo_context(store, {50.0, 0.0}, 1.0, 2, facts);
  REQUIRE(ctx.size() == 2);
  CHECK(ctx.entities[0].entity.id == "d");
  CHECK(ctx.entities[1].entity.id == "c");
  CHECK(ctx.entities[1].rank == 1);
  CHECK(ctx.entities[1].fact_count == 2);
  CHECK(ctx.entities[1].has_facts);
  CHECK_FALSE(ctx.entities[0].has_facts);
  CHECK(ctx.entities[0].azimuth_deg == doctest::Approx(90.0).epsilon(1e-4));
  CHECK(ctx.index_of("c") == 1);
  CHECK(ctx.index_of("a") == -1);
}

TEST_CASE("geographic embedding is the scalar block followed by the type row") {
  Rng rng(3);
  const TypeEmbedder types = TypeEmbedder::random({"bridge", "church"}, 5, rng);
  ContextEntity ce;
  ce.entity = GeoEntity{"x", "x", {1, 1}, 2.5, "church"};
  ce.distance_km = 0.4;
  ce.azimuth_deg = -45.0;
  ce.fact_count = 3;
  ce.has_facts = true;
  const auto emb = geo_embedding(ce, types);
  REQUIRE(emb.size() == 11);
  const auto scalars = geo_scalar_features(ce);
  for (int i = 0; i < kGeoScalarFeatures; ++i) CHECK(emb[i] == static_cast<float>(scalars[i]));
  CHECK(scalars[1] == 0.25);
  CHECK(scalars[2] == 0.75);
  const auto row = types.row(types.index_of("church"));
  for (int i = 0; i < 5; ++i) CHECK(emb[6 + i] == row[i]);

  ce.entity.type_tag = "unseen";
  const auto unknown = geo_embedding(ce, types);
  for (int i = 0; i < 5; ++i) CHECK(unknown[6 + i] == types.row(0)[i]);
}
