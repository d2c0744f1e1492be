#include "geocap/geodata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "geocap/error.hpp"
#include "geocap/knowledge.hpp"

namespace geocap {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kRadToDeg = 180.0 / std::numbers::pi;

double parse_double(const std::string& field, const std::string& what, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used != field.size() || !std::isfinite(v)) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": invalid " + what + " '" + field + "'");
  }
}

}  // namespace

double normalize_longitude(double lon) {
  if (lon > -180.0 && lon <= 180.0) return lon;
  double wrapped = std::fmod(lon + 180.0, 360.0);
  if (wrapped < 0.0) wrapped += 360.0;
  wrapped -= 180.0;
  return wrapped == -180.0 ? 180.0 : wrapped;
}

GeoPoint GeoPoint::make(double lat, double lon) {
  if (!std::isfinite(lat) || lat < -90.0 || lat > 90.0)
    throw DataError("latitude out of range: " + std::to_string(lat));
  if (!std::isfinite(lon)) throw DataError("longitude is not finite");
  return GeoPoint{lat, normalize_longitude(lon)};
}

int GeoContext::index_of(const std::string& entity_id) const {
  for (std::size_t i = 0; i < entities.size(); ++i)
    if (entities[i].entity.id == entity_id) return static_cast<int>(i);
  return -1;
}

double haversine_distance(const GeoPoint& a, const GeoPoint& b) {
  const double phi1 = a.lat * kDegToRad;
  const double phi2 = b.lat * kDegToRad;
  const double dphi = (b.lat - a.lat) * kDegToRad;
  const double dlambda = (b.lon - a.lon) * kDegToRad;
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  const double h = std::min(1.0, s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2);
  return 2.0 * kEarthRadiusKm * std::atan2(std::sqrt(h), std::sqrt(1.0 - h));
}

double azimuth(const GeoPoint& from, const GeoPoint& to) {
  if (from == to) throw NumericError("undefined bearing: coincident points");
  const double phi1 = from.lat * kDegToRad;
  const double phi2 = to.lat * kDegToRad;
  const double dlambda = (to.lon - from.lon) * kDegToRad;
  const double y = std::sin(dlambda) * std::cos(phi2);
  const double x = std::cos(phi1) * std::sin(phi2) - std::sin(phi1) * std::cos(phi2) * std::cos(dlambda);
  const double deg = std::atan2(y, x) * kRadToDeg;
  return deg <= -180.0 ? 180.0 : deg;
}

NormalizedAzimuth normalize_azimuth(double a) {
  if (a < -180.0 || a > 180.0) a = normalize_longitude(a);
  NormalizedAzimuth out;
  out.north = std::abs(a) / 180.0;
  out.east = a >= -90.0 ? std::abs(90.0 - a) / 180.0 : (90.0 + std::abs(a + 180.0)) / 180.0;
  return out;
}

EntityStore::EntityStore(std::vector<GeoEntity> entities, double cell_deg)
    : entities_(std::move(entities)), cell_deg_(cell_deg) {
  if (!(cell_deg_ > 0.0)) throw ConfigError("grid cell size must be positive");
  lon_cells_ = static_cast<int>(std::ceil(360.0 / cell_deg_));
  for (std::size_t i = 0; i < entities_.size(); ++i) {
    const auto& e = entities_[i];
    if (!by_id_.emplace(e.id, i).second) throw DataError("duplicate entity id: " + e.id);
    const int lat_cell = static_cast<int>(std::floor((e.location.lat + 90.0) / cell_deg_));
    const int lon_cell = static_cast<int>(std::floor((e.location.lon + 180.0) / cell_deg_)) % lon_cells_;
    cells_[cell_key(lat_cell, lon_cell)].push_back(i);
  }
}

std::int64_t EntityStore::cell_key(int lat_cell, int lon_cell) const {
  return static_cast<std::int64_t>(lat_cell) * lon_cells_ + lon_cell;
}

const GeoEntity* EntityStore::find(const std::string& id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &entities_[it->second];
}

std::vector<std::size_t> EntityStore::within(const GeoPoint& center, double radius_km) const {
  std::vector<std::size_t> out;
  if (entities_.empty() || radius_km < 0.0) return out;

  const double rho = radius_km / kEarthRadiusKm;
  const double margin = 1e-9;
  const double dlat = rho * kRadToDeg * (1.0 + margin) + margin;
  const double lat_lo = center.lat - dlat;
  const double lat_hi = center.lat + dlat;

  bool all_lon = rho >= std::numbers::pi / 2.0 || lat_hi >= 90.0 || lat_lo <= -90.0;
  double dlon = 180.0;
  if (!all_lon) {
    const double ratio = std::sin(rho) / std::cos(center.lat * kDegToRad);
    if (ratio >= 1.0) {
      all_lon = true;
    } else {
      dlon = std::asin(ratio) * kRadToDeg * (1.0 + margin) + margin;
    }
  }

  const int lat_cell_lo = static_cast<int>(std::floor((std::max(-90.0, lat_lo) + 90.0) / cell_deg_));
  const int lat_cell_hi = static_cast<int>(std::floor((std::min(90.0, lat_hi) + 90.0) / cell_deg_));
  int lon_cell_lo = 0;
  int lon_span = lon_cells_;
  if (!all_lon) {
    lon_cell_lo = static_cast<int>(std::floor((center.lon - dlon + 180.0) / cell_deg_));
    const int lon_cell_hi = static_cast<int>(std::floor((center.lon + dlon + 180.0) / cell_deg_));
    lon_span = std::min(lon_cells_, lon_cell_hi - lon_cell_lo + 1);
  }

  auto accept = [&](std::size_t i) {
    if (haversine_distance(center, entities_[i].location) <= radius_km) out.push_back(i);
  };

  const double cells_to_visit = static_cast<double>(lat_cell_hi - lat_cell_lo + 1) * lon_span;
  if (cells_to_visit > static_cast<double>(entities_.size())) {
    for (std::size_t i = 0; i < entities_.size(); ++i) accept(i);
    return out;
  }
  for (int la = lat_cell_lo; la <= lat_cell_hi; ++la) {
    for (int k = 0; k < lon_span; ++k) {
      int lo = (lon_cell_lo + k) % lon_cells_;
      if (lo < 0) lo += lon_cells_;
      auto it = cells_.find(cell_key(la, lo));
      if (it == cells_.end()) continue;
      for (std::size_t i : it->second) accept(i);
    }
  }
  return out;
}

EntityStore parse_entities(const std::string& text, const std::string& source) {
  std::vector<GeoEntity> entities;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    const std::string where = source + ":" + std::to_string(line_no);
    auto fields = split(line, '\t');
    if (fields.size() != 6) throw DataError(where + ": expected 6 tab-separated fields, got " + std::to_string(fields.size()));
    GeoEntity e;
    e.id = trim(fields[0]);
    e.name = to_lower(trim(fields[1]));
    if (e.id.empty()) throw DataError(where + ": empty entity id");
    if (e.name.empty()) throw DataError(where + ": empty entity name");
    const double lat = parse_double(trim(fields[2]), "latitude", where);
    const double lon = parse_double(trim(fields[3]), "longitude", where);
    try {
      e.location = GeoPoint::make(lat, lon);
    } catch (const DataError& err) {
      throw DataError(where + ": " + err.what());
    }
    e.size = parse_double(trim(fields[4]), "size", where);
    if (e.size < 0.0) throw DataError(where + ": negative size");
    e.type_tag = to_lower(trim(fields[5]));
    entities.push_back(std::move(e));
  }
  try {
    return EntityStore(std::move(entities));
  } catch (const DataError& err) {
    throw DataError(source + ": " + err.what());
  }
}

EntityStore load_entities(const std::string& path) { return parse_entities(read_file(path), path); }

GeoContext build_geo_context(const EntityStore& store, const GeoPoint& image_location, double radius_km,
                             std::size_t max_entities, const FactStore& facts) {
  GeoContext ctx;
  ctx.image_location = image_location;
  for (std::size_t i : store.within(image_location, radius_km)) {
    const GeoEntity& e = store.entities()[i];
    if (e.location == image_location) continue;
    ContextEntity ce;
    ce.entity = e;
    ce.distance_km = haversine_distance(image_location, e.location);
    ce.azimuth_deg = azimuth(image_location, e.location);
    ctx.entities.push_back(std::move(ce));
  }
  std::sort(ctx.entities.begin(), ctx.entities.end(), [](const ContextEntity& a, const ContextEntity& b) {
    if (a.distance_km != b.distance_km) return a.distance_km < b.distance_km;
    return a.entity.id < b.entity.id;
  });
  if (ctx.entities.size() > max_entities) ctx.entities.resize(max_entities);
  for (std::size_t r = 0; r < ctx.entities.size(); ++r) {
    auto& ce = ctx.entities[r];
    ce.rank = static_cast<int>(r);
    ce.fact_count = facts.count_for(ce.entity.id);
    ce.has_facts = ce.fact_count > 0;
  }
  return ctx;
}

std::array<double, kGeoScalarFeatures> geo_scalar_features(const ContextEntity& ce) {
  const auto az = normalize_azimuth(ce.azimuth_deg);
  return {ce.distance_km, az.north, az.east, ce.entity.size, ce.has_facts ? 1.0 : 0.0,
          static_cast<double>(ce.fact_count)};
}

LabelEmbedding::LabelEmbedding(std::vector<std::string> labels, nn::Tensor<float> table)
    : labels_(std::move(labels)), table_(std::move(table)) {
  if (table_.rows() != static_cast<int>(labels_.size()) + 1)
    throw ConfigError("embedding table needs one row per label plus the unknown row");
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (!index_.emplace(labels_[i], static_cast<int>(i) + 1).second)
      throw ConfigError("duplicate embedding label: " + labels_[i]);
}

LabelEmbedding LabelEmbedding::random(std::vector<std::string> labels, int dim, Rng& rng, double scale) {
  if (dim < 0) throw ConfigError("negative embedding dimension");
  nn::Tensor<float> table(static_cast<int>(labels.size()) + 1, dim);
  for (auto& x : table.values()) x = static_cast<float>(uniform(rng, -scale, scale));
  return LabelEmbedding(std::move(labels), std::move(table));
}

int LabelEmbedding::index_of(const std::string& label) const {
  auto it = index_.find(label);
  return it == index_.end() ? 0 : it->second;
}

std::span<const float> LabelEmbedding::row(int index) const {
  return {table_.row(index), static_cast<std::size_t>(table_.cols())};
}

std::vector<float> geo_embedding(const ContextEntity& ce, const TypeEmbedder& types) {
  std::vector<float> out;
  out.reserve(kGeoScalarFeatures + types.dim());
  for (double v : geo_scalar_features(ce)) out.push_back(static_cast<float>(v));
  auto row = types.row(types.index_of(ce.entity.type_tag));
  out.insert(out.end(), row.begin(), row.end());
  return out;
}

}  // namespace geocap
