#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "geocap/tensor.hpp"
#include "geocap/util.hpp"

namespace geocap {

class FactStore;

inline constexpr double kEarthRadiusKm = 6371.0;

/// Latitude/longitude in degrees. Longitude is kept in (-180, 180].
struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;

  /// Validates the latitude and wraps the longitude into (-180, 180].
  static GeoPoint make(double lat, double lon);

  bool operator==(const GeoPoint&) const = default;
};

double normalize_longitude(double lon);

struct GeoEntity {
  std::string id;
  std::string name;  ///< lowercase, may contain spaces
  GeoPoint location;
  double size = 0.0;  ///< raw units as ingested
  std::string type_tag;
};

/// One entity of a geographic context together with its per-image features.
struct ContextEntity {
  GeoEntity entity;
  double distance_km = 0.0;
  double azimuth_deg = 0.0;
  bool has_facts = false;
  int fact_count = 0;
  int rank = 0;
};

struct GeoContext {
  GeoPoint image_location;
  std::vector<ContextEntity> entities;

  std::size_t size() const { return entities.size(); }
  bool empty() const { return entities.empty(); }
  /// Index of the entity with this id, or -1.
  int index_of(const std::string& entity_id) const;
};

/// Great-circle distance (haversine, R = 6371 km).
double haversine_distance(const GeoPoint& a, const GeoPoint& b);

/// Initial great-circle bearing from `from` to `to`, clockwise from north, in
/// (-180, 180]. Throws NumericError for coincident points.
double azimuth(const GeoPoint& from, const GeoPoint& to);

struct NormalizedAzimuth {
  double north = 0.0;
  double east = 0.0;
};

/// Maps an azimuth onto two [0, 1] coordinates so that directions close on the
/// compass stay close: north = |a| / 180, east measures distance from due east.
NormalizedAzimuth normalize_azimuth(double azimuth_deg);

/// Immutable entity snapshot with a uniform lat/lon bucket index.
class EntityStore {
 public:
  explicit EntityStore(std::vector<GeoEntity> entities, double cell_deg = 0.01);

  std::size_t size() const { return entities_.size(); }
  const std::vector<GeoEntity>& entities() const { return entities_; }
  const GeoEntity* find(const std::string& id) const;

  /// Indices of entities within `radius_km` of `center` (unordered). Coincident
  /// points are included.
  std::vector<std::size_t> within(const GeoPoint& center, double radius_km) const;

 private:
  std::int64_t cell_key(int lat_cell, int lon_cell) const;

  std::vector<GeoEntity> entities_;
  std::unordered_map<std::string, std::size_t> by_id_;
  double cell_deg_;
  int lon_cells_;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> cells_;
};

/// Parses the tab-separated entity snapshot (id, name, lat, lon, size, type).
EntityStore load_entities(const std::string& path);
EntityStore parse_entities(const std::string& text, const std::string& source = "<memory>");

/// All entities within `radius_km`, nearest first (ties by id), truncated to
/// `max_entities`. Entities located exactly at the image location are skipped
/// since their azimuth is undefined.
GeoContext build_geo_context(const EntityStore& store, const GeoPoint& image_location,
                             double radius_km, std::size_t max_entities, const FactStore& facts);

/// distance, azimuth (two normalized components), size, has_facts, fact_count.
inline constexpr int kGeoScalarFeatures = 6;

/// The scalar prefix of a geographic embedding, in embedding order.
std::array<double, kGeoScalarFeatures> geo_scalar_features(const ContextEntity& ce);

/// A label -> trainable row table. Row 0 is reserved for unknown labels.
class LabelEmbedding {
 public:
  LabelEmbedding() = default;
  LabelEmbedding(std::vector<std::string> labels, nn::Tensor<float> table);

  /// Builds a table for `labels` (plus the unknown row) with entries drawn
  /// uniformly from [-scale, scale].
  static LabelEmbedding random(std::vector<std::string> labels, int dim, Rng& rng, double scale = 0.1);

  int dim() const { return table_.cols(); }
  int rows() const { return table_.rows(); }
  /// Row for `label`; 0 (the unknown row) when absent.
  int index_of(const std::string& label) const;
  bool contains(const std::string& label) const { return index_.count(label) != 0; }
  const std::vector<std::string>& labels() const { return labels_; }
  const nn::Tensor<float>& table() const { return table_; }
  nn::Tensor<float>& table() { return table_; }
  std::span<const float> row(int index) const;

 private:
  std::vector<std::string> labels_;
  std::map<std::string, int> index_;
  nn::Tensor<float> table_;
};

using TypeEmbedder = LabelEmbedding;

/// Concat[distance, norm(azimuth), size, has_facts, fact_count, Emb_t(type)].
/// Output length is 6 + embedder.dim().
std::vector<float> geo_embedding(const ContextEntity& ce, const TypeEmbedder& types);

}  // namespace geocap
