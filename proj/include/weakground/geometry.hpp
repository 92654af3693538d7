#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wg {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  bool operator==(const Vec3&) const = default;
};

double distance(const Vec3& a, const Vec3& b);

/// Axis-aligned 3D box in meters.
struct Box3 {
  Vec3 center;
  Vec3 size;

  /// Throws ContractError unless every size component is strictly positive.
  static Box3 make(Vec3 center, Vec3 size);
  double volume() const { return size.x * size.y * size.z; }
  bool valid() const { return size.x > 0.0 && size.y > 0.0 && size.z > 0.0; }
  bool operator==(const Box3&) const = default;
};

double iou_3d(const Box3& a, const Box3& b);

/// The fixed relation library. Order is part of the checkpoint and dataset
/// formats, so new entries must only ever be appended.
enum class RelationId : std::uint8_t { left, right, front, behind, above, below, closest, farthest, next_to };

inline constexpr std::size_t kRelationCount = 9;
inline constexpr std::array<RelationId, kRelationCount> kRelationLibrary = {
    RelationId::left,  RelationId::right,   RelationId::front,    RelationId::behind, RelationId::above,
    RelationId::below, RelationId::closest, RelationId::farthest, RelationId::next_to};

std::string_view relation_name(RelationId rel);
std::optional<RelationId> relation_from_name(std::string_view name);
/// Surface phrases recognised by the parser; the first is the canonical
/// rendering and every relation has exactly three.
std::span<const std::string_view> relation_phrases(RelationId rel);
inline std::size_t relation_index(RelationId rel) { return static_cast<std::size_t>(rel); }

struct RelationParams {
  double margin = 0.05;     // directional relations need a signed gap above this
  double proximity = 1.0;   // next_to radius on center distance
};

/// Directional relations use the global frame: left/right along -x/+x,
/// front/behind along -y/+y, below/above along -z/+z. closest/farthest hold
/// when the subject strictly minimises/maximises center distance to the
/// anchor among `context`, which must contain the subject.
bool relation_holds(RelationId rel, const Box3& subject, const Box3& anchor, std::span<const Box3> context,
                    const RelationParams& params = {});

std::vector<RelationId> classify_relation(const Box3& subject, const Box3& anchor, std::span<const Box3> context,
                                          const RelationParams& params = {});

}  // namespace wg
