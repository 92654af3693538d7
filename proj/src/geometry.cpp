#include "weakground/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "weakground/numcore.hpp"

namespace wg {

double distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

Box3 Box3::make(Vec3 center, Vec3 size) {
  Box3 b{center, size};
  if (!b.valid()) throw ContractError("Box3: size components must be > 0");
  return b;
}

namespace {

double overlap_1d(double ca, double sa, double cb, double sb) {
  const double lo = std::max(ca - sa / 2.0, cb - sb / 2.0);
  const double hi = std::min(ca + sa / 2.0, cb + sb / 2.0);
  return std::max(0.0, hi - lo);
}

}  // namespace

double iou_3d(const Box3& a, const Box3& b) {
  if (a == b) return 1.0;
  // Summation order is symmetric in (a, b) so the result is bit-identical
  // under swapping.
  const double ix = overlap_1d(a.center.x, a.size.x, b.center.x, b.size.x);
  const double iy = overlap_1d(a.center.y, a.size.y, b.center.y, b.size.y);
  const double iz = overlap_1d(a.center.z, a.size.z, b.center.z, b.size.z);
  const double inter = ix * iy * iz;
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

namespace {

constexpr std::array<std::string_view, kRelationCount> kNames = {
    "left", "right", "front", "behind", "above", "below", "closest", "farthest", "next_to"};

constexpr std::array<std::array<std::string_view, 3>, kRelationCount> kPhrases = {{
    {"to the left of", "left of", "on the left side of"},
    {"to the right of", "right of", "on the right side of"},
    {"in front of", "ahead of", "on the front side of"},
    {"behind", "in back of", "at the back of"},
    {"above", "over", "higher than"},
    {"below", "under", "beneath"},
    {"closest to", "nearest to", "nearest"},
    {"farthest from", "furthest from", "most distant from"},
    {"next to", "beside", "near"},
}};

}  // namespace

std::string_view relation_name(RelationId rel) { return kNames[relation_index(rel)]; }

std::optional<RelationId> relation_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kRelationCount; ++i)
    if (kNames[i] == name) return kRelationLibrary[i];
  return std::nullopt;
}

std::span<const std::string_view> relation_phrases(RelationId rel) { return kPhrases[relation_index(rel)]; }

bool relation_holds(RelationId rel, const Box3& subject, const Box3& anchor, std::span<const Box3> context,
                    const RelationParams& params) {
  const Vec3& s = subject.center;
  const Vec3& a = anchor.center;
  const double d = params.margin;
  switch (rel) {
    case RelationId::left:
      return a.x - s.x > d;
    case RelationId::right:
      return s.x - a.x > d;
    case RelationId::front:
      return a.y - s.y > d;
    case RelationId::behind:
      return s.y - a.y > d;
    case RelationId::above:
      return s.z - a.z > d;
    case RelationId::below:
      return a.z - s.z > d;
    case RelationId::next_to:
      return distance(s, a) < params.proximity;
    case RelationId::closest:
    case RelationId::farthest: {
      if (context.empty()) throw ContractError("relation_holds: closest/farthest need a non-empty context");
      const double ds = distance(s, a);
      bool seen_self = false;
      for (const Box3& other : context) {
        if (!seen_self && other == subject) {
          seen_self = true;
          continue;
        }
        const double dother = distance(other.center, a);
        if (rel == RelationId::closest ? !(ds < dother) : !(ds > dother)) return false;
      }
      return true;
    }
  }
  return false;
}

std::vector<RelationId> classify_relation(const Box3& subject, const Box3& anchor, std::span<const Box3> context,
                                          const RelationParams& params) {
  std::vector<RelationId> out;
  for (RelationId rel : kRelationLibrary) {
    const bool comparative = rel == RelationId::closest || rel == RelationId::farthest;
    if (comparative && context.empty()) continue;
    if (relation_holds(rel, subject, anchor, context, params)) out.push_back(rel);
  }
  return out;
}

}  // namespace wg
