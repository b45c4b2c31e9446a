#pragma once

// Brute-force reference: one full-width tag per granule.

#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include "mtetag/tag_width.hpp"

namespace mtetag {

class FlatTagArray {
 public:
  explicit FlatTagArray(TagWidth w) : width_(w) {}

  TagWidth width() const { return width_; }

  Tag oracle_ldg(Granule g) const {
    if (g >= kGranulesPerPage) throw std::out_of_range("oracle: granule out of range");
    return tags_[g];
  }

  void oracle_stg(Granule g, Tag t) {
    if (g >= kGranulesPerPage) throw std::out_of_range("oracle: granule out of range");
    tags_[g] = truncated_ ? (t & 0xFu) : t;
  }

  void oracle_stg_range(Granule first, Granule count, Tag t) {
    for (Granule g = first; g < first + count; ++g) oracle_stg(g, t);
  }

  // Mirrors a store switching to its 4-bit array at this point of the replay.
  void truncate_to_nibbles() {
    for (auto& t : tags_) t &= 0xFu;
    truncated_ = true;
  }
  bool truncated() const { return truncated_; }

  /// Like truncate_to_nibbles, but each maximal run keeps transform(run) & 0xF.
  template <typename Transform>
  void truncate_with(Transform&& transform);

  void reset() {
    tags_.fill(0);
    truncated_ = false;
  }

  std::span<const Tag, kGranulesPerPage> tags() const { return tags_; }

 private:
  TagWidth width_;
  std::array<Tag, kGranulesPerPage> tags_{};
  bool truncated_ = false;
};

/// Maximal runs by linear scan.
inline std::vector<Run> runs_of(std::span<const Tag> tags) {
  std::vector<Run> out;
  for (Granule g = 0; g < tags.size(); ++g)
    if (g == 0 || tags[g] != tags[g - 1]) out.push_back(Run{g, tags[g]});
  return out;
}

inline std::vector<Run> runs_of(const FlatTagArray& a) { return runs_of(a.tags()); }

template <typename Transform>
void FlatTagArray::truncate_with(Transform&& transform) {
  const auto runs = runs_of(tags_);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const Granule end = i + 1 < runs.size() ? runs[i + 1].start : kGranulesPerPage;
    const Tag nibble = static_cast<Tag>(transform(runs[i])) & 0xFu;
    for (Granule g = runs[i].start; g < end; ++g) tags_[g] = nibble;
  }
  truncated_ = true;
}

}  // namespace mtetag
