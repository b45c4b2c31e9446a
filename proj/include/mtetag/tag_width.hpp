#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mtetag {

using Tag = std::uint32_t;
using Granule = std::uint32_t;

inline constexpr std::uint64_t kGranuleBytes = 16;
inline constexpr std::uint64_t kPageBytes = 4096;
inline constexpr Granule kGranulesPerPage = kPageBytes / kGranuleBytes;  // 256
inline constexpr std::size_t kPageBufferBytes = 128;

enum class TagWidth : std::uint8_t { k4 = 4, k8 = 8, k16 = 16, k32 = 32 };

inline constexpr std::array<TagWidth, 4> kAllWidths = {TagWidth::k4, TagWidth::k8,
                                                       TagWidth::k16, TagWidth::k32};

constexpr unsigned bits(TagWidth w) { return static_cast<unsigned>(w); }

constexpr Tag tag_mask(TagWidth w) {
  return bits(w) == 32 ? 0xFFFFFFFFu : ((Tag{1} << bits(w)) - 1);
}

constexpr std::uint64_t tag_space(TagWidth w) { return std::uint64_t{1} << bits(w); }

// Bytes of tag storage inside one node (four tags).
constexpr unsigned tag_array_bytes(TagWidth w) { return bits(w) / 2; }

constexpr unsigned node_size_bytes(TagWidth w) { return 11 + tag_array_bytes(w); }

/// Space accounted per page besides nodes: 1-byte root offset, 2-byte free
/// bitmap and the 1-bit mode flag. Expressed in eighths of a byte (25/8).
inline constexpr std::int64_t kMetaEighths = 25;

constexpr unsigned max_nodes(TagWidth w) {
  // floor((128 - 3.125) / node_size), evaluated in eighths.
  return static_cast<unsigned>((128 * 8 - kMetaEighths) / (8 * node_size_bytes(w)));
}

constexpr unsigned max_runs(TagWidth w) { return 4 * max_nodes(w); }

inline TagWidth width_from_bits(unsigned b) {
  switch (b) {
    case 4: return TagWidth::k4;
    case 8: return TagWidth::k8;
    case 16: return TagWidth::k16;
    case 32: return TagWidth::k32;
    default: throw std::invalid_argument("unsupported tag width: " + std::to_string(b));
  }
}

/// Exact byte count with 1/8-byte resolution.
class ByteSize {
 public:
  constexpr ByteSize() = default;
  static constexpr ByteSize from_eighths(std::int64_t e) { return ByteSize(e); }
  static constexpr ByteSize from_bytes(std::int64_t b) { return ByteSize(8 * b); }

  constexpr std::int64_t eighths() const { return eighths_; }
  constexpr double bytes() const { return static_cast<double>(eighths_) / 8.0; }

  constexpr ByteSize operator+(ByteSize o) const { return ByteSize(eighths_ + o.eighths_); }
  constexpr ByteSize operator-(ByteSize o) const { return ByteSize(eighths_ - o.eighths_); }
  constexpr ByteSize& operator+=(ByteSize o) {
    eighths_ += o.eighths_;
    return *this;
  }
  constexpr ByteSize& operator-=(ByteSize o) {
    eighths_ -= o.eighths_;
    return *this;
  }
  constexpr auto operator<=>(const ByteSize&) const = default;

 private:
  constexpr explicit ByteSize(std::int64_t e) : eighths_(e) {}
  std::int64_t eighths_ = 0;
};

inline constexpr ByteSize kPageBufferSize = ByteSize::from_bytes(kPageBufferBytes);

/// m * (11 + 4t) + 3.125 bytes.
constexpr ByteSize btree_space(TagWidth w, unsigned nodes) {
  return ByteSize::from_eighths(8 * std::int64_t{nodes} * node_size_bytes(w) + kMetaEighths);
}

static_assert(node_size_bytes(TagWidth::k4) == 13);
static_assert(node_size_bytes(TagWidth::k8) == 15);
static_assert(node_size_bytes(TagWidth::k16) == 19);
static_assert(node_size_bytes(TagWidth::k32) == 27);
static_assert(max_nodes(TagWidth::k4) == 9 && max_nodes(TagWidth::k8) == 8);
static_assert(max_nodes(TagWidth::k16) == 6 && max_nodes(TagWidth::k32) == 4);
static_assert(max_runs(TagWidth::k4) == 36 && max_runs(TagWidth::k32) == 16);

/// Granules needed to cover `bytes`.
inline constexpr std::uint64_t round_up_granules(std::uint64_t bytes) {
  return (bytes + kGranuleBytes - 1) / kGranuleBytes;
}

struct Run {
  Granule start = 0;
  Tag tag = 0;
  friend bool operator==(const Run&, const Run&) = default;
};

}  // namespace mtetag
