#pragma once

// Per-page tag storage: a run-length-encoded 4,5-BTree packed into a
// 128-byte buffer, falling back to a 4-bit tag array once the tree no
// longer fits.
//
// Buffer layout in BTree mode (offsets in bytes):
//   [slot * node_size, ...)  node slots 0 .. max_nodes-1
//   125                      root node offset
//   126..127                 free-slot bitmap, little endian, bit i set = slot i free
// Node layout:
//   0..3 keys | 4..8 child offsets (0xFF = none) | 9 parent offset (0xFF = root)
//   10 .. 10+tag_array_bytes tags (little endian; 4-bit tags two per byte,
//   low nibble first) | count
// FlatArray mode: 256 4-bit tags, two per byte, low nibble = even granule.
// The mode flag lives outside the buffer (see TagRegion).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mtetag/tag_width.hpp"

namespace mtetag {

enum class StoreMode : std::uint8_t { kBTree = 0, kFlatArray = 1 };

namespace detail {

inline constexpr std::uint8_t kNoNode = 0xFF;
inline constexpr std::size_t kRootByte = 125;
inline constexpr std::size_t kBitmapByte = 126;
inline constexpr unsigned kMaxKeys = 4;
inline constexpr unsigned kMinKeys = 2;

// Thrown internally when an insertion needs a node slot beyond max_nodes.
struct NodeCapacityExceeded {};

// Decoded node. Holds one extra key/child so a split can be staged in place.
struct NodeData {
  unsigned count = 0;
  std::array<Granule, kMaxKeys + 1> keys{};
  std::array<Tag, kMaxKeys + 1> tags{};
  std::array<std::uint8_t, kMaxKeys + 2> children{};
  std::uint8_t parent = kNoNode;

  NodeData() { children.fill(kNoNode); }
  bool leaf() const { return children[0] == kNoNode; }

  // Index of the first key greater than g.
  unsigned upper_bound(Granule g) const {
    unsigned i = 0;
    while (i < count && keys[i] <= g) ++i;
    return i;
  }
  unsigned child_index(std::uint8_t slot) const {
    for (unsigned i = 0; i <= count; ++i)
      if (children[i] == slot) return i;
    throw std::logic_error("btree: child not found in parent");
  }
};

// Minimum-node layouts for a given key count, used when the incremental
// algorithms run out of node slots but a denser tree would still fit.
class CompactPlanner {
 public:
  static constexpr unsigned kMaxDepth = 4;
  static constexpr unsigned kMaxPlanKeys = 64;
  static constexpr unsigned kInf = 1u << 20;

  static const CompactPlanner& instance() {
    static const CompactPlanner planner;
    return planner;
  }

  // Minimum nodes for n keys in a valid tree (root may hold a single key).
  unsigned min_nodes(unsigned n) const {
    if (n == 0 || n > kMaxPlanKeys) return kInf;
    unsigned best = kInf;
    for (unsigned d = 1; d <= kMaxDepth; ++d) best = std::min(best, root_[d][n]);
    return best;
  }

  unsigned root_depth(unsigned n) const {
    unsigned best = kInf, depth = 0;
    for (unsigned d = 1; d <= kMaxDepth; ++d) {
      if (root_[d][n] < best) {
        best = root_[d][n];
        depth = d;
      }
    }
    return depth;
  }

  // Key counts of each child subtree for an optimal node holding n keys at depth d.
  std::vector<unsigned> split(unsigned n, unsigned d, bool root) const {
    const unsigned target = (root ? root_ : sub_)[d][n];
    const unsigned lo = root ? 1 : kMinKeys;
    for (unsigned k = lo; k <= kMaxKeys && k <= n; ++k) {
      const unsigned c = k + 1;
      if (1 + fill_[d - 1][c][n - k] != target) continue;
      std::vector<unsigned> sizes;
      unsigned remaining = n - k;
      for (unsigned j = c; j > 0; --j) {
        for (unsigned a = 0; a <= remaining; ++a) {
          if (sub_[d - 1][a] >= kInf) continue;
          if (sub_[d - 1][a] + fill_[d - 1][j - 1][remaining - a] ==
              fill_[d - 1][j][remaining]) {
            sizes.push_back(a);
            remaining -= a;
            break;
          }
        }
      }
      return sizes;
    }
    throw std::logic_error("compact planner: no split");
  }

 private:
  using Table = std::array<std::array<unsigned, kMaxPlanKeys + 1>, kMaxDepth + 1>;

  CompactPlanner() {
    for (auto* t : {&sub_, &root_})
      for (auto& row : *t) row.fill(kInf);
    for (auto& per_depth : fill_)
      for (auto& row : per_depth) row.fill(kInf);
    for (unsigned n = 1; n <= kMaxKeys; ++n) {
      root_[1][n] = 1;
      if (n >= kMinKeys) sub_[1][n] = 1;
    }
    compute_fill(1);
    for (unsigned d = 2; d <= kMaxDepth; ++d) {
      for (unsigned n = 1; n <= kMaxPlanKeys; ++n) {
        for (unsigned k = 1; k <= kMaxKeys && k <= n; ++k) {
          const unsigned f = fill_[d - 1][k + 1][n - k];
          if (f >= kInf) continue;
          root_[d][n] = std::min(root_[d][n], 1 + f);
          if (k >= kMinKeys) sub_[d][n] = std::min(sub_[d][n], 1 + f);
        }
      }
      compute_fill(d);
    }
  }

  // fill_[d][j][s]: fewest nodes for j non-root subtrees of depth d holding s keys.
  void compute_fill(unsigned d) {
    fill_[d][0][0] = 0;
    for (unsigned j = 1; j <= kMaxKeys + 1; ++j) {
      for (unsigned s = 0; s <= kMaxPlanKeys; ++s) {
        unsigned best = kInf;
        for (unsigned a = 0; a <= s; ++a) {
          if (sub_[d][a] >= kInf || fill_[d][j - 1][s - a] >= kInf) continue;
          best = std::min(best, sub_[d][a] + fill_[d][j - 1][s - a]);
        }
        fill_[d][j][s] = best;
      }
    }
  }

  Table sub_{};
  Table root_{};
  std::array<std::array<std::array<unsigned, kMaxPlanKeys + 1>, kMaxKeys + 2>, kMaxDepth + 1>
      fill_{};
};

// Node-level view over a BTree-mode page buffer. Byte may be const for
// read-only access.
template <typename Byte>
class BasicBTreeImage {
  static constexpr bool kMutable = !std::is_const_v<Byte>;

 public:
  BasicBTreeImage(Byte* buf, TagWidth w)
      : buf_(buf), width_(w), node_size_(node_size_bytes(w)), slots_(max_nodes(w)) {}

  unsigned slots() const { return slots_; }
  unsigned root() const { return buf_[kRootByte] / node_size_; }
  std::uint16_t free_bitmap() const {
    return static_cast<std::uint16_t>(buf_[kBitmapByte] | (buf_[kBitmapByte + 1] << 8));
  }
  std::uint16_t slot_mask() const { return static_cast<std::uint16_t>((1u << slots_) - 1); }
  unsigned node_count() const {
    return static_cast<unsigned>(std::popcount(static_cast<std::uint16_t>(
        ~free_bitmap() & slot_mask())));
  }

  NodeData load(unsigned slot) const {
    const Byte* p = node_ptr(slot);
    NodeData n;
    n.count = p[10 + tag_array_bytes(width_)];
    for (unsigned i = 0; i < kMaxKeys; ++i) {
      n.keys[i] = p[i];
      n.tags[i] = read_tag(p, i);
    }
    for (unsigned i = 0; i <= kMaxKeys; ++i) n.children[i] = to_slot(p[4 + i]);
    n.parent = to_slot(p[9]);
    return n;
  }

  // Run containing granule g (the largest key <= g).
  Run find(Granule g) const {
    Run best{};
    unsigned slot = root();
    for (;;) {
      const NodeData n = load(slot);
      const unsigned i = n.upper_bound(g);
      if (i > 0) best = Run{n.keys[i - 1], n.tags[i - 1]};
      if (n.leaf()) return best;
      slot = n.children[i];
    }
  }

  // (slot, index) of an exact key.
  std::optional<std::pair<unsigned, unsigned>> locate(Granule key) const {
    unsigned slot = root();
    for (;;) {
      const NodeData n = load(slot);
      const unsigned i = n.upper_bound(key);
      if (i > 0 && n.keys[i - 1] == key) return std::pair{slot, i - 1};
      if (n.leaf()) return std::nullopt;
      slot = n.children[i];
    }
  }

  void collect_runs(unsigned slot, std::vector<Run>& out) const {
    const NodeData n = load(slot);
    for (unsigned i = 0; i < n.count; ++i) {
      if (!n.leaf()) collect_runs(n.children[i], out);
      out.push_back(Run{n.keys[i], n.tags[i]});
    }
    if (!n.leaf()) collect_runs(n.children[n.count], out);
  }

  std::vector<Run> runs() const {
    std::vector<Run> out;
    out.reserve(4 * slots_);
    collect_runs(root(), out);
    return out;
  }

  unsigned depth() const {
    unsigned d = 1;
    for (NodeData n = load(root()); !n.leaf(); n = load(n.children[0])) ++d;
    return d;
  }

  unsigned key_count() const {
    unsigned total = 0;
    for (unsigned s = 0; s < slots_; ++s)
      if (!(free_bitmap() & (1u << s))) total += load(s).count;
    return total;
  }

  // ---- mutation ----------------------------------------------------------

  void reset() requires kMutable {
    std::memset(buf_, 0, kPageBufferBytes);
    NodeData root_node;
    root_node.count = 1;
    store(0, root_node);
    set_root(0);
    set_free_bitmap(static_cast<std::uint16_t>(slot_mask() & ~1u));
  }

  void store(unsigned slot, const NodeData& n) requires kMutable {
    Byte* p = node_ptr(slot);
    std::memset(p, 0, node_size_);
    for (unsigned i = 0; i < n.count; ++i) {
      p[i] = static_cast<std::uint8_t>(n.keys[i]);
      write_tag(p, i, n.tags[i]);
    }
    for (unsigned i = 0; i <= kMaxKeys; ++i)
      p[4 + i] = (!n.leaf() && i <= n.count) ? to_offset(n.children[i]) : kNoNode;
    p[9] = to_offset(n.parent);
    p[10 + tag_array_bytes(width_)] = static_cast<std::uint8_t>(n.count);
  }

  void retag(Granule key, Tag tag) requires kMutable {
    const auto loc = locate(key);
    if (!loc) throw std::logic_error("btree: retag of missing key");
    NodeData n = load(loc->first);
    n.tags[loc->second] = tag;
    store(loc->first, n);
  }

  // Replaces key `from` by `to` in place. No other key may lie between them.
  void rekey(Granule from, Granule to, Tag tag) requires kMutable {
    const auto loc = locate(from);
    if (!loc) throw std::logic_error("btree: rekey of missing key");
    NodeData n = load(loc->first);
    n.keys[loc->second] = to;
    n.tags[loc->second] = tag;
    store(loc->first, n);
  }

  void insert(Granule key, Tag tag) requires kMutable {
    unsigned slot = root();
    for (NodeData n = load(slot); !n.leaf(); n = load(slot)) slot = n.children[n.upper_bound(key)];
    insert_into(slot, key, tag, kNoNode);
  }

  void erase(Granule key) requires kMutable {
    const auto loc = locate(key);
    if (!loc) throw std::logic_error("btree: erase of missing key");
    auto [slot, idx] = *loc;
    NodeData n = load(slot);
    if (!n.leaf()) {
      // Swap in the in-order predecessor, then delete it from its leaf.
      unsigned leaf = n.children[idx];
      NodeData l = load(leaf);
      while (!l.leaf()) {
        leaf = l.children[l.count];
        l = load(leaf);
      }
      n.keys[idx] = l.keys[l.count - 1];
      n.tags[idx] = l.tags[l.count - 1];
      store(slot, n);
      --l.count;
      store(leaf, l);
      rebalance(leaf);
      return;
    }
    for (unsigned i = idx; i + 1 < n.count; ++i) {
      n.keys[i] = n.keys[i + 1];
      n.tags[i] = n.tags[i + 1];
    }
    --n.count;
    store(slot, n);
    rebalance(slot);
  }

  // Writes a minimum-node tree holding `runs`. Caller checks that it fits.
  void rebuild(std::span<const Run> runs) requires kMutable {
    std::memset(buf_, 0, kPageBufferBytes);
    set_free_bitmap(slot_mask());
    const auto& planner = CompactPlanner::instance();
    const unsigned d = planner.root_depth(static_cast<unsigned>(runs.size()));
    const unsigned r = build(runs, d, true, kNoNode);
    set_root(r);
  }

 private:
  Byte* node_ptr(unsigned slot) const { return buf_ + slot * node_size_; }
  std::uint8_t to_slot(std::uint8_t offset) const {
    return offset == kNoNode ? kNoNode : static_cast<std::uint8_t>(offset / node_size_);
  }
  std::uint8_t to_offset(std::uint8_t slot) const {
    return slot == kNoNode ? kNoNode : static_cast<std::uint8_t>(slot * node_size_);
  }

  Tag read_tag(const Byte* node, unsigned i) const {
    const Byte* p = node + 10;
    switch (width_) {
      case TagWidth::k4: return (i % 2 == 0) ? (p[i / 2] & 0xFu) : (p[i / 2] >> 4);
      case TagWidth::k8: return p[i];
      case TagWidth::k16: return Tag{p[2 * i]} | (Tag{p[2 * i + 1]} << 8);
      case TagWidth::k32:
        return Tag{p[4 * i]} | (Tag{p[4 * i + 1]} << 8) | (Tag{p[4 * i + 2]} << 16) |
               (Tag{p[4 * i + 3]} << 24);
    }
    return 0;
  }

  void write_tag(Byte* node, unsigned i, Tag t) const requires kMutable {
    Byte* p = node + 10;
    switch (width_) {
      case TagWidth::k4:
        if (i % 2 == 0)
          p[i / 2] = static_cast<std::uint8_t>((p[i / 2] & 0xF0u) | (t & 0xFu));
        else
          p[i / 2] = static_cast<std::uint8_t>((p[i / 2] & 0x0Fu) | ((t & 0xFu) << 4));
        return;
      case TagWidth::k8: p[i] = static_cast<std::uint8_t>(t); return;
      case TagWidth::k16:
        p[2 * i] = static_cast<std::uint8_t>(t);
        p[2 * i + 1] = static_cast<std::uint8_t>(t >> 8);
        return;
      case TagWidth::k32:
        for (unsigned b = 0; b < 4; ++b) p[4 * i + b] = static_cast<std::uint8_t>(t >> (8 * b));
        return;
    }
  }

  void set_root(unsigned slot) requires kMutable {
    buf_[kRootByte] = static_cast<std::uint8_t>(slot * node_size_);
  }
  void set_free_bitmap(std::uint16_t bits) requires kMutable {
    buf_[kBitmapByte] = static_cast<std::uint8_t>(bits);
    buf_[kBitmapByte + 1] = static_cast<std::uint8_t>(bits >> 8);
  }

  unsigned alloc() requires kMutable {
    const std::uint16_t free_bits = free_bitmap() & slot_mask();
    if (free_bits == 0) throw NodeCapacityExceeded{};
    const unsigned slot = static_cast<unsigned>(std::countr_zero(free_bits));
    set_free_bitmap(static_cast<std::uint16_t>(free_bitmap() & ~(1u << slot)));
    return slot;
  }

  void release(unsigned slot) requires kMutable {
    std::memset(node_ptr(slot), 0, node_size_);
    set_free_bitmap(static_cast<std::uint16_t>(free_bitmap() | (1u << slot)));
  }

  void set_parent(std::uint8_t child, unsigned parent) requires kMutable {
    if (child == kNoNode) return;
    NodeData c = load(child);
    c.parent = static_cast<std::uint8_t>(parent);
    store(child, c);
  }

  void insert_into(unsigned slot, Granule key, Tag tag, std::uint8_t right) requires kMutable {
    NodeData n = load(slot);
    const unsigned pos = n.upper_bound(key);
    for (unsigned i = n.count; i > pos; --i) {
      n.keys[i] = n.keys[i - 1];
      n.tags[i] = n.tags[i - 1];
      n.children[i + 1] = n.children[i];
    }
    n.keys[pos] = key;
    n.tags[pos] = tag;
    if (right != kNoNode) n.children[pos + 1] = right;
    ++n.count;
    if (n.count <= kMaxKeys) {
      store(slot, n);
      set_parent(right, slot);
      return;
    }

    // Split 5 keys: two stay, the middle moves up, two move right.
    const unsigned sibling = alloc();
    std::optional<unsigned> new_root;
    if (n.parent == kNoNode) new_root = alloc();

    NodeData left, rnode;
    left.count = 2;
    rnode.count = 2;
    for (unsigned i = 0; i < 2; ++i) {
      left.keys[i] = n.keys[i];
      left.tags[i] = n.tags[i];
      rnode.keys[i] = n.keys[i + 3];
      rnode.tags[i] = n.tags[i + 3];
    }
    if (!n.leaf()) {
      for (unsigned i = 0; i < 3; ++i) {
        left.children[i] = n.children[i];
        rnode.children[i] = n.children[i + 3];
      }
    }
    const Granule mid_key = n.keys[2];
    const Tag mid_tag = n.tags[2];

    if (new_root) {
      NodeData r;
      r.count = 1;
      r.keys[0] = mid_key;
      r.tags[0] = mid_tag;
      r.children[0] = static_cast<std::uint8_t>(slot);
      r.children[1] = static_cast<std::uint8_t>(sibling);
      store(*new_root, r);
      set_root(*new_root);
      left.parent = static_cast<std::uint8_t>(*new_root);
      rnode.parent = static_cast<std::uint8_t>(*new_root);
    } else {
      left.parent = n.parent;
      rnode.parent = n.parent;
    }
    store(slot, left);
    store(sibling, rnode);
    if (!n.leaf()) {
      for (unsigned i = 0; i < 3; ++i) {
        set_parent(left.children[i], slot);
        set_parent(rnode.children[i], sibling);
      }
    }
    if (!new_root) insert_into(n.parent, mid_key, mid_tag, static_cast<std::uint8_t>(sibling));
  }

  void rebalance(unsigned slot) requires kMutable {
    NodeData n = load(slot);
    if (n.parent == kNoNode) {
      if (n.count == 0 && !n.leaf()) {
        const unsigned child = n.children[0];
        set_parent(static_cast<std::uint8_t>(child), kNoNode);
        release(slot);
        set_root(child);
      }
      return;
    }
    if (n.count >= kMinKeys) return;

    const unsigned parent_slot = n.parent;
    NodeData p = load(parent_slot);
    const unsigned idx = p.child_index(static_cast<std::uint8_t>(slot));

    if (idx > 0) {
      NodeData left = load(p.children[idx - 1]);
      if (left.count > kMinKeys) {
        // Rotate right through the parent.
        for (unsigned i = n.count; i > 0; --i) {
          n.keys[i] = n.keys[i - 1];
          n.tags[i] = n.tags[i - 1];
        }
        for (unsigned i = n.count + 1; i > 0; --i) n.children[i] = n.children[i - 1];
        n.keys[0] = p.keys[idx - 1];
        n.tags[0] = p.tags[idx - 1];
        n.children[0] = left.children[left.count];
        ++n.count;
        p.keys[idx - 1] = left.keys[left.count - 1];
        p.tags[idx - 1] = left.tags[left.count - 1];
        left.children[left.count] = kNoNode;
        --left.count;
        store(p.children[idx - 1], left);
        store(slot, n);
        store(parent_slot, p);
        set_parent(n.children[0], slot);
        return;
      }
    }
    if (idx < p.count) {
      NodeData right = load(p.children[idx + 1]);
      if (right.count > kMinKeys) {
        // Rotate left through the parent.
        n.keys[n.count] = p.keys[idx];
        n.tags[n.count] = p.tags[idx];
        n.children[n.count + 1] = right.children[0];
        ++n.count;
        p.keys[idx] = right.keys[0];
        p.tags[idx] = right.tags[0];
        for (unsigned i = 0; i + 1 < right.count; ++i) {
          right.keys[i] = right.keys[i + 1];
          right.tags[i] = right.tags[i + 1];
        }
        for (unsigned i = 0; i < right.count; ++i) right.children[i] = right.children[i + 1];
        right.children[right.count] = kNoNode;
        --right.count;
        store(p.children[idx + 1], right);
        store(slot, n);
        store(parent_slot, p);
        set_parent(n.children[n.count], slot);
        return;
      }
    }

    // Merge with a sibling that holds exactly kMinKeys keys.
    const unsigned sep = idx > 0 ? idx - 1 : idx;
    const unsigned left_slot = p.children[sep];
    const unsigned right_slot = p.children[sep + 1];
    NodeData l = load(left_slot);
    const NodeData r = load(right_slot);
    l.keys[l.count] = p.keys[sep];
    l.tags[l.count] = p.tags[sep];
    for (unsigned i = 0; i < r.count; ++i) {
      l.keys[l.count + 1 + i] = r.keys[i];
      l.tags[l.count + 1 + i] = r.tags[i];
    }
    for (unsigned i = 0; i <= r.count; ++i) l.children[l.count + 1 + i] = r.children[i];
    l.count += 1 + r.count;
    for (unsigned i = sep; i + 1 < p.count; ++i) {
      p.keys[i] = p.keys[i + 1];
      p.tags[i] = p.tags[i + 1];
    }
    for (unsigned i = sep + 1; i < p.count; ++i) p.children[i] = p.children[i + 1];
    p.children[p.count] = kNoNode;
    --p.count;
    release(right_slot);
    store(left_slot, l);
    store(parent_slot, p);
    if (!r.leaf())
      for (unsigned i = 0; i <= r.count; ++i) set_parent(r.children[i], left_slot);
    rebalance(parent_slot);
  }

  unsigned build(std::span<const Run> runs, unsigned depth, bool is_root,
                 std::uint8_t parent) requires kMutable {
    const unsigned slot = alloc();
    NodeData n;
    n.parent = parent;
    if (depth == 1) {
      n.count = static_cast<unsigned>(runs.size());
      for (unsigned i = 0; i < n.count; ++i) {
        n.keys[i] = runs[i].start;
        n.tags[i] = runs[i].tag;
      }
      store(slot, n);
      return slot;
    }
    const auto sizes = CompactPlanner::instance().split(static_cast<unsigned>(runs.size()),
                                                       depth, is_root);
    store(slot, n);  // reserve before children so slots follow pre-order
    std::size_t pos = 0;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      n.children[c] = static_cast<std::uint8_t>(
          build(runs.subspan(pos, sizes[c]), depth - 1, false, static_cast<std::uint8_t>(slot)));
      pos += sizes[c];
      if (c + 1 < sizes.size()) {
        n.keys[c] = runs[pos].start;
        n.tags[c] = runs[pos].tag;
        ++pos;
      }
    }
    n.count = static_cast<unsigned>(sizes.size() - 1);
    store(slot, n);
    return slot;
  }

  Byte* buf_;
  TagWidth width_;
  unsigned node_size_;
  unsigned slots_;
};

inline unsigned flat_get(const std::uint8_t* buf, Granule g) {
  return (g % 2 == 0) ? (buf[g / 2] & 0xFu) : (buf[g / 2] >> 4);
}
inline void flat_set(std::uint8_t* buf, Granule g, unsigned t) {
  if (g % 2 == 0)
    buf[g / 2] = static_cast<std::uint8_t>((buf[g / 2] & 0xF0u) | (t & 0xFu));
  else
    buf[g / 2] = static_cast<std::uint8_t>((buf[g / 2] & 0x0Fu) | ((t & 0xFu) << 4));
}

// Applies a range write to a canonical run list.
inline std::vector<Run> apply_range(std::span<const Run> runs, Granule first, Granule count,
                                    Tag tag) {
  std::array<Tag, kGranulesPerPage> tags{};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const Granule end = i + 1 < runs.size() ? runs[i + 1].start : kGranulesPerPage;
    for (Granule g = runs[i].start; g < end; ++g) tags[g] = runs[i].tag;
  }
  for (Granule g = first; g < first + count; ++g) tags[g] = tag;
  std::vector<Run> out;
  for (Granule g = 0; g < kGranulesPerPage; ++g)
    if (g == 0 || tags[g] != tags[g - 1]) out.push_back(Run{g, tags[g]});
  return out;
}

}  // namespace detail

/// Most runs a BTree can hold within a page buffer for this width.
inline unsigned btree_run_capacity(TagWidth w) {
  const auto& planner = detail::CompactPlanner::instance();
  unsigned n = 0;
  while (n + 1 <= detail::CompactPlanner::kMaxPlanKeys && planner.min_nodes(n + 1) <= max_nodes(w))
    ++n;
  return n;
}

/// Page buffer owned by value, mode flag alongside.
class OwnedPageStorage {
 public:
  std::uint8_t* data() { return bytes_.data(); }
  const std::uint8_t* data() const { return bytes_.data(); }
  bool flat() const { return flat_; }
  void set_flat(bool f) { flat_ = f; }

 private:
  std::array<std::uint8_t, kPageBufferBytes> bytes_{};
  bool flat_ = false;
};

/// Page buffer inside a TagRegion; the mode bit is packed with seven other pages.
class RegionPageStorage {
 public:
  RegionPageStorage(std::uint8_t* bytes, std::uint8_t* mode_byte, std::uint8_t mask)
      : bytes_(bytes), mode_byte_(mode_byte), mask_(mask) {}
  std::uint8_t* data() const { return bytes_; }
  bool flat() const { return (*mode_byte_ & mask_) != 0; }
  void set_flat(bool f) const {
    *mode_byte_ = static_cast<std::uint8_t>(f ? (*mode_byte_ | mask_) : (*mode_byte_ & ~mask_));
  }

 private:
  std::uint8_t* bytes_;
  std::uint8_t* mode_byte_;
  std::uint8_t mask_;
};

/// Adaptive tag store for one 4KB page.
///
/// Starts as a BTree with a single run (granule 0, tag 0). Writes keep runs
/// canonical: run starts strictly increase from 0 and adjacent runs never
/// share a tag. When a write would need more than 128 bytes the page is
/// switched, one way, to a 4-bit tag array holding the low nibble of every
/// tag; page_reset() is the only way back.
template <typename Storage>
class BasicPageStore {
 public:
  BasicPageStore(TagWidth w, Storage storage, bool initialize)
      : storage_(std::move(storage)), width_(w) {
    if (initialize) page_reset();
  }

  TagWidth width() const { return width_; }
  StoreMode mode() const { return storage_.flat() ? StoreMode::kFlatArray : StoreMode::kBTree; }
  bool is_btree() const { return mode() == StoreMode::kBTree; }

  std::span<const std::uint8_t, kPageBufferBytes> image() const {
    return std::span<const std::uint8_t, kPageBufferBytes>(
        static_cast<const std::uint8_t*>(storage_.data()), kPageBufferBytes);
  }

  Tag ldg(Granule g) const {
    check_granule(g);
    if (!is_btree()) return detail::flat_get(storage_.data(), g);
    return ro_tree().find(g).tag;
  }

  /// Run containing granule g. In FlatArray mode the run is recovered by scanning.
  Run run_at(Granule g) const {
    check_granule(g);
    if (is_btree()) return ro_tree().find(g);
    const Tag t = detail::flat_get(storage_.data(), g);
    Granule s = g;
    while (s > 0 && detail::flat_get(storage_.data(), s - 1) == t) --s;
    return Run{s, t};
  }

  void stg(Granule g, Tag tag) { stg_range(g, 1, tag); }

  void stg_range(Granule first, Granule count, Tag tag) {
    if (!try_stg_range(first, count, tag)) {
      switch_to_array();
      flat_write(first, count, tag);
    }
  }

  /// Applies the write unless it would force a switch; returns false (and
  /// leaves the page untouched) in that case. Always succeeds in FlatArray mode.
  bool try_stg_range(Granule first, Granule count, Tag tag) {
    check_range(first, count);
    check_tag(tag);
    if (count == 0) return true;
    if (!is_btree()) {
      flat_write(first, count, tag);
      return true;
    }
    std::array<std::uint8_t, kPageBufferBytes> backup;
    std::memcpy(backup.data(), storage_.data(), kPageBufferBytes);
    try {
      btree_write(first, count, tag);
      return true;
    } catch (const detail::NodeCapacityExceeded&) {
      std::memcpy(storage_.data(), backup.data(), kPageBufferBytes);
    }
    const auto next = detail::apply_range(rw_tree().runs(), first, count, tag);
    if (detail::CompactPlanner::instance().min_nodes(static_cast<unsigned>(next.size())) >
        max_nodes(width_))
      return false;
    rw_tree().rebuild(next);
    return true;
  }

  ByteSize space_used() const {
    return is_btree() ? btree_space(width_, ro_tree().node_count()) : kPageBufferSize;
  }

  /// Converts to a 4-bit array storing transform(run) for every granule of a run.
  template <typename Transform>
  void switch_to_array_with(Transform&& transform) {
    if (!is_btree()) return;
    const auto runs = ro_tree().runs();
    std::uint8_t* buf = storage_.data();
    std::memset(buf, 0, kPageBufferBytes);
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const Granule end = i + 1 < runs.size() ? runs[i + 1].start : kGranulesPerPage;
      const unsigned nibble = static_cast<unsigned>(transform(runs[i])) & 0xFu;
      for (Granule g = runs[i].start; g < end; ++g) detail::flat_set(buf, g, nibble);
    }
    storage_.set_flat(true);
  }

  void switch_to_array() {
    switch_to_array_with([](const Run& r) { return r.tag; });
  }

  void page_reset() {
    storage_.set_flat(false);
    rw_tree().reset();
  }

  /// Root-to-leaf depth; empty in FlatArray mode.
  std::optional<unsigned> depth() const {
    if (!is_btree()) return std::nullopt;
    return ro_tree().depth();
  }

  std::optional<unsigned> node_count() const {
    if (!is_btree()) return std::nullopt;
    return ro_tree().node_count();
  }

  std::vector<Run> enumerate_runs() const {
    if (is_btree()) return ro_tree().runs();
    std::vector<Run> out;
    const std::uint8_t* buf = storage_.data();
    for (Granule g = 0; g < kGranulesPerPage; ++g) {
      const Tag t = detail::flat_get(buf, g);
      if (g == 0 || t != out.back().tag) out.push_back(Run{g, t});
    }
    return out;
  }

  unsigned run_count() const {
    if (is_btree()) return ro_tree().key_count();
    return static_cast<unsigned>(enumerate_runs().size());
  }

  /// Structural self-check; returns a description of the first violation.
  std::optional<std::string> validate() const {
    if (!is_btree()) return std::nullopt;
    const auto tree = ro_tree();
    const std::uint8_t* buf = storage_.data();
    const unsigned node_size = node_size_bytes(width_);
    if (buf[detail::kRootByte] % node_size != 0) return "root offset not on a slot boundary";
    if (tree.free_bitmap() & ~tree.slot_mask()) return "free bitmap marks non-slot bits";
    const unsigned root = tree.root();
    if (root >= tree.slots() || (tree.free_bitmap() & (1u << root))) return "root slot not allocated";

    std::vector<bool> seen(tree.slots(), false);
    std::optional<unsigned> leaf_depth;
    std::optional<std::string> err;
    std::function<void(unsigned, unsigned, std::uint8_t, long, long)> walk =
        [&](unsigned slot, unsigned d, std::uint8_t parent, long lo, long hi) {
          if (err) return;
          if (slot >= tree.slots() || (tree.free_bitmap() & (1u << slot)) || seen[slot]) {
            err = "child points at a free or repeated slot";
            return;
          }
          seen[slot] = true;
          const auto n = tree.load(slot);
          if (n.parent != parent) err = "parent pointer mismatch";
          const unsigned min_keys = parent == detail::kNoNode ? 1 : detail::kMinKeys;
          if (n.count < min_keys || n.count > detail::kMaxKeys) err = "node key count out of range";
          for (unsigned i = 0; i < n.count && !err; ++i) {
            if (long{n.keys[i]} <= lo || long{n.keys[i]} >= hi) err = "key order violated";
            if (i > 0 && n.keys[i] <= n.keys[i - 1]) err = "keys not increasing";
            if (n.tags[i] > tag_mask(width_)) err = "tag exceeds width";
          }
          if (err) return;
          if (n.leaf()) {
            if (leaf_depth && *leaf_depth != d) err = "leaves at different depths";
            leaf_depth = d;
            return;
          }
          for (unsigned i = 0; i <= n.count; ++i) {
            const long clo = i == 0 ? lo : long{n.keys[i - 1]};
            const long chi = i == n.count ? hi : long{n.keys[i]};
            walk(n.children[i], d + 1, static_cast<std::uint8_t>(slot), clo, chi);
          }
        };
    walk(root, 1, detail::kNoNode, -1, kGranulesPerPage);
    if (err) return err;
    for (unsigned s = 0; s < tree.slots(); ++s)
      if (!(tree.free_bitmap() & (1u << s)) && !seen[s]) return "allocated slot unreachable";

    const auto runs = tree.runs();
    if (runs.empty() || runs.front().start != 0) return "first run does not start at 0";
    for (std::size_t i = 1; i < runs.size(); ++i)
      if (runs[i].tag == runs[i - 1].tag) return "adjacent runs share a tag";
    for (unsigned s = 0; s < tree.slots(); ++s) {
      if (!(tree.free_bitmap() & (1u << s))) continue;
      for (unsigned b = 0; b < node_size; ++b)
        if (buf[s * node_size + b] != 0) return "free slot not zeroed";
    }
    for (std::size_t b = tree.slots() * node_size; b < detail::kRootByte; ++b)
      if (buf[b] != 0) return "padding not zeroed";
    return std::nullopt;
  }

 protected:
  Storage& storage() { return storage_; }

 private:
  detail::BasicBTreeImage<const std::uint8_t> ro_tree() const {
    return {static_cast<const std::uint8_t*>(storage_.data()), width_};
  }
  detail::BasicBTreeImage<std::uint8_t> rw_tree() { return {storage_.data(), width_}; }

  void check_granule(Granule g) const {
    if (g >= kGranulesPerPage) throw std::out_of_range("granule index out of range");
  }
  void check_range(Granule first, Granule count) const {
    if (first > kGranulesPerPage || count > kGranulesPerPage - first)
      throw std::out_of_range("granule range exceeds page");
  }
  void check_tag(Tag t) const {
    if (t > tag_mask(width_)) throw std::invalid_argument("tag exceeds configured width");
  }

  void flat_write(Granule first, Granule count, Tag tag) {
    for (Granule g = first; g < first + count; ++g) detail::flat_set(storage_.data(), g, tag);
  }

  void btree_write(Granule first, Granule count, Tag tag) {
    auto tree = rw_tree();
    const Granule end = first + count;
    const bool left_merge = first > 0 && tree.find(first - 1).tag == tag;
    std::optional<Tag> right_tag;
    if (end < kGranulesPerPage) right_tag = tree.find(end).tag;
    const bool keep_first = !left_merge;
    const bool keep_end = right_tag && *right_tag != tag;

    // Keys currently in [first, end].
    std::vector<Granule> doomed;
    bool has_first = false, has_end = false;
    for (const Run& r : tree.runs()) {
      if (r.start < first || r.start > end) continue;
      if (r.start == first) {
        has_first = true;
        if (!keep_first) doomed.push_back(r.start);
      } else if (r.start == end) {
        has_end = true;
        if (!keep_end) doomed.push_back(r.start);
      } else {
        doomed.push_back(r.start);
      }
    }

    // Reuse keys that would be deleted for the ones that must be created;
    // no surviving key lies between them so order is preserved.
    std::vector<std::pair<Granule, Tag>> inserts;
    if (keep_first) {
      if (has_first) {
        tree.retag(first, tag);
      } else if (!doomed.empty()) {
        tree.rekey(doomed.front(), first, tag);
        doomed.erase(doomed.begin());
      } else {
        inserts.emplace_back(first, tag);
      }
    }
    if (keep_end && !has_end) {
      if (!doomed.empty()) {
        tree.rekey(doomed.back(), end, *right_tag);
        doomed.pop_back();
      } else {
        inserts.emplace_back(end, *right_tag);
      }
    }
    for (Granule k : doomed) tree.erase(k);
    for (const auto& [k, t] : inserts) tree.insert(k, t);
  }

  Storage storage_;
  TagWidth width_;
};

/// Self-contained page store (buffer + mode flag held by value).
class PageTagStore : public BasicPageStore<OwnedPageStorage> {
 public:
  explicit PageTagStore(TagWidth w) : BasicPageStore(w, OwnedPageStorage{}, true) {}
};

inline PageTagStore page_new(TagWidth w) { return PageTagStore(w); }

using PageRef = BasicPageStore<RegionPageStorage>;

/// Contiguous tag buffer for many pages: page i owns bytes [128i, 128(i+1)),
/// mode flags are packed one bit per page in a separate bitmap.
class TagRegion {
 public:
  explicit TagRegion(TagWidth w) : width_(w) {}

  TagWidth width() const { return width_; }
  std::size_t page_count() const { return pages_; }

  std::size_t add_page() {
    const std::size_t idx = pages_++;
    buffer_.resize(pages_ * kPageBufferBytes);
    modes_.resize((pages_ + 7) / 8);
    (void)page_at(idx, true);
    return idx;
  }

  PageRef page(std::size_t idx) { return page_at(idx, false); }
  const PageRef page(std::size_t idx) const {
    return const_cast<TagRegion*>(this)->page_at(idx, false);
  }

  std::span<const std::uint8_t> buffer() const { return buffer_; }
  std::span<const std::uint8_t> mode_bits() const { return modes_; }

 private:
  PageRef page_at(std::size_t idx, bool initialize) {
    if (idx >= pages_) throw std::out_of_range("page index out of range");
    return PageRef(width_,
                   RegionPageStorage(buffer_.data() + idx * kPageBufferBytes, &modes_[idx / 8],
                                     static_cast<std::uint8_t>(1u << (idx % 8))),
                   initialize);
  }

  TagWidth width_;
  std::size_t pages_ = 0;
  std::vector<std::uint8_t> buffer_;
  std::vector<std::uint8_t> modes_;
};

}  // namespace mtetag
