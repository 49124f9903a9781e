#pragma once

// Two-Level Segregated Fit allocator living inside a MemoryArena.
//
// Block metadata is stored in the arena and is only ever reached through
// capabilities derived from the control's whole-heap capability, never by
// widening a payload capability. Offsets are in 16-byte units to leave room
// for capability-sized fields:
//
//   header + 0   prev_phys  (16-byte slot, arena offset of the previous block)
//   header + 16  size|flags (16-byte slot; bit 0 = this free, bit 1 = prev free)
//   header + 32  payload    (next_free / prev_free links while the block is free)
//
// Free-list heads and bitmaps are host-side.

#include <array>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <optional>
#include <vector>

#include "sdrad/cap_mem.hpp"
#include "sdrad/expected.hpp"

namespace sdrad::tlsf {

inline constexpr std::size_t kAlignSizeLog2 = 4;
inline constexpr std::size_t kAlignSize = std::size_t{1} << kAlignSizeLog2;
inline constexpr std::size_t kSlIndexCountLog2 = 5;
inline constexpr std::size_t kSlIndexCount = std::size_t{1} << kSlIndexCountLog2;
inline constexpr std::size_t kFlIndexShift = 8;
inline constexpr std::size_t kSmallBlockSize = std::size_t{1} << kFlIndexShift;
inline constexpr std::size_t kFlIndexMax = 32;
inline constexpr std::size_t kFlIndexCount = kFlIndexMax - kFlIndexShift + 1;

inline constexpr std::size_t kBlockStartOffset = 2 * kAlignSize;  // payload offset from header
inline constexpr std::size_t kBlockHeaderOverhead = kBlockStartOffset;
inline constexpr std::size_t kBlockSizeMin = kAlignSize;
inline constexpr std::size_t kBlockSizeMax = std::size_t{1} << kFlIndexMax;
inline constexpr std::size_t kPoolOverhead = 2 * kBlockHeaderOverhead;  // first header + sentinel
inline constexpr std::size_t kMinPoolSize = kPoolOverhead + kBlockSizeMin;
inline constexpr std::size_t kDefaultMaxPoolSize = std::size_t{16} << 20;

enum class AllocError { OutOfMemory, DoubleFree, InvalidFree };

const char* to_string(AllocError error);

struct ClassIndex {
  std::size_t fl = 0;
  std::size_t sl = 0;
  friend bool operator==(const ClassIndex&, const ClassIndex&) = default;
};

// Size class of a block of `size` bytes (size >= 16).
ClassIndex mapping_insert(std::size_t size);

// Class at which a good-fit search for `size` starts: sizes above the small
// range are rounded up to the next class boundary first.
ClassIndex mapping_search(std::size_t size);

struct PoolDescriptor {
  Capability region;  // bounded to the pool
  std::size_t size = 0;
};

// Header reference: a capability derived from the heap capability and
// addressed at the block header.
struct BlockRef {
  Capability header;
  ArenaOffset offset() const { return header.address(); }
  friend bool operator==(const BlockRef&, const BlockRef&) = default;
};

struct BlockInfo {
  ArenaOffset offset = 0;  // header
  std::size_t size = 0;    // payload
  bool free = false;
  bool prev_free = false;
};

struct SplitResult {
  BlockRef allocated;
  std::optional<BlockRef> remainder;
};

struct Stats {
  std::size_t bytes_allocated = 0;  // sum of payload sizes of live blocks
  std::size_t bytes_reserved = 0;   // sum of pool sizes
  std::size_t live_allocations = 0;
  friend bool operator==(const Stats&, const Stats&) = default;
};

// All public members lock an internal mutex.
class Control {
 public:
  // Initializes a control whose first pool is [region.address(), +size).
  // `region`'s bounds become the whole-heap authority used for every header
  // derivation, so later pools must fall inside them. Throws
  // std::invalid_argument for sizes outside [kMinPoolSize, max_pool_size].
  Control(MemoryArena& arena, const Capability& region, std::size_t size,
          std::size_t max_pool_size = kDefaultMaxPoolSize);

  Control(const Control&) = delete;
  Control& operator=(const Control&) = delete;

  // Throws std::invalid_argument on overlap, size out of range, or a region
  // outside the heap capability.
  void add_pool(const Capability& region, std::size_t size);

  Expected<Capability, AllocError> malloc(std::size_t size);
  Expected<void, AllocError> free(const Capability& cap);

  // Returns every pool; the control is unusable afterwards.
  std::vector<PoolDescriptor> destroy();

  // Allocator steps, exposed for white-box tests.
  std::optional<BlockRef> find_suitable_block(std::size_t size) const;
  SplitResult block_split(const BlockRef& block, std::size_t size);
  BlockRef block_merge(const BlockRef& block);
  Expected<BlockRef, AllocError> offset_to_block(const Capability& payload) const;

  // Inspection.
  Stats stats() const;
  std::vector<PoolDescriptor> pools() const;
  std::vector<BlockInfo> walk_pool(std::size_t pool_index) const;
  BlockInfo block_info(const BlockRef& block) const;
  std::size_t free_bytes() const;
  std::size_t max_pool_size() const { return max_pool_size_; }
  const Capability& heap_capability() const { return heap_cap_; }
  bool bitmap_bit(ClassIndex cls) const;
  bool destroyed() const { return destroyed_; }

  // Bitmap bit set <=> free-list non-empty, for every class.
  bool check_bitmaps() const;
  // Full structural check; throws std::logic_error describing the first
  // violation found.
  void validate() const;

 private:
  static constexpr std::uint64_t kNull = ~std::uint64_t{0};
  static constexpr std::uint64_t kFreeBit = 1;
  static constexpr std::uint64_t kPrevFreeBit = 2;

  Capability header_cap(ArenaOffset header) const;
  std::uint64_t read(ArenaOffset at, std::size_t field) const;
  void write(ArenaOffset at, std::size_t field, std::uint64_t value);

  std::size_t size_of(ArenaOffset block) const;
  bool is_free(ArenaOffset block) const;
  bool is_prev_free(ArenaOffset block) const;
  void set_size(ArenaOffset block, std::size_t size);
  void set_free(ArenaOffset block, bool free);
  void set_prev_free(ArenaOffset block, bool free);
  ArenaOffset prev_phys(ArenaOffset block) const;
  ArenaOffset next_phys(ArenaOffset block) const;
  ArenaOffset link_next(ArenaOffset block);

  void insert_free(ArenaOffset block);
  void remove_free(ArenaOffset block);
  std::optional<ArenaOffset> search(std::size_t size) const;
  std::optional<ArenaOffset> search_exact_class(std::size_t size) const;
  std::optional<SplitResult> split_locked(ArenaOffset block, std::size_t size);
  ArenaOffset merge_locked(ArenaOffset block);
  void add_pool_locked(const Capability& region, std::size_t size);
  std::vector<BlockInfo> walk_locked(const PoolDescriptor& pool) const;
  void require_live() const;

  MemoryArena& arena_;
  Capability heap_cap_;
  std::size_t max_pool_size_;
  std::uint32_t fl_bitmap_ = 0;
  std::array<std::uint32_t, kFlIndexCount> sl_bitmap_{};
  std::array<std::array<std::uint64_t, kSlIndexCount>, kFlIndexCount> heads_;
  std::vector<PoolDescriptor> pools_;
  Stats stats_;
  bool destroyed_ = false;
  mutable std::mutex mutex_;
};

}  // namespace sdrad::tlsf
