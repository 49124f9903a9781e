#include "sdrad/tlsf.hpp"

#include <algorithm>
#include <bit>
#include <set>
#include <stdexcept>
#include <string>

namespace sdrad::tlsf {

namespace {

constexpr std::size_t kPrevPhysField = 0;
constexpr std::size_t kSizeField = kAlignSize;
constexpr std::size_t kNextFreeField = kBlockStartOffset;
constexpr std::size_t kPrevFreeField = kBlockStartOffset + 8;

std::size_t floor_log2(std::size_t v) { return static_cast<std::size_t>(std::bit_width(v)) - 1; }

std::size_t adjust_request(std::size_t size) {
  return std::max(round_representable_length(size), kBlockSizeMin);
}

[[noreturn]] void corrupt(const std::string& what) {
  throw std::logic_error("tlsf: " + what);
}

}  // namespace

const char* to_string(AllocError error) {
  switch (error) {
    case AllocError::OutOfMemory:
      return "OutOfMemory";
    case AllocError::DoubleFree:
      return "DoubleFree";
    case AllocError::InvalidFree:
      return "InvalidFree";
  }
  return "UnknownAllocError";
}

ClassIndex mapping_insert(std::size_t size) {
  if (size < kSmallBlockSize) return {0, size / (kSmallBlockSize / kSlIndexCount)};
  const std::size_t log2 = floor_log2(size);
  const std::size_t sl = (size >> (log2 - kSlIndexCountLog2)) ^ kSlIndexCount;
  return {log2 - (kFlIndexShift - 1), sl};
}

ClassIndex mapping_search(std::size_t size) {
  if (size >= kSmallBlockSize) {
    size += (std::size_t{1} << (floor_log2(size) - kSlIndexCountLog2)) - 1;
  }
  return mapping_insert(size);
}

Control::Control(MemoryArena& arena, const Capability& region, std::size_t size,
                 std::size_t max_pool_size)
    : arena_(arena), heap_cap_(region), max_pool_size_(max_pool_size) {
  if (!region.tag()) throw std::invalid_argument("tlsf: heap capability is untagged");
  if (!region.perms().load || !region.perms().store) {
    throw std::invalid_argument("tlsf: heap capability lacks load/store permission");
  }
  if (max_pool_size_ < kMinPoolSize || max_pool_size_ - kPoolOverhead > kBlockSizeMax) {
    throw std::invalid_argument("tlsf: max pool size out of range");
  }
  for (auto& row : heads_) row.fill(kNull);
  add_pool_locked(region, size);
}

// -- metadata access ---------------------------------------------------------

Capability Control::header_cap(ArenaOffset header) const {
  auto cap = cap_address_set(heap_cap_, header);
  if (!cap) corrupt("heap capability lost its tag");
  return *cap;
}

std::uint64_t Control::read(ArenaOffset at, std::size_t field) const {
  auto value = arena_.load_u64(header_cap(at), field);
  if (!value) {
    corrupt(std::string("metadata load faulted (") + to_string(value.error().kind) + ") at " +
            std::to_string(value.error().faulting_address));
  }
  return *value;
}

void Control::write(ArenaOffset at, std::size_t field, std::uint64_t value) {
  if (auto fault = arena_.store_u64(header_cap(at), field, value)) {
    corrupt(std::string("metadata store faulted (") + to_string(fault->kind) + ") at " +
            std::to_string(fault->faulting_address));
  }
}

std::size_t Control::size_of(ArenaOffset block) const {
  return read(block, kSizeField) & ~(kFreeBit | kPrevFreeBit);
}
bool Control::is_free(ArenaOffset block) const { return read(block, kSizeField) & kFreeBit; }
bool Control::is_prev_free(ArenaOffset block) const {
  return read(block, kSizeField) & kPrevFreeBit;
}

void Control::set_size(ArenaOffset block, std::size_t size) {
  const auto flags = read(block, kSizeField) & (kFreeBit | kPrevFreeBit);
  write(block, kSizeField, size | flags);
}

void Control::set_free(ArenaOffset block, bool free) {
  const auto raw = read(block, kSizeField);
  write(block, kSizeField, free ? (raw | kFreeBit) : (raw & ~kFreeBit));
}

void Control::set_prev_free(ArenaOffset block, bool free) {
  const auto raw = read(block, kSizeField);
  write(block, kSizeField, free ? (raw | kPrevFreeBit) : (raw & ~kPrevFreeBit));
}

ArenaOffset Control::prev_phys(ArenaOffset block) const { return read(block, kPrevPhysField); }

ArenaOffset Control::next_phys(ArenaOffset block) const {
  return block + kBlockStartOffset + size_of(block);
}

// Points the next physical block back at `block` and returns it.
ArenaOffset Control::link_next(ArenaOffset block) {
  const ArenaOffset next = next_phys(block);
  write(next, kPrevPhysField, block);
  return next;
}

// -- free lists --------------------------------------------------------------

void Control::insert_free(ArenaOffset block) {
  const auto [fl, sl] = mapping_insert(size_of(block));
  const std::uint64_t current = heads_[fl][sl];
  write(block, kNextFreeField, current);
  write(block, kPrevFreeField, kNull);
  if (current != kNull) write(current, kPrevFreeField, block);
  heads_[fl][sl] = block;
  fl_bitmap_ |= std::uint32_t{1} << fl;
  sl_bitmap_[fl] |= std::uint32_t{1} << sl;
}

void Control::remove_free(ArenaOffset block) {
  const auto [fl, sl] = mapping_insert(size_of(block));
  const std::uint64_t prev = read(block, kPrevFreeField);
  const std::uint64_t next = read(block, kNextFreeField);
  if (next != kNull) write(next, kPrevFreeField, prev);
  if (prev != kNull) write(prev, kNextFreeField, next);
  if (heads_[fl][sl] == block) {
    heads_[fl][sl] = next;
    if (next == kNull) {
      sl_bitmap_[fl] &= ~(std::uint32_t{1} << sl);
      if (sl_bitmap_[fl] == 0) fl_bitmap_ &= ~(std::uint32_t{1} << fl);
    }
  }
}

std::optional<ArenaOffset> Control::search(std::size_t size) const {
  const ClassIndex start = mapping_search(size);
  if (start.fl >= kFlIndexCount) return std::nullopt;

  std::size_t fl = start.fl;
  std::uint32_t sl_map = sl_bitmap_[fl] & (~std::uint32_t{0} << start.sl);
  if (sl_map == 0) {
    const std::uint32_t fl_map =
        fl + 1 < 32 ? fl_bitmap_ & (~std::uint32_t{0} << (fl + 1)) : std::uint32_t{0};
    if (fl_map == 0) return std::nullopt;
    fl = static_cast<std::size_t>(std::countr_zero(fl_map));
    sl_map = sl_bitmap_[fl];
  }
  const auto sl = static_cast<std::size_t>(std::countr_zero(sl_map));
  return heads_[fl][sl];
}

// Good-fit rounding skips the request's own class; a block there may still
// be large enough (for example when a whole fresh pool is requested).
std::optional<ArenaOffset> Control::search_exact_class(std::size_t size) const {
  const auto [fl, sl] = mapping_insert(size);
  if (fl >= kFlIndexCount) return std::nullopt;
  for (std::uint64_t block = heads_[fl][sl]; block != kNull; block = read(block, kNextFreeField)) {
    if (size_of(block) >= size) return block;
  }
  return std::nullopt;
}

// -- split / merge -----------------------------------------------------------

// `block` is free and already unlisted. Marks the front part used.
std::optional<SplitResult> Control::split_locked(ArenaOffset block, std::size_t size) {
  const std::size_t total = size_of(block);
  if (total < size) return std::nullopt;

  SplitResult result{BlockRef{header_cap(block)}, std::nullopt};
  if (total >= size + kBlockHeaderOverhead + kBlockSizeMin) {
    const ArenaOffset rest = block + kBlockStartOffset + size;
    write(rest, kSizeField, (total - size - kBlockHeaderOverhead) | kFreeBit);
    write(rest, kPrevPhysField, block);
    set_size(block, size);
    const ArenaOffset after = link_next(rest);
    set_prev_free(after, true);
    insert_free(rest);
    result.remainder = BlockRef{header_cap(rest)};
  }

  set_free(block, false);
  set_prev_free(next_phys(block), false);
  stats_.bytes_allocated += size_of(block);
  stats_.live_allocations += 1;
  return result;
}

// `block` is allocated. Marks it free, coalesces with free neighbours and
// lists the result.
ArenaOffset Control::merge_locked(ArenaOffset block) {
  stats_.bytes_allocated -= size_of(block);
  stats_.live_allocations -= 1;
  set_free(block, true);

  if (is_prev_free(block)) {
    const ArenaOffset prev = prev_phys(block);
    remove_free(prev);
    set_size(prev, size_of(prev) + size_of(block) + kBlockHeaderOverhead);
    block = prev;
    link_next(block);
  }
  const ArenaOffset next = next_phys(block);
  if (is_free(next)) {
    remove_free(next);
    set_size(block, size_of(block) + size_of(next) + kBlockHeaderOverhead);
    link_next(block);
  }
  set_prev_free(next_phys(block), true);
  insert_free(block);
  return block;
}

// -- public operations -------------------------------------------------------

void Control::require_live() const {
  if (destroyed_) throw std::logic_error("tlsf: control used after destroy");
}

void Control::add_pool(const Capability& region, std::size_t size) {
  std::lock_guard lock(mutex_);
  require_live();
  add_pool_locked(region, size);
}

void Control::add_pool_locked(const Capability& region, std::size_t size) {
  if (!region.tag()) throw std::invalid_argument("tlsf: pool capability is untagged");
  const std::size_t pool_size = size & ~(kAlignSize - 1);
  if (pool_size < kMinPoolSize) throw std::invalid_argument("tlsf: pool smaller than minimum");
  if (size > max_pool_size_) throw std::invalid_argument("tlsf: pool larger than max pool size");

  const ArenaOffset base = region.address();
  if (base % kAlignSize != 0) throw std::invalid_argument("tlsf: pool base not 16-byte aligned");
  const ArenaOffset end = base + pool_size;
  if (base < region.base() || end > region.top()) {
    throw std::invalid_argument("tlsf: pool exceeds its region capability");
  }
  if (base < heap_cap_.base() || end > heap_cap_.top()) {
    throw std::invalid_argument("tlsf: pool outside the heap capability");
  }
  for (const auto& pool : pools_) {
    const ArenaOffset other = pool.region.base();
    if (base < other + pool.size && other < end) {
      throw std::invalid_argument("tlsf: pool overlaps an existing pool");
    }
  }

  const ArenaOffset first = base;
  const ArenaOffset sentinel = end - kBlockHeaderOverhead;
  write(first, kPrevPhysField, kNull);
  write(first, kSizeField, (pool_size - kPoolOverhead) | kFreeBit);
  write(sentinel, kPrevPhysField, first);
  write(sentinel, kSizeField, kPrevFreeBit);
  insert_free(first);

  auto pool_cap = cap_bounds_set(header_cap(base), pool_size);
  if (!pool_cap) corrupt("cannot bound pool capability");
  pools_.push_back(PoolDescriptor{*pool_cap, pool_size});
  stats_.bytes_reserved += pool_size;
}

Expected<Capability, AllocError> Control::malloc(std::size_t size) {
  std::lock_guard lock(mutex_);
  require_live();
  if (size > kBlockSizeMax) return Unexpected{AllocError::OutOfMemory};
  const std::size_t adjusted = adjust_request(size);

  auto block = search(adjusted);
  if (!block) block = search_exact_class(adjusted);
  if (!block) return Unexpected{AllocError::OutOfMemory};

  remove_free(*block);
  if (!split_locked(*block, adjusted)) corrupt("selected block smaller than request");

  auto payload = cap_address_set(heap_cap_, *block + kBlockStartOffset);
  if (!payload) corrupt("heap capability lost its tag");
  auto bounded = cap_bounds_set(*payload, adjusted);
  if (!bounded) corrupt("payload bounds exceed heap capability");
  return *bounded;
}

Expected<BlockRef, AllocError> Control::offset_to_block(const Capability& payload) const {
  const ArenaOffset address = cap_address_get(payload);
  for (const auto& pool : pools_) {
    const ArenaOffset base = pool.region.base();
    const ArenaOffset end = base + pool.size;
    if (address < base + kBlockStartOffset || address >= end - kBlockHeaderOverhead) continue;
    if ((address - base) % kAlignSize != 0) return Unexpected{AllocError::InvalidFree};
    const ArenaOffset header = address - kBlockStartOffset;
    // The header is reached through the whole-heap capability; the payload
    // capability's bounds exclude it.
    return BlockRef{header_cap(header)};
  }
  return Unexpected{AllocError::InvalidFree};
}

Expected<void, AllocError> Control::free(const Capability& cap) {
  std::lock_guard lock(mutex_);
  require_live();
  auto block = offset_to_block(cap);
  if (!block) return Unexpected{block.error()};

  const ArenaOffset header = block->offset();
  const std::size_t size = size_of(header);
  if (size == 0) return Unexpected{AllocError::InvalidFree};
  const auto pool = std::find_if(pools_.begin(), pools_.end(), [header](const PoolDescriptor& p) {
    return header >= p.region.base() && header < p.region.base() + p.size;
  });
  if (header + kBlockStartOffset + size > pool->region.base() + pool->size - kBlockHeaderOverhead) {
    return Unexpected{AllocError::InvalidFree};
  }
  if (is_free(header)) return Unexpected{AllocError::DoubleFree};

  merge_locked(header);
  return {};
}

std::vector<PoolDescriptor> Control::destroy() {
  std::lock_guard lock(mutex_);
  destroyed_ = true;
  std::vector<PoolDescriptor> out = std::move(pools_);
  pools_.clear();
  for (auto& row : heads_) row.fill(kNull);
  fl_bitmap_ = 0;
  sl_bitmap_.fill(0);
  stats_ = Stats{};
  return out;
}

std::optional<BlockRef> Control::find_suitable_block(std::size_t size) const {
  std::lock_guard lock(mutex_);
  require_live();
  auto block = search(adjust_request(size));
  if (!block) return std::nullopt;
  return BlockRef{header_cap(*block)};
}

SplitResult Control::block_split(const BlockRef& block, std::size_t size) {
  std::lock_guard lock(mutex_);
  require_live();
  const ArenaOffset header = block.offset();
  const std::size_t adjusted = adjust_request(size);
  if (!is_free(header)) throw std::invalid_argument("tlsf: block_split on an allocated block");
  if (size_of(header) < adjusted) throw std::invalid_argument("tlsf: block_split request too large");
  remove_free(header);
  return *split_locked(header, adjusted);
}

BlockRef Control::block_merge(const BlockRef& block) {
  std::lock_guard lock(mutex_);
  require_live();
  if (is_free(block.offset())) throw std::invalid_argument("tlsf: block_merge on a free block");
  return BlockRef{header_cap(merge_locked(block.offset()))};
}

// -- inspection --------------------------------------------------------------

Stats Control::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

std::vector<PoolDescriptor> Control::pools() const {
  std::lock_guard lock(mutex_);
  return pools_;
}

BlockInfo Control::block_info(const BlockRef& block) const {
  std::lock_guard lock(mutex_);
  const ArenaOffset h = block.offset();
  return BlockInfo{h, size_of(h), is_free(h), is_prev_free(h)};
}

bool Control::bitmap_bit(ClassIndex cls) const {
  std::lock_guard lock(mutex_);
  if (cls.fl >= kFlIndexCount || cls.sl >= kSlIndexCount) return false;
  return (sl_bitmap_[cls.fl] >> cls.sl) & 1U;
}

std::vector<BlockInfo> Control::walk_pool(std::size_t pool_index) const {
  std::lock_guard lock(mutex_);
  return walk_locked(pools_.at(pool_index));
}

std::vector<BlockInfo> Control::walk_locked(const PoolDescriptor& pool) const {
  std::vector<BlockInfo> blocks;
  const ArenaOffset base = pool.region.base();
  const ArenaOffset sentinel = base + pool.size - kBlockHeaderOverhead;
  ArenaOffset block = base;
  while (true) {
    if (block > sentinel) corrupt("physical walk overran pool end");
    const std::size_t size = size_of(block);
    if (size == 0) {
      if (block != sentinel) corrupt("zero-sized block before pool end");
      break;
    }
    blocks.push_back(BlockInfo{block, size, is_free(block), is_prev_free(block)});
    block = next_phys(block);
  }
  return blocks;
}

std::size_t Control::free_bytes() const {
  std::lock_guard lock(mutex_);
  std::size_t total = 0;
  for (const auto& row : heads_) {
    for (std::uint64_t block : row) {
      for (; block != kNull; block = read(block, kNextFreeField)) total += size_of(block);
    }
  }
  return total;
}

bool Control::check_bitmaps() const {
  std::lock_guard lock(mutex_);
  for (std::size_t fl = 0; fl < kFlIndexCount; ++fl) {
    if (((fl_bitmap_ >> fl) & 1U) != (sl_bitmap_[fl] != 0 ? 1U : 0U)) return false;
    for (std::size_t sl = 0; sl < kSlIndexCount; ++sl) {
      const bool bit = (sl_bitmap_[fl] >> sl) & 1U;
      if (bit != (heads_[fl][sl] != kNull)) return false;
    }
  }
  return true;
}

void Control::validate() const {
  std::lock_guard lock(mutex_);
  std::set<ArenaOffset> free_in_walk;
  Stats expected;

  for (const auto& pool : pools_) {
    expected.bytes_reserved += pool.size;
    ArenaOffset prev = kNull;
    bool prev_free = false;
    for (const auto& b : walk_locked(pool)) {
      if (prev_phys(b.offset) != prev) corrupt("prev_phys link mismatch");
      if (b.prev_free != prev_free) corrupt("prev_free flag mismatch");
      if (b.size < kBlockSizeMin || b.size % kAlignSize != 0) corrupt("bad block size");
      if (b.free && prev_free) corrupt("adjacent free blocks");
      if (b.free) {
        free_in_walk.insert(b.offset);
      } else {
        expected.bytes_allocated += b.size;
        expected.live_allocations += 1;
      }
      prev = b.offset;
      prev_free = b.free;
    }
    const ArenaOffset sentinel = pool.region.base() + pool.size - kBlockHeaderOverhead;
    if (prev_phys(sentinel) != prev || is_prev_free(sentinel) != prev_free) {
      corrupt("sentinel links mismatch");
    }
  }

  std::set<ArenaOffset> listed;
  for (std::size_t fl = 0; fl < kFlIndexCount; ++fl) {
    if (((fl_bitmap_ >> fl) & 1U) != (sl_bitmap_[fl] != 0 ? 1U : 0U)) corrupt("fl bitmap mismatch");
    for (std::size_t sl = 0; sl < kSlIndexCount; ++sl) {
      const bool bit = (sl_bitmap_[fl] >> sl) & 1U;
      if (bit != (heads_[fl][sl] != kNull)) corrupt("sl bitmap mismatch");
      std::uint64_t prev = kNull;
      for (std::uint64_t block = heads_[fl][sl]; block != kNull;
           block = read(block, kNextFreeField)) {
        if (!is_free(block)) corrupt("allocated block on a free list");
        if (mapping_insert(size_of(block)) != ClassIndex{fl, sl}) corrupt("block in wrong class");
        if (read(block, kPrevFreeField) != prev) corrupt("free-list back link mismatch");
        if (!listed.insert(block).second) corrupt("block listed twice");
        prev = block;
      }
    }
  }
  if (listed != free_in_walk) corrupt("free lists disagree with physical walk");
  if (!(expected == stats_)) corrupt("stats disagree with physical walk");
}

}  // namespace sdrad::tlsf
