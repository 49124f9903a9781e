#pragma once

// Software model of CHERI-style capabilities over a flat byte arena.
//
// Every guarded access names a Capability. The arena checks tag, permissions
// and bounds (in that order) and reports a FaultRecord instead of touching
// memory when any check fails, so a faulting access never writes a byte.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "sdrad/expected.hpp"

namespace sdrad {

using ArenaOffset = std::size_t;

// Unique domain identifier. 0 is the main domain.
using Udi = std::uint32_t;

enum class FaultKind { BoundsViolation, PermissionViolation, TagViolation };

const char* to_string(FaultKind kind);

struct FaultRecord {
  FaultKind kind = FaultKind::TagViolation;
  ArenaOffset faulting_address = 0;
  std::size_t access_len = 0;
  Udi domain_udi = 0;

  friend bool operator==(const FaultRecord&, const FaultRecord&) = default;
};

struct Permissions {
  bool load = false;
  bool store = false;
  bool execute = false;  // modelled, never granted

  static constexpr Permissions load_store() { return {true, true, false}; }
  static constexpr Permissions load_only() { return {true, false, false}; }
  static constexpr Permissions none() { return {}; }

  constexpr bool subset_of(const Permissions& other) const {
    return (!load || other.load) && (!store || other.store) && (!execute || other.execute);
  }
  constexpr Permissions operator&(const Permissions& mask) const {
    return {load && mask.load, store && mask.store, execute && mask.execute};
  }

  friend bool operator==(const Permissions&, const Permissions&) = default;
};

class MemoryArena;

// A protected reference into a MemoryArena. The only ways to obtain a tagged
// capability are arena_create (the root) and the derivation functions below,
// none of which can widen bounds or add permissions.
class Capability {
 public:
  // The null capability: untagged, empty bounds at address 0.
  Capability() = default;

  ArenaOffset address() const { return address_; }
  ArenaOffset base() const { return base_; }
  ArenaOffset top() const { return top_; }
  std::size_t length() const { return top_ - base_; }
  Permissions perms() const { return perms_; }
  bool tag() const { return tag_; }
  bool is_null() const { return !tag_ && address_ == 0 && base_ == 0 && top_ == 0; }

  friend bool operator==(const Capability&, const Capability&) = default;

 private:
  Capability(ArenaOffset address, ArenaOffset base, ArenaOffset top, Permissions perms, bool tag)
      : address_(address), base_(base), top_(top), perms_(perms), tag_(tag) {}

  friend std::pair<MemoryArena, Capability> arena_create(std::size_t size);
  friend Expected<Capability, FaultRecord> cap_address_set(const Capability& src, ArenaOffset new_address);
  friend Expected<Capability, FaultRecord> cap_bounds_set(const Capability& src, std::size_t len);
  friend Expected<Capability, FaultRecord> cap_perms_and(const Capability& src, Permissions mask);
  friend Capability cap_clear_tag(const Capability& src);

  ArenaOffset address_ = 0;
  ArenaOffset base_ = 0;
  ArenaOffset top_ = 0;
  Permissions perms_{};
  bool tag_ = false;
};

// Creates a zero-filled arena of `size` bytes and its root capability
// (whole arena, load+store). Throws std::invalid_argument when size is 0.
std::pair<MemoryArena, Capability> arena_create(std::size_t size);

// Re-addresses `src`, keeping its bounds and permissions. The new address may
// lie outside the bounds; only a dereference through it faults.
Expected<Capability, FaultRecord> cap_address_set(const Capability& src, ArenaOffset new_address);

inline ArenaOffset cap_address_get(const Capability& cap) { return cap.address(); }

// Narrows bounds to [address, address + len). Fails with BoundsViolation if
// that window is not inside the current bounds.
Expected<Capability, FaultRecord> cap_bounds_set(const Capability& src, std::size_t len);

// Intersects permissions with `mask`.
Expected<Capability, FaultRecord> cap_perms_and(const Capability& src, Permissions mask);

Capability cap_clear_tag(const Capability& src);

// Smallest multiple of 16 that is >= max(size, 16).
constexpr std::size_t round_representable_length(std::size_t size) {
  if (size <= 16) return 16;
  return (size + 15) & ~std::size_t{15};
}

struct ArenaRegion {
  ArenaOffset base = 0;
  std::size_t length = 0;
  std::uint64_t id = 0;
};

class MemoryArena {
 public:
  MemoryArena(MemoryArena&&) = default;
  MemoryArena& operator=(MemoryArena&&) = default;
  MemoryArena(const MemoryArena&) = delete;
  MemoryArena& operator=(const MemoryArena&) = delete;

  std::size_t size() const { return bytes_.size(); }

  // Guarded accesses. `offset` is relative to cap.address().
  std::optional<FaultRecord> store(const Capability& cap, std::size_t offset,
                                   std::span<const std::byte> data);
  Expected<std::vector<std::byte>, FaultRecord> load(const Capability& cap, std::size_t offset,
                                                     std::size_t len) const;
  std::optional<FaultRecord> load_into(const Capability& cap, std::size_t offset,
                                       std::span<std::byte> out) const;
  std::optional<FaultRecord> fill(const Capability& cap, std::size_t offset, std::size_t len,
                                  std::byte value);

  Expected<std::uint64_t, FaultRecord> load_u64(const Capability& cap, std::size_t offset) const;
  std::optional<FaultRecord> store_u64(const Capability& cap, std::size_t offset,
                                       std::uint64_t value);

  // Region accounting: first-fit placement of non-overlapping regions.
  std::optional<ArenaRegion> reserve(std::size_t length, std::size_t alignment = 16);
  bool release(std::uint64_t region_id);
  std::size_t reserved_bytes() const { return reserved_bytes_; }
  std::vector<ArenaRegion> regions() const;

  // Unchecked view of the backing bytes for snapshots in tests and tools.
  std::span<const std::byte> raw_bytes() const { return bytes_; }

 private:
  explicit MemoryArena(std::size_t size) : bytes_(size) {}
  friend std::pair<MemoryArena, Capability> arena_create(std::size_t size);

  std::optional<FaultRecord> check(const Capability& cap, std::size_t offset, std::size_t len,
                                   bool is_store) const;

  std::vector<std::byte> bytes_;
  std::map<ArenaOffset, ArenaRegion> regions_;
  std::uint64_t next_region_id_ = 1;
  std::size_t reserved_bytes_ = 0;
};

}  // namespace sdrad
