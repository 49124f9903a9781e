#include "sdrad/cap_mem.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace sdrad {

namespace {

FaultRecord make_fault(FaultKind kind, ArenaOffset address, std::size_t len) {
  return FaultRecord{kind, address, len, 0};
}

// a + b, saturating at SIZE_MAX.
std::size_t sat_add(std::size_t a, std::size_t b) {
  return b > std::numeric_limits<std::size_t>::max() - a ? std::numeric_limits<std::size_t>::max()
                                                          : a + b;
}

}  // namespace

const char* to_string(FaultKind kind) {
  switch (kind) {
    case FaultKind::BoundsViolation:
      return "BoundsViolation";
    case FaultKind::PermissionViolation:
      return "PermissionViolation";
    case FaultKind::TagViolation:
      return "TagViolation";
  }
  return "UnknownFault";
}

std::pair<MemoryArena, Capability> arena_create(std::size_t size) {
  if (size == 0) throw std::invalid_argument("arena_create: size must be positive");
  MemoryArena arena(size);
  Capability root(0, 0, size, Permissions::load_store(), true);
  return {std::move(arena), root};
}

Expected<Capability, FaultRecord> cap_address_set(const Capability& src, ArenaOffset new_address) {
  if (!src.tag()) return Unexpected{make_fault(FaultKind::TagViolation, src.address(), 0)};
  return Capability(new_address, src.base(), src.top(), src.perms(), true);
}

Expected<Capability, FaultRecord> cap_bounds_set(const Capability& src, std::size_t len) {
  if (!src.tag()) return Unexpected{make_fault(FaultKind::TagViolation, src.address(), len)};
  const std::size_t end = sat_add(src.address(), len);
  if (src.address() < src.base() || end > src.top() ||
      end == std::numeric_limits<std::size_t>::max()) {
    return Unexpected{make_fault(FaultKind::BoundsViolation, src.address(), len)};
  }
  return Capability(src.address(), src.address(), end, src.perms(), true);
}

Expected<Capability, FaultRecord> cap_perms_and(const Capability& src, Permissions mask) {
  if (!src.tag()) return Unexpected{make_fault(FaultKind::TagViolation, src.address(), 0)};
  return Capability(src.address(), src.base(), src.top(), src.perms() & mask, true);
}

Capability cap_clear_tag(const Capability& src) {
  return Capability(src.address(), src.base(), src.top(), src.perms(), false);
}

std::optional<FaultRecord> MemoryArena::check(const Capability& cap, std::size_t offset,
                                              std::size_t len, bool is_store) const {
  const std::size_t start = sat_add(cap.address(), offset);
  if (!cap.tag()) return make_fault(FaultKind::TagViolation, start, len);
  if (is_store ? !cap.perms().store : !cap.perms().load) {
    return make_fault(FaultKind::PermissionViolation, start, len);
  }
  const std::size_t end = sat_add(start, len);
  if (start < cap.base() || end > cap.top() || end == std::numeric_limits<std::size_t>::max()) {
    return make_fault(FaultKind::BoundsViolation, start, len);
  }
  return std::nullopt;
}

std::optional<FaultRecord> MemoryArena::store(const Capability& cap, std::size_t offset,
                                              std::span<const std::byte> data) {
  if (auto fault = check(cap, offset, data.size(), true)) return fault;
  if (!data.empty()) std::memcpy(bytes_.data() + cap.address() + offset, data.data(), data.size());
  return std::nullopt;
}

Expected<std::vector<std::byte>, FaultRecord> MemoryArena::load(const Capability& cap,
                                                                std::size_t offset,
                                                                std::size_t len) const {
  if (auto fault = check(cap, offset, len, false)) return Unexpected{*fault};
  const auto first = bytes_.begin() + static_cast<std::ptrdiff_t>(cap.address() + offset);
  return std::vector<std::byte>(first, first + static_cast<std::ptrdiff_t>(len));
}

std::optional<FaultRecord> MemoryArena::load_into(const Capability& cap, std::size_t offset,
                                                  std::span<std::byte> out) const {
  if (auto fault = check(cap, offset, out.size(), false)) return fault;
  if (!out.empty()) std::memcpy(out.data(), bytes_.data() + cap.address() + offset, out.size());
  return std::nullopt;
}

std::optional<FaultRecord> MemoryArena::fill(const Capability& cap, std::size_t offset,
                                             std::size_t len, std::byte value) {
  if (auto fault = check(cap, offset, len, true)) return fault;
  std::fill_n(bytes_.begin() + static_cast<std::ptrdiff_t>(cap.address() + offset), len, value);
  return std::nullopt;
}

Expected<std::uint64_t, FaultRecord> MemoryArena::load_u64(const Capability& cap,
                                                           std::size_t offset) const {
  if (auto fault = check(cap, offset, sizeof(std::uint64_t), false)) return Unexpected{*fault};
  std::uint64_t value;
  std::memcpy(&value, bytes_.data() + cap.address() + offset, sizeof value);
  return value;
}

std::optional<FaultRecord> MemoryArena::store_u64(const Capability& cap, std::size_t offset,
                                                  std::uint64_t value) {
  if (auto fault = check(cap, offset, sizeof value, true)) return fault;
  std::memcpy(bytes_.data() + cap.address() + offset, &value, sizeof value);
  return std::nullopt;
}

std::optional<ArenaRegion> MemoryArena::reserve(std::size_t length, std::size_t alignment) {
  if (length == 0 || alignment == 0 || !std::has_single_bit(alignment)) return std::nullopt;
  const auto align_up = [alignment](std::size_t v) { return (v + alignment - 1) & ~(alignment - 1); };

  std::size_t candidate = 0;
  for (const auto& [base, region] : regions_) {
    if (candidate + length <= base) break;
    candidate = align_up(region.base + region.length);
  }
  if (candidate > bytes_.size() || bytes_.size() - candidate < length) return std::nullopt;

  ArenaRegion region{candidate, length, next_region_id_++};
  regions_.emplace(candidate, region);
  reserved_bytes_ += length;
  return region;
}

bool MemoryArena::release(std::uint64_t region_id) {
  const auto it = std::find_if(regions_.begin(), regions_.end(),
                               [region_id](const auto& kv) { return kv.second.id == region_id; });
  if (it == regions_.end()) return false;
  reserved_bytes_ -= it->second.length;
  regions_.erase(it);
  return true;
}

std::vector<ArenaRegion> MemoryArena::regions() const {
  std::vector<ArenaRegion> out;
  out.reserve(regions_.size());
  for (const auto& [base, region] : regions_) out.push_back(region);
  return out;
}

}  // namespace sdrad
