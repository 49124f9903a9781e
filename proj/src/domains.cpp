#include "sdrad/domains.hpp"

#include <algorithm>
#include <cassert>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace sdrad {

namespace {

std::string describe(const FaultRecord& fault) {
  return std::string(to_string(fault.kind)) + " at offset " + std::to_string(fault.faulting_address) +
         " (len " + std::to_string(fault.access_len) + ", domain " +
         std::to_string(fault.domain_udi) + ")";
}

}  // namespace

const char* to_string(StatusCode code) {
  switch (code) {
    case StatusCode::SUCCESSFUL_INITIALIZE:
      return "SUCCESSFUL_INITIALIZE";
    case StatusCode::ALREADY_INITIALIZE:
      return "ALREADY_INITIALIZE";
    case StatusCode::SUCCESS:
      return "SUCCESS";
    case StatusCode::UDI_OUT_OF_BOUNDS:
      return "UDI_OUT_OF_BOUNDS";
    case StatusCode::NOT_INITIALIZED:
      return "NOT_INITIALIZED";
    case StatusCode::ABNORMAL_EXIT:
      return "ABNORMAL_EXIT";
  }
  return "UNKNOWN_STATUS";
}

FatalFault::FatalFault(const FaultRecord& fault)
    : std::runtime_error("unrecoverable capability fault: " + describe(fault)), fault_(fault) {}

std::size_t heap_size_from_env(std::size_t fallback) {
  const char* raw = std::getenv(kHeapSizeEnvVar);
  if (raw == nullptr) return fallback;
  std::size_t value = 0;
  const char* end = raw + std::strlen(raw);
  const auto [ptr, ec] = std::from_chars(raw, end, value);
  if (ec != std::errc{} || ptr != end || value == 0) {
    throw ConfigError(std::string(kHeapSizeEnvVar) + " must be a positive decimal byte count, got '" +
                      raw + "'");
  }
  return value;
}

std::vector<std::size_t> pool_plan(std::size_t heap_size, std::size_t max_pool_size) {
  std::vector<std::size_t> pools;
  if (heap_size <= max_pool_size) {
    pools.push_back(heap_size);
    return pools;
  }
  pools.push_back(max_pool_size);
  std::size_t remaining = heap_size - max_pool_size;
  while (remaining > max_pool_size) {
    pools.push_back(max_pool_size);
    remaining -= max_pool_size;
  }
  pools.push_back(remaining);
  return pools;
}

Manager::Manager(ManagerConfig config) : Manager(config, arena_create(config.arena_size)) {}

Manager::Manager(ManagerConfig config, std::pair<MemoryArena, Capability> arena)
    : config_(config), arena_(std::move(arena.first)), root_(arena.second) {}

// -- lifecycle ---------------------------------------------------------------

StatusCode Manager::setup(Udi udi) {
  if (!valid_udi(udi)) return StatusCode::UDI_OUT_OF_BOUNDS;
  DomainInfo& slot = domains_[udi];
  if (slot.domain_init == InitState::INIT) return StatusCode::ALREADY_INITIALIZE;
  slot.domain_init = InitState::INIT;
  slot.parent_udi = active_;
  slot.checkpoint.reset();
  return StatusCode::SUCCESSFUL_INITIALIZE;
}

StatusCode Manager::enter(Udi udi) {
  if (!valid_udi(udi)) return StatusCode::UDI_OUT_OF_BOUNDS;
  if (domains_[udi].domain_init != InitState::INIT) return StatusCode::NOT_INITIALIZED;
  enter_stack_.push_back(active_);
  active_ = udi;
  return StatusCode::SUCCESS;
}

StatusCode Manager::exit() {
  if (active_ == kMainDomain) return StatusCode::UDI_OUT_OF_BOUNDS;
  if (enter_stack_.empty()) {
    active_ = domains_[active_].parent_udi;
  } else {
    active_ = enter_stack_.back();
    enter_stack_.pop_back();
  }
  return StatusCode::SUCCESS;
}

bool Manager::on_active_chain(Udi udi) const {
  if (udi == active_) return true;
  return std::find(enter_stack_.begin(), enter_stack_.end(), udi) != enter_stack_.end();
}

Manager::Frame Manager::bind_checkpoint(Udi udi) {
  Frame frame{udi, next_token_++, active_, enter_stack_.size(), domains_[udi].checkpoint};
  domains_[udi].checkpoint = frame.token;
  live_tokens_.push_back(frame.token);
  return frame;
}

Manager::Frame Manager::open_call(Udi udi) {
  if (!valid_udi(udi)) {
    throw DomainError(StatusCode::UDI_OUT_OF_BOUNDS,
                      "domain_call: udi " + std::to_string(udi) + " outside [1, 15]");
  }
  if (on_active_chain(udi)) {
    throw DomainError(StatusCode::ALREADY_INITIALIZE,
                      "domain_call: udi " + std::to_string(udi) + " is already executing");
  }
  setup(udi);
  Frame frame = bind_checkpoint(udi);
  enter(udi);
  return frame;
}

void Manager::close_frame(const Frame& frame) {
  active_ = frame.prev_active;
  enter_stack_.resize(std::min(enter_stack_.size(), frame.enter_depth));
  domains_[frame.udi].checkpoint = frame.prev_checkpoint;
  const auto it = std::find(live_tokens_.begin(), live_tokens_.end(), frame.token);
  assert(it != live_tokens_.end());
  if (it != live_tokens_.end()) live_tokens_.erase(it);
}

void Manager::abort_frame(const Frame& frame) {
  close_frame(frame);
  destroy(frame.udi);
}

void Manager::destroy(Udi udi) {
  if (!valid_udi(udi)) return;
  DomainInfo& slot = domains_[udi];
  if (slot.domain_init != InitState::INIT) return;
  if (on_active_chain(udi)) {
    throw DomainError(StatusCode::ALREADY_INITIALIZE,
                      "domain_destroy: udi " + std::to_string(udi) + " is executing");
  }
  for (Udi child = 1; child <= kNumberMaxDomain; ++child) {
    if (child != udi && domains_[child].domain_init == InitState::INIT &&
        domains_[child].parent_udi == udi) {
      destroy(child);
    }
  }
  if (slot.heap) slot.heap->destroy();
  if (slot.heap_region) arena_.release(slot.heap_region->id);
  slot = DomainInfo{};
}

void Manager::dispatch(FaultRecord fault) {
  fault.domain_udi = active_;
  if (active_ != kMainDomain) {
    // Innermost live checkpoint on the dynamic chain, starting at the active
    // domain itself.
    std::optional<std::uint64_t> token = domains_[active_].checkpoint;
    for (auto it = enter_stack_.rbegin(); !token && it != enter_stack_.rend(); ++it) {
      if (*it != kMainDomain) token = domains_[*it].checkpoint;
    }
    if (token) {
      assert(std::find(live_tokens_.begin(), live_tokens_.end(), *token) != live_tokens_.end());
      throw detail::Rewind{*token, fault, kRewindCode};
    }
  }
  if (config_.main_fault == MainFaultPolicy::Throw) throw FatalFault(fault);
  std::fprintf(stderr, "sdrad: capability fault in main domain: %s\n", describe(fault).c_str());
  std::exit(EXIT_FAILURE);
}

// -- heaps -------------------------------------------------------------------

std::size_t Manager::resolve_heap_size() const {
  if (config_.heap_size) return *config_.heap_size;
  return heap_size_from_env(config_.default_heap_size);
}

void Manager::heap_init() {
  DomainInfo& slot = active_info();
  if (slot.heap_init == InitState::INIT) return;

  const std::size_t size = resolve_heap_size();
  const auto region = arena_.reserve(size);
  if (!region) {
    throw ConfigError("heap_init: arena cannot hold a " + std::to_string(size) +
                      "-byte heap for domain " + std::to_string(active_));
  }
  auto region_cap = cap_address_set(root_, region->base);
  auto heap_cap = region_cap ? cap_bounds_set(*region_cap, size) : region_cap;
  if (!heap_cap) {
    arena_.release(region->id);
    throw ConfigError("heap_init: cannot derive heap capability");
  }

  std::unique_ptr<tlsf::Control> control;
  ArenaOffset address = region->base;
  try {
    for (const std::size_t pool : pool_plan(size, config_.max_pool_size)) {
      auto pool_cap = cap_address_set(*heap_cap, address);
      if (!control) {
        control = std::make_unique<tlsf::Control>(arena_, *pool_cap, pool, config_.max_pool_size);
      } else if (pool >= tlsf::kMinPoolSize) {
        control->add_pool(*pool_cap, pool);
      }
      address += pool;
    }
  } catch (const std::invalid_argument& e) {
    arena_.release(region->id);
    throw ConfigError(std::string("heap_init: ") + e.what());
  }

  slot.heap = std::move(control);
  slot.heap_region = region;
  slot.heap_init = InitState::INIT;
}

Expected<Capability, tlsf::AllocError> Manager::dalloc(std::size_t size) {
  if (active_info().heap_init != InitState::INIT) heap_init();
  return active_info().heap->malloc(round_representable_length(size));
}

Expected<void, tlsf::AllocError> Manager::dfree(const Capability& cap) {
  DomainInfo& slot = active_info();
  if (slot.heap_init != InitState::INIT) return Unexpected{tlsf::AllocError::InvalidFree};
  // Re-derive from the whole-heap capability so the header below the
  // payload's lower bound is reachable.
  auto whole = cap_address_set(slot.heap->heap_capability(), cap_address_get(cap));
  if (!whole) return Unexpected{tlsf::AllocError::InvalidFree};
  return slot.heap->free(*whole);
}

Expected<Capability, tlsf::AllocError> Manager::dcalloc(std::size_t count, std::size_t size) {
  if (size != 0 && count > static_cast<std::size_t>(-1) / size) {
    return Unexpected{tlsf::AllocError::OutOfMemory};
  }
  auto cap = dalloc(count * size);
  if (!cap) return cap;
  if (auto fault = arena_.fill(*cap, 0, cap->length(), std::byte{0})) dispatch(*fault);
  return cap;
}

Expected<Capability, tlsf::AllocError> Manager::drealloc(const Capability& cap, std::size_t new_size) {
  if (cap.is_null()) return dalloc(new_size);
  DomainInfo& slot = active_info();
  if (slot.heap_init != InitState::INIT) return Unexpected{tlsf::AllocError::InvalidFree};
  auto whole = cap_address_set(slot.heap->heap_capability(), cap_address_get(cap));
  if (!whole || !slot.heap->offset_to_block(*whole)) return Unexpected{tlsf::AllocError::InvalidFree};

  auto fresh = dalloc(new_size);
  if (!fresh) return fresh;
  const std::size_t copy_len = std::min(cap.length(), fresh->length());
  std::vector<std::byte> bytes(copy_len);
  load_into(cap, 0, bytes);
  store(*fresh, 0, bytes);
  if (auto freed = dfree(cap); !freed) {
    dfree(*fresh);
    return Unexpected{freed.error()};
  }
  return fresh;
}

// -- guarded accesses --------------------------------------------------------

void Manager::store(const Capability& cap, std::size_t offset, std::span<const std::byte> data) {
  if (auto fault = arena_.store(cap, offset, data)) dispatch(*fault);
}

std::vector<std::byte> Manager::load(const Capability& cap, std::size_t offset, std::size_t len) {
  auto bytes = arena_.load(cap, offset, len);
  if (!bytes) dispatch(bytes.error());
  return std::move(bytes).value();
}

void Manager::load_into(const Capability& cap, std::size_t offset, std::span<std::byte> out) {
  if (auto fault = arena_.load_into(cap, offset, out)) dispatch(*fault);
}

}  // namespace sdrad
