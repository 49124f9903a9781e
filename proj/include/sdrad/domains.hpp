#pragma once

// Secure rewind and discard runtime: a fixed table of in-process domains,
// each with a lazily created private TLSF heap inside the manager's arena.
//
// A capability fault raised while a domain is active rewinds to that
// domain's checkpoint. Checkpoints live in the activation of `call` or
// `with_setup`, so a rewind can never target a dead frame. The rewind is a
// C++ exception of a private type that only those boundaries catch; routines
// must not swallow it with `catch (...)` without rethrowing.

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "sdrad/cap_mem.hpp"
#include "sdrad/expected.hpp"
#include "sdrad/tlsf.hpp"

namespace sdrad {

inline constexpr Udi kMainDomain = 0;
inline constexpr Udi kNumberMaxDomain = 15;
inline constexpr std::size_t kDomainSlots = kNumberMaxDomain + 1;
inline constexpr int kRewindCode = 14;
inline constexpr std::size_t kAppDefaultHeapSize = std::size_t{4} << 20;
inline constexpr const char* kHeapSizeEnvVar = "APP_HEAP_SIZE";

// Positive values are successes, negative values failures.
enum class StatusCode : int {
  SUCCESSFUL_INITIALIZE = 1,
  ALREADY_INITIALIZE = 2,
  SUCCESS = 3,
  UDI_OUT_OF_BOUNDS = -1,
  NOT_INITIALIZED = -2,
  ABNORMAL_EXIT = -3,
};

constexpr bool succeeded(StatusCode code) { return static_cast<int>(code) > 0; }
const char* to_string(StatusCode code);

enum class InitState { UNINIT, INIT };

struct DomainInfo {
  std::optional<std::uint64_t> checkpoint;  // token of the live enclosing scope
  Udi parent_udi = kMainDomain;
  std::unique_ptr<tlsf::Control> heap;
  std::optional<ArenaRegion> heap_region;
  InitState domain_init = InitState::UNINIT;
  InitState heap_init = InitState::UNINIT;
};

enum class MainFaultPolicy {
  Terminate,  // print and exit the process
  Throw,      // raise FatalFault so a host (test, server worker) can observe it
};

struct ManagerConfig {
  std::size_t arena_size = std::size_t{64} << 20;
  // Per-domain heap size. Unset: APP_HEAP_SIZE if present, else default_heap_size.
  std::optional<std::size_t> heap_size;
  std::size_t default_heap_size = kAppDefaultHeapSize;
  std::size_t max_pool_size = tlsf::kDefaultMaxPoolSize;
  MainFaultPolicy main_fault = MainFaultPolicy::Terminate;
};

// A fault that no checkpoint can absorb.
class FatalFault : public std::runtime_error {
 public:
  explicit FatalFault(const FaultRecord& fault);
  const FaultRecord& fault() const { return fault_; }

 private:
  FaultRecord fault_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public std::logic_error {
 public:
  DomainError(StatusCode code, const std::string& what) : std::logic_error(what), code_(code) {}
  StatusCode code() const { return code_; }

 private:
  StatusCode code_;
};

struct Aborted {
  FaultRecord fault;
  int rewind_code = kRewindCode;
};

template <typename R>
class DomainOutcome {
 public:
  static DomainOutcome normal(R value) { return DomainOutcome(std::in_place_index<0>, std::move(value)); }
  static DomainOutcome aborted(const FaultRecord& fault, int code) {
    return DomainOutcome(std::in_place_index<1>, Aborted{fault, code});
  }

  bool is_normal() const { return state_.index() == 0; }
  bool is_aborted() const { return state_.index() == 1; }
  R& value() { return std::get<0>(state_); }
  const R& value() const { return std::get<0>(state_); }
  const Aborted& aborted_info() const { return std::get<1>(state_); }

 private:
  template <std::size_t I, typename... Args>
  DomainOutcome(std::in_place_index_t<I> idx, Args&&... args) : state_(idx, std::forward<Args>(args)...) {}

  std::variant<R, Aborted> state_;
};

namespace detail {

// Carries a dispatched fault to the boundary owning `token`.
struct Rewind {
  std::uint64_t token;
  FaultRecord fault;
  int code;
};

}  // namespace detail

// Heap size from APP_HEAP_SIZE (decimal bytes), or `fallback` when unset.
// Throws ConfigError on a malformed or zero value.
std::size_t heap_size_from_env(std::size_t fallback);

// Pool sizes the heap initialisation loop produces for `heap_size`.
std::vector<std::size_t> pool_plan(std::size_t heap_size, std::size_t max_pool_size);

class Manager {
 public:
  explicit Manager(ManagerConfig config = {});
  Manager(const Manager&) = delete;
  Manager& operator=(const Manager&) = delete;

  // -- domain lifecycle ------------------------------------------------------

  // Initializes slot `udi` with the active domain as parent. No checkpoint
  // is bound; use `call` or `with_setup` for rewindable execution.
  StatusCode setup(Udi udi);
  StatusCode enter(Udi udi);
  StatusCode exit();

  // Runs `routine(*this)` inside domain `udi` (set up if needed). A fault
  // dispatched while the domain is active abandons the routine, discards
  // the domain and its descendants, and yields Aborted. Throws DomainError
  // for an invalid udi or one that is already on the active chain.
  template <typename F>
  auto call(Udi udi, F&& routine);

  // Checkpointed setup: `body(status)` runs with the setup status. If a fault
  // is later dispatched to `udi` while `body` is running, the domain is
  // discarded and `body` runs again with ABNORMAL_EXIT, as if setup had
  // returned a second time.
  template <typename Body>
  void with_setup(Udi udi, Body&& body);

  // Destroys `udi` and its descendants (post-order), returning their heaps
  // to the arena. No-op on an uninitialized slot.
  void destroy(Udi udi);

  // Routes a capability fault: rewinds to the nearest live checkpoint on the
  // active chain, or applies the main-domain fault policy.
  [[noreturn]] void dispatch(FaultRecord fault);

  // -- heap facade -----------------------------------------------------------

  void heap_init();
  Expected<Capability, tlsf::AllocError> dalloc(std::size_t size);
  Expected<void, tlsf::AllocError> dfree(const Capability& cap);
  Expected<Capability, tlsf::AllocError> dcalloc(std::size_t count, std::size_t size);
  Expected<Capability, tlsf::AllocError> drealloc(const Capability& cap, std::size_t new_size);

  // -- guarded accesses (faults are dispatched) ------------------------------

  void store(const Capability& cap, std::size_t offset, std::span<const std::byte> data);
  std::vector<std::byte> load(const Capability& cap, std::size_t offset, std::size_t len);
  void load_into(const Capability& cap, std::size_t offset, std::span<std::byte> out);

  // -- inspection ------------------------------------------------------------

  Udi active_domain() const { return active_; }
  const DomainInfo& info(Udi udi) const { return domains_.at(udi); }
  tlsf::Control* heap(Udi udi) const { return domains_.at(udi).heap.get(); }
  MemoryArena& arena() { return arena_; }
  const MemoryArena& arena() const { return arena_; }
  const Capability& root() const { return root_; }
  std::size_t reserved_bytes() const { return arena_.reserved_bytes(); }
  const ManagerConfig& config() const { return config_; }
  std::size_t live_checkpoints() const { return live_tokens_.size(); }

 private:
  Manager(ManagerConfig config, std::pair<MemoryArena, Capability> arena);

  struct Frame {
    Udi udi;
    std::uint64_t token;
    Udi prev_active;
    std::size_t enter_depth;
    std::optional<std::uint64_t> prev_checkpoint;
  };

  static bool valid_udi(Udi udi) { return udi >= 1 && udi <= kNumberMaxDomain; }
  bool on_active_chain(Udi udi) const;
  std::size_t resolve_heap_size() const;
  DomainInfo& active_info() { return domains_[active_]; }

  Frame open_call(Udi udi);
  Frame bind_checkpoint(Udi udi);
  void close_frame(const Frame& frame);
  void abort_frame(const Frame& frame);

  ManagerConfig config_;
  MemoryArena arena_;
  Capability root_;
  std::array<DomainInfo, kDomainSlots> domains_;
  Udi active_ = kMainDomain;
  std::vector<Udi> enter_stack_;
  std::vector<std::uint64_t> live_tokens_;
  std::uint64_t next_token_ = 1;
};

template <typename F>
auto Manager::call(Udi udi, F&& routine) {
  using Raw = std::invoke_result_t<F&, Manager&>;
  using R = std::conditional_t<std::is_void_v<Raw>, std::monostate, Raw>;

  const Frame frame = open_call(udi);
  try {
    if constexpr (std::is_void_v<Raw>) {
      routine(*this);
      close_frame(frame);
      return DomainOutcome<R>::normal(std::monostate{});
    } else {
      R result = routine(*this);
      close_frame(frame);
      return DomainOutcome<R>::normal(std::move(result));
    }
  } catch (const detail::Rewind& rewind) {
    if (rewind.token != frame.token) {
      close_frame(frame);
      throw;
    }
    abort_frame(frame);
    return DomainOutcome<R>::aborted(rewind.fault, rewind.code);
  } catch (...) {
    close_frame(frame);
    throw;
  }
}

template <typename Body>
void Manager::with_setup(Udi udi, Body&& body) {
  const StatusCode status = setup(udi);
  if (!succeeded(status)) {
    body(status);
    return;
  }
  const Frame frame = bind_checkpoint(udi);
  try {
    body(status);
  } catch (const detail::Rewind& rewind) {
    if (rewind.token != frame.token) {
      close_frame(frame);
      throw;
    }
    abort_frame(frame);
    body(StatusCode::ABNORMAL_EXIT);
    return;
  } catch (...) {
    close_frame(frame);
    throw;
  }
  close_frame(frame);
}

}  // namespace sdrad
