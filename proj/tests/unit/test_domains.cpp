#include <doctest.h>

#include <cstdlib>
#include <random>

#include "oracles.hpp"
#include "sdrad/domains.hpp"

using namespace sdrad;

namespace {

ManagerConfig small_config() {
  ManagerConfig c;
  c.arena_size = std::size_t{16} << 20;
  c.heap_size = std::size_t{256} << 10;
  c.main_fault = MainFaultPolicy::Throw;
  return c;
}

std::vector<std::byte> filled(std::size_t n, std::uint8_t v = 0x41) { return std::vector<std::byte>(n, std::byte{v}); }

// Overflows a 16-byte heap buffer in the active domain.
void overflow(Manager& m) {
  auto buf = m.dalloc(5);
  REQUIRE(buf);
  m.store(*buf, 0, filled(20));
  FAIL("store past the buffer returned");
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    if (value) ::setenv(name, value, 1);
    else ::unsetenv(name);
  }
  ~ScopedEnv() {
    if (old_) ::setenv(name_, old_->c_str(), 1);
    else ::unsetenv(name_);
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

}  // namespace

TEST_CASE("status code sign convention") {
  CHECK(succeeded(StatusCode::SUCCESSFUL_INITIALIZE));
  CHECK(succeeded(StatusCode::ALREADY_INITIALIZE));
  CHECK(succeeded(StatusCode::SUCCESS));
  CHECK_FALSE(succeeded(StatusCode::UDI_OUT_OF_BOUNDS));
  CHECK_FALSE(succeeded(StatusCode::NOT_INITIALIZED));
  CHECK_FALSE(succeeded(StatusCode::ABNORMAL_EXIT));
}

TEST_CASE("setup") {
  Manager m(small_config());
  CHECK(m.setup(1) == StatusCode::SUCCESSFUL_INITIALIZE);
  CHECK(m.setup(1) == StatusCode::ALREADY_INITIALIZE);
  CHECK(m.setup(15) == StatusCode::SUCCESSFUL_INITIALIZE);
  CHECK(m.setup(0) == StatusCode::UDI_OUT_OF_BOUNDS);
  CHECK(m.setup(16) == StatusCode::UDI_OUT_OF_BOUNDS);
  CHECK(m.info(1).parent_udi == kMainDomain);
  CHECK(m.info(1).domain_init == InitState::INIT);
  CHECK(m.info(1).heap_init == InitState::UNINIT);
}

TEST_CASE("enter and exit") {
  Manager m(small_config());
  CHECK(m.enter(2) == StatusCode::NOT_INITIALIZED);
  CHECK(m.enter(16) == StatusCode::UDI_OUT_OF_BOUNDS);
  CHECK_FALSE(succeeded(m.exit()));

  REQUIRE(m.setup(1) == StatusCode::SUCCESSFUL_INITIALIZE);
  CHECK(m.enter(1) == StatusCode::SUCCESS);
  CHECK(m.active_domain() == 1);
  CHECK(m.setup(2) == StatusCode::SUCCESSFUL_INITIALIZE);
  CHECK(m.info(2).parent_udi == 1);
  CHECK(m.enter(2) == StatusCode::SUCCESS);
  CHECK(m.active_domain() == 2);
  CHECK(m.exit() == StatusCode::SUCCESS);
  CHECK(m.active_domain() == 1);
  CHECK(m.exit() == StatusCode::SUCCESS);
  CHECK(m.active_domain() == kMainDomain);
  CHECK(m.info(1).domain_init == InitState::INIT);
  CHECK(m.info(2).domain_init == InitState::INIT);
}

TEST_CASE("call returns Normal and keeps the domain") {
  Manager m(small_config());
  auto out = m.call(1, [](Manager& mm) {
    auto buf = mm.dalloc(32);
    REQUIRE(buf);
    mm.store(*buf, 0, filled(32));
    return mm.active_domain();
  });
  REQUIRE(out.is_normal());
  CHECK(out.value() == 1);
  CHECK(m.active_domain() == kMainDomain);
  CHECK(m.info(1).domain_init == InitState::INIT);
  CHECK(m.info(1).heap_init == InitState::INIT);
  CHECK(m.live_checkpoints() == 0);

  auto unit = m.call(1, [](Manager&) {});
  CHECK(unit.is_normal());
}

TEST_CASE("call aborts on a fault and discards the domain") {
  Manager m(small_config());
  const auto reserved = m.reserved_bytes();
  auto out = m.call(1, [](Manager& mm) {
    overflow(mm);
    return 0;
  });
  REQUIRE(out.is_aborted());
  CHECK(out.aborted_info().fault.kind == FaultKind::BoundsViolation);
  CHECK(out.aborted_info().fault.domain_udi == 1);
  CHECK(out.aborted_info().fault.access_len == 20);
  CHECK(out.aborted_info().rewind_code == 14);
  CHECK(m.active_domain() == kMainDomain);
  CHECK(m.info(1).domain_init == InitState::UNINIT);
  CHECK(m.heap(1) == nullptr);
  CHECK(m.reserved_bytes() == reserved);
  CHECK(m.live_checkpoints() == 0);
  CHECK(m.setup(1) == StatusCode::SUCCESSFUL_INITIALIZE);
}

TEST_CASE("call rejects invalid or executing udis") {
  Manager m(small_config());
  CHECK_THROWS_AS(m.call(0, [](Manager&) {}), DomainError);
  CHECK_THROWS_AS(m.call(16, [](Manager&) {}), DomainError);
  auto out = m.call(1, [](Manager& mm) {
    CHECK_THROWS_AS(mm.call(1, [](Manager&) {}), DomainError);
    return mm.active_domain();
  });
  REQUIRE(out.is_normal());
  CHECK(out.value() == 1);
}

TEST_CASE("other exceptions pass through a call and restore state") {
  Manager m(small_config());
  CHECK_THROWS_AS(m.call(3, [](Manager&) -> int { throw std::runtime_error("boom"); }), std::runtime_error);
  CHECK(m.active_domain() == kMainDomain);
  CHECK(m.live_checkpoints() == 0);
  CHECK(m.info(3).domain_init == InitState::INIT);
}

TEST_CASE("with_setup re-runs the body with ABNORMAL_EXIT") {
  Manager m(small_config());
  std::vector<StatusCode> seen;
  m.with_setup(1, [&](StatusCode status) {
    seen.push_back(status);
    if (succeeded(status)) {
      REQUIRE(m.enter(1) == StatusCode::SUCCESS);
      overflow(m);
    }
  });
  REQUIRE(seen.size() == 2);
  CHECK(seen[0] == StatusCode::SUCCESSFUL_INITIALIZE);
  CHECK(seen[1] == StatusCode::ABNORMAL_EXIT);
  CHECK(m.active_domain() == kMainDomain);
  CHECK(m.info(1).domain_init == InitState::UNINIT);

  seen.clear();
  m.with_setup(16, [&](StatusCode status) { seen.push_back(status); });
  CHECK(seen == std::vector<StatusCode>{StatusCode::UDI_OUT_OF_BOUNDS});
}

TEST_CASE("nested fault rewinds only the innermost call") {
  Manager m(small_config());
  bool middle_continued = false;
  auto outer = m.call(1, [&](Manager& mm) {
    REQUIRE(mm.dalloc(64));
    auto mid = mm.call(2, [&](Manager& m2) {
      REQUIRE(m2.dalloc(64));
      auto inner = m2.call(3, [](Manager& m3) {
        overflow(m3);
        return 0;
      });
      CHECK(inner.is_aborted());
      CHECK(inner.aborted_info().fault.domain_udi == 3);
      CHECK(m2.active_domain() == 2);
      middle_continued = true;
      return 2;
    });
    CHECK(mid.is_normal());
    return 1;
  });
  CHECK(outer.is_normal());
  CHECK(middle_continued);
  CHECK(m.active_domain() == kMainDomain);
  CHECK(m.info(1).domain_init == InitState::INIT);
  CHECK(m.info(2).domain_init == InitState::INIT);
  CHECK(m.info(2).parent_udi == 1);
  CHECK(m.info(3).domain_init == InitState::UNINIT);
}

TEST_CASE("fault in a domain entered without its own checkpoint rewinds to the enclosing call") {
  Manager m(small_config());
  auto out = m.call(1, [](Manager& mm) {
    REQUIRE(mm.setup(2) == StatusCode::SUCCESSFUL_INITIALIZE);
    REQUIRE(mm.enter(2) == StatusCode::SUCCESS);
    overflow(mm);
    return 0;
  });
  REQUIRE(out.is_aborted());
  CHECK(out.aborted_info().fault.domain_udi == 2);
  CHECK(m.info(1).domain_init == InitState::UNINIT);
  CHECK(m.info(2).domain_init == InitState::UNINIT);
  CHECK(m.active_domain() == kMainDomain);
}

TEST_CASE("fault in main is fatal") {
  Manager m(small_config());
  auto buf = m.dalloc(5);
  REQUIRE(buf);
  try {
    m.store(*buf, 0, filled(20));
    FAIL("no fault");
  } catch (const FatalFault& f) {
    CHECK(f.fault().kind == FaultKind::BoundsViolation);
    CHECK(f.fault().domain_udi == kMainDomain);
  }
}

TEST_CASE("destroy") {
  Manager m(small_config());
  const auto reserved = m.reserved_bytes();
  SUBCASE("live allocations are reclaimed") {
    REQUIRE(m.call(1, [](Manager& mm) {
                for (int i = 0; i < 3; ++i) REQUIRE(mm.dalloc(100));
              }).is_normal());
    CHECK(m.heap(1)->stats().live_allocations == 3);
    m.destroy(1);
    CHECK(m.reserved_bytes() == reserved);
    CHECK(m.info(1).domain_init == InitState::UNINIT);
    CHECK(m.setup(1) == StatusCode::SUCCESSFUL_INITIALIZE);
  }
  SUBCASE("children go with their parent") {
    REQUIRE(m.call(1, [](Manager& mm) {
                REQUIRE(mm.dalloc(16));
                REQUIRE(mm.call(2, [](Manager& m2) { REQUIRE(m2.dalloc(16)); }).is_normal());
              }).is_normal());
    REQUIRE(m.setup(4) == StatusCode::SUCCESSFUL_INITIALIZE);
    m.destroy(1);
    CHECK(m.info(1).domain_init == InitState::UNINIT);
    CHECK(m.info(2).domain_init == InitState::UNINIT);
    CHECK(m.info(4).domain_init == InitState::INIT);
    CHECK(m.reserved_bytes() == reserved);
  }
  SUBCASE("uninitialized slot is a no-op") {
    m.destroy(7);
    CHECK(m.reserved_bytes() == reserved);
  }
  SUBCASE("an executing domain cannot be destroyed") {
    REQUIRE(m.call(1, [](Manager& mm) { CHECK_THROWS_AS(mm.destroy(1), DomainError); }).is_normal());
  }
}

TEST_CASE("heap facade") {
  Manager m(small_config());
  SUBCASE("first dalloc creates the heap") {
    REQUIRE(m.setup(1) == StatusCode::SUCCESSFUL_INITIALIZE);
    REQUIRE(m.enter(1) == StatusCode::SUCCESS);
    CHECK(m.heap(1) == nullptr);
    auto five = m.dalloc(5);
    REQUIRE(five);
    CHECK(five->length() == 16);
    CHECK(m.info(1).heap_init == InitState::INIT);
    CHECK(m.heap(1)->stats().live_allocations == 1);
    REQUIRE(m.dfree(*five));
    CHECK(m.heap(1)->stats().live_allocations == 0);
    CHECK(m.dfree(*five).error() == tlsf::AllocError::DoubleFree);
    m.exit();
  }
  SUBCASE("domains allocate from disjoint regions and cannot free each other's memory") {
    Capability from1;
    Capability from2;
    REQUIRE(m.call(1, [&](Manager& mm) { from1 = *mm.dalloc(64); }).is_normal());
    REQUIRE(m.call(2, [&](Manager& mm) {
                from2 = *mm.dalloc(64);
                CHECK(mm.dfree(from1).error() == tlsf::AllocError::InvalidFree);
              }).is_normal());
    const auto r1 = *m.info(1).heap_region;
    const auto r2 = *m.info(2).heap_region;
    CHECK((r1.base + r1.length <= r2.base || r2.base + r2.length <= r1.base));
    CHECK(from1.base() >= r1.base);
    CHECK(from1.top() <= r1.base + r1.length);
    CHECK(from2.base() >= r2.base);
    CHECK(from2.top() <= r2.base + r2.length);
  }
  SUBCASE("dcalloc zero-fills") {
    auto a = *m.dalloc(16);
    m.store(a, 0, filled(16, 0xee));
    REQUIRE(m.dfree(a));
    auto z = m.dcalloc(4, 4);
    REQUIRE(z);
    CHECK(z->length() == 16);
    CHECK(m.load(*z, 0, 16) == std::vector<std::byte>(16, std::byte{0}));
    CHECK(m.dcalloc(std::size_t{1} << 40, std::size_t{1} << 40).error() == tlsf::AllocError::OutOfMemory);
  }
  SUBCASE("drealloc copies and frees") {
    auto a = *m.dalloc(16);
    std::vector<std::byte> pattern(16);
    for (std::size_t i = 0; i < 16; ++i) pattern[i] = std::byte(i + 1);
    m.store(a, 0, pattern);
    auto b = m.drealloc(a, 32);
    REQUIRE(b);
    CHECK(b->length() == 32);
    CHECK(m.load(*b, 0, 16) == pattern);
    CHECK(m.heap(0)->stats().live_allocations == 1);
    auto shrunk = m.drealloc(*b, 8);
    REQUIRE(shrunk);
    CHECK(m.load(*shrunk, 0, 16) == pattern);

    auto fresh = m.drealloc(Capability{}, 40);
    REQUIRE(fresh);
    CHECK(fresh->length() == 48);
  }
}

TEST_CASE("pool plan follows the splitting loop") {
  const std::size_t max = tlsf::kDefaultMaxPoolSize;
  CHECK(pool_plan(max, max) == std::vector<std::size_t>{max});
  CHECK(pool_plan(max * 5 / 2, max) == std::vector<std::size_t>{max, max, max / 2});
  CHECK(pool_plan(max * 4, max) == std::vector<std::size_t>{max, max, max, max});
  CHECK(pool_plan(1000, max) == std::vector<std::size_t>{1000});
}

TEST_CASE("heap_init builds the planned pools") {
  ManagerConfig c = small_config();
  c.max_pool_size = 64 << 10;
  c.heap_size = (64 << 10) * 5 / 2;
  Manager m(c);
  REQUIRE(m.dalloc(16));
  const auto pools = m.heap(0)->pools();
  REQUIRE(pools.size() == 3);
  CHECK(pools[0].size == 64 << 10);
  CHECK(pools[1].size == 64 << 10);
  CHECK(pools[2].size == 32 << 10);
  CHECK(pools[1].region.base() == pools[0].region.base() + pools[0].size);
}

TEST_CASE("heap size comes from APP_HEAP_SIZE when not configured") {
  ManagerConfig c = small_config();
  c.heap_size.reset();
  SUBCASE("unset falls back to the default") {
    ScopedEnv env(kHeapSizeEnvVar, nullptr);
    Manager m(c);
    REQUIRE(m.dalloc(16));
    CHECK(m.info(0).heap_region->length == kAppDefaultHeapSize);
  }
  SUBCASE("set") {
    ScopedEnv env(kHeapSizeEnvVar, "131072");
    Manager m(c);
    REQUIRE(m.dalloc(16));
    CHECK(m.info(0).heap_region->length == 131072);
  }
  SUBCASE("malformed") {
    ScopedEnv env(kHeapSizeEnvVar, "12k");
    CHECK_THROWS_AS(heap_size_from_env(1), ConfigError);
    ScopedEnv zero(kHeapSizeEnvVar, "0");
    CHECK_THROWS_AS(heap_size_from_env(1), ConfigError);
  }
}

TEST_CASE("arena exhaustion at heap_init is a configuration error") {
  ManagerConfig c = small_config();
  c.arena_size = 1 << 16;
  Manager m(c);
  CHECK_THROWS_AS(m.dalloc(16), ConfigError);
}

TEST_CASE("random call traces leave the manager as they found it") {
  std::mt19937_64 rng(11);
  Manager m(small_config());
  const auto baseline = m.reserved_bytes();
  std::size_t aborted = 0;
  for (int i = 0; i < 500; ++i) {
    const Udi udi = 1 + rng() % kNumberMaxDomain;
    const bool bad = rng() % 3 == 0;
    std::vector<InitState> before;
    for (Udi u = 1; u <= kNumberMaxDomain; ++u) before.push_back(m.info(u).domain_init);
    auto out = m.call(udi, [&](Manager& mm) {
      for (int k = 0; k < 4; ++k) REQUIRE(mm.dalloc(rng() % 300));
      if (bad) overflow(mm);
    });
    CHECK(m.active_domain() == kMainDomain);
    CHECK(out.is_aborted() == bad);
    for (Udi u = 1; u <= kNumberMaxDomain; ++u) {
      if (u == udi) continue;
      CHECK(m.info(u).domain_init == before[u - 1]);
    }
    if (bad) {
      ++aborted;
      CHECK(m.info(udi).domain_init == InitState::UNINIT);
    }
  }
  CHECK(aborted > 0);
  for (Udi u = 1; u <= kNumberMaxDomain; ++u) m.destroy(u);
  CHECK(m.reserved_bytes() == baseline);
}
